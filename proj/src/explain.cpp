#include "fundusq/explain.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <regex>

#include <fmt/format.h>
#include <opencv2/imgproc.hpp>

#include "fundusq/errors.hpp"

namespace fundusq::explain {

LayerGradients layer_gradients(const qmodel::QualityNet& model, const nn::Tensor& sample, const std::string& layer) {
  if (sample.shape.n != 1) throw ShapeMismatch("grad-cam expects a single-sample batch");
  const long idx = model.backbone().index_of(layer);
  if (idx < 0) throw UnknownLayer("backbone has no layer named '" + layer + "'");
  if (model.output_width() != 1) {
    throw NonScalarOutput(fmt::format("head produces {} outputs; grad-cam needs a scalar", model.output_width()));
  }
  qmodel::QualityNet work = model;
  nn::Taps taps;
  const nn::Tensor y = work.forward(sample, nn::Mode::inference, &taps);
  work.backward(nn::Tensor(y.shape, 1.0f), &taps);
  return {std::move(taps.outputs[idx]), std::move(taps.output_grads[idx]), y.data[0]};
}

CamHeatmap grad_cam(const qmodel::QualityNet& model, const imaging::ImageTensor& input, const GradCamOptions& options) {
  const std::string layer = options.layer.empty() ? model.last_feature_layer() : options.layer;
  const auto g = layer_gradients(model, model.to_batch(std::span(&input, 1)), layer);
  const auto& a = g.activations;
  const int c = a.shape.c, h = a.shape.h, w = a.shape.w;
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  const double sign = options.invert ? -1.0 : 1.0;

  std::vector<double> raw(plane, 0.0);
  for (int k = 0; k < c; ++k) {
    const float* grad = g.gradients.data.data() + k * plane;
    double weight = 0.0;
    for (std::size_t i = 0; i < plane; ++i) weight += grad[i];
    weight = sign * weight / static_cast<double>(plane);
    const float* act = a.data.data() + k * plane;
    for (std::size_t i = 0; i < plane; ++i) raw[i] += weight * act[i];
  }
  std::vector<float> rect(plane);
  for (std::size_t i = 0; i < plane; ++i) rect[i] = static_cast<float>(std::max(raw[i], 0.0));

  CamHeatmap out;
  out.height = input.height();
  out.width = input.width();
  out.source_layer = layer;
  out.image_ref = options.image_ref;
  out.values = imaging::resize_plane(rect, h, w, out.height, out.width);
  const auto [lo, hi] = std::minmax_element(out.values.begin(), out.values.end());
  const double min = *lo, max = *hi;
  if (!(max > min)) {
    std::fill(out.values.begin(), out.values.end(), 0.0f);
  } else {
    for (float& v : out.values) v = static_cast<float>((v - min) / (max - min));
  }
  return out;
}

const std::array<std::array<std::uint8_t, 3>, 256>& viridis_table() {
  static const auto table = [] {
    cv::Mat ramp(1, 256, CV_8UC1);
    for (int i = 0; i < 256; ++i) ramp.at<std::uint8_t>(0, i) = static_cast<std::uint8_t>(i);
    cv::Mat bgr;
    cv::applyColorMap(ramp, bgr, cv::COLORMAP_VIRIDIS);
    std::array<std::array<std::uint8_t, 3>, 256> t{};
    for (int i = 0; i < 256; ++i) {
      const auto px = bgr.at<cv::Vec3b>(0, i);
      t[i] = {px[2], px[1], px[0]};
    }
    return t;
  }();
  return table;
}

imaging::ImageTensor colorize(const CamHeatmap& heatmap) {
  const auto& lut = viridis_table();
  imaging::ImageTensor out(heatmap.height, heatmap.width, true);
  for (int y = 0; y < heatmap.height; ++y) {
    for (int x = 0; x < heatmap.width; ++x) {
      const double v = std::clamp(static_cast<double>(heatmap.at(y, x)), 0.0, 1.0);
      const auto& rgb = lut[static_cast<std::size_t>(std::lround(v * 255.0))];
      for (int ch = 0; ch < 3; ++ch) out.at(y, x, ch) = static_cast<float>(rgb[ch] / 255.0);
    }
  }
  return out;
}

imaging::ImageTensor overlay(const CamHeatmap& heatmap, const imaging::ImageTensor& image, double alpha) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw ValidationError("overlay alpha must be in [0,1]");
  if (heatmap.height <= 0 || heatmap.width <= 0 ||
      heatmap.values.size() != static_cast<std::size_t>(heatmap.height) * heatmap.width) {
    throw DimensionMismatch("heatmap is empty or inconsistent");
  }
  if (static_cast<long>(heatmap.height) * image.width() != static_cast<long>(heatmap.width) * image.height()) {
    throw DimensionMismatch(fmt::format("heatmap {}x{} does not match image {}x{}", heatmap.height, heatmap.width,
                                        image.height(), image.width()));
  }
  if (alpha == 0.0) return image;

  CamHeatmap fitted = heatmap;
  if (heatmap.height != image.height() || heatmap.width != image.width()) {
    fitted.values = imaging::resize_plane(heatmap.values, heatmap.height, heatmap.width, image.height(), image.width());
    fitted.height = image.height();
    fitted.width = image.width();
  }
  const auto color = colorize(fitted);
  const double scale = image.range_max();
  imaging::ImageTensor out(image.height(), image.width(), image.normalized());
  auto dst = out.values();
  const auto src = image.values();
  const auto col = color.values();
  for (std::size_t i = 0; i < dst.size(); ++i) {
    const double v = (1.0 - alpha) * src[i] + alpha * col[i] * scale;
    dst[i] = static_cast<float>(std::clamp(v, 0.0, scale));
  }
  return out;
}

void write_npy(const CamHeatmap& heatmap, const std::filesystem::path& path) {
  std::string header =
      fmt::format("{{'descr': '<f4', 'fortran_order': False, 'shape': ({}, {}), }}", heatmap.height, heatmap.width);
  const std::size_t unpadded = 10 + header.size() + 1;
  header.append((64 - unpadded % 64) % 64, ' ');
  header.push_back('\n');

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot write '" + path.string() + "'");
  f.write("\x93NUMPY\x01\x00", 8);
  const auto len = static_cast<std::uint16_t>(header.size());
  const char len_bytes[2] = {static_cast<char>(len & 0xff), static_cast<char>(len >> 8)};
  f.write(len_bytes, 2);
  f.write(header.data(), static_cast<std::streamsize>(header.size()));
  for (float v : heatmap.values) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    const char b[4] = {static_cast<char>(bits & 0xff), static_cast<char>((bits >> 8) & 0xff),
                       static_cast<char>((bits >> 16) & 0xff), static_cast<char>(bits >> 24)};
    f.write(b, 4);
  }
  if (!f) throw IoError("failed writing '" + path.string() + "'");
}

CamHeatmap read_npy(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot read '" + path.string() + "'");
  std::string bytes((std::istreambuf_iterator<char>(f)), {});
  if (bytes.size() < 10 || bytes.compare(0, 6, "\x93NUMPY") != 0 || bytes[6] != 1) {
    throw ParseError("not a version-1 npy file");
  }
  const std::size_t len = static_cast<std::uint8_t>(bytes[8]) | (static_cast<std::uint8_t>(bytes[9]) << 8);
  if (bytes.size() < 10 + len) throw ParseError("truncated npy header");
  const std::string header = bytes.substr(10, len);
  std::smatch m;
  if (header.find("'<f4'") == std::string::npos || header.find("False") == std::string::npos ||
      !std::regex_search(header, m, std::regex(R"('shape': \((\d+), (\d+)\))"))) {
    throw ParseError("unsupported npy header: " + header);
  }
  CamHeatmap out;
  out.height = std::stoi(m[1]);
  out.width = std::stoi(m[2]);
  const std::size_t n = static_cast<std::size_t>(out.height) * out.width;
  if (bytes.size() != 10 + len + 4 * n) throw ParseError("npy payload size mismatch");
  out.values.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(bytes.data() + 10 + len + 4 * i);
    const std::uint32_t bits = p[0] | (p[1] << 8) | (p[2] << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
    std::memcpy(&out.values[i], &bits, 4);
  }
  return out;
}

}  // namespace fundusq::explain
