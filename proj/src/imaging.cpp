#include "fundusq/imaging.hpp"

#include <algorithm>
#include <cmath>

#include <fmt/format.h>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "fundusq/errors.hpp"

namespace fundusq::imaging {

ImageTensor::ImageTensor(int height, int width, bool normalized)
    : height_(height), width_(width), normalized_(normalized) {
  if (height <= 0 || width <= 0) {
    throw InvalidImage(fmt::format("image dimensions must be positive, got {}x{}", height, width));
  }
  values_.assign(static_cast<std::size_t>(height) * width * kChannels, 0.0f);
}

ImageTensor::ImageTensor(int height, int width, std::vector<float> values, bool normalized)
    : height_(height), width_(width), normalized_(normalized), values_(std::move(values)) {
  if (height <= 0 || width <= 0) {
    throw InvalidImage(fmt::format("image dimensions must be positive, got {}x{}", height, width));
  }
  if (values_.size() != static_cast<std::size_t>(height) * width * kChannels) {
    throw InvalidImage(fmt::format("expected {} values for a {}x{}x3 image, got {}",
                                   static_cast<std::size_t>(height) * width * kChannels, height,
                                   width, values_.size()));
  }
  check_range();
}

void ImageTensor::check_range() const {
  const float hi = range_max();
  for (float v : values_) {
    if (!(v >= 0.0f && v <= hi)) {
      throw InvalidImage(fmt::format("value {} outside [0,{}]", v, hi));
    }
  }
}

double ImageTensor::sum() const {
  double s = 0.0;
  for (float v : values_) s += v;
  return s;
}

void PreprocessConfig::validate() const {
  if (target_size < 32) {
    throw ValidationError(fmt::format("target_size must be >= 32, got {}", target_size));
  }
  if (border_threshold < 0 || border_threshold > 255) {
    throw ValidationError(fmt::format("border_threshold must be in [0,255], got {}", border_threshold));
  }
}

void to_json(nlohmann::json& j, const PreprocessConfig& c) {
  j = nlohmann::json{{"target_size", c.target_size},
                     {"border_threshold", c.border_threshold},
                     {"interpolation", "bilinear"},
                     {"squaring", "pad_black"}};
}

void from_json(const nlohmann::json& j, PreprocessConfig& c) {
  if (!j.is_object()) throw ValidationError("preprocess config must be an object");
  PreprocessConfig out;
  for (const auto& [key, value] : j.items()) {
    if (key == "target_size") {
      out.target_size = value.get<int>();
    } else if (key == "border_threshold") {
      out.border_threshold = value.get<int>();
    } else if (key == "interpolation") {
      if (value.get<std::string>() != "bilinear") {
        throw ValidationError("unsupported interpolation '" + value.get<std::string>() + "'");
      }
    } else if (key == "squaring") {
      if (value.get<std::string>() != "pad_black") {
        throw ValidationError("unsupported squaring '" + value.get<std::string>() + "'");
      }
    } else {
      throw ValidationError("unknown preprocess key '" + key + "'");
    }
  }
  out.validate();
  c = out;
}

ImageTensor crop_black_borders(const ImageTensor& image, int threshold) {
  if (image.normalized()) throw InvalidImage("crop_black_borders expects a raw image");
  if (threshold < 0 || threshold > 255) {
    throw ValidationError(fmt::format("threshold must be in [0,255], got {}", threshold));
  }
  const float t = static_cast<float>(threshold);
  int top = image.height(), bottom = -1, left = image.width(), right = -1;
  for (int y = 0; y < image.height(); ++y) {
    for (int x = 0; x < image.width(); ++x) {
      const float m = std::max({image.at(y, x, 0), image.at(y, x, 1), image.at(y, x, 2)});
      if (m > t) {
        top = std::min(top, y);
        bottom = std::max(bottom, y);
        left = std::min(left, x);
        right = std::max(right, x);
      }
    }
  }
  if (bottom < 0) {
    throw AllBlackImage(fmt::format("no pixel brighter than {} in a {}x{} image", threshold,
                                    image.height(), image.width()));
  }
  const int h = bottom - top + 1;
  const int w = right - left + 1;
  if (h == image.height() && w == image.width()) return image;
  ImageTensor out(h, w, false);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      for (int c = 0; c < 3; ++c) out.at(y, x, c) = image.at(top + y, left + x, c);
    }
  }
  return out;
}

ImageTensor square_pad(const ImageTensor& image) {
  if (image.empty()) throw InvalidImage("square_pad on an empty image");
  const int side = std::max(image.height(), image.width());
  if (image.height() == side && image.width() == side) return image;
  ImageTensor out(side, side, image.normalized());
  const int dy = (side - image.height()) / 2;
  const int dx = (side - image.width()) / 2;
  for (int y = 0; y < image.height(); ++y) {
    for (int x = 0; x < image.width(); ++x) {
      for (int c = 0; c < 3; ++c) out.at(dy + y, dx + x, c) = image.at(y, x, c);
    }
  }
  return out;
}

namespace {

struct Tap {
  int i0, i1;
  float w1;  // weight of i1; i0 gets 1 - w1
};

// Source taps for one output axis. Pixel centers are aligned:
// src = (dst + 0.5) * in / out - 0.5, clamped to the valid range.
std::vector<Tap> axis_taps(int in, int out) {
  std::vector<Tap> taps(out);
  const double scale = static_cast<double>(in) / out;
  for (int d = 0; d < out; ++d) {
    double s = (d + 0.5) * scale - 0.5;
    s = std::clamp(s, 0.0, static_cast<double>(in - 1));
    const int i0 = static_cast<int>(std::floor(s));
    const int i1 = std::min(i0 + 1, in - 1);
    taps[d] = {i0, i1, static_cast<float>(s - i0)};
  }
  return taps;
}

}  // namespace

ImageTensor resize(const ImageTensor& image, int height, int width) {
  if (image.empty()) throw InvalidImage("resize on an empty image");
  if (height < 1 || width < 1) {
    throw ValidationError(fmt::format("resize target must be >= 1, got {}x{}", height, width));
  }
  if (height == image.height() && width == image.width()) return image;
  const auto ty = axis_taps(image.height(), height);
  const auto tx = axis_taps(image.width(), width);
  ImageTensor out(height, width, image.normalized());
  const float hi = image.range_max();
  for (int y = 0; y < height; ++y) {
    const Tap& a = ty[y];
    for (int x = 0; x < width; ++x) {
      const Tap& b = tx[x];
      for (int c = 0; c < 3; ++c) {
        const float top = image.at(a.i0, b.i0, c) * (1.0f - b.w1) + image.at(a.i0, b.i1, c) * b.w1;
        const float bot = image.at(a.i1, b.i0, c) * (1.0f - b.w1) + image.at(a.i1, b.i1, c) * b.w1;
        // Float rounding can step a hair outside the input range.
        out.at(y, x, c) = std::clamp(top * (1.0f - a.w1) + bot * a.w1, 0.0f, hi);
      }
    }
  }
  return out;
}

std::vector<float> resize_plane(std::span<const float> plane, int height, int width,
                                int out_height, int out_width) {
  if (plane.size() != static_cast<std::size_t>(height) * width || height < 1 || width < 1) {
    throw DimensionMismatch("plane size does not match its dimensions");
  }
  const auto ty = axis_taps(height, out_height);
  const auto tx = axis_taps(width, out_width);
  std::vector<float> out(static_cast<std::size_t>(out_height) * out_width);
  for (int y = 0; y < out_height; ++y) {
    const Tap& a = ty[y];
    for (int x = 0; x < out_width; ++x) {
      const Tap& b = tx[x];
      const auto px = [&](int r, int c) { return plane[static_cast<std::size_t>(r) * width + c]; };
      const float top = px(a.i0, b.i0) * (1.0f - b.w1) + px(a.i0, b.i1) * b.w1;
      const float bot = px(a.i1, b.i0) * (1.0f - b.w1) + px(a.i1, b.i1) * b.w1;
      out[static_cast<std::size_t>(y) * out_width + x] = top * (1.0f - a.w1) + bot * a.w1;
    }
  }
  return out;
}

ImageTensor normalize(const ImageTensor& image) {
  if (image.normalized()) return image;
  std::vector<float> v(image.values().begin(), image.values().end());
  for (float& x : v) x = std::clamp(x / 255.0f, 0.0f, 1.0f);
  return ImageTensor(image.height(), image.width(), std::move(v), true);
}

ImageTensor preprocess(const ImageTensor& image, const PreprocessConfig& config) {
  config.validate();
  if (image.normalized()) throw InvalidImage("preprocess expects a raw image");
  auto cropped = crop_black_borders(image, config.border_threshold);
  auto squared = square_pad(cropped);
  auto resized = resize(squared, config.target_size);
  return normalize(resized);
}

namespace {

ImageTensor from_bgr_mat(const cv::Mat& decoded) {
  cv::Mat rgb;
  switch (decoded.channels()) {
    case 1: cv::cvtColor(decoded, rgb, cv::COLOR_GRAY2RGB); break;
    case 3: cv::cvtColor(decoded, rgb, cv::COLOR_BGR2RGB); break;
    case 4: cv::cvtColor(decoded, rgb, cv::COLOR_BGRA2RGB); break;
    default: throw DecodeError(fmt::format("unsupported channel count {}", decoded.channels()));
  }
  cv::Mat as_float;
  if (rgb.depth() == CV_16U) {
    rgb.convertTo(as_float, CV_32FC3, 255.0 / 65535.0);
  } else {
    rgb.convertTo(as_float, CV_32FC3);
  }
  std::vector<float> values(as_float.total() * 3);
  for (int y = 0; y < as_float.rows; ++y) {
    const float* row = as_float.ptr<float>(y);
    std::copy(row, row + as_float.cols * 3, values.begin() + static_cast<std::ptrdiff_t>(y) * as_float.cols * 3);
  }
  return ImageTensor(as_float.rows, as_float.cols, std::move(values), false);
}

cv::Mat to_bgr_mat(const ImageTensor& image) {
  cv::Mat rgb(image.height(), image.width(), CV_8UC3);
  const float scale = image.normalized() ? 255.0f : 1.0f;
  for (int y = 0; y < image.height(); ++y) {
    auto* row = rgb.ptr<std::uint8_t>(y);
    for (int x = 0; x < image.width(); ++x) {
      for (int c = 0; c < 3; ++c) {
        const float v = std::round(image.at(y, x, c) * scale);
        row[x * 3 + c] = static_cast<std::uint8_t>(std::clamp(v, 0.0f, 255.0f));
      }
    }
  }
  cv::Mat bgr;
  cv::cvtColor(rgb, bgr, cv::COLOR_RGB2BGR);
  return bgr;
}

}  // namespace

ImageTensor load_image(const std::filesystem::path& path) {
  cv::Mat decoded = cv::imread(path.string(), cv::IMREAD_UNCHANGED | cv::IMREAD_ANYDEPTH);
  if (decoded.empty()) throw DecodeError("cannot decode image '" + path.string() + "'");
  return from_bgr_mat(decoded);
}

ImageTensor decode_image(std::span<const std::uint8_t> bytes) {
  if (bytes.empty()) throw DecodeError("empty image buffer");
  const cv::Mat buffer(1, static_cast<int>(bytes.size()), CV_8UC1, const_cast<std::uint8_t*>(bytes.data()));
  cv::Mat decoded = cv::imdecode(buffer, cv::IMREAD_UNCHANGED | cv::IMREAD_ANYDEPTH);
  if (decoded.empty()) throw DecodeError("cannot decode image buffer");
  return from_bgr_mat(decoded);
}

void write_image(const ImageTensor& image, const std::filesystem::path& path) {
  if (!cv::imwrite(path.string(), to_bgr_mat(image))) {
    throw IoError("cannot write image '" + path.string() + "'");
  }
}

std::vector<std::uint8_t> encode_png(const ImageTensor& image) {
  std::vector<std::uint8_t> out;
  if (!cv::imencode(".png", to_bgr_mat(image), out)) throw IoError("PNG encoding failed");
  return out;
}

}  // namespace fundusq::imaging
