#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "fundusq/imaging.hpp"
#include "fundusq/nn.hpp"
#include "fundusq/qmodel.hpp"

namespace fundusq::explain {

struct CamHeatmap {
  int height = 0;
  int width = 0;
  /// Row-major, values in [0,1].
  std::vector<float> values;
  std::string source_layer;
  std::string image_ref;

  float at(int y, int x) const { return values[static_cast<std::size_t>(y) * width + x]; }
};

struct GradCamOptions {
  /// Backbone child to explain; empty selects model.last_feature_layer().
  std::string layer;
  /// Negates the gradients, highlighting regions that lower the score.
  bool invert = false;
  std::string image_ref;
};

/// Activations of a backbone layer and the gradient of the scalar output with
/// respect to them, for a single-sample batch.
struct LayerGradients {
  nn::Tensor activations;
  nn::Tensor gradients;
  double output = 0.0;
};

/// Throws UnknownLayer when `layer` is not a backbone child and
/// NonScalarOutput unless the head produces one value per sample.
LayerGradients layer_gradients(const qmodel::QualityNet& model, const nn::Tensor& sample, const std::string& layer);

/// Channel weights are the spatial means of the gradients; the map is the
/// rectified weighted channel sum, upsampled bilinearly to the input size and
/// min-max normalized. A constant raw map yields all zeros.
CamHeatmap grad_cam(const qmodel::QualityNet& model, const imaging::ImageTensor& input,
                    const GradCamOptions& options = {});

/// The 256-entry viridis table, RGB.
const std::array<std::array<std::uint8_t, 3>, 256>& viridis_table();

/// Heatmap rendered through the colormap as a normalized RGB image.
imaging::ImageTensor colorize(const CamHeatmap& heatmap);

/// (1 - alpha) * image + alpha * colormap(heatmap), in the image's value
/// range. The heatmap is resampled to the image size when the aspect ratios
/// agree; otherwise DimensionMismatch is thrown.
imaging::ImageTensor overlay(const CamHeatmap& heatmap, const imaging::ImageTensor& image, double alpha);

/// NumPy .npy (float32, C order, shape [H, W]).
void write_npy(const CamHeatmap& heatmap, const std::filesystem::path& path);
CamHeatmap read_npy(const std::filesystem::path& path);

}  // namespace fundusq::explain
