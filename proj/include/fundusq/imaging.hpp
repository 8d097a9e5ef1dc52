#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

namespace fundusq::imaging {

/// Interleaved RGB raster (row-major, HWC). Values are either raw intensities
/// in [0,255] or normalized intensities in [0,1], as indicated by the flag.
class ImageTensor {
 public:
  static constexpr int kChannels = 3;

  ImageTensor() = default;
  /// Zero-filled image. Throws InvalidImage on non-positive dimensions.
  ImageTensor(int height, int width, bool normalized = false);
  /// Takes ownership of `values`; checks the size and the value range.
  ImageTensor(int height, int width, std::vector<float> values, bool normalized);

  int height() const { return height_; }
  int width() const { return width_; }
  int channels() const { return kChannels; }
  bool normalized() const { return normalized_; }
  bool empty() const { return values_.empty(); }
  std::size_t size() const { return values_.size(); }

  float& at(int y, int x, int c) { return values_[index(y, x, c)]; }
  float at(int y, int x, int c) const { return values_[index(y, x, c)]; }

  std::span<const float> values() const { return values_; }
  std::span<float> values() { return values_; }

  /// Upper bound of the value range for the current normalization state.
  float range_max() const { return normalized_ ? 1.0f : 255.0f; }

  /// Throws InvalidImage when a value lies outside the declared range.
  void check_range() const;

  double sum() const;

  friend bool operator==(const ImageTensor&, const ImageTensor&) = default;

 private:
  std::size_t index(int y, int x, int c) const {
    return (static_cast<std::size_t>(y) * width_ + x) * kChannels + c;
  }

  int height_ = 0;
  int width_ = 0;
  bool normalized_ = false;
  std::vector<float> values_;
};

enum class Interpolation { bilinear };
enum class Squaring { pad_black };

struct PreprocessConfig {
  int target_size = 224;
  int border_threshold = 10;
  Interpolation interpolation = Interpolation::bilinear;
  Squaring squaring = Squaring::pad_black;

  /// Throws ValidationError when target_size < 32 or the threshold is outside [0,255].
  void validate() const;

  friend bool operator==(const PreprocessConfig&, const PreprocessConfig&) = default;
};

void to_json(nlohmann::json& j, const PreprocessConfig& c);
/// Rejects unknown keys.
void from_json(const nlohmann::json& j, PreprocessConfig& c);

/// Strips outer rows and columns whose brightest channel value is <= threshold
/// across the whole row/column. Interior dark rows are kept.
ImageTensor crop_black_borders(const ImageTensor& image, int threshold);

/// Centers the image on a black square canvas of side max(height, width).
/// When the padding is odd, the extra row/column goes to the bottom/right.
ImageTensor square_pad(const ImageTensor& image);

/// Bilinear resampling with pixel-center alignment and edge clamping.
ImageTensor resize(const ImageTensor& image, int height, int width);
inline ImageTensor resize(const ImageTensor& image, int size) { return resize(image, size, size); }

/// Bilinear resampling of a single-channel row-major plane.
std::vector<float> resize_plane(std::span<const float> plane, int height, int width,
                                int out_height, int out_width);

/// Raw [0,255] -> [0,1].
ImageTensor normalize(const ImageTensor& image);

/// crop_black_borders -> square_pad -> resize -> normalize. Deterministic.
ImageTensor preprocess(const ImageTensor& image, const PreprocessConfig& config);

// Decode boundary. Files and buffers are decoded to raw RGB.

ImageTensor load_image(const std::filesystem::path& path);
ImageTensor decode_image(std::span<const std::uint8_t> bytes);
/// Writes PNG (or any format OpenCV infers from the extension). Normalized
/// images are scaled back to [0,255]; values are rounded and saturated.
void write_image(const ImageTensor& image, const std::filesystem::path& path);
std::vector<std::uint8_t> encode_png(const ImageTensor& image);

}  // namespace fundusq::imaging
