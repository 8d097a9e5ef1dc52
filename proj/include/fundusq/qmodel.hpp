#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "fundusq/imaging.hpp"
#include "fundusq/nn.hpp"

namespace fundusq::qmodel {

enum class Backbone { inception_v3_like, small_cnn_test };
enum class Head { classify3, regress1 };
enum class PretrainedInit { random, imagenet, checkpoint };
enum class Stage { pretrain, regression, student };

std::string to_string(Backbone b);
std::string to_string(Head h);
std::string to_string(PretrainedInit p);
std::string to_string(Stage s);
Stage parse_stage(const std::string& s);

struct ModelConfig {
  Backbone backbone = Backbone::inception_v3_like;
  int input_size = 224;
  Head head = Head::regress1;
  PretrainedInit pretrained_init = PretrainedInit::random;
  /// Checkpoint whose backbone weights seed the model when pretrained_init is
  /// imagenet or checkpoint.
  std::string init_weights;
  /// Width of the hidden fully-connected layer of the regression head.
  int head_hidden = 256;
  /// Leading backbone stages excluded from optimization (0 = full fine-tuning).
  int freeze_depth = 0;
  std::uint64_t seed = 0;

  void validate() const;
  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
/// Rejects unknown keys.
void from_json(const nlohmann::json& j, ModelConfig& c);

/// Backbone + head. The backbone ends in global average pooling; its
/// top-level children are the addressable layers (e.g. for Grad-CAM).
class QualityNet {
 public:
  QualityNet(ModelConfig config, imaging::PreprocessConfig preprocess, nn::Sequential backbone,
             nn::Sequential head);

  const ModelConfig& config() const { return config_; }
  const imaging::PreprocessConfig& preprocess() const { return preprocess_; }
  nn::Sequential& backbone() { return backbone_; }
  const nn::Sequential& backbone() const { return backbone_; }
  nn::Sequential& head() { return head_; }
  const nn::Sequential& head() const { return head_; }

  int feature_width() const;
  int output_width() const;

  /// Converts preprocessed images into an NCHW batch. Throws ShapeMismatch for
  /// raw images or a size different from the configured input size.
  nn::Tensor to_batch(std::span<const imaging::ImageTensor> images) const;

  /// Pure inference (batch-norm running statistics, no caching).
  nn::Tensor infer(const nn::Tensor& batch) const;
  nn::Tensor infer_features(const nn::Tensor& batch) const;

  /// Training-path forward/backward through backbone then head.
  nn::Tensor forward(const nn::Tensor& batch, nn::Mode mode, nn::Taps* backbone_taps = nullptr);
  nn::Tensor backward(const nn::Tensor& grad_out, nn::Taps* backbone_taps = nullptr);

  std::vector<nn::StateRef> state();
  std::vector<nn::Parameter*> trainable_parameters();
  /// Applies config().freeze_depth to the backbone parameters.
  void apply_freeze();
  void clear_cache();

  /// Once set, training entry points refuse to mutate this model.
  void set_inference_only(bool value) { inference_only_ = value; }
  bool inference_only() const { return inference_only_; }

  /// Default Grad-CAM layer: the last backbone child before global pooling.
  std::string last_feature_layer() const;

 private:
  ModelConfig config_;
  imaging::PreprocessConfig preprocess_;
  nn::Sequential backbone_;
  nn::Sequential head_;
  bool inference_only_ = false;
};

nn::Sequential make_backbone(Backbone backbone, int input_size);
nn::Sequential make_head(Head head, int features, int hidden);

/// Builds a seed-initialized model. Throws UnsupportedConfig for invalid
/// configurations, missing pretrained weights, or a preprocess target size
/// that differs from input_size.
QualityNet build_model(const ModelConfig& config, const imaging::PreprocessConfig& preprocess);

/// Replaces a classify3 head with FC(hidden) -> ReLU -> FC(1). Backbone
/// weights are untouched; the new head is seeded from config().seed.
QualityNet swap_head_regression(QualityNet model);

/// One finite score per preprocessed image. Requires a regress1 head.
std::vector<double> predict_scores(const QualityNet& model, std::span<const imaging::ImageTensor> batch);

// Checkpoints ---------------------------------------------------------------------

struct CheckpointMeta {
  Stage stage = Stage::pretrain;
  nlohmann::json metrics_snapshot;  // null when absent
  std::string created;              // ISO-8601 UTC
};

struct ModelCheckpoint {
  QualityNet model;
  CheckpointMeta meta;
  /// Hex SHA-256 of the weights blob; doubles as the model version.
  std::string content_hash;
};

/// Container layout: 8-byte magic "FQCKPT01", little-endian u64 header length,
/// JSON header (config, preprocess, stage, metrics, created, tensor index,
/// weights hash), then the float32 little-endian weights blob. Writes are
/// atomic (temporary file + rename). Returns the content hash.
std::string save_checkpoint(QualityNet& model, const CheckpointMeta& meta, const std::filesystem::path& path);

/// Throws IoError when the file cannot be read and CorruptCheckpoint when it
/// is truncated, malformed or fails the hash check.
ModelCheckpoint load_checkpoint(const std::filesystem::path& path);

/// Copies every state tensor whose name and size match from `source`.
/// Returns the number of tensors copied.
std::size_t copy_matching_state(QualityNet& target, QualityNet& source, const std::string& name_prefix = "");

/// Hash of the serialized weights, equal to the content hash a checkpoint
/// written now would carry.
std::string weights_hash(QualityNet& model);

std::string sha256_hex(std::span<const std::uint8_t> bytes);
std::string utc_now_iso8601();

/// Writes an ONNX model (opset 13) computing the same function as infer():
/// input "input" [N,3,S,S] float, output "score" or "logits".
void export_onnx(QualityNet& model, const std::filesystem::path& path);

}  // namespace fundusq::qmodel
