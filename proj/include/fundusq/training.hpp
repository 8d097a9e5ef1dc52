#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "fundusq/datasets.hpp"
#include "fundusq/nn.hpp"
#include "fundusq/qmodel.hpp"

namespace fundusq::training {

enum class Loss { categorical_cross_entropy, rmse };
enum class StudentInit { teacher, random, pretrain };

std::string to_string(Loss l);
std::string to_string(StudentInit s);

struct TrainConfig {
  Loss loss = Loss::rmse;
  nn::AdamOptions adam;
  int batch_size = 32;
  int max_epochs = 100;
  /// Epochs without improvement of the validation objective before stopping.
  int patience = 10;
  std::uint64_t seed = 0;
  StudentInit student_init = StudentInit::teacher;
  /// Pre-training checkpoint used when student_init is pretrain.
  std::string pretrain_checkpoint;
  datasets::PseudoPolicy pseudo_policy = datasets::PseudoPolicy::pooled_redraw;
  double pseudo_validation_fraction = 0.05;

  void validate() const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
/// Rejects unknown keys.
void from_json(const nlohmann::json& j, TrainConfig& c);

struct EpochLog {
  int epoch = 0;
  double train_loss = 0.0;
  double val_objective = 0.0;
  double wall_time = 0.0;
};

struct StageReport {
  qmodel::Stage stage = qmodel::Stage::pretrain;
  /// "val_accuracy" (maximized) or "val_mae" (minimized).
  std::string objective;
  int epochs_run = 0;
  int best_epoch = -1;
  double best_val_objective = 0.0;
  std::string checkpoint_path;
  std::string checkpoint_hash;
  double wall_time = 0.0;
  std::size_t train_records = 0;
  std::size_t validation_records = 0;
  std::vector<EpochLog> epochs;
};

/// Wall-clock times stay out of the JSON so reruns produce identical reports;
/// they are kept in the struct and the epoch CSV.
nlohmann::json to_json(const StageReport& r);

/// Receives the ids of the records in every batch that contributes a gradient.
using GradientAudit = std::function<void(std::span<const std::string>)>;

struct TrainContext {
  /// Where the selected checkpoint is written; empty keeps it in memory only.
  std::filesystem::path checkpoint_path;
  /// Per-epoch CSV log (epoch,train_loss,val_objective,wall_time), appended as
  /// training progresses.
  std::filesystem::path epoch_log_path;
  GradientAudit audit;
  /// Preprocessed samples are cached in memory up to this many bytes.
  std::size_t cache_bytes = std::size_t{2} << 30;
};

struct StageResult {
  qmodel::ModelCheckpoint checkpoint;
  StageReport report;
};

/// Stage I: classify3 head, categorical cross-entropy, checkpoint selected by
/// best validation accuracy. Trinary labels map Good/Usable/Reject -> 0/1/2.
StageResult pretrain_classification(const qmodel::ModelConfig& model_config,
                                    const imaging::PreprocessConfig& preprocess, const TrainConfig& config,
                                    const datasets::DatasetManifest& manifest, const TrainContext& context = {});

/// Stage II: swaps the head of a pre-training checkpoint (or builds a random
/// regress1 model from `model_config` when `init` is empty) and trains with
/// RMSE, selecting by validation MAE.
StageResult train_regression(const qmodel::ModelCheckpoint* init, const qmodel::ModelConfig& model_config,
                             const imaging::PreprocessConfig& preprocess, const TrainConfig& config,
                             const datasets::DatasetManifest& manifest, const TrainContext& context = {});

/// Teacher predictions clamped to [1,10], stored as pseudo labels. Records
/// must not carry a quality score yet.
datasets::DatasetManifest generate_pseudo_labels(const qmodel::ModelCheckpoint& teacher,
                                                 const datasets::DatasetManifest& unlabeled);

/// Stage III: merges labeled and pseudo records, initializes the student per
/// config.student_init and trains with RMSE, selecting by validation MAE.
StageResult train_student(const qmodel::ModelCheckpoint& teacher, const datasets::DatasetManifest& labeled,
                          const datasets::DatasetManifest& pseudo, const TrainConfig& config,
                          const TrainContext& context = {});

/// Copy of `manifest` with quality, trinary and binary labels removed and the
/// split assignment cleared.
datasets::DatasetManifest strip_labels(const datasets::DatasetManifest& manifest);

/// Loads and preprocesses the image of each record.
std::vector<imaging::ImageTensor> load_preprocessed(const datasets::DatasetManifest& manifest,
                                                    std::span<const datasets::FundusRecord* const> records,
                                                    const imaging::PreprocessConfig& preprocess);

/// Predicted scores for `records`, in order.
std::vector<double> score_records(const qmodel::QualityNet& model, const datasets::DatasetManifest& manifest,
                                  std::span<const datasets::FundusRecord* const> records);

}  // namespace fundusq::training
