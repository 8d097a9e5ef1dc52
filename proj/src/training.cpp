#include "fundusq/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "fundusq/errors.hpp"
#include "fundusq/random.hpp"

namespace fundusq::training {

using datasets::DatasetManifest;
using datasets::FundusRecord;
using datasets::Split;
using qmodel::ModelCheckpoint;
using qmodel::QualityNet;
using qmodel::Stage;

std::string to_string(Loss l) { return l == Loss::rmse ? "rmse" : "categorical_cross_entropy"; }

std::string to_string(StudentInit s) {
  switch (s) {
    case StudentInit::teacher: return "teacher";
    case StudentInit::random: return "random";
    case StudentInit::pretrain: return "pretrain";
  }
  return "teacher";
}

void TrainConfig::validate() const {
  if (!(adam.learning_rate > 0.0)) throw ConfigError("learning_rate must be > 0");
  if (!(adam.beta1 >= 0.0 && adam.beta1 < 1.0) || !(adam.beta2 >= 0.0 && adam.beta2 < 1.0)) {
    throw ConfigError("Adam betas must be in [0,1)");
  }
  if (!(adam.epsilon > 0.0)) throw ConfigError("Adam epsilon must be > 0");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (max_epochs < 1) throw ConfigError("max_epochs must be >= 1");
  if (patience < 0) throw ConfigError("patience must be >= 0");
  if (!(pseudo_validation_fraction >= 0.0 && pseudo_validation_fraction < 1.0)) {
    throw ConfigError("pseudo_validation_fraction must be in [0,1)");
  }
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"loss", to_string(c.loss)},
                     {"learning_rate", c.adam.learning_rate},
                     {"beta1", c.adam.beta1},
                     {"beta2", c.adam.beta2},
                     {"epsilon", c.adam.epsilon},
                     {"batch_size", c.batch_size},
                     {"max_epochs", c.max_epochs},
                     {"patience", c.patience},
                     {"seed", c.seed},
                     {"student_init", to_string(c.student_init)},
                     {"pretrain_checkpoint", c.pretrain_checkpoint},
                     {"pseudo_policy", c.pseudo_policy == datasets::PseudoPolicy::train_only ? "train_only"
                                                                                               : "pooled_redraw"},
                     {"pseudo_validation_fraction", c.pseudo_validation_fraction}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  if (!j.is_object()) throw ConfigError("train config must be an object");
  TrainConfig out;
  try {
    for (const auto& [key, value] : j.items()) {
      if (key == "loss") {
        const auto s = value.get<std::string>();
        if (s == "rmse") out.loss = Loss::rmse;
        else if (s == "categorical_cross_entropy") out.loss = Loss::categorical_cross_entropy;
        else throw ConfigError("unknown loss '" + s + "'");
      } else if (key == "learning_rate") {
        out.adam.learning_rate = value.get<double>();
      } else if (key == "beta1") {
        out.adam.beta1 = value.get<double>();
      } else if (key == "beta2") {
        out.adam.beta2 = value.get<double>();
      } else if (key == "epsilon") {
        out.adam.epsilon = value.get<double>();
      } else if (key == "batch_size") {
        out.batch_size = value.get<int>();
      } else if (key == "max_epochs") {
        out.max_epochs = value.get<int>();
      } else if (key == "patience") {
        out.patience = value.get<int>();
      } else if (key == "seed") {
        out.seed = value.get<std::uint64_t>();
      } else if (key == "student_init") {
        const auto s = value.get<std::string>();
        if (s == "teacher") out.student_init = StudentInit::teacher;
        else if (s == "random") out.student_init = StudentInit::random;
        else if (s == "pretrain") out.student_init = StudentInit::pretrain;
        else throw ConfigError("unknown student_init '" + s + "'");
      } else if (key == "pretrain_checkpoint") {
        out.pretrain_checkpoint = value.get<std::string>();
      } else if (key == "pseudo_policy") {
        const auto s = value.get<std::string>();
        if (s == "pooled_redraw") out.pseudo_policy = datasets::PseudoPolicy::pooled_redraw;
        else if (s == "train_only") out.pseudo_policy = datasets::PseudoPolicy::train_only;
        else throw ConfigError("unknown pseudo_policy '" + s + "'");
      } else if (key == "pseudo_validation_fraction") {
        out.pseudo_validation_fraction = value.get<double>();
      } else {
        throw ConfigError("unknown train config key '" + key + "'");
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad train config value: ") + e.what());
  }
  out.validate();
  c = out;
}

nlohmann::json to_json(const StageReport& r) {
  auto epochs = nlohmann::json::array();
  for (const auto& e : r.epochs) {
    epochs.push_back({{"epoch", e.epoch}, {"train_loss", e.train_loss}, {"val_objective", e.val_objective}});
  }
  return {{"stage", qmodel::to_string(r.stage)},
          {"objective", r.objective},
          {"epochs_run", r.epochs_run},
          {"best_epoch", r.best_epoch},
          {"best_val_objective", r.best_val_objective},
          {"checkpoint", r.checkpoint_path},
          {"checkpoint_hash", r.checkpoint_hash},
          {"train_records", r.train_records},
          {"validation_records", r.validation_records},
          {"epochs", epochs}};
}

DatasetManifest strip_labels(const DatasetManifest& manifest) {
  DatasetManifest out = manifest;
  out.split_assignment.clear();
  for (auto& r : out.records) {
    r.quality.reset();
    r.trinary.reset();
    r.binary.reset();
    r.pseudo = false;
  }
  return out;
}

std::vector<imaging::ImageTensor> load_preprocessed(const DatasetManifest& manifest,
                                                    std::span<const FundusRecord* const> records,
                                                    const imaging::PreprocessConfig& preprocess) {
  std::vector<imaging::ImageTensor> out;
  out.reserve(records.size());
  for (const auto* r : records) {
    try {
      out.push_back(imaging::preprocess(imaging::load_image(manifest.resolve(*r)), preprocess));
    } catch (const Error& e) {
      throw ValidationError(std::string("cannot prepare image: ") + e.what(), r->id);
    }
  }
  return out;
}

std::vector<double> score_records(const QualityNet& model, const DatasetManifest& manifest,
                                  std::span<const FundusRecord* const> records) {
  std::vector<double> out;
  out.reserve(records.size());
  constexpr std::size_t kChunk = 64;
  for (std::size_t start = 0; start < records.size(); start += kChunk) {
    const auto part = records.subspan(start, std::min(kChunk, records.size() - start));
    const auto images = load_preprocessed(manifest, part, model.preprocess());
    const auto scores = qmodel::predict_scores(model, images);
    out.insert(out.end(), scores.begin(), scores.end());
  }
  return out;
}

namespace {

// Preprocessed images for a fixed record list, cached when they fit.
class SampleSource {
 public:
  SampleSource(const DatasetManifest& manifest, std::vector<const FundusRecord*> records,
               const imaging::PreprocessConfig& preprocess, std::size_t cache_bytes)
      : manifest_(manifest), records_(std::move(records)), preprocess_(preprocess) {
    const std::size_t per = static_cast<std::size_t>(preprocess.target_size) * preprocess.target_size * 3 *
                            sizeof(float);
    if (per * records_.size() <= cache_bytes) cache_ = load_preprocessed(manifest_, records_, preprocess_);
  }

  std::size_t size() const { return records_.size(); }
  const FundusRecord& record(std::size_t i) const { return *records_[i]; }

  std::vector<imaging::ImageTensor> images(std::span<const std::size_t> idx) const {
    if (!cache_.empty()) {
      std::vector<imaging::ImageTensor> out;
      out.reserve(idx.size());
      for (std::size_t i : idx) out.push_back(cache_[i]);
      return out;
    }
    std::vector<const FundusRecord*> recs;
    for (std::size_t i : idx) recs.push_back(records_[i]);
    return load_preprocessed(manifest_, recs, preprocess_);
  }

 private:
  const DatasetManifest& manifest_;
  std::vector<const FundusRecord*> records_;
  imaging::PreprocessConfig preprocess_;
  std::vector<imaging::ImageTensor> cache_;
};

int trinary_index(datasets::TrinaryLabel t) {
  switch (t) {
    case datasets::TrinaryLabel::Good: return 0;
    case datasets::TrinaryLabel::Usable: return 1;
    case datasets::TrinaryLabel::Reject: return 2;
  }
  return 0;
}

std::vector<const FundusRecord*> split_records(const DatasetManifest& m, Split s, bool classify) {
  auto recs = m.in_split(s);
  if (recs.empty()) throw EmptySplit(fmt::format("split '{}' is empty", datasets::to_string(s)));
  for (const auto* r : recs) {
    if (classify && !r->trinary) throw MissingLabels("record '" + r->id + "' has no trinary label");
    if (!classify && !r->quality) throw MissingLabels("record '" + r->id + "' has no quality score");
  }
  return recs;
}

using Snapshot = std::vector<std::vector<float>>;

Snapshot take_snapshot(QualityNet& model) {
  Snapshot s;
  for (auto& ref : model.state()) s.push_back(*ref.values);
  return s;
}

void restore_snapshot(QualityNet& model, const Snapshot& s) {
  auto refs = model.state();
  for (std::size_t i = 0; i < refs.size(); ++i) *refs[i].values = s[i];
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

StageResult run_stage(QualityNet model, Stage stage, const TrainConfig& config, const DatasetManifest& manifest,
                      const TrainContext& context) {
  config.validate();
  if (model.inference_only()) throw WrongStage("model is marked inference-only");
  const bool classify = stage == Stage::pretrain;
  if (classify && config.loss != Loss::categorical_cross_entropy) {
    throw ConfigError("pre-training uses categorical_cross_entropy");
  }
  if (!classify && config.loss != Loss::rmse) throw ConfigError("regression stages use the rmse loss");

  const auto t0 = std::chrono::steady_clock::now();
  const SampleSource train(manifest, split_records(manifest, Split::train, classify), model.preprocess(),
                           context.cache_bytes);
  const SampleSource val(manifest, split_records(manifest, Split::validation, classify), model.preprocess(),
                         context.cache_bytes);
  spdlog::info("{}: {} train / {} validation records", qmodel::to_string(stage), train.size(), val.size());

  std::ofstream csv;
  if (!context.epoch_log_path.empty()) {
    if (context.epoch_log_path.has_parent_path()) std::filesystem::create_directories(context.epoch_log_path.parent_path());
    csv.open(context.epoch_log_path, std::ios::trunc);
    if (!csv) throw IoError("cannot write epoch log '" + context.epoch_log_path.string() + "'");
    csv << "epoch,train_loss,val_objective,wall_time\n";
  }

  nn::Adam optimizer(model.trainable_parameters(), config.adam);
  StageReport report;
  report.stage = stage;
  report.objective = classify ? "val_accuracy" : "val_mae";
  report.train_records = train.size();
  report.validation_records = val.size();
  auto better = [&](double a, double b) { return classify ? a > b : a < b; };

  Snapshot best;
  int since_best = 0;
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  std::vector<std::size_t> val_idx(val.size());
  std::iota(val_idx.begin(), val_idx.end(), 0);

  for (int epoch = 0; epoch < config.max_epochs; ++epoch) {
    Rng rng(mix_seed(config.seed, static_cast<std::uint64_t>(epoch)));
    rng.shuffle(order);
    double loss_sum = 0.0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(config.batch_size)) {
      const std::span<const std::size_t> idx(order.data() + start,
                                             std::min<std::size_t>(config.batch_size, order.size() - start));
      std::vector<std::string> ids;
      for (std::size_t i : idx) ids.push_back(train.record(i).id);
      const auto batch = model.to_batch(train.images(idx));

      optimizer.zero_grad();
      const auto out = model.forward(batch, nn::Mode::train);
      nn::LossResult loss;
      if (classify) {
        std::vector<int> labels;
        for (std::size_t i : idx) labels.push_back(trinary_index(*train.record(i).trinary));
        loss = nn::softmax_cross_entropy(out, labels);
      } else {
        std::vector<float> targets;
        for (std::size_t i : idx) targets.push_back(static_cast<float>(train.record(i).quality->value()));
        loss = nn::rmse_loss(out, targets);
      }
      if (!std::isfinite(loss.loss)) throw Error("NumericalError", "training loss became non-finite");
      if (context.audit) context.audit(ids);
      model.backward(loss.grad);
      optimizer.step();
      loss_sum += loss.loss * static_cast<double>(idx.size());
    }
    model.clear_cache();

    double objective = 0.0;
    for (std::size_t start = 0; start < val_idx.size(); start += 64) {
      const std::span<const std::size_t> idx(val_idx.data() + start, std::min<std::size_t>(64, val_idx.size() - start));
      const auto y = model.infer(model.to_batch(val.images(idx)));
      for (std::size_t k = 0; k < idx.size(); ++k) {
        const auto& rec = val.record(idx[k]);
        if (classify) {
          const float* row = y.sample(static_cast<int>(k));
          const int pred = static_cast<int>(std::max_element(row, row + 3) - row);
          objective += pred == trinary_index(*rec.trinary) ? 1.0 : 0.0;
        } else {
          objective += std::abs(static_cast<double>(y.data[k]) - rec.quality->value());
        }
      }
    }
    objective /= static_cast<double>(val.size());

    EpochLog log{epoch, loss_sum / static_cast<double>(train.size()), objective, seconds_since(t0)};
    report.epochs.push_back(log);
    report.epochs_run = epoch + 1;
    if (csv.is_open()) {
      csv << fmt::format("{},{:.8g},{:.8g},{:.3f}\n", log.epoch, log.train_loss, log.val_objective, log.wall_time);
      csv.flush();
    }
    spdlog::info("{} epoch {}: train_loss {:.4f} {} {:.4f}", qmodel::to_string(stage), epoch, log.train_loss,
                 report.objective, objective);

    if (report.best_epoch < 0 || better(objective, report.best_val_objective)) {
      report.best_val_objective = objective;
      report.best_epoch = epoch;
      best = take_snapshot(model);
      since_best = 0;
    } else if (++since_best > config.patience) {
      break;
    }
  }
  restore_snapshot(model, best);

  qmodel::CheckpointMeta meta;
  meta.stage = stage;
  meta.created = qmodel::utc_now_iso8601();
  meta.metrics_snapshot = {{report.objective, report.best_val_objective},
                           {"best_epoch", report.best_epoch},
                           {"epochs_run", report.epochs_run}};
  std::string hash;
  if (!context.checkpoint_path.empty()) {
    hash = qmodel::save_checkpoint(model, meta, context.checkpoint_path);
    report.checkpoint_path = context.checkpoint_path.string();
  } else {
    hash = qmodel::weights_hash(model);
  }
  report.checkpoint_hash = hash;
  report.wall_time = seconds_since(t0);
  return StageResult{ModelCheckpoint{std::move(model), meta, hash}, std::move(report)};
}

}  // namespace

StageResult pretrain_classification(const qmodel::ModelConfig& model_config,
                                    const imaging::PreprocessConfig& preprocess, const TrainConfig& config,
                                    const DatasetManifest& manifest, const TrainContext& context) {
  auto cfg = model_config;
  cfg.head = qmodel::Head::classify3;
  return run_stage(qmodel::build_model(cfg, preprocess), Stage::pretrain, config, manifest, context);
}

StageResult train_regression(const ModelCheckpoint* init, const qmodel::ModelConfig& model_config,
                             const imaging::PreprocessConfig& preprocess, const TrainConfig& config,
                             const DatasetManifest& manifest, const TrainContext& context) {
  if (init == nullptr) {
    auto cfg = model_config;
    cfg.head = qmodel::Head::regress1;
    return run_stage(qmodel::build_model(cfg, preprocess), Stage::regression, config, manifest, context);
  }
  if (init->meta.stage != Stage::pretrain) {
    throw WrongStage("regression fine-tuning starts from a pretrain checkpoint, got stage " +
                     qmodel::to_string(init->meta.stage));
  }
  return run_stage(qmodel::swap_head_regression(init->model), Stage::regression, config, manifest, context);
}

DatasetManifest generate_pseudo_labels(const ModelCheckpoint& teacher, const DatasetManifest& unlabeled) {
  if (teacher.meta.stage != Stage::regression) {
    throw WrongStage("pseudo labels come from a regression teacher, got stage " +
                     qmodel::to_string(teacher.meta.stage));
  }
  std::vector<const FundusRecord*> recs;
  for (const auto& r : unlabeled.records) {
    if (r.quality) throw ValidationError("record to pseudo-label already has a quality score", r.id);
    recs.push_back(&r);
  }
  const auto scores = score_records(teacher.model, unlabeled, recs);
  DatasetManifest out = unlabeled;
  out.split_assignment.clear();
  for (std::size_t i = 0; i < out.records.size(); ++i) {
    auto& r = out.records[i];
    r.quality = datasets::QualityScore(datasets::clamp_score(scores[i]));
    r.pseudo = true;
  }
  return out;
}

StageResult train_student(const ModelCheckpoint& teacher, const DatasetManifest& labeled,
                          const DatasetManifest& pseudo, const TrainConfig& config, const TrainContext& context) {
  config.validate();
  if (teacher.meta.stage != Stage::regression) {
    throw WrongStage("the student needs a regression teacher, got stage " + qmodel::to_string(teacher.meta.stage));
  }
  datasets::MergeOptions merge;
  merge.policy = config.pseudo_policy;
  merge.validation_fraction = config.pseudo_validation_fraction;
  merge.seed = config.seed;
  const auto merged = datasets::merge_pseudo(labeled, pseudo, merge);

  QualityNet student = teacher.model;
  switch (config.student_init) {
    case StudentInit::teacher:
      break;
    case StudentInit::random: {
      auto cfg = teacher.model.config();
      cfg.pretrained_init = qmodel::PretrainedInit::random;
      cfg.init_weights.clear();
      cfg.seed = config.seed;
      student = qmodel::build_model(cfg, teacher.model.preprocess());
      break;
    }
    case StudentInit::pretrain: {
      if (config.pretrain_checkpoint.empty()) throw ConfigError("student_init=pretrain needs pretrain_checkpoint");
      auto pre = qmodel::load_checkpoint(config.pretrain_checkpoint);
      if (pre.meta.stage != Stage::pretrain) throw WrongStage("pretrain_checkpoint is not a pretrain checkpoint");
      student = qmodel::swap_head_regression(std::move(pre.model));
      break;
    }
  }
  return run_stage(std::move(student), Stage::student, config, merged, context);
}

}  // namespace fundusq::training
