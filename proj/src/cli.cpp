#include "fundusq/cli.hpp"

#include <pthread.h>
#include <signal.h>

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <set>
#include <thread>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <spdlog/sinks/ostream_sink.h>
#include <spdlog/spdlog.h>

#include "fundusq/errors.hpp"
#include "fundusq/explain.hpp"
#include "fundusq/metrics.hpp"
#include "fundusq/scale.hpp"

namespace fundusq::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

void check_keys(const json& j, const std::set<std::string>& allowed, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be an object");
  for (const auto& [key, _] : j.items()) {
    if (!allowed.count(key)) throw ConfigError(fmt::format("unknown key '{}' in {}", key, where));
  }
}

template <typename T, typename F>
T section(const json& j, const std::string& where, F parse) {
  try {
    return parse(j);
  } catch (const ConfigError&) {
    throw;
  } catch (const Error& e) {
    throw ConfigError(fmt::format("{}: {}", where, e.what()));
  } catch (const json::exception& e) {
    throw ConfigError(fmt::format("{}: {}", where, e.what()));
  }
}

datasets::SynthMode parse_synth_mode(const std::string& s) {
  if (s == "mixed") return datasets::SynthMode::mixed;
  if (s == "blur") return datasets::SynthMode::blur;
  if (s == "separable3") return datasets::SynthMode::separable3;
  throw ConfigError("unknown synth mode '" + s + "'");
}

std::string to_string(datasets::SynthMode m) {
  switch (m) {
    case datasets::SynthMode::mixed: return "mixed";
    case datasets::SynthMode::blur: return "blur";
    case datasets::SynthMode::separable3: return "separable3";
  }
  return "blur";
}

training::TrainConfig parse_train(json j, bool classification) {
  if (j.is_object() && classification && !j.contains("loss")) j["loss"] = "categorical_cross_entropy";
  return j.get<training::TrainConfig>();
}

SplitSection parse_split_section(const json& j) {
  check_keys(j, {"counts", "fractions", "stratify", "bin_width"}, "split");
  SplitSection s;
  if (j.contains("counts") && j.contains("fractions")) throw ConfigError("split: give counts or fractions, not both");
  if (j.contains("counts")) s.counts = j.at("counts").get<std::array<std::size_t, 3>>();
  if (j.contains("fractions")) s.fractions = j.at("fractions").get<std::array<double, 3>>();
  if (j.contains("stratify")) s.stratify = j.at("stratify").get<bool>();
  if (j.contains("bin_width")) s.bin_width = j.at("bin_width").get<double>();
  return s;
}

SynthSection parse_synth_section(const json& j) {
  check_keys(j, {"mode", "count", "width", "height", "prefix", "max_blur", "max_darkening", "max_noise", "source"},
             "synth");
  SynthSection s;
  if (j.contains("mode")) s.spec.mode = parse_synth_mode(j.at("mode").get<std::string>());
  if (j.contains("count")) s.count = j.at("count").get<std::size_t>();
  if (j.contains("width")) s.spec.width = j.at("width").get<int>();
  if (j.contains("height")) s.spec.height = j.at("height").get<int>();
  if (j.contains("prefix")) s.prefix = j.at("prefix").get<std::string>();
  if (j.contains("max_blur")) s.spec.max_blur = j.at("max_blur").get<double>();
  if (j.contains("max_darkening")) s.spec.max_darkening = j.at("max_darkening").get<double>();
  if (j.contains("max_noise")) s.spec.max_noise = j.at("max_noise").get<double>();
  if (j.contains("source")) s.spec.source = j.at("source").get<std::string>();
  return s;
}

DataSection parse_data_section(const json& j) {
  check_keys(j, {"trinary", "labeled", "unlabeled", "binary"}, "data");
  DataSection d;
  if (j.contains("trinary")) d.trinary = j.at("trinary").get<std::string>();
  if (j.contains("labeled")) d.labeled = j.at("labeled").get<std::string>();
  if (j.contains("unlabeled")) d.unlabeled = j.at("unlabeled").get<std::string>();
  if (j.contains("binary")) d.binary = j.at("binary").get<std::string>();
  return d;
}

EvalSection parse_eval_section(const json& j) {
  check_keys(j, {"outlier_cutoff", "resamples", "threshold", "split", "plots"}, "eval");
  EvalSection e;
  if (j.contains("outlier_cutoff")) e.outlier_cutoff = j.at("outlier_cutoff").get<double>();
  if (j.contains("resamples")) e.resamples = j.at("resamples").get<int>();
  if (j.contains("threshold")) e.threshold = j.at("threshold").get<double>();
  if (j.contains("split")) e.split = j.at("split").get<std::string>();
  if (j.contains("plots")) e.plots = j.at("plots").get<bool>();
  return e;
}

const std::set<std::string> kLogLevels{"trace", "debug", "info", "warn", "error", "off"};

}  // namespace

void RunConfig::propagate_seed() {
  model.seed = seed;
  pretrain.seed = seed;
  train.seed = seed;
  student.seed = seed;
}

void RunConfig::validate() const {
  if (out_dir.empty()) throw ConfigError("out_dir must not be empty");
  if (!kLogLevels.count(log_level)) throw ConfigError("unknown log_level '" + log_level + "'");
  if (pretrain.loss != training::Loss::categorical_cross_entropy) {
    throw ConfigError("pretrain: stage I uses the categorical_cross_entropy loss");
  }
  if (train.loss != training::Loss::rmse) throw ConfigError("train: stage II uses the rmse loss");
  if (student.loss != training::Loss::rmse) throw ConfigError("student: stage III uses the rmse loss");
  if (synth.count == 0) throw ConfigError("synth: count must be positive");
  if (eval.resamples < 1) throw ConfigError("eval: resamples must be positive");
  if (!(eval.outlier_cutoff >= 0.0)) throw ConfigError("eval: outlier_cutoff must be non-negative");
  if (eval.split != "all") {
    try {
      datasets::parse_split(eval.split);
    } catch (const Error&) {
      throw ConfigError("eval: unknown split '" + eval.split + "'");
    }
  }
  const auto wrap = [](const std::string& where, auto&& fn) {
    try {
      fn();
    } catch (const ConfigError&) {
      throw;
    } catch (const Error& e) {
      throw ConfigError(fmt::format("{}: {}", where, e.what()));
    }
  };
  wrap("model", [&] { model.validate(); });
  wrap("preprocess", [&] { preprocess.validate(); });
  wrap("pretrain", [&] { pretrain.validate(); });
  wrap("train", [&] { train.validate(); });
  wrap("student", [&] { student.validate(); });
  wrap("service", [&] { service.validate(); });
  wrap("split", [&] {
    datasets::SplitSpec spec;
    if (split.counts) spec.counts = split.counts;
    else spec.fractions = split.fractions;
    spec.bin_width = split.bin_width;
    spec.validate();
  });
}

json to_json(const RunConfig& c) {
  json split{{"stratify", c.split.stratify}, {"bin_width", c.split.bin_width}};
  if (c.split.counts) split["counts"] = *c.split.counts;
  else split["fractions"] = c.split.fractions;
  return {{"seed", c.seed},
          {"out_dir", c.out_dir},
          {"log_level", c.log_level},
          {"model", c.model},
          {"preprocess", c.preprocess},
          {"pretrain", c.pretrain},
          {"train", c.train},
          {"student", c.student},
          {"split", split},
          {"synth",
           {{"mode", to_string(c.synth.spec.mode)},
            {"count", c.synth.count},
            {"width", c.synth.spec.width},
            {"height", c.synth.spec.height},
            {"prefix", c.synth.prefix},
            {"max_blur", c.synth.spec.max_blur},
            {"max_darkening", c.synth.spec.max_darkening},
            {"max_noise", c.synth.spec.max_noise},
            {"source", c.synth.spec.source}}},
          {"data",
           {{"trinary", c.data.trinary},
            {"labeled", c.data.labeled},
            {"unlabeled", c.data.unlabeled},
            {"binary", c.data.binary}}},
          {"eval",
           {{"outlier_cutoff", c.eval.outlier_cutoff},
            {"resamples", c.eval.resamples},
            {"threshold", c.eval.threshold},
            {"split", c.eval.split},
            {"plots", c.eval.plots}}},
          {"service", c.service}};
}

RunConfig run_config_from_json(const json& j) {
  check_keys(j,
             {"seed", "out_dir", "log_level", "model", "preprocess", "pretrain", "train", "student", "split", "synth",
              "data", "eval", "service"},
             "config");
  RunConfig c;
  c.pretrain.loss = training::Loss::categorical_cross_entropy;
  const auto scalar = [&](const char* key, auto& field) {
    if (!j.contains(key)) return;
    try {
      j.at(key).get_to(field);
    } catch (const json::exception& e) {
      throw ConfigError(fmt::format("{}: {}", key, e.what()));
    }
  };
  scalar("seed", c.seed);
  scalar("out_dir", c.out_dir);
  scalar("log_level", c.log_level);
  if (j.contains("model")) c.model = section<qmodel::ModelConfig>(j.at("model"), "model", [](const json& s) {
    return s.get<qmodel::ModelConfig>();
  });
  if (j.contains("preprocess")) {
    c.preprocess = section<imaging::PreprocessConfig>(j.at("preprocess"), "preprocess",
                                                       [](const json& s) { return s.get<imaging::PreprocessConfig>(); });
  }
  if (j.contains("pretrain")) {
    c.pretrain = section<training::TrainConfig>(j.at("pretrain"), "pretrain", [](const json& s) { return parse_train(s, true); });
  }
  if (j.contains("train")) {
    c.train = section<training::TrainConfig>(j.at("train"), "train", [](const json& s) { return parse_train(s, false); });
  }
  if (j.contains("student")) {
    c.student = section<training::TrainConfig>(j.at("student"), "student", [](const json& s) { return parse_train(s, false); });
  }
  if (j.contains("split")) c.split = section<SplitSection>(j.at("split"), "split", parse_split_section);
  if (j.contains("synth")) c.synth = section<SynthSection>(j.at("synth"), "synth", parse_synth_section);
  if (j.contains("data")) c.data = section<DataSection>(j.at("data"), "data", parse_data_section);
  if (j.contains("eval")) c.eval = section<EvalSection>(j.at("eval"), "eval", parse_eval_section);
  if (j.contains("service")) {
    c.service = section<service::ServiceConfig>(j.at("service"), "service",
                                                [](const json& s) { return s.get<service::ServiceConfig>(); });
  }
  return c;
}

RunConfig load_run_config(const fs::path& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot read config '" + path.string() + "'");
  json j;
  try {
    j = json::parse(f);
  } catch (const json::parse_error& e) {
    throw ConfigError(fmt::format("config '{}' is not valid JSON: {}", path.string(), e.what()));
  }
  return run_config_from_json(j);
}

void apply_environment(RunConfig& c, const std::function<const char*(const char*)>& getenv) {
  const auto get = [&](const char* name) -> const char* { return getenv ? getenv(name) : std::getenv(name); };
  if (const char* v = get("FUNDUSQ_SEED")) {
    const std::string s(v);
    if (s.empty() || !std::all_of(s.begin(), s.end(), [](char ch) { return ch >= '0' && ch <= '9'; })) {
      throw ConfigError("FUNDUSQ_SEED is not a non-negative integer: " + s);
    }
    try {
      c.seed = std::stoull(s);
    } catch (const std::logic_error&) {
      throw ConfigError("FUNDUSQ_SEED is out of range: " + s);
    }
  }
  if (const char* v = get("FUNDUSQ_OUT_DIR")) c.out_dir = v;
  if (const char* v = get("FUNDUSQ_LOG_LEVEL")) c.log_level = v;
  service::apply_environment(c.service, getenv);
}

// Commands ------------------------------------------------------------------------

namespace {

struct Globals {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out_dir;
  std::optional<std::string> log_level;
  std::string out;
};

struct Context {
  RunConfig config;
  std::string report_path;
  std::ostream* out = nullptr;

  fs::path artifact(const std::string& stage, const std::string& ext) const {
    fs::create_directories(config.out_dir);
    return fs::path(config.out_dir) / fmt::format("{}-{}{}", stage, config.seed, ext);
  }
};

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot write '" + path.string() + "'");
    f << text;
    if (!f.flush()) throw IoError("cannot write '" + path.string() + "'");
  }
  fs::rename(tmp, path);
}

void emit(const Context& ctx, const json& report) {
  const std::string text = report.dump(2) + "\n";
  if (ctx.report_path.empty()) {
    *ctx.out << text;
    ctx.out->flush();
  } else {
    write_text(ctx.report_path, text);
  }
}

datasets::DatasetManifest load_required(const std::string& path, const std::string& what) {
  if (path.empty()) throw ConfigError(fmt::format("no {} manifest given (flag --manifest or data.{})", what, what));
  auto m = datasets::load_manifest(path);
  m.validate();
  return m;
}

datasets::SplitSpec split_spec(const RunConfig& c, bool stratify) {
  datasets::SplitSpec spec;
  if (c.split.counts) spec.counts = c.split.counts;
  else spec.fractions = c.split.fractions;
  spec.stratify = stratify && c.split.stratify;
  spec.bin_width = c.split.bin_width;
  spec.seed = c.seed;
  return spec;
}

bool all_have_quality(const datasets::DatasetManifest& m) {
  return std::all_of(m.records.begin(), m.records.end(), [](const auto& r) { return r.quality.has_value(); });
}

datasets::DatasetManifest ensure_split(datasets::DatasetManifest m, const datasets::SplitSpec& spec) {
  if (!m.split_assignment.empty()) return m;
  spdlog::info("manifest has no split assignment; drawing one with seed {}", spec.seed);
  return datasets::stratified_split(m, spec);
}

datasets::SplitSpec pretrain_split(const RunConfig& c, const datasets::DatasetManifest& m) {
  datasets::SplitSpec spec;
  spec.fractions = std::array<double, 3>{0.9, 0.1, 0.0};
  spec.stratify = all_have_quality(m);
  spec.bin_width = c.split.bin_width;
  spec.seed = c.seed;
  return spec;
}

// Saves a manifest derived from `m` elsewhere; image URIs become absolute.
void save_relocated(datasets::DatasetManifest m, const fs::path& path) {
  for (auto& r : m.records) r.image_uri = fs::absolute(m.resolve(r)).lexically_normal().string();
  datasets::save_manifest(m, path);
}

// Labeled manifest with a split assignment. A freshly drawn split is saved as
// split-<seed>.jsonl with absolute image paths so later commands can reuse it.
datasets::DatasetManifest labeled_with_split(const Context& ctx, const std::string& path, json* report = nullptr) {
  auto m = load_required(path, "labeled");
  if (!m.split_assignment.empty()) return m;
  m = ensure_split(std::move(m), split_spec(ctx.config, all_have_quality(m)));
  const auto out = ctx.artifact("split", ".jsonl");
  save_relocated(m, out);
  if (report) (*report)["split_manifest"] = out.string();
  return m;
}

training::TrainContext stage_context(const Context& ctx, const std::string& stage) {
  training::TrainContext tc;
  tc.checkpoint_path = ctx.artifact(stage, ".ckpt");
  tc.epoch_log_path = ctx.artifact(stage, ".csv");
  return tc;
}

json finish_stage(const Context& ctx, const std::string& stage, const training::StageResult& result) {
  const json report = training::to_json(result.report);
  write_text(ctx.artifact(stage, ".json"), report.dump(2) + "\n");
  return report;
}

// Wraps module errors with the stage that raised them.
template <typename F>
auto in_stage(const std::string& stage, F fn) {
  try {
    return fn();
  } catch (const Error& e) {
    throw Error(e.code(), fmt::format("stage {}: {}", stage, e.what()));
  }
}

std::vector<const datasets::FundusRecord*> select_records(const datasets::DatasetManifest& m, const std::string& split) {
  std::vector<const datasets::FundusRecord*> out;
  if (split == "all") {
    for (const auto& r : m.records) out.push_back(&r);
  } else {
    out = m.in_split(datasets::parse_split(split));
  }
  if (out.empty()) {
    throw EmptySplit(fmt::format("manifest has no records in split '{}'{}", split,
                                 m.split_assignment.empty() ? " (it has no split assignment; use --split all)" : ""));
  }
  return out;
}

std::vector<double> clamped_scores(const qmodel::QualityNet& model, const datasets::DatasetManifest& m,
                                   std::span<const datasets::FundusRecord* const> records) {
  auto scores = training::score_records(model, m, records);
  for (auto& s : scores) s = datasets::clamp_score(s);
  return scores;
}

double test_mae(const qmodel::QualityNet& model, const datasets::DatasetManifest& m) {
  const auto records = m.in_split(datasets::Split::test);
  if (records.empty()) return std::nan("");
  const auto pred = clamped_scores(model, m, records);
  double sum = 0.0;
  for (std::size_t i = 0; i < records.size(); ++i) sum += std::abs(pred[i] - records[i]->quality->value());
  return sum / static_cast<double>(records.size());
}

json number_or_null(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

// synth --------------------------------------------------------------------------

struct SynthArgs {
  std::string dir;
  std::optional<std::string> mode;
  std::optional<std::size_t> count;
  std::optional<std::string> prefix;
};

int cmd_synth(Context& ctx, const SynthArgs& a) {
  auto s = ctx.config.synth;
  if (a.mode) s.spec.mode = parse_synth_mode(*a.mode);
  if (a.count) s.count = *a.count;
  if (a.prefix) s.prefix = *a.prefix;
  const fs::path dir = a.dir.empty() ? fs::path(ctx.config.out_dir) / fmt::format("synth-{}", ctx.config.seed) : fs::path(a.dir);
  auto m = datasets::synth_corpus(s.spec, s.count, ctx.config.seed, dir, s.prefix);
  m.header.created = "";
  const auto manifest = dir / "manifest.jsonl";
  datasets::save_manifest(m, manifest);
  std::map<std::string, std::size_t> classes;
  for (const auto& r : m.records) ++classes[datasets::to_string(*r.trinary)];
  emit(ctx, {{"manifest", manifest.string()},
             {"records", m.records.size()},
             {"mode", to_string(s.spec.mode)},
             {"seed", ctx.config.seed},
             {"trinary_counts", classes}});
  return 0;
}

// preprocess ---------------------------------------------------------------------

struct PathArgs {
  std::string manifest;
  std::string dir;
};

int cmd_preprocess(Context& ctx, const PathArgs& a) {
  auto m = load_required(a.manifest, "input");
  const fs::path dir = a.dir.empty() ? fs::path(ctx.config.out_dir) / fmt::format("preprocess-{}", ctx.config.seed) : fs::path(a.dir);
  fs::create_directories(dir / "images");
  datasets::DatasetManifest out = m;
  out.base_dir = dir;
  for (auto& r : out.records) {
    imaging::ImageTensor image;
    try {
      image = imaging::preprocess(imaging::load_image(m.resolve(r)), ctx.config.preprocess);
    } catch (const Error& e) {
      throw ValidationError(fmt::format("{}: {}", e.code(), e.what()), r.id);
    }
    r.image_uri = "images/" + r.id + ".png";
    imaging::write_image(image, dir / r.image_uri);
  }
  const auto manifest = dir / "manifest.jsonl";
  datasets::save_manifest(out, manifest);
  emit(ctx, {{"manifest", manifest.string()},
             {"records", out.records.size()},
             {"preprocess", ctx.config.preprocess}});
  return 0;
}

// split --------------------------------------------------------------------------

struct SplitArgs {
  std::string manifest;
  std::string output;
  std::vector<std::size_t> counts;
};

int cmd_split(Context& ctx, const SplitArgs& a) {
  auto m = load_required(a.manifest, "input");
  auto spec = split_spec(ctx.config, true);
  if (!a.counts.empty()) {
    spec.counts = std::array<std::size_t, 3>{a.counts[0], a.counts[1], a.counts[2]};
    spec.fractions.reset();
  }
  const auto out = datasets::stratified_split(m, spec);
  const fs::path path = a.output.empty() ? ctx.artifact("split", ".jsonl") : fs::path(a.output);
  save_relocated(out, path);
  emit(ctx, {{"manifest", path.string()},
             {"train", out.count(datasets::Split::train)},
             {"validation", out.count(datasets::Split::validation)},
             {"test", out.count(datasets::Split::test)},
             {"seed", spec.seed}});
  return 0;
}

// training stages ------------------------------------------------------------------

int cmd_pretrain(Context& ctx, const PathArgs& a) {
  const auto& c = ctx.config;
  auto m = load_required(a.manifest.empty() ? c.data.trinary : a.manifest, "trinary");
  m = ensure_split(std::move(m), pretrain_split(c, m));
  const auto result = training::pretrain_classification(c.model, c.preprocess, c.pretrain, m,
                                                        stage_context(ctx, "pretrain"));
  emit(ctx, finish_stage(ctx, "pretrain", result));
  return 0;
}

struct TrainArgs {
  std::string manifest;
  std::string init;
};

int cmd_train(Context& ctx, const TrainArgs& a) {
  const auto& c = ctx.config;
  const auto m = labeled_with_split(ctx, a.manifest.empty() ? c.data.labeled : a.manifest);
  std::optional<qmodel::ModelCheckpoint> init;
  if (!a.init.empty()) init = qmodel::load_checkpoint(a.init);
  const auto result = training::train_regression(init ? &*init : nullptr, c.model, c.preprocess, c.train, m,
                                                 stage_context(ctx, "regression"));
  emit(ctx, finish_stage(ctx, "regression", result));
  return 0;
}

datasets::DatasetManifest unlabeled_view(const datasets::DatasetManifest& m) {
  const bool labeled = std::any_of(m.records.begin(), m.records.end(),
                                   [](const auto& r) { return r.quality || r.trinary || r.binary; });
  if (labeled) spdlog::warn("labels present in the unlabeled manifest are ignored");
  return training::strip_labels(m);
}

struct PseudoArgs {
  std::string checkpoint;
  std::string manifest;
  std::string output;
};

int cmd_pseudo_label(Context& ctx, const PseudoArgs& a) {
  const auto& c = ctx.config;
  const auto teacher = qmodel::load_checkpoint(a.checkpoint);
  const auto unlabeled = unlabeled_view(load_required(a.manifest.empty() ? c.data.unlabeled : a.manifest, "unlabeled"));
  auto pseudo = training::generate_pseudo_labels(teacher, unlabeled);
  const fs::path path = a.output.empty() ? ctx.artifact("pseudo", ".jsonl") : fs::path(a.output);
  save_relocated(pseudo, path);
  std::vector<double> scores;
  for (const auto& r : pseudo.records) scores.push_back(r.quality->value());
  emit(ctx, {{"manifest", path.string()},
             {"records", pseudo.records.size()},
             {"teacher", teacher.content_hash},
             {"scores", scores.empty() ? json(nullptr) : metrics::to_json(metrics::summarize(scores))}});
  return 0;
}

struct StudentArgs {
  std::string teacher;
  std::string labeled;
  std::string pseudo;
};

int cmd_train_student(Context& ctx, const StudentArgs& a) {
  const auto& c = ctx.config;
  const auto teacher = qmodel::load_checkpoint(a.teacher);
  const auto labeled = labeled_with_split(ctx, a.labeled.empty() ? c.data.labeled : a.labeled);
  if (a.pseudo.empty()) throw ConfigError("train-student needs --pseudo");
  auto pseudo = datasets::load_manifest(a.pseudo);
  pseudo.validate();
  const auto result = training::train_student(teacher, labeled, pseudo, c.student, stage_context(ctx, "student"));
  emit(ctx, finish_stage(ctx, "student", result));
  return 0;
}

// evaluate -----------------------------------------------------------------------

struct EvalArgs {
  std::string checkpoint;
  std::string manifest;
  std::optional<std::string> split;
  std::string compare;
};

int cmd_evaluate(Context& ctx, const EvalArgs& a) {
  const auto& c = ctx.config;
  const std::string split = a.split.value_or(c.eval.split);
  const auto ck = qmodel::load_checkpoint(a.checkpoint);
  const auto m = load_required(a.manifest.empty() ? c.data.labeled : a.manifest, "labeled");
  const auto records = select_records(m, split);
  std::vector<double> reference;
  std::vector<std::string> ids;
  for (const auto* r : records) {
    if (!r->quality) throw MissingLabels("evaluation record has no quality score: " + r->id);
    reference.push_back(r->quality->value());
    ids.push_back(r->id);
  }
  const auto pred = clamped_scores(ck.model, m, records);
  const auto report = metrics::regression_report(pred, reference, c.seed, c.eval.resamples);

  json per_sample = json::array();
  for (std::size_t i = 0; i < records.size(); ++i) {
    per_sample.push_back({{"id", ids[i]},
                          {"predicted", pred[i]},
                          {"reference", reference[i]},
                          {"abs_error", report.per_sample_abs_errors[i]}});
  }
  json out{{"checkpoint", a.checkpoint},
           {"model_version", ck.content_hash},
           {"stage", qmodel::to_string(ck.meta.stage)},
           {"split", split},
           {"metrics", metrics::to_json(report, false)},
           {"per_sample", per_sample},
           {"outliers",
            {{"cutoff", c.eval.outlier_cutoff},
             {"records", metrics::to_json(metrics::outliers(pred, reference, ids, c.eval.outlier_cutoff))}}}};

  std::optional<metrics::LinearFit> fit;
  try {
    fit = metrics::linear_fit_r2(pred, reference);
    out["linear_fit"] = metrics::to_json(*fit);
  } catch (const DegenerateInput& e) {
    out["linear_fit"] = nullptr;
    spdlog::warn("no linear fit: {}", e.what());
  }
  if (c.eval.plots && fit) {
    const auto plot = ctx.artifact("evaluate", "-scatter.png");
    metrics::plot_scatter_fit(pred, reference, *fit, plot);
    out["plots"] = {{"scatter", plot.string()}};
  }

  if (!a.compare.empty()) {
    const auto other = qmodel::load_checkpoint(a.compare);
    const auto other_pred = clamped_scores(other.model, m, records);
    const auto other_report = metrics::regression_report(other_pred, reference, c.seed, c.eval.resamples);
    json cmp{{"checkpoint", a.compare},
             {"model_version", other.content_hash},
             {"mae", other_report.mae},
             {"rmse", other_report.rmse}};
    try {
      cmp["wilcoxon"] = metrics::to_json(
          metrics::wilcoxon_signed_rank(report.per_sample_abs_errors, other_report.per_sample_abs_errors));
    } catch (const AllZeroDifferences&) {
      cmp["wilcoxon"] = nullptr;
      cmp["note"] = "identical per-sample errors";
    }
    out["comparison"] = cmp;
  }
  emit(ctx, out);
  return 0;
}

// external-eval --------------------------------------------------------------------

struct ExternalArgs {
  std::string checkpoint;
  std::string manifest;
  std::optional<double> threshold;
  bool sweep = false;
};

int cmd_external_eval(Context& ctx, const ExternalArgs& a) {
  const auto& c = ctx.config;
  const double threshold = a.threshold.value_or(c.eval.threshold);
  if (!std::isfinite(threshold)) throw ConfigError("threshold must be finite");
  const auto ck = qmodel::load_checkpoint(a.checkpoint);
  const auto m = load_required(a.manifest.empty() ? c.data.binary : a.manifest, "binary");
  std::vector<const datasets::FundusRecord*> records;
  std::vector<metrics::BinaryLabel> labels;
  for (const auto& r : m.records) {
    if (!r.binary) throw MissingLabels("record has no binary label: " + r.id);
    records.push_back(&r);
    labels.push_back(*r.binary);
  }
  if (records.empty()) throw EmptyInput("binary manifest has no records");
  const auto scores = clamped_scores(ck.model, m, records);

  std::vector<double> good, poor;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    (labels[i] == metrics::BinaryLabel::Good ? good : poor).push_back(scores[i]);
  }
  const auto summary = [](const std::vector<double>& v) {
    return v.empty() ? json(nullptr) : metrics::to_json(metrics::summarize(v));
  };
  json out{{"checkpoint", a.checkpoint},
           {"model_version", ck.content_hash},
           {"records", records.size()},
           {"report", metrics::to_json(metrics::binary_report(scores, labels, threshold))},
           {"class_scores", {{"Good", summary(good)}, {"Poor", summary(poor)}}}};
  if (a.sweep) {
    json sweep = json::array();
    for (int k = 0; k <= 6; ++k) {
      const double t = 5.0 + 0.5 * k;
      sweep.push_back({{"threshold", t}, {"report", metrics::to_json(metrics::binary_report(scores, labels, t))}});
    }
    out["sweep"] = sweep;
  }
  if (c.eval.plots) {
    const auto plot = ctx.artifact("external-eval", "-histogram.png");
    metrics::plot_histograms({{"Good", good}, {"Poor", poor}}, threshold, plot);
    out["plots"] = {{"histogram", plot.string()}};
  }
  emit(ctx, out);
  return 0;
}

// gradcam --------------------------------------------------------------------------

struct GradCamArgs {
  std::string checkpoint;
  std::string image;
  std::string layer;
  bool invert = false;
  double alpha = 0.4;
  std::string output;
  std::string npy;
};

int cmd_gradcam(Context& ctx, const GradCamArgs& a) {
  const auto ck = qmodel::load_checkpoint(a.checkpoint);
  const auto input = imaging::preprocess(imaging::load_image(a.image), ck.model.preprocess());
  explain::GradCamOptions opt;
  opt.layer = a.layer;
  opt.invert = a.invert;
  opt.image_ref = a.image;
  const auto cam = explain::grad_cam(ck.model, input, opt);
  const fs::path png = a.output.empty() ? ctx.artifact("gradcam", ".png") : fs::path(a.output);
  if (png.has_parent_path()) fs::create_directories(png.parent_path());
  imaging::write_image(explain::overlay(cam, input, a.alpha), png);
  json out{{"image", a.image},
           {"checkpoint", a.checkpoint},
           {"model_version", ck.content_hash},
           {"layer", cam.source_layer},
           {"invert", a.invert},
           {"alpha", a.alpha},
           {"overlay", png.string()}};
  if (ck.model.config().head == qmodel::Head::regress1) {
    const std::vector<imaging::ImageTensor> batch{input};
    out["score"] = datasets::clamp_score(qmodel::predict_scores(ck.model, batch)[0]);
  }
  if (!a.npy.empty()) {
    explain::write_npy(cam, a.npy);
    out["npy"] = a.npy;
  }
  emit(ctx, out);
  return 0;
}

// serve ----------------------------------------------------------------------------

struct ServeArgs {
  std::optional<std::string> checkpoint, scale, queue, log, listen, cam_dir;
  std::optional<double> threshold;
};

int cmd_serve(Context& ctx, const ServeArgs& a) {
  auto sc = ctx.config.service;
  if (a.checkpoint) sc.checkpoint = *a.checkpoint;
  if (a.scale) sc.scale = *a.scale;
  if (a.queue) sc.queue = *a.queue;
  if (a.log) sc.annotation_log = *a.log;
  if (a.listen) sc.listen = *a.listen;
  if (a.cam_dir) sc.cam_dir = *a.cam_dir;
  if (a.threshold) sc.threshold = *a.threshold;
  try {
    sc.validate();
  } catch (const ConfigError&) {
    throw;
  } catch (const Error& e) {
    throw ConfigError(fmt::format("service: {}", e.what()));
  }

  sigset_t signals;
  sigemptyset(&signals);
  sigaddset(&signals, SIGINT);
  sigaddset(&signals, SIGTERM);
  sigset_t previous;
  pthread_sigmask(SIG_BLOCK, &signals, &previous);

  service::Service svc(sc);
  const int port = svc.bind();
  *ctx.out << json{{"event", "listening"}, {"port", port}, {"model_loaded", svc.model_loaded()}}.dump() << std::endl;
  spdlog::info("listening on port {}", port);

  std::thread waiter([&] {
    int sig = 0;
    sigwait(&signals, &sig);
    svc.stop();
  });
  svc.run();
  pthread_kill(waiter.native_handle(), SIGTERM);
  waiter.join();
  pthread_sigmask(SIG_SETMASK, &previous, nullptr);
  spdlog::info("service stopped");
  return 0;
}

// export-labels --------------------------------------------------------------------

struct ExportArgs {
  std::optional<std::string> log, queue, policy;
  std::string output;
};

int cmd_export_labels(Context& ctx, const ExportArgs& a) {
  const auto& sc = ctx.config.service;
  const std::string log_path = a.log.value_or(sc.annotation_log);
  if (!fs::exists(log_path)) throw IoError("annotation log '" + log_path + "' does not exist");
  const service::AnnotationLog log(log_path);
  scale::ExportOptions opt;
  opt.policy = a.policy ? scale::parse_export_policy(*a.policy) : sc.export_policy;
  const std::string queue_path = a.queue.value_or(sc.queue);
  if (!queue_path.empty()) {
    for (const auto& r : datasets::load_manifest(queue_path).records) opt.image_uris[r.id] = r.image_uri;
  }
  const auto manifest = scale::export_labels(log.records(), opt);
  const fs::path path = a.output.empty() ? ctx.artifact("labels", ".jsonl") : fs::path(a.output);
  datasets::save_manifest(manifest, path);
  emit(ctx, {{"manifest", path.string()},
             {"records", manifest.records.size()},
             {"annotations", log.size()},
             {"policy", scale::to_string(opt.policy)}});
  return 0;
}

// pipeline -------------------------------------------------------------------------

int cmd_pipeline(Context& ctx) {
  auto c = ctx.config;
  if (c.data.trinary.empty()) throw ConfigError("pipeline needs data.trinary");
  if (c.data.labeled.empty()) throw ConfigError("pipeline needs data.labeled");
  json out{{"seed", c.seed}, {"stages", json::object()}, {"checkpoints", json::object()}};

  const auto stage1 = in_stage("pretrain", [&] {
    auto m = load_required(c.data.trinary, "trinary");
    m = ensure_split(std::move(m), pretrain_split(c, m));
    return training::pretrain_classification(c.model, c.preprocess, c.pretrain, m, stage_context(ctx, "pretrain"));
  });
  out["stages"]["pretrain"] = finish_stage(ctx, "pretrain", stage1);
  out["checkpoints"]["pretrain"] = stage1.report.checkpoint_path;

  datasets::DatasetManifest labeled;
  double mae2 = 0.0;
  const auto stage2 = in_stage("regression", [&] {
    labeled = labeled_with_split(ctx, c.data.labeled, &out);
    auto r = training::train_regression(&stage1.checkpoint, c.model, c.preprocess, c.train, labeled,
                                        stage_context(ctx, "regression"));
    mae2 = test_mae(r.checkpoint.model, labeled);
    return r;
  });
  out["stages"]["regression"] = finish_stage(ctx, "regression", stage2);
  out["checkpoints"]["regression"] = stage2.report.checkpoint_path;
  out["test_mae"] = {{"regression", number_or_null(mae2)}};
  spdlog::info("stage regression test MAE {:.4f}", mae2);

  if (c.data.unlabeled.empty()) {
    const std::string message = "no unlabeled manifest configured (data.unlabeled); stopping after stage regression";
    spdlog::warn("{}", message);
    out["completed"] = json::array({"pretrain", "regression"});
    out["final_checkpoint"] = stage2.report.checkpoint_path;
    out["message"] = message;
    write_text(ctx.artifact("pipeline", ".json"), out.dump(2) + "\n");
    emit(ctx, out);
    return 0;
  }

  double mae3 = 0.0;
  const auto stage3 = in_stage("student", [&] {
    const auto unlabeled = unlabeled_view(load_required(c.data.unlabeled, "unlabeled"));
    const auto pseudo = training::generate_pseudo_labels(stage2.checkpoint, unlabeled);
    save_relocated(pseudo, ctx.artifact("pseudo", ".jsonl"));
    auto student_config = c.student;
    if (student_config.student_init == training::StudentInit::pretrain && student_config.pretrain_checkpoint.empty()) {
      student_config.pretrain_checkpoint = stage1.report.checkpoint_path;
    }
    auto r = training::train_student(stage2.checkpoint, labeled, pseudo, student_config, stage_context(ctx, "student"));
    mae3 = test_mae(r.checkpoint.model, labeled);
    return r;
  });
  out["stages"]["student"] = finish_stage(ctx, "student", stage3);
  out["checkpoints"]["student"] = stage3.report.checkpoint_path;
  out["test_mae"]["student"] = number_or_null(mae3);
  spdlog::info("stage student test MAE {:.4f} (regression {:.4f})", mae3, mae2);
  out["completed"] = json::array({"pretrain", "regression", "student"});
  out["final_checkpoint"] = stage3.report.checkpoint_path;
  write_text(ctx.artifact("pipeline", ".json"), out.dump(2) + "\n");
  emit(ctx, out);
  return 0;
}

class LoggerScope {
 public:
  LoggerScope(std::ostream& err, const std::string& level) : previous_(spdlog::default_logger()) {
    auto sink = std::make_shared<spdlog::sinks::ostream_sink_mt>(err, true);
    auto logger = std::make_shared<spdlog::logger>("fundusq", sink);
    logger->set_pattern("[%l] %v");
    logger->set_level(spdlog::level::from_str(level));
    spdlog::set_default_logger(logger);
  }
  ~LoggerScope() { spdlog::set_default_logger(previous_); }

 private:
  std::shared_ptr<spdlog::logger> previous_;
};

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Fundus image quality scoring toolkit", "fundusq"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  app.add_option("--config", g.config, "JSON run configuration");
  app.add_option("--seed", g.seed, "Global seed");
  app.add_option("--out-dir", g.out_dir, "Directory for artifacts");
  app.add_option("--log-level", g.log_level, "trace, debug, info, warn, error or off");
  app.add_option("--out", g.out, "Write the JSON report here instead of stdout");

  SynthArgs synth;
  auto* c_synth = app.add_subcommand("synth", "Generate a synthetic graded corpus");
  c_synth->add_option("--dir", synth.dir, "Output directory");
  c_synth->add_option("--mode", synth.mode, "mixed, blur or separable3");
  c_synth->add_option("--count", synth.count, "Number of images");
  c_synth->add_option("--prefix", synth.prefix, "Record id prefix");

  PathArgs prep;
  auto* c_prep = app.add_subcommand("preprocess", "Crop, pad and resize the images of a manifest");
  c_prep->add_option("--manifest", prep.manifest)->required();
  c_prep->add_option("--dir", prep.dir, "Output directory");

  SplitArgs split;
  auto* c_split = app.add_subcommand("split", "Stratified train/validation/test split");
  c_split->add_option("--manifest", split.manifest)->required();
  c_split->add_option("--output", split.output, "Output manifest");
  c_split->add_option("--counts", split.counts, "train,validation,test")->expected(3)->delimiter(',');

  PathArgs pre;
  auto* c_pre = app.add_subcommand("pretrain", "Stage I: three-class pre-training");
  c_pre->add_option("--manifest", pre.manifest, "Trinary-labeled manifest");

  TrainArgs train;
  auto* c_train = app.add_subcommand("train", "Stage II: regression training");
  c_train->add_option("--manifest", train.manifest, "Quality-labeled manifest");
  c_train->add_option("--init", train.init, "Pre-training checkpoint");

  PseudoArgs pseudo;
  auto* c_pseudo = app.add_subcommand("pseudo-label", "Score unlabeled images with a teacher");
  c_pseudo->add_option("--checkpoint", pseudo.checkpoint, "Teacher checkpoint")->required();
  c_pseudo->add_option("--manifest", pseudo.manifest, "Unlabeled manifest");
  c_pseudo->add_option("--output", pseudo.output, "Output manifest");

  StudentArgs student;
  auto* c_student = app.add_subcommand("train-student", "Stage III: student training on labeled plus pseudo-labeled data");
  c_student->add_option("--teacher", student.teacher, "Teacher checkpoint")->required();
  c_student->add_option("--labeled", student.labeled, "Quality-labeled manifest");
  c_student->add_option("--pseudo", student.pseudo, "Pseudo-labeled manifest")->required();

  EvalArgs ev;
  auto* c_eval = app.add_subcommand("evaluate", "Regression metrics on a labeled split");
  c_eval->add_option("--checkpoint", ev.checkpoint)->required();
  c_eval->add_option("--manifest", ev.manifest, "Quality-labeled manifest");
  c_eval->add_option("--split", ev.split, "train, validation, test or all");
  c_eval->add_option("--compare", ev.compare, "Second checkpoint for a paired comparison");

  ExternalArgs ext;
  auto* c_ext = app.add_subcommand("external-eval", "Binary metrics on a Good/Poor labeled set");
  c_ext->add_option("--checkpoint", ext.checkpoint)->required();
  c_ext->add_option("--manifest", ext.manifest, "Binary-labeled manifest");
  c_ext->add_option("--threshold", ext.threshold, "Good when score >= threshold");
  c_ext->add_flag("--sweep", ext.sweep, "Also report thresholds 5.0 to 8.0 in steps of 0.5");

  GradCamArgs cam;
  auto* c_cam = app.add_subcommand("gradcam", "Grad-CAM heatmap for one image");
  c_cam->add_option("--checkpoint", cam.checkpoint)->required();
  c_cam->add_option("--image", cam.image)->required();
  c_cam->add_option("--layer", cam.layer, "Backbone layer");
  c_cam->add_flag("--invert", cam.invert, "Highlight regions that lower the score");
  c_cam->add_option("--alpha", cam.alpha, "Overlay opacity");
  c_cam->add_option("--output", cam.output, "Overlay PNG");
  c_cam->add_option("--npy", cam.npy, "Raw heatmap as .npy");

  ServeArgs serve;
  auto* c_serve = app.add_subcommand("serve", "Run the scoring and annotation service");
  c_serve->add_option("--checkpoint", serve.checkpoint);
  c_serve->add_option("--scale", serve.scale, "Reference scale JSON");
  c_serve->add_option("--queue", serve.queue, "Manifest of images to annotate");
  c_serve->add_option("--log", serve.log, "Annotation log");
  c_serve->add_option("--listen", serve.listen, "host:port");
  c_serve->add_option("--cam-dir", serve.cam_dir);
  c_serve->add_option("--threshold", serve.threshold);

  ExportArgs exp;
  auto* c_exp = app.add_subcommand("export-labels", "Turn an annotation log into a labeled manifest");
  c_exp->add_option("--log", exp.log, "Annotation log");
  c_exp->add_option("--queue", exp.queue, "Manifest providing image URIs");
  c_exp->add_option("--policy", exp.policy, "latest_wins or average");
  c_exp->add_option("--output", exp.output, "Output manifest");

  auto* c_pipe = app.add_subcommand("pipeline", "Stages I, II and III end to end");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    return 2;
  }

  try {
    Context ctx;
    ctx.out = &out;
    ctx.report_path = g.out;
    ctx.config = g.config.empty() ? run_config_from_json(json::object()) : load_run_config(g.config);
    apply_environment(ctx.config);
    if (g.seed) ctx.config.seed = *g.seed;
    if (g.out_dir) ctx.config.out_dir = *g.out_dir;
    if (g.log_level) ctx.config.log_level = *g.log_level;
    ctx.config.propagate_seed();
    ctx.config.validate();
    LoggerScope logging(err, ctx.config.log_level);

    if (c_synth->parsed()) return cmd_synth(ctx, synth);
    if (c_prep->parsed()) return cmd_preprocess(ctx, prep);
    if (c_split->parsed()) return cmd_split(ctx, split);
    if (c_pre->parsed()) return cmd_pretrain(ctx, pre);
    if (c_train->parsed()) return cmd_train(ctx, train);
    if (c_pseudo->parsed()) return cmd_pseudo_label(ctx, pseudo);
    if (c_student->parsed()) return cmd_train_student(ctx, student);
    if (c_eval->parsed()) return cmd_evaluate(ctx, ev);
    if (c_ext->parsed()) return cmd_external_eval(ctx, ext);
    if (c_cam->parsed()) return cmd_gradcam(ctx, cam);
    if (c_serve->parsed()) return cmd_serve(ctx, serve);
    if (c_exp->parsed()) return cmd_export_labels(ctx, exp);
    if (c_pipe->parsed()) return cmd_pipeline(ctx);
    err << "error: no subcommand\n";
    return 2;
  } catch (const Error& e) {
    err << "error: " << e.code() << ": " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    err << "error: internal: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace fundusq::cli
