#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <string>

#include <json.hpp>

#include "fundusq/datasets.hpp"
#include "fundusq/imaging.hpp"
#include "fundusq/qmodel.hpp"
#include "fundusq/service.hpp"
#include "fundusq/training.hpp"

namespace fundusq::cli {

struct SplitSection {
  std::optional<std::array<std::size_t, 3>> counts;
  std::array<double, 3> fractions{932.0 / 1245.0, 104.0 / 1245.0, 209.0 / 1245.0};
  bool stratify = true;
  double bin_width = 0.5;
};

struct SynthSection {
  datasets::DegradationSpec spec;
  std::size_t count = 200;
  std::string prefix = "syn";
};

/// Manifest paths used by the stage commands and the pipeline.
struct DataSection {
  std::string trinary;
  std::string labeled;
  std::string unlabeled;
  std::string binary;
};

struct EvalSection {
  double outlier_cutoff = 1.5;
  int resamples = 1000;
  double threshold = 6.5;
  std::string split = "test";
  bool plots = true;
};

struct RunConfig {
  std::uint64_t seed = 0;
  std::string out_dir = "runs";
  std::string log_level = "info";

  qmodel::ModelConfig model;
  imaging::PreprocessConfig preprocess;
  training::TrainConfig pretrain;
  training::TrainConfig train;
  training::TrainConfig student;
  SplitSection split;
  SynthSection synth;
  DataSection data;
  EvalSection eval;
  service::ServiceConfig service;

  /// Copies the global seed into every seeded section.
  void propagate_seed();
  /// Throws ConfigError.
  void validate() const;
};

nlohmann::json to_json(const RunConfig& c);
/// Rejects unknown keys at every level.
RunConfig run_config_from_json(const nlohmann::json& j);
RunConfig load_run_config(const std::filesystem::path& path);

/// FUNDUSQ_SEED, FUNDUSQ_OUT_DIR, FUNDUSQ_LOG_LEVEL and the service variables.
void apply_environment(RunConfig& c, const std::function<const char*(const char*)>& getenv = {});

/// Entry point of the fundusq binary. Returns the process exit status: 0 on
/// success, 1 when an error was reported, 2 for usage errors.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace fundusq::cli
