#include <cstdlib>
#include <fstream>
#include <sstream>

#include <fmt/format.h>

#include <gtest/gtest.h>

#include "fundusq/cli.hpp"
#include "fundusq/errors.hpp"
#include "fundusq/explain.hpp"
#include "fundusq/metrics.hpp"
#include "fundusq/qmodel.hpp"
#include "fundusq/service.hpp"
#include "test_support.hpp"

using namespace fundusq;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct CliResult {
  int code = 0;
  std::string out;
  std::string err;
  json report() const { return json::parse(out); }
};

CliResult fundusq_cmd(std::vector<std::string> args) {
  args.insert(args.begin(), "fundusq");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  CliResult r;
  r.code = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
  r.out = out.str();
  r.err = err.str();
  return r;
}

json toy_config(const fs::path& out_dir) {
  return {{"seed", 5},
          {"out_dir", out_dir.string()},
          {"log_level", "warn"},
          {"model", {{"backbone", "small_cnn_test"}, {"input_size", 32}, {"head_hidden", 16}}},
          {"preprocess", {{"target_size", 32}}},
          {"pretrain", {{"max_epochs", 3}, {"batch_size", 16}, {"learning_rate", 0.002}}},
          {"train", {{"max_epochs", 25}, {"batch_size", 16}, {"learning_rate", 0.002}, {"patience", 25}}},
          {"student", {{"max_epochs", 6}, {"batch_size", 16}, {"learning_rate", 0.001}}},
          {"eval", {{"resamples", 200}}}};
}

fs::path write_config(const fs::path& path, const json& j) {
  std::ofstream(path) << j.dump(2);
  return path;
}

class CliTest : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = new fqtest::TempDir("fq-cli");
    const auto cfg = write_config(*dir_ / "base.json", toy_config(*dir_ / "runs"));
    for (const auto& [name, mode, count, prefix] :
         std::vector<std::tuple<std::string, std::string, int, std::string>>{
             {"labeled", "blur", 160, "lab"}, {"unlabeled", "blur", 80, "unl"}, {"separable", "separable3", 120, "sep"}}) {
      const auto r = fundusq_cmd({"synth", "--config", cfg.string(), "--dir", (*dir_ / name).string(), "--mode", mode,
                          "--count", std::to_string(count), "--prefix", prefix});
      ASSERT_EQ(r.code, 0) << r.err;
    }
  }
  static void TearDownTestSuite() {
    delete dir_;
    dir_ = nullptr;
  }

  static fs::path manifest(const std::string& name) { return *dir_ / name / "manifest.jsonl"; }

  fs::path config(const std::string& name, json patch = json::object()) {
    auto j = toy_config(own_ / "runs");
    j["data"] = {{"trinary", manifest("labeled").string()},
                 {"labeled", manifest("labeled").string()},
                 {"unlabeled", manifest("unlabeled").string()},
                 {"binary", manifest("separable").string()}};
    j.merge_patch(patch);
    return write_config(own_ / name, j);
  }

  fqtest::TempDir own_{"fq-cli-case"};
  static fqtest::TempDir* dir_;
};

fqtest::TempDir* CliTest::dir_ = nullptr;

}  // namespace

TEST(CliConfig, UnknownKeysRejected) {
  fqtest::TempDir dir;
  auto j = toy_config(dir / "runs");
  EXPECT_NO_THROW(cli::run_config_from_json(j));
  for (const auto& bad : {json{{"sed", 1}}, json{{"eval", {{"cutoff", 1.5}}}}, json{{"model", {{"depth", 3}}}},
                          json{{"train", {{"lr", 0.1}}}}, json{{"service", {{"port", 80}}}}}) {
    auto k = j;
    k.merge_patch(bad);
    EXPECT_THROW(cli::run_config_from_json(k), ConfigError) << bad.dump();
    const auto r = fundusq_cmd({"synth", "--config", write_config(dir / "bad.json", k).string()});
    EXPECT_EQ(r.code, 1);
    EXPECT_NE(r.err.find("ConfigError"), std::string::npos) << r.err;
    EXPECT_TRUE(r.out.empty());
  }
}

TEST(CliConfig, InvalidValuesRejectedBeforeExecution) {
  fqtest::TempDir dir;
  for (const auto& bad : {json{{"pretrain", {{"loss", "rmse"}}}}, json{{"log_level", "loud"}},
                          json{{"split", {{"fractions", {0.5, 0.5, 0.5}}}}}, json{{"eval", {{"split", "dev"}}}}}) {
    auto j = toy_config(dir / "runs");
    j.merge_patch(bad);
    EXPECT_THROW(cli::run_config_from_json(j).validate(), ConfigError) << bad.dump();
  }
  const auto r = fundusq_cmd({"synth", "--config", (dir / "missing.json").string()});
  EXPECT_EQ(r.code, 1);
  EXPECT_FALSE(fs::exists(dir / "runs"));
}

TEST(CliConfig, RoundTrip) {
  fqtest::TempDir dir;
  auto c = cli::run_config_from_json(toy_config(dir / "runs"));
  const auto j = cli::to_json(c);
  EXPECT_EQ(cli::to_json(cli::run_config_from_json(j)), j);
  EXPECT_EQ(c.pretrain.loss, training::Loss::categorical_cross_entropy);
  c.propagate_seed();
  EXPECT_EQ(c.model.seed, 5u);
  EXPECT_EQ(c.student.seed, 5u);
}

TEST_F(CliTest, FlagsOverrideEnvironmentOverrideFile) {
  const auto cfg = config("prec.json");
  const auto seed_of = [&](std::vector<std::string> extra) {
    std::vector<std::string> args{"split", "--config", cfg.string(), "--manifest", manifest("labeled").string()};
    args.insert(args.end(), extra.begin(), extra.end());
    const auto r = fundusq_cmd(args);
    EXPECT_EQ(r.code, 0) << r.err;
    return r.report().at("seed").get<int>();
  };
  EXPECT_EQ(seed_of({}), 5);
  ::setenv("FUNDUSQ_SEED", "11", 1);
  EXPECT_EQ(seed_of({}), 11);
  EXPECT_EQ(seed_of({"--seed", "17"}), 17);
  ::unsetenv("FUNDUSQ_SEED");

  const auto env = [](const char* name) -> const char* {
    return std::string(name) == "FUNDUSQ_OUT_DIR" ? "/env/out" : std::string(name) == "FUNDUSQ_THRESHOLD" ? "7" : nullptr;
  };
  auto c = cli::load_run_config(cfg);
  cli::apply_environment(c, env);
  EXPECT_EQ(c.out_dir, "/env/out");
  EXPECT_EQ(c.service.threshold, 7.0);
  EXPECT_THROW(cli::apply_environment(c, [](const char* n) -> const char* {
                 return std::string(n) == "FUNDUSQ_SEED" ? "-3" : nullptr;
               }),
               ConfigError);
}

TEST_F(CliTest, ExitStatusReflectsErrors) {
  const auto cfg = config("exit.json");
  EXPECT_EQ(fundusq_cmd({"--help"}).code, 0);
  EXPECT_EQ(fundusq_cmd({}).code, 2);
  EXPECT_EQ(fundusq_cmd({"split", "--no-such-flag"}).code, 2);
  EXPECT_EQ(fundusq_cmd({"evaluate", "--config", cfg.string()}).code, 2);

  auto r = fundusq_cmd({"evaluate", "--config", cfg.string(), "--checkpoint", (own_ / "none.ckpt").string()});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("IoError"), std::string::npos);

  r = fundusq_cmd({"split", "--config", cfg.string(), "--manifest", manifest("labeled").string(), "--counts", "1,2,3"});
  EXPECT_EQ(r.code, 1);
  EXPECT_FALSE(r.err.empty());

  r = fundusq_cmd({"split", "--config", cfg.string(), "--manifest", manifest("labeled").string(), "--counts", "120,15,25"});
  EXPECT_EQ(r.code, 0) << r.err;
  EXPECT_TRUE(r.err.empty()) << r.err;
  EXPECT_EQ(r.report().at("train"), 120);
  EXPECT_EQ(r.report().at("test"), 25);
}

TEST_F(CliTest, ReportGoesToOutFile) {
  const auto cfg = config("out.json");
  const auto path = own_ / "report.json";
  const auto r = fundusq_cmd({"split", "--config", cfg.string(), "--manifest", manifest("labeled").string(), "--out",
                      path.string()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_TRUE(r.out.empty());
  std::ifstream f(path);
  const auto stdout_run = fundusq_cmd({"split", "--config", cfg.string(), "--manifest", manifest("labeled").string()});
  EXPECT_EQ(json::parse(f), stdout_run.report());
}

TEST_F(CliTest, EvaluateTrainedBeatsUntrained) {
  const auto cfg = config("eval.json");
  auto r = fundusq_cmd({"train", "--config", cfg.string()});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto stage = r.report();
  EXPECT_EQ(stage.at("stage"), "regression");
  const fs::path runs = own_ / "runs";
  EXPECT_TRUE(fs::exists(runs / "regression-5.ckpt"));
  EXPECT_TRUE(fs::exists(runs / "regression-5.json"));
  EXPECT_TRUE(fs::exists(runs / "regression-5.csv"));
  const auto split = runs / "split-5.jsonl";
  ASSERT_TRUE(fs::exists(split));

  auto config = cli::load_run_config(cfg);
  config.model.seed = 5;
  auto untrained = qmodel::build_model(config.model, config.preprocess);
  qmodel::save_checkpoint(untrained, {qmodel::Stage::regression, nullptr, ""}, own_ / "untrained.ckpt");

  r = fundusq_cmd({"evaluate", "--config", cfg.string(), "--checkpoint", (runs / "regression-5.ckpt").string(), "--manifest",
           split.string(), "--compare", (own_ / "untrained.ckpt").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto report = r.report();
  for (const char* key : {"mae", "rmse", "ci95", "max_error", "n"}) EXPECT_TRUE(report.at("metrics").contains(key)) << key;
  const auto test_count = datasets::load_manifest(split).count(datasets::Split::test);
  EXPECT_GT(test_count, 0u);
  EXPECT_EQ(report.at("metrics").at("n"), test_count);
  EXPECT_EQ(report.at("per_sample").size(), test_count);
  EXPECT_EQ(report.at("outliers").at("cutoff"), 1.5);
  EXPECT_TRUE(fs::exists(report.at("plots").at("scatter").get<std::string>()));
  const double trained = report.at("metrics").at("mae");
  const double baseline = report.at("comparison").at("mae");
  EXPECT_LT(trained, baseline);
  const auto& w = report.at("comparison").at("wilcoxon");
  EXPECT_GE(w.at("p_two_sided").get<double>(), 0.0);
  EXPECT_LE(w.at("p_two_sided").get<double>(), 1.0);

  const auto ci = report.at("metrics").at("ci95");
  EXPECT_LE(ci[0].get<double>(), trained);
  EXPECT_GE(ci[1].get<double>(), trained);
  for (const auto& o : report.at("outliers").at("records")) EXPECT_GT(std::abs(o.at("delta").get<double>()), 1.5);

  r = fundusq_cmd({"evaluate", "--config", cfg.string(), "--checkpoint", (runs / "regression-5.ckpt").string(), "--manifest",
           manifest("labeled").string()});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("EmptySplit"), std::string::npos);
}

TEST_F(CliTest, ExternalEvalSeparableAndSweep) {
  // Good and Poor drawn from the outer severity bands, far from the threshold.
  auto binary = datasets::load_manifest(manifest("separable"));
  std::erase_if(binary.records, [](const auto& r) { return r.trinary == datasets::TrinaryLabel::Usable; });
  for (auto& r : binary.records) r.image_uri = (manifest("separable").parent_path() / r.image_uri).string();
  datasets::save_manifest(binary, own_ / "binary.jsonl");
  const std::size_t n = binary.records.size();

  const auto cfg = config("ext.json", {{"data", {{"labeled", manifest("separable").string()},
                                                 {"binary", (own_ / "binary.jsonl").string()}}},
                                       {"train", {{"max_epochs", 40}, {"patience", 40}}}});
  auto r = fundusq_cmd({"train", "--config", cfg.string()});
  ASSERT_EQ(r.code, 0) << r.err;
  r = fundusq_cmd({"external-eval", "--config", cfg.string(), "--checkpoint", (own_ / "runs" / "regression-5.ckpt").string(),
           "--sweep"});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto report = r.report();
  const auto& rep = report.at("report");
  EXPECT_EQ(rep.at("accuracy").get<double>(), 1.0) << rep.dump();
  EXPECT_EQ(rep.at("threshold"), 6.5);

  metrics::ConfusionCounts counts;
  counts.tp = rep.at("tp");
  counts.fp = rep.at("fp");
  counts.tn = rep.at("tn");
  counts.fn = rep.at("fn");
  EXPECT_EQ(counts.n(), n);
  auto again = metrics::to_json(metrics::confusion_metrics(counts, 6.5));
  for (const char* key : {"accuracy", "sensitivity", "specificity", "mcc"}) EXPECT_EQ(again.at(key), rep.at(key)) << key;

  const auto& sweep = report.at("sweep");
  ASSERT_EQ(sweep.size(), 7u);
  for (std::size_t i = 0; i < sweep.size(); ++i) {
    EXPECT_DOUBLE_EQ(sweep[i].at("threshold").get<double>(), 5.0 + 0.5 * static_cast<double>(i));
    EXPECT_EQ(sweep[i].at("report").at("threshold"), sweep[i].at("threshold"));
  }
  EXPECT_EQ(report.at("class_scores").at("Good").at("n").get<int>() + report.at("class_scores").at("Poor").at("n").get<int>(),
            static_cast<int>(n));
  EXPECT_TRUE(fs::exists(report.at("plots").at("histogram").get<std::string>()));

  r = fundusq_cmd({"external-eval", "--config", cfg.string(), "--checkpoint", (own_ / "runs" / "regression-5.ckpt").string(),
           "--threshold", "8.0"});
  ASSERT_EQ(r.code, 0);
  EXPECT_EQ(r.report().at("report"), sweep[6].at("report"));
}

TEST_F(CliTest, PipelineProducesThreeStageCheckpoints) {
  const auto cfg = config("pipe.json", {{"log_level", "info"}});
  const auto first = fundusq_cmd({"pipeline", "--config", cfg.string()});
  ASSERT_EQ(first.code, 0) << first.err;
  const auto report = first.report();
  EXPECT_EQ(report.at("completed"), json::array({"pretrain", "regression", "student"}));
  for (const auto& [name, stage] : std::vector<std::pair<std::string, qmodel::Stage>>{
           {"pretrain", qmodel::Stage::pretrain}, {"regression", qmodel::Stage::regression},
           {"student", qmodel::Stage::student}}) {
    const auto path = report.at("checkpoints").at(name).get<std::string>();
    EXPECT_EQ(path, (own_ / "runs" / fmt::format("{}-5.ckpt", name)).string());
    EXPECT_EQ(qmodel::load_checkpoint(path).meta.stage, stage) << name;
    EXPECT_TRUE(fs::exists(own_ / "runs" / fmt::format("{}-5.json", name)));
  }
  EXPECT_EQ(report.at("final_checkpoint"), report.at("checkpoints").at("student"));
  const double mae2 = report.at("test_mae").at("regression");
  const double mae3 = report.at("test_mae").at("student");
  EXPECT_LE(mae3, mae2 + 0.1);
  EXPECT_NE(first.err.find("test MAE"), std::string::npos);

  const auto second = fundusq_cmd({"pipeline", "--config", cfg.string()});
  ASSERT_EQ(second.code, 0);
  EXPECT_EQ(second.out, first.out);
}

TEST_F(CliTest, PipelineStopsWithoutUnlabeledManifest) {
  const auto cfg = config("pipe2.json", {{"data", {{"unlabeled", nullptr}}}});
  const auto r = fundusq_cmd({"pipeline", "--config", cfg.string()});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto report = r.report();
  EXPECT_EQ(report.at("completed"), json::array({"pretrain", "regression"}));
  EXPECT_NE(report.at("message").get<std::string>().find("unlabeled"), std::string::npos);
  EXPECT_NE(r.err.find("stopping after stage regression"), std::string::npos);
  EXPECT_FALSE(fs::exists(own_ / "runs" / "student-5.ckpt"));
  EXPECT_FALSE(report.at("checkpoints").contains("student"));
}

TEST_F(CliTest, PipelineNamesFailingStage) {
  const auto stripped = own_ / "stripped.jsonl";
  auto m = datasets::load_manifest(manifest("unlabeled"));
  for (auto& r : m.records) r.quality.reset();
  for (auto& r : m.records) r.image_uri = (manifest("unlabeled").parent_path() / r.image_uri).string();
  datasets::save_manifest(m, stripped);
  const auto cfg2 = config("pipe4.json", {{"data", {{"labeled", stripped.string()}}}, {"split", {{"stratify", false}}}});
  const auto r = fundusq_cmd({"pipeline", "--config", cfg2.string()});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("stage regression"), std::string::npos) << r.err;
  EXPECT_NE(r.err.find("MissingLabels"), std::string::npos) << r.err;
  EXPECT_TRUE(fs::exists(own_ / "runs" / "pretrain-5.ckpt"));
}

TEST_F(CliTest, StageCommandsChain) {
  const auto cfg = config("chain.json", {{"train", {{"max_epochs", 4}}}});
  const fs::path runs = own_ / "runs";
  ASSERT_EQ(fundusq_cmd({"pretrain", "--config", cfg.string()}).code, 0);
  auto r = fundusq_cmd({"train", "--config", cfg.string(), "--init", (runs / "pretrain-5.ckpt").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  r = fundusq_cmd({"pseudo-label", "--config", cfg.string(), "--checkpoint", (runs / "regression-5.ckpt").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(r.report().at("records"), 80);
  const auto pseudo = datasets::load_manifest(r.report().at("manifest").get<std::string>());
  for (const auto& rec : pseudo.records) {
    EXPECT_TRUE(rec.pseudo);
    EXPECT_GE(rec.quality->value(), 1.0);
    EXPECT_LE(rec.quality->value(), 10.0);
  }
  r = fundusq_cmd({"train-student", "--config", cfg.string(), "--teacher", (runs / "regression-5.ckpt").string(), "--pseudo",
           (runs / "pseudo-5.jsonl").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(r.report().at("stage"), "student");

  r = fundusq_cmd({"train", "--config", cfg.string(), "--init", (runs / "regression-5.ckpt").string()});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("WrongStage"), std::string::npos);
}

TEST_F(CliTest, GradcamWritesOverlayAndHeatmap) {
  const auto cfg = config("cam.json", {{"train", {{"max_epochs", 2}}}});
  ASSERT_EQ(fundusq_cmd({"train", "--config", cfg.string()}).code, 0);
  const auto image = manifest("labeled").parent_path() / "images" / "lab000004.png";
  const auto npy = own_ / "cam.npy";
  auto r = fundusq_cmd({"gradcam", "--config", cfg.string(), "--checkpoint", (own_ / "runs" / "regression-5.ckpt").string(),
                "--image", image.string(), "--npy", npy.string()});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto report = r.report();
  EXPECT_EQ(report.at("layer"), "relu3");
  const auto overlay = imaging::load_image(report.at("overlay").get<std::string>());
  EXPECT_EQ(overlay.height(), 32);
  const auto cam = explain::read_npy(npy);
  EXPECT_EQ(cam.width, 32);
  for (float v : cam.values) {
    EXPECT_GE(v, 0.0f);
    EXPECT_LE(v, 1.0f);
  }
  r = fundusq_cmd({"gradcam", "--config", cfg.string(), "--checkpoint", (own_ / "runs" / "regression-5.ckpt").string(),
           "--image", image.string(), "--layer", "nope"});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("UnknownLayer"), std::string::npos);
}

TEST_F(CliTest, ExportLabelsFromLog) {
  const auto cfg = config("export.json");
  const auto log_path = own_ / "ann" / "log.jsonl";
  {
    service::AnnotationLog log(log_path);
    log.append({"r1", "lab000001", "g1", 7.5, "2024-03-01T12:00:00Z", "2024.1"});
    log.append({"r2", "lab000001", "g2", 4.0, "2024-03-01T12:00:09Z", "2024.1"});
    log.append({"r3", "lab000002", "g1", 9.0, "2024-03-01T12:00:01Z", "2024.1"});
  }
  auto r = fundusq_cmd({"export-labels", "--config", cfg.string(), "--log", log_path.string(), "--queue",
                manifest("labeled").string(), "--policy", "average"});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(r.report().at("records"), 2);
  EXPECT_EQ(r.report().at("annotations"), 3);
  const auto m = datasets::load_manifest(r.report().at("manifest").get<std::string>());
  ASSERT_EQ(m.records.size(), 2u);
  EXPECT_EQ(m.records[0].quality->value(), 6.0);
  EXPECT_EQ(m.records[0].image_uri, "images/lab000001.png");
  const auto again = fundusq_cmd({"export-labels", "--config", cfg.string(), "--log", log_path.string(), "--queue",
                          manifest("labeled").string(), "--policy", "average"});
  EXPECT_EQ(again.out, r.out);

  r = fundusq_cmd({"export-labels", "--config", cfg.string(), "--log", (own_ / "missing.jsonl").string()});
  EXPECT_EQ(r.code, 1);
  r = fundusq_cmd({"export-labels", "--config", cfg.string(), "--log", log_path.string(), "--policy", "median"});
  EXPECT_EQ(r.code, 1);
}
