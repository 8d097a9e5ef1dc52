#include <cmath>
#include <fstream>
#include <map>
#include <set>

#include <gtest/gtest.h>

#include "fundusq/datasets.hpp"
#include "fundusq/errors.hpp"
#include "test_support.hpp"

using namespace fundusq;
using namespace fundusq::datasets;

namespace {

FundusRecord make_record(const std::string& id, std::optional<double> quality, bool pseudo = false) {
  FundusRecord r;
  r.id = id;
  r.image_uri = "images/" + id + ".png";
  r.source = "unit";
  if (quality) r.quality = QualityScore(*quality);
  r.pseudo = pseudo;
  return r;
}

// Grid scores drawn from a skewed distribution so bins have uneven sizes.
DatasetManifest graded_manifest(std::size_t n, std::uint64_t seed, const std::string& prefix = "r",
                                bool pseudo = false) {
  Rng rng(seed);
  DatasetManifest m;
  for (std::size_t i = 0; i < n; ++i) {
    const double u = rng.uniform();
    const double score = snap_to_grid(1.0 + 9.0 * std::sqrt(u));
    m.records.push_back(make_record(prefix + std::to_string(i), score, pseudo));
  }
  return m;
}

std::map<Split, std::size_t> split_sizes(const DatasetManifest& m) {
  std::map<Split, std::size_t> out;
  for (const auto& [id, s] : m.split_assignment) ++out[s];
  return out;
}

}  // namespace

TEST(QualityScore, RangeAndGrid) {
  EXPECT_THROW(QualityScore(0.5), ValidationError);
  EXPECT_THROW(QualityScore(10.5), ValidationError);
  EXPECT_THROW(QualityScore(std::nan("")), ValidationError);
  EXPECT_TRUE(QualityScore(6.5).on_grid());
  EXPECT_FALSE(QualityScore(6.3).on_grid());
  EXPECT_DOUBLE_EQ(snap_to_grid(6.25), 6.5);
  EXPECT_DOUBLE_EQ(snap_to_grid(6.24), 6.0);
  EXPECT_DOUBLE_EQ(snap_to_grid(0.2), 1.0);
  EXPECT_DOUBLE_EQ(snap_to_grid(12.0), 10.0);
}

TEST(Manifest, LoadWellFormed) {
  fqtest::TempDir dir;
  const auto path = dir / "m.jsonl";
  std::ofstream(path) << R"({"version":1,"source":"unit","created":"2024-01-01T00:00:00Z"})" << "\n"
                      << R"({"id":"a","image_uri":"a.png","source":"x","quality":6.5,"split":"train"})" << "\n"
                      << R"({"id":"b","image_uri":"b.png","source":"x","trinary":"Usable","binary":"Poor"})" << "\n"
                      << R"({"id":"c","image_uri":"c.png","source":"x","quality":7.25,"pseudo":true})" << "\n";
  const auto m = load_manifest(path);
  ASSERT_EQ(m.records.size(), 3u);
  EXPECT_EQ(m.split_of("a"), Split::train);
  EXPECT_EQ(m.records[1].trinary, TrinaryLabel::Usable);
  EXPECT_EQ(m.records[1].binary, BinaryLabel::Poor);
  EXPECT_TRUE(m.records[2].pseudo);
  EXPECT_EQ(m.resolve(m.records[0]), dir.path() / "a.png");
}

TEST(Manifest, OutOfRangeQualityNamesRecord) {
  const std::string text = "{\"version\":1}\n{\"id\":\"bad1\",\"image_uri\":\"x.png\",\"quality\":10.5}\n";
  try {
    parse_manifest(text);
    FAIL() << "expected ValidationError";
  } catch (const ValidationError& e) {
    EXPECT_EQ(e.record_id(), "bad1");
  }
}

TEST(Manifest, DuplicateIdsAndOtherErrors) {
  EXPECT_THROW(parse_manifest("{\"version\":1}\n{\"id\":\"a\",\"image_uri\":\"x\"}\n{\"id\":\"a\",\"image_uri\":\"y\"}\n"),
               ValidationError);
  EXPECT_THROW(parse_manifest("{\"id\":\"a\",\"image_uri\":\"x\"}\n"), ParseError);
  EXPECT_THROW(parse_manifest("{\"version\":1}\n{not json\n"), ParseError);
  EXPECT_THROW(parse_manifest("{\"version\":1}\n{\"id\":\"a\",\"image_uri\":\"x\",\"colour\":1}\n"), ValidationError);
  EXPECT_THROW(parse_manifest("{\"version\":1}\n{\"id\":\"a\",\"image_uri\":\"x\",\"pseudo\":true}\n"),
               ValidationError);
  EXPECT_THROW(load_manifest("/nonexistent/manifest.jsonl"), IoError);
}

TEST(Manifest, SerializeRoundTrip) {
  auto m = graded_manifest(50, 4);
  m.records[3].trinary = TrinaryLabel::Reject;
  m.records[4].binary = BinaryLabel::Good;
  m.split_assignment[m.records[0].id] = Split::test;
  fqtest::TempDir dir;
  save_manifest(m, dir / "m.jsonl");
  const auto back = load_manifest(dir / "m.jsonl");
  ASSERT_EQ(back.records.size(), m.records.size());
  for (std::size_t i = 0; i < m.records.size(); ++i) {
    EXPECT_EQ(back.records[i].id, m.records[i].id);
    EXPECT_EQ(back.records[i].quality, m.records[i].quality);
    EXPECT_EQ(back.records[i].trinary, m.records[i].trinary);
    EXPECT_EQ(back.records[i].binary, m.records[i].binary);
  }
  EXPECT_EQ(back.split_assignment, m.split_assignment);
  EXPECT_EQ(serialize_manifest(back), serialize_manifest(m));
}

TEST(BinScore, Examples) {
  EXPECT_EQ(bin_score(1.0, 0.5), 0);
  EXPECT_EQ(bin_score(10.0, 0.5), 18);
  EXPECT_EQ(bin_score(6.5, 0.5), 11);
  EXPECT_EQ(bin_count(0.5), 19);
}

TEST(BinScore, PartitionsTheRange) {
  for (double w : {0.5, 1.0, 0.75, 2.0}) {
    const int bins = bin_count(w);
    int prev = 0;
    for (int k = 0; k <= 9000; ++k) {
      const double v = 1.0 + k * 0.001;
      const int b = bin_score(v, w);
      ASSERT_GE(b, 0);
      ASSERT_LT(b, bins);
      ASSERT_GE(b, prev) << "bins must be monotone in the score";
      prev = b;
    }
    std::set<int> grid_bins;
    for (int k = 0; k <= 18; ++k) grid_bins.insert(bin_score(1.0 + 0.5 * k, w));
    if (w == 0.5) EXPECT_EQ(grid_bins.size(), 19u);
  }
}

TEST(StratifiedSplit, ExactPublishedCounts) {
  const auto m = graded_manifest(1245, 7);
  SplitSpec spec;
  spec.counts = std::array<std::size_t, 3>{932, 104, 209};
  spec.seed = 42;
  const auto out = stratified_split(m, spec);
  const auto sizes = split_sizes(out);
  EXPECT_EQ(sizes.at(Split::train), 932u);
  EXPECT_EQ(sizes.at(Split::validation), 104u);
  EXPECT_EQ(sizes.at(Split::test), 209u);
  EXPECT_EQ(out.split_assignment.size(), 1245u);
}

TEST(StratifiedSplit, PerBinDeviationBelowOneRecord) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto m = graded_manifest(1245, 100 + seed);
    SplitSpec spec;
    spec.counts = std::array<std::size_t, 3>{932, 104, 209};
    spec.seed = seed;
    const auto out = stratified_split(m, spec);
    std::map<int, std::map<Split, double>> cell;
    std::map<int, double> bin_size;
    for (const auto& r : m.records) {
      const int b = bin_score(r.quality->value(), 0.5);
      bin_size[b] += 1.0;
      cell[b][*out.split_of(r.id)] += 1.0;
    }
    const std::map<Split, double> totals{{Split::train, 932}, {Split::validation, 104}, {Split::test, 209}};
    for (const auto& [b, size] : bin_size) {
      for (const auto& [s, total] : totals) {
        const double ideal = size * total / 1245.0;
        EXPECT_LT(std::abs(cell[b][s] - ideal), 1.0) << "bin " << b << " split " << to_string(s);
      }
    }
  }
}

TEST(StratifiedSplit, SingleBinFractions) {
  DatasetManifest m;
  for (int i = 0; i < 10; ++i) m.records.push_back(make_record("x" + std::to_string(i), 5.0));
  SplitSpec spec;
  spec.fractions = std::array<double, 3>{0.8, 0.1, 0.1};
  const auto sizes = split_sizes(stratified_split(m, spec));
  EXPECT_EQ(sizes.at(Split::train), 8u);
  EXPECT_EQ(sizes.at(Split::validation), 1u);
  EXPECT_EQ(sizes.at(Split::test), 1u);
}

TEST(StratifiedSplit, DeterministicAndSeedSensitive) {
  const auto m = graded_manifest(300, 9);
  SplitSpec spec;
  spec.fractions = std::array<double, 3>{0.7, 0.1, 0.2};
  spec.seed = 5;
  const auto a = stratified_split(m, spec);
  const auto b = stratified_split(m, spec);
  EXPECT_EQ(a.split_assignment, b.split_assignment);
  spec.seed = 6;
  EXPECT_NE(stratified_split(m, spec).split_assignment, a.split_assignment);
}

TEST(StratifiedSplit, Errors) {
  const auto m = graded_manifest(20, 1);
  SplitSpec spec;
  spec.counts = std::array<std::size_t, 3>{15, 5, 5};
  EXPECT_THROW(stratified_split(m, spec), InsufficientData);
  spec.counts = std::array<std::size_t, 3>{10, 5, 4};
  EXPECT_THROW(stratified_split(m, spec), ValidationError);
  SplitSpec bad;
  EXPECT_THROW(stratified_split(m, bad), ValidationError);
  bad.fractions = std::array<double, 3>{0.5, 0.5, 0.5};
  EXPECT_THROW(stratified_split(m, bad), ValidationError);
  auto unlabeled = m;
  unlabeled.records[3].quality.reset();
  spec.counts = std::array<std::size_t, 3>{10, 5, 5};
  EXPECT_THROW(stratified_split(unlabeled, spec), ValidationError);
}

TEST(StratifiedSplit, RandomAllocationsAreExact) {
  Rng rng(77);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 1 + rng.below(400);
    const auto m = graded_manifest(n, 1000 + static_cast<std::uint64_t>(trial));
    const std::size_t a = rng.below(n + 1);
    const std::size_t b = rng.below(n - a + 1);
    SplitSpec spec;
    spec.counts = std::array<std::size_t, 3>{a, b, n - a - b};
    spec.seed = static_cast<std::uint64_t>(trial);
    const auto sizes = split_sizes(stratified_split(m, spec));
    EXPECT_EQ(sizes.count(Split::train) ? sizes.at(Split::train) : 0, a);
    EXPECT_EQ(sizes.count(Split::validation) ? sizes.at(Split::validation) : 0, b);
    EXPECT_EQ(sizes.count(Split::test) ? sizes.at(Split::test) : 0, n - a - b);
  }
}

TEST(Apportion, SumsToTotal) {
  EXPECT_EQ(apportion(10, {0.8, 0.1, 0.1}, 0), (std::vector<std::size_t>{8, 1, 1}));
  EXPECT_EQ(apportion(1245, {932, 104, 209}, 0), (std::vector<std::size_t>{932, 104, 209}));
  const auto v = apportion(7, {1, 1, 1}, 3);
  EXPECT_EQ(v[0] + v[1] + v[2], 7u);
  EXPECT_THROW(apportion(5, {0.0, 0.0}, 0), ValidationError);
}

TEST(MergePseudo, PublishedArithmetic) {
  auto labeled = graded_manifest(1245, 11, "lab");
  SplitSpec spec;
  spec.counts = std::array<std::size_t, 3>{932, 104, 209};
  labeled = stratified_split(labeled, spec);
  const auto pseudo = graded_manifest(59910, 12, "ps", true);
  const auto merged = merge_pseudo(labeled, pseudo);
  const auto sizes = split_sizes(merged);
  EXPECT_EQ(sizes.at(Split::train), 57899u);
  EXPECT_EQ(sizes.at(Split::validation), 3047u);
  EXPECT_EQ(sizes.at(Split::test), 209u);
  for (const auto& r : labeled.records)
    if (labeled.split_of(r.id) == Split::test) EXPECT_EQ(merged.split_of(r.id), Split::test);
  for (const auto& r : pseudo.records) EXPECT_NE(merged.split_of(r.id), Split::test);
}

TEST(MergePseudo, TrainOnlyKeepsValidationClean) {
  auto labeled = graded_manifest(200, 13, "lab");
  SplitSpec spec;
  spec.counts = std::array<std::size_t, 3>{150, 20, 30};
  labeled = stratified_split(labeled, spec);
  const auto pseudo = graded_manifest(500, 14, "ps", true);
  MergeOptions opt;
  opt.policy = PseudoPolicy::train_only;
  const auto merged = merge_pseudo(labeled, pseudo, opt);
  for (const auto& r : pseudo.records) EXPECT_EQ(merged.split_of(r.id), Split::train);
  for (const auto& r : labeled.records) EXPECT_EQ(merged.split_of(r.id), labeled.split_of(r.id));
  EXPECT_NO_THROW(merged.validate());
}

TEST(MergePseudo, EmptyPseudoAndCollisions) {
  auto labeled = graded_manifest(30, 15, "lab");
  SplitSpec spec;
  spec.counts = std::array<std::size_t, 3>{20, 5, 5};
  labeled = stratified_split(labeled, spec);
  const auto same = merge_pseudo(labeled, DatasetManifest{});
  EXPECT_EQ(serialize_manifest(same), serialize_manifest(labeled));

  DatasetManifest clash;
  clash.records.push_back(make_record("lab3", 4.0, true));
  EXPECT_THROW(merge_pseudo(labeled, clash), IdCollision);
  DatasetManifest unflagged;
  unflagged.records.push_back(make_record("new", 4.0, false));
  EXPECT_THROW(merge_pseudo(labeled, unflagged), ValidationError);
}

TEST(Synthetic, ScoreMapEndpointsAndLabels) {
  EXPECT_DOUBLE_EQ(severity_to_score(0.0), 10.0);
  EXPECT_DOUBLE_EQ(severity_to_score(1.0), 1.0);
  EXPECT_EQ(score_to_trinary(7.0), TrinaryLabel::Good);
  EXPECT_EQ(score_to_trinary(6.5), TrinaryLabel::Usable);
  EXPECT_EQ(score_to_trinary(3.5), TrinaryLabel::Reject);
  EXPECT_EQ(score_to_binary(6.5), BinaryLabel::Good);
  EXPECT_EQ(score_to_binary(6.0), BinaryLabel::Poor);
}

TEST(Synthetic, CorpusIsMonotoneAndDeterministic) {
  fqtest::TempDir dir;
  DegradationSpec spec;
  spec.mode = SynthMode::mixed;
  const auto m = synth_corpus(spec, 60, 3, dir.path());
  ASSERT_EQ(m.records.size(), 60u);
  EXPECT_NO_THROW(m.validate());
  for (const auto& a : m.records)
    for (const auto& b : m.records)
      if (*a.severity < *b.severity) EXPECT_GE(a.quality->value(), b.quality->value());
  for (const auto& r : m.records) {
    EXPECT_TRUE(r.quality->on_grid());
    const auto img = imaging::load_image(m.resolve(r));
    EXPECT_EQ(img.height(), spec.height);
    EXPECT_EQ(img.width(), spec.width);
  }
  fqtest::TempDir dir2;
  const auto m2 = synth_corpus(spec, 60, 3, dir2.path());
  EXPECT_EQ(serialize_manifest(m2), serialize_manifest(m));
  EXPECT_EQ(imaging::load_image(m2.resolve(m2.records[5])), imaging::load_image(m.resolve(m.records[5])));
}

TEST(Synthetic, SeparableBandsCoverAllClasses) {
  fqtest::TempDir dir;
  DegradationSpec spec;
  spec.mode = SynthMode::separable3;
  const auto m = synth_corpus(spec, 30, 8, dir.path());
  std::map<TrinaryLabel, int> counts;
  for (const auto& r : m.records) ++counts[*r.trinary];
  EXPECT_EQ(counts[TrinaryLabel::Good], 10);
  EXPECT_EQ(counts[TrinaryLabel::Usable], 10);
  EXPECT_EQ(counts[TrinaryLabel::Reject], 10);
}

TEST(Synthetic, BlurReducesDetail) {
  DegradationSpec spec;
  auto detail = [](const imaging::ImageTensor& img) {
    double s = 0.0;
    for (int y = 0; y < img.height(); ++y)
      for (int x = 1; x < img.width(); ++x) s += std::abs(img.at(y, x, 1) - img.at(y, x - 1, 1));
    return s;
  };
  const auto sharp = render_synthetic(spec, 0.0, 5);
  const auto blurry = render_synthetic(spec, 1.0, 5);
  EXPECT_GT(detail(sharp), 1.5 * detail(blurry));
  EXPECT_THROW(synth_corpus(spec, 0, 1, "/tmp/unused"), ValidationError);
}
