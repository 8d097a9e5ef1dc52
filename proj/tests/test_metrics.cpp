#include <algorithm>
#include <cmath>
#include <numeric>

#include <gtest/gtest.h>

#include "fundusq/errors.hpp"
#include "fundusq/metrics.hpp"
#include "test_support.hpp"

using namespace fundusq;
using namespace fundusq::metrics;
using datasets::BinaryLabel;

namespace {

// Midranks by pairwise counting: rank = #less + (#equal + 1) / 2.
std::vector<double> brute_midranks(const std::vector<double>& v) {
  std::vector<double> r(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    double less = 0, eq = 0;
    for (double x : v) {
      if (x < v[i]) less += 1;
      if (x == v[i]) eq += 1;
    }
    r[i] = less + (eq + 1.0) / 2.0;
  }
  return r;
}

// Two-sided exact p by visiting all 2^n sign assignments.
double enumerate_wilcoxon_p(const std::vector<double>& a, const std::vector<double>& b) {
  std::vector<double> mag;
  std::vector<int> sign;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    if (d == 0.0) continue;
    mag.push_back(std::abs(d));
    sign.push_back(d > 0 ? 1 : -1);
  }
  const auto ranks = brute_midranks(mag);
  const double total = std::accumulate(ranks.begin(), ranks.end(), 0.0);
  double w_plus = 0;
  for (std::size_t i = 0; i < ranks.size(); ++i)
    if (sign[i] > 0) w_plus += ranks[i];
  const double stat = std::min(w_plus, total - w_plus);
  const std::size_t n = ranks.size();
  double hits = 0;
  for (std::uint64_t mask = 0; mask < (1ULL << n); ++mask) {
    double w = 0;
    for (std::size_t i = 0; i < n; ++i)
      if (mask & (1ULL << i)) w += ranks[i];
    if (w <= stat + 1e-9) hits += 1;
  }
  return std::min(1.0, 2.0 * hits / static_cast<double>(1ULL << n));
}

double pairwise_auc(const std::vector<double>& s, const std::vector<BinaryLabel>& y) {
  double num = 0, den = 0;
  for (std::size_t i = 0; i < s.size(); ++i)
    for (std::size_t j = 0; j < s.size(); ++j)
      if (y[i] == BinaryLabel::Good && y[j] == BinaryLabel::Poor) {
        den += 1;
        num += s[i] > s[j] ? 1.0 : (s[i] == s[j] ? 0.5 : 0.0);
      }
  return num / den;
}

}  // namespace

TEST(RegressionReport, Examples) {
  const std::vector<double> p{1, 2, 3}, r{2, 2, 5};
  const auto rep = regression_report(p, r);
  EXPECT_DOUBLE_EQ(rep.mae, 1.0);
  EXPECT_NEAR(rep.rmse, std::sqrt(5.0 / 3.0), 1e-12);
  EXPECT_DOUBLE_EQ(rep.min_error, 0.0);
  EXPECT_DOUBLE_EQ(rep.max_error, 2.0);
  EXPECT_DOUBLE_EQ(rep.error_sd, 1.0);
  EXPECT_EQ(rep.n, 3u);

  const auto same = regression_report(r, r);
  EXPECT_EQ(same.mae, 0.0);
  EXPECT_EQ(same.rmse, 0.0);
  EXPECT_EQ(same.max_error, 0.0);
  EXPECT_EQ(same.ci95.low, 0.0);
  EXPECT_EQ(same.ci95.high, 0.0);

  EXPECT_THROW(regression_report(std::vector<double>{1}, std::vector<double>{1, 2}), LengthMismatch);
  EXPECT_THROW(regression_report(std::vector<double>{}, std::vector<double>{}), EmptyInput);
}

TEST(RegressionReport, InvariantsOnRandomInputs) {
  Rng rng(1);
  for (int t = 0; t < 100; ++t) {
    const std::size_t n = 1 + rng.below(80);
    std::vector<double> p(n), r(n);
    for (std::size_t i = 0; i < n; ++i) {
      p[i] = rng.uniform(1, 10);
      r[i] = rng.uniform(1, 10);
    }
    const auto rep = regression_report(p, r, static_cast<std::uint64_t>(t));
    EXPECT_GE(rep.rmse + 1e-12, rep.mae);
    EXPECT_LE(rep.min_error, rep.mae + 1e-12);
    EXPECT_LE(rep.mae, rep.max_error + 1e-12);
    EXPECT_GE(rep.min_error, 0.0);
  }
}

TEST(Bootstrap, DegenerateAndDeterministic) {
  const std::vector<double> c(30, 0.7);
  const auto ci = bootstrap_ci(c, 1000, 0.95, 3);
  EXPECT_DOUBLE_EQ(ci.low, 0.7);
  EXPECT_DOUBLE_EQ(ci.high, 0.7);
  EXPECT_THROW(bootstrap_ci(std::vector<double>{}, 1000), EmptyInput);
  EXPECT_THROW(bootstrap_ci(c, 50), ValidationError);
}

TEST(Bootstrap, ContainsMeanWithinRange) {
  Rng rng(2);
  for (int t = 0; t < 100; ++t) {
    const std::size_t n = 20 + rng.below(200);
    std::vector<double> e(n);
    for (double& x : e) x = std::abs(rng.normal(0.6, 0.4));
    const double mean = std::accumulate(e.begin(), e.end(), 0.0) / static_cast<double>(n);
    const auto a = bootstrap_ci(e, 1000, 0.95, static_cast<std::uint64_t>(t));
    const auto b = bootstrap_ci(e, 1000, 0.95, static_cast<std::uint64_t>(t));
    EXPECT_EQ(a.low, b.low);
    EXPECT_EQ(a.high, b.high);
    EXPECT_LE(a.low, mean);
    EXPECT_GE(a.high, mean);
    EXPECT_GE(a.low, *std::min_element(e.begin(), e.end()));
    EXPECT_LE(a.high, *std::max_element(e.begin(), e.end()));
  }
}

TEST(Bootstrap, WidthMatchesStandardError) {
  Rng rng(3);
  std::vector<double> e(209);
  for (double& x : e) x = rng.normal(0.6, 0.1);
  const auto ci = bootstrap_ci(e, 1000, 0.95, 4);
  const double width = ci.high - ci.low;
  // 2 * 1.96 * 0.1 / sqrt(209) = 0.0271
  EXPECT_GE(width, 0.02);
  EXPECT_LE(width, 0.06);
}

TEST(Wilcoxon, HandExample) {
  const std::vector<double> a{1, 2, 3, 4, 5, 6}, b{2, 3, 4, 5, 6, 8};
  const auto r = wilcoxon_signed_rank(a, b);
  EXPECT_TRUE(r.exact);
  EXPECT_EQ(r.n_effective, 6u);
  EXPECT_DOUBLE_EQ(r.w_plus, 0.0);
  EXPECT_DOUBLE_EQ(r.w_minus, 21.0);
  EXPECT_DOUBLE_EQ(r.statistic, 0.0);
  EXPECT_DOUBLE_EQ(r.p_two_sided, 0.03125);
}

TEST(Wilcoxon, Errors) {
  const std::vector<double> a{1, 2, 3};
  EXPECT_THROW(wilcoxon_signed_rank(a, a), AllZeroDifferences);
  EXPECT_THROW(wilcoxon_signed_rank(a, std::vector<double>{1, 2}), LengthMismatch);
}

TEST(Wilcoxon, ExactMatchesEnumeration) {
  Rng rng(4);
  for (int t = 0; t < 200; ++t) {
    const std::size_t n = 1 + rng.below(10);
    std::vector<double> a(n), b(n);
    for (std::size_t i = 0; i < n; ++i) {
      // Coarse values produce ties and zero differences.
      a[i] = static_cast<double>(rng.below(6)) * 0.5;
      b[i] = static_cast<double>(rng.below(6)) * 0.5;
    }
    bool any = false;
    for (std::size_t i = 0; i < n; ++i) any |= a[i] != b[i];
    if (!any) {
      EXPECT_THROW(wilcoxon_signed_rank(a, b), AllZeroDifferences);
      continue;
    }
    const auto r = wilcoxon_signed_rank(a, b);
    EXPECT_TRUE(r.exact);
    EXPECT_NEAR(r.p_two_sided, enumerate_wilcoxon_p(a, b), 1e-12);
  }
}

TEST(Wilcoxon, NormalApproximationAboveExactLimit) {
  Rng rng(5);
  for (int t = 0; t < 20; ++t) {
    std::vector<double> a(26), b(26);
    for (std::size_t i = 0; i < 26; ++i) {
      a[i] = rng.normal(0.3, 1.0);
      b[i] = rng.normal(0.0, 1.0);
    }
    const auto approx = wilcoxon_signed_rank(a, b);
    EXPECT_FALSE(approx.exact);
    std::vector<double> a25(a.begin(), a.begin() + 25), b25(b.begin(), b.begin() + 25);
    EXPECT_GE(approx.p_two_sided, 0.0);
    EXPECT_LE(approx.p_two_sided, 1.0);
    EXPECT_TRUE(wilcoxon_signed_rank(a25, b25).exact);
  }
  // Symmetric data at n = 40: p should be 1 or near it.
  std::vector<double> a, b;
  for (int i = 1; i <= 20; ++i) {
    a.push_back(i);
    b.push_back(0);
    a.push_back(0);
    b.push_back(i);
  }
  EXPECT_GT(wilcoxon_signed_rank(a, b).p_two_sided, 0.95);
}

TEST(Wilcoxon, PowerAtPublishedScale) {
  Rng rng(6);
  int significant = 0;
  const int trials = 200;
  for (int t = 0; t < trials; ++t) {
    std::vector<double> a(209), b(209);
    for (std::size_t i = 0; i < 209; ++i) {
      b[i] = std::abs(rng.normal(0.6, 0.4));
      a[i] = b[i] + 0.05 + rng.normal(0.0, 0.15);
    }
    if (wilcoxon_signed_rank(a, b).p_two_sided < 0.01) ++significant;
  }
  EXPECT_GE(significant, trials * 8 / 10);
}

TEST(Binarize, ThresholdInclusiveAndMonotone) {
  const std::vector<double> s{6.5, 6.49, 10.0, 1.0};
  const auto b = binarize(s, 6.5);
  EXPECT_EQ(b[0], BinaryLabel::Good);
  EXPECT_EQ(b[1], BinaryLabel::Poor);
  EXPECT_EQ(b[2], BinaryLabel::Good);
  EXPECT_EQ(b[3], BinaryLabel::Poor);
  Rng rng(7);
  std::vector<double> scores(200);
  for (double& x : scores) x = rng.uniform(1, 10);
  for (double lo = 1.0; lo < 10.0; lo += 0.25) {
    const auto a = binarize(scores, lo), c = binarize(scores, lo + 0.25);
    for (std::size_t i = 0; i < scores.size(); ++i)
      if (a[i] == BinaryLabel::Poor) EXPECT_EQ(c[i], BinaryLabel::Poor);
  }
}

TEST(ConfusionMetrics, PublishedCounts) {
  const auto r = confusion_metrics({.tp = 123, .fp = 0, .tn = 69, .fn = 2});
  EXPECT_NEAR(r.accuracy, 192.0 / 194.0, 1e-12);
  EXPECT_NEAR(r.mcc, 8487.0 / std::sqrt(125.0 * 123.0 * 71.0 * 69.0), 1e-12);
  EXPECT_NEAR(r.mcc, 0.978, 5e-4);
  EXPECT_NEAR(r.sensitivity, 123.0 / 125.0, 1e-12);
  EXPECT_DOUBLE_EQ(r.specificity, 1.0);
}

TEST(ConfusionMetrics, MccSymmetry) {
  Rng rng(8);
  for (int t = 0; t < 100; ++t) {
    ConfusionCounts c{rng.below(50), rng.below(50), rng.below(50), rng.below(50)};
    // Swap classes (tp<->tn, fp<->fn) and swap prediction/reference (fp<->fn).
    const ConfusionCounts swapped_classes{c.tn, c.fn, c.tp, c.fp};
    const ConfusionCounts swapped_roles{c.tp, c.fn, c.tn, c.fp};
    const auto r = confusion_metrics(c);
    EXPECT_NEAR(r.mcc, confusion_metrics(swapped_classes).mcc, 1e-12);
    EXPECT_NEAR(r.mcc, confusion_metrics(swapped_roles).mcc, 1e-12);
    EXPECT_GE(r.mcc, -1.0);
    EXPECT_LE(r.mcc, 1.0);
    for (double v : {r.accuracy, r.sensitivity, r.specificity}) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
    }
  }
}

TEST(BinaryReport, CountsAndAuc) {
  const std::vector<double> s{9.0, 8.0, 7.0, 6.0, 3.0, 2.0};
  const std::vector<BinaryLabel> y{BinaryLabel::Good, BinaryLabel::Good, BinaryLabel::Poor,
                                   BinaryLabel::Good, BinaryLabel::Poor, BinaryLabel::Poor};
  const auto r = binary_report(s, y, 6.5);
  EXPECT_EQ(r.counts.tp, 2u);
  EXPECT_EQ(r.counts.fp, 1u);
  EXPECT_EQ(r.counts.fn, 1u);
  EXPECT_EQ(r.counts.tn, 2u);
  EXPECT_EQ(r.counts.n(), s.size());
  ASSERT_TRUE(r.auc);
  EXPECT_NEAR(*r.auc, 8.0 / 9.0, 1e-12);

  const std::vector<double> sep{9, 8, 2, 1};
  const std::vector<BinaryLabel> ysep{BinaryLabel::Good, BinaryLabel::Good, BinaryLabel::Poor, BinaryLabel::Poor};
  EXPECT_DOUBLE_EQ(*binary_report(sep, ysep).auc, 1.0);

  const std::vector<BinaryLabel> one{BinaryLabel::Good, BinaryLabel::Good, BinaryLabel::Good, BinaryLabel::Good};
  const auto r1 = binary_report(sep, one);
  EXPECT_FALSE(r1.auc);
  EXPECT_EQ(r1.counts.tp, 2u);
  EXPECT_THROW(auc(sep, one), OneClassOnly);
  EXPECT_THROW(binary_report(sep, std::vector<BinaryLabel>{BinaryLabel::Good}), LengthMismatch);
}

TEST(Auc, MatchesPairwiseAndIsRankInvariant) {
  Rng rng(9);
  for (int t = 0; t < 100; ++t) {
    const std::size_t n = 2 + rng.below(60);
    std::vector<double> s(n);
    std::vector<BinaryLabel> y(n);
    for (std::size_t i = 0; i < n; ++i) {
      s[i] = std::round(rng.uniform(1, 10) * 2) / 2;  // on the grid, so ties occur
      y[i] = rng.below(2) ? BinaryLabel::Good : BinaryLabel::Poor;
    }
    y[0] = BinaryLabel::Good;
    y[1] = BinaryLabel::Poor;
    const double a = auc(s, y);
    EXPECT_NEAR(a, pairwise_auc(s, y), 1e-12);
    std::vector<double> transformed(n);
    std::transform(s.begin(), s.end(), transformed.begin(), [](double x) { return std::exp(x) * 3 - 7; });
    EXPECT_NEAR(auc(transformed, y), a, 1e-12);
  }
}

TEST(Auc, RandomScoresNearHalf) {
  Rng rng(10);
  std::vector<double> s(4000);
  std::vector<BinaryLabel> y(4000);
  for (std::size_t i = 0; i < s.size(); ++i) {
    s[i] = rng.uniform(1, 10);
    y[i] = rng.below(2) ? BinaryLabel::Good : BinaryLabel::Poor;
  }
  EXPECT_NEAR(auc(s, y), 0.5, 0.05);
}

TEST(LinearFit, Examples) {
  const std::vector<double> p{1, 2, 3}, r{2, 4, 6};
  const auto f = linear_fit_r2(p, r);
  EXPECT_NEAR(f.slope, 2.0, 1e-12);
  EXPECT_NEAR(f.intercept, 0.0, 1e-12);
  EXPECT_NEAR(f.r2, 1.0, 1e-12);
  const auto id = linear_fit_r2(p, p);
  EXPECT_NEAR(id.slope, 1.0, 1e-12);
  EXPECT_NEAR(id.r2, 1.0, 1e-12);
  const auto flat = linear_fit_r2(p, std::vector<double>{5, 5, 5});
  EXPECT_EQ(flat.r2, 0.0);
  EXPECT_TRUE(flat.degenerate_reference);
  EXPECT_THROW(linear_fit_r2(std::vector<double>{4, 4, 4}, r), DegenerateInput);
  EXPECT_THROW(linear_fit_r2(std::vector<double>{4}, std::vector<double>{4}), DegenerateInput);
}

TEST(MulticlassConfusion, Cases) {
  const std::vector<int> a{0, 1, 2, 2};
  const auto m = multiclass_confusion(a, a);
  EXPECT_EQ(m[0][0], 1u);
  EXPECT_EQ(m[2][2], 2u);
  EXPECT_EQ(m[0][1] + m[1][0] + m[1][2], 0u);
  const auto one = multiclass_confusion(std::vector<int>{2}, std::vector<int>{0});
  EXPECT_EQ(one[0][2], 1u);
  EXPECT_THROW(multiclass_confusion(std::vector<int>{3}, std::vector<int>{0}), IndexOutOfRange);

  Rng rng(11);
  std::vector<int> p(1000), r(1000);
  std::vector<std::size_t> hist(3, 0);
  for (std::size_t i = 0; i < 1000; ++i) {
    p[i] = static_cast<int>(rng.below(3));
    r[i] = static_cast<int>(rng.below(3));
    ++hist[static_cast<std::size_t>(r[i])];
  }
  const auto big = multiclass_confusion(p, r);
  std::size_t total = 0;
  for (std::size_t i = 0; i < 3; ++i) {
    const std::size_t row = std::accumulate(big[i].begin(), big[i].end(), std::size_t{0});
    EXPECT_EQ(row, hist[i]);
    total += row;
  }
  EXPECT_EQ(total, 1000u);
}

TEST(Outliers, Ordering) {
  const std::vector<std::string> ids{"a", "b", "c"};
  const std::vector<double> ref{5, 5, 5};
  EXPECT_TRUE(outliers(std::vector<double>{5.2, 6.5, 3.5}, ref, ids).empty());
  const auto o = outliers(std::vector<double>{5.2, 6.6, 1.3}, ref, ids);
  ASSERT_EQ(o.size(), 2u);
  EXPECT_EQ(o[0].id, "c");
  EXPECT_NEAR(o[0].delta, -3.7, 1e-12);
  EXPECT_EQ(o[1].id, "b");
}

TEST(Outliers, PlantedCount) {
  Rng rng(12);
  std::vector<double> p(209), r(209);
  std::vector<std::string> ids(209);
  for (std::size_t i = 0; i < 209; ++i) {
    r[i] = rng.uniform(1, 10);
    p[i] = r[i] + rng.uniform(-1.4, 1.4);
    ids[i] = std::to_string(i);
  }
  for (std::size_t k = 0; k < 11; ++k) p[k * 19] = r[k * 19] + (k % 2 ? 1.0 : -1.0) * rng.uniform(1.6, 4.0);
  EXPECT_EQ(outliers(p, r, ids, 1.5).size(), 11u);
}

TEST(RelativeImprovement, PublishedNumbers) {
  EXPECT_NEAR(relative_improvement(0.66, 0.61), 0.0758, 5e-4);
  EXPECT_THROW(relative_improvement(0.0, 1.0), DegenerateInput);
}

TEST(Plots, WriteImages) {
  fqtest::TempDir dir;
  const std::vector<double> p{2, 4, 6, 8}, r{2.5, 4, 5.5, 8.5};
  plot_scatter_fit(p, r, linear_fit_r2(p, r), dir / "scatter.png");
  plot_histograms({{"Good", {8, 8.5, 9}}, {"Poor", {2, 3, 5}}}, 6.5, dir / "hist.png");
  EXPECT_GT(std::filesystem::file_size(dir / "scatter.png"), 1000u);
  EXPECT_GT(std::filesystem::file_size(dir / "hist.png"), 1000u);
}
