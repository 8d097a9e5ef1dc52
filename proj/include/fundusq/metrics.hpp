#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "fundusq/datasets.hpp"

namespace fundusq::metrics {

using datasets::BinaryLabel;

struct Interval {
  double low = 0.0;
  double high = 0.0;
};

struct EvalReport {
  double mae = 0.0;
  double rmse = 0.0;
  /// Sample standard deviation of the absolute errors.
  double error_sd = 0.0;
  double min_error = 0.0;
  double max_error = 0.0;
  Interval ci95;
  std::vector<double> per_sample_abs_errors;
  std::size_t n = 0;
};

/// MAE, RMSE, error spread and extremes, with a bootstrap CI for the MAE.
EvalReport regression_report(std::span<const double> predicted, std::span<const double> reference,
                             std::uint64_t seed = 0, int resamples = 1000);

/// Percentile bootstrap of the mean: resample with replacement `resamples`
/// times and take the (1-level)/2 and (1+level)/2 percentiles (linear
/// interpolation between order statistics).
Interval bootstrap_ci(std::span<const double> abs_errors, int resamples = 1000, double level = 0.95,
                      std::uint64_t seed = 0);

struct WilcoxonResult {
  /// min(W+, W-).
  double statistic = 0.0;
  double p_two_sided = 1.0;
  double w_plus = 0.0;
  double w_minus = 0.0;
  /// Pairs left after dropping zero differences.
  std::size_t n_effective = 0;
  bool exact = false;
};

inline constexpr std::size_t kWilcoxonExactMaxN = 25;

/// Paired Wilcoxon signed-rank test on d = a - b. Zero differences are
/// dropped and tied |d| get midranks. Exact null distribution for
/// n_effective <= 25, otherwise the normal approximation with tie and
/// continuity corrections.
WilcoxonResult wilcoxon_signed_rank(std::span<const double> a, std::span<const double> b);

/// Midranks (1-based) of `values`.
std::vector<double> midranks(std::span<const double> values);

/// score >= threshold -> Good.
std::vector<BinaryLabel> binarize(std::span<const double> scores, double threshold);

struct ConfusionCounts {
  std::size_t tp = 0, fp = 0, tn = 0, fn = 0;
  std::size_t n() const { return tp + fp + tn + fn; }
};

struct BinaryReport {
  double threshold = 6.5;
  ConfusionCounts counts;
  double accuracy = 0.0;
  double sensitivity = 0.0;
  double specificity = 0.0;
  double mcc = 0.0;
  /// Unset when only one class is present (AUC undefined).
  std::optional<double> auc;
};

/// Rates and MCC from confusion counts, Good being the positive class.
/// Rates with a zero denominator are reported as 0, as is MCC.
BinaryReport confusion_metrics(const ConfusionCounts& counts, double threshold = 6.5);

/// Thresholded confusion statistics plus the threshold-free AUC.
BinaryReport binary_report(std::span<const double> scores, std::span<const BinaryLabel> reference,
                           double threshold = 6.5);

/// P(score_Good > score_Poor) with ties counted 0.5, via the rank-sum
/// identity. Throws OneClassOnly when a class is missing.
double auc(std::span<const double> scores, std::span<const BinaryLabel> reference);

struct LinearFit {
  double slope = 0.0;
  double intercept = 0.0;
  double r2 = 0.0;
  /// Set when the reference has zero variance; r2 is then reported as 0.
  bool degenerate_reference = false;
};

/// Ordinary least squares of reference on predicted. Throws DegenerateInput
/// for n < 2 or constant predictions.
LinearFit linear_fit_r2(std::span<const double> predicted, std::span<const double> reference);

using ConfusionMatrix = std::vector<std::vector<std::size_t>>;

/// matrix[i][j] = count(reference == i and predicted == j).
ConfusionMatrix multiclass_confusion(std::span<const int> predicted, std::span<const int> reference, int k = 3);

struct Outlier {
  std::string id;
  double predicted = 0.0;
  double reference = 0.0;
  /// predicted - reference.
  double delta = 0.0;
};

/// Records with |predicted - reference| > cutoff, largest first.
std::vector<Outlier> outliers(std::span<const double> predicted, std::span<const double> reference,
                              std::span<const std::string> ids, double cutoff = 1.5);

/// (before - after) / before.
double relative_improvement(double before, double after);

struct ScoreSummary {
  std::size_t n = 0;
  double mean = 0.0;
  double sd = 0.0;
  double min = 0.0;
  double max = 0.0;
};

ScoreSummary summarize(std::span<const double> values);

nlohmann::json to_json(const EvalReport& r, bool include_per_sample = true);
nlohmann::json to_json(const BinaryReport& r);
nlohmann::json to_json(const WilcoxonResult& r);
nlohmann::json to_json(const LinearFit& r);
nlohmann::json to_json(const ScoreSummary& s);
nlohmann::json to_json(const std::vector<Outlier>& o);

// Plots (presentation only; JSON reports carry the numbers) -------------------------

/// Scatter of reference against predicted with the fitted line.
void plot_scatter_fit(std::span<const double> predicted, std::span<const double> reference, const LinearFit& fit,
                      const std::filesystem::path& path);

/// Overlaid score histograms, one per labeled group, over [1,10].
void plot_histograms(const std::vector<std::pair<std::string, std::vector<double>>>& groups, double threshold,
                     const std::filesystem::path& path);

}  // namespace fundusq::metrics
