#include "fundusq/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <fmt/format.h>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>
#include <spdlog/spdlog.h>

#include "fundusq/errors.hpp"
#include "fundusq/random.hpp"

namespace fundusq::metrics {

namespace {

void require_same_length(std::size_t a, std::size_t b) {
  if (a != b) throw LengthMismatch(fmt::format("length mismatch: {} vs {}", a, b));
}

void require_nonempty(std::size_t n) {
  if (n == 0) throw EmptyInput("empty input");
}

double mean_of(std::span<const double> v) {
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

double sample_sd(std::span<const double> v) {
  if (v.size() < 2) return 0.0;
  const double m = mean_of(v);
  double ss = 0.0;
  for (double x : v) ss += (x - m) * (x - m);
  return std::sqrt(ss / static_cast<double>(v.size() - 1));
}

double percentile_sorted(const std::vector<double>& sorted, double q) {
  const double pos = q * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return sorted[lo] + frac * (sorted[hi] - sorted[lo]);
}

double std_normal_cdf(double z) { return 0.5 * std::erfc(-z / std::sqrt(2.0)); }

}  // namespace

EvalReport regression_report(std::span<const double> predicted, std::span<const double> reference,
                             std::uint64_t seed, int resamples) {
  require_same_length(predicted.size(), reference.size());
  require_nonempty(predicted.size());
  EvalReport r;
  r.n = predicted.size();
  r.per_sample_abs_errors.resize(r.n);
  double sq = 0.0;
  for (std::size_t i = 0; i < r.n; ++i) {
    const double d = predicted[i] - reference[i];
    r.per_sample_abs_errors[i] = std::abs(d);
    sq += d * d;
  }
  const auto& e = r.per_sample_abs_errors;
  r.mae = mean_of(e);
  r.rmse = std::sqrt(sq / static_cast<double>(r.n));
  r.error_sd = sample_sd(e);
  r.min_error = *std::min_element(e.begin(), e.end());
  r.max_error = *std::max_element(e.begin(), e.end());
  r.ci95 = bootstrap_ci(e, resamples, 0.95, seed);
  return r;
}

Interval bootstrap_ci(std::span<const double> abs_errors, int resamples, double level, std::uint64_t seed) {
  require_nonempty(abs_errors.size());
  if (resamples < 100) throw ValidationError(fmt::format("resamples must be >= 100, got {}", resamples));
  if (!(level > 0.0 && level < 1.0)) throw ValidationError(fmt::format("level must be in (0,1), got {}", level));
  Rng rng(seed);
  const std::size_t n = abs_errors.size();
  std::vector<double> means(static_cast<std::size_t>(resamples));
  for (auto& m : means) {
    double s = 0.0;
    for (std::size_t k = 0; k < n; ++k) s += abs_errors[rng.below(n)];
    m = s / static_cast<double>(n);
  }
  std::sort(means.begin(), means.end());
  const double alpha = (1.0 - level) / 2.0;
  return {percentile_sorted(means, alpha), percentile_sorted(means, 1.0 - alpha)};
}

std::vector<double> midranks(std::span<const double> values) {
  std::vector<std::size_t> order(values.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
  std::vector<double> ranks(values.size());
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    while (j + 1 < order.size() && values[order[j + 1]] == values[order[i]]) ++j;
    const double r = (static_cast<double>(i + 1) + static_cast<double>(j + 1)) / 2.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = r;
    i = j + 1;
  }
  return ranks;
}

WilcoxonResult wilcoxon_signed_rank(std::span<const double> a, std::span<const double> b) {
  require_same_length(a.size(), b.size());
  std::vector<double> d;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double diff = a[i] - b[i];
    if (diff != 0.0) d.push_back(diff);
  }
  if (d.empty()) throw AllZeroDifferences("all paired differences are zero");

  std::vector<double> mag(d.size());
  std::transform(d.begin(), d.end(), mag.begin(), [](double x) { return std::abs(x); });
  const std::vector<double> ranks = midranks(mag);

  WilcoxonResult r;
  r.n_effective = d.size();
  for (std::size_t i = 0; i < d.size(); ++i) (d[i] > 0 ? r.w_plus : r.w_minus) += ranks[i];
  r.statistic = std::min(r.w_plus, r.w_minus);
  const auto n = static_cast<double>(r.n_effective);

  if (r.n_effective <= kWilcoxonExactMaxN) {
    // Midranks are multiples of 0.5, so doubled ranks are integers and the
    // null distribution of 2*W+ can be counted by subset-sum DP.
    std::vector<long> doubled(ranks.size());
    std::transform(ranks.begin(), ranks.end(), doubled.begin(), [](double x) { return std::lround(2.0 * x); });
    const long total = std::accumulate(doubled.begin(), doubled.end(), 0L);
    std::vector<double> count(static_cast<std::size_t>(total) + 1, 0.0);
    count[0] = 1.0;
    long reach = 0;
    for (long w : doubled) {
      for (long s = reach; s >= 0; --s) count[static_cast<std::size_t>(s + w)] += count[static_cast<std::size_t>(s)];
      reach += w;
    }
    const long stat2 = std::lround(2.0 * r.statistic);
    double tail = 0.0;
    for (long s = 0; s <= stat2; ++s) tail += count[static_cast<std::size_t>(s)];
    r.p_two_sided = std::min(1.0, 2.0 * tail / std::ldexp(1.0, static_cast<int>(r.n_effective)));
    r.exact = true;
  } else {
    double tie_term = 0.0;
    std::vector<double> sorted = mag;
    std::sort(sorted.begin(), sorted.end());
    for (std::size_t i = 0; i < sorted.size();) {
      std::size_t j = i;
      while (j < sorted.size() && sorted[j] == sorted[i]) ++j;
      const auto t = static_cast<double>(j - i);
      tie_term += t * t * t - t;
      i = j;
    }
    const double mu = n * (n + 1.0) / 4.0;
    const double var = n * (n + 1.0) * (2.0 * n + 1.0) / 24.0 - tie_term / 48.0;
    const double z = std::min(0.0, (r.statistic - mu + 0.5) / std::sqrt(var));
    r.p_two_sided = std::min(1.0, 2.0 * std_normal_cdf(z));
    r.exact = false;
  }
  return r;
}

std::vector<BinaryLabel> binarize(std::span<const double> scores, double threshold) {
  std::vector<BinaryLabel> out(scores.size());
  std::transform(scores.begin(), scores.end(), out.begin(),
                 [&](double s) { return s >= threshold ? BinaryLabel::Good : BinaryLabel::Poor; });
  return out;
}

BinaryReport confusion_metrics(const ConfusionCounts& c, double threshold) {
  auto ratio = [](double num, double den) { return den > 0.0 ? num / den : 0.0; };
  const auto tp = static_cast<double>(c.tp), fp = static_cast<double>(c.fp);
  const auto tn = static_cast<double>(c.tn), fn = static_cast<double>(c.fn);
  BinaryReport r;
  r.threshold = threshold;
  r.counts = c;
  r.accuracy = ratio(tp + tn, static_cast<double>(c.n()));
  r.sensitivity = ratio(tp, tp + fn);
  r.specificity = ratio(tn, tn + fp);
  const double den = std::sqrt((tp + fp) * (tp + fn) * (tn + fp) * (tn + fn));
  r.mcc = den > 0.0 ? std::clamp((tp * tn - fp * fn) / den, -1.0, 1.0) : 0.0;
  return r;
}

BinaryReport binary_report(std::span<const double> scores, std::span<const BinaryLabel> reference, double threshold) {
  require_same_length(scores.size(), reference.size());
  ConfusionCounts c;
  const auto predicted = binarize(scores, threshold);
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const bool pred_good = predicted[i] == BinaryLabel::Good;
    const bool ref_good = reference[i] == BinaryLabel::Good;
    if (pred_good && ref_good) ++c.tp;
    else if (pred_good) ++c.fp;
    else if (ref_good) ++c.fn;
    else ++c.tn;
  }
  BinaryReport r = confusion_metrics(c, threshold);
  try {
    r.auc = auc(scores, reference);
  } catch (const OneClassOnly& e) {
    spdlog::warn("{}", e.what());
  }
  return r;
}

double auc(std::span<const double> scores, std::span<const BinaryLabel> reference) {
  require_same_length(scores.size(), reference.size());
  const auto n_good = static_cast<double>(std::count(reference.begin(), reference.end(), BinaryLabel::Good));
  const double n_poor = static_cast<double>(reference.size()) - n_good;
  if (n_good == 0.0 || n_poor == 0.0) throw OneClassOnly("AUC undefined: only one class present");
  const std::vector<double> ranks = midranks(scores);
  double rank_sum = 0.0;
  for (std::size_t i = 0; i < ranks.size(); ++i)
    if (reference[i] == BinaryLabel::Good) rank_sum += ranks[i];
  return (rank_sum - n_good * (n_good + 1.0) / 2.0) / (n_good * n_poor);
}

LinearFit linear_fit_r2(std::span<const double> predicted, std::span<const double> reference) {
  require_same_length(predicted.size(), reference.size());
  if (predicted.size() < 2) throw DegenerateInput("linear fit needs at least two points");
  const double mx = mean_of(predicted), my = mean_of(reference);
  double sxx = 0.0, sxy = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < predicted.size(); ++i) {
    const double dx = predicted[i] - mx, dy = reference[i] - my;
    sxx += dx * dx;
    sxy += dx * dy;
    syy += dy * dy;
  }
  if (sxx == 0.0) throw DegenerateInput("predicted values have zero variance");
  LinearFit f;
  f.slope = sxy / sxx;
  f.intercept = my - f.slope * mx;
  if (syy == 0.0) {
    f.degenerate_reference = true;
    f.r2 = 0.0;
    spdlog::warn("reference has zero variance; r2 reported as 0");
    return f;
  }
  double ss_res = 0.0;
  for (std::size_t i = 0; i < predicted.size(); ++i) {
    const double e = reference[i] - (f.slope * predicted[i] + f.intercept);
    ss_res += e * e;
  }
  f.r2 = 1.0 - ss_res / syy;
  return f;
}

ConfusionMatrix multiclass_confusion(std::span<const int> predicted, std::span<const int> reference, int k) {
  require_same_length(predicted.size(), reference.size());
  if (k < 1) throw ValidationError(fmt::format("k must be positive, got {}", k));
  ConfusionMatrix m(static_cast<std::size_t>(k), std::vector<std::size_t>(static_cast<std::size_t>(k), 0));
  for (std::size_t i = 0; i < predicted.size(); ++i) {
    const int p = predicted[i], r = reference[i];
    if (p < 0 || p >= k || r < 0 || r >= k)
      throw IndexOutOfRange(fmt::format("class index out of range at position {} (pred {}, ref {})", i, p, r));
    ++m[static_cast<std::size_t>(r)][static_cast<std::size_t>(p)];
  }
  return m;
}

std::vector<Outlier> outliers(std::span<const double> predicted, std::span<const double> reference,
                              std::span<const std::string> ids, double cutoff) {
  require_same_length(predicted.size(), reference.size());
  require_same_length(predicted.size(), ids.size());
  std::vector<Outlier> out;
  for (std::size_t i = 0; i < predicted.size(); ++i) {
    const double delta = predicted[i] - reference[i];
    if (std::abs(delta) > cutoff) out.push_back({ids[i], predicted[i], reference[i], delta});
  }
  std::stable_sort(out.begin(), out.end(),
                   [](const Outlier& a, const Outlier& b) { return std::abs(a.delta) > std::abs(b.delta); });
  return out;
}

double relative_improvement(double before, double after) {
  if (before == 0.0) throw DegenerateInput("relative improvement undefined for a zero baseline");
  return (before - after) / before;
}

ScoreSummary summarize(std::span<const double> values) {
  ScoreSummary s;
  s.n = values.size();
  if (values.empty()) return s;
  s.mean = mean_of(values);
  s.sd = sample_sd(values);
  const auto [lo, hi] = std::minmax_element(values.begin(), values.end());
  s.min = *lo;
  s.max = *hi;
  return s;
}

nlohmann::json to_json(const EvalReport& r, bool include_per_sample) {
  nlohmann::json j{{"n", r.n},
                   {"mae", r.mae},
                   {"rmse", r.rmse},
                   {"error_sd", r.error_sd},
                   {"min_error", r.min_error},
                   {"max_error", r.max_error},
                   {"ci95", {r.ci95.low, r.ci95.high}}};
  if (include_per_sample) j["per_sample_abs_errors"] = r.per_sample_abs_errors;
  return j;
}

nlohmann::json to_json(const BinaryReport& r) {
  return {{"threshold", r.threshold},
          {"tp", r.counts.tp},
          {"fp", r.counts.fp},
          {"tn", r.counts.tn},
          {"fn", r.counts.fn},
          {"accuracy", r.accuracy},
          {"sensitivity", r.sensitivity},
          {"specificity", r.specificity},
          {"mcc", r.mcc},
          {"auc", r.auc ? nlohmann::json(*r.auc) : nlohmann::json(nullptr)}};
}

nlohmann::json to_json(const WilcoxonResult& r) {
  return {{"statistic", r.statistic}, {"p_two_sided", r.p_two_sided}, {"w_plus", r.w_plus},
          {"w_minus", r.w_minus},     {"n_effective", r.n_effective}, {"exact", r.exact}};
}

nlohmann::json to_json(const LinearFit& r) {
  return {{"slope", r.slope}, {"intercept", r.intercept}, {"r2", r.r2}, {"degenerate_reference", r.degenerate_reference}};
}

nlohmann::json to_json(const ScoreSummary& s) {
  return {{"n", s.n}, {"mean", s.mean}, {"sd", s.sd}, {"min", s.min}, {"max", s.max}};
}

nlohmann::json to_json(const std::vector<Outlier>& o) {
  auto arr = nlohmann::json::array();
  for (const auto& x : o)
    arr.push_back({{"id", x.id}, {"predicted", x.predicted}, {"reference", x.reference}, {"delta", x.delta}});
  return arr;
}

// Plots ---------------------------------------------------------------------------

namespace {

constexpr int kW = 640, kH = 480, kMargin = 56;

struct Axes {
  double x0, x1, y0, y1;
  cv::Point to_px(double x, double y) const {
    const double fx = (x - x0) / (x1 - x0), fy = (y - y0) / (y1 - y0);
    return {kMargin + static_cast<int>(std::lround(fx * (kW - 2 * kMargin))),
            kH - kMargin - static_cast<int>(std::lround(fy * (kH - 2 * kMargin)))};
  }
};

cv::Mat blank_canvas() { return cv::Mat(kH, kW, CV_8UC3, cv::Scalar(255, 255, 255)); }

void draw_axes(cv::Mat& img, const Axes& ax, const std::string& xlabel, const std::string& ylabel, double ytick) {
  const cv::Scalar black(0, 0, 0), grid(225, 225, 225);
  for (double t = std::ceil(ax.x0); t <= ax.x1 + 1e-9; t += 1.0) {
    cv::line(img, ax.to_px(t, ax.y0), ax.to_px(t, ax.y1), grid, 1);
    cv::putText(img, fmt::format("{:g}", t), ax.to_px(t, ax.y0) + cv::Point(-6, 18), cv::FONT_HERSHEY_SIMPLEX, 0.4,
                black, 1, cv::LINE_AA);
  }
  for (double t = ax.y0; t <= ax.y1 + 1e-9; t += ytick) {
    cv::line(img, ax.to_px(ax.x0, t), ax.to_px(ax.x1, t), grid, 1);
    cv::putText(img, fmt::format("{:g}", t), ax.to_px(ax.x0, t) + cv::Point(-36, 4), cv::FONT_HERSHEY_SIMPLEX, 0.4,
                black, 1, cv::LINE_AA);
  }
  cv::rectangle(img, ax.to_px(ax.x0, ax.y1), ax.to_px(ax.x1, ax.y0), black, 1);
  cv::putText(img, xlabel, {kW / 2 - 40, kH - 14}, cv::FONT_HERSHEY_SIMPLEX, 0.5, black, 1, cv::LINE_AA);
  cv::putText(img, ylabel, {8, 24}, cv::FONT_HERSHEY_SIMPLEX, 0.5, black, 1, cv::LINE_AA);
}

void save_png(const cv::Mat& img, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  if (!cv::imwrite(path.string(), img)) throw IoError("cannot write plot '" + path.string() + "'");
}

}  // namespace

void plot_scatter_fit(std::span<const double> predicted, std::span<const double> reference, const LinearFit& fit,
                      const std::filesystem::path& path) {
  require_same_length(predicted.size(), reference.size());
  cv::Mat img = blank_canvas();
  const Axes ax{1.0, 10.0, 1.0, 10.0};
  draw_axes(img, ax, "predicted score", "reference score", 1.0);
  for (std::size_t i = 0; i < predicted.size(); ++i)
    cv::circle(img, ax.to_px(std::clamp(predicted[i], 1.0, 10.0), std::clamp(reference[i], 1.0, 10.0)), 3,
               cv::Scalar(180, 90, 30), cv::FILLED, cv::LINE_AA);
  cv::line(img, ax.to_px(1.0, fit.slope * 1.0 + fit.intercept), ax.to_px(10.0, fit.slope * 10.0 + fit.intercept),
           cv::Scalar(40, 40, 220), 2, cv::LINE_AA);
  cv::putText(img, fmt::format("y = {:.3f}x + {:.3f}   R2 = {:.3f}", fit.slope, fit.intercept, fit.r2),
              {kMargin + 8, kMargin - 14}, cv::FONT_HERSHEY_SIMPLEX, 0.5, cv::Scalar(0, 0, 0), 1, cv::LINE_AA);
  save_png(img, path);
}

void plot_histograms(const std::vector<std::pair<std::string, std::vector<double>>>& groups, double threshold,
                     const std::filesystem::path& path) {
  constexpr double kBin = 0.5;
  const int nbins = static_cast<int>(9.0 / kBin) + 1;
  std::vector<std::vector<double>> counts;
  double peak = 1.0;
  for (const auto& [name, values] : groups) {
    std::vector<double> c(static_cast<std::size_t>(nbins), 0.0);
    for (double v : values) {
      const int b = std::clamp(static_cast<int>(std::floor((std::clamp(v, 1.0, 10.0) - 1.0) / kBin)), 0, nbins - 1);
      c[static_cast<std::size_t>(b)] += 1.0;
    }
    peak = std::max(peak, *std::max_element(c.begin(), c.end()));
    counts.push_back(std::move(c));
  }
  const double ymax = std::ceil(peak * 1.1);
  const double ytick = std::max(1.0, std::ceil(ymax / 8.0));
  cv::Mat img = blank_canvas();
  const Axes ax{1.0, 10.5, 0.0, ytick * std::ceil(ymax / ytick)};
  draw_axes(img, ax, "score", "count", ytick);
  const std::array<cv::Scalar, 4> colors{cv::Scalar(60, 160, 60), cv::Scalar(40, 170, 230), cv::Scalar(50, 50, 210),
                                         cv::Scalar(160, 100, 40)};
  for (std::size_t g = 0; g < counts.size(); ++g) {
    cv::Mat layer = img.clone();
    const auto& color = colors[g % colors.size()];
    for (int b = 0; b < nbins; ++b) {
      const double c = counts[g][static_cast<std::size_t>(b)];
      if (c <= 0.0) continue;
      const double x = 1.0 + b * kBin;
      cv::rectangle(layer, ax.to_px(x, c), ax.to_px(x + kBin, 0.0), color, cv::FILLED);
    }
    cv::addWeighted(layer, 0.55, img, 0.45, 0.0, img);
    cv::putText(img, groups[g].first, {kW - kMargin - 120, kMargin + 18 + 18 * static_cast<int>(g)},
                cv::FONT_HERSHEY_SIMPLEX, 0.5, color, 2, cv::LINE_AA);
  }
  cv::line(img, ax.to_px(threshold, ax.y0), ax.to_px(threshold, ax.y1), cv::Scalar(0, 0, 0), 2, cv::LINE_AA);
  save_png(img, path);
}

}  // namespace fundusq::metrics
