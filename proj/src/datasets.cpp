#include "fundusq/datasets.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>
#include <unordered_set>

#include <fmt/format.h>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "fundusq/errors.hpp"
#include "fundusq/random.hpp"

namespace fundusq::datasets {

QualityScore::QualityScore(double value) : value_(value) {
  if (!std::isfinite(value) || value < kMinScore || value > kMaxScore) {
    throw ValidationError(fmt::format("quality score {} outside [1,10]", value));
  }
}

bool QualityScore::on_grid() const { return on_half_grid(value_); }

bool on_half_grid(double value) {
  const double twice = value * 2.0;
  return std::isfinite(twice) && twice == std::floor(twice);
}

double snap_to_grid(double value) {
  return std::clamp(std::floor(value * 2.0 + 0.5) / 2.0, kMinScore, kMaxScore);
}

double clamp_score(double value) {
  if (std::isnan(value)) throw ValidationError("score is NaN");
  return std::clamp(value, kMinScore, kMaxScore);
}

std::string to_string(TrinaryLabel v) {
  switch (v) {
    case TrinaryLabel::Good: return "Good";
    case TrinaryLabel::Usable: return "Usable";
    case TrinaryLabel::Reject: return "Reject";
  }
  return {};
}

std::string to_string(BinaryLabel v) { return v == BinaryLabel::Good ? "Good" : "Poor"; }

std::string to_string(Split v) {
  switch (v) {
    case Split::train: return "train";
    case Split::validation: return "validation";
    case Split::test: return "test";
  }
  return {};
}

TrinaryLabel parse_trinary(const std::string& s) {
  if (s == "Good") return TrinaryLabel::Good;
  if (s == "Usable") return TrinaryLabel::Usable;
  if (s == "Reject") return TrinaryLabel::Reject;
  throw ValidationError("unknown trinary label '" + s + "'");
}

BinaryLabel parse_binary(const std::string& s) {
  if (s == "Good") return BinaryLabel::Good;
  if (s == "Poor") return BinaryLabel::Poor;
  throw ValidationError("unknown binary label '" + s + "'");
}

Split parse_split(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "validation") return Split::validation;
  if (s == "test") return Split::test;
  throw ValidationError("unknown split '" + s + "'");
}

// Manifest ------------------------------------------------------------------

void DatasetManifest::validate() const {
  std::unordered_set<std::string> ids;
  for (const auto& r : records) {
    if (r.id.empty()) throw ValidationError("record with empty id");
    if (!ids.insert(r.id).second) throw ValidationError("duplicate id", r.id);
    if (r.image_uri.empty()) throw ValidationError("missing image_uri", r.id);
    if (r.pseudo && !r.quality) throw ValidationError("pseudo record without quality", r.id);
    if (r.severity && !(*r.severity >= 0.0 && *r.severity <= 1.0)) {
      throw ValidationError("severity outside [0,1]", r.id);
    }
  }
  for (const auto& [id, split] : split_assignment) {
    if (!ids.contains(id)) throw ValidationError("split assigned to unknown id", id);
  }
}

std::optional<Split> DatasetManifest::split_of(const std::string& id) const {
  const auto it = split_assignment.find(id);
  if (it == split_assignment.end()) return std::nullopt;
  return it->second;
}

std::vector<const FundusRecord*> DatasetManifest::in_split(Split split) const {
  std::vector<const FundusRecord*> out;
  for (const auto& r : records) {
    if (split_of(r.id) == split) out.push_back(&r);
  }
  return out;
}

std::size_t DatasetManifest::count(Split split) const {
  return static_cast<std::size_t>(std::count_if(split_assignment.begin(), split_assignment.end(),
                                                [&](const auto& kv) { return kv.second == split; }));
}

std::filesystem::path DatasetManifest::resolve(const FundusRecord& record) const {
  std::filesystem::path p(record.image_uri);
  if (p.is_absolute() || base_dir.empty()) return p;
  return base_dir / p;
}

nlohmann::json record_to_json(const FundusRecord& r, std::optional<Split> split) {
  nlohmann::json j;
  j["id"] = r.id;
  j["image_uri"] = r.image_uri;
  j["source"] = r.source;
  if (r.quality) j["quality"] = r.quality->value();
  if (r.trinary) j["trinary"] = to_string(*r.trinary);
  if (r.binary) j["binary"] = to_string(*r.binary);
  if (r.pseudo) j["pseudo"] = true;
  if (split) j["split"] = to_string(*split);
  if (r.severity) j["severity"] = *r.severity;
  return j;
}

namespace {

FundusRecord record_from_json(const nlohmann::json& j, std::optional<Split>& split) {
  if (!j.is_object()) throw ParseError("record line is not a JSON object");
  FundusRecord r;
  const std::string id = j.contains("id") && j["id"].is_string() ? j["id"].get<std::string>() : "";
  if (id.empty()) throw ValidationError("record without a string id");
  r.id = id;
  try {
    for (const auto& [key, value] : j.items()) {
      if (key == "id") {
      } else if (key == "image_uri") {
        r.image_uri = value.get<std::string>();
      } else if (key == "source") {
        r.source = value.get<std::string>();
      } else if (key == "quality") {
        if (!value.is_number()) throw ValidationError("quality must be a number", id);
        r.quality = QualityScore(value.get<double>());
      } else if (key == "trinary") {
        r.trinary = parse_trinary(value.get<std::string>());
      } else if (key == "binary") {
        r.binary = parse_binary(value.get<std::string>());
      } else if (key == "pseudo") {
        r.pseudo = value.get<bool>();
      } else if (key == "split") {
        split = parse_split(value.get<std::string>());
      } else if (key == "severity") {
        r.severity = value.get<double>();
      } else {
        throw ValidationError("unknown record key '" + key + "'", id);
      }
    }
  } catch (const ValidationError& e) {
    if (!e.record_id().empty()) throw;
    throw ValidationError(e.what(), id);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("bad field type: ") + e.what(), id);
  }
  return r;
}

}  // namespace

DatasetManifest parse_manifest(const std::string& text, const std::filesystem::path& base_dir) {
  DatasetManifest m;
  m.base_dir = base_dir;
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  bool have_header = false;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw ParseError(fmt::format("manifest line {}: {}", line_no, e.what()));
    }
    if (!have_header) {
      if (!j.is_object() || !j.contains("version")) {
        throw ParseError("manifest must start with a header object carrying 'version'");
      }
      m.header.version = j.value("version", 1);
      m.header.source = j.value("source", "");
      m.header.created = j.value("created", "");
      if (m.header.version != 1) {
        throw ParseError(fmt::format("unsupported manifest version {}", m.header.version));
      }
      have_header = true;
      continue;
    }
    std::optional<Split> split;
    auto rec = record_from_json(j, split);
    if (split) m.split_assignment[rec.id] = *split;
    m.records.push_back(std::move(rec));
  }
  if (!have_header) throw ParseError("empty manifest");
  m.validate();
  return m;
}

DatasetManifest load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open manifest '" + path.string() + "'");
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_manifest(buf.str(), path.parent_path());
}

std::string serialize_manifest(const DatasetManifest& manifest) {
  std::string out;
  nlohmann::json header{{"version", manifest.header.version},
                        {"source", manifest.header.source},
                        {"created", manifest.header.created}};
  out += header.dump() + "\n";
  for (const auto& r : manifest.records) {
    out += record_to_json(r, manifest.split_of(r.id)).dump() + "\n";
  }
  return out;
}

void save_manifest(const DatasetManifest& manifest, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write '" + tmp.string() + "'");
    out << serialize_manifest(manifest);
    if (!out) throw IoError("write failed for '" + tmp.string() + "'");
  }
  std::filesystem::rename(tmp, path);
}

// Binning and splitting ------------------------------------------------------

int bin_count(double bin_width) {
  if (!(bin_width > 0.0)) throw ValidationError("bin_width must be positive");
  return static_cast<int>(std::floor((kMaxScore - kMinScore) / bin_width + 1e-9)) + 1;
}

int bin_score(double score, double bin_width) {
  const int bins = bin_count(bin_width);
  const int idx = static_cast<int>(std::floor((score - kMinScore) / bin_width + 1e-9));
  return std::clamp(idx, 0, bins - 1);
}

void SplitSpec::validate() const {
  if (counts.has_value() == fractions.has_value()) {
    throw ValidationError("split spec needs exactly one of counts or fractions");
  }
  if (fractions) {
    double sum = 0.0;
    for (double f : *fractions) {
      if (!(f >= 0.0)) throw ValidationError("split fractions must be non-negative");
      sum += f;
    }
    if (std::abs(sum - 1.0) > 1e-9) throw ValidationError(fmt::format("split fractions sum to {}", sum));
  }
  if (!(bin_width > 0.0)) throw ValidationError("bin_width must be positive");
}

namespace {

std::uint64_t tie_key(std::uint64_t seed, std::uint64_t a, std::uint64_t b) {
  return mix_seed(mix_seed(seed, a), b);
}

// Integer allocation matrix alloc[bin][split] with row sums bin_sizes[bin]
// and column sums totals[split]; every cell is floor or ceil of its ideal
// share bin_size * total / N.
std::vector<std::vector<std::size_t>> allocate(const std::vector<std::size_t>& bin_sizes,
                                               const std::vector<std::size_t>& totals,
                                               std::uint64_t seed) {
  const std::size_t n_bins = bin_sizes.size();
  const std::size_t n_splits = totals.size();
  const std::size_t n = std::accumulate(bin_sizes.begin(), bin_sizes.end(), std::size_t{0});
  std::vector<std::vector<std::size_t>> alloc(n_bins, std::vector<std::size_t>(n_splits, 0));
  std::vector<std::vector<std::size_t>> rem(n_bins, std::vector<std::size_t>(n_splits, 0));
  std::vector<std::size_t> row_need(n_bins, 0), col_need(totals);
  for (std::size_t b = 0; b < n_bins; ++b) {
    std::size_t used = 0;
    for (std::size_t s = 0; s < n_splits; ++s) {
      const auto prod = static_cast<unsigned __int128>(bin_sizes[b]) * totals[s];
      alloc[b][s] = static_cast<std::size_t>(prod / n);
      rem[b][s] = static_cast<std::size_t>(prod % n);
      used += alloc[b][s];
      col_need[s] -= alloc[b][s];
    }
    row_need[b] = bin_sizes[b] - used;
  }

  // Largest remainders first; the fractional matrix is a feasible point of a
  // transportation polytope with unit cell capacity, so an integral 0/1
  // completion on its support always exists.
  struct Cell {
    std::size_t b, s, rem;
    std::uint64_t tie;
  };
  std::vector<Cell> cells;
  for (std::size_t b = 0; b < n_bins; ++b) {
    for (std::size_t s = 0; s < n_splits; ++s) {
      if (rem[b][s] > 0) cells.push_back({b, s, rem[b][s], tie_key(seed, b, s)});
    }
  }
  std::sort(cells.begin(), cells.end(), [](const Cell& x, const Cell& y) {
    return x.rem != y.rem ? x.rem > y.rem : x.tie < y.tie;
  });
  std::vector<std::vector<char>> extra(n_bins, std::vector<char>(n_splits, 0));
  for (const auto& c : cells) {
    if (row_need[c.b] > 0 && col_need[c.s] > 0) {
      extra[c.b][c.s] = 1;
      --row_need[c.b];
      --col_need[c.s];
    }
  }

  // Repair remaining deficits with augmenting paths: row -> (unused cell) ->
  // split -> (used cell) -> row ... until a split with spare demand is found.
  for (std::size_t start = 0; start < n_bins; ++start) {
    while (row_need[start] > 0) {
      std::vector<long> prev_row_of_split(n_splits, -1), prev_split_of_row(n_bins, -1);
      std::vector<char> seen_row(n_bins, 0), seen_split(n_splits, 0);
      std::deque<std::size_t> queue{start};
      seen_row[start] = 1;
      long found = -1;
      while (!queue.empty() && found < 0) {
        const std::size_t b = queue.front();
        queue.pop_front();
        for (std::size_t s = 0; s < n_splits && found < 0; ++s) {
          if (seen_split[s] || rem[b][s] == 0 || extra[b][s]) continue;
          seen_split[s] = 1;
          prev_row_of_split[s] = static_cast<long>(b);
          if (col_need[s] > 0) {
            found = static_cast<long>(s);
            break;
          }
          for (std::size_t b2 = 0; b2 < n_bins; ++b2) {
            if (!seen_row[b2] && extra[b2][s]) {
              seen_row[b2] = 1;
              prev_split_of_row[b2] = static_cast<long>(s);
              queue.push_back(b2);
            }
          }
        }
      }
      if (found < 0) throw InsufficientData("stratified allocation is infeasible");
      // Flip the path.
      std::size_t s = static_cast<std::size_t>(found);
      --col_need[s];
      while (true) {
        const auto b = static_cast<std::size_t>(prev_row_of_split[s]);
        extra[b][s] = 1;
        if (b == start) break;
        const auto s_prev = static_cast<std::size_t>(prev_split_of_row[b]);
        extra[b][s_prev] = 0;
        s = s_prev;
      }
      --row_need[start];
    }
  }
  for (std::size_t b = 0; b < n_bins; ++b) {
    for (std::size_t s = 0; s < n_splits; ++s) alloc[b][s] += extra[b][s];
  }
  return alloc;
}

// Assigns each record index in `members` to a split so that the split totals
// equal `totals` and every bin is proportionally represented.
std::vector<std::size_t> assign_stratified(const std::vector<double>& scores,
                                           const std::vector<std::size_t>& totals, bool stratify,
                                           double bin_width, std::uint64_t seed) {
  const int n_bins = stratify ? bin_count(bin_width) : 1;
  std::vector<std::vector<std::size_t>> members(n_bins);
  for (std::size_t i = 0; i < scores.size(); ++i) {
    members[stratify ? bin_score(scores[i], bin_width) : 0].push_back(i);
  }
  std::vector<std::size_t> bin_sizes(n_bins);
  for (int b = 0; b < n_bins; ++b) bin_sizes[b] = members[b].size();
  const auto alloc = allocate(bin_sizes, totals, seed);

  std::vector<std::size_t> split_of(scores.size(), 0);
  for (int b = 0; b < n_bins; ++b) {
    Rng rng(mix_seed(seed, 1000 + static_cast<std::uint64_t>(b)));
    auto order = members[b];
    rng.shuffle(order);
    std::size_t k = 0;
    for (std::size_t s = 0; s < totals.size(); ++s) {
      for (std::size_t j = 0; j < alloc[b][s]; ++j) split_of[order[k++]] = s;
    }
  }
  return split_of;
}

}  // namespace

std::vector<std::size_t> apportion(std::size_t total, const std::vector<double>& weights,
                                   std::uint64_t seed) {
  const double sum = std::accumulate(weights.begin(), weights.end(), 0.0);
  if (!(sum > 0.0)) throw ValidationError("apportion weights must have a positive sum");
  std::vector<std::size_t> out(weights.size());
  std::vector<std::pair<double, std::size_t>> fracs;
  std::size_t used = 0;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    const double quota = static_cast<double>(total) * weights[i] / sum;
    out[i] = static_cast<std::size_t>(std::floor(quota + 1e-9));
    used += out[i];
    fracs.emplace_back(quota - static_cast<double>(out[i]), i);
  }
  std::sort(fracs.begin(), fracs.end(), [&](const auto& a, const auto& b) {
    if (std::abs(a.first - b.first) > 1e-12) return a.first > b.first;
    return tie_key(seed, a.second, 7) < tie_key(seed, b.second, 7);
  });
  for (std::size_t k = 0; used < total; ++k, ++used) ++out[fracs[k % fracs.size()].second];
  return out;
}

DatasetManifest stratified_split(const DatasetManifest& manifest, const SplitSpec& spec) {
  spec.validate();
  const std::size_t n = manifest.records.size();
  std::vector<std::size_t> totals;
  if (spec.counts) {
    const auto& c = *spec.counts;
    const std::size_t sum = c[0] + c[1] + c[2];
    if (sum > n) {
      throw InsufficientData(fmt::format("requested {} records but the manifest holds {}", sum, n));
    }
    if (sum != n) {
      throw ValidationError(fmt::format("split counts sum to {} but the manifest holds {}", sum, n));
    }
    totals.assign(c.begin(), c.end());
  } else {
    if (n == 0) throw InsufficientData("cannot split an empty manifest");
    totals = apportion(n, {(*spec.fractions)[0], (*spec.fractions)[1], (*spec.fractions)[2]}, spec.seed);
  }
  std::vector<double> scores;
  scores.reserve(n);
  for (const auto& r : manifest.records) {
    if (!r.quality) {
      if (spec.stratify) throw ValidationError("record has no quality score to stratify on", r.id);
      scores.push_back(kMinScore);
    } else {
      scores.push_back(r.quality->value());
    }
  }
  const auto assignment = assign_stratified(scores, totals, spec.stratify, spec.bin_width, spec.seed);
  DatasetManifest out = manifest;
  out.split_assignment.clear();
  constexpr Split kOrder[] = {Split::train, Split::validation, Split::test};
  for (std::size_t i = 0; i < n; ++i) out.split_assignment[manifest.records[i].id] = kOrder[assignment[i]];
  return out;
}

DatasetManifest merge_pseudo(const DatasetManifest& labeled, const DatasetManifest& pseudo,
                             const MergeOptions& options) {
  std::unordered_set<std::string> ids;
  for (const auto& r : labeled.records) ids.insert(r.id);
  for (const auto& r : pseudo.records) {
    if (!r.pseudo) throw ValidationError("pseudo manifest record not flagged pseudo", r.id);
    if (!r.quality) throw ValidationError("pseudo record without quality", r.id);
    if (ids.contains(r.id)) throw IdCollision("id '" + r.id + "' exists in both manifests");
  }
  DatasetManifest out = labeled;
  if (pseudo.records.empty()) return out;

  // Pseudo image URIs are made absolute when the two manifests live apart.
  for (auto r : pseudo.records) {
    if (pseudo.base_dir != labeled.base_dir && !pseudo.base_dir.empty()) {
      r.image_uri = std::filesystem::absolute(pseudo.resolve(r)).string();
    }
    out.records.push_back(std::move(r));
  }

  if (options.policy == PseudoPolicy::train_only) {
    for (const auto& r : pseudo.records) out.split_assignment[r.id] = Split::train;
    return out;
  }

  // pooled_redraw: pool labeled train+validation with all pseudo records and
  // redraw a stratified train/validation split; test stays as it was.
  std::vector<std::size_t> pool;
  std::vector<double> scores;
  for (std::size_t i = 0; i < out.records.size(); ++i) {
    const auto& r = out.records[i];
    const auto split = out.split_of(r.id);
    const bool is_pseudo = i >= labeled.records.size();
    if (is_pseudo || split == Split::train || split == Split::validation) {
      if (!r.quality) throw ValidationError("pooled record has no quality score", r.id);
      pool.push_back(i);
      scores.push_back(r.quality->value());
    }
  }
  if (!(options.validation_fraction >= 0.0 && options.validation_fraction < 1.0)) {
    throw ValidationError("validation_fraction must be in [0,1)");
  }
  const auto val = static_cast<std::size_t>(
      std::llround(static_cast<double>(pool.size()) * options.validation_fraction));
  const auto assignment =
      assign_stratified(scores, {pool.size() - val, val}, true, options.bin_width, options.seed);
  for (std::size_t k = 0; k < pool.size(); ++k) {
    out.split_assignment[out.records[pool[k]].id] = assignment[k] == 0 ? Split::train : Split::validation;
  }
  return out;
}

// Synthetic corpus -------------------------------------------------------------

double severity_to_score(double severity) {
  const double s = std::clamp(severity, 0.0, 1.0);
  return snap_to_grid(kMaxScore - (kMaxScore - kMinScore) * s);
}

TrinaryLabel score_to_trinary(double score) {
  if (score >= 7.0) return TrinaryLabel::Good;
  if (score >= 4.0) return TrinaryLabel::Usable;
  return TrinaryLabel::Reject;
}

BinaryLabel score_to_binary(double score, double threshold) {
  return score >= threshold ? BinaryLabel::Good : BinaryLabel::Poor;
}

imaging::ImageTensor render_synthetic(const DegradationSpec& spec, double severity,
                                      std::uint64_t seed) {
  if (spec.width < 8 || spec.height < 8) throw ValidationError("synthetic images must be at least 8x8");
  const double s = std::clamp(severity, 0.0, 1.0);
  Rng rng(seed);
  const int h = spec.height, w = spec.width;
  cv::Mat img(h, w, CV_32FC3, cv::Scalar(0, 0, 0));
  cv::Mat mask(h, w, CV_8UC1, cv::Scalar(0));

  const double radius = 0.46 * std::min(h, w);
  const cv::Point2d center(w / 2.0 + rng.uniform(-0.03, 0.03) * w, h / 2.0 + rng.uniform(-0.03, 0.03) * h);
  cv::circle(mask, center, static_cast<int>(radius), cv::Scalar(255), cv::FILLED, cv::LINE_8);

  // Retina background with radial falloff (RGB order).
  const double base_r = rng.uniform(180, 220), base_g = rng.uniform(70, 100), base_b = rng.uniform(25, 45);
  for (int y = 0; y < h; ++y) {
    auto* row = img.ptr<cv::Vec3f>(y);
    const auto* m = mask.ptr<std::uint8_t>(y);
    for (int x = 0; x < w; ++x) {
      if (!m[x]) continue;
      const double d = std::hypot(x - center.x, y - center.y) / radius;
      const double fall = 1.0 - 0.35 * d * d;
      row[x] = cv::Vec3f(static_cast<float>(base_r * fall), static_cast<float>(base_g * fall),
                         static_cast<float>(base_b * fall));
    }
  }

  // Optic disc.
  const double side = rng.uniform() < 0.5 ? -1.0 : 1.0;
  const cv::Point2d disc(center.x + side * 0.45 * radius, center.y + rng.uniform(-0.1, 0.1) * radius);
  const double disc_r = 0.16 * radius;
  cv::circle(img, disc, std::max(1, static_cast<int>(disc_r)), cv::Scalar(250, 225, 160), cv::FILLED, cv::LINE_AA);

  // Vessels: curved strokes leaving the disc.
  const int n_vessels = 6;
  for (int v = 0; v < n_vessels; ++v) {
    const double angle = (v + rng.uniform(-0.3, 0.3)) * 2.0 * 3.14159265358979 / n_vessels;
    const double bend = rng.uniform(-0.6, 0.6);
    std::vector<cv::Point> pts;
    for (int k = 0; k <= 12; ++k) {
      const double t = k / 12.0;
      const double a = angle + bend * t;
      const double r = disc_r + t * radius * 1.3;
      pts.emplace_back(static_cast<int>(std::lround(disc.x + r * std::cos(a))),
                       static_cast<int>(std::lround(disc.y + r * std::sin(a))));
    }
    const int thickness = v % 2 == 0 ? 2 : 1;
    cv::polylines(img, pts, false, cv::Scalar(110, 25, 20), thickness, cv::LINE_AA);
  }
  // Keep everything inside the fundus disc.
  cv::Mat black(h, w, CV_32FC3, cv::Scalar(0, 0, 0));
  black.copyTo(img, ~mask);

  // Degradation.
  const double sigma = s * spec.max_blur * h;
  if (sigma > 0.05) cv::GaussianBlur(img, img, cv::Size(0, 0), sigma, sigma, cv::BORDER_CONSTANT);
  if (spec.mode != SynthMode::blur) {
    img *= 1.0 - s * spec.max_darkening;
    const double noise = s * spec.max_noise;
    if (noise > 0.0) {
      for (int y = 0; y < h; ++y) {
        auto* row = img.ptr<cv::Vec3f>(y);
        const auto* m = mask.ptr<std::uint8_t>(y);
        for (int x = 0; x < w; ++x) {
          if (!m[x]) continue;
          for (int c = 0; c < 3; ++c) row[x][c] += static_cast<float>(rng.normal(0.0, noise));
        }
      }
    }
  }

  std::vector<float> values(static_cast<std::size_t>(h) * w * 3);
  for (int y = 0; y < h; ++y) {
    const auto* row = img.ptr<cv::Vec3f>(y);
    for (int x = 0; x < w; ++x) {
      for (int c = 0; c < 3; ++c) {
        // Quantize like an 8-bit camera would.
        values[(static_cast<std::size_t>(y) * w + x) * 3 + c] =
            std::clamp(std::round(row[x][c]), 0.0f, 255.0f);
      }
    }
  }
  return imaging::ImageTensor(h, w, std::move(values), false);
}

DatasetManifest synth_corpus(const DegradationSpec& spec, std::size_t n, std::uint64_t seed,
                             const std::filesystem::path& out_dir, const std::string& id_prefix) {
  if (n == 0) throw ValidationError("synth_corpus needs n > 0");
  const auto image_dir = out_dir / "images";
  std::filesystem::create_directories(image_dir);
  DatasetManifest m;
  m.header.source = spec.source;
  m.base_dir = out_dir;
  Rng rng(mix_seed(seed, 17));
  constexpr double kBands[3][2] = {{0.0, 0.1}, {0.45, 0.55}, {0.9, 1.0}};
  for (std::size_t i = 0; i < n; ++i) {
    double severity;
    if (spec.mode == SynthMode::separable3) {
      const auto& band = kBands[i % 3];
      severity = rng.uniform(band[0], band[1]);
    } else {
      severity = rng.uniform();
    }
    const double score = severity_to_score(severity);
    const std::string id = fmt::format("{}{:06d}", id_prefix, i);
    const auto image = render_synthetic(spec, severity, mix_seed(seed, 100000 + i));
    imaging::write_image(image, image_dir / (id + ".png"));
    FundusRecord r;
    r.id = id;
    r.image_uri = "images/" + id + ".png";
    r.source = spec.source;
    r.quality = QualityScore(score);
    r.trinary = score_to_trinary(score);
    r.binary = score_to_binary(score);
    r.severity = severity;
    m.records.push_back(std::move(r));
  }
  return m;
}

}  // namespace fundusq::datasets
