#include "fundusq/scale.hpp"

#include <algorithm>
#include <cmath>
#include <ctime>
#include <fstream>
#include <set>

#include <fmt/format.h>

#include "fundusq/errors.hpp"

namespace fundusq::scale {

void to_json(nlohmann::json& j, const Violation& v) {
  j = nlohmann::json{{"kind", v.kind}, {"message", v.message}};
  if (v.index) j["index"] = *v.index;
}

namespace {

bool is_remote(const std::string& uri) {
  return uri.starts_with("http://") || uri.starts_with("https://");
}

void check_score(double score, std::vector<Violation>& out, std::optional<std::size_t> index) {
  if (!std::isfinite(score) || score < datasets::kMinScore || score > datasets::kMaxScore) {
    out.push_back({"range", fmt::format("score {} outside [1,10]", score), index});
  }
  if (std::isfinite(score) && !datasets::on_half_grid(score)) {
    out.push_back({"grid", fmt::format("score {} is not on the 0.5 grid", score), index});
  }
}

}  // namespace

std::vector<Violation> validate_scale(const ReferenceScale& scale, const ScaleCheck& check) {
  std::vector<Violation> out;
  if (scale.version.empty()) out.push_back({"version", "scale has no version", std::nullopt});
  if (scale.exemplars.empty()) {
    out.push_back({"coverage", "scale has no exemplars", std::nullopt});
  }
  std::set<std::string> uris;
  for (std::size_t i = 0; i < scale.exemplars.size(); ++i) {
    const auto& e = scale.exemplars[i];
    check_score(e.score, out, i);
    if (e.image_uri.empty()) {
      out.push_back({"uri", "exemplar has no image URI", i});
    } else if (!uris.insert(e.image_uri).second) {
      out.push_back({"uri", "duplicate image URI '" + e.image_uri + "'", i});
    } else if (check.require_local_files && !is_remote(e.image_uri)) {
      const std::filesystem::path p(e.image_uri);
      const auto resolved = p.is_absolute() ? p : scale.base_dir / p;
      if (!std::filesystem::exists(resolved)) {
        out.push_back({"uri", "image '" + e.image_uri + "' does not exist", i});
      }
    }
  }
  if (!scale.exemplars.empty()) {
    const auto [lo, hi] = std::minmax_element(scale.exemplars.begin(), scale.exemplars.end(),
                                              [](const Exemplar& a, const Exemplar& b) { return a.score < b.score; });
    if (lo->score > check.max_lowest) {
      out.push_back({"coverage", fmt::format("lowest exemplar {} is above {}", lo->score, check.max_lowest),
                     std::nullopt});
    }
    if (hi->score < check.min_highest) {
      out.push_back({"coverage", fmt::format("highest exemplar {} is below {}", hi->score, check.min_highest),
                     std::nullopt});
    }
  }
  if (check.expected_count && scale.exemplars.size() != *check.expected_count) {
    out.push_back({"count", fmt::format("{} exemplars, expected {}", scale.exemplars.size(), *check.expected_count),
                   std::nullopt});
  }
  return out;
}

nlohmann::json scale_to_json(const ReferenceScale& scale) {
  auto ex = nlohmann::json::array();
  for (const auto& e : scale.exemplars) {
    ex.push_back({{"score", e.score}, {"image_uri", e.image_uri}, {"source", e.source}});
  }
  return {{"version", scale.version}, {"exemplars", ex}};
}

ReferenceScale scale_from_json(const nlohmann::json& j) {
  ReferenceScale s;
  try {
    for (const auto& [key, value] : j.items()) {
      if (key != "version" && key != "exemplars") throw ParseError("unknown scale key '" + key + "'");
    }
    s.version = j.at("version").get<std::string>();
    for (const auto& e : j.at("exemplars")) {
      for (const auto& [key, value] : e.items()) {
        if (key != "score" && key != "image_uri" && key != "source") {
          throw ParseError("unknown exemplar key '" + key + "'");
        }
      }
      s.exemplars.push_back({e.at("score").get<double>(), e.at("image_uri").get<std::string>(),
                             e.value("source", std::string{})});
    }
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("malformed scale: ") + e.what());
  }
  return s;
}

ReferenceScale load_scale(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot read scale '" + path.string() + "'");
  nlohmann::json j;
  try {
    f >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError("scale '" + path.string() + "' is not JSON: " + e.what());
  }
  auto s = scale_from_json(j);
  s.base_dir = path.parent_path();
  return s;
}

nlohmann::json annotation_to_json(const AnnotationRecord& r) {
  return {{"record_id", r.record_id}, {"image_id", r.image_id},   {"grader_id", r.grader_id},
          {"score", r.score},         {"timestamp", r.timestamp}, {"scale_version", r.scale_version}};
}

AnnotationRecord annotation_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ParseError("annotation must be a JSON object");
  static const std::set<std::string> known{"record_id", "image_id", "grader_id", "score", "timestamp", "scale_version"};
  for (const auto& [key, value] : j.items()) {
    if (!known.contains(key)) throw ParseError("unknown annotation key '" + key + "'");
  }
  AnnotationRecord r;
  try {
    r.record_id = j.value("record_id", std::string{});
    r.image_id = j.at("image_id").get<std::string>();
    r.grader_id = j.value("grader_id", std::string{});
    r.score = j.at("score").get<double>();
    r.timestamp = j.value("timestamp", std::string{});
    r.scale_version = j.value("scale_version", std::string{});
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("malformed annotation: ") + e.what());
  }
  return r;
}

std::vector<Violation> validate_annotation(const AnnotationRecord& rec, const ReferenceScale& scale) {
  std::vector<Violation> out;
  check_score(rec.score, out, std::nullopt);
  if (rec.image_id.empty()) out.push_back({"field", "image_id is empty", std::nullopt});
  if (rec.grader_id.empty()) out.push_back({"field", "grader_id is empty", std::nullopt});
  if (rec.record_id.empty()) out.push_back({"field", "record_id is empty", std::nullopt});
  if (!parse_timestamp(rec.timestamp)) {
    out.push_back({"timestamp", "timestamp '" + rec.timestamp + "' is not ISO-8601 UTC", std::nullopt});
  }
  if (rec.scale_version != scale.version) {
    out.push_back({"version",
                   fmt::format("scale version '{}' does not match active '{}'", rec.scale_version, scale.version),
                   std::nullopt});
  }
  return out;
}

std::optional<std::int64_t> parse_timestamp(const std::string& text) {
  int y, mo, d, h, mi, s, ms = 0, consumed = 0;
  if (std::sscanf(text.c_str(), "%4d-%2d-%2dT%2d:%2d:%2d%n", &y, &mo, &d, &h, &mi, &s, &consumed) != 6 ||
      consumed != 19) {
    return std::nullopt;
  }
  std::string rest = text.substr(19);
  if (rest.size() == 5 && rest[0] == '.' && rest[4] == 'Z' &&
      std::all_of(rest.begin() + 1, rest.begin() + 4, [](char c) { return std::isdigit(static_cast<unsigned char>(c)); })) {
    ms = std::stoi(rest.substr(1, 3));
  } else if (rest != "Z") {
    return std::nullopt;
  }
  if (mo < 1 || mo > 12 || d < 1 || d > 31 || h > 23 || mi > 59 || s > 60) return std::nullopt;
  std::tm tm{};
  tm.tm_year = y - 1900;
  tm.tm_mon = mo - 1;
  tm.tm_mday = d;
  tm.tm_hour = h;
  tm.tm_min = mi;
  tm.tm_sec = s;
  const std::time_t t = timegm(&tm);
  std::tm check{};
  gmtime_r(&t, &check);
  if (check.tm_mday != d && s != 60) return std::nullopt;
  return static_cast<std::int64_t>(t) * 1000 + ms;
}

std::string format_timestamp(std::int64_t epoch_ms) {
  const std::time_t t = static_cast<std::time_t>(epoch_ms / 1000);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%S", &tm);
  return fmt::format("{}.{:03d}Z", buf, static_cast<int>(epoch_ms % 1000));
}

std::string to_string(ExportPolicy p) { return p == ExportPolicy::average ? "average" : "latest_wins"; }

ExportPolicy parse_export_policy(const std::string& s) {
  if (s == "latest_wins") return ExportPolicy::latest_wins;
  if (s == "average") return ExportPolicy::average;
  throw ConfigError("unknown export policy '" + s + "'");
}

datasets::DatasetManifest export_labels(const std::vector<AnnotationRecord>& annotations,
                                        const ExportOptions& options) {
  struct Chosen {
    std::int64_t time = 0;
    double score = 0.0;
    double sum = 0.0;
    std::size_t count = 0;
  };
  std::map<std::string, Chosen> by_image;
  std::int64_t newest = 0;
  for (const auto& a : annotations) {
    const std::int64_t t = parse_timestamp(a.timestamp).value_or(0);
    newest = std::max(newest, t);
    auto [it, fresh] = by_image.try_emplace(a.image_id);
    auto& c = it->second;
    if (fresh || t >= c.time) {
      c.time = t;
      c.score = a.score;
    }
    c.sum += a.score;
    ++c.count;
  }

  datasets::DatasetManifest m;
  m.header.source = "annotations:" + to_string(options.policy);
  m.header.created = annotations.empty() ? "" : format_timestamp(newest);
  for (const auto& [image, c] : by_image) {
    const double score = options.policy == ExportPolicy::average
                             ? datasets::snap_to_grid(c.sum / static_cast<double>(c.count))
                             : c.score;
    datasets::FundusRecord r;
    r.id = image;
    const auto uri = options.image_uris.find(image);
    r.image_uri = uri == options.image_uris.end() ? image : uri->second;
    r.source = "annotation";
    r.quality = datasets::QualityScore(score);
    m.records.push_back(std::move(r));
  }
  return m;
}

}  // namespace fundusq::scale
