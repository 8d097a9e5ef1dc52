#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "fundusq/datasets.hpp"

namespace fundusq::scale {

struct Exemplar {
  double score = 0.0;
  std::string image_uri;
  std::string source;
};

struct ReferenceScale {
  std::string version;
  std::vector<Exemplar> exemplars;
  /// Directory used to resolve relative exemplar URIs. Not serialized.
  std::filesystem::path base_dir;
};

/// Validation findings are data: every check runs and each failure is listed.
struct Violation {
  /// grid, range, coverage, uri, count, version, field or timestamp.
  std::string kind;
  std::string message;
  /// Exemplar index, when the violation concerns one exemplar.
  std::optional<std::size_t> index;
};

void to_json(nlohmann::json& j, const Violation& v);

struct ScaleCheck {
  double max_lowest = 2.0;
  double min_highest = 9.5;
  /// When set, the exemplar count must match.
  std::optional<std::size_t> expected_count;
  /// Relative URIs must resolve to existing files under base_dir.
  bool require_local_files = false;
};

std::vector<Violation> validate_scale(const ReferenceScale& scale, const ScaleCheck& check = {});

nlohmann::json scale_to_json(const ReferenceScale& scale);
ReferenceScale scale_from_json(const nlohmann::json& j);
/// Throws IoError or ParseError.
ReferenceScale load_scale(const std::filesystem::path& path);

struct AnnotationRecord {
  std::string record_id;
  std::string image_id;
  std::string grader_id;
  double score = 0.0;
  /// ISO-8601 UTC, e.g. 2024-03-01T12:00:00Z or with milliseconds.
  std::string timestamp;
  std::string scale_version;
};

nlohmann::json annotation_to_json(const AnnotationRecord& r);
/// Throws ParseError on missing or mistyped fields and on unknown keys.
AnnotationRecord annotation_from_json(const nlohmann::json& j);

std::vector<Violation> validate_annotation(const AnnotationRecord& rec, const ReferenceScale& scale);

/// Milliseconds since the epoch; nullopt when the text is not an accepted
/// ISO-8601 UTC timestamp.
std::optional<std::int64_t> parse_timestamp(const std::string& text);
std::string format_timestamp(std::int64_t epoch_ms);

enum class ExportPolicy {
  /// The annotation with the latest timestamp wins; later log position
  /// breaks ties.
  latest_wins,
  /// Mean of all annotations, snapped to the 0.5 grid (ties round up).
  average,
};

std::string to_string(ExportPolicy p);
ExportPolicy parse_export_policy(const std::string& s);

struct ExportOptions {
  ExportPolicy policy = ExportPolicy::latest_wins;
  /// Image id -> image URI; ids not listed use the image id as URI.
  std::map<std::string, std::string> image_uris;
};

/// One quality-labeled record per annotated image, ordered by image id. The
/// policy is recorded in the manifest header source. `annotations` is in log
/// order.
datasets::DatasetManifest export_labels(const std::vector<AnnotationRecord>& annotations,
                                        const ExportOptions& options = {});

}  // namespace fundusq::scale
