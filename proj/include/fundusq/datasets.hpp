#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "fundusq/imaging.hpp"

namespace fundusq::datasets {

inline constexpr double kMinScore = 1.0;
inline constexpr double kMaxScore = 10.0;

/// Quality grade on the 1-10 scale. Annotation-sourced scores sit on the 0.5
/// grid; predicted and pseudo-label scores may not.
class QualityScore {
 public:
  /// Throws ValidationError outside [1,10] or for non-finite values.
  explicit QualityScore(double value);

  double value() const { return value_; }
  bool on_grid() const;

  friend auto operator<=>(const QualityScore&, const QualityScore&) = default;

 private:
  double value_;
};

/// True when value*2 is integral.
bool on_half_grid(double value);
/// Nearest 0.5 grid point, ties rounded up, clamped to [1,10].
double snap_to_grid(double value);
double clamp_score(double value);

enum class TrinaryLabel { Good, Usable, Reject };
enum class BinaryLabel { Good, Poor };
enum class Split { train, validation, test };

std::string to_string(TrinaryLabel v);
std::string to_string(BinaryLabel v);
std::string to_string(Split v);
TrinaryLabel parse_trinary(const std::string& s);
BinaryLabel parse_binary(const std::string& s);
Split parse_split(const std::string& s);

struct FundusRecord {
  std::string id;
  std::string image_uri;
  std::string source;
  std::optional<QualityScore> quality;
  std::optional<TrinaryLabel> trinary;
  std::optional<BinaryLabel> binary;
  bool pseudo = false;
  /// Degradation severity in [0,1]; only set for synthetic records.
  std::optional<double> severity;
};

struct ManifestHeader {
  int version = 1;
  std::string source;
  std::string created;
};

struct DatasetManifest {
  ManifestHeader header;
  std::vector<FundusRecord> records;
  std::map<std::string, Split> split_assignment;
  /// Directory used to resolve relative image URIs. Not serialized.
  std::filesystem::path base_dir;

  /// Checks id uniqueness, the pseudo-implies-quality rule and that split ids
  /// exist. Throws ValidationError naming the offending record.
  void validate() const;

  std::optional<Split> split_of(const std::string& id) const;
  /// Records assigned to `split`, in manifest order.
  std::vector<const FundusRecord*> in_split(Split split) const;
  std::size_t count(Split split) const;
  std::filesystem::path resolve(const FundusRecord& record) const;
};

nlohmann::json record_to_json(const FundusRecord& r, std::optional<Split> split);

/// Line-oriented JSON: header object first, then one record per line.
DatasetManifest load_manifest(const std::filesystem::path& path);
DatasetManifest parse_manifest(const std::string& text, const std::filesystem::path& base_dir = {});
std::string serialize_manifest(const DatasetManifest& manifest);
/// Atomic: writes a temporary sibling then renames it into place.
void save_manifest(const DatasetManifest& manifest, const std::filesystem::path& path);

/// floor((value - 1) / bin_width), with 10.0 folded into the last bin.
int bin_score(double score, double bin_width);
int bin_count(double bin_width);

struct SplitSpec {
  /// Exactly one of counts / fractions is set; ordered train, validation, test.
  std::optional<std::array<std::size_t, 3>> counts;
  std::optional<std::array<double, 3>> fractions;
  bool stratify = true;
  double bin_width = 0.5;
  std::uint64_t seed = 0;

  void validate() const;
};

/// Per-bin proportional allocation with largest-remainder rounding. Split
/// totals match the requested counts exactly; every bin/split cell deviates
/// from its ideal share by less than one record.
DatasetManifest stratified_split(const DatasetManifest& manifest, const SplitSpec& spec);

/// Largest-remainder apportionment of `total` according to `weights`.
/// Ties are broken by `seed`.
std::vector<std::size_t> apportion(std::size_t total, const std::vector<double>& weights,
                                   std::uint64_t seed);

enum class PseudoPolicy {
  /// Labeled train+validation and pseudo records are pooled and the
  /// train/validation split is re-drawn; test is untouched.
  pooled_redraw,
  /// Labeled records keep their splits; pseudo records go to train only.
  train_only,
};

struct MergeOptions {
  PseudoPolicy policy = PseudoPolicy::pooled_redraw;
  /// Validation share of the pooled records under pooled_redraw.
  double validation_fraction = 0.05;
  double bin_width = 0.5;
  std::uint64_t seed = 0;
};

DatasetManifest merge_pseudo(const DatasetManifest& labeled, const DatasetManifest& pseudo,
                             const MergeOptions& options = {});

// Synthetic corpus ---------------------------------------------------------

enum class SynthMode {
  /// Blur, darkening and noise all grow with severity.
  mixed,
  /// Only blur grows with severity.
  blur,
  /// Severity drawn from three well-separated bands, one per trinary class.
  separable3,
};

struct DegradationSpec {
  SynthMode mode = SynthMode::blur;
  int width = 80;
  int height = 64;
  /// Blur sigma at severity 1, as a fraction of the image height.
  double max_blur = 0.08;
  /// Brightness reduction at severity 1 (0 keeps brightness).
  double max_darkening = 0.6;
  /// Gaussian noise sigma at severity 1, in 0-255 units.
  double max_noise = 40.0;
  std::string source = "synthetic";
};

/// Monotone severity -> score map: 10 - 9*severity, snapped to the 0.5 grid.
double severity_to_score(double severity);
TrinaryLabel score_to_trinary(double score);
BinaryLabel score_to_binary(double score, double threshold = 6.5);

/// Renders one synthetic fundus-like raster: dark field, orange disc with a
/// bright optic disc and dark vessel strokes, degraded according to severity.
imaging::ImageTensor render_synthetic(const DegradationSpec& spec, double severity,
                                      std::uint64_t seed);

/// Writes `n` PNG images under `out_dir/images` and returns their manifest
/// (not saved). Records carry quality, trinary, binary and severity.
DatasetManifest synth_corpus(const DegradationSpec& spec, std::size_t n, std::uint64_t seed,
                             const std::filesystem::path& out_dir, const std::string& id_prefix = "syn");

}  // namespace fundusq::datasets
