#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "fundusq/scale.hpp"

namespace fundusq::service {

struct ServiceConfig {
  std::string checkpoint;
  std::string scale;
  /// Manifest of images to dispense for annotation.
  std::string queue;
  std::string annotation_log = "annotations.jsonl";
  /// host:port; port 0 picks a free port.
  std::string listen = "127.0.0.1:8080";
  double threshold = 6.5;
  int lease_seconds = 600;
  /// Where Grad-CAM overlays are written; empty uses a directory next to the
  /// annotation log.
  std::string cam_dir;
  scale::ExportPolicy export_policy = scale::ExportPolicy::latest_wins;

  void validate() const;
};

void to_json(nlohmann::json& j, const ServiceConfig& c);
/// Rejects unknown keys.
void from_json(const nlohmann::json& j, ServiceConfig& c);

/// Applies FUNDUSQ_CHECKPOINT, FUNDUSQ_SCALE, FUNDUSQ_QUEUE, FUNDUSQ_LISTEN,
/// FUNDUSQ_THRESHOLD, FUNDUSQ_ANNOTATION_LOG and FUNDUSQ_CAM_DIR.
void apply_environment(ServiceConfig& c, const std::function<const char*(const char*)>& getenv = {});

/// Append-only line-oriented JSON log of annotation records. Each append is
/// flushed and fsync'ed before it returns. Opening replays the file; a torn
/// final line (a write interrupted before its newline) is discarded, any
/// other malformed line raises ParseError.
class AnnotationLog {
 public:
  explicit AnnotationLog(std::filesystem::path path);
  ~AnnotationLog();
  AnnotationLog(const AnnotationLog&) = delete;
  AnnotationLog& operator=(const AnnotationLog&) = delete;

  void append(const scale::AnnotationRecord& record);
  std::vector<scale::AnnotationRecord> records() const;
  std::size_t size() const;
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
  int fd_ = -1;
  mutable std::mutex mutex_;
  std::vector<scale::AnnotationRecord> records_;
};

/// Milliseconds since the epoch.
using Clock = std::function<std::int64_t()>;
std::int64_t system_clock_ms();

/// Scoring and annotation HTTP service. Routes:
///   POST /v1/score                 multipart "image"; ?threshold=&cam=1
///   GET  /v1/reference-scale
///   GET  /v1/annotation/next       X-Grader-Id header (or ?grader=)
///   POST /v1/annotation            AnnotationRecord JSON
///   GET  /v1/annotation/export
///   GET  /v1/annotation/image/{id}
///   GET  /v1/cam/{name}
///   GET  /healthz
class Service {
 public:
  explicit Service(ServiceConfig config, Clock clock = system_clock_ms);
  ~Service();
  Service(const Service&) = delete;
  Service& operator=(const Service&) = delete;

  /// Binds the listen address and returns the bound port.
  int bind();
  /// Serves until stop() is called. Requires bind().
  void run();
  void stop();

  bool model_loaded() const;
  const ServiceConfig& config() const { return config_; }

 private:
  struct Impl;
  ServiceConfig config_;
  std::unique_ptr<Impl> impl_;
};

}  // namespace fundusq::service
