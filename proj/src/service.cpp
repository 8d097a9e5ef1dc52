#include "fundusq/service.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdlib>
#include <fstream>
#include <map>
#include <set>

#include <fmt/format.h>
#include <httplib.h>
#include <spdlog/spdlog.h>

#include "fundusq/errors.hpp"
#include "fundusq/explain.hpp"
#include "fundusq/imaging.hpp"
#include "fundusq/metrics.hpp"
#include "fundusq/qmodel.hpp"

namespace fundusq::service {

void ServiceConfig::validate() const {
  if (!(threshold >= datasets::kMinScore && threshold <= datasets::kMaxScore)) {
    throw ConfigError("threshold must be in [1,10]");
  }
  if (lease_seconds < 1) throw ConfigError("lease_seconds must be >= 1");
  if (annotation_log.empty()) throw ConfigError("annotation_log must be set");
  const auto colon = listen.rfind(':');
  if (colon == std::string::npos || colon == 0) throw ConfigError("listen must be host:port");
  try {
    const int port = std::stoi(listen.substr(colon + 1));
    if (port < 0 || port > 65535) throw ConfigError("listen port out of range");
  } catch (const std::logic_error&) {
    throw ConfigError("listen port is not a number");
  }
}

void to_json(nlohmann::json& j, const ServiceConfig& c) {
  j = nlohmann::json{{"checkpoint", c.checkpoint},
                     {"scale", c.scale},
                     {"queue", c.queue},
                     {"annotation_log", c.annotation_log},
                     {"listen", c.listen},
                     {"threshold", c.threshold},
                     {"lease_seconds", c.lease_seconds},
                     {"cam_dir", c.cam_dir},
                     {"export_policy", scale::to_string(c.export_policy)}};
}

void from_json(const nlohmann::json& j, ServiceConfig& c) {
  if (!j.is_object()) throw ConfigError("service config must be an object");
  ServiceConfig out;
  try {
    for (const auto& [key, value] : j.items()) {
      if (key == "checkpoint") out.checkpoint = value.get<std::string>();
      else if (key == "scale") out.scale = value.get<std::string>();
      else if (key == "queue") out.queue = value.get<std::string>();
      else if (key == "annotation_log") out.annotation_log = value.get<std::string>();
      else if (key == "listen") out.listen = value.get<std::string>();
      else if (key == "threshold") out.threshold = value.get<double>();
      else if (key == "lease_seconds") out.lease_seconds = value.get<int>();
      else if (key == "cam_dir") out.cam_dir = value.get<std::string>();
      else if (key == "export_policy") out.export_policy = scale::parse_export_policy(value.get<std::string>());
      else throw ConfigError("unknown service config key '" + key + "'");
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad service config value: ") + e.what());
  }
  out.validate();
  c = out;
}

void apply_environment(ServiceConfig& c, const std::function<const char*(const char*)>& getenv) {
  const auto get = [&](const char* name) -> const char* { return getenv ? getenv(name) : std::getenv(name); };
  const auto set = [&](const char* name, std::string& field) {
    if (const char* v = get(name)) field = v;
  };
  set("FUNDUSQ_CHECKPOINT", c.checkpoint);
  set("FUNDUSQ_SCALE", c.scale);
  set("FUNDUSQ_QUEUE", c.queue);
  set("FUNDUSQ_LISTEN", c.listen);
  set("FUNDUSQ_ANNOTATION_LOG", c.annotation_log);
  set("FUNDUSQ_CAM_DIR", c.cam_dir);
  if (const char* v = get("FUNDUSQ_THRESHOLD")) {
    try {
      std::size_t used = 0;
      c.threshold = std::stod(v, &used);
      if (used != std::string(v).size()) throw std::invalid_argument(v);
    } catch (const std::logic_error&) {
      throw ConfigError(std::string("FUNDUSQ_THRESHOLD is not a number: ") + v);
    }
  }
}

// Annotation log -----------------------------------------------------------------

AnnotationLog::AnnotationLog(std::filesystem::path path) : path_(std::move(path)) {
  if (path_.has_parent_path()) std::filesystem::create_directories(path_.parent_path());
  std::string text;
  if (std::filesystem::exists(path_)) {
    std::ifstream f(path_, std::ios::binary);
    if (!f) throw IoError("cannot read annotation log '" + path_.string() + "'");
    text.assign(std::istreambuf_iterator<char>(f), {});
  }
  std::size_t pos = 0, line_no = 0, valid_end = 0;
  while (pos < text.size()) {
    const auto nl = text.find('\n', pos);
    ++line_no;
    if (nl == std::string::npos) {
      spdlog::warn("annotation log: discarding torn final line {}", line_no);
      break;
    }
    const std::string line = text.substr(pos, nl - pos);
    pos = nl + 1;
    if (!line.empty()) {
      try {
        records_.push_back(scale::annotation_from_json(nlohmann::json::parse(line)));
      } catch (const std::exception& e) {
        throw ParseError(fmt::format("annotation log '{}' line {}: {}", path_.string(), line_no, e.what()));
      }
    }
    valid_end = pos;
  }
  if (valid_end != text.size()) std::filesystem::resize_file(path_, valid_end);

  fd_ = ::open(path_.c_str(), O_WRONLY | O_APPEND | O_CREAT | O_CLOEXEC, 0644);
  if (fd_ < 0) throw IoError("cannot open annotation log '" + path_.string() + "' for append");
  ::fsync(fd_);
}

AnnotationLog::~AnnotationLog() {
  if (fd_ >= 0) ::close(fd_);
}

void AnnotationLog::append(const scale::AnnotationRecord& record) {
  const std::string line = scale::annotation_to_json(record).dump() + "\n";
  std::lock_guard lock(mutex_);
  std::size_t written = 0;
  while (written < line.size()) {
    const ssize_t n = ::write(fd_, line.data() + written, line.size() - written);
    if (n < 0) {
      if (errno == EINTR) continue;
      throw IoError("annotation log write failed");
    }
    written += static_cast<std::size_t>(n);
  }
  if (::fsync(fd_) != 0) throw IoError("annotation log fsync failed");
  records_.push_back(record);
}

std::vector<scale::AnnotationRecord> AnnotationLog::records() const {
  std::lock_guard lock(mutex_);
  return records_;
}

std::size_t AnnotationLog::size() const {
  std::lock_guard lock(mutex_);
  return records_.size();
}

std::int64_t system_clock_ms() {
  return std::chrono::duration_cast<std::chrono::milliseconds>(std::chrono::system_clock::now().time_since_epoch())
      .count();
}

// Service ------------------------------------------------------------------------

namespace {

void send_json(httplib::Response& res, int status, const nlohmann::json& body) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

void send_error(httplib::Response& res, int status, const std::string& code, const std::string& message,
                const nlohmann::json& details = nullptr) {
  nlohmann::json body{{"error", code}, {"message", message}};
  if (!details.is_null()) body["violations"] = details;
  send_json(res, status, body);
}

std::string content_type_for(const std::filesystem::path& p) {
  auto ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  if (ext == ".png") return "image/png";
  if (ext == ".jpg" || ext == ".jpeg") return "image/jpeg";
  if (ext == ".tif" || ext == ".tiff") return "image/tiff";
  return "application/octet-stream";
}

bool parse_flag(const std::string& v) { return v == "1" || v == "true" || v == "yes"; }

}  // namespace

struct Service::Impl {
  ServiceConfig config;
  Clock clock;
  httplib::Server server;
  int port = -1;

  std::optional<qmodel::ModelCheckpoint> model;
  std::optional<scale::ReferenceScale> reference;
  std::optional<datasets::DatasetManifest> queue;
  std::map<std::string, std::size_t> queue_index;
  std::unique_ptr<AnnotationLog> log;
  std::filesystem::path cam_dir;

  // Lease state and the set of annotated images share one lock.
  std::mutex lease_mutex;
  struct Lease {
    std::string grader;
    std::int64_t expires = 0;
  };
  std::map<std::string, Lease> leases;
  std::set<std::string> annotated;
  std::set<std::string> record_ids;
  std::atomic<std::uint64_t> counter{0};

  Impl(ServiceConfig c, Clock k) : config(std::move(c)), clock(std::move(k)) {
    if (!config.checkpoint.empty()) {
      model = qmodel::load_checkpoint(config.checkpoint);
      model->model.set_inference_only(true);
      spdlog::info("loaded checkpoint {} ({})", config.checkpoint, model->content_hash.substr(0, 12));
    }
    if (!config.scale.empty() && std::filesystem::exists(config.scale)) {
      reference = scale::load_scale(config.scale);
      const auto violations = scale::validate_scale(*reference);
      for (const auto& v : violations) spdlog::warn("reference scale: {}", v.message);
    }
    if (!config.queue.empty()) {
      queue = datasets::load_manifest(config.queue);
      for (std::size_t i = 0; i < queue->records.size(); ++i) queue_index[queue->records[i].id] = i;
    }
    log = std::make_unique<AnnotationLog>(config.annotation_log);
    for (const auto& r : log->records()) {
      annotated.insert(r.image_id);
      record_ids.insert(r.record_id);
    }
    cam_dir = config.cam_dir.empty() ? std::filesystem::absolute(config.annotation_log).parent_path() / "cams"
                                     : std::filesystem::path(config.cam_dir);
    routes();
  }

  void routes() {
    server.set_payload_max_length(64u << 20);
    server.set_exception_handler([](const httplib::Request&, httplib::Response& res, std::exception_ptr ep) {
      try {
        std::rethrow_exception(ep);
      } catch (const std::exception& e) {
        send_error(res, 500, "InternalError", e.what());
      }
    });
    server.Post("/v1/score", [this](const httplib::Request& req, httplib::Response& res) { score(req, res); });
    server.Get("/v1/reference-scale",
               [this](const httplib::Request& req, httplib::Response& res) { reference_scale(req, res); });
    server.Get("/v1/annotation/next", [this](const httplib::Request& req, httplib::Response& res) { next(req, res); });
    server.Post("/v1/annotation", [this](const httplib::Request& req, httplib::Response& res) { submit(req, res); });
    server.Get("/v1/annotation/export",
               [this](const httplib::Request& req, httplib::Response& res) { export_labels(req, res); });
    server.Get(R"(/v1/annotation/image/([^/]+))",
               [this](const httplib::Request& req, httplib::Response& res) { queue_image(req, res); });
    server.Get(R"(/v1/cam/([A-Za-z0-9_.-]+))",
               [this](const httplib::Request& req, httplib::Response& res) { cam(req, res); });
    server.Get("/healthz", [this](const httplib::Request&, httplib::Response& res) {
      send_json(res, 200,
                {{"status", "ok"},
                 {"model_loaded", model.has_value()},
                 {"model_version", model ? nlohmann::json(model->content_hash) : nlohmann::json(nullptr)},
                 {"scale_version", reference ? nlohmann::json(reference->version) : nlohmann::json(nullptr)},
                 {"queue_size", queue ? queue->records.size() : 0},
                 {"annotations", log->size()}});
    });
  }

  void score(const httplib::Request& req, httplib::Response& res) {
    if (!model) return send_error(res, 503, "ModelNotLoaded", "no checkpoint is loaded");
    double threshold = config.threshold;
    if (req.has_param("threshold")) {
      try {
        std::size_t used = 0;
        const auto text = req.get_param_value("threshold");
        threshold = std::stod(text, &used);
        if (used != text.size() || !std::isfinite(threshold)) throw std::invalid_argument(text);
      } catch (const std::logic_error&) {
        return send_error(res, 400, "BadRequest", "threshold is not a number");
      }
    }
    const bool want_cam = req.has_param("cam") && parse_flag(req.get_param_value("cam"));
    std::string bytes;
    if (req.has_file("image")) {
      bytes = req.get_file_value("image").content;
    } else if (!req.is_multipart_form_data() && !req.body.empty()) {
      bytes = req.body;
    } else {
      return send_error(res, 400, "BadRequest", "multipart field 'image' is required");
    }

    imaging::ImageTensor input;
    try {
      const auto raw = imaging::decode_image({reinterpret_cast<const std::uint8_t*>(bytes.data()), bytes.size()});
      input = imaging::preprocess(raw, model->model.preprocess());
    } catch (const AllBlackImage& e) {
      return send_error(res, 422, e.code(), e.what());
    } catch (const Error& e) {
      return send_error(res, 400, e.code(), e.what());
    }
    const double raw_score = qmodel::predict_scores(model->model, std::span(&input, 1))[0];
    const double reported = datasets::clamp_score(raw_score);
    const double scores[1] = {reported};
    const auto label = metrics::binarize(scores, threshold)[0];
    nlohmann::json body{{"score", reported},
                        {"label", datasets::to_string(label)},
                        {"threshold", threshold},
                        {"model_version", model->content_hash},
                        {"debug", {{"raw_score", raw_score}}}};
    if (want_cam) {
      const auto cam = explain::grad_cam(model->model, input);
      const auto key = qmodel::sha256_hex({reinterpret_cast<const std::uint8_t*>(bytes.data()), bytes.size()});
      const std::string name = key.substr(0, 16) + "-" + model->content_hash.substr(0, 8) + ".png";
      std::filesystem::create_directories(cam_dir);
      imaging::write_image(explain::overlay(cam, input, 0.5), cam_dir / name);
      body["cam_uri"] = "/v1/cam/" + name;
    }
    send_json(res, 200, body);
  }

  void reference_scale(const httplib::Request&, httplib::Response& res) {
    if (!reference) return send_error(res, 503, "ScaleNotConfigured", "no reference scale is configured");
    res.set_header("X-Scale-Version", reference->version);
    send_json(res, 200, scale::scale_to_json(*reference));
  }

  static std::string grader_of(const httplib::Request& req) {
    if (req.has_header("X-Grader-Id")) return req.get_header_value("X-Grader-Id");
    if (req.has_param("grader")) return req.get_param_value("grader");
    return {};
  }

  void next(const httplib::Request& req, httplib::Response& res) {
    const auto grader = grader_of(req);
    if (grader.empty()) return send_error(res, 400, "BadRequest", "X-Grader-Id header is required");
    if (!queue) return send_error(res, 503, "QueueNotConfigured", "no annotation queue is configured");
    const std::int64_t now = clock();
    std::lock_guard lock(lease_mutex);
    std::size_t remaining = 0;
    const datasets::FundusRecord* chosen = nullptr;
    const datasets::FundusRecord* own = nullptr;
    for (const auto& r : queue->records) {
      if (annotated.contains(r.id)) continue;
      ++remaining;
      const auto it = leases.find(r.id);
      const bool active = it != leases.end() && it->second.expires > now;
      if (active && it->second.grader == grader && !own) own = &r;
      if (!active && !chosen) chosen = &r;
    }
    if (own) chosen = own;
    if (!chosen) {
      res.status = 204;
      return;
    }
    leases[chosen->id] = {grader, now + static_cast<std::int64_t>(config.lease_seconds) * 1000};
    send_json(res, 200,
              {{"task_id", chosen->id},
               {"image_id", chosen->id},
               {"image_uri", "/v1/annotation/image/" + chosen->id},
               {"remaining", remaining},
               {"scale_version", reference ? reference->version : ""},
               {"lease_expires", scale::format_timestamp(leases[chosen->id].expires)}});
  }

  void submit(const httplib::Request& req, httplib::Response& res) {
    if (!reference) return send_error(res, 503, "ScaleNotConfigured", "no reference scale is configured");
    scale::AnnotationRecord rec;
    try {
      auto j = nlohmann::json::parse(req.body);
      if (j.is_object()) j.erase("task_id");
      rec = scale::annotation_from_json(j);
    } catch (const std::exception& e) {
      return send_error(res, 400, "BadRequest", e.what());
    }
    if (rec.grader_id.empty()) rec.grader_id = grader_of(req);
    if (rec.timestamp.empty()) rec.timestamp = scale::format_timestamp(clock());
    if (rec.scale_version.empty()) rec.scale_version = reference->version;
    if (rec.record_id.empty()) {
      rec.record_id = fmt::format("{}-{}-{}-{}", rec.image_id, rec.grader_id, clock(), counter.fetch_add(1));
    }
    if (!queue || !queue_index.contains(rec.image_id)) {
      return send_error(res, 409, "UnknownTask", "image '" + rec.image_id + "' is not in the annotation queue");
    }
    const auto violations = scale::validate_annotation(rec, *reference);
    if (!violations.empty()) {
      return send_error(res, 422, "ValidationError", violations.front().message, violations);
    }
    std::lock_guard lock(lease_mutex);
    if (record_ids.contains(rec.record_id)) {
      // Retried submission: acknowledged once already.
      return send_json(res, 200, {{"record_id", rec.record_id}, {"duplicate", true}});
    }
    log->append(rec);
    record_ids.insert(rec.record_id);
    annotated.insert(rec.image_id);
    leases.erase(rec.image_id);
    send_json(res, 201, scale::annotation_to_json(rec));
  }

  void export_labels(const httplib::Request&, httplib::Response& res) {
    scale::ExportOptions opt;
    opt.policy = config.export_policy;
    if (queue) {
      for (const auto& r : queue->records) opt.image_uris[r.id] = queue->resolve(r).string();
    }
    const auto manifest = scale::export_labels(log->records(), opt);
    res.status = 200;
    res.set_content(datasets::serialize_manifest(manifest), "application/x-ndjson");
  }

  void queue_image(const httplib::Request& req, httplib::Response& res) {
    const std::string id = req.matches[1];
    if (!queue || !queue_index.contains(id)) return send_error(res, 404, "NotFound", "unknown image '" + id + "'");
    const auto path = queue->resolve(queue->records[queue_index.at(id)]);
    std::ifstream f(path, std::ios::binary);
    if (!f) return send_error(res, 404, "NotFound", "image file missing");
    std::string bytes((std::istreambuf_iterator<char>(f)), {});
    res.set_content(std::move(bytes), content_type_for(path));
  }

  void cam(const httplib::Request& req, httplib::Response& res) {
    const auto path = cam_dir / std::string(req.matches[1]);
    std::ifstream f(path, std::ios::binary);
    if (!f) return send_error(res, 404, "NotFound", "unknown CAM artifact");
    std::string bytes((std::istreambuf_iterator<char>(f)), {});
    res.set_content(std::move(bytes), "image/png");
  }
};

Service::Service(ServiceConfig config, Clock clock) : config_(std::move(config)) {
  config_.validate();
  impl_ = std::make_unique<Impl>(config_, clock ? std::move(clock) : Clock(system_clock_ms));
}

Service::~Service() { stop(); }

int Service::bind() {
  const auto colon = config_.listen.rfind(':');
  const std::string host = config_.listen.substr(0, colon);
  const int port = std::stoi(config_.listen.substr(colon + 1));
  int bound = -1;
  if (port == 0) {
    bound = impl_->server.bind_to_any_port(host);
  } else if (impl_->server.bind_to_port(host, port)) {
    bound = port;
  }
  if (bound < 0) throw IoError("cannot bind " + config_.listen);
  impl_->port = bound;
  return bound;
}

void Service::run() {
  if (impl_->port < 0) throw Error("ServiceError", "bind() must be called before run()");
  impl_->server.listen_after_bind();
}

void Service::stop() {
  if (impl_ && impl_->server.is_running()) impl_->server.stop();
}

bool Service::model_loaded() const { return impl_->model.has_value(); }

}  // namespace fundusq::service
