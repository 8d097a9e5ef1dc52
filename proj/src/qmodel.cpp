#include "fundusq/qmodel.hpp"

#include <chrono>
#include <cmath>
#include <cstring>
#include <ctime>
#include <fstream>

#include <fmt/format.h>
#include <openssl/evp.h>

#include "fundusq/errors.hpp"
#include "fundusq/random.hpp"

namespace fundusq::qmodel {

std::string to_string(Backbone b) {
  return b == Backbone::inception_v3_like ? "inception_v3_like" : "small_cnn_test";
}
std::string to_string(Head h) { return h == Head::classify3 ? "classify3" : "regress1"; }
std::string to_string(PretrainedInit p) {
  switch (p) {
    case PretrainedInit::random: return "random";
    case PretrainedInit::imagenet: return "imagenet";
    case PretrainedInit::checkpoint: return "checkpoint";
  }
  return {};
}
std::string to_string(Stage s) {
  switch (s) {
    case Stage::pretrain: return "pretrain";
    case Stage::regression: return "regression";
    case Stage::student: return "student";
  }
  return {};
}
Stage parse_stage(const std::string& s) {
  if (s == "pretrain") return Stage::pretrain;
  if (s == "regression") return Stage::regression;
  if (s == "student") return Stage::student;
  throw ValidationError("unknown stage '" + s + "'");
}

namespace {

constexpr int kInceptionMinInput = 75;
constexpr int kSmallMinInput = 8;

}  // namespace

void ModelConfig::validate() const {
  const int min_input = backbone == Backbone::inception_v3_like ? kInceptionMinInput : kSmallMinInput;
  if (input_size < min_input) {
    throw UnsupportedConfig(fmt::format("{} needs input_size >= {}, got {}", to_string(backbone), min_input, input_size));
  }
  if (head_hidden < 1) throw UnsupportedConfig("head_hidden must be >= 1");
  if (freeze_depth < 0) throw UnsupportedConfig("freeze_depth must be >= 0");
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"backbone", to_string(c.backbone)},
                     {"input_size", c.input_size},
                     {"head", to_string(c.head)},
                     {"pretrained_init", to_string(c.pretrained_init)},
                     {"init_weights", c.init_weights},
                     {"head_hidden", c.head_hidden},
                     {"freeze_depth", c.freeze_depth},
                     {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  if (!j.is_object()) throw ValidationError("model config must be an object");
  ModelConfig out;
  for (const auto& [key, v] : j.items()) {
    if (key == "backbone") {
      const auto s = v.get<std::string>();
      if (s == "inception_v3_like") out.backbone = Backbone::inception_v3_like;
      else if (s == "small_cnn_test") out.backbone = Backbone::small_cnn_test;
      else throw UnsupportedConfig("unknown backbone '" + s + "'");
    } else if (key == "input_size") {
      out.input_size = v.get<int>();
    } else if (key == "head") {
      const auto s = v.get<std::string>();
      if (s == "classify3") out.head = Head::classify3;
      else if (s == "regress1") out.head = Head::regress1;
      else throw UnsupportedConfig("unknown head '" + s + "'");
    } else if (key == "pretrained_init") {
      const auto s = v.get<std::string>();
      if (s == "random") out.pretrained_init = PretrainedInit::random;
      else if (s == "imagenet") out.pretrained_init = PretrainedInit::imagenet;
      else if (s == "checkpoint") out.pretrained_init = PretrainedInit::checkpoint;
      else throw UnsupportedConfig("unknown pretrained_init '" + s + "'");
    } else if (key == "init_weights") {
      out.init_weights = v.get<std::string>();
    } else if (key == "head_hidden") {
      out.head_hidden = v.get<int>();
    } else if (key == "freeze_depth") {
      out.freeze_depth = v.get<int>();
    } else if (key == "seed") {
      out.seed = v.get<std::uint64_t>();
    } else {
      throw ValidationError("unknown model config key '" + key + "'");
    }
  }
  c = out;
}

// Architecture ----------------------------------------------------------------------

namespace {

using nn::Conv2d;
using nn::Sequential;

// conv (no bias) -> batch norm -> ReLU
Sequential basic_conv(const std::string& name, int in, int out, int kh, int kw, int sh = 1, int sw = 1,
                      int ph = 0, int pw = 0) {
  Sequential s(name);
  s.emplace<Conv2d>("conv", Conv2d::Options{in, out, kh, kw, sh, sw, ph, pw, false});
  s.emplace<nn::BatchNorm2d>("bn", out, 1e-3f);
  s.emplace<nn::ReLU>("relu");
  return s;
}

Sequential branch(const std::string& name) { return Sequential(name); }

std::unique_ptr<nn::Concat> inception_a(const std::string& name, int in, int pool_features) {
  auto block = std::make_unique<nn::Concat>(name);
  block->add_branch(std::move(branch("branch1x1").add(std::make_unique<Sequential>(basic_conv("c1", in, 64, 1, 1)))));
  {
    auto b = branch("branch5x5");
    b.add(std::make_unique<Sequential>(basic_conv("c1", in, 48, 1, 1)));
    b.add(std::make_unique<Sequential>(basic_conv("c2", 48, 64, 5, 5, 1, 1, 2, 2)));
    block->add_branch(std::move(b));
  }
  {
    auto b = branch("branch3x3dbl");
    b.add(std::make_unique<Sequential>(basic_conv("c1", in, 64, 1, 1)));
    b.add(std::make_unique<Sequential>(basic_conv("c2", 64, 96, 3, 3, 1, 1, 1, 1)));
    b.add(std::make_unique<Sequential>(basic_conv("c3", 96, 96, 3, 3, 1, 1, 1, 1)));
    block->add_branch(std::move(b));
  }
  {
    auto b = branch("branch_pool");
    b.emplace<nn::AvgPool2d>("pool", nn::PoolOptions{3, 1, 1});
    b.add(std::make_unique<Sequential>(basic_conv("c1", in, pool_features, 1, 1)));
    block->add_branch(std::move(b));
  }
  return block;
}

std::unique_ptr<nn::Concat> inception_b(const std::string& name, int in) {
  auto block = std::make_unique<nn::Concat>(name);
  block->add_branch(std::move(branch("branch3x3").add(std::make_unique<Sequential>(basic_conv("c1", in, 384, 3, 3, 2, 2)))));
  {
    auto b = branch("branch3x3dbl");
    b.add(std::make_unique<Sequential>(basic_conv("c1", in, 64, 1, 1)));
    b.add(std::make_unique<Sequential>(basic_conv("c2", 64, 96, 3, 3, 1, 1, 1, 1)));
    b.add(std::make_unique<Sequential>(basic_conv("c3", 96, 96, 3, 3, 2, 2)));
    block->add_branch(std::move(b));
  }
  block->add_branch(std::move(branch("branch_pool").emplace<nn::MaxPool2d>("pool", nn::PoolOptions{3, 2, 0})));
  return block;
}

std::unique_ptr<nn::Concat> inception_c(const std::string& name, int in, int c7) {
  auto block = std::make_unique<nn::Concat>(name);
  block->add_branch(std::move(branch("branch1x1").add(std::make_unique<Sequential>(basic_conv("c1", in, 192, 1, 1)))));
  {
    auto b = branch("branch7x7");
    b.add(std::make_unique<Sequential>(basic_conv("c1", in, c7, 1, 1)));
    b.add(std::make_unique<Sequential>(basic_conv("c2", c7, c7, 1, 7, 1, 1, 0, 3)));
    b.add(std::make_unique<Sequential>(basic_conv("c3", c7, 192, 7, 1, 1, 1, 3, 0)));
    block->add_branch(std::move(b));
  }
  {
    auto b = branch("branch7x7dbl");
    b.add(std::make_unique<Sequential>(basic_conv("c1", in, c7, 1, 1)));
    b.add(std::make_unique<Sequential>(basic_conv("c2", c7, c7, 7, 1, 1, 1, 3, 0)));
    b.add(std::make_unique<Sequential>(basic_conv("c3", c7, c7, 1, 7, 1, 1, 0, 3)));
    b.add(std::make_unique<Sequential>(basic_conv("c4", c7, c7, 7, 1, 1, 1, 3, 0)));
    b.add(std::make_unique<Sequential>(basic_conv("c5", c7, 192, 1, 7, 1, 1, 0, 3)));
    block->add_branch(std::move(b));
  }
  {
    auto b = branch("branch_pool");
    b.emplace<nn::AvgPool2d>("pool", nn::PoolOptions{3, 1, 1});
    b.add(std::make_unique<Sequential>(basic_conv("c1", in, 192, 1, 1)));
    block->add_branch(std::move(b));
  }
  return block;
}

std::unique_ptr<nn::Concat> inception_d(const std::string& name, int in) {
  auto block = std::make_unique<nn::Concat>(name);
  {
    auto b = branch("branch3x3");
    b.add(std::make_unique<Sequential>(basic_conv("c1", in, 192, 1, 1)));
    b.add(std::make_unique<Sequential>(basic_conv("c2", 192, 320, 3, 3, 2, 2)));
    block->add_branch(std::move(b));
  }
  {
    auto b = branch("branch7x7x3");
    b.add(std::make_unique<Sequential>(basic_conv("c1", in, 192, 1, 1)));
    b.add(std::make_unique<Sequential>(basic_conv("c2", 192, 192, 1, 7, 1, 1, 0, 3)));
    b.add(std::make_unique<Sequential>(basic_conv("c3", 192, 192, 7, 1, 1, 1, 3, 0)));
    b.add(std::make_unique<Sequential>(basic_conv("c4", 192, 192, 3, 3, 2, 2)));
    block->add_branch(std::move(b));
  }
  block->add_branch(std::move(branch("branch_pool").emplace<nn::MaxPool2d>("pool", nn::PoolOptions{3, 2, 0})));
  return block;
}

// 1x3 and 3x1 convolutions applied in parallel to the same input.
std::unique_ptr<nn::Concat> split_1x3_3x1(const std::string& name, int in, int out) {
  auto block = std::make_unique<nn::Concat>(name);
  block->add_branch(std::move(branch("a").add(std::make_unique<Sequential>(basic_conv("c", in, out, 1, 3, 1, 1, 0, 1)))));
  block->add_branch(std::move(branch("b").add(std::make_unique<Sequential>(basic_conv("c", in, out, 3, 1, 1, 1, 1, 0)))));
  return block;
}

std::unique_ptr<nn::Concat> inception_e(const std::string& name, int in) {
  auto block = std::make_unique<nn::Concat>(name);
  block->add_branch(std::move(branch("branch1x1").add(std::make_unique<Sequential>(basic_conv("c1", in, 320, 1, 1)))));
  {
    auto b = branch("branch3x3");
    b.add(std::make_unique<Sequential>(basic_conv("c1", in, 384, 1, 1)));
    b.add(split_1x3_3x1("split", 384, 384));
    block->add_branch(std::move(b));
  }
  {
    auto b = branch("branch3x3dbl");
    b.add(std::make_unique<Sequential>(basic_conv("c1", in, 448, 1, 1)));
    b.add(std::make_unique<Sequential>(basic_conv("c2", 448, 384, 3, 3, 1, 1, 1, 1)));
    b.add(split_1x3_3x1("split", 384, 384));
    block->add_branch(std::move(b));
  }
  {
    auto b = branch("branch_pool");
    b.emplace<nn::AvgPool2d>("pool", nn::PoolOptions{3, 1, 1});
    b.add(std::make_unique<Sequential>(basic_conv("c1", in, 192, 1, 1)));
    block->add_branch(std::move(b));
  }
  return block;
}

}  // namespace

nn::Sequential make_backbone(Backbone backbone, int input_size) {
  (void)input_size;
  Sequential s("backbone");
  if (backbone == Backbone::small_cnn_test) {
    s.emplace<Conv2d>("conv1", Conv2d::Options{3, 16, 3, 3, 1, 1, 1, 1, true});
    s.emplace<nn::ReLU>("relu1");
    s.emplace<nn::MaxPool2d>("pool1", nn::PoolOptions{2, 2, 0});
    s.emplace<Conv2d>("conv2", Conv2d::Options{16, 32, 3, 3, 1, 1, 1, 1, true});
    s.emplace<nn::ReLU>("relu2");
    s.emplace<nn::MaxPool2d>("pool2", nn::PoolOptions{2, 2, 0});
    s.emplace<Conv2d>("conv3", Conv2d::Options{32, 64, 3, 3, 1, 1, 1, 1, true});
    s.emplace<nn::ReLU>("relu3");
    s.emplace<nn::GlobalAvgPool>("gap");
    return s;
  }
  // Inception-v3 feature extractor (no auxiliary classifier).
  s.add(std::make_unique<Sequential>(basic_conv("conv1a", 3, 32, 3, 3, 2, 2)));
  s.add(std::make_unique<Sequential>(basic_conv("conv2a", 32, 32, 3, 3)));
  s.add(std::make_unique<Sequential>(basic_conv("conv2b", 32, 64, 3, 3, 1, 1, 1, 1)));
  s.emplace<nn::MaxPool2d>("pool1", nn::PoolOptions{3, 2, 0});
  s.add(std::make_unique<Sequential>(basic_conv("conv3b", 64, 80, 1, 1)));
  s.add(std::make_unique<Sequential>(basic_conv("conv4a", 80, 192, 3, 3)));
  s.emplace<nn::MaxPool2d>("pool2", nn::PoolOptions{3, 2, 0});
  s.add(inception_a("mixed_5b", 192, 32));
  s.add(inception_a("mixed_5c", 256, 64));
  s.add(inception_a("mixed_5d", 288, 64));
  s.add(inception_b("mixed_6a", 288));
  s.add(inception_c("mixed_6b", 768, 128));
  s.add(inception_c("mixed_6c", 768, 160));
  s.add(inception_c("mixed_6d", 768, 160));
  s.add(inception_c("mixed_6e", 768, 192));
  s.add(inception_d("mixed_7a", 768));
  s.add(inception_e("mixed_7b", 1280));
  s.add(inception_e("mixed_7c", 2048));
  s.emplace<nn::GlobalAvgPool>("gap");
  return s;
}

nn::Sequential make_head(Head head, int features, int hidden) {
  Sequential s("head");
  if (head == Head::classify3) {
    s.emplace<nn::Dense>("fc", features, 3);
  } else {
    s.emplace<nn::Dense>("fc1", features, hidden);
    s.emplace<nn::ReLU>("relu");
    s.emplace<nn::Dense>("out", hidden, 1);
  }
  return s;
}

namespace {

constexpr std::uint64_t kBackboneSalt = 0xB0B0;
constexpr std::uint64_t kHeadSalt = 0x4EAD;
// Regression outputs start at the middle of the 1-10 scale.
constexpr float kRegressionBiasInit = 5.5f;

void init_head(nn::Sequential& head, Head kind, std::uint64_t seed) {
  nn::init_he_uniform(head, mix_seed(seed, kHeadSalt));
  if (kind == Head::regress1) {
    auto& out = dynamic_cast<nn::Dense&>(head.at(head.size() - 1));
    out.bias().value[0] = kRegressionBiasInit;
  }
}

}  // namespace

QualityNet::QualityNet(ModelConfig config, imaging::PreprocessConfig preprocess, nn::Sequential backbone,
                       nn::Sequential head)
    : config_(std::move(config)),
      preprocess_(preprocess),
      backbone_(std::move(backbone)),
      head_(std::move(head)) {}

int QualityNet::feature_width() const {
  return backbone_.output_shape({1, 3, config_.input_size, config_.input_size}).c;
}

int QualityNet::output_width() const {
  return head_.output_shape({1, feature_width(), 1, 1}).c;
}

nn::Tensor QualityNet::to_batch(std::span<const imaging::ImageTensor> images) const {
  const int s = config_.input_size;
  nn::Tensor batch({static_cast<int>(images.size()), 3, s, s});
  for (std::size_t i = 0; i < images.size(); ++i) {
    const auto& img = images[i];
    if (!img.normalized()) {
      throw ShapeMismatch(fmt::format("input {} is not normalized; run preprocess first", i));
    }
    if (img.height() != s || img.width() != s) {
      throw ShapeMismatch(fmt::format("input {} is {}x{}, model expects {}x{}", i, img.height(), img.width(), s, s));
    }
    float* dst = batch.sample(static_cast<int>(i));
    for (int c = 0; c < 3; ++c) {
      for (int y = 0; y < s; ++y) {
        for (int x = 0; x < s; ++x) dst[(c * s + y) * s + x] = img.at(y, x, c);
      }
    }
  }
  return batch;
}

nn::Tensor QualityNet::infer(const nn::Tensor& batch) const { return head_.infer(backbone_.infer(batch)); }

nn::Tensor QualityNet::infer_features(const nn::Tensor& batch) const { return backbone_.infer(batch); }

nn::Tensor QualityNet::forward(const nn::Tensor& batch, nn::Mode mode, nn::Taps* backbone_taps) {
  return head_.forward(backbone_.forward(batch, mode, backbone_taps), mode);
}

nn::Tensor QualityNet::backward(const nn::Tensor& grad_out, nn::Taps* backbone_taps) {
  return backbone_.backward(head_.backward(grad_out), backbone_taps);
}

std::vector<nn::StateRef> QualityNet::state() {
  std::vector<nn::StateRef> out;
  backbone_.collect_state("", out);
  head_.collect_state("", out);
  return out;
}

std::vector<nn::Parameter*> QualityNet::trainable_parameters() {
  std::vector<nn::Parameter*> out;
  for (auto& ref : state()) {
    if (ref.param && ref.param->trainable) out.push_back(ref.param);
  }
  return out;
}

void QualityNet::apply_freeze() {
  for (std::size_t i = 0; i < backbone_.size(); ++i) {
    std::vector<nn::StateRef> refs;
    backbone_.at(i).collect_state("", refs);
    const bool frozen = static_cast<int>(i) < config_.freeze_depth;
    for (auto& r : refs) {
      if (r.param) r.param->trainable = !frozen;
    }
  }
}

void QualityNet::clear_cache() {
  backbone_.clear_cache();
  head_.clear_cache();
}

std::string QualityNet::last_feature_layer() const {
  const long gap = backbone_.index_of("gap");
  if (gap <= 0) throw UnknownLayer("backbone has no feature layer before global pooling");
  return backbone_.at(static_cast<std::size_t>(gap - 1)).name();
}

QualityNet build_model(const ModelConfig& config, const imaging::PreprocessConfig& preprocess) {
  config.validate();
  preprocess.validate();
  if (preprocess.target_size != config.input_size) {
    throw UnsupportedConfig(fmt::format("model input_size {} differs from preprocess target_size {}",
                                        config.input_size, preprocess.target_size));
  }
  auto backbone = make_backbone(config.backbone, config.input_size);
  const int features = backbone.output_shape({1, 3, config.input_size, config.input_size}).c;
  auto head = make_head(config.head, features, config.head_hidden);
  nn::init_he_uniform(backbone, mix_seed(config.seed, kBackboneSalt));
  init_head(head, config.head, config.seed);
  QualityNet model(config, preprocess, std::move(backbone), std::move(head));

  if (config.pretrained_init != PretrainedInit::random) {
    if (config.init_weights.empty()) {
      throw UnsupportedConfig(fmt::format(
          "pretrained_init={} needs init_weights pointing at a checkpoint; no ImageNet weights are bundled",
          to_string(config.pretrained_init)));
    }
    auto source = load_checkpoint(config.init_weights);
    if (source.model.config().backbone != config.backbone) {
      throw UnsupportedConfig("init_weights checkpoint has a different backbone");
    }
    copy_matching_state(model, source.model, "backbone.");
  }
  model.apply_freeze();
  return model;
}

QualityNet swap_head_regression(QualityNet model) {
  if (model.config().head != Head::classify3) {
    throw WrongHead("swap_head_regression needs a classify3 model, got " + to_string(model.config().head));
  }
  ModelConfig cfg = model.config();
  cfg.head = Head::regress1;
  auto head = make_head(Head::regress1, model.feature_width(), cfg.head_hidden);
  init_head(head, Head::regress1, cfg.seed);
  QualityNet swapped(cfg, model.preprocess(), std::move(model.backbone()), std::move(head));
  swapped.apply_freeze();
  return swapped;
}

std::vector<double> predict_scores(const QualityNet& model, std::span<const imaging::ImageTensor> batch) {
  if (model.config().head != Head::regress1) {
    throw WrongHead("predict_scores needs a regress1 head");
  }
  std::vector<double> out;
  out.reserve(batch.size());
  constexpr std::size_t kChunk = 32;
  for (std::size_t start = 0; start < batch.size(); start += kChunk) {
    const auto part = batch.subspan(start, std::min(kChunk, batch.size() - start));
    const auto y = model.infer(model.to_batch(part));
    for (float v : y.data) {
      if (!std::isfinite(v)) throw ShapeMismatch("model produced a non-finite score");
      out.push_back(v);
    }
  }
  return out;
}

// Checkpoints ----------------------------------------------------------------------------

namespace {

constexpr char kMagic[8] = {'F', 'Q', 'C', 'K', 'P', 'T', '0', '1'};
constexpr int kFormatVersion = 1;

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

std::uint64_t get_u64(const std::string& in, std::size_t pos) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[pos + i])) << (8 * i);
  return v;
}

void append_floats_le(std::string& out, const std::vector<float>& values) {
  for (float f : values) {
    std::uint32_t bits;
    std::memcpy(&bits, &f, 4);
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xFF));
  }
}

}  // namespace

std::string sha256_hex(std::span<const std::uint8_t> bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1) {
    throw IoError("SHA-256 computation failed");
  }
  std::string hex;
  for (unsigned int i = 0; i < len; ++i) hex += fmt::format("{:02x}", digest[i]);
  return hex;
}

std::string utc_now_iso8601() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

std::string weights_hash(QualityNet& model) {
  std::string blob;
  for (auto& ref : model.state()) append_floats_le(blob, *ref.values);
  return sha256_hex({reinterpret_cast<const std::uint8_t*>(blob.data()), blob.size()});
}

std::string save_checkpoint(QualityNet& model, const CheckpointMeta& meta, const std::filesystem::path& path) {
  std::string blob;
  nlohmann::json index = nlohmann::json::array();
  for (auto& ref : model.state()) {
    index.push_back({{"name", ref.name}, {"count", ref.values->size()}});
    append_floats_le(blob, *ref.values);
  }
  const std::string hash =
      sha256_hex({reinterpret_cast<const std::uint8_t*>(blob.data()), blob.size()});
  nlohmann::json header{{"format_version", kFormatVersion},
                        {"config", model.config()},
                        {"preprocess", model.preprocess()},
                        {"stage", to_string(meta.stage)},
                        {"metrics_snapshot", meta.metrics_snapshot},
                        {"created", meta.created.empty() ? utc_now_iso8601() : meta.created},
                        {"tensors", index},
                        {"weights_bytes", blob.size()},
                        {"weights_sha256", hash}};
  const std::string header_text = header.dump();
  std::string out(kMagic, kMagic + 8);
  put_u64(out, header_text.size());
  out += header_text;
  out += blob;

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot write checkpoint '" + tmp.string() + "'");
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw IoError("write failed for '" + tmp.string() + "'");
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move checkpoint into place: " + ec.message());
  return hash;
}

ModelCheckpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open checkpoint '" + path.string() + "'");
  const std::string data((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  if (data.size() < 16 || std::memcmp(data.data(), kMagic, 8) != 0) {
    throw CorruptCheckpoint("'" + path.string() + "' is not a checkpoint or is truncated");
  }
  const std::uint64_t header_len = get_u64(data, 8);
  if (header_len > data.size() - 16) throw CorruptCheckpoint("truncated checkpoint header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(data.substr(16, header_len));
  } catch (const nlohmann::json::exception& e) {
    throw CorruptCheckpoint(std::string("malformed checkpoint header: ") + e.what());
  }
  const std::size_t blob_start = 16 + header_len;
  const std::string_view blob(data.data() + blob_start, data.size() - blob_start);

  try {
    if (header.at("format_version").get<int>() != kFormatVersion) {
      throw CorruptCheckpoint("unsupported checkpoint format version");
    }
    if (blob.size() != header.at("weights_bytes").get<std::size_t>()) {
      throw CorruptCheckpoint(fmt::format("weights blob is {} bytes, header says {}", blob.size(),
                                          header.at("weights_bytes").get<std::size_t>()));
    }
    const std::string hash = sha256_hex({reinterpret_cast<const std::uint8_t*>(blob.data()), blob.size()});
    if (hash != header.at("weights_sha256").get<std::string>()) {
      throw CorruptCheckpoint("weights hash mismatch");
    }
    ModelConfig cfg = header.at("config").get<ModelConfig>();
    // Weights come from the file, not from any init source.
    cfg.pretrained_init = PretrainedInit::random;
    const auto pre = header.at("preprocess").get<imaging::PreprocessConfig>();
    QualityNet model = build_model(cfg, pre);
    ModelConfig stored = header.at("config").get<ModelConfig>();

    auto state = model.state();
    const auto& index = header.at("tensors");
    if (index.size() != state.size()) throw CorruptCheckpoint("tensor count does not match the architecture");
    std::size_t offset = 0;
    for (std::size_t i = 0; i < state.size(); ++i) {
      const auto name = index[i].at("name").get<std::string>();
      const auto count = index[i].at("count").get<std::size_t>();
      if (name != state[i].name || count != state[i].values->size()) {
        throw CorruptCheckpoint("tensor '" + name + "' does not match the architecture");
      }
      for (std::size_t k = 0; k < count; ++k) {
        std::uint32_t bits = 0;
        for (int b = 0; b < 4; ++b) {
          bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(blob[offset + 4 * k + b])) << (8 * b);
        }
        std::memcpy(&(*state[i].values)[k], &bits, 4);
      }
      offset += 4 * count;
    }
    CheckpointMeta meta;
    meta.stage = parse_stage(header.at("stage").get<std::string>());
    meta.metrics_snapshot = header.value("metrics_snapshot", nlohmann::json());
    meta.created = header.value("created", "");
    QualityNet restored(stored, pre, std::move(model.backbone()), std::move(model.head()));
    restored.apply_freeze();
    return ModelCheckpoint{std::move(restored), meta, hash};
  } catch (const CorruptCheckpoint&) {
    throw;
  } catch (const nlohmann::json::exception& e) {
    throw CorruptCheckpoint(std::string("malformed checkpoint header: ") + e.what());
  } catch (const ValidationError& e) {
    throw CorruptCheckpoint(std::string("invalid checkpoint header: ") + e.what());
  } catch (const UnsupportedConfig& e) {
    throw CorruptCheckpoint(std::string("invalid checkpoint config: ") + e.what());
  }
}

std::size_t copy_matching_state(QualityNet& target, QualityNet& source, const std::string& name_prefix) {
  auto src = source.state();
  std::size_t copied = 0;
  for (auto& t : target.state()) {
    if (t.name.rfind(name_prefix, 0) != 0) continue;
    for (auto& s : src) {
      if (s.name == t.name && s.values->size() == t.values->size()) {
        *t.values = *s.values;
        ++copied;
        break;
      }
    }
  }
  return copied;
}

}  // namespace fundusq::qmodel
