// ONNX export for QualityNet. The protobuf wire format is written directly;
// only the handful of ModelProto fields needed for a static inference graph
// are emitted.

#include <cstring>
#include <fstream>

#include <fmt/format.h>

#include "fundusq/errors.hpp"
#include "fundusq/qmodel.hpp"

namespace fundusq::qmodel {

namespace {

class ProtoWriter {
 public:
  void varint(std::uint64_t v) {
    while (v >= 0x80) {
      buf_.push_back(static_cast<char>((v & 0x7F) | 0x80));
      v >>= 7;
    }
    buf_.push_back(static_cast<char>(v));
  }
  void tag(int field, int wire) { varint((static_cast<std::uint64_t>(field) << 3) | wire); }
  void int_field(int field, std::int64_t v) {
    tag(field, 0);
    varint(static_cast<std::uint64_t>(v));
  }
  void float_field(int field, float v) {
    tag(field, 5);
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<char>((bits >> (8 * i)) & 0xFF));
  }
  void bytes_field(int field, std::string_view bytes) {
    tag(field, 2);
    varint(bytes.size());
    buf_.append(bytes);
  }
  void message(int field, const ProtoWriter& m) { bytes_field(field, m.buf_); }
  const std::string& str() const { return buf_; }

 private:
  std::string buf_;
};

// AttributeProto.type values
constexpr int kAttrFloat = 1;
constexpr int kAttrInt = 2;
constexpr int kAttrInts = 7;
constexpr int kTensorFloat = 1;

struct Attr {
  std::string name;
  int type;
  float f = 0.0f;
  std::int64_t i = 0;
  std::vector<std::int64_t> ints;
};

Attr ints_attr(std::string name, std::vector<std::int64_t> v) { return {std::move(name), kAttrInts, 0, 0, std::move(v)}; }
Attr int_attr(std::string name, std::int64_t v) { return {std::move(name), kAttrInt, 0, v, {}}; }
Attr float_attr(std::string name, float v) { return {std::move(name), kAttrFloat, v, 0, {}}; }

class GraphBuilder {
 public:
  std::string node(const std::string& op, std::vector<std::string> inputs, const std::vector<Attr>& attrs = {}) {
    const std::string out = fmt::format("t{}", counter_++);
    ProtoWriter n;
    for (const auto& in : inputs) n.bytes_field(1, in);
    n.bytes_field(2, out);
    n.bytes_field(3, fmt::format("{}_{}", op, counter_));
    n.bytes_field(4, op);
    for (const auto& a : attrs) {
      ProtoWriter pa;
      pa.bytes_field(1, a.name);
      if (a.type == kAttrFloat) pa.float_field(2, a.f);
      if (a.type == kAttrInt) pa.int_field(3, a.i);
      if (a.type == kAttrInts) {
        for (auto v : a.ints) pa.int_field(8, v);
      }
      pa.int_field(20, a.type);
      n.message(5, pa);
    }
    graph_.message(1, n);
    return out;
  }

  std::string initializer(const std::string& name, const std::vector<std::int64_t>& dims, const std::vector<float>& values) {
    ProtoWriter t;
    for (auto d : dims) t.int_field(1, d);
    t.int_field(2, kTensorFloat);
    t.bytes_field(8, name);
    std::string raw(values.size() * 4, '\0');
    for (std::size_t k = 0; k < values.size(); ++k) {
      std::uint32_t bits;
      std::memcpy(&bits, &values[k], 4);
      for (int b = 0; b < 4; ++b) raw[4 * k + b] = static_cast<char>((bits >> (8 * b)) & 0xFF);
    }
    t.bytes_field(9, raw);
    initializers_.message(5, t);
    return name;
  }

  static ProtoWriter value_info(const std::string& name, const std::vector<std::int64_t>& dims, bool dynamic_batch) {
    ProtoWriter shape;
    for (std::size_t i = 0; i < dims.size(); ++i) {
      ProtoWriter dim;
      if (i == 0 && dynamic_batch) dim.bytes_field(2, "N");
      else dim.int_field(1, dims[i]);
      shape.message(1, dim);
    }
    ProtoWriter tensor_type;
    tensor_type.int_field(1, kTensorFloat);
    tensor_type.message(2, shape);
    ProtoWriter type;
    type.message(1, tensor_type);
    ProtoWriter vi;
    vi.bytes_field(1, name);
    vi.message(2, type);
    return vi;
  }

  std::string finish(const std::string& input, const std::vector<std::int64_t>& in_dims, const std::string& output,
                     const std::string& output_name, std::int64_t out_width) {
    // Rename the last tensor through an Identity node.
    ProtoWriter n;
    n.bytes_field(1, output);
    n.bytes_field(2, output_name);
    n.bytes_field(3, "output_identity");
    n.bytes_field(4, "Identity");
    graph_.message(1, n);

    std::string graph_bytes = graph_.str();
    ProtoWriter name;
    name.bytes_field(2, "fundusq");
    graph_bytes += name.str();
    graph_bytes += initializers_.str();
    ProtoWriter io;
    io.message(11, value_info(input, in_dims, true));
    io.message(12, value_info(output_name, {in_dims[0], out_width}, true));
    graph_bytes += io.str();

    ProtoWriter model;
    model.int_field(1, 7);  // ir_version
    model.bytes_field(2, "fundusq");
    model.bytes_field(7, graph_bytes);
    ProtoWriter opset;
    opset.bytes_field(1, "");
    opset.int_field(2, 13);
    model.message(8, opset);
    return model.str();
  }

 private:
  ProtoWriter graph_;
  ProtoWriter initializers_;
  int counter_ = 0;
};

std::vector<std::int64_t> dims_of(const nn::Parameter& p) {
  return {p.dims.begin(), p.dims.end()};
}

std::string emit(GraphBuilder& g, nn::Layer& layer, const std::string& prefix, const std::string& x) {
  const std::string path = prefix + layer.name();
  if (auto* seq = dynamic_cast<nn::Sequential*>(&layer)) {
    std::string cur = x;
    const std::string p = seq->name().empty() ? prefix : path + ".";
    for (std::size_t i = 0; i < seq->size(); ++i) cur = emit(g, seq->at(i), p, cur);
    return cur;
  }
  if (auto* conv = dynamic_cast<nn::Conv2d*>(&layer)) {
    const auto& o = conv->options();
    std::vector<std::string> inputs{x, g.initializer(path + ".weight", dims_of(conv->weight()), conv->weight().value)};
    if (o.bias) inputs.push_back(g.initializer(path + ".bias", dims_of(conv->bias()), conv->bias().value));
    return g.node("Conv", inputs,
                  {ints_attr("kernel_shape", {o.kh, o.kw}), ints_attr("strides", {o.sh, o.sw}),
                   ints_attr("pads", {o.ph, o.pw, o.ph, o.pw})});
  }
  if (auto* bn = dynamic_cast<nn::BatchNorm2d*>(&layer)) {
    const std::int64_t c = static_cast<std::int64_t>(bn->gamma().size());
    return g.node("BatchNormalization",
                  {x, g.initializer(path + ".gamma", {c}, bn->gamma().value),
                   g.initializer(path + ".beta", {c}, bn->beta().value),
                   g.initializer(path + ".running_mean", {c}, bn->running_mean()),
                   g.initializer(path + ".running_var", {c}, bn->running_var())},
                  {float_attr("epsilon", bn->eps())});
  }
  if (dynamic_cast<nn::ReLU*>(&layer)) return g.node("Relu", {x});
  if (auto* mp = dynamic_cast<nn::MaxPool2d*>(&layer)) {
    const auto& o = mp->options();
    return g.node("MaxPool", {x},
                  {ints_attr("kernel_shape", {o.k, o.k}), ints_attr("strides", {o.stride, o.stride}),
                   ints_attr("pads", {o.pad, o.pad, o.pad, o.pad})});
  }
  if (auto* ap = dynamic_cast<nn::AvgPool2d*>(&layer)) {
    const auto& o = ap->options();
    return g.node("AveragePool", {x},
                  {ints_attr("kernel_shape", {o.k, o.k}), ints_attr("strides", {o.stride, o.stride}),
                   ints_attr("pads", {o.pad, o.pad, o.pad, o.pad}), int_attr("count_include_pad", 0)});
  }
  if (dynamic_cast<nn::GlobalAvgPool*>(&layer)) return g.node("GlobalAveragePool", {x});
  if (auto* fc = dynamic_cast<nn::Dense*>(&layer)) {
    const std::string flat = g.node("Flatten", {x}, {int_attr("axis", 1)});
    return g.node("Gemm",
                  {flat, g.initializer(path + ".weight", dims_of(fc->weight()), fc->weight().value),
                   g.initializer(path + ".bias", dims_of(fc->bias()), fc->bias().value)},
                  {int_attr("transB", 1)});
  }
  if (auto* cat = dynamic_cast<nn::Concat*>(&layer)) {
    std::vector<std::string> parts;
    std::size_t i = 0;
    for (const auto& b : cat->branches()) {
      auto branch = b;  // emit() needs mutable access; weights are only read
      const std::string bp = path + "." + (b.name().empty() ? fmt::format("b{}", i) : b.name()) + ".";
      std::string cur = x;
      for (std::size_t k = 0; k < branch.size(); ++k) cur = emit(g, branch.at(k), bp, cur);
      parts.push_back(cur);
      ++i;
    }
    return g.node("Concat", parts, {int_attr("axis", 1)});
  }
  throw UnsupportedConfig("no ONNX mapping for layer kind '" + layer.kind() + "'");
}

}  // namespace

void export_onnx(QualityNet& model, const std::filesystem::path& path) {
  GraphBuilder g;
  const std::string input = "input";
  std::string cur = emit(g, model.backbone(), "", input);
  cur = emit(g, model.head(), "", cur);
  const bool regress = model.config().head == Head::regress1;
  const std::int64_t s = model.config().input_size;
  const std::string bytes =
      g.finish(input, {1, 3, s, s}, cur, regress ? "score" : "logits", model.output_width());
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot write '" + path.string() + "'");
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw IoError("write failed for '" + path.string() + "'");
}

}  // namespace fundusq::qmodel
