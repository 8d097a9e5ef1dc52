#pragma once

// Minimal CPU layer library backing the quality network: NCHW float tensors,
// layers with explicit backward passes, Adam, and the two training losses.

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace fundusq::nn {

struct Shape {
  int n = 0, c = 0, h = 0, w = 0;

  std::size_t count() const { return static_cast<std::size_t>(n) * c * h * w; }
  std::size_t per_sample() const { return static_cast<std::size_t>(c) * h * w; }
  friend bool operator==(const Shape&, const Shape&) = default;
};

std::string to_string(const Shape& s);

struct Tensor {
  Shape shape;
  std::vector<float> data;

  Tensor() = default;
  explicit Tensor(Shape s, float fill = 0.0f) : shape(s), data(s.count(), fill) {}

  float* sample(int i) { return data.data() + i * shape.per_sample(); }
  const float* sample(int i) const { return data.data() + i * shape.per_sample(); }
  float& at(int n, int c, int y, int x) {
    return data[((static_cast<std::size_t>(n) * shape.c + c) * shape.h + y) * shape.w + x];
  }
  float at(int n, int c, int y, int x) const {
    return data[((static_cast<std::size_t>(n) * shape.c + c) * shape.h + y) * shape.w + x];
  }
};

enum class Mode { train, inference };

struct Parameter {
  std::vector<int> dims;
  std::vector<float> value;
  std::vector<float> grad;
  bool trainable = true;

  explicit Parameter(std::vector<int> d = {});
  std::size_t size() const { return value.size(); }
};

/// Named view on a piece of layer state: a parameter or a non-trainable
/// buffer such as batch-norm running statistics.
struct StateRef {
  std::string name;
  std::vector<float>* values;
  Parameter* param;  // null for buffers
};

class Layer {
 public:
  explicit Layer(std::string name) : name_(std::move(name)) {}
  virtual ~Layer() = default;

  const std::string& name() const { return name_; }
  virtual std::string kind() const = 0;
  virtual Shape output_shape(const Shape& in) const = 0;

  /// Pure forward pass with inference semantics. Safe to call concurrently.
  virtual Tensor infer(const Tensor& x) const = 0;
  /// Forward pass that caches what backward() needs.
  virtual Tensor forward(const Tensor& x, Mode mode) = 0;
  /// Consumes the gradient w.r.t. the output of the last forward(), adds
  /// parameter gradients, and returns the gradient w.r.t. its input.
  virtual Tensor backward(const Tensor& grad_out) = 0;

  virtual void collect_state(const std::string& prefix, std::vector<StateRef>& out) {
    (void)prefix;
    (void)out;
  }
  virtual std::unique_ptr<Layer> clone() const = 0;
  virtual void clear_cache() {}

 private:
  std::string name_;
};

using LayerPtr = std::unique_ptr<Layer>;

class Conv2d final : public Layer {
 public:
  struct Options {
    int in = 0, out = 0;
    int kh = 3, kw = 3;
    int sh = 1, sw = 1;
    int ph = 0, pw = 0;
    bool bias = true;
  };
  Conv2d(std::string name, Options o);

  std::string kind() const override { return "Conv"; }
  Shape output_shape(const Shape& in) const override;
  Tensor infer(const Tensor& x) const override;
  Tensor forward(const Tensor& x, Mode mode) override;
  Tensor backward(const Tensor& grad_out) override;
  void collect_state(const std::string& prefix, std::vector<StateRef>& out) override;
  LayerPtr clone() const override { return std::make_unique<Conv2d>(*this); }
  void clear_cache() override { input_ = {}; }

  const Options& options() const { return opt_; }
  Parameter& weight() { return weight_; }
  Parameter& bias() { return bias_; }
  const Parameter& weight() const { return weight_; }
  const Parameter& bias() const { return bias_; }

 private:
  Options opt_;
  Parameter weight_;  // [out, in, kh, kw]
  Parameter bias_;    // [out] (empty when disabled)
  Tensor input_;
};

class BatchNorm2d final : public Layer {
 public:
  BatchNorm2d(std::string name, int channels, float eps = 1e-3f, float momentum = 0.1f);

  std::string kind() const override { return "BatchNormalization"; }
  Shape output_shape(const Shape& in) const override { return in; }
  Tensor infer(const Tensor& x) const override;
  Tensor forward(const Tensor& x, Mode mode) override;
  Tensor backward(const Tensor& grad_out) override;
  void collect_state(const std::string& prefix, std::vector<StateRef>& out) override;
  LayerPtr clone() const override { return std::make_unique<BatchNorm2d>(*this); }
  void clear_cache() override { xhat_ = {}; }

  float eps() const { return eps_; }
  const Parameter& gamma() const { return gamma_; }
  const Parameter& beta() const { return beta_; }
  const std::vector<float>& running_mean() const { return running_mean_; }
  const std::vector<float>& running_var() const { return running_var_; }

 private:
  int channels_;
  float eps_, momentum_;
  Parameter gamma_, beta_;
  std::vector<float> running_mean_, running_var_;
  Tensor xhat_;
  std::vector<float> inv_std_;
  Mode mode_ = Mode::inference;
};

class ReLU final : public Layer {
 public:
  using Layer::Layer;
  std::string kind() const override { return "Relu"; }
  Shape output_shape(const Shape& in) const override { return in; }
  Tensor infer(const Tensor& x) const override;
  Tensor forward(const Tensor& x, Mode mode) override;
  Tensor backward(const Tensor& grad_out) override;
  LayerPtr clone() const override { return std::make_unique<ReLU>(*this); }
  void clear_cache() override { output_ = {}; }

 private:
  Tensor output_;
};

struct PoolOptions {
  int k = 3;
  int stride = 2;
  int pad = 0;
};

class MaxPool2d final : public Layer {
 public:
  MaxPool2d(std::string name, PoolOptions o) : Layer(std::move(name)), opt_(o) {}
  std::string kind() const override { return "MaxPool"; }
  Shape output_shape(const Shape& in) const override;
  Tensor infer(const Tensor& x) const override;
  Tensor forward(const Tensor& x, Mode mode) override;
  Tensor backward(const Tensor& grad_out) override;
  LayerPtr clone() const override { return std::make_unique<MaxPool2d>(*this); }
  void clear_cache() override { argmax_.clear(); }
  const PoolOptions& options() const { return opt_; }

 private:
  PoolOptions opt_;
  Shape in_shape_;
  std::vector<std::uint32_t> argmax_;
};

/// Average pooling; padded positions are excluded from the divisor.
class AvgPool2d final : public Layer {
 public:
  AvgPool2d(std::string name, PoolOptions o) : Layer(std::move(name)), opt_(o) {}
  std::string kind() const override { return "AveragePool"; }
  Shape output_shape(const Shape& in) const override;
  Tensor infer(const Tensor& x) const override;
  Tensor forward(const Tensor& x, Mode mode) override;
  Tensor backward(const Tensor& grad_out) override;
  LayerPtr clone() const override { return std::make_unique<AvgPool2d>(*this); }
  const PoolOptions& options() const { return opt_; }

 private:
  PoolOptions opt_;
  Shape in_shape_;
};

class GlobalAvgPool final : public Layer {
 public:
  using Layer::Layer;
  std::string kind() const override { return "GlobalAveragePool"; }
  Shape output_shape(const Shape& in) const override { return {in.n, in.c, 1, 1}; }
  Tensor infer(const Tensor& x) const override;
  Tensor forward(const Tensor& x, Mode mode) override;
  Tensor backward(const Tensor& grad_out) override;
  LayerPtr clone() const override { return std::make_unique<GlobalAvgPool>(*this); }

 private:
  Shape in_shape_;
};

/// Fully connected layer over the flattened per-sample features.
class Dense final : public Layer {
 public:
  Dense(std::string name, int in, int out);
  std::string kind() const override { return "Gemm"; }
  Shape output_shape(const Shape& in) const override { return {in.n, out_, 1, 1}; }
  Tensor infer(const Tensor& x) const override;
  Tensor forward(const Tensor& x, Mode mode) override;
  Tensor backward(const Tensor& grad_out) override;
  void collect_state(const std::string& prefix, std::vector<StateRef>& out) override;
  LayerPtr clone() const override { return std::make_unique<Dense>(*this); }
  void clear_cache() override { input_ = {}; }

  int in_features() const { return in_; }
  int out_features() const { return out_; }
  Parameter& weight() { return weight_; }
  Parameter& bias() { return bias_; }
  const Parameter& weight() const { return weight_; }
  const Parameter& bias() const { return bias_; }

 private:
  int in_, out_;
  Parameter weight_;  // [out, in]
  Parameter bias_;    // [out]
  Tensor input_;
};

/// Records per-child activations and output gradients of a Sequential.
struct Taps {
  std::vector<Tensor> outputs;       // outputs[i] = output of child i
  std::vector<Tensor> output_grads;  // output_grads[i] = dL/d(output of child i)
};

class Sequential final : public Layer {
 public:
  explicit Sequential(std::string name = "") : Layer(std::move(name)) {}
  Sequential(const Sequential& other);
  Sequential& operator=(const Sequential& other);
  Sequential(Sequential&&) noexcept = default;
  Sequential& operator=(Sequential&&) noexcept = default;

  Sequential& add(LayerPtr layer);
  template <typename L, typename... Args>
  Sequential& emplace(Args&&... args) {
    return add(std::make_unique<L>(std::forward<Args>(args)...));
  }

  std::string kind() const override { return "Sequential"; }
  Shape output_shape(const Shape& in) const override;
  Tensor infer(const Tensor& x) const override;
  Tensor forward(const Tensor& x, Mode mode) override { return forward(x, mode, nullptr); }
  Tensor forward(const Tensor& x, Mode mode, Taps* taps);
  /// Runs children [first, end) in inference mode with caching.
  Tensor forward_from(std::size_t first, const Tensor& x, Mode mode);
  Tensor backward(const Tensor& grad_out) override { return backward(grad_out, nullptr); }
  Tensor backward(const Tensor& grad_out, Taps* taps);
  void collect_state(const std::string& prefix, std::vector<StateRef>& out) override;
  LayerPtr clone() const override { return std::make_unique<Sequential>(*this); }
  void clear_cache() override;

  std::size_t size() const { return layers_.size(); }
  Layer& at(std::size_t i) { return *layers_.at(i); }
  const Layer& at(std::size_t i) const { return *layers_.at(i); }
  /// Index of the child named `name`, or -1.
  long index_of(const std::string& name) const;

 private:
  std::vector<LayerPtr> layers_;
};

/// Parallel branches over the same input, concatenated along channels.
class Concat final : public Layer {
 public:
  explicit Concat(std::string name) : Layer(std::move(name)) {}
  Concat& add_branch(Sequential branch);

  std::string kind() const override { return "Concat"; }
  Shape output_shape(const Shape& in) const override;
  Tensor infer(const Tensor& x) const override;
  Tensor forward(const Tensor& x, Mode mode) override;
  Tensor backward(const Tensor& grad_out) override;
  void collect_state(const std::string& prefix, std::vector<StateRef>& out) override;
  LayerPtr clone() const override { return std::make_unique<Concat>(*this); }
  void clear_cache() override;

  const std::vector<Sequential>& branches() const { return branches_; }

 private:
  std::vector<Sequential> branches_;
  std::vector<int> branch_channels_;
};

// Initialization ---------------------------------------------------------------

/// He-uniform weights (bound sqrt(6 / fan_in)) and zero biases for every
/// Conv2d and Dense reachable from `layer`, from a seeded stream.
void init_he_uniform(Layer& layer, std::uint64_t seed);

// Losses -----------------------------------------------------------------------

struct LossResult {
  double loss = 0.0;
  Tensor grad;  // d loss / d input
};

/// Mean softmax cross-entropy over the batch. `logits` is N x K.
LossResult softmax_cross_entropy(const Tensor& logits, std::span<const int> labels);

/// sqrt(mean((p - y)^2) + eps) over the batch. `pred` is N x 1.
LossResult rmse_loss(const Tensor& pred, std::span<const float> targets, double eps = 1e-8);

// Optimizer ----------------------------------------------------------------------

struct AdamOptions {
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

class Adam {
 public:
  Adam(std::vector<Parameter*> params, AdamOptions options);
  void zero_grad();
  void step();
  long steps() const { return t_; }

 private:
  std::vector<Parameter*> params_;
  AdamOptions opt_;
  std::vector<std::vector<float>> m_, v_;
  long t_ = 0;
};

}  // namespace fundusq::nn
