#include "fundusq/nn.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include <Eigen/Core>
#include <fmt/format.h>

#include "fundusq/errors.hpp"
#include "fundusq/random.hpp"

namespace fundusq::nn {

namespace {

using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;
using MapVec = Eigen::Map<Eigen::VectorXf>;
using ConstMapVec = Eigen::Map<const Eigen::VectorXf>;

void require(bool ok, const std::string& layer, const std::string& what) {
  if (!ok) throw ShapeMismatch(layer + ": " + what);
}

}  // namespace

std::string to_string(const Shape& s) { return fmt::format("[{}, {}, {}, {}]", s.n, s.c, s.h, s.w); }

Parameter::Parameter(std::vector<int> d) : dims(std::move(d)) {
  std::size_t n = dims.empty() ? 0 : 1;
  for (int x : dims) n *= static_cast<std::size_t>(x);
  value.assign(n, 0.0f);
  grad.assign(n, 0.0f);
}

// Conv2d ---------------------------------------------------------------------------

Conv2d::Conv2d(std::string name, Options o)
    : Layer(std::move(name)),
      opt_(o),
      weight_({o.out, o.in, o.kh, o.kw}),
      bias_(o.bias ? std::vector<int>{o.out} : std::vector<int>{}) {
  if (o.in <= 0 || o.out <= 0 || o.kh <= 0 || o.kw <= 0 || o.sh <= 0 || o.sw <= 0 || o.ph < 0 || o.pw < 0) {
    throw UnsupportedConfig("invalid convolution options for '" + this->name() + "'");
  }
}

Shape Conv2d::output_shape(const Shape& in) const {
  require(in.c == opt_.in, name(), fmt::format("expected {} input channels, got {}", opt_.in, in.c));
  const int ho = (in.h + 2 * opt_.ph - opt_.kh) / opt_.sh + 1;
  const int wo = (in.w + 2 * opt_.pw - opt_.kw) / opt_.sw + 1;
  require(in.h + 2 * opt_.ph >= opt_.kh && in.w + 2 * opt_.pw >= opt_.kw, name(),
          "input " + to_string(in) + " smaller than the kernel");
  return {in.n, opt_.out, ho, wo};
}

namespace {

bool is_pointwise(const Conv2d::Options& o) {
  return o.kh == 1 && o.kw == 1 && o.sh == 1 && o.sw == 1 && o.ph == 0 && o.pw == 0;
}

void im2col(const float* x, int c, int h, int w, const Conv2d::Options& o, int ho, int wo, float* col) {
  const int p = ho * wo;
  for (int ci = 0; ci < c; ++ci) {
    const float* plane = x + static_cast<std::size_t>(ci) * h * w;
    for (int ky = 0; ky < o.kh; ++ky) {
      for (int kx = 0; kx < o.kw; ++kx) {
        float* dst = col + (static_cast<std::size_t>(ci) * o.kh * o.kw + ky * o.kw + kx) * p;
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy * o.sh - o.ph + ky;
          float* drow = dst + oy * wo;
          if (iy < 0 || iy >= h) {
            std::fill(drow, drow + wo, 0.0f);
            continue;
          }
          const float* srow = plane + static_cast<std::size_t>(iy) * w;
          for (int ox = 0; ox < wo; ++ox) {
            const int ix = ox * o.sw - o.pw + kx;
            drow[ox] = (ix >= 0 && ix < w) ? srow[ix] : 0.0f;
          }
        }
      }
    }
  }
}

void col2im(const float* col, int c, int h, int w, const Conv2d::Options& o, int ho, int wo, float* dx) {
  const int p = ho * wo;
  for (int ci = 0; ci < c; ++ci) {
    float* plane = dx + static_cast<std::size_t>(ci) * h * w;
    for (int ky = 0; ky < o.kh; ++ky) {
      for (int kx = 0; kx < o.kw; ++kx) {
        const float* src = col + (static_cast<std::size_t>(ci) * o.kh * o.kw + ky * o.kw + kx) * p;
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy * o.sh - o.ph + ky;
          if (iy < 0 || iy >= h) continue;
          float* drow = plane + static_cast<std::size_t>(iy) * w;
          const float* srow = src + oy * wo;
          for (int ox = 0; ox < wo; ++ox) {
            const int ix = ox * o.sw - o.pw + kx;
            if (ix >= 0 && ix < w) drow[ix] += srow[ox];
          }
        }
      }
    }
  }
}

}  // namespace

Tensor Conv2d::infer(const Tensor& x) const {
  const Shape out_shape = output_shape(x.shape);
  Tensor y(out_shape);
  const int k = opt_.in * opt_.kh * opt_.kw;
  const int p = out_shape.h * out_shape.w;
  ConstMapMat w(weight_.value.data(), opt_.out, k);
  std::vector<float> col;
  if (!is_pointwise(opt_)) col.resize(static_cast<std::size_t>(k) * p);
  for (int n = 0; n < x.shape.n; ++n) {
    const float* src = x.sample(n);
    if (!is_pointwise(opt_)) {
      im2col(src, x.shape.c, x.shape.h, x.shape.w, opt_, out_shape.h, out_shape.w, col.data());
      src = col.data();
    }
    MapMat out(y.sample(n), opt_.out, p);
    out.noalias() = w * ConstMapMat(src, k, p);
    if (opt_.bias) out.colwise() += ConstMapVec(bias_.value.data(), opt_.out);
  }
  return y;
}

Tensor Conv2d::forward(const Tensor& x, Mode) {
  input_ = x;
  return infer(x);
}

Tensor Conv2d::backward(const Tensor& grad_out) {
  const Shape& in = input_.shape;
  require(!input_.data.empty(), name(), "backward without forward");
  const Shape out_shape = output_shape(in);
  require(grad_out.shape == out_shape, name(), "gradient shape mismatch");
  const int k = opt_.in * opt_.kh * opt_.kw;
  const int p = out_shape.h * out_shape.w;
  Tensor dx(in);
  ConstMapMat w(weight_.value.data(), opt_.out, k);
  MapMat dw(weight_.grad.data(), opt_.out, k);
  std::vector<float> col(static_cast<std::size_t>(k) * p), dcol(static_cast<std::size_t>(k) * p);
  const bool pointwise = is_pointwise(opt_);
  for (int n = 0; n < in.n; ++n) {
    const float* src = input_.sample(n);
    if (!pointwise) {
      im2col(src, in.c, in.h, in.w, opt_, out_shape.h, out_shape.w, col.data());
      src = col.data();
    }
    ConstMapMat dy(grad_out.sample(n), opt_.out, p);
    dw.noalias() += dy * ConstMapMat(src, k, p).transpose();
    if (opt_.bias) MapVec(bias_.grad.data(), opt_.out) += dy.rowwise().sum();
    if (pointwise) {
      MapMat(dx.sample(n), k, p).noalias() = w.transpose() * dy;
    } else {
      MapMat(dcol.data(), k, p).noalias() = w.transpose() * dy;
      col2im(dcol.data(), in.c, in.h, in.w, opt_, out_shape.h, out_shape.w, dx.sample(n));
    }
  }
  return dx;
}

void Conv2d::collect_state(const std::string& prefix, std::vector<StateRef>& out) {
  out.push_back({prefix + name() + ".weight", &weight_.value, &weight_});
  if (opt_.bias) out.push_back({prefix + name() + ".bias", &bias_.value, &bias_});
}

// BatchNorm2d ------------------------------------------------------------------------

BatchNorm2d::BatchNorm2d(std::string name, int channels, float eps, float momentum)
    : Layer(std::move(name)),
      channels_(channels),
      eps_(eps),
      momentum_(momentum),
      gamma_({channels}),
      beta_({channels}),
      running_mean_(channels, 0.0f),
      running_var_(channels, 1.0f) {
  std::fill(gamma_.value.begin(), gamma_.value.end(), 1.0f);
}

Tensor BatchNorm2d::infer(const Tensor& x) const {
  require(x.shape.c == channels_, name(), "channel mismatch");
  Tensor y(x.shape);
  const std::size_t hw = static_cast<std::size_t>(x.shape.h) * x.shape.w;
  for (int n = 0; n < x.shape.n; ++n) {
    for (int c = 0; c < channels_; ++c) {
      const float scale = gamma_.value[c] / std::sqrt(running_var_[c] + eps_);
      const float shift = beta_.value[c] - running_mean_[c] * scale;
      const float* src = x.sample(n) + c * hw;
      float* dst = y.sample(n) + c * hw;
      for (std::size_t i = 0; i < hw; ++i) dst[i] = src[i] * scale + shift;
    }
  }
  return y;
}

Tensor BatchNorm2d::forward(const Tensor& x, Mode mode) {
  require(x.shape.c == channels_, name(), "channel mismatch");
  mode_ = mode;
  const std::size_t hw = static_cast<std::size_t>(x.shape.h) * x.shape.w;
  const double m = static_cast<double>(x.shape.n) * hw;
  inv_std_.assign(channels_, 0.0f);
  xhat_ = Tensor(x.shape);
  Tensor y(x.shape);
  for (int c = 0; c < channels_; ++c) {
    double mean, var;
    if (mode == Mode::train) {
      double s = 0.0, ss = 0.0;
      for (int n = 0; n < x.shape.n; ++n) {
        const float* src = x.sample(n) + c * hw;
        for (std::size_t i = 0; i < hw; ++i) s += src[i];
      }
      mean = s / m;
      for (int n = 0; n < x.shape.n; ++n) {
        const float* src = x.sample(n) + c * hw;
        for (std::size_t i = 0; i < hw; ++i) ss += (src[i] - mean) * (src[i] - mean);
      }
      var = ss / m;
      const double unbiased = m > 1 ? ss / (m - 1) : var;
      running_mean_[c] = static_cast<float>((1 - momentum_) * running_mean_[c] + momentum_ * mean);
      running_var_[c] = static_cast<float>((1 - momentum_) * running_var_[c] + momentum_ * unbiased);
    } else {
      mean = running_mean_[c];
      var = running_var_[c];
    }
    const float inv = static_cast<float>(1.0 / std::sqrt(var + eps_));
    inv_std_[c] = inv;
    for (int n = 0; n < x.shape.n; ++n) {
      const float* src = x.sample(n) + c * hw;
      float* xh = xhat_.sample(n) + c * hw;
      float* dst = y.sample(n) + c * hw;
      for (std::size_t i = 0; i < hw; ++i) {
        xh[i] = static_cast<float>((src[i] - mean) * inv);
        dst[i] = gamma_.value[c] * xh[i] + beta_.value[c];
      }
    }
  }
  return y;
}

Tensor BatchNorm2d::backward(const Tensor& grad_out) {
  require(grad_out.shape == xhat_.shape, name(), "gradient shape mismatch");
  const Shape& s = grad_out.shape;
  const std::size_t hw = static_cast<std::size_t>(s.h) * s.w;
  const double m = static_cast<double>(s.n) * hw;
  Tensor dx(s);
  for (int c = 0; c < channels_; ++c) {
    double sum_dy = 0.0, sum_dy_xhat = 0.0;
    for (int n = 0; n < s.n; ++n) {
      const float* dy = grad_out.sample(n) + c * hw;
      const float* xh = xhat_.sample(n) + c * hw;
      for (std::size_t i = 0; i < hw; ++i) {
        sum_dy += dy[i];
        sum_dy_xhat += dy[i] * xh[i];
      }
    }
    gamma_.grad[c] += static_cast<float>(sum_dy_xhat);
    beta_.grad[c] += static_cast<float>(sum_dy);
    const double g = gamma_.value[c];
    const double inv = inv_std_[c];
    for (int n = 0; n < s.n; ++n) {
      const float* dy = grad_out.sample(n) + c * hw;
      const float* xh = xhat_.sample(n) + c * hw;
      float* d = dx.sample(n) + c * hw;
      for (std::size_t i = 0; i < hw; ++i) {
        if (mode_ == Mode::train) {
          d[i] = static_cast<float>(g * inv / m * (m * dy[i] - sum_dy - xh[i] * sum_dy_xhat));
        } else {
          d[i] = static_cast<float>(g * inv * dy[i]);
        }
      }
    }
  }
  return dx;
}

void BatchNorm2d::collect_state(const std::string& prefix, std::vector<StateRef>& out) {
  out.push_back({prefix + name() + ".gamma", &gamma_.value, &gamma_});
  out.push_back({prefix + name() + ".beta", &beta_.value, &beta_});
  out.push_back({prefix + name() + ".running_mean", &running_mean_, nullptr});
  out.push_back({prefix + name() + ".running_var", &running_var_, nullptr});
}

// ReLU -------------------------------------------------------------------------------

Tensor ReLU::infer(const Tensor& x) const {
  Tensor y(x.shape);
  std::transform(x.data.begin(), x.data.end(), y.data.begin(), [](float v) { return v > 0.0f ? v : 0.0f; });
  return y;
}

Tensor ReLU::forward(const Tensor& x, Mode) {
  output_ = infer(x);
  return output_;
}

Tensor ReLU::backward(const Tensor& grad_out) {
  require(grad_out.shape == output_.shape, name(), "gradient shape mismatch");
  Tensor dx(grad_out.shape);
  for (std::size_t i = 0; i < dx.data.size(); ++i) dx.data[i] = output_.data[i] > 0.0f ? grad_out.data[i] : 0.0f;
  return dx;
}

// Pooling ------------------------------------------------------------------------------

namespace {

Shape pool_shape(const std::string& name, const Shape& in, const PoolOptions& o) {
  require(in.h + 2 * o.pad >= o.k && in.w + 2 * o.pad >= o.k, name, "input " + to_string(in) + " smaller than the pool window");
  return {in.n, in.c, (in.h + 2 * o.pad - o.k) / o.stride + 1, (in.w + 2 * o.pad - o.k) / o.stride + 1};
}

}  // namespace

Shape MaxPool2d::output_shape(const Shape& in) const { return pool_shape(name(), in, opt_); }

Tensor MaxPool2d::infer(const Tensor& x) const {
  const Shape os = output_shape(x.shape);
  Tensor y(os);
  for (int n = 0; n < os.n; ++n) {
    for (int c = 0; c < os.c; ++c) {
      for (int oy = 0; oy < os.h; ++oy) {
        for (int ox = 0; ox < os.w; ++ox) {
          float best = -std::numeric_limits<float>::infinity();
          for (int ky = 0; ky < opt_.k; ++ky) {
            const int iy = oy * opt_.stride - opt_.pad + ky;
            if (iy < 0 || iy >= x.shape.h) continue;
            for (int kx = 0; kx < opt_.k; ++kx) {
              const int ix = ox * opt_.stride - opt_.pad + kx;
              if (ix < 0 || ix >= x.shape.w) continue;
              best = std::max(best, x.at(n, c, iy, ix));
            }
          }
          y.at(n, c, oy, ox) = best;
        }
      }
    }
  }
  return y;
}

Tensor MaxPool2d::forward(const Tensor& x, Mode) {
  in_shape_ = x.shape;
  const Shape os = output_shape(x.shape);
  Tensor y(os);
  argmax_.assign(os.count(), 0);
  std::size_t k = 0;
  for (int n = 0; n < os.n; ++n) {
    for (int c = 0; c < os.c; ++c) {
      for (int oy = 0; oy < os.h; ++oy) {
        for (int ox = 0; ox < os.w; ++ox, ++k) {
          float best = -std::numeric_limits<float>::infinity();
          std::uint32_t arg = 0;
          for (int ky = 0; ky < opt_.k; ++ky) {
            const int iy = oy * opt_.stride - opt_.pad + ky;
            if (iy < 0 || iy >= x.shape.h) continue;
            for (int kx = 0; kx < opt_.k; ++kx) {
              const int ix = ox * opt_.stride - opt_.pad + kx;
              if (ix < 0 || ix >= x.shape.w) continue;
              const float v = x.at(n, c, iy, ix);
              if (v > best) {
                best = v;
                arg = static_cast<std::uint32_t>(iy * x.shape.w + ix);
              }
            }
          }
          y.at(n, c, oy, ox) = best;
          argmax_[k] = arg;
        }
      }
    }
  }
  return y;
}

Tensor MaxPool2d::backward(const Tensor& grad_out) {
  Tensor dx(in_shape_);
  const Shape& os = grad_out.shape;
  require(os.count() == argmax_.size(), name(), "gradient shape mismatch");
  const std::size_t plane = static_cast<std::size_t>(in_shape_.h) * in_shape_.w;
  std::size_t k = 0;
  for (int n = 0; n < os.n; ++n) {
    for (int c = 0; c < os.c; ++c) {
      float* d = dx.sample(n) + c * plane;
      for (int i = 0; i < os.h * os.w; ++i, ++k) d[argmax_[k]] += grad_out.data[k];
    }
  }
  return dx;
}

Shape AvgPool2d::output_shape(const Shape& in) const { return pool_shape(name(), in, opt_); }

Tensor AvgPool2d::infer(const Tensor& x) const {
  const Shape os = output_shape(x.shape);
  Tensor y(os);
  for (int n = 0; n < os.n; ++n) {
    for (int c = 0; c < os.c; ++c) {
      for (int oy = 0; oy < os.h; ++oy) {
        for (int ox = 0; ox < os.w; ++ox) {
          float s = 0.0f;
          int cnt = 0;
          for (int ky = 0; ky < opt_.k; ++ky) {
            const int iy = oy * opt_.stride - opt_.pad + ky;
            if (iy < 0 || iy >= x.shape.h) continue;
            for (int kx = 0; kx < opt_.k; ++kx) {
              const int ix = ox * opt_.stride - opt_.pad + kx;
              if (ix < 0 || ix >= x.shape.w) continue;
              s += x.at(n, c, iy, ix);
              ++cnt;
            }
          }
          y.at(n, c, oy, ox) = cnt ? s / static_cast<float>(cnt) : 0.0f;
        }
      }
    }
  }
  return y;
}

Tensor AvgPool2d::forward(const Tensor& x, Mode) {
  in_shape_ = x.shape;
  return infer(x);
}

Tensor AvgPool2d::backward(const Tensor& grad_out) {
  Tensor dx(in_shape_);
  const Shape& os = grad_out.shape;
  for (int n = 0; n < os.n; ++n) {
    for (int c = 0; c < os.c; ++c) {
      for (int oy = 0; oy < os.h; ++oy) {
        for (int ox = 0; ox < os.w; ++ox) {
          int y0 = std::max(0, oy * opt_.stride - opt_.pad), y1 = std::min(in_shape_.h, oy * opt_.stride - opt_.pad + opt_.k);
          int x0 = std::max(0, ox * opt_.stride - opt_.pad), x1 = std::min(in_shape_.w, ox * opt_.stride - opt_.pad + opt_.k);
          const int cnt = (y1 - y0) * (x1 - x0);
          if (cnt <= 0) continue;
          const float g = grad_out.at(n, c, oy, ox) / static_cast<float>(cnt);
          for (int iy = y0; iy < y1; ++iy) {
            for (int ix = x0; ix < x1; ++ix) dx.at(n, c, iy, ix) += g;
          }
        }
      }
    }
  }
  return dx;
}

Tensor GlobalAvgPool::infer(const Tensor& x) const {
  Tensor y({x.shape.n, x.shape.c, 1, 1});
  const std::size_t hw = static_cast<std::size_t>(x.shape.h) * x.shape.w;
  for (int n = 0; n < x.shape.n; ++n) {
    for (int c = 0; c < x.shape.c; ++c) {
      const float* src = x.sample(n) + c * hw;
      double s = 0.0;
      for (std::size_t i = 0; i < hw; ++i) s += src[i];
      y.sample(n)[c] = static_cast<float>(s / static_cast<double>(hw));
    }
  }
  return y;
}

Tensor GlobalAvgPool::forward(const Tensor& x, Mode) {
  in_shape_ = x.shape;
  return infer(x);
}

Tensor GlobalAvgPool::backward(const Tensor& grad_out) {
  Tensor dx(in_shape_);
  const std::size_t hw = static_cast<std::size_t>(in_shape_.h) * in_shape_.w;
  for (int n = 0; n < in_shape_.n; ++n) {
    for (int c = 0; c < in_shape_.c; ++c) {
      const float g = grad_out.sample(n)[c] / static_cast<float>(hw);
      std::fill_n(dx.sample(n) + c * hw, hw, g);
    }
  }
  return dx;
}

// Dense ---------------------------------------------------------------------------------

Dense::Dense(std::string name, int in, int out)
    : Layer(std::move(name)), in_(in), out_(out), weight_({out, in}), bias_({out}) {
  if (in <= 0 || out <= 0) throw UnsupportedConfig("invalid dense layer size for '" + this->name() + "'");
}

Tensor Dense::infer(const Tensor& x) const {
  require(static_cast<int>(x.shape.per_sample()) == in_, name(),
          fmt::format("expected {} features, got {}", in_, x.shape.per_sample()));
  Tensor y({x.shape.n, out_, 1, 1});
  ConstMapMat w(weight_.value.data(), out_, in_);
  for (int n = 0; n < x.shape.n; ++n) {
    MapVec out(y.sample(n), out_);
    out.noalias() = w * ConstMapVec(x.sample(n), in_);
    out += ConstMapVec(bias_.value.data(), out_);
  }
  return y;
}

Tensor Dense::forward(const Tensor& x, Mode) {
  input_ = x;
  return infer(x);
}

Tensor Dense::backward(const Tensor& grad_out) {
  const int n = input_.shape.n;
  require(grad_out.shape.n == n && static_cast<int>(grad_out.shape.per_sample()) == out_, name(),
          "gradient shape mismatch");
  ConstMapMat dy(grad_out.data.data(), n, out_);
  ConstMapMat x(input_.data.data(), n, in_);
  MapMat(weight_.grad.data(), out_, in_).noalias() += dy.transpose() * x;
  MapVec(bias_.grad.data(), out_) += dy.colwise().sum().transpose();
  Tensor dx(input_.shape);
  MapMat(dx.data.data(), n, in_).noalias() = dy * ConstMapMat(weight_.value.data(), out_, in_);
  return dx;
}

void Dense::collect_state(const std::string& prefix, std::vector<StateRef>& out) {
  out.push_back({prefix + name() + ".weight", &weight_.value, &weight_});
  out.push_back({prefix + name() + ".bias", &bias_.value, &bias_});
}

// Sequential ------------------------------------------------------------------------------

Sequential::Sequential(const Sequential& other) : Layer(other.name()) {
  for (const auto& l : other.layers_) layers_.push_back(l->clone());
}

Sequential& Sequential::operator=(const Sequential& other) {
  if (this != &other) {
    Sequential copy(other);
    *this = std::move(copy);
  }
  return *this;
}

Sequential& Sequential::add(LayerPtr layer) {
  layers_.push_back(std::move(layer));
  return *this;
}

Shape Sequential::output_shape(const Shape& in) const {
  Shape s = in;
  for (const auto& l : layers_) s = l->output_shape(s);
  return s;
}

Tensor Sequential::infer(const Tensor& x) const {
  Tensor cur = x;
  for (const auto& l : layers_) cur = l->infer(cur);
  return cur;
}

Tensor Sequential::forward(const Tensor& x, Mode mode, Taps* taps) {
  Tensor cur = x;
  if (taps) taps->outputs.clear();
  for (auto& l : layers_) {
    cur = l->forward(cur, mode);
    if (taps) taps->outputs.push_back(cur);
  }
  return cur;
}

Tensor Sequential::forward_from(std::size_t first, const Tensor& x, Mode mode) {
  Tensor cur = x;
  for (std::size_t i = first; i < layers_.size(); ++i) cur = layers_[i]->forward(cur, mode);
  return cur;
}

Tensor Sequential::backward(const Tensor& grad_out, Taps* taps) {
  Tensor g = grad_out;
  if (taps) taps->output_grads.assign(layers_.size(), Tensor{});
  for (std::size_t i = layers_.size(); i-- > 0;) {
    if (taps) taps->output_grads[i] = g;
    g = layers_[i]->backward(g);
  }
  return g;
}

void Sequential::collect_state(const std::string& prefix, std::vector<StateRef>& out) {
  const std::string p = name().empty() ? prefix : prefix + name() + ".";
  for (auto& l : layers_) l->collect_state(p, out);
}

void Sequential::clear_cache() {
  for (auto& l : layers_) l->clear_cache();
}

long Sequential::index_of(const std::string& name) const {
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    if (layers_[i]->name() == name) return static_cast<long>(i);
  }
  return -1;
}

// Concat ------------------------------------------------------------------------------------

Concat& Concat::add_branch(Sequential branch) {
  branches_.push_back(std::move(branch));
  return *this;
}

Shape Concat::output_shape(const Shape& in) const {
  Shape out{in.n, 0, 0, 0};
  for (const auto& b : branches_) {
    const Shape s = b.output_shape(in);
    if (out.c == 0) {
      out.h = s.h;
      out.w = s.w;
    }
    require(s.h == out.h && s.w == out.w, name(), "branch spatial sizes differ");
    out.c += s.c;
  }
  return out;
}

namespace {

Tensor concat_channels(const std::vector<Tensor>& parts) {
  Shape s = parts.front().shape;
  s.c = 0;
  for (const auto& p : parts) s.c += p.shape.c;
  Tensor y(s);
  for (int n = 0; n < s.n; ++n) {
    float* dst = y.sample(n);
    for (const auto& p : parts) {
      dst = std::copy(p.sample(n), p.sample(n) + p.shape.per_sample(), dst);
    }
  }
  return y;
}

}  // namespace

Tensor Concat::infer(const Tensor& x) const {
  std::vector<Tensor> parts;
  for (const auto& b : branches_) parts.push_back(b.infer(x));
  return concat_channels(parts);
}

Tensor Concat::forward(const Tensor& x, Mode mode) {
  std::vector<Tensor> parts;
  branch_channels_.clear();
  for (auto& b : branches_) {
    parts.push_back(b.forward(x, mode));
    branch_channels_.push_back(parts.back().shape.c);
  }
  return concat_channels(parts);
}

Tensor Concat::backward(const Tensor& grad_out) {
  const Shape& s = grad_out.shape;
  const std::size_t hw = static_cast<std::size_t>(s.h) * s.w;
  Tensor dx;
  int offset = 0;
  for (std::size_t i = 0; i < branches_.size(); ++i) {
    const int c = branch_channels_.at(i);
    Tensor g({s.n, c, s.h, s.w});
    for (int n = 0; n < s.n; ++n) {
      const float* src = grad_out.sample(n) + offset * hw;
      std::copy(src, src + c * hw, g.sample(n));
    }
    Tensor d = branches_[i].backward(g);
    if (dx.data.empty()) {
      dx = std::move(d);
    } else {
      for (std::size_t k = 0; k < dx.data.size(); ++k) dx.data[k] += d.data[k];
    }
    offset += c;
  }
  return dx;
}

void Concat::collect_state(const std::string& prefix, std::vector<StateRef>& out) {
  for (std::size_t i = 0; i < branches_.size(); ++i) {
    const std::string p = prefix + name() + "." + (branches_[i].name().empty() ? fmt::format("b{}", i) : branches_[i].name()) + ".";
    Sequential& b = branches_[i];
    for (std::size_t k = 0; k < b.size(); ++k) b.at(k).collect_state(p, out);
  }
}

void Concat::clear_cache() {
  for (auto& b : branches_) b.clear_cache();
}

// Initialization --------------------------------------------------------------------------------

void init_he_uniform(Layer& layer, std::uint64_t seed) {
  std::vector<StateRef> state;
  layer.collect_state("", state);
  for (std::size_t i = 0; i < state.size(); ++i) {
    auto& ref = state[i];
    if (!ref.param) continue;
    const std::string& n = ref.name;
    const auto ends_with = [&](const std::string& suffix) {
      return n.size() >= suffix.size() && n.compare(n.size() - suffix.size(), suffix.size(), suffix) == 0;
    };
    if (ends_with(".weight") && ref.param->dims.size() >= 2) {
      std::size_t fan_in = 1;
      for (std::size_t d = 1; d < ref.param->dims.size(); ++d) fan_in *= static_cast<std::size_t>(ref.param->dims[d]);
      const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
      Rng rng(mix_seed(seed, i));
      for (float& v : ref.param->value) v = static_cast<float>(rng.uniform(-bound, bound));
    } else if (ends_with(".gamma")) {
      std::fill(ref.param->value.begin(), ref.param->value.end(), 1.0f);
    } else {
      std::fill(ref.param->value.begin(), ref.param->value.end(), 0.0f);
    }
  }
}

// Losses ----------------------------------------------------------------------------------------

LossResult softmax_cross_entropy(const Tensor& logits, std::span<const int> labels) {
  const int n = logits.shape.n;
  const int k = static_cast<int>(logits.shape.per_sample());
  if (static_cast<int>(labels.size()) != n) throw LengthMismatch("labels do not match the batch size");
  if (n == 0) throw EmptyInput("empty batch");
  LossResult r;
  r.grad = Tensor(logits.shape);
  double total = 0.0;
  for (int i = 0; i < n; ++i) {
    const float* z = logits.sample(i);
    const int label = labels[i];
    if (label < 0 || label >= k) throw IndexOutOfRange(fmt::format("label {} outside [0,{})", label, k));
    const float zmax = *std::max_element(z, z + k);
    double denom = 0.0;
    for (int c = 0; c < k; ++c) denom += std::exp(static_cast<double>(z[c] - zmax));
    const double log_denom = std::log(denom);
    total += -(static_cast<double>(z[label] - zmax) - log_denom);
    float* g = r.grad.sample(i);
    for (int c = 0; c < k; ++c) {
      const double p = std::exp(static_cast<double>(z[c] - zmax) - log_denom);
      g[c] = static_cast<float>((p - (c == label ? 1.0 : 0.0)) / n);
    }
  }
  r.loss = total / n;
  return r;
}

LossResult rmse_loss(const Tensor& pred, std::span<const float> targets, double eps) {
  const int n = pred.shape.n;
  if (pred.shape.per_sample() != 1) throw ShapeMismatch("rmse_loss expects one output per sample");
  if (static_cast<int>(targets.size()) != n) throw LengthMismatch("targets do not match the batch size");
  if (n == 0) throw EmptyInput("empty batch");
  double mse = 0.0;
  for (int i = 0; i < n; ++i) {
    const double d = pred.data[i] - targets[i];
    mse += d * d;
  }
  mse /= n;
  LossResult r;
  r.loss = std::sqrt(mse + eps);
  r.grad = Tensor(pred.shape);
  for (int i = 0; i < n; ++i) {
    r.grad.data[i] = static_cast<float>((pred.data[i] - targets[i]) / (n * r.loss));
  }
  return r;
}

// Adam --------------------------------------------------------------------------------------------

Adam::Adam(std::vector<Parameter*> params, AdamOptions options) : params_(std::move(params)), opt_(options) {
  if (!(opt_.learning_rate > 0.0)) throw ValidationError("learning_rate must be positive");
  for (auto* p : params_) {
    m_.emplace_back(p->size(), 0.0f);
    v_.emplace_back(p->size(), 0.0f);
  }
}

void Adam::zero_grad() {
  for (auto* p : params_) std::fill(p->grad.begin(), p->grad.end(), 0.0f);
}

void Adam::step() {
  ++t_;
  const double c1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(t_));
  const auto b1 = static_cast<float>(opt_.beta1), b2 = static_cast<float>(opt_.beta2);
  const auto step_size = static_cast<float>(opt_.learning_rate / c1);
  const auto inv_c2 = static_cast<float>(1.0 / c2);
  const auto eps = static_cast<float>(opt_.epsilon);
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Parameter& p = *params_[i];
    if (!p.trainable) continue;
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t k = 0; k < p.size(); ++k) {
      const float g = p.grad[k];
      m[k] = b1 * m[k] + (1.0f - b1) * g;
      v[k] = b2 * v[k] + (1.0f - b2) * g * g;
      p.value[k] -= step_size * m[k] / (std::sqrt(v[k] * inv_c2) + eps);
    }
  }
}

}  // namespace fundusq::nn
