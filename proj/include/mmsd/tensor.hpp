#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <limits>
#include <memory>
#include <numeric>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "mmsd/errors.hpp"

namespace mmsd {

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ']';
  return os.str();
}

inline std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t e : s) n *= e;
  return n;
}

// Dense double-precision tensor handle. Copies share the underlying buffer,
// so a parameter updated in place is seen by every holder. Gradient buffers
// are allocated lazily and persist until zero_grad().
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape) {
    return from_data(std::move(shape), {});
  }

  static Tensor full(Shape shape, double v) {
    std::size_t n = shape_numel(shape);
    return Tensor(std::make_shared<Node>(Node{std::move(shape), std::vector<double>(n, v), {}, false}));
  }

  static Tensor from_data(Shape shape, std::vector<double> data) {
    std::size_t n = shape_numel(shape);
    if (shape.empty() || n == 0) throw ShapeError("tensor shape must have positive extents, got " + shape_str(shape));
    if (data.empty()) data.assign(n, 0.0);
    if (data.size() != n)
      throw ShapeError("data length " + std::to_string(data.size()) + " does not match shape " + shape_str(shape));
    return Tensor(std::make_shared<Node>(Node{std::move(shape), std::move(data), {}, false}));
  }

  static Tensor scalar(double v) { return full({1}, v); }

  // Row-major 2D literal, handy in tests.
  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows) {
    std::size_t m = rows.size();
    std::size_t n = rows.begin()->size();
    std::vector<double> data;
    data.reserve(m * n);
    for (const auto& r : rows) {
      if (r.size() != n) throw ShapeError("ragged matrix literal");
      data.insert(data.end(), r.begin(), r.end());
    }
    return from_data({m, n}, std::move(data));
  }

  bool defined() const { return n_ != nullptr; }
  const Shape& shape() const { return n_->shape; }
  std::size_t rank() const { return n_->shape.size(); }
  std::size_t numel() const { return n_->value.size(); }
  std::size_t extent(std::size_t axis) const { return n_->shape.at(axis); }

  std::span<const double> values() const { return n_->value; }
  std::span<double> mutable_values() const { return n_->value; }

  double operator[](std::size_t flat) const { return n_->value[flat]; }
  double at(std::size_t i, std::size_t j) const { return n_->value[i * extent(1) + j]; }
  double at(std::size_t i, std::size_t j, std::size_t k) const {
    return n_->value[(i * extent(1) + j) * extent(2) + k];
  }

  // The handle has shallow-const semantics: a const Tensor still refers to
  // mutable shared storage, mirroring how parameters are updated in place.
  bool requires_grad() const { return n_->requires_grad; }
  const Tensor& set_requires_grad(bool b) const {
    n_->requires_grad = b;
    return *this;
  }

  // Zero-filled on first access so non-participating tensors report zero gradient.
  std::span<const double> grad() const {
    ensure_grad();
    return n_->grad;
  }
  std::span<double> mutable_grad() const {
    ensure_grad();
    return n_->grad;
  }
  bool has_grad_buffer() const { return !n_->grad.empty(); }
  void zero_grad() const {
    if (!n_->grad.empty()) std::fill(n_->grad.begin(), n_->grad.end(), 0.0);
  }
  void release_grad() const { n_->grad.clear(); }

  // Deep copy with a fresh node (no shared state, no gradient history).
  Tensor clone() const {
    auto node = std::make_shared<Node>(Node{n_->shape, n_->value, {}, n_->requires_grad});
    return Tensor(std::move(node));
  }

  bool same_node(const Tensor& other) const { return n_ == other.n_; }

 private:
  struct Node {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;
    bool requires_grad = false;
  };

  explicit Tensor(std::shared_ptr<Node> n) : n_(std::move(n)) {}

  void ensure_grad() const {
    if (n_->grad.empty()) n_->grad.assign(n_->value.size(), 0.0);
  }

  std::shared_ptr<Node> n_;
};

inline Tensor uniform(Shape shape, double lo, double hi, std::mt19937_64& rng) {
  std::size_t n = shape_numel(shape);
  std::vector<double> data(n);
  std::uniform_real_distribution<double> dist(lo, hi);
  for (double& v : data) v = dist(rng);
  return Tensor::from_data(std::move(shape), std::move(data));
}

inline Tensor gaussian(Shape shape, double mean, double stddev, std::mt19937_64& rng) {
  std::size_t n = shape_numel(shape);
  std::vector<double> data(n);
  std::normal_distribution<double> dist(mean, stddev);
  for (double& v : data) v = dist(rng);
  return Tensor::from_data(std::move(shape), std::move(data));
}

// Glorot-uniform init: +-sqrt(6 / (fan_in + fan_out)).
inline Tensor glorot(Shape shape, std::mt19937_64& rng) {
  double fan = 0;
  for (std::size_t e : shape) fan += static_cast<double>(e);
  if (shape.size() == 1) fan += static_cast<double>(shape[0]);  // treat vectors as square maps
  double a = std::sqrt(6.0 / fan);
  return uniform(std::move(shape), -a, a, rng);
}

// Reverse-mode gradient tape. Operations append a backward rule as they
// execute; backward() replays the rules once, in reverse creation order.
// A tape and its live tensors belong to a single thread.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool grad_enabled() const { return grad_enabled_; }
  void set_grad_enabled(bool b) { grad_enabled_ = b; }

  std::size_t size() const { return records_.size(); }

  // Minimum distance to a relu/max/clamp kink observed during forward,
  // used to reject inputs unsuitable for finite differencing.
  double kink_gap() const { return kink_gap_; }
  void note_kink_gap(double g) { kink_gap_ = std::min(kink_gap_, g); }

  void record(Tensor out, std::function<void()> backward) {
    records_.push_back({std::move(out), std::move(backward)});
  }

  // Replays recorded rules newest-first. Gradients of op outputs are
  // transient (dropped once their rule has fired); only leaves accumulate,
  // which makes repeated backward calls on one tape additive.
  void backward(const Tensor& loss) {
    if (loss.numel() != 1) throw ContractError("backward requires a scalar loss, got shape " + shape_str(loss.shape()));
    loss.mutable_grad()[0] += 1.0;
    for (auto it = records_.rbegin(); it != records_.rend(); ++it) {
      if (it->out.has_grad_buffer()) {
        it->backward();
        it->out.release_grad();
      }
    }
  }

  void reset() {
    records_.clear();
    kink_gap_ = std::numeric_limits<double>::infinity();
  }

 private:
  struct Record {
    mutable Tensor out;
    std::function<void()> backward;
  };
  std::vector<Record> records_;
  bool grad_enabled_ = true;
  double kink_gap_ = std::numeric_limits<double>::infinity();
};

namespace detail {

inline void check_finite(const Tensor& t, const char* op) {
  for (double v : t.values()) {
    if (!std::isfinite(v)) throw NumericError(std::string(op) + " produced a non-finite value");
  }
}

inline void finalize(Tape& tape, Tensor& out, const std::vector<Tensor>& inputs, const char* op,
                     std::function<void()> backward) {
  check_finite(out, op);
  bool needs = false;
  if (tape.grad_enabled()) {
    for (const Tensor& in : inputs) needs = needs || in.requires_grad();
  }
  if (needs) {
    out.set_requires_grad(true);
    tape.record(out, std::move(backward));
  }
}

inline void finalize(Tape& tape, Tensor& out, std::initializer_list<Tensor> inputs, const char* op,
                     std::function<void()> backward) {
  finalize(tape, out, std::vector<Tensor>(inputs), op, std::move(backward));
}

// C(m x n) += or = op(A) * op(B)
inline void gemm(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c,
                 bool trans_a, bool trans_b, bool accumulate) {
  if (!accumulate) std::fill(c, c + m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      double av = trans_a ? a[p * m + i] : a[i * k + p];
      if (av == 0.0) continue;
      const double* brow = trans_b ? nullptr : b + p * n;
      double* crow = c + i * n;
      if (trans_b) {
        for (std::size_t j = 0; j < n; ++j) crow[j] += av * b[j * k + p];
      } else {
        for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
      }
    }
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

inline Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.extent(1) != b.extent(0))
    throw ShapeError("matmul shape mismatch: " + shape_str(a.shape()) + " * " + shape_str(b.shape()));
  const std::size_t m = a.extent(0), k = a.extent(1), n = b.extent(1);
  Tensor out = Tensor::zeros({m, n});
  detail::gemm(m, n, k, a.values().data(), b.values().data(), out.mutable_values().data(), false, false, false);
  detail::finalize(tape, out, {a, b}, "matmul", [a, b, out]() mutable {
    const double* g = out.grad().data();
    if (a.requires_grad())
      detail::gemm(a.extent(0), a.extent(1), out.extent(1), g, b.values().data(), a.mutable_grad().data(), false,
                   true, true);
    if (b.requires_grad())
      detail::gemm(b.extent(0), b.extent(1), out.extent(0), a.values().data(), g, b.mutable_grad().data(), true,
                   false, true);
  });
  return out;
}

inline Tensor transpose(Tape& tape, const Tensor& x) {
  if (x.rank() != 2) throw ShapeError("transpose expects a matrix, got " + shape_str(x.shape()));
  const std::size_t m = x.extent(0), n = x.extent(1);
  Tensor out = Tensor::zeros({n, m});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out.mutable_values()[j * m + i] = x.values()[i * n + j];
  detail::finalize(tape, out, {x}, "transpose", [x, out, m, n]() mutable {
    auto g = out.grad();
    auto xg = x.mutable_grad();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) xg[i * n + j] += g[j * m + i];
  });
  return out;
}

// ---------------------------------------------------------------------------
// Pointwise arithmetic
// ---------------------------------------------------------------------------

inline Tensor add(Tape& tape, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    throw ShapeError("add shape mismatch: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor out = Tensor::zeros(a.shape());
  for (std::size_t i = 0; i < a.numel(); ++i) out.mutable_values()[i] = a.values()[i] + b.values()[i];
  detail::finalize(tape, out, {a, b}, "add", [a, b, out]() mutable {
    auto g = out.grad();
    if (a.requires_grad()) {
      auto ag = a.mutable_grad();
      for (std::size_t i = 0; i < g.size(); ++i) ag[i] += g[i];
    }
    if (b.requires_grad()) {
      auto bg = b.mutable_grad();
      for (std::size_t i = 0; i < g.size(); ++i) bg[i] += g[i];
    }
  });
  return out;
}

inline Tensor mul(Tape& tape, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    throw ShapeError("mul shape mismatch: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor out = Tensor::zeros(a.shape());
  for (std::size_t i = 0; i < a.numel(); ++i) out.mutable_values()[i] = a.values()[i] * b.values()[i];
  detail::finalize(tape, out, {a, b}, "mul", [a, b, out]() mutable {
    auto g = out.grad();
    if (a.requires_grad()) {
      auto ag = a.mutable_grad();
      for (std::size_t i = 0; i < g.size(); ++i) ag[i] += g[i] * b.values()[i];
    }
    if (b.requires_grad()) {
      auto bg = b.mutable_grad();
      for (std::size_t i = 0; i < g.size(); ++i) bg[i] += g[i] * a.values()[i];
    }
  });
  return out;
}

inline Tensor scale(Tape& tape, const Tensor& x, double c) {
  Tensor out = Tensor::zeros(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) out.mutable_values()[i] = x.values()[i] * c;
  detail::finalize(tape, out, {x}, "scale", [x, out, c]() mutable {
    auto g = out.grad();
    auto xg = x.mutable_grad();
    for (std::size_t i = 0; i < g.size(); ++i) xg[i] += g[i] * c;
  });
  return out;
}

inline Tensor add_scalar(Tape& tape, const Tensor& x, double c) {
  Tensor out = Tensor::zeros(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) out.mutable_values()[i] = x.values()[i] + c;
  detail::finalize(tape, out, {x}, "add_scalar", [x, out]() mutable {
    auto g = out.grad();
    auto xg = x.mutable_grad();
    for (std::size_t i = 0; i < g.size(); ++i) xg[i] += g[i];
  });
  return out;
}

inline Tensor sub(Tape& tape, const Tensor& a, const Tensor& b) { return add(tape, a, scale(tape, b, -1.0)); }

// x (m x n) + b ([n]) broadcast over rows; the one sanctioned broadcast add.
inline Tensor add_row_vector(Tape& tape, const Tensor& x, const Tensor& b) {
  if (x.rank() != 2 || b.rank() != 1 || b.extent(0) != x.extent(1))
    throw ShapeError("add_row_vector shape mismatch: " + shape_str(x.shape()) + " + " + shape_str(b.shape()));
  const std::size_t m = x.extent(0), n = x.extent(1);
  Tensor out = Tensor::zeros(x.shape());
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out.mutable_values()[i * n + j] = x.values()[i * n + j] + b.values()[j];
  detail::finalize(tape, out, {x, b}, "add_row_vector", [x, b, out, m, n]() mutable {
    auto g = out.grad();
    if (x.requires_grad()) {
      auto xg = x.mutable_grad();
      for (std::size_t i = 0; i < m * n; ++i) xg[i] += g[i];
    }
    if (b.requires_grad()) {
      auto bg = b.mutable_grad();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) bg[j] += g[i * n + j];
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

enum class Activation { Tanh, Sigmoid, Relu, Gelu };

inline Activation activation_from_name(const std::string& name) {
  if (name == "tanh") return Activation::Tanh;
  if (name == "sigmoid") return Activation::Sigmoid;
  if (name == "relu") return Activation::Relu;
  if (name == "gelu") return Activation::Gelu;
  throw ConfigError("unknown activation kind: " + name);
}

inline Tensor elementwise(Tape& tape, Activation kind, const Tensor& x) {
  Tensor out = Tensor::zeros(x.shape());
  auto xv = x.values();
  auto ov = out.mutable_values();
  switch (kind) {
    case Activation::Tanh:
      for (std::size_t i = 0; i < xv.size(); ++i) ov[i] = std::tanh(xv[i]);
      break;
    case Activation::Sigmoid:
      for (std::size_t i = 0; i < xv.size(); ++i) ov[i] = 1.0 / (1.0 + std::exp(-xv[i]));
      break;
    case Activation::Relu:
      for (std::size_t i = 0; i < xv.size(); ++i) {
        ov[i] = xv[i] > 0.0 ? xv[i] : 0.0;
        tape.note_kink_gap(std::abs(xv[i]));
      }
      break;
    case Activation::Gelu:
      for (std::size_t i = 0; i < xv.size(); ++i) ov[i] = 0.5 * xv[i] * (1.0 + std::erf(xv[i] / std::sqrt(2.0)));
      break;
  }
  detail::finalize(tape, out, {x}, "elementwise", [x, out, kind]() mutable {
    auto g = out.grad();
    auto xg = x.mutable_grad();
    auto xv = x.values();
    auto ov = out.values();
    switch (kind) {
      case Activation::Tanh:
        for (std::size_t i = 0; i < g.size(); ++i) xg[i] += g[i] * (1.0 - ov[i] * ov[i]);
        break;
      case Activation::Sigmoid:
        for (std::size_t i = 0; i < g.size(); ++i) xg[i] += g[i] * ov[i] * (1.0 - ov[i]);
        break;
      case Activation::Relu:
        for (std::size_t i = 0; i < g.size(); ++i) xg[i] += xv[i] > 0.0 ? g[i] : 0.0;
        break;
      case Activation::Gelu:
        for (std::size_t i = 0; i < g.size(); ++i) {
          constexpr double inv_sqrt_2pi = 0.3989422804014327;
          double cdf = 0.5 * (1.0 + std::erf(xv[i] / std::sqrt(2.0)));
          double pdf = std::exp(-0.5 * xv[i] * xv[i]) * inv_sqrt_2pi;
          xg[i] += g[i] * (cdf + xv[i] * pdf);
        }
        break;
    }
  });
  return out;
}

inline Tensor tanh_op(Tape& t, const Tensor& x) { return elementwise(t, Activation::Tanh, x); }
inline Tensor sigmoid(Tape& t, const Tensor& x) { return elementwise(t, Activation::Sigmoid, x); }
inline Tensor relu(Tape& t, const Tensor& x) { return elementwise(t, Activation::Relu, x); }
inline Tensor gelu(Tape& t, const Tensor& x) { return elementwise(t, Activation::Gelu, x); }

inline Tensor log_op(Tape& tape, const Tensor& x) {
  Tensor out = Tensor::zeros(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) out.mutable_values()[i] = std::log(x.values()[i]);
  detail::finalize(tape, out, {x}, "log", [x, out]() mutable {
    auto g = out.grad();
    auto xg = x.mutable_grad();
    for (std::size_t i = 0; i < g.size(); ++i) xg[i] += g[i] / x.values()[i];
  });
  return out;
}

// Gradient passes through inside [lo, hi], is cut at the bounds.
inline Tensor clamp(Tape& tape, const Tensor& x, double lo, double hi) {
  Tensor out = Tensor::zeros(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) {
    double v = x.values()[i];
    out.mutable_values()[i] = std::min(std::max(v, lo), hi);
    tape.note_kink_gap(std::min(std::abs(v - lo), std::abs(v - hi)));
  }
  detail::finalize(tape, out, {x}, "clamp", [x, out, lo, hi]() mutable {
    auto g = out.grad();
    auto xg = x.mutable_grad();
    auto xv = x.values();
    for (std::size_t i = 0; i < g.size(); ++i)
      if (xv[i] >= lo && xv[i] <= hi) xg[i] += g[i];
  });
  return out;
}

// ---------------------------------------------------------------------------
// Softmax
// ---------------------------------------------------------------------------

namespace detail {

// Shared core: optional key mask zeroes out masked columns of each row.
inline Tensor softmax_rows_impl(Tape& tape, const Tensor& x, const std::vector<std::uint8_t>* mask) {
  if (x.rank() != 2 || x.extent(1) == 0)
    throw ShapeError("softmax_rows expects a non-empty matrix, got " + shape_str(x.shape()));
  const std::size_t m = x.extent(0), n = x.extent(1);
  if (mask && mask->size() != n) throw ShapeError("softmax mask length does not match column count");
  Tensor out = Tensor::zeros(x.shape());
  for (std::size_t i = 0; i < m; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j)
      if (!mask || (*mask)[j]) mx = std::max(mx, x.values()[i * n + j]);
    if (!std::isfinite(mx)) throw NumericError("softmax_rows: row with no unmasked entries");
    double denom = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      double e = (!mask || (*mask)[j]) ? std::exp(x.values()[i * n + j] - mx) : 0.0;
      out.mutable_values()[i * n + j] = e;
      denom += e;
    }
    for (std::size_t j = 0; j < n; ++j) out.mutable_values()[i * n + j] /= denom;
  }
  detail::finalize(tape, out, {x}, "softmax_rows", [x, out, m, n]() mutable {
    auto g = out.grad();
    auto y = out.values();
    auto xg = x.mutable_grad();
    for (std::size_t i = 0; i < m; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += g[i * n + j] * y[i * n + j];
      for (std::size_t j = 0; j < n; ++j) xg[i * n + j] += y[i * n + j] * (g[i * n + j] - dot);
    }
  });
  return out;
}

}  // namespace detail

inline Tensor softmax_rows(Tape& tape, const Tensor& x) { return detail::softmax_rows_impl(tape, x, nullptr); }

// mask[j] == 0 excludes key column j: it gets exactly zero weight in every row.
inline Tensor softmax_rows_masked(Tape& tape, const Tensor& x, const std::vector<std::uint8_t>& key_mask) {
  return detail::softmax_rows_impl(tape, x, &key_mask);
}

// ---------------------------------------------------------------------------
// Normalization and reductions
// ---------------------------------------------------------------------------

inline Tensor layer_norm(Tape& tape, const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-9) {
  if (x.rank() != 2 || x.extent(1) < 2) throw ShapeError("layer_norm expects m x d input with d >= 2");
  if (gain.shape() != Shape{x.extent(1)} || bias.shape() != Shape{x.extent(1)})
    throw ShapeError("layer_norm gain/bias must be [d] vectors");
  const std::size_t m = x.extent(0), d = x.extent(1);
  Tensor out = Tensor::zeros(x.shape());
  std::vector<double> inv_sigma(m), xhat(m * d);
  for (std::size_t i = 0; i < m; ++i) {
    double mean = 0.0;
    for (std::size_t j = 0; j < d; ++j) mean += x.values()[i * d + j];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      double c = x.values()[i * d + j] - mean;
      var += c * c;
    }
    var /= static_cast<double>(d);
    inv_sigma[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) {
      double h = (x.values()[i * d + j] - mean) * inv_sigma[i];
      xhat[i * d + j] = h;
      out.mutable_values()[i * d + j] = gain.values()[j] * h + bias.values()[j];
    }
  }
  detail::finalize(tape, out, {x, gain, bias}, "layer_norm",
                   [x, gain, bias, out, m, d, inv_sigma = std::move(inv_sigma), xhat = std::move(xhat)]() mutable {
                     auto g = out.grad();
                     if (gain.requires_grad()) {
                       auto gg = gain.mutable_grad();
                       for (std::size_t i = 0; i < m; ++i)
                         for (std::size_t j = 0; j < d; ++j) gg[j] += g[i * d + j] * xhat[i * d + j];
                     }
                     if (bias.requires_grad()) {
                       auto bg = bias.mutable_grad();
                       for (std::size_t i = 0; i < m; ++i)
                         for (std::size_t j = 0; j < d; ++j) bg[j] += g[i * d + j];
                     }
                     if (x.requires_grad()) {
                       auto xg = x.mutable_grad();
                       for (std::size_t i = 0; i < m; ++i) {
                         double mean_dh = 0.0, mean_dhh = 0.0;
                         for (std::size_t j = 0; j < d; ++j) {
                           double dh = g[i * d + j] * gain.values()[j];
                           mean_dh += dh;
                           mean_dhh += dh * xhat[i * d + j];
                         }
                         mean_dh /= static_cast<double>(d);
                         mean_dhh /= static_cast<double>(d);
                         for (std::size_t j = 0; j < d; ++j) {
                           double dh = g[i * d + j] * gain.values()[j];
                           xg[i * d + j] += inv_sigma[i] * (dh - mean_dh - xhat[i * d + j] * mean_dhh);
                         }
                       }
                     }
                   });
  return out;
}

// Column-wise max over rows; gradient goes to the first argmax per column.
inline Tensor reduce_max_cols(Tape& tape, const Tensor& x) {
  if (x.rank() != 2 || x.extent(0) < 1) throw ShapeError("reduce_max_cols expects m x n with m >= 1");
  const std::size_t m = x.extent(0), n = x.extent(1);
  Tensor out = Tensor::zeros({n});
  std::vector<std::size_t> argmax(n, 0);
  for (std::size_t j = 0; j < n; ++j) {
    double best = x.values()[j];
    double second = -std::numeric_limits<double>::infinity();
    std::size_t bi = 0;
    for (std::size_t i = 1; i < m; ++i) {
      double v = x.values()[i * n + j];
      if (v > best) {
        second = best;
        best = v;
        bi = i;
      } else {
        second = std::max(second, v);
      }
    }
    if (m > 1) tape.note_kink_gap(best - second);
    out.mutable_values()[j] = best;
    argmax[j] = bi;
  }
  detail::finalize(tape, out, {x}, "reduce_max_cols", [x, out, n, argmax = std::move(argmax)]() mutable {
    auto g = out.grad();
    auto xg = x.mutable_grad();
    for (std::size_t j = 0; j < n; ++j) xg[argmax[j] * n + j] += g[j];
  });
  return out;
}

enum class SpatialAxis { Height, Width };

// Mean over one spatial axis of a C x H x W tensor; the reduced axis keeps extent 1.
inline Tensor avg_pool_axis(Tape& tape, const Tensor& x, SpatialAxis axis) {
  if (x.rank() != 3) throw ShapeError("avg_pool_axis expects C x H x W, got " + shape_str(x.shape()));
  const std::size_t C = x.extent(0), H = x.extent(1), W = x.extent(2);
  if (H == 0 || W == 0) throw ShapeError("avg_pool_axis: zero spatial extent");
  const bool over_w = axis == SpatialAxis::Width;
  Shape oshape = over_w ? Shape{C, H, 1} : Shape{C, 1, W};
  Tensor out = Tensor::zeros(oshape);
  const double denom = static_cast<double>(over_w ? W : H);
  for (std::size_t c = 0; c < C; ++c) {
    if (over_w) {
      for (std::size_t h = 0; h < H; ++h) {
        double s = 0.0;
        for (std::size_t w = 0; w < W; ++w) s += x.at(c, h, w);
        out.mutable_values()[c * H + h] = s / denom;
      }
    } else {
      for (std::size_t w = 0; w < W; ++w) {
        double s = 0.0;
        for (std::size_t h = 0; h < H; ++h) s += x.at(c, h, w);
        out.mutable_values()[c * W + w] = s / denom;
      }
    }
  }
  detail::finalize(tape, out, {x}, "avg_pool_axis", [x, out, C, H, W, over_w, denom]() mutable {
    auto g = out.grad();
    auto xg = x.mutable_grad();
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t h = 0; h < H; ++h)
        for (std::size_t w = 0; w < W; ++w)
          xg[(c * H + h) * W + w] += (over_w ? g[c * H + h] : g[c * W + w]) / denom;
  });
  return out;
}

inline Tensor sum_all(Tape& tape, const Tensor& x) {
  double s = std::accumulate(x.values().begin(), x.values().end(), 0.0);
  Tensor out = Tensor::scalar(s);
  detail::finalize(tape, out, {x}, "sum_all", [x, out]() mutable {
    double g = out.grad()[0];
    auto xg = x.mutable_grad();
    for (std::size_t i = 0; i < xg.size(); ++i) xg[i] += g;
  });
  return out;
}

// ---------------------------------------------------------------------------
// Shape manipulation
// ---------------------------------------------------------------------------

inline Tensor reshape(Tape& tape, const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel())
    throw ShapeError("reshape " + shape_str(x.shape()) + " -> " + shape_str(shape) + " changes element count");
  Tensor out = Tensor::from_data(std::move(shape), std::vector<double>(x.values().begin(), x.values().end()));
  detail::finalize(tape, out, {x}, "reshape", [x, out]() mutable {
    auto g = out.grad();
    auto xg = x.mutable_grad();
    for (std::size_t i = 0; i < g.size(); ++i) xg[i] += g[i];
  });
  return out;
}

inline Tensor concat(Tape& tape, const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat of zero tensors");
  const Shape& base = parts[0].shape();
  if (axis >= base.size()) throw ShapeError("concat axis out of range");
  Shape oshape = base;
  oshape[axis] = 0;
  for (const Tensor& p : parts) {
    if (p.rank() != base.size()) throw ShapeError("concat rank mismatch");
    for (std::size_t a = 0; a < base.size(); ++a)
      if (a != axis && p.shape()[a] != base[a])
        throw ShapeError("concat extent mismatch off-axis: " + shape_str(p.shape()) + " vs " + shape_str(base));
    oshape[axis] += p.shape()[axis];
  }
  // outer = product of extents before axis, inner = product after.
  std::size_t outer = 1, inner = 1;
  for (std::size_t a = 0; a < axis; ++a) outer *= base[a];
  for (std::size_t a = axis + 1; a < base.size(); ++a) inner *= base[a];
  Tensor out = Tensor::zeros(oshape);
  const std::size_t out_axis = oshape[axis];
  std::size_t offset = 0;
  for (const Tensor& p : parts) {
    const std::size_t pa = p.shape()[axis];
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t a = 0; a < pa; ++a)
        for (std::size_t i = 0; i < inner; ++i)
          out.mutable_values()[(o * out_axis + offset + a) * inner + i] = p.values()[(o * pa + a) * inner + i];
    offset += pa;
  }
  detail::finalize(tape, out, parts, "concat",
                   [parts, out, outer, inner, out_axis, axis]() mutable {
                     auto g = out.grad();
                     std::size_t offset = 0;
                     for (Tensor p : parts) {
                       const std::size_t pa = p.shape()[axis];
                       if (p.requires_grad()) {
                         auto pg = p.mutable_grad();
                         for (std::size_t o = 0; o < outer; ++o)
                           for (std::size_t a = 0; a < pa; ++a)
                             for (std::size_t i = 0; i < inner; ++i)
                               pg[(o * pa + a) * inner + i] += g[(o * out_axis + offset + a) * inner + i];
                       }
                       offset += pa;
                     }
                   });
  return out;
}

inline Tensor slice_rows(Tape& tape, const Tensor& x, std::size_t r0, std::size_t r1) {
  if (x.rank() != 2 || r0 >= r1 || r1 > x.extent(0)) throw ShapeError("slice_rows out of range");
  const std::size_t n = x.extent(1);
  Tensor out = Tensor::zeros({r1 - r0, n});
  std::copy(x.values().begin() + r0 * n, x.values().begin() + r1 * n, out.mutable_values().begin());
  detail::finalize(tape, out, {x}, "slice_rows", [x, out, r0, n]() mutable {
    auto g = out.grad();
    auto xg = x.mutable_grad();
    for (std::size_t i = 0; i < g.size(); ++i) xg[r0 * n + i] += g[i];
  });
  return out;
}

inline Tensor slice_cols(Tape& tape, const Tensor& x, std::size_t c0, std::size_t c1) {
  if (x.rank() != 2 || c0 >= c1 || c1 > x.extent(1)) throw ShapeError("slice_cols out of range");
  const std::size_t m = x.extent(0), n = x.extent(1), w = c1 - c0;
  Tensor out = Tensor::zeros({m, w});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < w; ++j) out.mutable_values()[i * w + j] = x.values()[i * n + c0 + j];
  detail::finalize(tape, out, {x}, "slice_cols", [x, out, c0, m, n, w]() mutable {
    auto g = out.grad();
    auto xg = x.mutable_grad();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < w; ++j) xg[i * n + c0 + j] += g[i * w + j];
  });
  return out;
}

// x (C x H x W) times a gate with one singleton spatial axis (C x H x 1 or C x 1 x W).
// The two broadcast products sanctioned for the spatial attention output.
inline Tensor mul_broadcast(Tape& tape, const Tensor& x, const Tensor& gate) {
  if (x.rank() != 3 || gate.rank() != 3 || gate.extent(0) != x.extent(0))
    throw ShapeError("mul_broadcast expects C x H x W tensors with matching channels");
  const std::size_t C = x.extent(0), H = x.extent(1), W = x.extent(2);
  bool over_w = gate.extent(1) == H && gate.extent(2) == 1;   // gate C x H x 1, broadcast along W
  bool over_h = gate.extent(1) == 1 && gate.extent(2) == W;   // gate C x 1 x W, broadcast along H
  if (!over_w && !over_h)
    throw ShapeError("mul_broadcast gate shape " + shape_str(gate.shape()) + " does not broadcast over " +
                     shape_str(x.shape()));
  // On a 1x1 grid both readings coincide; either works.
  Tensor out = Tensor::zeros(x.shape());
  auto gate_at = [&](std::size_t c, std::size_t h, std::size_t w) {
    return over_w ? gate.values()[c * H + h] : gate.values()[c * W + w];
  };
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t h = 0; h < H; ++h)
      for (std::size_t w = 0; w < W; ++w)
        out.mutable_values()[(c * H + h) * W + w] = x.at(c, h, w) * gate_at(c, h, w);
  detail::finalize(tape, out, {x, gate}, "mul_broadcast", [x, gate, out, C, H, W, over_w]() mutable {
    auto g = out.grad();
    auto gidx = [&](std::size_t c, std::size_t h, std::size_t w) { return over_w ? c * H + h : c * W + w; };
    if (x.requires_grad()) {
      auto xg = x.mutable_grad();
      for (std::size_t c = 0; c < C; ++c)
        for (std::size_t h = 0; h < H; ++h)
          for (std::size_t w = 0; w < W; ++w)
            xg[(c * H + h) * W + w] += g[(c * H + h) * W + w] * gate.values()[gidx(c, h, w)];
    }
    if (gate.requires_grad()) {
      auto gg = gate.mutable_grad();
      for (std::size_t c = 0; c < C; ++c)
        for (std::size_t h = 0; h < H; ++h)
          for (std::size_t w = 0; w < W; ++w)
            gg[gidx(c, h, w)] += g[(c * H + h) * W + w] * x.at(c, h, w);
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Lookup and regularization
// ---------------------------------------------------------------------------

// Row gather from an embedding table; backward scatter-adds into the table.
inline Tensor embed(Tape& tape, const Tensor& table, const std::vector<int>& ids) {
  if (table.rank() != 2) throw ShapeError("embed expects a V x d table");
  const std::size_t V = table.extent(0), d = table.extent(1);
  for (int id : ids)
    if (id < 0 || static_cast<std::size_t>(id) >= V)
      throw DataError("token id " + std::to_string(id) + " outside vocabulary of size " + std::to_string(V));
  Tensor out = Tensor::zeros({ids.size(), d});
  for (std::size_t t = 0; t < ids.size(); ++t)
    std::copy(table.values().begin() + ids[t] * d, table.values().begin() + (ids[t] + 1) * d,
              out.mutable_values().begin() + t * d);
  detail::finalize(tape, out, {table}, "embed", [table, out, ids, d]() mutable {
    auto g = out.grad();
    auto tg = table.mutable_grad();
    for (std::size_t t = 0; t < ids.size(); ++t)
      for (std::size_t j = 0; j < d; ++j) tg[ids[t] * d + j] += g[t * d + j];
  });
  return out;
}

// Inverted dropout: kept entries are scaled by 1/(1-rate). rate <= 0 is a no-op.
inline Tensor dropout(Tape& tape, const Tensor& x, double rate, std::mt19937_64& rng) {
  if (rate <= 0.0) return x;
  if (rate >= 1.0) throw ConfigError("dropout rate must be < 1");
  std::uniform_real_distribution<double> dist(0.0, 1.0);
  std::vector<double> keep(x.numel());
  const double inv = 1.0 / (1.0 - rate);
  for (double& k : keep) k = dist(rng) < rate ? 0.0 : inv;
  Tensor out = Tensor::zeros(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) out.mutable_values()[i] = x.values()[i] * keep[i];
  detail::finalize(tape, out, {x}, "dropout", [x, out, keep = std::move(keep)]() mutable {
    auto g = out.grad();
    auto xg = x.mutable_grad();
    for (std::size_t i = 0; i < g.size(); ++i) xg[i] += g[i] * keep[i];
  });
  return out;
}

}  // namespace mmsd
