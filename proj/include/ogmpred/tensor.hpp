#pragma once

// Dense tensors and a small reverse-mode automatic differentiation engine.
//
// A Var is a shared node holding a value, an optional gradient and a closure
// that pushes its gradient to its parents. backward() sorts the graph reachable
// from a scalar loss (depth-first, parents in insertion order) and runs the
// closures in reverse, so accumulation order is fixed for a given graph.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "ogmpred/errors.hpp"

namespace ogmpred::nn {

using Shape = std::vector<int>;

inline std::size_t shape_size(const Shape& s) {
  std::size_t n = 1;
  for (int d : s) n *= static_cast<std::size_t>(d);
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "(";
  for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "," : "") + std::to_string(s[i]);
  return out + ")";
}

/// Heap buffer with Eigen's maximum alignment. Eigen kernels peel loops by
/// address, so a fixed alignment keeps results identical from run to run.
template <class T>
using AlignedVector = std::vector<T, Eigen::aligned_allocator<T>>;

template <class T>
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T(0)) : shape_(std::move(shape)), data_(shape_size(shape_), fill) {
    for (int d : shape_)
      if (d < 0) throw ShapeError("Tensor: negative dimension");
  }
  Tensor(Shape shape, const std::vector<T>& data) : shape_(std::move(shape)), data_(data.begin(), data.end()) {
    if (data_.size() != shape_size(shape_)) throw ShapeError("Tensor: data size does not match shape " + shape_str(shape_));
  }

  [[nodiscard]] const Shape& shape() const { return shape_; }
  [[nodiscard]] int rank() const { return static_cast<int>(shape_.size()); }
  [[nodiscard]] int dim(int i) const { return shape_.at(static_cast<std::size_t>(i)); }
  [[nodiscard]] std::size_t size() const { return data_.size(); }
  [[nodiscard]] bool empty() const { return data_.empty(); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::span<T> values() { return data_; }
  std::span<const T> values() const { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  /// Element of a rank-4 (N, C, H, W) tensor.
  T& at(int n, int c, int h, int w) { return data_[offset(n, c, h, w)]; }
  const T& at(int n, int c, int h, int w) const { return data_[offset(n, c, h, w)]; }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  [[nodiscard]] bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
  }

  template <class U>
  [[nodiscard]] Tensor<U> cast() const {
    Tensor<U> out(shape_);
    std::transform(data_.begin(), data_.end(), out.data(), [](T v) { return static_cast<U>(v); });
    return out;
  }

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  [[nodiscard]] std::size_t offset(int n, int c, int h, int w) const {
    return ((static_cast<std::size_t>(n) * shape_[1] + c) * shape_[2] + h) * shape_[3] + w;
  }

  Shape shape_;
  AlignedVector<T> data_;
};

// ---------------------------------------------------------------------------
// Graph nodes

template <class T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  Tensor<T>& ensure_grad() {
    if (grad.empty() && !value.empty()) grad = Tensor<T>(value.shape());
    return grad;
  }
  [[nodiscard]] const Shape& shape() const { return value.shape(); }
};

template <class T>
using Var = std::shared_ptr<Node<T>>;

namespace detail {
inline thread_local bool grad_enabled = true;
#ifdef NDEBUG
inline thread_local bool numeric_checks = false;
#else
inline thread_local bool numeric_checks = true;
#endif
}  // namespace detail

/// Disables graph recording on this thread for the guard's lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_enabled) { detail::grad_enabled = false; }
  ~NoGradGuard() { detail::grad_enabled = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Turns the per-op finiteness check on or off (on by default in debug builds).
inline void set_numeric_checks(bool on) { detail::numeric_checks = on; }
inline bool numeric_checks_enabled() { return detail::numeric_checks; }

template <class T>
Var<T> constant(Tensor<T> value) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  return n;
}

template <class T>
Var<T> parameter(Tensor<T> value) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  n->requires_grad = true;
  return n;
}

namespace detail {

template <class T>
Var<T> make_op(Tensor<T> value, std::vector<Var<T>> parents, std::function<void(Node<T>&)> backward, const char* name) {
  if (numeric_checks && !value.all_finite()) throw NumericFault(std::string("non-finite value produced by ") + name);
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  const bool needs = grad_enabled && std::any_of(parents.begin(), parents.end(), [](const Var<T>& p) {
                       return p && p->requires_grad;
                     });
  if (needs) {
    n->requires_grad = true;
    n->parents = std::move(parents);
    n->backward_fn = std::move(backward);
  }
  return n;
}

template <class T>
void require_same_shape(const Var<T>& a, const Var<T>& b, const char* op) {
  if (a->shape() != b->shape())
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a->shape()) + " vs " + shape_str(b->shape()));
}

template <class T>
void require_rank4(const Var<T>& a, const char* op) {
  if (a->value.rank() != 4) throw ShapeError(std::string(op) + ": expected rank-4 (N,C,H,W) input");
}

template <class T>
bool wants_grad(const Var<T>& v) {
  return v && v->requires_grad;
}

}  // namespace detail

/// Reverse-mode accumulation from a scalar. Gradients add into existing ones.
template <class T>
void backward(const Var<T>& loss) {
  if (!loss || loss->value.size() != 1) throw ContractError("backward: loss must be a scalar");
  if (!loss->requires_grad) return;
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  // iterative post-order DFS
  std::vector<std::pair<Node<T>*, std::size_t>> stack{{loss.get(), 0}};
  seen.insert(loss.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node<T>* p = node->parents[next++].get();
      if (p && p->requires_grad && !seen.count(p)) {
        seen.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  loss->ensure_grad()[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
  }
}

// ---------------------------------------------------------------------------
// Elementwise ops

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  detail::require_same_shape(a, b, "add");
  Tensor<T> out = a->value;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b->value[i];
  return detail::make_op<T>(std::move(out), {a, b}, [a, b](Node<T>& self) {
    for (const auto* p : {&a, &b}) {
      if (!detail::wants_grad(*p)) continue;
      auto& g = (*p)->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  }, "add");
}

template <class T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  detail::require_same_shape(a, b, "sub");
  Tensor<T> out = a->value;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b->value[i];
  return detail::make_op<T>(std::move(out), {a, b}, [a, b](Node<T>& self) {
    if (detail::wants_grad(a)) {
      auto& g = a->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (detail::wants_grad(b)) {
      auto& g = b->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
    }
  }, "sub");
}

template <class T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  detail::require_same_shape(a, b, "mul");
  Tensor<T> out = a->value;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b->value[i];
  return detail::make_op<T>(std::move(out), {a, b}, [a, b](Node<T>& self) {
    if (detail::wants_grad(a)) {
      auto& g = a->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * b->value[i];
    }
    if (detail::wants_grad(b)) {
      auto& g = b->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * a->value[i];
    }
  }, "mul");
}

template <class T>
Var<T> div(const Var<T>& a, const Var<T>& b) {
  detail::require_same_shape(a, b, "div");
  Tensor<T> out = a->value;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] /= b->value[i];
  return detail::make_op<T>(std::move(out), {a, b}, [a, b](Node<T>& self) {
    if (detail::wants_grad(a)) {
      auto& g = a->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] / b->value[i];
    }
    if (detail::wants_grad(b)) {
      auto& g = b->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) {
        const T bv = b->value[i];
        g[i] -= self.grad[i] * a->value[i] / (bv * bv);
      }
    }
  }, "div");
}

/// y = scale * x + shift
template <class T>
Var<T> affine(const Var<T>& x, T scale, T shift) {
  Tensor<T> out = x->value;
  for (auto& v : out.values()) v = scale * v + shift;
  return detail::make_op<T>(std::move(out), {x}, [x, scale](Node<T>& self) {
    auto& g = x->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += scale * self.grad[i];
  }, "affine");
}

template <class T>
Var<T> neg(const Var<T>& x) {
  return affine(x, T(-1), T(0));
}

namespace detail {

// Unary op whose derivative is expressed through input x and output y.
template <class T, class F, class D>
Var<T> unary(const Var<T>& x, F f, D dfdx, const char* name) {
  Tensor<T> out = x->value;
  for (auto& v : out.values()) v = f(v);
  return make_op<T>(std::move(out), {x}, [x, dfdx](Node<T>& self) {
    auto& g = x->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * dfdx(x->value[i], self.value[i]);
  }, name);
}

template <class T>
T sigmoid_scalar(T v) {
  if (v >= T(0)) return T(1) / (T(1) + std::exp(-v));
  const T e = std::exp(v);
  return e / (T(1) + e);
}

}  // namespace detail

template <class T>
Var<T> sigmoid(const Var<T>& x) {
  return detail::unary(x, [](T v) { return detail::sigmoid_scalar(v); }, [](T, T y) { return y * (T(1) - y); }, "sigmoid");
}

template <class T>
Var<T> tanh(const Var<T>& x) {
  return detail::unary(x, [](T v) { return std::tanh(v); }, [](T, T y) { return T(1) - y * y; }, "tanh");
}

template <class T>
Var<T> relu(const Var<T>& x) {
  return detail::unary(x, [](T v) { return v > T(0) ? v : T(0); }, [](T v, T) { return v > T(0) ? T(1) : T(0); }, "relu");
}

/// Clamp into [lo, hi]; zero gradient outside the open interval.
template <class T>
Var<T> clamp(const Var<T>& x, T lo, T hi) {
  return detail::unary(
      x, [lo, hi](T v) { return std::clamp(v, lo, hi); },
      [lo, hi](T v, T) { return (v > lo && v < hi) ? T(1) : T(0); }, "clamp");
}

/// x^p for x > 0.
template <class T>
Var<T> pow(const Var<T>& x, T p) {
  return detail::unary(x, [p](T v) { return std::pow(v, p); }, [p](T v, T) { return p * std::pow(v, p - T(1)); }, "pow");
}

template <class T>
Var<T> sum(const Var<T>& x) {
  T s = T(0);
  for (T v : x->value.values()) s += v;
  return detail::make_op<T>(Tensor<T>({1}, s), {x}, [x](Node<T>& self) {
    auto& g = x->ensure_grad();
    const T go = self.grad[0];
    for (auto& v : g.values()) v += go;
  }, "sum");
}

template <class T>
Var<T> mean(const Var<T>& x) {
  const T n = static_cast<T>(x->value.size());
  return affine(sum(x), T(1) / n, T(0));
}

/// Sum of scalars (shape {1} each).
template <class T>
Var<T> scalar_sum(const std::vector<Var<T>>& xs) {
  if (xs.empty()) throw ContractError("scalar_sum: empty input");
  T s = T(0);
  for (const auto& x : xs) {
    if (x->value.size() != 1) throw ShapeError("scalar_sum: inputs must be scalars");
    s += x->value[0];
  }
  return detail::make_op<T>(Tensor<T>({1}, s), xs, [xs](Node<T>& self) {
    for (const auto& x : xs)
      if (detail::wants_grad(x)) x->ensure_grad()[0] += self.grad[0];
  }, "scalar_sum");
}

// ---------------------------------------------------------------------------
// Channel concat / slice on rank-4 tensors

template <class T>
Var<T> concat_channels(const std::vector<Var<T>>& xs) {
  if (xs.empty()) throw ContractError("concat_channels: empty input");
  for (const auto& x : xs) detail::require_rank4(x, "concat_channels");
  const int n = xs[0]->value.dim(0), h = xs[0]->value.dim(2), w = xs[0]->value.dim(3);
  int c_total = 0;
  for (const auto& x : xs) {
    if (x->value.dim(0) != n || x->value.dim(2) != h || x->value.dim(3) != w)
      throw ShapeError("concat_channels: batch/spatial dims differ");
    c_total += x->value.dim(1);
  }
  Tensor<T> out({n, c_total, h, w});
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  for (int b = 0; b < n; ++b) {
    int c0 = 0;
    for (const auto& x : xs) {
      const int c = x->value.dim(1);
      std::copy_n(x->value.data() + static_cast<std::size_t>(b) * c * plane, c * plane,
                  out.data() + (static_cast<std::size_t>(b) * c_total + c0) * plane);
      c0 += c;
    }
  }
  return detail::make_op<T>(std::move(out), xs, [xs, n, c_total, plane](Node<T>& self) {
    for (int b = 0; b < n; ++b) {
      int c0 = 0;
      for (const auto& x : xs) {
        const int c = x->value.dim(1);
        if (detail::wants_grad(x)) {
          auto& g = x->ensure_grad();
          const T* src = self.grad.data() + (static_cast<std::size_t>(b) * c_total + c0) * plane;
          T* dst = g.data() + static_cast<std::size_t>(b) * c * plane;
          for (std::size_t i = 0; i < c * plane; ++i) dst[i] += src[i];
        }
        c0 += c;
      }
    }
  }, "concat_channels");
}

template <class T>
Var<T> slice_channels(const Var<T>& x, int begin, int count) {
  detail::require_rank4(x, "slice_channels");
  const int n = x->value.dim(0), c = x->value.dim(1), h = x->value.dim(2), w = x->value.dim(3);
  if (begin < 0 || count < 1 || begin + count > c) throw ShapeError("slice_channels: range out of bounds");
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  Tensor<T> out({n, count, h, w});
  for (int b = 0; b < n; ++b)
    std::copy_n(x->value.data() + (static_cast<std::size_t>(b) * c + begin) * plane, count * plane,
                out.data() + static_cast<std::size_t>(b) * count * plane);
  return detail::make_op<T>(std::move(out), {x}, [x, n, c, begin, count, plane](Node<T>& self) {
    auto& g = x->ensure_grad();
    for (int b = 0; b < n; ++b) {
      T* dst = g.data() + (static_cast<std::size_t>(b) * c + begin) * plane;
      const T* src = self.grad.data() + static_cast<std::size_t>(b) * count * plane;
      for (std::size_t i = 0; i < count * plane; ++i) dst[i] += src[i];
    }
  }, "slice_channels");
}

// ---------------------------------------------------------------------------
// Convolution

/// Explicit convolution geometry. Output size per axis:
/// (in + pad_lo + pad_hi - dilation*(k-1) - 1) / stride + 1.
struct ConvGeometry {
  int stride = 1;
  int dilation = 1;
  int pad_top = 0, pad_bottom = 0, pad_left = 0, pad_right = 0;

  [[nodiscard]] int out_size(int in, int k, int lo, int hi) const {
    const int span = dilation * (k - 1) + 1;
    const int padded = in + lo + hi;
    if (padded < span) throw ShapeError("conv: kernel larger than padded input");
    return (padded - span) / stride + 1;
  }

  /// "Same" padding: output = ceil(in / stride), split with the extra cell at the end.
  static ConvGeometry same(int in_h, int in_w, int kh, int kw, int stride, int dilation) {
    ConvGeometry g;
    g.stride = stride;
    g.dilation = dilation;
    auto split = [&](int in, int k, int& lo, int& hi) {
      const int out = (in + stride - 1) / stride;
      const int total = std::max((out - 1) * stride + dilation * (k - 1) + 1 - in, 0);
      lo = total / 2;
      hi = total - lo;
    };
    split(in_h, kh, g.pad_top, g.pad_bottom);
    split(in_w, kw, g.pad_left, g.pad_right);
    return g;
  }

  static ConvGeometry valid(int stride = 1, int dilation = 1) {
    ConvGeometry g;
    g.stride = stride;
    g.dilation = dilation;
    return g;
  }
};

namespace detail {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Lowers one image (C,H,W) into columns (C*kh*kw, Ho*Wo).
template <class T>
void im2col(const T* img, int c, int h, int w, int kh, int kw, const ConvGeometry& g, int ho, int wo, T* col) {
  for (int ci = 0; ci < c; ++ci) {
    for (int ki = 0; ki < kh; ++ki) {
      for (int kj = 0; kj < kw; ++kj) {
        T* row = col + (static_cast<std::size_t>(ci * kh + ki) * kw + kj) * ho * wo;
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy * g.stride - g.pad_top + ki * g.dilation;
          T* dst = row + static_cast<std::size_t>(oy) * wo;
          if (iy < 0 || iy >= h) {
            std::fill_n(dst, wo, T(0));
            continue;
          }
          const T* src = img + (static_cast<std::size_t>(ci) * h + iy) * w;
          for (int ox = 0; ox < wo; ++ox) {
            const int ix = ox * g.stride - g.pad_left + kj * g.dilation;
            dst[ox] = (ix >= 0 && ix < w) ? src[ix] : T(0);
          }
        }
      }
    }
  }
}

// Adjoint of im2col: scatters columns back, accumulating into img.
template <class T>
void col2im(const T* col, int c, int h, int w, int kh, int kw, const ConvGeometry& g, int ho, int wo, T* img) {
  for (int ci = 0; ci < c; ++ci) {
    for (int ki = 0; ki < kh; ++ki) {
      for (int kj = 0; kj < kw; ++kj) {
        const T* row = col + (static_cast<std::size_t>(ci * kh + ki) * kw + kj) * ho * wo;
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy * g.stride - g.pad_top + ki * g.dilation;
          if (iy < 0 || iy >= h) continue;
          T* dst = img + (static_cast<std::size_t>(ci) * h + iy) * w;
          const T* src = row + static_cast<std::size_t>(oy) * wo;
          for (int ox = 0; ox < wo; ++ox) {
            const int ix = ox * g.stride - g.pad_left + kj * g.dilation;
            if (ix >= 0 && ix < w) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

}  // namespace detail

/// Cross-correlation. x: (N,Cin,H,W), weight: (Cout,Cin,kh,kw), bias: (Cout) or null.
template <class T>
Var<T> conv2d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias, const ConvGeometry& g) {
  detail::require_rank4(x, "conv2d");
  const auto& ws = weight->value.shape();
  if (ws.size() != 4) throw ShapeError("conv2d: weight must be (Cout,Cin,kh,kw)");
  const int n = x->value.dim(0), cin = x->value.dim(1), h = x->value.dim(2), w = x->value.dim(3);
  const int cout = ws[0], kh = ws[2], kw = ws[3];
  if (ws[1] != cin)
    throw ShapeError("conv2d: input has " + std::to_string(cin) + " channels, weight expects " + std::to_string(ws[1]));
  if (bias && (bias->value.size() != static_cast<std::size_t>(cout))) throw ShapeError("conv2d: bias size mismatch");
  if (g.stride < 1 || g.dilation < 1) throw ShapeError("conv2d: stride and dilation must be >= 1");
  const int ho = g.out_size(h, kh, g.pad_top, g.pad_bottom);
  const int wo = g.out_size(w, kw, g.pad_left, g.pad_right);
  const int k = cin * kh * kw, p = ho * wo;

  auto cols = std::make_shared<AlignedVector<T>>(static_cast<std::size_t>(n) * k * p);
  Tensor<T> out({n, cout, ho, wo});
  using M = detail::RowMat<T>;
  Eigen::Map<const M> wm(weight->value.data(), cout, k);
  for (int b = 0; b < n; ++b) {
    T* col = cols->data() + static_cast<std::size_t>(b) * k * p;
    detail::im2col(x->value.data() + static_cast<std::size_t>(b) * cin * h * w, cin, h, w, kh, kw, g, ho, wo, col);
    Eigen::Map<const M> cm(col, k, p);
    Eigen::Map<M> om(out.data() + static_cast<std::size_t>(b) * cout * p, cout, p);
    om.noalias() = wm * cm;
    if (bias)
      for (int co = 0; co < cout; ++co) om.row(co).array() += bias->value[co];
  }
  std::vector<Var<T>> parents{x, weight};
  if (bias) parents.push_back(bias);
  return detail::make_op<T>(std::move(out), std::move(parents),
      [x, weight, bias, g, cols, n, cin, h, w, cout, kh, kw, ho, wo, k, p](Node<T>& self) {
        using M = detail::RowMat<T>;
        Eigen::Map<const M> wm(weight->value.data(), cout, k);
        AlignedVector<T> dcol(static_cast<std::size_t>(k) * p);
        for (int b = 0; b < n; ++b) {
          Eigen::Map<const M> gm(self.grad.data() + static_cast<std::size_t>(b) * cout * p, cout, p);
          Eigen::Map<const M> cm(cols->data() + static_cast<std::size_t>(b) * k * p, k, p);
          if (detail::wants_grad(weight)) {
            Eigen::Map<M> gw(weight->ensure_grad().data(), cout, k);
            gw.noalias() += gm * cm.transpose();
          }
          if (detail::wants_grad(bias)) {
            auto& gb = bias->ensure_grad();
            for (int co = 0; co < cout; ++co) gb[co] += gm.row(co).sum();
          }
          if (detail::wants_grad(x)) {
            Eigen::Map<M> dc(dcol.data(), k, p);
            dc.noalias() = wm.transpose() * gm;
            detail::col2im(dcol.data(), cin, h, w, kh, kw, g, ho, wo,
                           x->ensure_grad().data() + static_cast<std::size_t>(b) * cin * h * w);
          }
        }
      },
      "conv2d");
}

/// Same-padded convolution: spatial size ceil(H/stride) x ceil(W/stride).
template <class T>
Var<T> conv2d_same(const Var<T>& x, const Var<T>& weight, const Var<T>& bias, int stride = 1, int dilation = 1) {
  detail::require_rank4(x, "conv2d");
  const auto& ws = weight->value.shape();
  if (ws.size() != 4) throw ShapeError("conv2d: weight must be (Cout,Cin,kh,kw)");
  return conv2d(x, weight, bias,
                ConvGeometry::same(x->value.dim(2), x->value.dim(3), ws[2], ws[3], stride, dilation));
}

/// Transposed convolution, the adjoint of conv2d with the same stride and
/// symmetric padding. x: (N,Cin,H,W), weight: (Cin,Cout,k,k), bias: (Cout).
/// Output spatial size (H-1)*stride - 2*padding + k.
template <class T>
Var<T> conv_transpose2d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias, int stride, int padding) {
  detail::require_rank4(x, "conv_transpose2d");
  const auto& ws = weight->value.shape();
  if (ws.size() != 4) throw ShapeError("conv_transpose2d: weight must be (Cin,Cout,kh,kw)");
  const int n = x->value.dim(0), cin = x->value.dim(1), h = x->value.dim(2), w = x->value.dim(3);
  if (ws[0] != cin) throw ShapeError("conv_transpose2d: channel mismatch");
  const int cout = ws[1], kh = ws[2], kw = ws[3];
  if (bias && bias->value.size() != static_cast<std::size_t>(cout)) throw ShapeError("conv_transpose2d: bias size mismatch");
  if (stride < 1 || padding < 0) throw ShapeError("conv_transpose2d: bad stride/padding");
  const int ho = (h - 1) * stride - 2 * padding + kh;
  const int wo = (w - 1) * stride - 2 * padding + kw;
  if (ho < 1 || wo < 1) throw ShapeError("conv_transpose2d: empty output");
  ConvGeometry g;
  g.stride = stride;
  g.pad_top = g.pad_bottom = g.pad_left = g.pad_right = padding;
  const int k = cout * kh * kw, p = h * w;

  Tensor<T> out({n, cout, ho, wo});
  using M = detail::RowMat<T>;
  Eigen::Map<const M> wm(weight->value.data(), cin, k);
  AlignedVector<T> col(static_cast<std::size_t>(k) * p);
  for (int b = 0; b < n; ++b) {
    Eigen::Map<const M> xm(x->value.data() + static_cast<std::size_t>(b) * cin * p, cin, p);
    Eigen::Map<M> cm(col.data(), k, p);
    cm.noalias() = wm.transpose() * xm;
    T* ob = out.data() + static_cast<std::size_t>(b) * cout * ho * wo;
    detail::col2im(col.data(), cout, ho, wo, kh, kw, g, h, w, ob);
    if (bias)
      for (int co = 0; co < cout; ++co)
        for (int i = 0; i < ho * wo; ++i) ob[static_cast<std::size_t>(co) * ho * wo + i] += bias->value[co];
  }
  std::vector<Var<T>> parents{x, weight};
  if (bias) parents.push_back(bias);
  return detail::make_op<T>(std::move(out), std::move(parents),
      [x, weight, bias, g, n, cin, cout, kh, kw, h, w, ho, wo, k, p](Node<T>& self) {
        using M = detail::RowMat<T>;
        Eigen::Map<const M> wm(weight->value.data(), cin, k);
        AlignedVector<T> gcol(static_cast<std::size_t>(k) * p);
        for (int b = 0; b < n; ++b) {
          const T* gb = self.grad.data() + static_cast<std::size_t>(b) * cout * ho * wo;
          detail::im2col(gb, cout, ho, wo, kh, kw, g, h, w, gcol.data());
          Eigen::Map<const M> gc(gcol.data(), k, p);
          if (detail::wants_grad(x)) {
            Eigen::Map<M> gx(x->ensure_grad().data() + static_cast<std::size_t>(b) * cin * p, cin, p);
            gx.noalias() += wm * gc;
          }
          if (detail::wants_grad(weight)) {
            Eigen::Map<const M> xm(x->value.data() + static_cast<std::size_t>(b) * cin * p, cin, p);
            Eigen::Map<M> gw(weight->ensure_grad().data(), cin, k);
            gw.noalias() += xm * gc.transpose();
          }
          if (detail::wants_grad(bias)) {
            auto& gbias = bias->ensure_grad();
            for (int co = 0; co < cout; ++co) {
              T s = T(0);
              for (int i = 0; i < ho * wo; ++i) s += gb[static_cast<std::size_t>(co) * ho * wo + i];
              gbias[co] += s;
            }
          }
        }
      },
      "conv_transpose2d");
}

// ---------------------------------------------------------------------------
// Pooling

/// 2x2 stride-2 max pooling; ties go to the first cell in row-major order.
template <class T>
Var<T> maxpool2(const Var<T>& x) {
  detail::require_rank4(x, "maxpool2");
  const int n = x->value.dim(0), c = x->value.dim(1), h = x->value.dim(2), w = x->value.dim(3);
  if (h % 2 != 0 || w % 2 != 0) throw ShapeError("maxpool2: spatial dims must be even, got " + shape_str(x->shape()));
  const int ho = h / 2, wo = w / 2;
  Tensor<T> out({n, c, ho, wo});
  auto argmax = std::make_shared<std::vector<std::size_t>>(out.size());
  std::size_t o = 0;
  for (int b = 0; b < n; ++b)
    for (int ch = 0; ch < c; ++ch) {
      const std::size_t base = (static_cast<std::size_t>(b) * c + ch) * h * w;
      for (int i = 0; i < ho; ++i)
        for (int j = 0; j < wo; ++j, ++o) {
          std::size_t best = base + static_cast<std::size_t>(2 * i) * w + 2 * j;
          const std::size_t cand[3] = {best + 1, best + w, best + w + 1};
          for (std::size_t q : cand)
            if (x->value[q] > x->value[best]) best = q;
          out[o] = x->value[best];
          (*argmax)[o] = best;
        }
    }
  return detail::make_op<T>(std::move(out), {x}, [x, argmax](Node<T>& self) {
    auto& g = x->ensure_grad();
    for (std::size_t i = 0; i < argmax->size(); ++i) g[(*argmax)[i]] += self.grad[i];
  }, "maxpool2");
}

/// 2x2 stride-2 average pooling (odd trailing row/column dropped).
template <class T>
Var<T> avgpool2(const Var<T>& x) {
  detail::require_rank4(x, "avgpool2");
  const int n = x->value.dim(0), c = x->value.dim(1), h = x->value.dim(2), w = x->value.dim(3);
  const int ho = h / 2, wo = w / 2;
  if (ho < 1 || wo < 1) throw ShapeError("avgpool2: input too small");
  Tensor<T> out({n, c, ho, wo});
  for (int b = 0; b < n; ++b)
    for (int ch = 0; ch < c; ++ch)
      for (int i = 0; i < ho; ++i)
        for (int j = 0; j < wo; ++j)
          out.at(b, ch, i, j) = T(0.25) * (x->value.at(b, ch, 2 * i, 2 * j) + x->value.at(b, ch, 2 * i, 2 * j + 1) +
                                           x->value.at(b, ch, 2 * i + 1, 2 * j) + x->value.at(b, ch, 2 * i + 1, 2 * j + 1));
  return detail::make_op<T>(std::move(out), {x}, [x, n, c, ho, wo](Node<T>& self) {
    auto& g = x->ensure_grad();
    for (int b = 0; b < n; ++b)
      for (int ch = 0; ch < c; ++ch)
        for (int i = 0; i < ho; ++i)
          for (int j = 0; j < wo; ++j) {
            const T v = T(0.25) * self.grad.at(b, ch, i, j);
            g.at(b, ch, 2 * i, 2 * j) += v;
            g.at(b, ch, 2 * i, 2 * j + 1) += v;
            g.at(b, ch, 2 * i + 1, 2 * j) += v;
            g.at(b, ch, 2 * i + 1, 2 * j + 1) += v;
          }
  }, "avgpool2");
}

/// Copy of the value with no graph history.
template <class T>
Var<T> detach(const Var<T>& x) {
  return constant(x->value);
}

}  // namespace ogmpred::nn
