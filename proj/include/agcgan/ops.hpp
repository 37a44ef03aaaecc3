#pragma once

// Differentiable tensor operations. Shapes must agree exactly unless an op
// documents a broadcast (bias_add over dimension 1 is the only one).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "agcgan/tensor.hpp"

namespace agc {

namespace detail {

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                     " vs " + shape_str(b.shape()));
  }
}

template <typename T>
bool wants_grad(const Node<T>& self, std::size_t k) {
  return self.parents.size() > k && self.parents[k]->requires_grad;
}

// y = f(x), dy/dx = df(x, y)
template <typename T, typename F, typename DF>
Tensor<T> unary(const Tensor<T>& x, const char* op, F f, DF df) {
  const auto in = x.data();
  std::vector<T> out(in.size());
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = f(in[i]);
  return make_result<T>(op, x.shape(), std::move(out), {x}, [df](Node<T>& self) {
    auto& px = *self.parents[0];
    auto& g = px.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) {
      g[i] += self.grad[i] * df(px.value[i], self.value[i]);
    }
  });
}

}  // namespace detail

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "add");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  return detail::make_result<T>("add", a.shape(), std::move(out), {a, b}, [](Node<T>& self) {
    for (std::size_t k = 0; k < 2; ++k) {
      if (!detail::wants_grad(self, k)) continue;
      auto& g = self.parents[k]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "sub");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
  return detail::make_result<T>("sub", a.shape(), std::move(out), {a, b}, [](Node<T>& self) {
    const T sign[2] = {T(1), T(-1)};
    for (std::size_t k = 0; k < 2; ++k) {
      if (!detail::wants_grad(self, k)) continue;
      auto& g = self.parents[k]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += sign[k] * self.grad[i];
    }
  });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "mul");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  return detail::make_result<T>("mul", a.shape(), std::move(out), {a, b}, [](Node<T>& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    if (pa.requires_grad) {
      auto& g = pa.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pb.value[i];
    }
    if (pb.requires_grad) {
      auto& g = pb.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pa.value[i];
    }
  });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor) {
  return detail::unary(
      x, "scale", [factor](T v) { return factor * v; },
      [factor](T, T) { return factor; });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& x, T c) {
  return detail::unary(
      x, "add_scalar", [c](T v) { return v + c; }, [](T, T) { return T(1); });
}

template <typename T>
Tensor<T> neg(const Tensor<T>& x) {
  return scale(x, T(-1));
}

template <typename T>
Tensor<T> square(const Tensor<T>& x) {
  return detail::unary(
      x, "square", [](T v) { return v * v; }, [](T v, T) { return T(2) * v; });
}

// d|x|/dx is taken as 0 at x = 0.
template <typename T>
Tensor<T> abs(const Tensor<T>& x) {
  return detail::unary(
      x, "abs", [](T v) { return std::abs(v); },
      [](T v, T) { return v > T(0) ? T(1) : (v < T(0) ? T(-1) : T(0)); });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  return detail::unary(
      x, "relu", [](T v) { return v > T(0) ? v : T(0); },
      [](T v, T) { return v > T(0) ? T(1) : T(0); });
}

template <typename T>
Tensor<T> leaky_relu(const Tensor<T>& x, T slope = T(0.2)) {
  return detail::unary(
      x, "leaky_relu", [slope](T v) { return v > T(0) ? v : slope * v; },
      [slope](T v, T) { return v > T(0) ? T(1) : slope; });
}

template <typename T>
T stable_sigmoid(T v) {
  if (v >= T(0)) {
    const T e = std::exp(-v);
    return T(1) / (T(1) + e);
  }
  const T e = std::exp(v);
  return e / (T(1) + e);
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  return detail::unary(
      x, "sigmoid", [](T v) { return stable_sigmoid(v); },
      [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Tensor<T> tanh(const Tensor<T>& x) {
  return detail::unary(
      x, "tanh", [](T v) { return std::tanh(v); }, [](T, T y) { return T(1) - y * y; });
}

// log(1 + e^x) in the overflow-free form max(x, 0) + log1p(e^-|x|).
template <typename T>
T stable_softplus(T v) {
  return std::max(v, T(0)) + std::log1p(std::exp(-std::abs(v)));
}

template <typename T>
Tensor<T> softplus(const Tensor<T>& x) {
  return detail::unary(
      x, "softplus", [](T v) { return stable_softplus(v); },
      [](T v, T) { return stable_sigmoid(v); });
}

enum class ActivationKind { kRelu, kLeakyRelu, kSigmoid, kTanh, kIdentity };

struct Activation {
  ActivationKind kind = ActivationKind::kRelu;
  double slope = 0.2;  // leaky_relu only

  static Activation relu() { return {ActivationKind::kRelu, 0.0}; }
  static Activation leaky(double s = 0.2) { return {ActivationKind::kLeakyRelu, s}; }
  static Activation sigmoid() { return {ActivationKind::kSigmoid, 0.0}; }
  static Activation tanh() { return {ActivationKind::kTanh, 0.0}; }
  static Activation identity() { return {ActivationKind::kIdentity, 0.0}; }
};

template <typename T>
Tensor<T> activation(const Tensor<T>& x, Activation act) {
  switch (act.kind) {
    case ActivationKind::kRelu: return relu(x);
    case ActivationKind::kLeakyRelu: return leaky_relu(x, static_cast<T>(act.slope));
    case ActivationKind::kSigmoid: return sigmoid(x);
    case ActivationKind::kTanh: return tanh(x);
    case ActivationKind::kIdentity: return x;
  }
  return x;
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T acc = T(0);
  for (T v : x.data()) acc += v;
  return detail::make_result<T>("sum", Shape{1}, {acc}, {x}, [](Node<T>& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (auto& gi : g) gi += self.grad[0];
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  if (x.numel() == 0) throw ShapeError("mean: empty tensor");
  T acc = T(0);
  for (T v : x.data()) acc += v;
  const T n = static_cast<T>(x.numel());
  return detail::make_result<T>("mean", Shape{1}, {acc / n}, {x}, [n](Node<T>& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (auto& gi : g) gi += self.grad[0] / n;
  });
}

// Mean whose forward value does not depend on element order: elements are
// summed in ascending order of value.
template <typename T>
Tensor<T> mean_order_invariant(const Tensor<T>& x) {
  if (x.numel() == 0) throw ShapeError("mean_order_invariant: empty tensor");
  std::vector<T> sorted(x.data().begin(), x.data().end());
  std::sort(sorted.begin(), sorted.end());
  T acc = T(0);
  for (T v : sorted) acc += v;
  const T n = static_cast<T>(x.numel());
  return detail::make_result<T>("mean_order_invariant", Shape{1}, {acc / n}, {x},
                                [n](Node<T>& self) {
                                  auto& g = self.parents[0]->grad_buffer();
                                  for (auto& gi : g) gi += self.grad[0] / n;
                                });
}

// (N, D) -> (N): sums over the trailing dimension.
template <typename T>
Tensor<T> sum_rows(const Tensor<T>& x) {
  if (x.rank() != 2) throw ShapeError("sum_rows: expected rank 2, got " + shape_str(x.shape()));
  const std::size_t n = x.dim(0), d = x.dim(1);
  std::vector<T> out(n, T(0));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) out[i] += x.data()[i * d + j];
  return detail::make_result<T>("sum_rows", Shape{n}, std::move(out), {x}, [d](Node<T>& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < self.grad.size(); ++i)
      for (std::size_t j = 0; j < d; ++j) g[i * d + j] += self.grad[i];
  });
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (numel_of(shape) != x.numel()) {
    throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  std::vector<T> out(x.data().begin(), x.data().end());
  return detail::make_result<T>("reshape", std::move(shape), std::move(out), {x}, [](Node<T>& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

// (N, K) x (K, M) -> (N, M)
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()));
  }
  const std::size_t n = a.dim(0), k = a.dim(1), m = b.dim(1);
  std::vector<T> out(n * m, T(0));
  const auto A = a.data();
  const auto B = b.data();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      const T av = A[i * k + p];
      for (std::size_t j = 0; j < m; ++j) out[i * m + j] += av * B[p * m + j];
    }
  return detail::make_result<T>("matmul", Shape{n, m}, std::move(out), {a, b},
                                [n, k, m](Node<T>& self) {
                                  auto& pa = *self.parents[0];
                                  auto& pb = *self.parents[1];
                                  const auto& G = self.grad;
                                  if (pa.requires_grad) {
                                    auto& ga = pa.grad_buffer();
                                    for (std::size_t i = 0; i < n; ++i)
                                      for (std::size_t p = 0; p < k; ++p) {
                                        T acc = T(0);
                                        for (std::size_t j = 0; j < m; ++j)
                                          acc += G[i * m + j] * pb.value[p * m + j];
                                        ga[i * k + p] += acc;
                                      }
                                  }
                                  if (pb.requires_grad) {
                                    auto& gb = pb.grad_buffer();
                                    for (std::size_t i = 0; i < n; ++i)
                                      for (std::size_t p = 0; p < k; ++p) {
                                        const T av = pa.value[i * k + p];
                                        for (std::size_t j = 0; j < m; ++j)
                                          gb[p * m + j] += av * G[i * m + j];
                                      }
                                  }
                                });
}

// Adds a per-channel bias b (shape {C}) to x whose dimension 1 is C.
template <typename T>
Tensor<T> bias_add(const Tensor<T>& x, const Tensor<T>& b) {
  if (x.rank() < 2 || b.rank() != 1 || b.dim(0) != x.dim(1)) {
    throw ShapeError("bias_add: bias " + shape_str(b.shape()) + " does not match channels of " +
                     shape_str(x.shape()));
  }
  const std::size_t n = x.dim(0), c = x.dim(1), inner = x.numel() / (n * c);
  std::vector<T> out(x.data().begin(), x.data().end());
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t ch = 0; ch < c; ++ch) {
      T* row = out.data() + (i * c + ch) * inner;
      for (std::size_t p = 0; p < inner; ++p) row[p] += b.data()[ch];
    }
  return detail::make_result<T>("bias_add", x.shape(), std::move(out), {x, b},
                                [n, c, inner](Node<T>& self) {
                                  if (detail::wants_grad(self, 0)) {
                                    auto& g = self.parents[0]->grad_buffer();
                                    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
                                  }
                                  if (detail::wants_grad(self, 1)) {
                                    auto& g = self.parents[1]->grad_buffer();
                                    for (std::size_t i = 0; i < n; ++i)
                                      for (std::size_t ch = 0; ch < c; ++ch) {
                                        const T* row = self.grad.data() + (i * c + ch) * inner;
                                        T acc = T(0);
                                        for (std::size_t p = 0; p < inner; ++p) acc += row[p];
                                        g[ch] += acc;
                                      }
                                  }
                                });
}

// Concatenates along dimension 1. All other dimensions must agree.
template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() < 2 || a.rank() != b.rank() || a.dim(0) != b.dim(0)) {
    throw ShapeError("concat_channels: incompatible " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()));
  }
  for (std::size_t d = 2; d < a.rank(); ++d) {
    if (a.dim(d) != b.dim(d)) {
      throw ShapeError("concat_channels: incompatible " + shape_str(a.shape()) + " and " +
                       shape_str(b.shape()));
    }
  }
  const std::size_t n = a.dim(0);
  const std::size_t sa = a.numel() / n, sb = b.numel() / n;
  Shape shape = a.shape();
  shape[1] = a.dim(1) + b.dim(1);
  std::vector<T> out(a.numel() + b.numel());
  for (std::size_t i = 0; i < n; ++i) {
    std::copy_n(a.data().begin() + i * sa, sa, out.begin() + i * (sa + sb));
    std::copy_n(b.data().begin() + i * sb, sb, out.begin() + i * (sa + sb) + sa);
  }
  return detail::make_result<T>("concat_channels", std::move(shape), std::move(out), {a, b},
                                [n, sa, sb](Node<T>& self) {
                                  for (std::size_t k = 0; k < 2; ++k) {
                                    if (!detail::wants_grad(self, k)) continue;
                                    auto& g = self.parents[k]->grad_buffer();
                                    const std::size_t len = k == 0 ? sa : sb;
                                    const std::size_t off = k == 0 ? 0 : sa;
                                    for (std::size_t i = 0; i < n; ++i)
                                      for (std::size_t p = 0; p < len; ++p)
                                        g[i * len + p] += self.grad[i * (sa + sb) + off + p];
                                  }
                                });
}

// (N, C, H, W) -> (N, C)
template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
  if (x.rank() != 4) throw ShapeError("global_avg_pool: expected NCHW, got " + shape_str(x.shape()));
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  std::vector<T> out(n * c, T(0));
  for (std::size_t i = 0; i < n * c; ++i) {
    T acc = T(0);
    for (std::size_t p = 0; p < hw; ++p) acc += x.data()[i * hw + p];
    out[i] = acc / static_cast<T>(hw);
  }
  return detail::make_result<T>("global_avg_pool", Shape{n, c}, std::move(out), {x},
                                [hw](Node<T>& self) {
                                  auto& g = self.parents[0]->grad_buffer();
                                  const T inv = T(1) / static_cast<T>(hw);
                                  for (std::size_t i = 0; i < self.grad.size(); ++i)
                                    for (std::size_t p = 0; p < hw; ++p)
                                      g[i * hw + p] += self.grad[i] * inv;
                                });
}

// Per-sample, per-channel normalization over the spatial extent (no affine).
template <typename T>
Tensor<T> instance_norm(const Tensor<T>& x, T eps = T(1e-5)) {
  if (x.rank() != 4) throw ShapeError("instance_norm: expected NCHW, got " + shape_str(x.shape()));
  const std::size_t planes = x.dim(0) * x.dim(1), hw = x.dim(2) * x.dim(3);
  std::vector<T> out(x.numel());
  std::vector<T> inv_std(planes);
  for (std::size_t pl = 0; pl < planes; ++pl) {
    const T* in = x.data().data() + pl * hw;
    T mu = T(0);
    for (std::size_t p = 0; p < hw; ++p) mu += in[p];
    mu /= static_cast<T>(hw);
    T var = T(0);
    for (std::size_t p = 0; p < hw; ++p) var += (in[p] - mu) * (in[p] - mu);
    var /= static_cast<T>(hw);
    inv_std[pl] = T(1) / std::sqrt(var + eps);
    for (std::size_t p = 0; p < hw; ++p) out[pl * hw + p] = (in[p] - mu) * inv_std[pl];
  }
  return detail::make_result<T>(
      "instance_norm", x.shape(), std::move(out), {x},
      [planes, hw, inv_std = std::move(inv_std)](Node<T>& self) {
        auto& g = self.parents[0]->grad_buffer();
        const T n = static_cast<T>(hw);
        for (std::size_t pl = 0; pl < planes; ++pl) {
          const T* dy = self.grad.data() + pl * hw;
          const T* y = self.value.data() + pl * hw;
          T mean_dy = T(0), mean_dyy = T(0);
          for (std::size_t p = 0; p < hw; ++p) {
            mean_dy += dy[p];
            mean_dyy += dy[p] * y[p];
          }
          mean_dy /= n;
          mean_dyy /= n;
          for (std::size_t p = 0; p < hw; ++p)
            g[pl * hw + p] += inv_std[pl] * (dy[p] - mean_dy - y[p] * mean_dyy);
        }
      });
}

// Inverted dropout: kept elements are scaled by 1 / (1 - rate).
template <typename T, typename Rng>
Tensor<T> dropout(const Tensor<T>& x, double rate, Rng& rng) {
  if (rate < 0.0 || rate >= 1.0) throw std::invalid_argument("dropout: rate must be in [0, 1)");
  if (rate == 0.0) return x;
  std::bernoulli_distribution keep(1.0 - rate);
  const T scale_kept = static_cast<T>(1.0 / (1.0 - rate));
  std::vector<T> mask(x.numel());
  for (auto& m : mask) m = keep(rng) ? scale_kept : T(0);
  return mul(x, Tensor<T>(x.shape(), std::move(mask)));
}

}  // namespace agc
