#pragma once

// 2-D convolution and transposed convolution over NCHW tensors, lowered to
// im2col + GEMM.
//
// conv2d:            kernel OIHW, out = floor((in + 2p - k) / s) + 1
// transposed_conv2d: kernel IOHW, out = (in - 1) * s - 2p + k
//
// With k = 4, s = 2, p = 1 the two are exact mirrors: 2n -> n -> 2n.

#include <Eigen/Core>
#include <memory>
#include <string>
#include <vector>

#include "agcgan/tensor.hpp"

namespace agc {

struct ConvGeometry {
  std::size_t channels, height, width;   // "image" side
  std::size_t kh, kw, stride, padding;
  std::size_t out_h, out_w;              // "column" side

  std::size_t col_rows() const { return channels * kh * kw; }
  std::size_t col_cols() const { return out_h * out_w; }
};

namespace detail {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// image (C,H,W) -> columns block (C*kh*kw rows, ld stride), starting at column col0.
template <typename T>
void im2col(const T* image, const ConvGeometry& g, T* cols, std::size_t ld, std::size_t col0) {
  for (std::size_t c = 0; c < g.channels; ++c)
    for (std::size_t ki = 0; ki < g.kh; ++ki)
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        T* row = cols + ((c * g.kh + ki) * g.kw + kj) * ld + col0;
        for (std::size_t oh = 0; oh < g.out_h; ++oh) {
          const long ih = static_cast<long>(oh * g.stride + ki) - static_cast<long>(g.padding);
          T* dst = row + oh * g.out_w;
          if (ih < 0 || ih >= static_cast<long>(g.height)) {
            std::fill_n(dst, g.out_w, T(0));
            continue;
          }
          const T* src = image + (c * g.height + static_cast<std::size_t>(ih)) * g.width;
          for (std::size_t ow = 0; ow < g.out_w; ++ow) {
            const long iw = static_cast<long>(ow * g.stride + kj) - static_cast<long>(g.padding);
            dst[ow] = (iw < 0 || iw >= static_cast<long>(g.width)) ? T(0)
                                                                   : src[static_cast<std::size_t>(iw)];
          }
        }
      }
}

// Adjoint of im2col: scatters-adds a columns block back into image (C,H,W).
template <typename T>
void col2im(const T* cols, std::size_t ld, std::size_t col0, const ConvGeometry& g, T* image) {
  for (std::size_t c = 0; c < g.channels; ++c)
    for (std::size_t ki = 0; ki < g.kh; ++ki)
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        const T* row = cols + ((c * g.kh + ki) * g.kw + kj) * ld + col0;
        for (std::size_t oh = 0; oh < g.out_h; ++oh) {
          const long ih = static_cast<long>(oh * g.stride + ki) - static_cast<long>(g.padding);
          if (ih < 0 || ih >= static_cast<long>(g.height)) continue;
          T* dst = image + (c * g.height + static_cast<std::size_t>(ih)) * g.width;
          const T* src = row + oh * g.out_w;
          for (std::size_t ow = 0; ow < g.out_w; ++ow) {
            const long iw = static_cast<long>(ow * g.stride + kj) - static_cast<long>(g.padding);
            if (iw >= 0 && iw < static_cast<long>(g.width)) dst[iw] += src[ow];
          }
        }
      }
}

// NCHW (n, c, hw) <-> channel-major (c, n*hw)
template <typename T>
std::vector<T> to_channel_major(const T* x, std::size_t n, std::size_t c, std::size_t hw) {
  std::vector<T> out(n * c * hw);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t ch = 0; ch < c; ++ch)
      std::copy_n(x + (i * c + ch) * hw, hw, out.begin() + ch * n * hw + i * hw);
  return out;
}

template <typename T>
std::vector<T> from_channel_major(const T* x, std::size_t n, std::size_t c, std::size_t hw) {
  std::vector<T> out(n * c * hw);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t ch = 0; ch < c; ++ch)
      std::copy_n(x + ch * n * hw + i * hw, hw, out.begin() + (i * c + ch) * hw);
  return out;
}

inline void check_conv_args(const Shape& in, const Shape& k, std::size_t stride, const char* op) {
  if (in.size() != 4) throw ShapeError(std::string(op) + ": input must be NCHW, got " + shape_str(in));
  if (k.size() != 4) throw ShapeError(std::string(op) + ": kernel must be rank 4, got " + shape_str(k));
  if (stride < 1) throw ShapeError(std::string(op) + ": stride must be >= 1");
}

}  // namespace detail

inline std::size_t conv_out_size(std::size_t in, std::size_t k, std::size_t stride,
                                 std::size_t padding) {
  if (in + 2 * padding < k) {
    throw ShapeError("conv2d: kernel " + std::to_string(k) + " larger than padded input " +
                     std::to_string(in + 2 * padding));
  }
  return (in + 2 * padding - k) / stride + 1;
}

inline std::size_t transposed_conv_out_size(std::size_t in, std::size_t k, std::size_t stride,
                                            std::size_t padding) {
  const std::size_t full = (in - 1) * stride + k;
  if (full < 2 * padding + 1) {
    throw ShapeError("transposed_conv2d: padding " + std::to_string(padding) + " too large");
  }
  return full - 2 * padding;
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& kernel, std::size_t stride,
                 std::size_t padding) {
  detail::check_conv_args(input.shape(), kernel.shape(), stride, "conv2d");
  const std::size_t n = input.dim(0), cin = input.dim(1), h = input.dim(2), w = input.dim(3);
  const std::size_t cout = kernel.dim(0);
  if (kernel.dim(1) != cin) {
    throw ShapeError("conv2d: kernel expects " + std::to_string(kernel.dim(1)) +
                     " input channels, input " + shape_str(input.shape()) + " has " +
                     std::to_string(cin));
  }
  ConvGeometry g{cin, h, w, kernel.dim(2), kernel.dim(3), stride, padding, 0, 0};
  g.out_h = conv_out_size(h, g.kh, stride, padding);
  g.out_w = conv_out_size(w, g.kw, stride, padding);
  const std::size_t rows = g.col_rows(), per = g.col_cols(), ld = n * per;

  auto cols = std::make_shared<std::vector<T>>(rows * ld);
  for (std::size_t i = 0; i < n; ++i)
    detail::im2col(input.data().data() + i * cin * h * w, g, cols->data(), ld, i * per);

  using M = detail::RowMat<T>;
  Eigen::Map<const M> K(kernel.data().data(), cout, rows);
  Eigen::Map<const M> C(cols->data(), rows, ld);
  M Y = K * C;  // (cout, n*per)
  auto out = detail::from_channel_major(Y.data(), n, cout, per);

  return detail::make_result<T>(
      "conv2d", Shape{n, cout, g.out_h, g.out_w}, std::move(out), {input, kernel},
      [g, n, cout, cols](Node<T>& self) {
        const std::size_t rows = g.col_rows(), per = g.col_cols(), ld = n * per;
        auto dy = detail::to_channel_major(self.grad.data(), n, cout, per);
        Eigen::Map<const M> DY(dy.data(), cout, ld);
        auto& pin = *self.parents[0];
        auto& pk = *self.parents[1];
        if (pk.requires_grad) {
          auto& gk = pk.grad_buffer();
          Eigen::Map<M> GK(gk.data(), cout, rows);
          Eigen::Map<const M> C(cols->data(), rows, ld);
          GK.noalias() += DY * C.transpose();
        }
        if (pin.requires_grad) {
          Eigen::Map<const M> K(pk.value.data(), cout, rows);
          M dcols = K.transpose() * DY;
          auto& gi = pin.grad_buffer();
          const std::size_t img = g.channels * g.height * g.width;
          for (std::size_t i = 0; i < n; ++i)
            detail::col2im(dcols.data(), ld, i * per, g, gi.data() + i * img);
        }
      });
}

template <typename T>
Tensor<T> transposed_conv2d(const Tensor<T>& input, const Tensor<T>& kernel, std::size_t stride,
                            std::size_t padding) {
  detail::check_conv_args(input.shape(), kernel.shape(), stride, "transposed_conv2d");
  const std::size_t n = input.dim(0), cin = input.dim(1), h = input.dim(2), w = input.dim(3);
  if (kernel.dim(0) != cin) {
    throw ShapeError("transposed_conv2d: kernel expects " + std::to_string(kernel.dim(0)) +
                     " input channels, input " + shape_str(input.shape()) + " has " +
                     std::to_string(cin));
  }
  const std::size_t cout = kernel.dim(1);
  const std::size_t oh = transposed_conv_out_size(h, kernel.dim(2), stride, padding);
  const std::size_t ow = transposed_conv_out_size(w, kernel.dim(3), stride, padding);
  // Geometry of the adjoint convolution: the output is the "image" side.
  ConvGeometry g{cout, oh, ow, kernel.dim(2), kernel.dim(3), stride, padding, h, w};
  if (conv_out_size(oh, g.kh, stride, padding) != h || conv_out_size(ow, g.kw, stride, padding) != w) {
    throw ShapeError("transposed_conv2d: inconsistent geometry for input " + shape_str(input.shape()));
  }
  const std::size_t rows = g.col_rows(), per = g.col_cols(), ld = n * per;

  using M = detail::RowMat<T>;
  auto xcm = std::make_shared<std::vector<T>>(
      detail::to_channel_major(input.data().data(), n, cin, per));
  Eigen::Map<const M> X(xcm->data(), cin, ld);
  Eigen::Map<const M> K(kernel.data().data(), cin, rows);
  M cols = K.transpose() * X;  // (rows, n*per)
  std::vector<T> out(n * cout * oh * ow, T(0));
  const std::size_t img = cout * oh * ow;
  for (std::size_t i = 0; i < n; ++i) detail::col2im(cols.data(), ld, i * per, g, out.data() + i * img);

  return detail::make_result<T>(
      "transposed_conv2d", Shape{n, cout, oh, ow}, std::move(out), {input, kernel},
      [g, n, cin, xcm](Node<T>& self) {
        const std::size_t rows = g.col_rows(), per = g.col_cols(), ld = n * per;
        const std::size_t img = g.channels * g.height * g.width;
        std::vector<T> dcols(rows * ld);
        for (std::size_t i = 0; i < n; ++i)
          detail::im2col(self.grad.data() + i * img, g, dcols.data(), ld, i * per);
        Eigen::Map<const M> DC(dcols.data(), rows, ld);
        auto& pin = *self.parents[0];
        auto& pk = *self.parents[1];
        if (pk.requires_grad) {
          auto& gk = pk.grad_buffer();
          Eigen::Map<M> GK(gk.data(), cin, rows);
          Eigen::Map<const M> X(xcm->data(), cin, ld);
          GK.noalias() += X * DC.transpose();
        }
        if (pin.requires_grad) {
          Eigen::Map<const M> K(pk.value.data(), cin, rows);
          M dx = K * DC;  // (cin, n*per)
          auto& gi = pin.grad_buffer();
          auto back = detail::from_channel_major(dx.data(), n, cin, per);
          for (std::size_t i = 0; i < gi.size(); ++i) gi[i] += back[i];
        }
      });
}

}  // namespace agc
