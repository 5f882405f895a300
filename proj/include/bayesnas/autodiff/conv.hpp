#pragma once

#include <algorithm>
#include <cstddef>
#include <string>
#include <vector>

#include "bayesnas/autodiff/tensor.hpp"
#include "bayesnas/error.hpp"

namespace bayesnas {

namespace detail {

// Geometry of a convolution from an image [channels x height x width] to a
// grid of out_h x out_w windows.
struct ConvGeom {
  std::size_t channels, height, width, kernel, stride, pad, out_h, out_w;

  std::size_t rows() const { return channels * kernel * kernel; }
  std::size_t pixels() const { return out_h * out_w; }
};

inline std::size_t conv_out_size(std::size_t in, std::size_t k, std::size_t stride, std::size_t pad) {
  if (in + 2 * pad < k) throw DimensionError("convolution kernel larger than padded input");
  return (in + 2 * pad - k) / stride + 1;
}

inline void im2col(const double* img, const ConvGeom& g, double* cols) {
  const long pad = static_cast<long>(g.pad);
  for (std::size_t c = 0; c < g.channels; ++c)
    for (std::size_t ki = 0; ki < g.kernel; ++ki)
      for (std::size_t kj = 0; kj < g.kernel; ++kj) {
        double* row = cols + ((c * g.kernel + ki) * g.kernel + kj) * g.pixels();
        for (std::size_t oh = 0; oh < g.out_h; ++oh) {
          const long ih = static_cast<long>(oh * g.stride + ki) - pad;
          for (std::size_t ow = 0; ow < g.out_w; ++ow) {
            const long iw = static_cast<long>(ow * g.stride + kj) - pad;
            const bool inside = ih >= 0 && iw >= 0 && ih < static_cast<long>(g.height) &&
                                iw < static_cast<long>(g.width);
            row[oh * g.out_w + ow] =
                inside ? img[(c * g.height + static_cast<std::size_t>(ih)) * g.width +
                             static_cast<std::size_t>(iw)]
                       : 0.0;
          }
        }
      }
}

// Adjoint of im2col: accumulates columns back into the image.
inline void col2im(const double* cols, const ConvGeom& g, double* img) {
  const long pad = static_cast<long>(g.pad);
  for (std::size_t c = 0; c < g.channels; ++c)
    for (std::size_t ki = 0; ki < g.kernel; ++ki)
      for (std::size_t kj = 0; kj < g.kernel; ++kj) {
        const double* row = cols + ((c * g.kernel + ki) * g.kernel + kj) * g.pixels();
        for (std::size_t oh = 0; oh < g.out_h; ++oh) {
          const long ih = static_cast<long>(oh * g.stride + ki) - pad;
          if (ih < 0 || ih >= static_cast<long>(g.height)) continue;
          for (std::size_t ow = 0; ow < g.out_w; ++ow) {
            const long iw = static_cast<long>(ow * g.stride + kj) - pad;
            if (iw < 0 || iw >= static_cast<long>(g.width)) continue;
            img[(c * g.height + static_cast<std::size_t>(ih)) * g.width + static_cast<std::size_t>(iw)] +=
                row[oh * g.out_w + ow];
          }
        }
      }
}

// out[o x P] += W[o x R] * cols[R x P]
inline void gemm_acc(const double* W, const double* cols, double* out, std::size_t O, std::size_t R,
                     std::size_t P) {
  for (std::size_t o = 0; o < O; ++o) {
    double* orow = out + o * P;
    for (std::size_t r = 0; r < R; ++r) {
      const double w = W[o * R + r];
      if (w == 0.0) continue;
      const double* crow = cols + r * P;
      for (std::size_t p = 0; p < P; ++p) orow[p] += w * crow[p];
    }
  }
}

// cols[R x P] = W[O x R]^T * G[O x P]
inline void gemm_tn(const double* W, const double* G, double* cols, std::size_t O, std::size_t R,
                    std::size_t P) {
  std::fill(cols, cols + R * P, 0.0);
  for (std::size_t o = 0; o < O; ++o) {
    const double* grow = G + o * P;
    for (std::size_t r = 0; r < R; ++r) {
      const double w = W[o * R + r];
      if (w == 0.0) continue;
      double* crow = cols + r * P;
      for (std::size_t p = 0; p < P; ++p) crow[p] += w * grow[p];
    }
  }
}

// gW[O x R] += G[O x P] * cols[R x P]^T
inline void gemm_nt_acc(const double* G, const double* cols, double* gW, std::size_t O, std::size_t R,
                        std::size_t P) {
  for (std::size_t o = 0; o < O; ++o) {
    const double* grow = G + o * P;
    for (std::size_t r = 0; r < R; ++r) {
      const double* crow = cols + r * P;
      double acc = 0.0;
      for (std::size_t p = 0; p < P; ++p) acc += grow[p] * crow[p];
      gW[o * R + r] += acc;
    }
  }
}

}  // namespace detail

/// 2-D convolution. x: [b x c x h x w], w: [o x c x k x k], bias: [o] or undefined.
inline Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, std::size_t stride,
                     std::size_t padding) {
  if (x.rank() != 4 || w.rank() != 4) {
    throw DimensionError("conv2d expects 4-d input and weight, got " + shape_str(x.shape()) + " and " +
                         shape_str(w.shape()));
  }
  if (x.dim(1) != w.dim(1)) {
    throw DimensionError("conv2d: input channels " + shape_str(x.shape()) + " do not match weight " +
                         shape_str(w.shape()));
  }
  if (w.dim(2) != w.dim(3) || w.dim(2) % 2 == 0) throw DimensionError("conv2d: kernel must be square and odd");
  if (stride == 0) throw DimensionError("conv2d: stride must be >= 1");
  const std::size_t B = x.dim(0), O = w.dim(0), K = w.dim(2);
  const detail::ConvGeom g{x.dim(1), x.dim(2), x.dim(3), K, stride, padding,
                           detail::conv_out_size(x.dim(2), K, stride, padding),
                           detail::conv_out_size(x.dim(3), K, stride, padding)};
  const bool has_bias = bias.defined();
  if (has_bias && bias.numel() != O) throw DimensionError("conv2d: bias size mismatch");
  const std::size_t R = g.rows(), P = g.pixels(), in_sz = g.channels * g.height * g.width;
  std::vector<double> out(B * O * P, 0.0);
  std::vector<double> cols(R * P);
  for (std::size_t b = 0; b < B; ++b) {
    detail::im2col(x.data().data() + b * in_sz, g, cols.data());
    double* ob = out.data() + b * O * P;
    detail::gemm_acc(w.data().data(), cols.data(), ob, O, R, P);
    if (has_bias)
      for (std::size_t o = 0; o < O; ++o)
        for (std::size_t p = 0; p < P; ++p) ob[o * P + p] += bias[o];
  }
  auto make = [x, w, bias, g, B, O, R, P, in_sz, has_bias](detail::Node* node) {
    return [x, w, bias, g, B, O, R, P, in_sz, has_bias, node]() {
      std::vector<double> cols(R * P);
      for (std::size_t b = 0; b < B; ++b) {
        const double* gy = node->grad.data() + b * O * P;
        if (w.requires_grad()) {
          detail::im2col(x.data().data() + b * in_sz, g, cols.data());
          detail::gemm_nt_acc(gy, cols.data(), w.impl()->grad_buffer().data(), O, R, P);
        }
        if (x.requires_grad()) {
          detail::gemm_tn(w.data().data(), gy, cols.data(), O, R, P);
          detail::col2im(cols.data(), g, x.impl()->grad_buffer().data() + b * in_sz);
        }
        if (has_bias && bias.requires_grad()) {
          auto& gb = bias.impl()->grad_buffer();
          for (std::size_t o = 0; o < O; ++o)
            for (std::size_t p = 0; p < P; ++p) gb[o] += gy[o * P + p];
        }
      }
    };
  };
  Shape shape{B, O, g.out_h, g.out_w};
  if (has_bias) return detail::make_result(std::move(shape), std::move(out), {x, w, bias}, make);
  return detail::make_result(std::move(shape), std::move(out), {x, w}, make);
}

/// Transposed convolution (adjoint of conv2d in its input).
/// x: [b x ci x h x w], w: [ci x co x k x k]; output spatial size
/// (h-1)*stride - 2*pad + k + output_padding.
inline Tensor conv_transpose2d(const Tensor& x, const Tensor& w, const Tensor& bias, std::size_t stride,
                               std::size_t padding, std::size_t output_padding) {
  if (x.rank() != 4 || w.rank() != 4 || x.dim(1) != w.dim(0)) {
    throw DimensionError("conv_transpose2d: input " + shape_str(x.shape()) + " incompatible with weight " +
                         shape_str(w.shape()));
  }
  if (output_padding >= stride && stride > 1) throw DimensionError("conv_transpose2d: output_padding >= stride");
  const std::size_t B = x.dim(0), Ci = x.dim(1), Co = w.dim(1), K = w.dim(2);
  const std::size_t H = x.dim(2), W = x.dim(3);
  const long oh_l = static_cast<long>((H - 1) * stride + K + output_padding) - 2 * static_cast<long>(padding);
  const long ow_l = static_cast<long>((W - 1) * stride + K + output_padding) - 2 * static_cast<long>(padding);
  if (oh_l <= 0 || ow_l <= 0) throw DimensionError("conv_transpose2d: empty output");
  const std::size_t OH = static_cast<std::size_t>(oh_l), OW = static_cast<std::size_t>(ow_l);
  // Geometry of the forward conv that maps [Co x OH x OW] -> [Ci x H x W].
  const detail::ConvGeom g{Co, OH, OW, K, stride, padding, H, W};
  const bool has_bias = bias.defined();
  if (has_bias && bias.numel() != Co) throw DimensionError("conv_transpose2d: bias size mismatch");
  const std::size_t R = g.rows(), P = g.pixels(), out_sz = Co * OH * OW;
  std::vector<double> out(B * out_sz, 0.0);
  std::vector<double> cols(R * P);
  for (std::size_t b = 0; b < B; ++b) {
    detail::gemm_tn(w.data().data(), x.data().data() + b * Ci * P, cols.data(), Ci, R, P);
    double* ob = out.data() + b * out_sz;
    detail::col2im(cols.data(), g, ob);
    if (has_bias)
      for (std::size_t c = 0; c < Co; ++c)
        for (std::size_t p = 0; p < OH * OW; ++p) ob[c * OH * OW + p] += bias[c];
  }
  auto make = [x, w, bias, g, B, Ci, Co, R, P, out_sz, OH, OW, has_bias](detail::Node* node) {
    return [x, w, bias, g, B, Ci, Co, R, P, out_sz, OH, OW, has_bias, node]() {
      std::vector<double> cols(R * P);
      for (std::size_t b = 0; b < B; ++b) {
        const double* gy = node->grad.data() + b * out_sz;
        detail::im2col(gy, g, cols.data());
        if (x.requires_grad()) {
          detail::gemm_acc(w.data().data(), cols.data(), x.impl()->grad_buffer().data() + b * Ci * P, Ci, R, P);
        }
        if (w.requires_grad()) {
          detail::gemm_nt_acc(x.data().data() + b * Ci * P, cols.data(), w.impl()->grad_buffer().data(), Ci, R, P);
        }
        if (has_bias && bias.requires_grad()) {
          auto& gb = bias.impl()->grad_buffer();
          for (std::size_t c = 0; c < Co; ++c)
            for (std::size_t p = 0; p < OH * OW; ++p) gb[c] += gy[c * OH * OW + p];
        }
      }
    };
  };
  Shape shape{B, Co, OH, OW};
  if (has_bias) return detail::make_result(std::move(shape), std::move(out), {x, w, bias}, make);
  return detail::make_result(std::move(shape), std::move(out), {x, w}, make);
}

/// [b x c x h x w] -> [b x c]
inline Tensor global_avg_pool(const Tensor& x) {
  if (x.rank() != 4) throw DimensionError("global_avg_pool expects 4-d input, got " + shape_str(x.shape()));
  const std::size_t B = x.dim(0), C = x.dim(1), P = x.dim(2) * x.dim(3);
  const double inv = 1.0 / static_cast<double>(P);
  std::vector<double> v(B * C, 0.0);
  for (std::size_t i = 0; i < B * C; ++i) {
    double s = 0.0;
    for (std::size_t p = 0; p < P; ++p) s += x[i * P + p];
    v[i] = s * inv;
  }
  return detail::make_result(Shape{B, C}, std::move(v), {x}, [x, B, C, P, inv](detail::Node* o) {
    return [x, B, C, P, inv, o]() {
      auto& g = x.impl()->grad_buffer();
      for (std::size_t i = 0; i < B * C; ++i)
        for (std::size_t p = 0; p < P; ++p) g[i * P + p] += o->grad[i] * inv;
    };
  });
}

}  // namespace bayesnas
