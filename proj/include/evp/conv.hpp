#pragma once

#include <optional>
#include <string>

#include <Eigen/Core>

#include "evp/tape.hpp"
#include "evp/tensor.hpp"

// 2-D convolutions over N x C x H x W feature maps. Both use the
// cross-correlation convention (no kernel flip) and zero padding.

namespace evp {

struct ConvGeometry {
  std::size_t n, cin, h, w, cout, k, stride, pad, ho, wo;
};

inline std::size_t conv_out_extent(std::size_t in, std::size_t k, std::size_t stride, std::size_t pad) {
  return (in + 2 * pad - k) / stride + 1;
}

namespace detail {

inline ConvGeometry conv_geometry(const Shape& in, std::size_t cout, std::size_t k, std::size_t stride,
                                  std::size_t pad, const char* op) {
  require_rank(in, 4, op);
  if (k < 1) throw DimensionError(std::string(op) + ": kernel size must be >= 1");
  if (stride < 1) throw DimensionError(std::string(op) + ": stride must be positive");
  if (in[2] + 2 * pad < k || in[3] + 2 * pad < k) {
    throw DimensionError(std::string(op) + ": input " + to_string(in) + " with padding " + std::to_string(pad) +
                         " is smaller than kernel " + std::to_string(k));
  }
  return ConvGeometry{in[0], in[1], in[2], in[3], cout, k, stride, pad, conv_out_extent(in[2], k, stride, pad),
                      conv_out_extent(in[3], k, stride, pad)};
}

// cols is (cin*k*k) x (ho*wo), row-major.
template <typename T>
void im2col(const T* img, const ConvGeometry& g, T* cols) {
  const std::size_t hw = g.ho * g.wo;
  for (std::size_t c = 0; c < g.cin; ++c)
    for (std::size_t i = 0; i < g.k; ++i)
      for (std::size_t j = 0; j < g.k; ++j) {
        T* row = cols + ((c * g.k + i) * g.k + j) * hw;
        for (std::size_t y = 0; y < g.ho; ++y) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(y * g.stride + i) - static_cast<std::ptrdiff_t>(g.pad);
          for (std::size_t x = 0; x < g.wo; ++x) {
            const std::ptrdiff_t ix =
                static_cast<std::ptrdiff_t>(x * g.stride + j) - static_cast<std::ptrdiff_t>(g.pad);
            const bool inside = iy >= 0 && ix >= 0 && iy < static_cast<std::ptrdiff_t>(g.h) &&
                                ix < static_cast<std::ptrdiff_t>(g.w);
            row[y * g.wo + x] = inside ? img[(c * g.h + static_cast<std::size_t>(iy)) * g.w + static_cast<std::size_t>(ix)]
                                       : T(0);
          }
        }
      }
}

template <typename T>
void col2im_add(const T* cols, const ConvGeometry& g, T* img) {
  const std::size_t hw = g.ho * g.wo;
  for (std::size_t c = 0; c < g.cin; ++c)
    for (std::size_t i = 0; i < g.k; ++i)
      for (std::size_t j = 0; j < g.k; ++j) {
        const T* row = cols + ((c * g.k + i) * g.k + j) * hw;
        for (std::size_t y = 0; y < g.ho; ++y) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(y * g.stride + i) - static_cast<std::ptrdiff_t>(g.pad);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) continue;
          for (std::size_t x = 0; x < g.wo; ++x) {
            const std::ptrdiff_t ix =
                static_cast<std::ptrdiff_t>(x * g.stride + j) - static_cast<std::ptrdiff_t>(g.pad);
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.w)) continue;
            img[(c * g.h + static_cast<std::size_t>(iy)) * g.w + static_cast<std::size_t>(ix)] += row[y * g.wo + x];
          }
        }
      }
}

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMatrix = Eigen::Map<RowMatrix<T>>;
template <typename T>
using ConstMapMatrix = Eigen::Map<const RowMatrix<T>>;

template <typename T>
void accumulate(Tensor<T>& dst, const Tensor<T>& src) {
  auto d = dst.data();
  auto s = src.data();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] += s[i];
}

inline bool is_pointwise(const ConvGeometry& g) { return g.k == 1 && g.stride == 1 && g.pad == 0; }

}  // namespace detail

/// Dense convolution. input N x Cin x H x W, weight Cout x Cin x k x k,
/// optional bias Cout. Output extent floor((H + 2 pad - k) / stride) + 1.
template <typename T>
Var<T> conv2d(Var<T> input, Var<T> weight, std::optional<Var<T>> bias, std::size_t stride, std::size_t pad) {
  const Shape& ws = weight.shape();
  require_rank(ws, 4, "conv2d weight");
  if (ws[2] != ws[3]) throw DimensionError("conv2d: kernel must be square, got " + to_string(ws));
  const auto g = detail::conv_geometry(input.shape(), ws[0], ws[2], stride, pad, "conv2d");
  if (ws[1] != g.cin) {
    throw DimensionError("conv2d: weight expects " + std::to_string(ws[1]) + " input channels, input " +
                         to_string(input.shape()) + " has " + std::to_string(g.cin));
  }
  if (bias && bias->value().size() != g.cout) {
    throw DimensionError("conv2d: bias has " + std::to_string(bias->value().size()) + " entries, expected " +
                         std::to_string(g.cout));
  }
  const std::size_t rows = g.cin * g.k * g.k, hw = g.ho * g.wo;
  Tensor<T> out(Shape{g.n, g.cout, g.ho, g.wo});
  std::vector<T> cols(detail::is_pointwise(g) ? 0 : rows * hw);
  detail::ConstMapMatrix<T> wmat(weight.value().data().data(), g.cout, rows);
  const T* xin = input.value().data().data();
  for (std::size_t i = 0; i < g.n; ++i) {
    const T* img = xin + i * g.cin * g.h * g.w;
    const T* cptr = img;
    if (!detail::is_pointwise(g)) {
      detail::im2col(img, g, cols.data());
      cptr = cols.data();
    }
    detail::MapMatrix<T> omat(out.data().data() + i * g.cout * hw, g.cout, hw);
    omat.noalias() = wmat * detail::ConstMapMatrix<T>(cptr, rows, hw);
    if (bias) {
      auto bs = bias->value().data();
      for (std::size_t c = 0; c < g.cout; ++c) omat.row(c).array() += bs[c];
    }
  }
  const auto xi = input.id(), wi = weight.id();
  const auto bi = bias ? std::optional<std::size_t>(bias->id()) : std::nullopt;
  Var<T> parents_b = bias ? *bias : weight;
  return input.tape().record("conv2d", std::move(out), {input, weight, parents_b},
                             [xi, wi, bi, g, rows, hw](Tape<T>& t, const Tensor<T>& gout) {
                               Tensor<T>* gx = t.grad_slot(xi);
                               Tensor<T>* gw = t.grad_slot(wi);
                               Tensor<T>* gb = bi ? t.grad_slot(*bi) : nullptr;
                               const T* xin2 = t.value(xi).data().data();
                               detail::ConstMapMatrix<T> wm(t.value(wi).data().data(), g.cout, rows);
                               std::vector<T> cols2(rows * hw);
                               // Local sums, added to the slots once, so a shared weight's
                               // gradient is the plain sum of per-use contributions.
                               Tensor<T> gw_local = gw ? Tensor<T>(gw->shape()) : Tensor<T>();
                               Tensor<T> gb_local = gb ? Tensor<T>(gb->shape()) : Tensor<T>();
                               for (std::size_t i = 0; i < g.n; ++i) {
                                 detail::ConstMapMatrix<T> gm(gout.data().data() + i * g.cout * hw, g.cout, hw);
                                 if (gw) {
                                   const T* img = xin2 + i * g.cin * g.h * g.w;
                                   const T* cptr = img;
                                   if (!detail::is_pointwise(g)) {
                                     detail::im2col(img, g, cols2.data());
                                     cptr = cols2.data();
                                   }
                                   detail::MapMatrix<T> gwm(gw_local.data().data(), g.cout, rows);
                                   gwm.noalias() += gm * detail::ConstMapMatrix<T>(cptr, rows, hw).transpose();
                                 }
                                 if (gb) {
                                   for (std::size_t c = 0; c < g.cout; ++c) gb_local[c] += gm.row(c).sum();
                                 }
                                 if (gx) {
                                   T* gimg = gx->data().data() + i * g.cin * g.h * g.w;
                                   if (detail::is_pointwise(g)) {
                                     detail::MapMatrix<T>(gimg, rows, hw).noalias() += wm.transpose() * gm;
                                   } else {
                                     detail::MapMatrix<T>(cols2.data(), rows, hw).noalias() = wm.transpose() * gm;
                                     detail::col2im_add(cols2.data(), g, gimg);
                                   }
                                 }
                               }
                               if (gw) detail::accumulate(*gw, gw_local);
                               if (gb) detail::accumulate(*gb, gb_local);
                             });
}

template <typename T>
Var<T> conv2d(Var<T> input, Var<T> weight, Var<T> bias, std::size_t stride, std::size_t pad) {
  return conv2d<T>(input, weight, std::optional<Var<T>>(bias), stride, pad);
}

/// Depthwise convolution: channel c of the output sees only channel c of
/// the input. weight is C x 1 x k x k.
template <typename T>
Var<T> depthwise_conv2d(Var<T> input, Var<T> weight, std::size_t stride, std::size_t pad) {
  const Shape& ws = weight.shape();
  require_rank(ws, 4, "depthwise_conv2d weight");
  if (ws[1] != 1 || ws[2] != ws[3]) {
    throw DimensionError("depthwise_conv2d: weight must be C x 1 x k x k, got " + to_string(ws));
  }
  const auto g = detail::conv_geometry(input.shape(), ws[0], ws[2], stride, pad, "depthwise_conv2d");
  if (ws[0] != g.cin) {
    throw DimensionError("depthwise_conv2d: weight has " + std::to_string(ws[0]) + " channels, input " +
                         to_string(input.shape()) + " has " + std::to_string(g.cin));
  }
  Tensor<T> out(Shape{g.n, g.cin, g.ho, g.wo});
  const auto& xv = input.value();
  const auto& wv = weight.value();
  const auto ih = static_cast<std::ptrdiff_t>(g.h), iw = static_cast<std::ptrdiff_t>(g.w);
  for (std::size_t n = 0; n < g.n; ++n)
    for (std::size_t c = 0; c < g.cin; ++c) {
      const T* img = xv.data().data() + (n * g.cin + c) * g.h * g.w;
      const T* ker = wv.data().data() + c * g.k * g.k;
      T* dst = out.data().data() + (n * g.cin + c) * g.ho * g.wo;
      for (std::size_t y = 0; y < g.ho; ++y)
        for (std::size_t x = 0; x < g.wo; ++x) {
          T acc = 0;
          for (std::size_t i = 0; i < g.k; ++i) {
            const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(y * g.stride + i) - static_cast<std::ptrdiff_t>(g.pad);
            if (iy < 0 || iy >= ih) continue;
            for (std::size_t j = 0; j < g.k; ++j) {
              const std::ptrdiff_t ix =
                  static_cast<std::ptrdiff_t>(x * g.stride + j) - static_cast<std::ptrdiff_t>(g.pad);
              if (ix < 0 || ix >= iw) continue;
              acc += ker[i * g.k + j] * img[iy * iw + ix];
            }
          }
          dst[y * g.wo + x] = acc;
        }
    }
  const auto xi = input.id(), wi = weight.id();
  return input.tape().record(
      "depthwise_conv2d", std::move(out), {input, weight}, [xi, wi, g, ih, iw](Tape<T>& t, const Tensor<T>& gout) {
        Tensor<T>* gx = t.grad_slot(xi);
        Tensor<T>* gw = t.grad_slot(wi);
        const auto& xv2 = t.value(xi);
        const auto& wv2 = t.value(wi);
        Tensor<T> gw_local = gw ? Tensor<T>(gw->shape()) : Tensor<T>();
        for (std::size_t n = 0; n < g.n; ++n)
          for (std::size_t c = 0; c < g.cin; ++c) {
            const T* img = xv2.data().data() + (n * g.cin + c) * g.h * g.w;
            const T* ker = wv2.data().data() + c * g.k * g.k;
            const T* gsrc = gout.data().data() + (n * g.cin + c) * g.ho * g.wo;
            T* gimg = gx ? gx->data().data() + (n * g.cin + c) * g.h * g.w : nullptr;
            T* gker = gw ? gw_local.data().data() + c * g.k * g.k : nullptr;
            for (std::size_t y = 0; y < g.ho; ++y)
              for (std::size_t x = 0; x < g.wo; ++x) {
                const T gv = gsrc[y * g.wo + x];
                for (std::size_t i = 0; i < g.k; ++i) {
                  const std::ptrdiff_t iy =
                      static_cast<std::ptrdiff_t>(y * g.stride + i) - static_cast<std::ptrdiff_t>(g.pad);
                  if (iy < 0 || iy >= ih) continue;
                  for (std::size_t j = 0; j < g.k; ++j) {
                    const std::ptrdiff_t ix =
                        static_cast<std::ptrdiff_t>(x * g.stride + j) - static_cast<std::ptrdiff_t>(g.pad);
                    if (ix < 0 || ix >= iw) continue;
                    if (gker) gker[i * g.k + j] += gv * img[iy * iw + ix];
                    if (gimg) gimg[iy * iw + ix] += gv * ker[i * g.k + j];
                  }
                }
              }
          }
        if (gw) detail::accumulate(*gw, gw_local);
      });
}

/// input N x D, weight D x K, bias K.
template <typename T>
Var<T> linear(Var<T> input, Var<T> weight, Var<T> bias) {
  require_rank(input.shape(), 2, "linear input");
  require_rank(weight.shape(), 2, "linear weight");
  const std::size_t n = input.shape()[0], d = input.shape()[1], k = weight.shape()[1];
  if (weight.shape()[0] != d) {
    throw DimensionError("linear: input " + to_string(input.shape()) + " incompatible with weight " +
                         to_string(weight.shape()));
  }
  if (bias.value().size() != k) {
    throw DimensionError("linear: bias has " + std::to_string(bias.value().size()) + " entries, expected " +
                         std::to_string(k));
  }
  Tensor<T> out(Shape{n, k});
  detail::MapMatrix<T> om(out.data().data(), n, k);
  om.noalias() = detail::ConstMapMatrix<T>(input.value().data().data(), n, d) *
                 detail::ConstMapMatrix<T>(weight.value().data().data(), d, k);
  auto bs = bias.value().data();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < k; ++j) om(i, j) += bs[j];
  const auto xi = input.id(), wi = weight.id(), bi = bias.id();
  return input.tape().record("linear", std::move(out), {input, weight, bias},
                             [xi, wi, bi, n, d, k](Tape<T>& t, const Tensor<T>& g) {
                               detail::ConstMapMatrix<T> gm(g.data().data(), n, k);
                               if (auto* gx = t.grad_slot(xi)) {
                                 detail::MapMatrix<T>(gx->data().data(), n, d).noalias() +=
                                     gm * detail::ConstMapMatrix<T>(t.value(wi).data().data(), d, k).transpose();
                               }
                               if (auto* gw = t.grad_slot(wi)) {
                                 Tensor<T> local(gw->shape());
                                 detail::MapMatrix<T>(local.data().data(), d, k).noalias() =
                                     detail::ConstMapMatrix<T>(t.value(xi).data().data(), n, d).transpose() * gm;
                                 detail::accumulate(*gw, local);
                               }
                               if (auto* gb = t.grad_slot(bi)) {
                                 for (std::size_t j = 0; j < k; ++j) (*gb)[j] += gm.col(j).sum();
                               }
                             });
}

}  // namespace evp
