#pragma once

#include <algorithm>
#include <cmath>
#include <iostream>
#include <span>
#include <utility>
#include <vector>

#include "evp/tape.hpp"
#include "evp/tensor.hpp"

// Differentiable elementwise, reduction and layout operations. Every op records
// its output on the tape of its first operand and registers a backward closure
// that adds into the parents' gradient slots.

namespace evp {

namespace detail {

template <typename T>
inline T sign_of(T v) {
  return static_cast<T>((T(0) < v) - (v < T(0)));
}

// Leading batch dim, second channel dim, everything after is "spatial".
inline void split_nc(const Shape& s, std::size_t& n, std::size_t& c, std::size_t& inner, const char* op) {
  if (s.size() < 2) throw DimensionError(std::string(op) + ": expected at least N x C, got " + to_string(s));
  n = s[0];
  c = s[1];
  inner = 1;
  for (std::size_t i = 2; i < s.size(); ++i) inner *= s[i];
}

template <typename T, typename F, typename D>
Var<T> unary(std::string_view name, Var<T> x, F f, D df) {
  const Tensor<T>& xv = x.value();
  Tensor<T> out(xv.shape());
  auto xs = xv.data();
  auto ys = out.data();
  for (std::size_t i = 0; i < xs.size(); ++i) ys[i] = f(xs[i]);
  const auto xid = x.id();
  return x.tape().record(name, std::move(out), {x}, [xid, df](Tape<T>& t, const Tensor<T>& g) {
    Tensor<T>* gx = t.grad_slot(xid);
    if (!gx) return;
    const auto xs2 = t.value(xid).data();
    auto gs = g.data();
    auto dst = gx->data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += gs[i] * df(xs2[i]);
  });
}

template <typename T>
void add_into(Tensor<T>* dst, const Tensor<T>& src, T scale = T(1)) {
  if (!dst) return;
  auto d = dst->data();
  auto s = src.data();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] += scale * s[i];
}

}  // namespace detail

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  require_same_shape(a.shape(), b.shape(), "add");
  Tensor<T> out(a.shape());
  auto as = a.value().data(), bs = b.value().data();
  auto os = out.data();
  for (std::size_t i = 0; i < os.size(); ++i) os[i] = as[i] + bs[i];
  const auto ai = a.id(), bi = b.id();
  return a.tape().record("add", std::move(out), {a, b}, [ai, bi](Tape<T>& t, const Tensor<T>& g) {
    detail::add_into(t.grad_slot(ai), g);
    detail::add_into(t.grad_slot(bi), g);
  });
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
  require_same_shape(a.shape(), b.shape(), "sub");
  Tensor<T> out(a.shape());
  auto as = a.value().data(), bs = b.value().data();
  auto os = out.data();
  for (std::size_t i = 0; i < os.size(); ++i) os[i] = as[i] - bs[i];
  const auto ai = a.id(), bi = b.id();
  return a.tape().record("sub", std::move(out), {a, b}, [ai, bi](Tape<T>& t, const Tensor<T>& g) {
    detail::add_into(t.grad_slot(ai), g);
    detail::add_into(t.grad_slot(bi), g, T(-1));
  });
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  require_same_shape(a.shape(), b.shape(), "mul");
  Tensor<T> out(a.shape());
  auto as = a.value().data(), bs = b.value().data();
  auto os = out.data();
  for (std::size_t i = 0; i < os.size(); ++i) os[i] = as[i] * bs[i];
  const auto ai = a.id(), bi = b.id();
  return a.tape().record("mul", std::move(out), {a, b}, [ai, bi](Tape<T>& t, const Tensor<T>& g) {
    auto gs = g.data();
    auto av = t.value(ai).data(), bv = t.value(bi).data();
    if (auto* ga = t.grad_slot(ai)) {
      auto d = ga->data();
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += gs[i] * bv[i];
    }
    if (auto* gb = t.grad_slot(bi)) {
      auto d = gb->data();
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += gs[i] * av[i];
    }
  });
}

template <typename T>
Var<T> scale(Var<T> x, T factor) {
  return detail::unary<T>("scale", x, [factor](T v) { return factor * v; }, [factor](T) { return factor; });
}

template <typename T>
Var<T> neg(Var<T> x) {
  return detail::unary<T>("neg", x, [](T v) { return -v; }, [](T) { return T(-1); });
}

/// Subgradient at 0 is 0.
template <typename T>
Var<T> abs(Var<T> x) {
  if (x.tape().tracking_kinks()) {
    for (T v : x.value().data()) x.tape().note_kink(std::abs(v));
  }
  return detail::unary<T>("abs", x, [](T v) { return std::abs(v); }, [](T v) { return detail::sign_of(v); });
}

template <typename T>
Var<T> relu(Var<T> x) {
  if (x.tape().tracking_kinks()) {
    for (T v : x.value().data()) x.tape().note_kink(std::abs(v));
  }
  return detail::unary<T>("relu", x, [](T v) { return v > T(0) ? v : T(0); },
                          [](T v) { return v > T(0) ? T(1) : T(0); });
}

template <typename T>
Var<T> sigmoid(Var<T> x) {
  auto f = [](T v) {
    if (v >= T(0)) return T(1) / (T(1) + std::exp(-v));
    const T e = std::exp(v);
    return e / (T(1) + e);
  };
  return detail::unary<T>("sigmoid", x, f, [f](T v) {
    const T s = f(v);
    return s * (T(1) - s);
  });
}

/// Piecewise-constant; carries no gradient.
template <typename T>
Var<T> sign(Var<T> x) {
  Tensor<T> out(x.shape());
  auto xs = x.value().data();
  auto os = out.data();
  for (std::size_t i = 0; i < os.size(); ++i) os[i] = detail::sign_of(xs[i]);
  return x.tape().constant(std::move(out));
}

namespace detail {

// Elementwise select; ties go to the first operand.
template <typename T, typename Pick>
Var<T> select2(std::string_view name, Var<T> a, Var<T> b, Pick pick_first) {
  require_same_shape(a.shape(), b.shape(), name.data());
  Tensor<T> out(a.shape());
  auto as = a.value().data(), bs = b.value().data();
  auto os = out.data();
  const bool kinks = a.tape().tracking_kinks();
  for (std::size_t i = 0; i < os.size(); ++i) {
    os[i] = pick_first(as[i], bs[i]) ? as[i] : bs[i];
    if (kinks) a.tape().note_kink(std::abs(as[i] - bs[i]));
  }
  const auto ai = a.id(), bi = b.id();
  return a.tape().record(name, std::move(out), {a, b}, [ai, bi, pick_first](Tape<T>& t, const Tensor<T>& g) {
    auto av = t.value(ai).data(), bv = t.value(bi).data();
    auto gs = g.data();
    Tensor<T>* ga = t.grad_slot(ai);
    Tensor<T>* gb = t.grad_slot(bi);
    for (std::size_t i = 0; i < gs.size(); ++i) {
      if (pick_first(av[i], bv[i])) {
        if (ga) (*ga)[i] += gs[i];
      } else if (gb) {
        (*gb)[i] += gs[i];
      }
    }
  });
}

}  // namespace detail

template <typename T>
Var<T> maximum(Var<T> a, Var<T> b) {
  return detail::select2<T>("maximum", a, b, [](T x, T y) { return x >= y; });
}

template <typename T>
Var<T> minimum(Var<T> a, Var<T> b) {
  return detail::select2<T>("minimum", a, b, [](T x, T y) { return x <= y; });
}

template <typename T>
Var<T> sum(Var<T> x) {
  T s = 0;
  for (T v : x.value().data()) s += v;
  const auto xi = x.id();
  return x.tape().record("sum", Tensor<T>::scalar(s), {x}, [xi](Tape<T>& t, const Tensor<T>& g) {
    if (auto* gx = t.grad_slot(xi)) {
      const T gv = g[0];
      for (auto& v : gx->data()) v += gv;
    }
  });
}

template <typename T>
Var<T> mean(Var<T> x) {
  const T n = static_cast<T>(x.value().size());
  return scale(sum(x), T(1) / n);
}

template <typename T>
Var<T> reshape(Var<T> x, Shape shape) {
  Tensor<T> out = x.value().reshaped(std::move(shape));
  const auto xi = x.id();
  return x.tape().record("reshape", std::move(out), {x}, [xi](Tape<T>& t, const Tensor<T>& g) {
    detail::add_into(t.grad_slot(xi), g);
  });
}

/// N x ... -> N x (product of the rest).
template <typename T>
Var<T> flatten(Var<T> x) {
  const Shape& s = x.shape();
  if (s.empty()) throw DimensionError("flatten: scalar input");
  return reshape(x, Shape{s[0], x.value().size() / std::max<std::size_t>(s[0], 1)});
}

template <typename T>
Var<T> concat_channels(Var<T> a, Var<T> b) {
  std::size_t n, ca, inner, nb, cb, innerb;
  detail::split_nc(a.shape(), n, ca, inner, "concat_channels");
  detail::split_nc(b.shape(), nb, cb, innerb, "concat_channels");
  if (n != nb || inner != innerb || a.shape().size() != b.shape().size()) {
    throw DimensionError("concat_channels: incompatible " + to_string(a.shape()) + " and " + to_string(b.shape()));
  }
  Shape s = a.shape();
  s[1] = ca + cb;
  Tensor<T> out(s);
  auto as = a.value().data(), bs = b.value().data();
  auto os = out.data();
  for (std::size_t i = 0; i < n; ++i) {
    std::copy_n(as.begin() + i * ca * inner, ca * inner, os.begin() + i * (ca + cb) * inner);
    std::copy_n(bs.begin() + i * cb * inner, cb * inner, os.begin() + (i * (ca + cb) + ca) * inner);
  }
  const auto ai = a.id(), bi = b.id();
  return a.tape().record("concat_channels", std::move(out), {a, b},
                         [ai, bi, n, ca, cb, inner](Tape<T>& t, const Tensor<T>& g) {
                           auto gs = g.data();
                           if (auto* ga = t.grad_slot(ai)) {
                             auto d = ga->data();
                             for (std::size_t i = 0; i < n; ++i)
                               for (std::size_t k = 0; k < ca * inner; ++k)
                                 d[i * ca * inner + k] += gs[i * (ca + cb) * inner + k];
                           }
                           if (auto* gb = t.grad_slot(bi)) {
                             auto d = gb->data();
                             for (std::size_t i = 0; i < n; ++i)
                               for (std::size_t k = 0; k < cb * inner; ++k)
                                 d[i * cb * inner + k] += gs[(i * (ca + cb) + ca) * inner + k];
                           }
                         });
}

/// Channels [begin, begin + count).
template <typename T>
Var<T> slice_channels(Var<T> x, std::size_t begin, std::size_t count) {
  std::size_t n, c, inner;
  detail::split_nc(x.shape(), n, c, inner, "slice_channels");
  if (begin + count > c) throw DimensionError("slice_channels: range exceeds " + std::to_string(c) + " channels");
  Shape s = x.shape();
  s[1] = count;
  Tensor<T> out(s);
  auto xs = x.value().data();
  auto os = out.data();
  for (std::size_t i = 0; i < n; ++i) {
    std::copy_n(xs.begin() + (i * c + begin) * inner, count * inner, os.begin() + i * count * inner);
  }
  const auto xi = x.id();
  return x.tape().record("slice_channels", std::move(out), {x},
                         [xi, n, c, begin, count, inner](Tape<T>& t, const Tensor<T>& g) {
                           auto* gx = t.grad_slot(xi);
                           if (!gx) return;
                           auto gs = g.data();
                           auto d = gx->data();
                           for (std::size_t i = 0; i < n; ++i)
                             for (std::size_t k = 0; k < count * inner; ++k)
                               d[(i * c + begin) * inner + k] += gs[i * count * inner + k];
                         });
}

/// x: N x C x ..., s: N x C. Scales each (sample, channel) plane.
template <typename T>
Var<T> channel_scale(Var<T> x, Var<T> s) {
  std::size_t n, c, inner;
  detail::split_nc(x.shape(), n, c, inner, "channel_scale");
  if (s.shape() != Shape{n, c}) {
    throw DimensionError("channel_scale: scale shape " + to_string(s.shape()) + " does not match " +
                         to_string(x.shape()));
  }
  Tensor<T> out(x.shape());
  auto xs = x.value().data(), ss = s.value().data();
  auto os = out.data();
  for (std::size_t p = 0; p < n * c; ++p)
    for (std::size_t k = 0; k < inner; ++k) os[p * inner + k] = xs[p * inner + k] * ss[p];
  const auto xi = x.id(), si = s.id();
  return x.tape().record("channel_scale", std::move(out), {x, s}, [xi, si, n, c, inner](Tape<T>& t, const Tensor<T>& g) {
    auto gs = g.data();
    if (auto* gx = t.grad_slot(xi)) {
      auto ss2 = t.value(si).data();
      auto d = gx->data();
      for (std::size_t p = 0; p < n * c; ++p)
        for (std::size_t k = 0; k < inner; ++k) d[p * inner + k] += gs[p * inner + k] * ss2[p];
    }
    if (auto* gsl = t.grad_slot(si)) {
      auto xs2 = t.value(xi).data();
      auto d = gsl->data();
      for (std::size_t p = 0; p < n * c; ++p) {
        T acc = 0;
        for (std::size_t k = 0; k < inner; ++k) acc += gs[p * inner + k] * xs2[p * inner + k];
        d[p] += acc;
      }
    }
  });
}

/// Fixed per-channel (x - mean) / std. Constants, so gradient flows only to x.
template <typename T>
Var<T> normalize_channels(Var<T> x, std::span<const T> mean, std::span<const T> stddev) {
  std::size_t n, c, inner;
  detail::split_nc(x.shape(), n, c, inner, "normalize_channels");
  if (mean.size() != c || stddev.size() != c) throw DimensionError("normalize_channels: statistics size mismatch");
  Tensor<T> out(x.shape());
  std::vector<T> inv(c);
  for (std::size_t k = 0; k < c; ++k) inv[k] = T(1) / stddev[k];
  std::vector<T> mu(mean.begin(), mean.end());
  auto xs = x.value().data();
  auto os = out.data();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < c; ++k)
      for (std::size_t j = 0; j < inner; ++j) {
        const std::size_t idx = (i * c + k) * inner + j;
        os[idx] = (xs[idx] - mu[k]) * inv[k];
      }
  const auto xi = x.id();
  return x.tape().record("normalize_channels", std::move(out), {x},
                         [xi, n, c, inner, inv](Tape<T>& t, const Tensor<T>& g) {
                           auto* gx = t.grad_slot(xi);
                           if (!gx) return;
                           auto gs = g.data();
                           auto d = gx->data();
                           for (std::size_t i = 0; i < n; ++i)
                             for (std::size_t k = 0; k < c; ++k)
                               for (std::size_t j = 0; j < inner; ++j) {
                                 const std::size_t idx = (i * c + k) * inner + j;
                                 d[idx] += gs[idx] * inv[k];
                               }
                         });
}

/// N x C x H x W -> N x C spatial mean.
template <typename T>
Var<T> global_avg_pool(Var<T> x) {
  require_rank(x.shape(), 4, "global_avg_pool");
  const std::size_t n = x.shape()[0], c = x.shape()[1], hw = x.shape()[2] * x.shape()[3];
  if (hw == 0) throw DimensionError("global_avg_pool: empty spatial extent");
  Tensor<T> out(Shape{n, c});
  auto xs = x.value().data();
  for (std::size_t p = 0; p < n * c; ++p) {
    T acc = 0;
    for (std::size_t k = 0; k < hw; ++k) acc += xs[p * hw + k];
    out[p] = acc / static_cast<T>(hw);
  }
  const auto xi = x.id();
  return x.tape().record("global_avg_pool", std::move(out), {x}, [xi, n, c, hw](Tape<T>& t, const Tensor<T>& g) {
    auto* gx = t.grad_slot(xi);
    if (!gx) return;
    auto d = gx->data();
    const T inv = T(1) / static_cast<T>(hw);
    for (std::size_t p = 0; p < n * c; ++p)
      for (std::size_t k = 0; k < hw; ++k) d[p * hw + k] += g[p] * inv;
  });
}

/// 2x2 average pooling, stride 2 (floor on odd extents).
template <typename T>
Var<T> avg_pool2(Var<T> x) {
  require_rank(x.shape(), 4, "avg_pool2");
  const std::size_t n = x.shape()[0], c = x.shape()[1], h = x.shape()[2], w = x.shape()[3];
  const std::size_t ho = h / 2, wo = w / 2;
  if (ho == 0 || wo == 0) throw DimensionError("avg_pool2: input " + to_string(x.shape()) + " too small");
  Tensor<T> out(Shape{n, c, ho, wo});
  const auto& xv = x.value();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < c; ++k)
      for (std::size_t y = 0; y < ho; ++y)
        for (std::size_t z = 0; z < wo; ++z) {
          out.at(i, k, y, z) = T(0.25) * (xv.at(i, k, 2 * y, 2 * z) + xv.at(i, k, 2 * y, 2 * z + 1) +
                                          xv.at(i, k, 2 * y + 1, 2 * z) + xv.at(i, k, 2 * y + 1, 2 * z + 1));
        }
  const auto xi = x.id();
  return x.tape().record("avg_pool2", std::move(out), {x}, [xi, n, c, ho, wo](Tape<T>& t, const Tensor<T>& g) {
    auto* gx = t.grad_slot(xi);
    if (!gx) return;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t k = 0; k < c; ++k)
        for (std::size_t y = 0; y < ho; ++y)
          for (std::size_t z = 0; z < wo; ++z) {
            const T v = T(0.25) * g.at(i, k, y, z);
            gx->at(i, k, 2 * y, 2 * z) += v;
            gx->at(i, k, 2 * y, 2 * z + 1) += v;
            gx->at(i, k, 2 * y + 1, 2 * z) += v;
            gx->at(i, k, 2 * y + 1, 2 * z + 1) += v;
          }
  });
}

/// Mean over the batch of -log softmax(logits)[label], max-subtracted.
template <typename T>
Var<T> softmax_cross_entropy(Var<T> logits, std::span<const int> labels) {
  require_rank(logits.shape(), 2, "softmax_cross_entropy");
  const std::size_t n = logits.shape()[0], k = logits.shape()[1];
  if (labels.size() != n) {
    throw DimensionError("softmax_cross_entropy: " + std::to_string(labels.size()) + " labels for batch of " +
                         std::to_string(n));
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= k) {
      throw std::out_of_range("softmax_cross_entropy: label " + std::to_string(labels[i]) + " at index " +
                              std::to_string(i) + " outside [0," + std::to_string(k) + ")");
    }
  }
  auto zs = logits.value().data();
  Tensor<T> probs(Shape{n, k});
  T loss = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const T* row = zs.data() + i * k;
    const T m = *std::max_element(row, row + k);
    T denom = 0;
    for (std::size_t j = 0; j < k; ++j) denom += std::exp(row[j] - m);
    const T log_denom = std::log(denom);
    for (std::size_t j = 0; j < k; ++j) probs[i * k + j] = std::exp(row[j] - m - log_denom);
    loss += log_denom + m - row[labels[i]];
  }
  loss /= static_cast<T>(n);
  std::vector<int> lab(labels.begin(), labels.end());
  const auto li = logits.id();
  return logits.tape().record("softmax_cross_entropy", Tensor<T>::scalar(loss), {logits},
                              [li, n, k, lab, probs = std::move(probs)](Tape<T>& t, const Tensor<T>& g) {
                                auto* gz = t.grad_slot(li);
                                if (!gz) return;
                                const T s = g[0] / static_cast<T>(n);
                                for (std::size_t i = 0; i < n; ++i) {
                                  for (std::size_t j = 0; j < k; ++j) (*gz)[i * k + j] += s * probs[i * k + j];
                                  (*gz)[i * k + static_cast<std::size_t>(lab[i])] -= s;
                                }
                              });
}

/// y = |x| - |theta| where |x| >= |theta|, else 0. theta holds one value per
/// channel (dim 1 of x) or a single value for the whole tensor.
template <typename T>
Var<T> trelu(Var<T> x, Var<T> theta) {
  std::size_t n, c, inner;
  detail::split_nc(x.shape(), n, c, inner, "trelu");
  const std::size_t tc = theta.value().size();
  if (tc != 1 && tc != c) {
    throw DimensionError("trelu: threshold of size " + std::to_string(tc) + " cannot broadcast over " +
                         std::to_string(c) + " channels");
  }
  auto xs = x.value().data();
  auto ts = theta.value().data();
  Tensor<T> out(x.shape());
  auto os = out.data();
  Tape<T>& tape = x.tape();
  const bool kinks = tape.tracking_kinks();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < c; ++k) {
      const T th = std::abs(ts[tc == 1 ? 0 : k]);
      for (std::size_t j = 0; j < inner; ++j) {
        const std::size_t idx = (i * c + k) * inner + j;
        const T a = std::abs(xs[idx]);
        os[idx] = a >= th ? a - th : T(0);
        if (kinks) tape.note_kink(std::abs(a - th));
      }
    }
  if (kinks) {
    for (T v : ts) tape.note_kink(std::abs(v));
  }
  const auto xi = x.id(), ti = theta.id();
  return tape.record("trelu", std::move(out), {x, theta}, [xi, ti, n, c, inner, tc](Tape<T>& t, const Tensor<T>& g) {
    auto xs2 = t.value(xi).data();
    auto ts2 = t.value(ti).data();
    auto gs = g.data();
    Tensor<T>* gx = t.grad_slot(xi);
    Tensor<T>* gt = t.grad_slot(ti);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t k = 0; k < c; ++k) {
        const std::size_t tk = tc == 1 ? 0 : k;
        const T th = std::abs(ts2[tk]);
        const T st = detail::sign_of(ts2[tk]);
        T acc = 0;
        for (std::size_t j = 0; j < inner; ++j) {
          const std::size_t idx = (i * c + k) * inner + j;
          if (std::abs(xs2[idx]) < th) continue;
          if (gx) (*gx)[idx] += gs[idx] * detail::sign_of(xs2[idx]);
          acc += gs[idx];
        }
        if (gt) (*gt)[tk] -= st * acc;
      }
  });
}

/// u: N x p x H x W -> N x p, v_j = l2 norm of channel j over all pixels.
template <typename T>
Var<T> spatial_l2_norm(Var<T> u) {
  std::size_t n, p, inner;
  detail::split_nc(u.shape(), n, p, inner, "spatial_l2_norm");
  auto us = u.value().data();
  Tensor<T> out(Shape{n, p});
  for (std::size_t q = 0; q < n * p; ++q) {
    T acc = 0;
    for (std::size_t k = 0; k < inner; ++k) acc += us[q * inner + k] * us[q * inner + k];
    out[q] = std::sqrt(acc);
    u.tape().note_kink(out[q]);
  }
  std::vector<T> norms(out.data().begin(), out.data().end());
  const auto ui = u.id();
  return u.tape().record("spatial_l2_norm", std::move(out), {u},
                         [ui, n, p, inner, norms = std::move(norms)](Tape<T>& t, const Tensor<T>& g) {
                           auto* gu = t.grad_slot(ui);
                           if (!gu) return;
                           auto us2 = t.value(ui).data();
                           auto d = gu->data();
                           for (std::size_t q = 0; q < n * p; ++q) {
                             if (norms[q] == T(0)) continue;
                             const T s = g[q] / norms[q];
                             for (std::size_t k = 0; k < inner; ++k) d[q * inner + k] += s * us2[q * inner + k];
                           }
                         });
}

/// Row-wise v / (||v||_p + eps) for N x D input.
template <typename T>
Var<T> lp_normalize(Var<T> v, double p_norm, T eps) {
  require_rank(v.shape(), 2, "lp_normalize");
  if (!(p_norm >= 1.0)) throw std::invalid_argument("lp_normalize: norm order must be >= 1");
  const std::size_t n = v.shape()[0], d = v.shape()[1];
  auto vs = v.value().data();
  Tensor<T> out(v.shape());
  std::vector<T> norms(n);
  for (std::size_t i = 0; i < n; ++i) {
    T acc = 0;
    for (std::size_t j = 0; j < d; ++j) acc += static_cast<T>(std::pow(std::abs(vs[i * d + j]), p_norm));
    norms[i] = static_cast<T>(std::pow(acc, 1.0 / p_norm));
    for (std::size_t j = 0; j < d; ++j) out[i * d + j] = vs[i * d + j] / (norms[i] + eps);
  }
  const auto vi = v.id();
  return v.tape().record("lp_normalize", std::move(out), {v},
                         [vi, n, d, p_norm, eps, norms](Tape<T>& t, const Tensor<T>& g) {
                           auto* gv = t.grad_slot(vi);
                           if (!gv) return;
                           auto vs2 = t.value(vi).data();
                           for (std::size_t i = 0; i < n; ++i) {
                             const T nr = norms[i];
                             const T den = nr + eps;
                             // y_j = v_j / den; dden/dv_k = sign(v_k)|v_k|^(p-1) / nr^(p-1)
                             T dot = 0;
                             for (std::size_t j = 0; j < d; ++j) dot += g[i * d + j] * vs2[i * d + j];
                             for (std::size_t k = 0; k < d; ++k) {
                               const T vk = vs2[i * d + k];
                               T dnorm = 0;
                               if (nr > T(0)) {
                                 dnorm = detail::sign_of(vk) *
                                         static_cast<T>(std::pow(std::abs(vk), p_norm - 1.0) /
                                                        std::pow(static_cast<double>(nr), p_norm - 1.0));
                               }
                               (*gv)[i * d + k] += g[i * d + k] / den - dot / (den * den) * dnorm;
                             }
                           }
                         });
}

/// Running statistics owned by a batch-norm layer.
template <typename T>
struct BatchNormStats {
  Tensor<T>* running_mean;
  Tensor<T>* running_var;
  T momentum = T(0.9);
  T eps = T(1e-5);
};

/// Per-channel batch normalization of N x C x H x W. Train mode uses batch
/// statistics (biased variance) and folds them into the running averages as
/// running = momentum * running + (1 - momentum) * batch, with the unbiased
/// batch variance. Eval mode uses the running averages.
template <typename T>
Var<T> batch_norm(Var<T> x, Var<T> gamma, Var<T> beta, BatchNormStats<T> stats, Mode mode) {
  require_rank(x.shape(), 4, "batch_norm");
  const std::size_t n = x.shape()[0], c = x.shape()[1], hw = x.shape()[2] * x.shape()[3];
  if (gamma.value().size() != c || beta.value().size() != c) {
    throw DimensionError("batch_norm: affine parameters must have " + std::to_string(c) + " entries");
  }
  const std::size_t m = n * hw;
  const bool use_batch = mode != Mode::eval;
  if (use_batch && m < 2) throw DimensionError("batch_norm: need at least 2 values per channel in train mode");
  auto xs = x.value().data();
  auto gs = gamma.value().data(), bs = beta.value().data();
  std::vector<T> mu(c), inv_std(c);
  Tensor<T> xhat(x.shape());
  for (std::size_t k = 0; k < c; ++k) {
    T mean_k, var_k;
    if (use_batch) {
      T acc = 0;
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < hw; ++j) acc += xs[(i * c + k) * hw + j];
      mean_k = acc / static_cast<T>(m);
      T sq = 0;
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < hw; ++j) {
          const T dv = xs[(i * c + k) * hw + j] - mean_k;
          sq += dv * dv;
        }
      var_k = sq / static_cast<T>(m);
      if (mode == Mode::train) {
        T& rm = (*stats.running_mean)[k];
        T& rv = (*stats.running_var)[k];
        rm = stats.momentum * rm + (T(1) - stats.momentum) * mean_k;
        rv = stats.momentum * rv + (T(1) - stats.momentum) * (sq / static_cast<T>(m - 1));
      }
    } else {
      mean_k = (*stats.running_mean)[k];
      var_k = (*stats.running_var)[k];
    }
    mu[k] = mean_k;
    inv_std[k] = T(1) / std::sqrt(var_k + stats.eps);
  }
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < c; ++k)
      for (std::size_t j = 0; j < hw; ++j) {
        const std::size_t idx = (i * c + k) * hw + j;
        xhat[idx] = (xs[idx] - mu[k]) * inv_std[k];
        out[idx] = gs[k] * xhat[idx] + bs[k];
      }
  const auto xi = x.id(), gi = gamma.id(), bi = beta.id();
  return x.tape().record(
      "batch_norm", std::move(out), {x, gamma, beta},
      [xi, gi, bi, n, c, hw, m, use_batch, inv_std, xhat = std::move(xhat)](Tape<T>& t, const Tensor<T>& g) {
        auto gam = t.value(gi).data();
        Tensor<T>* gx = t.grad_slot(xi);
        Tensor<T>* gg = t.grad_slot(gi);
        Tensor<T>* gb = t.grad_slot(bi);
        for (std::size_t k = 0; k < c; ++k) {
          T sum_g = 0, sum_gx = 0;
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < hw; ++j) {
              const std::size_t idx = (i * c + k) * hw + j;
              sum_g += g[idx];
              sum_gx += g[idx] * xhat[idx];
            }
          if (gg) (*gg)[k] += sum_gx;
          if (gb) (*gb)[k] += sum_g;
          if (!gx) continue;
          if (use_batch) {
            const T scale = gam[k] * inv_std[k] / static_cast<T>(m);
            for (std::size_t i = 0; i < n; ++i)
              for (std::size_t j = 0; j < hw; ++j) {
                const std::size_t idx = (i * c + k) * hw + j;
                (*gx)[idx] += scale * (static_cast<T>(m) * g[idx] - sum_g - xhat[idx] * sum_gx);
              }
          } else {
            const T scale = gam[k] * inv_std[k];
            for (std::size_t i = 0; i < n; ++i)
              for (std::size_t j = 0; j < hw; ++j) {
                const std::size_t idx = (i * c + k) * hw + j;
                (*gx)[idx] += scale * g[idx];
              }
          }
        }
      });
}

}  // namespace evp
