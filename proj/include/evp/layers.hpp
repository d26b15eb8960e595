#pragma once

#include <cmath>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "evp/conv.hpp"
#include "evp/ops.hpp"
#include "evp/tape.hpp"

namespace evp {

/// Owns every parameter and buffer of a model. Addresses are stable for the
/// lifetime of the store, so layers keep raw pointers.
template <typename T>
class ParameterStore {
 public:
  Parameter<T>& add(std::string name, Tensor<T> value, bool trainable = true, bool decay = true) {
    if (find(name)) throw std::invalid_argument("duplicate parameter name '" + name + "'");
    params_.push_back(std::make_unique<Parameter<T>>(std::move(name), std::move(value), trainable, decay));
    return *params_.back();
  }

  Parameter<T>* find(const std::string& name) const {
    for (const auto& p : params_)
      if (p->name == name) return p.get();
    return nullptr;
  }

  std::vector<Parameter<T>*> all() const {
    std::vector<Parameter<T>*> out;
    for (const auto& p : params_) out.push_back(p.get());
    return out;
  }

  std::vector<Parameter<T>*> trainable() const {
    std::vector<Parameter<T>*> out;
    for (const auto& p : params_)
      if (p->trainable) out.push_back(p.get());
    return out;
  }

  std::size_t trainable_count() const {
    std::size_t n = 0;
    for (const auto& p : params_)
      if (p->trainable) n += p->value.size();
    return n;
  }

  void zero_grad() {
    for (auto& p : params_) p->zero_grad();
  }

 private:
  std::vector<std::unique_ptr<Parameter<T>>> params_;
};

template <typename T>
class Conv2dLayer {
 public:
  Conv2dLayer(ParameterStore<T>& store, const std::string& prefix, std::size_t cin, std::size_t cout, std::size_t k,
              std::size_t stride, std::size_t pad, bool bias, std::mt19937_64& rng)
      : stride_(stride), pad_(pad) {
    const double stddev = std::sqrt(2.0 / static_cast<double>(cin * k * k));
    weight_ = &store.add(prefix + ".weight", Tensor<T>::normal({cout, cin, k, k}, T(0), static_cast<T>(stddev), rng));
    if (bias) bias_ = &store.add(prefix + ".bias", Tensor<T>({cout}), true, false);
  }

  Var<T> forward(Var<T> x) const {
    Tape<T>& t = x.tape();
    std::optional<Var<T>> b;
    if (bias_) b = t.param(*bias_);
    return conv2d<T>(x, t.param(*weight_), b, stride_, pad_);
  }

  Parameter<T>& weight() const { return *weight_; }
  std::size_t stride() const { return stride_; }

 private:
  Parameter<T>* weight_ = nullptr;
  Parameter<T>* bias_ = nullptr;
  std::size_t stride_, pad_;
};

template <typename T>
class BatchNormLayer {
 public:
  BatchNormLayer(ParameterStore<T>& store, const std::string& prefix, std::size_t channels, T momentum = T(0.9),
                 T eps = T(1e-5))
      : momentum_(momentum), eps_(eps) {
    gamma_ = &store.add(prefix + ".gamma", Tensor<T>::ones({channels}), true, false);
    beta_ = &store.add(prefix + ".beta", Tensor<T>({channels}), true, false);
    mean_ = &store.add(prefix + ".running_mean", Tensor<T>({channels}), false, false);
    var_ = &store.add(prefix + ".running_var", Tensor<T>::ones({channels}), false, false);
    updates_ = &store.add(prefix + ".updates", Tensor<T>({1}), false, false);
  }

  Var<T> forward(Var<T> x, Mode mode) const {
    Tape<T>& t = x.tape();
    if (mode == Mode::train) updates_->value[0] += T(1);
    return batch_norm<T>(x, t.param(*gamma_), t.param(*beta_),
                         BatchNormStats<T>{&mean_->value, &var_->value, momentum_, eps_}, mode);
  }

  /// Number of train-mode batches seen (persisted with the checkpoint).
  std::size_t updates() const { return static_cast<std::size_t>(updates_->value[0]); }

 private:
  Parameter<T>* gamma_;
  Parameter<T>* beta_;
  Parameter<T>* mean_;
  Parameter<T>* var_;
  Parameter<T>* updates_;
  T momentum_, eps_;
};

/// Affine map N x D -> N x K with weight stored D x K.
template <typename T>
class LinearLayer {
 public:
  LinearLayer(ParameterStore<T>& store, const std::string& prefix, std::size_t in, std::size_t out,
              std::mt19937_64& rng) {
    const T bound = static_cast<T>(1.0 / std::sqrt(static_cast<double>(in)));
    weight_ = &store.add(prefix + ".weight", Tensor<T>::uniform({in, out}, -bound, bound, rng));
    bias_ = &store.add(prefix + ".bias", Tensor<T>::uniform({out}, -bound, bound, rng), true, false);
  }

  Var<T> forward(Var<T> x) const {
    Tape<T>& t = x.tape();
    return linear<T>(x, t.param(*weight_), t.param(*bias_));
  }

  Parameter<T>& weight() const { return *weight_; }
  Parameter<T>& bias() const { return *bias_; }

 private:
  Parameter<T>* weight_;
  Parameter<T>* bias_;
};

inline std::size_t se_hidden_width(std::size_t channels, std::size_t reduction) {
  return std::max<std::size_t>(channels / std::max<std::size_t>(reduction, 1), 4);
}

/// Squeeze-and-excitation: GAP -> reduce -> ReLU -> expand -> sigmoid, then
/// per-channel rescaling of the input.
template <typename T>
class SqueezeExcite {
 public:
  SqueezeExcite(ParameterStore<T>& store, const std::string& prefix, std::size_t channels, std::size_t reduction,
                std::mt19937_64& rng)
      : reduce_(store, prefix + ".reduce", channels, se_hidden_width(channels, reduction), rng),
        expand_(store, prefix + ".expand", se_hidden_width(channels, reduction), channels, rng) {}

  Var<T> gates(Var<T> x) const { return sigmoid(expand_.forward(relu(reduce_.forward(global_avg_pool(x))))); }

  Var<T> forward(Var<T> x) const { return channel_scale(x, gates(x)); }

  const LinearLayer<T>& reduce() const { return reduce_; }
  const LinearLayer<T>& expand() const { return expand_; }

 private:
  LinearLayer<T> reduce_;
  LinearLayer<T> expand_;
};

enum class ThetaGranularity { channel, block };

/// Truncated ReLU with learnable threshold(s), initialized U[0, 1].
template <typename T>
class TReLULayer {
 public:
  TReLULayer(ParameterStore<T>& store, const std::string& prefix, std::size_t channels, ThetaGranularity granularity,
             std::mt19937_64& rng) {
    const std::size_t n = granularity == ThetaGranularity::channel ? channels : 1;
    theta_ = &store.add(prefix + ".theta", Tensor<T>::uniform({n}, T(0), T(1), rng), true, false);
  }

  Var<T> forward(Var<T> x) const { return trelu<T>(x, x.tape().param(*theta_)); }

  Parameter<T>& theta() const { return *theta_; }

 private:
  Parameter<T>* theta_;
};

/// Discretized normalized 2-D Gaussian of size k x k.
template <typename T>
Tensor<T> gaussian_kernel(std::size_t k, double sigma) {
  Tensor<T> g({k, k});
  const double r = static_cast<double>(k / 2);
  double s = 0;
  std::vector<double> tmp(k * k);
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t j = 0; j < k; ++j) {
      const double dy = static_cast<double>(i) - r, dx = static_cast<double>(j) - r;
      tmp[i * k + j] = std::exp(-(dx * dx + dy * dy) / (2 * sigma * sigma));
      s += tmp[i * k + j];
    }
  for (std::size_t i = 0; i < k * k; ++i) g[i] = static_cast<T>(tmp[i] / s);
  return g;
}

enum class PDoGInit { gaussian, random };

/// Parametric difference of Gaussians: repeated depthwise convolution with
/// ONE shared kernel, returning adjacent differences d_i = f_{i+1} - f_i.
template <typename T>
class PDoG {
 public:
  PDoG(ParameterStore<T>& store, const std::string& prefix, std::size_t channels, std::size_t k, std::size_t levels,
       PDoGInit init, std::mt19937_64& rng)
      : k_(k), levels_(levels) {
    if (levels < 2) throw std::invalid_argument("pDoG needs at least two successive convolutions");
    if (k % 2 == 0) throw std::invalid_argument("pDoG kernel size must be odd for same-size padding");
    Tensor<T> w({channels, 1, k, k});
    std::uniform_real_distribution<double> noise(-0.01, 0.01);
    if (init == PDoGInit::gaussian) {
      const auto g = gaussian_kernel<T>(k, 1.0);
      for (std::size_t c = 0; c < channels; ++c)
        for (std::size_t i = 0; i < k * k; ++i) w[c * k * k + i] = g[i] + static_cast<T>(noise(rng));
    } else {
      const double bound = 1.0 / static_cast<double>(k);
      std::uniform_real_distribution<double> u(-bound, bound);
      for (auto& v : w.data()) v = static_cast<T>(u(rng));
    }
    kernel_ = &store.add(prefix + ".kernel", std::move(w));
  }

  std::vector<Var<T>> forward(Var<T> f0) const {
    Var<T> w = f0.tape().param(*kernel_);
    std::vector<Var<T>> diffs;
    Var<T> prev = f0;
    for (std::size_t i = 0; i < levels_; ++i) {
      Var<T> next = depthwise_conv2d<T>(prev, w, 1, k_ / 2);
      diffs.push_back(sub(next, prev));
      prev = next;
    }
    return diffs;
  }

  Parameter<T>& kernel() const { return *kernel_; }
  std::size_t levels() const { return levels_; }

 private:
  Parameter<T>* kernel_;
  std::size_t k_, levels_;
};

/// Maxout extrema over two DoG responses.
template <typename T>
std::pair<Var<T>, Var<T>> maxout_extrema(Var<T> d0, Var<T> d1) {
  return {maximum(d0, d1), maximum(neg(d0), neg(d1))};
}

enum class ExtremaMode { trelu, maxout };

struct EVPConvOptions {
  ExtremaMode extrema = ExtremaMode::trelu;
  ThetaGranularity theta = ThetaGranularity::channel;
  std::size_t se_reduction = 16;
  std::size_t levels = 2;
  PDoGInit init = PDoGInit::gaussian;
};

/// Intermediate values of one EVPConv evaluation.
template <typename T>
struct EVPConvTrace {
  Var<T> adapted, d0, d1, z0, z1, calibrated, merged, out;
};

/// Replacement for a k x k convolution:
/// [1x1 adapter] -> pDoG -> extrema (tReLU or maxout) -> concat -> SE ->
/// split -> elementwise max -> [2x2 average pool when stride is 2].
template <typename T>
class EVPConv {
 public:
  EVPConv(ParameterStore<T>& store, const std::string& prefix, std::size_t cin, std::size_t cout, std::size_t k,
          std::size_t stride, const EVPConvOptions& opts, std::mt19937_64& rng)
      : channels_(cout), stride_(stride), extrema_(opts.extrema) {
    if (stride != 1 && stride != 2) throw std::invalid_argument("EVPConv supports stride 1 or 2");
    if (cin != cout) adapter_.emplace(store, prefix + ".adapter", cin, cout, 1, 1, 0, false, rng);
    pdog_.emplace(store, prefix + ".pdog", cout, k, opts.levels, opts.init, rng);
    if (opts.extrema == ExtremaMode::trelu) trelu_.emplace(store, prefix + ".trelu", cout, opts.theta, rng);
    se_.emplace(store, prefix + ".se", 2 * cout, opts.se_reduction, rng);
  }

  EVPConvTrace<T> trace(Var<T> x) const {
    EVPConvTrace<T> tr;
    tr.adapted = adapter_ ? adapter_->forward(x) : x;
    auto diffs = pdog_->forward(tr.adapted);
    tr.d0 = diffs[0];
    tr.d1 = diffs[1];
    if (extrema_ == ExtremaMode::trelu) {
      tr.z0 = trelu_->forward(tr.d0);
      tr.z1 = trelu_->forward(tr.d1);
    } else {
      std::tie(tr.z0, tr.z1) = maxout_extrema(tr.d0, tr.d1);
    }
    tr.calibrated = se_->forward(concat_channels(tr.z0, tr.z1));
    tr.merged = maximum(slice_channels(tr.calibrated, 0, channels_), slice_channels(tr.calibrated, channels_, channels_));
    tr.out = stride_ == 2 ? avg_pool2(tr.merged) : tr.merged;
    return tr;
  }

  Var<T> forward(Var<T> x) const { return trace(x).out; }

  const PDoG<T>& pdog() const { return *pdog_; }
  const SqueezeExcite<T>& se() const { return *se_; }
  const TReLULayer<T>* trelu() const { return trelu_ ? &*trelu_ : nullptr; }
  const Conv2dLayer<T>* adapter() const { return adapter_ ? &*adapter_ : nullptr; }

 private:
  std::size_t channels_, stride_;
  ExtremaMode extrema_;
  std::optional<Conv2dLayer<T>> adapter_;
  std::optional<PDoG<T>> pdog_;
  std::optional<TReLULayer<T>> trelu_;
  std::optional<SqueezeExcite<T>> se_;
};

/// Projected normalization: per-pixel 1x1 projection, per-channel l2 norm over
/// pixels, then l_p normalization of the resulting vector. The projection is
/// stored as a p x c x 1 x 1 convolution weight (row j is w_j).
template <typename T>
class PNLLayer {
 public:
  PNLLayer(ParameterStore<T>& store, const std::string& prefix, std::size_t in, std::size_t out, double p_norm,
           T eps, std::mt19937_64& rng)
      : p_norm_(p_norm), eps_(eps) {
    Tensor<T> w({out, in, 1, 1});
    std::uniform_real_distribution<double> noise(-0.01, 0.01);
    for (std::size_t j = 0; j < out; ++j)
      for (std::size_t i = 0; i < in; ++i) w[j * in + i] = static_cast<T>((i == j ? 1.0 : 0.0) + noise(rng));
    proj_ = &store.add(prefix + ".proj", std::move(w));
  }

  Var<T> norms(Var<T> x) const {
    return spatial_l2_norm(conv2d<T>(x, x.tape().param(*proj_), std::nullopt, 1, 0));
  }

  Var<T> forward(Var<T> x) const { return lp_normalize(norms(x), p_norm_, eps_); }

  Parameter<T>& projection() const { return *proj_; }
  double p_norm() const { return p_norm_; }

 private:
  Parameter<T>* proj_;
  double p_norm_;
  T eps_;
};

}  // namespace evp
