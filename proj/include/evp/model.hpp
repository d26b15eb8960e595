#pragma once

#include <array>
#include <atomic>
#include <iostream>
#include <filesystem>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "evp/layers.hpp"
#include "evp/serialize.hpp"

namespace evp {

enum class Family { se_resnet, evpnet };

inline std::string to_string(Family f) { return f == Family::evpnet ? "evpnet" : "se-resnet"; }

inline Family parse_family(const std::string& s) {
  if (s == "evpnet") return Family::evpnet;
  if (s == "se-resnet" || s == "se_resnet") return Family::se_resnet;
  throw std::invalid_argument("unknown model family '" + s + "' (expected se-resnet or evpnet)");
}

struct ModelConfig {
  Family family = Family::se_resnet;
  std::size_t depth = 20;
  std::vector<std::size_t> widths{16, 32, 64};
  std::size_t min_mid_width = 8;
  bool pdog = false;
  bool trelu = false;
  bool pnl = false;
  std::size_t classes = 10;
  std::size_t channels = 3;
  std::size_t image_size = 32;
  ThetaGranularity theta = ThetaGranularity::channel;
  std::size_t se_reduction = 16;
  std::size_t pdog_levels = 2;
  PDoGInit pdog_init = PDoGInit::gaussian;
  double pnl_norm = 2.0;
  std::vector<double> input_mean{0.5, 0.5, 0.5};
  std::vector<double> input_std{0.25, 0.25, 0.25};
  std::uint64_t seed = 0;

  /// Family defaults: evpnet turns every component on, se-resnet none.
  static ModelConfig for_family(Family f) {
    ModelConfig c;
    c.family = f;
    c.pdog = c.trelu = c.pnl = f == Family::evpnet;
    return c;
  }

  std::size_t blocks_per_stage() const { return (depth - 2) / 9; }
  std::size_t mid_width(std::size_t width) const { return std::max(width / 4, min_mid_width); }

  void validate() const {
    if (depth < 11 || (depth - 2) % 9 != 0)
      throw std::invalid_argument("depth " + std::to_string(depth) + " is not of the form 9b+2 with b >= 1");
    if (widths.empty()) throw std::invalid_argument("at least one stage width is required");
    for (auto w : widths)
      if (w == 0) throw std::invalid_argument("stage widths must be positive");
    if (classes < 2) throw std::invalid_argument("at least two classes are required");
    if (channels == 0 || image_size < 4) throw std::invalid_argument("invalid input geometry");
    if (input_mean.size() != channels || input_std.size() != channels)
      throw std::invalid_argument("input normalization needs one mean/std per channel");
    for (double s : input_std)
      if (!(s > 0)) throw std::invalid_argument("input std must be positive");
    if (pdog_levels < 2) throw std::invalid_argument("pdog_levels must be at least 2");
    if (!(pnl_norm >= 1)) throw std::invalid_argument("pnl p_norm must be >= 1");
  }
};

template <typename T>
struct ForwardResult {
  Var<T> logits;
  std::vector<Var<T>> taps;
};

/// ReLU or, in the trelu-only ablation, a learnable truncated ReLU.
template <typename T>
class Activation {
 public:
  Activation() = default;
  Activation(ParameterStore<T>& store, const std::string& prefix, std::size_t channels, bool truncated,
             ThetaGranularity g, std::mt19937_64& rng) {
    if (truncated) trelu_.emplace(store, prefix, channels, g, rng);
  }
  Var<T> forward(Var<T> x) const { return trelu_ ? trelu_->forward(x) : relu(x); }
  const char* type() const { return trelu_ ? "trelu" : "relu"; }

 private:
  std::optional<TReLULayer<T>> trelu_;
};

template <typename T>
class Bottleneck {
 public:
  Bottleneck(ParameterStore<T>& store, const std::string& p, std::size_t in, std::size_t out, std::size_t stride,
             const ModelConfig& cfg, std::mt19937_64& rng) {
    const std::size_t mid = cfg.mid_width(out);
    const bool block_trelu = cfg.trelu && !cfg.pdog;
    conv1_.emplace(store, p + ".conv1", in, mid, 1, 1, 0, false, rng);
    bn1_.emplace(store, p + ".bn1", mid);
    act1_ = Activation<T>(store, p + ".act1", mid, block_trelu, cfg.theta, rng);
    if (cfg.pdog) {
      EVPConvOptions o;
      o.extrema = cfg.trelu ? ExtremaMode::trelu : ExtremaMode::maxout;
      o.theta = cfg.theta;
      o.se_reduction = cfg.se_reduction;
      o.levels = cfg.pdog_levels;
      o.init = cfg.pdog_init;
      evp_.emplace(store, p + ".evp", mid, mid, 3, stride, o, rng);
    } else {
      conv2_.emplace(store, p + ".conv2", mid, mid, 3, stride, 1, false, rng);
    }
    bn2_.emplace(store, p + ".bn2", mid);
    act2_ = Activation<T>(store, p + ".act2", mid, block_trelu, cfg.theta, rng);
    if (!cfg.pdog) se_.emplace(store, p + ".se", mid, cfg.se_reduction, rng);
    conv3_.emplace(store, p + ".conv3", mid, out, 1, 1, 0, false, rng);
    bn3_.emplace(store, p + ".bn3", out);
    if (in != out || stride != 1) {
      shortcut_.emplace(store, p + ".shortcut.conv", in, out, 1, stride, 0, false, rng);
      shortcut_bn_.emplace(store, p + ".shortcut.bn", out);
    }
    act3_ = Activation<T>(store, p + ".act3", out, block_trelu, cfg.theta, rng);
  }

  Var<T> forward(Var<T> x, Mode mode) const {
    Var<T> h = act1_.forward(bn1_->forward(conv1_->forward(x), mode));
    h = evp_ ? evp_->forward(h) : conv2_->forward(h);
    h = act2_.forward(bn2_->forward(h, mode));
    if (se_) h = se_->forward(h);
    h = bn3_->forward(conv3_->forward(h), mode);
    Var<T> s = shortcut_ ? shortcut_bn_->forward(shortcut_->forward(x), mode) : x;
    return act3_.forward(add(h, s));
  }

  void describe(std::vector<std::string>& out) const {
    out.insert(out.end(), {"conv1x1", "bn", act1_.type(), evp_ ? "evpconv" : "conv3x3", "bn", act2_.type()});
    if (se_) out.push_back("se");
    out.insert(out.end(), {"conv1x1", "bn", shortcut_ ? "shortcut:conv1x1+bn" : "shortcut:identity", "add",
                           act3_.type()});
  }

 private:
  std::optional<Conv2dLayer<T>> conv1_, conv2_, conv3_, shortcut_;
  std::optional<BatchNormLayer<T>> bn1_, bn2_, bn3_, shortcut_bn_;
  std::optional<EVPConv<T>> evp_;
  std::optional<SqueezeExcite<T>> se_;
  Activation<T> act1_, act2_, act3_;
};

/// A built network: fixed input normalization, stem, residual stages of
/// bottleneck blocks, pooling head (GAP or PNL) and a linear classifier.
template <typename T>
class ModelGraph {
 public:
  explicit ModelGraph(ModelConfig cfg) : cfg_(std::move(cfg)), store_(std::make_unique<ParameterStore<T>>()) {
    cfg_.validate();
    std::mt19937_64 rng(cfg_.seed);
    auto& st = *store_;
    Tensor<T> mean({cfg_.channels}), sd({cfg_.channels});
    for (std::size_t i = 0; i < cfg_.channels; ++i) {
      mean[i] = static_cast<T>(cfg_.input_mean[i]);
      sd[i] = static_cast<T>(cfg_.input_std[i]);
    }
    input_mean_ = &st.add("input.mean", std::move(mean), false, false);
    input_std_ = &st.add("input.std", std::move(sd), false, false);

    const std::size_t w0 = cfg_.widths.front();
    if (cfg_.pdog) {
      EVPConvOptions o;
      o.extrema = cfg_.trelu ? ExtremaMode::trelu : ExtremaMode::maxout;
      o.theta = cfg_.theta;
      o.se_reduction = cfg_.se_reduction;
      o.levels = cfg_.pdog_levels;
      o.init = cfg_.pdog_init;
      stem_evp_.emplace(st, "stem.evp", cfg_.channels, w0, 3, 1, o, rng);
    } else {
      stem_conv_.emplace(st, "stem.conv", cfg_.channels, w0, 3, 1, 1, false, rng);
    }
    stem_bn_.emplace(st, "stem.bn", w0);

    std::size_t in = w0;
    for (std::size_t s = 0; s < cfg_.widths.size(); ++s) {
      for (std::size_t b = 0; b < cfg_.blocks_per_stage(); ++b) {
        const std::size_t stride = (s > 0 && b == 0) ? 2 : 1;
        const std::string name = "stage" + std::to_string(s + 1) + ".block" + std::to_string(b);
        blocks_.push_back(std::make_unique<Bottleneck<T>>(st, name, in, cfg_.widths[s], stride, cfg_, rng));
        in = cfg_.widths[s];
      }
    }
    if (cfg_.pnl) pnl_.emplace(st, "head.pnl", in, in, cfg_.pnl_norm, static_cast<T>(1e-8), rng);
    fc_.emplace(st, "head.fc", in, cfg_.classes, rng);
  }

  ModelGraph(const ModelGraph&) = delete;
  ModelGraph& operator=(const ModelGraph&) = delete;
  ModelGraph(ModelGraph&&) = default;
  ModelGraph& operator=(ModelGraph&&) = default;

  const ModelConfig& config() const { return cfg_; }
  ParameterStore<T>& store() const { return *store_; }
  std::vector<Parameter<T>*> parameters() const { return store_->trainable(); }
  std::vector<Parameter<T>*> state() const { return store_->all(); }
  std::size_t parameter_count() const { return store_->trainable_count(); }

  Shape input_shape(std::size_t n) const { return {n, cfg_.channels, cfg_.image_size, cfg_.image_size}; }

  void set_input_normalization(std::span<const double> mean, std::span<const double> stddev) {
    if (mean.size() != cfg_.channels || stddev.size() != cfg_.channels)
      throw DimensionError("input normalization: expected " + std::to_string(cfg_.channels) + " channels");
    for (std::size_t i = 0; i < cfg_.channels; ++i) {
      if (!(stddev[i] > 0)) throw std::invalid_argument("input normalization: std must be positive");
      input_mean_->value[i] = static_cast<T>(mean[i]);
      input_std_->value[i] = static_cast<T>(stddev[i]);
      cfg_.input_mean[i] = mean[i];
      cfg_.input_std[i] = stddev[i];
    }
  }

  /// Taps: stem output, every block output, then the pre-classifier feature.
  ForwardResult<T> forward(Var<T> x, Mode mode, bool with_taps = false) const {
    if (x.shape().size() != 4 || x.shape()[1] != cfg_.channels || x.shape()[2] != cfg_.image_size ||
        x.shape()[3] != cfg_.image_size) {
      throw DimensionError("model input " + to_string(x.shape()) + " does not match " + to_string(input_shape(0)) +
                           " (any N)");
    }
    if (mode == Mode::eval && stem_bn_->updates() == 0 && !warned_->exchange(true))
      std::cerr << "warning: model evaluated before any training step; batch norm uses initial statistics\n";
    ForwardResult<T> r;
    Var<T> h = normalize_channels<T>(x, input_mean_->value.data(), input_std_->value.data());
    h = stem_evp_ ? stem_evp_->forward(h) : stem_conv_->forward(h);
    h = relu(stem_bn_->forward(h, mode));
    if (with_taps) r.taps.push_back(h);
    for (const auto& b : blocks_) {
      h = b->forward(h, mode);
      if (with_taps) r.taps.push_back(h);
    }
    Var<T> feat = pnl_ ? pnl_->forward(h) : global_avg_pool(h);
    if (with_taps) r.taps.push_back(feat);
    r.logits = fc_->forward(feat);
    return r;
  }

  std::size_t tap_count() const { return blocks_.size() + 2; }

  std::vector<std::string> tap_names() const {
    std::vector<std::string> out{"stem"};
    const std::size_t b = cfg_.blocks_per_stage();
    for (std::size_t i = 0; i < blocks_.size(); ++i)
      out.push_back("stage" + std::to_string(i / b + 1) + ".block" + std::to_string(i % b));
    out.push_back(pnl_ ? "head.pnl" : "head.gap");
    return out;
  }

  std::vector<std::string> layer_types() const {
    std::vector<std::string> out{"normalize", stem_evp_ ? "evpconv" : "conv3x3", "bn", "relu"};
    for (const auto& b : blocks_) b->describe(out);
    out.push_back(pnl_ ? "pnl" : "gap");
    out.push_back("linear");
    return out;
  }

  /// Inference-only logits; no parameter gradients are recorded.
  Tensor<T> logits(const Tensor<T>& x, Mode mode = Mode::eval) const {
    Tape<T> t(typename Tape<T>::Options{true, false, false});
    return forward(t.input(x), mode).logits.value();
  }

  /// Inference-only tap values, in tap_names() order.
  std::vector<Tensor<T>> taps(const Tensor<T>& x, Mode mode = Mode::eval) const {
    Tape<T> t(typename Tape<T>::Options{true, false, false});
    auto fr = forward(t.input(x), mode, true);
    std::vector<Tensor<T>> out;
    for (const auto& v : fr.taps) out.push_back(v.value());
    return out;
  }

  struct InputGradient {
    T loss;
    Tensor<T> logits;
    Tensor<T> grad;
  };

  /// Mean cross-entropy and its gradient with respect to the input only.
  InputGradient loss_gradient(const Tensor<T>& x, std::span<const int> labels, Mode mode = Mode::eval) const {
    Tape<T> t(typename Tape<T>::Options{true, false, false});
    Var<T> in = t.input(x, true);
    auto fr = forward(in, mode);
    Var<T> loss = softmax_cross_entropy(fr.logits, labels);
    t.backward(loss);
    return {loss.value().item(), fr.logits.value(), t.grad(in)};
  }

  void save(const std::filesystem::path& base) const {
    auto all = store_->all();
    save_checkpoint<T>(base, std::vector<const Parameter<T>*>(all.begin(), all.end()));
  }

  void load(const std::filesystem::path& base) {
    load_checkpoint<T>(base, store_->all());
    for (std::size_t i = 0; i < cfg_.channels; ++i) {
      cfg_.input_mean[i] = static_cast<double>(input_mean_->value[i]);
      cfg_.input_std[i] = static_cast<double>(input_std_->value[i]);
    }
  }

 private:
  ModelConfig cfg_;
  std::unique_ptr<ParameterStore<T>> store_;
  Parameter<T>* input_mean_ = nullptr;
  Parameter<T>* input_std_ = nullptr;
  std::optional<Conv2dLayer<T>> stem_conv_;
  std::optional<EVPConv<T>> stem_evp_;
  std::optional<BatchNormLayer<T>> stem_bn_;
  std::vector<std::unique_ptr<Bottleneck<T>>> blocks_;
  std::optional<PNLLayer<T>> pnl_;
  std::optional<LinearLayer<T>> fc_;
  std::shared_ptr<std::atomic<bool>> warned_ = std::make_shared<std::atomic<bool>>(false);
};

}  // namespace evp
