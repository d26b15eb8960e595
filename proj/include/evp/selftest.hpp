#pragma once

#include <chrono>
#include <cmath>
#include <deque>
#include <functional>
#include <memory>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "evp/attack.hpp"
#include "evp/conv.hpp"
#include "evp/dataset.hpp"
#include "evp/gradcheck.hpp"
#include "evp/layers.hpp"
#include "evp/model.hpp"
#include "evp/ops.hpp"
#include "evp/trainer.hpp"

namespace evp::selftest {

struct CheckResult {
  std::string name;
  bool passed = true;
  std::size_t trials = 0;
  std::string detail;
};

struct SuiteReport {
  std::string suite;
  std::vector<CheckResult> checks;
  double seconds = 0;

  bool passed() const {
    for (const auto& c : checks)
      if (!c.passed) return false;
    return !checks.empty();
  }

  std::string summary() const {
    std::ostringstream os;
    for (const auto& c : checks)
      os << (c.passed ? "  ok    " : "  FAIL  ") << suite << "/" << c.name << " (" << c.trials << " trials) "
         << c.detail << "\n";
    return os.str();
  }
};

namespace detail {

template <typename F>
SuiteReport timed(std::string name, F&& body) {
  const auto t0 = std::chrono::steady_clock::now();
  SuiteReport r{std::move(name), {}, 0};
  body(r);
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

inline std::string fmt(double v) {
  std::ostringstream os;
  os.precision(3);
  os << v;
  return os.str();
}

}  // namespace detail

// ---- gradient suite -------------------------------------------------------

/// Owns the tensors and layers of one finite-difference problem.
struct GradState {
  std::deque<Parameter<double>> inputs;
  ParameterStore<double> store;
  std::vector<std::shared_ptr<void>> layers;
  std::deque<Tensor<double>> buffers;

  Parameter<double>& input(const std::string& name, Shape shape) {
    inputs.emplace_back(name, Tensor<double>(std::move(shape)));
    return inputs.back();
  }

  template <typename L, typename... A>
  L& layer(A&&... args) {
    auto p = std::make_shared<L>(std::forward<A>(args)...);
    layers.push_back(p);
    return *p;
  }

  std::vector<Parameter<double>*> params() {
    std::vector<Parameter<double>*> out;
    for (auto& p : inputs) out.push_back(&p);
    for (auto* p : store.trainable()) out.push_back(p);
    return out;
  }
};

struct GradProblem {
  std::shared_ptr<GradState> state;
  std::function<Var<double>(Tape<double>&)> fn;
};

struct GradCase {
  std::string name;
  std::function<GradProblem(std::mt19937_64&)> make;
};

/// Redraws every value: thresholds in [0.002, 0.02] so most responses stay
/// active, batch-norm scales in [0.5, 1.5], everything else in [-1, 1].
inline void draw_params(const std::vector<Parameter<double>*>& ps, std::mt19937_64& rng) {
  for (auto* p : ps) {
    double lo = -1, hi = 1;
    if (p->name.ends_with("theta")) lo = 0.002, hi = 0.02;
    if (p->name.ends_with("gamma")) lo = 0.5, hi = 1.5;
    p->value = Tensor<double>::uniform(p->value.shape(), lo, hi, rng);
  }
}

/// Weighted sum with fixed pseudo-random weights so each element has a
/// distinct gradient.
inline Var<double> project(Var<double> y) {
  std::mt19937_64 r(99);
  return sum(mul(y, y.tape().constant(Tensor<double>::uniform(y.shape(), -1.0, 1.0, r))));
}

inline std::vector<GradCase> gradient_cases() {
  using S = GradState;
  using P = GradProblem;
  std::vector<GradCase> c;
  auto make_state = [] { return std::make_shared<S>(); };

  c.push_back({"conv2d", [=](auto&) {
                 auto s = make_state();
                 auto &x = s->input("x", {2, 3, 5, 5}), &w = s->input("w", {4, 3, 3, 3}), &b = s->input("b", {4});
                 auto &w1 = s->input("w1", {2, 4, 1, 1});
                 return P{s, [&](Tape<double>& t) {
                            auto y = conv2d(t.param(x), t.param(w), t.param(b), 2, 1);
                            return project(conv2d<double>(y, t.param(w1), std::nullopt, 1, 0));
                          }};
               }});
  c.push_back({"depthwise_conv2d", [=](auto&) {
                 auto s = make_state();
                 auto &x = s->input("x", {2, 3, 6, 6}), &w = s->input("w", {3, 1, 3, 3});
                 return P{s, [&](Tape<double>& t) { return project(depthwise_conv2d(t.param(x), t.param(w), 1, 1)); }};
               }});
  c.push_back({"depthwise_conv2d_stride2", [=](auto&) {
                 auto s = make_state();
                 auto &x = s->input("x", {2, 2, 5, 5}), &w = s->input("w", {2, 1, 3, 3});
                 return P{s, [&](Tape<double>& t) { return project(depthwise_conv2d(t.param(x), t.param(w), 2, 1)); }};
               }});
  c.push_back({"linear", [=](auto&) {
                 auto s = make_state();
                 auto &x = s->input("x", {3, 4}), &w = s->input("w", {4, 5}), &b = s->input("b", {5});
                 return P{s, [&](Tape<double>& t) { return project(linear(t.param(x), t.param(w), t.param(b))); }};
               }});
  c.push_back({"elementwise", [=](auto&) {
                 auto s = make_state();
                 auto &a = s->input("a", {3, 4}), &b = s->input("b", {3, 4});
                 return P{s, [&](Tape<double>& t) {
                            auto x = t.param(a), y = t.param(b);
                            auto r = add(maximum(x, y), minimum(scale(x, 0.5), y));
                            r = add(r, evp::abs(sub(x, y)));
                            r = add(r, relu(x));
                            r = add(r, sigmoid(mul(x, y)));
                            r = add(r, mul(sign(x), y));
                            return add(project(neg(r)), add(sum(mul(x, x)), mean(y)));
                          }};
               }});
  c.push_back({"layout", [=](auto&) {
                 auto s = make_state();
                 auto &a = s->input("a", {2, 2, 3, 3}), &b = s->input("b", {2, 3, 3, 3}), &g = s->input("s", {2, 5});
                 return P{s, [&](Tape<double>& t) {
                            auto cc = concat_channels(t.param(a), t.param(b));
                            auto sc = channel_scale(cc, t.param(g));
                            auto y = add(slice_channels(sc, 1, 3), t.param(b));
                            return project(reshape(flatten(y), Shape{6, 9}));
                          }};
               }});
  c.push_back({"normalize_channels", [=](auto&) {
                 auto s = make_state();
                 auto& x = s->input("x", {2, 3, 2, 2});
                 return P{s, [&](Tape<double>& t) {
                            static const double m[] = {0.1, 0.5, -0.2}, sd[] = {0.5, 2.0, 0.25};
                            return project(normalize_channels<double>(t.param(x), m, sd));
                          }};
               }});
  c.push_back({"pooling", [=](auto&) {
                 auto s = make_state();
                 auto& x = s->input("x", {2, 3, 4, 6});
                 return P{s, [&](Tape<double>& t) {
                            return add(project(global_avg_pool(t.param(x))), project(avg_pool2(t.param(x))));
                          }};
               }});
  c.push_back({"softmax_cross_entropy", [=](auto&) {
                 auto s = make_state();
                 auto& z = s->input("z", {4, 5});
                 return P{s, [&](Tape<double>& t) {
                            static const std::vector<int> labels{1, 4, 0, 2};
                            return softmax_cross_entropy(scale(t.param(z), 3.0), std::span<const int>(labels));
                          }};
               }});
  for (bool per_channel : {true, false}) {
    c.push_back({per_channel ? "trelu_channel" : "trelu_shared", [=](auto&) {
                   auto s = make_state();
                   auto& x = s->input("x", {2, 3, 3, 3});
                   auto& th = s->input("theta", {per_channel ? std::size_t(3) : std::size_t(1)});
                   return P{s, [&](Tape<double>& t) { return project(trelu(t.param(x), t.param(th))); }};
                 }});
  }
  c.push_back({"spatial_l2_norm", [=](auto&) {
                 auto s = make_state();
                 auto& u = s->input("u", {2, 3, 3, 2});
                 return P{s, [&](Tape<double>& t) { return project(spatial_l2_norm(t.param(u))); }};
               }});
  for (double p : {1.0, 2.0, 3.0}) {
    c.push_back({"lp_normalize_p" + detail::fmt(p), [=](auto&) {
                   auto s = make_state();
                   auto& v = s->input("v", {3, 4});
                   return P{s, [&, p](Tape<double>& t) { return project(lp_normalize(t.param(v), p, 1e-8)); }};
                 }});
  }
  for (Mode mode : {Mode::train, Mode::batch_stats, Mode::eval}) {
    const std::string name = mode == Mode::train ? "batch_norm_train" : mode == Mode::eval ? "batch_norm_eval"
                                                                                           : "batch_norm_batch_stats";
    c.push_back({name, [=](auto&) {
                   auto s = make_state();
                   auto &x = s->input("x", {3, 2, 3, 3}), &g = s->input("gamma", {2}), &b = s->input("beta", {2});
                   s->buffers.emplace_back(Shape{2}, 0.1);
                   s->buffers.emplace_back(Shape{2}, 1.3);
                   auto* rm = &s->buffers[0];
                   auto* rv = &s->buffers[1];
                   return P{s, [&, rm, rv, mode](Tape<double>& t) {
                              return project(batch_norm(t.param(x), t.param(g), t.param(b), {rm, rv}, mode));
                            }};
                 }});
  }

  // evp layers
  c.push_back({"conv_bn_linear_layers", [=](std::mt19937_64& rng) {
                 auto s = make_state();
                 auto& x = s->input("x", {3, 2, 4, 4});
                 auto& conv = s->layer<Conv2dLayer<double>>(s->store, "conv", 2, 3, 3, 1, 1, true, rng);
                 auto& bn = s->layer<BatchNormLayer<double>>(s->store, "bn", 3);
                 auto& fc = s->layer<LinearLayer<double>>(s->store, "fc", 3, 2, rng);
                 return P{s, [&](Tape<double>& t) {
                            return project(fc.forward(global_avg_pool(bn.forward(conv.forward(t.param(x)), Mode::train))));
                          }};
               }});
  c.push_back({"squeeze_excite", [=](std::mt19937_64& rng) {
                 auto s = make_state();
                 auto& x = s->input("x", {2, 6, 3, 3});
                 auto& se = s->layer<SqueezeExcite<double>>(s->store, "se", 6, 2, rng);
                 return P{s, [&](Tape<double>& t) { return project(se.forward(t.param(x))); }};
               }});
  for (auto g : {ThetaGranularity::channel, ThetaGranularity::block}) {
    c.push_back({g == ThetaGranularity::channel ? "trelu_layer_channel" : "trelu_layer_block",
                 [=](std::mt19937_64& rng) {
                   auto s = make_state();
                   auto& x = s->input("x", {2, 3, 3, 3});
                   auto& tr = s->layer<TReLULayer<double>>(s->store, "act", 3, g, rng);
                   return P{s, [&](Tape<double>& t) { return project(tr.forward(t.param(x))); }};
                 }});
  }
  for (std::size_t levels : {2, 3}) {
    c.push_back({"pdog_levels" + std::to_string(levels), [=](std::mt19937_64& rng) {
                   auto s = make_state();
                   auto& x = s->input("x", {2, 2, 5, 5});
                   auto& pd = s->layer<PDoG<double>>(s->store, "pdog", 2, 3, levels, PDoGInit::random, rng);
                   return P{s, [&](Tape<double>& t) {
                              auto ds = pd.forward(t.param(x));
                              Var<double> acc = project(ds[0]);
                              for (std::size_t i = 1; i < ds.size(); ++i) acc = add(acc, scale(project(ds[i]), 0.5 + i));
                              return acc;
                            }};
                 }});
  }
  c.push_back({"maxout_extrema", [=](auto&) {
                 auto s = make_state();
                 auto &a = s->input("d0", {2, 2, 3, 3}), &b = s->input("d1", {2, 2, 3, 3});
                 return P{s, [&](Tape<double>& t) {
                            auto [z0, z1] = maxout_extrema(t.param(a), t.param(b));
                            return add(project(z0), scale(project(z1), 0.7));
                          }};
               }});
  for (auto mode : {ExtremaMode::trelu, ExtremaMode::maxout})
    for (std::size_t stride : {1, 2})
      for (std::size_t cin : {2, 3}) {
        const std::string name = std::string("evpconv_") + (mode == ExtremaMode::trelu ? "trelu" : "maxout") + "_s" +
                                 std::to_string(stride) + (cin == 3 ? "_same" : "_adapter");
        c.push_back({name, [=](std::mt19937_64& rng) {
                       auto s = make_state();
                       auto& x = s->input("x", {1, cin, 4, 4});
                       EVPConvOptions o;
                       o.extrema = mode;
                       o.se_reduction = 2;
                       auto& blk = s->layer<EVPConv<double>>(s->store, "evp", cin, 3, 3, stride, o, rng);
                       return P{s, [&](Tape<double>& t) { return project(blk.forward(t.param(x))); }};
                     }});
      }
  for (double p : {1.0, 2.0, 3.0}) {
    c.push_back({"pnl_p" + detail::fmt(p), [=](std::mt19937_64& rng) {
                   auto s = make_state();
                   auto& x = s->input("x", {2, 3, 3, 3});
                   auto& pnl = s->layer<PNLLayer<double>>(s->store, "pnl", 3, 4, p, 1e-8, rng);
                   return P{s, [&](Tape<double>& t) { return project(pnl.forward(t.param(x))); }};
                 }});
  }
  return c;
}

inline CheckResult run_gradient_case(const GradCase& gc, std::size_t seeds, const GradCheckOptions& base = {}) {
  CheckResult r{gc.name, true, seeds, ""};
  double worst = 0;
  int resamples = 0, blocked = 0, failed = 0;
  for (std::size_t seed = 0; seed < seeds; ++seed) {
    std::mt19937_64 rng(1000 + seed);
    auto prob = gc.make(rng);
    auto params = prob.state->params();
    draw_params(params, rng);
    GradCheckOptions o = base;
    if (o.max_resamples < 50) o.max_resamples = 50;
    o.resample = [&](int) { draw_params(params, rng); };
    auto rep = finite_diff_check<double>(prob.fn, params, o);
    worst = std::max(worst, rep.max_rel_error);
    resamples += rep.resamples;
    if (rep.kink_blocked) ++blocked;
    if (!rep.passed()) ++failed;
  }
  r.passed = failed == 0;
  r.detail = "max_rel_error=" + detail::fmt(worst) + " resamples=" + std::to_string(resamples);
  if (blocked) r.detail += " kink_blocked=" + std::to_string(blocked);
  if (failed) r.detail += " failed_seeds=" + std::to_string(failed);
  return r;
}

/// Central differences in double precision for every op and layer.
inline SuiteReport gradient_suite(std::size_t seeds = 20, double tolerance = 1e-5) {
  return detail::timed("gradients", [&](SuiteReport& r) {
    GradCheckOptions o;
    o.tolerance = tolerance;
    for (const auto& gc : gradient_cases()) r.checks.push_back(run_gradient_case(gc, seeds, o));
  });
}

// ---- identity suite -------------------------------------------------------

namespace detail {

inline Tensor<double> tie_heavy(Shape s, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> small(-3, 3);
  std::bernoulli_distribution coin;
  std::normal_distribution<double> normal;
  Tensor<double> t(std::move(s));
  const bool grid = coin(rng);
  for (auto& v : t.data()) v = grid ? small(rng) * 0.25 : normal(rng);
  return t;
}

inline Shape random_nchw(std::mt19937_64& rng, std::size_t max_c = 4, std::size_t max_hw = 6) {
  std::uniform_int_distribution<std::size_t> n(1, 3), c(1, max_c), hw(1, max_hw);
  return {n(rng), c(rng), hw(rng), hw(rng)};
}

inline bool bit_equal(const Tensor<double>& a, const Tensor<double>& b) {
  if (a.shape() != b.shape()) return false;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (!(a[i] == b[i])) return false;
  return true;
}

inline ModelConfig identity_model(Family f) {
  auto c = ModelConfig::for_family(f);
  c.depth = 11;
  c.widths = {4, 8, 8};
  c.min_mid_width = 4;
  c.image_size = 8;
  c.se_reduction = 4;
  return c;
}

/// One training step on random data so batch statistics are populated.
inline void warm_up(ModelGraph<double>& m, std::mt19937_64& rng) {
  SgdMomentum<double> opt(0.9, 0);
  auto x = Tensor<double>::uniform(m.input_shape(8), 0, 1, rng);
  std::vector<int> y(8);
  for (std::size_t i = 0; i < 8; ++i) y[i] = static_cast<int>(i % m.config().classes);
  train_step(m, opt, x, y, 0.01);
}

}  // namespace detail

inline CheckResult maxout_identity(std::size_t trials, std::uint64_t seed = 1) {
  std::mt19937_64 rng(seed);
  CheckResult r{"maxout_equals_max_abs", true, trials, ""};
  std::size_t bad = 0;
  for (std::size_t i = 0; i < trials; ++i) {
    auto s = detail::random_nchw(rng);
    Tape<double> t;
    auto d0 = t.input(detail::tie_heavy(s, rng)), d1 = t.input(detail::tie_heavy(s, rng));
    auto [z0, z1] = maxout_extrema(d0, d1);
    if (!detail::bit_equal(maximum(z0, z1).value(), maximum(evp::abs(d0), evp::abs(d1)).value())) ++bad;
  }
  r.passed = bad == 0;
  r.detail = "mismatches=" + std::to_string(bad);
  return r;
}

inline CheckResult trelu_zero_identity(std::size_t trials, std::uint64_t seed = 2) {
  std::mt19937_64 rng(seed);
  CheckResult r{"trelu_zero_threshold_is_abs", true, trials, ""};
  std::size_t bad = 0;
  for (std::size_t i = 0; i < trials; ++i) {
    auto s = detail::random_nchw(rng);
    Tape<double> t;
    auto x = t.input(detail::tie_heavy(s, rng));
    const std::size_t tc = i % 2 ? s[1] : 1;
    auto theta = t.input(Tensor<double>({tc}, i % 3 == 0 ? -0.0 : 0.0));
    if (!detail::bit_equal(trelu(x, theta).value(), evp::abs(x).value())) ++bad;
  }
  r.passed = bad == 0;
  r.detail = "mismatches=" + std::to_string(bad);
  return r;
}

inline CheckResult pgd1_equals_fgsm(std::size_t trials, std::uint64_t seed = 3) {
  std::mt19937_64 rng(seed);
  CheckResult r{"pgd1_equals_fgsm", true, trials, ""};
  std::vector<ModelGraph<double>> models;
  for (auto f : {Family::se_resnet, Family::evpnet}) {
    auto cfg = detail::identity_model(f);
    cfg.seed = seed;
    models.emplace_back(cfg);
    detail::warm_up(models.back(), rng);
  }
  std::uniform_int_distribution<int> eps_px(1, 16), label(0, 9);
  std::size_t bad = 0;
  for (std::size_t i = 0; i < trials; ++i) {
    const auto& m = models[i % models.size()];
    auto x = Tensor<double>::uniform(m.input_shape(1), 0, 1, rng);
    for (std::size_t j = 0; j < x.size(); j += 7) x[j] = (j / 7) % 2 ? 1.0 : 0.0;
    const std::vector<int> y{label(rng)};
    const double eps = eps_px(rng) * (i % 5 == 0 ? 0.5 : 1.0);
    std::mt19937_64 r1(i), r2(i);
    auto a = generate_attack<double>(m, x, y, AttackSpec::fgsm(eps), r1);
    auto b = generate_attack<double>(m, x, y, AttackSpec::pgd(eps, 1, eps, StartMode::clean), r2);
    if (!detail::bit_equal(a, b)) ++bad;
  }
  r.passed = bad == 0;
  r.detail = "mismatches=" + std::to_string(bad);
  return r;
}

inline CheckResult delta_kernel_zero_output(std::size_t trials, std::uint64_t seed = 4) {
  std::mt19937_64 rng(seed);
  CheckResult r{"delta_pdog_zero_evpconv", true, trials, ""};
  std::uniform_int_distribution<std::size_t> ch(1, 6), ks(0, 2), hw(2, 7), lv(2, 3);
  std::bernoulli_distribution coin;
  std::size_t bad = 0;
  for (std::size_t i = 0; i < trials; ++i) {
    ParameterStore<double> store;
    const std::size_t cin = ch(rng), cout = ch(rng), k = 1 + 2 * ks(rng), stride = coin(rng) ? 2 : 1;
    EVPConvOptions o;
    o.extrema = coin(rng) ? ExtremaMode::maxout : ExtremaMode::trelu;
    o.theta = coin(rng) ? ThetaGranularity::block : ThetaGranularity::channel;
    o.levels = lv(rng);
    o.se_reduction = 1 + i % 4;
    EVPConv<double> blk(store, "evp", cin, cout, k, stride, o, rng);
    auto& kernel = blk.pdog().kernel().value;
    kernel.fill(0.0);
    for (std::size_t c = 0; c < cout; ++c) kernel[c * k * k + (k * k) / 2] = 1.0;
    const std::size_t side = 2 * hw(rng);
    Tape<double> t;
    auto y = blk.forward(t.input(Tensor<double>::uniform({1 + i % 3, cin, side, side}, -2, 2, rng)));
    for (double v : y.value().data())
      if (v != 0.0) {
        ++bad;
        break;
      }
  }
  r.passed = bad == 0;
  r.detail = "nonzero_outputs=" + std::to_string(bad);
  return r;
}

/// Bit-exact algebraic identities over randomized trials.
inline SuiteReport identity_suite(std::size_t trials = 1000) {
  return detail::timed("identities", [&](SuiteReport& r) {
    r.checks.push_back(maxout_identity(trials));
    r.checks.push_back(trelu_zero_identity(trials));
    r.checks.push_back(pgd1_equals_fgsm(trials));
    r.checks.push_back(delta_kernel_zero_output(trials));
  });
}

// ---- PNL suite -------------------------------------------------------------

/// Norms through the quadratic form sqrt(w_j^T A w_j) with A = X X^T the
/// channel auto-correlation matrix of one sample.
inline std::vector<double> pnl_quadratic_norms(const Tensor<double>& x, const Tensor<double>& proj) {
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3), p = proj.dim(0);
  std::vector<double> out(n * p);
  for (std::size_t s = 0; s < n; ++s) {
    std::vector<double> a(c * c, 0.0);
    for (std::size_t r = 0; r < c; ++r)
      for (std::size_t q = 0; q < c; ++q) {
        double acc = 0;
        for (std::size_t i = 0; i < hw; ++i) acc += x[(s * c + r) * hw + i] * x[(s * c + q) * hw + i];
        a[r * c + q] = acc;
      }
    for (std::size_t j = 0; j < p; ++j) {
      double qf = 0;
      for (std::size_t r = 0; r < c; ++r)
        for (std::size_t q = 0; q < c; ++q) qf += proj[j * c + r] * a[r * c + q] * proj[j * c + q];
      out[s * p + j] = std::sqrt(std::max(qf, 0.0));
    }
  }
  return out;
}

inline SuiteReport pnl_suite(std::size_t configs = 100, std::uint64_t seed = 5) {
  return detail::timed("pnl", [&](SuiteReport& r) {
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<std::size_t> cdist(1, 16), pdist(1, 16), hwdist(1, 8);
    std::uniform_real_distribution<double> logscale(-2, 2);
    std::normal_distribution<double> normal;
    double worst_eq = 0, worst_unit = 0, worst_scale = 0;
    std::size_t scale_trials = 0;
    for (std::size_t i = 0; i < configs; ++i) {
      const std::size_t c = cdist(rng), p = pdist(rng), h = hwdist(rng), w = hwdist(rng);
      const double pn = i % 3 == 0 ? 1.0 : i % 3 == 1 ? 2.0 : 3.0;
      ParameterStore<double> store;
      PNLLayer<double> pnl(store, "pnl", c, p, pn, 1e-12, rng);
      pnl.projection().value = Tensor<double>::normal({p, c, 1, 1}, 0.0, 1.0, rng);
      auto x = Tensor<double>::normal({2, c, h, w}, 0.0, 1.0, rng);
      Tape<double> t;
      auto v = pnl.norms(t.input(x)).value();
      auto q = pnl_quadratic_norms(x, pnl.projection().value);
      for (std::size_t j = 0; j < q.size(); ++j)
        worst_eq = std::max(worst_eq, std::abs(v[j] - q[j]) / std::max({std::abs(v[j]), std::abs(q[j]), 1e-300}));

      auto y = pnl.forward(t.input(x)).value();
      for (std::size_t s = 0; s < 2; ++s) {
        double norm = 0, vnorm = 0;
        for (std::size_t j = 0; j < p; ++j) {
          norm += std::pow(std::abs(y[s * p + j]), pn);
          vnorm += v[s * p + j] * v[s * p + j];
        }
        norm = std::pow(norm, 1.0 / pn);
        if (std::sqrt(vnorm) > 1e-4) worst_unit = std::max(worst_unit, std::abs(norm - 1.0));
      }

      const double k = std::pow(10.0, logscale(rng));
      Tensor<double> xs = x;
      for (auto& e : xs.data()) e *= k;
      auto vs = pnl.norms(t.input(xs)).value();
      auto ys = pnl.forward(t.input(xs)).value();
      for (std::size_t s = 0; s < 2; ++s) {
        double vn = 0, vsn = 0;
        for (std::size_t j = 0; j < p; ++j) vn += v[s * p + j] * v[s * p + j], vsn += vs[s * p + j] * vs[s * p + j];
        if (std::sqrt(std::min(vn, vsn)) <= 1e-4) continue;
        ++scale_trials;
        for (std::size_t j = 0; j < p; ++j) worst_scale = std::max(worst_scale, std::abs(ys[s * p + j] - y[s * p + j]));
      }
    }
    r.checks.push_back({"row_norm_equals_quadratic_form", worst_eq < 1e-6, configs,
                        "max_rel_error=" + detail::fmt(worst_eq)});
    r.checks.push_back({"output_unit_norm", worst_unit < 1e-5, configs, "max_deviation=" + detail::fmt(worst_unit)});
    r.checks.push_back({"scale_invariance", worst_scale < 1e-5 && scale_trials > 0, scale_trials,
                        "max_abs_diff=" + detail::fmt(worst_scale)});
  });
}

// ---- attack constraints ---------------------------------------------------

inline SuiteReport attack_constraint_suite(std::size_t examples = 1000, std::uint64_t seed = 6) {
  return detail::timed("attack_constraints", [&](SuiteReport& r) {
    std::mt19937_64 rng(seed);
    std::vector<ModelGraph<double>> models;
    for (auto f : {Family::se_resnet, Family::evpnet}) {
      models.emplace_back(detail::identity_model(f));
      detail::warm_up(models.back(), rng);
    }
    const std::size_t batch = 25;
    std::uniform_int_distribution<int> eps_px(1, 16), iters(1, 10), label(0, 9);
    std::uniform_real_distribution<double> alpha(0.25, 4.0);
    std::size_t done = 0, violations = 0, per_family[3] = {0, 0, 0};
    double worst_excess = -1;
    for (std::size_t b = 0; done < examples; ++b) {
      const std::size_t count = std::min(batch, examples - done);
      const auto& m = models[b % models.size()];
      auto x = Tensor<double>::uniform(m.input_shape(count), 0, 1, rng);
      for (std::size_t j = 0; j < x.size(); j += 5) x[j] = (j / 5) % 2 ? 1.0 : 0.0;
      std::vector<int> y(count);
      for (auto& v : y) v = label(rng);
      const double eps = eps_px(rng);
      AttackSpec spec;
      switch (b % 3) {
        case 0: spec = AttackSpec::fgsm(eps); break;
        case 1: spec = AttackSpec::rfgsm(eps); break;
        default:
          spec = AttackSpec::pgd(eps, iters(rng), alpha(rng), b % 2 ? StartMode::random : StartMode::clean);
          break;
      }
      if (b % 4 == 3) spec.labels = LabelSource::predicted;
      auto adv = generate_attack<double>(m, x, y, spec, rng);
      const double bound = std::nextafter(spec.eps_unit(), 2.0);
      const std::size_t per = x.size() / count;
      for (std::size_t s = 0; s < count; ++s) {
        bool ok = true;
        for (std::size_t j = s * per; j < (s + 1) * per; ++j) {
          const double d = std::abs(adv[j] - x[j]);
          worst_excess = std::max(worst_excess, d - spec.eps_unit());
          if (!(d <= bound) || !(adv[j] >= 0.0 && adv[j] <= 1.0)) ok = false;
        }
        violations += !ok;
      }
      per_family[b % 3] += count;
      done += count;
    }
    r.checks.push_back({"linf_ball_and_pixel_range", violations == 0, done,
                        "violations=" + std::to_string(violations) + " fgsm=" + std::to_string(per_family[0]) +
                            " rfgsm=" + std::to_string(per_family[1]) + " pgd=" + std::to_string(per_family[2]) +
                            " max(delta-eps)=" + detail::fmt(worst_excess)});
  });
}

// ---- ablation lattice -----------------------------------------------------

struct LatticeRow {
  bool pdog = false, trelu = false, pnl = false;
  std::size_t parameters = 0;
  double loss_before = 0, loss_after = 0;
  double clean_accuracy = 0;
};

inline std::string lattice_name(const LatticeRow& r) {
  std::string s;
  s += r.pdog ? "pdog" : "-";
  s += r.trelu ? "+trelu" : "+-";
  s += r.pnl ? "+pnl" : "+-";
  return s;
}

/// Builds all eight component combinations at desk scale, runs one training
/// step each and evaluates clean accuracy on a held-out synthetic batch.
inline SuiteReport ablation_suite(std::vector<LatticeRow>* rows_out = nullptr, std::uint64_t seed = 7) {
  return detail::timed("ablation_lattice", [&](SuiteReport& r) {
    auto train_set = synth_shapes(16, seed, 0.1, 32);
    auto test_set = synth_shapes(32, seed + 1, 0.1, 32);
    auto batch = make_batch<float>(train_set, 0, train_set.size());
    for (int mask = 0; mask < 8; ++mask) {
      ModelConfig cfg = ModelConfig::for_family(Family::evpnet);
      cfg.widths = {8, 16, 32};
      cfg.classes = 2;
      cfg.pdog = mask & 1;
      cfg.trelu = mask & 2;
      cfg.pnl = mask & 4;
      cfg.seed = seed;
      LatticeRow row{cfg.pdog, cfg.trelu, cfg.pnl};
      CheckResult c{lattice_name(row), true, 1, ""};
      try {
        ModelGraph<float> m(cfg);
        fit_input_normalization(m, train_set);
        row.parameters = m.parameter_count();
        SgdMomentum<float> opt(0.9, 5e-4);
        std::vector<float> before;
        for (auto* p : m.parameters()) before.insert(before.end(), p->value.data().begin(), p->value.data().end());
        row.loss_before = train_step(m, opt, batch.images, batch.labels, 0.01).loss;
        std::vector<float> after;
        for (auto* p : m.parameters()) after.insert(after.end(), p->value.data().begin(), p->value.data().end());
        Tape<float> t;
        row.loss_after = static_cast<double>(
            softmax_cross_entropy(m.forward(t.input(batch.images), Mode::batch_stats).logits, batch.labels)
                .value()
                .item());
        row.clean_accuracy = clean_accuracy<float>(m, test_set, {.batch = 32});
        c.passed = std::isfinite(row.loss_before) && std::isfinite(row.loss_after) && before != after;
        c.detail = "params=" + std::to_string(row.parameters) + " loss=" + detail::fmt(row.loss_before) + "->" +
                   detail::fmt(row.loss_after) + " clean_acc=" + detail::fmt(row.clean_accuracy);
      } catch (const std::exception& e) {
        c.passed = false;
        c.detail = e.what();
      }
      r.checks.push_back(c);
      if (rows_out) rows_out->push_back(row);
    }
  });
}

}  // namespace evp::selftest
