#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <random>

#include "evp/attack.hpp"
#include "evp/conv.hpp"
#include "evp/model.hpp"

using namespace evp;

namespace {

// Linear classifier over flattened pixels: logits = x W + b.
template <typename T>
struct LinearModel {
  mutable Parameter<T> w, b;
  Shape in_shape;

  LinearModel(Shape s, std::size_t classes, std::mt19937_64& rng)
      : w("w", Tensor<T>::uniform({s[0] * s[1] * s[2], classes}, T(-1), T(1), rng)),
        b("b", Tensor<T>::uniform({classes}, T(-0.1), T(0.1), rng)),
        in_shape(std::move(s)) {}

  Shape input_shape(std::size_t n) const { return {n, in_shape[0], in_shape[1], in_shape[2]}; }

  Var<T> forward(Tape<T>& t, Var<T> x) const { return linear<T>(flatten(x), t.param(w), t.param(b)); }

  Tensor<T> logits(const Tensor<T>& x, Mode = Mode::eval) const {
    Tape<T> t(typename Tape<T>::Options{true, false, false});
    return forward(t, t.input(x)).value();
  }

  struct Result {
    T loss;
    Tensor<T> logits, grad;
  };
  Result loss_gradient(const Tensor<T>& x, std::span<const int> labels, Mode = Mode::eval) const {
    Tape<T> t(typename Tape<T>::Options{true, false, false});
    auto in = t.input(x, true);
    auto lg = forward(t, in);
    auto loss = softmax_cross_entropy(lg, labels);
    t.backward(loss);
    return {loss.value().item(), lg.value(), t.grad(in)};
  }

  T loss(const Tensor<T>& x, std::span<const int> labels) const { return loss_gradient(x, labels).loss; }
};

ModelConfig tiny(Family f, std::size_t classes = 10) {
  auto c = ModelConfig::for_family(f);
  c.depth = 11;
  c.widths = {8, 8, 8};
  c.image_size = 8;
  c.classes = classes;
  return c;
}

Dataset random_dataset(std::size_t n, std::size_t classes, std::uint64_t seed, std::size_t size = 8) {
  Dataset ds;
  ds.classes = classes;
  ds.height = ds.width = size;
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> px(0, 255);
  for (std::size_t i = 0; i < n; ++i) {
    ds.labels.push_back(static_cast<int>(i % classes));
    for (std::size_t j = 0; j < ds.image_bytes(); ++j) ds.pixels.push_back(static_cast<std::uint8_t>(px(rng)));
  }
  return ds;
}

double checksum(const ModelGraph<float>& m) {
  double s = 0;
  for (auto* p : m.state())
    for (std::size_t i = 0; i < p->value.size(); ++i) s += p->value[i] * static_cast<double>(i % 7 + 1);
  return s;
}

}  // namespace

TEST(AttackSpec, DefaultsAndNames) {
  auto p = AttackSpec::pgd(8, 10);
  EXPECT_DOUBLE_EQ(p.step_pixels(), 0.8);
  EXPECT_EQ(AttackSpec::pgd(8, 10, 2).name(), "PGD-10-2");
  EXPECT_EQ(AttackSpec::fgsm(8).name(), "FGSM");
  EXPECT_EQ(AttackSpec::rfgsm(8).start, StartMode::random);
  EXPECT_THROW(AttackSpec::pgd(8, 0).validate(), std::invalid_argument);
  EXPECT_THROW(AttackSpec::fgsm(-1).validate(), std::invalid_argument);
  EXPECT_THROW(AttackSpec::pgd(8, 3, 0.0).validate(), std::invalid_argument);
  EXPECT_EQ(parse_attack_family("rfgsm"), AttackFamily::rfgsm);
  EXPECT_THROW(parse_attack_family("cw"), std::invalid_argument);
}

TEST(Fgsm, ZeroEpsilonIsIdentity) {
  std::mt19937_64 rng(1);
  LinearModel<float> m({3, 4, 4}, 2, rng);
  auto x = Tensor<float>::uniform({5, 3, 4, 4}, 0, 1, rng);
  std::vector<int> y{0, 1, 0, 1, 1};
  EXPECT_EQ(fgsm<float>(m, x, y, 0.0), x);
  EXPECT_EQ(rfgsm<float>(m, x, y, 0.0, rng), x);
  EXPECT_EQ(pgd<float>(m, x, y, AttackSpec::pgd(0, 5, 1, StartMode::random), rng), x);
}

TEST(Fgsm, LogisticClosedForm) {
  // Two logits z0 = x.w0 + b0, z1 = x.w1 + b1: the gradient of the loss for
  // label y points along (p - onehot(y)) (w1 - w0), whose sign for label 0 is
  // sign(w1 - w0) and for label 1 is -sign(w1 - w0).
  std::mt19937_64 rng(2);
  LinearModel<double> m({1, 3, 3}, 2, rng);
  auto x = Tensor<double>::uniform({2, 1, 3, 3}, 0, 1, rng);
  x[0] = 0.999;
  x[9] = 0.001;
  std::vector<int> y{0, 1};
  const double eps = 8.0 / 255.0;
  auto adv = fgsm<double>(m, x, y, 8);
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t j = 0; j < 9; ++j) {
      const double dw = m.w.value[j * 2 + 1] - m.w.value[j * 2];
      const double s = (dw > 0 ? 1.0 : -1.0) * (y[n] == 0 ? 1.0 : -1.0);
      const double expect = std::clamp(x[n * 9 + j] + eps * s, 0.0, 1.0);
      EXPECT_NEAR(adv[n * 9 + j], expect, 1e-15);
    }
}

TEST(Fgsm, EveryPixelMovesByEpsilonOrHitsBounds) {
  std::mt19937_64 rng(3);
  ModelGraph<float> m(tiny(Family::se_resnet));
  auto x = Tensor<float>::uniform(m.input_shape(16), 0, 1, rng);
  std::vector<int> y(16);
  for (int i = 0; i < 16; ++i) y[static_cast<std::size_t>(i)] = i % 10;
  auto adv = fgsm<float>(m, x, y, 8);
  auto g = m.loss_gradient(x, y);
  const float eps = 8.0f / 255.0f;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const float d = adv[i] - x[i];
    const bool full = std::abs(std::abs(d) - eps) < 1e-6f;
    const bool clipped = adv[i] == 0.0f || adv[i] == 1.0f;
    const bool flat = g.grad[i] == 0.0f && d == 0.0f;
    EXPECT_TRUE(full || clipped || flat) << i << " d=" << d;
  }
}

TEST(Pgd, SingleStepEqualsFgsmBitExact) {
  for (Family f : {Family::se_resnet, Family::evpnet}) {
    std::mt19937_64 rng(4);
    ModelGraph<float> m(tiny(f));
    auto x = Tensor<float>::uniform(m.input_shape(8), 0, 1, rng);
    std::vector<int> y{0, 1, 2, 3, 4, 5, 6, 7};
    for (double eps : {1.0, 2.0, 8.0, 16.0}) {
      auto a = fgsm<float>(m, x, y, eps);
      auto b = pgd<float>(m, x, y, AttackSpec::pgd(eps, 1, eps, StartMode::clean), rng);
      EXPECT_EQ(a, b);
    }
  }
}

TEST(Pgd, EveryIterateSatisfiesConstraints) {
  std::mt19937_64 rng(5);
  ModelGraph<float> m(tiny(Family::evpnet));
  auto x = Tensor<float>::uniform(m.input_shape(6), 0, 1, rng);
  x[0] = 0.0f;
  x[1] = 1.0f;
  std::vector<int> y{0, 1, 2, 3, 4, 5};
  int steps = 0;
  auto spec = AttackSpec::pgd(8, 10, 2, StartMode::random);
  pgd<float>(m, x, y, spec, rng, Mode::eval, [&](int, const Tensor<float>& cur) {
    ++steps;
    EXPECT_TRUE(check_constraints(x, cur).within(8));
  });
  EXPECT_EQ(steps, 10);
}

TEST(Pgd, TenStepsAtLeastAsStrongAsFgsmOnLinearModel) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    std::mt19937_64 rng(seed);
    LinearModel<double> m({1, 4, 4}, 2, rng);
    auto x = Tensor<double>::uniform({8, 1, 4, 4}, 0, 1, rng);
    std::vector<int> y{0, 1, 0, 1, 0, 1, 0, 1};
    auto f = fgsm<double>(m, x, y, 8);
    auto p = pgd<double>(m, x, y, AttackSpec::pgd(8, 10), rng);
    EXPECT_GE(m.loss(p, y), m.loss(f, y) - 1e-12) << seed;
    EXPECT_GT(m.loss(f, y), m.loss(x, y));
  }
}

TEST(Rfgsm, StaysInBallAroundOriginalAndIsSeeded) {
  std::mt19937_64 rng(6);
  ModelGraph<float> m(tiny(Family::se_resnet));
  auto x = Tensor<float>::uniform(m.input_shape(10), 0, 1, rng);
  std::vector<int> y{0, 1, 2, 3, 4, 5, 6, 7, 8, 9};
  std::mt19937_64 r1(42), r2(42), r3(43);
  auto a = rfgsm<float>(m, x, y, 8, r1);
  auto b = rfgsm<float>(m, x, y, 8, r2);
  auto c = rfgsm<float>(m, x, y, 8, r3);
  EXPECT_EQ(a, b);
  EXPECT_NE(a, c);
  EXPECT_TRUE(check_constraints(x, a).within(8));
  EXPECT_NE(a, fgsm<float>(m, x, y, 8));
}

TEST(Attack, ParametersAreNotMutated) {
  std::mt19937_64 rng(7);
  ModelGraph<float> m(tiny(Family::evpnet));
  auto x = Tensor<float>::uniform(m.input_shape(4), 0, 1, rng);
  std::vector<int> y{1, 2, 3, 4};
  const double before = checksum(m);
  pgd<float>(m, x, y, AttackSpec::pgd(8, 3, 2, StartMode::random), rng);
  rfgsm<float>(m, x, y, 8, rng);
  EXPECT_EQ(checksum(m), before);
}

TEST(Attack, PredictedLabelsUseModelOutput) {
  std::mt19937_64 rng(8);
  LinearModel<double> m({1, 2, 2}, 3, rng);
  auto x = Tensor<double>::uniform({4, 1, 2, 2}, 0, 1, rng);
  auto pred = detail::argmax_rows(m.logits(x));
  std::vector<int> wrong(4, 0);
  auto spec = AttackSpec::fgsm(4);
  spec.labels = LabelSource::predicted;
  std::mt19937_64 r(0);
  EXPECT_EQ(generate_attack<double>(m, x, wrong, spec, r), fgsm<double>(m, x, pred, 4));
}

TEST(Attack, ConstraintsHoldForManyExamples) {
  std::mt19937_64 rng(9);
  ModelGraph<float> m(tiny(Family::evpnet));
  std::size_t violations = 0, total = 0;
  for (const auto& spec : {AttackSpec::fgsm(8), AttackSpec::rfgsm(8), AttackSpec::pgd(8, 5, 2, StartMode::random)}) {
    auto x = Tensor<float>::uniform(m.input_shape(50), 0, 1, rng);
    for (std::size_t i = 0; i < 200; ++i) x[i * 7] = (i % 2) ? 1.0f : 0.0f;
    std::vector<int> y(50, 3);
    auto adv = generate_attack<float>(m, x, y, spec, rng);
    for (std::size_t n = 0; n < 50; ++n) {
      const std::size_t sz = 3 * 64;
      Tensor<float> a({sz}), b({sz});
      for (std::size_t j = 0; j < sz; ++j) {
        a[j] = x[n * sz + j];
        b[j] = adv[n * sz + j];
      }
      violations += !check_constraints(a, b).within(8);
      ++total;
    }
  }
  EXPECT_EQ(total, 150u);
  EXPECT_EQ(violations, 0u);
}

TEST(Evaluate, UntrainedModelIsNearChance) {
  ModelGraph<float> m(tiny(Family::se_resnet));
  auto ds = random_dataset(400, 10, 10);
  auto rows = evaluate_robustness<float>(m, ds, {AttackSpec::fgsm(8)}, {.batch = 50});
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_EQ(rows[0].attack, "clean");
  EXPECT_NEAR(rows[0].accuracy, 0.1, 0.03);
  EXPECT_LE(rows[1].accuracy, rows[0].accuracy);
}

TEST(Evaluate, ThreadCountDoesNotChangeResults) {
  ModelGraph<float> m(tiny(Family::evpnet));
  auto ds = random_dataset(120, 10, 11);
  auto spec = AttackSpec::pgd(8, 2, 4, StartMode::random);
  const double a = adversarial_accuracy<float>(m, ds, spec, {.batch = 20, .threads = 1, .seed = 5});
  const double b = adversarial_accuracy<float>(m, ds, spec, {.batch = 20, .threads = 3, .seed = 5});
  EXPECT_EQ(a, b);
}

TEST(Transfer, ZeroEpsilonGivesTargetCleanAccuracy) {
  auto ds = random_dataset(100, 10, 12);
  ModelGraph<float> a(tiny(Family::se_resnet));
  auto cfg = tiny(Family::evpnet);
  cfg.seed = 3;
  ModelGraph<float> b(cfg);
  EXPECT_EQ(transfer_attack_eval<float>(a, a, ds, AttackSpec::fgsm(0)), clean_accuracy<float>(a, ds));
  EXPECT_EQ(transfer_attack_eval<float>(a, b, ds, AttackSpec::fgsm(0)), clean_accuracy<float>(b, ds));
}

TEST(Transfer, ShapeMismatchThrows) {
  auto ds = random_dataset(10, 10, 13);
  ModelGraph<float> a(tiny(Family::se_resnet));
  auto cfg = tiny(Family::se_resnet);
  cfg.image_size = 16;
  ModelGraph<float> b(cfg);
  EXPECT_THROW(transfer_attack_eval<float>(a, b, ds, AttackSpec::fgsm(8)), DimensionError);
}

TEST(Export, AdversarialBatchRoundTrip) {
  std::mt19937_64 rng(14);
  auto x = Tensor<float>::uniform({3, 3, 8, 8}, 0, 1, rng);
  std::vector<int> y{4, 0, 9};
  const auto path = std::filesystem::temp_directory_path() / "evp_adv.evpt";
  export_adversarial(path, x, y);
  auto b = import_adversarial<float>(path);
  EXPECT_EQ(b.images, x);
  EXPECT_EQ(b.labels, y);
  std::filesystem::remove(path);
}
