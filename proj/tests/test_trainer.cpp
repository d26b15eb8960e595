#include <gtest/gtest.h>

#include <random>

#include "evp/trainer.hpp"

using namespace evp;

namespace {

ModelConfig tiny(Family f, std::size_t classes = 2) {
  auto c = ModelConfig::for_family(f);
  c.depth = 11;
  c.widths = {8, 8, 8};
  c.image_size = 8;
  c.classes = classes;
  return c;
}

Dataset separable(std::size_t n, std::uint64_t seed) {
  Dataset ds;
  ds.classes = 2;
  ds.height = ds.width = 8;
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> dark(0, 100), bright(155, 255);
  for (std::size_t i = 0; i < n; ++i) {
    const int y = static_cast<int>(i % 2);
    ds.labels.push_back(y);
    for (std::size_t j = 0; j < ds.image_bytes(); ++j)
      ds.pixels.push_back(static_cast<std::uint8_t>(y ? bright(rng) : dark(rng)));
  }
  return ds;
}

Parameter<double> scalar_param(double v, bool decay = true) {
  return Parameter<double>("p", Tensor<double>({1}, {v}), true, decay);
}

TrainSpec quick(std::size_t epochs) {
  TrainSpec s;
  s.epochs = epochs;
  s.batch = 32;
  s.lr = 0.05;
  s.milestones = {};
  s.augment = false;
  return s;
}

}  // namespace

TEST(Schedule, StepsAtMilestones) {
  TrainSpec s;
  EXPECT_DOUBLE_EQ(lr_at(0, s), 0.1);
  EXPECT_DOUBLE_EQ(lr_at(79, s), 0.1);
  EXPECT_NEAR(lr_at(80, s), 0.01, 1e-15);
  EXPECT_NEAR(lr_at(119, s), 0.01, 1e-15);
  EXPECT_NEAR(lr_at(120, s), 0.001, 1e-15);
  auto d = TrainSpec::desk();
  EXPECT_EQ(d.epochs, 30u);
  EXPECT_NEAR(lr_at(15, d), 0.01, 1e-15);
  EXPECT_NEAR(lr_at(25, d), 0.001, 1e-15);
}

TEST(Sgd, NoMomentumNoDecayIsGradientDescent) {
  auto p = scalar_param(1.0);
  SgdMomentum<double> opt(0, 0);
  p.grad.data()[0] = 0.5;
  opt.step({&p}, 0.1);
  EXPECT_DOUBLE_EQ(p.value.data()[0], 1.0 - 0.05);
}

TEST(Sgd, MomentumOnConstantGradient) {
  auto p = scalar_param(0.0);
  SgdMomentum<double> opt(0.9, 0);
  const double lr = 0.1, g = 2.0;
  for (int i = 0; i < 2; ++i) {
    p.grad.data()[0] = g;
    opt.step({&p}, lr);
  }
  EXPECT_NEAR(p.value.data()[0], -lr * g * (1 + 1.9), 1e-12);
}

TEST(Sgd, WeightDecayGroups) {
  auto a = scalar_param(2.0, true);
  auto b = scalar_param(2.0, false);
  SgdMomentum<double> opt(0, 0.1);
  a.grad.fill(0);
  b.grad.fill(0);
  opt.step({&a, &b}, 1.0);
  EXPECT_DOUBLE_EQ(a.value.data()[0], 2.0 - 0.2);
  EXPECT_DOUBLE_EQ(b.value.data()[0], 2.0);
}

TEST(Sgd, NonTrainableUntouchedAndNonFiniteRejected) {
  auto p = scalar_param(1.0);
  p.trainable = false;
  SgdMomentum<double> opt(0.9, 0.1);
  p.grad.data()[0] = 5;
  opt.step({&p}, 1.0);
  EXPECT_EQ(p.value.data()[0], 1.0);
  auto q = scalar_param(1.0);
  q.grad.data()[0] = std::numeric_limits<double>::quiet_NaN();
  EXPECT_THROW(opt.step({&q}, 1.0), NumericError);
  EXPECT_EQ(q.value.data()[0], 1.0);
}

TEST(Train, ZeroLearningRateLeavesParametersUnchanged) {
  ModelGraph<float> m(tiny(Family::evpnet));
  std::vector<std::vector<float>> before;
  for (auto* p : m.parameters()) before.emplace_back(p->value.data().begin(), p->value.data().end());
  auto spec = quick(1);
  spec.lr = 0;
  auto ds = separable(64, 1);
  train(m, ds, ds, spec);
  auto params = m.parameters();
  for (std::size_t i = 0; i < params.size(); ++i)
    EXPECT_TRUE(std::equal(before[i].begin(), before[i].end(), params[i]->value.data().begin())) << params[i]->name;
}

TEST(Train, SeparableSetReachesFullTrainAccuracy) {
  ModelGraph<float> m(tiny(Family::se_resnet));
  auto ds = separable(200, 2);
  fit_input_normalization(m, ds);
  double best = 0;
  std::size_t epochs = 0;
  train(m, ds, ds, quick(20), [&](const EpochLog& r) {
    if (best < 0.99) ++epochs;
    best = std::max(best, r.clean_acc);
  });
  EXPECT_GE(best, 0.99);
  EXPECT_LE(epochs, 20u);
}

TEST(Train, SameSeedGivesIdenticalLog) {
  auto ds = separable(96, 3);
  auto spec = quick(2);
  spec.augment = true;
  spec.seed = 11;
  ModelGraph<float> a(tiny(Family::evpnet)), b(tiny(Family::evpnet));
  auto la = train(a, ds, ds, spec);
  auto lb = train(b, ds, ds, spec);
  EXPECT_EQ(la, lb);
  EXPECT_EQ(la.rows.size(), 2u);
  EXPECT_EQ(la.to_csv().substr(0, la.to_csv().find('\n')), "epoch,lr,loss,clean_acc,adv_acc");
}

TEST(Train, AdversarialModesLogRobustAccuracy) {
  auto ds = separable(64, 4);
  for (auto mode : {AdvMode::fgsm, AdvMode::pgd}) {
    ModelGraph<float> m(tiny(Family::evpnet));
    auto spec = quick(1);
    spec.adversarial = mode;
    spec.verify_constraints = true;
    auto log = train(m, ds, ds, spec);
    ASSERT_EQ(log.rows.size(), 1u);
    EXPECT_FALSE(std::isnan(log.rows[0].adv_acc));
    EXPECT_LE(log.rows[0].adv_acc, 1.0);
  }
  auto spec = quick(1);
  spec.adversarial = AdvMode::fgsm;
  spec.mixed = true;
  ModelGraph<float> m(tiny(Family::se_resnet));
  EXPECT_NO_THROW(train(m, ds, ds, spec));
}

TEST(Train, GenerationAttacks) {
  TrainSpec s;
  s.adversarial = AdvMode::fgsm;
  EXPECT_EQ(s.generation_attack().name(), "R-FGSM");
  EXPECT_EQ(s.generation_attack().labels, LabelSource::predicted);
  s.adversarial = AdvMode::pgd;
  auto a = s.generation_attack();
  EXPECT_EQ(a.iters, 7);
  EXPECT_DOUBLE_EQ(a.step_pixels(), 2.0);
  EXPECT_EQ(a.start, StartMode::random);
}

TEST(Train, DivergenceIsReported) {
  ModelGraph<float> m(tiny(Family::se_resnet));
  auto ds = separable(64, 5);
  auto spec = quick(3);
  spec.lr = 1e30;
  try {
    train(m, ds, ds, spec);
    FAIL() << "expected divergence";
  } catch (const TrainingDiverged& e) {
    EXPECT_NE(std::string(e.what()).find("epoch"), std::string::npos);
  }
}

TEST(Train, LossDecreasesForEveryConfiguration) {
  auto ds = separable(32, 6);
  auto batch = make_batch<float>(ds, 0, 32);
  for (int mask = 0; mask < 8; ++mask) {
    auto c = tiny(Family::evpnet);
    c.pdog = mask & 1;
    c.trelu = mask & 2;
    c.pnl = mask & 4;
    ModelGraph<float> m(c);
    SgdMomentum<float> opt(0.9, 0);
    double first = 0, last = 0;
    for (int step = 0; step < 10; ++step) {
      auto r = train_step(m, opt, batch.images, batch.labels, 1e-4);
      if (step == 0) first = r.loss;
      last = r.loss;
    }
    EXPECT_LT(last, first) << "mask " << mask;
  }
}

TEST(Train, RejectsMismatchedImages) {
  ModelGraph<float> m(tiny(Family::se_resnet));
  auto ds = synth_shapes(8, 1, 0.1, 16);
  EXPECT_THROW(train(m, ds, ds, quick(1)), DimensionError);
}
