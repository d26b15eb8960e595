#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "evp/analysis.hpp"
#include "evp/trainer.hpp"

using namespace evp;

namespace {

ModelConfig tiny(Family f) {
  auto c = ModelConfig::for_family(f);
  c.depth = 11;
  c.widths = {8, 8, 8};
  c.image_size = 8;
  c.classes = 2;
  return c;
}

Dataset separable(std::size_t n, std::uint64_t seed) {
  Dataset ds;
  ds.classes = 2;
  ds.height = ds.width = 8;
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> dark(40, 110), bright(145, 215);
  for (std::size_t i = 0; i < n; ++i) {
    const int y = static_cast<int>(i % 2);
    ds.labels.push_back(y);
    for (std::size_t j = 0; j < ds.image_bytes(); ++j)
      ds.pixels.push_back(static_cast<std::uint8_t>(y ? bright(rng) : dark(rng)));
  }
  return ds;
}

ModelGraph<float> trained(Family f, const Dataset& ds) {
  ModelGraph<float> m(tiny(f));
  TrainSpec s;
  s.epochs = 3;
  s.batch = 32;
  s.lr = 0.05;
  s.milestones = {};
  s.augment = false;
  train(m, ds, ds, s);
  return m;
}

std::filesystem::path temp_path(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("evp_analysis_" + name);
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST(Gamma, NormalizedDistanceHandExample) {
  std::vector<double> b{3, 4}, a{0, 0}, same{3, 4};
  auto [g, z] = normalized_distance<double>(b, a);
  EXPECT_NEAR(g, 1.0, 1e-12);
  EXPECT_FALSE(z);
  EXPECT_EQ(normalized_distance<double>(b, same).first, 0.0);
  std::vector<double> zero{0, 0}, one{1, 0};
  auto [gz, zz] = normalized_distance<double>(zero, one);
  EXPECT_TRUE(zz);
  EXPECT_DOUBLE_EQ(gz, 1.0 / kGammaStabilizer);
}

TEST(Gamma, ZeroEpsilonGivesExactZeros) {
  auto ds = separable(40, 1);
  auto m = trained(Family::evpnet, ds);
  auto tr = error_amplification(m, ds, AttackSpec::pgd(0, 40, 2), {.samples = 16, .batch = 6});
  ASSERT_EQ(tr.taps.size(), m.tap_count());
  ASSERT_EQ(tr.gamma.size(), 16u);
  for (const auto& row : tr.gamma)
    for (double g : row) EXPECT_EQ(g, 0.0);
  for (double v : tr.mean) EXPECT_EQ(v, 0.0);
  for (double v : tr.stddev) EXPECT_EQ(v, 0.0);
}

TEST(Gamma, DefaultsToSixtyFourSamples) {
  EXPECT_EQ(GammaOptions{}.samples, 64u);
  EXPECT_THROW(sample_indices(10, 11, 0), std::invalid_argument);
  auto a = sample_indices(100, 64, 3);
  EXPECT_EQ(a, sample_indices(100, 64, 3));
  EXPECT_TRUE(std::adjacent_find(a.begin(), a.end()) == a.end());
}

TEST(Gamma, PgdTraceIsFinitePositiveAndThreadInvariant) {
  auto ds = separable(64, 2);
  auto m = trained(Family::evpnet, ds);
  auto spec = AttackSpec::pgd(8, 5, 2);
  auto one = error_amplification(m, ds, spec, {.samples = 24, .batch = 8, .threads = 1, .seed = 4});
  auto three = error_amplification(m, ds, spec, {.samples = 24, .batch = 8, .threads = 3, .seed = 4});
  EXPECT_EQ(one.to_csv(), three.to_csv());
  for (std::size_t k = 0; k < one.taps.size(); ++k) {
    EXPECT_TRUE(std::isfinite(one.mean[k]));
    EXPECT_GT(one.mean[k], 0.0) << one.taps[k];
    EXPECT_GE(one.stddev[k], 0.0);
  }
  std::istringstream csv(one.to_csv());
  std::string line;
  std::getline(csv, line);
  EXPECT_EQ(line, "tap,index,mean,std,samples,stabilized");
  std::size_t rows = 0;
  while (std::getline(csv, line)) ++rows;
  EXPECT_EQ(rows, m.tap_count());
}

TEST(Gamma, GrowsWithScaledDelta) {
  auto ds = separable(16, 3);
  auto m = trained(Family::se_resnet, ds);
  auto x = make_batch<float>(ds, 0, 4).images;
  std::mt19937_64 rng(9);
  std::bernoulli_distribution coin;
  Tensor<float> dir(x.shape());
  for (auto& v : dir.data()) v = coin(rng) ? 1.f : -1.f;
  auto clean = m.taps(x);
  std::vector<double> prev(clean.size(), 0.0);
  for (double eps : {1.0, 2.0, 4.0, 8.0}) {
    Tensor<float> adv = x;
    for (std::size_t i = 0; i < adv.size(); ++i)
      adv[i] = std::clamp(x[i] + static_cast<float>(eps / 255.0) * dir[i], 0.f, 1.f);
    auto t = m.taps(adv);
    for (std::size_t k = 0; k < t.size(); ++k) {
      const std::size_t per = t[k].size() / 4;
      double g = 0;
      for (std::size_t s = 0; s < 4; ++s)
        g += normalized_distance<float>(clean[k].data().subspan(s * per, per), t[k].data().subspan(s * per, per)).first;
      g /= 4;
      EXPECT_GE(g, prev[k] - 1e-3) << "tap " << k << " eps " << eps;
      prev[k] = g;
    }
  }
}

TEST(ResponseMap, ZeroMapIsUniformZero) {
  auto img = response_map(Tensor<double>({3, 4, 5}));
  EXPECT_EQ(img.width, 5u);
  EXPECT_EQ(img.height, 4u);
  for (auto p : img.pixels) EXPECT_EQ(p, 0);
}

TEST(ResponseMap, OneHotChannelEqualsThatChannelRescaled) {
  Tensor<double> f({3, 2, 2});
  const double ch1[] = {0.0, 1.0, 2.0, 4.0};
  for (int i = 0; i < 4; ++i) f[4 + i] = ch1[i];
  auto img = response_map(f);
  std::vector<std::uint8_t> want{0, 64, 128, 255};
  EXPECT_EQ(img.pixels, want);
}

TEST(ResponseMap, AffineInvariantBytes) {
  std::mt19937_64 rng(5);
  std::uniform_int_distribution<int> q(-64, 64);
  Tensor<double> f({4, 6, 6});
  for (auto& v : f.data()) v = q(rng) / 16.0;
  Tensor<double> g = f;
  for (auto& v : g.data()) v = 4.0 * v + 0.5;
  auto a = temp_path("a.pgm"), b = temp_path("b.pgm");
  write_pgm(a, response_map(f));
  write_pgm(b, response_map(g));
  EXPECT_EQ(slurp(a), slurp(b));
  EXPECT_EQ(read_pgm(a), response_map(f));
  EXPECT_EQ(slurp(a).substr(0, 3), "P2\n");
}

TEST(ResponseMap, ModelExportIsBitStableAndChecksTap) {
  auto ds = separable(16, 6);
  auto m = trained(Family::evpnet, ds);
  auto x = make_batch<float>(ds, 0, 1).images;
  auto a = temp_path("m1.pgm"), b = temp_path("m2.pgm");
  response_map_export(m, x, 1, a);
  response_map_export(m, x, 1, b);
  EXPECT_EQ(slurp(a), slurp(b));
  auto img = read_pgm(a);
  EXPECT_EQ(img.width, 8u);
  EXPECT_THROW(block_response_map(m, x, m.tap_count() - 1), std::out_of_range);
  EXPECT_THROW(write_pgm("/nonexistent-dir/x.pgm", img), std::runtime_error);
}

TEST(Sweep, GridShapeAndZeroEpsilonColumn) {
  auto ds = separable(48, 7);
  auto m = trained(Family::se_resnet, ds);
  SweepOptions o;
  o.eps = {0, 2, 8};
  o.curve_iters = {};
  o.eval.batch = 16;
  auto r = robustness_sweep(m, ds, o);
  ASSERT_EQ(r.grid.size(), o.eps.size() * o.families.size() + 1);
  const double clean = r.grid[0].accuracy;
  for (std::size_t i = 1; i < r.grid.size(); ++i)
    if (r.grid[i].eps == 0) EXPECT_EQ(r.grid[i].accuracy, clean) << r.grid[i].attack;
  EXPECT_TRUE(r.curve.empty());
  auto csv = eval_rows_csv(r.grid);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "attack,eps,iters,accuracy");
}

TEST(Sweep, PgdCurveNonIncreasing) {
  auto ds = separable(64, 8);
  auto m = trained(Family::evpnet, ds);
  SweepOptions o;
  o.eps = {};
  o.families = {};
  o.curve_eps = 4;
  o.eval.batch = 32;
  auto r = robustness_sweep(m, ds, o);
  ASSERT_EQ(r.grid.size(), 1u);
  ASSERT_EQ(r.curve.size(), 6u);
  EXPECT_EQ(r.curve.front().iters, 1);
  EXPECT_EQ(r.curve.back().iters, 40);
  for (std::size_t i = 1; i < r.curve.size(); ++i) EXPECT_LE(r.curve[i].accuracy, r.curve[i - 1].accuracy + 0.02);
}
