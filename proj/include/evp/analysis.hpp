#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "evp/attack.hpp"
#include "evp/dataset.hpp"
#include "evp/model.hpp"
#include "evp/parallel.hpp"

namespace evp {

/// Per-tap normalized response distances between benign and adversarial
/// inputs. gamma[s][k] is sample s at tap k.
struct GammaTrace {
  std::vector<std::string> taps;
  std::vector<std::vector<double>> gamma;
  std::vector<double> mean;
  std::vector<double> stddev;
  std::vector<std::size_t> stabilized;  // samples whose benign response had zero norm

  static constexpr const char* header = "tap,index,mean,std,samples,stabilized";

  std::string to_csv() const {
    std::ostringstream os;
    os.precision(9);
    os << header << "\n";
    for (std::size_t k = 0; k < taps.size(); ++k)
      os << taps[k] << "," << k << "," << mean[k] << "," << stddev[k] << "," << gamma.size() << "," << stabilized[k]
         << "\n";
    return os.str();
  }
};

struct GammaOptions {
  std::size_t samples = 64;
  std::size_t batch = 64;
  std::size_t threads = 1;
  std::uint64_t seed = 0;
};

inline constexpr double kGammaStabilizer = 1e-12;

/// gamma = |t - t'| / (|t| + 1e-12) over the flattened response of one
/// sample. Returns the value and whether the benign norm was zero.
template <typename T>
std::pair<double, bool> normalized_distance(std::span<const T> benign, std::span<const T> adv) {
  if (benign.size() != adv.size()) throw DimensionError("normalized_distance: size mismatch");
  double num = 0, den = 0;
  for (std::size_t i = 0; i < benign.size(); ++i) {
    const double d = static_cast<double>(benign[i]) - static_cast<double>(adv[i]);
    num += d * d;
    den += static_cast<double>(benign[i]) * static_cast<double>(benign[i]);
  }
  den = std::sqrt(den);
  return {std::sqrt(num) / (den + kGammaStabilizer), den == 0};
}

/// Indices of `n` distinct examples drawn with a seeded shuffle.
inline std::vector<std::size_t> sample_indices(std::size_t size, std::size_t n, std::uint64_t seed) {
  if (n == 0) throw std::invalid_argument("sample count must be positive");
  if (n > size)
    throw std::invalid_argument("cannot sample " + std::to_string(n) + " examples from " + std::to_string(size));
  std::vector<std::size_t> idx(size);
  std::iota(idx.begin(), idx.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(idx.begin(), idx.end(), rng);
  idx.resize(n);
  std::sort(idx.begin(), idx.end());
  return idx;
}

/// Crafts adversarial examples for sampled test images (true labels, eval
/// mode) and records gamma at every tap.
template <typename T>
GammaTrace error_amplification(const ModelGraph<T>& model, const Dataset& ds, const AttackSpec& spec,
                               const GammaOptions& opts = {}) {
  if (opts.batch == 0) throw std::invalid_argument("batch size must be positive");
  const auto idx = sample_indices(ds.size(), opts.samples, opts.seed);
  GammaTrace tr;
  tr.taps = model.tap_names();
  const std::size_t k_taps = tr.taps.size();
  tr.gamma.assign(idx.size(), std::vector<double>(k_taps, 0.0));
  std::vector<std::vector<char>> zero(idx.size(), std::vector<char>(k_taps, 0));
  const std::size_t batches = (idx.size() + opts.batch - 1) / opts.batch;

  parallel_for(batches, opts.threads, [&](std::size_t b) {
    const std::size_t begin = b * opts.batch, count = std::min(opts.batch, idx.size() - begin);
    auto batch = make_batch<T>(ds, std::span<const std::size_t>(idx.data() + begin, count));
    std::mt19937_64 rng(batch_seed(opts.seed, b));
    Tensor<T> adv = generate_attack<T>(model, batch.images, batch.labels, spec, rng, Mode::eval);
    auto clean_taps = model.taps(batch.images);
    auto adv_taps = model.taps(adv);
    for (std::size_t k = 0; k < k_taps; ++k) {
      const std::size_t per = clean_taps[k].size() / count;
      auto c = clean_taps[k].data();
      auto a = adv_taps[k].data();
      for (std::size_t i = 0; i < count; ++i) {
        auto [g, z] = normalized_distance<T>(c.subspan(i * per, per), a.subspan(i * per, per));
        tr.gamma[begin + i][k] = g;
        zero[begin + i][k] = z;
      }
    }
  });

  tr.mean.assign(k_taps, 0.0);
  tr.stddev.assign(k_taps, 0.0);
  tr.stabilized.assign(k_taps, 0);
  const double n = static_cast<double>(idx.size());
  for (std::size_t k = 0; k < k_taps; ++k) {
    for (std::size_t s = 0; s < idx.size(); ++s) {
      tr.mean[k] += tr.gamma[s][k];
      tr.stabilized[k] += zero[s][k] != 0;
    }
    tr.mean[k] /= n;
    for (std::size_t s = 0; s < idx.size(); ++s) tr.stddev[k] += (tr.gamma[s][k] - tr.mean[k]) * (tr.gamma[s][k] - tr.mean[k]);
    tr.stddev[k] = std::sqrt(tr.stddev[k] / n);
  }
  return tr;
}

struct GrayImage {
  std::size_t width = 0, height = 0;
  std::vector<std::uint8_t> pixels;

  bool operator==(const GrayImage&) const = default;
};

/// Merges a C x H x W feature map to one channel with a per-pixel max and
/// min-max scales it to [0, 255]. A constant map becomes all zeros.
template <typename T>
GrayImage response_map(const Tensor<T>& feature) {
  Shape s = feature.shape();
  if (s.size() == 4 && s[0] == 1) s.erase(s.begin());
  if (s.size() != 3) throw DimensionError("response_map expects C x H x W, got " + to_string(feature.shape()));
  const std::size_t c = s[0], hw = s[1] * s[2];
  std::vector<double> merged(hw, -std::numeric_limits<double>::infinity());
  auto d = feature.data();
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t p = 0; p < hw; ++p) merged[p] = std::max(merged[p], static_cast<double>(d[ch * hw + p]));
  const auto [lo, hi] = std::minmax_element(merged.begin(), merged.end());
  const double min = *lo, range = *hi - *lo;
  GrayImage img{s[2], s[1], std::vector<std::uint8_t>(hw, 0)};
  if (range > 0 && std::isfinite(range))
    for (std::size_t p = 0; p < hw; ++p)
      img.pixels[p] = static_cast<std::uint8_t>(std::lround((merged[p] - min) / range * 255.0));
  return img;
}

/// Plain (ASCII) portable graymap: "P2", width height, maxval 255, then
/// one text row per image row.
inline void write_pgm(const std::filesystem::path& path, const GrayImage& img) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "P2\n" << img.width << " " << img.height << "\n255\n";
  for (std::size_t y = 0; y < img.height; ++y) {
    for (std::size_t x = 0; x < img.width; ++x) out << (x ? " " : "") << int(img.pixels[y * img.width + x]);
    out << "\n";
  }
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

inline GrayImage read_pgm(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::string magic;
  int maxval = 0;
  GrayImage img;
  in >> magic >> img.width >> img.height >> maxval;
  if (magic != "P2" || maxval != 255 || !in) throw FormatError(path.string() + ": not a plain 8-bit graymap");
  img.pixels.resize(img.width * img.height);
  for (auto& p : img.pixels) {
    int v = -1;
    in >> v;
    if (!in || v < 0 || v > 255) throw FormatError(path.string() + ": bad pixel value");
    p = static_cast<std::uint8_t>(v);
  }
  return img;
}

/// Response map of one image at a spatial tap (0 = stem, 1..B = blocks).
template <typename T>
GrayImage block_response_map(const ModelGraph<T>& model, const Tensor<T>& image, std::size_t tap) {
  if (tap + 1 >= model.tap_count())
    throw std::out_of_range("tap " + std::to_string(tap) + " has no spatial map; valid range is 0.." +
                            std::to_string(model.tap_count() - 2));
  Tensor<T> x = image.shape().size() == 3 ? image.reshaped(Shape{1, image.dim(0), image.dim(1), image.dim(2)}) : image;
  if (x.shape().size() != 4 || x.dim(0) != 1) throw DimensionError("response map needs a single image");
  return response_map(model.taps(x)[tap]);
}

template <typename T>
void response_map_export(const ModelGraph<T>& model, const Tensor<T>& image, std::size_t tap,
                         const std::filesystem::path& out) {
  write_pgm(out, block_response_map(model, image, tap));
}

inline constexpr const char* kEvalCsvHeader = "attack,eps,iters,accuracy";

inline std::string eval_rows_csv(const std::vector<EvalRow>& rows) {
  std::ostringstream os;
  os.precision(9);
  os << kEvalCsvHeader << "\n";
  for (const auto& r : rows) os << r.attack << "," << r.eps << "," << r.iters << "," << r.accuracy << "\n";
  return os.str();
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

struct SweepOptions {
  std::vector<double> eps{1, 2, 4, 8};
  std::vector<AttackFamily> families{AttackFamily::fgsm, AttackFamily::rfgsm, AttackFamily::pgd};
  int pgd_iters = 10;
  double pgd_step = 2;
  double curve_eps = 8;
  std::vector<int> curve_iters{1, 2, 5, 10, 20, 40};
  EvalOptions eval;
};

struct SweepReport {
  std::vector<EvalRow> grid;   // clean row, then one row per (family, eps)
  std::vector<EvalRow> curve;  // PGD accuracy per iteration count
};

inline AttackSpec sweep_spec(AttackFamily f, double eps, const SweepOptions& o) {
  switch (f) {
    case AttackFamily::fgsm: return AttackSpec::fgsm(eps);
    case AttackFamily::rfgsm: return AttackSpec::rfgsm(eps);
    case AttackFamily::pgd: return AttackSpec::pgd(eps, o.pgd_iters, o.pgd_step);
  }
  throw std::invalid_argument("unknown attack family");
}

template <typename T>
SweepReport robustness_sweep(const ModelGraph<T>& model, const Dataset& ds, const SweepOptions& o) {
  SweepReport r;
  std::vector<AttackSpec> specs;
  for (auto f : o.families)
    for (double e : o.eps) specs.push_back(sweep_spec(f, e, o));
  r.grid = evaluate_robustness<T>(model, ds, specs, o.eval);
  std::vector<AttackSpec> curve;
  for (int it : o.curve_iters) curve.push_back(AttackSpec::pgd(o.curve_eps, it, o.pgd_step));
  if (!curve.empty()) {
    r.curve = evaluate_robustness<T>(model, ds, curve, o.eval);
    r.curve.erase(r.curve.begin());
  }
  return r;
}

}  // namespace evp
