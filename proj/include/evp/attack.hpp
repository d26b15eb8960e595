#pragma once

#include <cmath>
#include <filesystem>
#include <functional>
#include <optional>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "evp/dataset.hpp"
#include "evp/parallel.hpp"
#include "evp/serialize.hpp"
#include "evp/tape.hpp"

namespace evp {

enum class AttackFamily { fgsm, rfgsm, pgd };
enum class StartMode { clean, random };
enum class LabelSource { truth, predicted };

inline std::string to_string(AttackFamily f) {
  switch (f) {
    case AttackFamily::fgsm: return "fgsm";
    case AttackFamily::rfgsm: return "rfgsm";
    case AttackFamily::pgd: return "pgd";
  }
  return "?";
}

inline std::string to_string(StartMode s) { return s == StartMode::random ? "random" : "clean"; }
inline std::string to_string(LabelSource s) { return s == LabelSource::predicted ? "predicted" : "truth"; }

inline AttackFamily parse_attack_family(const std::string& s) {
  if (s == "fgsm") return AttackFamily::fgsm;
  if (s == "rfgsm") return AttackFamily::rfgsm;
  if (s == "pgd") return AttackFamily::pgd;
  throw std::invalid_argument("unknown attack family '" + s + "' (expected fgsm, rfgsm or pgd)");
}

/// l-inf attack description. eps and alpha are in pixel units (1/255 of the
/// [0,1] input range).
struct AttackSpec {
  AttackFamily family = AttackFamily::fgsm;
  double eps = 8;
  std::optional<double> alpha;
  int iters = 1;
  StartMode start = StartMode::clean;
  LabelSource labels = LabelSource::truth;

  static AttackSpec fgsm(double eps) { return {AttackFamily::fgsm, eps, std::nullopt, 1, StartMode::clean}; }
  static AttackSpec rfgsm(double eps) { return {AttackFamily::rfgsm, eps, std::nullopt, 1, StartMode::random}; }
  static AttackSpec pgd(double eps, int iters, std::optional<double> alpha = std::nullopt,
                        StartMode start = StartMode::clean) {
    return {AttackFamily::pgd, eps, alpha, iters, start};
  }

  /// Radius on the [0,1] input scale.
  double eps_unit() const { return eps / 255.0; }

  double step_pixels() const {
    if (family != AttackFamily::pgd) return eps;
    return alpha ? *alpha : eps / iters;
  }

  std::string name() const {
    std::ostringstream os;
    switch (family) {
      case AttackFamily::fgsm: os << "FGSM"; break;
      case AttackFamily::rfgsm: os << "R-FGSM"; break;
      case AttackFamily::pgd: os << "PGD-" << iters << "-" << step_pixels(); break;
    }
    return os.str();
  }

  void validate() const {
    if (!(eps >= 0) || !std::isfinite(eps)) throw std::invalid_argument("attack eps must be finite and >= 0");
    if (family == AttackFamily::pgd) {
      if (iters < 1) throw std::invalid_argument("pgd needs iters >= 1");
      if (!(step_pixels() > 0) && eps > 0) throw std::invalid_argument("pgd needs alpha > 0");
    }
  }
};

namespace detail {

template <typename T>
T clip01(T v) {
  return std::min(std::max(v, T(0)), T(1));
}

/// Projects v onto [o - eps, o + eps] and [0,1] so that the computed |v - o|
/// never exceeds eps.
template <typename T>
T project(T v, T o, T eps) {
  v = clip01(std::min(std::max(v, o - eps), o + eps));
  while (v - o > eps) v = std::nextafter(v, o);
  while (o - v > eps) v = std::nextafter(v, o);
  return v;
}

/// One signed-gradient step followed by projection onto the eps-ball around
/// `origin` and the [0,1] box.
template <typename T>
void signed_step(Tensor<T>& cur, const Tensor<T>& origin, const Tensor<T>& grad, T alpha, T eps) {
  auto c = cur.data();
  auto o = origin.data();
  auto g = grad.data();
  for (std::size_t i = 0; i < c.size(); ++i) {
    const T s = g[i] > T(0) ? T(1) : (g[i] < T(0) ? T(-1) : T(0));
    c[i] = project(c[i] + alpha * s, o[i], eps);
  }
}

template <typename T>
Tensor<T> random_start(const Tensor<T>& x, T eps, std::mt19937_64& rng) {
  Tensor<T> out = x;
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  auto o = x.data();
  auto d = out.data();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] = project(static_cast<T>(o[i] + eps * static_cast<T>(u(rng))), o[i], eps);
  return out;
}

template <typename T>
std::vector<int> argmax_rows(const Tensor<T>& logits) {
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  std::vector<int> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < k; ++j)
      if (logits[i * k + j] > logits[i * k + best]) best = j;
    out[i] = static_cast<int>(best);
  }
  return out;
}

}  // namespace detail

/// Called with the iteration index (1-based) and the current iterate.
template <typename T>
using AttackObserver = std::function<void(int, const Tensor<T>&)>;

/// Generates adversarial examples for a batch. `Model` must provide
/// logits(x, mode) and loss_gradient(x, labels, mode).
template <typename T, typename Model>
Tensor<T> generate_attack(const Model& model, const Tensor<T>& x, std::span<const int> labels,
                          const AttackSpec& spec, std::mt19937_64& rng, Mode mode = Mode::eval,
                          const AttackObserver<T>& observer = {}) {
  spec.validate();
  const T eps = static_cast<T>(spec.eps_unit());
  const T alpha = static_cast<T>(spec.step_pixels() / 255.0);
  std::vector<int> target(labels.begin(), labels.end());
  if (spec.labels == LabelSource::predicted) target = detail::argmax_rows(model.logits(x, mode));

  const bool random = spec.family == AttackFamily::rfgsm ||
                      (spec.family == AttackFamily::pgd && spec.start == StartMode::random);
  Tensor<T> cur = random ? detail::random_start(x, eps, rng) : x;
  if (spec.eps == 0) return x;

  const int iters = spec.family == AttackFamily::pgd ? spec.iters : 1;
  for (int it = 1; it <= iters; ++it) {
    auto g = model.loss_gradient(cur, target, mode);
    if (!g.grad.all_finite()) throw NumericError("attack: non-finite input gradient at iteration " + std::to_string(it));
    detail::signed_step(cur, x, g.grad, alpha, eps);
    if (observer) observer(it, cur);
  }
  return cur;
}

template <typename T, typename Model>
Tensor<T> fgsm(const Model& model, const Tensor<T>& x, std::span<const int> labels, double eps,
               Mode mode = Mode::eval) {
  std::mt19937_64 unused(0);
  return generate_attack<T>(model, x, labels, AttackSpec::fgsm(eps), unused, mode);
}

template <typename T, typename Model>
Tensor<T> rfgsm(const Model& model, const Tensor<T>& x, std::span<const int> labels, double eps,
                std::mt19937_64& rng, Mode mode = Mode::eval) {
  return generate_attack<T>(model, x, labels, AttackSpec::rfgsm(eps), rng, mode);
}

template <typename T, typename Model>
Tensor<T> pgd(const Model& model, const Tensor<T>& x, std::span<const int> labels, const AttackSpec& spec,
              std::mt19937_64& rng, Mode mode = Mode::eval, const AttackObserver<T>& observer = {}) {
  if (spec.family != AttackFamily::pgd) throw std::invalid_argument("pgd called with a non-pgd spec");
  return generate_attack<T>(model, x, labels, spec, rng, mode, observer);
}

/// Largest |x_adv - x| and whether every pixel lies in [0,1].
template <typename T>
struct ConstraintCheck {
  T max_delta = 0;
  bool in_range = true;
  bool within(double eps_pixels) const {
    const T eps = static_cast<T>(eps_pixels / 255.0);
    return in_range && max_delta <= std::nextafter(eps, std::numeric_limits<T>::infinity());
  }
};

template <typename T>
ConstraintCheck<T> check_constraints(const Tensor<T>& x, const Tensor<T>& adv) {
  require_same_shape(x.shape(), adv.shape(), "check_constraints");
  ConstraintCheck<T> c;
  for (std::size_t i = 0; i < x.size(); ++i) {
    c.max_delta = std::max(c.max_delta, std::abs(adv[i] - x[i]));
    if (!(adv[i] >= T(0) && adv[i] <= T(1))) c.in_range = false;
  }
  return c;
}

struct EvalOptions {
  std::size_t batch = 100;
  std::size_t threads = 1;
  std::uint64_t seed = 0;
  std::size_t limit = 0;  // 0 evaluates the whole dataset
};

inline std::uint64_t batch_seed(std::uint64_t seed, std::size_t batch) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(batch), 0x61747461u};
  std::uint32_t parts[2];
  seq.generate(parts, parts + 2);
  return (static_cast<std::uint64_t>(parts[0]) << 32) | parts[1];
}

/// Counts correct predictions of `eval_model` on inputs produced per batch by
/// `make_input(batch, batch_index)`. Batches run in parallel when
/// opts.threads > 1; each batch uses its own derived seed so results do not
/// depend on the thread count.
template <typename T, typename Model, typename MakeInput>
double batched_accuracy(const Model& eval_model, const Dataset& ds, const EvalOptions& opts, MakeInput&& make_input) {
  const std::size_t n = opts.limit ? std::min(opts.limit, ds.size()) : ds.size();
  if (n == 0) throw std::invalid_argument("accuracy over an empty dataset");
  const std::size_t batches = (n + opts.batch - 1) / opts.batch;
  std::vector<std::size_t> correct(batches, 0);
  parallel_for(batches, opts.threads, [&](std::size_t b) {
    const std::size_t begin = b * opts.batch, count = std::min(opts.batch, n - begin);
    auto batch = make_batch<T>(ds, begin, count);
    Tensor<T> input = make_input(batch, b);
    auto pred = detail::argmax_rows(eval_model.logits(input, Mode::eval));
    for (std::size_t i = 0; i < count; ++i) correct[b] += pred[i] == batch.labels[i];
  });
  std::size_t total = 0;
  for (auto c : correct) total += c;
  return static_cast<double>(total) / static_cast<double>(n);
}

template <typename T, typename Model>
double clean_accuracy(const Model& model, const Dataset& ds, const EvalOptions& opts = {}) {
  return batched_accuracy<T>(model, ds, opts, [](const Batch<T>& b, std::size_t) { return b.images; });
}

template <typename T, typename Model>
double adversarial_accuracy(const Model& model, const Dataset& ds, const AttackSpec& spec,
                            const EvalOptions& opts = {}) {
  return batched_accuracy<T>(model, ds, opts, [&](const Batch<T>& b, std::size_t idx) {
    std::mt19937_64 rng(batch_seed(opts.seed, idx));
    return generate_attack<T>(model, b.images, b.labels, spec, rng, Mode::eval);
  });
}

/// Black-box transfer: examples crafted on `source`, accuracy measured on
/// `target`.
template <typename T, typename Source, typename Target>
double transfer_attack_eval(const Source& source, const Target& target, const Dataset& ds, const AttackSpec& spec,
                            const EvalOptions& opts = {}) {
  return batched_accuracy<T>(target, ds, opts, [&](const Batch<T>& b, std::size_t idx) {
    if (b.images.shape() != target.input_shape(b.images.dim(0)) || b.images.shape() != source.input_shape(b.images.dim(0)))
      throw DimensionError("transfer: source and target input shapes differ");
    std::mt19937_64 rng(batch_seed(opts.seed, idx));
    return generate_attack<T>(source, b.images, b.labels, spec, rng, Mode::eval);
  });
}

struct EvalRow {
  std::string attack;
  double eps = 0;
  int iters = 0;
  double accuracy = 0;
};

/// Clean accuracy followed by one row per attack spec. Evaluation uses true
/// labels unless the spec says otherwise.
template <typename T, typename Model>
std::vector<EvalRow> evaluate_robustness(const Model& model, const Dataset& ds, const std::vector<AttackSpec>& specs,
                                         const EvalOptions& opts = {}) {
  std::vector<EvalRow> rows;
  rows.push_back({"clean", 0, 0, clean_accuracy<T>(model, ds, opts)});
  for (const auto& s : specs)
    rows.push_back({s.name(), s.eps, s.family == AttackFamily::pgd ? s.iters : 1,
                    adversarial_accuracy<T>(model, ds, s, opts)});
  return rows;
}

/// Writes an adversarial batch (images, then labels as a 1-D tensor) to one
/// tensor container file.
template <typename T>
void export_adversarial(const std::filesystem::path& path, const Tensor<T>& images, std::span<const int> labels) {
  Tensor<T> l({labels.size()});
  for (std::size_t i = 0; i < labels.size(); ++i) l[i] = static_cast<T>(labels[i]);
  save_tensors<T>(path, {images, l});
}

template <typename T>
Batch<T> import_adversarial(const std::filesystem::path& path) {
  auto ts = load_tensors<T>(path);
  if (ts.size() != 2 || ts[0].rank() != 4 || ts[1].rank() != 1 || ts[1].size() != ts[0].dim(0))
    throw FormatError(path.string() + ": not an adversarial batch");
  Batch<T> b{ts[0], {}};
  for (T v : ts[1].data()) b.labels.push_back(static_cast<int>(v));
  return b;
}

}  // namespace evp
