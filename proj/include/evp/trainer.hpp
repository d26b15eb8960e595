#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "evp/attack.hpp"
#include "evp/dataset.hpp"
#include "evp/model.hpp"

namespace evp {

enum class AdvMode { none, fgsm, pgd };

inline std::string to_string(AdvMode m) {
  switch (m) {
    case AdvMode::none: return "none";
    case AdvMode::fgsm: return "fgsm";
    case AdvMode::pgd: return "pgd";
  }
  return "?";
}

inline AdvMode parse_adv_mode(const std::string& s) {
  if (s == "none") return AdvMode::none;
  if (s == "fgsm") return AdvMode::fgsm;
  if (s == "pgd") return AdvMode::pgd;
  throw std::invalid_argument("unknown adversarial mode '" + s + "' (expected none, fgsm or pgd)");
}

struct TrainSpec {
  std::size_t epochs = 160;
  std::size_t batch = 128;
  double lr = 0.1;
  std::vector<std::size_t> milestones{80, 120};
  double decay_factor = 0.1;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  AdvMode adversarial = AdvMode::none;
  double adv_eps = 8;
  bool mixed = false;
  bool augment = true;
  bool verify_constraints = false;
  std::size_t eval_limit = 0;
  std::uint64_t seed = 0;

  /// CPU-scale profile: 30 epochs with milestones at 15 and 25.
  static TrainSpec desk() {
    TrainSpec s;
    s.epochs = 30;
    s.milestones = {15, 25};
    return s;
  }

  /// Attack used to generate training batches: R-FGSM for fgsm mode, PGD-7
  /// with 2-pixel steps from a random start for pgd mode; both use predicted
  /// labels.
  AttackSpec generation_attack() const {
    AttackSpec a = adversarial == AdvMode::pgd ? AttackSpec::pgd(adv_eps, 7, 2, StartMode::random)
                                               : AttackSpec::rfgsm(adv_eps);
    a.labels = LabelSource::predicted;
    return a;
  }

  void validate() const {
    if (batch == 0) throw std::invalid_argument("batch size must be positive");
    if (!(lr >= 0) || !std::isfinite(lr)) throw std::invalid_argument("learning rate must be finite and >= 0");
    if (!(momentum >= 0 && momentum < 1)) throw std::invalid_argument("momentum must be in [0, 1)");
    if (!(weight_decay >= 0)) throw std::invalid_argument("weight decay must be >= 0");
    if (!(decay_factor > 0)) throw std::invalid_argument("lr decay factor must be positive");
    for (std::size_t i = 1; i < milestones.size(); ++i)
      if (milestones[i] <= milestones[i - 1]) throw std::invalid_argument("milestones must be increasing");
  }
};

/// Step schedule: the decay applies from the milestone epoch onwards.
inline double lr_at(std::size_t epoch, const TrainSpec& spec) {
  double lr = spec.lr;
  for (auto m : spec.milestones)
    if (epoch >= m) lr *= spec.decay_factor;
  return lr;
}

/// SGD with momentum and L2 weight decay folded into the gradient:
/// v = m v + (g + wd p), p = p - lr v. Parameters with decay == false skip
/// the wd term.
template <typename T>
class SgdMomentum {
 public:
  SgdMomentum(double momentum, double weight_decay) : momentum_(momentum), wd_(weight_decay) {}

  void step(const std::vector<Parameter<T>*>& params, double lr) {
    for (auto* p : params) {
      if (!p->trainable) continue;
      if (p->grad.size() != p->value.size()) continue;
      if (!p->grad.all_finite()) throw NumericError("non-finite gradient for parameter " + p->name);
    }
    const T m = static_cast<T>(momentum_), l = static_cast<T>(lr);
    for (auto* p : params) {
      if (!p->trainable || p->grad.size() != p->value.size()) continue;
      const T wd = p->decay ? static_cast<T>(wd_) : T(0);
      auto& v = velocity_[p];
      if (v.size() != p->value.size()) v.assign(p->value.size(), T(0));
      auto val = p->value.data();
      auto g = p->grad.data();
      for (std::size_t i = 0; i < val.size(); ++i) {
        v[i] = m * v[i] + (g[i] + wd * val[i]);
        val[i] -= l * v[i];
      }
    }
  }

  const std::vector<T>* velocity(const Parameter<T>* p) const {
    auto it = velocity_.find(p);
    return it == velocity_.end() ? nullptr : &it->second;
  }

 private:
  double momentum_, wd_;
  std::unordered_map<const Parameter<T>*, std::vector<T>> velocity_;
};

struct EpochLog {
  std::size_t epoch = 0;
  double lr = 0;
  double loss = 0;
  double clean_acc = 0;
  double adv_acc = std::numeric_limits<double>::quiet_NaN();
};

struct TrainLog {
  std::vector<EpochLog> rows;

  static constexpr const char* header = "epoch,lr,loss,clean_acc,adv_acc";

  std::string to_csv() const {
    std::ostringstream os;
    os.precision(9);
    os << header << "\n";
    for (const auto& r : rows) {
      os << r.epoch << "," << r.lr << "," << r.loss << "," << r.clean_acc << ",";
      if (!std::isnan(r.adv_acc)) os << r.adv_acc;
      os << "\n";
    }
    return os.str();
  }

  void write_csv(const std::filesystem::path& path) const {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << to_csv();
  }

  bool operator==(const TrainLog& o) const { return to_csv() == o.to_csv(); }
};

class TrainingDiverged : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct StepResult {
  double loss = 0;
  std::size_t correct = 0;
};

/// One optimization step on a batch in train mode.
template <typename T>
StepResult train_step(ModelGraph<T>& model, SgdMomentum<T>& opt, const Tensor<T>& x, std::span<const int> labels,
                      double lr) {
  for (auto* p : model.parameters()) p->zero_grad();
  Tape<T> tape;
  auto fr = model.forward(tape.input(x), Mode::train);
  auto loss = softmax_cross_entropy(fr.logits, labels);
  const double l = static_cast<double>(loss.value().item());
  if (!std::isfinite(l)) throw TrainingDiverged("loss is not finite");
  tape.backward(loss);
  opt.step(model.parameters(), lr);
  StepResult r{l, 0};
  auto pred = detail::argmax_rows(fr.logits.value());
  for (std::size_t i = 0; i < labels.size(); ++i) r.correct += pred[i] == labels[i];
  return r;
}

template <typename T>
Tensor<T> concat_batch(const Tensor<T>& a, const Tensor<T>& b) {
  Shape s = a.shape();
  s[0] += b.dim(0);
  std::vector<T> d(a.data().begin(), a.data().end());
  d.insert(d.end(), b.data().begin(), b.data().end());
  return Tensor<T>(std::move(s), std::move(d));
}

/// Sets the model's input normalization from per-channel training-set
/// statistics; standard deviations are floored at `min_std`.
template <typename T>
void fit_input_normalization(ModelGraph<T>& model, const Dataset& ds, double min_std = 1e-3) {
  auto stats = normalize_stats(ds);
  for (auto& s : stats.stddev) s = std::max(s, min_std);
  model.set_input_normalization(stats.mean, stats.stddev);
}

/// Runs the full schedule. Each epoch logs mean training loss, clean accuracy
/// on `eval_set`, and in adversarial modes the accuracy on `eval_set` under
/// the generation attack (true labels). Throws TrainingDiverged on
/// non-finite loss or gradients.
template <typename T>
TrainLog train(ModelGraph<T>& model, const Dataset& train_set, const Dataset& eval_set, const TrainSpec& spec,
               const std::function<void(const EpochLog&)>& on_epoch = {}) {
  spec.validate();
  if (train_set.size() == 0) throw std::invalid_argument("empty training set");
  if (train_set.image_shape() != Shape{model.config().channels, model.config().image_size, model.config().image_size})
    throw DimensionError("training images do not match the model input");
  SgdMomentum<T> opt(spec.momentum, spec.weight_decay);
  std::mt19937_64 rng(spec.seed);
  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), 0);
  const AttackSpec gen = spec.generation_attack();
  EvalOptions eval_opts;
  eval_opts.limit = spec.eval_limit;
  eval_opts.seed = spec.seed;
  TrainLog log;

  for (std::size_t epoch = 0; epoch < spec.epochs; ++epoch) {
    const double lr = lr_at(epoch, spec);
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0;
    std::size_t batches = 0;
    for (std::size_t begin = 0; begin < order.size(); begin += spec.batch) {
      const std::size_t count = std::min(spec.batch, order.size() - begin);
      if (count < 2) continue;  // batch norm needs at least two samples
      auto b = make_batch<T>(train_set, std::span<const std::size_t>(order.data() + begin, count));
      if (spec.augment) augment(b.images, rng);
      Tensor<T> input = b.images;
      std::vector<int> labels = b.labels;
      if (spec.adversarial != AdvMode::none) {
        Tensor<T> adv = generate_attack<T>(model, b.images, b.labels, gen, rng, Mode::batch_stats);
        if (spec.verify_constraints && !check_constraints(b.images, adv).within(gen.eps))
          throw std::logic_error("adversarial training batch violates the attack constraints");
        if (spec.mixed) {
          input = concat_batch(b.images, adv);
          labels.insert(labels.end(), b.labels.begin(), b.labels.end());
        } else {
          input = std::move(adv);
        }
      }
      try {
        loss_sum += train_step(model, opt, input, labels, lr).loss;
      } catch (const NumericError& e) {
        throw TrainingDiverged("training diverged at epoch " + std::to_string(epoch) + ", batch " +
                               std::to_string(batches) + ": " + e.what());
      } catch (const TrainingDiverged& e) {
        throw TrainingDiverged("training diverged at epoch " + std::to_string(epoch) + ", batch " +
                               std::to_string(batches) + ": " + e.what());
      }
      ++batches;
    }
    EpochLog row;
    row.epoch = epoch;
    row.lr = lr;
    row.loss = batches ? loss_sum / static_cast<double>(batches) : 0.0;
    row.clean_acc = clean_accuracy<T>(model, eval_set, eval_opts);
    if (spec.adversarial != AdvMode::none) {
      AttackSpec eval_attack = gen;
      eval_attack.labels = LabelSource::truth;
      row.adv_acc = adversarial_accuracy<T>(model, eval_set, eval_attack, eval_opts);
    }
    log.rows.push_back(row);
    if (on_epoch) on_epoch(row);
  }
  return log;
}

}  // namespace evp
