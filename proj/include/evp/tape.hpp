#pragma once

#include <deque>
#include <functional>
#include <limits>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>

#include "evp/tensor.hpp"

namespace evp {

/// Forward mode. `batch_stats` normalizes with batch statistics but leaves
/// running averages untouched (used while generating adversarial batches).
enum class Mode { train, eval, batch_stats };

/// Named learnable tensor with an additive gradient accumulator.
template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;
  bool trainable = true;  // false for buffers such as running statistics
  bool decay = true;      // weight-decay group membership

  Parameter() = default;
  Parameter(std::string n, Tensor<T> v, bool train = true, bool wd = true)
      : name(std::move(n)), value(std::move(v)), grad(value.shape()), trainable(train), decay(wd) {}

  void zero_grad() {
    if (grad.shape() != value.shape() || grad.size() != value.size()) grad = Tensor<T>(value.shape());
    grad.fill(T(0));
  }
};

template <typename T>
class Tape;

/// Handle to a value recorded on a tape.
template <typename T>
class Var {
 public:
  Var() = default;
  Var(Tape<T>* tape, std::size_t id) : tape_(tape), id_(id) {}

  const Tensor<T>& value() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t id() const noexcept { return id_; }
  Tape<T>& tape() const noexcept { return *tape_; }
  bool valid() const noexcept { return tape_ != nullptr; }

 private:
  Tape<T>* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Records operations in execution order and replays them in reverse to
/// accumulate gradients. One tape per forward pass; not thread-safe.
template <typename T>
class Tape {
 public:
  using Backward = std::function<void(Tape&, const Tensor<T>&)>;

  struct Options {
    bool check_finite = true;   // throw NumericError on non-finite op outputs
    bool track_kinks = false;   // non-smooth ops report their distance to a kink
    bool param_grads = true;    // parameters participate in differentiation
  };

  Tape() = default;
  explicit Tape(Options options) : options_(options) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  const Options& options() const noexcept { return options_; }

  Var<T> input(Tensor<T> value, bool requires_grad = false) {
    return push("input", std::move(value), requires_grad, nullptr, nullptr);
  }

  Var<T> constant(Tensor<T> value) { return push("constant", std::move(value), false, nullptr, nullptr); }

  /// One leaf per parameter per tape; repeated uses share the leaf so their
  /// contributions add up in its gradient.
  Var<T> param(Parameter<T>& p) {
    if (auto it = param_ids_.find(&p); it != param_ids_.end()) return Var<T>(this, it->second);
    const bool rg = options_.param_grads && p.trainable;
    Var<T> v = push("param", p.value, rg, nullptr, &p);
    param_ids_.emplace(&p, v.id());
    return v;
  }

  /// Appends an operation output. The backward closure runs only when at least
  /// one parent requires a gradient.
  Var<T> record(std::string_view op, Tensor<T> value, std::initializer_list<Var<T>> parents, Backward fn) {
    bool rg = false;
    for (const auto& p : parents) rg = rg || requires_grad(p);
    if (options_.check_finite && !value.all_finite()) {
      throw NumericError(std::string(op) + " produced a non-finite value");
    }
    return push(op, std::move(value), rg, rg ? std::move(fn) : Backward{}, nullptr);
  }

  bool requires_grad(Var<T> v) const { return nodes_.at(v.id()).requires_grad; }

  const Tensor<T>& value(std::size_t id) const { return nodes_.at(id).value; }

  /// Gradient accumulator of a node, zero-initialized on first access.
  /// Returns nullptr when the node does not require a gradient.
  Tensor<T>* grad_slot(std::size_t id) {
    Node& n = nodes_.at(id);
    if (!n.requires_grad) return nullptr;
    if (!n.has_grad) {
      n.grad = Tensor<T>(n.value.shape());
      n.has_grad = true;
    }
    return &n.grad;
  }
  Tensor<T>* grad_slot(Var<T> v) { return grad_slot(v.id()); }

  void backward(Var<T> loss) {
    if (backward_done_) throw std::logic_error("backward called twice on the same tape; reset() first");
    Node& root = nodes_.at(loss.id());
    if (root.value.size() != 1) {
      throw DimensionError("backward requires a scalar loss, got shape " + to_string(root.value.shape()));
    }
    backward_done_ = true;
    if (!root.requires_grad) return;
    grad_slot(loss.id())->fill(T(1));
    for (std::size_t i = loss.id() + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.backward || !n.has_grad) continue;
      n.backward(*this, n.grad);
    }
    for (auto& [param, id] : param_ids_) {
      Node& n = nodes_[id];
      if (!n.has_grad) continue;
      if (param->grad.shape() != param->value.shape() || param->grad.size() != param->value.size()) {
        param->zero_grad();
      }
      auto dst = param->grad.data();
      auto src = n.grad.data();
      for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += src[k];
    }
  }

  /// Accumulated gradient of a recorded value after backward(); zeros when
  /// nothing flowed into it.
  Tensor<T> grad(Var<T> v) const {
    const Node& n = nodes_.at(v.id());
    if (n.has_grad) return n.grad;
    return Tensor<T>(n.value.shape());
  }

  void note_kink(T distance) {
    if (options_.track_kinks) kink_margin_ = std::min(kink_margin_, static_cast<double>(distance));
  }
  bool tracking_kinks() const noexcept { return options_.track_kinks; }
  double kink_margin() const noexcept { return kink_margin_; }

  std::size_t size() const noexcept { return nodes_.size(); }

  void reset() {
    nodes_.clear();
    param_ids_.clear();
    backward_done_ = false;
    kink_margin_ = std::numeric_limits<double>::infinity();
  }

 private:
  struct Node {
    std::string_view op;
    Tensor<T> value;
    Tensor<T> grad;
    bool has_grad = false;
    bool requires_grad = false;
    Backward backward;
    Parameter<T>* param = nullptr;
  };

  Var<T> push(std::string_view op, Tensor<T> value, bool rg, Backward fn, Parameter<T>* p) {
    if (backward_done_) throw std::logic_error("cannot record on a tape after backward; reset() first");
    nodes_.push_back(Node{op, std::move(value), Tensor<T>{}, false, rg, std::move(fn), p});
    return Var<T>(this, nodes_.size() - 1);
  }

  Options options_{};
  std::deque<Node> nodes_;
  std::unordered_map<Parameter<T>*, std::size_t> param_ids_;
  bool backward_done_ = false;
  double kink_margin_ = std::numeric_limits<double>::infinity();
};

template <typename T>
const Tensor<T>& Var<T>::value() const {
  return tape_->value(id_);
}

}  // namespace evp
