#pragma once

#include <cmath>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "evp/tape.hpp"

namespace evp {

struct GradCheckOptions {
  double step = 1e-4;         // relative step; h = step * max(1, |x|)
  double tolerance = 1e-5;    // max relative error allowed
  double abs_floor = 1e-6;    // denominator floor for near-zero gradients
  double kink_factor = 10.0;  // resample when a kink is closer than kink_factor * step
  int max_resamples = 20;
  std::function<void(int)> resample;  // redraws the inputs; attempt index passed in
};

struct GradCheckEntry {
  std::string name;
  double max_rel_error = 0;
  std::size_t elements = 0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double tolerance = 0;
  double max_rel_error = 0;
  int resamples = 0;
  bool kink_blocked = false;  // could not find inputs away from non-smooth points

  bool passed() const { return !kink_blocked && max_rel_error < tolerance; }

  std::string summary() const {
    std::ostringstream os;
    os << (passed() ? "ok" : "FAILED") << " max_rel_error=" << max_rel_error << " tol=" << tolerance
       << " resamples=" << resamples;
    if (kink_blocked) os << " (kink-blocked)";
    for (const auto& e : entries) os << "\n  " << e.name << ": " << e.max_rel_error << " over " << e.elements;
    return os.str();
  }
};

/// Compares reverse-mode gradients of a scalar-valued `fn` against central
/// differences for every element of `params`. `fn` must read the parameters
/// through tape.param() and be deterministic.
template <typename T>
GradCheckReport finite_diff_check(const std::function<Var<T>(Tape<T>&)>& fn, const std::vector<Parameter<T>*>& params,
                                  const GradCheckOptions& opts = {}) {
  GradCheckReport report;
  report.tolerance = opts.tolerance;

  const double kink_threshold = opts.kink_factor * opts.step;
  for (int attempt = 0;; ++attempt) {
    for (auto* p : params) p->zero_grad();
    Tape<T> probe(typename Tape<T>::Options{true, true, true});
    Var<T> loss = fn(probe);
    if (probe.kink_margin() >= kink_threshold) {
      probe.backward(loss);
      break;
    }
    if (!opts.resample || attempt >= opts.max_resamples) {
      report.kink_blocked = true;
      return report;
    }
    opts.resample(attempt);
    ++report.resamples;
  }

  auto evaluate = [&]() -> double {
    Tape<T> t(typename Tape<T>::Options{true, false, false});
    return static_cast<double>(fn(t).value().item());
  };

  for (auto* p : params) {
    GradCheckEntry entry{p->name, 0.0, p->value.size()};
    const Tensor<T> analytic = p->grad;
    for (std::size_t i = 0; i < p->value.size(); ++i) {
      const T saved = p->value[i];
      const double h = opts.step * std::max(1.0, std::abs(static_cast<double>(saved)));
      p->value[i] = static_cast<T>(saved + h);
      const double fp = evaluate();
      p->value[i] = static_cast<T>(saved - h);
      const double fm = evaluate();
      p->value[i] = saved;
      const double numeric = (fp - fm) / (2.0 * h);
      const double a = static_cast<double>(analytic[i]);
      const double denom = std::max({std::abs(a), std::abs(numeric), opts.abs_floor});
      entry.max_rel_error = std::max(entry.max_rel_error, std::abs(a - numeric) / denom);
    }
    report.max_rel_error = std::max(report.max_rel_error, entry.max_rel_error);
    report.entries.push_back(entry);
  }
  return report;
}

}  // namespace evp
