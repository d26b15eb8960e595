#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "evp/analysis.hpp"
#include "evp/attack.hpp"
#include "evp/dataset.hpp"
#include "evp/model.hpp"
#include "evp/trainer.hpp"

namespace evp {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Precision { f32, f64 };

inline std::string to_string(Precision p) { return p == Precision::f64 ? "f64" : "f32"; }

enum class DataSource { synth, cifar10, records };

inline std::string to_string(DataSource s) {
  switch (s) {
    case DataSource::synth: return "synth";
    case DataSource::cifar10: return "cifar10";
    case DataSource::records: return "records";
  }
  return "?";
}

struct DataSettings {
  DataSource source = DataSource::synth;
  std::string path;        // CIFAR-10 directory
  std::string train_file;  // raw record files for source = records
  std::string test_file;
  std::size_t classes = 10;
  std::size_t subset = 0;  // balanced training subset size, 0 = all
  std::size_t test_limit = 0;
  std::size_t synth_train = 2000;
  std::size_t synth_test = 500;
  double synth_noise = 0.1;
  std::size_t image_size = 32;
};

struct AnalysisSettings {
  std::size_t samples = 64;
  AttackSpec attack = AttackSpec::pgd(8, 40, 2);
  std::vector<double> sweep_eps{1, 2, 4, 8};
  std::vector<AttackFamily> sweep_families{AttackFamily::fgsm, AttackFamily::rfgsm, AttackFamily::pgd};
  std::vector<int> curve_iters{1, 2, 5, 10, 20, 40};
  std::vector<std::size_t> response_taps{0, 1};
  std::size_t response_images = 1;
};

struct RunSettings {
  std::uint64_t seed = 0;
  std::size_t threads = 1;
  std::string out = "runs/latest";
  Precision precision = Precision::f32;
  std::string checkpoint;  // checkpoint base to load; empty = <out>/model
  std::size_t export_examples = 0;
};

inline ModelConfig desk_model() {
  ModelConfig m;
  m.widths = {8, 16, 32};
  return m;
}

struct RunConfig {
  ModelConfig model = desk_model();
  TrainSpec train = TrainSpec::desk();
  AttackSpec attack = AttackSpec::pgd(8, 10, 2);
  DataSettings data;
  AnalysisSettings analysis;
  RunSettings run;
};

namespace config_detail {

inline std::string trim(std::string s) {
  const char* ws = " \t\r\n";
  s.erase(0, s.find_first_not_of(ws));
  const auto e = s.find_last_not_of(ws);
  s.erase(e == std::string::npos ? 0 : e + 1);
  return s;
}

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

inline bool parse_bool(const std::string& s) {
  if (s == "true" || s == "1" || s == "yes" || s == "on") return true;
  if (s == "false" || s == "0" || s == "no" || s == "off") return false;
  throw std::invalid_argument("expected a boolean, got '" + s + "'");
}

template <typename I>
I parse_int(const std::string& s) {
  I v{};
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size()) throw std::invalid_argument("expected an integer, got '" + s + "'");
  return v;
}

inline double parse_double(const std::string& s) {
  std::size_t used = 0;
  double v = 0;
  try {
    v = std::stod(s, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != s.size() || !std::isfinite(v)) throw std::invalid_argument("expected a number, got '" + s + "'");
  return v;
}

template <typename I>
std::vector<I> parse_int_list(const std::string& s) {
  std::vector<I> out;
  for (const auto& item : split_list(s)) out.push_back(parse_int<I>(item));
  return out;
}

inline std::vector<double> parse_double_list(const std::string& s) {
  std::vector<double> out;
  for (const auto& item : split_list(s)) out.push_back(parse_double(item));
  return out;
}

inline std::string fmt(double v) {
  char buf[32];
  auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

inline std::string fmt(bool v) { return v ? "true" : "false"; }

template <typename V>
std::string join_num(const std::vector<V>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) out += ",";
    if constexpr (std::is_floating_point_v<V>)
      out += fmt(v[i]);
    else
      out += std::to_string(v[i]);
  }
  return out;
}

inline StartMode parse_start(const std::string& s) {
  if (s == "clean") return StartMode::clean;
  if (s == "random") return StartMode::random;
  throw std::invalid_argument("expected clean or random, got '" + s + "'");
}

inline LabelSource parse_labels(const std::string& s) {
  if (s == "truth") return LabelSource::truth;
  if (s == "predicted") return LabelSource::predicted;
  throw std::invalid_argument("expected truth or predicted, got '" + s + "'");
}

inline DataSource parse_source(const std::string& s) {
  if (s == "synth") return DataSource::synth;
  if (s == "cifar10") return DataSource::cifar10;
  if (s == "records") return DataSource::records;
  throw std::invalid_argument("expected synth, cifar10 or records, got '" + s + "'");
}

inline Precision parse_precision(const std::string& s) {
  if (s == "f32") return Precision::f32;
  if (s == "f64") return Precision::f64;
  throw std::invalid_argument("expected f32 or f64, got '" + s + "'");
}

struct Entry {
  std::string section;
  std::string key;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

inline void set_alpha(AttackSpec& a, const std::string& v) {
  if (v.empty() || v == "auto")
    a.alpha.reset();
  else
    a.alpha = parse_double(v);
}

inline std::string get_alpha(const AttackSpec& a) { return a.alpha ? fmt(*a.alpha) : "auto"; }

/// Registry of every recognised key. Values are applied in this order, so
/// model.family precedes the component toggles it provides defaults for.
inline const std::vector<Entry>& entries() {
  static const std::vector<Entry> table = [] {
    std::vector<Entry> e;
    auto add = [&](std::string s, std::string k, auto set, auto get) {
      e.push_back({std::move(s), std::move(k), set, get});
    };
    add("model", "family",
        [](RunConfig& c, const std::string& v) {
          auto f = parse_family(v);
          c.model.family = f;
          c.model.pdog = c.model.trelu = c.model.pnl = f == Family::evpnet;
        },
        [](const RunConfig& c) { return to_string(c.model.family); });
    add("model", "depth", [](RunConfig& c, const std::string& v) { c.model.depth = parse_int<std::size_t>(v); },
        [](const RunConfig& c) { return std::to_string(c.model.depth); });
    add("model", "widths",
        [](RunConfig& c, const std::string& v) { c.model.widths = parse_int_list<std::size_t>(v); },
        [](const RunConfig& c) { return join_num(c.model.widths); });
    add("model", "min_mid_width",
        [](RunConfig& c, const std::string& v) { c.model.min_mid_width = parse_int<std::size_t>(v); },
        [](const RunConfig& c) { return std::to_string(c.model.min_mid_width); });
    add("model", "pdog", [](RunConfig& c, const std::string& v) { c.model.pdog = parse_bool(v); },
        [](const RunConfig& c) { return fmt(c.model.pdog); });
    add("model", "trelu", [](RunConfig& c, const std::string& v) { c.model.trelu = parse_bool(v); },
        [](const RunConfig& c) { return fmt(c.model.trelu); });
    add("model", "pnl", [](RunConfig& c, const std::string& v) { c.model.pnl = parse_bool(v); },
        [](const RunConfig& c) { return fmt(c.model.pnl); });
    add("model", "theta",
        [](RunConfig& c, const std::string& v) {
          if (v == "channel")
            c.model.theta = ThetaGranularity::channel;
          else if (v == "block")
            c.model.theta = ThetaGranularity::block;
          else
            throw std::invalid_argument("expected channel or block, got '" + v + "'");
        },
        [](const RunConfig& c) { return std::string(c.model.theta == ThetaGranularity::block ? "block" : "channel"); });
    add("model", "se_reduction",
        [](RunConfig& c, const std::string& v) { c.model.se_reduction = parse_int<std::size_t>(v); },
        [](const RunConfig& c) { return std::to_string(c.model.se_reduction); });
    add("model", "pdog_levels",
        [](RunConfig& c, const std::string& v) { c.model.pdog_levels = parse_int<std::size_t>(v); },
        [](const RunConfig& c) { return std::to_string(c.model.pdog_levels); });
    add("model", "pdog_init",
        [](RunConfig& c, const std::string& v) {
          if (v == "gaussian")
            c.model.pdog_init = PDoGInit::gaussian;
          else if (v == "random")
            c.model.pdog_init = PDoGInit::random;
          else
            throw std::invalid_argument("expected gaussian or random, got '" + v + "'");
        },
        [](const RunConfig& c) { return std::string(c.model.pdog_init == PDoGInit::random ? "random" : "gaussian"); });
    add("model", "pnl_norm", [](RunConfig& c, const std::string& v) { c.model.pnl_norm = parse_double(v); },
        [](const RunConfig& c) { return fmt(c.model.pnl_norm); });

    add("train", "epochs", [](RunConfig& c, const std::string& v) { c.train.epochs = parse_int<std::size_t>(v); },
        [](const RunConfig& c) { return std::to_string(c.train.epochs); });
    add("train", "batch", [](RunConfig& c, const std::string& v) { c.train.batch = parse_int<std::size_t>(v); },
        [](const RunConfig& c) { return std::to_string(c.train.batch); });
    add("train", "lr", [](RunConfig& c, const std::string& v) { c.train.lr = parse_double(v); },
        [](const RunConfig& c) { return fmt(c.train.lr); });
    add("train", "milestones",
        [](RunConfig& c, const std::string& v) { c.train.milestones = parse_int_list<std::size_t>(v); },
        [](const RunConfig& c) { return join_num(c.train.milestones); });
    add("train", "lr_decay", [](RunConfig& c, const std::string& v) { c.train.decay_factor = parse_double(v); },
        [](const RunConfig& c) { return fmt(c.train.decay_factor); });
    add("train", "momentum", [](RunConfig& c, const std::string& v) { c.train.momentum = parse_double(v); },
        [](const RunConfig& c) { return fmt(c.train.momentum); });
    add("train", "weight_decay", [](RunConfig& c, const std::string& v) { c.train.weight_decay = parse_double(v); },
        [](const RunConfig& c) { return fmt(c.train.weight_decay); });
    add("train", "adversarial", [](RunConfig& c, const std::string& v) { c.train.adversarial = parse_adv_mode(v); },
        [](const RunConfig& c) { return to_string(c.train.adversarial); });
    add("train", "adv_eps", [](RunConfig& c, const std::string& v) { c.train.adv_eps = parse_double(v); },
        [](const RunConfig& c) { return fmt(c.train.adv_eps); });
    add("train", "mixed", [](RunConfig& c, const std::string& v) { c.train.mixed = parse_bool(v); },
        [](const RunConfig& c) { return fmt(c.train.mixed); });
    add("train", "augment", [](RunConfig& c, const std::string& v) { c.train.augment = parse_bool(v); },
        [](const RunConfig& c) { return fmt(c.train.augment); });
    add("train", "verify_constraints",
        [](RunConfig& c, const std::string& v) { c.train.verify_constraints = parse_bool(v); },
        [](const RunConfig& c) { return fmt(c.train.verify_constraints); });
    add("train", "eval_limit", [](RunConfig& c, const std::string& v) { c.train.eval_limit = parse_int<std::size_t>(v); },
        [](const RunConfig& c) { return std::to_string(c.train.eval_limit); });

    add("attack", "family", [](RunConfig& c, const std::string& v) { c.attack.family = parse_attack_family(v); },
        [](const RunConfig& c) { return to_string(c.attack.family); });
    add("attack", "eps", [](RunConfig& c, const std::string& v) { c.attack.eps = parse_double(v); },
        [](const RunConfig& c) { return fmt(c.attack.eps); });
    add("attack", "alpha", [](RunConfig& c, const std::string& v) { set_alpha(c.attack, v); },
        [](const RunConfig& c) { return get_alpha(c.attack); });
    add("attack", "iters", [](RunConfig& c, const std::string& v) { c.attack.iters = parse_int<int>(v); },
        [](const RunConfig& c) { return std::to_string(c.attack.iters); });
    add("attack", "start", [](RunConfig& c, const std::string& v) { c.attack.start = parse_start(v); },
        [](const RunConfig& c) { return to_string(c.attack.start); });
    add("attack", "labels", [](RunConfig& c, const std::string& v) { c.attack.labels = parse_labels(v); },
        [](const RunConfig& c) { return to_string(c.attack.labels); });

    add("data", "source", [](RunConfig& c, const std::string& v) { c.data.source = parse_source(v); },
        [](const RunConfig& c) { return to_string(c.data.source); });
    add("data", "path", [](RunConfig& c, const std::string& v) { c.data.path = v; },
        [](const RunConfig& c) { return c.data.path; });
    add("data", "train_file", [](RunConfig& c, const std::string& v) { c.data.train_file = v; },
        [](const RunConfig& c) { return c.data.train_file; });
    add("data", "test_file", [](RunConfig& c, const std::string& v) { c.data.test_file = v; },
        [](const RunConfig& c) { return c.data.test_file; });
    add("data", "classes", [](RunConfig& c, const std::string& v) { c.data.classes = parse_int<std::size_t>(v); },
        [](const RunConfig& c) { return std::to_string(c.data.classes); });
    add("data", "subset", [](RunConfig& c, const std::string& v) { c.data.subset = parse_int<std::size_t>(v); },
        [](const RunConfig& c) { return std::to_string(c.data.subset); });
    add("data", "test_limit", [](RunConfig& c, const std::string& v) { c.data.test_limit = parse_int<std::size_t>(v); },
        [](const RunConfig& c) { return std::to_string(c.data.test_limit); });
    add("data", "synth_train",
        [](RunConfig& c, const std::string& v) { c.data.synth_train = parse_int<std::size_t>(v); },
        [](const RunConfig& c) { return std::to_string(c.data.synth_train); });
    add("data", "synth_test", [](RunConfig& c, const std::string& v) { c.data.synth_test = parse_int<std::size_t>(v); },
        [](const RunConfig& c) { return std::to_string(c.data.synth_test); });
    add("data", "synth_noise", [](RunConfig& c, const std::string& v) { c.data.synth_noise = parse_double(v); },
        [](const RunConfig& c) { return fmt(c.data.synth_noise); });
    add("data", "image_size", [](RunConfig& c, const std::string& v) { c.data.image_size = parse_int<std::size_t>(v); },
        [](const RunConfig& c) { return std::to_string(c.data.image_size); });

    add("analysis", "samples", [](RunConfig& c, const std::string& v) { c.analysis.samples = parse_int<std::size_t>(v); },
        [](const RunConfig& c) { return std::to_string(c.analysis.samples); });
    add("analysis", "family",
        [](RunConfig& c, const std::string& v) { c.analysis.attack.family = parse_attack_family(v); },
        [](const RunConfig& c) { return to_string(c.analysis.attack.family); });
    add("analysis", "eps", [](RunConfig& c, const std::string& v) { c.analysis.attack.eps = parse_double(v); },
        [](const RunConfig& c) { return fmt(c.analysis.attack.eps); });
    add("analysis", "alpha", [](RunConfig& c, const std::string& v) { set_alpha(c.analysis.attack, v); },
        [](const RunConfig& c) { return get_alpha(c.analysis.attack); });
    add("analysis", "iters", [](RunConfig& c, const std::string& v) { c.analysis.attack.iters = parse_int<int>(v); },
        [](const RunConfig& c) { return std::to_string(c.analysis.attack.iters); });
    add("analysis", "sweep_eps",
        [](RunConfig& c, const std::string& v) { c.analysis.sweep_eps = parse_double_list(v); },
        [](const RunConfig& c) { return join_num(c.analysis.sweep_eps); });
    add("analysis", "sweep_families",
        [](RunConfig& c, const std::string& v) {
          c.analysis.sweep_families.clear();
          for (const auto& f : split_list(v)) c.analysis.sweep_families.push_back(parse_attack_family(f));
        },
        [](const RunConfig& c) {
          std::string out;
          for (std::size_t i = 0; i < c.analysis.sweep_families.size(); ++i)
            out += (i ? "," : "") + to_string(c.analysis.sweep_families[i]);
          return out;
        });
    add("analysis", "curve_iters",
        [](RunConfig& c, const std::string& v) { c.analysis.curve_iters = parse_int_list<int>(v); },
        [](const RunConfig& c) { return join_num(c.analysis.curve_iters); });
    add("analysis", "response_taps",
        [](RunConfig& c, const std::string& v) { c.analysis.response_taps = parse_int_list<std::size_t>(v); },
        [](const RunConfig& c) { return join_num(c.analysis.response_taps); });
    add("analysis", "response_images",
        [](RunConfig& c, const std::string& v) { c.analysis.response_images = parse_int<std::size_t>(v); },
        [](const RunConfig& c) { return std::to_string(c.analysis.response_images); });

    add("run", "seed", [](RunConfig& c, const std::string& v) { c.run.seed = parse_int<std::uint64_t>(v); },
        [](const RunConfig& c) { return std::to_string(c.run.seed); });
    add("run", "threads", [](RunConfig& c, const std::string& v) { c.run.threads = parse_int<std::size_t>(v); },
        [](const RunConfig& c) { return std::to_string(c.run.threads); });
    add("run", "out", [](RunConfig& c, const std::string& v) { c.run.out = v; },
        [](const RunConfig& c) { return c.run.out; });
    add("run", "precision", [](RunConfig& c, const std::string& v) { c.run.precision = parse_precision(v); },
        [](const RunConfig& c) { return to_string(c.run.precision); });
    add("run", "checkpoint", [](RunConfig& c, const std::string& v) { c.run.checkpoint = v; },
        [](const RunConfig& c) { return c.run.checkpoint; });
    add("run", "export_examples",
        [](RunConfig& c, const std::string& v) { c.run.export_examples = parse_int<std::size_t>(v); },
        [](const RunConfig& c) { return std::to_string(c.run.export_examples); });
    return e;
  }();
  return table;
}

inline const std::vector<std::string>& sections() {
  static const std::vector<std::string> s{"model", "train", "attack", "data", "analysis", "run"};
  return s;
}

}  // namespace config_detail

inline std::size_t edit_distance(const std::string& a, const std::string& b) {
  std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
  for (std::size_t j = 0; j <= b.size(); ++j) prev[j] = j;
  for (std::size_t i = 1; i <= a.size(); ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j)
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1)});
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

inline std::string nearest(const std::string& word, const std::vector<std::string>& candidates) {
  std::string best;
  std::size_t best_d = std::numeric_limits<std::size_t>::max();
  for (const auto& c : candidates) {
    const auto d = edit_distance(word, c);
    if (d < best_d) best_d = d, best = c;
  }
  return best;
}

inline std::vector<std::string> config_keys(const std::string& section) {
  std::vector<std::string> out;
  for (const auto& e : config_detail::entries())
    if (e.section == section) out.push_back(e.key);
  return out;
}

/// Raw "section.key" -> value assignments, with where each came from.
class ConfigValues {
 public:
  struct Value {
    std::string text;
    std::string origin;
  };

  /// Parses the sectioned key = value dialect. '#' and ';' start comments;
  /// every key must sit under one of the known section headers.
  static ConfigValues parse(std::istream& in, const std::string& source = "<config>") {
    ConfigValues cv;
    std::string line, section;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      const std::string where = source + ":" + std::to_string(lineno);
      const auto hash = line.find_first_of("#;");
      if (hash != std::string::npos) line.erase(hash);
      line = config_detail::trim(line);
      if (line.empty()) continue;
      if (line.front() == '[') {
        if (line.back() != ']') throw ConfigError(where + ": malformed section header '" + line + "'");
        section = config_detail::trim(line.substr(1, line.size() - 2));
        const auto& known = config_detail::sections();
        if (std::find(known.begin(), known.end(), section) == known.end())
          throw ConfigError(where + ": unknown section [" + section + "]; did you mean [" + nearest(section, known) +
                            "]?");
        continue;
      }
      const auto eq = line.find('=');
      if (eq == std::string::npos) throw ConfigError(where + ": expected 'key = value', got '" + line + "'");
      if (section.empty()) throw ConfigError(where + ": key outside of any section");
      cv.assign(section, config_detail::trim(line.substr(0, eq)), config_detail::trim(line.substr(eq + 1)), where);
    }
    return cv;
  }

  static ConfigValues parse_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file " + path.string());
    return parse(in, path.string());
  }

  static ConfigValues parse_string(const std::string& text) {
    std::istringstream in(text);
    return parse(in);
  }

  /// Applies a "section.key=value" override.
  void set(const std::string& assignment) {
    const auto eq = assignment.find('=');
    const auto dot = assignment.find('.');
    if (eq == std::string::npos || dot == std::string::npos || dot > eq)
      throw ConfigError("override '" + assignment + "' is not of the form section.key=value");
    const std::string section = config_detail::trim(assignment.substr(0, dot));
    const auto& known = config_detail::sections();
    if (std::find(known.begin(), known.end(), section) == known.end())
      throw ConfigError("override '" + assignment + "': unknown section '" + section + "'; did you mean '" +
                        nearest(section, known) + "'?");
    assign(section, config_detail::trim(assignment.substr(dot + 1, eq - dot - 1)),
           config_detail::trim(assignment.substr(eq + 1)), "--set " + assignment);
  }

  const std::map<std::string, Value>& values() const { return values_; }

  RunConfig resolve() const {
    RunConfig c;
    for (const auto& e : config_detail::entries()) {
      auto it = values_.find(e.section + "." + e.key);
      if (it == values_.end()) continue;
      try {
        e.set(c, it->second.text);
      } catch (const std::exception& ex) {
        throw ConfigError(it->second.origin + ": invalid value for " + e.section + "." + e.key + ": " + ex.what());
      }
    }
    return c;
  }

 private:
  void assign(const std::string& section, const std::string& key, const std::string& value, const std::string& where) {
    const auto keys = config_keys(section);
    if (std::find(keys.begin(), keys.end(), key) == keys.end())
      throw ConfigError(where + ": unknown key '" + key + "' in [" + section + "]; did you mean '" +
                        nearest(key, keys) + "'?");
    values_[section + "." + key] = {value, where};
  }

  std::map<std::string, Value> values_;
};

/// Full effective configuration in the same dialect; parsing it back yields
/// an identical RunConfig.
inline std::string render_config(const RunConfig& c) {
  std::ostringstream os;
  std::string section;
  for (const auto& e : config_detail::entries()) {
    if (e.section != section) {
      os << (section.empty() ? "" : "\n") << "[" << e.section << "]\n";
      section = e.section;
    }
    os << e.key << " = " << e.get(c) << "\n";
  }
  return os.str();
}

struct DataSplits {
  Dataset train;
  Dataset test;
};

/// Loads train and test splits as described by [data]. Synthetic splits
/// use distinct seeds derived from `seed`.
inline DataSplits load_datasets(const DataSettings& d, std::uint64_t seed) {
  DataSplits s;
  switch (d.source) {
    case DataSource::synth:
      s.train = synth_shapes(d.synth_train, seed, d.synth_noise, d.image_size);
      s.test = synth_shapes(d.synth_test, seed + 1000003, d.synth_noise, d.image_size);
      break;
    case DataSource::cifar10:
      if (d.path.empty()) throw ConfigError("data.path must name the CIFAR-10 binary directory");
      s.train = load_cifar10(cifar10_files(d.path, true), "train");
      s.test = load_cifar10(cifar10_files(d.path, false), "test");
      break;
    case DataSource::records:
      if (d.train_file.empty() || d.test_file.empty())
        throw ConfigError("data.train_file and data.test_file are required for source = records");
      s.train = read_records(d.train_file, 3, d.image_size, d.image_size, d.classes);
      s.test = read_records(d.test_file, 3, d.image_size, d.image_size, d.classes);
      break;
  }
  if (d.subset) s.train = subset(s.train, d.subset, seed);
  if (d.test_limit && d.test_limit < s.test.size()) {
    std::vector<std::size_t> idx(d.test_limit);
    std::iota(idx.begin(), idx.end(), 0);
    s.test = select(s.test, idx);
  }
  return s;
}

inline RunConfig parse_config(const std::filesystem::path& path) { return ConfigValues::parse_file(path).resolve(); }

}  // namespace evp
