#include <CLI11.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "evp/evp.hpp"

namespace fs = std::filesystem;
using namespace evp;

namespace {

struct Flags {
  std::string config;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::optional<std::size_t> threads;
  std::optional<std::string> precision;

  // subcommand flags, mirrored onto config keys
  std::optional<std::string> family, start, labels, adversarial, model;
  std::optional<double> eps, alpha;
  std::optional<int> iters;
  std::optional<std::size_t> epochs, samples, export_examples;
  std::optional<std::string> checkpoint;
  bool full = false;
  std::size_t seeds = 20;
};

RunConfig resolve(const Flags& f) {
  auto values = f.config.empty() ? ConfigValues{} : ConfigValues::parse_file(f.config);
  for (const auto& s : f.sets) values.set(s);
  auto set = [&](const std::string& key, const auto& v) {
    if (!v) return;
    std::ostringstream os;
    if constexpr (std::is_same_v<std::decay_t<decltype(*v)>, double>)
      os << config_detail::fmt(*v);
    else
      os << *v;
    values.set(key + "=" + os.str());
  };
  set("run.seed", f.seed);
  set("run.out", f.out);
  set("run.threads", f.threads);
  set("run.precision", f.precision);
  set("run.checkpoint", f.checkpoint);
  set("run.export_examples", f.export_examples);
  set("model.family", f.model);
  set("train.epochs", f.epochs);
  set("train.adversarial", f.adversarial);
  set("attack.family", f.family);
  set("attack.eps", f.eps);
  set("attack.alpha", f.alpha);
  set("attack.iters", f.iters);
  set("attack.start", f.start);
  set("attack.labels", f.labels);
  set("analysis.samples", f.samples);
  auto cfg = values.resolve();
  cfg.model.seed = cfg.run.seed;
  cfg.train.seed = cfg.run.seed;
  cfg.model.validate();
  cfg.train.validate();
  cfg.attack.validate();
  cfg.analysis.attack.validate();
  if (cfg.run.threads == 0) throw ConfigError("run.threads must be at least 1");
  return cfg;
}

fs::path prepare_out(const RunConfig& cfg) {
  fs::path out = cfg.run.out;
  fs::create_directories(out);
  write_text(out / "run-config.resolved", render_config(cfg));
  return out;
}

ModelConfig model_for(const RunConfig& cfg, const Dataset& ds) {
  ModelConfig m = cfg.model;
  m.channels = ds.channels;
  m.image_size = ds.width;
  m.classes = ds.classes;
  m.input_mean.assign(ds.channels, 0.5);
  m.input_std.assign(ds.channels, 0.25);
  if (ds.height != ds.width) throw DimensionError("only square images are supported");
  return m;
}

fs::path checkpoint_base(const RunConfig& cfg) {
  return cfg.run.checkpoint.empty() ? fs::path(cfg.run.out) / "model" : fs::path(cfg.run.checkpoint);
}

template <typename T>
ModelGraph<T> load_model(const RunConfig& cfg, const Dataset& ds) {
  ModelGraph<T> m(model_for(cfg, ds));
  m.load(checkpoint_base(cfg));
  return m;
}

EvalOptions eval_options(const RunConfig& cfg) {
  EvalOptions o;
  o.threads = cfg.run.threads;
  o.seed = cfg.run.seed;
  return o;
}

template <typename T>
int cmd_train(const RunConfig& cfg) {
  const auto out = prepare_out(cfg);
  auto data = load_datasets(cfg.data, cfg.run.seed);
  ModelGraph<T> model(model_for(cfg, data.train));
  fit_input_normalization(model, data.train);
  std::cout << "training " << to_string(cfg.model.family) << " (" << model.parameter_count() << " parameters) on "
            << data.train.size() << " examples, evaluating on " << data.test.size() << "\n";
  std::ofstream log(out / "train_log.csv");
  log << TrainLog::header << "\n";
  std::cout << TrainLog::header << "\n";
  train(model, data.train, data.test, cfg.train, [&](const EpochLog& r) {
    TrainLog one{{r}};
    const auto csv = one.to_csv();
    const auto row = csv.substr(csv.find('\n') + 1);
    log << row << std::flush;
    std::cout << row << std::flush;
  });
  model.save(out / "model");
  std::cout << "checkpoint written to " << (out / "model").string() << ".evpt\n";
  return 0;
}

template <typename T>
int cmd_eval(const RunConfig& cfg) {
  const auto out = prepare_out(cfg);
  auto data = load_datasets(cfg.data, cfg.run.seed);
  auto model = load_model<T>(cfg, data.test);
  auto rows = evaluate_robustness<T>(model, data.test, {}, eval_options(cfg));
  write_text(out / "eval.csv", eval_rows_csv(rows));
  std::cout << "clean_accuracy=" << rows[0].accuracy << "\n";
  return 0;
}

template <typename T>
int cmd_attack(const RunConfig& cfg) {
  const auto out = prepare_out(cfg);
  auto data = load_datasets(cfg.data, cfg.run.seed);
  auto model = load_model<T>(cfg, data.test);
  auto rows = evaluate_robustness<T>(model, data.test, {cfg.attack}, eval_options(cfg));
  write_text(out / "attack.csv", eval_rows_csv(rows));
  std::cout << "clean_accuracy=" << rows[0].accuracy << "\n"
            << rows[1].attack << " eps=" << rows[1].eps << " accuracy=" << rows[1].accuracy << "\n";
  if (cfg.run.export_examples) {
    const std::size_t n = std::min(cfg.run.export_examples, data.test.size());
    auto b = make_batch<T>(data.test, 0, n);
    std::mt19937_64 rng(batch_seed(cfg.run.seed, 0));
    auto adv = generate_attack<T>(model, b.images, b.labels, cfg.attack, rng);
    export_adversarial<T>(out / "adversarial.evpt", adv, b.labels);
    std::cout << "exported " << n << " adversarial examples\n";
  }
  return 0;
}

template <typename T>
int cmd_analyze(const RunConfig& cfg) {
  const auto out = prepare_out(cfg);
  auto data = load_datasets(cfg.data, cfg.run.seed);
  auto model = load_model<T>(cfg, data.test);

  GammaOptions g;
  g.samples = std::min(cfg.analysis.samples, data.test.size());
  g.threads = cfg.run.threads;
  g.seed = cfg.run.seed;
  auto trace = error_amplification(model, data.test, cfg.analysis.attack, g);
  write_text(out / "gamma.csv", trace.to_csv());
  std::cout << "gamma (" << cfg.analysis.attack.name() << ", eps=" << cfg.analysis.attack.eps << ", " << g.samples
            << " samples)\n";
  for (std::size_t k = 0; k < trace.taps.size(); ++k)
    std::cout << "  " << trace.taps[k] << " " << trace.mean[k] << " +- " << trace.stddev[k] << "\n";

  SweepOptions s;
  s.eps = cfg.analysis.sweep_eps;
  s.families = cfg.analysis.sweep_families;
  s.curve_iters = cfg.analysis.curve_iters;
  s.curve_eps = cfg.analysis.attack.eps;
  s.pgd_step = cfg.analysis.attack.alpha.value_or(2.0);
  s.eval = eval_options(cfg);
  auto sweep = robustness_sweep(model, data.test, s);
  write_text(out / "sweep.csv", eval_rows_csv(sweep.grid));
  write_text(out / "pgd_curve.csv", eval_rows_csv(sweep.curve));
  std::cout << "sweep: " << sweep.grid.size() << " rows, pgd curve: " << sweep.curve.size() << " rows\n";

  const std::size_t images = std::min(cfg.analysis.response_images, data.test.size());
  for (std::size_t i = 0; i < images; ++i) {
    auto b = make_batch<T>(data.test, i, 1);
    std::mt19937_64 rng(batch_seed(cfg.run.seed, i));
    auto adv = generate_attack<T>(model, b.images, b.labels, cfg.analysis.attack, rng);
    for (auto tap : cfg.analysis.response_taps) {
      const auto stem = "response_" + std::to_string(i) + "_tap" + std::to_string(tap);
      response_map_export(model, b.images, tap, out / (stem + "_clean.pgm"));
      response_map_export(model, adv, tap, out / (stem + "_adv.pgm"));
    }
  }
  return 0;
}

template <typename T>
int cmd_export(const RunConfig& cfg) {
  const auto out = prepare_out(cfg);
  auto data = load_datasets(cfg.data, cfg.run.seed);
  write_records(data.test, out / "test.bin");
  std::cout << "wrote " << data.test.size() << " test records\n";
  if (!fs::exists(fs::path(checkpoint_base(cfg)).concat(".evpt"))) return 0;
  auto model = load_model<T>(cfg, data.test);
  Dataset adv = data.test;
  const std::size_t batch = 100;
  for (std::size_t begin = 0, b = 0; begin < adv.size(); begin += batch, ++b) {
    const std::size_t count = std::min(batch, adv.size() - begin);
    auto x = make_batch<T>(data.test, begin, count);
    std::mt19937_64 rng(batch_seed(cfg.run.seed, b));
    auto a = generate_attack<T>(model, x.images, x.labels, cfg.attack, rng);
    for (std::size_t j = 0; j < a.size(); ++j)
      adv.pixels[begin * adv.image_bytes() + j] =
          static_cast<std::uint8_t>(std::lround(std::clamp(static_cast<double>(a[j]), 0.0, 1.0) * 255.0));
  }
  write_records(adv, out / "adversarial.bin");
  std::cout << "wrote " << adv.size() << " adversarial records (" << cfg.attack.name() << ", eps=" << cfg.attack.eps
            << ")\n";
  return 0;
}

int cmd_selftest(const Flags& f) {
  std::vector<selftest::SuiteReport> reports;
  reports.push_back(selftest::gradient_suite(f.seeds));
  reports.push_back(selftest::identity_suite());
  reports.push_back(selftest::pnl_suite());
  reports.push_back(selftest::attack_constraint_suite());
  if (f.full) reports.push_back(selftest::ablation_suite());
  bool ok = true;
  for (const auto& r : reports) {
    std::cout << r.summary() << r.suite << ": " << (r.passed() ? "passed" : "FAILED") << " in " << r.seconds
              << " s\n";
    ok = ok && r.passed();
  }
  std::cout << (ok ? "selftest passed\n" : "selftest FAILED\n");
  return ok ? 0 : 1;
}

template <typename T>
int dispatch(const std::string& cmd, const RunConfig& cfg) {
  if (cmd == "train") return cmd_train<T>(cfg);
  if (cmd == "eval") return cmd_eval<T>(cfg);
  if (cmd == "attack") return cmd_attack<T>(cfg);
  if (cmd == "analyze") return cmd_analyze<T>(cfg);
  if (cmd == "export") return cmd_export<T>(cfg);
  throw std::logic_error("unhandled subcommand " + cmd);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Extreme-value-preserving networks: training, attacks and analysis"};
  app.require_subcommand(1);
  Flags f;
  app.add_option("--config", f.config, "Configuration file")->check(CLI::ExistingFile);
  app.add_option("--set", f.sets, "Override a configuration key (section.key=value), repeatable");
  app.add_option("--seed", f.seed, "Random seed");
  app.add_option("--out", f.out, "Output directory");
  app.add_option("--threads", f.threads, "Worker threads for evaluation");
  app.add_option("--precision", f.precision, "Scalar type")->check(CLI::IsMember({"f32", "f64"}));

  auto* train = app.add_subcommand("train", "Train a model and write a checkpoint plus a per-epoch log");
  train->add_option("--model", f.model, "Model family (se-resnet or evpnet)");
  train->add_option("--epochs", f.epochs, "Number of epochs");
  train->add_option("--adversarial", f.adversarial, "none, fgsm or pgd");

  auto* eval = app.add_subcommand("eval", "Clean test accuracy of a checkpoint");
  auto* attack = app.add_subcommand("attack", "Accuracy under one white-box attack");
  attack->add_option("--family", f.family, "fgsm, rfgsm or pgd");
  attack->add_option("--eps", f.eps, "Radius in pixels (1/255)");
  attack->add_option("--alpha", f.alpha, "PGD step in pixels");
  attack->add_option("--iters", f.iters, "PGD iterations");
  attack->add_option("--start", f.start, "clean or random");
  attack->add_option("--labels", f.labels, "truth or predicted");
  attack->add_option("--export", f.export_examples, "Export this many adversarial examples");

  auto* analyze = app.add_subcommand("analyze", "Error amplification, robustness sweep and response maps");
  analyze->add_option("--samples", f.samples, "Number of sampled test images");

  auto* exp = app.add_subcommand("export", "Write the test split (and its adversarial version) as raw records");
  auto* self = app.add_subcommand("selftest", "Gradient checks and identity properties");
  self->add_flag("--full", f.full, "Also build and step all eight component combinations");
  self->add_option("--seeds", f.seeds, "Seeds per gradient check");

  for (auto* sub : {train, eval, attack, analyze, exp, self}) sub->fallthrough();
  for (auto* sub : {eval, attack, analyze, exp}) sub->add_option("--checkpoint", f.checkpoint, "Checkpoint base path");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    std::cerr << app.help();
    return 2;
  }

  const std::string cmd = app.get_subcommands().front()->get_name();
  try {
    if (cmd == "selftest") return cmd_selftest(f);
    const auto cfg = resolve(f);
    return cfg.run.precision == Precision::f64 ? dispatch<double>(cmd, cfg) : dispatch<float>(cmd, cfg);
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
