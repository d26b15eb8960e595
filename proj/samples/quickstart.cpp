// Trains a small network on synthetic shapes, attacks it and prints the
// per-block error amplification.
#include <iostream>

#include "evp/evp.hpp"

using namespace evp;

int main(int argc, char** argv) {
  const Family family = argc > 1 ? parse_family(argv[1]) : Family::evpnet;
  auto train_set = synth_shapes(600, 1, 0.1, 16);
  auto test_set = synth_shapes(200, 2, 0.1, 16);

  auto cfg = ModelConfig::for_family(family);
  cfg.depth = 11;
  cfg.widths = {8, 16, 32};
  cfg.image_size = 16;
  cfg.classes = 2;
  ModelGraph<float> model(cfg);
  fit_input_normalization(model, train_set);

  TrainSpec spec;
  spec.epochs = 8;
  spec.batch = 32;
  spec.milestones = {6};
  train(model, train_set, test_set, spec, [](const EpochLog& r) {
    std::cout << "epoch " << r.epoch << "  loss " << r.loss << "  test accuracy " << r.clean_acc << "\n";
  });

  auto rows = evaluate_robustness<float>(model, test_set, {AttackSpec::fgsm(8), AttackSpec::pgd(8, 10, 2)});
  std::cout << "\n" << eval_rows_csv(rows) << "\n";

  auto trace = error_amplification(model, test_set, AttackSpec::pgd(8, 10, 2), {.samples = 32});
  std::cout << trace.to_csv();
}
