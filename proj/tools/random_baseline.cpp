// Brute-force reference for the constrained desk search: best surrogate
// reward over uniformly drawn random architectures.

#include <iostream>

#include <CLI11.hpp>

#include "morphnas/error.hpp"
#include "morphnas/reinforce.hpp"

using namespace morphnas;
using nlohmann::json;

int main(int argc, char** argv) {
  CLI::App app{"random-sampling baseline under a parameter budget"};
  int samples = 10000;
  std::uint64_t seed = 2024;
  double max_params = 1e5;
  std::string mode_name = "layer_net";
  std::string out;
  app.add_option("--samples", samples)->capture_default_str();
  app.add_option("--seed", seed)->capture_default_str();
  app.add_option("--max-params", max_params)->capture_default_str();
  app.add_option("--mode", mode_name)->capture_default_str();
  app.add_option("--out", out, "write the JSON summary here instead of stdout");
  CLI11_PARSE(app, argc, argv);

  const auto mode = parse_arch_mode(mode_name);
  if (!mode) {
    std::cerr << "unknown mode " << mode_name << "\n";
    return 2;
  }
  SearchSettings s;
  s.mode = *mode;
  ConstraintSpec size;
  size.metric = Metric::model_size;
  size.upper = max_params;
  s.constraints = {size};
  // depth drawn over the whole legal range, not just the search's start range
  RandomLimits limits;
  limits.min_depth = 1;
  limits.max_depth = *mode == ArchMode::cell_net ? s.tables.domains.max_branches : s.tables.domains.max_layers;

  SurrogateEvaluator ev;
  std::optional<Candidate> best, best_satisfying;
  int satisfied = 0;
  for (int i = 0; i < samples; ++i) {
    const auto arch = random_architecture(derive_seed(seed, "random-baseline", {static_cast<std::uint64_t>(i)}), *mode, limits);
    Candidate c = evaluate_candidate(arch, "r" + std::to_string(i), ev, s);
    if (c.failed) continue;
    if (c.satisfied) {
      ++satisfied;
      if (!best_satisfying || better_candidate(c, *best_satisfying)) best_satisfying = c;
    }
    if (!best || better_candidate(c, *best)) best = c;
  }
  if (!best) {
    std::cerr << "no architecture could be evaluated\n";
    return 1;
  }
  json j = {{"samples", samples},
            {"seed", seed},
            {"mode", mode_name},
            {"max_params", max_params},
            {"input", to_string(s.train.input)},
            {"classes", s.train.classes},
            {"depth_range", {limits.min_depth, limits.max_depth}},
            {"satisfied", satisfied},
            {"best_reward", best->reward},
            {"best_params", best->usage.params},
            {"best_architecture", to_json(best->arch)},
            {"best_satisfying_reward", best_satisfying ? json(best_satisfying->reward) : json(nullptr)}};
  if (out.empty()) {
    std::cout << j.dump(2) << '\n';
  } else {
    write_file_atomic(out, j.dump(2) + "\n");
  }
  return 0;
}
