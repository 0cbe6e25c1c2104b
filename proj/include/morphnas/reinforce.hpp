#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "morphnas/actions.hpp"
#include "morphnas/evaluation.hpp"
#include "morphnas/policy.hpp"
#include "morphnas/resources.hpp"

namespace morphnas {

// ---- Trajectories ------------------------------------------------------------------

/// One evaluated architecture of the search.
struct Candidate {
  int episode = 0;
  int branch = 0;
  int step = 0;
  ActionBundle action;  // the bundle that produced `arch`
  Architecture arch;
  std::string serialized;  // canonical text, the identity used for dedup
  double performance = 0.0;
  ResourceUsage usage;
  std::vector<double> violations;
  bool satisfied = false;  // every constraint holds exactly
  double reward = 0.0;
  bool failed = false;  // evaluator error; reward forced to 0
  std::string error;
  nlohmann::json metrics = nlohmann::json::object();  // as reported by the evaluator

  std::string id() const;  // "e{episode}-b{branch}-s{step}"
};

struct StepRecord {
  Architecture arch_before;
  ActionBundle bundle;
  double logprob = 0.0;
  std::uint64_t sample_seed = 0;
  Candidate candidate;
};

struct Trajectory {
  int branch = 0;
  std::vector<StepRecord> steps;

  std::vector<double> rewards() const;
};

/// R_t = sum_{t' >= t} r_t' (no discounting).
std::vector<double> returns_to_go(const std::vector<double>& rewards);

// ---- Baseline and gradient ---------------------------------------------------------

/// Exponential moving average of batch-mean returns. The first update sets
/// b to the batch mean.
struct BaselineState {
  double value = 0.0;
  double decay = 0.95;
  bool initialized = false;

  nlohmann::json to_json() const;
  static BaselineState from_json(const nlohmann::json& j);
  friend bool operator==(const BaselineState&, const BaselineState&) = default;
};

BaselineState update_baseline(BaselineState state, const std::vector<Trajectory>& trajs);

/// g = (1/N) sum_n sum_t grad log pi(a_tn | X_tn) (R_tn - b).
NamedTensors policy_gradient(const PolicyParams& params, const std::vector<Trajectory>& trajs, double baseline,
                             const ActionTables& tables);

/// (1/N) sum_n sum_t log pi(a_tn | X_tn) (R_tn - b); g is its gradient.
double policy_objective(const PolicyParams& params, const std::vector<Trajectory>& trajs, double baseline,
                        const ActionTables& tables);

// ---- Optimizer ---------------------------------------------------------------------

struct AdamConfig {
  double lr = 6e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  friend bool operator==(const AdamConfig&, const AdamConfig&) = default;
};

struct OptimizerState {
  AdamConfig config;
  NamedTensors m;
  NamedTensors v;
  long step = 0;

  static OptimizerState for_params(const NamedTensors& params, AdamConfig config = {});
  void save(const std::filesystem::path& path) const;
  static OptimizerState load(const std::filesystem::path& path);
};

/// Bias-corrected Adam step that ascends the objective: the update is
/// applied to -grad. Throws NumericalError on a non-finite gradient.
void optimizer_step(NamedTensors& params, const NamedTensors& grad, OptimizerState& opt);

// ---- Episodes ----------------------------------------------------------------------

struct EpisodeConfig {
  int branches = 8;
  int steps = 10;
  int episodes = 15;
  int topk = 8;
  double learning_rate = 6e-4;
  std::uint64_t seed = 0;

  /// T = 10 for layer search, 5 for cell search.
  static EpisodeConfig defaults(ArchMode mode);
  void check(const std::string& label = "search") const;
};

/// Everything the search loop needs besides the evaluator.
struct SearchSettings {
  ArchMode mode = ArchMode::layer_net;
  ActionTables tables;
  EpisodeConfig episode;
  ConstraintSet constraints;
  TrainConfig train;
  PolicyConfig policy;
  double baseline_decay = 0.95;
  int parallelism = 0;  // 0 = one evaluation slot per branch
  RandomLimits initial;  // limits of the first-episode random architecture

  /// Params/FLOPs/intensity are estimated on train.input with a
  /// train.classes-way classifier head.
  ResourceUsage usage_of(const Architecture& arch) const;
};

/// Evaluates `arch` and scores it with P * prod V.
Candidate evaluate_candidate(const Architecture& arch, const std::string& id, Evaluator& evaluator,
                             const SearchSettings& settings);

/// k best distinct candidates (reward desc, params asc, serialization asc),
/// repeated cyclically to `n` entries.
std::vector<Architecture> select_topk(const std::vector<Candidate>& pool, int k, int n);

/// Ordering used for "best": reward desc, then params asc, then serialization.
bool better_candidate(const Candidate& a, const Candidate& b);

struct EpisodeResult {
  std::vector<Trajectory> trajectories;
  std::vector<Candidate> candidates;  // (step, branch) order
};

/// N branches from their seeds, T sampled bundles each. Candidates of step t
/// are evaluated (up to `parallelism` at once) before step t+1 starts, and
/// evaluator.end_step() runs between steps.
EpisodeResult run_episode(const PolicyParams& params, const std::vector<Architecture>& seeds, Evaluator& evaluator,
                          const SearchSettings& settings, int episode);

// ---- Search loop -------------------------------------------------------------------

/// Resumable state between episodes.
struct SearchState {
  int next_episode = 0;
  PolicyParams policy;
  OptimizerState optimizer;
  BaselineState baseline;
  std::vector<Architecture> seeds;
  std::optional<Candidate> best;      // best non-failed candidate so far
  std::optional<Candidate> selected;  // best non-failed candidate that satisfies the constraints
};

SearchState initial_state(const SearchSettings& settings);

/// Callbacks from run_search: every candidate as it is scored (in
/// deterministic order), and the state after each completed episode.
struct SearchHooks {
  std::function<void(const Candidate&)> on_candidate;
  std::function<void(const SearchState&)> on_episode_end;
};

/// Runs episode state.next_episode (run_episode, update_baseline,
/// policy_gradient, optimizer_step, select_topk) and advances the state.
EpisodeResult search_episode(SearchState& state, Evaluator& evaluator, const SearchSettings& settings,
                             const SearchHooks& hooks = {});

struct SearchResult {
  Candidate best;  // highest reward
  /// The delivered model: highest-reward candidate among those meeting every
  /// constraint exactly; empty when none does.
  std::optional<Candidate> selected;
  std::vector<Candidate> history;
  SearchState state;
};

/// Runs the remaining episodes of `state` (a fresh search by default).
SearchResult run_search(const SearchSettings& settings, Evaluator& evaluator, const SearchHooks& hooks = {},
                        std::optional<SearchState> resume = std::nullopt);

}  // namespace morphnas
