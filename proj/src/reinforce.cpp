#include "morphnas/reinforce.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <thread>

#include <spdlog/spdlog.h>

#include "morphnas/error.hpp"

namespace morphnas {

using nlohmann::json;

std::string Candidate::id() const {
  return "e" + std::to_string(episode) + "-b" + std::to_string(branch) + "-s" + std::to_string(step);
}

std::vector<double> Trajectory::rewards() const {
  std::vector<double> r;
  r.reserve(steps.size());
  for (const auto& s : steps) r.push_back(s.candidate.reward);
  return r;
}

std::vector<double> returns_to_go(const std::vector<double>& rewards) {
  std::vector<double> out(rewards.size());
  double acc = 0.0;
  for (std::size_t i = rewards.size(); i-- > 0;) {
    acc += rewards[i];
    out[i] = acc;
  }
  return out;
}

// ---- baseline ----

json BaselineState::to_json() const { return {{"value", value}, {"decay", decay}, {"initialized", initialized}}; }

BaselineState BaselineState::from_json(const json& j) {
  try {
    BaselineState b;
    b.value = j.at("value").get<double>();
    b.decay = j.at("decay").get<double>();
    b.initialized = j.at("initialized").get<bool>();
    if (!std::isfinite(b.value)) throw ParseError("baseline value is not finite");
    return b;
  } catch (const json::exception& e) {
    throw ParseError(std::string("baseline: ") + e.what());
  }
}

BaselineState update_baseline(BaselineState state, const std::vector<Trajectory>& trajs) {
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& t : trajs)
    for (double r : returns_to_go(t.rewards())) {
      sum += r;
      ++n;
    }
  if (n == 0) return state;
  const double mean = sum / static_cast<double>(n);
  if (!state.initialized) {
    state.value = mean;
    state.initialized = true;
  } else {
    state.value = state.decay * state.value + (1.0 - state.decay) * mean;
  }
  return state;
}

// ---- gradient ----

NamedTensors policy_gradient(const PolicyParams& params, const std::vector<Trajectory>& trajs, double baseline,
                             const ActionTables& tables) {
  NamedTensors grad = zeros_like(params.tensors);
  if (trajs.empty()) return grad;
  const double inv_n = 1.0 / static_cast<double>(trajs.size());
  for (const auto& traj : trajs) {
    const auto R = returns_to_go(traj.rewards());
    for (std::size_t t = 0; t < traj.steps.size(); ++t) {
      const double adv = R[t] - baseline;
      if (adv == 0.0) continue;  // the term vanishes; skip the backward pass
      accumulate_grad_logprob(params, traj.steps[t].arch_before, traj.steps[t].bundle, tables, adv * inv_n, grad);
    }
  }
  return grad;
}

double policy_objective(const PolicyParams& params, const std::vector<Trajectory>& trajs, double baseline,
                        const ActionTables& tables) {
  if (trajs.empty()) return 0.0;
  double total = 0.0;
  for (const auto& traj : trajs) {
    const auto R = returns_to_go(traj.rewards());
    for (std::size_t t = 0; t < traj.steps.size(); ++t)
      total += logprob(params, traj.steps[t].arch_before, traj.steps[t].bundle, tables) * (R[t] - baseline);
  }
  return total / static_cast<double>(trajs.size());
}

// ---- Adam ----

OptimizerState OptimizerState::for_params(const NamedTensors& params, AdamConfig config) {
  OptimizerState s;
  s.config = config;
  s.m = zeros_like(params);
  s.v = zeros_like(params);
  return s;
}

void OptimizerState::save(const std::filesystem::path& path) const {
  NamedTensors all;
  for (const auto& [k, t] : m) all["m/" + k] = t;
  for (const auto& [k, t] : v) all["v/" + k] = t;
  json meta = {{"kind", "adam"},
               {"step", step},
               {"lr", config.lr},
               {"beta1", config.beta1},
               {"beta2", config.beta2},
               {"eps", config.eps}};
  save_tensor_file(path, all, meta);
}

OptimizerState OptimizerState::load(const std::filesystem::path& path) {
  auto file = load_tensor_file(path);
  if (file.meta.value("kind", "") != "adam") throw IoError(path.string() + " is not an optimizer checkpoint");
  OptimizerState s;
  try {
    s.step = file.meta.at("step").get<long>();
    s.config.lr = file.meta.at("lr").get<double>();
    s.config.beta1 = file.meta.at("beta1").get<double>();
    s.config.beta2 = file.meta.at("beta2").get<double>();
    s.config.eps = file.meta.at("eps").get<double>();
  } catch (const json::exception& e) {
    throw IoError(path.string() + ": " + e.what());
  }
  for (auto& [k, t] : file.tensors) {
    if (k.rfind("m/", 0) == 0)
      s.m[k.substr(2)] = std::move(t);
    else if (k.rfind("v/", 0) == 0)
      s.v[k.substr(2)] = std::move(t);
    else
      throw IoError(path.string() + ": unexpected tensor " + k);
  }
  return s;
}

void optimizer_step(NamedTensors& params, const NamedTensors& grad, OptimizerState& opt) {
  for (const auto& [name, p] : params) {
    auto g = grad.find(name);
    if (g == grad.end()) throw ShapeError("gradient has no tensor '" + name + "'");
    if (g->second.shape != p.shape)
      throw ShapeError("gradient '" + name + "' has shape " + shape_string(g->second.shape) + ", expected " +
                       shape_string(p.shape));
    for (std::size_t i = 0; i < g->second.size(); ++i)
      if (!std::isfinite(g->second[i]))
        throw NumericalError("non-finite policy gradient in '" + name + "' at flat index " + std::to_string(i) +
                             " (optimizer step " + std::to_string(opt.step + 1) + ")");
    if (!opt.m.count(name) || opt.m[name].shape != p.shape || !opt.v.count(name) || opt.v[name].shape != p.shape)
      throw ShapeError("optimizer moments do not match parameter '" + name + "'");
  }
  const auto& c = opt.config;
  ++opt.step;
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(opt.step));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(opt.step));
  for (auto& [name, p] : params) {
    const Tensor& g = grad.at(name);
    Tensor& m = opt.m[name];
    Tensor& v = opt.v[name];
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
      v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
      const double mh = m[i] / bc1, vh = v[i] / bc2;
      p[i] += c.lr * mh / (std::sqrt(vh) + c.eps);  // ascent
    }
  }
}

// ---- episodes ----

EpisodeConfig EpisodeConfig::defaults(ArchMode mode) {
  EpisodeConfig c;
  c.steps = mode == ArchMode::cell_net ? 5 : 10;
  return c;
}

void EpisodeConfig::check(const std::string& label) const {
  if (branches < 1) throw ConfigError("branches must be >= 1", label + ".branches");
  if (steps < 1) throw ConfigError("steps must be >= 1", label + ".steps");
  if (episodes < 1) throw ConfigError("episodes must be >= 1", label + ".episodes");
  if (topk < 1 || topk > branches * steps)
    throw ConfigError("topk must lie in [1, branches*steps] = [1, " + std::to_string(branches * steps) + "]",
                      label + ".topk");
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate))
    throw ConfigError("learning rate must be positive", label + ".learning_rate");
}

ResourceUsage SearchSettings::usage_of(const Architecture& arch) const {
  return estimate(arch, train.input, EstimateOptions{train.classes});
}

Candidate evaluate_candidate(const Architecture& arch, const std::string& id, Evaluator& evaluator,
                             const SearchSettings& settings) {
  Candidate c;
  c.arch = arch;
  c.serialized = serialize(arch, settings.tables.domains);
  try {
    c.usage = settings.usage_of(arch);
    c.violations = violations(c.usage, settings.constraints);
    c.satisfied = satisfies(c.usage, settings.constraints);
  } catch (const Error& e) {
    c.failed = true;
    c.error = std::string("resource estimate failed: ") + e.what();
    return c;
  }
  EvalRequest req{id, arch, settings.train, std::nullopt};
  if (!settings.constraints.empty()) {
    json cs = json::array();
    for (const auto& k : settings.constraints) cs.push_back(to_json(k));
    req.constraints_echo = cs;
  }
  EvalResult r = evaluator.evaluate(req);  // EvaluatorUnavailable ends the run
  c.metrics = r.metrics;
  if (!r.ok()) {
    c.failed = true;
    c.error = r.error_message.value_or("evaluation failed");
    return c;
  }
  c.performance = r.performance;
  c.reward = reward_from_violations(c.performance, c.violations);
  return c;
}

bool better_candidate(const Candidate& a, const Candidate& b) {
  if (a.reward != b.reward) return a.reward > b.reward;
  if (a.usage.params != b.usage.params) return a.usage.params < b.usage.params;
  return a.serialized < b.serialized;
}

std::vector<Architecture> select_topk(const std::vector<Candidate>& pool, int k, int n) {
  if (pool.empty()) throw DomainError("select_topk: empty candidate pool");
  const bool any_ok = std::any_of(pool.begin(), pool.end(), [](const Candidate& c) { return !c.failed; });
  std::vector<const Candidate*> ranked;
  for (const auto& c : pool)
    if (!any_ok || !c.failed) ranked.push_back(&c);
  std::sort(ranked.begin(), ranked.end(), [](const Candidate* a, const Candidate* b) { return better_candidate(*a, *b); });
  std::vector<const Candidate*> distinct;
  for (const Candidate* c : ranked) {
    if (static_cast<int>(distinct.size()) >= k) break;
    // equal serializations sort next to each other only when rewards tie, so scan
    bool seen = false;
    for (const Candidate* d : distinct)
      if (d->serialized == c->serialized) seen = true;
    if (!seen) distinct.push_back(c);
  }
  std::vector<Architecture> seeds;
  seeds.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) seeds.push_back(distinct[static_cast<std::size_t>(i) % distinct.size()]->arch);
  return seeds;
}

namespace {

/// Runs jobs[0..count) on up to `slots` threads; rethrows the first failure.
template <typename F>
void parallel_for(int count, int slots, F&& job) {
  slots = std::max(1, std::min(slots, count));
  if (slots == 1) {
    for (int i = 0; i < count; ++i) job(i);
    return;
  }
  std::atomic<int> next{0};
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(count));
  std::vector<std::thread> pool;
  for (int s = 0; s < slots; ++s)
    pool.emplace_back([&] {
      for (int i = next++; i < count; i = next++) {
        try {
          job(i);
        } catch (...) {
          errors[static_cast<std::size_t>(i)] = std::current_exception();
        }
      }
    });
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

}  // namespace

EpisodeResult run_episode(const PolicyParams& params, const std::vector<Architecture>& seeds, Evaluator& evaluator,
                          const SearchSettings& settings, int episode) {
  const auto& ec = settings.episode;
  const int N = ec.branches, T = ec.steps;
  if (static_cast<int>(seeds.size()) != N)
    throw DomainError("run_episode: expected " + std::to_string(N) + " seeds, got " + std::to_string(seeds.size()));
  EpisodeResult out;
  out.trajectories.resize(static_cast<std::size_t>(N));
  std::vector<Architecture> current = seeds;
  const int slots = settings.parallelism > 0 ? settings.parallelism : N;
  for (int t = 0; t < T; ++t) {
    std::vector<StepRecord> step(static_cast<std::size_t>(N));
    for (int n = 0; n < N; ++n) {
      auto& rec = step[static_cast<std::size_t>(n)];
      rec.arch_before = current[static_cast<std::size_t>(n)];
      rec.sample_seed = derive_seed(ec.seed, "policy-sample",
                                    {static_cast<std::uint64_t>(episode), static_cast<std::uint64_t>(n),
                                     static_cast<std::uint64_t>(t)});
      Rng rng(rec.sample_seed);
      auto s = sample(params, rec.arch_before, rng, settings.tables);
      rec.bundle = s.bundle;
      rec.logprob = s.logprob;
    }
    parallel_for(N, slots, [&](int n) {
      auto& rec = step[static_cast<std::size_t>(n)];
      const Architecture next = apply_bundle(rec.arch_before, rec.bundle, settings.tables);
      Candidate probe;
      probe.episode = episode;
      probe.branch = n;
      probe.step = t;
      rec.candidate = evaluate_candidate(next, probe.id(), evaluator, settings);
      rec.candidate.episode = episode;
      rec.candidate.branch = n;
      rec.candidate.step = t;
      rec.candidate.action = rec.bundle;
    });
    evaluator.end_step(episode * T + t);
    for (int n = 0; n < N; ++n) {
      auto& rec = step[static_cast<std::size_t>(n)];
      if (rec.candidate.failed)
        spdlog::warn("candidate {} failed: {}", rec.candidate.id(), rec.candidate.error);
      current[static_cast<std::size_t>(n)] = rec.candidate.arch;
      out.candidates.push_back(rec.candidate);
      auto& traj = out.trajectories[static_cast<std::size_t>(n)];
      traj.branch = n;
      traj.steps.push_back(std::move(rec));
    }
  }
  return out;
}

// ---- search loop ----

SearchState initial_state(const SearchSettings& settings) {
  settings.episode.check();
  settings.tables.check();
  SearchState s;
  s.policy = init_policy(settings.policy, settings.tables, settings.mode, derive_seed(settings.episode.seed, "policy-init"));
  AdamConfig adam;
  adam.lr = settings.episode.learning_rate;
  s.optimizer = OptimizerState::for_params(s.policy.tensors, adam);
  s.baseline.decay = settings.baseline_decay;
  const Architecture first =
      random_architecture(derive_seed(settings.episode.seed, "initial-arch"), settings.mode, settings.initial);
  s.seeds.assign(static_cast<std::size_t>(settings.episode.branches), first);
  return s;
}

EpisodeResult search_episode(SearchState& state, Evaluator& evaluator, const SearchSettings& settings,
                             const SearchHooks& hooks) {
  const int e = state.next_episode;
  evaluator.begin_episode(e);
  EpisodeResult res = run_episode(state.policy, state.seeds, evaluator, settings, e);
  for (const auto& c : res.candidates) {
    if (hooks.on_candidate) hooks.on_candidate(c);
    if (c.failed) continue;
    if (!state.best || better_candidate(c, *state.best)) state.best = c;
    if (c.satisfied && (!state.selected || better_candidate(c, *state.selected))) state.selected = c;
  }
  state.baseline = update_baseline(state.baseline, res.trajectories);
  const NamedTensors grad = policy_gradient(state.policy, res.trajectories, state.baseline.value, settings.tables);
  optimizer_step(state.policy.tensors, grad, state.optimizer);
  state.seeds = select_topk(res.candidates, settings.episode.topk, settings.episode.branches);
  state.next_episode = e + 1;
  if (state.best)
    spdlog::info("episode {}: best reward so far {:.6f} ({} params)", e, state.best->reward, state.best->usage.params);
  if (hooks.on_episode_end) hooks.on_episode_end(state);
  return res;
}

SearchResult run_search(const SearchSettings& settings, Evaluator& evaluator, const SearchHooks& hooks,
                        std::optional<SearchState> resume) {
  SearchResult result;
  result.state = resume ? std::move(*resume) : initial_state(settings);
  while (result.state.next_episode < settings.episode.episodes) {
    auto res = search_episode(result.state, evaluator, settings, hooks);
    result.history.insert(result.history.end(), res.candidates.begin(), res.candidates.end());
  }
  result.selected = result.state.selected;
  if (result.state.best)
    result.best = *result.state.best;
  else if (!result.history.empty())
    result.best = result.history.front();
  return result;
}

}  // namespace morphnas
