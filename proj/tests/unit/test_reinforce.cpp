#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <set>

#include "morphnas/error.hpp"
#include "morphnas/reinforce.hpp"

using namespace morphnas;

namespace {

PolicyConfig compact() {
  PolicyConfig c;
  c.embed_dim = 4;
  c.encoder_hidden = 6;
  c.scale_hidden = 8;
  c.insert_hidden = 8;
  c.init_range = 0.3;
  return c;
}

SearchSettings small_settings(int N, int T, int E, std::uint64_t seed = 7) {
  SearchSettings s;
  s.policy = compact();
  s.episode.branches = N;
  s.episode.steps = T;
  s.episode.episodes = E;
  s.episode.topk = std::min(N * T, 8);
  s.episode.seed = seed;
  ConstraintSpec size;
  size.metric = Metric::model_size;
  size.upper = 1e5;
  s.constraints = {size};
  return s;
}

Trajectory fake_traj(const std::vector<double>& rewards) {
  Trajectory t;
  for (double r : rewards) {
    StepRecord s;
    s.candidate.reward = r;
    t.steps.push_back(s);
  }
  return t;
}

/// Real trajectories from one episode on the surrogate.
EpisodeResult sample_episode(const SearchSettings& s, const PolicyParams& p) {
  SurrogateEvaluator ev;
  std::vector<Architecture> seeds(static_cast<std::size_t>(s.episode.branches),
                                  random_architecture(3, s.mode, s.initial));
  return run_episode(p, seeds, ev, s, 0);
}

double max_abs(const NamedTensors& t) {
  double m = 0;
  for (const auto& [k, v] : t)
    for (double x : v.data) m = std::max(m, std::abs(x));
  return m;
}

class FlakyEvaluator final : public Evaluator {
 public:
  std::string name() const override { return "flaky"; }
  EvalResult evaluate(const EvalRequest& r) override {
    if (r.id.find("-b1-") != std::string::npos) return EvalResult::failure(r.id, "boom");
    return sur_.evaluate(r);
  }

 private:
  SurrogateEvaluator sur_;
};

class DownEvaluator final : public Evaluator {
 public:
  std::string name() const override { return "down"; }
  EvalResult evaluate(const EvalRequest&) override { throw EvaluatorUnavailable("worker gone"); }
};

}  // namespace

TEST_CASE("returns to go") {
  CHECK(returns_to_go({1, 1, 1}) == std::vector<double>{3, 2, 1});
  CHECK(returns_to_go({0.25}) == std::vector<double>{0.25});
  CHECK(returns_to_go({0, 0, 0}) == std::vector<double>{0, 0, 0});
  CHECK(returns_to_go({}).empty());
}

TEST_CASE("baseline updates") {
  BaselineState b;
  b.decay = 0.0;
  b.initialized = true;
  b.value = 3.0;
  CHECK(update_baseline(b, {fake_traj({0.5}), fake_traj({0.5})}).value == 0.5);

  BaselineState fresh;
  auto first = update_baseline(fresh, {fake_traj({1, 1}), fake_traj({0, 0})});
  CHECK(first.initialized);
  CHECK(first.value == doctest::Approx((2 + 1 + 0 + 0) / 4.0));
  CHECK(update_baseline(fresh, {}).initialized == false);

  // constant stream: b_k - c = decay^k (b_0 - c)
  BaselineState s;
  s.initialized = true;
  s.value = 0.0;
  const double c = 0.8;
  for (int k = 1; k <= 30; ++k) {
    s = update_baseline(s, {fake_traj({c})});
    CHECK(s.value - c == doctest::Approx(std::pow(0.95, k) * (0.0 - c)).epsilon(1e-12));
  }
  CHECK(BaselineState::from_json(s.to_json()) == s);
}

TEST_CASE("policy gradient terms") {
  auto s = small_settings(2, 3, 1);
  auto p = init_policy(s.policy, s.tables, s.mode, 11);
  auto ep = sample_episode(s, p);
  REQUIRE(ep.trajectories.size() == 2);

  SUBCASE("zero advantage gives zero gradient") {
    // every R_t equal to b: rewards (0, 0, 1) give returns (1, 1, 1)
    auto trajs = ep.trajectories;
    for (auto& t : trajs) {
      t.steps[0].candidate.reward = 0;
      t.steps[1].candidate.reward = 0;
      t.steps[2].candidate.reward = 1;
    }
    CHECK(max_abs(policy_gradient(p, trajs, 1.0, s.tables)) == 0.0);
  }

  SUBCASE("single term") {
    Trajectory one;
    one.steps = {ep.trajectories[0].steps[0]};
    const double r = one.steps[0].candidate.reward, b = 0.3;
    auto g = policy_gradient(p, {one}, b, s.tables);
    auto gl = grad_logprob(p, one.steps[0].arch_before, one.steps[0].bundle, s.tables);
    for (const auto& [k, t] : g)
      for (std::size_t i = 0; i < t.size(); ++i) CHECK(t[i] == doctest::Approx(gl.at(k)[i] * (r - b)).epsilon(1e-12));
  }

  SUBCASE("sum over N*T terms divided by N") {
    const double b = 0.4;
    NamedTensors expect = zeros_like(p.tensors);
    int terms = 0;
    for (const auto& t : ep.trajectories) {
      auto R = returns_to_go(t.rewards());
      for (std::size_t i = 0; i < t.steps.size(); ++i, ++terms)
        axpy(expect, grad_logprob(p, t.steps[i].arch_before, t.steps[i].bundle, s.tables), (R[i] - b) / 2.0);
    }
    CHECK(terms == 6);
    auto g = policy_gradient(p, ep.trajectories, b, s.tables);
    for (const auto& [k, t] : g)
      for (std::size_t i = 0; i < t.size(); ++i) CHECK(t[i] == doctest::Approx(expect.at(k)[i]).epsilon(1e-12));
  }

  SUBCASE("directional derivative") {
    const double b = 0.5;
    auto g = policy_gradient(p, ep.trajectories, b, s.tables);
    const double gg = dot(g, g);
    REQUIRE(gg > 0);
    auto shifted = [&](double h) {
      PolicyParams q = p;
      axpy(q.tensors, g, h);
      return policy_objective(q, ep.trajectories, b, s.tables);
    };
    const double h = 1e-4 / std::sqrt(gg);
    const double fd = (shifted(h) - shifted(-h)) / (2 * h);
    CHECK(std::abs(fd - gg) <= 1e-4 * gg);
    CHECK(shifted(h) > policy_objective(p, ep.trajectories, b, s.tables));
  }
}

TEST_CASE("adam") {
  NamedTensors params{{"w", Tensor({1}, {0.5})}, {"u", Tensor({2}, {1.0, -1.0})}};
  auto opt = OptimizerState::for_params(params);

  SUBCASE("zero gradient leaves params, moments decay") {
    opt.m["w"][0] = 1.0;
    opt.v["w"][0] = 1.0;
    auto before = params;
    optimizer_step(params, zeros_like(params), opt);
    CHECK(params.at("w")[0] == doctest::Approx(before.at("w")[0] + 6e-4 * (0.9 / 0.1) / (std::sqrt(0.999 / 0.001) + 1e-8)));
    CHECK(opt.m["w"][0] == doctest::Approx(0.9));
    CHECK(opt.v["w"][0] == doctest::Approx(0.999));
    CHECK(params.at("u") == before.at("u"));
  }

  SUBCASE("first step moves by about lr") {
    for (double g0 : {3.0, -0.02, 1e-3}) {
      NamedTensors p{{"w", Tensor({1}, {0.0})}};
      auto o = OptimizerState::for_params(p);
      optimizer_step(p, NamedTensors{{"w", Tensor({1}, {g0})}}, o);
      CHECK(p.at("w")[0] == doctest::Approx(6e-4 * g0 / (std::abs(g0) + 1e-8)).epsilon(1e-12));
      CHECK(o.step == 1);
    }
  }

  SUBCASE("deterministic and persistent") {
    auto p2 = params;
    auto o2 = opt;
    Rng rng(5);
    for (int i = 0; i < 5; ++i) {
      NamedTensors g{{"w", Tensor({1}, {rng.normal()})}, {"u", Tensor({2}, {rng.normal(), rng.normal()})}};
      optimizer_step(params, g, opt);
      optimizer_step(p2, g, o2);
    }
    CHECK(params == p2);
    const auto path = std::filesystem::temp_directory_path() / "morphnas_adam_test.bin";
    opt.save(path);
    auto back = OptimizerState::load(path);
    CHECK(back.m == opt.m);
    CHECK(back.v == opt.v);
    CHECK(back.step == opt.step);
    CHECK(back.config == opt.config);
    std::filesystem::remove(path);
  }

  SUBCASE("non-finite gradient aborts") {
    auto before = params;
    NamedTensors g = zeros_like(params);
    g["u"][1] = std::nan("");
    CHECK_THROWS_AS(optimizer_step(params, g, opt), NumericalError);
    CHECK(params == before);
    CHECK(opt.step == 0);
  }
}

TEST_CASE("episode bookkeeping") {
  auto s = small_settings(2, 3, 1);
  auto p = init_policy(s.policy, s.tables, s.mode, 1);
  auto ep = sample_episode(s, p);
  CHECK(ep.candidates.size() == 6);
  std::set<std::string> ids;
  for (const auto& c : ep.candidates) {
    ids.insert(c.id());
    CHECK(validate(c.arch, s.tables.domains).ok());
    CHECK(!c.failed);
    // history is self-verifying
    CHECK(c.reward == reward(c.performance, s.usage_of(c.arch), s.constraints));
    CHECK(c.serialized == serialize(c.arch));
  }
  CHECK(ids.size() == 6);
  for (const auto& t : ep.trajectories) {
    REQUIRE(t.steps.size() == 3);
    for (std::size_t i = 1; i < 3; ++i) CHECK(t.steps[i].arch_before == t.steps[i - 1].candidate.arch);
    for (const auto& st : t.steps) CHECK(st.logprob == doctest::Approx(logprob(p, st.arch_before, st.bundle, s.tables)));
  }
}

TEST_CASE("keep actions reproduce the seed reward") {
  auto s = small_settings(1, 1, 1);
  SurrogateEvaluator ev;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    auto arch = random_architecture(seed, s.mode);
    ActionBundle keep{ScaleAction::identity(s.tables), InsertAction::keep()};
    auto a = evaluate_candidate(arch, "a", ev, s);
    auto b = evaluate_candidate(apply_bundle(arch, keep, s.tables), "b", ev, s);
    CHECK(a.reward == b.reward);
  }
}

TEST_CASE("evaluator failures") {
  auto s = small_settings(2, 2, 1);
  auto p = init_policy(s.policy, s.tables, s.mode, 1);
  std::vector<Architecture> seeds(2, random_architecture(3, s.mode));
  FlakyEvaluator flaky;
  auto ep = run_episode(p, seeds, flaky, s, 0);
  REQUIRE(ep.candidates.size() == 4);
  for (const auto& c : ep.candidates) {
    CHECK(c.failed == (c.branch == 1));
    if (c.failed) {
      CHECK(c.reward == 0.0);
      CHECK(c.error == "boom");
    }
  }
  DownEvaluator down;
  CHECK_THROWS_AS(run_episode(p, seeds, down, s, 0), EvaluatorUnavailable);
}

TEST_CASE("top-k selection") {
  auto make = [](int ch, double reward, std::uint64_t params) {
    LayerSpec l;
    l.filter_width = 3;
    l.channels = ch;
    Candidate c;
    c.arch = Architecture::layer_net({l});
    c.serialized = serialize(c.arch);
    c.reward = reward;
    c.usage.params = params;
    return c;
  };
  auto a = make(16, 0.9, 10), b = make(32, 0.8, 10), c = make(64, 0.7, 10);

  auto seeds = select_topk({c, a, b, a, b}, 8, 8);
  REQUIRE(seeds.size() == 8);
  for (int i = 0; i < 8; ++i) CHECK(seeds[i] == std::vector<Architecture>{a.arch, b.arch, c.arch}[i % 3]);

  auto big = make(16, 0.5, 2'000'000), small = make(32, 0.5, 1'000'000);
  CHECK(select_topk({big, small}, 1, 1)[0] == small.arch);
  CHECK(select_topk({big, small}, 2, 2)[0] == small.arch);
  CHECK(select_topk({b, c, a}, 1, 3) == std::vector<Architecture>(3, a.arch));

  auto tie1 = make(16, 0.5, 10), tie2 = make(32, 0.5, 10);
  const auto first = tie1.serialized < tie2.serialized ? tie1.arch : tie2.arch;
  CHECK(select_topk({tie2, tie1}, 1, 1)[0] == first);

  auto failed = make(128, 0.0, 1);
  failed.failed = true;
  CHECK(select_topk({failed, c}, 2, 2) == std::vector<Architecture>(2, c.arch));
  CHECK_THROWS_AS(select_topk({}, 1, 1), DomainError);
}

TEST_CASE("episode config checks") {
  EpisodeConfig c;
  CHECK_NOTHROW(c.check());
  CHECK(EpisodeConfig::defaults(ArchMode::layer_net).steps == 10);
  CHECK(EpisodeConfig::defaults(ArchMode::cell_net).steps == 5);
  CHECK(c.branches == 8);
  CHECK(c.episodes == 15);
  CHECK(c.topk == 8);
  CHECK(c.learning_rate == 6e-4);
  auto bad = c;
  bad.topk = 81;
  CHECK_THROWS_AS(bad.check(), ConfigError);
  bad = c;
  bad.branches = 0;
  CHECK_THROWS_AS(bad.check(), ConfigError);
}

TEST_CASE("search runs") {
  SurrogateEvaluator ev;
  SUBCASE("one of everything") {
    auto s = small_settings(1, 1, 1);
    s.episode.topk = 1;
    auto r = run_search(s, ev);
    CHECK(r.history.size() == 1);
    CHECK(r.best.serialized == r.history[0].serialized);
    CHECK(r.state.optimizer.step == 1);
  }

  SUBCASE("deterministic, threading-independent and resumable") {
    auto s = small_settings(3, 2, 4, 21);
    std::vector<std::string> seen;
    SearchHooks hooks;
    hooks.on_candidate = [&](const Candidate& c) { seen.push_back(c.id()); };
    auto a = run_search(s, ev, hooks);
    CHECK(a.history.size() == 24);
    CHECK(seen.size() == 24);
    CHECK(seen[0] == "e0-b0-s0");
    CHECK(seen[1] == "e0-b1-s0");

    auto seq = s;
    seq.parallelism = 1;
    auto b = run_search(seq, ev);

    auto half = s;
    half.episode.episodes = 2;
    auto first = run_search(half, ev);
    CHECK(first.state.next_episode == 2);
    auto rest = run_search(s, ev, {}, first.state);

    REQUIRE(b.history.size() == a.history.size());
    for (std::size_t i = 0; i < a.history.size(); ++i) {
      CHECK(a.history[i].serialized == b.history[i].serialized);
      CHECK(a.history[i].reward == b.history[i].reward);
    }
    REQUIRE(rest.history.size() == 12);
    for (std::size_t i = 0; i < 12; ++i) CHECK(rest.history[i].serialized == a.history[12 + i].serialized);
    CHECK(a.state.policy.tensors == b.state.policy.tensors);
    CHECK(a.state.policy.tensors == rest.state.policy.tensors);
    CHECK(a.best.serialized == rest.best.serialized);
    CHECK(a.state.baseline == rest.state.baseline);
  }
}
