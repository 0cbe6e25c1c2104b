#include <doctest.h>

#include <chrono>
#include <fstream>
#include <sstream>

#include "morphnas/error.hpp"
#include "morphnas/orchestrator.hpp"

using namespace morphnas;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

json smoke_json(const fs::path& out) {
  return {{"schema_version", 1},
          {"seed", 5},
          {"reinforce", {{"branches", 2}, {"steps", 2}, {"episodes", 2}}},
          {"policy", {{"embed_dim", 8}, {"encoder_hidden", 8}, {"scale_hidden", 16}, {"insert_hidden", 16}}},
          {"constraints", json::array({{{"metric", "model_size"}, {"upper", 100000}}})},
          {"orchestrator", {{"output_dir", out.string()}}}};
}

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("morphnas_orch_" + name);
  fs::remove_all(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string config_error_field(const json& j) {
  try {
    SearchRunConfig::from_json(j);
  } catch (const ConfigError& e) {
    return e.field();
  }
  return "<none>";
}

Candidate fake(int episode, int ch, double perf, std::uint64_t params, double mflops, bool satisfied = true) {
  LayerSpec l;
  l.filter_width = 3;
  l.channels = ch;
  Candidate c;
  c.episode = episode;
  c.arch = Architecture::layer_net({l});
  c.serialized = serialize(c.arch);
  c.performance = perf;
  c.usage.params = params;
  c.usage.flops = static_cast<std::uint64_t>(mflops * 1e6);
  c.usage.bytes = 1000;
  c.violations = {satisfied ? 1.0 : 0.5};
  c.satisfied = satisfied;
  c.reward = reward_from_violations(perf, c.violations);
  c.action = {ScaleAction::identity(ActionTables{}), InsertAction::keep()};
  return c;
}

}  // namespace

TEST_CASE("config parsing") {
  auto c = SearchRunConfig::from_json(smoke_json("out"));
  CHECK(c.seed == 5);
  CHECK(c.settings.episode.branches == 2);
  CHECK(c.settings.episode.topk == 4);  // default clipped to the pool size
  CHECK(c.settings.episode.seed == 5);
  CHECK(c.settings.constraints.size() == 1);
  CHECK(c.evaluator.kind == EvaluatorKind::surrogate);

  // round trip through the resolved form
  auto again = SearchRunConfig::from_json(c.to_json());
  CHECK(again.to_json() == c.to_json());

  json cell = smoke_json("out");
  cell["mode"] = "cell_net";
  cell["reinforce"].erase("steps");
  CHECK(SearchRunConfig::from_json(cell).settings.episode.steps == 5);
  json layer = smoke_json("out");
  layer["reinforce"].erase("steps");
  CHECK(SearchRunConfig::from_json(layer).settings.episode.steps == 10);

  json native = smoke_json("out");
  native["evaluation"] = {{"evaluator", "native"}};
  auto n = SearchRunConfig::from_json(native);
  CHECK(n.settings.train.input == InputShape{8, 8, 1});
  CHECK(n.settings.train.classes == 4);

  // capacity is part of the action space; the first architecture respects it
  json small = smoke_json("out");
  small["action_space"] = {{"max_layers", 5}};
  small["initial"] = {{"min_depth", 2}, {"max_depth", 5}};
  auto sm = SearchRunConfig::from_json(small);
  CHECK(sm.settings.tables.domains.max_layers == 5);
  CHECK(sm.settings.initial.domains.max_layers == 5);
  CHECK(initial_state(sm.settings).seeds.front().layers.size() <= 5);
}

TEST_CASE("config errors name the field") {
  json j = smoke_json("out");
  j.erase("seed");
  CHECK(config_error_field(j) == "seed");

  j = smoke_json("out");
  j["constraints"] = json::array({{{"metric", "model_size"}, {"lower", 200}, {"upper", 100}}});
  CHECK(config_error_field(j) == "constraints[0]");

  j = smoke_json("out");
  j["reinforce"]["bogus"] = 1;
  CHECK(config_error_field(j) == "reinforce");

  j = smoke_json("out");
  j["reinforce"]["topk"] = 5;
  CHECK(config_error_field(j) == "reinforce.topk");

  j = smoke_json("out");
  j["reinforce"]["branches"] = "two";
  CHECK(config_error_field(j) == "reinforce.branches");

  j = smoke_json("out");
  j["evaluation"] = {{"evaluator", "external"}};
  CHECK(config_error_field(j) == "evaluation");

  j = smoke_json("out");
  j["evaluation"] = {{"evaluator", "magic"}};
  CHECK(config_error_field(j) == "evaluation.evaluator");

  j = smoke_json("out");
  j["action_space"] = {{"max_layers", 4}};
  CHECK(config_error_field(j) == "initial.max_depth");  // default start depth goes up to 8

  j = smoke_json("out");
  j["action_space"] = {{"max_branches", 0}};
  CHECK(config_error_field(j) == "action_space.max_branches");

  j = smoke_json("out");
  j["extra"] = true;
  CHECK(config_error_field(j) == "");
}

TEST_CASE("history records round-trip") {
  auto c = fake(3, 32, 0.75, 1234, 5.5);
  c.branch = 1;
  c.step = 2;
  c.metrics = {{"depth", 1}};
  auto back = candidate_from_record(candidate_record(c));
  CHECK(back.arch == c.arch);
  CHECK(back.serialized == c.serialized);
  CHECK(back.reward == c.reward);
  CHECK(back.performance == c.performance);
  CHECK(back.usage.params == c.usage.params);
  CHECK(back.usage.flops == c.usage.flops);
  CHECK(back.action == c.action);
  CHECK(back.id() == "e3-b1-s2");
  CHECK(candidate_record(back) == candidate_record(c));
  CHECK_THROWS_AS(candidate_from_record(json{{"episode", 1}}), ParseError);
}

TEST_CASE("smoke search: counting, reproducibility, crash and resume") {
  const auto dir = scratch("smoke");
  auto cfg = SearchRunConfig::from_json(smoke_json(dir / "a"));
  const auto start = std::chrono::steady_clock::now();
  auto r = run_search_command(cfg);
  CHECK(std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count() < 10.0);
  CHECK(r.history.size() == 8);
  const std::string hist = slurp(dir / "a" / "history.jsonl");
  CHECK(std::count(hist.begin(), hist.end(), '\n') == 8);
  CHECK(fs::exists(dir / "a" / "report.json"));
  CHECK(fs::exists(dir / "a" / "checkpoint" / "checkpoint.json"));
  CHECK(fs::exists(dir / "a" / "checkpoint" / "ckpt-2"));
  CHECK(!fs::exists(dir / "a" / "checkpoint" / "ckpt-1"));

  auto cfg_b = cfg;
  cfg_b.output_dir = dir / "b";
  run_search_command(cfg_b);
  CHECK(slurp(dir / "b" / "history.jsonl") == hist);

  // crash mid-episode 1, then resume
  auto cfg_c = cfg;
  cfg_c.output_dir = dir / "c";
  RunOptions halt;
  halt.halt_after_candidates = 6;
  CHECK_THROWS_AS(run_search_command(cfg_c, halt), RunHalted);
  RunOptions resume;
  resume.resume = true;
  auto rc = run_search_command(cfg_c, resume);
  CHECK(slurp(dir / "c" / "history.jsonl") == hist);
  CHECK(rc.best.serialized == r.best.serialized);
  CHECK(slurp(dir / "c" / "report.json") == slurp(dir / "a" / "report.json"));

  // extending a finished run continues from its checkpoint
  auto longer = cfg;
  longer.settings.episode.episodes = 3;
  auto cfg_d = longer;
  cfg_d.output_dir = dir / "d";
  run_search_command(cfg_d);
  auto cfg_a3 = longer;
  cfg_a3.output_dir = dir / "a";
  run_search_command(cfg_a3, resume);
  CHECK(slurp(dir / "a" / "history.jsonl") == slurp(dir / "d" / "history.jsonl"));

  // a different search config refuses the checkpoint
  auto other = cfg;
  other.seed = 6;
  other.settings.episode.seed = 6;
  other.output_dir = dir / "a";
  CHECK_THROWS_AS(run_search_command(other, resume), ConfigError);
  fs::remove_all(dir);
}

TEST_CASE("checkpoint files are bit-exact") {
  const auto dir = scratch("ckpt");
  SearchSettings s;
  s.policy.embed_dim = 4;
  s.policy.encoder_hidden = 4;
  s.policy.scale_hidden = 4;
  s.policy.insert_hidden = 4;
  s.episode.branches = 2;
  s.episode.steps = 2;
  s.episode.topk = 2;
  s.episode.seed = 9;
  SurrogateEvaluator ev;
  SearchState st = initial_state(s);
  search_episode(st, ev, s);
  save_checkpoint(dir, {st, 123, json{{"x", 1}}}, ev);
  auto back = load_checkpoint(dir, s.tables, ev);
  REQUIRE(back);
  CHECK(back->history_bytes == 123);
  CHECK(back->state.next_episode == 1);
  CHECK(back->state.policy.tensors == st.policy.tensors);
  CHECK(back->state.optimizer.m == st.optimizer.m);
  CHECK(back->state.optimizer.v == st.optimizer.v);
  CHECK(back->state.optimizer.step == st.optimizer.step);
  CHECK(back->state.baseline == st.baseline);
  CHECK(back->state.seeds == st.seeds);
  CHECK(back->state.best->reward == st.best->reward);
  CHECK(!load_checkpoint(dir / "nowhere", s.tables, ev));
  fs::remove_all(dir);
}

TEST_CASE("report tables") {
  SUBCASE("episode rows and satisfaction") {
    std::stringstream h;
    h << candidate_record(fake(0, 16, 0.6, 100, 1.0)).dump() << '\n'
      << candidate_record(fake(0, 32, 0.8, 200, 2.0)).dump() << '\n'
      << "{not json\n"
      << candidate_record(fake(1, 64, 0.7, 300, 3.0)).dump() << '\n'
      << "{\"episode\": 4}\n";
    auto r = build_report(h);
    CHECK(r.corrupt_lines == 2);
    CHECK(r.reward_mismatches == 0);
    REQUIRE(r.episodes.size() == 2);
    CHECK(r.episodes[0].candidates == 2);
    CHECK(r.episodes[0].best_reward == 0.8);
    CHECK(r.episodes[0].mean_reward == doctest::Approx(0.7));
    CHECK(r.episodes[0].satisfied_fraction == 1.0);
    CHECK(r.episodes[1].best_reward == 0.7);
    std::ostringstream csv;
    write_episode_csv(csv, r);
    CHECK(csv.str().rfind("episode,candidates,failed,best_reward,mean_reward,satisfied_fraction\n0,2,0,0.8,", 0) == 0);
  }

  SUBCASE("tampered rewards are detected") {
    auto c = fake(0, 16, 0.6, 100, 1.0);
    json rec = candidate_record(c);
    rec["reward"] = 0.61;
    std::stringstream h;
    h << rec.dump() << '\n';
    CHECK(build_report(h).reward_mismatches == 1);
  }

  SUBCASE("three candidates: Pareto front by hand") {
    // A: perf .6 params 100; B: perf .8 params 200; C: perf .7 params 300 (dominated by B)
    std::stringstream h;
    h << candidate_record(fake(0, 16, 0.6, 100, 3.0)).dump() << '\n'
      << candidate_record(fake(0, 32, 0.8, 200, 2.0)).dump() << '\n'
      << candidate_record(fake(0, 64, 0.7, 300, 1.0)).dump() << '\n';
    auto r = build_report(h);
    std::vector<std::pair<std::string, double>> got;
    for (const auto& p : r.pareto) got.emplace_back(p.metric, p.candidate.performance);
    // params: A, B.  mflops: C (1.0), B (2.0); A has the most flops and the lowest perf.
    // intensity = flops / 1000 bytes, maximized: A has the most, B beats C on perf.
    const std::vector<std::pair<std::string, double>> want{
        {"params", 0.6}, {"params", 0.8}, {"mflops", 0.7}, {"mflops", 0.8}, {"intensity", 0.8}, {"intensity", 0.6}};
    CHECK(got == want);
  }
}

TEST_CASE("Pareto front agrees with a sweep-line oracle") {
  Rng rng(17);
  for (int trial = 0; trial < 200; ++trial) {
    const int n = 1 + static_cast<int>(rng.index(30));
    std::vector<double> perf, cost;
    for (int i = 0; i < n; ++i) {
      // coarse values so ties occur
      perf.push_back(static_cast<double>(rng.index(8)));
      cost.push_back(static_cast<double>(rng.index(8)));
    }
    auto got = pareto_front(perf, cost);
    // oracle: best perf seen among strictly cheaper points; a point survives when
    // nothing cheaper reaches its perf and nothing equally cheap beats it
    std::vector<std::size_t> want;
    for (int i = 0; i < n; ++i) {
      double best_cheaper = -1, best_same = -1;
      for (int k = 0; k < n; ++k) {
        if (cost[k] < cost[i]) best_cheaper = std::max(best_cheaper, perf[k]);
        if (cost[k] == cost[i]) best_same = std::max(best_same, perf[k]);
      }
      if (best_cheaper < perf[i] && best_same <= perf[i]) want.push_back(static_cast<std::size_t>(i));
    }
    CHECK(got == want);
  }
}
