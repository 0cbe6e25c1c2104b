// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fails.
// Optional arguments pick criteria by name (grid, estimator, gradient, closure,
// desk, warmstart, schedules, repro).

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdarg>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include <sys/wait.h>
#include <unistd.h>

#include <spdlog/spdlog.h>

#include "morphnas/error.hpp"
#include "morphnas/orchestrator.hpp"
#include "morphnas/policy.hpp"
#include "morphnas/reinforce.hpp"
#include "morphnas/resources.hpp"
#include "morphnas/trainer.hpp"

using namespace morphnas;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
  std::vector<std::string> info;  // extra lines, not part of the verdict
};

std::string fmt(const char* f, ...) __attribute__((format(printf, 1, 2)));
std::string fmt(const char* f, ...) {
  char buf[1024];
  va_list ap;
  va_start(ap, f);
  std::vsnprintf(buf, sizeof buf, f, ap);
  va_end(ap);
  return buf;
}

double rel_err(double a, double b, double floor = 0.0) {
  const double d = std::max({std::abs(a), std::abs(b), floor});
  return d == 0.0 ? 0.0 : std::abs(a - b) / d;
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const auto n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

std::string read_all(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// ---- violation / reward grid ---------------------------------------------------

// written out from the definition, independent of the library
double direct_violation(double u, std::optional<double> lo, std::optional<double> hi, double p) {
  double e = 0.0;
  if (hi) e = std::max(e, u / *hi - 1.0);
  if (lo) e = std::max(e, *lo / u - 1.0);
  return std::pow(p, e);
}

Outcome check_grid() {
  const double us[] = {1, 7, 99, 1000, 2500, 9999, 10000, 10001, 31623, 1e6};
  const std::pair<double, double> bounds[] = {{0, 1e4},    {0, 3e4},     {1e3, 0},  {5e3, 0},   {1e3, 1e4},
                                              {1e4, 1e4},  {100, 1e5},   {2e3, 3e3}, {1, 2},     {5e4, 2e5}};
  const double ps[] = {0.0, 0.1, 0.25, 0.5, 0.7, 0.8, 0.9, 0.95, 0.99, 1.0};
  long points = 0, bad = 0, inside = 0, inside_bad = 0;
  double worst = 0.0;
  for (double u : us)
    for (auto [lo, hi] : bounds)
      for (double p : ps) {
        ++points;
        ConstraintSpec c;
        c.metric = Metric::model_size;
        if (lo > 0) c.lower = lo;
        if (hi > 0) c.upper = hi;
        c.base_penalty = p;
        const double v = violation(u, c);
        const double want = direct_violation(u, c.lower, c.upper, p);
        // reward of a three-constraint set against the hand product
        ConstraintSpec flops;
        flops.metric = Metric::compute_complexity;
        flops.upper = 2.0;
        flops.base_penalty = 0.8;
        ConstraintSpec inten;
        inten.metric = Metric::compute_intensity;
        inten.lower = 4.0;
        inten.base_penalty = 0.7;
        ResourceUsage usage;
        usage.params = static_cast<std::uint64_t>(u);
        usage.flops = 3000000;  // 3 MFLOPs
        usage.bytes = 1000000;  // 3 FLOPs/byte
        const double perf = 0.25 + 0.5 * (u / 1e6);
        const double r = reward(perf, usage, {c, flops, inten});
        const double r_want = perf * direct_violation(u, c.lower, c.upper, p) *
                              direct_violation(3.0, std::nullopt, 2.0, 0.8) * direct_violation(3.0, 4.0, std::nullopt, 0.7);
        for (auto [got, exp] : {std::pair{v, want}, std::pair{r, r_want}}) {
          const double e = exp == 0.0 ? std::abs(got) : rel_err(got, exp);
          worst = std::max(worst, e);
          if (!(e <= 1e-12)) ++bad;
        }
        const bool in = (!c.lower || u >= *c.lower) && (!c.upper || u <= *c.upper);
        if (in) {
          ++inside;
          if (v != 1.0) ++inside_bad;
        }
      }
  // monotone in the over-usage ratio, for upper and lower bounds
  long mono_bad = 0;
  for (double p : {0.1, 0.5, 0.9, 0.99}) {
    ConstraintSpec up;
    up.upper = 1e4;
    up.base_penalty = p;
    ConstraintSpec low;
    low.lower = 1e4;
    low.base_penalty = p;
    double prev_up = 1.0, prev_low = 1.0;
    for (int k = 1; k <= 50; ++k) {
      const double ratio = 1.0 + 0.1 * k;
      const double vu = violation(1e4 * ratio, up);
      const double vl = violation(1e4 / ratio, low);
      if (!(vu < prev_up) || !(vl < prev_low)) ++mono_bad;
      prev_up = vu;
      prev_low = vl;
    }
  }
  Outcome o;
  o.pass = points == 1000 && bad == 0 && inside > 0 && inside_bad == 0 && mono_bad == 0;
  o.detail = fmt("%ld points, max rel err %.2e, %ld/%ld in-bound points with V != 1, %ld monotonicity breaks", points,
                 worst, inside_bad, inside, mono_bad);
  return o;
}

// ---- estimator vs instantiated model ---------------------------------------------

Outcome check_estimator() {
  const InputShape input{32, 32, 3};
  const int classes = 10;
  int agree = 0, total = 0;
  std::string first_bad;
  for (int i = 0; i < 50; ++i) {
    const ArchMode mode = i % 2 ? ArchMode::cell_net : ArchMode::layer_net;
    RandomLimits lim;
    lim.min_depth = 1;
    lim.max_depth = mode == ArchMode::cell_net ? 8 : 16;
    const auto arch = random_architecture(derive_seed(11, "acceptance-estimator", {std::uint64_t(i)}), mode, lim);
    ++total;
    const auto est = estimate(arch, input, EstimateOptions{classes}).params;
    Rng rng(i);
    const auto weights = init_params(model_layout(arch, input, classes), nullptr, rng);
    std::uint64_t scalars = 0;
    for (const auto& [name, t] : weights) scalars += t.size();
    if (est == scalars)
      ++agree;
    else if (first_bad.empty())
      first_bad = fmt(" (first mismatch: arch %d, %llu vs %llu)", i, (unsigned long long)est, (unsigned long long)scalars);
  }
  Outcome o;
  o.pass = agree == total;
  o.detail = fmt("%d/%d architectures with params == instantiated trainable scalars%s", agree, total, first_bad.c_str());
  return o;
}

// ---- policy gradient -------------------------------------------------------------

Outcome check_gradient() {
  ActionTables tables;
  const double h = 1e-4;
  long coords = 0, bad = 0;
  double worst = 0.0;
  for (int i = 0; i < 20; ++i) {
    const ArchMode mode = i % 2 ? ArchMode::cell_net : ArchMode::layer_net;
    auto params = init_policy(PolicyConfig{}, tables, mode, derive_seed(5, "acceptance-policy", {std::uint64_t(i)}));
    const auto arch = random_architecture(derive_seed(5, "acceptance-arch", {std::uint64_t(i)}), mode);
    Rng rng(derive_seed(5, "acceptance-bundle", {std::uint64_t(i)}));
    const auto bundle = sample(params, arch, rng, tables).bundle;
    const auto g = grad_logprob(params, arch, bundle, tables);
    // per tensor: its largest gradient entry plus two random entries
    for (const auto& [name, gt] : g) {
      std::vector<std::size_t> picks;
      std::size_t arg = 0;
      for (std::size_t k = 1; k < gt.size(); ++k)
        if (std::abs(gt[k]) > std::abs(gt[arg])) arg = k;
      picks.push_back(arg);
      picks.push_back(rng.index(gt.size()));
      picks.push_back(rng.index(gt.size()));
      for (std::size_t k : picks) {
        double& w = params.tensors.at(name)[k];
        const double w0 = w;
        w = w0 + h;
        const double up = logprob(params, arch, bundle, tables);
        w = w0 - h;
        const double down = logprob(params, arch, bundle, tables);
        w = w0;
        const double fd = (up - down) / (2 * h);
        const double e = rel_err(fd, gt[k], 1e-6);
        worst = std::max(worst, e);
        ++coords;
        if (!(e <= 1e-4)) ++bad;
      }
    }
  }

  // REINFORCE batch gradient along its own direction and a random one
  SearchSettings s;
  s.episode.branches = 4;
  s.episode.steps = 3;
  s.episode.seed = 9;
  ConstraintSpec size;
  size.upper = 1e5;
  s.constraints = {size};
  SurrogateEvaluator ev;
  SearchState st = initial_state(s);
  const auto ep = run_episode(st.policy, st.seeds, ev, s, 0);
  const double b = update_baseline(st.baseline, ep.trajectories).value;
  const auto g = policy_gradient(st.policy, ep.trajectories, b, s.tables);
  NamedTensors rnd = zeros_like(g);
  Rng rng(99);
  for (auto& [name, t] : rnd)
    for (auto& x : t.data) x = rng.normal();
  bool dir_ok = true;
  std::string dir_detail;
  for (const NamedTensors* d : {&g, static_cast<const NamedTensors*>(&rnd)}) {
    const double gd = dot(g, *d);
    const double step = 1e-4 / std::sqrt(dot(*d, *d));
    auto J = [&](double t) {
      PolicyParams q = st.policy;
      axpy(q.tensors, *d, t);
      return policy_objective(q, ep.trajectories, b, s.tables);
    };
    const double fd = (J(step) - J(-step)) / (2 * step);
    const double e = rel_err(fd, gd, 1e-6);
    dir_ok = dir_ok && e <= 1e-4;
    dir_detail += fmt(" %.1e", e);
  }

  Outcome o;
  o.pass = bad == 0 && dir_ok;
  o.detail = fmt("20 pairs, %ld coordinates, max rel err %.2e (%ld above 1e-4); batch directional rel err%s", coords,
                 worst, bad, dir_detail.c_str());
  return o;
}

// ---- morph closure -----------------------------------------------------------------

Outcome check_closure() {
  ActionTables tables;
  PolicyConfig small;
  small.embed_dim = 8;
  small.encoder_hidden = 8;
  small.scale_hidden = 16;
  small.insert_hidden = 16;
  small.init_range = 0.1;  // close to uniform over the unmasked slots
  long applied = 0, failures = 0, thrown = 0, changed = 0;
  std::string first;
  const int chains = 2000, length = 50;
  for (int c = 0; c < chains; ++c) {
    const ArchMode mode = c % 2 ? ArchMode::cell_net : ArchMode::layer_net;
    RandomLimits lim;
    lim.min_depth = 1;
    lim.max_depth = mode == ArchMode::cell_net ? tables.domains.max_branches : tables.domains.max_layers;
    const auto params = init_policy(small, tables, mode, derive_seed(3, "closure-policy", {std::uint64_t(c % 16)}));
    Architecture arch = random_architecture(derive_seed(3, "closure-arch", {std::uint64_t(c)}), mode, lim);
    Rng rng(derive_seed(3, "closure-sample", {std::uint64_t(c)}));
    for (int t = 0; t < length; ++t) {
      ++applied;
      try {
        const auto step = sample(params, arch, rng, tables);
        Architecture next = apply_bundle(arch, step.bundle, tables);
        const auto rep = validate(next, tables.domains);
        if (!rep.ok()) {
          ++failures;
          if (first.empty()) first = rep.summary();
          break;
        }
        if (!(next == arch)) ++changed;
        arch = std::move(next);
      } catch (const std::exception& e) {
        ++thrown;
        if (first.empty()) first = e.what();
        break;
      }
    }
  }
  Outcome o;
  o.pass = applied == long(chains) * length && failures == 0 && thrown == 0;
  o.detail = fmt("%ld applications (%ld changed the architecture), %ld validate failures, %ld exceptions", applied,
                 changed, failures, thrown);
  if (!first.empty()) o.detail += "; first: " + first;
  return o;
}

// ---- desk-scale constrained search ----------------------------------------------------

Outcome check_desk() {
  const json base = json::parse(read_all(fs::path(MORPHNAS_TEST_DATA) / "random_baseline.json"));
  const double baseline = base.at("best_reward").get<double>();

  SearchSettings s;
  s.mode = ArchMode::layer_net;
  s.episode.branches = 8;
  s.episode.steps = 5;
  s.episode.episodes = 15;
  s.episode.topk = 8;
  ConstraintSpec size;
  size.metric = Metric::model_size;
  size.upper = 1e5;
  s.constraints = {size};

  // the checked-in baseline must still score what it says
  SurrogateEvaluator ev;
  const auto ref = evaluate_candidate(from_json(base.at("best_architecture")), "baseline", ev, s);
  const bool baseline_ok = rel_err(ref.reward, baseline) <= 1e-12;

  const int seeds = 5, E = s.episode.episodes;
  int selected_ok = 0, argmax_ok = 0;
  std::vector<double> best;
  std::vector<std::vector<double>> per_episode(E), running(E);
  for (int sd = 0; sd < seeds; ++sd) {
    s.episode.seed = sd;
    SurrogateEvaluator e;
    const auto r = run_search(s, e);
    if (r.selected && satisfies(r.selected->usage, s.constraints)) ++selected_ok;
    if (satisfies(r.best.usage, s.constraints)) ++argmax_ok;
    best.push_back(r.best.reward);
    std::vector<double> ep(E, 0.0);
    for (const auto& c : r.history) ep[c.episode] = std::max(ep[c.episode], c.reward);
    double run = 0.0;
    for (int k = 0; k < E; ++k) {
      run = std::max(run, ep[k]);
      per_episode[k].push_back(ep[k]);
      running[k].push_back(run);
    }
  }
  std::string curve, run_curve;
  int drops = 0;
  std::vector<double> med(E), med_run(E);
  for (int k = 0; k < E; ++k) {
    med[k] = median(per_episode[k]);
    med_run[k] = median(running[k]);
    curve += fmt(" %.4f", med[k]);
    run_curve += fmt(" %.4f", med_run[k]);
  }
  // "after episode 3": transitions 3->4, ..., 14->15 (1-based)
  std::string where;
  for (int k = 3; k < E; ++k)
    if (med[k] < med[k - 1]) {
      ++drops;
      where += fmt(" %d->%d", k, k + 1);
    }
  const double med_best = median(best);

  Outcome o;
  const bool a = selected_ok >= 4, b = baseline_ok && med_best >= 0.95 * baseline, c = drops == 0;
  o.pass = a && b && c;
  o.detail = fmt("(a) %s %d/5 seeds select a model within params <= 1e5; (b) %s median best %.5f vs 0.95 x %.5f = %.5f; "
                 "(c) %s median per-episode best drops %d time(s) after episode 3",
                 a ? "ok" : "FAIL", selected_ok, b ? "ok" : "FAIL", med_best, baseline, 0.95 * baseline,
                 c ? "ok" : "FAIL", drops);
  if (!where.empty()) o.detail += " at" + where;
  o.info.push_back(fmt("median per-episode best:%s", curve.c_str()));
  o.info.push_back(fmt("median best-so-far:%s", run_curve.c_str()));
  o.info.push_back(fmt("%d/5 seeds have a reward-argmax within the budget; checked-in baseline reproduces: %s",
                       argmax_ok, baseline_ok ? "yes" : "no"));
  return o;
}

// ---- warm start and merge ------------------------------------------------------------

Outcome check_warmstart() {
  // default synthetic set and the search's default (full) schedule, cut at 5 epochs
  DatasetSpec spec;
  const Dataset data = make_dataset(spec, 17);
  TrainConfig cfg = TrainConfig::full_defaults();
  cfg.max_epochs = 5;
  cfg.input = spec.input();
  cfg.classes = spec.classes;

  ActionTables tables;
  tables.domains.layer.channels = {4, 8, 16};
  tables.domains.max_layers = 6;
  RandomLimits lim;
  lim.min_depth = 2;
  lim.max_depth = 4;
  lim.domains = tables.domains;
  const auto policy = init_policy(PolicyConfig{}, tables, ArchMode::layer_net, 23);

  int hits = 0, trials = 20, inherited = 0, total = 0;
  std::string epochs;
  for (int i = 0; i < trials; ++i) {
    const auto s = std::uint64_t(i);
    const auto base = random_architecture(derive_seed(23, "warm-base", {s}), ArchMode::layer_net, lim);
    const auto trained = train_model(base, cfg, data, nullptr, derive_seed(23, "warm-train", {s}));
    if (!trained.ok) {
      epochs += " x";
      continue;
    }
    WeightDictionary dict;
    dict.merge({contribution(model_layout(base, cfg.input, cfg.classes), trained.best_params, trained.best_accuracy)}, 0);
    // a morph that changes the network and still inherits something, so the
    // trial is not a rerun of the scratch model
    Architecture morphed = base;
    Rng rng(derive_seed(23, "warm-morph", {s}));
    for (int tries = 0; tries < 200; ++tries) {
      const auto cand = apply_bundle(base, sample(policy, base, rng, tables).bundle, tables);
      if (cand == base) continue;
      int warm = 0;
      Rng probe(0);
      init_params(model_layout(cand, cfg.input, cfg.classes), &dict, probe, &warm);
      if (warm > 0) {
        morphed = cand;
        break;
      }
    }
    if (morphed == base) {
      epochs += " ?";
      continue;
    }
    const auto seed = derive_seed(23, "warm-child", {s});
    const auto scratch = train_model(morphed, cfg, data, nullptr, seed);
    const auto warm = train_model(morphed, cfg, data, &dict, seed);
    inherited += warm.warm_tensors;
    total += int(model_layout(morphed, cfg.input, cfg.classes).size());
    int reached = 0;
    if (scratch.ok && scratch.train_loss.size() == 5)
      for (std::size_t e = 0; e < warm.train_loss.size(); ++e)
        if (warm.train_loss[e] <= scratch.train_loss[4]) {
          reached = int(e) + 1;
          break;
        }
    if (reached >= 1 && reached <= 5) ++hits;
    epochs += reached ? fmt(" %d", reached) : std::string(warm.ok ? " -" : " nan");
  }

  // merge clash: the higher accuracy wins bit-exactly, ties keep the incumbent
  auto tensor = [](double x) { return Tensor({2, 2}, {x, x / 3.0, -x, x * 1e-7}); };
  const std::string key = "0|conv|3|relu|W|weight";
  WeightDictionary d1, d2;
  d1.merge({{{{key, tensor(0.1)}}, 0.5}, {{{key, tensor(0.7)}}, 0.75}, {{{key, tensor(0.3)}}, 0.6}}, 1);
  d2.merge({{{{key, tensor(0.3)}}, 0.6}}, 1);
  d2.merge({{{{key, tensor(0.7)}}, 0.75}}, 2);
  d2.merge({{{{key, tensor(0.1)}}, 0.5}, {{{key, tensor(0.9)}}, 0.75}}, 3);
  const auto bits = [](const Tensor& t) {
    std::string s(t.data.size() * sizeof(double), '\0');
    std::memcpy(s.data(), t.data.data(), s.size());
    return s;
  };
  const Tensor want = tensor(0.7);
  bool merge_ok = d1.find(key) && d2.find(key) && bits(d1.find(key)->value) == bits(want) &&
                  bits(d2.find(key)->value) == bits(want) && d1.find(key)->accuracy == 0.75 && d2.find(key)->step == 2;
  const fs::path tmp = fs::temp_directory_path() / fmt("morphnas-accept-dict-%d", int(::getpid()));
  d2.save(tmp);
  merge_ok = merge_ok && WeightDictionary::load(tmp) == d2;
  fs::remove(tmp);

  Outcome o;
  o.pass = hits * 5 >= trials * 4 && merge_ok;
  o.detail = fmt("%d/%d trials reach the scratch epoch-5 loss within 5 warm epochs; merge clash %s", hits, trials,
                 merge_ok ? "bit-exact" : "WRONG");
  o.info.push_back("warm epoch per trial (- not reached, nan diverged):" + epochs);
  o.info.push_back(fmt("%d of %d child tensors taken from the dictionary", inherited, total));
  return o;
}

// ---- schedules -------------------------------------------------------------------------

Outcome check_schedules() {
  bool ok = true;
  std::string why;
  for (auto [mx, mn] : {std::pair{0.05, 0.001}, std::pair{0.4, 0.008}, std::pair{0.1, 0.0}}) {
    TrainConfig c;
    c.lr_max = mx;
    c.lr_min = mn;
    c.t0 = 10;
    c.t_mul = 2;
    for (double start : {0.0, 10.0, 30.0, 70.0})
      if (cosine_lr(start, c) != mx) ok = false, why += fmt(" lr(%g)", start);
    for (auto [t, p] : {std::pair{10.0, 10.0}, std::pair{20.0, 20.0}, std::pair{40.0, 40.0}})
      if (cosine_annealing(t, p, mx, mn) != mn) ok = false, why += fmt(" end(%g)", p);
    // just before a boundary the rate is above l_min and close to it
    for (double e : {10.0, 30.0}) {
      const double lr = cosine_lr(e - 1e-6, c);
      if (!(lr > mn && lr - mn < 1e-9)) ok = false, why += fmt(" near(%g)", e);
    }
  }
  TrainConfig c;
  c.t0 = 10;
  c.t_mul = 2;
  const auto b = restart_boundaries(c, 31);
  const bool bounds_ok = b == std::vector<int>{10, 30};
  const auto p10 = restart_position(10.0, c), p30 = restart_position(30.0, c), p29 = restart_position(29.5, c);
  const bool pos_ok = p10.restart == 1 && p10.t_cur == 0.0 && p10.period == 20.0 && p30.restart == 2 &&
                      p30.t_cur == 0.0 && p30.period == 40.0 && p29.restart == 1;
  std::string bs;
  for (int x : b) bs += fmt(" %d", x);
  Outcome o;
  o.pass = ok && bounds_ok && pos_ok;
  o.detail = fmt("endpoints %s, boundaries:%s, restart positions %s", ok ? "exact" : ("wrong:" + why).c_str(),
                 bs.c_str(), pos_ok ? "ok" : "wrong");
  return o;
}

// ---- reproducibility through the CLI ---------------------------------------------------

Outcome check_repro() {
  const fs::path dir = fs::temp_directory_path() / fmt("morphnas-accept-repro-%d", int(::getpid()));
  fs::remove_all(dir);
  fs::create_directories(dir);
  const json cfg = {{"schema_version", 1},
                    {"seed", 31},
                    {"mode", "layer_net"},
                    {"reinforce", {{"branches", 8}, {"steps", 5}, {"episodes", 6}}},
                    {"constraints", {{{"metric", "model_size"}, {"upper", 1e5}}}},
                    {"evaluation", {{"evaluator", "surrogate"}}}};
  std::ofstream(dir / "config.json") << cfg.dump(2);
  const std::string cli = MORPHNAS_CLI;
  auto run = [&](const std::string& out, const std::string& extra) {
    const std::string cmd = "MORPHNAS_LOG_LEVEL=off '" + cli + "' search '" + (dir / "config.json").string() +
                            "' --output '" + (dir / out).string() + "' " + extra + " > /dev/null 2>&1";
    const int st = std::system(cmd.c_str());
    return WIFEXITED(st) ? WEXITSTATUS(st) : -1;
  };
  const int a = run("a", ""), b = run("b", "");
  const std::string ha = read_all(dir / "a" / "history.jsonl"), hb = read_all(dir / "b" / "history.jsonl");
  // crash mid-episode 3, then resume
  const int halted = run("c", "--halt-after 117");
  const int resumed = run("c", "--resume");
  const std::string hc = read_all(dir / "c" / "history.jsonl");
  const bool same_report = read_all(dir / "a" / "report.json") == read_all(dir / "c" / "report.json");
  const auto lines = std::count(ha.begin(), ha.end(), '\n');
  fs::remove_all(dir);

  Outcome o;
  o.pass = a == 0 && b == 0 && halted == 4 && resumed == 0 && !ha.empty() && ha == hb && ha == hc && same_report &&
           lines == 240;
  o.detail = fmt("exit codes %d/%d, %ld history lines, repeat %s; halt at 117 (exit %d) + resume (exit %d) %s", a, b,
                 long(lines), ha == hb ? "byte-identical" : "DIFFERS", halted, resumed,
                 ha == hc && same_report ? "byte-identical" : "DIFFERS");
  return o;
}

struct Criterion {
  const char* name;
  const char* title;
  double limit_s;
  std::function<Outcome()> run;
};

}  // namespace

int main(int argc, char** argv) {
  spdlog::set_level(spdlog::level::warn);
  const std::vector<Criterion> all = {
      {"grid", "violation/reward exactness", 1.0, check_grid},
      {"estimator", "estimator vs instantiated model", 30.0, check_estimator},
      {"gradient", "policy gradient correctness", 120.0, check_gradient},
      {"closure", "morph closure sweep", 60.0, check_closure},
      {"desk", "desk-scale constrained search", 300.0, check_desk},
      {"warmstart", "warm start and merge", 300.0, check_warmstart},
      {"schedules", "cosine schedule", 1.0, check_schedules},
      {"repro", "reproducibility", 120.0, check_repro},
  };
  std::vector<std::string> pick(argv + 1, argv + argc);
  int failed = 0, ran = 0;
  for (const auto& c : all) {
    if (!pick.empty() && std::find(pick.begin(), pick.end(), c.name) == pick.end()) continue;
    ++ran;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o.pass = false;
      o.detail = std::string("exception: ") + e.what();
    }
    const double took = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const bool in_time = took < c.limit_s;
    const bool pass = o.pass && in_time;
    failed += !pass;
    std::printf("%s %s: %s [%.2f s, limit %g s%s]\n", pass ? "PASS" : "FAIL", c.title, o.detail.c_str(), took,
                c.limit_s, in_time ? "" : ", TOO SLOW");
    for (const auto& line : o.info) std::printf("     info: %s\n", line.c_str());
    std::fflush(stdout);
  }
  if (ran == 0) {
    std::fprintf(stderr, "no criterion named");
    for (const auto& p : pick) std::fprintf(stderr, " %s", p.c_str());
    std::fprintf(stderr, "\n");
    return 2;
  }
  std::printf("%d/%d criteria passed\n", ran - failed, ran);
  return failed ? 1 : 0;
}
