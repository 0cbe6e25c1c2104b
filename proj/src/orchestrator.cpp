#include "morphnas/orchestrator.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include <spdlog/spdlog.h>

#include "morphnas/error.hpp"

namespace morphnas {

using nlohmann::json;
namespace fs = std::filesystem;

std::string_view to_string(EvaluatorKind k) {
  switch (k) {
    case EvaluatorKind::surrogate: return "surrogate";
    case EvaluatorKind::native: return "native";
    case EvaluatorKind::external: return "external";
  }
  return "?";
}

std::optional<EvaluatorKind> parse_evaluator_kind(std::string_view s) {
  if (s == "surrogate") return EvaluatorKind::surrogate;
  if (s == "native") return EvaluatorKind::native;
  if (s == "external") return EvaluatorKind::external;
  return std::nullopt;
}

namespace {

/// Typed access with the config path in every error.
class Section {
 public:
  Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError("expected an object", path_);
  }

  void allow(std::initializer_list<const char*> keys) const {
    for (const auto& [k, _] : j_.items()) {
      bool ok = false;
      for (const char* a : keys) ok = ok || k == a;
      if (!ok) throw ConfigError("unknown field '" + k + "'", path_);
    }
  }

  bool has(const char* key) const { return j_.contains(key); }
  const json& raw(const char* key) const { return j_.at(key); }
  std::string at(const char* key) const { return path_.empty() ? key : path_ + "." + key; }

  template <typename T>
  void get(const char* key, T& out) const {
    if (!j_.contains(key)) return;
    const json& v = j_[key];
    if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) throw ConfigError("expected true or false", at(key));
    } else if constexpr (std::is_integral_v<T>) {
      if (!v.is_number_integer()) throw ConfigError("expected an integer", at(key));
      if constexpr (std::is_unsigned_v<T>)
        if (!v.is_number_unsigned() && v.get<long long>() < 0) throw ConfigError("must be >= 0", at(key));
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!v.is_number()) throw ConfigError("expected a number", at(key));
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!v.is_string()) throw ConfigError("expected a string", at(key));
    }
    try {
      out = v.get<T>();
    } catch (const json::exception& e) {
      throw ConfigError(e.what(), at(key));
    }
  }

 private:
  const json& j_;
  std::string path_;
};

json constraints_json(const ConstraintSet& cs) {
  json a = json::array();
  for (const auto& c : cs) a.push_back(to_json(c));
  return a;
}

std::vector<std::string> split_command(const std::string& s) {
  std::istringstream in(s);
  std::vector<std::string> out;
  for (std::string w; in >> w;) out.push_back(w);
  return out;
}

}  // namespace

SearchRunConfig SearchRunConfig::from_json(const json& j, const fs::path& base_dir) {
  Section root(j, "");
  root.allow({"schema_version", "seed", "mode", "action_space", "reinforce", "initial", "policy", "constraints",
              "evaluation", "orchestrator"});
  if (root.has("schema_version")) {
    int v = 0;
    root.get("schema_version", v);
    if (v != kConfigSchemaVersion)
      throw ConfigError("unsupported schema_version " + std::to_string(v), "schema_version");
  }
  if (!root.has("seed")) throw ConfigError("a root seed is required", "seed");
  SearchRunConfig c;
  root.get("seed", c.seed);
  auto& s = c.settings;
  if (root.has("mode")) {
    std::string m;
    root.get("mode", m);
    auto mode = parse_arch_mode(m);
    if (!mode) throw ConfigError("mode must be layer_net or cell_net, got '" + m + "'", "mode");
    s.mode = *mode;
  }

  if (root.has("action_space")) {
    Section a(root.raw("action_space"), "action_space");
    a.allow({"scale_table", "filter_delta_table", "num_parts", "max_layers", "max_branches"});
    a.get("scale_table", s.tables.scale_table);
    a.get("filter_delta_table", s.tables.filter_delta_table);
    a.get("num_parts", s.tables.num_parts);
    a.get("max_layers", s.tables.domains.max_layers);
    a.get("max_branches", s.tables.domains.max_branches);
  }
  s.tables.check();

  s.episode = EpisodeConfig::defaults(s.mode);
  bool topk_given = false;
  if (root.has("reinforce")) {
    Section r(root.raw("reinforce"), "reinforce");
    r.allow({"branches", "steps", "episodes", "topk", "learning_rate", "baseline_decay"});
    r.get("branches", s.episode.branches);
    r.get("steps", s.episode.steps);
    r.get("episodes", s.episode.episodes);
    r.get("learning_rate", s.episode.learning_rate);
    r.get("baseline_decay", s.baseline_decay);
    topk_given = r.has("topk");
    r.get("topk", s.episode.topk);
  }
  if (!topk_given) s.episode.topk = std::max(1, std::min(s.episode.topk, s.episode.branches * s.episode.steps));
  s.episode.seed = c.seed;
  s.episode.check("reinforce");
  if (!(s.baseline_decay >= 0.0 && s.baseline_decay < 1.0))
    throw ConfigError("must lie in [0, 1)", "reinforce.baseline_decay");

  if (root.has("initial")) {
    Section r(root.raw("initial"), "initial");
    r.allow({"min_depth", "max_depth", "skip_probability", "propagate_probability"});
    r.get("min_depth", s.initial.min_depth);
    r.get("max_depth", s.initial.max_depth);
    r.get("skip_probability", s.initial.skip_probability);
    r.get("propagate_probability", s.initial.propagate_probability);
  }
  if (s.initial.min_depth < 1 || s.initial.max_depth < s.initial.min_depth)
    throw ConfigError("need 1 <= min_depth <= max_depth", "initial");
  s.initial.domains = s.tables.domains;
  if (s.initial.max_depth > (s.mode == ArchMode::layer_net ? s.tables.domains.max_layers : s.tables.domains.max_branches))
    throw ConfigError("max_depth exceeds the action space capacity", "initial.max_depth");

  if (root.has("policy")) s.policy = PolicyConfig::from_json(root.raw("policy"));

  if (root.has("constraints")) {
    const json& cs = root.raw("constraints");
    if (!cs.is_array()) throw ConfigError("expected an array", "constraints");
    for (std::size_t i = 0; i < cs.size(); ++i)
      s.constraints.push_back(constraint_from_json(cs[i], "constraints[" + std::to_string(i) + "]"));
  }

  auto& ev = c.evaluator;
  bool input_given = false, classes_given = false;
  if (root.has("evaluation")) {
    Section e(root.raw("evaluation"), "evaluation");
    e.allow({"evaluator", "train_config", "command", "address", "timeout_s", "handshake_timeout_s", "retries",
             "dataset", "share_weights", "clear_per_episode"});
    if (e.has("evaluator")) {
      std::string k;
      e.get("evaluator", k);
      auto kind = parse_evaluator_kind(k);
      if (!kind) throw ConfigError("must be surrogate, native or external, got '" + k + "'", "evaluation.evaluator");
      ev.kind = *kind;
    }
    if (e.has("train_config")) {
      const json& tc = e.raw("train_config");
      s.train = TrainConfig::from_json(tc, "evaluation.train_config");
      input_given = tc.is_object() && tc.contains("input");
      classes_given = tc.is_object() && tc.contains("classes");
    }
    if (e.has("command")) {
      const json& cmd = e.raw("command");
      if (cmd.is_string())
        ev.external.command = split_command(cmd.get<std::string>());
      else
        e.get("command", ev.external.command);
    }
    e.get("address", ev.external.address);
    e.get("timeout_s", ev.external.timeout_s);
    e.get("handshake_timeout_s", ev.external.handshake_timeout_s);
    e.get("retries", ev.external.retries);
    if (e.has("dataset")) {
      Section d(e.raw("dataset"), "evaluation.dataset");
      d.allow({"classes", "height", "width", "channels", "train_size", "val_size", "noise"});
      auto& ds = ev.native.dataset;
      d.get("classes", ds.classes);
      d.get("height", ds.height);
      d.get("width", ds.width);
      d.get("channels", ds.channels);
      d.get("train_size", ds.train_size);
      d.get("val_size", ds.val_size);
      d.get("noise", ds.noise);
      if (ds.classes < 2 || ds.height < 1 || ds.width < 1 || ds.channels < 1 || ds.train_size < 1 || ds.val_size < 1 ||
          !(ds.noise >= 0.0))
        throw ConfigError("sizes must be positive, classes >= 2, noise >= 0", "evaluation.dataset");
    }
    e.get("share_weights", ev.native.share_weights);
    e.get("clear_per_episode", ev.native.clear_per_episode);
  }
  ev.native.seed = derive_seed(c.seed, "native");
  if (ev.kind == EvaluatorKind::native) {
    // candidates are scored on the synthetic dataset unless told otherwise
    if (!input_given) s.train.input = ev.native.dataset.input();
    if (!classes_given) s.train.classes = ev.native.dataset.classes;
  }
  if (ev.kind == EvaluatorKind::external) {
    if (ev.external.command.empty() == ev.external.address.empty())
      throw ConfigError("set exactly one of command / address", "evaluation");
    if (!(ev.external.timeout_s > 0) || !(ev.external.handshake_timeout_s > 0))
      throw ConfigError("timeouts must be positive", "evaluation.timeout_s");
    if (ev.external.retries < 0) throw ConfigError("must be >= 0", "evaluation.retries");
  }

  if (root.has("orchestrator")) {
    Section o(root.raw("orchestrator"), "orchestrator");
    o.allow({"parallelism", "output_dir"});
    o.get("parallelism", s.parallelism);
    if (s.parallelism < 0) throw ConfigError("must be >= 0 (0 = one slot per branch)", "orchestrator.parallelism");
    std::string out;
    o.get("output_dir", out);
    if (!out.empty()) c.output_dir = out;
  }
  if (c.output_dir.is_relative() && !base_dir.empty()) c.output_dir = base_dir / c.output_dir;
  return c;
}

json SearchRunConfig::to_json() const {
  const auto& s = settings;
  json j;
  j["schema_version"] = kConfigSchemaVersion;
  j["seed"] = seed;
  j["mode"] = std::string(morphnas::to_string(s.mode));
  j["action_space"] = {{"scale_table", s.tables.scale_table},
                       {"filter_delta_table", s.tables.filter_delta_table},
                       {"num_parts", s.tables.num_parts},
                       {"max_layers", s.tables.domains.max_layers},
                       {"max_branches", s.tables.domains.max_branches}};
  j["reinforce"] = {{"branches", s.episode.branches},
                    {"steps", s.episode.steps},
                    {"episodes", s.episode.episodes},
                    {"topk", s.episode.topk},
                    {"learning_rate", s.episode.learning_rate},
                    {"baseline_decay", s.baseline_decay}};
  j["initial"] = {{"min_depth", s.initial.min_depth},
                  {"max_depth", s.initial.max_depth},
                  {"skip_probability", s.initial.skip_probability},
                  {"propagate_probability", s.initial.propagate_probability}};
  j["policy"] = s.policy.to_json();
  j["constraints"] = constraints_json(s.constraints);
  json e = {{"evaluator", std::string(morphnas::to_string(evaluator.kind))}, {"train_config", s.train.to_json()}};
  if (evaluator.kind == EvaluatorKind::external) {
    if (!evaluator.external.command.empty()) e["command"] = evaluator.external.command;
    if (!evaluator.external.address.empty()) e["address"] = evaluator.external.address;
    e["timeout_s"] = evaluator.external.timeout_s;
    e["handshake_timeout_s"] = evaluator.external.handshake_timeout_s;
    e["retries"] = evaluator.external.retries;
  }
  if (evaluator.kind == EvaluatorKind::native) {
    const auto& d = evaluator.native.dataset;
    e["dataset"] = {{"classes", d.classes},       {"height", d.height},     {"width", d.width},
                    {"channels", d.channels},     {"train_size", d.train_size}, {"val_size", d.val_size},
                    {"noise", d.noise}};
    e["share_weights"] = evaluator.native.share_weights;
    e["clear_per_episode"] = evaluator.native.clear_per_episode;
  }
  j["evaluation"] = e;
  j["orchestrator"] = {{"parallelism", s.parallelism}, {"output_dir", output_dir.string()}};
  return j;
}

SearchRunConfig load_run_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file", path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("not valid JSON: ") + e.what(), path.string());
  }
  return SearchRunConfig::from_json(j, path.parent_path());
}

std::unique_ptr<Evaluator> make_evaluator(const EvaluatorSelection& sel) {
  switch (sel.kind) {
    case EvaluatorKind::surrogate: return std::make_unique<SurrogateEvaluator>();
    case EvaluatorKind::native: return std::make_unique<NativeEvaluator>(sel.native);
    case EvaluatorKind::external: return std::make_unique<ExternalEvaluator>(sel.external);
  }
  throw ConfigError("unknown evaluator", "evaluation.evaluator");
}

// ---- history ----

json candidate_record(const Candidate& c) {
  json j;
  j["episode"] = c.episode;
  j["branch"] = c.branch;
  j["step"] = c.step;
  j["id"] = c.id();
  j["arch_ref"] = arch_ref(c.arch);
  j["perf"] = c.performance;
  j["params"] = c.usage.params;
  j["flops"] = c.usage.flops;
  j["bytes"] = c.usage.bytes;
  j["mflops"] = c.usage.mflops();
  j["intensity"] = c.usage.intensity();
  j["violations"] = c.violations;
  j["satisfied"] = c.satisfied;
  j["reward"] = c.reward;
  j["failed"] = c.failed;
  if (c.failed) j["error"] = c.error;
  j["metrics"] = c.metrics;
  j["arch"] = to_json(c.arch);
  j["action"] = action_log_record(c.step, c.action);
  return j;
}

Candidate candidate_from_record(const json& j) {
  try {
    Candidate c;
    c.episode = j.at("episode").get<int>();
    c.branch = j.at("branch").get<int>();
    c.step = j.at("step").get<int>();
    c.arch = from_json(j.at("arch"));
    c.serialized = serialize(c.arch);
    c.performance = j.at("perf").get<double>();
    c.usage.params = j.at("params").get<std::uint64_t>();
    c.usage.flops = j.at("flops").get<std::uint64_t>();
    c.usage.bytes = j.at("bytes").get<std::uint64_t>();
    c.violations = j.at("violations").get<std::vector<double>>();
    c.satisfied = j.at("satisfied").get<bool>();
    c.reward = j.at("reward").get<double>();
    c.failed = j.at("failed").get<bool>();
    if (c.failed) c.error = j.value("error", "");
    c.metrics = j.value("metrics", json::object());
    c.action = bundle_from_json(j.at("action"));
    return c;
  } catch (const json::exception& e) {
    throw ParseError(std::string("bad history record: ") + e.what());
  } catch (const ValidationError& e) {
    throw ParseError(std::string("bad history record: ") + e.what());
  }
}

// ---- checkpoints ----

namespace {

json optional_record(const std::optional<Candidate>& c) { return c ? candidate_record(*c) : json(nullptr); }

std::optional<Candidate> optional_candidate(const json& j) {
  if (j.is_null()) return std::nullopt;
  return candidate_from_record(j);
}

/// Parts of the config that change the course of the search.
json search_identity(json cfg) {
  cfg.erase("orchestrator");
  if (cfg.contains("reinforce")) cfg["reinforce"].erase("episodes");
  if (cfg.contains("evaluation")) {
    auto& e = cfg["evaluation"];
    for (const char* k : {"command", "address", "timeout_s", "handshake_timeout_s", "retries"}) e.erase(k);
  }
  return cfg;
}

}  // namespace

void save_checkpoint(const fs::path& dir, const Checkpoint& ckpt, const Evaluator& evaluator) {
  const std::string name = "ckpt-" + std::to_string(ckpt.state.next_episode);
  const fs::path sub = dir / name;
  std::error_code ec;
  fs::remove_all(sub, ec);
  fs::create_directories(sub / "evaluator");
  save_policy(sub / "policy.bin", ckpt.state.policy);
  ckpt.state.optimizer.save(sub / "optimizer.bin");
  evaluator.save_state(sub / "evaluator");
  json seeds = json::array();
  for (const auto& a : ckpt.state.seeds) seeds.push_back(to_json(a));
  json j = {{"schema_version", kConfigSchemaVersion},
            {"next_episode", ckpt.state.next_episode},
            {"directory", name},
            {"baseline", ckpt.state.baseline.to_json()},
            {"seeds", seeds},
            {"best", optional_record(ckpt.state.best)},
            {"selected", optional_record(ckpt.state.selected)},
            {"history_bytes", ckpt.history_bytes},
            {"evaluator", evaluator.name()},
            {"config", ckpt.config}};
  write_file_atomic(dir / "checkpoint.json", j.dump(1) + "\n");
  // only the directory named by checkpoint.json is live now
  for (const auto& entry : fs::directory_iterator(dir)) {
    const auto n = entry.path().filename().string();
    if (entry.is_directory() && n.rfind("ckpt-", 0) == 0 && n != name) fs::remove_all(entry.path(), ec);
  }
}

std::optional<Checkpoint> load_checkpoint(const fs::path& dir, const ActionTables& tables, Evaluator& evaluator) {
  const fs::path file = dir / "checkpoint.json";
  if (!fs::exists(file)) return std::nullopt;
  std::ifstream in(file);
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw IoError(file.string() + ": " + e.what());
  }
  try {
    Checkpoint c;
    const fs::path sub = dir / j.at("directory").get<std::string>();
    c.state.next_episode = j.at("next_episode").get<int>();
    c.state.baseline = BaselineState::from_json(j.at("baseline"));
    for (const auto& a : j.at("seeds")) c.state.seeds.push_back(from_json(a));
    c.state.best = optional_candidate(j.at("best"));
    c.state.selected = optional_candidate(j.at("selected"));
    c.history_bytes = j.at("history_bytes").get<std::uint64_t>();
    c.config = j.at("config");
    if (j.at("evaluator").get<std::string>() != evaluator.name())
      throw IoError("checkpoint was written with the " + j.at("evaluator").get<std::string>() + " evaluator");
    c.state.policy = load_policy(sub / "policy.bin", tables);
    c.state.optimizer = OptimizerState::load(sub / "optimizer.bin");
    evaluator.load_state(sub / "evaluator");
    return c;
  } catch (const json::exception& e) {
    throw IoError(file.string() + ": " + e.what());
  } catch (const ParseError& e) {
    throw IoError(file.string() + ": " + e.what());
  }
}

// ---- search command ----

SearchResult run_search_command(const SearchRunConfig& config, const RunOptions& options) {
  const fs::path out = config.output_dir;
  fs::create_directories(out);
  const fs::path history_path = out / "history.jsonl";
  const fs::path ckpt_dir = out / "checkpoint";
  const json cfg_json = config.to_json();
  write_file_atomic(out / "config.json", cfg_json.dump(2) + "\n");

  auto evaluator = make_evaluator(config.evaluator);
  std::optional<SearchState> resume;
  if (options.resume) {
    if (auto ck = load_checkpoint(ckpt_dir, config.settings.tables, *evaluator)) {
      if (search_identity(ck->config) != search_identity(cfg_json))
        throw ConfigError("the checkpoint in " + ckpt_dir.string() + " was written by a different configuration",
                          "resume");
      // drop lines of the episode that was cut short
      if (fs::exists(history_path)) fs::resize_file(history_path, ck->history_bytes);
      spdlog::info("resuming at episode {}", ck->state.next_episode);
      resume = std::move(ck->state);
    } else {
      spdlog::info("no checkpoint in {}; starting fresh", ckpt_dir.string());
    }
  }
  if (!resume) {
    std::error_code ec;
    fs::remove_all(ckpt_dir, ec);
  }
  fs::create_directories(ckpt_dir);

  std::ofstream history(history_path, resume ? std::ios::app | std::ios::binary : std::ios::trunc | std::ios::binary);
  if (!history) throw IoError("cannot write " + history_path.string());
  long written = 0;
  SearchHooks hooks;
  hooks.on_candidate = [&](const Candidate& c) {
    history << candidate_record(c).dump() << '\n';
    history.flush();
    if (!history) throw IoError("write failed: " + history_path.string());
    ++written;
    if (options.halt_after_candidates >= 0 && written >= options.halt_after_candidates)
      throw RunHalted("halted after " + std::to_string(written) + " candidates");
  };
  hooks.on_episode_end = [&](const SearchState& st) {
    history.flush();
    Checkpoint ck{st, static_cast<std::uint64_t>(fs::file_size(history_path)), cfg_json};
    save_checkpoint(ckpt_dir, ck, *evaluator);
  };
  SearchResult result = run_search(config.settings, *evaluator, hooks, std::move(resume));
  history.close();
  // the full history, including episodes from before a resume
  result.history.clear();
  {
    std::ifstream in(history_path);
    for (std::string line; std::getline(in, line);)
      if (!line.empty()) result.history.push_back(candidate_from_record(json::parse(line)));
  }
  write_file_atomic(out / "report.json", final_report(config, result).dump(2) + "\n");
  return result;
}

json final_report(const SearchRunConfig& config, const SearchResult& result) {
  auto describe = [&](const Candidate& c) {
    json v = json::array();
    for (std::size_t i = 0; i < config.settings.constraints.size() && i < c.violations.size(); ++i) {
      json item = to_json(config.settings.constraints[i]);
      item["usage"] = metric_value(c.usage, config.settings.constraints[i].metric);
      item["violation"] = c.violations[i];
      v.push_back(item);
    }
    return json{{"id", c.id()},
                {"arch_ref", arch_ref(c.arch)},
                {"architecture", to_json(c.arch)},
                {"usage", c.usage.to_json()},
                {"satisfied", c.satisfied},
                {"reward", {{"performance", c.performance}, {"violations", v}, {"reward", c.reward}}}};
  };
  json j;
  j["evaluator"] = std::string(to_string(config.evaluator.kind));
  j["episodes"] = result.state.next_episode;
  j["candidates"] = result.history.size();
  j["best"] = result.history.empty() ? json(nullptr) : describe(result.best);
  j["selected"] = result.selected ? describe(*result.selected) : json(nullptr);
  return j;
}

// ---- report command ----

std::vector<std::size_t> pareto_front(const std::vector<double>& perf, const std::vector<double>& cost,
                                      bool maximize_cost) {
  std::vector<std::size_t> keep;
  auto better_cost = [&](double a, double b) { return maximize_cost ? a > b : a < b; };
  for (std::size_t i = 0; i < perf.size(); ++i) {
    bool dominated = false;
    for (std::size_t k = 0; k < perf.size() && !dominated; ++k) {
      if (k == i) continue;
      const bool no_worse = perf[k] >= perf[i] && (cost[k] == cost[i] || better_cost(cost[k], cost[i]));
      const bool strictly = perf[k] > perf[i] || better_cost(cost[k], cost[i]);
      dominated = no_worse && strictly;
    }
    if (!dominated) keep.push_back(i);
  }
  return keep;
}

HistoryReport build_report(std::istream& history) {
  HistoryReport r;
  std::vector<Candidate> all;
  for (std::string line; std::getline(history, line);) {
    if (line.empty()) continue;
    try {
      all.push_back(candidate_from_record(json::parse(line)));
    } catch (const std::exception&) {
      ++r.corrupt_lines;
    }
  }
  std::map<int, std::vector<const Candidate*>> by_episode;
  for (const auto& c : all) {
    by_episode[c.episode].push_back(&c);
    const double expect = c.failed ? 0.0 : reward_from_violations(c.performance, c.violations);
    if (expect != c.reward) ++r.reward_mismatches;
  }
  for (const auto& [e, cs] : by_episode) {
    EpisodeRow row;
    row.episode = e;
    row.candidates = static_cast<int>(cs.size());
    double sum = 0.0;
    int sat = 0;
    bool first = true;
    for (const Candidate* c : cs) {
      sum += c->reward;
      if (c->failed) ++row.failed;
      if (c->satisfied) ++sat;
      if (first || c->reward > row.best_reward) row.best_reward = c->reward;
      first = false;
    }
    row.mean_reward = sum / static_cast<double>(cs.size());
    row.satisfied_fraction = static_cast<double>(sat) / static_cast<double>(cs.size());
    r.episodes.push_back(row);
  }
  // Pareto fronts over distinct, successfully evaluated architectures
  std::vector<const Candidate*> pool;
  std::set<std::string> seen;
  for (const auto& c : all)
    if (!c.failed && seen.insert(c.serialized).second) pool.push_back(&c);
  struct Axis {
    const char* name;
    bool maximize;
    double (*value)(const ResourceUsage&);
  };
  const Axis axes[] = {
      {"params", false, [](const ResourceUsage& u) { return static_cast<double>(u.params); }},
      {"mflops", false, [](const ResourceUsage& u) { return u.mflops(); }},
      {"intensity", true, [](const ResourceUsage& u) { return u.intensity(); }},
  };
  for (const auto& axis : axes) {
    std::vector<double> perf, cost;
    for (const Candidate* c : pool) {
      perf.push_back(c->performance);
      cost.push_back(axis.value(c->usage));
    }
    auto idx = pareto_front(perf, cost, axis.maximize);
    std::vector<ParetoPoint> pts;
    for (auto i : idx) pts.push_back({axis.name, *pool[i], cost[i]});
    std::sort(pts.begin(), pts.end(), [](const ParetoPoint& a, const ParetoPoint& b) {
      if (a.value != b.value) return a.value < b.value;
      return a.candidate.serialized < b.candidate.serialized;
    });
    r.pareto.insert(r.pareto.end(), pts.begin(), pts.end());
  }
  return r;
}

namespace {
std::string num(double x) { return json(x).dump(); }
}  // namespace

void write_episode_csv(std::ostream& out, const HistoryReport& r) {
  out << "episode,candidates,failed,best_reward,mean_reward,satisfied_fraction\n";
  for (const auto& e : r.episodes)
    out << e.episode << ',' << e.candidates << ',' << e.failed << ',' << num(e.best_reward) << ','
        << num(e.mean_reward) << ',' << num(e.satisfied_fraction) << '\n';
}

void write_pareto_csv(std::ostream& out, const HistoryReport& r) {
  out << "metric,value,performance,reward,id,arch_ref\n";
  for (const auto& p : r.pareto)
    out << p.metric << ',' << num(p.value) << ',' << num(p.candidate.performance) << ',' << num(p.candidate.reward)
        << ',' << p.candidate.id() << ',' << arch_ref(p.candidate.arch) << '\n';
}

}  // namespace morphnas
