// morphnas command line: search, estimate, eval, report.

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "morphnas/error.hpp"
#include "morphnas/orchestrator.hpp"

using namespace morphnas;
using nlohmann::json;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitFailure = 1;
constexpr int kExitConfig = 2;
constexpr int kExitUnavailable = 3;
constexpr int kExitHalted = 4;

void setup_logging() {
  auto logger = spdlog::stderr_color_mt("morphnas");
  spdlog::set_default_logger(logger);
  spdlog::set_level(spdlog::level::info);
  if (const char* env = std::getenv("MORPHNAS_LOG_LEVEL")) {
    const auto lvl = spdlog::level::from_str(env);
    // from_str maps unknown names to off; only accept "off" when asked for
    if (lvl != spdlog::level::off || std::string(env) == "off")
      spdlog::set_level(lvl);
    else
      spdlog::warn("ignoring MORPHNAS_LOG_LEVEL={}", env);
  }
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read file", path);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Architecture read_arch(const std::string& path) {
  try {
    return deserialize(read_file(path));
  } catch (const ParseError& e) {
    throw ConfigError(e.what(), path);
  } catch (const ValidationError& e) {
    throw ConfigError(e.what(), path);
  }
}

struct SearchArgs {
  std::string config;
  bool resume = false;
  std::optional<std::uint64_t> seed;
  std::optional<int> episodes, branches, steps, topk, parallelism;
  std::optional<std::string> output, evaluator, cmd, addr;
  long halt_after = -1;
};

int cmd_search(const SearchArgs& a) {
  json j;
  try {
    j = json::parse(read_file(a.config));
  } catch (const json::exception& e) {
    throw ConfigError(std::string("not valid JSON: ") + e.what(), a.config);
  }
  if (!j.is_object()) throw ConfigError("expected a JSON object", a.config);
  // command-line flags override the file
  if (a.seed) j["seed"] = *a.seed;
  auto set = [&](const char* section, const char* key, const json& v) {
    if (!j.contains(section)) j[section] = json::object();
    j[section][key] = v;
  };
  if (a.episodes) set("reinforce", "episodes", *a.episodes);
  if (a.branches) set("reinforce", "branches", *a.branches);
  if (a.steps) set("reinforce", "steps", *a.steps);
  if (a.topk) set("reinforce", "topk", *a.topk);
  if (a.parallelism) set("orchestrator", "parallelism", *a.parallelism);
  if (a.evaluator) set("evaluation", "evaluator", *a.evaluator);
  if (a.cmd) set("evaluation", "command", *a.cmd);
  if (a.addr) set("evaluation", "address", *a.addr);
  const std::filesystem::path base = std::filesystem::path(a.config).parent_path();
  auto cfg = SearchRunConfig::from_json(j, base);
  if (a.output) cfg.output_dir = *a.output;

  RunOptions opts;
  opts.resume = a.resume;
  opts.halt_after_candidates = a.halt_after;
  const auto result = run_search_command(cfg, opts);
  std::cout << final_report(cfg, result).dump(2) << '\n';
  return kExitOk;
}

int cmd_estimate(const std::string& path, const std::string& input, int classes) {
  const Architecture arch = read_arch(path);
  InputShape shape;
  try {
    shape = parse_input_shape(input);
  } catch (const ParseError& e) {
    throw ConfigError(e.what(), "--input");
  }
  ResourceUsage u;
  try {
    u = estimate(arch, shape, EstimateOptions{classes});
  } catch (const ShapeError& e) {
    throw ConfigError(e.what(), path);
  }
  json j = u.to_json();
  j["flops"] = u.flops;
  j["bytes"] = u.bytes;
  j["input"] = to_string(shape);
  j["mode"] = std::string(to_string(arch.mode));
  std::cout << j.dump(2) << '\n';
  return kExitOk;
}

struct EvalArgs {
  std::string arch;
  std::string evaluator = "surrogate";
  std::string cmd, addr;
  std::optional<std::string> input;
  std::optional<int> classes;
  std::optional<std::string> train_config;
  double timeout = 60.0;
  int retries = 2;
};

int cmd_eval(const EvalArgs& a) {
  const Architecture arch = read_arch(a.arch);
  EvaluatorSelection sel;
  auto kind = parse_evaluator_kind(a.evaluator);
  if (!kind) throw ConfigError("must be surrogate, native or external", "--evaluator");
  sel.kind = *kind;
  if (sel.kind == EvaluatorKind::external) {
    std::istringstream words(a.cmd);
    for (std::string w; words >> w;) sel.external.command.push_back(w);
    sel.external.address = a.addr;
    if (sel.external.command.empty() == sel.external.address.empty())
      throw ConfigError("external evaluation needs exactly one of --cmd / --addr", "--evaluator");
    sel.external.timeout_s = a.timeout;
    sel.external.retries = a.retries;
  }
  TrainConfig tc;
  if (a.train_config) {
    try {
      tc = TrainConfig::from_json(json::parse(read_file(*a.train_config)), *a.train_config);
    } catch (const json::exception& e) {
      throw ConfigError(std::string("not valid JSON: ") + e.what(), *a.train_config);
    }
  } else if (sel.kind == EvaluatorKind::native) {
    tc.input = sel.native.dataset.input();
    tc.classes = sel.native.dataset.classes;
  }
  if (a.input) {
    try {
      tc.input = parse_input_shape(*a.input);
    } catch (const ParseError& e) {
      throw ConfigError(e.what(), "--input");
    }
  }
  if (a.classes) tc.classes = *a.classes;
  tc.check("train_config");

  auto ev = make_evaluator(sel);
  const EvalResult r = ev->evaluate(EvalRequest{"cli-0", arch, tc, std::nullopt});
  std::cout << r.to_json().dump(2) << '\n';
  return r.ok() ? kExitOk : kExitFailure;
}

int cmd_report(const std::string& path, const std::string& out_dir) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read history", path);
  const HistoryReport r = build_report(in);
  if (r.corrupt_lines > 0) spdlog::warn("skipped {} corrupt history line(s)", r.corrupt_lines);
  if (r.reward_mismatches > 0)
    spdlog::error("{} record(s) store a reward that differs from P * prod V", r.reward_mismatches);
  write_episode_csv(std::cout, r);
  std::cout << '\n';
  write_pareto_csv(std::cout, r);
  std::cout << "# corrupt_lines," << r.corrupt_lines << '\n';
  if (!out_dir.empty()) {
    std::filesystem::create_directories(out_dir);
    std::ostringstream e, p;
    write_episode_csv(e, r);
    write_pareto_csv(p, r);
    write_file_atomic(std::filesystem::path(out_dir) / "episodes.csv", e.str());
    write_file_atomic(std::filesystem::path(out_dir) / "pareto.csv", p.str());
  }
  return r.reward_mismatches == 0 ? kExitOk : kExitFailure;
}

}  // namespace

int main(int argc, char** argv) {
  setup_logging();
  CLI::App app{"Progressive architecture search with morphing actions"};
  app.require_subcommand(1);

  SearchArgs sa;
  auto* search = app.add_subcommand("search", "run or resume a search from a config file");
  search->add_option("config", sa.config, "JSON config file")->required();
  search->add_flag("--resume", sa.resume, "continue from the checkpoint in the output directory");
  search->add_option("--seed", sa.seed, "root seed");
  search->add_option("--episodes", sa.episodes);
  search->add_option("--branches", sa.branches);
  search->add_option("--steps", sa.steps);
  search->add_option("--topk", sa.topk);
  search->add_option("--parallelism", sa.parallelism, "concurrent evaluations (0 = one per branch)");
  search->add_option("--output", sa.output, "output directory");
  search->add_option("--evaluator", sa.evaluator, "surrogate | native | external");
  search->add_option("--cmd", sa.cmd, "external worker command line");
  search->add_option("--addr", sa.addr, "external worker host:port");
  search->add_option("--halt-after", sa.halt_after, "stop after writing this many history lines (crash drill)");

  std::string est_path, est_input = "32x32x3";
  int est_classes = 0;
  auto* est = app.add_subcommand("estimate", "print the resource usage of an architecture");
  est->add_option("arch", est_path, "architecture JSON file")->required();
  est->add_option("--input", est_input, "HxWxC")->capture_default_str();
  est->add_option("--classes", est_classes, "include a classifier head with this many classes")->capture_default_str();

  EvalArgs ea;
  auto* ev = app.add_subcommand("eval", "evaluate one architecture");
  ev->add_option("arch", ea.arch, "architecture JSON file")->required();
  ev->add_option("--evaluator", ea.evaluator, "surrogate | native | external")->capture_default_str();
  ev->add_option("--cmd", ea.cmd, "external worker command line");
  ev->add_option("--addr", ea.addr, "external worker host:port");
  ev->add_option("--input", ea.input, "HxWxC");
  ev->add_option("--classes", ea.classes);
  ev->add_option("--train-config", ea.train_config, "train_config JSON file");
  ev->add_option("--timeout", ea.timeout, "seconds per attempt (external)")->capture_default_str();
  ev->add_option("--retries", ea.retries, "(external)")->capture_default_str();

  std::string rep_path, rep_out;
  auto* rep = app.add_subcommand("report", "summarize a history stream as CSV");
  rep->add_option("history", rep_path, "history.jsonl")->required();
  rep->add_option("--out", rep_out, "also write episodes.csv and pareto.csv here");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (*search) return cmd_search(sa);
    if (*est) return cmd_estimate(est_path, est_input, est_classes);
    if (*ev) return cmd_eval(ea);
    if (*rep) return cmd_report(rep_path, rep_out);
  } catch (const ConfigError& e) {
    spdlog::error("config error: {}", e.what());
    return kExitConfig;
  } catch (const ParseError& e) {
    spdlog::error("config error: {}", e.what());
    return kExitConfig;
  } catch (const ValidationError& e) {
    spdlog::error("config error: {}", e.what());
    return kExitConfig;
  } catch (const EvaluatorUnavailable& e) {
    spdlog::error("evaluator unavailable: {}", e.what());
    return kExitUnavailable;
  } catch (const RunHalted& e) {
    spdlog::warn("{}", e.what());
    return kExitHalted;
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return kExitFailure;
  }
  return kExitFailure;
}
