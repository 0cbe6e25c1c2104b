#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "morphnas/error.hpp"
#include "morphnas/external.hpp"
#include "morphnas/reinforce.hpp"
#include "morphnas/trainer.hpp"

namespace morphnas {

inline constexpr int kConfigSchemaVersion = 1;

enum class EvaluatorKind { surrogate, native, external };

std::string_view to_string(EvaluatorKind k);
std::optional<EvaluatorKind> parse_evaluator_kind(std::string_view s);

struct EvaluatorSelection {
  EvaluatorKind kind = EvaluatorKind::surrogate;
  ExternalConfig external;
  NativeConfig native;
};

/// Everything a `search` run needs, read from one JSON file.
struct SearchRunConfig {
  std::uint64_t seed = 0;
  SearchSettings settings;
  EvaluatorSelection evaluator;
  std::filesystem::path output_dir = "morphnas-run";

  /// Parses and validates. Unknown keys and bad values raise ConfigError
  /// naming the field. Relative output paths resolve against `base_dir`.
  static SearchRunConfig from_json(const nlohmann::json& j, const std::filesystem::path& base_dir = {});
  nlohmann::json to_json() const;
};

/// Reads a config file (ParseError -> ConfigError with the file name).
SearchRunConfig load_run_config(const std::filesystem::path& path);

/// Builds the evaluator. Throws EvaluatorUnavailable for an unreachable
/// external worker.
std::unique_ptr<Evaluator> make_evaluator(const EvaluatorSelection& sel);

// ---- History ------------------------------------------------------------------------

/// One JSON line of the history stream.
nlohmann::json candidate_record(const Candidate& c);
/// Inverse of candidate_record. Throws ParseError.
Candidate candidate_from_record(const nlohmann::json& j);

// ---- Checkpoints --------------------------------------------------------------------

struct Checkpoint {
  SearchState state;
  std::uint64_t history_bytes = 0;  // history length at the end of the episode
  nlohmann::json config;           // resolved config of the run that wrote it
};

/// Writes <dir>/ckpt-<episode>/ (policy, optimizer, evaluator state) and then
/// atomically replaces <dir>/checkpoint.json, which names that directory.
/// Older checkpoint directories are removed afterwards.
void save_checkpoint(const std::filesystem::path& dir, const Checkpoint& ckpt, const Evaluator& evaluator);

/// nullopt when there is no checkpoint.json. Loads evaluator state in place.
std::optional<Checkpoint> load_checkpoint(const std::filesystem::path& dir, const ActionTables& tables,
                                          Evaluator& evaluator);

// ---- search command -----------------------------------------------------------------

/// Raised by the halt_after_candidates hook.
class RunHalted : public Error {
 public:
  using Error::Error;
};

struct RunOptions {
  bool resume = false;
  /// Stop abruptly once this many candidates of the history have been written
  /// (simulates a crash; used by tests). Negative = off.
  long halt_after_candidates = -1;
};

/// Runs (or resumes) a search and writes history.jsonl, checkpoint/ and
/// report.json into config.output_dir.
SearchResult run_search_command(const SearchRunConfig& config, const RunOptions& options = {});

/// Final report: best and selected candidates with reward decomposition.
nlohmann::json final_report(const SearchRunConfig& config, const SearchResult& result);

// ---- report command -----------------------------------------------------------------

struct EpisodeRow {
  int episode = 0;
  int candidates = 0;
  int failed = 0;
  double best_reward = 0.0;
  double mean_reward = 0.0;
  double satisfied_fraction = 0.0;
};

struct ParetoPoint {
  std::string metric;  // params | mflops | intensity
  Candidate candidate;
  double value = 0.0;
};

struct HistoryReport {
  std::vector<EpisodeRow> episodes;
  std::vector<ParetoPoint> pareto;
  long corrupt_lines = 0;
  long reward_mismatches = 0;  // stored reward != P * prod V recomputed from the record
};

/// Indices of the non-dominated points, maximizing `perf` and minimizing
/// `cost` (or maximizing it when `maximize_cost`). Duplicates all survive.
std::vector<std::size_t> pareto_front(const std::vector<double>& perf, const std::vector<double>& cost,
                                      bool maximize_cost = false);

HistoryReport build_report(std::istream& history);
void write_episode_csv(std::ostream& out, const HistoryReport& r);
void write_pareto_csv(std::ostream& out, const HistoryReport& r);

}  // namespace morphnas
