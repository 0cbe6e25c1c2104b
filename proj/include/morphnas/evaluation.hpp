#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>

#include <json.hpp>

#include "morphnas/arch.hpp"

namespace morphnas {

enum class Schedule { full, predictive };

std::string_view to_string(Schedule s);

/// Training recipe handed to an evaluator. `input` and `classes` describe the
/// dataset the candidate is scored on; the surrogate uses them for the
/// parameter count.
struct TrainConfig {
  Schedule schedule = Schedule::full;
  int max_epochs = 20;
  int batch_size = 16;
  double lr_max = 0.05;
  double lr_min = 0.001;
  int t0 = 10;
  int t_mul = 2;
  std::uint64_t dataset_seed = 0;
  InputShape input{32, 32, 3};
  int classes = 10;

  /// Desk-scale full schedule: 20 epochs, batch 16, lr 0.05 -> 0.001.
  static TrainConfig full_defaults();
  /// Desk-scale early-stop schedule: 10 epochs, batch x8, lr x8.
  static TrainConfig predictive_defaults();

  void check(const std::string& label = "train_config") const;
  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j, const std::string& label = "train_config");

  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

/// Position inside the warm-restart schedule.
struct RestartPosition {
  int restart = 0;      // 0-based restart index
  double t_cur = 0.0;   // epochs since this restart began
  double period = 0.0;  // T_i
};

RestartPosition restart_position(double epoch, const TrainConfig& cfg);

/// lr_min + (lr_max - lr_min)(1 + cos(pi t_cur / T_i)) / 2.
double cosine_annealing(double t_cur, double period, double lr_max, double lr_min);

/// Learning rate at a (fractional) epoch. At an exact restart boundary the new
/// period starts, so the value is lr_max.
double cosine_lr(double epoch, const TrainConfig& cfg);

/// Epochs at which a new period starts, up to and including `until`.
std::vector<int> restart_boundaries(const TrainConfig& cfg, int until);

struct EvalRequest {
  std::string id;
  Architecture architecture;
  TrainConfig train_config;
  std::optional<nlohmann::json> constraints_echo;

  nlohmann::json to_json() const;
  static EvalRequest from_json(const nlohmann::json& j);
};

enum class EvalStatus { ok, error };

struct EvalResult {
  std::string id;
  EvalStatus status = EvalStatus::ok;
  double performance = 0.0;
  nlohmann::json metrics = nlohmann::json::object();
  std::optional<std::string> error_message;

  bool ok() const noexcept { return status == EvalStatus::ok; }
  static EvalResult failure(std::string id, std::string message);

  nlohmann::json to_json() const;
  /// Throws ParseError on a malformed message, and when status is ok but the
  /// performance is missing or outside [0, 1].
  static EvalResult from_json(const nlohmann::json& j);
};

/// Produces P(X|D). The search calls end_step() once every candidate of a
/// search step has been evaluated, and begin_episode() before each episode.
class Evaluator {
 public:
  virtual ~Evaluator() = default;
  virtual std::string name() const = 0;
  virtual EvalResult evaluate(const EvalRequest& request) = 0;
  virtual void begin_episode(int /*episode*/) {}
  virtual void end_step(int /*step_stamp*/) {}
  /// Persistent state for checkpoints (e.g. the weight dictionary).
  virtual void save_state(const std::filesystem::path& /*dir*/) const {}
  virtual void load_state(const std::filesystem::path& /*dir*/) {}
};

// ---- Surrogate -------------------------------------------------------------

/// Terms of the surrogate score.
struct SurrogateTerms {
  int depth = 0;           // layers of the (expanded) layer net
  std::uint64_t params = 0;
  int families = 0;        // distinct of {conv, dep-sep, pool}
  double g_depth = 0.0, g_size = 0.0, g_mix = 0.0;
  double performance = 0.0;
};

/// P = 0.5 + 0.5 g_depth g_size g_mix with g_depth = exp(-(depth-12)^2/50),
/// g_size = exp(-(log10(params)-5.5)^2/2), g_mix = families/3. Params include
/// the classifier head for `classes` > 0.
SurrogateTerms surrogate_terms(const Architecture& arch, const InputShape& input, int classes);
double surrogate_performance(const Architecture& arch, const InputShape& input, int classes);

class SurrogateEvaluator final : public Evaluator {
 public:
  std::string name() const override { return "surrogate"; }
  EvalResult evaluate(const EvalRequest& request) override;
};

}  // namespace morphnas
