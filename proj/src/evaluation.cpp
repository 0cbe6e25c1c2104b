#include "morphnas/evaluation.hpp"

#include <cmath>
#include <numbers>
#include <set>

#include "morphnas/error.hpp"
#include "morphnas/resources.hpp"

namespace morphnas {

using nlohmann::json;

std::string_view to_string(Schedule s) { return s == Schedule::full ? "full" : "predictive"; }

TrainConfig TrainConfig::full_defaults() { return TrainConfig{}; }

TrainConfig TrainConfig::predictive_defaults() {
  TrainConfig c;
  c.schedule = Schedule::predictive;
  c.max_epochs = 10;
  c.batch_size = 8 * c.batch_size;
  c.lr_max = 8 * c.lr_max;
  c.lr_min = 8 * c.lr_min;
  return c;
}

void TrainConfig::check(const std::string& label) const {
  if (max_epochs < 1) throw ConfigError("max_epochs must be >= 1", label);
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1", label);
  if (!(lr_max > 0.0 && std::isfinite(lr_max))) throw ConfigError("lr_max must be positive", label);
  if (!(lr_min >= 0.0 && lr_min <= lr_max)) throw ConfigError("lr_min must lie in [0, lr_max]", label);
  if (t0 < 1) throw ConfigError("t0 must be >= 1", label);
  if (t_mul < 1) throw ConfigError("t_mul must be >= 1", label);
  if (classes < 0) throw ConfigError("classes must be >= 0", label);
}

json TrainConfig::to_json() const {
  return {{"schedule", to_string(schedule)}, {"max_epochs", max_epochs}, {"batch_size", batch_size},
          {"lr_max", lr_max},   {"lr_min", lr_min},   {"t0", t0},
          {"t_mul", t_mul},     {"dataset_seed", dataset_seed}, {"input", morphnas::to_string(input)},
          {"classes", classes}};
}

TrainConfig TrainConfig::from_json(const json& j, const std::string& label) {
  if (!j.is_object()) throw ConfigError("expected an object", label);
  TrainConfig c;
  if (j.contains("schedule") && j["schedule"] == "predictive") c = predictive_defaults();
  try {
    for (const auto& [key, value] : j.items()) {
      if (key == "schedule") {
        if (value != "full" && value != "predictive") throw ConfigError("schedule must be full or predictive", label);
      } else if (key == "max_epochs") c.max_epochs = value.get<int>();
      else if (key == "batch_size") c.batch_size = value.get<int>();
      else if (key == "lr_max") c.lr_max = value.get<double>();
      else if (key == "lr_min") c.lr_min = value.get<double>();
      else if (key == "t0") c.t0 = value.get<int>();
      else if (key == "t_mul") c.t_mul = value.get<int>();
      else if (key == "dataset_seed") c.dataset_seed = value.get<std::uint64_t>();
      else if (key == "input") c.input = parse_input_shape(value.get<std::string>());
      else if (key == "classes") c.classes = value.get<int>();
      else throw ConfigError("unknown field '" + key + "'", label);
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("wrong value type: ") + e.what(), label);
  } catch (const ParseError& e) {
    throw ConfigError(e.what(), label + ".input");
  }
  c.check(label);
  return c;
}

RestartPosition restart_position(double epoch, const TrainConfig& cfg) {
  if (epoch < 0.0) throw DomainError("epoch must be >= 0");
  RestartPosition p{0, epoch, static_cast<double>(cfg.t0)};
  while (p.t_cur >= p.period) {
    p.t_cur -= p.period;
    p.period *= cfg.t_mul;
    ++p.restart;
  }
  return p;
}

double cosine_annealing(double t_cur, double period, double lr_max, double lr_min) {
  return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + std::cos(std::numbers::pi * t_cur / period));
}

double cosine_lr(double epoch, const TrainConfig& cfg) {
  const auto p = restart_position(epoch, cfg);
  return cosine_annealing(p.t_cur, p.period, cfg.lr_max, cfg.lr_min);
}

std::vector<int> restart_boundaries(const TrainConfig& cfg, int until) {
  std::vector<int> out;
  long long at = cfg.t0, period = cfg.t0;
  while (at <= until) {
    out.push_back(static_cast<int>(at));
    period *= cfg.t_mul;
    at += period;
  }
  return out;
}

json EvalRequest::to_json() const {
  json j{{"type", "eval"},
         {"id", id},
         {"architecture", morphnas::to_json(architecture)},
         {"train_config", train_config.to_json()}};
  if (constraints_echo) j["constraints_echo"] = *constraints_echo;
  return j;
}

EvalRequest EvalRequest::from_json(const json& j) {
  if (!j.is_object()) throw ParseError("expected an object", "request");
  if (!j.contains("type") || j["type"] != "eval") throw ParseError("expected type 'eval'", "type");
  if (!j.contains("id") || !j["id"].is_string()) throw ParseError("missing string id", "id");
  if (!j.contains("architecture")) throw ParseError("missing architecture", "architecture");
  EvalRequest r;
  r.id = j["id"].get<std::string>();
  r.architecture = morphnas::from_json(j["architecture"]);
  try {
    r.train_config = j.contains("train_config") ? TrainConfig::from_json(j["train_config"]) : TrainConfig{};
  } catch (const ConfigError& e) {
    throw ParseError(e.what(), "train_config");
  }
  if (j.contains("constraints_echo")) r.constraints_echo = j["constraints_echo"];
  return r;
}

EvalResult EvalResult::failure(std::string id, std::string message) {
  EvalResult r;
  r.id = std::move(id);
  r.status = EvalStatus::error;
  r.error_message = std::move(message);
  return r;
}

json EvalResult::to_json() const {
  json j{{"type", "result"},
         {"id", id},
         {"status", ok() ? "ok" : "error"},
         {"performance", performance},
         {"metrics", metrics}};
  if (error_message) j["error_message"] = *error_message;
  return j;
}

EvalResult EvalResult::from_json(const json& j) {
  if (!j.is_object()) throw ParseError("expected an object", "result");
  if (!j.contains("type") || j["type"] != "result") throw ParseError("expected type 'result'", "type");
  if (!j.contains("id") || !j["id"].is_string()) throw ParseError("missing string id", "id");
  if (!j.contains("status") || (j["status"] != "ok" && j["status"] != "error"))
    throw ParseError("status must be ok or error", "status");
  EvalResult r;
  r.id = j["id"].get<std::string>();
  r.status = j["status"] == "ok" ? EvalStatus::ok : EvalStatus::error;
  if (j.contains("performance") && j["performance"].is_number()) r.performance = j["performance"].get<double>();
  else if (r.ok()) throw ParseError("ok result needs a numeric performance", "performance");
  if (r.ok() && !(r.performance >= 0.0 && r.performance <= 1.0))
    throw ParseError("performance outside [0, 1]", "performance");
  if (j.contains("metrics")) r.metrics = j["metrics"];
  if (j.contains("error_message") && j["error_message"].is_string())
    r.error_message = j["error_message"].get<std::string>();
  return r;
}

SurrogateTerms surrogate_terms(const Architecture& arch, const InputShape& input, int classes) {
  const Architecture net = as_layer_net(arch, input);
  SurrogateTerms t;
  t.depth = static_cast<int>(net.layers.size());
  t.params = estimate(arch, input, EstimateOptions{classes}).params;
  std::set<int> families;
  for (const auto& l : net.layers) {
    if (l.op_kind == OpKind::conv2d) families.insert(0);
    else if (l.op_kind == OpKind::dep_sep_conv2d) families.insert(1);
    else if (is_pool(l.op_kind)) families.insert(2);
  }
  t.families = static_cast<int>(families.size());
  const double dd = t.depth - 12.0;
  const double ds = std::log10(static_cast<double>(std::max<std::uint64_t>(t.params, 1))) - 5.5;
  t.g_depth = std::exp(-dd * dd / 50.0);
  t.g_size = std::exp(-ds * ds / 2.0);
  t.g_mix = t.families / 3.0;
  t.performance = 0.5 + 0.5 * t.g_depth * t.g_size * t.g_mix;
  return t;
}

double surrogate_performance(const Architecture& arch, const InputShape& input, int classes) {
  return surrogate_terms(arch, input, classes).performance;
}

EvalResult SurrogateEvaluator::evaluate(const EvalRequest& request) {
  try {
    require_valid(request.architecture, SearchDomains::any_capacity());
    const auto t = surrogate_terms(request.architecture, request.train_config.input, request.train_config.classes);
    EvalResult r;
    r.id = request.id;
    r.performance = t.performance;
    r.metrics = {{"depth", t.depth}, {"params", t.params}, {"families", t.families}};
    return r;
  } catch (const Error& e) {
    return EvalResult::failure(request.id, e.what());
  }
}

}  // namespace morphnas
