#include "morphnas/resources.hpp"

#include <cmath>

#include "morphnas/error.hpp"

namespace morphnas {

namespace {

int ceil_div(int a, int b) { return (a + b - 1) / b; }

std::uint64_t u64(long long v) { return static_cast<std::uint64_t>(v); }

struct AdapterCost {
  std::uint64_t params = 0;
  std::uint64_t flops = 0;
};

/// 1x1 convolution (with bias) mapping `from` onto `to`'s shape. Bias adds are
/// not counted as FLOPs, for any layer.
AdapterCost adapter_cost(const FeatureShape& from, const FeatureShape& to) {
  if (from == to) return {};
  const std::uint64_t cs = u64(from.channels), co = u64(to.channels);
  const std::uint64_t hw = u64(to.height) * u64(to.width);
  return {cs * co + co, 2 * cs * co * hw};
}

FeatureShape apply_activation_shape(FeatureShape s, Activation a) {
  if (a == Activation::crelu) s.channels *= 2;
  return s;
}

}  // namespace

nlohmann::json ResourceUsage::to_json() const {
  return {{"params", params}, {"mflops", mflops()}, {"flops_per_byte", intensity()}};
}

std::vector<LayerCost> layer_costs(const Architecture& arch, const InputShape& input) {
  if (arch.mode != ArchMode::layer_net) throw ValidationError("layer_costs requires a layer_net");
  const FeatureShape in_shape{input.channels, input.height, input.width};
  std::vector<LayerCost> costs;
  costs.reserve(arch.layers.size());
  auto shape_of = [&](int src) { return src < 0 ? in_shape : costs[src].output; };

  for (const auto& l : arch.layers) {
    LayerCost c;
    const FeatureShape x = shape_of(l.src1);
    const std::uint64_t cin = u64(x.channels);
    const std::uint64_t hw = u64(x.height) * u64(x.width);
    FeatureShape y = x;  // pre-activation output

    switch (l.op_kind) {
      case OpKind::conv2d: {
        const std::uint64_t taps = l.kernel == KernelAxis::square ? u64(l.filter_width) * u64(l.filter_width)
                                                                  : u64(l.filter_width);
        const std::uint64_t cout = u64(l.channels);
        y.channels = l.channels;
        c.params = taps * cin * cout + cout;
        c.flops = 2 * taps * cin * cout * hw;
        break;
      }
      case OpKind::dep_sep_conv2d: {
        const std::uint64_t k2 = u64(l.filter_width) * u64(l.filter_width);
        const std::uint64_t cout = u64(l.channels);
        y.channels = l.channels;
        c.params = k2 * cin + cin * cout + cout;
        c.flops = 2 * k2 * cin * hw + 2 * cin * cout * hw;
        break;
      }
      case OpKind::max_pool2d:
      case OpKind::avg_pool2d: {
        y.height = ceil_div(x.height, pool_stride_of(l));
        y.width = ceil_div(x.width, pool_stride_of(l));
        c.flops = u64(l.pool_width) * u64(l.pool_width) * y.size();
        break;
      }
      case OpKind::add: {
        const FeatureShape s = shape_of(l.src2);
        const auto a = adapter_cost(s, x);
        c.adapter = !(s == x);
        c.params += a.params;
        c.flops += a.flops + x.size();
        break;
      }
    }

    const FeatureShape out = apply_activation_shape(y, l.activation);
    if (l.activation != Activation::none) c.flops += out.size();

    if (l.op_kind != OpKind::add && l.src2 >= 0) {
      const FeatureShape s = shape_of(l.src2);
      const auto a = adapter_cost(s, out);
      c.adapter = !(s == out);
      c.params += a.params;
      c.flops += a.flops + out.size();
    }

    c.output = out;
    c.input_scalars = x.size() + (l.src2 >= 0 ? shape_of(l.src2).size() : 0);
    c.output_scalars = out.size();
    costs.push_back(c);
  }
  return costs;
}

ResourceUsage estimate(const Architecture& arch, const InputShape& input, const EstimateOptions& options) {
  const Architecture net = as_layer_net(arch, input);
  const auto costs = layer_costs(net, input);
  ResourceUsage u;
  std::uint64_t traffic = 0;
  for (const auto& c : costs) {
    u.params += c.params;
    u.flops += c.flops;
    traffic += c.params + c.input_scalars + c.output_scalars;
  }
  if (options.classifier_classes > 0) {
    const FeatureShape last = costs.back().output;
    const std::uint64_t ch = u64(last.channels), k = u64(options.classifier_classes);
    const std::uint64_t head_params = ch * k + k;
    u.params += head_params;
    u.flops += last.size() + 2 * ch * k;
    traffic += head_params + last.size() + k;
  }
  u.bytes = 4 * traffic;
  return u;
}

std::string_view to_string(Metric m) {
  switch (m) {
    case Metric::model_size:
      return "model_size";
    case Metric::compute_complexity:
      return "compute_complexity";
    case Metric::compute_intensity:
      return "compute_intensity";
  }
  return "?";
}

std::optional<Metric> parse_metric(std::string_view s) {
  if (s == "model_size") return Metric::model_size;
  if (s == "compute_complexity") return Metric::compute_complexity;
  if (s == "compute_intensity") return Metric::compute_intensity;
  return std::nullopt;
}

double metric_value(const ResourceUsage& usage, Metric m) {
  switch (m) {
    case Metric::model_size:
      return static_cast<double>(usage.params);
    case Metric::compute_complexity:
      return usage.mflops();
    case Metric::compute_intensity:
      return usage.intensity();
  }
  return 0.0;
}

void ConstraintSpec::check(const std::string& label) const {
  if (!lower && !upper) throw ConfigError("needs at least one of lower/upper", label);
  if (lower && !(*lower > 0.0 && std::isfinite(*lower))) throw ConfigError("lower bound must be positive", label);
  if (upper && !(*upper > 0.0 && std::isfinite(*upper))) throw ConfigError("upper bound must be positive", label);
  if (lower && upper && *lower > *upper)
    throw ConfigError("lower bound " + std::to_string(*lower) + " exceeds upper bound " + std::to_string(*upper), label);
  if (!(base_penalty >= 0.0 && base_penalty <= 1.0)) throw ConfigError("base_penalty must lie in [0, 1]", label);
}

nlohmann::json to_json(const ConstraintSpec& c) {
  nlohmann::json j{{"metric", to_string(c.metric)}, {"base_penalty", c.base_penalty}};
  j["lower"] = c.lower ? nlohmann::json(*c.lower) : nlohmann::json(nullptr);
  j["upper"] = c.upper ? nlohmann::json(*c.upper) : nlohmann::json(nullptr);
  return j;
}

ConstraintSpec constraint_from_json(const nlohmann::json& j, const std::string& label) {
  if (!j.is_object()) throw ConfigError("expected an object", label);
  ConstraintSpec c;
  for (const auto& [key, _] : j.items())
    if (key != "metric" && key != "lower" && key != "upper" && key != "base_penalty")
      throw ConfigError("unknown field '" + key + "'", label);
  if (!j.contains("metric") || !j["metric"].is_string()) throw ConfigError("missing metric", label);
  auto m = parse_metric(j["metric"].get<std::string>());
  if (!m) throw ConfigError("unknown metric '" + j["metric"].get<std::string>() + "'", label);
  c.metric = *m;
  auto bound = [&](const char* key) -> std::optional<double> {
    if (!j.contains(key) || j[key].is_null()) return std::nullopt;
    if (!j[key].is_number()) throw ConfigError(std::string(key) + " must be a number", label);
    return j[key].get<double>();
  };
  c.lower = bound("lower");
  c.upper = bound("upper");
  if (j.contains("base_penalty")) {
    if (!j["base_penalty"].is_number()) throw ConfigError("base_penalty must be a number", label);
    c.base_penalty = j["base_penalty"].get<double>();
  }
  c.check(label);
  return c;
}

double violation(double u, const ConstraintSpec& c) {
  double exponent = 0.0;
  if (c.upper) exponent = std::max(exponent, u / *c.upper - 1.0);
  if (c.lower) {
    if (!(u > 0.0)) throw DomainError("violation: usage must be positive when a lower bound is present");
    exponent = std::max(exponent, *c.lower / u - 1.0);
  }
  if (exponent == 0.0) return 1.0;
  return std::pow(c.base_penalty, exponent);
}

std::vector<double> violations(const ResourceUsage& usage, const ConstraintSet& cs) {
  std::vector<double> out;
  out.reserve(cs.size());
  for (const auto& c : cs) out.push_back(violation(metric_value(usage, c.metric), c));
  return out;
}

double reward_from_violations(double perf, const std::vector<double>& v) {
  double r = perf;
  for (double x : v) r *= x;
  return r;
}

double reward(double perf, const ResourceUsage& usage, const ConstraintSet& cs) {
  return reward_from_violations(perf, violations(usage, cs));
}

bool satisfies(const ResourceUsage& usage, const ConstraintSet& cs) {
  for (const auto& c : cs) {
    const double u = metric_value(usage, c.metric);
    if (c.upper && u > *c.upper) return false;
    if (c.lower && u < *c.lower) return false;
  }
  return true;
}

}  // namespace morphnas
