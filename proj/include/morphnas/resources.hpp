#pragma once

#include <cstdint>
#include <optional>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "morphnas/arch.hpp"

namespace morphnas {

/// Channel-height-width shape of a feature map.
struct FeatureShape {
  int channels = 0;
  int height = 0;
  int width = 0;

  std::uint64_t size() const noexcept {
    return static_cast<std::uint64_t>(channels) * static_cast<std::uint64_t>(height) * static_cast<std::uint64_t>(width);
  }
  friend bool operator==(const FeatureShape&, const FeatureShape&) = default;
};

/// Per-layer accounting. Adapters are the implicit 1x1 convolutions placed
/// wherever a skip or add source disagrees in shape with its target.
struct LayerCost {
  FeatureShape output;
  std::uint64_t params = 0;
  std::uint64_t flops = 0;
  std::uint64_t input_scalars = 0;
  std::uint64_t output_scalars = 0;
  bool adapter = false;
};

struct ResourceUsage {
  std::uint64_t params = 0;  // trainable scalars
  std::uint64_t flops = 0;   // per inference
  std::uint64_t bytes = 0;   // modeled slow-memory traffic, 4-byte scalars

  double mflops() const noexcept { return static_cast<double>(flops) / 1e6; }
  double intensity() const noexcept { return bytes == 0 ? 0.0 : static_cast<double>(flops) / static_cast<double>(bytes); }

  /// {params, mflops, flops_per_byte}
  nlohmann::json to_json() const;
};

struct EstimateOptions {
  /// When positive, include the global-average-pool + linear classifier head.
  int classifier_classes = 0;
};

/// Shape inference for a layer_net. Convs are same-padded stride 1; pools use
/// stride = pool width (or pool_stride) with ceil division.
std::vector<LayerCost> layer_costs(const Architecture& layer_net, const InputShape& input);

/// Cell nets are expanded with expand_stack first (may throw ShapeError).
ResourceUsage estimate(const Architecture& arch, const InputShape& input, const EstimateOptions& options = {});

// ---- Constraints and reward ---------------------------------------------

enum class Metric { model_size, compute_complexity, compute_intensity };

std::string_view to_string(Metric m);
std::optional<Metric> parse_metric(std::string_view s);

/// Value of U_i in the constraint's unit: raw parameter count, MFLOPs, or FLOPs/byte.
double metric_value(const ResourceUsage& usage, Metric m);

struct ConstraintSpec {
  Metric metric = Metric::model_size;
  std::optional<double> lower;
  std::optional<double> upper;
  double base_penalty = 0.9;

  /// Throws ConfigError naming `label` when an invariant is broken.
  void check(const std::string& label = "constraint") const;
};

using ConstraintSet = std::vector<ConstraintSpec>;

nlohmann::json to_json(const ConstraintSpec& c);
ConstraintSpec constraint_from_json(const nlohmann::json& j, const std::string& label = "constraint");

/// Soft violation p^max(max(0, u/C_u - 1), max(0, C_l/u - 1)); absent bounds
/// contribute 0 and p^0 = 1 even for p = 0. Throws DomainError for u <= 0
/// when a lower bound is present.
double violation(double u, const ConstraintSpec& c);

std::vector<double> violations(const ResourceUsage& usage, const ConstraintSet& cs);

/// perf * prod(violations), multiplied in order.
double reward_from_violations(double perf, const std::vector<double>& v);
double reward(double perf, const ResourceUsage& usage, const ConstraintSet& cs);

/// Every constraint holds exactly (all V = 1 for p < 1).
bool satisfies(const ResourceUsage& usage, const ConstraintSet& cs);

}  // namespace morphnas
