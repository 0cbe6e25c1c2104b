#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "morphnas/actions.hpp"
#include "morphnas/rng.hpp"
#include "morphnas/tensor.hpp"

namespace morphnas {

/// Sizes of the controller. Defaults: 32-unit feature embeddings and network
/// encoder, 128-unit scale and insert decoders.
struct PolicyConfig {
  int embed_dim = 32;
  int encoder_hidden = 32;
  int scale_hidden = 128;
  int insert_hidden = 128;
  double init_range = 0.1;

  nlohmann::json to_json() const;
  static PolicyConfig from_json(const nlohmann::json& j);
  friend bool operator==(const PolicyConfig&, const PolicyConfig&) = default;
};

/// All controller weights as named tensors, for one search mode.
struct PolicyParams {
  PolicyConfig config;
  ArchMode mode = ArchMode::layer_net;
  NamedTensors tensors;
};

/// Fresh parameters, every entry uniform in [-init_range, init_range].
PolicyParams init_policy(const PolicyConfig& config, const ActionTables& tables, ArchMode mode, std::uint64_t seed);

/// Tensor names and shapes the controller needs for (config, tables, mode).
std::map<std::string, Shape> policy_shapes(const PolicyConfig& config, const ActionTables& tables, ArchMode mode);

/// One decoded categorical field.
struct FieldDecision {
  std::string field;
  int choice = 0;
  int options = 0;  // unmasked slots
  double logprob = 0.0;
};

struct SampledStep {
  ActionBundle bundle;
  double logprob = 0.0;
  double entropy = 0.0;
  std::uint64_t seed = 0;  // sample(params, arch, Rng(seed), tables) reproduces this step
  std::vector<FieldDecision> decisions;
};

/// Final hidden state of the encoder run over the layer (branch) embeddings.
/// Throws DomainError when a feature value is outside its table.
std::vector<double> embed_network(const PolicyParams& params, const Architecture& arch, const ActionTables& tables);

/// Draws a full ActionBundle. Consumes random numbers from `rng`.
SampledStep sample(const PolicyParams& params, const Architecture& arch, Rng& rng, const ActionTables& tables);

/// Log-probability and decision log of a given bundle. Throws
/// ImpossibleActionError when the bundle violates a mask or is not a
/// bundle the controller can emit.
SampledStep score(const PolicyParams& params, const Architecture& arch, const ActionBundle& bundle,
                  const ActionTables& tables);
double logprob(const PolicyParams& params, const Architecture& arch, const ActionBundle& bundle,
               const ActionTables& tables);

/// d logprob / d params for every tensor (zeros where there is no path).
NamedTensors grad_logprob(const PolicyParams& params, const Architecture& arch, const ActionBundle& bundle,
                          const ActionTables& tables);

/// grad += weight * d logprob/d params + entropy_weight * d entropy/d params.
/// Returns the logprob. `grad` must hold every parameter name.
double accumulate_grad_logprob(const PolicyParams& params, const Architecture& arch, const ActionBundle& bundle,
                               const ActionTables& tables, double weight, NamedTensors& grad,
                               double entropy_weight = 0.0);

/// Named-tensor container with shape manifest and format version; bit-exact.
void save_policy(const std::filesystem::path& path, const PolicyParams& params,
                 const nlohmann::json& extra_meta = nlohmann::json::object());
PolicyParams load_policy(const std::filesystem::path& path, const ActionTables& tables);

}  // namespace morphnas
