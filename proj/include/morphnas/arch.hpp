#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

namespace morphnas {

enum class OpKind { conv2d, dep_sep_conv2d, max_pool2d, avg_pool2d, add };
enum class Activation { relu, crelu, elu, selu, swish, none };

/// Kernel footprint of a conv2d layer. Row (1 x k) and column (k x 1)
/// kernels only appear in stacked-cell expansions of the factorized branch.
enum class KernelAxis { square, row, col };

enum class BranchType {
  conv_conv,
  conv_maxpool,
  conv_avgpool,
  conv_none,
  maxpool_none,
  avgpool_none,
  sep17_71_none,
};

enum class ArchMode { layer_net, cell_net };
enum class Reduction { avg_pool_stride2 };

inline constexpr int kSchemaVersion = 1;

std::string_view to_string(OpKind v);
std::string_view to_string(Activation v);
std::string_view to_string(KernelAxis v);
std::string_view to_string(BranchType v);
std::string_view to_string(ArchMode v);
std::string_view to_string(Reduction v);

std::optional<OpKind> parse_op_kind(std::string_view s);
std::optional<Activation> parse_activation(std::string_view s);
std::optional<KernelAxis> parse_kernel_axis(std::string_view s);
std::optional<BranchType> parse_branch_type(std::string_view s);
std::optional<ArchMode> parse_arch_mode(std::string_view s);

inline constexpr bool is_conv(OpKind k) { return k == OpKind::conv2d || k == OpKind::dep_sep_conv2d; }
inline constexpr bool is_pool(OpKind k) { return k == OpKind::max_pool2d || k == OpKind::avg_pool2d; }

/// The branch's first operation is a convolution (including the factorized 1x7/7x1 pair).
bool branch_has_conv(BranchType t);
/// The branch contains a pooling operation (in either position).
bool branch_has_pool(BranchType t);
/// The branch has a second operation reading src2.
bool branch_has_second_op(BranchType t);
/// filter_width is a free field (false for the fixed-size factorized branch).
bool branch_uses_filter_width(BranchType t);

struct LayerSpec {
  OpKind op_kind = OpKind::conv2d;
  int filter_width = 0;  // conv kinds only
  int pool_width = 0;    // pool kinds only
  int channels = 0;      // conv kinds only
  Activation activation = Activation::none;
  int src1 = -1;  // -1 = network input
  int src2 = -1;  // -1 = no skip connection
  KernelAxis kernel = KernelAxis::square;
  /// Pool stride; 0 = pool_width (non-overlapping). 1 = same-padded, used
  /// for pooling inside stacked cells.
  int pool_stride = 0;

  friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

/// Effective stride of a pool layer.
inline int pool_stride_of(const LayerSpec& l) { return l.pool_stride > 0 ? l.pool_stride : l.pool_width; }

struct BranchSpec {
  BranchType branch_type = BranchType::conv_none;
  int filter_width = 0;
  int pool_width = 0;
  int channels = 0;
  int src1 = 0;  // slot 0 = cell input, slot i+1 = branch i
  int src2 = 0;
  bool propagate = true;

  friend bool operator==(const BranchSpec&, const BranchSpec&) = default;
};

struct StackingTemplate {
  int cells_per_stage = 2;
  int num_stages = 3;
  int multiplier_num = 2;  // stage channel multiplier as an exact rational
  int multiplier_den = 1;
  Reduction reduction = Reduction::avg_pool_stride2;

  friend bool operator==(const StackingTemplate&, const StackingTemplate&) = default;
};

struct Architecture {
  ArchMode mode = ArchMode::layer_net;
  std::vector<LayerSpec> layers;
  std::vector<BranchSpec> cell;
  StackingTemplate stacking;

  static Architecture layer_net(std::vector<LayerSpec> layers);
  static Architecture cell_net(std::vector<BranchSpec> cell, StackingTemplate stacking = {});

  /// Number of layers (layer_net) or branches (cell_net).
  std::size_t node_count() const noexcept;

  friend bool operator==(const Architecture&, const Architecture&) = default;
};

/// Feature domains for layer-by-layer search.
struct LayerDomain {
  std::vector<OpKind> op_kinds{OpKind::conv2d, OpKind::dep_sep_conv2d, OpKind::max_pool2d,
                               OpKind::avg_pool2d, OpKind::add};
  std::vector<int> filter_widths{1, 3, 5, 7};
  std::vector<int> pool_widths{2, 3};
  std::vector<int> channels{16, 32, 64, 96, 128, 256};
  std::vector<Activation> activations{Activation::relu, Activation::crelu, Activation::elu,
                                      Activation::selu, Activation::swish};
};

/// Feature domains for module (cell) search.
struct BranchDomain {
  std::vector<BranchType> types{BranchType::conv_conv,    BranchType::conv_maxpool, BranchType::conv_avgpool,
                                BranchType::conv_none,    BranchType::maxpool_none, BranchType::avgpool_none,
                                BranchType::sep17_71_none};
  std::vector<int> filter_widths{1, 3, 5, 7};
  std::vector<int> pool_widths{2, 3};
  std::vector<int> channels{8, 12, 16, 24, 32};
};

/// Domains and capacity limits an architecture is validated against.
struct SearchDomains {
  LayerDomain layer;
  BranchDomain branch;
  int max_layers = 32;
  int max_branches = 8;
  /// Accept any positive channel count, row/col kernels and stride-1 pools
  /// (stack expansions).
  bool expanded = false;

  static SearchDomains defaults() { return {}; }
  static SearchDomains for_expanded();
  /// Default domains without the layer/branch capacity limits; evaluators
  /// accept whatever capacity the search was configured with.
  static SearchDomains any_capacity();
};

struct Violation {
  std::string location;
  std::string message;
};

struct ValidationReport {
  std::vector<Violation> violations;

  bool ok() const noexcept { return violations.empty(); }
  std::string summary() const;
  /// True if some violation message contains `needle`.
  bool mentions(std::string_view needle) const;
};

/// Checks every IR invariant. Violations are returned as data.
ValidationReport validate(const Architecture& arch, const SearchDomains& domains = SearchDomains::defaults());

/// Throws ValidationError with the report summary when validation fails.
void require_valid(const Architecture& arch, const SearchDomains& domains = SearchDomains::defaults());

/// Appends a branch with the propagate cut-off rule: when the new branch
/// propagates, every existing branch it reads from stops propagating.
void append_branch(std::vector<BranchSpec>& cell, const BranchSpec& branch);

// ---- Canonical JSON (schema v1) -------------------------------------------

nlohmann::json layer_to_json(const LayerSpec& layer);
nlohmann::json branch_to_json(const BranchSpec& branch);
LayerSpec layer_from_json(const nlohmann::json& j, const std::string& path = "layer");
BranchSpec branch_from_json(const nlohmann::json& j, const std::string& path = "branch");

nlohmann::json to_json(const Architecture& arch);
/// Structural parse only; throws ParseError naming the field at fault.
Architecture from_json(const nlohmann::json& j);

/// Canonical text: compact JSON with sorted keys and integer fields.
std::string serialize(const Architecture& arch, const SearchDomains& domains = SearchDomains::defaults());
/// Parses and validates. ParseError carries the line (syntax) or field path.
Architecture deserialize(std::string_view text, const SearchDomains& domains = SearchDomains::defaults());

/// Short stable identifier: 16 hex digits of a 64-bit hash of the canonical text.
std::string arch_ref(const Architecture& arch);

// ---- Stacking -------------------------------------------------------------

struct InputShape {
  int height = 32;
  int width = 32;
  int channels = 3;

  friend bool operator==(const InputShape&, const InputShape&) = default;
};

/// Parses "HxWxC", e.g. "32x32x3".
InputShape parse_input_shape(std::string_view text);
std::string to_string(const InputShape& s);

/// Channel count of a cell conv in the given stage, round-half-up of
/// channels * multiplier^stage, at least 1.
int stage_channels(int channels, int stage, const StackingTemplate& t);

/// Expands a cell_net into the equivalent layer_net: num_stages stages of
/// cells_per_stage cell instances with a stride-2 average-pool reduction
/// between consecutive stages. Throws ShapeError when a reduction would take
/// the spatial size to zero.
Architecture expand_stack(const Architecture& arch, const InputShape& input);

/// Layer-net view of any architecture (identity for layer nets).
Architecture as_layer_net(const Architecture& arch, const InputShape& input);

// ---- Random generation -----------------------------------------------------

struct RandomLimits {
  int min_depth = 4;  // layers (layer_net) or branches (cell_net)
  int max_depth = 8;
  double skip_probability = 0.3;
  double propagate_probability = 0.7;
  SearchDomains domains;
};

/// Pure function of (seed, mode, limits); always returns a valid architecture.
Architecture random_architecture(std::uint64_t seed, ArchMode mode, const RandomLimits& limits = {});

}  // namespace morphnas
