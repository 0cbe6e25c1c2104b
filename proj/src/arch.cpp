#include "morphnas/arch.hpp"

#include <algorithm>
#include <array>
#include <utility>

#include "morphnas/error.hpp"

namespace morphnas {

namespace {

template <typename E, std::size_t N>
using NameTable = std::array<std::pair<E, std::string_view>, N>;

constexpr NameTable<OpKind, 5> kOpKinds{{{OpKind::conv2d, "conv2d"},
                                         {OpKind::dep_sep_conv2d, "dep_sep_conv2d"},
                                         {OpKind::max_pool2d, "max_pool2d"},
                                         {OpKind::avg_pool2d, "avg_pool2d"},
                                         {OpKind::add, "add"}}};

constexpr NameTable<Activation, 6> kActivations{{{Activation::relu, "relu"},
                                                 {Activation::crelu, "crelu"},
                                                 {Activation::elu, "elu"},
                                                 {Activation::selu, "selu"},
                                                 {Activation::swish, "swish"},
                                                 {Activation::none, "none"}}};

constexpr NameTable<KernelAxis, 3> kKernelAxes{
    {{KernelAxis::square, "square"}, {KernelAxis::row, "row"}, {KernelAxis::col, "col"}}};

constexpr NameTable<BranchType, 7> kBranchTypes{{{BranchType::conv_conv, "conv_conv"},
                                                 {BranchType::conv_maxpool, "conv_maxpool"},
                                                 {BranchType::conv_avgpool, "conv_avgpool"},
                                                 {BranchType::conv_none, "conv_none"},
                                                 {BranchType::maxpool_none, "maxpool_none"},
                                                 {BranchType::avgpool_none, "avgpool_none"},
                                                 {BranchType::sep17_71_none, "sep17_71_none"}}};

constexpr NameTable<ArchMode, 2> kModes{{{ArchMode::layer_net, "layer_net"}, {ArchMode::cell_net, "cell_net"}}};

template <typename E, std::size_t N>
std::string_view name_of(const NameTable<E, N>& table, E v) {
  for (const auto& [e, name] : table)
    if (e == v) return name;
  return "?";
}

template <typename E, std::size_t N>
std::optional<E> parse_name(const NameTable<E, N>& table, std::string_view s) {
  for (const auto& [e, name] : table)
    if (name == s) return e;
  return std::nullopt;
}

template <typename T>
bool contains(const std::vector<T>& v, const T& x) {
  return std::find(v.begin(), v.end(), x) != v.end();
}

class Collector {
 public:
  explicit Collector(ValidationReport& r) : report_(r) {}
  void operator()(std::string location, std::string message) {
    report_.violations.push_back({std::move(location), std::move(message)});
  }

 private:
  ValidationReport& report_;
};

void validate_layers(const Architecture& arch, const SearchDomains& d, Collector& add) {
  const auto& layers = arch.layers;
  const int n = static_cast<int>(layers.size());
  if (n < 1) add("layers", "network must have at least one layer");
  if (!d.expanded && n > d.max_layers)
    add("layers", "layer count " + std::to_string(n) + " exceeds MAX_LAYERS " + std::to_string(d.max_layers));
  if (!arch.cell.empty()) add("cell", "layer_net must not carry cell branches");

  std::vector<bool> reachable(layers.size(), false);
  for (int i = 0; i < n; ++i) {
    const auto& l = layers[i];
    const std::string at = "layers[" + std::to_string(i) + "]";
    if (!d.expanded && !contains(d.layer.op_kinds, l.op_kind))
      add(at + ".op_kind", "op kind " + std::string(to_string(l.op_kind)) + " not in the active table");
    if (l.activation != Activation::none && !contains(d.layer.activations, l.activation))
      add(at + ".activation", "activation not in the active table");

    if (is_conv(l.op_kind)) {
      if (!contains(d.layer.filter_widths, l.filter_width))
        add(at + ".filter_width", "filter width " + std::to_string(l.filter_width) + " not allowed");
      if (d.expanded ? l.channels < 1 : !contains(d.layer.channels, l.channels))
        add(at + ".channels", "channel count " + std::to_string(l.channels) + " not allowed");
      if (l.pool_width != 0) add(at + ".pool_width", "must be 0 for conv kinds");
      if (l.pool_stride != 0) add(at + ".pool_stride", "must be 0 for conv kinds");
      if (l.kernel != KernelAxis::square && (!d.expanded || l.op_kind != OpKind::conv2d))
        add(at + ".kernel", "row/col kernels are only valid on conv2d in stack expansions");
    } else if (is_pool(l.op_kind)) {
      if (!contains(d.layer.pool_widths, l.pool_width))
        add(at + ".pool_width", "pool width " + std::to_string(l.pool_width) + " not allowed");
      if (l.filter_width != 0) add(at + ".filter_width", "must be 0 for pool kinds");
      if (l.channels != 0) add(at + ".channels", "must be 0 for pool kinds");
      if (l.kernel != KernelAxis::square) add(at + ".kernel", "pool kinds use square windows");
      if (l.pool_stride != 0 && !(d.expanded && l.pool_stride == 1))
        add(at + ".pool_stride", "stride-1 pools are only valid in stack expansions");
    } else {
      if (l.filter_width != 0 || l.pool_width != 0 || l.channels != 0)
        add(at, "add layers carry no filter/pool/channel fields");
      if (l.src1 < 0 || l.src2 < 0) add(at, "add requires src1 >= 0 and src2 >= 0");
      if (l.kernel != KernelAxis::square) add(at + ".kernel", "add has no kernel");
      if (l.pool_stride != 0) add(at + ".pool_stride", "must be 0 for add");
    }

    auto check_src = [&](int src, const char* field) {
      if (src < -1) add(at + "." + field, "invalid source index " + std::to_string(src));
      else if (src >= i) add(at + "." + field, "forward reference to layer " + std::to_string(src));
    };
    check_src(l.src1, "src1");
    check_src(l.src2, "src2");

    const bool src1_ok = l.src1 == -1 || (l.src1 >= 0 && l.src1 < i && reachable[l.src1]);
    reachable[i] = src1_ok;
  }
  for (int i = 0; i < n; ++i)
    if (!reachable[i]) add("layers[" + std::to_string(i) + "]", "not reachable from the network input");
}

void validate_cell(const Architecture& arch, const SearchDomains& d, Collector& add) {
  const auto& cell = arch.cell;
  const int n = static_cast<int>(cell.size());
  if (n < 1) add("cell", "cell must have at least one branch");
  if (n > d.max_branches)
    add("cell", "branch count " + std::to_string(n) + " exceeds MAX_BRANCHES " + std::to_string(d.max_branches));
  if (!arch.layers.empty()) add("layers", "cell_net must not carry layers");

  for (int j = 0; j < n; ++j) {
    const auto& b = cell[j];
    const std::string at = "cell[" + std::to_string(j) + "]";
    if (!contains(d.branch.types, b.branch_type)) add(at + ".branch_type", "branch type not in the active table");

    if (branch_uses_filter_width(b.branch_type)) {
      if (!contains(d.branch.filter_widths, b.filter_width))
        add(at + ".filter_width", "filter width " + std::to_string(b.filter_width) + " not allowed");
    } else if (b.filter_width != 0) {
      add(at + ".filter_width", "must be 0 for this branch type");
    }
    if (branch_has_pool(b.branch_type)) {
      if (!contains(d.branch.pool_widths, b.pool_width))
        add(at + ".pool_width", "pool width " + std::to_string(b.pool_width) + " not allowed");
    } else if (b.pool_width != 0) {
      add(at + ".pool_width", "must be 0 for this branch type");
    }
    if (branch_has_conv(b.branch_type)) {
      if (!contains(d.branch.channels, b.channels))
        add(at + ".channels", "channel count " + std::to_string(b.channels) + " not allowed");
    } else if (b.channels != 0) {
      add(at + ".channels", "must be 0 for pool-only branches");
    }

    auto check_slot = [&](int slot, const char* field) {
      if (slot < 0 || slot > n) add(at + "." + field, "source slot out of range: " + std::to_string(slot));
      else if (slot > j) add(at + "." + field, "forward reference to slot " + std::to_string(slot));
    };
    check_slot(b.src1, "src1");
    if (branch_has_second_op(b.branch_type)) check_slot(b.src2, "src2");
    else if (b.src2 != 0) add(at + ".src2", "must be 0 when the branch has no second operation");
  }

  const auto& s = arch.stacking;
  if (s.cells_per_stage < 1) add("stacking.cells_per_stage", "must be positive");
  if (s.num_stages < 1) add("stacking.num_stages", "must be positive");
  if (s.multiplier_num < 1 || s.multiplier_den < 1) add("stacking.multiplier", "must be a positive rational");
}

}  // namespace

std::string_view to_string(OpKind v) { return name_of(kOpKinds, v); }
std::string_view to_string(Activation v) { return name_of(kActivations, v); }
std::string_view to_string(KernelAxis v) { return name_of(kKernelAxes, v); }
std::string_view to_string(BranchType v) { return name_of(kBranchTypes, v); }
std::string_view to_string(ArchMode v) { return name_of(kModes, v); }
std::string_view to_string(Reduction) { return "avg_pool_stride2"; }

std::optional<OpKind> parse_op_kind(std::string_view s) { return parse_name(kOpKinds, s); }
std::optional<Activation> parse_activation(std::string_view s) { return parse_name(kActivations, s); }
std::optional<KernelAxis> parse_kernel_axis(std::string_view s) { return parse_name(kKernelAxes, s); }
std::optional<BranchType> parse_branch_type(std::string_view s) { return parse_name(kBranchTypes, s); }
std::optional<ArchMode> parse_arch_mode(std::string_view s) { return parse_name(kModes, s); }

bool branch_has_conv(BranchType t) {
  switch (t) {
    case BranchType::conv_conv:
    case BranchType::conv_maxpool:
    case BranchType::conv_avgpool:
    case BranchType::conv_none:
    case BranchType::sep17_71_none:
      return true;
    default:
      return false;
  }
}

bool branch_has_pool(BranchType t) {
  switch (t) {
    case BranchType::conv_maxpool:
    case BranchType::conv_avgpool:
    case BranchType::maxpool_none:
    case BranchType::avgpool_none:
      return true;
    default:
      return false;
  }
}

bool branch_has_second_op(BranchType t) {
  return t == BranchType::conv_conv || t == BranchType::conv_maxpool || t == BranchType::conv_avgpool;
}

bool branch_uses_filter_width(BranchType t) { return branch_has_conv(t) && t != BranchType::sep17_71_none; }

Architecture Architecture::layer_net(std::vector<LayerSpec> layers) {
  Architecture a;
  a.mode = ArchMode::layer_net;
  a.layers = std::move(layers);
  return a;
}

Architecture Architecture::cell_net(std::vector<BranchSpec> cell, StackingTemplate stacking) {
  Architecture a;
  a.mode = ArchMode::cell_net;
  a.cell = std::move(cell);
  a.stacking = stacking;
  return a;
}

std::size_t Architecture::node_count() const noexcept {
  return mode == ArchMode::layer_net ? layers.size() : cell.size();
}

SearchDomains SearchDomains::for_expanded() {
  SearchDomains d;
  d.expanded = true;
  d.max_layers = 1 << 20;
  return d;
}

SearchDomains SearchDomains::any_capacity() {
  SearchDomains d;
  d.max_layers = 1 << 20;
  d.max_branches = 1 << 20;
  return d;
}

std::string ValidationReport::summary() const {
  if (ok()) return "ok";
  std::string s;
  for (const auto& v : violations) {
    if (!s.empty()) s += "; ";
    s += v.location + ": " + v.message;
  }
  return s;
}

bool ValidationReport::mentions(std::string_view needle) const {
  return std::any_of(violations.begin(), violations.end(),
                     [&](const Violation& v) { return v.message.find(needle) != std::string::npos; });
}

ValidationReport validate(const Architecture& arch, const SearchDomains& domains) {
  ValidationReport report;
  Collector add(report);
  if (arch.mode == ArchMode::layer_net) validate_layers(arch, domains, add);
  else validate_cell(arch, domains, add);
  return report;
}

void require_valid(const Architecture& arch, const SearchDomains& domains) {
  auto report = validate(arch, domains);
  if (!report.ok()) throw ValidationError("invalid architecture: " + report.summary());
}

void append_branch(std::vector<BranchSpec>& cell, const BranchSpec& branch) {
  if (branch.propagate) {
    auto cut = [&](int slot) {
      if (slot >= 1 && slot <= static_cast<int>(cell.size())) cell[slot - 1].propagate = false;
    };
    cut(branch.src1);
    if (branch_has_second_op(branch.branch_type)) cut(branch.src2);
  }
  cell.push_back(branch);
}

}  // namespace morphnas
