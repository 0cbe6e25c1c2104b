#include <algorithm>

#include "morphnas/arch.hpp"
#include "morphnas/error.hpp"
#include "morphnas/rng.hpp"

namespace morphnas {

namespace {

template <typename T>
const T& pick(Rng& rng, const std::vector<T>& v) {
  return v[rng.index(v.size())];
}

std::vector<LayerSpec> random_layers(Rng& rng, int depth, const RandomLimits& limits) {
  const auto& dom = limits.domains.layer;
  std::vector<OpKind> first_kinds;
  for (auto k : dom.op_kinds)
    if (k != OpKind::add) first_kinds.push_back(k);
  if (first_kinds.empty()) throw ValidationError("layer domain needs at least one non-add op kind");

  std::vector<LayerSpec> layers;
  for (int i = 0; i < depth; ++i) {
    LayerSpec l;
    l.op_kind = i == 0 ? pick(rng, first_kinds) : pick(rng, dom.op_kinds);
    l.src1 = i - 1;
    if (is_conv(l.op_kind)) {
      l.filter_width = pick(rng, dom.filter_widths);
      l.channels = pick(rng, dom.channels);
      l.activation = pick(rng, dom.activations);
    } else if (is_pool(l.op_kind)) {
      l.pool_width = pick(rng, dom.pool_widths);
    }
    if (l.op_kind == OpKind::add) {
      l.src2 = i >= 2 ? rng.range(0, i - 2) : 0;
    } else if (i >= 2 && rng.bernoulli(limits.skip_probability)) {
      l.src2 = rng.range(0, i - 2);
    }
    layers.push_back(l);
  }
  return layers;
}

std::vector<BranchSpec> random_cell(Rng& rng, int count, const RandomLimits& limits) {
  const auto& dom = limits.domains.branch;
  std::vector<BranchSpec> cell;
  for (int j = 0; j < count; ++j) {
    BranchSpec b;
    b.branch_type = pick(rng, dom.types);
    if (branch_uses_filter_width(b.branch_type)) b.filter_width = pick(rng, dom.filter_widths);
    if (branch_has_pool(b.branch_type)) b.pool_width = pick(rng, dom.pool_widths);
    if (branch_has_conv(b.branch_type)) b.channels = pick(rng, dom.channels);
    b.src1 = rng.range(0, j);
    if (branch_has_second_op(b.branch_type)) b.src2 = rng.range(0, j);
    b.propagate = j == 0 || rng.bernoulli(limits.propagate_probability);
    append_branch(cell, b);
  }
  return cell;
}

}  // namespace

Architecture random_architecture(std::uint64_t seed, ArchMode mode, const RandomLimits& limits) {
  Rng rng(derive_seed(seed, "random-architecture"));
  const int cap = mode == ArchMode::layer_net ? limits.domains.max_layers : limits.domains.max_branches;
  const int lo = std::clamp(limits.min_depth, 1, cap);
  const int hi = std::clamp(limits.max_depth, lo, cap);
  const int depth = rng.range(lo, hi);
  Architecture arch = mode == ArchMode::layer_net ? Architecture::layer_net(random_layers(rng, depth, limits))
                                                  : Architecture::cell_net(random_cell(rng, depth, limits));
  require_valid(arch, limits.domains);
  return arch;
}

}  // namespace morphnas
