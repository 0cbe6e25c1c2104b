#include "morphnas/actions.hpp"

#include <algorithm>
#include <cmath>

#include "morphnas/error.hpp"

namespace morphnas {

namespace {

using nlohmann::json;

Architecture checked(Architecture arch, const ActionTables& tables, const char* op) {
  auto report = validate(arch, tables.domains);
  if (!report.ok()) throw ActionError(std::string(op) + " produced an invalid architecture: " + report.summary());
  return arch;
}

int capacity(const Architecture& arch, const ActionTables& t) {
  return arch.mode == ArchMode::layer_net ? t.domains.max_layers : t.domains.max_branches;
}

Architecture remove_layer(const Architecture& arch, int r) {
  const auto& old = arch.layers;
  const int replacement = old[r].src1;
  auto remap = [&](int s) { return s == r ? replacement : (s > r ? s - 1 : s); };
  std::vector<LayerSpec> layers;
  layers.reserve(old.size() - 1);
  for (int i = 0; i < static_cast<int>(old.size()); ++i) {
    if (i == r) continue;
    LayerSpec l = old[i];
    l.src1 = remap(l.src1);
    l.src2 = remap(l.src2);
    layers.push_back(l);
  }
  return Architecture::layer_net(std::move(layers));
}

Architecture remove_branch(const Architecture& arch, int r) {
  const auto& old = arch.cell;
  const BranchSpec removed = old[r];
  const int removed_slot = r + 1;
  auto remap = [&](int s) { return s == removed_slot ? removed.src1 : (s > removed_slot ? s - 1 : s); };

  std::vector<BranchSpec> cell;
  cell.reserve(old.size() - 1);
  for (int j = 0; j < static_cast<int>(old.size()); ++j) {
    if (j == r) continue;
    BranchSpec b = old[j];
    b.src1 = remap(b.src1);
    if (branch_has_second_op(b.branch_type)) b.src2 = remap(b.src2);
    cell.push_back(b);
  }

  // Undo the cut-off the removed branch imposed on its sources, unless another
  // propagating branch still consumes them.
  if (removed.propagate) {
    auto consumed = [&](int slot) {
      return std::any_of(cell.begin(), cell.end(), [&](const BranchSpec& b) {
        return b.propagate && (b.src1 == slot || (branch_has_second_op(b.branch_type) && b.src2 == slot));
      });
    };
    auto restore = [&](int slot) {
      if (slot >= 1 && !consumed(slot)) cell[slot - 1].propagate = true;
    };
    restore(removed.src1);
    if (branch_has_second_op(removed.branch_type)) restore(removed.src2);
  }
  return Architecture::cell_net(std::move(cell), arch.stacking);
}

}  // namespace

std::string_view to_string(InsertKind k) {
  switch (k) {
    case InsertKind::insert:
      return "insert";
    case InsertKind::remove:
      return "remove";
    case InsertKind::keep:
      return "keep";
  }
  return "?";
}

int ActionTables::position_slots(ArchMode mode) const {
  return (mode == ArchMode::layer_net ? domains.max_layers : domains.max_branches) + 5;
}

int ActionTables::identity_multiplier_index() const {
  auto it = std::find(scale_table.begin(), scale_table.end(), 1.0);
  return it == scale_table.end() ? -1 : static_cast<int>(it - scale_table.begin());
}

int ActionTables::identity_delta_index() const {
  auto it = std::find(filter_delta_table.begin(), filter_delta_table.end(), 0);
  return it == filter_delta_table.end() ? -1 : static_cast<int>(it - filter_delta_table.begin());
}

void ActionTables::check() const {
  if (num_parts < 1) throw ConfigError("must be >= 1", "action_space.num_parts");
  if (scale_table.empty()) throw ConfigError("must not be empty", "action_space.scale_table");
  for (double m : scale_table)
    if (!(m > 0.0) || !std::isfinite(m)) throw ConfigError("multipliers must be positive", "action_space.scale_table");
  if (filter_delta_table.empty()) throw ConfigError("must not be empty", "action_space.filter_delta_table");
  for (int d : filter_delta_table)
    if (d % 2 != 0) throw ConfigError("filter deltas must be even", "action_space.filter_delta_table");
  const auto& L = domains.layer;
  const auto& B = domains.branch;
  if (L.op_kinds.empty() || L.filter_widths.empty() || L.pool_widths.empty() || L.channels.empty() ||
      L.activations.empty())
    throw ConfigError("every layer feature domain must be non-empty", "action_space.layer");
  if (B.types.empty() || B.filter_widths.empty() || B.pool_widths.empty() || B.channels.empty())
    throw ConfigError("every module feature domain must be non-empty", "action_space.module");
  if (domains.max_layers < 1) throw ConfigError("must be >= 1", "action_space.max_layers");
  if (domains.max_branches < 1) throw ConfigError("must be >= 1", "action_space.max_branches");
}

ScaleAction ScaleAction::identity(const ActionTables& tables) {
  const int m = tables.identity_multiplier_index();
  const int d = tables.identity_delta_index();
  if (m < 0 || d < 0) throw ConfigError("scale tables have no identity entry (1.0 / 0)", "action_space");
  return ScaleAction{std::vector<ScalePart>(tables.num_parts, ScalePart{m, d})};
}

std::vector<std::pair<int, int>> part_ranges(int count, int parts) {
  std::vector<std::pair<int, int>> out;
  out.reserve(parts);
  for (int f = 0; f < parts; ++f) {
    const long long begin = static_cast<long long>(f) * count / parts;
    const long long end = static_cast<long long>(f + 1) * count / parts;
    out.emplace_back(static_cast<int>(begin), static_cast<int>(end));
  }
  return out;
}

int snap_channels(double value, const std::vector<int>& domain) {
  int best = domain.front();
  double best_dist = std::abs(value - best);
  for (int c : domain) {
    const double d = std::abs(value - c);
    if (d < best_dist || (d == best_dist && c > best)) {
      best = c;
      best_dist = d;
    }
  }
  return best;
}

int clamp_odd(int value, int lo, int hi) {
  int v = std::clamp(value, lo, hi);
  if (v % 2 == 0) v = v > lo ? v - 1 : v + 1;
  return v;
}

Architecture apply_scale(const Architecture& arch, const ScaleAction& scale, const ActionTables& tables) {
  if (static_cast<int>(scale.parts.size()) != tables.num_parts)
    throw ActionError("scale action has " + std::to_string(scale.parts.size()) + " parts, expected " +
                      std::to_string(tables.num_parts));
  for (const auto& p : scale.parts) {
    if (p.multiplier_index < 0 || p.multiplier_index >= static_cast<int>(tables.scale_table.size()) ||
        p.delta_index < 0 || p.delta_index >= static_cast<int>(tables.filter_delta_table.size()))
      throw ActionError("scale action index out of table range");
  }

  Architecture out = arch;
  const auto ranges = part_ranges(static_cast<int>(arch.node_count()), tables.num_parts);
  for (int f = 0; f < tables.num_parts; ++f) {
    const double mult = tables.scale_table[scale.parts[f].multiplier_index];
    const int delta = tables.filter_delta_table[scale.parts[f].delta_index];
    for (int i = ranges[f].first; i < ranges[f].second; ++i) {
      if (arch.mode == ArchMode::layer_net) {
        auto& l = out.layers[i];
        if (!is_conv(l.op_kind)) continue;
        l.channels = snap_channels(l.channels * mult, tables.domains.layer.channels);
        l.filter_width = clamp_odd(l.filter_width + delta, 1, 7);
      } else {
        auto& b = out.cell[i];
        if (branch_has_conv(b.branch_type)) b.channels = snap_channels(b.channels * mult, tables.domains.branch.channels);
        if (branch_uses_filter_width(b.branch_type)) b.filter_width = clamp_odd(b.filter_width + delta, 1, 7);
      }
    }
  }
  return checked(std::move(out), tables, "apply_scale");
}

Architecture apply_insert_layer(const Architecture& arch, const InsertAction& action, const ActionTables& tables) {
  if (arch.mode != ArchMode::layer_net) throw ActionError("layer insert on a cell_net");
  if (action.kind != InsertKind::insert) throw ActionError("apply_insert_layer needs kind=insert");
  const auto* payload = std::get_if<LayerSpec>(&action.payload);
  if (!payload) throw ActionError("layer insert without a LayerSpec payload");
  const int n = static_cast<int>(arch.layers.size());
  const int l = action.position;
  if (n >= tables.domains.max_layers) throw ActionError("layer capacity reached");
  if (l < 0 || l > n) throw ActionError("insert position " + std::to_string(l) + " outside [0, " + std::to_string(n) + "]");
  if (payload->src2 >= l) throw ActionError("invalid skip source " + std::to_string(payload->src2) + " (must be < position)");

  LayerSpec inserted = *payload;
  inserted.src1 = l - 1;

  std::vector<LayerSpec> layers;
  layers.reserve(n + 1);
  for (int i = 0; i < n; ++i) {
    if (i == l) layers.push_back(inserted);
    LayerSpec old = arch.layers[i];
    if (old.src1 >= l) ++old.src1;
    if (old.src2 >= l) ++old.src2;
    // Splice into the chain: the node that followed position l-1 now reads the new layer.
    if (i == l && old.src1 == l - 1) old.src1 = l;
    layers.push_back(old);
  }
  if (l == n) layers.push_back(inserted);
  return checked(Architecture::layer_net(std::move(layers)), tables, "apply_insert_layer");
}

Architecture apply_insert_branch(const Architecture& arch, const InsertAction& action, const ActionTables& tables) {
  if (arch.mode != ArchMode::cell_net) throw ActionError("branch insert on a layer_net");
  if (action.kind != InsertKind::insert) throw ActionError("apply_insert_branch needs kind=insert");
  const auto* payload = std::get_if<BranchSpec>(&action.payload);
  if (!payload) throw ActionError("branch insert without a BranchSpec payload");
  const int n = static_cast<int>(arch.cell.size());
  if (n >= tables.domains.max_branches) throw ActionError("branch capacity exceeded");
  if (action.position != n) throw ActionError("branches are appended; position must be " + std::to_string(n));
  if (payload->src1 < 0 || payload->src1 > n || payload->src2 < 0 || payload->src2 > n)
    throw ActionError("branch source slot out of range");

  Architecture out = arch;
  append_branch(out.cell, *payload);
  return checked(std::move(out), tables, "apply_insert_branch");
}

Architecture apply_remove(const Architecture& arch, const InsertAction& action, const ActionTables& tables) {
  if (action.kind != InsertKind::remove) throw ActionError("apply_remove needs kind=remove");
  const int n = static_cast<int>(arch.node_count());
  const int r = action.position;
  if (n < 2) throw ActionError("removal would empty the network");
  if (r < 0 || r >= n) throw ActionError("remove target " + std::to_string(r) + " does not exist");
  Architecture out = arch.mode == ArchMode::layer_net ? remove_layer(arch, r) : remove_branch(arch, r);
  return checked(std::move(out), tables, "apply_remove");
}

Architecture apply_insert_action(const Architecture& arch, const InsertAction& action, const ActionTables& tables) {
  switch (action.kind) {
    case InsertKind::keep:
      return arch;
    case InsertKind::remove:
      return apply_remove(arch, action, tables);
    case InsertKind::insert:
      return arch.mode == ArchMode::layer_net ? apply_insert_layer(arch, action, tables)
                                              : apply_insert_branch(arch, action, tables);
  }
  return arch;
}

Architecture apply_bundle(const Architecture& arch, const ActionBundle& bundle, const ActionTables& tables) {
  return apply_insert_action(apply_scale(arch, bundle.scale, tables), bundle.insert, tables);
}

bool removal_allowed(const Architecture& arch, int index, const ActionTables& tables) {
  const int n = static_cast<int>(arch.node_count());
  if (n < 2 || index < 0 || index >= n) return false;
  if (arch.mode == ArchMode::cell_net) return true;
  // Rewiring to the removed layer's src1 can hand an add layer the network
  // input (-1), which add does not accept.
  return validate(remove_layer(arch, index), tables.domains).ok();
}

std::vector<bool> valid_positions(const Architecture& arch, InsertKind kind, const ActionTables& tables) {
  const int slots = tables.position_slots(arch.mode);
  const int n = static_cast<int>(arch.node_count());
  std::vector<bool> mask(slots, false);
  if (kind == InsertKind::insert) {
    if (n >= capacity(arch, tables)) return mask;
    if (arch.mode == ArchMode::layer_net) {
      for (int l = 0; l <= std::min(n, slots - 1); ++l) mask[l] = true;
    } else {
      mask[n] = true;
    }
  } else if (kind == InsertKind::remove) {
    for (int r = 0; r < n && r < slots; ++r) mask[r] = removal_allowed(arch, r, tables);
  }
  return mask;
}

json action_log_record(int step, const ActionBundle& bundle) {
  auto scale = json::array();
  for (const auto& p : bundle.scale.parts) scale.push_back({p.multiplier_index, p.delta_index});
  json payload = nullptr;
  if (const auto* l = std::get_if<LayerSpec>(&bundle.insert.payload)) payload = layer_to_json(*l);
  if (const auto* b = std::get_if<BranchSpec>(&bundle.insert.payload)) payload = branch_to_json(*b);
  return json{{"step", step},
              {"scale", std::move(scale)},
              {"insert",
               {{"kind", to_string(bundle.insert.kind)}, {"position", bundle.insert.position}, {"payload", payload}}}};
}

ActionBundle bundle_from_json(const json& j) {
  try {
    ActionBundle b;
    for (const auto& p : j.at("scale")) b.scale.parts.push_back({p.at(0).get<int>(), p.at(1).get<int>()});
    const auto& ins = j.at("insert");
    const auto kind = ins.at("kind").get<std::string>();
    if (kind == "insert") b.insert.kind = InsertKind::insert;
    else if (kind == "remove") b.insert.kind = InsertKind::remove;
    else if (kind == "keep") b.insert.kind = InsertKind::keep;
    else throw ParseError("unknown value \"" + kind + "\"", "insert.kind");
    b.insert.position = ins.at("position").get<int>();
    const auto& payload = ins.at("payload");
    if (payload.is_object()) {
      if (payload.contains("branch_type")) b.insert.payload = branch_from_json(payload, "insert.payload");
      else b.insert.payload = layer_from_json(payload, "insert.payload");
    }
    return b;
  } catch (const json::exception& e) {
    throw ParseError(std::string("malformed action record: ") + e.what());
  }
}

}  // namespace morphnas
