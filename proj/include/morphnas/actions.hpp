#pragma once

#include <utility>
#include <variant>
#include <vector>

#include <json.hpp>

#include "morphnas/arch.hpp"

namespace morphnas {

/// Search space of scale and insert actions for both search patterns.
struct ActionTables {
  SearchDomains domains;
  std::vector<double> scale_table{0.5, 0.75, 1.0, 1.5, 2.0};
  std::vector<int> filter_delta_table{-2, 0, 2};
  int num_parts = 4;

  /// Size of the policy's position head: MAX_LAYERS + 5 (or MAX_BRANCHES + 5).
  int position_slots(ArchMode mode) const;
  /// Index of multiplier 1.0 / delta 0; the identity scale uses these.
  int identity_multiplier_index() const;
  int identity_delta_index() const;

  /// Throws ConfigError when a table is empty or holds an illegal value.
  void check() const;
};

struct ScalePart {
  int multiplier_index = 0;
  int delta_index = 0;

  friend bool operator==(const ScalePart&, const ScalePart&) = default;
};

/// One (multiplier, filter delta) pair per part; exactly F entries.
struct ScaleAction {
  std::vector<ScalePart> parts;

  static ScaleAction identity(const ActionTables& tables);
  friend bool operator==(const ScaleAction&, const ScaleAction&) = default;
};

enum class InsertKind { insert, remove, keep };

std::string_view to_string(InsertKind k);

using Payload = std::variant<std::monostate, LayerSpec, BranchSpec>;

struct InsertAction {
  InsertKind kind = InsertKind::keep;
  /// Insert position (insert) or target index (remove).
  int position = 0;
  Payload payload;

  static InsertAction keep() { return {}; }
  static InsertAction insert_layer(int position, LayerSpec layer) { return {InsertKind::insert, position, layer}; }
  static InsertAction insert_branch(BranchSpec branch, int position) {
    return {InsertKind::insert, position, branch};
  }
  static InsertAction remove(int index) { return {InsertKind::remove, index, {}}; }

  friend bool operator==(const InsertAction&, const InsertAction&) = default;
};

/// One search step's decisions; applied scale first, then insert/remove/keep.
struct ActionBundle {
  ScaleAction scale;
  InsertAction insert;

  friend bool operator==(const ActionBundle&, const ActionBundle&) = default;
};

/// Contiguous, as-even-as-possible split of `count` nodes into `parts` ranges
/// [begin, end). Some ranges are empty when count < parts.
std::vector<std::pair<int, int>> part_ranges(int count, int parts);

/// Nearest value of `domain`, ties resolved toward the larger value.
int snap_channels(double value, const std::vector<int>& domain);

/// Clamps to [lo, hi] and moves even results to the adjacent odd value inside the range.
int clamp_odd(int value, int lo, int hi);

Architecture apply_scale(const Architecture& arch, const ScaleAction& scale, const ActionTables& tables);
Architecture apply_insert_layer(const Architecture& arch, const InsertAction& action, const ActionTables& tables);
Architecture apply_insert_branch(const Architecture& arch, const InsertAction& action, const ActionTables& tables);
Architecture apply_remove(const Architecture& arch, const InsertAction& action, const ActionTables& tables);
Architecture apply_insert_action(const Architecture& arch, const InsertAction& action, const ActionTables& tables);
Architecture apply_bundle(const Architecture& arch, const ActionBundle& bundle, const ActionTables& tables);

/// True when removing node `index` leaves a valid architecture.
bool removal_allowed(const Architecture& arch, int index, const ActionTables& tables);

/// Boolean mask over the position head's slots for insert or remove.
std::vector<bool> valid_positions(const Architecture& arch, InsertKind kind, const ActionTables& tables);

/// Replay log record: {step, scale:[[m,d],...], insert:{kind, position, payload}}.
nlohmann::json action_log_record(int step, const ActionBundle& bundle);
ActionBundle bundle_from_json(const nlohmann::json& j);

}  // namespace morphnas
