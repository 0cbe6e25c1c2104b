#include <doctest.h>

#include "morphnas/actions.hpp"
#include "morphnas/error.hpp"
#include "morphnas/rng.hpp"

using namespace morphnas;

namespace {

LayerSpec conv(int fw, int ch, int src1, int src2 = -1) {
  LayerSpec l;
  l.op_kind = OpKind::conv2d;
  l.filter_width = fw;
  l.channels = ch;
  l.activation = Activation::relu;
  l.src1 = src1;
  l.src2 = src2;
  return l;
}

LayerSpec add_of(int a, int b) {
  LayerSpec l;
  l.op_kind = OpKind::add;
  l.src1 = a;
  l.src2 = b;
  return l;
}

BranchSpec conv_branch(int src1, int channels = 16, bool propagate = true) {
  BranchSpec b;
  b.branch_type = BranchType::conv_none;
  b.filter_width = 3;
  b.channels = channels;
  b.src1 = src1;
  b.propagate = propagate;
  return b;
}

ScaleAction uniform_scale(const ActionTables& t, double mult, int delta) {
  int m = static_cast<int>(std::find(t.scale_table.begin(), t.scale_table.end(), mult) - t.scale_table.begin());
  int d = static_cast<int>(std::find(t.filter_delta_table.begin(), t.filter_delta_table.end(), delta) -
                           t.filter_delta_table.begin());
  return ScaleAction{std::vector<ScalePart>(t.num_parts, ScalePart{m, d})};
}

Architecture chain(int n) {
  std::vector<LayerSpec> layers;
  for (int i = 0; i < n; ++i) layers.push_back(conv(3, 32, i - 1));
  return Architecture::layer_net(layers);
}

}  // namespace

TEST_CASE("identity scale is a fixed point") {
  ActionTables t;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    for (auto mode : {ArchMode::layer_net, ArchMode::cell_net}) {
      auto a = random_architecture(seed, mode);
      CHECK(apply_scale(a, ScaleAction::identity(t), t) == a);
    }
  }
}

TEST_CASE("channel snapping") {
  ActionTables t;
  const auto& dom = t.domains.layer.channels;
  CHECK(snap_channels(32 * 2.0, dom) == 64);
  CHECK(snap_channels(96 * 0.5, dom) == 64);  // 48 is equidistant from 32 and 64
  CHECK(snap_channels(16 * 0.5, dom) == 16);
  CHECK(snap_channels(256 * 2.0, dom) == 256);
  CHECK(snap_channels(96 * 0.75, dom) == 64);
  CHECK(snap_channels(12 * 0.75, t.domains.branch.channels) == 8);  // 9
  CHECK(snap_channels(20, t.domains.branch.channels) == 24);        // tie 16/24

  auto a = Architecture::layer_net({conv(3, 32, -1), conv(3, 96, 0)});
  t.num_parts = 1;
  CHECK(apply_scale(a, uniform_scale(t, 2.0, 0), t).layers[0].channels == 64);
  CHECK(apply_scale(a, uniform_scale(t, 0.5, 0), t).layers[1].channels == 64);
}

TEST_CASE("filter width clamps to odd values in [1, 7]") {
  CHECK(clamp_odd(9, 1, 7) == 7);
  CHECK(clamp_odd(-1, 1, 7) == 1);
  CHECK(clamp_odd(5, 1, 7) == 5);
  CHECK(clamp_odd(4, 1, 7) == 3);
  ActionTables t;
  t.num_parts = 1;
  auto a = Architecture::layer_net({conv(7, 32, -1), conv(1, 32, 0)});
  auto up = apply_scale(a, uniform_scale(t, 1.0, 2), t);
  CHECK(up.layers[0].filter_width == 7);
  CHECK(up.layers[1].filter_width == 3);
  auto down = apply_scale(a, uniform_scale(t, 1.0, -2), t);
  CHECK(down.layers[0].filter_width == 5);
  CHECK(down.layers[1].filter_width == 1);
}

TEST_CASE("parts split layers contiguously and scale independently") {
  CHECK(part_ranges(10, 4) == std::vector<std::pair<int, int>>{{0, 2}, {2, 5}, {5, 7}, {7, 10}});
  CHECK(part_ranges(2, 4) == std::vector<std::pair<int, int>>{{0, 0}, {0, 1}, {1, 1}, {1, 2}});
  ActionTables t;
  auto a = chain(4);
  ScaleAction s = ScaleAction::identity(t);
  s.parts[2].multiplier_index = 4;  // x2 on layer 2 only
  auto b = apply_scale(a, s, t);
  CHECK(b.layers[0].channels == 32);
  CHECK(b.layers[1].channels == 32);
  CHECK(b.layers[2].channels == 64);
  CHECK(b.layers[3].channels == 32);
}

TEST_CASE("append a layer to a chain") {
  ActionTables t;
  auto a = chain(3);
  auto b = apply_insert_layer(a, InsertAction::insert_layer(3, conv(5, 64, 0)), t);
  REQUIRE(b.layers.size() == 4);
  CHECK(b.layers[3].src1 == 2);
  CHECK(b.layers[3].src2 == -1);
  CHECK(b.layers[3].filter_width == 5);
}

TEST_CASE("insert after layer L with a skip to L-2") {
  ActionTables t;
  auto a = chain(5);
  const int L = 3;
  auto b = apply_insert_layer(a, InsertAction::insert_layer(L + 1, conv(3, 32, 0, L - 2)), t);
  CHECK(b.layers[L + 1].src1 == L);
  CHECK(b.layers[L + 1].src2 == L - 2);
  CHECK(b.layers[L + 2].src1 == L + 1);
}

TEST_CASE("insert shifts downstream references") {
  ActionTables t;
  // Layer 2 skip-reads layer 1.
  auto a = Architecture::layer_net({conv(3, 32, -1), conv(3, 32, 0), conv(3, 32, 1, 1), conv(3, 32, 2, 0)});
  const int l = 1;
  auto b = apply_insert_layer(a, InsertAction::insert_layer(l, conv(1, 16, 0)), t);
  CHECK(b.layers[3].src2 == 2);

  // Oracle: re-derive every reference of the original net.
  auto shift = [&](int s) { return s >= l ? s + 1 : s; };
  for (int i = 0; i < 4; ++i) {
    const auto& old = a.layers[i];
    const auto& now = b.layers[shift(i)];
    const int expect_src1 = (i == l && old.src1 == l - 1) ? l : shift(old.src1);
    CHECK(now.src1 == expect_src1);
    CHECK(now.src2 == shift(old.src2));
  }
  CHECK(b.layers[l].src1 == l - 1);
}

TEST_CASE("insert rejects skip sources at or after the position") {
  ActionTables t;
  CHECK_THROWS_AS(apply_insert_layer(chain(3), InsertAction::insert_layer(1, conv(3, 32, 0, 1)), t), ActionError);
  CHECK_THROWS_AS(apply_insert_layer(chain(3), InsertAction::insert_layer(5, conv(3, 32, 0)), t), ActionError);
}

TEST_CASE("branch insert cuts off the consumed branch") {
  ActionTables t;
  auto a = Architecture::cell_net({conv_branch(0), conv_branch(0)});
  // Branch 3 (index 2) sources branch 2 (slot 2).
  auto b = apply_insert_branch(a, InsertAction::insert_branch(conv_branch(2), 2), t);
  CHECK(b.cell[0].propagate);
  CHECK_FALSE(b.cell[1].propagate);
  CHECK(b.cell[2].propagate);

  auto c = apply_insert_branch(a, InsertAction::insert_branch(conv_branch(0), 2), t);
  CHECK(c.cell[0].propagate);
  CHECK(c.cell[1].propagate);
}

TEST_CASE("remove then reinsert the tail branch restores the cell") {
  ActionTables t;
  for (std::uint64_t seed = 0; seed < 300; ++seed) {
    auto a = random_architecture(seed, ArchMode::cell_net);
    const int last = static_cast<int>(a.cell.size()) - 1;
    auto removed = apply_remove(a, InsertAction::remove(last), t);
    auto back = apply_insert_branch(removed, InsertAction::insert_branch(a.cell[last], last), t);
    CHECK(serialize(back) == serialize(a));
  }
}

TEST_CASE("remove rewires references to the removed node's source") {
  ActionTables t;
  // Layer 3 adds layer 2 and layer 1; layer 1 is the only skip target.
  auto a = Architecture::layer_net({conv(3, 32, -1), conv(3, 32, 0), conv(3, 32, 1), add_of(2, 1)});
  auto b = apply_remove(a, InsertAction::remove(1), t);
  REQUIRE(b.layers.size() == 3);
  CHECK(b.layers[1].src1 == 0);  // old layer 2 read layer 1 -> now reads layer 0
  CHECK(b.layers[2].op_kind == OpKind::add);
  CHECK(b.layers[2].src1 == 1);
  CHECK(b.layers[2].src2 == 0);

  auto c = apply_remove(chain(3), InsertAction::remove(2), t);
  CHECK(c == chain(2));
  CHECK_THROWS_AS(apply_remove(chain(1), InsertAction::remove(0), t), ActionError);
  try {
    apply_remove(chain(1), InsertAction::remove(0), t);
  } catch (const ActionError& e) {
    CHECK(std::string(e.what()).find("would empty") != std::string::npos);
  }
}

TEST_CASE("position masks") {
  ActionTables t;
  auto a = chain(3);
  auto ins = valid_positions(a, InsertKind::insert, t);
  REQUIRE(ins.size() == 37);
  for (int s = 0; s < 37; ++s) CHECK(ins[s] == (s <= 3));
  auto rem = valid_positions(a, InsertKind::remove, t);
  for (int s = 0; s < 37; ++s) CHECK(rem[s] == (s < 3));

  auto full = chain(t.domains.max_layers);
  auto ins_full = valid_positions(full, InsertKind::insert, t);
  CHECK(std::none_of(ins_full.begin(), ins_full.end(), [](bool b) { return b; }));
  auto rem_full = valid_positions(full, InsertKind::remove, t);
  for (int s = 0; s < 37; ++s) CHECK(rem_full[s] == (s < t.domains.max_layers));

  auto cell = random_architecture(5, ArchMode::cell_net);
  auto cins = valid_positions(cell, InsertKind::insert, t);
  REQUIRE(cins.size() == 13);
  for (int s = 0; s < 13; ++s) CHECK(cins[s] == (s == static_cast<int>(cell.cell.size())));
}

TEST_CASE("remove mask excludes removals that would feed the input to an add") {
  ActionTables t;
  auto a = Architecture::layer_net({conv(3, 32, -1), add_of(0, 0), conv(3, 32, 1)});
  auto rem = valid_positions(a, InsertKind::remove, t);
  CHECK_FALSE(rem[0]);
  CHECK(rem[1]);
  CHECK(rem[2]);
}

TEST_CASE("keep is the identity and cardinality holds under random morphs") {
  ActionTables t;
  Rng rng(42);
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    auto a = random_architecture(seed, ArchMode::layer_net);
    CHECK(apply_insert_action(a, InsertAction::keep(), t) == a);
    ScaleAction s = ScaleAction::identity(t);
    for (auto& p : s.parts) {
      p.multiplier_index = static_cast<int>(rng.index(t.scale_table.size()));
      p.delta_index = static_cast<int>(rng.index(t.filter_delta_table.size()));
    }
    auto scaled = apply_scale(a, s, t);
    CHECK(scaled.node_count() == a.node_count());
    auto rem = valid_positions(scaled, InsertKind::remove, t);
    for (int r = 0; r < static_cast<int>(rem.size()); ++r) {
      if (!rem[r]) continue;
      CHECK(apply_remove(scaled, InsertAction::remove(r), t).node_count() == a.node_count() - 1);
    }
  }
}

TEST_CASE("action log records round-trip") {
  ActionTables t;
  ActionBundle b{ScaleAction::identity(t), InsertAction::insert_layer(2, conv(5, 64, 1, 0))};
  auto rec = action_log_record(4, b);
  CHECK(rec["step"] == 4);
  CHECK(bundle_from_json(rec) == b);
  BranchSpec br = conv_branch(1);
  ActionBundle c{ScaleAction::identity(t), InsertAction::insert_branch(br, 3)};
  CHECK(bundle_from_json(action_log_record(0, c)) == c);
  ActionBundle k{ScaleAction::identity(t), InsertAction::keep()};
  CHECK(bundle_from_json(action_log_record(1, k)) == k);
}

TEST_CASE("table checks") {
  ActionTables t;
  CHECK_NOTHROW(t.check());
  t.scale_table = {};
  CHECK_THROWS_AS(t.check(), ConfigError);
  t = ActionTables{};
  t.num_parts = 0;
  CHECK_THROWS_AS(t.check(), ConfigError);
  t = ActionTables{};
  t.scale_table = {1.0, -0.5};
  CHECK_THROWS_AS(t.check(), ConfigError);
}
