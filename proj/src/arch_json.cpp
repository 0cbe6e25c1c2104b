#include <initializer_list>
#include <set>

#include "morphnas/arch.hpp"
#include "morphnas/error.hpp"

namespace morphnas {

namespace {

using nlohmann::json;

void reject_unknown_keys(const json& j, const std::string& path, std::initializer_list<std::string_view> allowed) {
  for (const auto& [key, _] : j.items()) {
    bool known = false;
    for (auto a : allowed) known = known || a == key;
    if (!known) throw ParseError("unknown field", path + "." + key);
  }
}

const json& member(const json& j, const std::string& key, const std::string& path) {
  if (!j.is_object()) throw ParseError("expected an object", path);
  auto it = j.find(key);
  if (it == j.end()) throw ParseError("missing field", path + "." + key);
  return *it;
}

int get_int(const json& j, const std::string& key, const std::string& path) {
  const auto& v = member(j, key, path);
  if (!v.is_number_integer()) throw ParseError("expected an integer", path + "." + key);
  return v.get<int>();
}

bool get_bool(const json& j, const std::string& key, const std::string& path) {
  const auto& v = member(j, key, path);
  if (v.is_boolean()) return v.get<bool>();
  if (v.is_number_integer() && (v.get<int>() == 0 || v.get<int>() == 1)) return v.get<int>() == 1;
  throw ParseError("expected a boolean", path + "." + key);
}

template <typename Parser>
auto get_enum(const json& j, const std::string& key, const std::string& path, Parser parse) {
  const auto& v = member(j, key, path);
  if (!v.is_string()) throw ParseError("expected a string", path + "." + key);
  auto parsed = parse(v.get<std::string>());
  if (!parsed) throw ParseError("unknown value \"" + v.get<std::string>() + "\"", path + "." + key);
  return *parsed;
}

int line_of_offset(std::string_view text, std::size_t offset) {
  int line = 1;
  for (std::size_t i = 0; i < offset && i < text.size(); ++i)
    if (text[i] == '\n') ++line;
  return line;
}

std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace

json layer_to_json(const LayerSpec& l) {
  json j{{"op_kind", to_string(l.op_kind)}, {"filter_width", l.filter_width}, {"pool_width", l.pool_width},
         {"channels", l.channels},          {"activation", to_string(l.activation)},
         {"src1", l.src1},                  {"src2", l.src2}};
  if (l.kernel != KernelAxis::square) j["kernel"] = to_string(l.kernel);
  if (l.pool_stride != 0) j["pool_stride"] = l.pool_stride;
  return j;
}

json branch_to_json(const BranchSpec& b) {
  return json{{"branch_type", to_string(b.branch_type)},
              {"filter_width", b.filter_width},
              {"pool_width", b.pool_width},
              {"channels", b.channels},
              {"src1", b.src1},
              {"src2", b.src2},
              {"propagate", b.propagate}};
}

LayerSpec layer_from_json(const json& j, const std::string& path) {
  if (!j.is_object()) throw ParseError("expected an object", path);
  reject_unknown_keys(j, path,
                      {"op_kind", "filter_width", "pool_width", "channels", "activation", "src1", "src2", "kernel",
                       "pool_stride"});
  LayerSpec l;
  l.op_kind = get_enum(j, "op_kind", path, parse_op_kind);
  l.filter_width = get_int(j, "filter_width", path);
  l.pool_width = get_int(j, "pool_width", path);
  l.channels = get_int(j, "channels", path);
  l.activation = get_enum(j, "activation", path, parse_activation);
  l.src1 = get_int(j, "src1", path);
  l.src2 = get_int(j, "src2", path);
  if (j.contains("kernel")) l.kernel = get_enum(j, "kernel", path, parse_kernel_axis);
  if (j.contains("pool_stride")) l.pool_stride = get_int(j, "pool_stride", path);
  return l;
}

BranchSpec branch_from_json(const json& j, const std::string& path) {
  if (!j.is_object()) throw ParseError("expected an object", path);
  reject_unknown_keys(j, path, {"branch_type", "filter_width", "pool_width", "channels", "src1", "src2", "propagate"});
  BranchSpec b;
  b.branch_type = get_enum(j, "branch_type", path, parse_branch_type);
  b.filter_width = get_int(j, "filter_width", path);
  b.pool_width = get_int(j, "pool_width", path);
  b.channels = get_int(j, "channels", path);
  b.src1 = get_int(j, "src1", path);
  b.src2 = get_int(j, "src2", path);
  b.propagate = get_bool(j, "propagate", path);
  return b;
}

json to_json(const Architecture& arch) {
  json j;
  j["schema_version"] = kSchemaVersion;
  j["mode"] = to_string(arch.mode);
  if (arch.mode == ArchMode::layer_net) {
    auto layers = json::array();
    for (const auto& l : arch.layers) layers.push_back(layer_to_json(l));
    j["layers"] = std::move(layers);
  } else {
    auto cell = json::array();
    for (const auto& b : arch.cell) cell.push_back(branch_to_json(b));
    j["cell"] = std::move(cell);
    const auto& s = arch.stacking;
    j["stacking"] = {{"cells_per_stage", s.cells_per_stage},
                     {"num_stages", s.num_stages},
                     {"multiplier", {{"num", s.multiplier_num}, {"den", s.multiplier_den}}},
                     {"reduction", to_string(s.reduction)}};
  }
  return j;
}

Architecture from_json(const json& j) {
  if (!j.is_object()) throw ParseError("architecture must be a JSON object", "$");
  const int version = get_int(j, "schema_version", "$");
  if (version != kSchemaVersion)
    throw ParseError("unsupported schema_version " + std::to_string(version), "$.schema_version");
  const ArchMode mode = get_enum(j, "mode", "$", parse_arch_mode);

  if (mode == ArchMode::layer_net) {
    reject_unknown_keys(j, "$", {"schema_version", "mode", "layers"});
    const auto& arr = member(j, "layers", "$");
    if (!arr.is_array()) throw ParseError("expected an array", "$.layers");
    std::vector<LayerSpec> layers;
    for (std::size_t i = 0; i < arr.size(); ++i)
      layers.push_back(layer_from_json(arr[i], "$.layers[" + std::to_string(i) + "]"));
    return Architecture::layer_net(std::move(layers));
  }

  reject_unknown_keys(j, "$", {"schema_version", "mode", "cell", "stacking"});
  const auto& arr = member(j, "cell", "$");
  if (!arr.is_array()) throw ParseError("expected an array", "$.cell");
  std::vector<BranchSpec> cell;
  for (std::size_t i = 0; i < arr.size(); ++i)
    cell.push_back(branch_from_json(arr[i], "$.cell[" + std::to_string(i) + "]"));

  StackingTemplate stacking;
  if (j.contains("stacking")) {
    const auto& s = j.at("stacking");
    const std::string path = "$.stacking";
    if (!s.is_object()) throw ParseError("expected an object", path);
    reject_unknown_keys(s, path, {"cells_per_stage", "num_stages", "multiplier", "reduction"});
    stacking.cells_per_stage = get_int(s, "cells_per_stage", path);
    stacking.num_stages = get_int(s, "num_stages", path);
    const auto& m = member(s, "multiplier", path);
    reject_unknown_keys(m, path + ".multiplier", {"num", "den"});
    stacking.multiplier_num = get_int(m, "num", path + ".multiplier");
    stacking.multiplier_den = get_int(m, "den", path + ".multiplier");
    const auto& red = member(s, "reduction", path);
    if (!red.is_string() || red.get<std::string>() != "avg_pool_stride2")
      throw ParseError("unknown reduction", path + ".reduction");
  }
  return Architecture::cell_net(std::move(cell), stacking);
}

std::string serialize(const Architecture& arch, const SearchDomains& domains) {
  require_valid(arch, domains);
  return to_json(arch).dump();
}

Architecture deserialize(std::string_view text, const SearchDomains& domains) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ParseError(std::string("malformed JSON: ") + e.what(), {}, line_of_offset(text, e.byte));
  }
  Architecture arch = from_json(j);
  require_valid(arch, domains);
  return arch;
}

std::string arch_ref(const Architecture& arch) {
  static constexpr char kHex[] = "0123456789abcdef";
  std::uint64_t h = fnv1a(to_json(arch).dump());
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i, h >>= 4) out[i] = kHex[h & 0xf];
  return out;
}

}  // namespace morphnas
