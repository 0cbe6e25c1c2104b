#include "morphnas/policy.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <optional>

#include "morphnas/autodiff.hpp"
#include "morphnas/error.hpp"

namespace morphnas {

using nlohmann::json;

nlohmann::json PolicyConfig::to_json() const {
  return {{"embed_dim", embed_dim},
          {"encoder_hidden", encoder_hidden},
          {"scale_hidden", scale_hidden},
          {"insert_hidden", insert_hidden},
          {"init_range", init_range}};
}

PolicyConfig PolicyConfig::from_json(const nlohmann::json& j) {
  PolicyConfig c;
  for (const auto& [key, value] : j.items()) {
    if (key == "embed_dim") c.embed_dim = value.get<int>();
    else if (key == "encoder_hidden") c.encoder_hidden = value.get<int>();
    else if (key == "scale_hidden") c.scale_hidden = value.get<int>();
    else if (key == "insert_hidden") c.insert_hidden = value.get<int>();
    else if (key == "init_range") c.init_range = value.get<double>();
    else throw ConfigError("unknown field '" + key + "'", "policy");
  }
  if (c.embed_dim < 1 || c.encoder_hidden < 1 || c.scale_hidden < 1 || c.insert_hidden < 1)
    throw ConfigError("sizes must be positive", "policy");
  if (!(c.init_range >= 0.0)) throw ConfigError("init_range must be >= 0", "policy");
  return c;
}

namespace {

using ad::Tape;
using ad::Var;

struct FieldSpec {
  std::string name;
  std::size_t size;
};

std::size_t sz(std::size_t n) { return n; }

/// Encoder feature tables per mode. Optional numeric fields reserve index 0
/// for "absent" (stored as 0).
std::vector<FieldSpec> encoder_features(const ActionTables& t, ArchMode mode) {
  const auto& d = t.domains;
  if (mode == ArchMode::layer_net) {
    return {{"op_kind", sz(d.layer.op_kinds.size())},
            {"filter_width", d.layer.filter_widths.size() + 1},
            {"pool_width", d.layer.pool_widths.size() + 1},
            {"channels", d.layer.channels.size() + 1},
            {"activation", d.layer.activations.size() + 1},
            {"src1", sz(d.max_layers) + 1},
            {"src2", sz(d.max_layers) + 1}};
  }
  return {{"branch_type", d.branch.types.size()},
          {"filter_width", d.branch.filter_widths.size() + 1},
          {"pool_width", d.branch.pool_widths.size() + 1},
          {"channels", d.branch.channels.size() + 1},
          {"src1", sz(d.max_branches) + 1},
          {"src2", sz(d.max_branches) + 1},
          {"propagate", 2}};
}

/// Insert-head decision fields per mode.
std::vector<FieldSpec> insert_fields(const ActionTables& t, ArchMode mode) {
  const auto& d = t.domains;
  const std::size_t slots = static_cast<std::size_t>(t.position_slots(mode));
  if (mode == ArchMode::layer_net) {
    return {{"kind", 3},
            {"position", slots},
            {"op_kind", d.layer.op_kinds.size()},
            {"filter_width", d.layer.filter_widths.size()},
            {"pool_width", d.layer.pool_widths.size()},
            {"channels", d.layer.channels.size()},
            {"activation", d.layer.activations.size()},
            {"src2", sz(d.max_layers) + 1}};
  }
  return {{"kind", 3},
          {"position", slots},
          {"branch_type", d.branch.types.size()},
          {"filter_width", d.branch.filter_widths.size()},
          {"pool_width", d.branch.pool_widths.size()},
          {"channels", d.branch.channels.size()},
          {"src1", sz(d.max_branches) + 1},
          {"src2", sz(d.max_branches) + 1},
          {"propagate", 2}};
}

template <typename T>
std::optional<int> index_in(const std::vector<T>& domain, const T& v) {
  auto it = std::find(domain.begin(), domain.end(), v);
  if (it == domain.end()) return std::nullopt;
  return static_cast<int>(it - domain.begin());
}

/// Index for an optional numeric feature: 0 = absent, else 1 + domain index.
int optional_index(const std::vector<int>& domain, int value, const char* feature) {
  if (value == 0) return 0;
  auto i = index_in(domain, value);
  if (!i) throw DomainError(std::string("feature ") + feature + " value " + std::to_string(value) + " outside its table");
  return *i + 1;
}

template <typename T>
int required_index(const std::vector<T>& domain, const T& value, const char* feature) {
  auto i = index_in(domain, value);
  if (!i) throw DomainError(std::string("feature ") + feature + " value outside its table");
  return *i;
}

int source_index(int src, int max, const char* feature) {
  if (src + 1 < 0 || src + 1 > max) throw DomainError(std::string("feature ") + feature + " outside its table");
  return src + 1;
}

/// Resolves parameter names to tape nodes, as trainable params or constants.
class Binder {
 public:
  Binder(Tape& tape, const PolicyParams& params, NamedTensors* grad) : tape_(tape), params_(params), grad_(grad) {}

  Var operator()(const std::string& name) {
    auto it = cache_.find(name);
    if (it != cache_.end()) return it->second;
    auto pit = params_.tensors.find(name);
    if (pit == params_.tensors.end()) throw ConfigError("missing policy tensor '" + name + "'", "policy");
    Var v = grad_ ? tape_.param(pit->second, grad_->at(name)) : tape_.constant_ref(pit->second);
    cache_.emplace(name, v);
    return v;
  }

  Tape& tape() { return tape_; }

 private:
  Tape& tape_;
  const PolicyParams& params_;
  NamedTensors* grad_;
  std::map<std::string, Var> cache_;
};

struct LstmState {
  Var h, c;
};

LstmState lstm_step(Binder& P, const std::string& prefix, Var x, LstmState s, std::size_t H) {
  Var z = ad::add(ad::matvec(P(prefix + ".W"), ad::concat({x, s.h})), P(prefix + ".b"));
  Var i = ad::sigmoid(ad::slice(z, 0, H));
  Var f = ad::sigmoid(ad::slice(z, H, H));
  Var o = ad::sigmoid(ad::slice(z, 2 * H, H));
  Var g = ad::tanh(ad::slice(z, 3 * H, H));
  Var c = ad::add(ad::mul(f, s.c), ad::mul(i, g));
  return {ad::mul(o, ad::tanh(c)), c};
}

LstmState zero_state(Tape& t, std::size_t H) { return {t.constant(Tensor(Shape{H})), t.constant(Tensor(Shape{H}))}; }

Var encode(Binder& P, const PolicyParams& params, const Architecture& arch, const ActionTables& t) {
  if (arch.mode != params.mode) throw ConfigError("policy was built for the other search mode", "policy");
  const auto H = static_cast<std::size_t>(params.config.encoder_hidden);
  const auto& d = t.domains;
  LstmState s = zero_state(P.tape(), H);
  auto row = [&](const char* feature, int index) { return ad::gather_row(P(std::string("embed.") + feature), index); };
  if (arch.mode == ArchMode::layer_net) {
    for (const auto& l : arch.layers) {
      const int act = l.activation == Activation::none
                          ? 0
                          : required_index(d.layer.activations, l.activation, "activation") + 1;
      Var e = ad::add_n({row("op_kind", required_index(d.layer.op_kinds, l.op_kind, "op_kind")),
                         row("filter_width", optional_index(d.layer.filter_widths, l.filter_width, "filter_width")),
                         row("pool_width", optional_index(d.layer.pool_widths, l.pool_width, "pool_width")),
                         row("channels", optional_index(d.layer.channels, l.channels, "channels")),
                         row("activation", act), row("src1", source_index(l.src1, d.max_layers, "src1")),
                         row("src2", source_index(l.src2, d.max_layers, "src2"))});
      s = lstm_step(P, "encoder", e, s, H);
    }
  } else {
    for (const auto& b : arch.cell) {
      Var e = ad::add_n(
          {row("branch_type", required_index(d.branch.types, b.branch_type, "branch_type")),
           row("filter_width", optional_index(d.branch.filter_widths, b.filter_width, "filter_width")),
           row("pool_width", optional_index(d.branch.pool_widths, b.pool_width, "pool_width")),
           row("channels", optional_index(d.branch.channels, b.channels, "channels")),
           row("src1", source_index(b.src1 - 1, d.max_branches, "src1")),
           row("src2", source_index(b.src2 - 1, d.max_branches, "src2")), row("propagate", b.propagate ? 1 : 0)});
      s = lstm_step(P, "encoder", e, s, H);
    }
  }
  return s.h;
}

bool any(const std::vector<bool>& m) { return std::find(m.begin(), m.end(), true) != m.end(); }

/// Chooses a slot for a field given its log-probabilities and mask.
using DecideFn = std::function<int(const std::string& field, const Tensor& logp, const std::vector<bool>& mask)>;

struct Decoded {
  ActionBundle bundle;
  Var logprob;
  Var entropy;
  std::vector<FieldDecision> decisions;
};

/// Autoregressive decoder shared by sampling and scoring.
class Decoder {
 public:
  Decoder(Binder& P, const PolicyParams& params, const std::string& prefix, std::size_t hidden, Var first_input,
          DecideFn& decide)
      : P_(P), prefix_(prefix), hidden_(hidden), pending_(first_input), decide_(decide) {
    state_ = zero_state(P.tape(), hidden);
    (void)params;
  }

  /// Advances the recurrent cell on the pending input and decides one field
  /// with output projection `proj`.
  int field(const std::string& name, const std::string& proj, const std::vector<bool>& mask) {
    advance();
    return decide_here(name, proj, mask);
  }

  /// Decides a field from the current hidden state without advancing.
  int decide_here(const std::string& name, const std::string& proj, const std::vector<bool>& mask) {
    Var logits = ad::add(ad::matvec(P_(proj + ".W"), state_.h), P_(proj + ".b"));
    Var lp = ad::masked_log_softmax(logits, mask);
    const int choice = decide_(name, lp.value(), mask);
    if (choice < 0 || choice >= static_cast<int>(mask.size()) || !mask[choice])
      throw ImpossibleActionError("field " + name + ": choice " + std::to_string(choice) + " is masked");
    Var term = ad::pick(lp, static_cast<std::size_t>(choice));
    logps_.push_back(term);
    entropies_.push_back(ad::masked_entropy(logits, mask));
    decisions_.push_back({name, choice, static_cast<int>(std::count(mask.begin(), mask.end(), true)), term.item()});
    return choice;
  }

  void feed(Var next_input) { pending_ = next_input; }
  void advance() { state_ = lstm_step(P_, prefix_, pending_, state_, hidden_); }

  std::vector<Var>& logps() { return logps_; }
  std::vector<Var>& entropies() { return entropies_; }
  std::vector<FieldDecision>& decisions() { return decisions_; }

 private:
  Binder& P_;
  std::string prefix_;
  std::size_t hidden_;
  Var pending_;
  LstmState state_;
  DecideFn& decide_;
  std::vector<Var> logps_, entropies_;
  std::vector<FieldDecision> decisions_;
};

Decoded run_controller(Binder& P, const PolicyParams& params, const Architecture& arch, const ActionTables& t,
                       DecideFn decide) {
  Var net = encode(P, params, arch, t);
  const auto& d = t.domains;
  Decoded out;

  // Scale head: one step per part, multiplier and delta from the same state.
  Decoder scale(P, params, "scale", static_cast<std::size_t>(params.config.scale_hidden), net, decide);
  out.bundle.scale.parts.resize(t.num_parts);
  for (int f = 0; f < t.num_parts; ++f) {
    const std::string idx = std::to_string(f);
    const int m = scale.field("mult." + idx, "scale.mult." + idx, std::vector<bool>(t.scale_table.size(), true));
    const int dl = scale.decide_here("delta." + idx, "scale.delta." + idx,
                                     std::vector<bool>(t.filter_delta_table.size(), true));
    out.bundle.scale.parts[f] = {m, dl};
    scale.feed(ad::add(ad::gather_row(P("scale.embed.mult"), m), ad::gather_row(P("scale.embed.delta"), dl)));
  }

  // Insert head: kind, position, then payload fields.
  Decoder ins(P, params, "insert", static_cast<std::size_t>(params.config.insert_hidden), net, decide);
  auto field = [&](const std::string& name, const std::vector<bool>& mask) {
    const int v = ins.field(name, "insert." + name, mask);
    ins.feed(ad::gather_row(P("insert.embed." + name), static_cast<std::size_t>(v)));
    return v;
  };

  const auto ins_mask = valid_positions(arch, InsertKind::insert, t);
  const auto rem_mask = valid_positions(arch, InsertKind::remove, t);
  const int kind = field("kind", {any(ins_mask), any(rem_mask), true});
  auto& action = out.bundle.insert;
  action.kind = static_cast<InsertKind>(kind);
  if (action.kind != InsertKind::keep) {
    action.position = field("position", action.kind == InsertKind::insert ? ins_mask : rem_mask);
  }
  if (action.kind == InsertKind::insert) {
    const int pos = action.position;
    if (arch.mode == ArchMode::layer_net) {
      LayerSpec l;
      std::vector<bool> op_mask(d.layer.op_kinds.size(), true);
      for (std::size_t i = 0; i < op_mask.size(); ++i)
        if (d.layer.op_kinds[i] == OpKind::add && pos == 0) op_mask[i] = false;
      l.op_kind = d.layer.op_kinds[field("op_kind", op_mask)];
      if (is_conv(l.op_kind)) {
        l.filter_width = d.layer.filter_widths[field("filter_width", std::vector<bool>(d.layer.filter_widths.size(), true))];
        l.channels = d.layer.channels[field("channels", std::vector<bool>(d.layer.channels.size(), true))];
        l.activation = d.layer.activations[field("activation", std::vector<bool>(d.layer.activations.size(), true))];
      } else if (is_pool(l.op_kind)) {
        l.pool_width = d.layer.pool_widths[field("pool_width", std::vector<bool>(d.layer.pool_widths.size(), true))];
      }
      std::vector<bool> src_mask(static_cast<std::size_t>(d.max_layers) + 1, false);
      for (int s = (l.op_kind == OpKind::add ? 0 : -1); s < pos; ++s) src_mask[s + 1] = true;
      l.src2 = field("src2", src_mask) - 1;
      l.src1 = pos - 1;
      action.payload = l;
    } else {
      const int n = static_cast<int>(arch.cell.size());
      BranchSpec b;
      b.branch_type = d.branch.types[field("branch_type", std::vector<bool>(d.branch.types.size(), true))];
      if (branch_uses_filter_width(b.branch_type))
        b.filter_width =
            d.branch.filter_widths[field("filter_width", std::vector<bool>(d.branch.filter_widths.size(), true))];
      if (branch_has_pool(b.branch_type))
        b.pool_width = d.branch.pool_widths[field("pool_width", std::vector<bool>(d.branch.pool_widths.size(), true))];
      if (branch_has_conv(b.branch_type))
        b.channels = d.branch.channels[field("channels", std::vector<bool>(d.branch.channels.size(), true))];
      std::vector<bool> src_mask(static_cast<std::size_t>(d.max_branches) + 1, false);
      for (int s = 0; s <= n; ++s) src_mask[s] = true;
      b.src1 = field("src1", src_mask);
      if (branch_has_second_op(b.branch_type)) b.src2 = field("src2", src_mask);
      b.propagate = field("propagate", {true, true}) == 1;
      action.payload = b;
    }
  }

  std::vector<Var> lps = scale.logps();
  lps.insert(lps.end(), ins.logps().begin(), ins.logps().end());
  std::vector<Var> ents = scale.entropies();
  ents.insert(ents.end(), ins.entropies().begin(), ins.entropies().end());
  out.logprob = ad::add_n(lps);
  out.entropy = ad::add_n(ents);
  out.decisions = scale.decisions();
  out.decisions.insert(out.decisions.end(), ins.decisions().begin(), ins.decisions().end());
  return out;
}

/// Field values a bundle implies; fields the bundle cannot express are absent.
std::map<std::string, int> bundle_targets(const ActionBundle& bundle, const ActionTables& t, ArchMode mode) {
  std::map<std::string, int> m;
  if (static_cast<int>(bundle.scale.parts.size()) != t.num_parts)
    throw ImpossibleActionError("scale action needs exactly " + std::to_string(t.num_parts) + " parts");
  for (int f = 0; f < t.num_parts; ++f) {
    m["mult." + std::to_string(f)] = bundle.scale.parts[f].multiplier_index;
    m["delta." + std::to_string(f)] = bundle.scale.parts[f].delta_index;
  }
  const auto& a = bundle.insert;
  m["kind"] = static_cast<int>(a.kind);
  m["position"] = a.position;
  const auto& d = t.domains;
  auto put = [&](const char* name, std::optional<int> v) {
    if (v) m[name] = *v;
  };
  if (const auto* l = std::get_if<LayerSpec>(&a.payload); l && mode == ArchMode::layer_net) {
    put("op_kind", index_in(d.layer.op_kinds, l->op_kind));
    put("filter_width", index_in(d.layer.filter_widths, l->filter_width));
    put("pool_width", index_in(d.layer.pool_widths, l->pool_width));
    put("channels", index_in(d.layer.channels, l->channels));
    put("activation", index_in(d.layer.activations, l->activation));
    m["src2"] = l->src2 + 1;
  }
  if (const auto* b = std::get_if<BranchSpec>(&a.payload); b && mode == ArchMode::cell_net) {
    put("branch_type", index_in(d.branch.types, b->branch_type));
    put("filter_width", index_in(d.branch.filter_widths, b->filter_width));
    put("pool_width", index_in(d.branch.pool_widths, b->pool_width));
    put("channels", index_in(d.branch.channels, b->channels));
    m["src1"] = b->src1;
    m["src2"] = b->src2;
    m["propagate"] = b->propagate ? 1 : 0;
  }
  return m;
}

Decoded score_on(Binder& P, const PolicyParams& params, const Architecture& arch, const ActionBundle& bundle,
                 const ActionTables& t) {
  const auto targets = bundle_targets(bundle, t, arch.mode);
  Decoded out = run_controller(P, params, arch, t, [&](const std::string& field, const Tensor&, const std::vector<bool>&) {
    auto it = targets.find(field);
    if (it == targets.end()) throw ImpossibleActionError("bundle does not determine field " + field);
    return it->second;
  });
  if (!(out.bundle == bundle)) throw ImpossibleActionError("bundle is not expressible by the controller");
  return out;
}

SampledStep to_step(const Decoded& d, std::uint64_t seed) {
  return {d.bundle, d.logprob.item(), d.entropy.item(), seed, d.decisions};
}

}  // namespace

std::map<std::string, Shape> policy_shapes(const PolicyConfig& c, const ActionTables& t, ArchMode mode) {
  const auto E = static_cast<std::size_t>(c.embed_dim);
  const auto H = static_cast<std::size_t>(c.encoder_hidden);
  const auto S = static_cast<std::size_t>(c.scale_hidden);
  const auto I = static_cast<std::size_t>(c.insert_hidden);
  std::map<std::string, Shape> shapes;
  for (const auto& f : encoder_features(t, mode)) shapes["embed." + f.name] = {f.size, E};
  shapes["encoder.W"] = {4 * H, E + H};
  shapes["encoder.b"] = {4 * H};
  shapes["scale.W"] = {4 * S, H + S};
  shapes["scale.b"] = {4 * S};
  const std::size_t nm = t.scale_table.size(), nd = t.filter_delta_table.size();
  for (int f = 0; f < t.num_parts; ++f) {
    const std::string idx = std::to_string(f);
    shapes["scale.mult." + idx + ".W"] = {nm, S};
    shapes["scale.mult." + idx + ".b"] = {nm};
    shapes["scale.delta." + idx + ".W"] = {nd, S};
    shapes["scale.delta." + idx + ".b"] = {nd};
  }
  shapes["scale.embed.mult"] = {nm, H};
  shapes["scale.embed.delta"] = {nd, H};
  shapes["insert.W"] = {4 * I, H + I};
  shapes["insert.b"] = {4 * I};
  for (const auto& f : insert_fields(t, mode)) {
    shapes["insert." + f.name + ".W"] = {f.size, I};
    shapes["insert." + f.name + ".b"] = {f.size};
    shapes["insert.embed." + f.name] = {f.size, H};
  }
  return shapes;
}

PolicyParams init_policy(const PolicyConfig& config, const ActionTables& tables, ArchMode mode, std::uint64_t seed) {
  tables.check();
  PolicyParams p{config, mode, {}};
  Rng rng(seed);
  for (const auto& [name, shape] : policy_shapes(config, tables, mode)) {
    Tensor t(shape);
    for (auto& v : t.data) v = rng.uniform(-config.init_range, config.init_range);
    p.tensors.emplace(name, std::move(t));
  }
  return p;
}

std::vector<double> embed_network(const PolicyParams& params, const Architecture& arch, const ActionTables& tables) {
  Tape tape;
  Binder P(tape, params, nullptr);
  return encode(P, params, arch, tables).value().data;
}

SampledStep sample(const PolicyParams& params, const Architecture& arch, Rng& rng, const ActionTables& tables) {
  Tape tape;
  Binder P(tape, params, nullptr);
  const std::uint64_t seed = rng.seed();
  Decoded d = run_controller(P, params, arch, tables, [&](const std::string&, const Tensor& logp, const std::vector<bool>& mask) {
    const double u = rng.uniform01();
    double cum = 0.0;
    int last = -1;
    for (std::size_t i = 0; i < mask.size(); ++i) {
      if (!mask[i]) continue;
      last = static_cast<int>(i);
      cum += std::exp(logp.data[i]);
      if (u < cum) return last;
    }
    return last;
  });
  return to_step(d, seed);
}

SampledStep score(const PolicyParams& params, const Architecture& arch, const ActionBundle& bundle,
                  const ActionTables& tables) {
  Tape tape;
  Binder P(tape, params, nullptr);
  return to_step(score_on(P, params, arch, bundle, tables), 0);
}

double logprob(const PolicyParams& params, const Architecture& arch, const ActionBundle& bundle,
               const ActionTables& tables) {
  return score(params, arch, bundle, tables).logprob;
}

double accumulate_grad_logprob(const PolicyParams& params, const Architecture& arch, const ActionBundle& bundle,
                               const ActionTables& tables, double weight, NamedTensors& grad, double entropy_weight) {
  Tape tape;
  Binder P(tape, params, &grad);
  Decoded d = score_on(P, params, arch, bundle, tables);
  Var root = ad::scale(d.logprob, weight);
  if (entropy_weight != 0.0) root = ad::add(root, ad::scale(d.entropy, entropy_weight));
  tape.backward(root);
  return d.logprob.item();
}

NamedTensors grad_logprob(const PolicyParams& params, const Architecture& arch, const ActionBundle& bundle,
                          const ActionTables& tables) {
  NamedTensors grad = zeros_like(params.tensors);
  accumulate_grad_logprob(params, arch, bundle, tables, 1.0, grad);
  return grad;
}

void save_policy(const std::filesystem::path& path, const PolicyParams& params, const nlohmann::json& extra_meta) {
  json meta{{"kind", "policy"},
            {"config", params.config.to_json()},
            {"mode", to_string(params.mode)},
            {"extra", extra_meta}};
  save_tensor_file(path, params.tensors, meta);
}

PolicyParams load_policy(const std::filesystem::path& path, const ActionTables& tables) {
  TensorFile f = load_tensor_file(path);
  try {
    if (f.meta.at("kind") != "policy") throw IoError(path.string() + ": not a policy checkpoint");
    PolicyParams p;
    p.config = PolicyConfig::from_json(f.meta.at("config"));
    auto mode = parse_arch_mode(f.meta.at("mode").get<std::string>());
    if (!mode) throw IoError(path.string() + ": unknown mode");
    p.mode = *mode;
    const auto shapes = policy_shapes(p.config, tables, p.mode);
    if (shapes.size() != f.tensors.size()) throw IoError(path.string() + ": tensor set does not match the action tables");
    for (const auto& [name, shape] : shapes) {
      auto it = f.tensors.find(name);
      if (it == f.tensors.end() || it->second.shape != shape)
        throw IoError(path.string() + ": tensor '" + name + "' missing or mis-shaped");
    }
    p.tensors = std::move(f.tensors);
    return p;
  } catch (const json::exception& e) {
    throw IoError(path.string() + ": bad policy metadata: " + e.what());
  }
}

}  // namespace morphnas
