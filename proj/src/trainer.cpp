#include "morphnas/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "morphnas/error.hpp"
#include "morphnas/resources.hpp"

namespace morphnas {

using ad::Tape;
using ad::Var;
using nlohmann::json;

Dataset make_dataset(const DatasetSpec& spec, std::uint64_t seed) {
  if (spec.classes < 2 || spec.height < 1 || spec.width < 1 || spec.channels < 1 || spec.train_size < 1 ||
      spec.val_size < 1 || !(spec.noise >= 0.0))
    throw ConfigError("invalid dataset spec", "dataset");
  const std::size_t C = spec.channels, H = spec.height, W = spec.width, pixels = C * H * W;
  std::vector<std::vector<double>> templates(spec.classes, std::vector<double>(pixels));
  for (int c = 0; c < spec.classes; ++c) {
    Rng rng(derive_seed(seed, "dataset-template", {static_cast<std::uint64_t>(c)}));
    for (auto& v : templates[c]) v = rng.uniform(-1.0, 1.0);
  }
  auto fill = [&](int n, const char* stream, Tensor& x, std::vector<int>& y) {
    Rng rng(derive_seed(seed, stream));
    x = Tensor(Shape{static_cast<std::size_t>(n), C, H, W});
    y.resize(n);
    for (int i = 0; i < n; ++i) {
      y[i] = i % spec.classes;
      for (std::size_t p = 0; p < pixels; ++p) x.data[i * pixels + p] = templates[y[i]][p] + spec.noise * rng.normal();
    }
  };
  Dataset d;
  d.spec = spec;
  fill(spec.train_size, "dataset-train", d.train_x, d.train_y);
  fill(spec.val_size, "dataset-val", d.val_x, d.val_y);
  return d;
}

namespace {

std::string layer_key(std::size_t i, const LayerSpec& l, const char* role) {
  return "L" + std::to_string(i) + "/" + std::string(to_string(l.op_kind)) + "/" + std::to_string(l.filter_width) +
         "/" + std::string(to_string(l.activation)) + "/" + std::string(to_string(l.kernel)) + "/" + role;
}

std::pair<std::size_t, std::size_t> kernel_dims(const LayerSpec& l) {
  const auto k = static_cast<std::size_t>(l.filter_width);
  switch (l.kernel) {
    case KernelAxis::row:
      return {1, k};
    case KernelAxis::col:
      return {k, 1};
    case KernelAxis::square:
      break;
  }
  return {k, k};
}

double fan_in_bound(std::size_t fan_in) { return std::sqrt(6.0 / static_cast<double>(fan_in)); }

}  // namespace

ModelLayout model_layout(const Architecture& arch, const InputShape& input, int classes) {
  const Architecture net = as_layer_net(arch, input);
  const auto costs = layer_costs(net, input);
  const FeatureShape in_shape{input.channels, input.height, input.width};
  auto shape_of = [&](int src) { return src < 0 ? in_shape : costs[src].output; };
  auto sz = [](int v) { return static_cast<std::size_t>(v); };

  ModelLayout layout;
  for (std::size_t i = 0; i < net.layers.size(); ++i) {
    const auto& l = net.layers[i];
    const std::string p = "L" + std::to_string(i) + ".";
    const std::size_t ci = sz(shape_of(l.src1).channels);
    if (l.op_kind == OpKind::conv2d) {
      const auto [kh, kw] = kernel_dims(l);
      const std::size_t co = sz(l.channels);
      layout[p + "W"] = {{co, ci, kh, kw}, fan_in_bound(ci * kh * kw), {false, false, true, true},
                         layer_key(i, l, "W")};
      layout[p + "b"] = {{co}, 0.0, {false}, layer_key(i, l, "b")};
    } else if (l.op_kind == OpKind::dep_sep_conv2d) {
      const auto k = sz(l.filter_width);
      const std::size_t co = sz(l.channels);
      layout[p + "dw"] = {{ci, 1, k, k}, fan_in_bound(k * k), {false, false, true, true}, layer_key(i, l, "dw")};
      layout[p + "pw"] = {{co, ci, 1, 1}, fan_in_bound(ci), {false, false, true, true}, layer_key(i, l, "pw")};
      layout[p + "b"] = {{co}, 0.0, {false}, layer_key(i, l, "b")};
    }
    if (costs[i].adapter) {
      const FeatureShape from = shape_of(l.src2);
      const std::size_t co = l.op_kind == OpKind::add ? sz(shape_of(l.src1).channels) : sz(costs[i].output.channels);
      const std::size_t cs = sz(from.channels);
      layout[p + "adapter.W"] = {{co, cs, 1, 1}, fan_in_bound(cs), {false, false, true, true},
                                 layer_key(i, l, "adapter.W")};
      layout[p + "adapter.b"] = {{co}, 0.0, {false}, layer_key(i, l, "adapter.b")};
    }
  }
  if (classes > 0) {
    const std::size_t c = sz(costs.back().output.channels), k = sz(classes);
    layout["head.W"] = {{k, c}, fan_in_bound(c), {false, false}, ""};
    layout["head.b"] = {{k}, 0.0, {false}, ""};
  }
  return layout;
}

std::uint64_t trainable_scalars(const ModelLayout& layout) {
  std::uint64_t n = 0;
  for (const auto& [name, info] : layout) n += shape_size(info.shape);
  return n;
}

Var forward(const Architecture& net, const std::function<Var(const std::string&)>& param, Var x) {
  std::vector<Var> outs;
  outs.reserve(net.layers.size());
  auto src = [&](int s) { return s < 0 ? x : outs[s]; };
  for (std::size_t i = 0; i < net.layers.size(); ++i) {
    const auto& l = net.layers[i];
    const std::string p = "L" + std::to_string(i) + ".";
    // Implicit 1x1 adapter onto the shape of `like`.
    auto adapt = [&](Var v, const Shape& like) {
      if (v.shape() == like) return v;
      Var r = ad::resample_nearest(v, like[2], like[3]);
      return ad::conv2d(r, param(p + "adapter.W"), param(p + "adapter.b"));
    };
    const Var in = src(l.src1);
    Var y;
    switch (l.op_kind) {
      case OpKind::conv2d:
        y = ad::conv2d(in, param(p + "W"), param(p + "b"));
        break;
      case OpKind::dep_sep_conv2d:
        y = ad::conv2d(ad::depthwise_conv2d(in, param(p + "dw")), param(p + "pw"), param(p + "b"));
        break;
      case OpKind::max_pool2d:
      case OpKind::avg_pool2d:
        y = ad::pool2d(in, l.op_kind, l.pool_width, pool_stride_of(l));
        break;
      case OpKind::add:
        y = ad::add(in, adapt(src(l.src2), in.shape()));
        break;
    }
    y = ad::activation(y, l.activation);
    if (l.op_kind != OpKind::add && l.src2 >= 0) y = ad::add(y, adapt(src(l.src2), y.shape()));
    outs.push_back(y);
  }
  return ad::linear(ad::global_avg_pool(outs.back()), param("head.W"), param("head.b"));
}

Tensor splice_or_pad(const Tensor& stored, const Shape& target, const std::vector<bool>& centered, double init_bound,
                     Rng& rng) {
  if (stored.rank() != target.size() || centered.size() != target.size())
    throw ShapeError("splice_or_pad: rank mismatch " + shape_string(stored.shape) + " -> " + shape_string(target));
  const std::size_t rank = target.size();
  std::vector<long> offset(rank);
  for (std::size_t a = 0; a < rank; ++a)
    offset[a] = centered[a] ? (static_cast<long>(stored.shape[a]) - static_cast<long>(target[a])) / 2 : 0;
  Tensor out(target);
  std::vector<std::size_t> idx(rank, 0);
  for (std::size_t flat = 0; flat < out.size(); ++flat) {
    std::size_t src = 0;
    bool inside = true;
    for (std::size_t a = 0; a < rank; ++a) {
      const long s = static_cast<long>(idx[a]) + offset[a];
      if (s < 0 || s >= static_cast<long>(stored.shape[a])) {
        inside = false;
        break;
      }
      src = src * stored.shape[a] + static_cast<std::size_t>(s);
    }
    out.data[flat] = inside ? stored.data[src] : (init_bound > 0.0 ? rng.uniform(-init_bound, init_bound) : 0.0);
    for (std::size_t a = rank; a-- > 0;) {
      if (++idx[a] < target[a]) break;
      idx[a] = 0;
    }
  }
  return out;
}

const DictEntry* WeightDictionary::find(const std::string& key) const {
  auto it = entries_.find(key);
  return it == entries_.end() ? nullptr : &it->second;
}

void WeightDictionary::merge(const std::vector<DictContribution>& batch, int step) {
  for (const auto& c : batch)
    for (const auto& [key, tensor] : c.weights) {
      auto it = entries_.find(key);
      if (it == entries_.end() || c.accuracy > it->second.accuracy) entries_[key] = DictEntry{tensor, c.accuracy, step};
    }
}

void WeightDictionary::save(const std::filesystem::path& path) const {
  NamedTensors tensors;
  json meta = json::object();
  for (const auto& [key, e] : entries_) {
    tensors.emplace(key, e.value);
    meta[key] = {{"accuracy", e.accuracy}, {"step", e.step}};
  }
  save_tensor_file(path, tensors, {{"kind", "weight_dictionary"}, {"entries", meta}});
}

WeightDictionary WeightDictionary::load(const std::filesystem::path& path) {
  TensorFile f = load_tensor_file(path);
  WeightDictionary d;
  try {
    if (f.meta.at("kind") != "weight_dictionary") throw IoError(path.string() + ": not a weight dictionary");
    for (auto& [key, tensor] : f.tensors) {
      const auto& m = f.meta.at("entries").at(key);
      d.entries_[key] = DictEntry{std::move(tensor), m.at("accuracy").get<double>(), m.at("step").get<int>()};
    }
  } catch (const json::exception& e) {
    throw IoError(path.string() + ": bad dictionary metadata: " + e.what());
  }
  return d;
}

bool operator==(const WeightDictionary& a, const WeightDictionary& b) {
  if (a.entries_.size() != b.entries_.size()) return false;
  for (const auto& [key, e] : a.entries_) {
    const auto* o = b.find(key);
    if (!o || o->value != e.value || o->accuracy != e.accuracy || o->step != e.step) return false;
  }
  return true;
}

NamedTensors init_params(const ModelLayout& layout, const WeightDictionary* dict, Rng& rng, int* warm) {
  NamedTensors params;
  int reused = 0;
  for (const auto& [name, info] : layout) {
    const DictEntry* e = dict && !info.dict_key.empty() ? dict->find(info.dict_key) : nullptr;
    if (e && e->value.rank() == info.shape.size()) {
      params.emplace(name, splice_or_pad(e->value, info.shape, info.centered, info.init_bound, rng));
      ++reused;
      continue;
    }
    Tensor t(info.shape);
    if (info.init_bound > 0.0)
      for (auto& v : t.data) v = rng.uniform(-info.init_bound, info.init_bound);
    params.emplace(name, std::move(t));
  }
  if (warm) *warm = reused;
  return params;
}

DictContribution contribution(const ModelLayout& layout, const NamedTensors& params, double accuracy) {
  DictContribution c;
  c.accuracy = accuracy;
  for (const auto& [name, info] : layout)
    if (!info.dict_key.empty()) c.weights.emplace(info.dict_key, params.at(name));
  return c;
}

namespace {

Tensor gather_batch(const Tensor& x, const std::vector<std::size_t>& rows) {
  const std::size_t per = x.size() / x.dim(0);
  Tensor out(Shape{rows.size(), x.dim(1), x.dim(2), x.dim(3)});
  for (std::size_t r = 0; r < rows.size(); ++r)
    std::copy_n(x.data.begin() + static_cast<long>(rows[r] * per), per, out.data.begin() + static_cast<long>(r * per));
  return out;
}

}  // namespace

double accuracy(const Architecture& net, const NamedTensors& params, const Tensor& x, const std::vector<int>& y) {
  const std::size_t n = x.dim(0), chunk = 256;
  std::size_t correct = 0;
  for (std::size_t begin = 0; begin < n; begin += chunk) {
    std::vector<std::size_t> rows(std::min(chunk, n - begin));
    std::iota(rows.begin(), rows.end(), begin);
    Tape tape;
    auto param = [&](const std::string& name) { return tape.constant_ref(params.at(name)); };
    const Tensor logits = forward(net, param, tape.constant(gather_batch(x, rows))).value();
    const std::size_t K = logits.dim(1);
    for (std::size_t r = 0; r < rows.size(); ++r) {
      const auto* row = &logits.data[r * K];
      const auto best = static_cast<int>(std::max_element(row, row + K) - row);
      if (best == y[rows[r]]) ++correct;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(n);
}

TrainOutcome train_from(const Architecture& arch, const TrainConfig& cfg, const Dataset& data, NamedTensors params,
                        std::uint64_t seed) {
  cfg.check();
  const Architecture net = as_layer_net(arch, data.spec.input());
  const std::size_t n = data.train_x.dim(0);
  const std::size_t batch = std::min<std::size_t>(static_cast<std::size_t>(cfg.batch_size), n);
  const std::size_t batches = (n + batch - 1) / batch;
  constexpr double momentum = 0.9;

  TrainOutcome out;
  NamedTensors velocity = zeros_like(params);
  NamedTensors grads = zeros_like(params);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  out.best_accuracy = -1.0;

  for (int epoch = 0; epoch < cfg.max_epochs; ++epoch) {
    Rng shuffle(derive_seed(seed, "shuffle", {static_cast<std::uint64_t>(epoch)}));
    for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[shuffle.index(i)]);
    double loss_sum = 0.0;
    for (std::size_t b = 0; b < batches; ++b) {
      const double lr = cosine_lr(epoch + static_cast<double>(b) / static_cast<double>(batches), cfg);
      const std::size_t begin = b * batch, end = std::min(n, begin + batch);
      std::vector<std::size_t> rows(order.begin() + static_cast<long>(begin), order.begin() + static_cast<long>(end));
      std::vector<int> labels(rows.size());
      for (std::size_t r = 0; r < rows.size(); ++r) labels[r] = data.train_y[rows[r]];
      for (auto& [name, g] : grads) g.fill(0.0);

      Tape tape;
      std::map<std::string, Var> bound;
      auto param = [&](const std::string& name) {
        auto it = bound.find(name);
        if (it != bound.end()) return it->second;
        return bound.emplace(name, tape.param(params.at(name), grads.at(name))).first->second;
      };
      Var loss = ad::softmax_cross_entropy(forward(net, param, tape.constant(gather_batch(data.train_x, rows))), labels);
      const double value = loss.item();
      if (!std::isfinite(value)) {
        out.ok = false;
        out.error = "non-finite training loss in epoch " + std::to_string(epoch + 1);
        return out;
      }
      tape.backward(loss);
      loss_sum += value;
      for (auto& [name, w] : params) {
        auto& v = velocity.at(name).data;
        const auto& g = grads.at(name).data;
        for (std::size_t k = 0; k < w.size(); ++k) {
          v[k] = momentum * v[k] + g[k];
          w.data[k] -= lr * (g[k] + momentum * v[k]);
        }
      }
    }
    out.train_loss.push_back(loss_sum / static_cast<double>(batches));
    const double acc = accuracy(net, params, data.val_x, data.val_y);
    out.val_accuracy.push_back(acc);
    if (acc > out.best_accuracy) {
      out.best_accuracy = acc;
      out.best_epoch = epoch + 1;
      out.best_params = params;
    }
  }
  return out;
}

TrainOutcome train_model(const Architecture& arch, const TrainConfig& cfg, const Dataset& data,
                         const WeightDictionary* dict, std::uint64_t seed) {
  const auto layout = model_layout(arch, data.spec.input(), data.spec.classes);
  Rng init(derive_seed(seed, "init"));
  int warm = 0;
  NamedTensors params = init_params(layout, dict, init, &warm);
  TrainOutcome out = train_from(arch, cfg, data, std::move(params), seed);
  out.warm_tensors = warm;
  return out;
}

NativeEvaluator::NativeEvaluator(NativeConfig config) : config_(std::move(config)) {}

const Dataset& NativeEvaluator::dataset(std::uint64_t seed) {
  std::lock_guard lock(mutex_);
  auto it = datasets_.find(seed);
  if (it == datasets_.end()) it = datasets_.emplace(seed, make_dataset(config_.dataset, seed)).first;
  return it->second;
}

EvalResult NativeEvaluator::evaluate(const EvalRequest& request) {
  const auto& cfg = request.train_config;
  if (!(cfg.input == config_.dataset.input()) || cfg.classes != config_.dataset.classes)
    return EvalResult::failure(request.id, "native evaluator trains on " + to_string(config_.dataset.input()) +
                                               " inputs with " + std::to_string(config_.dataset.classes) +
                                               " classes; train_config asks for " + to_string(cfg.input) + " / " +
                                               std::to_string(cfg.classes));
  try {
    require_valid(request.architecture, SearchDomains::any_capacity());
    const Dataset& data = dataset(cfg.dataset_seed);
    const auto seed = derive_seed(config_.seed, "native:" + request.id);
    TrainOutcome t = train_model(request.architecture, cfg, data, config_.share_weights ? &dict_ : nullptr, seed);
    if (!t.ok) return EvalResult::failure(request.id, t.error);
    EvalResult r;
    r.id = request.id;
    r.performance = t.best_accuracy;
    r.metrics = {{"epochs", t.train_loss.size()}, {"best_epoch", t.best_epoch},  {"train_loss", t.train_loss},
                 {"val_accuracy", t.val_accuracy}, {"warm_tensors", t.warm_tensors}};
    if (config_.share_weights) {
      auto c = contribution(model_layout(request.architecture, data.spec.input(), data.spec.classes), t.best_params,
                            t.best_accuracy);
      std::lock_guard lock(mutex_);
      pending_[request.id] = std::move(c);
    }
    return r;
  } catch (const Error& e) {
    return EvalResult::failure(request.id, e.what());
  }
}

void NativeEvaluator::begin_episode(int) {
  if (config_.clear_per_episode) dict_.clear();
}

void NativeEvaluator::end_step(int step_stamp) {
  std::lock_guard lock(mutex_);
  std::vector<DictContribution> batch;
  for (auto& [id, c] : pending_) batch.push_back(std::move(c));
  pending_.clear();
  dict_.merge(batch, step_stamp);
}

void NativeEvaluator::save_state(const std::filesystem::path& dir) const { dict_.save(dir / "weight_dictionary.bin"); }

void NativeEvaluator::load_state(const std::filesystem::path& dir) {
  const auto path = dir / "weight_dictionary.bin";
  dict_ = std::filesystem::exists(path) ? WeightDictionary::load(path) : WeightDictionary{};
}

}  // namespace morphnas
