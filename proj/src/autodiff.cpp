#include "morphnas/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "morphnas/error.hpp"

namespace morphnas::ad {

namespace {

Tape& tape_of(Var v) {
  if (!v.valid()) throw ShapeError("autodiff: use of an invalid Var");
  return *v.tape;
}

void require_shape(bool ok, const char* op, const std::string& detail) {
  if (!ok) throw ShapeError(std::string(op) + ": " + detail);
}

constexpr double kSeluLambda = 1.0507009873554805;
constexpr double kSeluAlpha = 1.6732632423543772;

double sigmoid_scalar(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

const Tensor& Var::value() const { return tape_of(*this).value(id); }

Var Tape::constant(Tensor value) {
  Node n;
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return {this, static_cast<int>(nodes_.size()) - 1};
}

Var Tape::constant_ref(const Tensor& value) {
  Node n;
  n.external_value = &value;
  nodes_.push_back(std::move(n));
  return {this, static_cast<int>(nodes_.size()) - 1};
}

Var Tape::param(const Tensor& value, Tensor& grad) {
  if (grad.data.empty()) grad = Tensor(value.shape);
  require_shape(grad.shape == value.shape, "param", "gradient buffer shape mismatch");
  Node n;
  n.external_value = &value;
  n.external_grad = &grad;
  n.requires_grad = true;
  nodes_.push_back(std::move(n));
  return {this, static_cast<int>(nodes_.size()) - 1};
}

Var Tape::record(Tensor value, std::initializer_list<Var> inputs, Backward backward) {
  return record(std::move(value), std::vector<Var>(inputs), std::move(backward));
}

Var Tape::record(Tensor value, const std::vector<Var>& inputs, Backward backward) {
  Node n;
  n.value = std::move(value);
  for (const auto& v : inputs)
    if (v.valid() && nodes_[v.id].requires_grad) n.requires_grad = true;
  if (n.requires_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return {this, static_cast<int>(nodes_.size()) - 1};
}

const Tensor& Tape::value(int id) const {
  const Node& n = nodes_.at(id);
  return n.external_value ? *n.external_value : n.value;
}

Tensor& Tape::grad(int id) {
  Node& n = nodes_.at(id);
  n.has_grad = true;
  if (n.external_grad) return *n.external_grad;
  if (n.grad.data.empty()) n.grad = Tensor(value(id).shape);
  return n.grad;
}

const Tensor* Tape::grad_if_any(int id) const {
  const Node& n = nodes_.at(id);
  if (!n.has_grad) return nullptr;
  return n.external_grad ? n.external_grad : &n.grad;
}

void Tape::backward(Var root) {
  require_shape(root.tape == this, "backward", "root belongs to another tape");
  require_shape(value(root.id).size() == 1, "backward", "root must be a scalar");
  if (!nodes_[root.id].requires_grad) return;
  grad(root.id).data[0] += 1.0;
  for (int i = root.id; i >= 0; --i) {
    Node& n = nodes_[i];
    if (n.has_grad && n.requires_grad && n.backward) n.backward(*this, i);
  }
}

// ---- Vector ops -------------------------------------------------------------

Var matvec(Var W, Var x) {
  Tape& t = tape_of(W);
  const Tensor& w = W.value();
  const Tensor& xv = x.value();
  require_shape(w.rank() == 2 && xv.rank() == 1 && w.dim(1) == xv.dim(0), "matvec",
                shape_string(w.shape) + " x " + shape_string(xv.shape));
  const std::size_t m = w.dim(0), n = w.dim(1);
  Tensor y(Shape{m});
  for (std::size_t i = 0; i < m; ++i) {
    double s = 0.0;
    const double* row = &w.data[i * n];
    for (std::size_t j = 0; j < n; ++j) s += row[j] * xv.data[j];
    y.data[i] = s;
  }
  const int wi = W.id, xi = x.id;
  return t.record(std::move(y), {W, x}, [wi, xi, m, n](Tape& t, int self) {
    const Tensor& gy = t.grad(self);
    if (t.requires_grad(wi)) {
      Tensor& gw = t.grad(wi);
      const Tensor& xv = t.value(xi);
      for (std::size_t i = 0; i < m; ++i) {
        const double g = gy.data[i];
        if (g == 0.0) continue;
        double* row = &gw.data[i * n];
        for (std::size_t j = 0; j < n; ++j) row[j] += g * xv.data[j];
      }
    }
    if (t.requires_grad(xi)) {
      Tensor& gx = t.grad(xi);
      const Tensor& w = t.value(wi);
      for (std::size_t i = 0; i < m; ++i) {
        const double g = gy.data[i];
        if (g == 0.0) continue;
        const double* row = &w.data[i * n];
        for (std::size_t j = 0; j < n; ++j) gx.data[j] += g * row[j];
      }
    }
  });
}

namespace {

template <typename F, typename DA, typename DB>
Var binary(Var a, Var b, const char* op, F f, DA da, DB db) {
  Tape& t = tape_of(a);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require_shape(av.shape == bv.shape, op, shape_string(av.shape) + " vs " + shape_string(bv.shape));
  Tensor y(av.shape);
  for (std::size_t i = 0; i < y.size(); ++i) y.data[i] = f(av.data[i], bv.data[i]);
  const int ai = a.id, bi = b.id;
  return t.record(std::move(y), {a, b}, [ai, bi, da, db](Tape& t, int self) {
    const Tensor& gy = t.grad(self);
    const Tensor& av = t.value(ai);
    const Tensor& bv = t.value(bi);
    if (t.requires_grad(ai)) {
      Tensor& ga = t.grad(ai);
      for (std::size_t i = 0; i < gy.size(); ++i) ga.data[i] += gy.data[i] * da(av.data[i], bv.data[i]);
    }
    if (t.requires_grad(bi)) {
      Tensor& gb = t.grad(bi);
      for (std::size_t i = 0; i < gy.size(); ++i) gb.data[i] += gy.data[i] * db(av.data[i], bv.data[i]);
    }
  });
}

template <typename F, typename D>
Var unary(Var a, F f, D d) {
  Tape& t = tape_of(a);
  const Tensor& av = a.value();
  Tensor y(av.shape);
  for (std::size_t i = 0; i < y.size(); ++i) y.data[i] = f(av.data[i]);
  const int ai = a.id;
  return t.record(std::move(y), {a}, [ai, d](Tape& t, int self) {
    const Tensor& gy = t.grad(self);
    const Tensor& av = t.value(ai);
    const Tensor& yv = t.value(self);
    Tensor& ga = t.grad(ai);
    for (std::size_t i = 0; i < gy.size(); ++i) ga.data[i] += gy.data[i] * d(av.data[i], yv.data[i]);
  });
}

}  // namespace

Var add(Var a, Var b) {
  return binary(
      a, b, "add", [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
      [](double, double) { return 1.0; });
}

Var sub(Var a, Var b) {
  return binary(
      a, b, "sub", [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
      [](double, double) { return -1.0; });
}

Var mul(Var a, Var b) {
  return binary(
      a, b, "mul", [](double x, double y) { return x * y; }, [](double, double y) { return y; },
      [](double x, double) { return x; });
}

Var scale(Var a, double c) {
  return unary(a, [c](double x) { return c * x; }, [c](double, double) { return c; });
}

Var sigmoid(Var a) {
  return unary(a, sigmoid_scalar, [](double, double y) { return y * (1.0 - y); });
}

Var tanh(Var a) {
  return unary(a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

Var slice(Var a, std::size_t begin, std::size_t len) {
  Tape& t = tape_of(a);
  const Tensor& av = a.value();
  require_shape(av.rank() == 1 && begin + len <= av.size(), "slice", "range outside " + shape_string(av.shape));
  Tensor y(Shape{len});
  std::copy_n(av.data.begin() + begin, len, y.data.begin());
  const int ai = a.id;
  return t.record(std::move(y), {a}, [ai, begin, len](Tape& t, int self) {
    const Tensor& gy = t.grad(self);
    Tensor& ga = t.grad(ai);
    for (std::size_t i = 0; i < len; ++i) ga.data[begin + i] += gy.data[i];
  });
}

Var concat(const std::vector<Var>& parts) {
  require_shape(!parts.empty(), "concat", "no inputs");
  Tape& t = tape_of(parts.front());
  std::vector<double> data;
  std::vector<std::pair<int, std::size_t>> spans;
  for (const auto& p : parts) {
    const Tensor& v = p.value();
    require_shape(v.rank() == 1, "concat", "inputs must be 1-D");
    spans.emplace_back(p.id, v.size());
    data.insert(data.end(), v.data.begin(), v.data.end());
  }
  const std::size_t n = data.size();
  return t.record(Tensor(Shape{n}, std::move(data)), parts, [spans](Tape& t, int self) {
    const Tensor& gy = t.grad(self);
    std::size_t off = 0;
    for (const auto& [id, len] : spans) {
      if (t.requires_grad(id)) {
        Tensor& g = t.grad(id);
        for (std::size_t i = 0; i < len; ++i) g.data[i] += gy.data[off + i];
      }
      off += len;
    }
  });
}

Var gather_row(Var table, std::size_t row) {
  Tape& t = tape_of(table);
  const Tensor& tv = table.value();
  require_shape(tv.rank() == 2 && row < tv.dim(0), "gather_row",
                "row " + std::to_string(row) + " of " + shape_string(tv.shape));
  const std::size_t d = tv.dim(1);
  Tensor y(Shape{d});
  std::copy_n(tv.data.begin() + row * d, d, y.data.begin());
  const int ti = table.id;
  return t.record(std::move(y), {table}, [ti, row, d](Tape& t, int self) {
    const Tensor& gy = t.grad(self);
    Tensor& g = t.grad(ti);
    for (std::size_t i = 0; i < d; ++i) g.data[row * d + i] += gy.data[i];
  });
}

Var add_n(const std::vector<Var>& terms) {
  require_shape(!terms.empty(), "add_n", "no inputs");
  Tape& t = tape_of(terms.front());
  Tensor y(terms.front().shape());
  std::vector<int> ids;
  for (const auto& v : terms) {
    const Tensor& tv = v.value();
    require_shape(tv.shape == y.shape, "add_n", "shape mismatch");
    for (std::size_t i = 0; i < y.size(); ++i) y.data[i] += tv.data[i];
    ids.push_back(v.id);
  }
  return t.record(std::move(y), terms, [ids](Tape& t, int self) {
    const Tensor& gy = t.grad(self);
    for (int id : ids) {
      if (!t.requires_grad(id)) continue;
      Tensor& g = t.grad(id);
      for (std::size_t i = 0; i < gy.size(); ++i) g.data[i] += gy.data[i];
    }
  });
}

Var sum(Var a) {
  Tape& t = tape_of(a);
  double s = 0.0;
  for (double v : a.value().data) s += v;
  const int ai = a.id;
  return t.record(Tensor(Shape{1}, s), {a}, [ai](Tape& t, int self) {
    const double g = t.grad(self).data[0];
    Tensor& ga = t.grad(ai);
    for (double& v : ga.data) v += g;
  });
}

namespace {

/// Softmax probabilities over the mask; masked entries are 0.
std::vector<double> masked_softmax(const Tensor& z, const std::vector<bool>& mask, double* log_norm) {
  require_shape(z.rank() == 1 && mask.size() == z.size(), "masked_softmax", "mask size mismatch");
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < z.size(); ++i)
    if (mask[i]) mx = std::max(mx, z.data[i]);
  if (!std::isfinite(mx)) throw ImpossibleActionError("categorical with every slot masked");
  double s = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i)
    if (mask[i]) s += std::exp(z.data[i] - mx);
  const double lse = mx + std::log(s);
  std::vector<double> p(z.size(), 0.0);
  for (std::size_t i = 0; i < z.size(); ++i)
    if (mask[i]) p[i] = std::exp(z.data[i] - lse);
  if (log_norm) *log_norm = lse;
  return p;
}

}  // namespace

Var masked_log_softmax(Var logits, const std::vector<bool>& mask) {
  Tape& t = tape_of(logits);
  const Tensor& z = logits.value();
  double lse = 0.0;
  auto p = masked_softmax(z, mask, &lse);
  Tensor y(z.shape, -std::numeric_limits<double>::infinity());
  for (std::size_t i = 0; i < z.size(); ++i)
    if (mask[i]) y.data[i] = z.data[i] - lse;
  const int zi = logits.id;
  return t.record(std::move(y), {logits}, [zi, mask, p = std::move(p)](Tape& t, int self) {
    const Tensor& gy = t.grad(self);
    double total = 0.0;
    for (std::size_t i = 0; i < gy.size(); ++i)
      if (mask[i]) total += gy.data[i];
    Tensor& gz = t.grad(zi);
    for (std::size_t i = 0; i < gy.size(); ++i)
      if (mask[i]) gz.data[i] += gy.data[i] - p[i] * total;
  });
}

Var pick(Var a, std::size_t i) {
  Tape& t = tape_of(a);
  const Tensor& av = a.value();
  require_shape(i < av.size(), "pick", "index " + std::to_string(i) + " of " + shape_string(av.shape));
  const int ai = a.id;
  return t.record(Tensor(Shape{1}, av.data[i]), {a}, [ai, i](Tape& t, int self) {
    t.grad(ai).data[i] += t.grad(self).data[0];
  });
}

Var masked_entropy(Var logits, const std::vector<bool>& mask) {
  Tape& t = tape_of(logits);
  const Tensor& z = logits.value();
  auto p = masked_softmax(z, mask, nullptr);
  double h = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i)
    if (mask[i] && p[i] > 0.0) h -= p[i] * std::log(p[i]);
  const int zi = logits.id;
  return t.record(Tensor(Shape{1}, h), {logits}, [zi, mask, h, p = std::move(p)](Tape& t, int self) {
    const double g = t.grad(self).data[0];
    Tensor& gz = t.grad(zi);
    for (std::size_t k = 0; k < p.size(); ++k)
      if (mask[k] && p[k] > 0.0) gz.data[k] += -g * p[k] * (std::log(p[k]) + h);
  });
}

// ---- Image ops --------------------------------------------------------------

namespace {

struct Dims {
  std::size_t b, c, h, w;
};

Dims dims4(const Tensor& x, const char* op) {
  require_shape(x.rank() == 4, op, "expected [B, C, H, W], got " + shape_string(x.shape));
  return {x.dim(0), x.dim(1), x.dim(2), x.dim(3)};
}

/// out[.., y, x] += w * in[.., y + dy, x + dx] over the valid rows/cols of an
/// H x W plane (same-size input and output).
inline void shifted_axpy(double* out, const double* in, double w, long dy, long dx, long H, long W) {
  const long y0 = std::max(0L, -dy), y1 = std::min(H, H - dy);
  const long x0 = std::max(0L, -dx), x1 = std::min(W, W - dx);
  for (long y = y0; y < y1; ++y) {
    double* o = out + y * W;
    const double* s = in + (y + dy) * W + dx;
    for (long x = x0; x < x1; ++x) o[x] += w * s[x];
  }
}

/// sum over valid positions of a[y, x] * in[y + dy, x + dx].
inline double shifted_dot(const double* a, const double* in, long dy, long dx, long H, long W) {
  const long y0 = std::max(0L, -dy), y1 = std::min(H, H - dy);
  const long x0 = std::max(0L, -dx), x1 = std::min(W, W - dx);
  double s = 0.0;
  for (long y = y0; y < y1; ++y) {
    const double* o = a + y * W;
    const double* src = in + (y + dy) * W + dx;
    for (long x = x0; x < x1; ++x) s += o[x] * src[x];
  }
  return s;
}

/// out[y + dy, x + dx] += w * g[y, x]: the adjoint of shifted_axpy.
inline void shifted_axpy_adjoint(double* out, const double* g, double w, long dy, long dx, long H, long W) {
  const long y0 = std::max(0L, -dy), y1 = std::min(H, H - dy);
  const long x0 = std::max(0L, -dx), x1 = std::min(W, W - dx);
  for (long y = y0; y < y1; ++y) {
    const double* gr = g + y * W;
    double* o = out + (y + dy) * W + dx;
    for (long x = x0; x < x1; ++x) o[x] += w * gr[x];
  }
}

}  // namespace

Var conv2d(Var x, Var W, Var bias) {
  Tape& t = tape_of(x);
  const Tensor& xv = x.value();
  const Tensor& wv = W.value();
  const Dims d = dims4(xv, "conv2d");
  require_shape(wv.rank() == 4 && wv.dim(1) == d.c && wv.dim(2) % 2 == 1 && wv.dim(3) % 2 == 1, "conv2d",
                "weight " + shape_string(wv.shape) + " for input " + shape_string(xv.shape));
  const std::size_t co = wv.dim(0), kh = wv.dim(2), kw = wv.dim(3);
  const bool has_bias = bias.valid();
  if (has_bias) require_shape(bias.value().shape == Shape{co}, "conv2d", "bias shape");
  const long H = static_cast<long>(d.h), Wd = static_cast<long>(d.w);
  const std::size_t plane = d.h * d.w;
  const long ph = static_cast<long>(kh / 2), pw = static_cast<long>(kw / 2);

  Tensor y(Shape{d.b, co, d.h, d.w});
  for (std::size_t b = 0; b < d.b; ++b) {
    for (std::size_t o = 0; o < co; ++o) {
      double* out = &y.data[(b * co + o) * plane];
      if (has_bias) std::fill_n(out, plane, bias.value().data[o]);
      for (std::size_t c = 0; c < d.c; ++c) {
        const double* in = &xv.data[(b * d.c + c) * plane];
        const double* k = &wv.data[((o * d.c + c) * kh) * kw];
        for (std::size_t i = 0; i < kh; ++i)
          for (std::size_t j = 0; j < kw; ++j)
            shifted_axpy(out, in, k[i * kw + j], static_cast<long>(i) - ph, static_cast<long>(j) - pw, H, Wd);
      }
    }
  }

  const int xi = x.id, wi = W.id, bi = has_bias ? bias.id : -1;
  std::vector<Var> inputs{x, W};
  if (has_bias) inputs.push_back(bias);
  return t.record(std::move(y), inputs, [=](Tape& t, int self) {
    const Tensor& gy = t.grad(self);
    const Tensor& xv = t.value(xi);
    const Tensor& wv = t.value(wi);
    const bool gx_needed = t.requires_grad(xi), gw_needed = t.requires_grad(wi);
    Tensor* gx = gx_needed ? &t.grad(xi) : nullptr;
    Tensor* gw = gw_needed ? &t.grad(wi) : nullptr;
    if (bi >= 0 && t.requires_grad(bi)) {
      Tensor& gb = t.grad(bi);
      for (std::size_t b = 0; b < d.b; ++b)
        for (std::size_t o = 0; o < co; ++o) {
          const double* g = &gy.data[(b * co + o) * plane];
          double s = 0.0;
          for (std::size_t p = 0; p < plane; ++p) s += g[p];
          gb.data[o] += s;
        }
    }
    for (std::size_t b = 0; b < d.b; ++b) {
      for (std::size_t o = 0; o < co; ++o) {
        const double* g = &gy.data[(b * co + o) * plane];
        for (std::size_t c = 0; c < d.c; ++c) {
          const double* in = &xv.data[(b * d.c + c) * plane];
          const std::size_t kbase = ((o * d.c + c) * kh) * kw;
          for (std::size_t i = 0; i < kh; ++i)
            for (std::size_t j = 0; j < kw; ++j) {
              const long dy = static_cast<long>(i) - ph, dx = static_cast<long>(j) - pw;
              if (gw) gw->data[kbase + i * kw + j] += shifted_dot(g, in, dy, dx, H, Wd);
              if (gx)
                shifted_axpy_adjoint(&gx->data[(b * d.c + c) * plane], g, wv.data[kbase + i * kw + j], dy, dx, H, Wd);
            }
        }
      }
    }
  });
}

Var depthwise_conv2d(Var x, Var W) {
  Tape& t = tape_of(x);
  const Tensor& xv = x.value();
  const Tensor& wv = W.value();
  const Dims d = dims4(xv, "depthwise_conv2d");
  require_shape(wv.rank() == 4 && wv.dim(0) == d.c && wv.dim(1) == 1 && wv.dim(2) % 2 == 1 && wv.dim(3) % 2 == 1,
                "depthwise_conv2d", "weight " + shape_string(wv.shape) + " for input " + shape_string(xv.shape));
  const std::size_t kh = wv.dim(2), kw = wv.dim(3);
  const long H = static_cast<long>(d.h), Wd = static_cast<long>(d.w);
  const std::size_t plane = d.h * d.w;
  const long ph = static_cast<long>(kh / 2), pw = static_cast<long>(kw / 2);

  Tensor y(xv.shape);
  for (std::size_t b = 0; b < d.b; ++b)
    for (std::size_t c = 0; c < d.c; ++c) {
      const std::size_t off = (b * d.c + c) * plane;
      for (std::size_t i = 0; i < kh; ++i)
        for (std::size_t j = 0; j < kw; ++j)
          shifted_axpy(&y.data[off], &xv.data[off], wv.data[(c * kh + i) * kw + j], static_cast<long>(i) - ph,
                       static_cast<long>(j) - pw, H, Wd);
    }

  const int xi = x.id, wi = W.id;
  return t.record(std::move(y), {x, W}, [=](Tape& t, int self) {
    const Tensor& gy = t.grad(self);
    const Tensor& xv = t.value(xi);
    const Tensor& wv = t.value(wi);
    Tensor* gx = t.requires_grad(xi) ? &t.grad(xi) : nullptr;
    Tensor* gw = t.requires_grad(wi) ? &t.grad(wi) : nullptr;
    for (std::size_t b = 0; b < d.b; ++b)
      for (std::size_t c = 0; c < d.c; ++c) {
        const std::size_t off = (b * d.c + c) * plane;
        for (std::size_t i = 0; i < kh; ++i)
          for (std::size_t j = 0; j < kw; ++j) {
            const long dy = static_cast<long>(i) - ph, dx = static_cast<long>(j) - pw;
            const std::size_t k = (c * kh + i) * kw + j;
            if (gw) gw->data[k] += shifted_dot(&gy.data[off], &xv.data[off], dy, dx, H, Wd);
            if (gx) shifted_axpy_adjoint(&gx->data[off], &gy.data[off], wv.data[k], dy, dx, H, Wd);
          }
      }
  });
}

Var pool2d(Var x, OpKind kind, int width, int stride) {
  Tape& t = tape_of(x);
  const Tensor& xv = x.value();
  const Dims d = dims4(xv, "pool2d");
  require_shape(is_pool(kind) && width >= 1 && stride >= 1, "pool2d", "bad pool parameters");
  const long H = static_cast<long>(d.h), Wd = static_cast<long>(d.w);
  const long ho = (H + stride - 1) / stride, wo = (Wd + stride - 1) / stride;
  const long pad = stride == width ? 0 : (width - 1) / 2;
  const bool is_max = kind == OpKind::max_pool2d;

  Tensor y(Shape{d.b, d.c, static_cast<std::size_t>(ho), static_cast<std::size_t>(wo)});
  // For max: flat input index of the winner; for avg: window element count.
  std::vector<long> aux(y.size());
  for (std::size_t bc = 0; bc < d.b * d.c; ++bc) {
    const double* in = &xv.data[bc * d.h * d.w];
    for (long oy = 0; oy < ho; ++oy)
      for (long ox = 0; ox < wo; ++ox) {
        const long ys = oy * stride - pad, xs = ox * stride - pad;
        const long y0 = std::max(0L, ys), y1 = std::min(H, ys + width);
        const long x0 = std::max(0L, xs), x1 = std::min(Wd, xs + width);
        const std::size_t oi = bc * ho * wo + oy * wo + ox;
        if (is_max) {
          long best = y0 * Wd + x0;
          for (long yy = y0; yy < y1; ++yy)
            for (long xx = x0; xx < x1; ++xx)
              if (in[yy * Wd + xx] > in[best]) best = yy * Wd + xx;
          y.data[oi] = in[best];
          aux[oi] = static_cast<long>(bc * d.h * d.w) + best;
        } else {
          double s = 0.0;
          for (long yy = y0; yy < y1; ++yy)
            for (long xx = x0; xx < x1; ++xx) s += in[yy * Wd + xx];
          const long count = (y1 - y0) * (x1 - x0);
          y.data[oi] = s / static_cast<double>(count);
          aux[oi] = count;
        }
      }
  }

  const int xi = x.id;
  return t.record(std::move(y), {x}, [=, aux = std::move(aux)](Tape& t, int self) {
    const Tensor& gy = t.grad(self);
    Tensor& gx = t.grad(xi);
    for (std::size_t bc = 0; bc < d.b * d.c; ++bc)
      for (long oy = 0; oy < ho; ++oy)
        for (long ox = 0; ox < wo; ++ox) {
          const std::size_t oi = bc * ho * wo + oy * wo + ox;
          const double g = gy.data[oi];
          if (is_max) {
            gx.data[aux[oi]] += g;
            continue;
          }
          const long ys = oy * stride - pad, xs = ox * stride - pad;
          const long y0 = std::max(0L, ys), y1 = std::min(H, ys + width);
          const long x0 = std::max(0L, xs), x1 = std::min(Wd, xs + width);
          const double share = g / static_cast<double>(aux[oi]);
          double* base = &gx.data[bc * d.h * d.w];
          for (long yy = y0; yy < y1; ++yy)
            for (long xx = x0; xx < x1; ++xx) base[yy * Wd + xx] += share;
        }
  });
}

Var resample_nearest(Var x, std::size_t h, std::size_t w) {
  Tape& t = tape_of(x);
  const Tensor& xv = x.value();
  const Dims d = dims4(xv, "resample_nearest");
  if (d.h == h && d.w == w) return x;
  std::vector<std::size_t> index(h * w);
  for (std::size_t yy = 0; yy < h; ++yy)
    for (std::size_t xx = 0; xx < w; ++xx) index[yy * w + xx] = (yy * d.h / h) * d.w + (xx * d.w / w);
  Tensor y(Shape{d.b, d.c, h, w});
  for (std::size_t bc = 0; bc < d.b * d.c; ++bc)
    for (std::size_t p = 0; p < h * w; ++p) y.data[bc * h * w + p] = xv.data[bc * d.h * d.w + index[p]];
  const int xi = x.id;
  return t.record(std::move(y), {x}, [=, index = std::move(index)](Tape& t, int self) {
    const Tensor& gy = t.grad(self);
    Tensor& gx = t.grad(xi);
    for (std::size_t bc = 0; bc < d.b * d.c; ++bc)
      for (std::size_t p = 0; p < h * w; ++p) gx.data[bc * d.h * d.w + index[p]] += gy.data[bc * h * w + p];
  });
}

Var activation(Var x, Activation a) {
  switch (a) {
    case Activation::none:
      return x;
    case Activation::relu:
      return unary(x, [](double v) { return v > 0.0 ? v : 0.0; }, [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
    case Activation::elu:
      return unary(
          x, [](double v) { return v > 0.0 ? v : std::expm1(v); },
          [](double v, double) { return v > 0.0 ? 1.0 : std::exp(v); });
    case Activation::selu:
      return unary(
          x, [](double v) { return kSeluLambda * (v > 0.0 ? v : kSeluAlpha * std::expm1(v)); },
          [](double v, double) { return kSeluLambda * (v > 0.0 ? 1.0 : kSeluAlpha * std::exp(v)); });
    case Activation::swish:
      return unary(
          x, [](double v) { return v * sigmoid_scalar(v); },
          [](double v, double) {
            const double s = sigmoid_scalar(v);
            return s + v * s * (1.0 - s);
          });
    case Activation::crelu: {
      Tape& t = tape_of(x);
      const Tensor& xv = x.value();
      const Dims d = dims4(xv, "crelu");
      const std::size_t plane = d.h * d.w, block = d.c * plane;
      Tensor y(Shape{d.b, 2 * d.c, d.h, d.w});
      for (std::size_t b = 0; b < d.b; ++b)
        for (std::size_t i = 0; i < block; ++i) {
          const double v = xv.data[b * block + i];
          y.data[b * 2 * block + i] = v > 0.0 ? v : 0.0;
          y.data[b * 2 * block + block + i] = v < 0.0 ? -v : 0.0;
        }
      const int xi = x.id;
      return t.record(std::move(y), {x}, [=](Tape& t, int self) {
        const Tensor& gy = t.grad(self);
        const Tensor& xv = t.value(xi);
        Tensor& gx = t.grad(xi);
        for (std::size_t b = 0; b < d.b; ++b)
          for (std::size_t i = 0; i < block; ++i) {
            const double v = xv.data[b * block + i];
            if (v > 0.0) gx.data[b * block + i] += gy.data[b * 2 * block + i];
            if (v < 0.0) gx.data[b * block + i] -= gy.data[b * 2 * block + block + i];
          }
      });
    }
  }
  return x;
}

Var global_avg_pool(Var x) {
  Tape& t = tape_of(x);
  const Tensor& xv = x.value();
  const Dims d = dims4(xv, "global_avg_pool");
  const std::size_t plane = d.h * d.w;
  Tensor y(Shape{d.b, d.c});
  for (std::size_t bc = 0; bc < d.b * d.c; ++bc) {
    double s = 0.0;
    for (std::size_t p = 0; p < plane; ++p) s += xv.data[bc * plane + p];
    y.data[bc] = s / static_cast<double>(plane);
  }
  const int xi = x.id;
  return t.record(std::move(y), {x}, [=](Tape& t, int self) {
    const Tensor& gy = t.grad(self);
    Tensor& gx = t.grad(xi);
    for (std::size_t bc = 0; bc < d.b * d.c; ++bc) {
      const double g = gy.data[bc] / static_cast<double>(plane);
      for (std::size_t p = 0; p < plane; ++p) gx.data[bc * plane + p] += g;
    }
  });
}

Var linear(Var x, Var W, Var b) {
  Tape& t = tape_of(x);
  const Tensor& xv = x.value();
  const Tensor& wv = W.value();
  require_shape(xv.rank() == 2 && wv.rank() == 2 && wv.dim(1) == xv.dim(1), "linear",
                shape_string(xv.shape) + " x " + shape_string(wv.shape));
  const std::size_t B = xv.dim(0), n = xv.dim(1), K = wv.dim(0);
  require_shape(b.value().shape == Shape{K}, "linear", "bias shape");
  Tensor y(Shape{B, K});
  for (std::size_t r = 0; r < B; ++r)
    for (std::size_t k = 0; k < K; ++k) {
      double s = b.value().data[k];
      for (std::size_t j = 0; j < n; ++j) s += wv.data[k * n + j] * xv.data[r * n + j];
      y.data[r * K + k] = s;
    }
  const int xi = x.id, wi = W.id, bi = b.id;
  return t.record(std::move(y), {x, W, b}, [=](Tape& t, int self) {
    const Tensor& gy = t.grad(self);
    const Tensor& xv = t.value(xi);
    const Tensor& wv = t.value(wi);
    Tensor* gx = t.requires_grad(xi) ? &t.grad(xi) : nullptr;
    Tensor* gw = t.requires_grad(wi) ? &t.grad(wi) : nullptr;
    Tensor* gb = t.requires_grad(bi) ? &t.grad(bi) : nullptr;
    for (std::size_t r = 0; r < B; ++r)
      for (std::size_t k = 0; k < K; ++k) {
        const double g = gy.data[r * K + k];
        if (gb) gb->data[k] += g;
        for (std::size_t j = 0; j < n; ++j) {
          if (gw) gw->data[k * n + j] += g * xv.data[r * n + j];
          if (gx) gx->data[r * n + j] += g * wv.data[k * n + j];
        }
      }
  });
}

Var softmax_cross_entropy(Var logits, const std::vector<int>& labels) {
  Tape& t = tape_of(logits);
  const Tensor& z = logits.value();
  require_shape(z.rank() == 2 && z.dim(0) == labels.size(), "softmax_cross_entropy", "label count mismatch");
  const std::size_t B = z.dim(0), K = z.dim(1);
  std::vector<double> p(B * K);
  double loss = 0.0;
  for (std::size_t r = 0; r < B; ++r) {
    const double* row = &z.data[r * K];
    const double mx = *std::max_element(row, row + K);
    double s = 0.0;
    for (std::size_t k = 0; k < K; ++k) s += std::exp(row[k] - mx);
    const double lse = mx + std::log(s);
    for (std::size_t k = 0; k < K; ++k) p[r * K + k] = std::exp(row[k] - lse);
    require_shape(labels[r] >= 0 && static_cast<std::size_t>(labels[r]) < K, "softmax_cross_entropy", "label range");
    loss += lse - row[labels[r]];
  }
  loss /= static_cast<double>(B);
  const int zi = logits.id;
  return t.record(Tensor(Shape{1}, loss), {logits}, [=, p = std::move(p)](Tape& t, int self) {
    const double g = t.grad(self).data[0] / static_cast<double>(B);
    Tensor& gz = t.grad(zi);
    for (std::size_t r = 0; r < B; ++r)
      for (std::size_t k = 0; k < K; ++k)
        gz.data[r * K + k] += g * (p[r * K + k] - (static_cast<int>(k) == labels[r] ? 1.0 : 0.0));
  });
}

}  // namespace morphnas::ad
