#pragma once

#include <functional>
#include <vector>

#include "morphnas/arch.hpp"
#include "morphnas/tensor.hpp"

namespace morphnas::ad {

class Tape;

/// Handle to a node on a tape.
struct Var {
  Tape* tape = nullptr;
  int id = -1;

  bool valid() const noexcept { return tape != nullptr && id >= 0; }
  const Tensor& value() const;
  const Shape& shape() const { return value().shape; }
  /// Scalar value (first element).
  double item() const { return value().data.at(0); }
};

/// Reverse-mode tape. Nodes are recorded in evaluation order; backward()
/// walks them in reverse. Parameter nodes reference caller-owned value and
/// gradient tensors, so a whole model's gradient accumulates in place.
class Tape {
 public:
  using Backward = std::function<void(Tape&, int self)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value);
  /// Constant that references `value` without copying; it must outlive the tape.
  Var constant_ref(const Tensor& value);
  /// `grad` must outlive the tape; it is resized to value's shape when empty.
  Var param(const Tensor& value, Tensor& grad);

  /// Records an op result. `inputs` decide whether the node needs a gradient.
  Var record(Tensor value, std::initializer_list<Var> inputs, Backward backward);
  Var record(Tensor value, const std::vector<Var>& inputs, Backward backward);

  const Tensor& value(int id) const;
  bool requires_grad(int id) const { return nodes_[id].requires_grad; }
  /// Gradient buffer of a node, zero-allocated on first use.
  Tensor& grad(int id);
  /// Null if the node never received a gradient.
  const Tensor* grad_if_any(int id) const;

  /// Seeds d(root)/d(root) = 1 for a scalar root and propagates.
  void backward(Var root);

  std::size_t size() const noexcept { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    const Tensor* external_value = nullptr;
    Tensor grad;
    Tensor* external_grad = nullptr;
    bool requires_grad = false;
    bool has_grad = false;
    Backward backward;
  };
  std::vector<Node> nodes_;
};

// ---- Vector ops (policy network) ----------------------------------------

/// W [m, n] times x [n].
Var matvec(Var W, Var x);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double c);
Var sigmoid(Var a);
Var tanh(Var a);
/// 1-D slice [begin, begin + len).
Var slice(Var a, std::size_t begin, std::size_t len);
Var concat(const std::vector<Var>& parts);
/// Row `row` of a [rows, d] table.
Var gather_row(Var table, std::size_t row);
/// Sum of scalars (or same-shaped tensors).
Var add_n(const std::vector<Var>& terms);
Var sum(Var a);

/// log softmax over the unmasked entries of a 1-D logit vector. Masked
/// entries get log-probability -inf and receive no gradient.
Var masked_log_softmax(Var logits, const std::vector<bool>& mask);
/// Element i of a 1-D tensor as a scalar.
Var pick(Var a, std::size_t i);
/// -sum p log p over the unmasked entries, p = softmax(logits | mask).
Var masked_entropy(Var logits, const std::vector<bool>& mask);

// ---- Batched image ops (native trainer), layout [B, C, H, W] -------------

/// Same-padded stride-1 convolution. W is [Cout, Cin, kh, kw] with odd kh, kw.
/// `bias` may be an invalid Var.
Var conv2d(Var x, Var W, Var bias);
/// Depthwise same-padded convolution, W is [C, 1, k, k], no bias.
Var depthwise_conv2d(Var x, Var W);
/// Max or average pooling with ceil-division output size. Average divides by
/// the number of in-bounds elements of each window. Stride equal to the window
/// pads at the end; stride 1 pads (width-1)/2 at the start.
Var pool2d(Var x, OpKind kind, int width, int stride);
/// Nearest-index spatial resampling to (h, w): src = floor(dst * H / h).
Var resample_nearest(Var x, std::size_t h, std::size_t w);
/// relu, crelu (channel concat of relu(x), relu(-x)), elu, selu, swish, none.
Var activation(Var x, Activation a);
/// [B, C, H, W] -> [B, C].
Var global_avg_pool(Var x);
/// x [B, n], W [K, n], b [K] -> [B, K].
Var linear(Var x, Var W, Var b);
/// Mean softmax cross-entropy of logits [B, K] against integer labels.
Var softmax_cross_entropy(Var logits, const std::vector<int>& labels);

}  // namespace morphnas::ad
