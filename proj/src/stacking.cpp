#include <charconv>
#include <utility>

#include "morphnas/arch.hpp"
#include "morphnas/error.hpp"

namespace morphnas {

namespace {

int ceil_div(int a, int b) { return (a + b - 1) / b; }

/// Emits layers and tracks the spatial size each one produces.
class LayerEmitter {
 public:
  explicit LayerEmitter(const InputShape& in) : input_hw_{in.height, in.width} {}

  int push(const LayerSpec& l) {
    auto hw = l.src1 < 0 ? input_hw_ : hw_[l.src1];
    if (is_pool(l.op_kind)) {
      const int s = pool_stride_of(l);
      hw = {ceil_div(hw.first, s), ceil_div(hw.second, s)};
    }
    layers_.push_back(l);
    hw_.push_back(hw);
    return static_cast<int>(layers_.size()) - 1;
  }

  std::pair<int, int> hw(int index) const { return index < 0 ? input_hw_ : hw_[index]; }
  std::vector<LayerSpec> take() { return std::move(layers_); }

 private:
  std::pair<int, int> input_hw_;
  std::vector<LayerSpec> layers_;
  std::vector<std::pair<int, int>> hw_;
};

LayerSpec conv_layer(int filter_width, int channels, int src, KernelAxis axis = KernelAxis::square) {
  LayerSpec l;
  l.op_kind = OpKind::conv2d;
  l.filter_width = filter_width;
  l.channels = channels;
  l.activation = Activation::relu;
  l.src1 = src;
  l.kernel = axis;
  return l;
}

LayerSpec pool_layer(OpKind kind, int width, int src, int stride = 0) {
  LayerSpec l;
  l.op_kind = kind;
  l.pool_width = width;
  l.pool_stride = stride;
  l.src1 = src;
  return l;
}

LayerSpec add_layer(int a, int b) {
  LayerSpec l;
  l.op_kind = OpKind::add;
  l.src1 = a;
  l.src2 = b;
  return l;
}

OpKind pool_kind_of(BranchType t) {
  return (t == BranchType::conv_maxpool || t == BranchType::maxpool_none) ? OpKind::max_pool2d : OpKind::avg_pool2d;
}

/// Emits one cell instance reading from layer `input`; returns the output layer.
/// Pools inside a cell are stride 1 so only reductions change the spatial size.
int emit_cell(LayerEmitter& out, const std::vector<BranchSpec>& cell, int stage, const StackingTemplate& t,
              int input) {
  std::vector<int> slot{input};
  for (const auto& b : cell) {
    const int ch = branch_has_conv(b.branch_type) ? stage_channels(b.channels, stage, t) : 0;
    const int in1 = slot[b.src1];
    int first = 0;
    switch (b.branch_type) {
      case BranchType::conv_conv:
      case BranchType::conv_maxpool:
      case BranchType::conv_avgpool:
      case BranchType::conv_none:
        first = out.push(conv_layer(b.filter_width, ch, in1));
        break;
      case BranchType::sep17_71_none:
        first = out.push(conv_layer(7, ch, in1, KernelAxis::row));
        first = out.push(conv_layer(7, ch, first, KernelAxis::col));
        break;
      case BranchType::maxpool_none:
      case BranchType::avgpool_none:
        first = out.push(pool_layer(pool_kind_of(b.branch_type), b.pool_width, in1, 1));
        break;
    }
    int result = first;
    if (branch_has_second_op(b.branch_type)) {
      const int in2 = slot[b.src2];
      const int second = b.branch_type == BranchType::conv_conv
                             ? out.push(conv_layer(b.filter_width, ch, in2))
                             : out.push(pool_layer(pool_kind_of(b.branch_type), b.pool_width, in2, 1));
      result = out.push(add_layer(first, second));
    }
    slot.push_back(result);
  }

  // The layer IR has no concat op, so propagating branches are summed. With
  // no propagating branch the last branch is the cell output.
  int result = -2;
  for (std::size_t j = 0; j < cell.size(); ++j) {
    if (!cell[j].propagate) continue;
    result = result == -2 ? slot[j + 1] : out.push(add_layer(result, slot[j + 1]));
  }
  return result == -2 ? slot.back() : result;
}

}  // namespace

InputShape parse_input_shape(std::string_view text) {
  InputShape s;
  int* fields[] = {&s.height, &s.width, &s.channels};
  std::size_t pos = 0;
  for (int i = 0; i < 3; ++i) {
    std::size_t end = i < 2 ? text.find('x', pos) : text.size();
    if (end == std::string_view::npos) throw ParseError("expected HxWxC, got '" + std::string(text) + "'");
    auto part = text.substr(pos, end - pos);
    auto [ptr, ec] = std::from_chars(part.data(), part.data() + part.size(), *fields[i]);
    if (ec != std::errc() || ptr != part.data() + part.size() || *fields[i] < 1)
      throw ParseError("expected HxWxC with positive integers, got '" + std::string(text) + "'");
    pos = end + 1;
  }
  return s;
}

std::string to_string(const InputShape& s) {
  return std::to_string(s.height) + "x" + std::to_string(s.width) + "x" + std::to_string(s.channels);
}

int stage_channels(int channels, int stage, const StackingTemplate& t) {
  // Exact rational power, rounded half up.
  long long num = channels, den = 1;
  for (int i = 0; i < stage; ++i) {
    num *= t.multiplier_num;
    den *= t.multiplier_den;
  }
  const long long rounded = (2 * num + den) / (2 * den);
  return static_cast<int>(std::max(1LL, rounded));
}

Architecture expand_stack(const Architecture& arch, const InputShape& input) {
  if (arch.mode != ArchMode::cell_net) throw ValidationError("expand_stack requires a cell_net architecture");
  require_valid(arch, SearchDomains::for_expanded());
  const auto& t = arch.stacking;

  LayerEmitter out(input);
  int current = -1;
  for (int stage = 0; stage < t.num_stages; ++stage) {
    if (stage > 0) {
      const auto [h, w] = out.hw(current);
      if (h / 2 == 0 || w / 2 == 0)
        throw ShapeError("spatial size underflow: stride-2 reduction #" + std::to_string(stage) + " before stage " +
                         std::to_string(stage + 1) + " receives " + std::to_string(h) + "x" + std::to_string(w));
      current = out.push(pool_layer(OpKind::avg_pool2d, 2, current));
    }
    for (int c = 0; c < t.cells_per_stage; ++c) current = emit_cell(out, arch.cell, stage, t, current);
  }
  return Architecture::layer_net(out.take());
}

Architecture as_layer_net(const Architecture& arch, const InputShape& input) {
  return arch.mode == ArchMode::layer_net ? arch : expand_stack(arch, input);
}

}  // namespace morphnas
