#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <mutex>
#include <string>
#include <vector>

#include "morphnas/autodiff.hpp"
#include "morphnas/evaluation.hpp"
#include "morphnas/rng.hpp"
#include "morphnas/tensor.hpp"

namespace morphnas {

// ---- Synthetic dataset -------------------------------------------------------

/// Seeded image classification set: one fixed template per class (entries
/// uniform in [-1, 1]); a sample is its class template plus N(0, noise^2)
/// pixel noise. Labels cycle through the classes.
struct DatasetSpec {
  int classes = 4;
  int height = 8;
  int width = 8;
  int channels = 1;
  int train_size = 2048;
  int val_size = 512;
  double noise = 0.3;

  InputShape input() const { return {height, width, channels}; }
  friend bool operator==(const DatasetSpec&, const DatasetSpec&) = default;
};

struct Dataset {
  DatasetSpec spec;
  Tensor train_x;  // [N, C, H, W]
  std::vector<int> train_y;
  Tensor val_x;
  std::vector<int> val_y;
};

Dataset make_dataset(const DatasetSpec& spec, std::uint64_t seed);

// ---- Model layout --------------------------------------------------------------

/// One trainable tensor of a compiled network.
struct ParamInfo {
  Shape shape;
  /// Fresh init is uniform(+-bound); 0 for biases.
  double init_bound = 0.0;
  /// Axes copied around their center by splice_or_pad (spatial kernel axes);
  /// the other axes copy their leading prefix.
  std::vector<bool> centered;
  /// Weight-dictionary key; empty for the classifier head, which is never shared.
  std::string dict_key;
};

/// Tensor name -> layout. Names: "L<i>.W", "L<i>.b" (conv), "L<i>.dw",
/// "L<i>.pw", "L<i>.b" (dep-sep), "L<i>.adapter.W", "L<i>.adapter.b"
/// (implicit 1x1 adapter), "head.W", "head.b".
using ModelLayout = std::map<std::string, ParamInfo>;

/// Layout of `arch` (cells are expanded) on `input` with a `classes`-way head.
ModelLayout model_layout(const Architecture& arch, const InputShape& input, int classes);

/// Number of trainable scalars of a layout.
std::uint64_t trainable_scalars(const ModelLayout& layout);

/// Forward pass of the expanded layer net. `param` resolves tensor names.
ad::Var forward(const Architecture& net, const std::function<ad::Var(const std::string&)>& param, ad::Var x);

// ---- Weight dictionary -----------------------------------------------------------

/// Copies the overlapping region of `stored` into a tensor of shape `target`
/// and fills the rest with uniform(+-init_bound) draws from `rng`. Axes flagged
/// in `centered` align the centers (spatial kernels); others align at index 0.
/// Throws ShapeError on a rank mismatch.
Tensor splice_or_pad(const Tensor& stored, const Shape& target, const std::vector<bool>& centered, double init_bound,
                     Rng& rng);

struct DictEntry {
  Tensor value;
  double accuracy = 0.0;
  int step = 0;
};

/// A trained model offered to the dictionary: key -> tensor plus its accuracy.
struct DictContribution {
  std::map<std::string, Tensor> weights;
  double accuracy = 0.0;
};

/// Weights shared between candidates, keyed by
/// (layer index, op kind, filter width, activation, kernel axis, role).
class WeightDictionary {
 public:
  const DictEntry* find(const std::string& key) const;
  std::size_t size() const noexcept { return entries_.size(); }
  bool empty() const noexcept { return entries_.empty(); }
  void clear() { entries_.clear(); }
  const std::map<std::string, DictEntry>& entries() const noexcept { return entries_; }

  /// For every key the highest-accuracy contributor wins; on equal accuracy
  /// the incumbent (or the earlier batch member) stays.
  void merge(const std::vector<DictContribution>& batch, int step);

  void save(const std::filesystem::path& path) const;
  static WeightDictionary load(const std::filesystem::path& path);

  friend bool operator==(const WeightDictionary& a, const WeightDictionary& b);

 private:
  std::map<std::string, DictEntry> entries_;
};

/// Fresh or dictionary-initialized parameters for a layout. Returns the
/// number of tensors taken from the dictionary through `warm`.
NamedTensors init_params(const ModelLayout& layout, const WeightDictionary* dict, Rng& rng, int* warm = nullptr);

/// Dictionary view of trained parameters (head excluded).
DictContribution contribution(const ModelLayout& layout, const NamedTensors& params, double accuracy);

// ---- Training ------------------------------------------------------------------

struct TrainOutcome {
  bool ok = true;
  std::string error;
  double best_accuracy = 0.0;
  int best_epoch = 0;  // 1-based
  std::vector<double> train_loss;    // mean minibatch loss per epoch
  std::vector<double> val_accuracy;  // per epoch
  NamedTensors best_params;          // parameters at the best epoch
  int warm_tensors = 0;
};

/// Nesterov momentum (0.9) SGD under cosine_lr, one lr value per minibatch.
/// Accuracy on the validation split after every epoch; P = the best one.
TrainOutcome train_model(const Architecture& arch, const TrainConfig& cfg, const Dataset& data,
                         const WeightDictionary* dict, std::uint64_t seed);

/// Same, starting from the given parameters.
TrainOutcome train_from(const Architecture& arch, const TrainConfig& cfg, const Dataset& data, NamedTensors params,
                        std::uint64_t seed);

/// Fraction of validation samples classified correctly.
double accuracy(const Architecture& net, const NamedTensors& params, const Tensor& x, const std::vector<int>& y);

// ---- Native evaluator -------------------------------------------------------------

struct NativeConfig {
  DatasetSpec dataset;
  bool share_weights = true;
  /// Empty the dictionary at the start of every episode.
  bool clear_per_episode = false;
  std::uint64_t seed = 0;
};

/// Trains each candidate on the synthetic dataset. Candidates of one step read
/// the dictionary as of the step start; end_step() merges their weights.
class NativeEvaluator final : public Evaluator {
 public:
  explicit NativeEvaluator(NativeConfig config);

  std::string name() const override { return "native"; }
  EvalResult evaluate(const EvalRequest& request) override;
  void begin_episode(int episode) override;
  void end_step(int step_stamp) override;
  void save_state(const std::filesystem::path& dir) const override;
  void load_state(const std::filesystem::path& dir) override;

  const WeightDictionary& dictionary() const noexcept { return dict_; }

 private:
  const Dataset& dataset(std::uint64_t seed);

  NativeConfig config_;
  WeightDictionary dict_;
  std::mutex mutex_;
  std::map<std::uint64_t, Dataset> datasets_;
  std::map<std::string, DictContribution> pending_;
};

}  // namespace morphnas
