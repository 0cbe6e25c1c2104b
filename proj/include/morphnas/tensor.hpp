#pragma once

#include <cstddef>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

namespace morphnas {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape) noexcept;
std::string shape_string(const Shape& shape);

/// Dense row-major tensor of doubles.
struct Tensor {
  Shape shape;
  std::vector<double> data;

  Tensor() = default;
  explicit Tensor(Shape s, double fill = 0.0) : shape(std::move(s)), data(shape_size(shape), fill) {}
  Tensor(Shape s, std::vector<double> values);

  std::size_t size() const noexcept { return data.size(); }
  std::size_t rank() const noexcept { return shape.size(); }
  std::size_t dim(std::size_t i) const { return shape.at(i); }

  double& operator[](std::size_t i) { return data[i]; }
  double operator[](std::size_t i) const { return data[i]; }

  void fill(double v);
  bool all_finite() const noexcept;

  friend bool operator==(const Tensor&, const Tensor&) = default;
};

/// Ordered name -> tensor map. Ordering keeps checkpoints and gradient
/// reductions deterministic.
using NamedTensors = std::map<std::string, Tensor>;

/// Zero-filled tensors with the same names and shapes as `like`.
NamedTensors zeros_like(const NamedTensors& like);

/// dst += scale * src, for every tensor in src (names must exist in dst).
void axpy(NamedTensors& dst, const NamedTensors& src, double scale);

double dot(const NamedTensors& a, const NamedTensors& b);
std::size_t total_size(const NamedTensors& t) noexcept;

/// Container file: magic, format version, JSON manifest (shapes plus caller
/// metadata), then little-endian IEEE-754 doubles. Round-trips bit-exactly.
struct TensorFile {
  NamedTensors tensors;
  nlohmann::json meta;
};

inline constexpr std::uint32_t kTensorFileVersion = 1;

/// Writes to a temporary sibling and renames it into place, so the target is
/// either the complete new file or untouched.
void save_tensor_file(const std::filesystem::path& path, const NamedTensors& tensors,
                      const nlohmann::json& meta = nlohmann::json::object());
TensorFile load_tensor_file(const std::filesystem::path& path);

/// Atomic text write (temp file plus rename).
void write_file_atomic(const std::filesystem::path& path, const std::string& contents);

}  // namespace morphnas
