#include "morphnas/tensor.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <sstream>

#include "morphnas/error.hpp"

namespace morphnas {

namespace {

constexpr char kMagic[4] = {'M', 'N', 'T', 'F'};

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint64_t get_u64(const char* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(p[i])) << (8 * i);
  return v;
}

}  // namespace

std::size_t shape_size(const Shape& shape) noexcept {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_string(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

Tensor::Tensor(Shape s, std::vector<double> values) : shape(std::move(s)), data(std::move(values)) {
  if (data.size() != shape_size(shape))
    throw Error("tensor data size " + std::to_string(data.size()) + " does not match shape " +
                shape_string(shape));
}

void Tensor::fill(double v) { std::fill(data.begin(), data.end(), v); }

bool Tensor::all_finite() const noexcept {
  for (double v : data)
    if (!std::isfinite(v)) return false;
  return true;
}

NamedTensors zeros_like(const NamedTensors& like) {
  NamedTensors out;
  for (const auto& [name, t] : like) out.emplace(name, Tensor(t.shape));
  return out;
}

void axpy(NamedTensors& dst, const NamedTensors& src, double scale) {
  for (const auto& [name, s] : src) {
    auto it = dst.find(name);
    if (it == dst.end() || it->second.shape != s.shape)
      throw Error("axpy: tensor '" + name + "' missing or shape mismatch");
    auto& d = it->second.data;
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += scale * s.data[i];
  }
}

double dot(const NamedTensors& a, const NamedTensors& b) {
  double acc = 0.0;
  for (const auto& [name, ta] : a) {
    const auto& tb = b.at(name);
    for (std::size_t i = 0; i < ta.size(); ++i) acc += ta.data[i] * tb.data[i];
  }
  return acc;
}

std::size_t total_size(const NamedTensors& t) noexcept {
  std::size_t n = 0;
  for (const auto& [_, v] : t) n += v.size();
  return n;
}

void write_file_atomic(const std::filesystem::path& path, const std::string& contents) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open '" + tmp.string() + "' for writing");
    out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
    out.flush();
    if (!out) throw IoError("write to '" + tmp.string() + "' failed");
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("rename '" + tmp.string() + "' -> '" + path.string() + "': " + ec.message());
}

void save_tensor_file(const std::filesystem::path& path, const NamedTensors& tensors,
                      const nlohmann::json& meta) {
  nlohmann::json manifest;
  manifest["format_version"] = kTensorFileVersion;
  manifest["meta"] = meta;
  auto entries = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& [name, t] : tensors) {
    entries.push_back({{"name", name}, {"shape", t.shape}, {"offset", offset}});
    offset += t.size();
  }
  manifest["tensors"] = std::move(entries);
  const std::string header = manifest.dump();

  std::string blob(kMagic, 4);
  put_u64(blob, kTensorFileVersion);
  put_u64(blob, header.size());
  blob += header;
  blob.reserve(blob.size() + offset * 8);
  for (const auto& [_, t] : tensors)
    for (double v : t.data) put_u64(blob, std::bit_cast<std::uint64_t>(v));
  write_file_atomic(path, blob);
}

TensorFile load_tensor_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  const std::string blob = ss.str();
  if (blob.size() < 20 || std::memcmp(blob.data(), kMagic, 4) != 0)
    throw ParseError("not a tensor file: '" + path.string() + "'");
  const auto version = get_u64(blob.data() + 4);
  if (version != kTensorFileVersion)
    throw ParseError("unsupported tensor file version " + std::to_string(version));
  const auto header_len = get_u64(blob.data() + 12);
  if (20 + header_len > blob.size()) throw ParseError("truncated tensor file header");
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(blob.substr(20, header_len));
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("corrupt tensor manifest: ") + e.what());
  }
  const std::size_t data_start = 20 + header_len;

  TensorFile out;
  out.meta = manifest.value("meta", nlohmann::json::object());
  for (const auto& entry : manifest.at("tensors")) {
    Shape shape = entry.at("shape").get<Shape>();
    const auto offset = entry.at("offset").get<std::uint64_t>();
    const std::size_t n = shape_size(shape);
    if (data_start + (offset + n) * 8 > blob.size()) throw ParseError("truncated tensor data");
    Tensor t(shape);
    const char* p = blob.data() + data_start + offset * 8;
    for (std::size_t i = 0; i < n; ++i) t.data[i] = std::bit_cast<double>(get_u64(p + 8 * i));
    out.tensors.emplace(entry.at("name").get<std::string>(), std::move(t));
  }
  return out;
}

}  // namespace morphnas
