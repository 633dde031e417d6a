#pragma once

// Checkpoint container: magic "PCSC", u32 version, u32 tensor count, then per
// tensor a u16-length UTF-8 name, u8 dtype (0 = f32, 1 = f64), u8 rank, u64
// extents and the raw little-endian values.

#include <cstdint>
#include <string>
#include <type_traits>
#include <vector>

#include "pcsc/binary_io.hpp"
#include "pcsc/tensor.hpp"

namespace pcsc {

enum class DType : std::uint8_t { f32 = 0, f64 = 1 };

template <class Real>
constexpr DType dtype_of() {
  static_assert(std::is_same_v<Real, float> || std::is_same_v<Real, double>);
  return std::is_same_v<Real, float> ? DType::f32 : DType::f64;
}

struct StoredTensor {
  std::string name;
  DType dtype = DType::f64;
  Shape shape;
  std::vector<double> values;  // exact for both dtypes
};

class Checkpoint {
 public:
  static constexpr std::uint32_t kVersion = 1;

  template <class Real>
  void add(const std::string& name, const Tensor<Real>& t) {
    add_values(name, dtype_of<Real>(), t.shape(), std::vector<double>(t.data().begin(), t.data().end()));
  }

  void add_values(const std::string& name, DType dtype, Shape shape, std::vector<double> values) {
    if (name.size() > 0xFFFF) throw std::invalid_argument("tensor name too long: " + name);
    if (shape.size() > 0xFF) throw std::invalid_argument("tensor rank too large: " + name);
    if (numel(shape) != values.size()) throw DimensionError("checkpoint tensor " + name + " has inconsistent size");
    if (contains(name)) throw std::invalid_argument("duplicate checkpoint tensor " + name);
    tensors_.push_back({name, dtype, std::move(shape), std::move(values)});
  }

  bool contains(const std::string& name) const { return find(name) != nullptr; }

  const StoredTensor& at(const std::string& name) const {
    const StoredTensor* t = find(name);
    if (!t) throw std::out_of_range("checkpoint has no tensor named " + name);
    return *t;
  }

  template <class Real>
  Tensor<Real> get(const std::string& name) const {
    const StoredTensor& s = at(name);
    std::vector<Real> v(s.values.size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<Real>(s.values[i]);
    return Tensor<Real>(s.shape, std::move(v));
  }

  double scalar(const std::string& name) const {
    const StoredTensor& s = at(name);
    if (s.values.size() != 1) throw DimensionError("checkpoint tensor " + name + " is not a scalar");
    return s.values[0];
  }

  const std::vector<StoredTensor>& tensors() const { return tensors_; }

  std::vector<unsigned char> encode() const {
    io::ByteWriter w;
    w.put_bytes("PCSC");
    w.put<std::uint32_t>(kVersion);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(tensors_.size()));
    for (const auto& t : tensors_) {
      w.put<std::uint16_t>(static_cast<std::uint16_t>(t.name.size()));
      w.put_bytes(t.name);
      w.put<std::uint8_t>(static_cast<std::uint8_t>(t.dtype));
      w.put<std::uint8_t>(static_cast<std::uint8_t>(t.shape.size()));
      for (std::size_t e : t.shape) w.put<std::uint64_t>(e);
      for (double v : t.values) {
        if (t.dtype == DType::f32) {
          w.put<float>(static_cast<float>(v));
        } else {
          w.put<double>(v);
        }
      }
    }
    return w.bytes();
  }

  static Checkpoint decode(std::vector<unsigned char> bytes) {
    io::ByteReader r(std::move(bytes));
    if (r.get_bytes(4, "magic") != "PCSC") throw FormatError("bad checkpoint magic", 0);
    const std::size_t version_at = r.offset();
    if (const auto v = r.get<std::uint32_t>("version"); v != kVersion) {
      throw FormatError("unsupported checkpoint version " + std::to_string(v), version_at);
    }
    const auto count = r.get<std::uint32_t>("tensor count");
    Checkpoint ck;
    for (std::uint32_t i = 0; i < count; ++i) {
      StoredTensor t;
      const auto len = r.get<std::uint16_t>("name length");
      t.name = r.get_bytes(len, "name");
      const std::size_t dtype_at = r.offset();
      const auto tag = r.get<std::uint8_t>("dtype");
      if (tag > 1) throw FormatError("unknown dtype tag " + std::to_string(tag), dtype_at);
      t.dtype = static_cast<DType>(tag);
      const auto rank = r.get<std::uint8_t>("rank");
      for (std::uint8_t d = 0; d < rank; ++d) t.shape.push_back(static_cast<std::size_t>(r.get<std::uint64_t>("extent")));
      const std::size_t n = numel(t.shape);
      const std::size_t width = t.dtype == DType::f32 ? 4 : 8;
      if (n > r.remaining() / width) throw FormatError("truncated data for tensor " + t.name, r.offset());
      t.values.resize(n);
      for (std::size_t k = 0; k < n; ++k) {
        t.values[k] = t.dtype == DType::f32 ? static_cast<double>(r.get<float>("value")) : r.get<double>("value");
      }
      if (ck.contains(t.name)) throw FormatError("duplicate tensor " + t.name, r.offset());
      ck.tensors_.push_back(std::move(t));
    }
    if (r.remaining() != 0) throw FormatError("trailing bytes after last tensor", r.offset());
    return ck;
  }

  void save(const std::string& path) const { io::write_file(path, encode()); }

  static Checkpoint load(const std::string& path) { return decode(io::read_file(path)); }

 private:
  const StoredTensor* find(const std::string& name) const {
    for (const auto& t : tensors_) {
      if (t.name == name) return &t;
    }
    return nullptr;
  }

  std::vector<StoredTensor> tensors_;
};

}  // namespace pcsc
