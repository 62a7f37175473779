#pragma once

// Versioned binary container of named tensors plus string metadata.
//
// Byte layout (all integers little-endian):
//   0   8 bytes  magic "GABNCKPT"
//   8   u32      format version (currently 1)
//  12   u32      metadata entry count M
//       M x { u32 key length, key bytes, u32 value length, value bytes }
//       u32      tensor count N
//       N x { u32 name length, name bytes,
//             u8 dtype (0 = float32, 1 = float64),
//             u32 rank, rank x u64 dims,
//             prod(dims) x element, IEEE-754 little-endian }

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "gabn/autodiff.hpp"
#include "gabn/tensor.hpp"

namespace gabn {

class Checkpoint {
 public:
  static constexpr std::uint32_t kVersion = 1;

  std::map<std::string, std::string> metadata;

  template <typename T>
  void put(const std::string& name, const Tensor<T>& tensor);

  // Converts to T when the stored dtype differs.
  template <typename T>
  Tensor<T> get(const std::string& name) const;

  bool contains(const std::string& name) const;
  DType dtype(const std::string& name) const;
  std::vector<std::string> names() const;

  // Stores every parameter as "<prefix><name>".
  template <typename T>
  void put_parameters(const std::string& prefix, const ParameterSet<T>& params);

  // Overwrites parameter values; each stored shape must match.
  template <typename T>
  void load_parameters(const std::string& prefix, ParameterSet<T>& params) const;

  void write(std::ostream& out) const;
  static Checkpoint read(std::istream& in);

  void save(const std::filesystem::path& path) const;
  static Checkpoint load(const std::filesystem::path& path);

 private:
  struct Entry {
    std::string name;
    DType dtype;
    Shape shape;
    std::vector<double> values;
  };

  const Entry& entry(const std::string& name) const;

  std::vector<Entry> entries_;
};

}  // namespace gabn
