#include "gabn/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

namespace gabn {

namespace {

constexpr char kMagic[8] = {'G', 'A', 'B', 'N', 'C', 'K', 'P', 'T'};

template <typename U>
void put_le(std::ostream& out, U value) {
  static_assert(std::is_integral_v<U>);
  unsigned char bytes[sizeof(U)];
  for (std::size_t i = 0; i < sizeof(U); ++i) {
    bytes[i] = static_cast<unsigned char>((static_cast<std::uint64_t>(value) >> (8 * i)) & 0xff);
  }
  out.write(reinterpret_cast<const char*>(bytes), sizeof(U));
}

template <typename U>
U get_le(std::istream& in) {
  unsigned char bytes[sizeof(U)];
  if (!in.read(reinterpret_cast<char*>(bytes), sizeof(U))) {
    throw IoError("checkpoint: truncated stream");
  }
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<std::uint64_t>(bytes[i]) << (8 * i);
  return static_cast<U>(v);
}

void put_string(std::ostream& out, const std::string& s) {
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(s.size()));
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string get_string(std::istream& in) {
  const auto len = get_le<std::uint32_t>(in);
  if (len > (1u << 24)) throw IoError("checkpoint: implausible string length");
  std::string s(len, '\0');
  if (len && !in.read(s.data(), len)) throw IoError("checkpoint: truncated string");
  return s;
}

}  // namespace

template <typename T>
void Checkpoint::put(const std::string& name, const Tensor<T>& tensor) {
  Entry e{name, dtype_of<T>(), tensor.shape(),
          std::vector<double>(tensor.data().begin(), tensor.data().end())};
  auto it = std::find_if(entries_.begin(), entries_.end(),
                         [&](const Entry& x) { return x.name == name; });
  if (it != entries_.end()) {
    *it = std::move(e);
  } else {
    entries_.push_back(std::move(e));
  }
}

template <typename T>
Tensor<T> Checkpoint::get(const std::string& name) const {
  const auto& e = entry(name);
  return Tensor<T>(e.shape, std::vector<T>(e.values.begin(), e.values.end()));
}

bool Checkpoint::contains(const std::string& name) const {
  return std::any_of(entries_.begin(), entries_.end(),
                     [&](const Entry& x) { return x.name == name; });
}

DType Checkpoint::dtype(const std::string& name) const { return entry(name).dtype; }

std::vector<std::string> Checkpoint::names() const {
  std::vector<std::string> out;
  for (const auto& e : entries_) out.push_back(e.name);
  return out;
}

const Checkpoint::Entry& Checkpoint::entry(const std::string& name) const {
  for (const auto& e : entries_) {
    if (e.name == name) return e;
  }
  throw IoError("checkpoint: no tensor named '" + name + "'");
}

template <typename T>
void Checkpoint::put_parameters(const std::string& prefix, const ParameterSet<T>& params) {
  for (const auto& p : params) put(prefix + p.name, p.value);
}

template <typename T>
void Checkpoint::load_parameters(const std::string& prefix, ParameterSet<T>& params) const {
  for (auto& p : params) {
    auto t = get<T>(prefix + p.name);
    if (t.shape() != p.value.shape()) {
      throw ShapeError("checkpoint: '" + prefix + p.name + "' has shape " +
                       shape_str(t.shape()) + ", network expects " + shape_str(p.value.shape()));
    }
    p.value = std::move(t);
  }
}

void Checkpoint::write(std::ostream& out) const {
  out.write(kMagic, sizeof(kMagic));
  put_le<std::uint32_t>(out, kVersion);
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(metadata.size()));
  for (const auto& [k, v] : metadata) {
    put_string(out, k);
    put_string(out, v);
  }
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(entries_.size()));
  for (const auto& e : entries_) {
    put_string(out, e.name);
    put_le<std::uint8_t>(out, static_cast<std::uint8_t>(e.dtype));
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(e.shape.size()));
    for (auto d : e.shape) put_le<std::uint64_t>(out, d);
    for (double v : e.values) {
      if (e.dtype == DType::f32) {
        put_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
      } else {
        put_le<std::uint64_t>(out, std::bit_cast<std::uint64_t>(v));
      }
    }
  }
  if (!out) throw IoError("checkpoint: write failed");
}

Checkpoint Checkpoint::read(std::istream& in) {
  char magic[8];
  if (!in.read(magic, sizeof(magic)) || std::memcmp(magic, kMagic, sizeof(magic)) != 0) {
    throw IoError("checkpoint: bad magic");
  }
  const auto version = get_le<std::uint32_t>(in);
  if (version != kVersion) {
    throw IoError("checkpoint: unsupported version " + std::to_string(version));
  }
  Checkpoint ck;
  const auto n_meta = get_le<std::uint32_t>(in);
  for (std::uint32_t i = 0; i < n_meta; ++i) {
    auto k = get_string(in);
    ck.metadata[k] = get_string(in);
  }
  const auto n_tensors = get_le<std::uint32_t>(in);
  for (std::uint32_t i = 0; i < n_tensors; ++i) {
    Entry e;
    e.name = get_string(in);
    const auto dt = get_le<std::uint8_t>(in);
    if (dt > 1) throw IoError("checkpoint: unknown dtype tag " + std::to_string(dt));
    e.dtype = static_cast<DType>(dt);
    const auto rank = get_le<std::uint32_t>(in);
    if (rank > 16) throw IoError("checkpoint: implausible rank");
    for (std::uint32_t r = 0; r < rank; ++r) e.shape.push_back(get_le<std::uint64_t>(in));
    const auto count = shape_numel(e.shape);
    if (count > (std::size_t{1} << 32)) throw IoError("checkpoint: implausible tensor size");
    e.values.resize(count);
    for (auto& v : e.values) {
      v = e.dtype == DType::f32
              ? static_cast<double>(std::bit_cast<float>(get_le<std::uint32_t>(in)))
              : std::bit_cast<double>(get_le<std::uint64_t>(in));
    }
    ck.entries_.push_back(std::move(e));
  }
  return ck;
}

void Checkpoint::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("checkpoint: cannot open " + path.string() + " for writing");
  write(out);
}

Checkpoint Checkpoint::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("checkpoint: cannot open " + path.string());
  return read(in);
}

template void Checkpoint::put<float>(const std::string&, const Tensor<float>&);
template void Checkpoint::put<double>(const std::string&, const Tensor<double>&);
template Tensor<float> Checkpoint::get<float>(const std::string&) const;
template Tensor<double> Checkpoint::get<double>(const std::string&) const;
template void Checkpoint::put_parameters<float>(const std::string&, const ParameterSet<float>&);
template void Checkpoint::put_parameters<double>(const std::string&, const ParameterSet<double>&);
template void Checkpoint::load_parameters<float>(const std::string&, ParameterSet<float>&) const;
template void Checkpoint::load_parameters<double>(const std::string&, ParameterSet<double>&) const;

}  // namespace gabn
