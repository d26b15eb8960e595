#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "evp/tape.hpp"
#include "evp/tensor.hpp"

// Tensor container, little-endian:
//   "EVPT" | version u32 | rank u32 | extents u32[rank] | dtype u8 (0=f32, 1=f64) | elements
// A checkpoint is a sequence of such records in `<base>.evpt` plus a text
// manifest `<base>.manifest` with one "name offset" line per record.

namespace evp {

inline constexpr std::uint32_t kContainerVersion = 1;
inline constexpr char kContainerMagic[4] = {'E', 'V', 'P', 'T'};

enum class DType : std::uint8_t { f32 = 0, f64 = 1 };

template <typename T>
constexpr DType dtype_of() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>, "only f32 and f64 are serializable");
  return std::is_same_v<T, float> ? DType::f32 : DType::f64;
}

namespace detail {

template <typename U>
void put_le(std::ostream& os, U value) {
  char bytes[sizeof(U)];
  for (std::size_t i = 0; i < sizeof(U); ++i) bytes[i] = static_cast<char>((value >> (8 * i)) & 0xFF);
  os.write(bytes, sizeof(U));
}

template <typename U>
U get_le(std::istream& is, const char* what) {
  unsigned char bytes[sizeof(U)];
  if (!is.read(reinterpret_cast<char*>(bytes), sizeof(U))) {
    throw FormatError(std::string("tensor container truncated while reading ") + what);
  }
  U value = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) value |= static_cast<U>(bytes[i]) << (8 * i);
  return value;
}

}  // namespace detail

template <typename T>
void write_tensor(std::ostream& os, const Tensor<T>& t) {
  os.write(kContainerMagic, 4);
  detail::put_le<std::uint32_t>(os, kContainerVersion);
  detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(t.rank()));
  for (std::size_t e : t.shape()) detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(e));
  os.put(static_cast<char>(dtype_of<T>()));
  for (T v : t.data()) {
    if constexpr (std::is_same_v<T, float>) {
      detail::put_le<std::uint32_t>(os, std::bit_cast<std::uint32_t>(v));
    } else {
      detail::put_le<std::uint64_t>(os, std::bit_cast<std::uint64_t>(v));
    }
  }
  if (!os) throw std::runtime_error("failed to write tensor container");
}

/// Reads one record, converting the stored precision to T.
template <typename T>
Tensor<T> read_tensor(std::istream& is) {
  char magic[4];
  if (!is.read(magic, 4)) throw FormatError("tensor container truncated before magic");
  if (std::memcmp(magic, kContainerMagic, 4) != 0) throw FormatError("bad tensor container magic");
  const auto version = detail::get_le<std::uint32_t>(is, "version");
  if (version != kContainerVersion) {
    throw FormatError("unsupported tensor container version " + std::to_string(version));
  }
  const auto rank = detail::get_le<std::uint32_t>(is, "rank");
  if (rank > 16) throw FormatError("implausible tensor rank " + std::to_string(rank));
  Shape shape(rank);
  for (auto& e : shape) e = detail::get_le<std::uint32_t>(is, "extent");
  const int tag = is.get();
  if (tag != 0 && tag != 1) throw FormatError("unknown dtype tag " + std::to_string(tag));
  Tensor<T> t(shape);
  for (auto& v : t.data()) {
    if (tag == 0) {
      v = static_cast<T>(std::bit_cast<float>(detail::get_le<std::uint32_t>(is, "f32 element")));
    } else {
      v = static_cast<T>(std::bit_cast<double>(detail::get_le<std::uint64_t>(is, "f64 element")));
    }
  }
  return t;
}

template <typename T>
void save_tensors(const std::filesystem::path& path, const std::vector<Tensor<T>>& tensors) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open " + path.string() + " for writing");
  for (const auto& t : tensors) write_tensor(os, t);
}

template <typename T>
std::vector<Tensor<T>> load_tensors(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path.string());
  std::vector<Tensor<T>> out;
  while (is.peek() != std::char_traits<char>::eof()) out.push_back(read_tensor<T>(is));
  return out;
}

/// Writes `<base>.evpt` and `<base>.manifest` for the given named tensors.
template <typename T>
void save_checkpoint(const std::filesystem::path& base, const std::vector<const Parameter<T>*>& params) {
  auto data_path = base;
  data_path += ".evpt";
  auto manifest_path = base;
  manifest_path += ".manifest";
  std::ofstream os(data_path, std::ios::binary);
  std::ofstream ms(manifest_path);
  if (!os || !ms) throw std::runtime_error("cannot write checkpoint at " + base.string());
  ms << "# evpt manifest v" << kContainerVersion << ": name offset\n";
  for (const auto* p : params) {
    ms << p->name << ' ' << static_cast<std::uint64_t>(os.tellp()) << '\n';
    write_tensor(os, p->value);
  }
  if (!ms) throw std::runtime_error("failed to write manifest " + manifest_path.string());
}

/// Restores every parameter by name. Missing names or shape mismatches are errors.
template <typename T>
void load_checkpoint(const std::filesystem::path& base, const std::vector<Parameter<T>*>& params) {
  auto data_path = base;
  data_path += ".evpt";
  auto manifest_path = base;
  manifest_path += ".manifest";
  std::ifstream ms(manifest_path);
  if (!ms) throw std::runtime_error("cannot open manifest " + manifest_path.string());
  std::map<std::string, std::uint64_t> offsets;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(ms, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    std::string name;
    std::uint64_t offset;
    if (!(ls >> name >> offset)) {
      throw FormatError("manifest line " + std::to_string(lineno) + ": expected 'name offset'");
    }
    offsets[name] = offset;
  }
  std::ifstream is(data_path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open checkpoint data " + data_path.string());
  for (auto* p : params) {
    auto it = offsets.find(p->name);
    if (it == offsets.end()) throw FormatError("checkpoint has no entry for '" + p->name + "'");
    is.seekg(static_cast<std::streamoff>(it->second));
    Tensor<T> t = read_tensor<T>(is);
    if (t.shape() != p->value.shape()) {
      throw FormatError("checkpoint entry '" + p->name + "' has shape " + to_string(t.shape()) + ", model expects " +
                        to_string(p->value.shape()));
    }
    p->value = std::move(t);
    offsets.erase(it);
  }
  if (!offsets.empty()) {
    throw FormatError("checkpoint entry '" + offsets.begin()->first + "' does not exist in the model");
  }
}

}  // namespace evp
