#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "odmt/parameter.hpp"

namespace odmt {

// Binary container for named tensors, all integers and floats little-endian:
//   magic "ODMTCKPT" | u32 version | u64 count |
//   count x { u32 name_len | name bytes | u32 ndim | u64 dims[ndim] | f64 data[prod(dims)] }
struct NamedTensor {
  std::string name;
  Tensor value;
};

namespace checkpoint_detail {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

template <class T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T get(std::istream& is) {
  T v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof(T))) throw Error("checkpoint: truncated file");
  return v;
}

inline constexpr char kMagic[8] = {'O', 'D', 'M', 'T', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kVersion = 1;

}  // namespace checkpoint_detail

inline void write_checkpoint(const std::filesystem::path& path, const std::vector<NamedTensor>& tensors) {
  using namespace checkpoint_detail;
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("checkpoint: cannot open '" + path.string() + "' for writing");
  os.write(kMagic, sizeof kMagic);
  put<std::uint32_t>(os, kVersion);
  put<std::uint64_t>(os, tensors.size());
  for (const auto& t : tensors) {
    put<std::uint32_t>(os, static_cast<std::uint32_t>(t.name.size()));
    os.write(t.name.data(), static_cast<std::streamsize>(t.name.size()));
    put<std::uint32_t>(os, static_cast<std::uint32_t>(t.value.shape.size()));
    for (std::size_t d : t.value.shape) put<std::uint64_t>(os, d);
    os.write(reinterpret_cast<const char*>(t.value.data.data()),
             static_cast<std::streamsize>(t.value.data.size() * sizeof(double)));
  }
  if (!os) throw Error("checkpoint: write failed for '" + path.string() + "'");
}

inline std::vector<NamedTensor> read_checkpoint(const std::filesystem::path& path) {
  using namespace checkpoint_detail;
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("checkpoint: cannot open '" + path.string() + "'");
  char magic[8];
  if (!is.read(magic, sizeof magic) || std::memcmp(magic, kMagic, sizeof magic) != 0)
    throw Error("checkpoint: bad magic in '" + path.string() + "'");
  if (get<std::uint32_t>(is) != kVersion) throw Error("checkpoint: unsupported version");
  const auto count = get<std::uint64_t>(is);
  std::vector<NamedTensor> out;
  for (std::uint64_t i = 0; i < count; ++i) {
    NamedTensor t;
    t.name.resize(get<std::uint32_t>(is));
    if (!is.read(t.name.data(), static_cast<std::streamsize>(t.name.size()))) throw Error("checkpoint: truncated name");
    const auto ndim = get<std::uint32_t>(is);
    Shape shape;
    for (std::uint32_t d = 0; d < ndim; ++d) shape.push_back(get<std::uint64_t>(is));
    t.value = Tensor(shape);
    if (!is.read(reinterpret_cast<char*>(t.value.data.data()),
                 static_cast<std::streamsize>(t.value.data.size() * sizeof(double))))
      throw Error("checkpoint: truncated data for '" + t.name + "'");
    out.push_back(std::move(t));
  }
  return out;
}

inline void save_parameters(const std::filesystem::path& path, const ParameterStore& store) {
  std::vector<NamedTensor> tensors;
  for (const auto& p : store.all()) tensors.push_back({p.name, p.value});
  write_checkpoint(path, tensors);
}

/// Loads values into an already-constructed store; every stored name must match.
inline void load_parameters(const std::filesystem::path& path, ParameterStore& store) {
  const auto tensors = read_checkpoint(path);
  if (tensors.size() != store.size())
    throw Error("checkpoint: holds " + std::to_string(tensors.size()) + " tensors, model has " +
                std::to_string(store.size()));
  for (const auto& t : tensors) {
    Parameter& p = store.at(t.name);
    if (p.value.shape != t.value.shape)
      throw Error("checkpoint: shape mismatch for '" + t.name + "': " + shape_str(t.value.shape) + " vs " +
                  shape_str(p.value.shape));
    p.value = t.value;
  }
}

}  // namespace odmt
