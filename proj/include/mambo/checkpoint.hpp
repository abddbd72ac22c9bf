#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <vector>

#include "mambo/config.hpp"
#include "mambo/nn.hpp"

// Binary layout (little-endian):
//   "MAMBO1" | u32 version | u32 K | 32-byte config hash
//   then records until EOF:
//   u32 name length | name | u8 dtype (0 = f32, 1 = f64) | u8 rank | u32 dims[rank] | payload

namespace mambo {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

inline constexpr char kCheckpointMagic[6] = {'M', 'A', 'M', 'B', 'O', '1'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct CheckpointRecord {
  std::string name;
  std::uint8_t dtype = 0;
  std::vector<std::uint32_t> dims;
  std::vector<double> values;  // exact for both dtypes
};

struct Checkpoint {
  std::uint32_t version = kCheckpointVersion;
  std::uint32_t components = 0;
  ConfigHash config_hash{};
  std::vector<CheckpointRecord> records;

  const CheckpointRecord* find(const std::string& name) const {
    for (const auto& r : records)
      if (r.name == name) return &r;
    return nullptr;
  }
};

namespace detail {

template <typename V>
void put(std::ostream& os, V v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(V));
}

template <typename V>
V take(std::istream& is, const char* what) {
  V v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(V));
  if (is.gcount() != sizeof(V)) throw CheckpointError(std::string("truncated checkpoint while reading ") + what);
  return v;
}

}  // namespace detail

inline void write_checkpoint(std::ostream& os, const Checkpoint& ck) {
  os.write(kCheckpointMagic, sizeof(kCheckpointMagic));
  detail::put(os, ck.version);
  detail::put(os, ck.components);
  os.write(reinterpret_cast<const char*>(ck.config_hash.data()), ck.config_hash.size());
  for (const auto& r : ck.records) {
    detail::put(os, static_cast<std::uint32_t>(r.name.size()));
    os.write(r.name.data(), static_cast<std::streamsize>(r.name.size()));
    detail::put(os, r.dtype);
    detail::put(os, static_cast<std::uint8_t>(r.dims.size()));
    for (auto d : r.dims) detail::put(os, d);
    for (double v : r.values) {
      if (r.dtype == 0) detail::put(os, static_cast<float>(v));
      else detail::put(os, v);
    }
  }
}

inline Checkpoint read_checkpoint(std::istream& is) {
  char magic[sizeof(kCheckpointMagic)];
  is.read(magic, sizeof(magic));
  if (is.gcount() != sizeof(magic) || std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0)
    throw CheckpointError("not a checkpoint (bad magic)");
  Checkpoint ck;
  ck.version = detail::take<std::uint32_t>(is, "version");
  if (ck.version != kCheckpointVersion) throw CheckpointError("unsupported checkpoint version " + std::to_string(ck.version));
  ck.components = detail::take<std::uint32_t>(is, "K");
  is.read(reinterpret_cast<char*>(ck.config_hash.data()), ck.config_hash.size());
  if (is.gcount() != static_cast<std::streamsize>(ck.config_hash.size())) throw CheckpointError("truncated config hash");
  while (is.peek() != std::char_traits<char>::eof()) {
    CheckpointRecord r;
    const auto len = detail::take<std::uint32_t>(is, "name length");
    r.name.resize(len);
    is.read(r.name.data(), len);
    if (is.gcount() != static_cast<std::streamsize>(len)) throw CheckpointError("truncated record name");
    r.dtype = detail::take<std::uint8_t>(is, "dtype");
    if (r.dtype > 1) throw CheckpointError("record " + r.name + ": unknown dtype " + std::to_string(r.dtype));
    const auto rank = detail::take<std::uint8_t>(is, "rank");
    std::size_t count = 1;
    for (int i = 0; i < rank; ++i) {
      r.dims.push_back(detail::take<std::uint32_t>(is, "dims"));
      count *= r.dims.back();
    }
    r.values.resize(count);
    for (auto& v : r.values) v = r.dtype == 0 ? detail::take<float>(is, "payload") : detail::take<double>(is, "payload");
    ck.records.push_back(std::move(r));
  }
  return ck;
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw CheckpointError("cannot write " + path.string());
  write_checkpoint(os, ck);
  if (!os) throw CheckpointError("failed writing " + path.string());
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("cannot open " + path.string());
  return read_checkpoint(is);
}

template <typename T>
constexpr std::uint8_t dtype_code() {
  return std::is_same_v<T, float> ? 0 : 1;
}

template <typename T>
CheckpointRecord make_record(const std::string& name, const Shape& shape, std::span<const T> values) {
  CheckpointRecord r;
  r.name = name;
  r.dtype = dtype_code<T>();
  for (int d : shape) r.dims.push_back(static_cast<std::uint32_t>(d));
  r.values.assign(values.begin(), values.end());
  return r;
}

template <typename T>
void append_parameters(Checkpoint& ck, const ParameterStore<T>& store) {
  for (const auto& p : store.all()) ck.records.push_back(make_record<T>(p.name(), p.shape(), p.values()));
}

// Copies every parameter of the store out of the checkpoint. Names and
// shapes must match exactly.
template <typename T>
void restore_parameters(const Checkpoint& ck, ParameterStore<T>& store) {
  for (auto p : store.all()) {
    const auto* r = ck.find(p.name());
    if (!r) throw CheckpointError("checkpoint lacks parameter " + p.name());
    Shape s(r->dims.begin(), r->dims.end());
    if (s != p.shape())
      throw CheckpointError("parameter " + p.name() + ": checkpoint shape " + shape_str(s) + " vs model " +
                            shape_str(p.shape()));
    auto dst = p.mutable_values();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<T>(r->values[i]);
  }
}

}  // namespace mambo
