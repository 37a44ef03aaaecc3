#pragma once

// Checkpoint file: a named tensor table plus a JSON config snapshot.
//
//   "AGCK" | u16 version=1 | u64 step | u64 seed | u32 len | config JSON (len bytes)
//   u32 count | count x { u16 len | name | u8 dtype (4 = f32, 8 = f64) | u8 rank |
//                         u32 dims[rank] | payload } | u32 CRC32 of all preceding bytes

#include <cstring>
#include <filesystem>
#include <string>
#include <vector>

#include "agcgan/binary_io.hpp"
#include "agcgan/tensor.hpp"
#include "json.hpp"

namespace agc::io {

inline constexpr std::uint16_t kCheckpointVersion = 1;

// A stored tensor disagrees with the model it is loaded into.
class MismatchError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct StoredTensor {
  std::string name;
  Shape shape;
  std::uint8_t dtype = 4;
  std::vector<std::uint8_t> bytes;
};

template <typename T>
StoredTensor store_tensor(std::string name, const Tensor<T>& t) {
  static_assert(sizeof(T) == 4 || sizeof(T) == 8);
  StoredTensor s{std::move(name), t.shape(), sizeof(T), {}};
  s.bytes.resize(t.numel() * sizeof(T));
  if (!s.bytes.empty()) std::memcpy(s.bytes.data(), t.data().data(), s.bytes.size());
  return s;
}

struct Checkpoint {
  nlohmann::json config = nlohmann::json::object();
  std::uint64_t step = 0;
  std::uint64_t seed = 0;
  std::vector<StoredTensor> tensors;

  template <typename T>
  void add(std::string name, const Tensor<T>& t) {
    tensors.push_back(store_tensor(std::move(name), t));
  }

  bool contains(const std::string& name) const {
    for (const auto& s : tensors)
      if (s.name == name) return true;
    return false;
  }

  const StoredTensor& find(const std::string& name) const {
    for (const auto& s : tensors)
      if (s.name == name) return s;
    throw MismatchError("checkpoint has no tensor '" + name + "'");
  }

  // Copies the stored values into t, which must have the same shape and dtype.
  template <typename T>
  void restore(const std::string& name, Tensor<T>& t) const {
    const auto& s = find(name);
    if (s.shape != t.shape()) {
      throw MismatchError("checkpoint tensor '" + name + "' has shape " + shape_str(s.shape) +
                          ", model expects " + shape_str(t.shape()));
    }
    if (s.dtype != sizeof(T)) {
      throw MismatchError("checkpoint tensor '" + name + "' has dtype f" + std::to_string(8 * s.dtype) +
                          ", model expects f" + std::to_string(8 * sizeof(T)));
    }
    auto dst = t.mutable_data();
    if (!s.bytes.empty()) std::memcpy(dst.data(), s.bytes.data(), s.bytes.size());
  }
};

inline std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& ck) {
  ByteWriter w;
  w.bytes("AGCK");
  w.u16(kCheckpointVersion);
  w.u64(ck.step);
  w.u64(ck.seed);
  const std::string cfg = ck.config.dump();
  w.u32(static_cast<std::uint32_t>(cfg.size()));
  w.bytes(cfg);
  w.u32(static_cast<std::uint32_t>(ck.tensors.size()));
  for (const auto& s : ck.tensors) {
    w.u16(static_cast<std::uint16_t>(s.name.size()));
    w.bytes(s.name);
    w.u8(s.dtype);
    w.u8(static_cast<std::uint8_t>(s.shape.size()));
    for (auto d : s.shape) w.u32(static_cast<std::uint32_t>(d));
    w.bytes(std::string_view(reinterpret_cast<const char*>(s.bytes.data()), s.bytes.size()));
  }
  w.u32(crc32_of(w.since(0)));
  return w.buffer();
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  write_file_atomic(path, serialize_checkpoint(ck));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  const std::string ctx = "checkpoint '" + path.string() + "'";
  if (bytes.size() < 4 || std::memcmp(bytes.data(), "AGCK", 4) != 0) {
    throw MagicError(ctx + ": bad magic (expected \"AGCK\")");
  }
  ByteReader r(bytes, ctx);
  r.str(4);
  const auto version = r.u16();
  if (version != kCheckpointVersion) throw VersionError(ctx + ": unsupported version " + std::to_string(version));
  if (bytes.size() < 4 + 2 + 4) throw TruncatedError(ctx + ": truncated");
  const std::size_t body = bytes.size() - 4;
  const std::uint32_t stored_crc = static_cast<std::uint32_t>(bytes[body]) | (bytes[body + 1] << 8) |
                                   (bytes[body + 2] << 16) | (std::uint32_t(bytes[body + 3]) << 24);
  Checkpoint ck;
  ck.step = r.u64();
  ck.seed = r.u64();
  const std::string cfg = r.str(r.u32());
  const std::size_t count = r.u32();
  for (std::size_t i = 0; i < count; ++i) {
    StoredTensor s;
    s.name = r.str(r.u16());
    s.dtype = r.u8();
    if (s.dtype != 4 && s.dtype != 8) throw FormatError(ctx + ": tensor '" + s.name + "' has unknown dtype");
    const std::size_t rank = r.u8();
    for (std::size_t k = 0; k < rank; ++k) s.shape.push_back(r.u32());
    const std::string payload = r.str(numel_of(s.shape) * s.dtype);
    s.bytes.assign(payload.begin(), payload.end());
    ck.tensors.push_back(std::move(s));
  }
  if (r.remaining() != 4) throw FormatError(ctx + ": unexpected trailing bytes");
  if (crc32_of(std::span(bytes).first(body)) != stored_crc) throw ChecksumError(ctx + ": checksum mismatch", 0);
  try {
    ck.config = nlohmann::json::parse(cfg);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(ctx + ": config snapshot is not valid JSON: " + e.what());
  }
  return ck;
}

}  // namespace agc::io
