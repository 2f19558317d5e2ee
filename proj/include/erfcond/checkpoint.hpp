#pragma once

// Binary checkpoints, little-endian:
//   "ERFC" | u32 version (1) | u32 tensor_count |
//   per tensor: u32 name_len | name (UTF-8) | u8 rank | rank x u32 dims | f32 data
// A model is stored as two files: trainable parameters at `path` and the
// normalization running statistics at `path + ".stats"`.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "erfcond/nn.hpp"

namespace erfcond {

inline constexpr char kCheckpointMagic[4] = {'E', 'R', 'F', 'C'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

class CheckpointError : public Error {
 public:
  enum class Kind { io, bad_magic, bad_version, truncated, mismatch };
  CheckpointError(Kind kind, const std::string& what) : Error(what), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

struct CheckpointEntry {
  std::string name;
  Shape shape;
  std::vector<float> data;
};

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

class ByteReader {
 public:
  explicit ByteReader(std::string_view bytes) : bytes_(bytes) {}

  void need(std::size_t n, const char* what) const {
    if (bytes_.size() - pos_ < n) {
      throw CheckpointError(CheckpointError::Kind::truncated,
                            std::string("checkpoint truncated while reading ") + what + " at byte " +
                                std::to_string(pos_));
    }
  }
  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return v;
  }
  std::uint8_t u8(const char* what) {
    need(1, what);
    return static_cast<std::uint8_t>(bytes_[pos_++]);
  }
  std::string_view take(std::size_t n, const char* what) {
    need(n, what);
    auto s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  std::string_view bytes_;
  std::size_t pos_ = 0;
};

}  // namespace detail

template <typename T>
std::string encode_checkpoint(const std::vector<NamedTensor<T>>& tensors) {
  std::string out(kCheckpointMagic, 4);
  detail::put_u32(out, kCheckpointVersion);
  detail::put_u32(out, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& t : tensors) {
    detail::put_u32(out, static_cast<std::uint32_t>(t.name.size()));
    out += t.name;
    const auto& shape = t.tensor.shape();
    if (shape.size() > 255) throw CheckpointError(CheckpointError::Kind::mismatch, "tensor rank exceeds 255");
    out.push_back(static_cast<char>(shape.size()));
    for (auto d : shape) detail::put_u32(out, static_cast<std::uint32_t>(d));
    for (T v : t.tensor.data()) detail::put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
  }
  return out;
}

inline std::vector<CheckpointEntry> decode_checkpoint(std::string_view bytes) {
  detail::ByteReader in(bytes);
  const auto magic = in.take(4, "magic");
  if (std::memcmp(magic.data(), kCheckpointMagic, 4) != 0) {
    throw CheckpointError(CheckpointError::Kind::bad_magic, "not a checkpoint: bad magic bytes");
  }
  const auto version = in.u32("version");
  if (version != kCheckpointVersion) {
    throw CheckpointError(CheckpointError::Kind::bad_version,
                          "unsupported checkpoint version " + std::to_string(version));
  }
  const auto count = in.u32("tensor count");
  std::vector<CheckpointEntry> out;
  for (std::uint32_t i = 0; i < count; ++i) {
    CheckpointEntry e;
    const auto len = in.u32("name length");
    e.name = std::string(in.take(len, "name"));
    const auto rank = in.u8("rank");
    std::uint64_t numel = 1;
    for (int k = 0; k < rank; ++k) {
      const auto d = in.u32("dims");
      e.shape.push_back(d);
      numel *= d;
    }
    in.need(numel * 4, "tensor data");
    e.data.resize(numel);
    for (auto& v : e.data) v = std::bit_cast<float>(in.u32("tensor data"));
    out.push_back(std::move(e));
  }
  if (!in.done()) throw CheckpointError(CheckpointError::Kind::mismatch, "trailing bytes after checkpoint");
  return out;
}

inline void write_bytes(const std::filesystem::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw CheckpointError(CheckpointError::Kind::io, "cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw CheckpointError(CheckpointError::Kind::io, "write failed: " + path.string());
}

inline std::string read_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError(CheckpointError::Kind::io, "cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const std::vector<NamedTensor<T>>& tensors) {
  write_bytes(path, encode_checkpoint(tensors));
}

inline std::vector<CheckpointEntry> load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(read_bytes(path));
}

// Copies stored values into `tensors`; the name sets and shapes must match.
template <typename T>
void assign_checkpoint(const std::vector<CheckpointEntry>& stored, const std::vector<NamedTensor<T>>& tensors) {
  std::map<std::string, const CheckpointEntry*> by_name;
  for (const auto& e : stored) by_name[e.name] = &e;
  if (by_name.size() != tensors.size()) {
    throw CheckpointError(CheckpointError::Kind::mismatch, "checkpoint holds " + std::to_string(by_name.size()) +
                                                               " tensors, model expects " +
                                                               std::to_string(tensors.size()));
  }
  for (const auto& t : tensors) {
    auto it = by_name.find(t.name);
    if (it == by_name.end()) throw CheckpointError(CheckpointError::Kind::mismatch, "checkpoint lacks " + t.name);
    if (it->second->shape != t.tensor.shape()) {
      throw CheckpointError(CheckpointError::Kind::mismatch, t.name + ": stored shape " +
                                                                 shape_str(it->second->shape) + " vs model " +
                                                                 shape_str(t.tensor.shape()));
    }
  }
  for (const auto& t : tensors) {
    Tensor<T> dst = t.tensor;
    const auto& src = by_name[t.name]->data;
    auto d = dst.data();
    for (std::size_t i = 0; i < src.size(); ++i) d[i] = static_cast<T>(src[i]);
  }
}

inline std::filesystem::path stats_path(const std::filesystem::path& path) {
  return std::filesystem::path(path.string() + ".stats");
}

template <typename Model>
void save_model(const Model& model, const std::filesystem::path& path) {
  save_checkpoint(path, model.registry().parameters());
  save_checkpoint(stats_path(path), model.registry().buffers());
}

template <typename Model>
void load_model(Model& model, const std::filesystem::path& path) {
  assign_checkpoint(load_checkpoint(path), model.registry().parameters());
  assign_checkpoint(load_checkpoint(stats_path(path)), model.registry().buffers());
}

}  // namespace erfcond
