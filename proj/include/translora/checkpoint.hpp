#pragma once

// "TLRA" tensor container:
//   magic "TLRA" | u32 version=1 | u32 tensor count
//   per tensor: u16 name length | UTF-8 name | u32 rows | u32 cols | f64 LE payload (row-major)

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <utility>
#include <vector>

#include "translora/model.hpp"

namespace translora {

struct NamedTensor {
  std::string name;
  Matrix value;

  friend bool operator==(const NamedTensor&, const NamedTensor&) = default;
};

using TensorList = std::vector<NamedTensor>;

namespace detail {

template <typename T>
void put_le(std::string& out, T v) {
  static_assert(std::is_unsigned_v<T>);
  for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

template <typename T>
T get_le(const std::string& in, std::size_t& pos) {
  if (pos + sizeof(T) > in.size()) throw CheckpointError("truncated checkpoint");
  T v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    v |= static_cast<T>(static_cast<unsigned char>(in[pos + i])) << (8 * i);
  }
  pos += sizeof(T);
  return v;
}

}  // namespace detail

inline std::string encode_checkpoint(const TensorList& tensors) {
  std::string out = "TLRA";
  detail::put_le<std::uint32_t>(out, 1);
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& t : tensors) {
    if (t.name.size() > 0xFFFF) throw CheckpointError("tensor name too long: " + t.name);
    detail::put_le<std::uint16_t>(out, static_cast<std::uint16_t>(t.name.size()));
    out += t.name;
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.value.rows()));
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.value.cols()));
    for (double x : t.value.values()) detail::put_le<std::uint64_t>(out, std::bit_cast<std::uint64_t>(x));
  }
  return out;
}

inline TensorList decode_checkpoint(const std::string& bytes) {
  if (bytes.size() < 12 || bytes.compare(0, 4, "TLRA") != 0) throw CheckpointError("bad magic");
  std::size_t pos = 4;
  const auto version = detail::get_le<std::uint32_t>(bytes, pos);
  if (version != 1) throw CheckpointError("unsupported version " + std::to_string(version));
  const auto count = detail::get_le<std::uint32_t>(bytes, pos);
  TensorList out;
  out.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto name_len = detail::get_le<std::uint16_t>(bytes, pos);
    if (pos + name_len > bytes.size()) throw CheckpointError("truncated name");
    std::string name = bytes.substr(pos, name_len);
    pos += name_len;
    const auto rows = detail::get_le<std::uint32_t>(bytes, pos);
    const auto cols = detail::get_le<std::uint32_t>(bytes, pos);
    const std::size_t n = static_cast<std::size_t>(rows) * cols;
    if (pos + n * 8 > bytes.size()) throw CheckpointError("truncated payload for " + name);
    std::vector<double> values(n);
    for (std::size_t j = 0; j < n; ++j) values[j] = std::bit_cast<double>(detail::get_le<std::uint64_t>(bytes, pos));
    out.push_back(NamedTensor{std::move(name), Matrix(rows, cols, std::move(values))});
  }
  if (pos != bytes.size()) throw CheckpointError("trailing bytes after last tensor");
  return out;
}

inline void write_file(const std::filesystem::path& path, const std::string& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw CheckpointError("cannot open " + path.string() + " for writing");
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw CheckpointError("write failed for " + path.string());
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw CheckpointError("cannot open " + path.string());
  return std::string(std::istreambuf_iterator<char>(f), {});
}

inline void save_checkpoint(const std::filesystem::path& path, const TensorList& tensors) {
  write_file(path, encode_checkpoint(tensors));
}

inline TensorList load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(read_file(path));
}

// Model config travels as a 1x5 metadata tensor so a checkpoint is self-describing.
inline TensorList model_to_tensors(const ModelConfig& cfg, const ModelParams& params) {
  TensorList out;
  out.push_back({"meta.config",
                 Matrix(1, 5, {static_cast<double>(cfg.vocab_size), static_cast<double>(cfg.d_model),
                               static_cast<double>(cfg.d_ff), static_cast<double>(cfg.n_layers),
                               static_cast<double>(cfg.max_len)})});
  params.visit([&out](const std::string& name, const Matrix& m) { out.push_back({name, m}); });
  return out;
}

inline std::pair<ModelConfig, ModelParams> model_from_tensors(const TensorList& tensors) {
  if (tensors.empty() || tensors[0].name != "meta.config" || tensors[0].value.size() != 5) {
    throw CheckpointError("missing meta.config tensor");
  }
  const auto& c = tensors[0].value.values();
  ModelConfig cfg;
  cfg.vocab_size = static_cast<std::size_t>(c[0]);
  cfg.d_model = static_cast<std::size_t>(c[1]);
  cfg.d_ff = static_cast<std::size_t>(c[2]);
  cfg.n_layers = static_cast<std::size_t>(c[3]);
  cfg.max_len = static_cast<std::size_t>(c[4]);
  ModelParams params = ModelParams::zeros(cfg);
  std::size_t i = 1;
  params.visit([&](const std::string& name, Matrix& m) {
    if (i >= tensors.size() || tensors[i].name != name) {
      throw CheckpointError("expected tensor " + name);
    }
    if (!tensors[i].value.same_shape(m)) throw CheckpointError("shape mismatch for " + name);
    m = tensors[i].value;
    ++i;
  });
  if (i != tensors.size()) throw CheckpointError("unexpected extra tensors in model checkpoint");
  return {cfg, std::move(params)};
}

}  // namespace translora
