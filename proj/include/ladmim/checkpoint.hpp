#pragma once

// Checkpoint file layout:
//
//   "LDMM"                      4 bytes
//   format version              uint32, little-endian
//   metadata length             uint64, little-endian
//   metadata                    UTF-8 JSON
//   payload                     float32 little-endian, tensors in the order of
//                               metadata["parameters"]
//
// metadata["parameters"] lists {name, shape, offset, count}; offsets count
// floats from the start of the payload.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ladmim/autograd.hpp"
#include "ladmim/errors.hpp"
#include "ladmim/tensor.hpp"
#include "ladmim/util.hpp"

namespace ladmim {

inline constexpr char kCheckpointMagic[4] = {'L', 'D', 'M', 'M'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct NamedTensor {
  std::string name;
  Tensor<float> value;
};

struct Checkpoint {
  nlohmann::json meta;  // user metadata; "parameters" and "payload" are filled on save
  std::vector<NamedTensor> tensors;

  [[nodiscard]] const Tensor<float>& get(const std::string& name) const {
    for (const auto& t : tensors)
      if (t.name == name) return t.value;
    throw IoError("checkpoint has no tensor named " + name);
  }

  void add(std::string name, Tensor<float> value) { tensors.push_back({std::move(name), std::move(value)}); }

  void add_all(const ParameterSet<float>& ps) {
    for (const auto& p : ps) add(p.name, p.value);
  }

  // Copies stored values into an already-constructed parameter set; names and
  // shapes must match.
  void load_into(ParameterSet<float>& ps) const {
    for (auto& p : ps) {
      const auto& t = get(p.name);
      if (t.shape != p.value.shape) {
        throw IoError("checkpoint tensor " + p.name + " has shape " + shape_str(t.shape) + ", expected " +
                      shape_str(p.value.shape));
      }
      p.value = t;
    }
  }
};

namespace detail {

template <typename U>
void put_le(std::string& out, U v) {
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<char>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xFF));
}

template <typename U>
U get_le(const std::string& in, std::size_t pos) {
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[pos + i])) << (8 * i);
  return static_cast<U>(v);
}

}  // namespace detail

inline std::string payload_bytes(const std::vector<NamedTensor>& tensors) {
  std::string out;
  for (const auto& t : tensors) {
    for (float f : t.value.data) detail::put_le(out, std::bit_cast<std::uint32_t>(f));
  }
  return out;
}

inline std::string encode_checkpoint(const Checkpoint& ck) {
  nlohmann::json meta = ck.meta;
  meta["parameters"] = nlohmann::json::array();
  std::size_t offset = 0;
  for (const auto& t : ck.tensors) {
    meta["parameters"].push_back({{"name", t.name}, {"shape", t.value.shape}, {"offset", offset}, {"count", t.value.numel()}});
    offset += t.value.numel();
  }
  const std::string payload = payload_bytes(ck.tensors);
  meta["payload"] = {{"floats", offset}, {"fnv1a", hex64(fnv1a(payload))}};
  const std::string text = meta.dump();
  std::string out(kCheckpointMagic, 4);
  detail::put_le<std::uint32_t>(out, kCheckpointVersion);
  detail::put_le<std::uint64_t>(out, text.size());
  out += text;
  out += payload;
  return out;
}

inline Checkpoint decode_checkpoint(const std::string& bytes) {
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0) throw IoError("not a checkpoint file");
  const auto version = detail::get_le<std::uint32_t>(bytes, 4);
  if (version != kCheckpointVersion) {
    throw IoError("checkpoint version " + std::to_string(version) + " unsupported (expected " +
                  std::to_string(kCheckpointVersion) + ")");
  }
  const auto meta_len = detail::get_le<std::uint64_t>(bytes, 8);
  if (meta_len > bytes.size() - 16) throw IoError("truncated checkpoint metadata");
  Checkpoint ck;
  try {
    ck.meta = nlohmann::json::parse(bytes.substr(16, meta_len));
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("corrupt checkpoint metadata: ") + e.what());
  }
  const std::size_t base = 16 + meta_len;
  const auto floats = ck.meta.at("payload").at("floats").get<std::size_t>();
  if (bytes.size() != base + 4 * floats) throw IoError("truncated or oversized checkpoint payload");
  for (const auto& p : ck.meta.at("parameters")) {
    const auto shape = p.at("shape").get<Shape>();
    const auto offset = p.at("offset").get<std::size_t>();
    const auto count = p.at("count").get<std::size_t>();
    if (numel_of(shape) != count || offset + count > floats) throw IoError("checkpoint parameter table is inconsistent");
    std::vector<float> data(count);
    for (std::size_t i = 0; i < count; ++i) {
      data[i] = std::bit_cast<float>(detail::get_le<std::uint32_t>(bytes, base + 4 * (offset + i)));
    }
    ck.tensors.push_back({p.at("name").get<std::string>(), Tensor<float>(shape, std::move(data))});
  }
  if (hex64(fnv1a(bytes.substr(base))) != ck.meta.at("payload").at("fnv1a").get<std::string>()) {
    throw IoError("checkpoint payload checksum mismatch");
  }
  return ck;
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  write_file_atomic(path, encode_checkpoint(ck));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw MissingPrerequisite("checkpoint not found: " + path.string());
  return decode_checkpoint(read_file(path));
}

}  // namespace ladmim
