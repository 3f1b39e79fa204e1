#pragma once

#include <array>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <zlib.h>

#include "json.hpp"

#include "adpr/config.hpp"
#include "adpr/model.hpp"
#include "adpr/trainer.hpp"

namespace adpr {

// File layout:
//   "ADPRCKPT" | u32 version | u32 header_length | JSON header | payloads
// All integers and floats little-endian. Payload offsets in the header are
// relative to the first payload byte; tensors are stored row-major in
// directory order.

inline constexpr std::array<char, 8> kCheckpointMagic = {'A', 'D', 'P', 'R', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Checkpoint {
  ParamStore<float> params;
  std::optional<OptimizerState> optimizer;
  /// Last completed training stage: 0 fresh, 1-3 pipeline stages, 4 Siamese fine-tuned.
  int stage = 0;
  nlohmann::json extra = nlohmann::json::object();
  /// Names of tensors whose stored CRC32 does not match their payload.
  std::vector<std::string> checksum_failures;
};

inline std::uint32_t crc32_of(const void* data, std::size_t n) {
  uLong c = crc32(0L, Z_NULL, 0);
  const auto* p = static_cast<const Bytef*>(data);
  while (n > 0) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(n, 1u << 30));
    c = crc32(c, p, chunk);
    p += chunk;
    n -= chunk;
  }
  return static_cast<std::uint32_t>(c);
}

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int b = 0; b < 4; ++b) out.push_back(static_cast<char>((v >> (8 * b)) & 0xffU));
}

inline std::uint32_t get_u32(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

inline std::string float_payload(const Tensor<float>& t) {
  std::string out;
  out.reserve(t.size() * 4);
  for (float v : t.values()) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    put_u32(out, bits);
  }
  return out;
}

inline Tensor<float> tensor_from_payload(const Shape& shape, const unsigned char* p) {
  Tensor<float> t(shape);
  for (std::size_t i = 0; i < t.size(); ++i) {
    const std::uint32_t bits = get_u32(p + 4 * i);
    float v;
    std::memcpy(&v, &bits, 4);
    t[i] = v;
  }
  return t;
}

}  // namespace detail

/// Serializes to bytes. Identical inputs give identical bytes.
inline std::string serialize_checkpoint(const ParamStore<float>& params, const OptimizerState* optimizer, int stage,
                                        const nlohmann::json& extra = nlohmann::json::object()) {
  if (optimizer && optimizer->velocity.size() != params.size()) {
    throw CheckpointError("optimizer state has " + std::to_string(optimizer->velocity.size()) + " tensors, model has " +
                          std::to_string(params.size()));
  }
  std::string payload;
  nlohmann::json dir = nlohmann::json::array();
  auto append = [&](const std::string& name, const std::string& block, const std::string& kind, const Tensor<float>& t) {
    const std::string bytes = detail::float_payload(t);
    dir.push_back({{"name", name},
                   {"block", block},
                   {"kind", kind},
                   {"shape", t.shape()},
                   {"offset", payload.size()},
                   {"nbytes", bytes.size()},
                   {"crc32", crc32_of(bytes.data(), bytes.size())}});
    payload += bytes;
  };
  for (const auto& p : params) append(p.name, p.block, "param", p.value);
  if (optimizer) {
    for (std::size_t i = 0; i < params.size(); ++i) {
      if (optimizer->velocity[i].shape() != params[i].value.shape()) {
        throw CheckpointError("velocity for '" + params[i].name + "' has the wrong shape");
      }
      append(params[i].name, params[i].block, "velocity", optimizer->velocity[i]);
    }
  }
  const nlohmann::json header = {{"format", "adpr-checkpoint"},
                                 {"arch", params.config()},
                                 {"stage", stage},
                                 {"has_optimizer", optimizer != nullptr},
                                 {"tensors", dir},
                                 {"payload_bytes", payload.size()},
                                 {"extra", extra}};
  const std::string h = header.dump();
  std::string out(kCheckpointMagic.begin(), kCheckpointMagic.end());
  detail::put_u32(out, kCheckpointVersion);
  detail::put_u32(out, static_cast<std::uint32_t>(h.size()));
  out += h;
  out += payload;
  return out;
}

/// Parses checkpoint bytes. Structural problems throw with the byte offset;
/// CRC mismatches are reported in checksum_failures. When `expected` is given,
/// an architecture mismatch is rejected naming the differing field.
inline Checkpoint deserialize_checkpoint(const std::string& bytes, const std::optional<ArchConfig>& expected = std::nullopt) {
  const auto* data = reinterpret_cast<const unsigned char*>(bytes.data());
  const std::size_t n = bytes.size();
  if (n < 16) throw CheckpointError("checkpoint truncated at offset " + std::to_string(n) + ": header needs 16 bytes");
  if (std::memcmp(data, kCheckpointMagic.data(), 8) != 0) throw CheckpointError("bad magic at offset 0: not an ADPR checkpoint");
  const std::uint32_t version = detail::get_u32(data + 8);
  if (version != kCheckpointVersion) {
    throw CheckpointError("unsupported checkpoint version " + std::to_string(version) + " at offset 8 (expected " +
                          std::to_string(kCheckpointVersion) + ")");
  }
  const std::uint32_t hlen = detail::get_u32(data + 12);
  if (16 + static_cast<std::size_t>(hlen) > n) {
    throw CheckpointError("checkpoint truncated at offset " + std::to_string(n) + ": header declares " +
                          std::to_string(hlen) + " bytes");
  }
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.begin() + 16, bytes.begin() + 16 + hlen);
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("checkpoint header at offset 16 is not valid JSON: ") + e.what());
  }
  const std::size_t base = 16 + hlen;

  Checkpoint ck;
  ArchConfig arch;
  try {
    arch = parse_arch(header.at("arch"), "arch");
    ck.stage = header.at("stage").get<int>();
    ck.extra = header.value("extra", nlohmann::json::object());
  } catch (const CheckpointError&) {
    throw;
  } catch (const std::exception& e) {
    throw CheckpointError(std::string("checkpoint header: ") + e.what());
  }
  if (expected) {
    if (auto field = arch_difference(*expected, arch)) {
      throw CheckpointError("checkpoint architecture mismatch in field 'arch." + *field + "'");
    }
  }
  const bool has_opt = header.value("has_optimizer", false);
  const ParamStore<float> layout = build<float>(arch, 0);
  const nlohmann::json& dir = header.at("tensors");
  const std::size_t expected_entries = layout.size() * (has_opt ? 2 : 1);
  if (!dir.is_array() || dir.size() != expected_entries) {
    throw CheckpointError("checkpoint directory lists " + std::to_string(dir.is_array() ? dir.size() : 0) +
                          " tensors, architecture needs " + std::to_string(expected_entries));
  }

  ck.params = ParamStore<float>(arch);
  if (has_opt) ck.optimizer = OptimizerState{};
  std::size_t cursor = 0;
  for (std::size_t e = 0; e < dir.size(); ++e) {
    const nlohmann::json& d = dir[e];
    const std::size_t pi = e % layout.size();
    const bool velocity = e >= layout.size();
    const auto& want = layout[pi];
    const std::string name = d.at("name").get<std::string>();
    const Shape shape = d.at("shape").get<Shape>();
    const std::size_t offset = d.at("offset").get<std::size_t>();
    const std::size_t nbytes = d.at("nbytes").get<std::size_t>();
    const std::string kind = d.at("kind").get<std::string>();
    const std::size_t at = base + offset;
    if (name != want.name || kind != (velocity ? "velocity" : "param")) {
      throw CheckpointError("checkpoint directory entry " + std::to_string(e) + " is '" + name + "' (" + kind +
                            "), expected '" + want.name + "'");
    }
    if (shape != want.value.shape() || nbytes != 4 * element_count(shape)) {
      throw CheckpointError("tensor '" + name + "' at offset " + std::to_string(at) + ": shape " + to_string(shape) +
                            " / " + std::to_string(nbytes) + " bytes disagree with expected " +
                            to_string(want.value.shape()));
    }
    if (offset != cursor) {
      throw CheckpointError("tensor '" + name + "' at offset " + std::to_string(at) + ": payload is not contiguous");
    }
    if (at + nbytes > n) {
      throw CheckpointError("checkpoint truncated at offset " + std::to_string(n) + ": tensor '" + name + "' needs bytes up to " +
                            std::to_string(at + nbytes));
    }
    const auto stored_crc = d.at("crc32").get<std::uint32_t>();
    if (crc32_of(data + at, nbytes) != stored_crc) ck.checksum_failures.push_back(name + (velocity ? " (velocity)" : ""));
    Tensor<float> t = detail::tensor_from_payload(shape, data + at);
    if (velocity) {
      ck.optimizer->velocity.push_back(std::move(t));
    } else {
      ck.params.add(name, want.block, std::move(t));
    }
    cursor += nbytes;
  }
  if (base + cursor != n) {
    throw CheckpointError("checkpoint has " + std::to_string(n - base - cursor) + " trailing bytes at offset " +
                          std::to_string(base + cursor));
  }
  return ck;
}

inline void write_file_atomically(const std::filesystem::path& path, const std::string& bytes) {
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw CheckpointError("cannot write " + tmp.string());
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw CheckpointError("write failed: " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw CheckpointError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

inline void save_checkpoint(const std::filesystem::path& path, const ParamStore<float>& params,
                            const OptimizerState* optimizer, int stage,
                            const nlohmann::json& extra = nlohmann::json::object()) {
  write_file_atomically(path, serialize_checkpoint(params, optimizer, stage, extra));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path, const std::optional<ArchConfig>& expected = std::nullopt) {
  return deserialize_checkpoint(read_file(path), expected);
}

}  // namespace adpr
