// Binary checkpoints for encoders. Layout (little-endian):
//   "MTKT" | u32 version | u64 header length | header JSON | u64 float count |
//   f32 parameters in declaration order.
// The header carries the encoder configs, role and step; the digest is the
// SHA-256 of the canonical config JSON.
#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>

#include <json.hpp>

#include "motis/encoders.hpp"

namespace motis::ckpt {

inline constexpr std::uint32_t kVersion = 1;

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Contents { kDual, kText, kImage };

struct CheckpointInfo {
  Contents contents = Contents::kDual;
  nlohmann::json config;  // {"text": ..., "image": ...} with only the stored towers
  std::string digest;     // hex SHA-256 of config.dump()
  enc::Role role = enc::Role::kStudent;
  std::uint64_t step = 0;
  std::uintmax_t bytes = 0;
};

std::string sha256_hex(std::string_view data);
std::string config_digest(const nlohmann::json& config);

// Both towers plus the temperature.
void save(const std::filesystem::path& path, const enc::DualEncoder& model);
enc::DualEncoder load(const std::filesystem::path& path, CheckpointInfo* info = nullptr);

// Single tower, used for per-encoder disk size and for serving one side.
void save_text(const std::filesystem::path& path, const enc::TextEncoder& e, enc::Role role, std::uint64_t step);
void save_image(const std::filesystem::path& path, const enc::ImageEncoder& e, enc::Role role, std::uint64_t step);
enc::TextEncoder load_text(const std::filesystem::path& path, CheckpointInfo* info = nullptr);
enc::ImageEncoder load_image(const std::filesystem::path& path, CheckpointInfo* info = nullptr);

// Header only; does not read parameters.
CheckpointInfo inspect(const std::filesystem::path& path);

// Serialized byte length on disk.
std::uintmax_t disk_size(const std::filesystem::path& path);

}  // namespace motis::ckpt
