#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "rsf/common/error.hpp"
#include "rsf/netcore/model.hpp"

namespace rsf::netcore {

class BadMagic : public Error {
 public:
  using Error::Error;
};
class VersionMismatch : public Error {
 public:
  using Error::Error;
};
class TruncatedFile : public Error {
 public:
  using Error::Error;
};
class ChecksumMismatch : public Error {
 public:
  using Error::Error;
};

inline constexpr char kCheckpointMagic[8] = {'R', 'S', 'F', 'C', 'K', 'P', 'T', '1'};
inline constexpr std::uint16_t kCheckpointVersion = 1;

// Layout (all integers little-endian):
//   magic[8] | u16 version | u32 config_len | config JSON (UTF-8)
//   | u32 tensor_count | tensors... | u32 crc32 of everything before it
// where each tensor is
//   u32 name_len | name (UTF-8) | u32 rank | u32 dims[rank] | f32 values[]
std::vector<std::uint8_t> encode_checkpoint(const Model& model);
Model decode_checkpoint(std::span<const std::uint8_t> bytes);

void save_checkpoint(const Model& model, const std::filesystem::path& path);
Model load_checkpoint(const std::filesystem::path& path);

}  // namespace rsf::netcore
