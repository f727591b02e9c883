#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "affect/architectures.hpp"

namespace affect::io {

// AFWT weight file, all integers little-endian:
//
//   "AFWT" | u32 version | u32 head tag | u32 arch id length | arch id, zero-padded to 8
//   u32 record count | u32 reserved
//   record*: u32 name length | u32 dtype (1 = f32) | u32 rank | u32 reserved
//            u64 dims[rank] | name, zero-padded to 8 | f32 payload, zero-padded to 8
//   u32 CRC-32 of every preceding byte
//
// Records appear in AffectModel::parameters() order, BN running statistics
// included. Every record starts on an 8-byte boundary.

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ChecksumError : public FormatError {
 public:
  using FormatError::FormatError;
};

/// Stored tensors disagree with the architecture named in the header.
class ConformanceError : public FormatError {
 public:
  ConformanceError(std::string layer, const std::string& what)
      : FormatError(what), layer_(std::move(layer)) {}
  const std::string& layer() const noexcept { return layer_; }

 private:
  std::string layer_;
};

inline constexpr std::uint32_t kFormatVersion = 1;
inline constexpr std::uint32_t kDtypeF32 = 1;
inline constexpr std::size_t kMaxFileBytes = std::size_t{64} << 20;

struct TensorRecord {
  std::string name;
  Shape shape;
};

/// Exact file size for the given records.
std::size_t serialized_size(std::string_view arch_id, std::span<const TensorRecord> records);

std::vector<std::uint8_t> serialize(const arch::AffectModel& model);
arch::AffectModel deserialize(std::span<const std::uint8_t> bytes);

/// Writes the file and returns the byte count.
std::size_t save(const arch::AffectModel& model, const std::filesystem::path& path);
arch::AffectModel load(const std::filesystem::path& path);

struct ModelInfo {
  struct Layer {
    std::string name;
    Shape shape;
    std::size_t params = 0;
  };
  std::string arch_id;
  std::string head;
  std::size_t total_params = 0;
  std::size_t bytes = 0;
  std::vector<Layer> layers;
};

ModelInfo model_info(const std::filesystem::path& path);
std::string format_model_info(const ModelInfo& info);

std::uint32_t crc32(std::span<const std::uint8_t> bytes);

}  // namespace affect::io
