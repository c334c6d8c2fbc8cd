#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>

#include "medvit/model.hpp"

namespace medvit {

enum class DType : std::uint8_t { F32 = 0, F64 = 1 };

template <typename T>
constexpr DType dtype_of();
template <>
constexpr DType dtype_of<float>() { return DType::F32; }
template <>
constexpr DType dtype_of<double>() { return DType::F64; }

const char* dtype_name(DType d);

/// Header and tensor directory of an MVWT file.
struct CheckpointInfo {
  std::uint32_t version = 0;
  std::uint64_t config_digest = 0;
  DType dtype = DType::F32;
  std::map<std::string, Shape> entries;
};

/// "MVWT" | u32 version | u64 config digest | u32 entry count |
/// per entry: u32 name length, name, u8 dtype, u32 rank, u32 dims[rank],
/// raw little-endian values. Parameters first, then BN running buffers.
template <typename T>
void save_checkpoint(const std::filesystem::path& path, MedViT<T>& model);

/// Requires the digest of model.config() and every tensor name and shape to
/// match; throws DataError otherwise.
template <typename T>
void load_checkpoint(const std::filesystem::path& path, MedViT<T>& model);

CheckpointInfo peek_checkpoint(const std::filesystem::path& path);

}  // namespace medvit
