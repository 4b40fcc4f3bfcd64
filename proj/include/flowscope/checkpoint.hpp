#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>

#include "flowscope/model.hpp"

namespace flowscope {

// Binary container, little-endian:
//   "FLOWSCK\0" | u32 version | u32 field count | u64 config fields...
//   | u32 parameter count | per parameter: u32 name length, name bytes,
//   u32 rank, u64 dims..., f64 values (row-major)
// Loading rebuilds the manifest from the config and rejects any mismatch.
inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const Model& model, std::ostream& out);
void save_checkpoint(const Model& model, const std::filesystem::path& path);
Model load_checkpoint(std::istream& in);
Model load_checkpoint(const std::filesystem::path& path);

}  // namespace flowscope
