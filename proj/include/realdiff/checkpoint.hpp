#pragma once

#include <cstdint>
#include <string>

#include "realdiff/optim.hpp"

namespace realdiff {

inline constexpr std::uint32_t kCheckpointVersion = 1;

// Flat binary parameter file: magic "CDEF", u32 version, then one record per
// parameter (u32 name length, name bytes, u32 rank, u64 dims, little-endian
// f64 payload) until end of file.
void save_checkpoint(const std::string& path, const ParamStore& params);
ParamStore load_checkpoint(const std::string& path);

}  // namespace realdiff
