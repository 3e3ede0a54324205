#pragma once

// Checkpoint container (little-endian):
//   "AIOSCK01"
//   u32 n, n bytes    config echo ("key = value" lines)
//   u64               iterations completed
//   u32               tensor count
//   per tensor: u32 name length, name bytes, u32 rows, u32 cols, u8 has_optimizer_state,
//               rows·cols f64 values, then (if has_optimizer_state) Adam m and v, f64 each.

#include "aios/autodiff.hpp"
#include "aios/config.hpp"

#include <cstdint>
#include <filesystem>

namespace aios {

struct CheckpointInfo {
  RunConfig config;
  std::uint64_t iteration = 0;
};

void save_checkpoint(const std::filesystem::path& path, const ad::ParamStore& store, const RunConfig& config,
                     std::uint64_t iteration);

// Reads the header only.
CheckpointInfo read_checkpoint_info(const std::filesystem::path& path);

// Loads tensors into store. Every store parameter must be present with the same
// shape and no extra tensors may exist; otherwise CheckpointIncompatibleError.
CheckpointInfo load_checkpoint(const std::filesystem::path& path, ad::ParamStore& store);

}  // namespace aios
