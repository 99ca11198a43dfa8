#pragma once

#include <filesystem>
#include <string>

#include "emma/network.hpp"

namespace emma {

// Checkpoint byte layout (all integers little-endian):
//   "EMMACKPT" | u32 version | payload | u32 CRC32(payload)
//   payload = u32 record count, then per record:
//     u32 name length, UTF-8 name, u8 dtype tag (0 f32, 1 f64, 2 u8),
//     u32 rank, rank x u64 extents, raw little-endian values.
// A "__meta__" u8 record carries the spec id, class count, width scale and
// training metadata as JSON.
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointInfo {
  std::string spec_id;
  std::size_t num_classes = 0;
  double width_scale = 1.0;
  std::string dtype;  // "f32" or "f64"
  NetworkMetadata metadata;
};

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const Network<T>& net);

CheckpointInfo read_checkpoint_info(const std::filesystem::path& path);

// Rebuilds the network described by the checkpoint and loads its tensors,
// converting precision if needed.
template <typename T>
Network<T> load_checkpoint(const std::filesystem::path& path);

// Loads into an existing network; every tensor must match by name and shape.
template <typename T>
void load_checkpoint_into(const std::filesystem::path& path, Network<T>& net);

}  // namespace emma
