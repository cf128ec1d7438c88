#pragma once

#include <filesystem>

#include "rail/config.hpp"
#include "rail/trainer.hpp"

// Single-file binary checkpoint: 8-byte magic, u32 format version, then
// length-prefixed named sections with explicit little-endian scalars.
// Save -> load -> save is byte-identical.

namespace rail {

inline constexpr char kCheckpointMagic[9] = "RAILCKPT";
inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const std::filesystem::path& path,
                     const TrainerState& state, const RunConfig& cfg);

// Rebuilds the trainer for cfg's architecture and restores every parameter,
// momentum buffer, teacher, the iteration counter and the RNG stream.
// A config-hash mismatch is an error unless allow_config_mismatch is set.
TrainerState load_checkpoint(const std::filesystem::path& path,
                             const RunConfig& cfg,
                             bool allow_config_mismatch = false);

// The canonical config text stored alongside the hash, so evaluation and
// inference can rebuild the networks from the checkpoint alone.
RunConfig config_from_checkpoint(const std::filesystem::path& path);

std::uint64_t checkpoint_config_hash(const std::filesystem::path& path);

}  // namespace rail
