#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "rail/ops.hpp"

namespace rail {

// Dense scalar field over a [W,H,D] grid. In memory the depth axis is
// innermost (matching tensor layout); the on-disk raw encoding is
// little-endian with the x axis fastest.
struct Volume {
  Int3 shape{0, 0, 0};
  std::vector<float> vals;

  std::int64_t numel() const {
    return static_cast<std::int64_t>(shape[0]) * shape[1] * shape[2];
  }
  float& at(int x, int y, int z) {
    return vals[(static_cast<std::int64_t>(x) * shape[1] + y) * shape[2] + z];
  }
  float at(int x, int y, int z) const {
    return vals[(static_cast<std::int64_t>(x) * shape[1] + y) * shape[2] + z];
  }
};

struct LabelVolume {
  Int3 shape{0, 0, 0};
  std::vector<std::uint8_t> vals;

  std::int64_t numel() const {
    return static_cast<std::int64_t>(shape[0]) * shape[1] * shape[2];
  }
  std::uint8_t& at(int x, int y, int z) {
    return vals[(static_cast<std::int64_t>(x) * shape[1] + y) * shape[2] + z];
  }
  std::uint8_t at(int x, int y, int z) const {
    return vals[(static_cast<std::int64_t>(x) * shape[1] + y) * shape[2] + z];
  }
};

void write_raw_f32(const std::filesystem::path& path, const Volume& v);
Volume read_raw_f32(const std::filesystem::path& path, Int3 shape);
void write_raw_u8(const std::filesystem::path& path, const LabelVolume& v);
LabelVolume read_raw_u8(const std::filesystem::path& path, Int3 shape);

// Binary grayscale PGM (P5), one image per z slice, named slice_000.pgm
// upward; pixel = round(255 * value clamped to [0,1]).
void write_pgm_slices(const std::filesystem::path& dir,
                      const Volume& values01);

// Debug export of a binary mask (batch 0) in the same slice format.
void write_mask_slices(const std::filesystem::path& dir,
                       const BinaryMask3D& mask);

std::string read_text_file(const std::filesystem::path& path);
void write_text_file(const std::filesystem::path& path, const std::string& s);

}  // namespace rail
