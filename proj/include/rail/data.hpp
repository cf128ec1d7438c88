#pragma once

#include <optional>
#include <string>
#include <vector>

#include "rail/io.hpp"
#include "rail/mask.hpp"
#include "rail/rng.hpp"
#include "rail/tensor.hpp"

// Synthetic phantom volumes: soft-edged ellipsoids over a noisy background
// with a low-frequency intensity bias field, plus the dataset directory
// format, normalization, cropping and batch composition.
//
// On-disk layout per sample directory:
//   meta            structured UTF-8 text (id, split, shape, element tags)
//   intensity.raw   little-endian f32, x fastest
//   label.raw       u8, same order (labeled and test splits)
//   label.sealed.raw  withheld ground truth of unlabeled samples; never read
//                     by any training path, kept for evaluation-only audits
// The dataset root holds a `manifest` listing sample ids per split.

namespace rail {

struct VolumeSample {
  std::string id;
  Volume intensity;
  std::optional<LabelVolume> label;
};

struct Ellipsoid {
  double cx, cy, cz;
  double rx, ry, rz;
  double contrast;

  bool contains(int x, int y, int z) const {
    const double dx = (x - cx) / rx, dy = (y - cy) / ry, dz = (z - cz) / rz;
    return dx * dx + dy * dy + dz * dz <= 1.0;
  }
};

struct PhantomConfig {
  Int3 volume_shape{48, 48, 32};
  int n_objects_min = 2;
  int n_objects_max = 6;
  double noise_sigma = 0.08;
  double bias_strength = 0.25;
  std::uint64_t seed = 42;
};

// Foreground fraction every generated label must satisfy.
inline constexpr double kMinForegroundFrac = 0.005;
inline constexpr double kMaxForegroundFrac = 0.30;

struct GeneratedSample {
  Volume intensity;
  LabelVolume label;
  std::vector<Ellipsoid> objects;
};

// Pure function of (cfg, sample_seed); label voxels are exactly the set
// covered by at least one ellipsoid.
GeneratedSample generate_sample(const PhantomConfig& cfg,
                                std::uint64_t sample_seed);

struct DatasetCounts {
  int n_labeled = 4;
  int n_unlabeled = 36;
  int n_test = 8;
};

void generate_dataset(const PhantomConfig& cfg, const DatasetCounts& counts,
                      const std::filesystem::path& out_dir, int workers = 1);

// z-score over the whole volume; throws on constant input.
Volume normalize(const Volume& v);

struct Patch {
  Int3 shape{0, 0, 0};
  std::vector<float> intensity;                      // z innermost
  std::optional<std::vector<std::uint8_t>> label;    // absent for unlabeled
  std::string source_id;
};

// Intensity and label cropped at the same offset; offsets are uniform over
// the valid positions, drawn in x, y, z order.
Patch random_crop(const VolumeSample& v, Int3 patch_shape, Rng& rng);

struct Dataset {
  std::vector<VolumeSample> labeled;    // normalized, with labels
  std::vector<VolumeSample> unlabeled;  // normalized, label never loaded
  std::vector<VolumeSample> test;       // normalized, with labels

  static Dataset load(const std::filesystem::path& dir);
};

struct SampleBatch {
  Patch labeled;
  Patch unlabeled;
};

// One labeled plus one unlabeled patch, independently sampled. Draw order:
// labeled volume index, labeled crop offsets, unlabeled volume index,
// unlabeled crop offsets.
SampleBatch sample_batch(const Dataset& ds, Int3 patch_shape, Rng& rng);

TensorF patch_to_tensor(const Patch& p);
LabelMap patch_label_map(const Patch& p);

}  // namespace rail
