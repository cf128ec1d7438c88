#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "rail/data.hpp"
#include "rail/network.hpp"

// Full-volume inference by sliding windows over a student ensemble, and the
// overlap / surface-distance metric suite. Distances are Euclidean in voxel
// units at isotropic unit spacing; surfaces use 6-connectivity with the
// volume border counting as background.

namespace rail {

struct EnsembleMember {
  NetworkSpec spec;
  const NetworkParams<float>* params = nullptr;
};

// Window origins along one axis: stride steps from 0 plus a final window
// flushed to the far boundary. Guarantees every voxel is covered.
std::vector<int> window_origins(int extent, int patch, int stride);

// Mean of the members' per-window softmax outputs, accumulated with
// per-voxel overlap counts and normalized. Returns [K,W,H,D].
TensorF sliding_window_infer(std::span<const EnsembleMember> members,
                             const Volume& volume, Int3 patch_shape,
                             Int3 stride);

LabelVolume argmax_volume(const TensorF& probs);

// Foreground-probability channel as a [W,H,D] field in [0,1].
Volume foreground_probability(const TensorF& probs);

// Overlap ratios on binary maps; the both-empty pair scores 1 by
// convention.
double dice_score(const LabelVolume& pred, const LabelVolume& gt);
double jaccard_score(const LabelVolume& pred, const LabelVolume& gt);

struct SurfaceDistances {
  double hd95 = 0;
  double asd = 0;
};

// 95th percentile (linear interpolation) and mean of the combined directed
// surface-distance multiset (both directions). Throws when either mask has
// no foreground.
SurfaceDistances surface_distances(const LabelVolume& a, const LabelVolume& b);

struct VolumeMetrics {
  std::string id;
  double dice = 0;
  double jaccard = 0;
  bool surface_valid = false;  // false marks the empty-mask failure case
  double hd95 = 0;
  double asd = 0;
};

VolumeMetrics evaluate_volume(std::span<const EnsembleMember> members,
                              const VolumeSample& sample, Int3 patch_shape,
                              Int3 stride);

}  // namespace rail
