#pragma once

#include <cstdint>
#include <vector>

#include "rail/tensor.hpp"

namespace rail {

// Hard per-voxel class assignment, detached from any gradient path.
// Dims are the spatial extents, optionally with a leading batch axis.
struct LabelMap {
  Shape shape;
  std::vector<std::uint8_t> labels;

  std::int64_t size() const { return static_cast<std::int64_t>(labels.size()); }
};

// Voxel-wise {0,1} selector with the same shape as the label maps it was
// derived from. No gradient ever flows through a mask.
struct BinaryMask3D {
  Shape shape;
  std::vector<std::uint8_t> values;

  std::int64_t size() const { return static_cast<std::int64_t>(values.size()); }
  std::int64_t popcount() const {
    std::int64_t n = 0;
    for (auto v : values) n += v;
    return n;
  }
  bool empty_mask() const { return popcount() == 0; }
};

// Voxels where the two hard predictions differ. For two classes this is
// exactly the symmetric difference (union minus intersection) of the
// foreground sets; for more classes it generalizes per voxel.
BinaryMask3D diff_mask(const LabelMap& labels_a, const LabelMap& labels_b);

// Voxels where the prediction differs from ground truth. Same contract as
// diff_mask with ground truth as the second argument.
BinaryMask3D mis_mask(const LabelMap& pred_labels, const LabelMap& gt_labels);

// Voxelwise AND.
BinaryMask3D diffmis_mask(const BinaryMask3D& m_diff, const BinaryMask3D& m_mis);

// XOR of two pseudo-label maps; identical to diff_mask for binary labels.
BinaryMask3D div_mask(const LabelMap& pseudo_a, const LabelMap& pseudo_b);

}  // namespace rail
