#include "rail/mask.hpp"

#include <stdexcept>

namespace rail {

namespace {

void check_same_dims(const char* who, const Shape& a, const Shape& b) {
  if (a != b)
    throw std::invalid_argument(std::string(who) + ": shape mismatch " +
                                shape_str(a) + " vs " + shape_str(b));
}

BinaryMask3D inequality_mask(const char* who, const LabelMap& a,
                             const LabelMap& b) {
  check_same_dims(who, a.shape, b.shape);
  BinaryMask3D m;
  m.shape = a.shape;
  m.values.resize(a.labels.size());
  for (std::size_t i = 0; i < a.labels.size(); ++i)
    m.values[i] = a.labels[i] != b.labels[i] ? 1 : 0;
  return m;
}

}  // namespace

BinaryMask3D diff_mask(const LabelMap& labels_a, const LabelMap& labels_b) {
  return inequality_mask("diff_mask", labels_a, labels_b);
}

BinaryMask3D mis_mask(const LabelMap& pred_labels, const LabelMap& gt_labels) {
  return inequality_mask("mis_mask", pred_labels, gt_labels);
}

BinaryMask3D diffmis_mask(const BinaryMask3D& m_diff,
                          const BinaryMask3D& m_mis) {
  check_same_dims("diffmis_mask", m_diff.shape, m_mis.shape);
  BinaryMask3D m;
  m.shape = m_diff.shape;
  m.values.resize(m_diff.values.size());
  for (std::size_t i = 0; i < m_diff.values.size(); ++i)
    m.values[i] = (m_diff.values[i] & m_mis.values[i]) ? 1 : 0;
  return m;
}

BinaryMask3D div_mask(const LabelMap& pseudo_a, const LabelMap& pseudo_b) {
  return inequality_mask("div_mask", pseudo_a, pseudo_b);
}

}  // namespace rail
