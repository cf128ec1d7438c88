#include <algorithm>
#include <set>

#include "doctest.h"
#include "rail/mask.hpp"
#include "rail/rng.hpp"

using namespace rail;

namespace {

LabelMap make_map(Shape shape, std::vector<std::uint8_t> labels) {
  return LabelMap{std::move(shape), std::move(labels)};
}

LabelMap random_binary_map(const Shape& shape, Rng& rng) {
  LabelMap m;
  m.shape = shape;
  m.labels.resize(static_cast<std::size_t>(shape_numel(shape)));
  for (auto& v : m.labels) v = static_cast<std::uint8_t>(rng.uniform_int(2));
  return m;
}

// Independent set-algebra route: foreground sets, union minus intersection.
std::vector<std::uint8_t> symdiff_oracle(const LabelMap& a, const LabelMap& b) {
  std::set<std::size_t> fa, fb;
  for (std::size_t i = 0; i < a.labels.size(); ++i) {
    if (a.labels[i]) fa.insert(i);
    if (b.labels[i]) fb.insert(i);
  }
  std::set<std::size_t> uni, inter, sym;
  std::set_union(fa.begin(), fa.end(), fb.begin(), fb.end(),
                 std::inserter(uni, uni.begin()));
  std::set_intersection(fa.begin(), fa.end(), fb.begin(), fb.end(),
                        std::inserter(inter, inter.begin()));
  std::set_difference(uni.begin(), uni.end(), inter.begin(), inter.end(),
                      std::inserter(sym, sym.begin()));
  std::vector<std::uint8_t> out(a.labels.size(), 0);
  for (std::size_t i : sym) out[i] = 1;
  return out;
}

}  // namespace

TEST_CASE("diff_mask examples") {
  LabelMap a = make_map({1, 2, 2, 1}, {1, 0, 1, 0});
  LabelMap b = make_map({1, 2, 2, 1}, {1, 1, 0, 0});
  BinaryMask3D m = diff_mask(a, b);
  CHECK(m.values == std::vector<std::uint8_t>{0, 1, 1, 0});

  CHECK(diff_mask(a, a).popcount() == 0);

  LabelMap c = make_map({1, 2, 2, 1}, {0, 1, 0, 1});
  CHECK(diff_mask(a, c).popcount() == 4);

  LabelMap bad = make_map({1, 2, 1, 1}, {0, 0});
  CHECK_THROWS_AS(diff_mask(a, bad), std::invalid_argument);
}

TEST_CASE("mis_mask examples") {
  Rng rng(41);
  LabelMap pred = random_binary_map({1, 4, 4, 2}, rng);
  CHECK(mis_mask(pred, pred).popcount() == 0);

  LabelMap all_fg = make_map({1, 2, 1, 1}, {1, 1});
  LabelMap all_bg = make_map({1, 2, 1, 1}, {0, 0});
  CHECK(mis_mask(all_fg, all_bg).popcount() == 2);

  LabelMap gt = random_binary_map({1, 4, 4, 2}, rng);
  BinaryMask3D m = mis_mask(pred, gt);
  CHECK(m.values == symdiff_oracle(pred, gt));
}

TEST_CASE("diffmis_mask truth table") {
  BinaryMask3D a{{1, 2, 2, 1}, {0, 1, 1, 0}};
  BinaryMask3D b{{1, 2, 2, 1}, {1, 1, 0, 0}};
  CHECK(diffmis_mask(a, b).values == std::vector<std::uint8_t>{0, 1, 0, 0});

  BinaryMask3D ones{{1, 2, 2, 1}, {1, 1, 1, 1}};
  CHECK(diffmis_mask(a, ones).values == a.values);
  BinaryMask3D zeros{{1, 2, 2, 1}, {0, 0, 0, 0}};
  CHECK(diffmis_mask(a, zeros).popcount() == 0);
}

TEST_CASE("div_mask examples and equivalence with diff_mask") {
  Rng rng(43);
  LabelMap a = random_binary_map({1, 2, 2, 2}, rng);
  CHECK(div_mask(a, a).popcount() == 0);

  LabelMap b = a;
  b.labels[3] ^= 1;
  BinaryMask3D m = div_mask(a, b);
  CHECK(m.popcount() == 1);
  CHECK(m.values[3] == 1);

  // exhaustive over all 2^16 pairs of 2x2x2 binary maps
  for (int pa = 0; pa < 256; ++pa)
    for (int pb = 0; pb < 256; ++pb) {
      LabelMap la, lb;
      la.shape = lb.shape = {1, 2, 2, 2};
      la.labels.resize(8);
      lb.labels.resize(8);
      for (int i = 0; i < 8; ++i) {
        la.labels[i] = (pa >> i) & 1;
        lb.labels[i] = (pb >> i) & 1;
      }
      CHECK(div_mask(la, lb).values == diff_mask(la, lb).values);
    }
}

TEST_CASE("mask properties") {
  Rng rng(47);
  for (int rep = 0; rep < 50; ++rep) {
    Shape shape = {1, static_cast<int>(1 + rng.uniform_int(6)),
                   static_cast<int>(1 + rng.uniform_int(6)),
                   static_cast<int>(1 + rng.uniform_int(4))};
    LabelMap a = random_binary_map(shape, rng);
    LabelMap b = random_binary_map(shape, rng);
    LabelMap gt = random_binary_map(shape, rng);

    // symmetry
    CHECK(diff_mask(a, b).values == diff_mask(b, a).values);
    CHECK(div_mask(a, b).values == div_mask(b, a).values);
    // oracle equality (union minus intersection)
    CHECK(diff_mask(a, b).values == symdiff_oracle(a, b));
    // XOR formulation
    for (std::size_t i = 0; i < a.labels.size(); ++i)
      CHECK(diff_mask(a, b).values[i] == (a.labels[i] ^ b.labels[i]));
    // popcount bound of the intersection
    BinaryMask3D md = diff_mask(a, b);
    BinaryMask3D mm = mis_mask(a, gt);
    BinaryMask3D dm = diffmis_mask(md, mm);
    CHECK(dm.popcount() <= std::min(md.popcount(), mm.popcount()));
  }
}
