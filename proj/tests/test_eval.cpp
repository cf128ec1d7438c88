#include <algorithm>
#include <cmath>
#include <set>

#include "doctest.h"
#include "rail/eval.hpp"
#include "rail/rng.hpp"

using namespace rail;

namespace {

LabelVolume ball(Int3 shape, double cx, double cy, double cz, double r) {
  LabelVolume v;
  v.shape = shape;
  v.vals.assign(static_cast<std::size_t>(v.numel()), 0);
  for (int x = 0; x < shape[0]; ++x)
    for (int y = 0; y < shape[1]; ++y)
      for (int z = 0; z < shape[2]; ++z) {
        const double d2 = (x - cx) * (x - cx) + (y - cy) * (y - cy) +
                          (z - cz) * (z - cz);
        if (d2 <= r * r) v.at(x, y, z) = 1;
      }
  return v;
}

LabelVolume random_blob(Int3 shape, Rng& rng, double fill) {
  LabelVolume v;
  v.shape = shape;
  v.vals.resize(static_cast<std::size_t>(v.numel()));
  for (auto& x : v.vals) x = rng.uniform01() < fill ? 1 : 0;
  return v;
}

struct OracleSurf {
  std::vector<std::array<int, 3>> pts;
};

// all-pairs reference route, independent of the transform-based production
// path
OracleSurf oracle_surface(const LabelVolume& v) {
  OracleSurf s;
  const int W = v.shape[0], H = v.shape[1], D = v.shape[2];
  auto bg = [&](int x, int y, int z) {
    if (x < 0 || x >= W || y < 0 || y >= H || z < 0 || z >= D) return true;
    return v.at(x, y, z) == 0;
  };
  for (int x = 0; x < W; ++x)
    for (int y = 0; y < H; ++y)
      for (int z = 0; z < D; ++z)
        if (v.at(x, y, z) &&
            (bg(x - 1, y, z) || bg(x + 1, y, z) || bg(x, y - 1, z) ||
             bg(x, y + 1, z) || bg(x, y, z - 1) || bg(x, y, z + 1)))
          s.pts.push_back({x, y, z});
  return s;
}

SurfaceDistances oracle_surface_distances(const LabelVolume& a,
                                          const LabelVolume& b) {
  OracleSurf sa = oracle_surface(a);
  OracleSurf sb = oracle_surface(b);
  auto directed = [](const OracleSurf& from, const OracleSurf& to,
                     std::vector<double>& out) {
    for (const auto& p : from.pts) {
      double best = 1e300;
      for (const auto& q : to.pts) {
        const double d2 =
            static_cast<double>(p[0] - q[0]) * (p[0] - q[0]) +
            static_cast<double>(p[1] - q[1]) * (p[1] - q[1]) +
            static_cast<double>(p[2] - q[2]) * (p[2] - q[2]);
        best = std::min(best, d2);
      }
      out.push_back(std::sqrt(best));
    }
  };
  std::vector<double> all;
  directed(sa, sb, all);
  directed(sb, sa, all);
  std::sort(all.begin(), all.end());
  SurfaceDistances r;
  double sum = 0;
  for (double d : all) sum += d;
  r.asd = sum / static_cast<double>(all.size());
  const double rank = 0.95 * static_cast<double>(all.size() - 1);
  const std::size_t lo = static_cast<std::size_t>(rank);
  const double frac = rank - static_cast<double>(lo);
  r.hd95 = lo + 1 < all.size() ? all[lo] + frac * (all[lo + 1] - all[lo])
                               : all[lo];
  return r;
}

}  // namespace

TEST_CASE("window origins cover every voxel") {
  struct Cfg {
    int extent, patch, stride;
  };
  for (Cfg c : {Cfg{48, 32, 16}, Cfg{48, 16, 8}, Cfg{32, 16, 16}, Cfg{33, 16, 7},
                Cfg{16, 16, 8}}) {
    auto xs = window_origins(c.extent, c.patch, c.stride);
    CHECK(xs.front() == 0);
    CHECK(xs.back() == c.extent - c.patch);
    std::vector<int> covered(static_cast<std::size_t>(c.extent), 0);
    for (int o : xs)
      for (int i = 0; i < c.patch; ++i) covered[static_cast<std::size_t>(o + i)]++;
    CHECK(std::all_of(covered.begin(), covered.end(),
                      [](int n) { return n >= 1; }));
  }
  CHECK_THROWS_AS(window_origins(8, 16, 8), std::invalid_argument);
  CHECK_THROWS_AS(window_origins(16, 8, 12), std::invalid_argument);
}

TEST_CASE("sliding window inference") {
  NetworkSpec spec;
  spec.base_channels = 2;
  spec.depth = 2;
  spec.patch_shape = {16, 16, 8};
  auto p0 = build<float>(spec, 1);
  auto p1 = build<float>(spec, 2);
  auto p2 = build<float>(spec, 3);
  auto p3 = build<float>(spec, 4);
  std::vector<EnsembleMember> members = {
      {spec, &p0}, {spec, &p1}, {spec, &p2}, {spec, &p3}};

  GeneratedSample g;
  {
    PhantomConfig cfg;
    cfg.volume_shape = {24, 24, 16};
    g = generate_sample(cfg, 3);
  }
  Volume vol = normalize(g.intensity);

  SUBCASE("zero-head ensemble is exactly uniform, no seam artifacts") {
    TensorF probs = sliding_window_infer(members, vol, {16, 16, 8}, {8, 8, 4});
    CHECK(probs.shape() == Shape{2, 24, 24, 16});
    for (float v : probs.values()) CHECK(v == 0.5f);
  }
  SUBCASE("single window equals the plain ensemble forward") {
    NetworkSpec wspec = spec;
    wspec.patch_shape = {24, 24, 16};
    auto q0 = build<float>(wspec, 11);
    auto q1 = build<float>(wspec, 12);
    // non-zero heads make the comparison informative
    Rng hr(5);
    for (auto* q : {&q0, &q1})
      for (auto& v : q->at("head.conv.w").values())
        v = static_cast<float>(hr.uniform(-0.3, 0.3));
    std::vector<EnsembleMember> em = {{wspec, &q0}, {wspec, &q1}};
    TensorF swin =
        sliding_window_infer(em, vol, {24, 24, 16}, {24, 24, 16});

    TensorF x = TensorF::from({1, 1, 24, 24, 16}, vol.vals);
    TensorF pa = softmax_channel(forward(q0, wspec, x));
    TensorF pb = softmax_channel(forward(q1, wspec, x));
    TensorF mean = scale(add(pa, pb), 0.5);
    for (std::int64_t i = 0; i < swin.size(); ++i)
      CHECK(swin.values()[i] ==
            doctest::Approx(mean.values()[i]).epsilon(1e-6));
  }
}

TEST_CASE("dice and jaccard") {
  Int3 s{4, 4, 1};
  LabelVolume a{s, std::vector<std::uint8_t>(16, 0)};
  LabelVolume b{s, std::vector<std::uint8_t>(16, 0)};
  // |A| = 2, |B| = 2, |A ∩ B| = 1
  a.vals[0] = a.vals[1] = 1;
  b.vals[1] = b.vals[2] = 1;
  CHECK(dice_score(a, b) == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(jaccard_score(a, b) == doctest::Approx(1.0 / 3).epsilon(1e-12));
  CHECK(dice_score(a, a) == 1.0);
  CHECK(jaccard_score(a, a) == 1.0);

  LabelVolume d{s, std::vector<std::uint8_t>(16, 0)};
  d.vals[5] = 1;
  LabelVolume e{s, std::vector<std::uint8_t>(16, 0)};
  e.vals[9] = 1;
  CHECK(dice_score(d, e) == 0.0);
  CHECK(jaccard_score(d, e) == 0.0);

  LabelVolume z{s, std::vector<std::uint8_t>(16, 0)};
  CHECK(dice_score(z, z) == 1.0);
  CHECK(jaccard_score(z, z) == 1.0);
}

TEST_CASE("surface distances") {
  SUBCASE("identical masks") {
    LabelVolume m = ball({10, 10, 10}, 5, 5, 5, 3);
    SurfaceDistances sd = surface_distances(m, m);
    CHECK(sd.hd95 == 0.0);
    CHECK(sd.asd == 0.0);
  }
  SUBCASE("two single voxels 3 apart on one axis") {
    Int3 s{8, 4, 4};
    LabelVolume a{s, std::vector<std::uint8_t>(128, 0)};
    LabelVolume b{s, std::vector<std::uint8_t>(128, 0)};
    a.at(1, 2, 2) = 1;
    b.at(4, 2, 2) = 1;
    SurfaceDistances sd = surface_distances(a, b);
    CHECK(sd.hd95 == doctest::Approx(3.0).epsilon(1e-12));
    CHECK(sd.asd == doctest::Approx(3.0).epsilon(1e-12));
  }
  SUBCASE("empty mask is a failure case") {
    Int3 s{4, 4, 4};
    LabelVolume a{s, std::vector<std::uint8_t>(64, 0)};
    LabelVolume b{s, std::vector<std::uint8_t>(64, 0)};
    b.vals[0] = 1;
    CHECK_THROWS_AS(surface_distances(a, b), std::runtime_error);
  }
  SUBCASE("matches the all-pairs oracle on random volumes") {
    Rng rng(17);
    for (int rep = 0; rep < 25; ++rep) {
      Int3 s{static_cast<int>(3 + rng.uniform_int(10)),
             static_cast<int>(3 + rng.uniform_int(10)),
             static_cast<int>(3 + rng.uniform_int(10))};
      LabelVolume a = random_blob(s, rng, 0.25);
      LabelVolume b = random_blob(s, rng, 0.25);
      std::int64_t fa = 0, fb = 0;
      for (auto v : a.vals) fa += v;
      for (auto v : b.vals) fb += v;
      if (fa == 0 || fb == 0) continue;
      SurfaceDistances got = surface_distances(a, b);
      SurfaceDistances want = oracle_surface_distances(a, b);
      CHECK(got.hd95 == doctest::Approx(want.hd95).epsilon(1e-9));
      CHECK(got.asd == doctest::Approx(want.asd).epsilon(1e-9));
      // symmetry of the combined-multiset convention
      SurfaceDistances rev = surface_distances(b, a);
      CHECK(rev.hd95 == doctest::Approx(got.hd95).epsilon(1e-12));
      CHECK(rev.asd == doctest::Approx(got.asd).epsilon(1e-12));
      // dice-jaccard identity
      const double dj = dice_score(a, b);
      const double jj = jaccard_score(a, b);
      CHECK(dj == doctest::Approx(2 * jj / (1 + jj)).epsilon(1e-12));
    }
  }
  SUBCASE("hd95 grows as one side erodes") {
    for (double r : {4.0, 5.0, 6.0}) {
      LabelVolume gt = ball({16, 16, 16}, 8, 8, 8, r);
      double prev = -1;
      for (int k = 0; k < 3; ++k) {
        LabelVolume pred = ball({16, 16, 16}, 8, 8, 8, r - k);
        SurfaceDistances sd = surface_distances(pred, gt);
        CHECK(sd.hd95 >= prev);
        prev = sd.hd95;
      }
    }
  }
}
