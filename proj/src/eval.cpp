#include "rail/eval.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace rail {

namespace {

constexpr double kFarAway = 1e20;

void check_same_vol_shape(const char* who, const LabelVolume& a,
                          const LabelVolume& b) {
  if (a.shape != b.shape)
    throw std::invalid_argument(std::string(who) + ": shape mismatch");
}

std::int64_t count_fg(const LabelVolume& v) {
  std::int64_t n = 0;
  for (auto x : v.vals) n += x ? 1 : 0;
  return n;
}

std::int64_t count_intersection(const LabelVolume& a, const LabelVolume& b) {
  std::int64_t n = 0;
  for (std::size_t i = 0; i < a.vals.size(); ++i)
    n += (a.vals[i] && b.vals[i]) ? 1 : 0;
  return n;
}

// Foreground voxels with at least one 6-neighbor that is background or
// outside the volume.
std::vector<std::uint8_t> surface_of(const LabelVolume& v) {
  const int W = v.shape[0], H = v.shape[1], D = v.shape[2];
  std::vector<std::uint8_t> surf(v.vals.size(), 0);
  for (int x = 0; x < W; ++x)
    for (int y = 0; y < H; ++y)
      for (int z = 0; z < D; ++z) {
        if (!v.at(x, y, z)) continue;
        const bool border =
            x == 0 || x == W - 1 || y == 0 || y == H - 1 || z == 0 ||
            z == D - 1;
        bool exposed = border;
        if (!exposed)
          exposed = !v.at(x - 1, y, z) || !v.at(x + 1, y, z) ||
                    !v.at(x, y - 1, z) || !v.at(x, y + 1, z) ||
                    !v.at(x, y, z - 1) || !v.at(x, y, z + 1);
        if (exposed)
          surf[(static_cast<std::size_t>(x) * H + y) * D + z] = 1;
      }
  return surf;
}

// 1D squared-distance transform (lower envelope of parabolas).
void edt_1d(const double* f, double* d, int n, std::vector<int>& v,
            std::vector<double>& z) {
  int k = 0;
  v[0] = 0;
  z[0] = -kFarAway;
  z[1] = kFarAway;
  for (int q = 1; q < n; ++q) {
    double s = ((f[q] + static_cast<double>(q) * q) -
                (f[v[k]] + static_cast<double>(v[k]) * v[k])) /
               (2.0 * q - 2.0 * v[k]);
    while (s <= z[k]) {
      --k;
      s = ((f[q] + static_cast<double>(q) * q) -
           (f[v[k]] + static_cast<double>(v[k]) * v[k])) /
          (2.0 * q - 2.0 * v[k]);
    }
    ++k;
    v[k] = q;
    z[k] = s;
    z[k + 1] = kFarAway;
  }
  k = 0;
  for (int q = 0; q < n; ++q) {
    while (z[k + 1] < q) ++k;
    const double dq = q - v[k];
    d[q] = dq * dq + f[v[k]];
  }
}

// Exact squared Euclidean distance to the nearest set voxel, separable over
// the three axes.
std::vector<double> edt3(const std::vector<std::uint8_t>& set, Int3 shape) {
  const int W = shape[0], H = shape[1], D = shape[2];
  std::vector<double> dist(set.size());
  for (std::size_t i = 0; i < set.size(); ++i)
    dist[i] = set[i] ? 0.0 : kFarAway;

  const int nmax = std::max({W, H, D});
  std::vector<double> f(static_cast<std::size_t>(nmax)),
      d(static_cast<std::size_t>(nmax)), z(static_cast<std::size_t>(nmax) + 1);
  std::vector<int> v(static_cast<std::size_t>(nmax));

  // along z (stride 1)
  for (int x = 0; x < W; ++x)
    for (int y = 0; y < H; ++y) {
      double* row = dist.data() + (static_cast<std::size_t>(x) * H + y) * D;
      edt_1d(row, d.data(), D, v, z);
      std::copy(d.begin(), d.begin() + D, row);
    }
  // along y
  for (int x = 0; x < W; ++x)
    for (int zz = 0; zz < D; ++zz) {
      for (int y = 0; y < H; ++y)
        f[static_cast<std::size_t>(y)] =
            dist[(static_cast<std::size_t>(x) * H + y) * D + zz];
      edt_1d(f.data(), d.data(), H, v, z);
      for (int y = 0; y < H; ++y)
        dist[(static_cast<std::size_t>(x) * H + y) * D + zz] =
            d[static_cast<std::size_t>(y)];
    }
  // along x
  for (int y = 0; y < H; ++y)
    for (int zz = 0; zz < D; ++zz) {
      for (int x = 0; x < W; ++x)
        f[static_cast<std::size_t>(x)] =
            dist[(static_cast<std::size_t>(x) * H + y) * D + zz];
      edt_1d(f.data(), d.data(), W, v, z);
      for (int x = 0; x < W; ++x)
        dist[(static_cast<std::size_t>(x) * H + y) * D + zz] =
            d[static_cast<std::size_t>(x)];
    }
  return dist;
}

void append_directed(const std::vector<std::uint8_t>& from_surface,
                     const std::vector<double>& to_sq_dist,
                     std::vector<double>& out) {
  for (std::size_t i = 0; i < from_surface.size(); ++i)
    if (from_surface[i]) out.push_back(std::sqrt(to_sq_dist[i]));
}

}  // namespace

std::vector<int> window_origins(int extent, int patch, int stride) {
  if (patch <= 0 || patch > extent)
    throw std::invalid_argument("window_origins: patch extent " +
                                std::to_string(patch) +
                                " does not fit in volume extent " +
                                std::to_string(extent));
  if (stride <= 0 || stride > patch)
    throw std::invalid_argument("window_origins: stride " +
                                std::to_string(stride) +
                                " must be in [1, patch extent " +
                                std::to_string(patch) + "]");
  std::vector<int> out;
  for (int o = 0; o + patch <= extent; o += stride) out.push_back(o);
  if (out.back() != extent - patch) out.push_back(extent - patch);
  return out;
}

TensorF sliding_window_infer(std::span<const EnsembleMember> members,
                             const Volume& volume, Int3 patch_shape,
                             Int3 stride) {
  if (members.empty())
    throw std::invalid_argument("sliding_window_infer: empty ensemble");
  const int W = volume.shape[0], H = volume.shape[1], D = volume.shape[2];
  const int K = members[0].spec.num_classes;
  for (const auto& m : members)
    for (int a = 0; a < 3; ++a)
      if (m.spec.patch_shape[a] != patch_shape[a])
        throw std::invalid_argument(
            "sliding_window_infer: member patch shape does not match");
  const auto xs = window_origins(W, patch_shape[0], stride[0]);
  const auto ys = window_origins(H, patch_shape[1], stride[1]);
  const auto zs = window_origins(D, patch_shape[2], stride[2]);

  const std::int64_t S = static_cast<std::int64_t>(W) * H * D;
  std::vector<float> acc(static_cast<std::size_t>(K) * S, 0.0f);
  std::vector<float> cnt(static_cast<std::size_t>(S), 0.0f);

  const int pw = patch_shape[0], ph = patch_shape[1], pd = patch_shape[2];
  const float inv_members = 1.0f / static_cast<float>(members.size());
  std::vector<float> patch_vals(static_cast<std::size_t>(pw) * ph * pd);

  for (int ox : xs)
    for (int oy : ys)
      for (int oz : zs) {
        std::size_t i = 0;
        for (int x = 0; x < pw; ++x)
          for (int y = 0; y < ph; ++y)
            for (int zv = 0; zv < pd; ++zv)
              patch_vals[i++] = volume.at(ox + x, oy + y, oz + zv);
        TensorF patch =
            TensorF::from({1, 1, pw, ph, pd}, patch_vals);
        TensorF ens;
        for (const auto& m : members) {
          TensorF logits = forward(*m.params, m.spec, patch);
          if (!logits.all_finite())
            throw std::runtime_error(
                "sliding_window_infer: non-finite member output");
          TensorF probs = softmax_channel(logits);
          ens = ens.defined() ? add(ens, probs) : probs;
        }
        ens = scale(ens, inv_members);
        auto ev = ens.values();
        const std::int64_t ps = static_cast<std::int64_t>(pw) * ph * pd;
        for (int k = 0; k < K; ++k)
          for (int x = 0; x < pw; ++x)
            for (int y = 0; y < ph; ++y) {
              const std::int64_t src =
                  (static_cast<std::int64_t>(k) * ps) +
                  (static_cast<std::int64_t>(x) * ph + y) * pd;
              const std::int64_t dst =
                  static_cast<std::int64_t>(k) * S +
                  (static_cast<std::int64_t>(ox + x) * H + (oy + y)) * D + oz;
              for (int zv = 0; zv < pd; ++zv)
                acc[static_cast<std::size_t>(dst + zv)] +=
                    ev[static_cast<std::size_t>(src + zv)];
            }
        for (int x = 0; x < pw; ++x)
          for (int y = 0; y < ph; ++y) {
            const std::int64_t dst =
                (static_cast<std::int64_t>(ox + x) * H + (oy + y)) * D + oz;
            for (int zv = 0; zv < pd; ++zv)
              cnt[static_cast<std::size_t>(dst + zv)] += 1.0f;
          }
      }

  for (std::int64_t vx = 0; vx < S; ++vx) {
    const float c = cnt[static_cast<std::size_t>(vx)];
    for (int k = 0; k < K; ++k)
      acc[static_cast<std::size_t>(k * S + vx)] /= c;
  }
  return TensorF::from({K, W, H, D}, std::move(acc));
}

LabelVolume argmax_volume(const TensorF& probs) {
  const int K = probs.shape()[0];
  const int W = probs.shape()[1], H = probs.shape()[2], D = probs.shape()[3];
  const std::int64_t S = static_cast<std::int64_t>(W) * H * D;
  LabelVolume out;
  out.shape = {W, H, D};
  out.vals.resize(static_cast<std::size_t>(S));
  auto pv = probs.values();
  for (std::int64_t v = 0; v < S; ++v) {
    int best = 0;
    float best_val = pv[static_cast<std::size_t>(v)];
    for (int k = 1; k < K; ++k) {
      const float val = pv[static_cast<std::size_t>(k * S + v)];
      if (val > best_val) {
        best_val = val;
        best = k;
      }
    }
    out.vals[static_cast<std::size_t>(v)] = static_cast<std::uint8_t>(best);
  }
  return out;
}

Volume foreground_probability(const TensorF& probs) {
  const int K = probs.shape()[0];
  const int W = probs.shape()[1], H = probs.shape()[2], D = probs.shape()[3];
  const std::int64_t S = static_cast<std::int64_t>(W) * H * D;
  Volume out;
  out.shape = {W, H, D};
  out.vals.assign(static_cast<std::size_t>(S), 0.0f);
  auto pv = probs.values();
  for (std::int64_t v = 0; v < S; ++v)
    for (int k = 1; k < K; ++k)
      out.vals[static_cast<std::size_t>(v)] +=
          pv[static_cast<std::size_t>(k * S + v)];
  return out;
}

double dice_score(const LabelVolume& pred, const LabelVolume& gt) {
  check_same_vol_shape("dice_score", pred, gt);
  const std::int64_t a = count_fg(pred), b = count_fg(gt);
  if (a + b == 0) return 1.0;
  const std::int64_t i = count_intersection(pred, gt);
  return 2.0 * static_cast<double>(i) / static_cast<double>(a + b);
}

double jaccard_score(const LabelVolume& pred, const LabelVolume& gt) {
  check_same_vol_shape("jaccard_score", pred, gt);
  const std::int64_t a = count_fg(pred), b = count_fg(gt);
  if (a + b == 0) return 1.0;
  const std::int64_t i = count_intersection(pred, gt);
  return static_cast<double>(i) / static_cast<double>(a + b - i);
}

SurfaceDistances surface_distances(const LabelVolume& a,
                                   const LabelVolume& b) {
  check_same_vol_shape("surface_distances", a, b);
  if (count_fg(a) == 0 || count_fg(b) == 0)
    throw std::runtime_error(
        "surface_distances: empty mask has no surface (failure case)");
  const auto sa = surface_of(a);
  const auto sb = surface_of(b);
  const auto da = edt3(sa, a.shape);  // distance to a's surface
  const auto db = edt3(sb, b.shape);

  std::vector<double> all;
  append_directed(sa, db, all);  // a's surface to b's surface
  append_directed(sb, da, all);
  std::sort(all.begin(), all.end());

  SurfaceDistances out;
  double sum = 0;
  for (double d : all) sum += d;
  out.asd = sum / static_cast<double>(all.size());
  const double rank = 0.95 * static_cast<double>(all.size() - 1);
  const std::size_t lo = static_cast<std::size_t>(rank);
  const double frac = rank - static_cast<double>(lo);
  out.hd95 = lo + 1 < all.size()
                 ? all[lo] + frac * (all[lo + 1] - all[lo])
                 : all[lo];
  return out;
}

VolumeMetrics evaluate_volume(std::span<const EnsembleMember> members,
                              const VolumeSample& sample, Int3 patch_shape,
                              Int3 stride) {
  if (!sample.label)
    throw std::invalid_argument("evaluate_volume: sample " + sample.id +
                                " has no ground truth");
  TensorF probs =
      sliding_window_infer(members, sample.intensity, patch_shape, stride);
  LabelVolume pred = argmax_volume(probs);

  VolumeMetrics m;
  m.id = sample.id;
  m.dice = dice_score(pred, *sample.label);
  m.jaccard = jaccard_score(pred, *sample.label);
  try {
    SurfaceDistances sd = surface_distances(pred, *sample.label);
    m.surface_valid = true;
    m.hd95 = sd.hd95;
    m.asd = sd.asd;
  } catch (const std::runtime_error&) {
    m.surface_valid = false;
  }
  return m;
}

}  // namespace rail
