#include "rail/data.hpp"
#include <mutex>

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>
#include <thread>

namespace rail {

namespace {

constexpr double kTwoPi = 6.283185307179586476925286766559;

struct BiasField {
  double f[3], phase[3], amp[3];
  double strength;

  double at(int x, int y, int z, Int3 shape) const {
    const double c0 =
        amp[0] * std::cos(kTwoPi * f[0] * x / shape[0] + phase[0]);
    const double c1 =
        amp[1] * std::cos(kTwoPi * f[1] * y / shape[1] + phase[1]);
    const double c2 =
        amp[2] * std::cos(kTwoPi * f[2] * z / shape[2] + phase[2]);
    return strength * (c0 + c1 + c2) / 3.0;
  }
};

std::vector<Ellipsoid> draw_objects(const PhantomConfig& cfg, Rng& rng) {
  const int n = cfg.n_objects_min +
                static_cast<int>(rng.uniform_int(
                    static_cast<std::uint64_t>(cfg.n_objects_max -
                                               cfg.n_objects_min + 1)));
  std::vector<Ellipsoid> objs(static_cast<std::size_t>(n));
  for (auto& o : objs) {
    double radius[3];
    for (int a = 0; a < 3; ++a) {
      const double cap = std::max(3.0, cfg.volume_shape[a] * 0.24);
      radius[a] = rng.uniform(2.5, cap);
    }
    o.rx = radius[0];
    o.ry = radius[1];
    o.rz = radius[2];
    o.cx = rng.uniform(o.rx, cfg.volume_shape[0] - 1 - o.rx);
    o.cy = rng.uniform(o.ry, cfg.volume_shape[1] - 1 - o.ry);
    o.cz = rng.uniform(o.rz, cfg.volume_shape[2] - 1 - o.rz);
    o.contrast = rng.uniform(0.55, 1.0);
  }
  return objs;
}

std::string sample_dir_name(const char* prefix, int i) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "%s%03d", prefix, i);
  return buf;
}

struct Meta {
  std::string id, split;
  Int3 shape;
  bool has_label = false;
};

std::string meta_text(const Meta& m) {
  std::ostringstream os;
  os << "id " << m.id << "\n";
  os << "split " << m.split << "\n";
  os << "shape " << m.shape[0] << " " << m.shape[1] << " " << m.shape[2]
     << "\n";
  os << "intensity f32\n";
  os << "label " << (m.has_label ? "u8" : "none") << "\n";
  return os.str();
}

Meta parse_meta(const std::filesystem::path& path) {
  Meta m;
  std::istringstream is(read_text_file(path));
  std::string key;
  while (is >> key) {
    if (key == "id")
      is >> m.id;
    else if (key == "split")
      is >> m.split;
    else if (key == "shape")
      is >> m.shape[0] >> m.shape[1] >> m.shape[2];
    else if (key == "intensity") {
      std::string tag;
      is >> tag;
      if (tag != "f32")
        throw std::runtime_error("unsupported intensity element type " + tag);
    } else if (key == "label") {
      std::string tag;
      is >> tag;
      m.has_label = tag == "u8";
    } else {
      throw std::runtime_error("unknown meta key " + key + " in " +
                               path.string());
    }
  }
  return m;
}

void write_sample(const std::filesystem::path& dir, const Meta& meta,
                  const GeneratedSample& g, bool sealed_label) {
  std::filesystem::create_directories(dir);
  write_text_file(dir / "meta", meta_text(meta));
  write_raw_f32(dir / "intensity.raw", g.intensity);
  if (meta.has_label)
    write_raw_u8(dir / "label.raw", g.label);
  else if (sealed_label)
    write_raw_u8(dir / "label.sealed.raw", g.label);
}

}  // namespace

GeneratedSample generate_sample(const PhantomConfig& cfg,
                                std::uint64_t sample_seed) {
  if (cfg.n_objects_min < 1 || cfg.n_objects_max < cfg.n_objects_min)
    throw std::invalid_argument("PhantomConfig: bad object count range");
  Rng rng(sample_seed);
  const Int3 s = cfg.volume_shape;
  const std::int64_t total =
      static_cast<std::int64_t>(s[0]) * s[1] * s[2];

  GeneratedSample out;
  out.label.shape = s;
  out.label.vals.assign(static_cast<std::size_t>(total), 0);

  bool ok = false;
  for (int attempt = 0; attempt < 100 && !ok; ++attempt) {
    out.objects = draw_objects(cfg, rng);
    std::int64_t fg = 0;
    for (int x = 0; x < s[0]; ++x)
      for (int y = 0; y < s[1]; ++y)
        for (int z = 0; z < s[2]; ++z) {
          std::uint8_t v = 0;
          for (const auto& o : out.objects)
            if (o.contains(x, y, z)) {
              v = 1;
              break;
            }
          out.label.at(x, y, z) = v;
          fg += v;
        }
    const double frac = static_cast<double>(fg) / static_cast<double>(total);
    ok = frac >= kMinForegroundFrac && frac <= kMaxForegroundFrac;
  }
  if (!ok)
    throw std::runtime_error(
        "generate_sample: foreground fraction constraint not satisfied after "
        "100 attempts");

  BiasField bias;
  for (int a = 0; a < 3; ++a) {
    bias.f[a] = rng.uniform(0.5, 1.5);
    bias.phase[a] = rng.uniform(0.0, kTwoPi);
    bias.amp[a] = rng.uniform(-1.0, 1.0);
  }
  bias.strength = cfg.bias_strength;

  out.intensity.shape = s;
  out.intensity.vals.resize(static_cast<std::size_t>(total));
  for (int x = 0; x < s[0]; ++x)
    for (int y = 0; y < s[1]; ++y)
      for (int z = 0; z < s[2]; ++z) {
        double v = 0;
        for (const auto& o : out.objects) {
          const double dx = (x - o.cx) / o.rx;
          const double dy = (y - o.cy) / o.ry;
          const double dz = (z - o.cz) / o.rz;
          const double rho2 = dx * dx + dy * dy + dz * dz;
          if (rho2 < 1.0) v += o.contrast * (1.0 - rho2);
        }
        v += bias.at(x, y, z, s);
        v += cfg.noise_sigma * rng.normal();
        out.intensity.at(x, y, z) = static_cast<float>(v);
      }
  return out;
}

void generate_dataset(const PhantomConfig& cfg, const DatasetCounts& counts,
                      const std::filesystem::path& out_dir, int workers) {
  if (counts.n_labeled < 0 || counts.n_unlabeled < 0 || counts.n_test < 0)
    throw std::invalid_argument("generate_dataset: negative split count");
  std::filesystem::create_directories(out_dir);

  struct Job {
    std::string id;
    std::string split;
    bool labeled_file;
    std::uint64_t seed;
  };
  std::vector<Job> jobs;
  int index = 0;
  for (int i = 0; i < counts.n_labeled; ++i, ++index)
    jobs.push_back({sample_dir_name("L", i), "labeled", true,
                    seed_mix(cfg.seed, static_cast<std::uint64_t>(index))});
  for (int i = 0; i < counts.n_unlabeled; ++i, ++index)
    jobs.push_back({sample_dir_name("U", i), "unlabeled", false,
                    seed_mix(cfg.seed, static_cast<std::uint64_t>(index))});
  for (int i = 0; i < counts.n_test; ++i, ++index)
    jobs.push_back({sample_dir_name("T", i), "test", true,
                    seed_mix(cfg.seed, static_cast<std::uint64_t>(index))});

  auto run_job = [&](const Job& j) {
    GeneratedSample g = generate_sample(cfg, j.seed);
    Meta meta{j.id, j.split, cfg.volume_shape, j.labeled_file};
    write_sample(out_dir / j.id, meta, g, !j.labeled_file);
  };

  workers = std::max(1, workers);
  if (workers == 1) {
    for (const auto& j : jobs) run_job(j);
  } else {
    std::vector<std::thread> pool;
    std::size_t next = 0;
    std::mutex m;
    for (int w = 0; w < workers; ++w)
      pool.emplace_back([&] {
        for (;;) {
          std::size_t mine;
          {
            std::lock_guard<std::mutex> lk(m);
            if (next >= jobs.size()) return;
            mine = next++;
          }
          run_job(jobs[mine]);
        }
      });
    for (auto& t : pool) t.join();
  }

  std::ostringstream manifest;
  for (const auto& j : jobs) manifest << j.split << " " << j.id << "\n";
  write_text_file(out_dir / "manifest", manifest.str());
}

Volume normalize(const Volume& v) {
  const std::int64_t n = v.numel();
  if (n == 0) throw std::invalid_argument("normalize: empty volume");
  double mean = 0;
  for (float x : v.vals) mean += x;
  mean /= static_cast<double>(n);
  double var = 0;
  for (float x : v.vals) {
    const double d = x - mean;
    var += d * d;
  }
  var /= static_cast<double>(n);
  if (var < 1e-12)
    throw std::invalid_argument("normalize: constant volume has no scale");
  const double inv = 1.0 / std::sqrt(var);
  Volume out;
  out.shape = v.shape;
  out.vals.resize(v.vals.size());
  for (std::size_t i = 0; i < v.vals.size(); ++i)
    out.vals[i] = static_cast<float>((v.vals[i] - mean) * inv);
  return out;
}

Patch random_crop(const VolumeSample& v, Int3 patch_shape, Rng& rng) {
  for (int a = 0; a < 3; ++a)
    if (patch_shape[a] <= 0 || patch_shape[a] > v.intensity.shape[a])
      throw std::invalid_argument(
          "random_crop: patch extent " + std::to_string(patch_shape[a]) +
          " exceeds volume extent " + std::to_string(v.intensity.shape[a]));
  int off[3];
  for (int a = 0; a < 3; ++a)
    off[a] = static_cast<int>(rng.uniform_int(
        static_cast<std::uint64_t>(v.intensity.shape[a] - patch_shape[a] + 1)));

  Patch p;
  p.shape = patch_shape;
  p.source_id = v.id;
  p.intensity.resize(static_cast<std::size_t>(patch_shape[0]) *
                     patch_shape[1] * patch_shape[2]);
  std::size_t i = 0;
  for (int x = 0; x < patch_shape[0]; ++x)
    for (int y = 0; y < patch_shape[1]; ++y)
      for (int z = 0; z < patch_shape[2]; ++z)
        p.intensity[i++] = v.intensity.at(off[0] + x, off[1] + y, off[2] + z);
  if (v.label) {
    std::vector<std::uint8_t> lab(p.intensity.size());
    i = 0;
    for (int x = 0; x < patch_shape[0]; ++x)
      for (int y = 0; y < patch_shape[1]; ++y)
        for (int z = 0; z < patch_shape[2]; ++z)
          lab[i++] = v.label->at(off[0] + x, off[1] + y, off[2] + z);
    p.label = std::move(lab);
  }
  return p;
}

Dataset Dataset::load(const std::filesystem::path& dir) {
  Dataset ds;
  std::istringstream manifest(read_text_file(dir / "manifest"));
  std::string split, id;
  while (manifest >> split >> id) {
    const auto sdir = dir / id;
    Meta meta = parse_meta(sdir / "meta");
    if (meta.id != id)
      throw std::runtime_error("manifest id " + id + " does not match meta id " +
                               meta.id);
    VolumeSample s;
    s.id = id;
    s.intensity = normalize(read_raw_f32(sdir / "intensity.raw", meta.shape));
    if (split == "labeled" || split == "test") {
      if (!meta.has_label)
        throw std::runtime_error("sample " + id + " in split " + split +
                                 " has no label");
      s.label = read_raw_u8(sdir / "label.raw", meta.shape);
    }
    if (split == "labeled")
      ds.labeled.push_back(std::move(s));
    else if (split == "unlabeled")
      ds.unlabeled.push_back(std::move(s));
    else if (split == "test")
      ds.test.push_back(std::move(s));
    else
      throw std::runtime_error("unknown split " + split + " in manifest");
  }
  return ds;
}

SampleBatch sample_batch(const Dataset& ds, Int3 patch_shape, Rng& rng) {
  if (ds.labeled.empty() || ds.unlabeled.empty())
    throw std::runtime_error(
        "sample_batch: needs at least one labeled and one unlabeled sample");
  SampleBatch b;
  const auto& lv =
      ds.labeled[rng.uniform_int(ds.labeled.size())];
  b.labeled = random_crop(lv, patch_shape, rng);
  const auto& uv =
      ds.unlabeled[rng.uniform_int(ds.unlabeled.size())];
  b.unlabeled = random_crop(uv, patch_shape, rng);
  return b;
}

TensorF patch_to_tensor(const Patch& p) {
  Shape shape = {1, 1, p.shape[0], p.shape[1], p.shape[2]};
  return TensorF::from(std::move(shape), p.intensity);
}

LabelMap patch_label_map(const Patch& p) {
  if (!p.label)
    throw std::runtime_error("patch_label_map: patch carries no label");
  LabelMap m;
  m.shape = {1, p.shape[0], p.shape[1], p.shape[2]};
  m.labels = *p.label;
  return m;
}

}  // namespace rail
