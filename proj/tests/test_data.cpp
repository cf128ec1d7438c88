#include <cstring>
#include <filesystem>
#include <map>
#include <set>

#include "doctest.h"
#include "rail/data.hpp"

using namespace rail;
namespace fs = std::filesystem;

namespace {

PhantomConfig small_cfg() {
  PhantomConfig cfg;
  cfg.volume_shape = {24, 24, 16};
  cfg.seed = 7;
  return cfg;
}

fs::path temp_dir(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("rail_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::vector<char> slurp(const fs::path& p) {
  auto s = read_text_file(p);
  return {s.begin(), s.end()};
}

}  // namespace

TEST_CASE("generate_sample is deterministic and oracle-checked") {
  PhantomConfig cfg = small_cfg();
  GeneratedSample a = generate_sample(cfg, 101);
  GeneratedSample b = generate_sample(cfg, 101);
  CHECK(a.intensity.vals == b.intensity.vals);
  CHECK(a.label.vals == b.label.vals);

  GeneratedSample c = generate_sample(cfg, 102);
  CHECK(a.intensity.vals != c.intensity.vals);

  // voxelization equals the brute-force point-in-ellipsoid test
  for (int x = 0; x < cfg.volume_shape[0]; ++x)
    for (int y = 0; y < cfg.volume_shape[1]; ++y)
      for (int z = 0; z < cfg.volume_shape[2]; ++z) {
        bool inside = false;
        for (const auto& o : a.objects) inside |= o.contains(x, y, z);
        CHECK(a.label.at(x, y, z) == (inside ? 1 : 0));
      }

  // foreground fraction within configured bounds across seeds
  for (std::uint64_t seed = 0; seed < 8; ++seed) {
    GeneratedSample g = generate_sample(cfg, seed);
    double fg = 0;
    for (auto v : g.label.vals) fg += v;
    const double frac = fg / static_cast<double>(g.label.numel());
    CHECK(frac >= kMinForegroundFrac);
    CHECK(frac <= kMaxForegroundFrac);
  }
}

TEST_CASE("generate_dataset writes a deterministic directory tree") {
  PhantomConfig cfg = small_cfg();
  DatasetCounts counts{2, 3, 1};
  fs::path d1 = temp_dir("gen1");
  fs::path d2 = temp_dir("gen2");
  generate_dataset(cfg, counts, d1, 1);
  generate_dataset(cfg, counts, d2, 2);  // worker count must not matter

  std::set<std::string> rel1;
  for (auto& e : fs::recursive_directory_iterator(d1))
    if (e.is_regular_file()) rel1.insert(fs::relative(e.path(), d1).string());
  std::set<std::string> rel2;
  for (auto& e : fs::recursive_directory_iterator(d2))
    if (e.is_regular_file()) rel2.insert(fs::relative(e.path(), d2).string());
  REQUIRE(rel1 == rel2);
  for (const auto& rel : rel1) CHECK(slurp(d1 / rel) == slurp(d2 / rel));

  // labels stay out of the unlabeled split proper
  CHECK(fs::exists(d1 / "L000" / "label.raw"));
  CHECK(fs::exists(d1 / "T000" / "label.raw"));
  CHECK_FALSE(fs::exists(d1 / "U000" / "label.raw"));
  CHECK(fs::exists(d1 / "U000" / "label.sealed.raw"));

  Dataset ds = Dataset::load(d1);
  CHECK(ds.labeled.size() == 2);
  CHECK(ds.unlabeled.size() == 3);
  CHECK(ds.test.size() == 1);
  CHECK(ds.labeled[0].label.has_value());
  CHECK(ds.test[0].label.has_value());
  CHECK_FALSE(ds.unlabeled[0].label.has_value());

  fs::remove_all(d1);
  fs::remove_all(d2);
}

TEST_CASE("raw volume round-trip keeps the x-fastest file order") {
  Volume v;
  v.shape = {3, 2, 2};
  v.vals.resize(12);
  for (int x = 0; x < 3; ++x)
    for (int y = 0; y < 2; ++y)
      for (int z = 0; z < 2; ++z) v.at(x, y, z) = static_cast<float>(x + 10 * y + 100 * z);
  fs::path dir = temp_dir("raw");
  write_raw_f32(dir / "v.raw", v);
  auto bytes = slurp(dir / "v.raw");
  REQUIRE(bytes.size() == 12 * sizeof(float));
  const float* f = reinterpret_cast<const float*>(bytes.data());
  // file index = x + W*(y + H*z)
  CHECK(f[0] == 0.0f);   // (0,0,0)
  CHECK(f[1] == 1.0f);   // (1,0,0)
  CHECK(f[3] == 10.0f);  // (0,1,0)
  CHECK(f[6] == 100.0f); // (0,0,1)
  Volume back = read_raw_f32(dir / "v.raw", v.shape);
  CHECK(back.vals == v.vals);
  fs::remove_all(dir);
}

TEST_CASE("normalize") {
  GeneratedSample g = generate_sample(small_cfg(), 5);
  Volume n = normalize(g.intensity);
  double mean = 0, var = 0;
  for (float v : n.vals) mean += v;
  mean /= static_cast<double>(n.numel());
  for (float v : n.vals) var += (v - mean) * (v - mean);
  var /= static_cast<double>(n.numel());
  CHECK(std::abs(mean) < 1e-5);
  CHECK(std::abs(var - 1.0) < 1e-4);

  // affine invariance
  Volume scaled = g.intensity;
  for (auto& v : scaled.vals) v = 3.5f * v + 11.0f;
  Volume n2 = normalize(scaled);
  for (std::size_t i = 0; i < n.vals.size(); ++i)
    CHECK(n2.vals[i] == doctest::Approx(n.vals[i]).epsilon(2e-4));

  Volume two;
  two.shape = {2, 1, 1};
  two.vals = {1.0f, 3.0f};
  Volume nt = normalize(two);
  CHECK(nt.vals[0] == doctest::Approx(-1.0).epsilon(1e-6));
  CHECK(nt.vals[1] == doctest::Approx(1.0).epsilon(1e-6));

  Volume flat;
  flat.shape = {2, 2, 1};
  flat.vals = {2, 2, 2, 2};
  CHECK_THROWS_AS(normalize(flat), std::invalid_argument);
}

TEST_CASE("random_crop") {
  // injective intensity so the offset can be recovered from the corner
  VolumeSample s;
  s.id = "probe";
  s.intensity.shape = {6, 5, 4};
  s.intensity.vals.resize(120);
  LabelVolume lab;
  lab.shape = s.intensity.shape;
  lab.vals.resize(120);
  for (int x = 0; x < 6; ++x)
    for (int y = 0; y < 5; ++y)
      for (int z = 0; z < 4; ++z) {
        s.intensity.at(x, y, z) = static_cast<float>(x + 10 * y + 100 * z);
        lab.at(x, y, z) = static_cast<std::uint8_t>((x + y + z) % 2);
      }
  s.label = lab;

  Rng rng(3);
  SUBCASE("identity crop") {
    Patch p = random_crop(s, {6, 5, 4}, rng);
    CHECK(p.intensity.size() == 120);
    CHECK(std::memcmp(p.intensity.data(), s.intensity.vals.data(),
                      sizeof(float) * 120) == 0);
    CHECK(*p.label == lab.vals);
  }
  SUBCASE("index oracle") {
    for (int rep = 0; rep < 20; ++rep) {
      Patch p = random_crop(s, {3, 2, 2}, rng);
      const int corner = static_cast<int>(p.intensity[0]);
      const int ox = corner % 10, oy = (corner / 10) % 10, oz = corner / 100;
      std::size_t i = 0;
      for (int x = 0; x < 3; ++x)
        for (int y = 0; y < 2; ++y)
          for (int z = 0; z < 2; ++z, ++i) {
            CHECK(p.intensity[i] == s.intensity.at(ox + x, oy + y, oz + z));
            CHECK((*p.label)[i] == s.label->at(ox + x, oy + y, oz + z));
          }
    }
  }
  SUBCASE("offsets cover the whole valid range") {
    // 4 valid x offsets with patch extent 3 over volume extent 6
    std::set<int> seen;
    for (int rep = 0; rep < 10000 && seen.size() < 4; ++rep) {
      Patch p = random_crop(s, {3, 5, 4}, rng);
      seen.insert(static_cast<int>(p.intensity[0]) % 10);
    }
    CHECK(seen == std::set<int>{0, 1, 2, 3});
  }
  SUBCASE("oversized patch") {
    CHECK_THROWS_AS(random_crop(s, {7, 5, 4}, rng), std::invalid_argument);
  }
}

TEST_CASE("sample_batch contract and uniformity") {
  PhantomConfig cfg = small_cfg();
  DatasetCounts counts{4, 3, 0};
  fs::path dir = temp_dir("batch");
  generate_dataset(cfg, counts, dir, 1);
  Dataset ds = Dataset::load(dir);

  Rng rng(9);
  std::map<std::string, int> freq;
  const int draws = 5000;
  for (int i = 0; i < draws; ++i) {
    SampleBatch b = sample_batch(ds, {8, 8, 8}, rng);
    CHECK(b.labeled.label.has_value());
    CHECK_FALSE(b.unlabeled.label.has_value());
    freq[b.labeled.source_id]++;
  }
  REQUIRE(freq.size() == 4);
  double chi2 = 0;
  const double expect = draws / 4.0;
  for (auto& [id, n] : freq) chi2 += (n - expect) * (n - expect) / expect;
  CHECK(chi2 < 16.27);  // chi-square critical value, 3 dof, p = 0.001

  // with a single labeled volume every batch draws from it
  Dataset one;
  one.labeled.push_back(ds.labeled[0]);
  one.unlabeled = ds.unlabeled;
  for (int i = 0; i < 10; ++i)
    CHECK(sample_batch(one, {8, 8, 8}, rng).labeled.source_id ==
          ds.labeled[0].id);

  Dataset empty;
  empty.labeled = one.labeled;
  CHECK_THROWS_AS(sample_batch(empty, {8, 8, 8}, rng), std::runtime_error);
  fs::remove_all(dir);
}
