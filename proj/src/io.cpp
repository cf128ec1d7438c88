#include "rail/io.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <stdexcept>

static_assert(std::endian::native == std::endian::little,
              "raw volume encoding assumes a little-endian host");

namespace rail {

namespace {

std::vector<char> read_all(const std::filesystem::path& path,
                           std::size_t expect) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path.string());
  std::vector<char> buf(expect);
  f.read(buf.data(), static_cast<std::streamsize>(expect));
  if (static_cast<std::size_t>(f.gcount()) != expect)
    throw std::runtime_error("short read from " + path.string() +
                             " (expected " + std::to_string(expect) +
                             " bytes)");
  return buf;
}

void write_all(const std::filesystem::path& path, const char* data,
               std::size_t n) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot open " + path.string() + " for write");
  f.write(data, static_cast<std::streamsize>(n));
  if (!f) throw std::runtime_error("short write to " + path.string());
}

// file order: x fastest, index = x + W*(y + H*z)
template <typename T, typename Vol>
std::vector<T> to_file_order(const Vol& v) {
  const int W = v.shape[0], H = v.shape[1], D = v.shape[2];
  std::vector<T> out(static_cast<std::size_t>(v.numel()));
  for (int z = 0; z < D; ++z)
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x)
        out[static_cast<std::size_t>(x) +
            static_cast<std::size_t>(W) * (y + static_cast<std::size_t>(H) * z)] =
            v.at(x, y, z);
  return out;
}

template <typename T, typename Vol>
Vol from_file_order(const std::vector<T>& in, Int3 shape) {
  Vol v;
  v.shape = shape;
  v.vals.resize(static_cast<std::size_t>(v.numel()));
  const int W = shape[0], H = shape[1], D = shape[2];
  for (int z = 0; z < D; ++z)
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x)
        v.at(x, y, z) =
            in[static_cast<std::size_t>(x) +
               static_cast<std::size_t>(W) * (y + static_cast<std::size_t>(H) * z)];
  return v;
}

}  // namespace

void write_raw_f32(const std::filesystem::path& path, const Volume& v) {
  auto data = to_file_order<float>(v);
  write_all(path, reinterpret_cast<const char*>(data.data()),
            data.size() * sizeof(float));
}

Volume read_raw_f32(const std::filesystem::path& path, Int3 shape) {
  const std::size_t n = static_cast<std::size_t>(shape[0]) * shape[1] * shape[2];
  auto buf = read_all(path, n * sizeof(float));
  std::vector<float> data(n);
  std::memcpy(data.data(), buf.data(), buf.size());
  return from_file_order<float, Volume>(data, shape);
}

void write_raw_u8(const std::filesystem::path& path, const LabelVolume& v) {
  auto data = to_file_order<std::uint8_t>(v);
  write_all(path, reinterpret_cast<const char*>(data.data()), data.size());
}

LabelVolume read_raw_u8(const std::filesystem::path& path, Int3 shape) {
  const std::size_t n = static_cast<std::size_t>(shape[0]) * shape[1] * shape[2];
  auto buf = read_all(path, n);
  std::vector<std::uint8_t> data(n);
  std::memcpy(data.data(), buf.data(), buf.size());
  return from_file_order<std::uint8_t, LabelVolume>(data, shape);
}

void write_pgm_slices(const std::filesystem::path& dir, const Volume& v) {
  std::filesystem::create_directories(dir);
  const int W = v.shape[0], H = v.shape[1], D = v.shape[2];
  for (int z = 0; z < D; ++z) {
    char name[32];
    std::snprintf(name, sizeof(name), "slice_%03d.pgm", z);
    std::string header = "P5\n" + std::to_string(W) + " " + std::to_string(H) +
                         "\n255\n";
    std::vector<char> payload(header.begin(), header.end());
    payload.reserve(payload.size() + static_cast<std::size_t>(W) * H);
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        const float p = std::clamp(v.at(x, y, z), 0.0f, 1.0f);
        payload.push_back(static_cast<char>(
            static_cast<unsigned char>(std::lround(p * 255.0f))));
      }
    write_all(dir / name, payload.data(), payload.size());
  }
}

void write_mask_slices(const std::filesystem::path& dir,
                       const BinaryMask3D& mask) {
  if (mask.shape.size() != 3 && mask.shape.size() != 4)
    throw std::invalid_argument("write_mask_slices: expected [W,H,D] or [B,W,H,D]");
  const std::size_t spatial_from = mask.shape.size() == 4 ? 1 : 0;
  Volume v;
  v.shape = {mask.shape[spatial_from], mask.shape[spatial_from + 1],
             mask.shape[spatial_from + 2]};
  v.vals.resize(static_cast<std::size_t>(v.numel()));
  for (std::size_t i = 0; i < v.vals.size(); ++i)
    v.vals[i] = mask.values[i] ? 1.0f : 0.0f;
  write_pgm_slices(dir, v);
}

std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path.string());
  return std::string(std::istreambuf_iterator<char>(f),
                     std::istreambuf_iterator<char>());
}

void write_text_file(const std::filesystem::path& path, const std::string& s) {
  write_all(path, s.data(), s.size());
}

}  // namespace rail
