#include "rail/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <map>
#include <stdexcept>

#include "rail/io.hpp"

static_assert(std::endian::native == std::endian::little,
              "checkpoint encoding assumes a little-endian host");

namespace rail {

namespace {

void put_u32(std::string& buf, std::uint32_t v) {
  buf.append(reinterpret_cast<const char*>(&v), sizeof(v));
}
void put_u64(std::string& buf, std::uint64_t v) {
  buf.append(reinterpret_cast<const char*>(&v), sizeof(v));
}

void put_section(std::string& buf, const std::string& name,
                 const std::string& payload) {
  put_u32(buf, static_cast<std::uint32_t>(name.size()));
  buf.append(name);
  put_u64(buf, payload.size());
  buf.append(payload);
}

std::string encode_params(const NetworkParams<float>& p) {
  std::string out;
  put_u32(out, static_cast<std::uint32_t>(p.entries.size()));
  for (const auto& [name, tensor] : p.entries) {
    put_u32(out, static_cast<std::uint32_t>(name.size()));
    out.append(name);
    out.push_back(static_cast<char>(tensor.rank()));
    for (int d : tensor.shape()) {
      const std::int32_t dd = d;
      out.append(reinterpret_cast<const char*>(&dd), sizeof(dd));
    }
    put_u64(out, static_cast<std::uint64_t>(tensor.size()));
    out.append(reinterpret_cast<const char*>(tensor.values().data()),
               sizeof(float) * static_cast<std::size_t>(tensor.size()));
  }
  return out;
}

struct Reader {
  const std::string& buf;
  std::size_t pos = 0;

  void need(std::size_t n) const {
    if (pos + n > buf.size())
      throw std::runtime_error("checkpoint: truncated file");
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v;
    std::memcpy(&v, buf.data() + pos, 4);
    pos += 4;
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v;
    std::memcpy(&v, buf.data() + pos, 8);
    pos += 8;
    return v;
  }
  std::string bytes(std::size_t n) {
    need(n);
    std::string s = buf.substr(pos, n);
    pos += n;
    return s;
  }
};

void decode_params_into(const std::string& payload, NetworkParams<float>& dst,
                        const std::string& section) {
  Reader r{payload};
  const std::uint32_t n = r.u32();
  if (n != dst.entries.size())
    throw std::runtime_error("checkpoint: section " + section + " holds " +
                             std::to_string(n) + " parameters, expected " +
                             std::to_string(dst.entries.size()) +
                             " for this configuration");
  for (std::uint32_t i = 0; i < n; ++i) {
    const std::uint32_t name_len = r.u32();
    const std::string name = r.bytes(name_len);
    auto& entry = dst.entries[i];
    if (entry.first != name)
      throw std::runtime_error("checkpoint: section " + section +
                               " parameter " + name + " does not match " +
                               entry.first);
    r.need(1);
    const int rank = static_cast<unsigned char>(payload[r.pos]);
    ++r.pos;
    Shape shape(static_cast<std::size_t>(rank));
    for (int d = 0; d < rank; ++d) {
      std::int32_t dd;
      r.need(4);
      std::memcpy(&dd, payload.data() + r.pos, 4);
      r.pos += 4;
      shape[static_cast<std::size_t>(d)] = dd;
    }
    if (shape != entry.second.shape())
      throw std::runtime_error("checkpoint: shape mismatch for parameter " +
                               name);
    const std::uint64_t count = r.u64();
    if (count != static_cast<std::uint64_t>(entry.second.size()))
      throw std::runtime_error("checkpoint: value count mismatch for " + name);
    r.need(sizeof(float) * count);
    std::memcpy(entry.second.values().data(), payload.data() + r.pos,
                sizeof(float) * count);
    r.pos += sizeof(float) * count;
  }
}

std::map<std::string, std::string> read_sections(
    const std::filesystem::path& path) {
  const std::string buf = read_text_file(path);
  if (buf.size() < 12 || std::memcmp(buf.data(), kCheckpointMagic, 8) != 0)
    throw std::runtime_error("checkpoint: bad magic in " + path.string());
  Reader r{buf};
  r.pos = 8;
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion)
    throw std::runtime_error("checkpoint: unsupported format version " +
                             std::to_string(version));
  std::map<std::string, std::string> sections;
  while (r.pos < buf.size()) {
    const std::uint32_t name_len = r.u32();
    const std::string name = r.bytes(name_len);
    const std::uint64_t payload_len = r.u64();
    sections[name] = r.bytes(payload_len);
  }
  return sections;
}

const std::string& section_of(const std::map<std::string, std::string>& s,
                              const std::string& name) {
  auto it = s.find(name);
  if (it == s.end())
    throw std::runtime_error("checkpoint: missing section " + name);
  return it->second;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path,
                     const TrainerState& state, const RunConfig& cfg) {
  std::string buf;
  buf.append(kCheckpointMagic, 8);
  put_u32(buf, kCheckpointVersion);

  std::string hash_payload;
  put_u64(hash_payload, cfg.hash());
  put_section(buf, "config_hash", hash_payload);
  put_section(buf, "config_text", cfg.canonical_text());

  std::string iter_payload;
  put_u64(iter_payload, static_cast<std::uint64_t>(state.t));
  put_section(buf, "iteration", iter_payload);
  put_section(buf, "rng", state.rng.serialize());

  for (const auto& slot : state.students) {
    put_section(buf, "student." + slot.id + ".params",
                encode_params(slot.params));
    put_section(buf, "student." + slot.id + ".momentum",
                encode_params(slot.momentum));
  }
  put_section(buf, "teacher.G1", encode_params(state.teachers[0]));
  put_section(buf, "teacher.G2", encode_params(state.teachers[1]));

  write_text_file(path, buf);
}

TrainerState load_checkpoint(const std::filesystem::path& path,
                             const RunConfig& cfg, bool allow_config_mismatch) {
  auto sections = read_sections(path);

  {
    Reader r{section_of(sections, "config_hash")};
    const std::uint64_t stored = r.u64();
    if (stored != cfg.hash() && !allow_config_mismatch)
      throw std::runtime_error(
          "checkpoint: config hash mismatch (stored " + std::to_string(stored) +
          ", current " + std::to_string(cfg.hash()) +
          "); pass --allow-config-mismatch to override");
  }

  TrainerState state = make_trainer(cfg.network_spec(), cfg.trainer_config(),
                                    /*seed=*/cfg.seed);
  {
    Reader r{section_of(sections, "iteration")};
    state.t = static_cast<int>(r.u64());
  }
  state.rng.deserialize(section_of(sections, "rng"));
  for (auto& slot : state.students) {
    decode_params_into(section_of(sections, "student." + slot.id + ".params"),
                       slot.params, "student." + slot.id + ".params");
    decode_params_into(
        section_of(sections, "student." + slot.id + ".momentum"), slot.momentum,
        "student." + slot.id + ".momentum");
  }
  decode_params_into(section_of(sections, "teacher.G1"), state.teachers[0],
                     "teacher.G1");
  decode_params_into(section_of(sections, "teacher.G2"), state.teachers[1],
                     "teacher.G2");
  return state;
}

RunConfig config_from_checkpoint(const std::filesystem::path& path) {
  auto sections = read_sections(path);
  return parse_config_text(section_of(sections, "config_text"));
}

std::uint64_t checkpoint_config_hash(const std::filesystem::path& path) {
  auto sections = read_sections(path);
  Reader r{section_of(sections, "config_hash")};
  return r.u64();
}

}  // namespace rail
