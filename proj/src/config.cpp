#include "rail/config.hpp"

#include <cstdio>
#include <functional>
#include <map>
#include <sstream>
#include <stdexcept>

#include "rail/io.hpp"

namespace rail {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

long long parse_int(const std::string& key, const std::string& v) {
  std::size_t pos = 0;
  long long out;
  try {
    out = std::stoll(v, &pos);
  } catch (const std::exception&) {
    throw std::invalid_argument("config: key " + key + ": not an integer: " + v);
  }
  if (pos != v.size())
    throw std::invalid_argument("config: key " + key + ": trailing characters in " + v);
  return out;
}

double parse_real(const std::string& key, const std::string& v) {
  std::size_t pos = 0;
  double out;
  try {
    out = std::stod(v, &pos);
  } catch (const std::exception&) {
    throw std::invalid_argument("config: key " + key + ": not a number: " + v);
  }
  if (pos != v.size())
    throw std::invalid_argument("config: key " + key + ": trailing characters in " + v);
  return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true") return true;
  if (v == "false") return false;
  throw std::invalid_argument("config: key " + key + ": expected true or false, got " + v);
}

Int3 parse_triple(const std::string& key, const std::string& v) {
  std::istringstream is(v);
  Int3 out;
  if (!(is >> out[0] >> out[1] >> out[2]))
    throw std::invalid_argument("config: key " + key + ": expected three integers, got " + v);
  std::string rest;
  if (is >> rest)
    throw std::invalid_argument("config: key " + key + ": trailing characters in " + v);
  return out;
}

std::string fmt_real(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::string fmt_triple(Int3 v) {
  return std::to_string(v[0]) + " " + std::to_string(v[1]) + " " +
         std::to_string(v[2]);
}

using Setter = std::function<void(RunConfig&, const std::string&, const std::string&)>;
using Getter = std::function<std::string(const RunConfig&)>;

struct Field {
  const char* key;
  Setter set;
  Getter get;
};

const std::vector<Field>& schema() {
  auto I = [](int RunConfig::*m) {
    return Field{nullptr,
                 [m](RunConfig& c, const std::string& k, const std::string& v) {
                   c.*m = static_cast<int>(parse_int(k, v));
                 },
                 [m](const RunConfig& c) { return std::to_string(c.*m); }};
  };
  auto R = [](double RunConfig::*m) {
    return Field{nullptr,
                 [m](RunConfig& c, const std::string& k, const std::string& v) {
                   c.*m = parse_real(k, v);
                 },
                 [m](const RunConfig& c) { return fmt_real(c.*m); }};
  };
  auto B = [](bool RunConfig::*m) {
    return Field{nullptr,
                 [m](RunConfig& c, const std::string& k, const std::string& v) {
                   c.*m = parse_bool(k, v);
                 },
                 [m](const RunConfig& c) { return (c.*m) ? "true" : "false"; }};
  };
  auto T = [](Int3 RunConfig::*m) {
    return Field{nullptr,
                 [m](RunConfig& c, const std::string& k, const std::string& v) {
                   c.*m = parse_triple(k, v);
                 },
                 [m](const RunConfig& c) { return fmt_triple(c.*m); }};
  };
  static const std::vector<Field> fields = [&] {
    std::vector<Field> f;
    auto add = [&f](const char* key, Field field) {
      field.key = key;
      f.push_back(std::move(field));
    };
    add("seed", Field{nullptr,
                      [](RunConfig& c, const std::string& k, const std::string& v) {
                        c.seed = static_cast<std::uint64_t>(parse_int(k, v));
                      },
                      [](const RunConfig& c) { return std::to_string(c.seed); }});
    add("threads", I(&RunConfig::threads));
    add("data.volume_shape", T(&RunConfig::volume_shape));
    add("data.n_labeled", I(&RunConfig::n_labeled));
    add("data.n_unlabeled", I(&RunConfig::n_unlabeled));
    add("data.n_test", I(&RunConfig::n_test));
    add("phantom.n_objects_min", I(&RunConfig::n_objects_min));
    add("phantom.n_objects_max", I(&RunConfig::n_objects_max));
    add("phantom.noise_sigma", R(&RunConfig::noise_sigma));
    add("phantom.bias_strength", R(&RunConfig::bias_strength));
    add("network.base_channels", I(&RunConfig::base_channels));
    add("network.depth", I(&RunConfig::depth));
    add("network.num_classes", I(&RunConfig::num_classes));
    add("train.patch_shape", T(&RunConfig::patch_shape));
    add("train.t_max", I(&RunConfig::t_max));
    add("train.first_term_horizon", I(&RunConfig::first_term_horizon));
    add("train.group_period", I(&RunConfig::group_period));
    add("train.ema_alpha", R(&RunConfig::ema_alpha));
    add("train.lr_base", R(&RunConfig::lr_base));
    add("train.lr_min", R(&RunConfig::lr_min));
    add("train.momentum", R(&RunConfig::momentum));
    add("train.weight_decay", R(&RunConfig::weight_decay));
    add("train.checkpoint_interval", I(&RunConfig::checkpoint_interval));
    add("train.mode",
        Field{nullptr,
              [](RunConfig& c, const std::string&, const std::string& v) {
                c.mode = v;
              },
              [](const RunConfig& c) { return c.mode; }});
    add("loss.beta", R(&RunConfig::beta));
    add("loss.gamma", R(&RunConfig::gamma));
    add("loss.mu", R(&RunConfig::mu));
    add("loss.lambda1_hat", R(&RunConfig::lambda1_hat));
    add("loss.lambda2_hat", R(&RunConfig::lambda2_hat));
    add("ablate.enable_kl_dfs", B(&RunConfig::enable_kl_dfs));
    add("ablate.enable_mis_mask", B(&RunConfig::enable_mis_mask));
    add("ablate.enable_div_mask", B(&RunConfig::enable_div_mask));
    add("eval.stride", T(&RunConfig::eval_stride));
    return f;
  }();
  return fields;
}

}  // namespace

NetworkSpec RunConfig::network_spec(NetVariant variant) const {
  NetworkSpec s;
  s.variant = variant;
  s.in_channels = 1;
  s.num_classes = num_classes;
  s.base_channels = base_channels;
  s.depth = depth;
  s.patch_shape = patch_shape;
  return s;
}

TrainerConfig RunConfig::trainer_config() const {
  TrainerConfig c;
  c.weights.beta = beta;
  c.weights.gamma = gamma;
  c.weights.mu = mu;
  c.weights.lambda1_hat = lambda1_hat;
  c.weights.lambda2_hat = lambda2_hat;
  c.weights.t_max = t_max;
  c.ema_alpha = ema_alpha;
  c.first_term_horizon = resolved_first_term();
  c.group_period = group_period;
  c.lr_base = lr_base;
  c.lr_min = lr_min;
  c.momentum = momentum;
  c.weight_decay = weight_decay;
  c.enable_kl_dfs = enable_kl_dfs;
  c.enable_mis_mask = enable_mis_mask;
  c.enable_div_mask = enable_div_mask;
  c.num_classes = num_classes;
  return c;
}

PhantomConfig RunConfig::phantom_config() const {
  PhantomConfig p;
  p.volume_shape = volume_shape;
  p.n_objects_min = n_objects_min;
  p.n_objects_max = n_objects_max;
  p.noise_sigma = noise_sigma;
  p.bias_strength = bias_strength;
  p.seed = seed;
  return p;
}

DatasetCounts RunConfig::dataset_counts() const {
  return DatasetCounts{n_labeled, n_unlabeled, n_test};
}

std::string RunConfig::canonical_text() const {
  std::ostringstream os;
  for (const auto& f : schema()) os << f.key << " = " << f.get(*this) << "\n";
  return os.str();
}

std::uint64_t RunConfig::hash() const {
  const std::string text = canonical_text();
  std::uint64_t h = 14695981039346656037ull;
  for (unsigned char c : text) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

RunConfig parse_config_text(const std::string& text) {
  RunConfig cfg;
  std::istringstream is(text);
  std::string line;
  int line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    const auto hash_pos = line.find('#');
    if (hash_pos != std::string::npos) line = line.substr(0, hash_pos);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument("config line " + std::to_string(line_no) +
                                  ": expected key = value, got: " + line);
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    bool found = false;
    for (const auto& f : schema())
      if (key == f.key) {
        f.set(cfg, key, value);
        found = true;
        break;
      }
    if (!found)
      throw std::invalid_argument("config line " + std::to_string(line_no) +
                                  ": unknown key " + key);
  }
  return cfg;
}

RunConfig load_config(const std::filesystem::path& path) {
  return parse_config_text(read_text_file(path));
}

void validate_config(const RunConfig& cfg) {
  auto fail = [](const std::string& msg) {
    throw std::invalid_argument("config: " + msg);
  };
  if (cfg.t_max < 2) fail("train.t_max must be >= 2, got " + std::to_string(cfg.t_max));
  for (double w : {cfg.beta, cfg.gamma, cfg.mu, cfg.lambda1_hat, cfg.lambda2_hat})
    if (w < 0) fail("loss weights must be non-negative");
  if (cfg.num_classes != 2)
    fail("network.num_classes must be 2 (binary segmentation)");
  if (cfg.depth < 2 || cfg.depth > 5) fail("network.depth must be in [2,5]");
  if (cfg.base_channels < 1) fail("network.base_channels must be >= 1");
  const int div = 1 << (cfg.depth - 1);
  for (int a = 0; a < 3; ++a) {
    if (cfg.patch_shape[a] <= 0 || cfg.patch_shape[a] % div != 0)
      fail("train.patch_shape extent " + std::to_string(cfg.patch_shape[a]) +
           " must be a positive multiple of " + std::to_string(div) +
           " (2^(depth-1) with depth " + std::to_string(cfg.depth) + ")");
    if (cfg.patch_shape[a] > cfg.volume_shape[a])
      fail("train.patch_shape extent " + std::to_string(cfg.patch_shape[a]) +
           " exceeds data.volume_shape extent " +
           std::to_string(cfg.volume_shape[a]));
  }
  const Int3 stride = cfg.resolved_stride();
  for (int a = 0; a < 3; ++a)
    if (stride[a] < 1 || stride[a] > cfg.patch_shape[a])
      fail("eval.stride must lie in [1, patch extent] per axis");
  if (cfg.ema_alpha < 0 || cfg.ema_alpha > 1) fail("train.ema_alpha must be in [0,1]");
  if (cfg.momentum < 0 || cfg.momentum >= 1) fail("train.momentum must be in [0,1)");
  if (cfg.weight_decay < 0) fail("train.weight_decay must be non-negative");
  if (cfg.lr_base < 0 || cfg.lr_min < 0) fail("learning rates must be non-negative");
  if (cfg.mode != "rail" && cfg.mode != "supervised")
    fail("train.mode must be rail or supervised, got " + cfg.mode);
  if (cfg.first_term_horizon > cfg.t_max)
    fail("train.first_term_horizon exceeds train.t_max");
  if (cfg.group_period < 1) fail("train.group_period must be >= 1");
  if (cfg.checkpoint_interval < 1) fail("train.checkpoint_interval must be >= 1");
  if (cfg.n_labeled < 0 || cfg.n_unlabeled < 0 || cfg.n_test < 0)
    fail("data split counts must be non-negative");
  if (cfg.n_objects_min < 1 || cfg.n_objects_max < cfg.n_objects_min)
    fail("phantom object count range is invalid");
  if (cfg.noise_sigma < 0 || cfg.bias_strength < 0)
    fail("phantom.noise_sigma and phantom.bias_strength must be non-negative");
  if (cfg.threads < 1) fail("threads must be >= 1");
}

}  // namespace rail
