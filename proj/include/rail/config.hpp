#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "rail/data.hpp"
#include "rail/network.hpp"
#include "rail/trainer.hpp"

// Runtime configuration: UTF-8 `key = value` lines with dotted keys for
// nesting and `#` comments. Unknown keys are rejected; every field has a
// default (documented in the README schema table).

namespace rail {

struct RunConfig {
  std::uint64_t seed = 42;
  int threads = 1;  // tensor-op worker threads used by the training math

  Int3 volume_shape{48, 48, 32};
  int n_labeled = 4;
  int n_unlabeled = 36;
  int n_test = 8;

  int n_objects_min = 2;
  int n_objects_max = 6;
  double noise_sigma = 0.08;
  double bias_strength = 0.25;

  int base_channels = 4;
  int depth = 3;
  int num_classes = 2;

  Int3 patch_shape{32, 32, 16};
  int t_max = 2000;
  int first_term_horizon = -1;  // -1 resolves to t_max/8
  int group_period = 1;
  double ema_alpha = 0.5;
  double lr_base = 0.01;
  double lr_min = 1e-5;
  double momentum = 0.9;
  double weight_decay = 0.0004;
  int checkpoint_interval = 500;
  std::string mode = "rail";  // rail | supervised

  double beta = 0.5;
  double gamma = 0.05;
  double mu = 0.1;
  double lambda1_hat = 20.0;
  double lambda2_hat = 10.0;

  bool enable_kl_dfs = true;
  bool enable_mis_mask = true;
  bool enable_div_mask = true;

  Int3 eval_stride{-1, -1, -1};  // -1 resolves to patch/2 per axis

  int resolved_first_term() const {
    return first_term_horizon >= 0 ? first_term_horizon : t_max / 8;
  }
  Int3 resolved_stride() const {
    Int3 s = eval_stride;
    for (int a = 0; a < 3; ++a)
      if (s[a] < 0) s[a] = std::max(1, patch_shape[a] / 2);
    return s;
  }

  NetworkSpec network_spec(NetVariant variant = NetVariant::vnet) const;
  TrainerConfig trainer_config() const;
  PhantomConfig phantom_config() const;
  DatasetCounts dataset_counts() const;

  // Fixed key order, normalized number formatting; the basis of the hash.
  std::string canonical_text() const;
  std::uint64_t hash() const;
};

RunConfig parse_config_text(const std::string& text);
RunConfig load_config(const std::filesystem::path& path);

// Throws std::invalid_argument with an actionable message on any violated
// constraint (negative weights, zero t_max, indivisible patch shapes, ...).
void validate_config(const RunConfig& cfg);

}  // namespace rail
