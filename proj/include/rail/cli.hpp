#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "rail/checkpoint.hpp"
#include "rail/config.hpp"
#include "rail/eval.hpp"

// Command implementations behind the `rail` binary. They are plain
// functions so the integration tests can drive them in-process; cli_run
// parses argv and dispatches. Exit codes: 0 success, 1 runtime failure,
// 2 usage error.

namespace rail::cli {

struct GenDataOptions {
  std::filesystem::path config;
  std::filesystem::path out;
  int workers = 1;
};
void gen_data(const GenDataOptions& opt);

struct TrainOptions {
  std::filesystem::path config;
  std::filesystem::path data;
  std::filesystem::path out;
  std::filesystem::path resume;  // empty = fresh run
  bool allow_config_mismatch = false;
};
void train(const TrainOptions& opt);

struct EvalOptions {
  std::filesystem::path ckpt;
  std::filesystem::path data;
  std::filesystem::path out;  // optional copy of the table
  int workers = 1;
};
// Returns the metrics table (also printed to stdout).
std::string eval(const EvalOptions& opt);

struct InferOptions {
  std::filesystem::path ckpt;
  std::filesystem::path volume;  // sample directory (meta + intensity.raw)
  std::filesystem::path out;
  bool export_slices = false;
};
void infer(const InferOptions& opt);

// Per-volume metric rows plus the aggregate mean row, tab separated,
// columns ordered id, dice, jaccard, hd95, asd.
std::string format_metrics_table(const std::vector<VolumeMetrics>& rows);

int cli_run(int argc, const char* const* argv);

}  // namespace rail::cli
