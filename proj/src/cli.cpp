#include "rail/cli.hpp"

#include <cstdio>
#include <fstream>
#include <iostream>
#include <mutex>
#include <sstream>
#include <thread>

#include "CLI11.hpp"
#include "rail/io.hpp"
#include "rail/parallel.hpp"

namespace rail::cli {

namespace {

RunConfig load_validated(const std::filesystem::path& path) {
  RunConfig cfg = load_config(path);
  validate_config(cfg);
  return cfg;
}

std::vector<EnsembleMember> student_ensemble(const TrainerState& state) {
  std::vector<EnsembleMember> members;
  members.reserve(4);
  for (const auto& slot : state.students)
    members.push_back({slot.spec, &slot.params});
  return members;
}

std::string fmt4(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.4f", v);
  return buf;
}

}  // namespace

void gen_data(const GenDataOptions& opt) {
  RunConfig cfg = load_validated(opt.config);
  generate_dataset(cfg.phantom_config(), cfg.dataset_counts(), opt.out,
                   opt.workers);
}

void train(const TrainOptions& opt) {
  RunConfig cfg = load_validated(opt.config);
  set_threads(cfg.threads);
  Dataset dataset = Dataset::load(opt.data);
  if (dataset.labeled.empty())
    throw std::runtime_error("train: dataset has no labeled samples");

  TrainerState state =
      opt.resume.empty()
          ? make_trainer(cfg.network_spec(), cfg.trainer_config(), cfg.seed)
          : load_checkpoint(opt.resume, cfg, opt.allow_config_mismatch);
  if (state.t >= cfg.t_max && !opt.resume.empty())
    throw std::runtime_error("train: checkpoint is already at t_max");

  std::filesystem::create_directories(opt.out);
  const bool fresh = state.t == 0;
  std::ofstream log(opt.out / "run.log",
                    fresh ? std::ios::trunc : std::ios::app);
  if (!log) throw std::runtime_error("train: cannot open run.log for writing");

  const bool supervised = cfg.mode == "supervised";
  while (state.t < cfg.t_max) {
    SampleBatch raw = sample_batch(dataset, cfg.patch_shape, state.rng);
    TrainBatch batch = to_train_batch(raw);
    IterationRecord rec;
    try {
      rec = supervised ? supervised_iteration(state, batch)
                       : train_iteration(state, batch);
    } catch (const std::runtime_error&) {
      save_checkpoint(opt.out / "ckpt_crash.rail", state, cfg);
      throw;
    }
    log << format_record(rec) << "\n";
    if (state.t % cfg.checkpoint_interval == 0 && state.t < cfg.t_max) {
      char name[32];
      std::snprintf(name, sizeof(name), "ckpt_%06d.rail", state.t);
      save_checkpoint(opt.out / name, state, cfg);
    }
  }
  log.flush();
  save_checkpoint(opt.out / "ckpt_final.rail", state, cfg);
}

std::string format_metrics_table(const std::vector<VolumeMetrics>& rows) {
  std::ostringstream os;
  os << "id\tdice\tjaccard\thd95\tasd\n";
  double dice = 0, jac = 0, hd = 0, asd = 0;
  int n_surf = 0;
  for (const auto& m : rows) {
    os << m.id << "\t" << fmt4(m.dice) << "\t" << fmt4(m.jaccard) << "\t";
    if (m.surface_valid) {
      os << fmt4(m.hd95) << "\t" << fmt4(m.asd) << "\n";
      hd += m.hd95;
      asd += m.asd;
      ++n_surf;
    } else {
      os << "-\t-\n";
    }
    dice += m.dice;
    jac += m.jaccard;
  }
  if (!rows.empty()) {
    const double n = static_cast<double>(rows.size());
    os << "mean\t" << fmt4(dice / n) << "\t" << fmt4(jac / n) << "\t";
    if (n_surf > 0)
      os << fmt4(hd / n_surf) << "\t" << fmt4(asd / n_surf) << "\n";
    else
      os << "-\t-\n";
  }
  return os.str();
}

std::string eval(const EvalOptions& opt) {
  RunConfig cfg = config_from_checkpoint(opt.ckpt);
  validate_config(cfg);
  set_threads(cfg.threads);
  TrainerState state = load_checkpoint(opt.ckpt, cfg, false);
  Dataset dataset = Dataset::load(opt.data);
  if (dataset.test.empty())
    throw std::runtime_error("eval: dataset has no test samples");

  auto members = student_ensemble(state);
  std::vector<VolumeMetrics> rows(dataset.test.size());
  const int workers =
      std::max(1, std::min<int>(opt.workers,
                                static_cast<int>(dataset.test.size())));
  if (workers == 1) {
    for (std::size_t i = 0; i < dataset.test.size(); ++i)
      rows[i] = evaluate_volume(members, dataset.test[i], cfg.patch_shape,
                                cfg.resolved_stride());
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
            if (next >= dataset.test.size()) return;
            mine = next++;
          }
          rows[mine] = evaluate_volume(members, dataset.test[mine],
                                       cfg.patch_shape, cfg.resolved_stride());
        }
      });
    for (auto& t : pool) t.join();
  }

  std::string table = format_metrics_table(rows);
  std::cout << table;
  if (!opt.out.empty()) write_text_file(opt.out, table);
  return table;
}

void infer(const InferOptions& opt) {
  RunConfig cfg = config_from_checkpoint(opt.ckpt);
  validate_config(cfg);
  set_threads(cfg.threads);
  TrainerState state = load_checkpoint(opt.ckpt, cfg, false);

  // the volume path is a sample directory holding meta + intensity.raw
  std::istringstream meta(read_text_file(opt.volume / "meta"));
  Int3 shape{0, 0, 0};
  std::string key;
  while (meta >> key) {
    if (key == "shape")
      meta >> shape[0] >> shape[1] >> shape[2];
    else {
      std::string rest;
      std::getline(meta, rest);
    }
  }
  if (shape[0] <= 0)
    throw std::runtime_error("infer: meta in " + opt.volume.string() +
                             " has no shape");
  Volume vol = normalize(read_raw_f32(opt.volume / "intensity.raw", shape));

  auto members = student_ensemble(state);
  TensorF probs = sliding_window_infer(members, vol, cfg.patch_shape,
                                       cfg.resolved_stride());
  LabelVolume pred = argmax_volume(probs);

  std::filesystem::create_directories(opt.out);
  write_raw_u8(opt.out / "pred_label.raw", pred);
  if (opt.export_slices)
    write_pgm_slices(opt.out / "slices", foreground_probability(probs));
}

int cli_run(int argc, const char* const* argv) {
  CLI::App app{"Dual-group dual-student semi-supervised volumetric segmentation"};
  app.require_subcommand(1);

  GenDataOptions gen_opt;
  auto* gen = app.add_subcommand("gen-data", "Generate a phantom dataset");
  gen->add_option("--config", gen_opt.config, "run configuration file")
      ->required();
  gen->add_option("--out", gen_opt.out, "output dataset directory")->required();
  gen->add_option("--workers", gen_opt.workers, "parallel sample generation");

  TrainOptions train_opt;
  auto* tr = app.add_subcommand("train", "Train on a generated dataset");
  tr->add_option("--config", train_opt.config, "run configuration file")
      ->required();
  tr->add_option("--data", train_opt.data, "dataset directory")->required();
  tr->add_option("--out", train_opt.out, "run output directory")->required();
  tr->add_option("--resume", train_opt.resume, "checkpoint to resume from");
  tr->add_flag("--allow-config-mismatch", train_opt.allow_config_mismatch,
               "resume even if the config hash differs");

  EvalOptions eval_opt;
  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint on the test split");
  ev->add_option("--ckpt", eval_opt.ckpt, "checkpoint file")->required();
  ev->add_option("--data", eval_opt.data, "dataset directory")->required();
  ev->add_option("--out", eval_opt.out, "write the metrics table here too");
  ev->add_option("--workers", eval_opt.workers, "parallel volume evaluation");

  InferOptions infer_opt;
  auto* in = app.add_subcommand("infer", "Segment one volume");
  in->add_option("--ckpt", infer_opt.ckpt, "checkpoint file")->required();
  in->add_option("--volume", infer_opt.volume, "sample directory")->required();
  in->add_option("--out", infer_opt.out, "output directory")->required();
  in->add_flag("--export-slices", infer_opt.export_slices,
               "write per-slice PGM images of the foreground probability");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (gen->parsed()) gen_data(gen_opt);
    if (tr->parsed()) train(train_opt);
    if (ev->parsed()) eval(eval_opt);
    if (in->parsed()) infer(infer_opt);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

}  // namespace rail::cli
