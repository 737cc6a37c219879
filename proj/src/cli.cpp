#include "drivenet/cli.hpp"

#include <CLI11.hpp>
#include <cstdio>
#include <filesystem>
#include <iostream>

#include "drivenet/checkpoint.hpp"
#include "drivenet/data.hpp"
#include "drivenet/gradcheck.hpp"
#include "drivenet/metrics.hpp"
#include "drivenet/model.hpp"
#include "drivenet/run_config.hpp"
#include "drivenet/sim.hpp"
#include "drivenet/training.hpp"

namespace drivenet {

namespace {

namespace fs = std::filesystem;

sim::Track make_track(std::uint64_t seed, const RunConfig& rc) {
  sim::Track track = sim::generate_track(seed);
  if (rc.track_half_width != track.half_width) {
    track.half_width = rc.track_half_width;
    track.build_index();
  }
  return track;
}

int cmd_gen_data(std::uint64_t seed, int episodes, double duration,
                 const std::string& out_dir, const RunConfig& rc) {
  fs::create_directories(out_dir);
  std::vector<std::string> names;
  for (int i = 0; i < episodes; ++i) {
    sim::Track track = make_track(seed + static_cast<std::uint64_t>(i), rc);
    Rng start_rng(derive_seed(seed, 1000 + static_cast<std::uint64_t>(i)));
    const double lat = start_rng.uniform(-rc.start_offset_max, rc.start_offset_max);
    const double head = start_rng.uniform(-rc.start_heading_max, rc.start_heading_max);
    Episode ep = sim::record_episode(track, duration, lat, head);
    char name[32];
    std::snprintf(name, sizeof(name), "ep_%04d.bin", i);
    write_episode(ep, (fs::path(out_dir) / name).string());
    names.push_back(name);
    std::cerr << "wrote " << name << " (" << ep.frame_count() << " frames)\n";
  }
  write_manifest(names, (fs::path(out_dir) / "manifest.txt").string());
  return 0;
}

int cmd_train(const std::string& model_name, const std::string& manifest,
              RunConfig rc, bool sparse, const std::string& ckpt,
              const std::string& metrics) {
  const ModelKind kind = model_kind_from_string(model_name);
  rc.train.sparse = sparse;
  rc.train.checkpoint_path = ckpt;
  rc.train.metrics_path = metrics;
  Dataset data = load_manifest(manifest);
  Split split = split_train_val(data, rc.val_runs, rc.val_frame_fraction,
                                rc.train.seed);
  Model<float> model = build_model<float>(
      kind, rc.model, derive_seed(rc.train.seed, seed_stream::model_init));
  std::cerr << "training " << model_name << " (" << model.count_params()
            << " params) on " << split.train_windows.size() << " windows, "
            << split.val_windows.size() << " validation windows\n";
  train(model, data, split, rc.train);
  return 0;
}

int cmd_eval(const std::string& ckpt, const std::string& manifest,
             const RunConfig& rc) {
  Model<float> model = load_checkpoint(ckpt, rc.model);
  Dataset data = load_manifest(manifest);
  Split split = split_train_val(data, rc.val_runs, rc.val_frame_fraction,
                                rc.train.seed);
  const double loss =
      validation_loss(model, data, split.val_windows, rc.train.batch_size);
  std::printf("%.17g\n", loss);
  return 0;
}

int cmd_simulate(const std::string& ckpt, std::uint64_t seed, double duration,
                 const std::string& report_path, const RunConfig& rc) {
  Model<float> model = load_checkpoint(ckpt, rc.model);
  sim::Track track = make_track(seed, rc);
  sim::EvalReport report = sim::closed_loop_eval(model, track, duration);
  if (!report_path.empty()) {
    sim::append_eval_csv(report, seed, report_path);
  }
  std::cerr << "track " << seed << ": " << report.failures << " failures, "
            << report.autonomy * 100.0 << "% autonomy\n";
  return 0;
}

int cmd_gradcheck(const std::string& layer_filter) {
  const auto results = run_gradcheck_suite(layer_filter);
  if (results.empty()) {
    std::cerr << "gradcheck: no checks match '" << layer_filter << "'\n";
    return 1;
  }
  bool all_ok = true;
  for (const auto& r : results) {
    std::printf("%s %-14s max_rel_err %.3e (tol %.0e)\n",
                r.pass ? "PASS" : "FAIL", r.name.c_str(), r.max_rel_err,
                r.tolerance);
    all_ok = all_ok && r.pass;
  }
  return all_ok ? 0 : 1;
}

int cmd_report(const std::vector<std::string>& metric_files,
               const std::string& out) {
  std::vector<ReportRow> rows;
  for (const auto& path : metric_files) {
    ReportRow row;
    row.model = fs::path(path).stem().string();
    LossCurve curve = read_metrics_csv(path, &row.model, &row.parameters);
    row.stats = convergence_stats(curve);
    rows.push_back(std::move(row));
  }
  write_report(rows, out);
  return 0;
}

}  // namespace

int run(int argc, const char* const* argv) {
  CLI::App app{"end-to-end driving nets: data generation, training, and evaluation"};
  app.require_subcommand(1);

  std::string config_path, model_name, manifest, ckpt, metrics_csv, out_path,
      report_path, layer_filter;
  std::vector<std::string> metric_files;
  std::uint64_t seed = 1;
  bool seed_given = false, sparse = false;
  int episodes = 60, epochs = -1;
  double duration = 60.0;

  auto add_config = [&](CLI::App* cmd) {
    cmd->add_option("--config", config_path, "key = value config file");
  };

  auto* gen = app.add_subcommand("gen-data", "record expert episodes");
  gen->add_option("--seed", seed, "base track seed");
  gen->add_option("--episodes", episodes, "number of episodes");
  gen->add_option("--duration", duration, "seconds per episode");
  gen->add_option("--out", out_path, "output directory")->required();
  add_config(gen);

  auto* tr = app.add_subcommand("train", "train a model");
  tr->add_option("--model", model_name, "fcn|squeezefcn|frfcn|baseline")->required();
  tr->add_option("--data", manifest, "episode manifest")->required();
  tr->add_flag("--sparse", sparse, "sample from a fixed 10% training subset");
  tr->add_option("--out", ckpt, "checkpoint path");
  tr->add_option("--metrics", metrics_csv, "validation-loss CSV path");
  tr->add_option("--seed", seed, "overrides the config seed")->each([&](const std::string&) {
    seed_given = true;
  });
  tr->add_option("--epochs", epochs, "overrides max_epochs");
  add_config(tr);

  auto* ev = app.add_subcommand("eval", "print validation MSE of a checkpoint");
  ev->add_option("--ckpt", ckpt, "checkpoint path")->required();
  ev->add_option("--data", manifest, "episode manifest")->required();
  ev->add_option("--seed", seed, "overrides the config seed")->each([&](const std::string&) {
    seed_given = true;
  });
  add_config(ev);

  auto* si = app.add_subcommand("simulate", "closed-loop track evaluation");
  si->add_option("--ckpt", ckpt, "checkpoint path")->required();
  si->add_option("--seed", seed, "track seed");
  si->add_option("--duration", duration, "rollout seconds");
  si->add_option("--report", report_path, "EvalReport CSV to append to");
  add_config(si);

  auto* gc = app.add_subcommand("gradcheck", "finite-difference oracle suite");
  gc->add_option("--layer", layer_filter, "substring filter, e.g. conv2d");

  auto* rp = app.add_subcommand("report", "convergence statistics per loss curve");
  rp->add_option("--metrics", metric_files, "metrics CSV files")->required();
  rp->add_option("--out", out_path, "report CSV path")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    RunConfig rc;
    if (!config_path.empty()) rc = parse_run_config(config_path);
    if (seed_given) rc.train.seed = seed;
    if (epochs >= 0) rc.train.max_epochs = epochs;

    if (gen->parsed()) return cmd_gen_data(seed, episodes, duration, out_path, rc);
    if (tr->parsed()) return cmd_train(model_name, manifest, rc, sparse, ckpt, metrics_csv);
    if (ev->parsed()) return cmd_eval(ckpt, manifest, rc);
    if (si->parsed()) return cmd_simulate(ckpt, seed, duration, report_path, rc);
    if (gc->parsed()) return cmd_gradcheck(layer_filter);
    if (rp->parsed()) return cmd_report(metric_files, out_path);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}

}  // namespace drivenet
