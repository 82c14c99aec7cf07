#pragma once

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "tvseg/experiment.hpp"
#include "tvseg/gradcheck.hpp"
#include "tvseg/storage.hpp"

namespace tvseg::cli {

// Exit codes: 0 success, 2 usage/config error, 3 numerical failure, 4 IO error.
enum ExitCode : int { kOk = 0, kFailure = 1, kUsage = 2, kNumeric = 3, kIo = 4 };

inline int exit_code_for_current_exception() {
  try {
    throw;
  } catch (const ConfigError&) {
    return kUsage;
  } catch (const InvalidArgument&) {
    return kUsage;
  } catch (const NumericError&) {
    return kNumeric;
  } catch (const IoError&) {
    return kIo;
  } catch (const std::exception&) {
    return kFailure;
  }
}

inline RunConfig load_config_or_default(const std::string& path) {
  if (path.empty()) {
    RunConfig cfg;
    cfg.train.tau = cfg.infer.tau;
    return cfg;
  }
  return parse_run_config(path);
}

// ---------------------------------------------------------------------------
// gen
// ---------------------------------------------------------------------------

struct GenOptions {
  std::string config;
  std::string out_dir;
  bool force = false;
  std::optional<uint64_t> seed;
};

inline void cmd_gen(const GenOptions& opt) {
  RunConfig cfg = load_config_or_default(opt.config);
  if (opt.seed) cfg.gen.seed = *opt.seed;
  if (std::filesystem::exists(opt.out_dir + "/manifest.json") && !opt.force)
    throw IoError(opt.out_dir + " already holds a dataset (use --force to overwrite)");
  auto ds = generate_dataset<float>(cfg.gen);
  write_dataset(opt.out_dir, ds, cfg.gen);
  std::printf("wrote %lld subjects to %s (train %lld, validation %lld, test %lld)\n",
              static_cast<long long>(ds.size()), opt.out_dir.c_str(),
              static_cast<long long>(cfg.gen.n_train), static_cast<long long>(cfg.gen.n_validation),
              static_cast<long long>(cfg.gen.n_test));
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

struct TrainOptions {
  std::string config;
  std::string data_dir;
  std::string out_dir;
  std::string loss = "dice_tv";  // dice | dice_bce | dice_tv
  std::optional<uint64_t> seed;
  std::optional<int64_t> max_epochs;
  std::optional<double> tv_weight;
  int64_t stop_after = -1;       // pause for later resumption
  std::string resume;            // full checkpoint to resume from
};

inline void cmd_train(const TrainOptions& opt) {
  RunConfig cfg = load_config_or_default(opt.config);
  cfg.train.loss = apply_loss_preset(cfg.train.loss, opt.loss);
  if (opt.tv_weight) cfg.train.loss.w_tv = *opt.tv_weight;
  if (opt.seed) cfg.train.seed = *opt.seed;
  if (opt.max_epochs) cfg.train.max_epochs = *opt.max_epochs;
  cfg.train.validate();

  auto dataset = load_dataset(opt.data_dir);
  std::filesystem::create_directories(opt.out_dir);

  TrainerState<float> st;
  if (!opt.resume.empty()) {
    st = load_checkpoint(opt.resume, &cfg.net);
  } else {
    st = make_trainer<float>(cfg.net, cfg.train.seed);
  }
  train(st, cfg.train, cfg.augment, dataset, cfg.infer.window, opt.stop_after);

  write_epoch_csv(opt.out_dir + "/epochs.csv", st.logs);
  save_checkpoint(opt.out_dir + "/last.vsgc", st, true);
  TrainerState<float> best;
  best.params = st.best_params;
  best.opt = OptState<float>::init(best.params);
  best.best_params = st.best_params;
  save_checkpoint(opt.out_dir + "/best.vsgc", best, false);
  std::printf("trained %lld epochs (best epoch %lld, best val loss %.6e)%s\n",
              static_cast<long long>(st.logs.size()), static_cast<long long>(st.best_epoch),
              st.best_val, st.stopped_early ? " [early stop]" : "");
}

// ---------------------------------------------------------------------------
// predict
// ---------------------------------------------------------------------------

struct PredictOptions {
  std::string ckpt;
  std::string data_dir;
  std::string split = "test";
  std::string out_dir;
  std::string config;
};

inline void cmd_predict(const PredictOptions& opt) {
  RunConfig cfg = load_config_or_default(opt.config);
  // Enforce the config's network section only when the file pinned one.
  const NetConfig* expect = nullptr;
  if (!opt.config.empty()) {
    const std::string text = detail::read_file(opt.config);
    bool blank = true;
    for (char c : text)
      if (!std::isspace(static_cast<unsigned char>(c))) blank = false;
    if (!blank && nlohmann::json::parse(text).contains("net")) expect = &cfg.net;
  }
  TrainerState<float> st = load_checkpoint(opt.ckpt, expect);
  const Split split = split_from_name(opt.split);

  std::filesystem::create_directories(opt.out_dir);
  int64_t count = 0;
  for (auto& e : read_manifest(opt.data_dir)) {
    if (e.split != split) continue;
    auto sub = load_subject(opt.data_dir, e);
    Volume<float> probs = infer_volume(st.params, sub.image, cfg.infer.window, cfg.infer.overlap);
    BinaryMask mask = mask_from_threshold(slice_channel(probs, 1), cfg.infer.tau);
    save_volume(opt.out_dir + "/" + e.id + "_prob.vsg", probs);
    save_mask(opt.out_dir + "/" + e.id + "_mask.vsg", mask);
    ++count;
  }
  if (count == 0) throw IoError("no subjects in split '" + opt.split + "' under " + opt.data_dir);
  std::printf("predicted %lld %s subjects into %s\n", static_cast<long long>(count),
              opt.split.c_str(), opt.out_dir.c_str());
}

// ---------------------------------------------------------------------------
// postproc
// ---------------------------------------------------------------------------

struct PostprocOptions {
  std::string in_dir;
  std::string out_dir;
  std::string config;
  bool check_idempotence = false;
};

inline void cmd_postproc(const PostprocOptions& opt) {
  RunConfig cfg = load_config_or_default(opt.config);
  std::vector<std::string> files;
  if (std::filesystem::is_directory(opt.in_dir))
    for (auto& e : std::filesystem::directory_iterator(opt.in_dir)) {
      const std::string name = e.path().filename().string();
      if (name.size() > 9 && name.substr(name.size() - 9) == "_mask.vsg") files.push_back(name);
    }
  std::sort(files.begin(), files.end());
  if (files.empty()) throw IoError("no *_mask.vsg files under " + opt.in_dir);

  std::filesystem::create_directories(opt.out_dir);
  int64_t diff_total = 0;
  for (auto& name : files) {
    BinaryMask m = load_mask(opt.in_dir + "/" + name);
    BinaryMask once = postprocess(m, cfg.postproc);
    if (opt.check_idempotence) {
      BinaryMask twice = postprocess(once, cfg.postproc);
      for (int64_t i = 0; i < once.voxels(); ++i)
        if (once.data()[i] != twice.data()[i]) ++diff_total;
    }
    save_mask(opt.out_dir + "/" + name, once);
  }
  std::printf("post-processed %lld masks into %s\n", static_cast<long long>(files.size()),
              opt.out_dir.c_str());
  if (opt.check_idempotence)
    std::printf("idempotence check: %lld voxels differ between one and two passes\n",
                static_cast<long long>(diff_total));
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

struct EvalOptions {
  std::vector<std::string> pred_dirs;  // one per run
  std::string gt_dir;
  std::string split = "test";
  std::string out_prefix;  // writes <prefix>.csv and <prefix>.txt when set
  std::string label = "run";
  std::optional<int64_t> runs;
};

inline AggregateReport cmd_eval(const EvalOptions& opt) {
  if (opt.pred_dirs.empty()) throw InvalidArgument("eval: at least one --pred directory required");
  if (opt.runs && *opt.runs != static_cast<int64_t>(opt.pred_dirs.size()))
    throw InvalidArgument("eval: --runs does not match the number of --pred directories");
  const Split split = split_from_name(opt.split);

  std::vector<SubjectMetrics> flat;
  for (auto& dir : opt.pred_dirs) {
    int64_t count = 0;
    for (auto& e : read_manifest(opt.gt_dir)) {
      if (e.split != split) continue;
      const BinaryMask gt = load_mask(opt.gt_dir + "/" + e.gt_file);
      const BinaryMask pred = load_mask(dir + "/" + e.id + "_mask.vsg");
      if (pred.shape() != gt.shape())
        throw FormatMismatchError(dir + "/" + e.id + ": prediction shape differs from gt");
      flat.push_back(evaluate_subject(pred, gt));
      ++count;
    }
    if (count == 0) throw IoError("no subjects of split '" + opt.split + "' evaluated in " + dir);
  }
  AggregateReport rep = aggregate(flat, static_cast<int64_t>(opt.pred_dirs.size()), opt.label);
  const std::string table = report_table({rep}, "");
  std::fputs(table.c_str(), stdout);
  if (!opt.out_prefix.empty()) {
    write_report_csv(opt.out_prefix + ".csv", {rep});
    detail::write_file_atomic(opt.out_prefix + ".txt", table);
  }
  return rep;
}

// ---------------------------------------------------------------------------
// gradcheck
// ---------------------------------------------------------------------------

struct GradcheckOptions {
  std::string precision = "double";  // double | single
  uint64_t seed = 20240801;
};

/// Returns true when every check passes; prints one line per component.
inline bool cmd_gradcheck(const GradcheckOptions& opt) {
  const bool single = opt.precision == "single";
  if (!single && opt.precision != "double")
    throw InvalidArgument("gradcheck: --precision must be double or single");

  bool all_ok = true;
  auto print = [&](const LossGradReport& r) {
    std::printf("  %-16s %s  worst rel err %.3e (tol %.0e, %lld checked, %lld excluded)\n",
                r.name.c_str(), r.passed ? "PASS" : "FAIL", r.result.max_rel_err, r.tolerance,
                static_cast<long long>(r.result.checked),
                static_cast<long long>(r.result.excluded));
    all_ok = all_ok && r.passed;
  };

  NetConfig tiny;
  tiny.in_channels = 2;
  tiny.base_channels = 2;
  tiny.num_stages = 2;
  tiny.attn_start_stage = 1;
  tiny.attn_reduced_dim = 2;
  if (single) {
    // Float central differences are swamped by ulp(f)/2h noise, so the single
    // path is verified against the FD-verified double reference instead.
    std::printf(
        "single precision: float path vs double reference, relaxed tolerance 1e-3\n"
        "loss values and gradients:\n");
    for (auto& r : run_precision_comparison(8, 5, 6, 1e-3, opt.seed)) print(r);
    std::printf("network gradients:\n");
    for (auto& r : run_net_precision_comparison(tiny, {4, 4, 4}, 1e-3, opt.seed)) print(r);
  } else {
    std::printf("loss gradients, double precision (h=1e-5, tolerance 1e-5):\n");
    for (auto& r : run_loss_gradchecks<double>(20, 6, 8, 1e-5, 1e-5, opt.seed)) print(r);
    // Narrow step for the network: pooling/ReLU kinks must stay outside the
    // stencil; the floor absorbs the matching FD cancellation noise.
    std::printf("network gradients, double precision (h=1e-6, tolerance 1e-4):\n");
    for (auto& r : run_net_gradcheck<double>(tiny, {4, 4, 4}, 1e-6, 1e-4, opt.seed, 1e-5)) print(r);
  }
  std::printf("gradcheck: %s\n", all_ok ? "all components passed" : "FAILURES detected");
  return all_ok;
}

// ---------------------------------------------------------------------------
// repro-trend
// ---------------------------------------------------------------------------

struct TrendOptions {
  std::string config;
  std::string out_dir;
  int seeds = 5;
  int jobs = 0;  // 0: TVSEG_THREADS env or hardware_concurrency capped at 4
  std::optional<int64_t> epochs;
  std::optional<double> tv_weight;
};

inline int resolve_jobs(int requested) {
  if (requested > 0) return requested;
  if (const char* env = std::getenv("TVSEG_THREADS")) {
    const int n = std::atoi(env);
    if (n > 0) return n;
  }
  const unsigned hw = std::thread::hardware_concurrency();
  return static_cast<int>(std::min<unsigned>(hw ? hw : 1, 4));
}

inline TrendReport cmd_repro_trend(const TrendOptions& opt) {
  TrendSettings settings = TrendSettings::desk_defaults(opt.out_dir);
  if (!opt.config.empty()) {
    settings.cfg = parse_run_config(opt.config);
  }
  settings.n_seeds = opt.seeds;
  settings.jobs = resolve_jobs(opt.jobs);
  if (opt.epochs) settings.cfg.train.max_epochs = *opt.epochs;
  if (opt.tv_weight) settings.tv_weight_override = *opt.tv_weight;
  settings.cfg.validate();

  TrendReport report = run_trend_experiment_to_dir(settings);
  std::fputs(report_table(report.pre_rows, "Test results (no post-processing)").c_str(), stdout);
  std::fputs("\n", stdout);
  std::fputs(report_table(report.post_rows, "Post-processed test results").c_str(), stdout);

  const auto& dice_pre = report.pre_row("dice");
  const auto& tv_pre = report.pre_row("dice_tv");
  std::printf("\ntrend: nFPC %.3f -> %.3f; DC %.4f -> %.4f; post-processing DC gain %.4f vs %.4f\n",
              dice_pre.nfpc.mean, tv_pre.nfpc.mean, dice_pre.dice.mean, tv_pre.dice.mean,
              report.dc_gain("dice"), report.dc_gain("dice_tv"));
  return report;
}

}  // namespace tvseg::cli
