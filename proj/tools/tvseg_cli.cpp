#include <cstdio>
#include <exception>

#include <CLI11.hpp>

#include "tvseg/cli.hpp"

using namespace tvseg;

int main(int argc, char** argv) {
  CLI::App app{"tvseg: TV-regularized 3D lesion segmentation at desk scale"};
  app.require_subcommand(1);

  cli::GenOptions gen;
  auto* cgen = app.add_subcommand("gen", "generate a synthetic dataset");
  cgen->add_option("--config", gen.config, "run configuration file (JSON)");
  cgen->add_option("--out-dir", gen.out_dir, "output dataset directory")->required();
  cgen->add_flag("--force", gen.force, "overwrite an existing dataset");
  uint64_t gen_seed = 0;
  auto* gen_seed_opt = cgen->add_option("--seed", gen_seed, "override gen.seed");

  cli::TrainOptions tr;
  auto* ctrain = app.add_subcommand("train", "train the segmentation network");
  ctrain->add_option("--config", tr.config, "run configuration file (JSON)");
  ctrain->add_option("--data", tr.data_dir, "dataset directory")->required();
  ctrain->add_option("--out", tr.out_dir, "output directory for checkpoints and logs")->required();
  ctrain->add_option("--loss", tr.loss, "loss preset: dice | dice_bce | dice_tv")
      ->default_val("dice_tv");
  uint64_t tr_seed = 0;
  auto* tr_seed_opt = ctrain->add_option("--seed", tr_seed, "override train.seed");
  int64_t tr_epochs = 0;
  auto* tr_epochs_opt = ctrain->add_option("--epochs", tr_epochs, "override train.max_epochs");
  double tr_tvw = 0;
  auto* tr_tvw_opt = ctrain->add_option("--tv-weight", tr_tvw, "override the TV weight");
  ctrain->add_option("--stop-after", tr.stop_after, "pause after this many epochs (for resume)");
  ctrain->add_option("--resume", tr.resume, "resume from a full checkpoint (last.vsgc)");

  cli::PredictOptions pr;
  auto* cpred = app.add_subcommand("predict", "run sliding-window inference");
  cpred->add_option("--ckpt", pr.ckpt, "checkpoint file")->required();
  cpred->add_option("--data", pr.data_dir, "dataset directory")->required();
  cpred->add_option("--split", pr.split, "split: train | validation | test")->default_val("test");
  cpred->add_option("--out", pr.out_dir, "output directory")->required();
  cpred->add_option("--config", pr.config, "run configuration file (JSON)");

  cli::PostprocOptions pp;
  auto* cpost = app.add_subcommand("postproc", "clean predicted masks");
  cpost->add_option("--in", pp.in_dir, "directory of *_mask.vsg files")->required();
  cpost->add_option("--out", pp.out_dir, "output directory")->required();
  cpost->add_option("--config", pp.config, "run configuration file (JSON)");
  cpost->add_flag("--check-idempotence", pp.check_idempotence,
                  "run the pipeline twice and report the voxel diff count");

  cli::EvalOptions ev;
  auto* ceval = app.add_subcommand("eval", "evaluate predictions against ground truth");
  ceval->add_option("--pred", ev.pred_dirs, "prediction directory (repeat for multiple runs)")
      ->required();
  ceval->add_option("--gt", ev.gt_dir, "dataset directory holding ground truth")->required();
  ceval->add_option("--split", ev.split, "split to evaluate")->default_val("test");
  ceval->add_option("--out", ev.out_prefix, "report path prefix (.csv/.txt)");
  ceval->add_option("--label", ev.label, "row label in the report");
  int64_t ev_runs = 0;
  auto* ev_runs_opt = ceval->add_option("--runs", ev_runs, "expected number of run directories");

  cli::GradcheckOptions gc;
  auto* cgrad = app.add_subcommand("gradcheck", "finite-difference gradient verification");
  cgrad->add_option("--precision", gc.precision, "double | single")->default_val("double");
  cgrad->add_option("--seed", gc.seed, "rng seed for the random volumes");

  cli::TrendOptions td;
  auto* ctrend = app.add_subcommand(
      "repro-trend", "gen + train x 3 losses x N seeds + predict + postproc + eval");
  ctrend->add_option("--config", td.config, "run configuration file (JSON)");
  ctrend->add_option("--out", td.out_dir, "experiment output directory")->required();
  ctrend->add_option("--seeds", td.seeds, "number of seeds per loss preset")->default_val(5);
  ctrend->add_option("--jobs", td.jobs, "parallel runs (default: TVSEG_THREADS or cores, max 4)");
  int64_t td_epochs = 0;
  auto* td_epochs_opt = ctrend->add_option("--epochs", td_epochs, "epoch cap per run");
  double td_tvw = 0;
  auto* td_tvw_opt = ctrend->add_option("--tv-weight", td_tvw, "override the dice_tv TV weight");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : cli::kUsage;
  }

  try {
    if (*cgen) {
      if (*gen_seed_opt) gen.seed = gen_seed;
      cli::cmd_gen(gen);
    } else if (*ctrain) {
      if (*tr_seed_opt) tr.seed = tr_seed;
      if (*tr_epochs_opt) tr.max_epochs = tr_epochs;
      if (*tr_tvw_opt) tr.tv_weight = tr_tvw;
      cli::cmd_train(tr);
    } else if (*cpred) {
      cli::cmd_predict(pr);
    } else if (*cpost) {
      cli::cmd_postproc(pp);
    } else if (*ceval) {
      if (*ev_runs_opt) ev.runs = ev_runs;
      cli::cmd_eval(ev);
    } else if (*cgrad) {
      if (!cli::cmd_gradcheck(gc)) return cli::kNumeric;
    } else if (*ctrend) {
      if (*td_epochs_opt) td.epochs = td_epochs;
      if (*td_tvw_opt) td.tv_weight = td_tvw;
      cli::cmd_repro_trend(td);
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return cli::exit_code_for_current_exception();
  }
  return cli::kOk;
}
