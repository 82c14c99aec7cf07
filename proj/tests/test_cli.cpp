#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "tvseg/cli.hpp"

using namespace tvseg;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() /
           ("tvseg_cli_" + std::to_string(::getpid()) + "_" + std::to_string(counter()++));
    fs::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path, ec);
  }
  std::string sub(const std::string& name) const { return (path / name).string(); }
  static int& counter() {
    static int c = 0;
    return c;
  }
};

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  out << text;
}

std::string read_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

// Small configuration so CLI round-trips stay fast.
const char* kSmallConfig = R"({
  "gen": {"n_train": 3, "n_validation": 2, "n_test": 2,
           "volume_shape": [16, 16, 16], "radius_min": 2, "radius_max": 3},
  "net": {"base_channels": 4, "num_stages": 2, "attn_start_stage": 1, "attn_reduced_dim": 4},
  "augment": {"crop_size": [8, 8, 8]},
  "train": {"max_epochs": 3, "warmup_epochs": 1, "patience": 25},
  "infer": {"window": [16, 16, 16]}
})";

}  // namespace

TEST_SUITE("cli") {

TEST_CASE("loss presets carry the published weights") {
  LossConfig base;  // defaults
  LossConfig dice = apply_loss_preset(base, "dice");
  CHECK(dice.w_dice == 1.0);
  CHECK(dice.w_bce == 0.0);
  CHECK(dice.w_tv == 0.0);
  LossConfig dice_bce = apply_loss_preset(base, "dice_bce");
  CHECK(dice_bce.w_dice == 0.5);
  CHECK(dice_bce.w_bce == 0.5);
  CHECK(dice_bce.w_tv == 0.0);
  LossConfig dice_tv = apply_loss_preset(base, "dice_tv");
  CHECK(dice_tv.w_dice == 1.0);
  CHECK(dice_tv.w_bce == 0.0);
  CHECK(dice_tv.w_tv == 0.1);
  CHECK_THROWS_AS(apply_loss_preset(base, "focal"), InvalidArgument);

  // Presets replace weights but keep the stabilizers from the base config.
  base.epsilon = 3e-5;
  base.bce_clamp = 1e-6;
  LossConfig kept = apply_loss_preset(base, "dice_tv");
  CHECK(kept.epsilon == 3e-5);
  CHECK(kept.bce_clamp == 1e-6);
}

TEST_CASE("exit codes map error kinds") {
  auto code_of = [](auto thrower) {
    try {
      thrower();
    } catch (...) {
      return cli::exit_code_for_current_exception();
    }
    return 0;
  };
  CHECK(code_of([] { throw ConfigError("x"); }) == cli::kUsage);
  CHECK(code_of([] { throw InvalidArgument("x"); }) == cli::kUsage);
  CHECK(code_of([] { throw NumericError("x"); }) == cli::kNumeric);
  CHECK(code_of([] { throw IoError("x"); }) == cli::kIo);
  CHECK(code_of([] { throw std::runtime_error("x"); }) == cli::kFailure);
}

TEST_CASE("gen writes a dataset, refuses to clobber, and repeats bitwise") {
  TempDir td;
  write_text(td.sub("cfg.json"), kSmallConfig);

  cli::GenOptions opt;
  opt.config = td.sub("cfg.json");
  opt.out_dir = td.sub("data");
  cli::cmd_gen(opt);
  CHECK(fs::exists(td.sub("data") + "/manifest.json"));
  CHECK(fs::exists(td.sub("data") + "/s000_img.vsg"));

  CHECK_THROWS_AS(cli::cmd_gen(opt), IoError);

  cli::GenOptions again = opt;
  again.out_dir = td.sub("data2");
  cli::cmd_gen(again);
  CHECK(read_bytes(td.sub("data") + "/s000_img.vsg") ==
        read_bytes(td.sub("data2") + "/s000_img.vsg"));
  CHECK(read_bytes(td.sub("data") + "/s004_gt.vsg") ==
        read_bytes(td.sub("data2") + "/s004_gt.vsg"));
}

TEST_CASE("missing config file fails with a config error (exit 2)") {
  cli::GenOptions opt;
  opt.config = "/nonexistent/cfg.json";
  opt.out_dir = "/tmp/never_created";
  try {
    cli::cmd_gen(opt);
    FAIL("expected ConfigError");
  } catch (...) {
    CHECK(cli::exit_code_for_current_exception() == cli::kUsage);
  }
}

TEST_CASE("train, predict, postproc, eval round-trip on a small run") {
  TempDir td;
  write_text(td.sub("cfg.json"), kSmallConfig);

  cli::GenOptions gen;
  gen.config = td.sub("cfg.json");
  gen.out_dir = td.sub("data");
  cli::cmd_gen(gen);

  cli::TrainOptions tr;
  tr.config = td.sub("cfg.json");
  tr.data_dir = td.sub("data");
  tr.out_dir = td.sub("run");
  tr.loss = "dice_tv";
  cli::cmd_train(tr);
  CHECK(fs::exists(td.sub("run") + "/best.vsgc"));
  CHECK(fs::exists(td.sub("run") + "/last.vsgc"));
  const std::string csv = read_bytes(td.sub("run") + "/epochs.csv");
  CHECK(csv.find("epoch,lr,train_loss") == 0);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 4);  // header + 3 epochs

  cli::PredictOptions pr;
  pr.ckpt = td.sub("run") + "/best.vsgc";
  pr.data_dir = td.sub("data");
  pr.out_dir = td.sub("pred");
  pr.config = td.sub("cfg.json");
  cli::cmd_predict(pr);
  CHECK(fs::exists(td.sub("pred") + "/s005_prob.vsg"));
  CHECK(fs::exists(td.sub("pred") + "/s006_mask.vsg"));

  // Prediction is reproducible byte for byte.
  cli::PredictOptions pr2 = pr;
  pr2.out_dir = td.sub("pred2");
  cli::cmd_predict(pr2);
  CHECK(read_bytes(td.sub("pred") + "/s005_prob.vsg") ==
        read_bytes(td.sub("pred2") + "/s005_prob.vsg"));
  CHECK(read_bytes(td.sub("pred") + "/s005_mask.vsg") ==
        read_bytes(td.sub("pred2") + "/s005_mask.vsg"));

  // Masks equal thresholded probabilities at the configured tau.
  {
    Volume<float> probs = load_volume(td.sub("pred") + "/s005_prob.vsg");
    BinaryMask mask = load_mask(td.sub("pred") + "/s005_mask.vsg");
    CHECK(mask == mask_from_threshold(slice_channel(probs, 1), 0.5));
    for (int64_t i = 0; i < probs.voxels(); ++i)
      CHECK(std::fabs(probs.channel(0)[i] + probs.channel(1)[i] - 1.0f) < 1e-6f);
  }

  cli::PostprocOptions pp;
  pp.in_dir = td.sub("pred");
  pp.out_dir = td.sub("post");
  pp.config = td.sub("cfg.json");
  pp.check_idempotence = true;
  cli::cmd_postproc(pp);
  CHECK(fs::exists(td.sub("post") + "/s005_mask.vsg"));

  cli::EvalOptions ev;
  ev.pred_dirs = {td.sub("pred")};
  ev.gt_dir = td.sub("data");
  ev.out_prefix = td.sub("report");
  ev.label = "dice_tv";
  AggregateReport rep = cli::cmd_eval(ev);
  CHECK(rep.runs == 1);
  CHECK(rep.subjects_per_run == 2);
  CHECK(fs::exists(td.sub("report") + ".csv"));
  CHECK(fs::exists(td.sub("report") + ".txt"));
}

TEST_CASE("eval of the ground truth against itself is perfect") {
  TempDir td;
  write_text(td.sub("cfg.json"), kSmallConfig);
  cli::GenOptions gen;
  gen.config = td.sub("cfg.json");
  gen.out_dir = td.sub("data");
  cli::cmd_gen(gen);

  // Stage the gt masks under prediction naming.
  fs::create_directories(td.sub("gtpred"));
  for (auto& e : read_manifest(td.sub("data"))) {
    if (e.split != Split::test) continue;
    fs::copy_file(td.sub("data") + "/" + e.gt_file, td.sub("gtpred") + "/" + e.id + "_mask.vsg");
  }
  cli::EvalOptions ev;
  ev.pred_dirs = {td.sub("gtpred")};
  ev.gt_dir = td.sub("data");
  AggregateReport rep = cli::cmd_eval(ev);
  CHECK(rep.sens.mean == 1.0);
  CHECK(rep.prec.mean == 1.0);
  CHECK(rep.dice.mean == 1.0);
  CHECK(rep.ssens.mean == 1.0);
  CHECK(rep.nfpc.mean == 0.0);
}

TEST_CASE("eval hand-computed two-subject fixture") {
  TempDir td;
  // Dataset dir with two test subjects and handmade masks.
  GenConfig gcfg;
  gcfg.n_train = 1;
  gcfg.n_validation = 1;
  gcfg.n_test = 2;
  gcfg.volume_shape = {8, 8, 8};
  gcfg.radius_min = gcfg.radius_max = 2;
  auto ds = generate_dataset<float>(gcfg);
  // Subject s002: gt = one 2x2x2 block; prediction overlaps half of it.
  BinaryMask gt1({8, 8, 8});
  for (int64_t i = 2; i < 4; ++i)
    for (int64_t j = 2; j < 4; ++j)
      for (int64_t k = 2; k < 4; ++k) gt1(i, j, k) = 1;
  ds[2].gt = gt1;
  // Subject s003: empty prediction against a nonempty gt.
  write_dataset(td.sub("data"), ds, gcfg);

  fs::create_directories(td.sub("pred"));
  BinaryMask pred1({8, 8, 8});
  for (int64_t i = 2; i < 4; ++i)
    for (int64_t j = 2; j < 4; ++j) pred1(i, j, 2) = 1;  // 4 voxels: tp=4, fn=4
  pred1(6, 6, 6) = 1;                                    // far fp cluster
  save_mask(td.sub("pred") + "/" + ds[2].id + "_mask.vsg", pred1);
  save_mask(td.sub("pred") + "/" + ds[3].id + "_mask.vsg", BinaryMask({8, 8, 8}));

  cli::EvalOptions ev;
  ev.pred_dirs = {td.sub("pred")};
  ev.gt_dir = td.sub("data");
  AggregateReport rep = cli::cmd_eval(ev);
  // Subject 1: sens 4/8, prec 4/5, dice 8/13, detected, 1 fp cluster.
  // Subject 2: all zeros, not detected, 0 fp clusters.
  CHECK(rep.sens.mean == doctest::Approx((0.5 + 0.0) / 2));
  CHECK(rep.prec.mean == doctest::Approx((0.8 + 0.0) / 2));
  CHECK(rep.dice.mean == doctest::Approx((8.0 / 13.0) / 2));
  CHECK(rep.ssens.mean == doctest::Approx(0.5));
  CHECK(rep.nfpc.mean == doctest::Approx(0.5));
}

TEST_CASE("eval aggregates two runs with the two-point std formula") {
  TempDir td;
  GenConfig gcfg;
  gcfg.n_train = 1;
  gcfg.n_validation = 1;
  gcfg.n_test = 1;
  gcfg.volume_shape = {8, 8, 8};
  gcfg.radius_min = gcfg.radius_max = 2;
  auto ds = generate_dataset<float>(gcfg);
  write_dataset(td.sub("data"), ds, gcfg);
  const auto& test_sub = ds[2];

  fs::create_directories(td.sub("runA"));
  fs::create_directories(td.sub("runB"));
  save_mask(td.sub("runA") + "/" + test_sub.id + "_mask.vsg", test_sub.gt);  // dice 1
  save_mask(td.sub("runB") + "/" + test_sub.id + "_mask.vsg", BinaryMask({8, 8, 8}));  // dice 0

  cli::EvalOptions ev;
  ev.pred_dirs = {td.sub("runA"), td.sub("runB")};
  ev.gt_dir = td.sub("data");
  ev.runs = 2;
  AggregateReport rep = cli::cmd_eval(ev);
  CHECK(rep.runs == 2);
  CHECK(rep.dice.mean == doctest::Approx(0.5));
  CHECK(rep.dice.stddev == doctest::Approx(0.5));  // population std of {1, 0}

  ev.runs = 3;
  CHECK_THROWS_AS(cli::cmd_eval(ev), InvalidArgument);
}

TEST_CASE("postproc on an empty directory is an io error") {
  TempDir td;
  fs::create_directories(td.sub("empty"));
  cli::PostprocOptions pp;
  pp.in_dir = td.sub("empty");
  pp.out_dir = td.sub("out");
  CHECK_THROWS_AS(cli::cmd_postproc(pp), IoError);
}

TEST_CASE("postproc removes a small blob with the default 50-voxel filter") {
  TempDir td;
  fs::create_directories(td.sub("in"));
  BinaryMask m({16, 16, 16});
  for (int64_t i = 5; i < 7; ++i)
    for (int64_t j = 5; j < 7; ++j)
      for (int64_t k = 5; k < 7; ++k) m(i, j, k) = 1;  // 8-voxel blob, below 50
  save_mask(td.sub("in") + "/x_mask.vsg", m);
  cli::PostprocOptions pp;
  pp.in_dir = td.sub("in");
  pp.out_dir = td.sub("out");
  cli::cmd_postproc(pp);
  CHECK(load_mask(td.sub("out") + "/x_mask.vsg").count_ones() == 0);
}

TEST_CASE("predict rejects a checkpoint that contradicts an explicit net config") {
  TempDir td;
  write_text(td.sub("cfg.json"), kSmallConfig);
  cli::GenOptions gen;
  gen.config = td.sub("cfg.json");
  gen.out_dir = td.sub("data");
  cli::cmd_gen(gen);
  cli::TrainOptions tr;
  tr.config = td.sub("cfg.json");
  tr.data_dir = td.sub("data");
  tr.out_dir = td.sub("run");
  cli::cmd_train(tr);

  write_text(td.sub("other.json"), R"({
    "net": {"base_channels": 8, "num_stages": 2, "attn_start_stage": 1, "attn_reduced_dim": 4},
    "augment": {"crop_size": [8, 8, 8]},
    "infer": {"window": [16, 16, 16]}
  })");
  cli::PredictOptions pr;
  pr.ckpt = td.sub("run") + "/best.vsgc";
  pr.data_dir = td.sub("data");
  pr.out_dir = td.sub("predx");
  pr.config = td.sub("other.json");
  CHECK_THROWS_AS(cli::cmd_predict(pr), FormatMismatchError);
}

TEST_CASE("resumed training via the cli equals the uninterrupted run bitwise") {
  TempDir td;
  write_text(td.sub("cfg.json"), kSmallConfig);
  cli::GenOptions gen;
  gen.config = td.sub("cfg.json");
  gen.out_dir = td.sub("data");
  cli::cmd_gen(gen);

  cli::TrainOptions full;
  full.config = td.sub("cfg.json");
  full.data_dir = td.sub("data");
  full.out_dir = td.sub("full");
  cli::cmd_train(full);

  cli::TrainOptions part = full;
  part.out_dir = td.sub("part");
  part.stop_after = 1;
  cli::cmd_train(part);
  cli::TrainOptions cont = full;
  cont.out_dir = td.sub("cont");
  cont.resume = td.sub("part") + "/last.vsgc";
  cli::cmd_train(cont);

  CHECK(read_bytes(td.sub("full") + "/best.vsgc") == read_bytes(td.sub("cont") + "/best.vsgc"));
  CHECK(read_bytes(td.sub("full") + "/last.vsgc") == read_bytes(td.sub("cont") + "/last.vsgc"));
  CHECK(read_bytes(td.sub("full") + "/epochs.csv") == read_bytes(td.sub("cont") + "/epochs.csv"));
}

TEST_CASE("gradcheck passes in both precisions and catches an injected sign bug") {
  cli::GradcheckOptions gc;
  gc.seed = 4242;
  CHECK(cli::cmd_gradcheck(gc));
  gc.precision = "single";
  CHECK(cli::cmd_gradcheck(gc));
  gc.precision = "half";
  CHECK_THROWS_AS(cli::cmd_gradcheck(gc), InvalidArgument);

  // Harness sensitivity: a TV gradient with flipped signs must be flagged.
  VolumeD p(1, {4, 4, 4});
  Rng rng = make_stream(31337, 0);
  for (int64_t i = 0; i < p.size(); ++i) p.data()[i] = rng.uniform(0.05, 0.95);
  auto broken_tv = [](const VolumeD& q) {
    LossOutput<double> out = tv_loss(q);
    for (int64_t i = 0; i < out.grad.size(); ++i) out.grad.data()[i] = -out.grad.data()[i];
    return out;
  };
  auto res = check_gradient<double>(broken_tv, p, 1e-5,
                                    [&](int64_t i) { return tv_tie_near(p, i, 4e-5); });
  CHECK(res.max_rel_err > 1e-5);
}

TEST_CASE("repro-trend pipeline wiring on a miniature configuration") {
  TempDir td;
  TrendSettings s = TrendSettings::desk_defaults(td.sub("exp"));
  s.presets = {"dice", "dice_tv"};
  s.n_seeds = 1;
  s.jobs = 2;
  s.cfg.gen.n_train = 2;
  s.cfg.gen.n_validation = 1;
  s.cfg.gen.n_test = 2;
  s.cfg.gen.volume_shape = {16, 16, 16};
  s.cfg.gen.radius_min = 2;
  s.cfg.gen.radius_max = 3;
  s.cfg.net.base_channels = 2;
  s.cfg.net.num_stages = 2;
  s.cfg.net.attn_start_stage = 1;
  s.cfg.net.attn_reduced_dim = 2;
  s.cfg.augment.crop_size = {8, 8, 8};
  s.cfg.train.max_epochs = 2;
  s.cfg.train.warmup_epochs = 1;
  s.cfg.infer.window = {16, 16, 16};

  TrendReport rep = run_trend_experiment_to_dir(s);
  CHECK(rep.runs.size() == 2);
  CHECK(rep.pre_rows.size() == 2);
  CHECK(rep.post_rows.size() == 2);
  CHECK(fs::exists(td.sub("exp") + "/data/manifest.json"));
  CHECK(fs::exists(td.sub("exp") + "/dice_s0/best.vsgc"));
  CHECK(fs::exists(td.sub("exp") + "/dice_tv_s0/pred/s003_mask.vsg"));
  CHECK(fs::exists(td.sub("exp") + "/dice_tv_s0/post/s004_mask.vsg"));
  CHECK(fs::exists(td.sub("exp") + "/report_pre.csv"));
  CHECK(fs::exists(td.sub("exp") + "/report.txt"));
  CHECK(rep.pre_row("dice").runs == 1);
  CHECK(rep.pre_row("dice_tv").subjects_per_run == 2);

  // The same settings produce the same report regardless of job count.
  TrendSettings s1 = s;
  s1.jobs = 1;
  s1.out_dir = td.sub("exp1");
  TrendReport rep1 = run_trend_experiment_to_dir(s1);
  CHECK(rep1.pre_row("dice").dice.mean == rep.pre_row("dice").dice.mean);
  CHECK(rep1.post_row("dice_tv").nfpc.mean == rep.post_row("dice_tv").nfpc.mean);
  CHECK(read_bytes(td.sub("exp") + "/report_pre.csv") ==
        read_bytes(td.sub("exp1") + "/report_pre.csv"));
}

}  // TEST_SUITE
