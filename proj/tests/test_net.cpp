#include <doctest.h>

#include <cmath>
#include <cstdio>

#include "tvseg/gradcheck.hpp"
#include "tvseg/losses.hpp"
#include "tvseg/net.hpp"
#include "tvseg/rng.hpp"

using namespace tvseg;

namespace {

VolumeD random_volume(int64_t ch, Shape3 s, uint64_t seed, double lo = -1, double hi = 1) {
  VolumeD v(ch, s);
  Rng rng = make_stream(seed, 0x201);
  for (int64_t i = 0; i < v.size(); ++i) v.data()[i] = rng.uniform(lo, hi);
  return v;
}

void randomize(Tensor<double>& t, Rng& rng, double scale = 0.5) {
  for (int64_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform(-scale, scale);
}

// FD check of every parameter gradient for a scalar functional of the output.
template <typename ScalarFn>
double fd_params(NetParams<double>& params, NetParams<double>& grads, ScalarFn value, double h,
                 double floor) {
  auto pts = collect_tensors(params);
  auto gts = collect_tensors(grads);
  REQUIRE(pts.size() == gts.size());
  double worst = 0.0;
  for (size_t ti = 0; ti < pts.size(); ++ti) {
    Tensor<double>& t = *pts[ti].tensor;
    const Tensor<double>& g = *gts[ti].tensor;
    for (int64_t i = 0; i < t.numel(); ++i) {
      const double saved = t[i];
      t.v[i] = saved + h;
      const double up = value();
      t.v[i] = saved - h;
      const double dn = value();
      t.v[i] = saved;
      const double fd = (up - dn) / (2 * h);
      const double e = rel_err(g[i], fd, floor);
      if (e > worst) worst = e;
    }
  }
  return worst;
}

VolumeD direction_like(const VolumeD& y, uint64_t seed) {
  return random_volume(y.channels(), y.shape(), seed);
}

double dot(const VolumeD& a, const VolumeD& b) {
  double acc = 0;
  for (int64_t i = 0; i < a.size(); ++i) acc += a.data()[i] * b.data()[i];
  return acc;
}

NetConfig tiny_cfg() {
  NetConfig cfg;
  cfg.in_channels = 2;
  cfg.base_channels = 2;
  cfg.num_stages = 2;
  cfg.attn_start_stage = 1;
  cfg.attn_reduced_dim = 2;
  return cfg;
}

}  // namespace

TEST_SUITE("net") {

TEST_CASE("init is deterministic given the seed") {
  NetConfig cfg = tiny_cfg();
  auto a = init_params<float>(cfg, 7);
  auto b = init_params<float>(cfg, 7);
  auto c = init_params<float>(cfg, 8);
  auto ta = collect_tensors(a), tb = collect_tensors(b), tc = collect_tensors(c);
  bool all_equal = true, any_diff = false;
  for (size_t i = 0; i < ta.size(); ++i) {
    if (ta[i].tensor->v != tb[i].tensor->v) all_equal = false;
    if (ta[i].tensor->v != tc[i].tensor->v) any_diff = true;
  }
  CHECK(all_equal);
  CHECK(any_diff);
}

TEST_CASE("norm scales are exactly one and biases zero after init") {
  auto p = init_params<double>(tiny_cfg(), 3);
  for_each_tensor(p, [&](const std::string& name, const Tensor<double>& t) {
    if (name.find("n1.g") != std::string::npos || name.find("n2.g") != std::string::npos ||
        name.find("postn.g") != std::string::npos)
      for (int64_t i = 0; i < t.numel(); ++i) CHECK(t[i] == 1.0);
    if (name.size() > 2 && name.substr(name.size() - 2) == ".b")
      for (int64_t i = 0; i < t.numel(); ++i) CHECK(t[i] == 0.0);
  });
}

TEST_CASE("kaiming init empirical std matches the formula within 5 percent") {
  // fan_in = 8*27 = 216 with >= 1e4 draws in one kernel tensor.
  NetConfig cfg;
  cfg.in_channels = 8;
  cfg.base_channels = 48;
  cfg.num_stages = 2;
  cfg.attn_start_stage = 2;  // beyond num_stages-1: no attention blocks
  auto p = init_params<double>(cfg, 11);
  const Tensor<double>& w = p.enc[0].trans.w;  // (48, 8, 3,3,3) = 10368 entries
  REQUIRE(w.numel() >= 10000);
  double mean = 0;
  for (int64_t i = 0; i < w.numel(); ++i) mean += w[i];
  mean /= static_cast<double>(w.numel());
  double var = 0;
  for (int64_t i = 0; i < w.numel(); ++i) var += (w[i] - mean) * (w[i] - mean);
  var /= static_cast<double>(w.numel());
  const double expected = std::sqrt(2.0 / (216.0 * (1.0 + cfg.leaky_slope * cfg.leaky_slope)));
  CHECK(std::sqrt(var) == doctest::Approx(expected).epsilon(0.05));
}

TEST_CASE("xavier init stays within the uniform limit") {
  auto p = init_params<double>(tiny_cfg(), 5);
  REQUIRE(!p.dsa.empty());
  const Tensor<double>& wq = p.dsa[0].wq;
  const double limit = std::sqrt(6.0 / static_cast<double>(wq.shape[0] + wq.shape[1]));
  for (int64_t i = 0; i < wq.numel(); ++i) {
    CHECK(wq[i] <= limit);
    CHECK(wq[i] >= -limit);
  }
}

TEST_CASE("conv3d identity kernel reproduces the input") {
  VolumeD x = random_volume(3, {4, 4, 4}, 21);
  Tensor<double> w({3, 3, 3, 3, 3});
  for (int64_t c = 0; c < 3; ++c) w.v[((c * 3 + c) * 27) + 13] = 1.0;  // center tap
  Tensor<double> b({3});
  CHECK(conv3d_forward(x, w, b) == x);
}

TEST_CASE("conv3d of zero input is the bias") {
  VolumeD x(2, {3, 3, 3}, 0.0);
  Tensor<double> w({4, 2, 3, 3, 3});
  Rng rng = make_stream(1, 1);
  randomize(w, rng);
  Tensor<double> b({4});
  b.v[0] = 0.5;
  b.v[1] = -1.5;
  b.v[2] = 0.0;
  b.v[3] = 2.0;
  VolumeD y = conv3d_forward(x, w, b);
  for (int64_t c = 0; c < 4; ++c)
    for (int64_t i = 0; i < 27; ++i) CHECK(y.channel(c)[i] == b[c]);
}

TEST_CASE("conv3d matches a seven-loop scalar oracle") {
  VolumeD x = random_volume(1, {3, 3, 3}, 31);
  Tensor<double> w({2, 1, 3, 3, 3});
  Tensor<double> b({2});
  Rng rng = make_stream(2, 2);
  randomize(w, rng);
  b.v[0] = 0.3;
  b.v[1] = -0.2;
  VolumeD y = conv3d_forward(x, w, b);

  const Shape3 s = x.shape();
  for (int64_t co = 0; co < 2; ++co)
    for (int64_t z = 0; z < s.d; ++z)
      for (int64_t yy = 0; yy < s.h; ++yy)
        for (int64_t xx = 0; xx < s.w; ++xx) {
          double acc = b[co];
          for (int64_t ci = 0; ci < 1; ++ci)
            for (int64_t dz = 0; dz < 3; ++dz)
              for (int64_t dy = 0; dy < 3; ++dy)
                for (int64_t dx = 0; dx < 3; ++dx) {
                  const int64_t zi = z + dz - 1, yi = yy + dy - 1, xi = xx + dx - 1;
                  if (zi < 0 || zi >= s.d || yi < 0 || yi >= s.h || xi < 0 || xi >= s.w) continue;
                  acc += w[((co * 1 + ci) * 27) + (dz * 3 + dy) * 3 + dx] * x(ci, zi, yi, xi);
                }
          CHECK(y(co, z, yy, xx) == doctest::Approx(acc).epsilon(1e-12));
        }
}

TEST_CASE("conv3d backward matches finite differences") {
  VolumeD x = random_volume(2, {3, 4, 3}, 41);
  Tensor<double> w({2, 2, 3, 3, 3}), b({2});
  Rng rng = make_stream(3, 3);
  randomize(w, rng);
  randomize(b, rng);
  VolumeD u = direction_like(conv3d_forward(x, w, b), 99);

  VolumeD gx;
  Tensor<double> gw = zeros_like(w), gb = zeros_like(b);
  conv3d_backward(x, w, u, gx, gw, gb);

  const double h = 1e-6;
  double worst = 0;
  for (int64_t i = 0; i < w.numel(); ++i) {
    const double s = w[i];
    w.v[i] = s + h;
    const double up = dot(conv3d_forward(x, w, b), u);
    w.v[i] = s - h;
    const double dn = dot(conv3d_forward(x, w, b), u);
    w.v[i] = s;
    worst = std::max(worst, rel_err(gw[i], (up - dn) / (2 * h), 1e-6));
  }
  for (int64_t i = 0; i < x.size(); ++i) {
    const double s = x.data()[i];
    x.data()[i] = s + h;
    const double up = dot(conv3d_forward(x, w, b), u);
    x.data()[i] = s - h;
    const double dn = dot(conv3d_forward(x, w, b), u);
    x.data()[i] = s;
    worst = std::max(worst, rel_err(gx.data()[i], (up - dn) / (2 * h), 1e-6));
  }
  CHECK(worst < 1e-6);
}

TEST_CASE("instance norm constant channel collapses to the shift") {
  VolumeD x(2, {3, 3, 3}, 5.0);
  Tensor<double> g({2}), b({2});
  g.v[0] = 2.0;
  g.v[1] = 3.0;
  b.v[0] = -1.0;
  b.v[1] = 0.25;
  VolumeD y = instnorm_forward(x, g, b, 1e-5, static_cast<InstNormCache<double>*>(nullptr));
  for (int64_t i = 0; i < 27; ++i) {
    CHECK(y.channel(0)[i] == doctest::Approx(-1.0));
    CHECK(y.channel(1)[i] == doctest::Approx(0.25));
  }
}

TEST_CASE("instance norm normalizes to zero mean unit variance") {
  VolumeD x = random_volume(2, {4, 4, 4}, 51, -3, 7);
  Tensor<double> g({2}), b({2});
  g.fill(1.0);
  VolumeD y = instnorm_forward(x, g, b, 1e-8, static_cast<InstNormCache<double>*>(nullptr));
  for (int64_t c = 0; c < 2; ++c) {
    double mean = 0, var = 0;
    for (int64_t i = 0; i < 64; ++i) mean += y.channel(c)[i];
    mean /= 64;
    for (int64_t i = 0; i < 64; ++i) var += (y.channel(c)[i] - mean) * (y.channel(c)[i] - mean);
    var /= 64;
    CHECK(std::fabs(mean) < 1e-6);
    CHECK(var == doctest::Approx(1.0).epsilon(1e-4));
  }
}

TEST_CASE("instance norm backward matches finite differences") {
  VolumeD x = random_volume(2, {3, 3, 2}, 61);
  Tensor<double> g({2}), b({2});
  Rng rng = make_stream(4, 4);
  randomize(g, rng, 1.0);
  randomize(b, rng, 1.0);
  InstNormCache<double> cache;
  VolumeD y = instnorm_forward(x, g, b, 1e-5, &cache);
  VolumeD u = direction_like(y, 77);

  VolumeD gx;
  Tensor<double> gg = zeros_like(g), gb2 = zeros_like(b);
  instnorm_backward(u, g, cache, gx, gg, gb2);

  const double h = 1e-6;
  double worst = 0;
  auto value = [&]() {
    return dot(instnorm_forward(x, g, b, 1e-5, static_cast<InstNormCache<double>*>(nullptr)), u);
  };
  for (int64_t i = 0; i < x.size(); ++i) {
    const double s = x.data()[i];
    x.data()[i] = s + h;
    const double up = value();
    x.data()[i] = s - h;
    const double dn = value();
    x.data()[i] = s;
    worst = std::max(worst, rel_err(gx.data()[i], (up - dn) / (2 * h), 1e-6));
  }
  for (int64_t i = 0; i < 2; ++i) {
    const double s = g[i];
    g.v[i] = s + h;
    const double up = value();
    g.v[i] = s - h;
    const double dn = value();
    g.v[i] = s;
    worst = std::max(worst, rel_err(gg[i], (up - dn) / (2 * h), 1e-6));
  }
  CHECK(worst < 1e-5);
}

TEST_CASE("maxpool keeps a single hot voxel") {
  VolumeD x(1, {4, 4, 4}, 0.0);
  x(0, 1, 2, 3) = 1.0;
  VolumeD y = maxpool2_forward(x, static_cast<std::vector<int64_t>*>(nullptr));
  CHECK(y.shape() == Shape3{2, 2, 2});
  int hot = 0;
  for (int64_t i = 0; i < y.size(); ++i)
    if (y.data()[i] == 1.0) ++hot;
  CHECK(hot == 1);
  CHECK(y(0, 0, 1, 1) == 1.0);
}

TEST_CASE("maxpool rejects odd dims") {
  VolumeD x(1, {3, 4, 4}, 0.0);
  CHECK_THROWS_AS(maxpool2_forward(x, static_cast<std::vector<int64_t>*>(nullptr)),
                  InvalidArgument);
}

TEST_CASE("maxpool backward routes gradient to the argmax") {
  VolumeD x = random_volume(1, {4, 4, 4}, 71);
  std::vector<int64_t> argmax;
  VolumeD y = maxpool2_forward(x, &argmax);
  VolumeD gy(1, y.shape(), 1.0);
  VolumeD gx = maxpool2_backward(gy, argmax, x.shape());
  double sum = 0;
  for (int64_t i = 0; i < gx.size(); ++i) {
    sum += gx.data()[i];
    CHECK((gx.data()[i] == 0.0 || gx.data()[i] == 1.0));
  }
  CHECK(sum == doctest::Approx(8.0));
}

TEST_CASE("deconv of a one-voxel input with all-ones kernel") {
  VolumeD x(1, {1, 1, 1}, 0.7);
  Tensor<double> w({1, 1, 2, 2, 2});
  w.fill(1.0);
  Tensor<double> b({1});
  b.v[0] = 0.1;
  VolumeD y = deconv2_forward(x, w, b);
  CHECK(y.shape() == Shape3{2, 2, 2});
  for (int64_t i = 0; i < 8; ++i) CHECK(y.data()[i] == doctest::Approx(0.8));
}

TEST_CASE("deconv backward matches finite differences") {
  VolumeD x = random_volume(3, {2, 2, 2}, 81);
  Tensor<double> w({3, 2, 2, 2, 2}), b({2});
  Rng rng = make_stream(5, 5);
  randomize(w, rng);
  randomize(b, rng);
  VolumeD u = direction_like(deconv2_forward(x, w, b), 55);

  VolumeD gx;
  Tensor<double> gw = zeros_like(w), gb = zeros_like(b);
  deconv2_backward(x, w, u, gx, gw, gb);

  const double h = 1e-6;
  double worst = 0;
  for (int64_t i = 0; i < w.numel(); ++i) {
    const double s = w[i];
    w.v[i] = s + h;
    const double up = dot(deconv2_forward(x, w, b), u);
    w.v[i] = s - h;
    const double dn = dot(deconv2_forward(x, w, b), u);
    w.v[i] = s;
    worst = std::max(worst, rel_err(gw[i], (up - dn) / (2 * h), 1e-6));
  }
  for (int64_t i = 0; i < x.size(); ++i) {
    const double s = x.data()[i];
    x.data()[i] = s + h;
    const double up = dot(deconv2_forward(x, w, b), u);
    x.data()[i] = s - h;
    const double dn = dot(deconv2_forward(x, w, b), u);
    x.data()[i] = s;
    worst = std::max(worst, rel_err(gx.data()[i], (up - dn) / (2 * h), 1e-6));
  }
  CHECK(worst < 1e-6);
}

TEST_CASE("softmax2 probabilities sum to one") {
  VolumeD z = random_volume(2, {3, 3, 3}, 91, -5, 5);
  VolumeD p = softmax2_forward(z);
  for (int64_t i = 0; i < p.voxels(); ++i) {
    const double s = p.channel(0)[i] + p.channel(1)[i];
    CHECK(std::fabs(s - 1.0) < 1e-12);
    CHECK(p.channel(0)[i] >= 0.0);
    CHECK(p.channel(1)[i] <= 1.0);
  }
}

TEST_CASE("dsa residual identity with zero value and output projections") {
  NetConfig cfg = tiny_cfg();
  auto p = init_params<double>(cfg, 17);
  REQUIRE(!p.dsa.empty());
  DsaP<double>& d = p.dsa[0];
  d.wvs.fill(0);
  d.wvc.fill(0);
  d.wos.fill(0);
  d.woc.fill(0);
  VolumeD f = random_volume(cfg.base_channels, {2, 2, 2}, 93);
  VolumeD out = dsa_forward(f, d, static_cast<DsaCache<double>*>(nullptr));
  CHECK(out == f);
}

TEST_CASE("dsa attention rows sum to one in both branches") {
  NetConfig cfg = tiny_cfg();
  auto p = init_params<double>(cfg, 19);
  VolumeD f = random_volume(cfg.base_channels, {2, 2, 2}, 95);
  DsaCache<double> cache;
  dsa_forward(f, p.dsa[0], &cache);
  for (int64_t i = 0; i < cache.N; ++i) {
    double s = 0;
    for (int64_t j = 0; j < cache.N; ++j) s += cache.A[static_cast<size_t>(i * cache.N + j)];
    CHECK(std::fabs(s - 1.0) < 1e-6);
  }
  for (int64_t i = 0; i < cache.C; ++i) {
    double s = 0;
    for (int64_t j = 0; j < cache.C; ++j) s += cache.B[static_cast<size_t>(i * cache.C + j)];
    CHECK(std::fabs(s - 1.0) < 1e-6);
  }
}

TEST_CASE("dsa gradients match finite differences") {
  NetConfig cfg = tiny_cfg();
  cfg.base_channels = 4;
  cfg.attn_reduced_dim = 2;
  auto params = init_params<double>(cfg, 23);
  DsaP<double>& d = params.dsa[0];
  VolumeD f = random_volume(4, {2, 2, 2}, 97);
  DsaCache<double> cache;
  VolumeD out = dsa_forward(f, d, &cache);
  VolumeD u = direction_like(out, 111);

  DsaP<double> gd;
  gd.wq = zeros_like(d.wq);
  gd.wk = zeros_like(d.wk);
  gd.wvs = zeros_like(d.wvs);
  gd.wvc = zeros_like(d.wvc);
  gd.wos = zeros_like(d.wos);
  gd.woc = zeros_like(d.woc);
  VolumeD gf = dsa_backward(u, d, gd, cache);

  const double h = 1e-6;
  double worst = 0;
  auto value = [&]() { return dot(dsa_forward(f, d, static_cast<DsaCache<double>*>(nullptr)), u); };
  Tensor<double>* ts[] = {&d.wq, &d.wk, &d.wvs, &d.wvc, &d.wos, &d.woc};
  Tensor<double>* gs[] = {&gd.wq, &gd.wk, &gd.wvs, &gd.wvc, &gd.wos, &gd.woc};
  for (int t = 0; t < 6; ++t)
    for (int64_t i = 0; i < ts[t]->numel(); ++i) {
      const double s = (*ts[t])[i];
      ts[t]->v[i] = s + h;
      const double up = value();
      ts[t]->v[i] = s - h;
      const double dn = value();
      ts[t]->v[i] = s;
      worst = std::max(worst, rel_err((*gs[t])[i], (up - dn) / (2 * h), 1e-6));
    }
  for (int64_t i = 0; i < f.size(); ++i) {
    const double s = f.data()[i];
    f.data()[i] = s + h;
    const double up = value();
    f.data()[i] = s - h;
    const double dn = value();
    f.data()[i] = s;
    worst = std::max(worst, rel_err(gf.data()[i], (up - dn) / (2 * h), 1e-6));
  }
  CHECK(worst < 1e-5);
}

TEST_CASE("encoder stage zero-kernel ablation reduces to the plain path") {
  NetConfig cfg = tiny_cfg();
  auto p = init_params<double>(cfg, 29);
  BlockP<double>& blk = p.enc[0];
  blk.ru.c1.w.fill(0);
  blk.ru.c1.b.fill(0);
  blk.ru.c2.w.fill(0);
  blk.ru.c2.b.fill(0);
  VolumeD x = random_volume(cfg.in_channels, {4, 4, 4}, 201);
  VolumeD out = block_forward(x, blk, cfg, static_cast<BlockTape<double>*>(nullptr));

  // The residual unit contributes exactly zero, leaving trans -> post.
  VolumeD t = conv3d_forward(x, blk.trans.w, blk.trans.b);
  VolumeD c = conv3d_forward(t, blk.post.w, blk.post.b);
  VolumeD n = instnorm_forward(c, blk.postn.gamma, blk.postn.beta, cfg.norm_eps,
                               static_cast<InstNormCache<double>*>(nullptr));
  VolumeD expect =
      leaky_relu_forward(n, cfg.leaky_slope, static_cast<std::vector<uint8_t>*>(nullptr));
  CHECK(out == expect);
}

TEST_CASE("encoder stage returns same-size features and halved pooled output") {
  NetConfig cfg = tiny_cfg();
  auto p = init_params<double>(cfg, 31);
  VolumeD x = random_volume(cfg.in_channels, {4, 4, 4}, 203);
  auto [features, pooled] = encoder_stage_forward(x, p.enc[0], cfg);
  CHECK(features.shape() == x.shape());
  CHECK(features.channels() == cfg.base_channels);
  CHECK(pooled.shape() == Shape3{2, 2, 2});
  CHECK(pooled.channels() == cfg.base_channels);

  VolumeD odd = random_volume(cfg.in_channels, {3, 4, 4}, 204);
  CHECK_THROWS_AS(encoder_stage_forward(odd, p.enc[0], cfg), InvalidArgument);
}

TEST_CASE("encoder stage gradients match finite differences") {
  NetConfig cfg = tiny_cfg();
  auto params = init_params<double>(cfg, 33);
  VolumeD x = random_volume(cfg.in_channels, {4, 4, 4}, 230, -0.5, 0.5);
  BlockTape<double> tape;
  VolumeD out = block_forward(x, params.enc[0], cfg, &tape);
  VolumeD u = direction_like(out, 231);

  NetParams<double> grads = zeros_like(params);
  block_backward(u, params.enc[0], grads.enc[0], cfg, tape);

  auto value = [&]() {
    return dot(block_forward(x, params.enc[0], cfg, static_cast<BlockTape<double>*>(nullptr)), u);
  };
  double worst = 0;
  Tensor<double>* ts[] = {&params.enc[0].trans.w, &params.enc[0].trans.b,
                          &params.enc[0].ru.c1.w, &params.enc[0].ru.n1.gamma,
                          &params.enc[0].ru.c2.w, &params.enc[0].ru.n2.beta,
                          &params.enc[0].post.w,  &params.enc[0].postn.gamma};
  Tensor<double>* gs[] = {&grads.enc[0].trans.w, &grads.enc[0].trans.b,
                          &grads.enc[0].ru.c1.w, &grads.enc[0].ru.n1.gamma,
                          &grads.enc[0].ru.c2.w, &grads.enc[0].ru.n2.beta,
                          &grads.enc[0].post.w,  &grads.enc[0].postn.gamma};
  const double h = 1e-5;
  for (int t = 0; t < 8; ++t)
    for (int64_t i = 0; i < ts[t]->numel(); ++i) {
      const double s = (*ts[t])[i];
      ts[t]->v[i] = s + h;
      const double up = value();
      ts[t]->v[i] = s - h;
      const double dn = value();
      ts[t]->v[i] = s;
      worst = std::max(worst, rel_err((*gs[t])[i], (up - dn) / (2 * h), 1e-6));
    }
  CHECK(worst < 1e-4);
}

TEST_CASE("decoder stage without skip consumes only upsampled features") {
  NetConfig cfg;
  cfg.in_channels = 2;
  cfg.base_channels = 2;
  cfg.num_stages = 3;
  cfg.attn_start_stage = 2;  // level 1 has no skip
  auto p = init_params<double>(cfg, 37);
  DecP<double>& d1 = p.dec.back();
  CHECK(d1.block.trans.w.shape[1] == cfg.stage_channels(1));
  VolumeD from_below = random_volume(cfg.stage_channels(2), {2, 2, 2}, 205);
  VolumeD out = decoder_stage_forward(from_below, static_cast<const VolumeD*>(nullptr), d1, cfg);
  CHECK(out.channels() == cfg.stage_channels(1));
  CHECK(out.shape() == Shape3{4, 4, 4});

  DecP<double>& d2 = p.dec.front();
  CHECK(d2.block.trans.w.shape[1] == 2 * cfg.stage_channels(2));
  VolumeD bottom = random_volume(cfg.stage_channels(3), {1, 1, 1}, 206);
  VolumeD skip = random_volume(cfg.stage_channels(2), {2, 2, 2}, 207);
  VolumeD out2 = decoder_stage_forward(bottom, &skip, d2, cfg);
  CHECK(out2.channels() == cfg.stage_channels(2));
  CHECK(out2.shape() == Shape3{2, 2, 2});

  VolumeD bad_skip = random_volume(cfg.stage_channels(2), {4, 4, 4}, 208);
  CHECK_THROWS_AS(decoder_stage_forward(bottom, &bad_skip, d2, cfg), InvalidArgument);
}

TEST_CASE("forward output: softmax sums, spatial shape, divisibility error") {
  NetConfig cfg = tiny_cfg();
  auto p = init_params<double>(cfg, 41);
  VolumeD x = random_volume(2, {4, 6, 4}, 209);
  auto [probs, tape] = net_forward(p, x, false);
  CHECK(probs.channels() == 2);
  CHECK(probs.shape() == x.shape());
  for (int64_t i = 0; i < probs.voxels(); ++i)
    CHECK(std::fabs(probs.channel(0)[i] + probs.channel(1)[i] - 1.0) < 1e-6);

  VolumeD bad = random_volume(2, {5, 4, 4}, 210);
  CHECK_THROWS_WITH_AS(net_forward(p, bad, false).first, doctest::Contains("divisible by"),
                       InvalidArgument);
}

TEST_CASE("forward is deterministic") {
  NetConfig cfg = tiny_cfg();
  auto p = init_params<float>(cfg, 43);
  Volume<float> x(2, {4, 4, 4});
  Rng rng = make_stream(6, 6);
  for (int64_t i = 0; i < x.size(); ++i) x.data()[i] = static_cast<float>(rng.uniform(-1, 1));
  auto a = net_forward(p, x, false).first;
  auto b = net_forward(p, x, false).first;
  CHECK(a == b);
}

TEST_CASE("backward linearity in the upstream gradient") {
  NetConfig cfg = tiny_cfg();
  auto p = init_params<double>(cfg, 47);
  VolumeD x = random_volume(2, {4, 4, 4}, 211);
  auto [probs, tape] = net_forward(p, x, true);

  NetParams<double> gz = zeros_like(p);
  VolumeD zero(2, probs.shape(), 0.0);
  net_backward(p, tape, zero, gz);
  for_each_tensor(gz, [&](const std::string&, const Tensor<double>& t) {
    for (int64_t i = 0; i < t.numel(); ++i) CHECK(t[i] == 0.0);
  });

  VolumeD u = direction_like(probs, 212);
  NetParams<double> g1 = zeros_like(p), g2 = zeros_like(p);
  net_backward(p, tape, u, g1);
  VolumeD u2 = u;
  for (int64_t i = 0; i < u2.size(); ++i) u2.data()[i] *= 2.0;
  net_backward(p, tape, u2, g2);
  auto t1 = collect_tensors(g1), t2 = collect_tensors(g2);
  for (size_t i = 0; i < t1.size(); ++i)
    for (int64_t j = 0; j < t1[i].tensor->numel(); ++j)
      CHECK((*t2[i].tensor)[j] == doctest::Approx(2.0 * (*t1[i].tensor)[j]).epsilon(1e-12));
}

TEST_CASE("full network parameter gradients match finite differences") {
  NetConfig cfg = tiny_cfg();
  auto params = init_params<double>(cfg, 53);
  VolumeD x = random_volume(2, {4, 4, 4}, 213, -0.5, 0.5);
  BinaryMask g(x.shape());
  Rng rng = make_stream(7, 7);
  for (int64_t i = 0; i < g.voxels(); ++i) g.data()[i] = rng.bernoulli(0.25);
  LossConfig lcfg = LossConfig::preset("dice_tv");

  auto loss_value = [&]() {
    auto probs = net_forward(params, x, false).first;
    return total_loss(slice_channel(probs, 1), g, lcfg).value;
  };

  auto [probs, tape] = net_forward(params, x, true);
  auto lo = total_loss(slice_channel(probs, 1), g, lcfg);
  VolumeD gprobs(2, probs.shape(), 0.0);
  std::copy(lo.grad.data(), lo.grad.data() + lo.grad.size(), gprobs.channel(1));
  NetParams<double> grads = zeros_like(params);
  net_backward(params, tape, gprobs, grads);

  const double worst = fd_params(params, grads, loss_value, 1e-5, 1e-6);
  INFO("worst rel err ", worst);
  CHECK(worst < 1e-4);
}

TEST_CASE("jvp directional derivatives match analytic gradients") {
  NetConfig cfg = tiny_cfg();
  auto params = init_params<double>(cfg, 59);
  VolumeD x = random_volume(2, {4, 4, 4}, 215, -0.5, 0.5);
  BinaryMask g(x.shape());
  Rng rng = make_stream(8, 8);
  for (int64_t i = 0; i < g.voxels(); ++i) g.data()[i] = rng.bernoulli(0.3);
  LossConfig lcfg = LossConfig::preset("dice_bce");

  auto [probs, tape] = net_forward(params, x, true);
  auto lo = total_loss(slice_channel(probs, 1), g, lcfg);
  VolumeD gprobs(2, probs.shape(), 0.0);
  std::copy(lo.grad.data(), lo.grad.data() + lo.grad.size(), gprobs.channel(1));
  NetParams<double> grads = zeros_like(params);
  net_backward(params, tape, gprobs, grads);

  auto pts = collect_tensors(params);
  auto gts = collect_tensors(grads);
  const double h = 1e-5;
  for (int dir = 0; dir < 10; ++dir) {
    Rng drng = make_stream(1000, static_cast<uint64_t>(dir));
    std::vector<std::vector<double>> u(pts.size());
    double analytic = 0;
    for (size_t t = 0; t < pts.size(); ++t) {
      u[t].resize(static_cast<size_t>(pts[t].tensor->numel()));
      for (size_t i = 0; i < u[t].size(); ++i) {
        u[t][i] = drng.uniform(-1, 1);
        analytic += u[t][i] * (*gts[t].tensor)[static_cast<int64_t>(i)];
      }
    }
    auto shift = [&](double eps) {
      for (size_t t = 0; t < pts.size(); ++t)
        for (size_t i = 0; i < u[t].size(); ++i) pts[t].tensor->v[i] += eps * u[t][i];
    };
    shift(h);
    const double up =
        total_loss(slice_channel(net_forward(params, x, false).first, 1), g, lcfg).value;
    shift(-2 * h);
    const double dn =
        total_loss(slice_channel(net_forward(params, x, false).first, 1), g, lcfg).value;
    shift(h);
    const double fd = (up - dn) / (2 * h);
    CHECK(rel_err(analytic, fd, 1e-8) < 1e-4);
  }
}

TEST_CASE("stale or mismatched tape is rejected") {
  NetConfig cfg = tiny_cfg();
  auto p = init_params<double>(cfg, 61);
  VolumeD x = random_volume(2, {4, 4, 4}, 217);
  auto [probs, tape] = net_forward(p, x, true);

  NetTape<double> blank;
  NetParams<double> grads = zeros_like(p);
  VolumeD u = direction_like(probs, 218);
  CHECK_THROWS_AS(net_backward(p, blank, u, grads), InvalidArgument);

  NetConfig other = cfg;
  other.base_channels = 4;
  auto p2 = init_params<double>(other, 61);
  NetParams<double> grads2 = zeros_like(p2);
  CHECK_THROWS_AS(net_backward(p2, tape, u, grads2), InvalidArgument);

  VolumeD bad_u(2, {2, 2, 2}, 0.0);
  CHECK_THROWS_AS(net_backward(p, tape, bad_u, grads), InvalidArgument);
}

TEST_CASE("full-scale configuration constructs and reports its parameter count") {
  const NetConfig cfg = NetConfig::full_scale();
  cfg.validate();
  const int64_t n = param_count(cfg);
  CHECK(n > 10'000'000);
  std::printf("full-scale configuration: %lld trainable parameters\n",
              static_cast<long long>(n));
}

}  // TEST_SUITE
