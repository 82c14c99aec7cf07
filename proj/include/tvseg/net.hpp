#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "tvseg/core.hpp"
#include "tvseg/layers.hpp"
#include "tvseg/rng.hpp"
#include "tvseg/tensor.hpp"

namespace tvseg {

/// Architecture of the miniature encoder-decoder segmentation network:
/// `num_stages` encoder blocks doubling channels (residual units of two convs
/// with instance norm and leaky ReLU, then a post conv+norm+activation),
/// 2x2x2 max-pool downsampling between stages, a mirrored decoder of
/// num_stages-1 blocks (2x2x2 stride-2 deconv, skip concat, residual block),
/// dual self-attention on skip connections from `attn_start_stage` up, and a
/// 1x1x1 head producing two softmax channels (background, lesion).
struct NetConfig {
  int64_t in_channels = 2;
  int64_t base_channels = 8;
  int64_t num_stages = 3;
  int64_t attn_start_stage = 2;
  int64_t attn_reduced_dim = 8;
  double leaky_slope = 0.01;
  double norm_eps = 1e-5;
  static constexpr int64_t out_channels = 2;

  int64_t stage_channels(int64_t stage) const { return base_channels << (stage - 1); }
  int64_t divisibility() const { return int64_t(1) << (num_stages - 1); }
  bool has_dsa(int64_t level) const {
    return level >= attn_start_stage && level <= num_stages - 1;
  }

  void validate() const {
    if (num_stages < 2) throw InvalidArgument("net.num_stages must be >= 2");
    if (base_channels < 1) throw InvalidArgument("net.base_channels must be >= 1");
    if (in_channels < 1) throw InvalidArgument("net.in_channels must be >= 1");
    if (attn_start_stage < 1 || attn_start_stage > num_stages)
      throw InvalidArgument("net.attn_start_stage must be in [1, num_stages]");
    if (attn_reduced_dim < 1) throw InvalidArgument("net.attn_reduced_dim must be >= 1");
    if (!(leaky_slope >= 0 && leaky_slope < 1)) throw InvalidArgument("net.leaky_slope out of range");
  }

  /// The published full-scale configuration, constructible for parameter
  /// counting; desk workflows never run it.
  static NetConfig full_scale() {
    NetConfig cfg;
    cfg.in_channels = 2;
    cfg.base_channels = 16;
    cfg.num_stages = 6;
    cfg.attn_start_stage = 3;
    cfg.attn_reduced_dim = 32;
    return cfg;
  }
};

// ---------------------------------------------------------------------------
// Parameter containers
// ---------------------------------------------------------------------------

template <typename T>
struct ConvP {
  Tensor<T> w, b;
};

template <typename T>
struct NormP {
  Tensor<T> gamma, beta;
};

/// Residual unit: conv-norm-act-conv-norm, added back onto its input.
template <typename T>
struct ResUnitP {
  ConvP<T> c1;
  NormP<T> n1;
  ConvP<T> c2;
  NormP<T> n2;
};

/// One encoder/decoder processing block: channel-transition conv, residual
/// unit, then conv+norm+activation after the residual add.
template <typename T>
struct BlockP {
  ConvP<T> trans;
  ResUnitP<T> ru;
  ConvP<T> post;
  NormP<T> postn;
};

/// Dual self-attention projections; queries/keys are shared by the spatial
/// and channel branches, value/output projections are separate.
template <typename T>
struct DsaP {
  Tensor<T> wq, wk;    // (C, r)
  Tensor<T> wvs, wvc;  // (C, C)
  Tensor<T> wos, woc;  // (C, C)
};

template <typename T>
struct DecP {
  Tensor<T> deconv_w, deconv_b;  // (ci, co, 2,2,2)
  BlockP<T> block;
};

template <typename T>
struct NetParams {
  NetConfig cfg;
  std::vector<BlockP<T>> enc;  // index s-1 for stage s = 1..num_stages
  std::vector<DsaP<T>> dsa;    // index level - attn_start_stage
  std::vector<DecP<T>> dec;    // execution order: level num_stages-1 .. 1
  ConvP<T> head;               // 1x1x1, base_channels -> 2
};

namespace detail {

template <typename T>
BlockP<T> make_block(int64_t cin, int64_t c) {
  BlockP<T> b;
  b.trans.w = Tensor<T>({c, cin, 3, 3, 3});
  b.trans.b = Tensor<T>({c});
  b.ru.c1.w = Tensor<T>({c, c, 3, 3, 3});
  b.ru.c1.b = Tensor<T>({c});
  b.ru.n1.gamma = Tensor<T>({c});
  b.ru.n1.beta = Tensor<T>({c});
  b.ru.c2.w = Tensor<T>({c, c, 3, 3, 3});
  b.ru.c2.b = Tensor<T>({c});
  b.ru.n2.gamma = Tensor<T>({c});
  b.ru.n2.beta = Tensor<T>({c});
  b.post.w = Tensor<T>({c, c, 3, 3, 3});
  b.post.b = Tensor<T>({c});
  b.postn.gamma = Tensor<T>({c});
  b.postn.beta = Tensor<T>({c});
  return b;
}

}  // namespace detail

/// Allocate all parameter tensors (zero-filled) for a configuration.
template <typename T>
NetParams<T> make_params(const NetConfig& cfg) {
  cfg.validate();
  NetParams<T> p;
  p.cfg = cfg;
  for (int64_t s = 1; s <= cfg.num_stages; ++s) {
    const int64_t cin = (s == 1) ? cfg.in_channels : cfg.stage_channels(s - 1);
    p.enc.push_back(detail::make_block<T>(cin, cfg.stage_channels(s)));
  }
  for (int64_t lvl = cfg.attn_start_stage; lvl <= cfg.num_stages - 1; ++lvl) {
    const int64_t c = cfg.stage_channels(lvl);
    DsaP<T> d;
    d.wq = Tensor<T>({c, cfg.attn_reduced_dim});
    d.wk = Tensor<T>({c, cfg.attn_reduced_dim});
    d.wvs = Tensor<T>({c, c});
    d.wvc = Tensor<T>({c, c});
    d.wos = Tensor<T>({c, c});
    d.woc = Tensor<T>({c, c});
    p.dsa.push_back(std::move(d));
  }
  for (int64_t lvl = cfg.num_stages - 1; lvl >= 1; --lvl) {
    const int64_t c = cfg.stage_channels(lvl);
    DecP<T> d;
    d.deconv_w = Tensor<T>({cfg.stage_channels(lvl + 1), c, 2, 2, 2});
    d.deconv_b = Tensor<T>({c});
    const int64_t cin = cfg.has_dsa(lvl) ? 2 * c : c;
    d.block = detail::make_block<T>(cin, c);
    p.dec.push_back(std::move(d));
  }
  p.head.w = Tensor<T>({NetConfig::out_channels, cfg.base_channels, 1, 1, 1});
  p.head.b = Tensor<T>({NetConfig::out_channels});
  return p;
}

/// Visit every parameter tensor in a fixed deterministic order.
template <typename T, typename Fn>
void for_each_tensor(NetParams<T>& p, Fn fn) {
  auto block = [&](const std::string& prefix, BlockP<T>& b) {
    fn(prefix + ".trans.w", b.trans.w);
    fn(prefix + ".trans.b", b.trans.b);
    fn(prefix + ".c1.w", b.ru.c1.w);
    fn(prefix + ".c1.b", b.ru.c1.b);
    fn(prefix + ".n1.g", b.ru.n1.gamma);
    fn(prefix + ".n1.b", b.ru.n1.beta);
    fn(prefix + ".c2.w", b.ru.c2.w);
    fn(prefix + ".c2.b", b.ru.c2.b);
    fn(prefix + ".n2.g", b.ru.n2.gamma);
    fn(prefix + ".n2.b", b.ru.n2.beta);
    fn(prefix + ".post.w", b.post.w);
    fn(prefix + ".post.b", b.post.b);
    fn(prefix + ".postn.g", b.postn.gamma);
    fn(prefix + ".postn.b", b.postn.beta);
  };
  for (size_t i = 0; i < p.enc.size(); ++i)
    block("enc" + std::to_string(i + 1), p.enc[i]);
  for (size_t i = 0; i < p.dsa.size(); ++i) {
    const std::string prefix = "dsa" + std::to_string(p.cfg.attn_start_stage + static_cast<int64_t>(i));
    fn(prefix + ".wq", p.dsa[i].wq);
    fn(prefix + ".wk", p.dsa[i].wk);
    fn(prefix + ".wvs", p.dsa[i].wvs);
    fn(prefix + ".wvc", p.dsa[i].wvc);
    fn(prefix + ".wos", p.dsa[i].wos);
    fn(prefix + ".woc", p.dsa[i].woc);
  }
  for (size_t i = 0; i < p.dec.size(); ++i) {
    const int64_t lvl = p.cfg.num_stages - 1 - static_cast<int64_t>(i);
    const std::string prefix = "dec" + std::to_string(lvl);
    fn(prefix + ".deconv.w", p.dec[i].deconv_w);
    fn(prefix + ".deconv.b", p.dec[i].deconv_b);
    block(prefix, p.dec[i].block);
  }
  fn("head.w", p.head.w);
  fn("head.b", p.head.b);
}

template <typename T, typename Fn>
void for_each_tensor(const NetParams<T>& p, Fn fn) {
  for_each_tensor(const_cast<NetParams<T>&>(p),
                  [&](const std::string& n, Tensor<T>& t) { fn(n, const_cast<const Tensor<T>&>(t)); });
}

template <typename T>
std::vector<NamedTensor<T>> collect_tensors(NetParams<T>& p) {
  std::vector<NamedTensor<T>> out;
  for_each_tensor(p, [&](const std::string& n, Tensor<T>& t) { out.push_back({n, &t}); });
  return out;
}

template <typename T>
int64_t param_count(const NetParams<T>& p) {
  int64_t n = 0;
  for_each_tensor(p, [&](const std::string&, const Tensor<T>& t) { n += t.numel(); });
  return n;
}

inline int64_t param_count(const NetConfig& cfg) {
  return param_count(make_params<float>(cfg));
}

template <typename T>
NetParams<T> zeros_like(const NetParams<T>& p) {
  NetParams<T> z = make_params<T>(p.cfg);
  return z;
}

namespace detail {

template <typename T>
void init_kaiming_normal(Tensor<T>& w, int64_t fan_in, double slope, Rng& rng) {
  const double stddev = std::sqrt(2.0 / ((1.0 + slope * slope) * static_cast<double>(fan_in)));
  for (int64_t i = 0; i < w.numel(); ++i) w[i] = static_cast<T>(rng.normal(0.0, stddev));
}

template <typename T>
void init_xavier_uniform(Tensor<T>& w, int64_t fan_in, int64_t fan_out, Rng& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  for (int64_t i = 0; i < w.numel(); ++i) w[i] = static_cast<T>(rng.uniform(-limit, limit));
}

}  // namespace detail

/// Kaiming normal for conv kernels, Xavier uniform for attention projections,
/// constants for normalization (scale 1, shift 0) and biases (0).
/// Deterministic: a single derived stream drawn in tensor-visit order.
template <typename T>
NetParams<T> init_params(const NetConfig& cfg, uint64_t seed) {
  NetParams<T> p = make_params<T>(cfg);
  Rng rng = make_stream(seed, 0x1217);
  for_each_tensor(p, [&](const std::string& name, Tensor<T>& t) {
    const bool is_norm_gamma = name.size() > 2 && name.substr(name.size() - 2) == ".g" &&
                               name.find(".n") != std::string::npos;
    if (name.find("dsa") == 0) {
      detail::init_xavier_uniform(t, t.shape[0], t.shape[1], rng);
    } else if (name.size() > 2 && name.substr(name.size() - 2) == ".w") {
      // conv / deconv kernels
      int64_t fan_in;
      if (name.find(".deconv.") != std::string::npos)
        fan_in = t.shape[0] * t.shape[2] * t.shape[3] * t.shape[4];
      else
        fan_in = t.shape[1] * t.shape[2] * t.shape[3] * t.shape[4];
      detail::init_kaiming_normal(t, fan_in, cfg.leaky_slope, rng);
    } else if (is_norm_gamma || name.find("n.g") != std::string::npos) {
      t.fill(T(1));
    } else {
      t.fill(T(0));  // biases and norm shifts
    }
  });
  // Norm scale tensors are exactly 1 regardless of the heuristics above.
  auto fix_norm = [&](NormP<T>& n) {
    n.gamma.fill(T(1));
    n.beta.fill(T(0));
  };
  for (auto& b : p.enc) {
    fix_norm(b.ru.n1);
    fix_norm(b.ru.n2);
    fix_norm(b.postn);
  }
  for (auto& d : p.dec) {
    fix_norm(d.block.ru.n1);
    fix_norm(d.block.ru.n2);
    fix_norm(d.block.postn);
  }
  return p;
}

// ---------------------------------------------------------------------------
// Block forward/backward
// ---------------------------------------------------------------------------

template <typename T>
struct BlockTape {
  Volume<T> x;        // block input (transition conv input)
  Volume<T> t;        // transition output, also the residual skip
  Volume<T> r1;       // input to the second residual conv
  Volume<T> y;        // after the residual add, input of the post conv
  InstNormCache<T> n1c, n2c, n3c;
  std::vector<uint8_t> m1, m3;
};

template <typename T>
Volume<T> block_forward(const Volume<T>& x, const BlockP<T>& p, const NetConfig& cfg,
                        BlockTape<T>* tape) {
  Volume<T> t = conv3d_forward(x, p.trans.w, p.trans.b);
  Volume<T> a = conv3d_forward(t, p.ru.c1.w, p.ru.c1.b);
  Volume<T> n1 = instnorm_forward(a, p.ru.n1.gamma, p.ru.n1.beta, cfg.norm_eps,
                                  tape ? &tape->n1c : nullptr);
  Volume<T> r1 = leaky_relu_forward(n1, cfg.leaky_slope, tape ? &tape->m1 : nullptr);
  Volume<T> b = conv3d_forward(r1, p.ru.c2.w, p.ru.c2.b);
  Volume<T> n2 = instnorm_forward(b, p.ru.n2.gamma, p.ru.n2.beta, cfg.norm_eps,
                                  tape ? &tape->n2c : nullptr);
  Volume<T> y(t.channels(), t.shape());
  for (int64_t i = 0; i < y.size(); ++i) y.data()[i] = t.data()[i] + n2.data()[i];
  Volume<T> c = conv3d_forward(y, p.post.w, p.post.b);
  Volume<T> n3 = instnorm_forward(c, p.postn.gamma, p.postn.beta, cfg.norm_eps,
                                  tape ? &tape->n3c : nullptr);
  Volume<T> out = leaky_relu_forward(n3, cfg.leaky_slope, tape ? &tape->m3 : nullptr);
  if (tape) {
    tape->x = x;
    tape->t = std::move(t);
    tape->r1 = std::move(r1);
    tape->y = std::move(y);
  }
  return out;
}

template <typename T>
Volume<T> block_backward(const Volume<T>& gout, const BlockP<T>& p, BlockP<T>& gp,
                         const NetConfig& cfg, const BlockTape<T>& tape) {
  Volume<T> g = leaky_relu_backward(gout, tape.m3, cfg.leaky_slope);
  Volume<T> gc;
  instnorm_backward(g, p.postn.gamma, tape.n3c, gc, gp.postn.gamma, gp.postn.beta);
  Volume<T> gy;
  conv3d_backward(tape.y, p.post.w, gc, gy, gp.post.w, gp.post.b);

  // Residual add: gy flows to both the transition output and the unit output.
  Volume<T> gb;
  instnorm_backward(gy, p.ru.n2.gamma, tape.n2c, gb, gp.ru.n2.gamma, gp.ru.n2.beta);
  Volume<T> gr1;
  conv3d_backward(tape.r1, p.ru.c2.w, gb, gr1, gp.ru.c2.w, gp.ru.c2.b);
  Volume<T> gn1 = leaky_relu_backward(gr1, tape.m1, cfg.leaky_slope);
  Volume<T> ga;
  instnorm_backward(gn1, p.ru.n1.gamma, tape.n1c, ga, gp.ru.n1.gamma, gp.ru.n1.beta);
  Volume<T> gt;
  conv3d_backward(tape.t, p.ru.c1.w, ga, gt, gp.ru.c1.w, gp.ru.c1.b);
  for (int64_t i = 0; i < gt.size(); ++i) gt.data()[i] += gy.data()[i];

  Volume<T> gx;
  conv3d_backward(tape.x, p.trans.w, gt, gx, gp.trans.w, gp.trans.b);
  return gx;
}

// ---------------------------------------------------------------------------
// Dual self-attention block
// ---------------------------------------------------------------------------

template <typename T>
struct DsaCache {
  int64_t N = 0, C = 0, r = 0;
  std::vector<T> F, Q, K, Vs, Vc, A, B, Ys, Yc, Qc, Kc;
};

namespace detail {

template <typename T>
std::vector<T> volume_to_tokens(const Volume<T>& f) {
  const int64_t C = f.channels(), N = f.voxels();
  std::vector<T> F(static_cast<size_t>(N * C));
  for (int64_t c = 0; c < C; ++c) {
    const T* fc = f.channel(c);
    for (int64_t n = 0; n < N; ++n) F[static_cast<size_t>(n * C + c)] = fc[n];
  }
  return F;
}

template <typename T>
void tokens_add_to_volume(const std::vector<T>& F, Volume<T>& f) {
  const int64_t C = f.channels(), N = f.voxels();
  for (int64_t c = 0; c < C; ++c) {
    T* fc = f.channel(c);
    for (int64_t n = 0; n < N; ++n) fc[n] += F[static_cast<size_t>(n * C + c)];
  }
}

}  // namespace detail

/// Dual self-attention over flattened spatial positions.
/// Shared reduced projections Q = F Wq and K = F Wk (N x r) feed both
/// branches. Spatial branch: rowsoftmax(Q K^T / sqrt(r)) mixes positions of
/// the value F Wvs. Channel branch: channel descriptors Qc = F^T Q and
/// Kc = F^T K (C x r) form a C x C map rowsoftmax(Qc Kc^T / (N sqrt(r)))
/// that mixes channels of the value F Wvc. Both branch outputs pass through
/// their own C x C output projection and are added back onto the input.
template <typename T>
Volume<T> dsa_forward(const Volume<T>& f, const DsaP<T>& p, DsaCache<T>* cache) {
  const int64_t C = f.channels(), N = f.voxels(), r = p.wq.shape[1];
  if (p.wq.shape[0] != C) throw InvalidArgument("dsa projection does not match feature channels");

  std::vector<T> F = detail::volume_to_tokens(f);
  std::vector<T> Q(static_cast<size_t>(N * r)), K(static_cast<size_t>(N * r));
  mm_nn(F.data(), p.wq.data(), Q.data(), N, C, r, false);
  mm_nn(F.data(), p.wk.data(), K.data(), N, C, r, false);
  std::vector<T> Vs(static_cast<size_t>(N * C)), Vc(static_cast<size_t>(N * C));
  mm_nn(F.data(), p.wvs.data(), Vs.data(), N, C, C, false);
  mm_nn(F.data(), p.wvc.data(), Vc.data(), N, C, C, false);

  // Spatial branch.
  std::vector<T> A(static_cast<size_t>(N * N));
  mm_nt(Q.data(), K.data(), A.data(), N, r, N, false);
  const T beta = static_cast<T>(1.0 / std::sqrt(static_cast<double>(r)));
  for (auto& v : A) v *= beta;
  row_softmax(A.data(), N, N);
  std::vector<T> Ys(static_cast<size_t>(N * C));
  mm_nn(A.data(), Vs.data(), Ys.data(), N, N, C, false);
  std::vector<T> Os(static_cast<size_t>(N * C));
  mm_nn(Ys.data(), p.wos.data(), Os.data(), N, C, C, false);

  // Channel branch.
  std::vector<T> Qc(static_cast<size_t>(C * r)), Kc(static_cast<size_t>(C * r));
  mm_tn(F.data(), Q.data(), Qc.data(), N, C, r, false);
  mm_tn(F.data(), K.data(), Kc.data(), N, C, r, false);
  std::vector<T> B(static_cast<size_t>(C * C));
  mm_nt(Qc.data(), Kc.data(), B.data(), C, r, C, false);
  const T alpha = static_cast<T>(1.0 / (static_cast<double>(N) * std::sqrt(static_cast<double>(r))));
  for (auto& v : B) v *= alpha;
  row_softmax(B.data(), C, C);
  std::vector<T> Yc(static_cast<size_t>(N * C));
  mm_nt(Vc.data(), B.data(), Yc.data(), N, C, C, false);
  std::vector<T> Oc(static_cast<size_t>(N * C));
  mm_nn(Yc.data(), p.woc.data(), Oc.data(), N, C, C, false);

  Volume<T> out = f;
  for (size_t i = 0; i < Os.size(); ++i) Os[i] += Oc[i];
  detail::tokens_add_to_volume(Os, out);

  if (cache) {
    cache->N = N;
    cache->C = C;
    cache->r = r;
    cache->F = std::move(F);
    cache->Q = std::move(Q);
    cache->K = std::move(K);
    cache->Vs = std::move(Vs);
    cache->Vc = std::move(Vc);
    cache->A = std::move(A);
    cache->B = std::move(B);
    cache->Ys = std::move(Ys);
    cache->Yc = std::move(Yc);
    cache->Qc = std::move(Qc);
    cache->Kc = std::move(Kc);
  }
  return out;
}

template <typename T>
Volume<T> dsa_backward(const Volume<T>& gout, const DsaP<T>& p, DsaP<T>& gp,
                       const DsaCache<T>& cc) {
  const int64_t N = cc.N, C = cc.C, r = cc.r;
  std::vector<T> G0 = detail::volume_to_tokens(gout);  // gOs = gOc = G0; residual too
  std::vector<T> gF = G0;

  // Spatial branch.
  std::vector<T> gYs(static_cast<size_t>(N * C));
  mm_nt(G0.data(), p.wos.data(), gYs.data(), N, C, C, false);
  mm_tn(cc.Ys.data(), G0.data(), gp.wos.data(), N, C, C, true);
  std::vector<T> gA(static_cast<size_t>(N * N));
  mm_nt(gYs.data(), cc.Vs.data(), gA.data(), N, C, N, false);
  std::vector<T> gVs(static_cast<size_t>(N * C));
  mm_tn(cc.A.data(), gYs.data(), gVs.data(), N, N, C, false);
  std::vector<T> gS(static_cast<size_t>(N * N));
  row_softmax_backward(cc.A.data(), gA.data(), gS.data(), N, N);
  const T beta = static_cast<T>(1.0 / std::sqrt(static_cast<double>(r)));
  for (auto& v : gS) v *= beta;
  std::vector<T> gQ(static_cast<size_t>(N * r)), gK(static_cast<size_t>(N * r));
  mm_nn(gS.data(), cc.K.data(), gQ.data(), N, N, r, false);
  mm_tn(gS.data(), cc.Q.data(), gK.data(), N, N, r, false);

  // Channel branch.
  std::vector<T> gYc(static_cast<size_t>(N * C));
  mm_nt(G0.data(), p.woc.data(), gYc.data(), N, C, C, false);
  mm_tn(cc.Yc.data(), G0.data(), gp.woc.data(), N, C, C, true);
  std::vector<T> gVc(static_cast<size_t>(N * C));
  mm_nn(gYc.data(), cc.B.data(), gVc.data(), N, C, C, false);
  std::vector<T> gB(static_cast<size_t>(C * C));
  mm_tn(gYc.data(), cc.Vc.data(), gB.data(), N, C, C, false);
  std::vector<T> gG(static_cast<size_t>(C * C));
  row_softmax_backward(cc.B.data(), gB.data(), gG.data(), C, C);
  const T alpha = static_cast<T>(1.0 / (static_cast<double>(N) * std::sqrt(static_cast<double>(r))));
  for (auto& v : gG) v *= alpha;
  std::vector<T> gQc(static_cast<size_t>(C * r)), gKc(static_cast<size_t>(C * r));
  mm_nn(gG.data(), cc.Kc.data(), gQc.data(), C, C, r, false);
  mm_tn(gG.data(), cc.Qc.data(), gKc.data(), C, C, r, false);
  // Qc = F^T Q and Kc = F^T K.
  mm_nt(cc.Q.data(), gQc.data(), gF.data(), N, r, C, true);
  mm_nn(cc.F.data(), gQc.data(), gQ.data(), N, C, r, true);
  mm_nt(cc.K.data(), gKc.data(), gF.data(), N, r, C, true);
  mm_nn(cc.F.data(), gKc.data(), gK.data(), N, C, r, true);

  // Value and Q/K projections.
  mm_nt(gVs.data(), p.wvs.data(), gF.data(), N, C, C, true);
  mm_tn(cc.F.data(), gVs.data(), gp.wvs.data(), N, C, C, true);
  mm_nt(gVc.data(), p.wvc.data(), gF.data(), N, C, C, true);
  mm_tn(cc.F.data(), gVc.data(), gp.wvc.data(), N, C, C, true);
  mm_nt(gQ.data(), p.wq.data(), gF.data(), N, r, C, true);
  mm_tn(cc.F.data(), gQ.data(), gp.wq.data(), N, C, r, true);
  mm_nt(gK.data(), p.wk.data(), gF.data(), N, r, C, true);
  mm_tn(cc.F.data(), gK.data(), gp.wk.data(), N, C, r, true);

  Volume<T> gf(C, gout.shape());
  detail::tokens_add_to_volume(gF, gf);
  return gf;
}

// ---------------------------------------------------------------------------
// Stage-level wrappers (the public encoder/decoder contracts)
// ---------------------------------------------------------------------------

/// Encoder stage: block then 2x2x2 max-pool. Returns (features, pooled).
template <typename T>
std::pair<Volume<T>, Volume<T>> encoder_stage_forward(const Volume<T>& x, const BlockP<T>& p,
                                                      const NetConfig& cfg) {
  Volume<T> features = block_forward(x, p, cfg, static_cast<BlockTape<T>*>(nullptr));
  Volume<T> pooled = maxpool2_forward(features, static_cast<std::vector<int64_t>*>(nullptr));
  return {std::move(features), std::move(pooled)};
}

/// Decoder stage: deconv, optional skip concat, block.
template <typename T>
Volume<T> decoder_stage_forward(const Volume<T>& x, const Volume<T>* skip, const DecP<T>& p,
                                const NetConfig& cfg) {
  Volume<T> up = deconv2_forward(x, p.deconv_w, p.deconv_b);
  if (skip) {
    if (skip->shape() != up.shape())
      throw InvalidArgument("decoder skip shape " + skip->shape().str() +
                            " does not match upsampled shape " + up.shape().str());
    up = concat_channels(up, *skip);
  }
  return block_forward(up, p.block, cfg, static_cast<BlockTape<T>*>(nullptr));
}

// ---------------------------------------------------------------------------
// Full network
// ---------------------------------------------------------------------------

template <typename T>
struct NetTape {
  NetConfig cfg;
  Shape3 input_shape{};
  std::vector<BlockTape<T>> enc;
  std::vector<std::vector<int64_t>> pool_argmax;  // per stage 1..S-1
  std::vector<Shape3> prepool_shape;
  std::vector<DsaCache<T>> dsa;                   // aligned with params.dsa
  std::vector<Volume<T>> dec_in;                  // decoder inputs (deconv inputs)
  std::vector<BlockTape<T>> dec;
  std::vector<int64_t> dec_up_channels;           // channels of deconv output per level
  Volume<T> head_in;
  Volume<T> probs;
  bool valid = false;
};

/// Forward pass producing per-voxel two-channel softmax probabilities.
/// The tape captures everything net_backward needs; pass want_tape=false for
/// inference.
template <typename T>
std::pair<Volume<T>, NetTape<T>> net_forward(const NetParams<T>& params, const Volume<T>& x,
                                             bool want_tape) {
  const NetConfig& cfg = params.cfg;
  cfg.validate();
  if (x.channels() != cfg.in_channels)
    throw InvalidArgument("network expects " + std::to_string(cfg.in_channels) +
                          " input channels, got " + std::to_string(x.channels()));
  const int64_t div = cfg.divisibility();
  const Shape3 s = x.shape();
  if (s.d % div || s.h % div || s.w % div)
    throw InvalidArgument("input dims " + s.str() + " must be divisible by " +
                          std::to_string(div) + " (2^(num_stages-1))");

  NetTape<T> tape;
  tape.cfg = cfg;
  tape.input_shape = s;
  const int64_t S = cfg.num_stages;

  std::vector<Volume<T>> skip_features(static_cast<size_t>(S));  // per level 1..S-1
  Volume<T> cur = x;
  if (want_tape) {
    tape.enc.resize(static_cast<size_t>(S));
    tape.pool_argmax.resize(static_cast<size_t>(S - 1));
    tape.prepool_shape.resize(static_cast<size_t>(S - 1));
  }
  for (int64_t st = 1; st <= S; ++st) {
    BlockTape<T>* bt = want_tape ? &tape.enc[static_cast<size_t>(st - 1)] : nullptr;
    Volume<T> features = block_forward(cur, params.enc[static_cast<size_t>(st - 1)], cfg, bt);
    if (st < S) {
      skip_features[static_cast<size_t>(st)] = features;
      std::vector<int64_t>* am = want_tape ? &tape.pool_argmax[static_cast<size_t>(st - 1)] : nullptr;
      if (want_tape) tape.prepool_shape[static_cast<size_t>(st - 1)] = features.shape();
      cur = maxpool2_forward(features, am);
    } else {
      cur = std::move(features);
    }
  }

  if (want_tape) {
    tape.dsa.resize(params.dsa.size());
    tape.dec_in.resize(static_cast<size_t>(S - 1));
    tape.dec.resize(static_cast<size_t>(S - 1));
    tape.dec_up_channels.resize(static_cast<size_t>(S - 1));
  }
  for (size_t di = 0; di < params.dec.size(); ++di) {
    const int64_t lvl = S - 1 - static_cast<int64_t>(di);
    const DecP<T>& dp = params.dec[di];
    if (want_tape) tape.dec_in[di] = cur;
    Volume<T> up = deconv2_forward(cur, dp.deconv_w, dp.deconv_b);
    if (want_tape) tape.dec_up_channels[di] = up.channels();
    Volume<T> z;
    if (cfg.has_dsa(lvl)) {
      const size_t ai = static_cast<size_t>(lvl - cfg.attn_start_stage);
      DsaCache<T>* dc = want_tape ? &tape.dsa[ai] : nullptr;
      Volume<T> attended = dsa_forward(skip_features[static_cast<size_t>(lvl)], params.dsa[ai], dc);
      z = concat_channels(up, attended);
    } else {
      z = std::move(up);
    }
    BlockTape<T>* bt = want_tape ? &tape.dec[di] : nullptr;
    cur = block_forward(z, dp.block, cfg, bt);
  }

  if (want_tape) tape.head_in = cur;
  Volume<T> logits = conv3d_forward(cur, params.head.w, params.head.b);
  Volume<T> probs = softmax2_forward(logits);
  if (want_tape) {
    tape.probs = probs;
    tape.valid = true;
  }
  return {std::move(probs), std::move(tape)};
}

/// Reverse-mode gradients for every parameter tensor, accumulated into
/// `grads` (callers zero or batch-sum as needed).
template <typename T>
void net_backward(const NetParams<T>& params, const NetTape<T>& tape, const Volume<T>& grad_probs,
                  NetParams<T>& grads) {
  if (!tape.valid) throw InvalidArgument("net_backward: tape was not produced by net_forward");
  if (tape.cfg.num_stages != params.cfg.num_stages ||
      tape.cfg.base_channels != params.cfg.base_channels ||
      tape.cfg.in_channels != params.cfg.in_channels ||
      tape.cfg.attn_start_stage != params.cfg.attn_start_stage ||
      tape.cfg.attn_reduced_dim != params.cfg.attn_reduced_dim)
    throw InvalidArgument("net_backward: tape does not match the parameter configuration");
  if (grad_probs.channels() != 2 || grad_probs.shape() != tape.probs.shape())
    throw InvalidArgument("net_backward: upstream gradient must match the 2-channel output");

  const NetConfig& cfg = params.cfg;
  const int64_t S = cfg.num_stages;

  Volume<T> glogits = softmax2_backward(tape.probs, grad_probs);
  Volume<T> gcur;
  conv3d_backward(tape.head_in, params.head.w, glogits, gcur, grads.head.w, grads.head.b);

  // Decoder levels in reverse execution order (level 1 back up to S-1).
  std::vector<Volume<T>> g_skip(static_cast<size_t>(S));
  for (size_t di = params.dec.size(); di-- > 0;) {
    const int64_t lvl = S - 1 - static_cast<int64_t>(di);
    const DecP<T>& dp = params.dec[di];
    DecP<T>& gdp = grads.dec[di];
    Volume<T> gz = block_backward(gcur, dp.block, gdp.block, cfg, tape.dec[di]);
    Volume<T> gup;
    if (cfg.has_dsa(lvl)) {
      Volume<T> gattended;
      split_channels(gz, tape.dec_up_channels[di], gup, gattended);
      const size_t ai = static_cast<size_t>(lvl - cfg.attn_start_stage);
      g_skip[static_cast<size_t>(lvl)] =
          dsa_backward(gattended, params.dsa[ai], grads.dsa[ai], tape.dsa[ai]);
    } else {
      gup = std::move(gz);
    }
    deconv2_backward(tape.dec_in[di], dp.deconv_w, gup, gcur, gdp.deconv_w, gdp.deconv_b);
  }

  // Encoder stages from the bottleneck down; pooled gradients join the skip
  // gradients at each level.
  for (int64_t st = S; st >= 1; --st) {
    Volume<T> gfeat;
    if (st == S) {
      gfeat = std::move(gcur);
    } else {
      gfeat = maxpool2_backward(gcur, tape.pool_argmax[static_cast<size_t>(st - 1)],
                                tape.prepool_shape[static_cast<size_t>(st - 1)]);
      Volume<T>& extra = g_skip[static_cast<size_t>(st)];
      if (!extra.empty())
        for (int64_t i = 0; i < gfeat.size(); ++i) gfeat.data()[i] += extra.data()[i];
    }
    gcur = block_backward(gfeat, params.enc[static_cast<size_t>(st - 1)],
                          grads.enc[static_cast<size_t>(st - 1)], cfg,
                          tape.enc[static_cast<size_t>(st - 1)]);
  }
}

}  // namespace tvseg
