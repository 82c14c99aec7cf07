#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "tvseg/core.hpp"
#include "tvseg/losses.hpp"
#include "tvseg/net.hpp"
#include "tvseg/rng.hpp"

namespace tvseg {

struct GradCheckResult {
  double max_rel_err = 0.0;
  int64_t checked = 0;
  int64_t excluded = 0;
  int64_t worst_index = -1;
};

/// Relative error with a floor: |a-b| / max(|a|, |b|, floor). The floor plays
/// the role of atol/rtol in an allclose-style comparison: central differences
/// carry cancellation noise of a few ulp(f)/2h (about 1e-8 for an O(100) loss
/// at h=1e-5), which must not register as relative error on zero gradients.
inline double rel_err(double a, double b, double floor = 1e-3) {
  const double scale = std::max({std::fabs(a), std::fabs(b), floor});
  return std::fabs(a - b) / scale;
}

/// Central finite-difference check of an analytic gradient over a volume.
/// `f` maps the volume to (value, grad); `exclude(i)` skips voxels where the
/// loss is not differentiable across the FD stencil (kinks, clamp edges).
template <typename T, typename LossFn, typename ExcludeFn>
GradCheckResult check_gradient(LossFn f, Volume<T> p, double h, ExcludeFn exclude,
                               double floor = 1e-3) {
  auto base = f(p);
  GradCheckResult r;
  T* pv = p.data();
  for (int64_t i = 0; i < p.size(); ++i) {
    if (exclude(i)) {
      ++r.excluded;
      continue;
    }
    const T saved = pv[i];
    pv[i] = saved + static_cast<T>(h);
    const double up = f(p).value;
    pv[i] = saved - static_cast<T>(h);
    const double dn = f(p).value;
    pv[i] = saved;
    const double fd = (up - dn) / (2.0 * h);
    const double e = rel_err(static_cast<double>(base.grad.data()[i]), fd, floor);
    if (e > r.max_rel_err) {
      r.max_rel_err = e;
      r.worst_index = i;
    }
    ++r.checked;
  }
  return r;
}

/// True when voxel `i` has a TV neighbor difference small enough that the FD
/// stencil of width 2h straddles the |.| kink. The margin adds slack over the
/// exact stencil bound h.
template <typename T>
bool tv_tie_near(const Volume<T>& p, int64_t i, double margin) {
  const Shape3 s = p.shape();
  const int64_t hw = s.h * s.w;
  const int64_t di = i / hw;
  const int64_t rem = i % hw;
  const int64_t dj = rem / s.w;
  const int64_t dk = rem % s.w;
  const T* pv = p.data();
  auto close = [&](int64_t other) {
    return std::fabs(static_cast<double>(pv[i]) - static_cast<double>(pv[other])) <= margin;
  };
  if (di + 1 < s.d && close(i + hw)) return true;
  if (di > 0 && close(i - hw)) return true;
  if (dj + 1 < s.h && close(i + s.w)) return true;
  if (dj > 0 && close(i - s.w)) return true;
  if (dk + 1 < s.w && close(i + 1)) return true;
  if (dk > 0 && close(i - 1)) return true;
  return false;
}

/// True when voxel `i` sits within `margin` of a BCE clamp boundary, where the
/// loss is non-differentiable across the FD stencil.
template <typename T>
bool bce_clamp_near(const Volume<T>& p, int64_t i, double clamp, double margin) {
  const double v = static_cast<double>(p.data()[i]);
  return std::fabs(v - clamp) <= margin || std::fabs(v - (1.0 - clamp)) <= margin;
}

struct LossGradReport {
  std::string name;
  GradCheckResult result;
  double tolerance = 0.0;
  bool passed = false;
};

/// Run the finite-difference harness over all five loss configurations on
/// `trials` random volumes with extents drawn from [min_extent, max_extent].
/// Returns one report per loss, each carrying the worst case over all trials.
template <typename T>
std::vector<LossGradReport> run_loss_gradchecks(int trials, int64_t min_extent, int64_t max_extent,
                                                double h, double tol, uint64_t seed) {
  LossConfig cfg;
  const double tie_margin = 4.0 * h;

  struct Case {
    std::string name;
    std::function<LossOutput<T>(const Volume<T>&, const BinaryMask&)> fn;
    bool tv_kinks;
  };
  LossConfig dice_only = LossConfig::preset("dice");
  LossConfig dice_bce = LossConfig::preset("dice_bce");
  LossConfig dice_tv = LossConfig::preset("dice_tv");
  std::vector<Case> cases = {
      {"dice_loss", [&](const Volume<T>& p, const BinaryMask& g) { return dice_loss(p, g, cfg); }, false},
      {"bce_loss", [&](const Volume<T>& p, const BinaryMask& g) { return bce_loss(p, g, cfg); }, false},
      {"tv_loss", [&](const Volume<T>& p, const BinaryMask&) { return tv_loss(p); }, true},
      {"total_dice_bce",
       [&](const Volume<T>& p, const BinaryMask& g) { return total_loss(p, g, dice_bce); }, false},
      {"total_dice_tv",
       [&](const Volume<T>& p, const BinaryMask& g) { return total_loss(p, g, dice_tv); }, true},
  };
  (void)dice_only;

  std::vector<LossGradReport> reports;
  for (auto& c : cases) {
    LossGradReport rep;
    rep.name = c.name;
    rep.tolerance = tol;
    for (int t = 0; t < trials; ++t) {
      Rng rng = make_stream(seed, 0x10ad, static_cast<uint64_t>(t));
      const int64_t d = rng.uniform_int(min_extent, max_extent);
      const int64_t hh = rng.uniform_int(min_extent, max_extent);
      const int64_t ww = rng.uniform_int(min_extent, max_extent);
      Volume<T> p(1, Shape3{d, hh, ww});
      for (int64_t i = 0; i < p.size(); ++i)
        p.data()[i] = static_cast<T>(rng.uniform(0.02, 0.98));
      BinaryMask g(p.shape());
      for (int64_t i = 0; i < g.voxels(); ++i) g.data()[i] = rng.bernoulli(0.3) ? 1 : 0;

      auto exclude = [&](int64_t i) {
        if (c.tv_kinks && tv_tie_near(p, i, tie_margin)) return true;
        return bce_clamp_near(p, i, cfg.bce_clamp, 2.0 * h);
      };
      auto res = check_gradient<T>([&](const Volume<T>& q) { return c.fn(q, g); }, p, h, exclude);
      rep.result.checked += res.checked;
      rep.result.excluded += res.excluded;
      if (res.max_rel_err > rep.result.max_rel_err) {
        rep.result.max_rel_err = res.max_rel_err;
        rep.result.worst_index = res.worst_index;
      }
    }
    rep.passed = rep.result.max_rel_err < tol;
    reports.push_back(std::move(rep));
  }
  return reports;
}

/// Single-precision verification: float central differences are dominated by
/// ulp(f)/2h cancellation noise, so instead the float path is compared against
/// the double path (itself FD-verified) on identical inputs. Reported errors
/// are then pure float roundoff and must sit well under the relaxed 1e-3
/// tolerance.
inline std::vector<LossGradReport> run_precision_comparison(int trials, int64_t min_extent,
                                                            int64_t max_extent, double tol,
                                                            uint64_t seed) {
  LossConfig cfg;
  LossConfig dice_bce = LossConfig::preset("dice_bce");
  LossConfig dice_tv = LossConfig::preset("dice_tv");
  struct Case {
    std::string name;
    std::function<LossOutput<double>(const Volume<double>&, const BinaryMask&)> fd;
    std::function<LossOutput<float>(const Volume<float>&, const BinaryMask&)> ff;
    bool tv_kinks;
  };
  std::vector<Case> cases = {
      {"dice_loss",
       [&](const Volume<double>& p, const BinaryMask& g) { return dice_loss(p, g, cfg); },
       [&](const Volume<float>& p, const BinaryMask& g) { return dice_loss(p, g, cfg); }, false},
      {"bce_loss",
       [&](const Volume<double>& p, const BinaryMask& g) { return bce_loss(p, g, cfg); },
       [&](const Volume<float>& p, const BinaryMask& g) { return bce_loss(p, g, cfg); }, false},
      {"tv_loss", [&](const Volume<double>& p, const BinaryMask&) { return tv_loss(p); },
       [&](const Volume<float>& p, const BinaryMask&) { return tv_loss(p); }, true},
      {"total_dice_bce",
       [&](const Volume<double>& p, const BinaryMask& g) { return total_loss(p, g, dice_bce); },
       [&](const Volume<float>& p, const BinaryMask& g) { return total_loss(p, g, dice_bce); },
       false},
      {"total_dice_tv",
       [&](const Volume<double>& p, const BinaryMask& g) { return total_loss(p, g, dice_tv); },
       [&](const Volume<float>& p, const BinaryMask& g) { return total_loss(p, g, dice_tv); },
       true},
  };

  std::vector<LossGradReport> reports;
  for (auto& c : cases) {
    LossGradReport rep;
    rep.name = c.name;
    rep.tolerance = tol;
    for (int t = 0; t < trials; ++t) {
      Rng rng = make_stream(seed, 0xf32, static_cast<uint64_t>(t));
      const int64_t d = rng.uniform_int(min_extent, max_extent);
      const int64_t hh = rng.uniform_int(min_extent, max_extent);
      const int64_t ww = rng.uniform_int(min_extent, max_extent);
      Volume<double> pd(1, Shape3{d, hh, ww});
      Volume<float> pf(1, pd.shape());
      for (int64_t i = 0; i < pd.size(); ++i) {
        pd.data()[i] = rng.uniform(0.02, 0.98);
        pf.data()[i] = static_cast<float>(pd.data()[i]);
      }
      BinaryMask g(pd.shape());
      for (int64_t i = 0; i < g.voxels(); ++i) g.data()[i] = rng.bernoulli(0.3) ? 1 : 0;

      const LossOutput<double> od = c.fd(pd, g);
      const LossOutput<float> of = c.ff(pf, g);
      double e = rel_err(od.value, of.value, 1e-6);
      if (e > rep.result.max_rel_err) rep.result.max_rel_err = e;
      for (int64_t i = 0; i < pd.size(); ++i) {
        // A float-rounded tie can flip a TV subgradient sign; skip voxels
        // whose neighbor differences sit inside the float rounding band.
        if (c.tv_kinks && tv_tie_near(pd, i, 1e-5)) {
          ++rep.result.excluded;
          continue;
        }
        e = rel_err(static_cast<double>(od.grad.data()[i]),
                    static_cast<double>(of.grad.data()[i]), 1e-4);
        if (e > rep.result.max_rel_err) {
          rep.result.max_rel_err = e;
          rep.result.worst_index = i;
        }
        ++rep.result.checked;
      }
    }
    rep.passed = rep.result.max_rel_err < tol;
    reports.push_back(std::move(rep));
  }
  return reports;
}

/// Finite-difference check of the full backward pass: every parameter tensor
/// of a network at `cfg`, against central differences of a smooth total loss
/// (Dice+BCE, so no TV kinks enter the theta stencil). Returns one report per
/// parameter tensor.
template <typename T>
std::vector<LossGradReport> run_net_gradcheck(const NetConfig& cfg, Shape3 input_shape, double h,
                                              double tol, uint64_t seed, double floor = 1e-6) {
  NetParams<T> params = init_params<T>(cfg, seed);
  Rng rng = make_stream(seed, 0x6e7);
  Volume<T> x(cfg.in_channels, input_shape);
  for (int64_t i = 0; i < x.size(); ++i) x.data()[i] = static_cast<T>(rng.uniform(-0.5, 0.5));
  BinaryMask g(input_shape);
  for (int64_t i = 0; i < g.voxels(); ++i) g.data()[i] = rng.bernoulli(0.25) ? 1 : 0;
  const LossConfig lcfg = LossConfig::preset("dice_bce");

  auto loss_value = [&]() {
    Volume<T> probs = net_forward(params, x, false).first;
    return total_loss(slice_channel(probs, 1), g, lcfg).value;
  };

  auto [probs, tape] = net_forward(params, x, true);
  LossOutput<T> lo = total_loss(slice_channel(probs, 1), g, lcfg);
  Volume<T> gprobs(2, probs.shape(), T(0));
  std::copy(lo.grad.data(), lo.grad.data() + lo.grad.size(), gprobs.channel(1));
  NetParams<T> grads = zeros_like(params);
  net_backward(params, tape, gprobs, grads);

  auto pts = collect_tensors(params);
  auto gts = collect_tensors(grads);
  std::vector<LossGradReport> reports;
  for (size_t t = 0; t < pts.size(); ++t) {
    LossGradReport rep;
    rep.name = pts[t].name;
    rep.tolerance = tol;
    Tensor<T>& tensor = *pts[t].tensor;
    for (int64_t i = 0; i < tensor.numel(); ++i) {
      const T saved = tensor[i];
      tensor.v[static_cast<size_t>(i)] = saved + static_cast<T>(h);
      const double up = loss_value();
      tensor.v[static_cast<size_t>(i)] = saved - static_cast<T>(h);
      const double dn = loss_value();
      tensor.v[static_cast<size_t>(i)] = saved;
      const double fd = (up - dn) / (2.0 * h);
      const double e = rel_err(static_cast<double>((*gts[t].tensor)[i]), fd, floor);
      if (e > rep.result.max_rel_err) {
        rep.result.max_rel_err = e;
        rep.result.worst_index = i;
      }
      ++rep.result.checked;
    }
    rep.passed = rep.result.max_rel_err < tol;
    reports.push_back(std::move(rep));
  }
  return reports;
}

/// Float network forward/backward against the double reference on identical
/// parameters and input. Per-tensor relative errors use a floor of 1e-3 times
/// the tensor's largest double gradient, so near-zero entries compare at the
/// tensor's own scale.
inline std::vector<LossGradReport> run_net_precision_comparison(const NetConfig& cfg,
                                                                Shape3 input_shape, double tol,
                                                                uint64_t seed) {
  NetParams<double> pd = init_params<double>(cfg, seed);
  NetParams<float> pf = make_params<float>(cfg);
  {
    auto td = collect_tensors(pd);
    auto tf = collect_tensors(pf);
    for (size_t t = 0; t < td.size(); ++t) {
      for (int64_t i = 0; i < td[t].tensor->numel(); ++i)
        tf[t].tensor->v[static_cast<size_t>(i)] = static_cast<float>((*td[t].tensor)[i]);
      // Round-trip so both precisions start from the same representable values.
      for (int64_t i = 0; i < td[t].tensor->numel(); ++i)
        td[t].tensor->v[static_cast<size_t>(i)] = (*tf[t].tensor)[i];
    }
  }
  Rng rng = make_stream(seed, 0x6e8);
  Volume<double> xd(cfg.in_channels, input_shape);
  Volume<float> xf(cfg.in_channels, input_shape);
  for (int64_t i = 0; i < xd.size(); ++i) {
    xf.data()[i] = static_cast<float>(rng.uniform(-0.5, 0.5));
    xd.data()[i] = xf.data()[i];
  }
  BinaryMask g(input_shape);
  for (int64_t i = 0; i < g.voxels(); ++i) g.data()[i] = rng.bernoulli(0.25) ? 1 : 0;
  const LossConfig lcfg = LossConfig::preset("dice_bce");

  auto run_pass = [&](auto& params, auto& x, auto& grads) {
    using T = std::remove_reference_t<decltype(x.data()[0])>;
    auto [probs, tape] = net_forward(params, x, true);
    LossOutput<std::remove_const_t<T>> lo = total_loss(slice_channel(probs, 1), g, lcfg);
    Volume<std::remove_const_t<T>> gprobs(2, probs.shape());
    std::copy(lo.grad.data(), lo.grad.data() + lo.grad.size(), gprobs.channel(1));
    net_backward(params, tape, gprobs, grads);
  };
  NetParams<double> gd = zeros_like(pd);
  NetParams<float> gf = zeros_like(pf);
  run_pass(pd, xd, gd);
  run_pass(pf, xf, gf);

  auto td = collect_tensors(gd);
  auto tf = collect_tensors(gf);
  // Floor at 1e-3 of the overall gradient magnitude: tensors whose true
  // gradient is identically zero (conv biases swallowed by instance norm)
  // carry only rounding residue in both precisions and must compare equal.
  double global_scale = 0.0;
  for (auto& nt : td)
    for (int64_t i = 0; i < nt.tensor->numel(); ++i)
      global_scale = std::max(global_scale, std::fabs((*nt.tensor)[i]));
  const double floor = std::max(1e-8, 1e-3 * global_scale);
  std::vector<LossGradReport> reports;
  for (size_t t = 0; t < td.size(); ++t) {
    LossGradReport rep;
    rep.name = td[t].name;
    rep.tolerance = tol;
    for (int64_t i = 0; i < td[t].tensor->numel(); ++i) {
      const double e = rel_err((*td[t].tensor)[i], static_cast<double>((*tf[t].tensor)[i]), floor);
      if (e > rep.result.max_rel_err) {
        rep.result.max_rel_err = e;
        rep.result.worst_index = i;
      }
      ++rep.result.checked;
    }
    rep.passed = rep.result.max_rel_err < tol;
    reports.push_back(std::move(rep));
  }
  return reports;
}

}  // namespace tvseg
