#pragma once

#include <algorithm>
#include <cmath>

#include "tvseg/core.hpp"

namespace tvseg {

/// Weights and stabilizers for the combined segmentation loss.
/// Presets: dice (1,0,0), dice_bce (0.5,0.5,0), dice_tv (1,0,0.1).
struct LossConfig {
  double epsilon = 1e-5;    // Dice smoothing
  double w_dice = 1.0;
  double w_bce = 0.0;
  double w_tv = 0.1;
  double bce_clamp = 1e-7;  // probability clamp before log

  void validate() const {
    if (!(epsilon > 0)) throw InvalidArgument("loss.epsilon must be > 0");
    if (w_dice < 0 || w_bce < 0 || w_tv < 0) throw InvalidArgument("loss weights must be >= 0");
    if (w_dice + w_bce + w_tv <= 0) throw InvalidArgument("at least one loss weight must be > 0");
    if (!(bce_clamp > 0 && bce_clamp < 0.5)) throw InvalidArgument("loss.bce_clamp must be in (0, 0.5)");
  }

  static LossConfig preset(const std::string& name) {
    LossConfig cfg;
    if (name == "dice") {
      cfg.w_dice = 1.0; cfg.w_bce = 0.0; cfg.w_tv = 0.0;
    } else if (name == "dice_bce") {
      cfg.w_dice = 0.5; cfg.w_bce = 0.5; cfg.w_tv = 0.0;
    } else if (name == "dice_tv") {
      cfg.w_dice = 1.0; cfg.w_bce = 0.0; cfg.w_tv = 0.1;
    } else {
      throw InvalidArgument("unknown loss preset '" + name + "' (expected dice|dice_bce|dice_tv)");
    }
    return cfg;
  }
};

/// Loss value with the gradient w.r.t. the predicted probability volume.
template <typename T>
struct LossOutput {
  double value = 0.0;
  Volume<T> grad;
};

namespace detail {
template <typename T>
void check_loss_inputs(const Volume<T>& p, const BinaryMask& g, const char* who) {
  if (p.channels() != 1)
    throw InvalidArgument(std::string(who) + " expects a single-channel probability volume");
  if (p.shape() != g.shape())
    throw InvalidArgument(std::string(who) + " shape mismatch: " + p.shape().str() + " vs " +
                          g.shape().str());
}
}  // namespace detail

/// Smoothed soft Dice loss: 1 - (2*sum(p*g) + eps) / (sum(p) + sum(g) + eps).
template <typename T>
LossOutput<T> dice_loss(const Volume<T>& p, const BinaryMask& g, const LossConfig& cfg) {
  detail::check_loss_inputs(p, g, "dice_loss");
  const int64_t n = p.voxels();
  const T* pv = p.data();
  const uint8_t* gv = g.data();

  double inter = 0.0, psum = 0.0, gsum = 0.0;
  for (int64_t i = 0; i < n; ++i) {
    if (gv[i]) inter += pv[i];
    psum += pv[i];
    gsum += gv[i];
  }
  const double eps = cfg.epsilon;
  const double num = 2.0 * inter + eps;
  const double den = psum + gsum + eps;

  LossOutput<T> out;
  out.value = 1.0 - num / den;
  out.grad = Volume<T>(1, p.shape());
  const double inv_den2 = 1.0 / (den * den);
  T* gr = out.grad.data();
  for (int64_t i = 0; i < n; ++i) {
    gr[i] = static_cast<T>(-(2.0 * gv[i] * den - num) * inv_den2);
  }
  return out;
}

/// Mean binary cross entropy with probability clamping. Gradient is zero at
/// clamped voxels (the clamp is a flat region of the loss).
template <typename T>
LossOutput<T> bce_loss(const Volume<T>& p, const BinaryMask& g, const LossConfig& cfg) {
  detail::check_loss_inputs(p, g, "bce_loss");
  const int64_t n = p.voxels();
  const T* pv = p.data();
  const uint8_t* gv = g.data();
  const double lo = cfg.bce_clamp;
  const double hi = 1.0 - cfg.bce_clamp;
  const double inv_n = 1.0 / static_cast<double>(n);

  LossOutput<T> out;
  out.grad = Volume<T>(1, p.shape());
  T* gr = out.grad.data();
  double acc = 0.0;
  for (int64_t i = 0; i < n; ++i) {
    const double raw = static_cast<double>(pv[i]);
    const double pt = std::min(std::max(raw, lo), hi);
    acc += gv[i] ? std::log(pt) : std::log(1.0 - pt);
    const bool clamped = raw < lo || raw > hi;
    gr[i] = clamped ? T(0)
                    : static_cast<T>(-inv_n * (gv[i] ? 1.0 / pt : -1.0 / (1.0 - pt)));
  }
  out.value = -inv_n * acc;
  return out;
}

/// Anisotropic total variation: sum of |forward difference| along each of the
/// three axes, in-bounds pairs only, no averaging. The subgradient uses
/// sign(0) = 0, so exact ties contribute nothing.
template <typename T>
LossOutput<T> tv_loss(const Volume<T>& p) {
  if (p.channels() != 1) throw InvalidArgument("tv_loss expects a single-channel volume");
  const Shape3 s = p.shape();
  const T* pv = p.data();

  LossOutput<T> out;
  out.grad = Volume<T>(1, s);
  T* gr = out.grad.data();
  double acc = 0.0;

  auto add_pair = [&](int64_t base, int64_t next) {
    const double diff = static_cast<double>(pv[next]) - static_cast<double>(pv[base]);
    acc += std::fabs(diff);
    const T sgn = diff > 0 ? T(1) : (diff < 0 ? T(-1) : T(0));
    gr[next] += sgn;
    gr[base] -= sgn;
  };

  for (int64_t i = 0; i < s.d; ++i)
    for (int64_t j = 0; j < s.h; ++j)
      for (int64_t k = 0; k < s.w; ++k) {
        const int64_t at = (i * s.h + j) * s.w + k;
        if (i + 1 < s.d) add_pair(at, at + s.h * s.w);
        if (j + 1 < s.h) add_pair(at, at + s.w);
        if (k + 1 < s.w) add_pair(at, at + 1);
      }
  out.value = acc;
  return out;
}

/// Weighted combination w_dice*Dice + w_bce*BCE + w_tv*TV. Terms with zero
/// weight are skipped entirely.
template <typename T>
LossOutput<T> total_loss(const Volume<T>& p, const BinaryMask& g, const LossConfig& cfg) {
  cfg.validate();
  LossOutput<T> out;
  out.grad = Volume<T>(1, p.shape());
  T* gr = out.grad.data();
  const int64_t n = p.voxels();

  auto accumulate = [&](const LossOutput<T>& part, double w) {
    out.value += w * part.value;
    const T* pg = part.grad.data();
    const T wt = static_cast<T>(w);
    for (int64_t i = 0; i < n; ++i) gr[i] += wt * pg[i];
  };

  if (cfg.w_dice > 0) accumulate(dice_loss(p, g, cfg), cfg.w_dice);
  if (cfg.w_bce > 0) accumulate(bce_loss(p, g, cfg), cfg.w_bce);
  if (cfg.w_tv > 0) accumulate(tv_loss(p), cfg.w_tv);
  return out;
}

}  // namespace tvseg
