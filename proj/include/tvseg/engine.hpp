#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "tvseg/core.hpp"
#include "tvseg/losses.hpp"
#include "tvseg/metrics.hpp"
#include "tvseg/net.hpp"
#include "tvseg/synthdata.hpp"

namespace tvseg {

struct TrainConfig {
  int64_t max_epochs = 300;
  double lr_max = 1e-4;
  double lr_min = 1e-6;
  int64_t warmup_epochs = 10;
  int64_t patience = 25;
  int64_t patches_per_subject = 4;  // batch = 1 subject x 4 patches
  LossConfig loss;
  uint64_t seed = 0;
  double tau = 0.5;  // binarization threshold for validation metrics

  void validate() const {
    if (!(lr_min < lr_max)) throw InvalidArgument("train: lr_min must be < lr_max");
    if (!(lr_min > 0)) throw InvalidArgument("train: lr_min must be > 0");
    if (warmup_epochs < 0 || warmup_epochs >= max_epochs)
      throw InvalidArgument("train: warmup_epochs must be in [0, max_epochs)");
    if (patience < 1) throw InvalidArgument("train: patience must be >= 1");
    if (max_epochs < 1) throw InvalidArgument("train: max_epochs must be >= 1");
    if (patches_per_subject < 1) throw InvalidArgument("train: patches_per_subject must be >= 1");
    if (!(tau > 0 && tau < 1)) throw InvalidArgument("train: tau must be in (0,1)");
    loss.validate();
  }
};

/// Linear warmup from 10% of lr_max, then cosine annealing to lr_min.
/// Continuous at the junction: both formulas give lr_max at epoch == warmup.
inline double lr_at(int64_t epoch, const TrainConfig& cfg) {
  if (epoch < 0 || epoch > cfg.max_epochs) throw InvalidArgument("lr_at: epoch out of range");
  if (epoch < cfg.warmup_epochs) {
    const double t = static_cast<double>(epoch) / static_cast<double>(cfg.warmup_epochs);
    return 0.1 * cfg.lr_max + t * 0.9 * cfg.lr_max;
  }
  const double t = static_cast<double>(epoch - cfg.warmup_epochs) /
                   static_cast<double>(cfg.max_epochs - cfg.warmup_epochs);
  return cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) * (1.0 + std::cos(3.14159265358979323846 * t));
}

// ---------------------------------------------------------------------------
// AdamW
// ---------------------------------------------------------------------------

template <typename T>
struct OptState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
  int64_t step = 0;
  std::vector<Tensor<T>> m, v;  // aligned with collect_tensors order

  static OptState init(NetParams<T>& params) {
    OptState s;
    for (auto& nt : collect_tensors(params)) {
      s.m.push_back(zeros_like(*nt.tensor));
      s.v.push_back(zeros_like(*nt.tensor));
    }
    return s;
  }
};

/// Decoupled weight decay update:
/// m <- b1 m + (1-b1) g;  v <- b2 v + (1-b2) g^2; bias-corrected;
/// theta <- theta - lr (mhat / (sqrt(vhat) + eps) + wd * theta).
template <typename T>
void adamw_step(NetParams<T>& params, const NetParams<T>& grads, OptState<T>& opt, double lr) {
  auto pts = collect_tensors(params);
  auto gts = collect_tensors(const_cast<NetParams<T>&>(grads));
  if (pts.size() != gts.size() || pts.size() != opt.m.size())
    throw InvalidArgument("adamw_step: parameter/gradient/state tensor counts differ");
  opt.step += 1;
  const double bc1 = 1.0 - std::pow(opt.beta1, static_cast<double>(opt.step));
  const double bc2 = 1.0 - std::pow(opt.beta2, static_cast<double>(opt.step));
  for (size_t t = 0; t < pts.size(); ++t) {
    Tensor<T>& th = *pts[t].tensor;
    const Tensor<T>& g = *gts[t].tensor;
    Tensor<T>& m = opt.m[t];
    Tensor<T>& v = opt.v[t];
    if (!th.same_shape(g) || !th.same_shape(m))
      throw InvalidArgument("adamw_step: shape mismatch at " + pts[t].name);
    for (int64_t i = 0; i < th.numel(); ++i) {
      const double gi = g[i];
      const double mi = opt.beta1 * m[i] + (1.0 - opt.beta1) * gi;
      const double vi = opt.beta2 * v[i] + (1.0 - opt.beta2) * gi * gi;
      m.v[i] = static_cast<T>(mi);
      v.v[i] = static_cast<T>(vi);
      const double mhat = mi / bc1;
      const double vhat = vi / bc2;
      th.v[i] = static_cast<T>(th[i] - lr * (mhat / (std::sqrt(vhat) + opt.eps) +
                                             opt.weight_decay * th[i]));
    }
  }
}

// ---------------------------------------------------------------------------
// Sliding-window inference
// ---------------------------------------------------------------------------

namespace detail {
inline std::vector<int64_t> tile_positions(int64_t dim, int64_t window, double overlap) {
  std::vector<int64_t> pos;
  const int64_t stride = std::max<int64_t>(1, static_cast<int64_t>(std::llround(
                                                  static_cast<double>(window) * (1.0 - overlap))));
  for (int64_t p = 0;; p += stride) {
    if (p + window >= dim) {
      pos.push_back(dim - window);
      break;
    }
    pos.push_back(p);
  }
  return pos;
}
}  // namespace detail

/// Tile the volume with the given window and overlap fraction, average the
/// softmax probabilities where tiles overlap. Oversized windows clamp to the
/// volume (a single full pass when divisibility allows).
template <typename T>
Volume<T> infer_volume(const NetParams<T>& params, const Volume<T>& image, Shape3 window,
                       double overlap) {
  if (!(overlap >= 0.0 && overlap < 1.0))
    throw InvalidArgument("infer: overlap must be in [0, 1)");
  const Shape3 s = image.shape();
  window.d = std::min(window.d, s.d);
  window.h = std::min(window.h, s.h);
  window.w = std::min(window.w, s.w);
  if (!window.valid()) throw InvalidArgument("infer: invalid window");

  const auto zs = detail::tile_positions(s.d, window.d, overlap);
  const auto ys = detail::tile_positions(s.h, window.h, overlap);
  const auto xs = detail::tile_positions(s.w, window.w, overlap);

  Volume<T> acc(NetConfig::out_channels, s, T(0));
  std::vector<int32_t> hits(static_cast<size_t>(s.voxels()), 0);
  Volume<T> tile(image.channels(), window);
  for (int64_t z : zs)
    for (int64_t y : ys)
      for (int64_t x : xs) {
        for (int64_t c = 0; c < image.channels(); ++c)
          for (int64_t i = 0; i < window.d; ++i)
            for (int64_t j = 0; j < window.h; ++j) {
              const T* src = image.channel(c) + ((z + i) * s.h + y + j) * s.w + x;
              T* dst = tile.channel(c) + (i * window.h + j) * window.w;
              std::copy(src, src + window.w, dst);
            }
        Volume<T> probs = net_forward(params, tile, false).first;
        for (int64_t c = 0; c < NetConfig::out_channels; ++c)
          for (int64_t i = 0; i < window.d; ++i)
            for (int64_t j = 0; j < window.h; ++j) {
              const T* src = probs.channel(c) + (i * window.h + j) * window.w;
              T* dst = acc.channel(c) + ((z + i) * s.h + y + j) * s.w + x;
              for (int64_t k = 0; k < window.w; ++k) dst[k] += src[k];
            }
        for (int64_t i = 0; i < window.d; ++i)
          for (int64_t j = 0; j < window.h; ++j) {
            int32_t* hp = hits.data() + ((z + i) * s.h + y + j) * s.w + x;
            for (int64_t k = 0; k < window.w; ++k) ++hp[k];
          }
      }
  for (int64_t i = 0; i < s.voxels(); ++i) {
    if (hits[static_cast<size_t>(i)] == 0) throw NumericError("infer: uncovered voxel (tiling bug)");
    const T inv = static_cast<T>(1.0 / hits[static_cast<size_t>(i)]);
    acc.channel(0)[i] *= inv;
    acc.channel(1)[i] *= inv;
  }
  return acc;
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

struct EpochLog {
  int64_t epoch = 0;
  double lr = 0;
  double train_loss = 0;
  double val_loss = 0;
  double val_sens = 0;
  double val_prec = 0;
  double val_dc = 0;
};

/// Complete mutable state of a training run; checkpointing this struct and
/// resuming reproduces the uninterrupted run bitwise (randomness is derived
/// per (seed, epoch, subject), never carried across epochs).
template <typename T>
struct TrainerState {
  NetParams<T> params;
  OptState<T> opt;
  int64_t next_epoch = 0;
  double best_val = std::numeric_limits<double>::infinity();
  int64_t best_epoch = -1;
  int64_t stall = 0;
  bool stopped_early = false;
  NetParams<T> best_params;
  std::vector<EpochLog> logs;
};

template <typename T>
TrainerState<T> make_trainer(const NetConfig& net_cfg, uint64_t seed) {
  TrainerState<T> st;
  st.params = init_params<T>(net_cfg, seed);
  st.opt = OptState<T>::init(st.params);
  st.best_params = st.params;
  return st;
}

namespace detail {

template <typename T>
double validation_pass(const NetParams<T>& params, const std::vector<const SubjectRecord<T>*>& val,
                       const TrainConfig& cfg, const Shape3& window, EpochLog& log) {
  double loss_sum = 0;
  double sens = 0, prec = 0, dc = 0;
  for (const SubjectRecord<T>* sub : val) {
    Volume<T> probs = infer_volume(params, sub->image, window, 0.0);
    Volume<T> p = slice_channel(probs, 1);
    loss_sum += total_loss(p, sub->gt, cfg.loss).value;
    const BinaryMask pred = mask_from_threshold(p, cfg.tau);
    const VoxelMetrics vm = voxel_metrics(pred, sub->gt);
    sens += vm.sens;
    prec += vm.prec;
    dc += vm.dice;
  }
  const double n = static_cast<double>(val.size());
  log.val_loss = loss_sum / n;
  log.val_sens = sens / n;
  log.val_prec = prec / n;
  log.val_dc = dc / n;
  return log.val_loss;
}

}  // namespace detail

/// One optimizer step per training subject per epoch: sample
/// patches_per_subject balanced patches, augment, forward, loss on the lesion
/// channel, backward; gradients are summed in patch order and applied once.
/// Validation runs on full volumes after every epoch; early stopping fires
/// after `patience` consecutive epochs without a validation-loss improvement.
/// `stop_after_epochs` (when >= 0) pauses the run for later resumption.
template <typename T>
void train(TrainerState<T>& st, const TrainConfig& cfg, const AugmentConfig& aug,
           const std::vector<SubjectRecord<T>>& dataset, Shape3 infer_window,
           int64_t stop_after_epochs = -1) {
  cfg.validate();
  aug.validate();
  std::vector<const SubjectRecord<T>*> train_set, val_set;
  for (auto& s : dataset) {
    if (s.split == Split::train) train_set.push_back(&s);
    if (s.split == Split::validation) val_set.push_back(&s);
  }
  if (train_set.empty() || val_set.empty())
    throw InvalidArgument("train: dataset needs nonempty train and validation splits");

  NetParams<T> grads = zeros_like(st.params);
  for (; st.next_epoch < cfg.max_epochs; ++st.next_epoch) {
    const int64_t epoch = st.next_epoch;
    if (stop_after_epochs >= 0 && epoch >= stop_after_epochs) return;
    if (st.stopped_early) return;

    const double lr = lr_at(epoch, cfg);
    double loss_sum = 0;
    int64_t patch_count = 0;
    for (size_t si = 0; si < train_set.size(); ++si) {
      const SubjectRecord<T>& sub = *train_set[si];
      Rng patch_rng = make_stream(cfg.seed, 0xA11, static_cast<uint64_t>(epoch), si);
      Rng aug_rng = make_stream(cfg.seed, 0xB22, static_cast<uint64_t>(epoch), si);
      for_each_tensor(grads, [](const std::string&, Tensor<T>& t) { t.fill(T(0)); });
      for (int64_t k = 0; k < cfg.patches_per_subject; ++k) {
        PatchSample<T> patch = sample_patch(sub, aug.crop_size, true, patch_rng);
        augment(patch.image, patch.gt, aug, aug_rng);
        auto [probs, tape] = net_forward(st.params, patch.image, true);
        LossOutput<T> lo = total_loss(slice_channel(probs, 1), patch.gt, cfg.loss);
        if (!std::isfinite(lo.value))
          throw NumericError("training aborted: non-finite loss at epoch " +
                             std::to_string(epoch) + ", subject " + sub.id);
        loss_sum += lo.value;
        ++patch_count;
        Volume<T> gprobs(2, probs.shape(), T(0));
        std::copy(lo.grad.data(), lo.grad.data() + lo.grad.size(), gprobs.channel(1));
        net_backward(st.params, tape, gprobs, grads);
      }
      adamw_step(st.params, grads, st.opt, lr);
    }

    EpochLog log;
    log.epoch = epoch;
    log.lr = lr;
    log.train_loss = loss_sum / static_cast<double>(patch_count);
    const double val_loss = detail::validation_pass(st.params, val_set, cfg, infer_window, log);
    if (!std::isfinite(val_loss))
      throw NumericError("training aborted: non-finite validation loss at epoch " +
                         std::to_string(epoch));
    st.logs.push_back(log);

    if (val_loss < st.best_val) {
      st.best_val = val_loss;
      st.best_epoch = epoch;
      st.best_params = st.params;
      st.stall = 0;
    } else {
      ++st.stall;
      if (st.stall >= cfg.patience) {
        st.stopped_early = true;
        ++st.next_epoch;
        return;
      }
    }
  }
}

}  // namespace tvseg
