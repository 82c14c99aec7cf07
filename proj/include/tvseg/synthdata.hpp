#pragma once

#include <array>
#include <string>
#include <vector>

#include "tvseg/core.hpp"
#include "tvseg/rng.hpp"

namespace tvseg {

enum class Split { train, validation, test };

inline const char* split_name(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::validation: return "validation";
    default: return "test";
  }
}

inline Split split_from_name(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "validation") return Split::validation;
  if (s == "test") return Split::test;
  throw InvalidArgument("unknown split '" + s + "'");
}

template <typename T>
struct SubjectRecord {
  std::string id;
  Volume<T> image;  // 2 channels: T1-like, FLAIR-like
  BinaryMask gt;
  Split split = Split::train;
};

/// Synthetic cohort: two-channel smooth random fields with small, weak
/// contrast spherical lesions standing in for the clinical data.
struct GenConfig {
  int64_t n_train = 24;
  int64_t n_validation = 6;
  int64_t n_test = 8;
  Shape3 volume_shape{32, 32, 32};
  int64_t lesions_min = 1;
  int64_t lesions_max = 2;
  int64_t radius_min = 2;
  int64_t radius_max = 4;
  // Background texture: trilinearly interpolated control lattice of white
  // noise, per channel, plus fine-grained generation noise. Amplitude 0.16
  // keeps lesion contrast weak (field bumps reach 0.61 vs lesion 0.45+0.3)
  // without drowning the desk-scale training budget.
  int64_t field_cells = 4;
  double field_base = 0.45;
  double field_amplitude = 0.16;
  double texture_noise_sigma = 0.015;
  // Additive lesion contrast per channel (T1-like, FLAIR-like).
  double lesion_contrast_t1 = 0.1;
  double lesion_contrast_flair = 0.3;
  uint64_t seed = 0;

  int64_t total_subjects() const { return n_train + n_validation + n_test; }

  void validate() const {
    if (n_train < 0 || n_validation < 0 || n_test < 0 || total_subjects() < 1)
      throw InvalidArgument("gen: subject counts must be non-negative with at least one subject");
    if (!volume_shape.valid()) throw InvalidArgument("gen.volume_shape invalid");
    if (lesions_min < 0 || lesions_max < lesions_min)
      throw InvalidArgument("gen: lesion count range invalid");
    if (radius_min < 1 || radius_max < radius_min)
      throw InvalidArgument("gen: lesion radius range invalid (radius >= 1)");
    const int64_t min_dim = std::min({volume_shape.d, volume_shape.h, volume_shape.w});
    if (2 * radius_max + 1 > min_dim)
      throw InvalidArgument("gen: lesion of radius " + std::to_string(radius_max) +
                            " cannot fit inside volume " + volume_shape.str());
    if (field_cells < 1) throw InvalidArgument("gen.field_cells must be >= 1");
    if (texture_noise_sigma < 0) throw InvalidArgument("gen.texture_noise_sigma must be >= 0");
  }
};

namespace detail {

/// Trilinear interpolation of a (cells+1)^3 control lattice over the volume.
template <typename T>
void add_smooth_field(Volume<T>& img, int64_t channel, const GenConfig& cfg, Rng& rng) {
  const int64_t n = cfg.field_cells + 1;
  std::vector<double> lattice(static_cast<size_t>(n * n * n));
  for (auto& v : lattice) v = rng.uniform(-1.0, 1.0);
  const Shape3 s = img.shape();
  T* ch = img.channel(channel);
  auto lat = [&](int64_t a, int64_t b, int64_t c) {
    return lattice[static_cast<size_t>((a * n + b) * n + c)];
  };
  for (int64_t i = 0; i < s.d; ++i) {
    const double fz = (s.d == 1) ? 0.0 : static_cast<double>(i) / (s.d - 1) * cfg.field_cells;
    const int64_t z0 = std::min<int64_t>(static_cast<int64_t>(fz), cfg.field_cells - 1);
    const double tz = fz - z0;
    for (int64_t j = 0; j < s.h; ++j) {
      const double fy = (s.h == 1) ? 0.0 : static_cast<double>(j) / (s.h - 1) * cfg.field_cells;
      const int64_t y0 = std::min<int64_t>(static_cast<int64_t>(fy), cfg.field_cells - 1);
      const double ty = fy - y0;
      for (int64_t k = 0; k < s.w; ++k) {
        const double fx = (s.w == 1) ? 0.0 : static_cast<double>(k) / (s.w - 1) * cfg.field_cells;
        const int64_t x0 = std::min<int64_t>(static_cast<int64_t>(fx), cfg.field_cells - 1);
        const double tx = fx - x0;
        double v = 0.0;
        for (int64_t dz = 0; dz < 2; ++dz)
          for (int64_t dy = 0; dy < 2; ++dy)
            for (int64_t dx = 0; dx < 2; ++dx) {
              const double wz = dz ? tz : 1.0 - tz;
              const double wy = dy ? ty : 1.0 - ty;
              const double wx = dx ? tx : 1.0 - tx;
              v += wz * wy * wx * lat(z0 + dz, y0 + dy, x0 + dx);
            }
        ch[(i * s.h + j) * s.w + k] +=
            static_cast<T>(cfg.field_base + cfg.field_amplitude * v);
      }
    }
  }
}

}  // namespace detail

/// Lattice ball: voxels v with ||v - c||^2 <= r^2. Radius 2 has 33 voxels.
inline void paint_ball(BinaryMask& gt, int64_t ci, int64_t cj, int64_t ck, int64_t r) {
  const Shape3 s = gt.shape();
  for (int64_t i = std::max<int64_t>(0, ci - r); i <= std::min(s.d - 1, ci + r); ++i)
    for (int64_t j = std::max<int64_t>(0, cj - r); j <= std::min(s.h - 1, cj + r); ++j)
      for (int64_t k = std::max<int64_t>(0, ck - r); k <= std::min(s.w - 1, ck + r); ++k)
        if ((i - ci) * (i - ci) + (j - cj) * (j - cj) + (k - ck) * (k - ck) <= r * r)
          gt(i, j, k) = 1;
}

/// Generate one subject deterministically from (cfg.seed, subject_index).
/// Training subjects always receive at least one lesion.
template <typename T>
SubjectRecord<T> generate_subject(const GenConfig& cfg, int64_t subject_index, Split split) {
  cfg.validate();
  Rng rng = make_stream(cfg.seed, 0x5eed, static_cast<uint64_t>(subject_index));

  SubjectRecord<T> rec;
  char buf[16];
  std::snprintf(buf, sizeof(buf), "s%03lld", static_cast<long long>(subject_index));
  rec.id = buf;
  rec.split = split;
  rec.image = Volume<T>(2, cfg.volume_shape);
  rec.gt = BinaryMask(cfg.volume_shape);

  detail::add_smooth_field(rec.image, 0, cfg, rng);
  detail::add_smooth_field(rec.image, 1, cfg, rng);

  int64_t lesions_min = cfg.lesions_min;
  if (split == Split::train && lesions_min < 1) lesions_min = 1;
  const int64_t count = rng.uniform_int(lesions_min, std::max(lesions_min, cfg.lesions_max));
  const Shape3 s = cfg.volume_shape;
  for (int64_t l = 0; l < count; ++l) {
    const int64_t r = rng.uniform_int(cfg.radius_min, cfg.radius_max);
    if (2 * r + 1 > std::min({s.d, s.h, s.w}))
      throw InvalidArgument("gen: lesion radius " + std::to_string(r) + " cannot fit in " + s.str());
    const int64_t ci = rng.uniform_int(r, s.d - 1 - r);
    const int64_t cj = rng.uniform_int(r, s.h - 1 - r);
    const int64_t ck = rng.uniform_int(r, s.w - 1 - r);
    paint_ball(rec.gt, ci, cj, ck, r);
  }
  const T c0 = static_cast<T>(cfg.lesion_contrast_t1);
  const T c1 = static_cast<T>(cfg.lesion_contrast_flair);
  for (int64_t i = 0; i < rec.gt.voxels(); ++i)
    if (rec.gt.data()[i]) {
      rec.image.channel(0)[i] += c0;
      rec.image.channel(1)[i] += c1;
    }
  if (cfg.texture_noise_sigma > 0)
    for (int64_t i = 0; i < rec.image.size(); ++i)
      rec.image.data()[i] += static_cast<T>(rng.normal(0.0, cfg.texture_noise_sigma));
  return rec;
}

/// Full cohort in split order: train, validation, test.
template <typename T>
std::vector<SubjectRecord<T>> generate_dataset(const GenConfig& cfg) {
  cfg.validate();
  std::vector<SubjectRecord<T>> out;
  int64_t idx = 0;
  for (int64_t i = 0; i < cfg.n_train; ++i) out.push_back(generate_subject<T>(cfg, idx++, Split::train));
  for (int64_t i = 0; i < cfg.n_validation; ++i)
    out.push_back(generate_subject<T>(cfg, idx++, Split::validation));
  for (int64_t i = 0; i < cfg.n_test; ++i) out.push_back(generate_subject<T>(cfg, idx++, Split::test));
  return out;
}

// ---------------------------------------------------------------------------
// Patch sampling
// ---------------------------------------------------------------------------

template <typename T>
struct PatchSample {
  Volume<T> image;
  BinaryMask gt;
  bool lesion_centered = false;
  bool balanced_fallback = false;  // balanced requested on a lesion-free subject
};

/// Crop a congruent (image, gt) patch. Balanced sampling centers the patch on
/// a uniformly drawn lesion voxel with probability 0.5, otherwise draws a
/// uniform corner; corners are clamped so the crop stays in bounds.
template <typename T>
PatchSample<T> sample_patch(const SubjectRecord<T>& subject, Shape3 crop, bool balanced, Rng& rng) {
  const Shape3 s = subject.image.shape();
  if (crop.d > s.d || crop.h > s.h || crop.w > s.w || !crop.valid())
    throw InvalidArgument("crop " + crop.str() + " does not fit in volume " + s.str());

  PatchSample<T> out;
  int64_t ci = 0, cj = 0, ck = 0;
  bool centered = false;
  if (balanced) {
    const int64_t lesion_voxels = subject.gt.count_ones();
    if (lesion_voxels == 0) {
      out.balanced_fallback = true;
    } else if (rng.bernoulli(0.5)) {
      int64_t pick = rng.uniform_int(0, lesion_voxels - 1);
      int64_t at = -1;
      for (int64_t i = 0; i < subject.gt.voxels(); ++i)
        if (subject.gt.data()[i] && pick-- == 0) {
          at = i;
          break;
        }
      const int64_t li = at / (s.h * s.w), lj = (at / s.w) % s.h, lk = at % s.w;
      ci = std::clamp(li - crop.d / 2, int64_t(0), s.d - crop.d);
      cj = std::clamp(lj - crop.h / 2, int64_t(0), s.h - crop.h);
      ck = std::clamp(lk - crop.w / 2, int64_t(0), s.w - crop.w);
      centered = true;
    }
  }
  if (!centered) {
    ci = rng.uniform_int(0, s.d - crop.d);
    cj = rng.uniform_int(0, s.h - crop.h);
    ck = rng.uniform_int(0, s.w - crop.w);
  }
  out.lesion_centered = centered;
  out.image = Volume<T>(subject.image.channels(), crop);
  out.gt = BinaryMask(crop);
  for (int64_t c = 0; c < subject.image.channels(); ++c)
    for (int64_t i = 0; i < crop.d; ++i)
      for (int64_t j = 0; j < crop.h; ++j) {
        const T* src = subject.image.channel(c) + ((ci + i) * s.h + cj + j) * s.w + ck;
        T* dst = out.image.channel(c) + (i * crop.h + j) * crop.w;
        std::copy(src, src + crop.w, dst);
      }
  for (int64_t i = 0; i < crop.d; ++i)
    for (int64_t j = 0; j < crop.h; ++j) {
      const uint8_t* src = subject.gt.data() + ((ci + i) * s.h + cj + j) * s.w + ck;
      uint8_t* dst = out.gt.data() + (i * crop.h + j) * crop.w;
      std::copy(src, src + crop.w, dst);
    }
  return out;
}

// ---------------------------------------------------------------------------
// Augmentation
// ---------------------------------------------------------------------------

struct AugmentConfig {
  bool enable_rotation = true;
  bool enable_flip = true;
  bool enable_intensity = true;
  bool enable_noise = true;
  Shape3 crop_size{12, 12, 12};
  double intensity_shift_range = 0.1;
  double gaussian_noise_sigma = 0.05;

  void validate() const {
    if (!crop_size.valid()) throw InvalidArgument("augment.crop_size invalid");
    if (intensity_shift_range < 0 || gaussian_noise_sigma < 0)
      throw InvalidArgument("augment: ranges must be >= 0");
  }
};

namespace detail {

inline Shape3 quarter_turn_shape(const Shape3& s, int axis) {
  switch (axis) {
    case 0: return {s.d, s.w, s.h};
    case 1: return {s.w, s.h, s.d};
    default: return {s.h, s.d, s.w};
  }
}

/// Source coordinates of dst(i,j,k) under a single quarter turn about `axis`
/// (0=d, 1=h, 2=w). About d: dst(i,j,k) = src(i, k, src_w-1-j).
inline std::array<int64_t, 3> quarter_turn_src(const Shape3& dst, int axis, int64_t i, int64_t j,
                                               int64_t k) {
  switch (axis) {
    case 0: return {i, k, dst.h - 1 - j};
    case 1: return {k, j, dst.d - 1 - i};
    default: return {dst.h - 1 - j, i, k};
  }
}

}  // namespace detail

/// Quarter-turn rotations about one axis, applied iteratively.
template <typename T>
Volume<T> rotate90(const Volume<T>& v, int axis, int quarter) {
  quarter &= 3;
  Volume<T> cur = v;
  for (int q = 0; q < quarter; ++q) {
    const Shape3 ds = detail::quarter_turn_shape(cur.shape(), axis);
    Volume<T> nxt(cur.channels(), ds);
    for (int64_t c = 0; c < cur.channels(); ++c)
      for (int64_t i = 0; i < ds.d; ++i)
        for (int64_t j = 0; j < ds.h; ++j)
          for (int64_t k = 0; k < ds.w; ++k) {
            auto src = detail::quarter_turn_src(ds, axis, i, j, k);
            nxt(c, i, j, k) = cur(c, src[0], src[1], src[2]);
          }
    cur = std::move(nxt);
  }
  return cur;
}

inline BinaryMask rotate90(const BinaryMask& m, int axis, int quarter) {
  Volume<uint8_t> tmp(1, m.shape());
  std::copy(m.data(), m.data() + m.voxels(), tmp.data());
  Volume<uint8_t> r = rotate90(tmp, axis, quarter);
  BinaryMask out(r.shape());
  std::copy(r.data(), r.data() + r.size(), out.data());
  return out;
}

template <typename T>
Volume<T> flip_axis(const Volume<T>& v, int axis) {
  const Shape3 s = v.shape();
  Volume<T> out(v.channels(), s);
  for (int64_t c = 0; c < v.channels(); ++c)
    for (int64_t i = 0; i < s.d; ++i)
      for (int64_t j = 0; j < s.h; ++j)
        for (int64_t k = 0; k < s.w; ++k) {
          const int64_t si = axis == 0 ? s.d - 1 - i : i;
          const int64_t sj = axis == 1 ? s.h - 1 - j : j;
          const int64_t sk = axis == 2 ? s.w - 1 - k : k;
          out(c, i, j, k) = v(c, si, sj, sk);
        }
  return out;
}

inline BinaryMask flip_axis(const BinaryMask& m, int axis) {
  Volume<uint8_t> tmp(1, m.shape());
  std::copy(m.data(), m.data() + m.voxels(), tmp.data());
  Volume<uint8_t> r = flip_axis(tmp, axis);
  BinaryMask out(r.shape());
  std::copy(r.data(), r.data() + r.size(), out.data());
  return out;
}

/// Geometric ops hit image and mask identically; intensity shift (per channel)
/// and Gaussian noise touch the image only. The mask stays strictly {0,1}.
template <typename T>
void augment(Volume<T>& image, BinaryMask& gt, const AugmentConfig& cfg, Rng& rng) {
  cfg.validate();
  if (cfg.enable_rotation) {
    const int axis = static_cast<int>(rng.uniform_int(0, 2));
    const int quarter = static_cast<int>(rng.uniform_int(0, 3));
    if (quarter) {
      image = rotate90(image, axis, quarter);
      gt = rotate90(gt, axis, quarter);
    }
  }
  if (cfg.enable_flip) {
    for (int axis = 0; axis < 3; ++axis)
      if (rng.bernoulli(0.5)) {
        image = flip_axis(image, axis);
        gt = flip_axis(gt, axis);
      }
  }
  if (cfg.enable_intensity) {
    for (int64_t c = 0; c < image.channels(); ++c) {
      const T delta = static_cast<T>(rng.uniform(-cfg.intensity_shift_range, cfg.intensity_shift_range));
      T* ch = image.channel(c);
      for (int64_t i = 0; i < image.voxels(); ++i) ch[i] += delta;
    }
  }
  if (cfg.enable_noise && cfg.gaussian_noise_sigma > 0) {
    for (int64_t i = 0; i < image.size(); ++i)
      image.data()[i] += static_cast<T>(rng.normal(0.0, cfg.gaussian_noise_sigma));
  }
}

}  // namespace tvseg
