#pragma once

#include <array>
#include <vector>

#include "tvseg/core.hpp"

namespace tvseg {

/// Structuring element: a set of neighbor offsets inside an odd box.
struct StructElem {
  Shape3 shape{};
  std::vector<std::array<int64_t, 3>> offsets;

  /// Full box element of odd extent n (n=3 gives the 26-neighborhood + center).
  static StructElem box(int64_t n) {
    if (n < 1 || n % 2 == 0) throw InvalidArgument("structuring element extent must be odd and >= 1");
    StructElem e;
    e.shape = {n, n, n};
    const int64_t r = n / 2;
    e.offsets.reserve(static_cast<size_t>(n * n * n));
    for (int64_t i = -r; i <= r; ++i)
      for (int64_t j = -r; j <= r; ++j)
        for (int64_t k = -r; k <= r; ++k) e.offsets.push_back({i, j, k});
    return e;
  }

  bool contains_center() const {
    for (auto& o : offsets)
      if (o[0] == 0 && o[1] == 0 && o[2] == 0) return true;
    return false;
  }
};

struct PostprocConfig {
  StructElem opening_elem = StructElem::box(3);
  StructElem holefill_elem = StructElem::box(5);
  int64_t min_cluster_voxels = 50;
  // The opening step runs dilation followed by erosion by default (standard
  // morphology calls that order closing); set true to run erosion first.
  bool true_opening = false;

  void validate() const {
    if (min_cluster_voxels < 0) throw InvalidArgument("postproc.min_cluster_voxels must be >= 0");
    if (!opening_elem.contains_center() || !holefill_elem.contains_center())
      throw InvalidArgument("structuring elements must contain the center offset");
  }
};

/// out = 1 iff any in-bounds e-neighbor of the voxel is 1. Outside counts as 0.
inline BinaryMask dilate(const BinaryMask& m, const StructElem& e) {
  const Shape3 s = m.shape();
  BinaryMask out(s);
  for (int64_t i = 0; i < s.d; ++i)
    for (int64_t j = 0; j < s.h; ++j)
      for (int64_t k = 0; k < s.w; ++k) {
        uint8_t v = 0;
        for (auto& o : e.offsets) {
          const int64_t ni = i + o[0], nj = j + o[1], nk = k + o[2];
          if (ni < 0 || ni >= s.d || nj < 0 || nj >= s.h || nk < 0 || nk >= s.w) continue;
          if (m(ni, nj, nk)) {
            v = 1;
            break;
          }
        }
        out(i, j, k) = v;
      }
  return out;
}

/// out = 1 iff every e-neighbor is in bounds and 1. Border voxels erode away
/// under a full element because the outside counts as 0.
inline BinaryMask erode(const BinaryMask& m, const StructElem& e) {
  const Shape3 s = m.shape();
  BinaryMask out(s);
  for (int64_t i = 0; i < s.d; ++i)
    for (int64_t j = 0; j < s.h; ++j)
      for (int64_t k = 0; k < s.w; ++k) {
        uint8_t v = 1;
        for (auto& o : e.offsets) {
          const int64_t ni = i + o[0], nj = j + o[1], nk = k + o[2];
          if (ni < 0 || ni >= s.d || nj < 0 || nj >= s.h || nk < 0 || nk >= s.w || !m(ni, nj, nk)) {
            v = 0;
            break;
          }
        }
        out(i, j, k) = v;
      }
  return out;
}

namespace detail {
/// Flood from every border background voxel through 0-voxels, where adjacency
/// is given by the element's offsets. Returns reached flags.
inline std::vector<uint8_t> reach_from_border(const BinaryMask& m, const StructElem& e) {
  const Shape3 s = m.shape();
  std::vector<uint8_t> reached(static_cast<size_t>(s.voxels()), 0);
  std::vector<int64_t> stack;
  auto push = [&](int64_t i, int64_t j, int64_t k) {
    const int64_t at = (i * s.h + j) * s.w + k;
    if (!m.data()[at] && !reached[at]) {
      reached[at] = 1;
      stack.push_back(at);
    }
  };
  for (int64_t i = 0; i < s.d; ++i)
    for (int64_t j = 0; j < s.h; ++j)
      for (int64_t k = 0; k < s.w; ++k)
        if (i == 0 || i == s.d - 1 || j == 0 || j == s.h - 1 || k == 0 || k == s.w - 1)
          push(i, j, k);
  while (!stack.empty()) {
    const int64_t at = stack.back();
    stack.pop_back();
    const int64_t i = at / (s.h * s.w);
    const int64_t j = (at / s.w) % s.h;
    const int64_t k = at % s.w;
    for (auto& o : e.offsets) {
      const int64_t ni = i + o[0], nj = j + o[1], nk = k + o[2];
      if (ni < 0 || ni >= s.d || nj < 0 || nj >= s.h || nk < 0 || nk >= s.w) continue;
      push(ni, nj, nk);
    }
  }
  return reached;
}
}  // namespace detail

/// Background components that cannot reach the volume border under the
/// element's connectivity are flipped to foreground.
inline BinaryMask fill_holes(const BinaryMask& m, const StructElem& e) {
  auto reached = detail::reach_from_border(m, e);
  BinaryMask out = m;
  for (int64_t i = 0; i < m.voxels(); ++i)
    if (!m.data()[i] && !reached[static_cast<size_t>(i)]) out.data()[i] = 1;
  return out;
}

/// 26-connectivity components; labels 1..num_clusters assigned in raster-scan
/// first-encounter order.
inline LabelMap label_components(const BinaryMask& m) {
  const Shape3 s = m.shape();
  LabelMap lm;
  lm.shape = s;
  lm.labels.assign(static_cast<size_t>(s.voxels()), 0);
  std::vector<int64_t> stack;
  int32_t next = 0;
  for (int64_t seed = 0; seed < s.voxels(); ++seed) {
    if (!m.data()[seed] || lm.labels[static_cast<size_t>(seed)]) continue;
    ++next;
    lm.labels[static_cast<size_t>(seed)] = next;
    stack.push_back(seed);
    while (!stack.empty()) {
      const int64_t at = stack.back();
      stack.pop_back();
      const int64_t i = at / (s.h * s.w);
      const int64_t j = (at / s.w) % s.h;
      const int64_t k = at % s.w;
      for (int64_t di = -1; di <= 1; ++di)
        for (int64_t dj = -1; dj <= 1; ++dj)
          for (int64_t dk = -1; dk <= 1; ++dk) {
            if (di == 0 && dj == 0 && dk == 0) continue;
            const int64_t ni = i + di, nj = j + dj, nk = k + dk;
            if (ni < 0 || ni >= s.d || nj < 0 || nj >= s.h || nk < 0 || nk >= s.w) continue;
            const int64_t nat = (ni * s.h + nj) * s.w + nk;
            if (m.data()[nat] && !lm.labels[static_cast<size_t>(nat)]) {
              lm.labels[static_cast<size_t>(nat)] = next;
              stack.push_back(nat);
            }
          }
    }
  }
  lm.num_clusters = next;
  return lm;
}

inline std::vector<int64_t> cluster_sizes(const LabelMap& lm) {
  std::vector<int64_t> sizes(static_cast<size_t>(lm.num_clusters) + 1, 0);
  for (int32_t l : lm.labels) ++sizes[static_cast<size_t>(l)];
  sizes[0] = 0;
  return sizes;
}

/// Erase clusters strictly smaller than min_voxels ("smaller than 50 voxels"
/// is strict, so a 50-voxel cluster survives the default).
inline BinaryMask filter_small(const LabelMap& lm, int64_t min_voxels) {
  auto sizes = cluster_sizes(lm);
  BinaryMask out(lm.shape);
  for (size_t i = 0; i < lm.labels.size(); ++i) {
    const int32_t l = lm.labels[i];
    out.data()[i] = (l > 0 && sizes[static_cast<size_t>(l)] >= min_voxels) ? 1 : 0;
  }
  return out;
}

/// Full chain in the printed order: opening (as written: dilate then erode),
/// hole filling, labeling, size filter.
inline BinaryMask postprocess(const BinaryMask& m, const PostprocConfig& cfg) {
  cfg.validate();
  BinaryMask cur = cfg.true_opening ? dilate(erode(m, cfg.opening_elem), cfg.opening_elem)
                                    : erode(dilate(m, cfg.opening_elem), cfg.opening_elem);
  cur = fill_holes(cur, cfg.holefill_elem);
  return filter_small(label_components(cur), cfg.min_cluster_voxels);
}

}  // namespace tvseg
