#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "tvseg/core.hpp"
#include "tvseg/tensor.hpp"

namespace tvseg {

// ---------------------------------------------------------------------------
// 3D convolution (cross-correlation, stride 1, zero padding = kernel/2)
// w: (out_c, in_c, k, k, k) with odd k. Output keeps the spatial shape.
// ---------------------------------------------------------------------------

template <typename T>
Volume<T> conv3d_forward(const Volume<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  if (w.shape.size() != 5 || w.shape[2] != w.shape[3] || w.shape[2] != w.shape[4] ||
      w.shape[2] % 2 == 0)
    throw InvalidArgument("conv3d kernel must be (co,ci,k,k,k) with odd k, got " + w.shape_str());
  const int64_t co_n = w.shape[0], ci_n = w.shape[1], k = w.shape[2];
  if (x.channels() != ci_n)
    throw InvalidArgument("conv3d channel mismatch: input " + std::to_string(x.channels()) +
                          " vs kernel " + std::to_string(ci_n));
  if (b.numel() != co_n) throw InvalidArgument("conv3d bias size mismatch");
  const int64_t pad = k / 2;
  const Shape3 s = x.shape();
  const int64_t D = s.d, H = s.h, W = s.w, hw = H * W;

  Volume<T> y(co_n, s);
  for (int64_t co = 0; co < co_n; ++co) {
    T* yc = y.channel(co);
    std::fill(yc, yc + s.voxels(), b[co]);
    for (int64_t ci = 0; ci < ci_n; ++ci) {
      const T* xc = x.channel(ci);
      const T* wk = w.data() + (co * ci_n + ci) * k * k * k;
      for (int64_t dz = 0; dz < k; ++dz)
        for (int64_t dy = 0; dy < k; ++dy)
          for (int64_t dx = 0; dx < k; ++dx) {
            const T kv = wk[(dz * k + dy) * k + dx];
            if (kv == T(0)) continue;
            const int64_t oz = dz - pad, oy = dy - pad, ox = dx - pad;
            const int64_t z0 = std::max<int64_t>(0, -oz), z1 = std::min(D, D - oz);
            const int64_t y0 = std::max<int64_t>(0, -oy), y1 = std::min(H, H - oy);
            const int64_t x0 = std::max<int64_t>(0, -ox), x1 = std::min(W, W - ox);
            for (int64_t z = z0; z < z1; ++z)
              for (int64_t yy = y0; yy < y1; ++yy) {
                T* out = yc + z * hw + yy * W;
                const T* in = xc + (z + oz) * hw + (yy + oy) * W + ox;
                for (int64_t xx = x0; xx < x1; ++xx) out[xx] += kv * in[xx];
              }
          }
    }
  }
  return y;
}

/// Gradients of conv3d_forward. gx is assigned; gw/gb are accumulated so a
/// batch of patches can sum parameter gradients in place.
template <typename T>
void conv3d_backward(const Volume<T>& x, const Tensor<T>& w, const Volume<T>& gy, Volume<T>& gx,
                     Tensor<T>& gw, Tensor<T>& gb) {
  const int64_t co_n = w.shape[0], ci_n = w.shape[1], k = w.shape[2];
  const int64_t pad = k / 2;
  const Shape3 s = x.shape();
  const int64_t D = s.d, H = s.h, W = s.w, hw = H * W;

  gx = Volume<T>(ci_n, s);
  for (int64_t co = 0; co < co_n; ++co) {
    const T* gyc = gy.channel(co);
    double bacc = 0.0;
    for (int64_t i = 0; i < s.voxels(); ++i) bacc += gyc[i];
    gb[co] += static_cast<T>(bacc);

    for (int64_t ci = 0; ci < ci_n; ++ci) {
      const T* xc = x.channel(ci);
      T* gxc = gx.channel(ci);
      const T* wk = w.data() + (co * ci_n + ci) * k * k * k;
      T* gwk = gw.data() + (co * ci_n + ci) * k * k * k;
      for (int64_t dz = 0; dz < k; ++dz)
        for (int64_t dy = 0; dy < k; ++dy)
          for (int64_t dx = 0; dx < k; ++dx) {
            const T kv = wk[(dz * k + dy) * k + dx];
            const int64_t oz = dz - pad, oy = dy - pad, ox = dx - pad;
            const int64_t z0 = std::max<int64_t>(0, -oz), z1 = std::min(D, D - oz);
            const int64_t y0 = std::max<int64_t>(0, -oy), y1 = std::min(H, H - oy);
            const int64_t x0 = std::max<int64_t>(0, -ox), x1 = std::min(W, W - ox);
            double wacc = 0.0;
            for (int64_t z = z0; z < z1; ++z)
              for (int64_t yy = y0; yy < y1; ++yy) {
                const T* g = gyc + z * hw + yy * W;
                const T* in = xc + (z + oz) * hw + (yy + oy) * W + ox;
                T* gi = gxc + (z + oz) * hw + (yy + oy) * W + ox;
                double dot = 0.0;
                for (int64_t xx = x0; xx < x1; ++xx) {
                  dot += static_cast<double>(g[xx]) * in[xx];
                  gi[xx] += kv * g[xx];
                }
                wacc += dot;
              }
            gwk[(dz * k + dy) * k + dx] += static_cast<T>(wacc);
          }
    }
  }
}

// ---------------------------------------------------------------------------
// Instance normalization (per channel over the full spatial extent)
// ---------------------------------------------------------------------------

template <typename T>
struct InstNormCache {
  std::vector<T> xhat;
  std::vector<double> invstd;  // per channel
};

template <typename T>
Volume<T> instnorm_forward(const Volume<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                           double eps, InstNormCache<T>* cache) {
  const int64_t C = x.channels();
  if (gamma.numel() != C || beta.numel() != C)
    throw InvalidArgument("instance norm scale/shift length must equal channels");
  const int64_t V = x.voxels();
  Volume<T> y(C, x.shape());
  if (cache) {
    cache->xhat.assign(static_cast<size_t>(C * V), T(0));
    cache->invstd.assign(static_cast<size_t>(C), 0.0);
  }
  for (int64_t c = 0; c < C; ++c) {
    const T* xc = x.channel(c);
    T* yc = y.channel(c);
    double mean = 0.0;
    for (int64_t i = 0; i < V; ++i) mean += xc[i];
    mean /= static_cast<double>(V);
    double var = 0.0;
    for (int64_t i = 0; i < V; ++i) {
      const double d = xc[i] - mean;
      var += d * d;
    }
    var /= static_cast<double>(V);
    const double invstd = 1.0 / std::sqrt(var + eps);
    const T g = gamma[c], b = beta[c];
    T* xh = cache ? cache->xhat.data() + c * V : nullptr;
    for (int64_t i = 0; i < V; ++i) {
      const T h = static_cast<T>((xc[i] - mean) * invstd);
      if (xh) xh[i] = h;
      yc[i] = g * h + b;
    }
    if (cache) cache->invstd[static_cast<size_t>(c)] = invstd;
  }
  return y;
}

template <typename T>
void instnorm_backward(const Volume<T>& gy, const Tensor<T>& gamma, const InstNormCache<T>& cache,
                       Volume<T>& gx, Tensor<T>& ggamma, Tensor<T>& gbeta) {
  const int64_t C = gy.channels();
  const int64_t V = gy.voxels();
  gx = Volume<T>(C, gy.shape());
  for (int64_t c = 0; c < C; ++c) {
    const T* g = gy.channel(c);
    const T* xh = cache.xhat.data() + c * V;
    T* out = gx.channel(c);
    double s1 = 0.0, s2 = 0.0;
    for (int64_t i = 0; i < V; ++i) {
      s1 += g[i];
      s2 += static_cast<double>(g[i]) * xh[i];
    }
    ggamma[c] += static_cast<T>(s2);
    gbeta[c] += static_cast<T>(s1);
    const double m1 = s1 / static_cast<double>(V);
    const double m2 = s2 / static_cast<double>(V);
    const double scale = static_cast<double>(gamma[c]) * cache.invstd[static_cast<size_t>(c)];
    for (int64_t i = 0; i < V; ++i)
      out[i] = static_cast<T>(scale * (g[i] - m1 - static_cast<double>(xh[i]) * m2));
  }
}

// ---------------------------------------------------------------------------
// Leaky ReLU
// ---------------------------------------------------------------------------

template <typename T>
Volume<T> leaky_relu_forward(const Volume<T>& x, double slope, std::vector<uint8_t>* mask) {
  Volume<T> y(x.channels(), x.shape());
  if (mask) mask->assign(static_cast<size_t>(x.size()), 0);
  const T a = static_cast<T>(slope);
  for (int64_t i = 0; i < x.size(); ++i) {
    const bool pos = x.data()[i] >= T(0);
    y.data()[i] = pos ? x.data()[i] : a * x.data()[i];
    if (mask) (*mask)[static_cast<size_t>(i)] = pos;
  }
  return y;
}

template <typename T>
Volume<T> leaky_relu_backward(const Volume<T>& gy, const std::vector<uint8_t>& mask, double slope) {
  Volume<T> gx(gy.channels(), gy.shape());
  const T a = static_cast<T>(slope);
  for (int64_t i = 0; i < gy.size(); ++i)
    gx.data()[i] = mask[static_cast<size_t>(i)] ? gy.data()[i] : a * gy.data()[i];
  return gx;
}

// ---------------------------------------------------------------------------
// 2x2x2 max pooling, stride 2 (dims must be even)
// ---------------------------------------------------------------------------

template <typename T>
Volume<T> maxpool2_forward(const Volume<T>& x, std::vector<int64_t>* argmax) {
  const Shape3 s = x.shape();
  if (s.d % 2 || s.h % 2 || s.w % 2)
    throw InvalidArgument("maxpool2 needs even spatial dims, got " + s.str());
  const Shape3 o{s.d / 2, s.h / 2, s.w / 2};
  Volume<T> y(x.channels(), o);
  if (argmax) argmax->assign(static_cast<size_t>(y.size()), 0);
  for (int64_t c = 0; c < x.channels(); ++c) {
    const T* xc = x.channel(c);
    for (int64_t i = 0; i < o.d; ++i)
      for (int64_t j = 0; j < o.h; ++j)
        for (int64_t k = 0; k < o.w; ++k) {
          T best = xc[((2 * i) * s.h + 2 * j) * s.w + 2 * k];
          int64_t besti = ((2 * i) * s.h + 2 * j) * s.w + 2 * k;
          for (int64_t dz = 0; dz < 2; ++dz)
            for (int64_t dy = 0; dy < 2; ++dy)
              for (int64_t dx = 0; dx < 2; ++dx) {
                const int64_t at = ((2 * i + dz) * s.h + 2 * j + dy) * s.w + 2 * k + dx;
                if (xc[at] > best) {
                  best = xc[at];
                  besti = at;
                }
              }
          y(c, i, j, k) = best;
          if (argmax) (*argmax)[static_cast<size_t>(y.offset(c, i, j, k))] = besti;
        }
  }
  return y;
}

template <typename T>
Volume<T> maxpool2_backward(const Volume<T>& gy, const std::vector<int64_t>& argmax,
                            const Shape3& in_shape) {
  Volume<T> gx(gy.channels(), in_shape);
  const int64_t V = in_shape.voxels();
  for (int64_t c = 0; c < gy.channels(); ++c) {
    T* gxc = gx.channel(c);
    const T* gyc = gy.channel(c);
    const int64_t base = c * gy.voxels();
    for (int64_t i = 0; i < gy.voxels(); ++i)
      gxc[argmax[static_cast<size_t>(base + i)]] += gyc[i];
    (void)V;
  }
  return gx;
}

// ---------------------------------------------------------------------------
// 2x2x2 transposed convolution, stride 2 (exactly doubles spatial dims).
// w: (in_c, out_c, 2, 2, 2). Each output voxel receives exactly one tap.
// ---------------------------------------------------------------------------

template <typename T>
Volume<T> deconv2_forward(const Volume<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  if (w.shape.size() != 5 || w.shape[2] != 2 || w.shape[3] != 2 || w.shape[4] != 2)
    throw InvalidArgument("deconv2 kernel must be (ci,co,2,2,2), got " + w.shape_str());
  const int64_t ci_n = w.shape[0], co_n = w.shape[1];
  if (x.channels() != ci_n) throw InvalidArgument("deconv2 channel mismatch");
  if (b.numel() != co_n) throw InvalidArgument("deconv2 bias size mismatch");
  const Shape3 s = x.shape();
  const Shape3 o{2 * s.d, 2 * s.h, 2 * s.w};
  Volume<T> y(co_n, o);
  for (int64_t co = 0; co < co_n; ++co) {
    T* yc = y.channel(co);
    for (int64_t p = 0; p < o.d; ++p)
      for (int64_t q = 0; q < o.h; ++q)
        for (int64_t r = 0; r < o.w; ++r) {
          double acc = b[co];
          const int64_t tap = ((p & 1) * 2 + (q & 1)) * 2 + (r & 1);
          const int64_t u = p >> 1, v = q >> 1, t = r >> 1;
          for (int64_t ci = 0; ci < ci_n; ++ci)
            acc += static_cast<double>(x(ci, u, v, t)) * w[(ci * co_n + co) * 8 + tap];
          yc[(p * o.h + q) * o.w + r] = static_cast<T>(acc);
        }
  }
  return y;
}

template <typename T>
void deconv2_backward(const Volume<T>& x, const Tensor<T>& w, const Volume<T>& gy, Volume<T>& gx,
                      Tensor<T>& gw, Tensor<T>& gb) {
  const int64_t ci_n = w.shape[0], co_n = w.shape[1];
  const Shape3 s = x.shape();
  const Shape3 o = gy.shape();
  gx = Volume<T>(ci_n, s);
  for (int64_t co = 0; co < co_n; ++co) {
    const T* gyc = gy.channel(co);
    double bacc = 0.0;
    for (int64_t i = 0; i < gy.voxels(); ++i) bacc += gyc[i];
    gb[co] += static_cast<T>(bacc);
  }
  for (int64_t ci = 0; ci < ci_n; ++ci) {
    T* gxc = gx.channel(ci);
    const T* xc = x.channel(ci);
    for (int64_t co = 0; co < co_n; ++co) {
      const T* gyc = gy.channel(co);
      const T* wk = w.data() + (ci * co_n + co) * 8;
      T* gwk = gw.data() + (ci * co_n + co) * 8;
      for (int64_t dz = 0; dz < 2; ++dz)
        for (int64_t dy = 0; dy < 2; ++dy)
          for (int64_t dx = 0; dx < 2; ++dx) {
            const int64_t tap = (dz * 2 + dy) * 2 + dx;
            const T kv = wk[tap];
            double wacc = 0.0;
            for (int64_t u = 0; u < s.d; ++u)
              for (int64_t v = 0; v < s.h; ++v) {
                const T* g = gyc + ((2 * u + dz) * o.h + 2 * v + dy) * o.w + dx;
                const T* in = xc + (u * s.h + v) * s.w;
                T* gi = gxc + (u * s.h + v) * s.w;
                double dot = 0.0;
                for (int64_t t = 0; t < s.w; ++t) {
                  const T gval = g[2 * t];
                  dot += static_cast<double>(gval) * in[t];
                  gi[t] += kv * gval;
                }
                wacc += dot;
              }
            gwk[tap] += static_cast<T>(wacc);
          }
    }
  }
}

// ---------------------------------------------------------------------------
// Per-voxel softmax over two channels
// ---------------------------------------------------------------------------

template <typename T>
Volume<T> softmax2_forward(const Volume<T>& logits) {
  if (logits.channels() != 2) throw InvalidArgument("softmax2 expects exactly 2 channels");
  const int64_t V = logits.voxels();
  Volume<T> p(2, logits.shape());
  const T* z0 = logits.channel(0);
  const T* z1 = logits.channel(1);
  T* p0 = p.channel(0);
  T* p1 = p.channel(1);
  for (int64_t i = 0; i < V; ++i) {
    const double m = std::max<double>(z0[i], z1[i]);
    const double e0 = std::exp(z0[i] - m);
    const double e1 = std::exp(z1[i] - m);
    const double inv = 1.0 / (e0 + e1);
    p0[i] = static_cast<T>(e0 * inv);
    p1[i] = static_cast<T>(e1 * inv);
  }
  return p;
}

template <typename T>
Volume<T> softmax2_backward(const Volume<T>& probs, const Volume<T>& gprobs) {
  const int64_t V = probs.voxels();
  Volume<T> gz(2, probs.shape());
  const T* p0 = probs.channel(0);
  const T* p1 = probs.channel(1);
  const T* g0 = gprobs.channel(0);
  const T* g1 = gprobs.channel(1);
  T* o0 = gz.channel(0);
  T* o1 = gz.channel(1);
  for (int64_t i = 0; i < V; ++i) {
    const double dot = static_cast<double>(g0[i]) * p0[i] + static_cast<double>(g1[i]) * p1[i];
    o0[i] = static_cast<T>(p0[i] * (g0[i] - dot));
    o1[i] = static_cast<T>(p1[i] * (g1[i] - dot));
  }
  return gz;
}

// ---------------------------------------------------------------------------
// Channel concatenation
// ---------------------------------------------------------------------------

template <typename T>
Volume<T> concat_channels(const Volume<T>& a, const Volume<T>& b) {
  if (a.shape() != b.shape()) throw InvalidArgument("concat_channels shape mismatch");
  Volume<T> y(a.channels() + b.channels(), a.shape());
  std::copy(a.data(), a.data() + a.size(), y.data());
  std::copy(b.data(), b.data() + b.size(), y.data() + a.size());
  return y;
}

template <typename T>
void split_channels(const Volume<T>& y, int64_t first_channels, Volume<T>& a, Volume<T>& b) {
  a = Volume<T>(first_channels, y.shape());
  b = Volume<T>(y.channels() - first_channels, y.shape());
  std::copy(y.data(), y.data() + a.size(), a.data());
  std::copy(y.data() + a.size(), y.data() + y.size(), b.data());
}

// ---------------------------------------------------------------------------
// Small row-major matrix helpers for the attention block
// ---------------------------------------------------------------------------

/// C(m x n) += or = A(m x k) * B(k x n)
template <typename T>
void mm_nn(const T* A, const T* B, T* C, int64_t m, int64_t k, int64_t n, bool accumulate) {
  if (!accumulate) std::fill(C, C + m * n, T(0));
  for (int64_t i = 0; i < m; ++i) {
    T* crow = C + i * n;
    const T* arow = A + i * k;
    for (int64_t kk = 0; kk < k; ++kk) {
      const T a = arow[kk];
      if (a == T(0)) continue;
      const T* brow = B + kk * n;
      for (int64_t j = 0; j < n; ++j) crow[j] += a * brow[j];
    }
  }
}

/// C(m x n) += or = A(m x k) * B(n x k)^T
template <typename T>
void mm_nt(const T* A, const T* B, T* C, int64_t m, int64_t k, int64_t n, bool accumulate) {
  for (int64_t i = 0; i < m; ++i) {
    const T* arow = A + i * k;
    T* crow = C + i * n;
    for (int64_t j = 0; j < n; ++j) {
      const T* brow = B + j * k;
      double acc = 0.0;
      for (int64_t kk = 0; kk < k; ++kk) acc += static_cast<double>(arow[kk]) * brow[kk];
      crow[j] = accumulate ? crow[j] + static_cast<T>(acc) : static_cast<T>(acc);
    }
  }
}

/// C(m x n) += or = A(p x m)^T * B(p x n)
template <typename T>
void mm_tn(const T* A, const T* B, T* C, int64_t p, int64_t m, int64_t n, bool accumulate) {
  if (!accumulate) std::fill(C, C + m * n, T(0));
  for (int64_t r = 0; r < p; ++r) {
    const T* arow = A + r * m;
    const T* brow = B + r * n;
    for (int64_t i = 0; i < m; ++i) {
      const T a = arow[i];
      if (a == T(0)) continue;
      T* crow = C + i * n;
      for (int64_t j = 0; j < n; ++j) crow[j] += a * brow[j];
    }
  }
}

/// In-place row softmax with per-row max subtraction.
template <typename T>
void row_softmax(T* M, int64_t rows, int64_t cols) {
  for (int64_t i = 0; i < rows; ++i) {
    T* row = M + i * cols;
    double mx = row[0];
    for (int64_t j = 1; j < cols; ++j) mx = std::max<double>(mx, row[j]);
    double sum = 0.0;
    for (int64_t j = 0; j < cols; ++j) {
      const double e = std::exp(row[j] - mx);
      row[j] = static_cast<T>(e);
      sum += e;
    }
    const double inv = 1.0 / sum;
    for (int64_t j = 0; j < cols; ++j) row[j] = static_cast<T>(row[j] * inv);
  }
}

/// Backward of row_softmax given cached probabilities P and upstream gP.
template <typename T>
void row_softmax_backward(const T* P, const T* gP, T* gS, int64_t rows, int64_t cols) {
  for (int64_t i = 0; i < rows; ++i) {
    const T* p = P + i * cols;
    const T* g = gP + i * cols;
    T* o = gS + i * cols;
    double dot = 0.0;
    for (int64_t j = 0; j < cols; ++j) dot += static_cast<double>(g[j]) * p[j];
    for (int64_t j = 0; j < cols; ++j) o[j] = static_cast<T>(p[j] * (g[j] - dot));
  }
}

}  // namespace tvseg
