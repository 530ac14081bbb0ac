#ifndef XS_KERNELS_HPP
#define XS_KERNELS_HPP

#include <algorithm>
#include <array>
#include <cmath>
#include <cstring>

#include "xs/kernels_conv.hpp"
#include "xs/tensor.hpp"

// Non-convolution compute kernels on row-major buffers. Shape validation
// lives in the graph layer; kernels assume consistent extents and keep a
// fixed per-output accumulation order.

namespace xs::kernels {

// ---------------------------------------------------------------------------
// nearest-neighbor upsampling
// ---------------------------------------------------------------------------
template <typename T>
void upsample_nearest_forward(const T* in, int64_t nc, int64_t d, int64_t h, int64_t w,
                              int64_t f, T* out) {
  const int64_t od = d * f, oh = h * f, ow = w * f;
  parallel_for(nc * od, [&](int64_t b, int64_t e) {
    for (int64_t i = b; i < e; ++i) {
      const int64_t c = i / od, oz = i % od;
      const T* ipl = in + c * d * h * w + (oz / f) * h * w;
      T* opl = out + c * od * oh * ow + oz * oh * ow;
      for (int64_t oy = 0; oy < oh; ++oy) {
        const T* irow = ipl + (oy / f) * w;
        T* orow = opl + oy * ow;
        for (int64_t ox = 0; ox < ow; ++ox) orow[ox] = irow[ox / f];
      }
    }
  });
}

template <typename T>
void upsample_nearest_backward(const T* gout, int64_t nc, int64_t d, int64_t h, int64_t w,
                               int64_t f, T* gin, bool assign = false) {
  const int64_t od = d * f, oh = h * f, ow = w * f;
  parallel_for(nc * d, [&](int64_t b, int64_t e) {
    for (int64_t i = b; i < e; ++i) {
      const int64_t c = i / d, iz = i % d;
      const T* gpl = gout + c * od * oh * ow;
      T* grow0 = gin + c * d * h * w + iz * h * w;
      for (int64_t iy = 0; iy < h; ++iy) {
        for (int64_t ix = 0; ix < w; ++ix) {
          T acc = T(0);
          for (int64_t fz = 0; fz < f; ++fz)
            for (int64_t fy = 0; fy < f; ++fy)
              for (int64_t fx = 0; fx < f; ++fx)
                acc += gpl[(iz * f + fz) * oh * ow + (iy * f + fy) * ow + ix * f + fx];
          if (assign) grow0[iy * w + ix] = acc;
          else grow0[iy * w + ix] += acc;
        }
      }
    }
  });
}

// ---------------------------------------------------------------------------
// batch normalization over (N, D, H, W) per channel, plus a fused
// BN + LeakyReLU variant used by the network blocks. Loop bodies live in
// standalone functions so the vectorizer sees plain pointers, not lambda
// captures. ACC=false overwrites the input-gradient buffer.
// ---------------------------------------------------------------------------
namespace bndetail {

#if defined(__GNUC__)
#define XS_NOINLINE __attribute__((noinline))
#else
#define XS_NOINLINE
#endif

template <typename T>
XS_NOINLINE void stats_one(const T* __restrict in, int64_t n, int64_t c, int64_t sp, int64_t ch, T eps,
               T* __restrict mean, T* __restrict invstd) {
  const int64_t m = n * sp;
  double s1 = 0, s2 = 0;
  for (int64_t i = 0; i < n; ++i) {
    const T* __restrict row = in + (i * c + ch) * sp;
    T l1[16] = {}, l2[16] = {};
    int64_t v = 0;
    for (; v + 16 <= sp; v += 16)
      for (int j = 0; j < 16; ++j) {
        const T x = row[v + j];
        l1[j] += x;
        l2[j] += x * x;
      }
    for (; v < sp; ++v) {
      const T x = row[v];
      l1[0] += x;
      l2[0] += x * x;
    }
    for (int j = 0; j < 16; ++j) {
      s1 += double(l1[j]);
      s2 += double(l2[j]);
    }
  }
  const double mu = s1 / double(m);
  const double var = std::max(0.0, s2 / double(m) - mu * mu);
  mean[ch] = T(mu);
  invstd[ch] = T(1.0 / std::sqrt(var + double(eps)));
}

// LeakyReLU written as max/min so the select stays arithmetic.
template <typename T, bool LEAKY>
XS_NOINLINE void normalize_row(const T* __restrict row, int64_t sp, T mu, T istd, T g, T bta, T slope,
                   T* __restrict orow) {
  for (int64_t v = 0; v < sp; ++v) {
    const T y = (row[v] - mu) * istd * g + bta;
    if constexpr (LEAKY) {
      const T yp = std::max(y, T(0));
      const T yn = std::min(y, T(0));
      orow[v] = yp + slope * yn;
    } else {
      orow[v] = y;
    }
  }
}

template <typename T, bool LEAKY>
XS_NOINLINE void bwd_sums_row(const T* __restrict row, const T* __restrict grow, int64_t sp, T mu, T istd,
                  T gam, T bet, T slope, double* s1, double* s2) {
  T l1[16] = {}, l2[16] = {};
  int64_t v = 0;
  for (; v + 16 <= sp; v += 16)
    for (int j = 0; j < 16; ++j) {
      const T xhat = (row[v + j] - mu) * istd;
      const T y = xhat * gam + bet;
      const T mult = (!LEAKY || y > T(0)) ? T(1) : slope;
      const T g = grow[v + j] * mult;
      l1[j] += g;
      l2[j] += g * xhat;
    }
  for (; v < sp; ++v) {
    const T xhat = (row[v] - mu) * istd;
    const T y = xhat * gam + bet;
    const T mult = (!LEAKY || y > T(0)) ? T(1) : slope;
    const T g = grow[v] * mult;
    l1[0] += g;
    l2[0] += g * xhat;
  }
  for (int j = 0; j < 16; ++j) {
    *s1 += double(l1[j]);
    *s2 += double(l2[j]);
  }
}

template <typename T, bool LEAKY, bool ACC>
XS_NOINLINE void bwd_apply_row(const T* __restrict row, const T* __restrict grow, int64_t sp, T mu, T istd,
                   T gam, T bet, T slope, T k1, T k2, T scale, T* __restrict orow) {
  for (int64_t v = 0; v < sp; ++v) {
    const T xhat = (row[v] - mu) * istd;
    const T y = xhat * gam + bet;
    const T mult = (!LEAKY || y > T(0)) ? T(1) : slope;
    const T g = grow[v] * mult;
    const T r = scale * (g - k1 - xhat * k2);
    if constexpr (ACC) orow[v] += r;
    else orow[v] = r;
  }
}

}  // namespace bndetail

template <typename T>
void bn_stats(const T* in, int64_t n, int64_t c, int64_t sp, T* mean, T* invstd, T eps) {
  parallel_for(c, [&](int64_t b, int64_t e) {
    for (int64_t ch = b; ch < e; ++ch) bndetail::stats_one(in, n, c, sp, ch, eps, mean, invstd);
  });
}

template <typename T, bool LEAKY>
void bn_act_forward_train(const T* in, int64_t n, int64_t c, int64_t sp, const T* gamma,
                          const T* beta, T eps, T slope, T* out, T* mean, T* invstd) {
  bn_stats(in, n, c, sp, mean, invstd, eps);
  parallel_for(n * c, [&](int64_t b, int64_t e) {
    for (int64_t i = b; i < e; ++i) {
      const int64_t ch = i % c;
      bndetail::normalize_row<T, LEAKY>(in + i * sp, sp, mean[ch], invstd[ch], gamma[ch],
                                        beta[ch], slope, out + i * sp);
    }
  });
}

template <typename T, bool LEAKY>
void bn_act_forward_eval(const T* in, int64_t n, int64_t c, int64_t sp, const T* gamma,
                         const T* beta, const T* rmean, const T* rvar, T eps, T slope, T* out) {
  parallel_for(n * c, [&](int64_t b, int64_t e) {
    for (int64_t i = b; i < e; ++i) {
      const int64_t ch = i % c;
      const T istd = T(1.0 / std::sqrt(double(rvar[ch]) + double(eps)));
      bndetail::normalize_row<T, LEAKY>(in + i * sp, sp, rmean[ch], istd, gamma[ch], beta[ch],
                                        slope, out + i * sp);
    }
  });
}

template <typename T>
void bn_forward_train(const T* in, int64_t n, int64_t c, int64_t sp, const T* gamma,
                      const T* beta, T eps, T* out, T* mean, T* invstd) {
  bn_act_forward_train<T, false>(in, n, c, sp, gamma, beta, eps, T(0), out, mean, invstd);
}

template <typename T>
void bn_forward_eval(const T* in, int64_t n, int64_t c, int64_t sp, const T* gamma, const T* beta,
                     const T* rmean, const T* rvar, T eps, T* out) {
  bn_act_forward_eval<T, false>(in, n, c, sp, gamma, beta, rmean, rvar, eps, T(0), out);
}

template <typename T>
void bn_leaky_forward_train(const T* in, int64_t n, int64_t c, int64_t sp, const T* gamma,
                            const T* beta, T eps, T slope, T* out, T* mean, T* invstd) {
  bn_act_forward_train<T, true>(in, n, c, sp, gamma, beta, eps, slope, out, mean, invstd);
}

template <typename T>
void bn_leaky_forward_eval(const T* in, int64_t n, int64_t c, int64_t sp, const T* gamma,
                           const T* beta, const T* rmean, const T* rvar, T eps, T slope,
                           T* out) {
  bn_act_forward_eval<T, true>(in, n, c, sp, gamma, beta, rmean, rvar, eps, slope, out);
}

// Backward through the batch statistics. slope < 0 means "no fused
// activation"; otherwise the upstream gradient is gated by the LeakyReLU.
template <typename T, bool ACC>
void bn_backward_train(const T* in, const T* gout, int64_t n, int64_t c, int64_t sp,
                       const T* gamma, const T* beta, const T* mean, const T* invstd, T slope,
                       T* gin, T* ggamma, T* gbeta) {
  const int64_t m = n * sp;
  const bool leaky = slope >= T(0);
  parallel_for(c, [&](int64_t b, int64_t e) {
    for (int64_t ch = b; ch < e; ++ch) {
      const T mu = mean[ch], istd = invstd[ch], gam = gamma[ch], bet = beta[ch];
      double sg = 0, sgx = 0;
      for (int64_t i = 0; i < n; ++i) {
        const int64_t off = (i * c + ch) * sp;
        if (leaky)
          bndetail::bwd_sums_row<T, true>(in + off, gout + off, sp, mu, istd, gam, bet, slope,
                                          &sg, &sgx);
        else
          bndetail::bwd_sums_row<T, false>(in + off, gout + off, sp, mu, istd, gam, bet, slope,
                                           &sg, &sgx);
      }
      ggamma[ch] += T(sgx);
      gbeta[ch] += T(sg);
      const T k1 = T(sg / double(m));
      const T k2 = T(sgx / double(m));
      const T scale = gam * istd;
      for (int64_t i = 0; i < n; ++i) {
        const int64_t off = (i * c + ch) * sp;
        if (leaky)
          bndetail::bwd_apply_row<T, true, ACC>(in + off, gout + off, sp, mu, istd, gam, bet,
                                                slope, k1, k2, scale, gin + off);
        else
          bndetail::bwd_apply_row<T, false, ACC>(in + off, gout + off, sp, mu, istd, gam, bet,
                                                 slope, k1, k2, scale, gin + off);
      }
    }
  });
}

template <typename T, bool ACC>
void bn_backward_eval(const T* gout, int64_t n, int64_t c, int64_t sp, const T* gamma,
                      const T* beta, const T* rvar, T eps, T slope, T* gin, T* ggamma, T* gbeta,
                      const T* in, const T* rmean) {
  const bool leaky = slope >= T(0);
  parallel_for(c, [&](int64_t b, int64_t e) {
    for (int64_t ch = b; ch < e; ++ch) {
      const T istd = T(1.0 / std::sqrt(double(rvar[ch]) + double(eps)));
      const T scale = gamma[ch] * istd;
      const T mu = rmean[ch], gam = gamma[ch], bet = beta[ch];
      double sg = 0, sgx = 0;
      for (int64_t i = 0; i < n; ++i) {
        const int64_t off = (i * c + ch) * sp;
        if (leaky)
          bndetail::bwd_sums_row<T, true>(in + off, gout + off, sp, mu, istd, gam, bet, slope,
                                          &sg, &sgx);
        else
          bndetail::bwd_sums_row<T, false>(in + off, gout + off, sp, mu, istd, gam, bet, slope,
                                           &sg, &sgx);
        // eval mode: gin = scale * gated(gout)
        if (leaky)
          bndetail::bwd_apply_row<T, true, ACC>(in + off, gout + off, sp, mu, istd, gam, bet,
                                                slope, T(0), T(0), scale, gin + off);
        else
          bndetail::bwd_apply_row<T, false, ACC>(in + off, gout + off, sp, mu, istd, gam, bet,
                                                 slope, T(0), T(0), scale, gin + off);
      }
      ggamma[ch] += T(sgx);
      gbeta[ch] += T(sg);
    }
  });
}

// ---------------------------------------------------------------------------
// pooling, cropping, padding, one-hot
// ---------------------------------------------------------------------------

// factor^3 box average; extents must be divisible by factor.
template <typename T>
void avg_pool(const T* in, int64_t nc, int64_t d, int64_t h, int64_t w, int64_t f, T* out) {
  const int64_t od = d / f, oh = h / f, ow = w / f;
  const T inv = T(1) / T(f * f * f);
  parallel_for(nc * od, [&](int64_t b, int64_t e) {
    for (int64_t i = b; i < e; ++i) {
      const int64_t c = i / od, oz = i % od;
      const T* ipl = in + c * d * h * w;
      T* opl = out + c * od * oh * ow + oz * oh * ow;
      for (int64_t oy = 0; oy < oh; ++oy) {
        for (int64_t ox = 0; ox < ow; ++ox) {
          T acc = T(0);
          for (int64_t fz = 0; fz < f; ++fz)
            for (int64_t fy = 0; fy < f; ++fy)
              for (int64_t fx = 0; fx < f; ++fx)
                acc += ipl[(oz * f + fz) * h * w + (oy * f + fy) * w + ox * f + fx];
          opl[oy * ow + ox] = acc * inv;
        }
      }
    }
  });
}

// Center crop of the spatial dims; offset floors on the low side.
inline std::array<int64_t, 3> crop_offsets(int64_t d, int64_t h, int64_t w, int64_t td,
                                           int64_t th, int64_t tw) {
  return {(d - td) / 2, (h - th) / 2, (w - tw) / 2};
}

template <typename T>
void center_crop(const T* in, int64_t nc, int64_t d, int64_t h, int64_t w, int64_t td, int64_t th,
                 int64_t tw, T* out) {
  const auto off = crop_offsets(d, h, w, td, th, tw);
  parallel_for(nc, [&](int64_t b, int64_t e) {
    for (int64_t c = b; c < e; ++c) {
      const T* ipl = in + c * d * h * w;
      T* opl = out + c * td * th * tw;
      for (int64_t z = 0; z < td; ++z)
        for (int64_t y = 0; y < th; ++y)
          std::memcpy(opl + (z * th + y) * tw,
                      ipl + ((z + off[0]) * h + (y + off[1])) * w + off[2],
                      size_t(tw) * sizeof(T));
    }
  });
}

template <typename T>
void center_crop_backward(const T* gout, int64_t nc, int64_t d, int64_t h, int64_t w, int64_t td,
                          int64_t th, int64_t tw, T* gin) {
  const auto off = crop_offsets(d, h, w, td, th, tw);
  parallel_for(nc, [&](int64_t b, int64_t e) {
    for (int64_t c = b; c < e; ++c) {
      const T* gpl = gout + c * td * th * tw;
      T* ipl = gin + c * d * h * w;
      for (int64_t z = 0; z < td; ++z)
        for (int64_t y = 0; y < th; ++y) {
          T* dst = ipl + ((z + off[0]) * h + (y + off[1])) * w + off[2];
          const T* src = gpl + (z * th + y) * tw;
          for (int64_t x = 0; x < tw; ++x) dst[x] += src[x];
        }
    }
  });
}

// Edge-replication padding of a rank-3 volume.
template <typename T>
Tensor<T> pad_replicate3(const Tensor<T>& in, std::array<int64_t, 3> lo,
                         std::array<int64_t, 3> hi) {
  const int64_t d = in.extent(0), h = in.extent(1), w = in.extent(2);
  Tensor<T> out = Tensor<T>::uninit({d + lo[0] + hi[0], h + lo[1] + hi[1], w + lo[2] + hi[2]});
  const int64_t od = out.extent(0), oh = out.extent(1), ow = out.extent(2);
  for (int64_t z = 0; z < od; ++z) {
    const int64_t sz = std::clamp<int64_t>(z - lo[0], 0, d - 1);
    for (int64_t y = 0; y < oh; ++y) {
      const int64_t sy = std::clamp<int64_t>(y - lo[1], 0, h - 1);
      for (int64_t x = 0; x < ow; ++x) {
        const int64_t sx = std::clamp<int64_t>(x - lo[2], 0, w - 1);
        out[(z * oh + y) * ow + x] = in[(sz * h + sy) * w + sx];
      }
    }
  }
  return out;
}

// labels [N, D, H, W] (values < classes) -> one-hot [N, classes, D, H, W]
template <typename T, typename L>
Tensor<T> one_hot(const Tensor<L>& labels, int64_t classes) {
  const Shape& s = labels.shape();
  const int64_t n = s[0], sp = s[1] * s[2] * s[3];
  Tensor<T> out({n, classes, s[1], s[2], s[3]});
  for (int64_t i = 0; i < n; ++i) {
    const L* lab = labels.data() + i * sp;
    T* base = out.data() + i * classes * sp;
    for (int64_t v = 0; v < sp; ++v) base[int64_t(lab[v]) * sp + v] = T(1);
  }
  return out;
}

// ---------------------------------------------------------------------------
// softmax over the channel axis of [N, C, sp]
// ---------------------------------------------------------------------------
template <typename T>
void softmax_channel_forward(const T* in, int64_t n, int64_t c, int64_t sp, T* out) {
  parallel_for(n * sp, [&](int64_t b, int64_t e) {
    for (int64_t i = b; i < e; ++i) {
      const int64_t bn = i / sp, v = i % sp;
      const T* x = in + bn * c * sp + v;
      T* o = out + bn * c * sp + v;
      T mx = x[0];
      for (int64_t ch = 1; ch < c; ++ch) mx = std::max(mx, x[ch * sp]);
      T sum = T(0);
      for (int64_t ch = 0; ch < c; ++ch) {
        const T ev = std::exp(x[ch * sp] - mx);
        o[ch * sp] = ev;
        sum += ev;
      }
      const T inv = T(1) / sum;
      for (int64_t ch = 0; ch < c; ++ch) o[ch * sp] *= inv;
    }
  }, 256);
}

template <typename T>
void softmax_channel_backward(const T* probs, const T* gout, int64_t n, int64_t c, int64_t sp,
                              T* gin) {
  parallel_for(n * sp, [&](int64_t b, int64_t e) {
    for (int64_t i = b; i < e; ++i) {
      const int64_t bn = i / sp, v = i % sp;
      const T* p = probs + bn * c * sp + v;
      const T* g = gout + bn * c * sp + v;
      T* o = gin + bn * c * sp + v;
      T dot = T(0);
      for (int64_t ch = 0; ch < c; ++ch) dot += p[ch * sp] * g[ch * sp];
      for (int64_t ch = 0; ch < c; ++ch) o[ch * sp] += p[ch * sp] * (g[ch * sp] - dot);
    }
  }, 256);
}

// ---------------------------------------------------------------------------
// trilinear warping (spatial transformer)
//
// Output voxel p samples the moving volume at p + disp(p); displacement
// channels are ordered (dz, dy, dx) in voxels. Out-of-bounds coordinates are
// clamped to the border, which also zeroes their spatial derivative.
// ---------------------------------------------------------------------------
namespace detail {
template <typename T>
struct Corner8 {
  int64_t z0, y0, x0;
  T fz, fy, fx;
  bool in_z, in_y, in_x;  // false where the coordinate was clamped
};

template <typename T>
inline Corner8<T> warp_corner(T z, T y, T x, int64_t d, int64_t h, int64_t w) {
  Corner8<T> c;
  c.in_z = (z > T(0) && z < T(d - 1));
  c.in_y = (y > T(0) && y < T(h - 1));
  c.in_x = (x > T(0) && x < T(w - 1));
  z = std::clamp(z, T(0), T(d - 1));
  y = std::clamp(y, T(0), T(h - 1));
  x = std::clamp(x, T(0), T(w - 1));
  c.z0 = std::min<int64_t>(int64_t(std::floor(double(z))), d > 1 ? d - 2 : 0);
  c.y0 = std::min<int64_t>(int64_t(std::floor(double(y))), h > 1 ? h - 2 : 0);
  c.x0 = std::min<int64_t>(int64_t(std::floor(double(x))), w > 1 ? w - 2 : 0);
  c.fz = d > 1 ? z - T(c.z0) : T(0);
  c.fy = h > 1 ? y - T(c.y0) : T(0);
  c.fx = w > 1 ? x - T(c.x0) : T(0);
  return c;
}
}  // namespace detail

template <typename T>
void warp_trilinear_forward(const T* mov, const T* disp, int64_t n, int64_t c, int64_t d,
                            int64_t h, int64_t w, T* out) {
  const int64_t sp = d * h * w;
  parallel_for(n * sp, [&](int64_t b, int64_t e) {
    for (int64_t i = b; i < e; ++i) {
      const int64_t bn = i / sp, v = i % sp;
      const int64_t z = v / (h * w), y = (v / w) % h, x = v % w;
      const T* dp = disp + bn * 3 * sp + v;
      const auto cr = detail::warp_corner<T>(T(z) + dp[0], T(y) + dp[sp], T(x) + dp[2 * sp], d, h, w);
      const T wz1 = cr.fz, wz0 = T(1) - wz1;
      const T wy1 = cr.fy, wy0 = T(1) - wy1;
      const T wx1 = cr.fx, wx0 = T(1) - wx1;
      const int64_t base0 = (cr.z0 * h + cr.y0) * w + cr.x0;
      const int64_t zstep = (d > 1) ? h * w : 0;
      const int64_t ystep = (h > 1) ? w : 0;
      const int64_t xstep = (w > 1) ? 1 : 0;
      for (int64_t ch = 0; ch < c; ++ch) {
        const T* m = mov + (bn * c + ch) * sp + base0;
        const T v000 = m[0], v001 = m[xstep], v010 = m[ystep], v011 = m[ystep + xstep];
        const T v100 = m[zstep], v101 = m[zstep + xstep], v110 = m[zstep + ystep],
                v111 = m[zstep + ystep + xstep];
        const T r0 = wy0 * (wx0 * v000 + wx1 * v001) + wy1 * (wx0 * v010 + wx1 * v011);
        const T r1 = wy0 * (wx0 * v100 + wx1 * v101) + wy1 * (wx0 * v110 + wx1 * v111);
        out[(bn * c + ch) * sp + v] = wz0 * r0 + wz1 * r1;
      }
    }
  }, 512);
}

// Accumulates into gdisp; gmov is optional (single-threaded scatter when set).
template <typename T>
void warp_trilinear_backward(const T* mov, const T* disp, const T* gout, int64_t n, int64_t c,
                             int64_t d, int64_t h, int64_t w, T* gdisp, T* gmov) {
  const int64_t sp = d * h * w;
  auto body = [&](int64_t b, int64_t e, bool scatter) {
    for (int64_t i = b; i < e; ++i) {
      const int64_t bn = i / sp, v = i % sp;
      const int64_t z = v / (h * w), y = (v / w) % h, x = v % w;
      const T* dp = disp + bn * 3 * sp + v;
      const auto cr = detail::warp_corner<T>(T(z) + dp[0], T(y) + dp[sp], T(x) + dp[2 * sp], d, h, w);
      const T wz1 = cr.fz, wz0 = T(1) - wz1;
      const T wy1 = cr.fy, wy0 = T(1) - wy1;
      const T wx1 = cr.fx, wx0 = T(1) - wx1;
      const int64_t base0 = (cr.z0 * h + cr.y0) * w + cr.x0;
      const int64_t zstep = (d > 1) ? h * w : 0;
      const int64_t ystep = (h > 1) ? w : 0;
      const int64_t xstep = (w > 1) ? 1 : 0;
      T gz = T(0), gy = T(0), gx = T(0);
      for (int64_t ch = 0; ch < c; ++ch) {
        const T* m = mov + (bn * c + ch) * sp + base0;
        const T v000 = m[0], v001 = m[xstep], v010 = m[ystep], v011 = m[ystep + xstep];
        const T v100 = m[zstep], v101 = m[zstep + xstep], v110 = m[zstep + ystep],
                v111 = m[zstep + ystep + xstep];
        const T g = gout[(bn * c + ch) * sp + v];
        // d/dz: difference of the two bilinear y-x slabs
        gz += g * (wy0 * (wx0 * (v100 - v000) + wx1 * (v101 - v001)) +
                   wy1 * (wx0 * (v110 - v010) + wx1 * (v111 - v011)));
        gy += g * (wz0 * (wx0 * (v010 - v000) + wx1 * (v011 - v001)) +
                   wz1 * (wx0 * (v110 - v100) + wx1 * (v111 - v101)));
        gx += g * (wz0 * (wy0 * (v001 - v000) + wy1 * (v011 - v010)) +
                   wz1 * (wy0 * (v101 - v100) + wy1 * (v111 - v110)));
        if (scatter) {
          T* gm = gmov + (bn * c + ch) * sp + base0;
          gm[0] += g * wz0 * wy0 * wx0;
          gm[xstep] += g * wz0 * wy0 * wx1;
          gm[ystep] += g * wz0 * wy1 * wx0;
          gm[ystep + xstep] += g * wz0 * wy1 * wx1;
          gm[zstep] += g * wz1 * wy0 * wx0;
          gm[zstep + xstep] += g * wz1 * wy0 * wx1;
          gm[zstep + ystep] += g * wz1 * wy1 * wx0;
          gm[zstep + ystep + xstep] += g * wz1 * wy1 * wx1;
        }
      }
      if (gdisp) {
        T* gd = gdisp + bn * 3 * sp + v;
        gd[0] += cr.in_z ? gz : T(0);
        gd[sp] += cr.in_y ? gy : T(0);
        gd[2 * sp] += cr.in_x ? gx : T(0);
      }
    }
  };
  if (gmov) {
    // overlapping corner writes: keep it sequential
    body(0, n * sp, true);
  } else {
    parallel_for(n * sp, [&](int64_t b, int64_t e) { body(b, e, false); }, 512);
  }
}

// Nearest-neighbor label warp, used at evaluation/export time.
template <typename L, typename T>
void warp_labels(const L* mov, const T* disp, int64_t n, int64_t d, int64_t h, int64_t w,
                 L* out) {
  const int64_t sp = d * h * w;
  parallel_for(n * sp, [&](int64_t b, int64_t e) {
    for (int64_t i = b; i < e; ++i) {
      const int64_t bn = i / sp, v = i % sp;
      const int64_t z = v / (h * w), y = (v / w) % h, x = v % w;
      const T* dp = disp + bn * 3 * sp + v;
      const int64_t sz = std::clamp<int64_t>(int64_t(std::llround(double(T(z) + dp[0]))), 0, d - 1);
      const int64_t sy = std::clamp<int64_t>(int64_t(std::llround(double(T(y) + dp[sp]))), 0, h - 1);
      const int64_t sx = std::clamp<int64_t>(int64_t(std::llround(double(T(x) + dp[2 * sp]))), 0, w - 1);
      out[bn * sp + v] = mov[bn * sp + (sz * h + sy) * w + sx];
    }
  }, 512);
}

}  // namespace xs::kernels

#endif  // XS_KERNELS_HPP
