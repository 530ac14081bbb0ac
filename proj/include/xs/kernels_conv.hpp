#ifndef XS_KERNELS_CONV_HPP
#define XS_KERNELS_CONV_HPP

#include <algorithm>
#include <cstring>
#include <type_traits>

#include "xs/tensor.hpp"

#if defined(__AVX512F__) || defined(__AVX2__)
#include <immintrin.h>
#endif

// Valid-padding 3D convolution. The stride-1 kernel is the hot loop of every
// network in this project; it processes one output row for a small block of
// output channels with the x-tile held in vector registers across the
// (cin, kz, ky, kx) reduction. Stride-2 k=2 downsampling convs are rewritten
// as a space-to-depth transform followed by a 1x1x1 conv so they take the
// same fast path. Accumulation order per output element is fixed, so results
// are independent of the worker count.

namespace xs::kernels {

struct ConvDims {
  int64_t n, cin, d, h, w;   // input
  int64_t cout, k;           // kernel
  int64_t stride;
  int64_t od, oh, ow;        // output

  static ConvDims of(const Shape& in, const Shape& w, int64_t stride) {
    ConvDims c;
    c.n = in[0]; c.cin = in[1]; c.d = in[2]; c.h = in[3]; c.w = in[4];
    c.cout = w[0]; c.k = w[2];
    c.stride = stride;
    c.od = (c.d - c.k) / stride + 1;
    c.oh = (c.h - c.k) / stride + 1;
    c.ow = (c.w - c.k) / stride + 1;
    return c;
  }
};

namespace convdetail {

// ---- scalar reference row kernel (double path, exotic strides) -----------
template <typename T, bool ACC>
inline void row_scalar(const T* in_base, int64_t ics, int64_t izs, int64_t iys,
                       const T* w_base, int64_t wocs, int64_t cin, int64_t k, const T* bias,
                       T* out_base, int64_t ocs, int64_t wo, int ocb) {
  for (int64_t x = 0; x < wo; ++x) {
    for (int b = 0; b < ocb; ++b) {
      T acc = bias ? bias[b] : T(0);
      const T* wp = w_base + b * wocs;
      for (int64_t ic = 0; ic < cin; ++ic)
        for (int64_t kz = 0; kz < k; ++kz)
          for (int64_t ky = 0; ky < k; ++ky)
            for (int64_t kx = 0; kx < k; ++kx)
              acc += wp[((ic * k + kz) * k + ky) * k + kx] *
                     in_base[ic * ics + kz * izs + ky * iys + x + kx];
      if constexpr (ACC) out_base[b * ocs + x] += acc;
      else out_base[b * ocs + x] = acc;
    }
  }
}

#if defined(__AVX512F__)

template <int OCB, bool ACC>
inline void row_f32_avx512(const float* in_base, int64_t ics, int64_t izs, int64_t iys,
                           const float* w_base, int64_t wocs, int64_t cin, int64_t k,
                           const float* bias, float* out_base, int64_t ocs, int64_t wo) {
  for (int64_t x0 = 0; x0 < wo; x0 += 16) {
    const int rem = int(std::min<int64_t>(16, wo - x0));
    const bool full = rem == 16;
    const __mmask16 m = full ? __mmask16(0xFFFF) : __mmask16((1u << rem) - 1);
    __m512 acc[OCB];
    for (int b = 0; b < OCB; ++b) acc[b] = _mm512_setzero_ps();
    const float* wp = w_base;
    for (int64_t ic = 0; ic < cin; ++ic) {
      const float* plane = in_base + ic * ics;
      for (int64_t kz = 0; kz < k; ++kz) {
        for (int64_t ky = 0; ky < k; ++ky) {
          const float* row = plane + kz * izs + ky * iys + x0;
          for (int64_t kx = 0; kx < k; ++kx) {
            const __m512 v = full ? _mm512_loadu_ps(row + kx) : _mm512_maskz_loadu_ps(m, row + kx);
            for (int b = 0; b < OCB; ++b)
              acc[b] = _mm512_fmadd_ps(v, _mm512_set1_ps(wp[b * wocs + kx]), acc[b]);
          }
          wp += k;
        }
      }
    }
    for (int b = 0; b < OCB; ++b) {
      float* o = out_base + b * ocs + x0;
      __m512 r = acc[b];
      if (bias) r = _mm512_add_ps(r, _mm512_set1_ps(bias[b]));
      if constexpr (ACC) r = _mm512_add_ps(r, full ? _mm512_loadu_ps(o) : _mm512_maskz_loadu_ps(m, o));
      _mm512_mask_storeu_ps(o, m, r);
    }
  }
}

// 4 output channels x 32 lanes: shares each weight broadcast across two
// tiles, which relieves the load ports on long rows.
template <bool ACC>
inline void row_f32_avx512_4x32(const float* in_base, int64_t ics, int64_t izs, int64_t iys,
                                const float* w_base, int64_t wocs, int64_t cin, int64_t k,
                                const float* bias, float* out_base, int64_t ocs, int64_t wo) {
  int64_t x0 = 0;
  for (; x0 + 32 <= wo; x0 += 32) {
    __m512 acc0[4], acc1[4];
    for (int b = 0; b < 4; ++b) {
      acc0[b] = _mm512_setzero_ps();
      acc1[b] = _mm512_setzero_ps();
    }
    const float* wp = w_base;
    for (int64_t ic = 0; ic < cin; ++ic) {
      const float* plane = in_base + ic * ics;
      for (int64_t kz = 0; kz < k; ++kz) {
        for (int64_t ky = 0; ky < k; ++ky) {
          const float* row = plane + kz * izs + ky * iys + x0;
          for (int64_t kx = 0; kx < k; ++kx) {
            const __m512 v0 = _mm512_loadu_ps(row + kx);
            const __m512 v1 = _mm512_loadu_ps(row + kx + 16);
            for (int b = 0; b < 4; ++b) {
              const __m512 wv = _mm512_set1_ps(wp[b * wocs + kx]);
              acc0[b] = _mm512_fmadd_ps(v0, wv, acc0[b]);
              acc1[b] = _mm512_fmadd_ps(v1, wv, acc1[b]);
            }
          }
          wp += k;
        }
      }
    }
    for (int b = 0; b < 4; ++b) {
      float* o = out_base + b * ocs + x0;
      __m512 r0 = acc0[b], r1 = acc1[b];
      if (bias) {
        const __m512 bv = _mm512_set1_ps(bias[b]);
        r0 = _mm512_add_ps(r0, bv);
        r1 = _mm512_add_ps(r1, bv);
      }
      if constexpr (ACC) {
        r0 = _mm512_add_ps(r0, _mm512_loadu_ps(o));
        r1 = _mm512_add_ps(r1, _mm512_loadu_ps(o + 16));
      }
      _mm512_storeu_ps(o, r0);
      _mm512_storeu_ps(o + 16, r1);
    }
  }
  if (x0 < wo) {
    row_f32_avx512<4, ACC>(in_base + x0, ics, izs, iys, w_base, wocs, cin, k, bias,
                           out_base + x0, ocs, wo - x0);
  }
}

template <bool ACC>
inline void row_f32(const float* in_base, int64_t ics, int64_t izs, int64_t iys,
                    const float* w_base, int64_t wocs, int64_t cin, int64_t k,
                    const float* bias, float* out_base, int64_t ocs, int64_t wo, int ocb) {
  if (ocb == 4 && wo >= 32) {
    row_f32_avx512_4x32<ACC>(in_base, ics, izs, iys, w_base, wocs, cin, k, bias, out_base, ocs,
                             wo);
    return;
  }
  switch (ocb) {
    case 8: row_f32_avx512<8, ACC>(in_base, ics, izs, iys, w_base, wocs, cin, k, bias, out_base, ocs, wo); break;
    case 7: row_f32_avx512<7, ACC>(in_base, ics, izs, iys, w_base, wocs, cin, k, bias, out_base, ocs, wo); break;
    case 6: row_f32_avx512<6, ACC>(in_base, ics, izs, iys, w_base, wocs, cin, k, bias, out_base, ocs, wo); break;
    case 5: row_f32_avx512<5, ACC>(in_base, ics, izs, iys, w_base, wocs, cin, k, bias, out_base, ocs, wo); break;
    case 4: row_f32_avx512<4, ACC>(in_base, ics, izs, iys, w_base, wocs, cin, k, bias, out_base, ocs, wo); break;
    case 3: row_f32_avx512<3, ACC>(in_base, ics, izs, iys, w_base, wocs, cin, k, bias, out_base, ocs, wo); break;
    case 2: row_f32_avx512<2, ACC>(in_base, ics, izs, iys, w_base, wocs, cin, k, bias, out_base, ocs, wo); break;
    default: row_f32_avx512<1, ACC>(in_base, ics, izs, iys, w_base, wocs, cin, k, bias, out_base, ocs, wo); break;
  }
}

inline constexpr int kOcBlock = 8;
inline constexpr bool kWideRows = true;

#elif defined(__AVX2__) && defined(__FMA__)

template <int OCB, bool ACC>
inline void row_f32_avx2(const float* in_base, int64_t ics, int64_t izs, int64_t iys,
                         const float* w_base, int64_t wocs, int64_t cin, int64_t k,
                         const float* bias, float* out_base, int64_t ocs, int64_t wo) {
  int64_t x0 = 0;
  for (; x0 + 8 <= wo; x0 += 8) {
    __m256 acc[OCB];
    for (int b = 0; b < OCB; ++b) acc[b] = _mm256_setzero_ps();
    const float* wp = w_base;
    for (int64_t ic = 0; ic < cin; ++ic) {
      const float* plane = in_base + ic * ics;
      for (int64_t kz = 0; kz < k; ++kz) {
        for (int64_t ky = 0; ky < k; ++ky) {
          const float* row = plane + kz * izs + ky * iys + x0;
          for (int64_t kx = 0; kx < k; ++kx) {
            const __m256 v = _mm256_loadu_ps(row + kx);
            for (int b = 0; b < OCB; ++b)
              acc[b] = _mm256_fmadd_ps(v, _mm256_set1_ps(wp[b * wocs + kx]), acc[b]);
          }
          wp += k;
        }
      }
    }
    for (int b = 0; b < OCB; ++b) {
      float* o = out_base + b * ocs + x0;
      __m256 r = acc[b];
      if (bias) r = _mm256_add_ps(r, _mm256_set1_ps(bias[b]));
      if constexpr (ACC) r = _mm256_add_ps(r, _mm256_loadu_ps(o));
      _mm256_storeu_ps(o, r);
    }
  }
}

template <bool ACC>
inline void row_f32(const float* in_base, int64_t ics, int64_t izs, int64_t iys,
                    const float* w_base, int64_t wocs, int64_t cin, int64_t k,
                    const float* bias, float* out_base, int64_t ocs, int64_t wo, int ocb) {
  const int64_t body = (wo / 8) * 8;
  auto run = [&](auto ocb_c) {
    constexpr int B = decltype(ocb_c)::value;
    if (body > 0)
      row_f32_avx2<B, ACC>(in_base, ics, izs, iys, w_base, wocs, cin, k, bias, out_base, ocs,
                           body);
    if (body < wo)
      row_scalar<float, ACC>(in_base + body, ics, izs, iys, w_base, wocs, cin, k, bias,
                             out_base + body, ocs, wo - body, B);
  };
  switch (ocb) {
    case 4: run(std::integral_constant<int, 4>{}); break;
    case 3: run(std::integral_constant<int, 3>{}); break;
    case 2: run(std::integral_constant<int, 2>{}); break;
    default: run(std::integral_constant<int, 1>{}); break;
  }
}

inline constexpr int kOcBlock = 4;
inline constexpr bool kWideRows = false;

#else

template <bool ACC>
inline void row_f32(const float* in_base, int64_t ics, int64_t izs, int64_t iys,
                    const float* w_base, int64_t wocs, int64_t cin, int64_t k,
                    const float* bias, float* out_base, int64_t ocs, int64_t wo, int ocb) {
  row_scalar<float, ACC>(in_base, ics, izs, iys, w_base, wocs, cin, k, bias, out_base, ocs, wo,
                         ocb);
}

inline constexpr int kOcBlock = 4;
inline constexpr bool kWideRows = false;

#endif

template <typename T, bool ACC>
inline void row_any(const T* in_base, int64_t ics, int64_t izs, int64_t iys, const T* w_base,
                    int64_t wocs, int64_t cin, int64_t k, const T* bias, T* out_base,
                    int64_t ocs, int64_t wo, int ocb) {
  if constexpr (std::is_same_v<T, float>) {
    row_f32<ACC>(in_base, ics, izs, iys, w_base, wocs, cin, k, bias, out_base, ocs, wo, ocb);
  } else {
    row_scalar<T, ACC>(in_base, ics, izs, iys, w_base, wocs, cin, k, bias, out_base, ocs, wo,
                       ocb);
  }
}

template <typename T, bool ACC>
void conv_s1(const T* in, const ConvDims& cd, const T* w, const T* bias, T* out) {
  const int64_t ics = cd.d * cd.h * cd.w;
  const int64_t izs = cd.h * cd.w;
  const int64_t iys = cd.w;
  const int64_t ocs = cd.od * cd.oh * cd.ow;
  const int64_t wocs = cd.cin * cd.k * cd.k * cd.k;
  if (cd.k == 1) {
    // pure channel mix: flatten the spatial dims into one long row
    const int64_t step = (kWideRows && std::is_same_v<T, float> && ocs >= 32) ? 4 : kOcBlock;
    const int64_t blocks = (cd.cout + step - 1) / step;
    parallel_for(cd.n * blocks, [&](int64_t b, int64_t e) {
      for (int64_t i = b; i < e; ++i) {
        const int64_t n = i / blocks;
        const int64_t oc = (i % blocks) * step;
        const int ocb = int(std::min<int64_t>(step, cd.cout - oc));
        row_any<T, ACC>(in + n * cd.cin * ics, ics, 0, 0, w + oc * wocs, wocs, cd.cin, 1,
                        bias ? bias + oc : nullptr, out + n * cd.cout * ocs + oc * ocs, ocs,
                        ocs, ocb);
      }
    });
    return;
  }
  parallel_for(cd.n * cd.od, [&](int64_t b, int64_t e) {
    for (int64_t i = b; i < e; ++i) {
      const int64_t n = i / cd.od, oz = i % cd.od;
      const T* in_n = in + n * cd.cin * ics;
      T* out_n = out + n * cd.cout * ocs;
      for (int64_t oy = 0; oy < cd.oh; ++oy) {
        const T* in_base = in_n + oz * izs + oy * iys;
        T* out_row = out_n + oz * cd.oh * cd.ow + oy * cd.ow;
        for (int64_t oc = 0; oc < cd.cout; oc += kOcBlock) {
          const int ocb = int(std::min<int64_t>(kOcBlock, cd.cout - oc));
          row_any<T, ACC>(in_base, ics, izs, iys, w + oc * wocs, wocs, cd.cin, cd.k,
                          bias ? bias + oc : nullptr, out_row + oc * ocs, ocs, cd.ow, ocb);
        }
      }
    }
  });
}

// space-to-depth(2): [C, D, H, W] -> [C*8, D/2, H/2, W/2], phase-major per
// channel (c' = c*8 + tz*4 + ty*2 + tx).
template <typename T>
inline void space_to_depth2_sample(const T* in, int64_t c, int64_t d, int64_t h, int64_t w,
                                   T* out) {
  const int64_t od = d / 2, oh = h / 2, ow = w / 2;
  for (int64_t ic = 0; ic < c; ++ic) {
    const T* src = in + ic * d * h * w;
    for (int p = 0; p < 8; ++p) {
      const int tz = p >> 2, ty = (p >> 1) & 1, tx = p & 1;
      T* dst = out + (ic * 8 + p) * od * oh * ow;
      for (int64_t z = 0; z < od; ++z)
        for (int64_t y = 0; y < oh; ++y) {
          const T* r = src + ((2 * z + tz) * h + (2 * y + ty)) * w + tx;
          T* o = dst + (z * oh + y) * ow;
          for (int64_t x = 0; x < ow; ++x) o[x] = r[2 * x];
        }
    }
  }
}

template <typename T>
inline bool s2k2_applicable(const ConvDims& cd) {
  return cd.stride == 2 && cd.k == 2 && cd.d % 2 == 0 && cd.h % 2 == 0 && cd.w % 2 == 0;
}

}  // namespace convdetail

template <typename T>
void conv3d_forward(const T* in, const T* w, const T* bias, const ConvDims& cd, T* out,
                    bool accumulate = false) {
  if (cd.stride == 1) {
    if (accumulate) convdetail::conv_s1<T, true>(in, cd, w, bias, out);
    else convdetail::conv_s1<T, false>(in, cd, w, bias, out);
    return;
  }
  if (convdetail::s2k2_applicable<T>(cd)) {
    // rewrite as space-to-depth + 1x1x1 conv
    ConvDims pd;
    pd.n = cd.n; pd.cin = cd.cin * 8; pd.d = cd.od; pd.h = cd.oh; pd.w = cd.ow;
    pd.cout = cd.cout; pd.k = 1; pd.stride = 1;
    pd.od = cd.od; pd.oh = cd.oh; pd.ow = cd.ow;
    Tensor<T> wp = Tensor<T>::uninit({cd.cout, cd.cin * 8, 1, 1, 1});
    for (int64_t oc = 0; oc < cd.cout; ++oc)
      for (int64_t ic = 0; ic < cd.cin; ++ic)
        for (int p = 0; p < 8; ++p)
          wp[oc * cd.cin * 8 + ic * 8 + p] = w[(oc * cd.cin + ic) * 8 + p];
    Tensor<T> phase = Tensor<T>::uninit({cd.n, cd.cin * 8, cd.od, cd.oh, cd.ow});
    parallel_for(cd.n, [&](int64_t b, int64_t e) {
      for (int64_t n = b; n < e; ++n)
        convdetail::space_to_depth2_sample<T>(in + n * cd.cin * cd.d * cd.h * cd.w, cd.cin,
                                              cd.d, cd.h, cd.w,
                                              phase.data() + n * pd.cin * pd.od * pd.oh * pd.ow);
    });
    if (accumulate) convdetail::conv_s1<T, true>(phase.data(), pd, wp.data(), bias, out);
    else convdetail::conv_s1<T, false>(phase.data(), pd, wp.data(), bias, out);
    return;
  }
  // generic strided fallback
  const int64_t ics = cd.d * cd.h * cd.w, izs = cd.h * cd.w, iys = cd.w;
  const int64_t k = cd.k, s = cd.stride;
  parallel_for(cd.n * cd.cout * cd.od, [&](int64_t b, int64_t e) {
    for (int64_t i = b; i < e; ++i) {
      const int64_t n = i / (cd.cout * cd.od);
      const int64_t oc = (i / cd.od) % cd.cout;
      const int64_t oz = i % cd.od;
      const T* in_n = in + n * cd.cin * ics;
      const T* woc = w + oc * cd.cin * k * k * k;
      T* orow0 = out + ((n * cd.cout + oc) * cd.od + oz) * cd.oh * cd.ow;
      for (int64_t oy = 0; oy < cd.oh; ++oy) {
        T* orow = orow0 + oy * cd.ow;
        for (int64_t ox = 0; ox < cd.ow; ++ox) {
          T acc = bias ? bias[oc] : T(0);
          const T* base = in_n + oz * s * izs + oy * s * iys + ox * s;
          for (int64_t ic = 0; ic < cd.cin; ++ic)
            for (int64_t kz = 0; kz < k; ++kz)
              for (int64_t ky = 0; ky < k; ++ky)
                for (int64_t kx = 0; kx < k; ++kx)
                  acc += woc[((ic * k + kz) * k + ky) * k + kx] *
                         base[ic * ics + kz * izs + ky * iys + kx];
          if (accumulate) orow[ox] += acc;
          else orow[ox] = acc;
        }
      }
    }
  });
}

// grad wrt input; accumulates into gin, or overwrites it when assign=true
// (the backward covers every input element in all paths).
template <typename T>
void conv3d_backward_input(const T* gout, const T* w, const ConvDims& cd, T* gin,
                           bool assign = false) {
  if (cd.stride == 1) {
    // full correlation: pad gout by k-1, convolve with flipped transposed w
    const int64_t k = cd.k, p = cd.k - 1;
    const int64_t pd = cd.od + 2 * p, ph = cd.oh + 2 * p, pw = cd.ow + 2 * p;
    Tensor<T> padded({cd.n, cd.cout, pd, ph, pw});
    T* pb = padded.data();
    parallel_for(cd.n * cd.cout, [&](int64_t b, int64_t e) {
      for (int64_t i = b; i < e; ++i) {
        const T* src = gout + i * cd.od * cd.oh * cd.ow;
        T* dst = pb + i * pd * ph * pw;
        for (int64_t z = 0; z < cd.od; ++z)
          for (int64_t y = 0; y < cd.oh; ++y)
            std::memcpy(dst + ((z + p) * ph + (y + p)) * pw + p, src + (z * cd.oh + y) * cd.ow,
                        size_t(cd.ow) * sizeof(T));
      }
    });
    Tensor<T> wt = Tensor<T>::uninit({cd.cin, cd.cout, k, k, k});
    T* wtp = wt.data();
    for (int64_t oc = 0; oc < cd.cout; ++oc)
      for (int64_t ic = 0; ic < cd.cin; ++ic)
        for (int64_t kz = 0; kz < k; ++kz)
          for (int64_t ky = 0; ky < k; ++ky)
            for (int64_t kx = 0; kx < k; ++kx)
              wtp[((((ic * cd.cout + oc) * k) + (k - 1 - kz)) * k + (k - 1 - ky)) * k +
                  (k - 1 - kx)] = w[(((oc * cd.cin + ic) * k + kz) * k + ky) * k + kx];
    ConvDims bd;
    bd.n = cd.n; bd.cin = cd.cout; bd.d = pd; bd.h = ph; bd.w = pw;
    bd.cout = cd.cin; bd.k = k; bd.stride = 1;
    bd.od = cd.d; bd.oh = cd.h; bd.ow = cd.w;
    if (assign) convdetail::conv_s1<T, false>(padded.data(), bd, wt.data(), nullptr, gin);
    else convdetail::conv_s1<T, true>(padded.data(), bd, wt.data(), nullptr, gin);
    return;
  }
  if (convdetail::s2k2_applicable<T>(cd)) {
    // phase gradients via 1x1x1 conv with transposed weights, then scatter
    ConvDims pd;
    pd.n = cd.n; pd.cin = cd.cout; pd.d = cd.od; pd.h = cd.oh; pd.w = cd.ow;
    pd.cout = cd.cin * 8; pd.k = 1; pd.stride = 1;
    pd.od = cd.od; pd.oh = cd.oh; pd.ow = cd.ow;
    Tensor<T> wt = Tensor<T>::uninit({cd.cin * 8, cd.cout, 1, 1, 1});
    for (int64_t oc = 0; oc < cd.cout; ++oc)
      for (int64_t ic = 0; ic < cd.cin; ++ic)
        for (int p = 0; p < 8; ++p)
          wt[(ic * 8 + p) * cd.cout + oc] = w[(oc * cd.cin + ic) * 8 + p];
    Tensor<T> gphase = Tensor<T>::uninit({cd.n, cd.cin * 8, cd.od, cd.oh, cd.ow});
    convdetail::conv_s1<T, false>(gout, pd, wt.data(), nullptr, gphase.data());
    const int64_t od = cd.od, oh = cd.oh, ow = cd.ow;
    parallel_for(cd.n * cd.cin, [&](int64_t b, int64_t e) {
      for (int64_t i = b; i < e; ++i) {
        const int64_t n = i / cd.cin, ic = i % cd.cin;
        T* dst = gin + (n * cd.cin + ic) * cd.d * cd.h * cd.w;
        for (int p = 0; p < 8; ++p) {
          const int tz = p >> 2, ty = (p >> 1) & 1, tx = p & 1;
          const T* src = gphase.data() + ((n * cd.cin + ic) * 8 + p) * od * oh * ow;
          for (int64_t z = 0; z < od; ++z)
            for (int64_t y = 0; y < oh; ++y) {
              T* r = dst + ((2 * z + tz) * cd.h + (2 * y + ty)) * cd.w + tx;
              const T* sr = src + (z * oh + y) * ow;
              if (assign) {
                for (int64_t x = 0; x < ow; ++x) r[2 * x] = sr[x];
              } else {
                for (int64_t x = 0; x < ow; ++x) r[2 * x] += sr[x];
              }
            }
        }
      }
    });
    return;
  }
  // generic gather fallback
  const int64_t k = cd.k, s = cd.stride;
  const int64_t ics = cd.d * cd.h * cd.w, izs = cd.h * cd.w, iys = cd.w;
  const int64_t gcs = cd.od * cd.oh * cd.ow, gzs = cd.oh * cd.ow, gys = cd.ow;
  parallel_for(cd.n * cd.cin * cd.d, [&](int64_t b, int64_t e) {
    for (int64_t i = b; i < e; ++i) {
      const int64_t n = i / (cd.cin * cd.d);
      const int64_t ic = (i / cd.d) % cd.cin;
      const int64_t iz = i % cd.d;
      T* grow0 = gin + (n * cd.cin + ic) * ics + iz * izs;
      for (int64_t iy = 0; iy < cd.h; ++iy) {
        for (int64_t ix = 0; ix < cd.w; ++ix) {
          T acc = T(0);
          for (int64_t kz = 0; kz < k; ++kz) {
            const int64_t rz = iz - kz;
            if (rz < 0 || rz % s) continue;
            const int64_t oz = rz / s;
            if (oz >= cd.od) continue;
            for (int64_t ky = 0; ky < k; ++ky) {
              const int64_t ry = iy - ky;
              if (ry < 0 || ry % s) continue;
              const int64_t oy = ry / s;
              if (oy >= cd.oh) continue;
              for (int64_t kx = 0; kx < k; ++kx) {
                const int64_t rx = ix - kx;
                if (rx < 0 || rx % s) continue;
                const int64_t ox = rx / s;
                if (ox >= cd.ow) continue;
                for (int64_t oc = 0; oc < cd.cout; ++oc)
                  acc += w[(((oc * cd.cin + ic) * k + kz) * k + ky) * k + kx] *
                         gout[(n * cd.cout + oc) * gcs + oz * gzs + oy * gys + ox];
              }
            }
          }
          if (assign) grow0[iy * iys + ix] = acc;
          else grow0[iy * iys + ix] += acc;
        }
      }
    }
  });
}

namespace convdetail {

// sum of g[x]*r[x] over a row, vectorized with fixed lane order
template <typename T>
inline double dot_row(const T* g, const T* r, int64_t m) {
  if constexpr (std::is_same_v<T, float>) {
#if defined(__AVX512F__)
    __m512 acc = _mm512_setzero_ps();
    int64_t x = 0;
    for (; x + 16 <= m; x += 16)
      acc = _mm512_fmadd_ps(_mm512_loadu_ps(g + x), _mm512_loadu_ps(r + x), acc);
    if (x < m) {
      const __mmask16 mk = __mmask16((1u << (m - x)) - 1);
      acc = _mm512_fmadd_ps(_mm512_maskz_loadu_ps(mk, g + x), _mm512_maskz_loadu_ps(mk, r + x),
                            acc);
    }
    return double(_mm512_reduce_add_ps(acc));
#elif defined(__AVX2__) && defined(__FMA__)
    __m256 acc = _mm256_setzero_ps();
    int64_t x = 0;
    for (; x + 8 <= m; x += 8)
      acc = _mm256_fmadd_ps(_mm256_loadu_ps(g + x), _mm256_loadu_ps(r + x), acc);
    float lanes[8];
    _mm256_storeu_ps(lanes, acc);
    double total = 0;
    for (int j = 0; j < 8; ++j) total += double(lanes[j]);
    for (; x < m; ++x) total += double(g[x]) * double(r[x]);
    return total;
#endif
  }
  double lanes[8] = {0, 0, 0, 0, 0, 0, 0, 0};
  int64_t x = 0;
  for (; x + 8 <= m; x += 8)
    for (int j = 0; j < 8; ++j) lanes[j] += double(g[x + j]) * double(r[x + j]);
  for (; x < m; ++x) lanes[0] += double(g[x]) * double(r[x]);
  double total = 0;
  for (int j = 0; j < 8; ++j) total += lanes[j];
  return total;
}

#if defined(__AVX512F__)

// k=3 stride-1 weight gradient for one (oc, ic) pair: all 27 tap
// accumulators live in registers across a single pass over the volume.
inline void bwd_w_k3_f32(const float* in, const float* gout, const ConvDims& cd, int64_t oc,
                         int64_t ic, float* gwp) {
  const int64_t ics = cd.d * cd.h * cd.w, izs = cd.h * cd.w, iys = cd.w;
  const int64_t gcs = cd.od * cd.oh * cd.ow, gzs = cd.oh * cd.ow, gys = cd.ow;
  __m512 acc[27];
  for (int t = 0; t < 27; ++t) acc[t] = _mm512_setzero_ps();
  for (int64_t n = 0; n < cd.n; ++n) {
    const float* gpl = gout + (n * cd.cout + oc) * gcs;
    const float* ipl = in + (n * cd.cin + ic) * ics;
    for (int64_t oz = 0; oz < cd.od; ++oz) {
      for (int64_t oy = 0; oy < cd.oh; ++oy) {
        const float* g = gpl + oz * gzs + oy * gys;
        const float* rbase = ipl + oz * izs + oy * iys;
        int64_t x0 = 0;
        for (; x0 + 16 <= cd.ow; x0 += 16) {
          const __m512 gv = _mm512_loadu_ps(g + x0);
          for (int kz = 0; kz < 3; ++kz) {
            for (int ky = 0; ky < 3; ++ky) {
              const float* r = rbase + kz * izs + ky * iys + x0;
              for (int kx = 0; kx < 3; ++kx) {
                acc[(kz * 3 + ky) * 3 + kx] = _mm512_fmadd_ps(
                    gv, _mm512_loadu_ps(r + kx), acc[(kz * 3 + ky) * 3 + kx]);
              }
            }
          }
        }
        if (x0 < cd.ow) {
          const __mmask16 m = __mmask16((1u << (cd.ow - x0)) - 1);
          const __m512 gv = _mm512_maskz_loadu_ps(m, g + x0);
          for (int kz = 0; kz < 3; ++kz) {
            for (int ky = 0; ky < 3; ++ky) {
              const float* r = rbase + kz * izs + ky * iys + x0;
              for (int kx = 0; kx < 3; ++kx) {
                acc[(kz * 3 + ky) * 3 + kx] = _mm512_fmadd_ps(
                    gv, _mm512_maskz_loadu_ps(m, r + kx), acc[(kz * 3 + ky) * 3 + kx]);
              }
            }
          }
        }
      }
    }
  }
  for (int t = 0; t < 27; ++t) gwp[t] += _mm512_reduce_add_ps(acc[t]);
}

inline constexpr bool kHasBwdWK3 = true;

#elif defined(__AVX2__) && defined(__FMA__)

inline void bwd_w_k3_f32(const float* in, const float* gout, const ConvDims& cd, int64_t oc,
                         int64_t ic, float* gwp) {
  const int64_t ics = cd.d * cd.h * cd.w, izs = cd.h * cd.w, iys = cd.w;
  const int64_t gcs = cd.od * cd.oh * cd.ow, gzs = cd.oh * cd.ow, gys = cd.ow;
  // 9 accumulators per kz pass (AVX2 register budget)
  for (int kz = 0; kz < 3; ++kz) {
    __m256 acc[9];
    for (int t = 0; t < 9; ++t) acc[t] = _mm256_setzero_ps();
    double tail[9] = {0, 0, 0, 0, 0, 0, 0, 0, 0};
    for (int64_t n = 0; n < cd.n; ++n) {
      const float* gpl = gout + (n * cd.cout + oc) * gcs;
      const float* ipl = in + (n * cd.cin + ic) * ics;
      for (int64_t oz = 0; oz < cd.od; ++oz) {
        for (int64_t oy = 0; oy < cd.oh; ++oy) {
          const float* g = gpl + oz * gzs + oy * gys;
          const float* rbase = ipl + (oz + kz) * izs + oy * iys;
          int64_t x0 = 0;
          for (; x0 + 8 <= cd.ow; x0 += 8) {
            const __m256 gv = _mm256_loadu_ps(g + x0);
            for (int ky = 0; ky < 3; ++ky)
              for (int kx = 0; kx < 3; ++kx)
                acc[ky * 3 + kx] = _mm256_fmadd_ps(
                    gv, _mm256_loadu_ps(rbase + ky * iys + kx + x0), acc[ky * 3 + kx]);
          }
          for (; x0 < cd.ow; ++x0)
            for (int ky = 0; ky < 3; ++ky)
              for (int kx = 0; kx < 3; ++kx)
                tail[ky * 3 + kx] +=
                    double(g[x0]) * double(rbase[ky * iys + kx + x0]);
        }
      }
    }
    for (int t = 0; t < 9; ++t) {
      float lanes[8];
      _mm256_storeu_ps(lanes, acc[t]);
      double total = tail[t];
      for (int j = 0; j < 8; ++j) total += double(lanes[j]);
      gwp[kz * 9 + t] += float(total);
    }
  }
}

inline constexpr bool kHasBwdWK3 = true;

#else
inline void bwd_w_k3_f32(const float*, const float*, const ConvDims&, int64_t, int64_t, float*) {}
inline constexpr bool kHasBwdWK3 = false;
#endif

#if defined(__AVX512F__)

// k=1 weight gradient: dw[oc][ic] = sum_v gout[oc][v] * in[ic][v], blocked
// 2 x 4 so each volume pass feeds eight dot products.
inline void bwd_w_k1_f32(const float* in, const float* gout, const ConvDims& cd, float* gw) {
  const int64_t sp = cd.od * cd.oh * cd.ow;
  const int64_t oblocks = (cd.cout + 1) / 2;
  parallel_for(oblocks, [&](int64_t b, int64_t e) {
    for (int64_t ob = b; ob < e; ++ob) {
      const int64_t oc0 = ob * 2;
      const int no = int(std::min<int64_t>(2, cd.cout - oc0));
      for (int64_t ic0 = 0; ic0 < cd.cin; ic0 += 4) {
        const int ni = int(std::min<int64_t>(4, cd.cin - ic0));
        __m512 acc[2][4];
        for (int a = 0; a < 2; ++a)
          for (int c = 0; c < 4; ++c) acc[a][c] = _mm512_setzero_ps();
        for (int64_t n = 0; n < cd.n; ++n) {
          const float* gp[2];
          const float* ip[4];
          for (int a = 0; a < no; ++a) gp[a] = gout + (n * cd.cout + oc0 + a) * sp;
          for (int c = 0; c < ni; ++c) ip[c] = in + (n * cd.cin + ic0 + c) * sp;
          int64_t v = 0;
          for (; v + 16 <= sp; v += 16) {
            __m512 gv[2], iv[4];
            for (int a = 0; a < no; ++a) gv[a] = _mm512_loadu_ps(gp[a] + v);
            for (int c = 0; c < ni; ++c) iv[c] = _mm512_loadu_ps(ip[c] + v);
            for (int a = 0; a < no; ++a)
              for (int c = 0; c < ni; ++c) acc[a][c] = _mm512_fmadd_ps(gv[a], iv[c], acc[a][c]);
          }
          if (v < sp) {
            const __mmask16 m = __mmask16((1u << (sp - v)) - 1);
            __m512 gv[2], iv[4];
            for (int a = 0; a < no; ++a) gv[a] = _mm512_maskz_loadu_ps(m, gp[a] + v);
            for (int c = 0; c < ni; ++c) iv[c] = _mm512_maskz_loadu_ps(m, ip[c] + v);
            for (int a = 0; a < no; ++a)
              for (int c = 0; c < ni; ++c) acc[a][c] = _mm512_fmadd_ps(gv[a], iv[c], acc[a][c]);
          }
        }
        for (int a = 0; a < no; ++a)
          for (int c = 0; c < ni; ++c)
            gw[(oc0 + a) * cd.cin + ic0 + c] += _mm512_reduce_add_ps(acc[a][c]);
      }
    }
  });
}

inline constexpr bool kHasBwdWK1 = true;

#else
inline void bwd_w_k1_f32(const float*, const float*, const ConvDims&, float*) {}
inline constexpr bool kHasBwdWK1 = false;
#endif

}  // namespace convdetail

// grad wrt weights and bias; accumulates into gw / gbias (gbias may be null).
template <typename T>
void conv3d_backward_weights(const T* in, const T* gout, const ConvDims& cd, T* gw, T* gbias) {
  if (convdetail::s2k2_applicable<T>(cd)) {
    // phase layout matches the weight layout, so the 1x1x1 gradient lands
    // directly in gw
    ConvDims pd;
    pd.n = cd.n; pd.cin = cd.cin * 8; pd.d = cd.od; pd.h = cd.oh; pd.w = cd.ow;
    pd.cout = cd.cout; pd.k = 1; pd.stride = 1;
    pd.od = cd.od; pd.oh = cd.oh; pd.ow = cd.ow;
    Tensor<T> phase = Tensor<T>::uninit({cd.n, cd.cin * 8, cd.od, cd.oh, cd.ow});
    parallel_for(cd.n, [&](int64_t b, int64_t e) {
      for (int64_t n = b; n < e; ++n)
        convdetail::space_to_depth2_sample<T>(in + n * cd.cin * cd.d * cd.h * cd.w, cd.cin,
                                              cd.d, cd.h, cd.w,
                                              phase.data() + n * pd.cin * pd.od * pd.oh * pd.ow);
    });
    conv3d_backward_weights<T>(phase.data(), gout, pd, gw, gbias);
    return;
  }
  const int64_t k = cd.k, s = cd.stride;
  const int64_t ics = cd.d * cd.h * cd.w, izs = cd.h * cd.w, iys = cd.w;
  const int64_t gcs = cd.od * cd.oh * cd.ow, gzs = cd.oh * cd.ow, gys = cd.ow;
  if constexpr (std::is_same_v<T, float>) {
    if (convdetail::kHasBwdWK1 && k == 1 && s == 1) {
      convdetail::bwd_w_k1_f32(in, gout, cd, gw);
      if (gbias) {
        parallel_for(cd.cout, [&](int64_t b, int64_t e) {
          for (int64_t oc = b; oc < e; ++oc) {
            double acc = 0;
            for (int64_t n = 0; n < cd.n; ++n) {
              const T* g = gout + (n * cd.cout + oc) * gcs;
              for (int64_t v = 0; v < gcs; ++v) acc += double(g[v]);
            }
            gbias[oc] += T(acc);
          }
        });
      }
      return;
    }
  }
  if constexpr (std::is_same_v<T, float>) {
    // oc-major so the gout slice stays cache-resident across the ic loop
    if (convdetail::kHasBwdWK3 && k == 3 && s == 1) {
      parallel_for(cd.cout, [&](int64_t b, int64_t e) {
        for (int64_t oc = b; oc < e; ++oc)
          for (int64_t ic = 0; ic < cd.cin; ++ic)
            convdetail::bwd_w_k3_f32(in, gout, cd, oc, ic, gw + (oc * cd.cin + ic) * 27);
      });
      if (gbias) {
        parallel_for(cd.cout, [&](int64_t b, int64_t e) {
          for (int64_t oc = b; oc < e; ++oc) {
            double acc = 0;
            for (int64_t n = 0; n < cd.n; ++n) {
              const T* g = gout + (n * cd.cout + oc) * gcs;
              for (int64_t v = 0; v < gcs; ++v) acc += double(g[v]);
            }
            gbias[oc] += T(acc);
          }
        });
      }
      return;
    }
  }
  parallel_for(cd.cout * cd.cin, [&](int64_t b, int64_t e) {
    for (int64_t p = b; p < e; ++p) {
      const int64_t oc = p / cd.cin, ic = p % cd.cin;
      T* gwp = gw + (oc * cd.cin + ic) * k * k * k;
      for (int64_t kz = 0; kz < k; ++kz) {
        for (int64_t ky = 0; ky < k; ++ky) {
          for (int64_t kx = 0; kx < k; ++kx) {
            double total = 0;
            for (int64_t n = 0; n < cd.n; ++n) {
              const T* gpl = gout + (n * cd.cout + oc) * gcs;
              const T* ipl = in + (n * cd.cin + ic) * ics;
              for (int64_t oz = 0; oz < cd.od; ++oz) {
                for (int64_t oy = 0; oy < cd.oh; ++oy) {
                  const T* g = gpl + oz * gzs + oy * gys;
                  const T* r = ipl + (oz * s + kz) * izs + (oy * s + ky) * iys + kx;
                  if (s == 1) {
                    total += convdetail::dot_row<T>(g, r, cd.ow);
                  } else {
                    for (int64_t x = 0; x < cd.ow; ++x)
                      total += double(g[x]) * double(r[x * s]);
                  }
                }
              }
            }
            gwp[(kz * k + ky) * k + kx] += T(total);
          }
        }
      }
    }
  });
  if (gbias) {
    parallel_for(cd.cout, [&](int64_t b, int64_t e) {
      for (int64_t oc = b; oc < e; ++oc) {
        double acc = 0;
        for (int64_t n = 0; n < cd.n; ++n) {
          const T* g = gout + (n * cd.cout + oc) * gcs;
          for (int64_t v = 0; v < gcs; ++v) acc += double(g[v]);
        }
        gbias[oc] += T(acc);
      }
    });
  }
}

}  // namespace xs::kernels

#endif  // XS_KERNELS_CONV_HPP
