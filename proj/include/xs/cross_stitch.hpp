#ifndef XS_CROSS_STITCH_HPP
#define XS_CROSS_STITCH_HPP

#include <utility>

#include "xs/graph.hpp"

namespace xs {

// Cross-stitch unit: a learnable per-filter 2x2 mixing matrix joining the
// segmentation path S and the registration path R,
//   Xs' = a_ss * Xs + a_sr * Xr
//   Xr' = a_rs * Xs + a_rr * Xr
// alpha is stored as [K, 2, 2] with rows (output) ordered (S, R).

// Initialization: truncated normal with mean 0.5, std 0.25, restricted to
// [0, 1] by rejection sampling.
template <typename T>
Tensor<T> init_alpha(int64_t k, Rng& rng) {
  if (k < 1) throw ShapeError("init_alpha: K must be >= 1");
  Tensor<T> a({k, 2, 2});
  for (int64_t i = 0; i < a.numel(); ++i) a[i] = T(rng.truncated_normal(0.5, 0.25, 0.0, 1.0));
  return a;
}

template <typename T>
Tensor<T> identity_alpha(int64_t k) {
  Tensor<T> a({k, 2, 2});
  for (int64_t i = 0; i < k; ++i) {
    a[i * 4 + 0] = T(1);
    a[i * 4 + 3] = T(1);
  }
  return a;
}

namespace detail {

// One mixed output: row 0 produces Xs', row 1 produces Xr'.
template <typename T>
typename Graph<T>::Node* cross_stitch_mix(Graph<T>& g, typename Graph<T>::Node* alpha,
                                          typename Graph<T>::Node* xs,
                                          typename Graph<T>::Node* xr, int row) {
  const Shape& s = xs->value.shape();
  const int64_t n = s[0], k = s[1], sp = s[2] * s[3] * s[4];
  Tensor<T> out(s);
  const T* a = alpha->value.data();
  const T* ps = xs->value.data();
  const T* pr = xr->value.data();
  T* o = out.data();
  parallel_for(n * k, [&](int64_t b, int64_t e) {
    for (int64_t i = b; i < e; ++i) {
      const int64_t ch = i % k;
      const T as = a[ch * 4 + row * 2 + 0];
      const T ar = a[ch * 4 + row * 2 + 1];
      const T* rs = ps + i * sp;
      const T* rr = pr + i * sp;
      T* ro = o + i * sp;
      for (int64_t v = 0; v < sp; ++v) ro[v] = as * rs[v] + ar * rr[v];
    }
  });
  return g.make(std::move(out), {alpha, xs, xr},
                [n, k, sp, row](Graph<T>& g, typename Graph<T>::Node& nd) {
                  auto* alpha = nd.parents[0];
                  auto* xs = nd.parents[1];
                  auto* xr = nd.parents[2];
                  const T* a = alpha->value.data();
                  const T* go = nd.grad.data();
                  if (Graph<T>::wants_grad(alpha)) {
                    T* ga = g.grad_of(alpha).data();
                    for (int64_t ch = 0; ch < k; ++ch) {
                      double ss = 0, sr = 0;
                      for (int64_t bn = 0; bn < n; ++bn) {
                        const int64_t off = (bn * k + ch) * sp;
                        const T* gg = go + off;
                        const T* rs = xs->value.data() + off;
                        const T* rr = xr->value.data() + off;
                        for (int64_t v = 0; v < sp; ++v) {
                          ss += double(gg[v]) * double(rs[v]);
                          sr += double(gg[v]) * double(rr[v]);
                        }
                      }
                      ga[ch * 4 + row * 2 + 0] += T(ss);
                      ga[ch * 4 + row * 2 + 1] += T(sr);
                    }
                  }
                  auto back_to = [&](typename Graph<T>::Node* src, int col) {
                    if (!Graph<T>::wants_grad(src)) return;
                    T* gi = g.grad_of(src).data();
                    parallel_for(n * k, [&](int64_t b, int64_t e) {
                      for (int64_t i = b; i < e; ++i) {
                        const int64_t ch = i % k;
                        const T av = a[ch * 4 + row * 2 + col];
                        const T* gg = go + i * sp;
                        T* gr = gi + i * sp;
                        for (int64_t v = 0; v < sp; ++v) gr[v] += av * gg[v];
                      }
                    });
                  };
                  back_to(xs, 0);
                  back_to(xr, 1);
                });
}

}  // namespace detail

// Applies one cross-stitch unit; returns (Xs', Xr').
template <typename T>
std::pair<typename Graph<T>::Node*, typename Graph<T>::Node*> cross_stitch_apply(
    Graph<T>& g, typename Graph<T>::Node* alpha, typename Graph<T>::Node* xs,
    typename Graph<T>::Node* xr) {
  check_same_shape(xs->value, xr->value, "cross_stitch_apply");
  const Shape& s = xs->value.shape();
  if (s.size() != 5) throw ShapeError("cross_stitch_apply: rank-5 tensors required");
  const Shape& as = alpha->value.shape();
  if (as.size() != 3 || as[1] != 2 || as[2] != 2 || as[0] != s[1])
    throw ShapeError("cross_stitch_apply: alpha must be [K,2,2] with K = channels");
  auto* out_s = detail::cross_stitch_mix(g, alpha, xs, xr, 0);
  auto* out_r = detail::cross_stitch_mix(g, alpha, xs, xr, 1);
  return {out_s, out_r};
}

}  // namespace xs

#endif  // XS_CROSS_STITCH_HPP
