#ifndef XS_WARP_HPP
#define XS_WARP_HPP

#include "xs/kernels.hpp"
#include "xs/variants.hpp"

namespace xs {

// Tensor-level spatial transformer API. The differentiable warp lives on the
// graph (Graph::warp); these helpers cover evaluation and data preparation.

// Trilinear warp of [N,C,D,H,W] by a displacement field [N,3,D,H,W].
template <typename T>
Tensor<T> warp_trilinear(const Tensor<T>& moving, const Tensor<T>& dvf) {
  const Shape& ms = moving.shape();
  const Shape& ds = dvf.shape();
  if (ms.size() != 5 || ds.size() != 5 || ds[1] != 3 || ms[0] != ds[0] || ms[2] != ds[2] ||
      ms[3] != ds[3] || ms[4] != ds[4])
    throw ShapeError("warp_trilinear: moving " + shape_str(ms) + " vs dvf " + shape_str(ds));
  Tensor<T> out = Tensor<T>::uninit(ms);
  kernels::warp_trilinear_forward<T>(moving.data(), dvf.data(), ms[0], ms[1], ms[2], ms[3],
                                     ms[4], out.data());
  return out;
}

// Nearest-neighbor label warp; labels [N,D,H,W], dvf [N,3,D,H,W].
template <typename L, typename T>
Tensor<L> warp_labels(const Tensor<L>& labels, const Tensor<T>& dvf) {
  const Shape& ls = labels.shape();
  const Shape& ds = dvf.shape();
  if (ls.size() != 4 || ds.size() != 5 || ds[1] != 3 || ls[0] != ds[0] || ls[1] != ds[2] ||
      ls[2] != ds[3] || ls[3] != ds[4])
    throw ShapeError("warp_labels: labels " + shape_str(ls) + " vs dvf " + shape_str(ds));
  Tensor<L> out = Tensor<L>::uninit(ls);
  kernels::warp_labels<L, T>(labels.data(), dvf.data(), ls[0], ls[1], ls[2], ls[3], out.data());
  return out;
}

// Per-resolution training targets. High resolution is the center crop of the
// full patch; mid/low are 2x/4x box-averaged (soft one-hot labels) and then
// center-cropped to the head output windows.
template <typename T>
struct TargetBundle {
  std::array<Tensor<T>, 3> fixed;          // [N,1,m,m,m]
  std::array<Tensor<T>, 3> fixed_onehot;   // [N,C,m,m,m]
  std::array<Tensor<T>, 3> moving;         // [N,1,m,m,m]
  std::array<Tensor<T>, 3> moving_onehot;  // [N,C,m,m,m]
};

namespace detail {
template <typename T>
Tensor<T> pool_to(const Tensor<T>& t, int64_t factor) {
  const Shape& s = t.shape();
  if (factor == 1) return t;
  Tensor<T> out = Tensor<T>::uninit({s[0], s[1], s[2] / factor, s[3] / factor, s[4] / factor});
  kernels::avg_pool<T>(t.data(), s[0] * s[1], s[2], s[3], s[4], factor, out.data());
  return out;
}

template <typename T>
Tensor<T> crop_to(const Tensor<T>& t, int64_t m) {
  const Shape& s = t.shape();
  Tensor<T> out = Tensor<T>::uninit({s[0], s[1], m, m, m});
  kernels::center_crop<T>(t.data(), s[0] * s[1], s[2], s[3], s[4], m, m, m, out.data());
  return out;
}
}  // namespace detail

template <typename T>
TargetBundle<T> make_multires_targets(const Tensor<T>& fixed, const Tensor<T>& fixed_onehot,
                                      const Tensor<T>& moving, const Tensor<T>& moving_onehot) {
  const Shape& s = fixed.shape();
  if (s.size() != 5) throw ShapeError("make_multires_targets: rank-5 tensors required");
  const int64_t n = s[2];
  if (s[3] != n || s[4] != n) throw DimError("make_multires_targets: cubic patch required");
  if (n < 44 || n % 4 != 0)
    throw DimError("make_multires_targets: patch size must be >= 44 and divisible by 4");
  TargetBundle<T> tb;
  for (int r = 0; r < kNumResolutions; ++r) {
    const int64_t f = resolution_scale(r);
    const int64_t m = output_size(n, r);
    tb.fixed[size_t(r)] = detail::crop_to(detail::pool_to(fixed, f), m);
    tb.fixed_onehot[size_t(r)] = detail::crop_to(detail::pool_to(fixed_onehot, f), m);
    tb.moving[size_t(r)] = detail::crop_to(detail::pool_to(moving, f), m);
    tb.moving_onehot[size_t(r)] = detail::crop_to(detail::pool_to(moving_onehot, f), m);
  }
  return tb;
}

}  // namespace xs

#endif  // XS_WARP_HPP
