#ifndef XS_LOSSES_HPP
#define XS_LOSSES_HPP

#include <cstdio>
#include <memory>

#include "xs/graph.hpp"
#include "xs/variants.hpp"

namespace xs {

struct LossWeights {
  double w_dice = 1.0;
  double w_ncc = 1.0;
  double w_bend = 0.5;
  std::array<double, 3> resolution_weights{1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0};

  void validate() const {
    if (w_dice < 0 || w_ncc < 0 || w_bend < 0)
      throw ConfigError("loss weights must be nonnegative");
    double s = 0;
    for (double r : resolution_weights) {
      if (r < 0) throw ConfigError("resolution weights must be nonnegative");
      s += r;
    }
    if (std::abs(s - 1.0) > 1e-9) throw ConfigError("resolution weights must sum to 1");
  }
};

// ---------------------------------------------------------------------------
// soft Dice loss on class probabilities
//
// 1 - mean over foreground classes of (2*sum(p*t) + eps) / (sum p + sum t + eps),
// sums taken over batch and space. Class 0 is background and excluded from
// the mean so it cannot mask organ errors.
// ---------------------------------------------------------------------------
template <typename T>
typename Graph<T>::Node* dice_loss(Graph<T>& g, typename Graph<T>::Node* pred,
                                   typename Graph<T>::Node* target, T eps = T(1e-5)) {
  check_same_shape(pred->value, target->value, "dice_loss");
  const Shape& s = pred->value.shape();
  if (s.size() != 5 || s[1] < 2) throw ShapeError("dice_loss: [N,C>=2,D,H,W] required");
  const int64_t n = s[0], c = s[1], sp = s[2] * s[3] * s[4];
  const int64_t fg = c - 1;
  auto inter = std::make_shared<std::vector<double>>(size_t(c), 0.0);
  auto denom = std::make_shared<std::vector<double>>(size_t(c), 0.0);
  const T* p = pred->value.data();
  const T* t = target->value.data();
  for (int64_t bn = 0; bn < n; ++bn) {
    for (int64_t ch = 0; ch < c; ++ch) {
      const T* pr = p + (bn * c + ch) * sp;
      const T* tr = t + (bn * c + ch) * sp;
      double si = 0, sd = 0;
      for (int64_t v = 0; v < sp; ++v) {
        si += double(pr[v]) * double(tr[v]);
        sd += double(pr[v]) + double(tr[v]);
      }
      (*inter)[size_t(ch)] += si;
      (*denom)[size_t(ch)] += sd;
    }
  }
  double loss = 1.0;
  double acc = 0.0;
  for (int64_t ch = 1; ch < c; ++ch) {
    acc += (2.0 * (*inter)[size_t(ch)] + double(eps)) / ((*denom)[size_t(ch)] + double(eps));
  }
  loss = 1.0 - acc / double(fg);
  Tensor<T> out({1});
  out[0] = T(loss);
  return g.make(std::move(out), {pred, target},
                [n, c, sp, fg, eps, inter, denom](Graph<T>& g, typename Graph<T>::Node& nd) {
                  auto* pred = nd.parents[0];
                  auto* target = nd.parents[1];
                  const T go = nd.grad[0];
                  const T* p = pred->value.data();
                  const T* t = target->value.data();
                  const double inv_fg = 1.0 / double(fg);
                  if (Graph<T>::wants_grad(pred)) {
                    T* gp = g.grad_of(pred).data();
                    for (int64_t bn = 0; bn < n; ++bn)
                      for (int64_t ch = 1; ch < c; ++ch) {
                        const double S = 2.0 * (*inter)[size_t(ch)] + double(eps);
                        const double D = (*denom)[size_t(ch)] + double(eps);
                        const int64_t off = (bn * c + ch) * sp;
                        for (int64_t v = 0; v < sp; ++v) {
                          const double d = (2.0 * double(t[off + v]) * D - S) / (D * D);
                          gp[off + v] -= T(go * T(inv_fg * d));
                        }
                      }
                  }
                  if (Graph<T>::wants_grad(target)) {
                    T* gt = g.grad_of(target).data();
                    for (int64_t bn = 0; bn < n; ++bn)
                      for (int64_t ch = 1; ch < c; ++ch) {
                        const double S = 2.0 * (*inter)[size_t(ch)] + double(eps);
                        const double D = (*denom)[size_t(ch)] + double(eps);
                        const int64_t off = (bn * c + ch) * sp;
                        for (int64_t v = 0; v < sp; ++v) {
                          const double d = (2.0 * double(p[off + v]) * D - S) / (D * D);
                          gt[off + v] -= T(go * T(inv_fg * d));
                        }
                      }
                  }
                });
}

// ---------------------------------------------------------------------------
// NCC loss: 1 - zero-normalized cross-correlation over the whole patch,
// per sample, averaged over the batch. Range [0, 2].
// ---------------------------------------------------------------------------
template <typename T>
typename Graph<T>::Node* ncc_loss(Graph<T>& g, typename Graph<T>::Node* a,
                                  typename Graph<T>::Node* b, T eps = T(1e-8)) {
  check_same_shape(a->value, b->value, "ncc_loss");
  const Shape& s = a->value.shape();
  if (s.empty()) throw ShapeError("ncc_loss: tensor required");
  const int64_t n = s.size() >= 2 ? s[0] : 1;
  const int64_t m = a->value.numel() / n;
  if (m < 2) throw ShapeError("ncc_loss: at least 2 voxels per sample required");

  struct SampleStats {
    double amean, bmean, cov, va, vb, denom;
  };
  auto stats = std::make_shared<std::vector<SampleStats>>(size_t(n));
  const T* pa = a->value.data();
  const T* pb = b->value.data();
  double loss = 0;
  for (int64_t bn = 0; bn < n; ++bn) {
    const T* xa = pa + bn * m;
    const T* xb = pb + bn * m;
    double sa = 0, sb = 0;
    for (int64_t i = 0; i < m; ++i) {
      sa += double(xa[i]);
      sb += double(xb[i]);
    }
    SampleStats st;
    st.amean = sa / double(m);
    st.bmean = sb / double(m);
    double cov = 0, va = 0, vb = 0;
    for (int64_t i = 0; i < m; ++i) {
      const double da = double(xa[i]) - st.amean;
      const double db = double(xb[i]) - st.bmean;
      cov += da * db;
      va += da * da;
      vb += db * db;
    }
    st.cov = cov;
    st.va = va;
    st.vb = vb;
    st.denom = std::sqrt(va * vb + double(eps));
    if ((va <= 0 || vb <= 0) && debug_nan_checks()) {
      std::fprintf(stderr, "[xs] ncc_loss: zero-variance input in sample %lld\n",
                   (long long)bn);
    }
    (*stats)[size_t(bn)] = st;
    loss += 1.0 - cov / st.denom;
  }
  loss /= double(n);
  Tensor<T> out({1});
  out[0] = T(loss);
  return g.make(std::move(out), {a, b},
                [n, m, stats](Graph<T>& g, typename Graph<T>::Node& nd) {
                  auto* a = nd.parents[0];
                  auto* b = nd.parents[1];
                  const double go = double(nd.grad[0]) / double(n);
                  const T* pa = a->value.data();
                  const T* pb = b->value.data();
                  T* ga = Graph<T>::wants_grad(a) ? g.grad_of(a).data() : nullptr;
                  T* gb = Graph<T>::wants_grad(b) ? g.grad_of(b).data() : nullptr;
                  if (!ga && !gb) return;
                  for (int64_t bn = 0; bn < n; ++bn) {
                    const SampleStats& st = (*stats)[size_t(bn)];
                    const double d = st.denom;
                    const double d3 = d * d * d;
                    for (int64_t i = 0; i < m; ++i) {
                      const double da = double(pa[bn * m + i]) - st.amean;
                      const double db = double(pb[bn * m + i]) - st.bmean;
                      if (ga) {
                        const double dn = db / d - st.cov * st.vb * da / d3;
                        ga[bn * m + i] -= T(go * dn);
                      }
                      if (gb) {
                        const double dn = da / d - st.cov * st.va * db / d3;
                        gb[bn * m + i] -= T(go * dn);
                      }
                    }
                  }
                });
}

// ---------------------------------------------------------------------------
// bending energy of a displacement field [N,3,D,H,W]
//
// Sum of squared second derivatives (mixed terms doubled), central
// differences on the interior, summed over the three components and averaged
// over batch and voxels. include_mixed toggles the classical mixed terms.
// ---------------------------------------------------------------------------
template <typename T>
typename Graph<T>::Node* bending_energy(Graph<T>& g, typename Graph<T>::Node* dvf,
                                        bool include_mixed = true) {
  const Shape& s = dvf->value.shape();
  if (s.size() != 5 || s[1] != 3) throw ShapeError("bending_energy: [N,3,D,H,W] required");
  const int64_t n = s[0], d = s[2], h = s[3], w = s[4];
  if (d < 3 || h < 3 || w < 3)
    throw DimError("bending_energy: spatial extents must be >= 3");
  const int64_t sp = d * h * w;
  const double norm = 1.0 / double(n * sp);
  const T* f = dvf->value.data();
  double total = 0;
  for (int64_t bc = 0; bc < n * 3; ++bc) {
    const T* x = f + bc * sp;
    for (int64_t z = 1; z < d - 1; ++z) {
      for (int64_t y = 1; y < h - 1; ++y) {
        for (int64_t xx = 1; xx < w - 1; ++xx) {
          const int64_t i = (z * h + y) * w + xx;
          const double dzz = double(x[i - h * w]) - 2.0 * double(x[i]) + double(x[i + h * w]);
          const double dyy = double(x[i - w]) - 2.0 * double(x[i]) + double(x[i + w]);
          const double dxx = double(x[i - 1]) - 2.0 * double(x[i]) + double(x[i + 1]);
          total += dzz * dzz + dyy * dyy + dxx * dxx;
          if (include_mixed) {
            const double dzy = 0.25 * (double(x[i + h * w + w]) - double(x[i + h * w - w]) -
                                       double(x[i - h * w + w]) + double(x[i - h * w - w]));
            const double dzx = 0.25 * (double(x[i + h * w + 1]) - double(x[i + h * w - 1]) -
                                       double(x[i - h * w + 1]) + double(x[i - h * w - 1]));
            const double dyx = 0.25 * (double(x[i + w + 1]) - double(x[i + w - 1]) -
                                       double(x[i - w + 1]) + double(x[i - w - 1]));
            total += 2.0 * (dzy * dzy + dzx * dzx + dyx * dyx);
          }
        }
      }
    }
  }
  Tensor<T> out({1});
  out[0] = T(total * norm);
  return g.make(
      std::move(out), {dvf},
      [n, d, h, w, sp, norm, include_mixed](Graph<T>& g, typename Graph<T>::Node& nd) {
        auto* dvf = nd.parents[0];
        if (!Graph<T>::wants_grad(dvf)) return;
        const T* f = dvf->value.data();
        T* gd = g.grad_of(dvf).data();
        const double go = double(nd.grad[0]) * norm;
        for (int64_t bc = 0; bc < n * 3; ++bc) {
          const T* x = f + bc * sp;
          T* gx = gd + bc * sp;
          for (int64_t z = 1; z < d - 1; ++z) {
            for (int64_t y = 1; y < h - 1; ++y) {
              for (int64_t xx = 1; xx < w - 1; ++xx) {
                const int64_t i = (z * h + y) * w + xx;
                const int64_t zs = h * w, ys = w;
                const double dzz = double(x[i - zs]) - 2.0 * double(x[i]) + double(x[i + zs]);
                const double dyy = double(x[i - ys]) - 2.0 * double(x[i]) + double(x[i + ys]);
                const double dxx = double(x[i - 1]) - 2.0 * double(x[i]) + double(x[i + 1]);
                const T czz = T(go * 2.0 * dzz);
                gx[i - zs] += czz;
                gx[i] -= 2 * czz;
                gx[i + zs] += czz;
                const T cyy = T(go * 2.0 * dyy);
                gx[i - ys] += cyy;
                gx[i] -= 2 * cyy;
                gx[i + ys] += cyy;
                const T cxx = T(go * 2.0 * dxx);
                gx[i - 1] += cxx;
                gx[i] -= 2 * cxx;
                gx[i + 1] += cxx;
                if (include_mixed) {
                  const double dzy =
                      0.25 * (double(x[i + zs + ys]) - double(x[i + zs - ys]) -
                              double(x[i - zs + ys]) + double(x[i - zs - ys]));
                  const double dzx = 0.25 * (double(x[i + zs + 1]) - double(x[i + zs - 1]) -
                                             double(x[i - zs + 1]) + double(x[i - zs - 1]));
                  const double dyx = 0.25 * (double(x[i + ys + 1]) - double(x[i + ys - 1]) -
                                             double(x[i - ys + 1]) + double(x[i - ys - 1]));
                  const T czy = T(go * 4.0 * dzy * 0.25);
                  gx[i + zs + ys] += czy;
                  gx[i + zs - ys] -= czy;
                  gx[i - zs + ys] -= czy;
                  gx[i - zs - ys] += czy;
                  const T czx = T(go * 4.0 * dzx * 0.25);
                  gx[i + zs + 1] += czx;
                  gx[i + zs - 1] -= czx;
                  gx[i - zs + 1] -= czx;
                  gx[i - zs - 1] += czx;
                  const T cyx = T(go * 4.0 * dyx * 0.25);
                  gx[i + ys + 1] += cyx;
                  gx[i + ys - 1] -= cyx;
                  gx[i - ys + 1] -= cyx;
                  gx[i - ys - 1] += cyx;
                }
              }
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// variant-specific multi-resolution total loss
// ---------------------------------------------------------------------------

// Constant per-resolution targets, as graph leaves.
template <typename T>
struct MultiResTargets {
  std::array<typename Graph<T>::Node*, 3> fixed{};          // [N,1,...]
  std::array<typename Graph<T>::Node*, 3> fixed_onehot{};   // [N,C,...]
  std::array<typename Graph<T>::Node*, 3> moving{};         // [N,1,...]
  std::array<typename Graph<T>::Node*, 3> moving_onehot{};  // [N,C,...]
};

struct LossBreakdown {
  double total = 0;
  double dice = 0;
  double ncc = 0;
  double bend = 0;
  std::array<double, 3> per_resolution{0, 0, 0};
};

template <typename T>
std::pair<typename Graph<T>::Node*, LossBreakdown> total_loss(Graph<T>& g, Variant variant,
                                                              const MultiResOutputs<T>& out,
                                                              const MultiResTargets<T>& tg,
                                                              const LossWeights& w) {
  w.validate();
  using Node = typename Graph<T>::Node;
  LossBreakdown bd;
  Node* total = nullptr;
  for (int r = 0; r < kNumResolutions; ++r) {
    const double rw = w.resolution_weights[size_t(r)];
    Node* res_term = nullptr;
    auto add_term = [&](Node* term, double weight, double* slot) {
      *slot += rw * weight * double(term->value[0]);
      Node* scaled = g.scale(term, T(weight));
      res_term = res_term ? g.add(res_term, scaled) : scaled;
    };
    if (variant_has_seg_head(variant)) {
      if (!out.seg[size_t(r)]) throw ContractError("total_loss: missing segmentation head");
      Node* probs = g.softmax_channel(out.seg[size_t(r)]);
      add_term(dice_loss(g, probs, tg.fixed_onehot[size_t(r)]), w.w_dice, &bd.dice);
    }
    if (variant_has_dvf_head(variant)) {
      if (!out.dvf[size_t(r)]) throw ContractError("total_loss: missing DVF head");
      Node* phi = out.dvf[size_t(r)];
      Node* warped = g.warp(tg.moving[size_t(r)], phi);
      add_term(ncc_loss(g, warped, tg.fixed[size_t(r)]), w.w_ncc, &bd.ncc);
      add_term(bending_energy(g, phi), w.w_bend, &bd.bend);
      if (variant_uses_moving_seg(variant)) {
        Node* warped_seg = g.warp(tg.moving_onehot[size_t(r)], phi);
        add_term(dice_loss(g, warped_seg, tg.fixed_onehot[size_t(r)]), w.w_dice, &bd.dice);
      }
    }
    bd.per_resolution[size_t(r)] = double(res_term->value[0]);
    Node* weighted = g.scale(res_term, T(rw));
    total = total ? g.add(total, weighted) : weighted;
  }
  bd.total = double(total->value[0]);
  return {total, bd};
}

}  // namespace xs

#endif  // XS_LOSSES_HPP
