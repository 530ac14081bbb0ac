#include "xs/gradcheck.hpp"

#include <cmath>

#include "xs/cross_stitch.hpp"
#include "xs/losses.hpp"

namespace xs {

GradCheckResult gradcheck(const std::string& name, std::vector<Tensor<double>> inputs,
                          const GradBuilder& builder, double tol, double h) {
  auto run = [&](const std::vector<Tensor<double>>& ins,
                 std::vector<Tensor<double>>* grads) -> double {
    Graph<double> g;
    std::vector<Graph<double>::Node*> leaves;
    leaves.reserve(ins.size());
    for (const auto& t : ins) leaves.push_back(g.leaf(t, /*requires_grad=*/true));
    Graph<double>::Node* loss = builder(g, leaves);
    if (grads) {
      g.backward(loss);
      grads->clear();
      for (auto* l : leaves) grads->push_back(g.grad_or_zeros(l));
    }
    return loss->value[0];
  };

  std::vector<Tensor<double>> analytic;
  run(inputs, &analytic);

  GradCheckResult res;
  res.name = name;
  for (size_t i = 0; i < inputs.size(); ++i) {
    for (int64_t j = 0; j < inputs[i].numel(); ++j) {
      const double orig = inputs[i][j];
      inputs[i][j] = orig + h;
      const double fp = run(inputs, nullptr);
      inputs[i][j] = orig - h;
      const double fm = run(inputs, nullptr);
      inputs[i][j] = orig;
      const double fd = (fp - fm) / (2 * h);
      const double an = analytic[i][j];
      const double rel = std::abs(an - fd) / std::max({std::abs(an), std::abs(fd), 1e-2});
      res.max_rel_err = std::max(res.max_rel_err, rel);
    }
  }
  res.pass = res.max_rel_err < tol;
  return res;
}

namespace {

using DGraph = Graph<double>;
using DNode = DGraph::Node*;
using DT = Tensor<double>;

DT randn(Rng& rng, Shape s, double scale = 1.0) {
  DT t = DT::uninit(std::move(s));
  for (int64_t i = 0; i < t.numel(); ++i) t[i] = rng.normal(0.0, scale);
  return t;
}

DT randu(Rng& rng, Shape s, double lo, double hi) {
  DT t = DT::uninit(std::move(s));
  for (int64_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform(lo, hi);
  return t;
}

// Weighted sum with fixed random weights, so the upstream gradient is
// non-uniform but O(1).
DNode weighted_sum(DGraph& g, DNode x, Rng& rng) {
  DT w = randu(rng, x->value.shape(), 0.5, 1.5);
  return g.sum(g.mul(x, g.leaf(std::move(w))));
}

// Central differences are invalid across the LeakyReLU kink; nudge elements
// whose normalized activation sits within the margin of zero.
void condition_bn_leaky(DT& x, const DT& gamma, const DT& beta, double eps, double margin) {
  const Shape& s = x.shape();
  const int64_t n = s[0], c = s[1], sp = s[2] * s[3] * s[4];
  for (int pass = 0; pass < 6; ++pass) {
    bool moved = false;
    for (int64_t ch = 0; ch < c; ++ch) {
      double s1 = 0, s2 = 0;
      for (int64_t i = 0; i < n; ++i)
        for (int64_t v = 0; v < sp; ++v) {
          const double xv = x[(i * c + ch) * sp + v];
          s1 += xv;
          s2 += xv * xv;
        }
      const double m = double(n * sp);
      const double mu = s1 / m;
      const double istd = 1.0 / std::sqrt(std::max(0.0, s2 / m - mu * mu) + eps);
      for (int64_t i = 0; i < n; ++i)
        for (int64_t v = 0; v < sp; ++v) {
          double& xv = x[(i * c + ch) * sp + v];
          const double y = (xv - mu) * istd * gamma[ch] + beta[ch];
          if (std::abs(y) < margin) {
            xv += (y >= 0 ? 1.0 : -1.0) * 2.0 * margin / (istd * gamma[ch]);
            moved = true;
          }
        }
    }
    if (!moved) return;
  }
}

}  // namespace

std::vector<GradCheckResult> run_gradient_suite(uint64_t seed, double tol, std::FILE* out) {
  Rng rng(seed);
  std::vector<GradCheckResult> results;
  auto add = [&](GradCheckResult r) {
    if (out) {
      std::fprintf(out, "  %-28s max rel err %.3e  %s\n", r.name.c_str(), r.max_rel_err,
                   r.pass ? "ok" : "FAIL");
      std::fflush(out);
    }
    results.push_back(std::move(r));
  };

  {
    Rng r = rng.fork(1);
    add(gradcheck("conv3d k3 s1",
                  {randn(r, {1, 2, 6, 6, 6}), randn(r, {3, 2, 3, 3, 3}, 0.5), randn(r, {3})},
                  [](DGraph& g, std::vector<DNode>& in) {
                    Rng wr(11);
                    return weighted_sum(g, g.conv3d(in[0], in[1], in[2], 1), wr);
                  },
                  tol));
  }
  {
    Rng r = rng.fork(2);
    add(gradcheck("conv3d k2 s2",
                  {randn(r, {1, 2, 6, 6, 6}), randn(r, {4, 2, 2, 2, 2}, 0.5), randn(r, {4})},
                  [](DGraph& g, std::vector<DNode>& in) {
                    Rng wr(12);
                    return weighted_sum(g, g.conv3d(in[0], in[1], in[2], 2), wr);
                  },
                  tol));
  }
  {
    Rng r = rng.fork(3);
    add(gradcheck("conv3d k1 head",
                  {randn(r, {1, 3, 4, 4, 4}), randn(r, {5, 3, 1, 1, 1}, 0.5), randn(r, {5})},
                  [](DGraph& g, std::vector<DNode>& in) {
                    Rng wr(13);
                    return weighted_sum(g, g.conv3d(in[0], in[1], in[2], 1), wr);
                  },
                  tol));
  }
  {
    Rng r = rng.fork(4);
    add(gradcheck("upsample_nearest", {randn(r, {1, 2, 3, 3, 3})},
                  [](DGraph& g, std::vector<DNode>& in) {
                    Rng wr(14);
                    return weighted_sum(g, g.upsample_nearest(in[0], 2), wr);
                  },
                  tol));
  }
  {
    Rng r = rng.fork(5);
    DT x = randn(r, {2, 3, 4, 4, 4});
    for (int64_t i = 0; i < x.numel(); ++i)
      if (std::abs(x[i]) < 0.01) x[i] += x[i] >= 0 ? 0.02 : -0.02;
    add(gradcheck("leaky_relu", {std::move(x)},
                  [](DGraph& g, std::vector<DNode>& in) {
                    Rng wr(15);
                    return weighted_sum(g, g.leaky_relu(in[0], 0.2), wr);
                  },
                  tol));
  }
  {
    Rng r = rng.fork(6);
    add(gradcheck("batch_norm train",
                  {randn(r, {2, 3, 4, 4, 4}), randu(r, {3}, 0.5, 1.5), randn(r, {3}, 0.2)},
                  [](DGraph& g, std::vector<DNode>& in) {
                    Rng wr(16);
                    return weighted_sum(
                        g, g.batch_norm_train(in[0], in[1], in[2], nullptr, nullptr, 1e-5, 0.9),
                        wr);
                  },
                  tol));
  }
  {
    Rng r = rng.fork(7);
    DT rm = randn(r, {3}, 0.3);
    DT rv = randu(r, {3}, 0.5, 1.5);
    add(gradcheck("batch_norm eval",
                  {randn(r, {2, 3, 4, 4, 4}), randu(r, {3}, 0.5, 1.5), randn(r, {3}, 0.2)},
                  [rm, rv](DGraph& g, std::vector<DNode>& in) {
                    Rng wr(17);
                    return weighted_sum(g, g.batch_norm_eval(in[0], in[1], in[2], rm, rv, 1e-5),
                                        wr);
                  },
                  tol));
  }
  {
    Rng r = rng.fork(8);
    DT x = randn(r, {2, 3, 4, 4, 4});
    DT gm = randu(r, {3}, 0.5, 1.5);
    DT bt = randn(r, {3}, 0.2);
    condition_bn_leaky(x, gm, bt, 1e-5, 0.01);
    add(gradcheck("bn_leaky fused", {std::move(x), std::move(gm), std::move(bt)},
                  [](DGraph& g, std::vector<DNode>& in) {
                    Rng wr(18);
                    return weighted_sum(
                        g,
                        g.bn_leaky_train(in[0], in[1], in[2], nullptr, nullptr, 1e-5, 0.9, 0.2),
                        wr);
                  },
                  tol));
  }
  {
    Rng r = rng.fork(9);
    add(gradcheck("center_crop", {randn(r, {1, 2, 6, 6, 6})},
                  [](DGraph& g, std::vector<DNode>& in) {
                    Rng wr(19);
                    return weighted_sum(g, g.center_crop(in[0], {3, 4, 5}), wr);
                  },
                  tol));
  }
  {
    Rng r = rng.fork(10);
    add(gradcheck("concat_channels", {randn(r, {2, 2, 3, 3, 3}), randn(r, {2, 3, 3, 3, 3})},
                  [](DGraph& g, std::vector<DNode>& in) {
                    Rng wr(20);
                    return weighted_sum(g, g.concat_channels({in[0], in[1]}), wr);
                  },
                  tol));
  }
  {
    Rng r = rng.fork(11);
    add(gradcheck("softmax_channel", {randn(r, {1, 4, 3, 3, 3})},
                  [](DGraph& g, std::vector<DNode>& in) {
                    Rng wr(21);
                    return weighted_sum(g, g.softmax_channel(in[0]), wr);
                  },
                  tol));
  }
  {
    Rng r = rng.fork(12);
    // displacements kept off the integer lattice so trilinear is smooth
    DT disp = randu(r, {1, 3, 5, 5, 5}, -1.2, 1.2);
    for (int64_t i = 0; i < disp.numel(); ++i) {
      const double f = disp[i] - std::floor(disp[i]);
      if (f < 0.15) disp[i] += 0.2;
      if (f > 0.85) disp[i] -= 0.2;
    }
    add(gradcheck("warp_trilinear", {randn(r, {1, 2, 5, 5, 5}), disp},
                  [](DGraph& g, std::vector<DNode>& in) {
                    Rng wr(22);
                    return weighted_sum(g, g.warp(in[0], in[1]), wr);
                  },
                  tol));
  }
  {
    Rng r = rng.fork(13);
    add(gradcheck("dice_loss", {randu(r, {2, 2, 6, 6, 6}, 0.1, 0.9), randu(r, {2, 2, 6, 6, 6}, 0.0, 1.0)},
                  [](DGraph& g, std::vector<DNode>& in) {
                    return dice_loss<double>(g, in[0], in[1]);
                  },
                  tol));
  }
  {
    Rng r = rng.fork(14);
    add(gradcheck("ncc_loss", {randn(r, {2, 1, 5, 5, 5}), randn(r, {2, 1, 5, 5, 5})},
                  [](DGraph& g, std::vector<DNode>& in) {
                    return ncc_loss<double>(g, in[0], in[1]);
                  },
                  tol));
  }
  {
    Rng r = rng.fork(15);
    add(gradcheck("bending_energy", {randn(r, {1, 3, 6, 6, 6})},
                  [](DGraph& g, std::vector<DNode>& in) {
                    return bending_energy<double>(g, in[0]);
                  },
                  tol));
  }
  {
    Rng r = rng.fork(16);
    add(gradcheck("cross_stitch_apply",
                  {randu(r, {4, 2, 2}, 0.0, 1.0), randn(r, {2, 4, 3, 3, 3}),
                   randn(r, {2, 4, 3, 3, 3})},
                  [](DGraph& g, std::vector<DNode>& in) {
                    Rng wr(26);
                    auto [s, rr] = cross_stitch_apply<double>(g, in[0], in[1], in[2]);
                    return g.add(weighted_sum(g, s, wr), weighted_sum(g, rr, wr));
                  },
                  tol));
  }
  {
    Rng r = rng.fork(17);
    // smooth end-to-end chain: conv -> batch norm -> softmax -> dice
    DT target = randu(r, {1, 2, 4, 4, 4}, 0.0, 1.0);
    add(gradcheck("composite chain",
                  {randn(r, {1, 2, 6, 6, 6}), randn(r, {2, 2, 3, 3, 3}, 0.5), randn(r, {2}),
                   randu(r, {2}, 0.5, 1.5), randn(r, {2}, 0.2)},
                  [target](DGraph& g, std::vector<DNode>& in) {
                    DNode y = g.conv3d(in[0], in[1], in[2], 1);
                    y = g.batch_norm_train(y, in[3], in[4], nullptr, nullptr, 1e-5, 0.9);
                    y = g.softmax_channel(y);
                    return dice_loss<double>(g, y, g.leaf(target));
                  },
                  tol));
  }
  return results;
}

bool gradient_suite_passes(uint64_t seed, double tol, std::FILE* out) {
  bool ok = true;
  for (const auto& r : run_gradient_suite(seed, tol, out)) ok = ok && r.pass;
  return ok;
}

}  // namespace xs
