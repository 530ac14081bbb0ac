#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "test_util.hpp"
#include "xs/cross_stitch.hpp"
#include "xs/gradcheck.hpp"

using namespace xs;
using testutil::max_abs_diff;

TEST_CASE("identity alpha separates the paths exactly") {
  Rng rng(1);
  Graph<float> g;
  auto* xs_in = g.leaf(Tensor<float>::random_normal({2, 4, 3, 3, 3}, rng, 0, 1));
  auto* xr_in = g.leaf(Tensor<float>::random_normal({2, 4, 3, 3, 3}, rng, 0, 1));
  auto* alpha = g.leaf(identity_alpha<float>(4));
  auto [s, r] = cross_stitch_apply<float>(g, alpha, xs_in, xr_in);
  CHECK(max_abs_diff(s->value, xs_in->value) == 0.0);
  CHECK(max_abs_diff(r->value, xr_in->value) == 0.0);
}

TEST_CASE("swap alpha permutes the paths") {
  Rng rng(2);
  Graph<float> g;
  auto* xs_in = g.leaf(Tensor<float>::random_normal({1, 3, 2, 2, 2}, rng, 0, 1));
  auto* xr_in = g.leaf(Tensor<float>::random_normal({1, 3, 2, 2, 2}, rng, 0, 1));
  Tensor<float> a({3, 2, 2});
  for (int64_t k = 0; k < 3; ++k) {
    a[k * 4 + 1] = 1.f;  // a_sr
    a[k * 4 + 2] = 1.f;  // a_rs
  }
  auto [s, r] = cross_stitch_apply<float>(g, g.leaf(a), xs_in, xr_in);
  CHECK(max_abs_diff(s->value, xr_in->value) == 0.0);
  CHECK(max_abs_diff(r->value, xs_in->value) == 0.0);
}

TEST_CASE("d(Xs')/d(alpha_sr) equals Xr numerically") {
  Rng rng(3);
  auto r = gradcheck("cross-stitch alpha",
                     {Tensor<double>::random_uniform({2, 2, 2}, rng, 0, 1),
                      Tensor<double>::random_normal({1, 2, 3, 3, 3}, rng, 0, 1),
                      Tensor<double>::random_normal({1, 2, 3, 3, 3}, rng, 0, 1)},
                     [](Graph<double>& g, std::vector<Graph<double>::Node*>& in) {
                       auto [s, rr] = cross_stitch_apply<double>(g, in[0], in[1], in[2]);
                       return g.add(g.sum(s), g.scale(g.sum(rr), 0.5));
                     });
  CHECK(r.max_rel_err < 1e-4);

  // direct check of the specific partial derivative
  Graph<double> g;
  Rng rng2(4);
  Tensor<double> alpha = Tensor<double>::random_uniform({2, 2, 2}, rng2, 0, 1);
  Tensor<double> xsv = Tensor<double>::random_normal({1, 2, 2, 2, 2}, rng2, 0, 1);
  Tensor<double> xrv = Tensor<double>::random_normal({1, 2, 2, 2, 2}, rng2, 0, 1);
  auto* an = g.leaf(alpha, true);
  auto [s, rr] = cross_stitch_apply<double>(g, an, g.leaf(xsv), g.leaf(xrv));
  (void)rr;
  g.backward(g.sum(s));
  Tensor<double> ga = g.grad_or_zeros(an);
  for (int64_t k = 0; k < 2; ++k) {
    double sum_xr = 0;
    for (int64_t v = 0; v < 8; ++v) sum_xr += xrv[k * 8 + v];
    CHECK(ga[k * 4 + 1] == doctest::Approx(sum_xr).epsilon(1e-9));
  }
}

TEST_CASE("apply is linear in each input at fixed alpha") {
  Rng rng(5);
  Tensor<float> alpha = Tensor<float>::random_uniform({3, 2, 2}, rng, -0.5, 1.5);
  Tensor<float> x1 = Tensor<float>::random_normal({1, 3, 2, 2, 2}, rng, 0, 1);
  Tensor<float> x2 = Tensor<float>::random_normal({1, 3, 2, 2, 2}, rng, 0, 1);
  Tensor<float> y = Tensor<float>::random_normal({1, 3, 2, 2, 2}, rng, 0, 1);
  const float a = 0.3f, b = -1.1f;
  auto apply_s = [&](const Tensor<float>& xin) {
    Graph<float> g;
    auto [s, r] = cross_stitch_apply<float>(g, g.leaf(alpha), g.leaf(xin), g.leaf(y));
    (void)r;
    return s->value;
  };
  Tensor<float> combo = x1;
  for (int64_t i = 0; i < combo.numel(); ++i) combo[i] = a * x1[i] + b * x2[i];
  Tensor<float> lhs = apply_s(combo);
  Tensor<float> s1 = apply_s(x1);
  Tensor<float> s2 = apply_s(x2);
  Tensor<float> s0 = apply_s(Tensor<float>({1, 3, 2, 2, 2}));  // the fixed R contribution
  double worst = 0;
  for (int64_t i = 0; i < lhs.numel(); ++i) {
    const double expect = a * (double(s1[i]) - double(s0[i])) +
                          b * (double(s2[i]) - double(s0[i])) + double(s0[i]);
    worst = std::max(worst, std::abs(double(lhs[i]) - expect));
  }
  CHECK(worst < 1e-6);
}

TEST_CASE("init_alpha sampling matches the truncated normal") {
  Rng rng(42);
  Tensor<float> big = init_alpha<float>(25000, rng);  // 1e5 draws
  double sum = 0;
  double mn = 1e9, mx = -1e9;
  for (int64_t i = 0; i < big.numel(); ++i) {
    sum += big[i];
    mn = std::min(mn, double(big[i]));
    mx = std::max(mx, double(big[i]));
  }
  CHECK(mn >= 0.0);
  CHECK(mx <= 1.0);
  CHECK(sum / double(big.numel()) == doctest::Approx(0.5).epsilon(0.02));
  CHECK(std::abs(sum / double(big.numel()) - 0.5) < 0.01);

  Rng r1(9), r2(9);
  Tensor<float> a1 = init_alpha<float>(8, r1);
  Tensor<float> a2 = init_alpha<float>(8, r2);
  CHECK(testutil::bitwise_equal(a1, a2));
}

TEST_CASE("shape checks") {
  Graph<float> g;
  auto* a = g.leaf(identity_alpha<float>(4));
  auto* x = g.leaf(Tensor<float>({1, 4, 2, 2, 2}, 1.f));
  auto* bad = g.leaf(Tensor<float>({1, 3, 2, 2, 2}, 1.f));
  CHECK_THROWS_AS(cross_stitch_apply<float>(g, a, x, bad), ShapeError);
  Rng rng(1);
  CHECK_THROWS_AS(init_alpha<float>(0, rng), ShapeError);
}
