#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "test_util.hpp"
#include "xs/gradcheck.hpp"
#include "xs/graph.hpp"

using namespace xs;
using testutil::max_abs_diff;

namespace {

// independent seven-nested-loop direct convolution
template <typename T>
Tensor<T> conv3d_reference(const Tensor<T>& in, const Tensor<T>& w, const Tensor<T>* bias,
                           int64_t stride) {
  const Shape& is = in.shape();
  const Shape& ws = w.shape();
  const int64_t k = ws[2];
  const int64_t od = (is[2] - k) / stride + 1;
  const int64_t oh = (is[3] - k) / stride + 1;
  const int64_t ow = (is[4] - k) / stride + 1;
  Tensor<T> out({is[0], ws[0], od, oh, ow});
  for (int64_t n = 0; n < is[0]; ++n)
    for (int64_t oc = 0; oc < ws[0]; ++oc)
      for (int64_t oz = 0; oz < od; ++oz)
        for (int64_t oy = 0; oy < oh; ++oy)
          for (int64_t ox = 0; ox < ow; ++ox) {
            double acc = bias ? double((*bias)[oc]) : 0.0;
            for (int64_t ic = 0; ic < is[1]; ++ic)
              for (int64_t kz = 0; kz < k; ++kz)
                for (int64_t ky = 0; ky < k; ++ky)
                  for (int64_t kx = 0; kx < k; ++kx)
                    acc += double(w.at({oc, ic, kz, ky, kx})) *
                           double(in.at({n, ic, oz * stride + kz, oy * stride + ky,
                                         ox * stride + kx}));
            out.at({n, oc, oz, oy, ox}) = T(acc);
          }
  return out;
}

}  // namespace

TEST_CASE("conv3d: all-ones 3x3x3 sums to 27") {
  Graph<float> g;
  auto* x = g.leaf(Tensor<float>({1, 1, 3, 3, 3}, 1.f));
  auto* w = g.leaf(Tensor<float>({1, 1, 3, 3, 3}, 1.f));
  auto* y = g.conv3d(x, w, nullptr, 1);
  CHECK(y->value.shape() == Shape{1, 1, 1, 1, 1});
  CHECK(y->value[0] == doctest::Approx(27.f));
}

TEST_CASE("conv3d: stride-2 kernel-2 halves 92^3 to 46^3") {
  Graph<float> g;
  Rng rng(3);
  auto* x = g.leaf(Tensor<float>::random_uniform({1, 1, 92, 92, 92}, rng, 0, 1));
  auto* w = g.leaf(Tensor<float>::random_normal({1, 1, 2, 2, 2}, rng, 0, 0.2));
  auto* y = g.conv3d(x, w, nullptr, 2);
  CHECK(y->value.shape() == Shape{1, 1, 46, 46, 46});
}

TEST_CASE("conv3d matches the brute-force oracle") {
  Rng rng(11);
  SUBCASE("k3 s1 at 64-bit within 1e-6") {
    Tensor<double> in = Tensor<double>::random_normal({1, 2, 6, 6, 6}, rng, 0, 1);
    Tensor<double> w = Tensor<double>::random_normal({3, 2, 3, 3, 3}, rng, 0, 0.5);
    Tensor<double> b = Tensor<double>::random_normal({3}, rng, 0, 0.5);
    Graph<double> g;
    auto* y = g.conv3d(g.leaf(in), g.leaf(w), g.leaf(b), 1);
    Tensor<double> ref = conv3d_reference(in, w, &b, 1);
    CHECK(max_abs_diff(y->value, ref) < 1e-6);
  }
  // the float fast paths agree with the oracle up to 32-bit accumulation order
  SUBCASE("k3 s1 vector path") {
    Tensor<float> in = Tensor<float>::random_normal({1, 2, 6, 6, 6}, rng, 0, 1);
    Tensor<float> w = Tensor<float>::random_normal({3, 2, 3, 3, 3}, rng, 0, 0.5);
    Tensor<float> b = Tensor<float>::random_normal({3}, rng, 0, 0.5);
    Graph<float> g;
    auto* y = g.conv3d(g.leaf(in), g.leaf(w), g.leaf(b), 1);
    Tensor<float> ref = conv3d_reference(in, w, &b, 1);
    CHECK(max_abs_diff(y->value, ref) < 1e-5);
  }
  SUBCASE("k2 s2") {
    Tensor<float> in = Tensor<float>::random_normal({2, 3, 8, 8, 8}, rng, 0, 1);
    Tensor<float> w = Tensor<float>::random_normal({4, 3, 2, 2, 2}, rng, 0, 0.5);
    Tensor<float> b = Tensor<float>::random_normal({4}, rng, 0, 0.5);
    Graph<float> g;
    auto* y = g.conv3d(g.leaf(in), g.leaf(w), g.leaf(b), 2);
    Tensor<float> ref = conv3d_reference(in, w, &b, 2);
    CHECK(max_abs_diff(y->value, ref) < 1e-5);
  }
  SUBCASE("k2 s2 odd extents fall back to the generic path") {
    Tensor<float> in = Tensor<float>::random_normal({1, 2, 7, 7, 7}, rng, 0, 1);
    Tensor<float> w = Tensor<float>::random_normal({3, 2, 2, 2, 2}, rng, 0, 0.5);
    Graph<float> g;
    auto* y = g.conv3d(g.leaf(in), g.leaf(w), nullptr, 2);
    Tensor<float> ref = conv3d_reference<float>(in, w, nullptr, 2);
    CHECK(y->value.shape() == Shape{1, 3, 3, 3, 3});
    CHECK(max_abs_diff(y->value, ref) < 1e-5);
  }
  SUBCASE("wide rows exercise the tile tail") {
    Tensor<float> in = Tensor<float>::random_normal({1, 2, 5, 5, 37}, rng, 0, 1);
    Tensor<float> w = Tensor<float>::random_normal({5, 2, 3, 3, 3}, rng, 0, 0.5);
    Graph<float> g;
    auto* y = g.conv3d(g.leaf(in), g.leaf(w), nullptr, 1);
    Tensor<float> ref = conv3d_reference<float>(in, w, nullptr, 1);
    CHECK(max_abs_diff(y->value, ref) < 1e-5);
  }
}

TEST_CASE("conv3d error paths") {
  Graph<float> g;
  auto* x = g.leaf(Tensor<float>({1, 2, 4, 4, 4}, 1.f));
  CHECK_THROWS_AS(g.conv3d(x, g.leaf(Tensor<float>({1, 3, 3, 3, 3})), nullptr, 1), ShapeError);
  CHECK_THROWS_AS(g.conv3d(x, g.leaf(Tensor<float>({1, 2, 5, 5, 5})), nullptr, 1), DimError);
  CHECK_THROWS_AS(g.conv3d(x, g.leaf(Tensor<float>({1, 2, 3, 3, 3})), nullptr, 3),
                  ContractError);
}

TEST_CASE("upsample_nearest replicates blocks and shapes") {
  Graph<float> g;
  Tensor<float> in({1, 1, 2, 2, 2});
  for (int64_t i = 0; i < 8; ++i) in[i] = float(i + 1);
  auto* y = g.upsample_nearest(g.leaf(in), 2);
  CHECK(y->value.shape() == Shape{1, 1, 4, 4, 4});
  for (int64_t z = 0; z < 4; ++z)
    for (int64_t yy = 0; yy < 4; ++yy)
      for (int64_t x = 0; x < 4; ++x)
        CHECK(y->value.at({0, 0, z, yy, x}) == in.at({0, 0, z / 2, yy / 2, x / 2}));

  // the bottleneck-to-mid step of the size chain: 17^3 -> 34^3
  Graph<float> g2;
  auto* y2 = g2.upsample_nearest(g2.leaf(Tensor<float>({1, 1, 17, 17, 17}, 1.f)), 2);
  CHECK(y2->value.shape() == Shape{1, 1, 34, 34, 34});
}

TEST_CASE("upsample backward sums the factor^3 block") {
  Graph<float> g;
  auto* x = g.leaf(Tensor<float>({1, 1, 2, 2, 2}, 1.f), true);
  auto* y = g.upsample_nearest(x, 2);
  auto* loss = g.sum(y);
  g.backward(loss);
  Tensor<float> gx = g.grad_or_zeros(x);
  for (int64_t i = 0; i < 8; ++i) CHECK(gx[i] == doctest::Approx(8.f));
}

TEST_CASE("leaky_relu values and subgradient") {
  Graph<float> g;
  Tensor<float> in({1, 1, 1, 1, 3});
  in[0] = 0.f;
  in[1] = -2.f;
  in[2] = 3.f;
  auto* y = g.leaky_relu(g.leaf(in), 0.2f);
  CHECK(y->value[0] == doctest::Approx(0.f));
  CHECK(y->value[1] == doctest::Approx(-0.4f));
  CHECK(y->value[2] == doctest::Approx(3.f));

  // gradient at x = -1 equals the slope, checked against central differences
  auto r = gradcheck("leaky at -1", {Tensor<double>({1, 1, 1, 1, 1}, -1.0)},
                     [](Graph<double>& g, std::vector<Graph<double>::Node*>& in) {
                       return g.sum(g.leaky_relu(in[0], 0.2));
                     });
  CHECK(r.pass);
  Graph<double> gd;
  auto* xd = gd.leaf(Tensor<double>({1, 1, 1, 1, 1}, -1.0), true);
  gd.backward(gd.sum(gd.leaky_relu(xd, 0.2)));
  CHECK(gd.grad_or_zeros(xd)[0] == doctest::Approx(0.2));
}

TEST_CASE("batch_norm anchors") {
  SUBCASE("constant input per channel gives beta") {
    Graph<float> g;
    Tensor<float> in({2, 2, 3, 3, 3});
    for (int64_t n = 0; n < 2; ++n)
      for (int64_t c = 0; c < 2; ++c)
        for (int64_t v = 0; v < 27; ++v) in[(n * 2 + c) * 27 + v] = float(3 + c);
    Tensor<float> gamma({2}, 1.f);
    Tensor<float> beta({2});
    beta[0] = 0.5f;
    beta[1] = -1.25f;
    auto* y = g.batch_norm_train(g.leaf(in), g.leaf(gamma), g.leaf(beta), nullptr, nullptr,
                                 1e-5f, 0.9f);
    for (int64_t n = 0; n < 2; ++n)
      for (int64_t c = 0; c < 2; ++c)
        for (int64_t v = 0; v < 27; ++v)
          CHECK(y->value[(n * 2 + c) * 27 + v] == doctest::Approx(beta[c]).epsilon(1e-5));
  }
  SUBCASE("normalized input passes through with unit gamma") {
    Rng rng(5);
    Tensor<float> in = Tensor<float>::random_normal({2, 3, 4, 4, 4}, rng, 0, 1);
    // normalize each channel exactly first
    for (int64_t c = 0; c < 3; ++c) {
      double s1 = 0, s2 = 0;
      for (int64_t n = 0; n < 2; ++n)
        for (int64_t v = 0; v < 64; ++v) s1 += in[(n * 3 + c) * 64 + v];
      const double mu = s1 / 128.0;
      for (int64_t n = 0; n < 2; ++n)
        for (int64_t v = 0; v < 64; ++v) {
          const double d = in[(n * 3 + c) * 64 + v] - mu;
          s2 += d * d;
        }
      const double sd = std::sqrt(s2 / 128.0);
      for (int64_t n = 0; n < 2; ++n)
        for (int64_t v = 0; v < 64; ++v)
          in[(n * 3 + c) * 64 + v] = float((in[(n * 3 + c) * 64 + v] - mu) / sd);
    }
    Graph<float> g;
    auto* y = g.batch_norm_train(g.leaf(in), g.leaf(Tensor<float>({3}, 1.f)),
                                 g.leaf(Tensor<float>({3})), nullptr, nullptr, 1e-5f, 0.9f);
    CHECK(max_abs_diff(y->value, in) < 1e-4);
  }
  SUBCASE("running stats feed eval mode") {
    Rng rng(6);
    Tensor<float> in = Tensor<float>::random_normal({4, 2, 3, 3, 3}, rng, 1.0, 2.0);
    Tensor<float> rm({2}), rv({2}, 1.f);
    Tensor<float> gamma({2}, 1.f), beta({2});
    for (int i = 0; i < 80; ++i) {
      Graph<float> g;
      g.batch_norm_train(g.leaf(in), g.leaf(gamma), g.leaf(beta), &rm, &rv, 1e-5f, 0.9f);
    }
    // after many identical batches the running stats approach the batch stats
    Graph<float> g;
    auto* ytrain = g.batch_norm_train(g.leaf(in), g.leaf(gamma), g.leaf(beta), nullptr, nullptr,
                                      1e-5f, 0.9f);
    auto* yeval = g.batch_norm_eval(g.leaf(in), g.leaf(gamma), g.leaf(beta), rm, rv, 1e-5f);
    CHECK(max_abs_diff(ytrain->value, yeval->value) < 0.05);
  }
}

TEST_CASE("center_crop window arithmetic") {
  // 92^3 -> 60^3 leaves a margin of 16 on each side
  auto off = kernels::crop_offsets(92, 92, 92, 60, 60, 60);
  CHECK(off[0] == 16);
  Graph<float> g;
  Rng rng(7);
  Tensor<float> in = Tensor<float>::random_uniform({1, 1, 8, 8, 8}, rng, 0, 1);
  auto* y = g.center_crop(g.leaf(in), {4, 4, 4});
  for (int64_t z = 0; z < 4; ++z)
    for (int64_t yy = 0; yy < 4; ++yy)
      for (int64_t x = 0; x < 4; ++x)
        CHECK(y->value.at({0, 0, z, yy, x}) == in.at({0, 0, z + 2, yy + 2, x + 2}));
  CHECK_THROWS_AS(g.center_crop(y, {9, 4, 4}), DimError);

  // odd margin floors on the low side
  Graph<float> g2;
  Tensor<float> in2({1, 1, 5, 5, 5});
  for (int64_t i = 0; i < in2.numel(); ++i) in2[i] = float(i);
  auto* y2 = g2.center_crop(g2.leaf(in2), {2, 2, 2});
  CHECK(y2->value.at({0, 0, 0, 0, 0}) == in2.at({0, 0, 1, 1, 1}));
}

TEST_CASE("concat along channels") {
  Graph<float> g;
  auto* a = g.leaf(Tensor<float>({2, 16, 3, 3, 3}, 1.f));
  auto* b = g.leaf(Tensor<float>({2, 64, 3, 3, 3}, 2.f));
  auto* y = g.concat_channels({a, b});
  CHECK(y->value.shape() == Shape{2, 80, 3, 3, 3});
  CHECK(y->value.at({1, 0, 0, 0, 0}) == 1.f);
  CHECK(y->value.at({1, 16, 0, 0, 0}) == 2.f);
}

TEST_CASE("backward basics") {
  SUBCASE("sum gives a gradient of ones") {
    Graph<float> g;
    auto* p = g.leaf(Tensor<float>({3, 4}, 2.f), true);
    g.backward(g.sum(p));
    Tensor<float> gp = g.grad_or_zeros(p);
    for (int64_t i = 0; i < gp.numel(); ++i) CHECK(gp[i] == 1.f);
  }
  SUBCASE("disconnected parameter keeps an exactly-zero gradient") {
    Graph<float> g;
    auto* a = g.leaf(Tensor<float>({2, 2}, 1.f), true);
    auto* b = g.leaf(Tensor<float>({2, 2}, 1.f), true);
    g.backward(g.sum(a));
    Tensor<float> gb = g.grad_or_zeros(b);
    for (int64_t i = 0; i < gb.numel(); ++i) CHECK(gb[i] == 0.f);
  }
  SUBCASE("non-scalar loss is rejected") {
    Graph<float> g;
    auto* a = g.leaf(Tensor<float>({2, 2}, 1.f), true);
    CHECK_THROWS_AS(g.backward(a), ContractError);
  }
  SUBCASE("conv parameter gradients match finite differences") {
    Rng rng(13);
    auto r = gradcheck(
        "mean(conv)", {Tensor<double>::random_normal({1, 2, 5, 5, 5}, rng, 0, 1),
                       Tensor<double>::random_normal({2, 2, 3, 3, 3}, rng, 0, 0.5)},
        [](Graph<double>& g, std::vector<Graph<double>::Node*>& in) {
          return g.mean(g.conv3d(in[0], in[1], nullptr, 1));
        });
    CHECK(r.pass);
  }
}

TEST_CASE("linearity of backward") {
  Rng rng(17);
  Tensor<double> xv = Tensor<double>::random_normal({1, 2, 4, 4, 4}, rng, 0, 1);
  Tensor<double> wv = Tensor<double>::random_normal({2, 2, 3, 3, 3}, rng, 0, 0.5);
  const double a = 0.7, b = -1.3;
  auto grads_for = [&](double ca, double cb) {
    Graph<double> g;
    auto* x = g.leaf(xv, true);
    auto* w = g.leaf(wv, true);
    auto* y = g.conv3d(x, w, nullptr, 1);
    auto* l1 = g.mean(y);
    auto* l2 = g.sum(g.mul(y, y));
    g.backward(g.add(g.scale(l1, ca), g.scale(l2, cb)));
    return std::pair{g.grad_or_zeros(x), g.grad_or_zeros(w)};
  };
  auto [gx_ab, gw_ab] = grads_for(a, b);
  auto [gx_a, gw_a] = grads_for(a, 0.0);
  auto [gx_b, gw_b] = grads_for(0.0, b);
  double worst = 0;
  for (int64_t i = 0; i < gx_ab.numel(); ++i)
    worst = std::max(worst, std::abs(gx_ab[i] - (gx_a[i] + gx_b[i])));
  for (int64_t i = 0; i < gw_ab.numel(); ++i)
    worst = std::max(worst, std::abs(gw_ab[i] - (gw_a[i] + gw_b[i])));
  CHECK(worst < 1e-6);
}

TEST_CASE("shape law holds across random valid shapes") {
  Rng rng(23);
  for (int trial = 0; trial < 30; ++trial) {
    const int64_t n = 1 + int64_t(rng.uniform_index(2));
    const int64_t cin = 1 + int64_t(rng.uniform_index(4));
    const int64_t cout = 1 + int64_t(rng.uniform_index(5));
    const int64_t k = rng.uniform() < 0.5 ? 3 : 2;
    const int64_t s = rng.uniform() < 0.5 ? 1 : 2;
    const int64_t d = k + int64_t(rng.uniform_index(8));
    const int64_t h = k + int64_t(rng.uniform_index(8));
    const int64_t w = k + int64_t(rng.uniform_index(12));
    Graph<float> g;
    auto* x = g.leaf(Tensor<float>::random_normal({n, cin, d, h, w}, rng, 0, 1));
    auto* wt = g.leaf(Tensor<float>::random_normal({cout, cin, k, k, k}, rng, 0, 0.5));
    auto* y = g.conv3d(x, wt, nullptr, int(s));
    const Shape expect{n, cout, (d - k) / s + 1, (h - k) / s + 1, (w - k) / s + 1};
    CHECK(y->value.shape() == expect);
    CHECK(int64_t(y->value.vec().size()) == shape_numel(expect));
  }
}

TEST_CASE("identical runs are bitwise identical") {
  auto run = [] {
    Rng rng(31);
    Graph<float> g;
    auto* x = g.leaf(Tensor<float>::random_normal({2, 3, 8, 8, 8}, rng, 0, 1), true);
    auto* w = g.leaf(Tensor<float>::random_normal({4, 3, 3, 3, 3}, rng, 0, 0.5), true);
    auto* y = g.leaky_relu(g.conv3d(x, w, nullptr, 1), 0.2f);
    auto* loss = g.mean(g.mul(y, y));
    g.backward(loss);
    return std::tuple{y->value, g.grad_or_zeros(x), g.grad_or_zeros(w)};
  };
  auto [y1, gx1, gw1] = run();
  auto [y2, gx2, gw2] = run();
  CHECK(testutil::bitwise_equal(y1, y2));
  CHECK(testutil::bitwise_equal(gx1, gx2));
  CHECK(testutil::bitwise_equal(gw1, gw2));
}

TEST_CASE("the finite-difference suite is green") {
  CHECK(gradient_suite_passes(7, 1e-4, nullptr));
}
