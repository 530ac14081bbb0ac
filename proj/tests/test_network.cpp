#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "test_util.hpp"
#include "xs/losses.hpp"
#include "xs/network.hpp"
#include "xs/warp.hpp"

using namespace xs;
using testutil::max_abs_diff;

namespace {

NetworkSpec desk_spec(Variant v, int n = 48) {
  NetworkSpec s;
  s.variant = v;
  s.filters = {8, 16, 32, 16, 8};
  s.input_patch = n;
  return s;
}

ForwardInputs random_inputs(int64_t n, int classes, uint64_t seed, int64_t batch = 1) {
  Rng rng(seed);
  ForwardInputs in;
  in.fixed = Tensor<float>::random_uniform({batch, 1, n, n, n}, rng, 0, 1);
  in.moving = Tensor<float>::random_uniform({batch, 1, n, n, n}, rng, 0, 1);
  Tensor<uint8_t> lab({batch, n, n, n});
  for (int64_t i = 0; i < lab.numel(); ++i)
    lab[i] = rng.uniform() < 0.8 ? 0 : uint8_t(1 + rng.uniform_index(uint64_t(classes - 1)));
  in.moving_seg_onehot = kernels::one_hot<float, uint8_t>(lab, classes);
  return in;
}

// independent layer-by-layer tally of the trainable parameter count
int64_t tally_path(int cin, const std::array<int, 5>& f, bool seg_head, bool dvf_head,
                   int classes) {
  auto conv = [](int ci, int co, int k) { return int64_t(co) * ci * k * k * k + co; };
  auto bn = [](int c) { return int64_t(2) * c; };
  int64_t total = 0;
  total += conv(cin, f[0], 3) + bn(f[0]) + conv(f[0], f[0], 3) + bn(f[0]);
  total += conv(f[0], f[1], 2) + bn(f[1]);
  total += conv(f[1], f[1], 3) + bn(f[1]) + conv(f[1], f[1], 3) + bn(f[1]);
  total += conv(f[1], f[2], 2) + bn(f[2]);
  total += conv(f[2], f[2], 3) + bn(f[2]) + conv(f[2], f[2], 3) + bn(f[2]);
  total += conv(f[2] + f[1], f[3], 3) + bn(f[3]) + conv(f[3], f[3], 3) + bn(f[3]);
  total += conv(f[3] + f[0], f[4], 3) + bn(f[4]) + conv(f[4], f[4], 3) + bn(f[4]);
  const int heads[3] = {f[4], f[3], f[2]};
  for (int src : heads) {
    if (seg_head) total += conv(src, classes, 1);
    if (dvf_head) total += conv(src, 3, 1);
  }
  return total;
}

}  // namespace

TEST_CASE("head output sizes follow the (n-40, n/2-18, n/4-7) chain") {
  for (int n : {48, 64, 96}) {
    NetworkSpec spec = desk_spec(Variant::FullyHardSharing, n);
    Network net = Network::build(spec, 1);
    Graph<float> g;
    MultiResOutputs<float> out = net.forward(g, random_inputs(n, spec.num_structures, 2),
                                             Mode::Train);
    for (int r = 0; r < 3; ++r) {
      const int64_t m = output_size(n, r);
      REQUIRE(out.seg[size_t(r)] != nullptr);
      REQUIRE(out.dvf[size_t(r)] != nullptr);
      CHECK(out.seg[size_t(r)]->value.shape() == Shape{1, spec.num_structures, m, m, m});
      CHECK(out.dvf[size_t(r)]->value.shape() == Shape{1, 3, m, m, m});
    }
  }
}

TEST_CASE("cross-stitch heads at n=96 are 56/30/17 cubed") {
  NetworkSpec spec;  // defaults: CrossStitch, {16,32,64,32,16}, n=96
  Network net = Network::build(spec, 3);
  Graph<float> g;
  MultiResOutputs<float> out = net.forward(g, random_inputs(96, spec.num_structures, 4),
                                           Mode::Train);
  CHECK(out.seg[0]->value.shape() == Shape{1, 5, 56, 56, 56});
  CHECK(out.seg[1]->value.shape() == Shape{1, 5, 30, 30, 30});
  CHECK(out.seg[2]->value.shape() == Shape{1, 5, 17, 17, 17});
  CHECK(out.dvf[0]->value.shape() == Shape{1, 3, 56, 56, 56});
}

TEST_CASE("variant head law") {
  struct Expect {
    Variant v;
    bool seg, dvf;
  };
  const Expect cases[] = {{Variant::Segmentation, true, false},
                          {Variant::Registration, false, true},
                          {Variant::JRSRegistration, false, true},
                          {Variant::FullyHardSharing, true, true},
                          {Variant::CrossStitch, true, true}};
  for (const auto& c : cases) {
    Network net = Network::build(desk_spec(c.v), 5);
    Graph<float> g;
    MultiResOutputs<float> out = net.forward(g, random_inputs(48, 5, 6), Mode::Train);
    INFO(variant_name(c.v));
    for (int r = 0; r < 3; ++r) {
      CHECK((out.seg[size_t(r)] != nullptr) == c.seg);
      CHECK((out.dvf[size_t(r)] != nullptr) == c.dvf);
    }
    // structural check: a segmentation network has no DVF-head parameters
    bool has_dvf_param = false;
    for (const auto& [name, t] : net.params) has_dvf_param |= name.find("head.dvf") != std::string::npos;
    CHECK(has_dvf_param == c.dvf);
  }
}

TEST_CASE("zero-input forward of a fresh net is finite") {
  for (Variant v : {Variant::Segmentation, Variant::Registration, Variant::JRSRegistration,
                    Variant::FullyHardSharing, Variant::CrossStitch}) {
    Network net = Network::build(desk_spec(v), 7);
    Graph<float> g;
    ForwardInputs in;
    in.fixed = Tensor<float>({1, 1, 48, 48, 48});
    in.moving = Tensor<float>({1, 1, 48, 48, 48});
    in.moving_seg_onehot = Tensor<float>({1, 5, 48, 48, 48});
    for (int64_t v2 = 0; v2 < 48 * 48 * 48; ++v2) in.moving_seg_onehot[v2] = 1.f;
    MultiResOutputs<float> out = net.forward(g, in, Mode::Train);
    for (int r = 0; r < 3; ++r) {
      if (out.seg[size_t(r)]) CHECK(out.seg[size_t(r)]->value.all_finite());
      if (out.dvf[size_t(r)]) CHECK(out.dvf[size_t(r)]->value.all_finite());
    }
  }
}

TEST_CASE("parameter counts") {
  SUBCASE("1x1x1 head from 16 channels to 5 classes has 85 parameters") {
    CHECK(16 * 5 + 5 == 85);
    NetworkSpec spec = desk_spec(Variant::Segmentation);
    spec.filters = {16, 16, 16, 16, 16};
    Network net = Network::build(spec, 1);
    CHECK(net.params.at("head.seg.high.w").numel() + net.params.at("head.seg.high.b").numel() ==
          85);
  }
  SUBCASE("a cross-stitch unit on 32 filters contributes 128 alphas") {
    NetworkSpec spec;  // CrossStitch {16,32,64,32,16}
    Network net = Network::build(spec, 1);
    CHECK(net.params.at("cs.3.alpha").numel() == 32 * 4);
    CHECK(net.params.at("cs.12.alpha").numel() == 32 * 4);
    CHECK(net.params.at("cs.6.alpha").numel() == 64 * 4);
  }
  SUBCASE("count matches an independent layer-by-layer tally") {
    NetworkSpec cs;  // CrossStitch {16,32,64,32,16}, 5 classes
    Network net = Network::build(cs, 1);
    const int64_t seg_path = tally_path(1, cs.filters, true, false, 5);
    const int64_t reg_path = tally_path(2 + 5, cs.filters, false, true, 5);
    const int64_t alphas = 4 * (32 + 64 + 64 + 32);
    CHECK(net.count_parameters() == seg_path + reg_path + alphas);

    NetworkSpec seg;
    seg.variant = Variant::Segmentation;
    seg.filters = {23, 45, 91, 45, 23};
    CHECK(Network::build(seg, 1).count_parameters() == tally_path(1, seg.filters, true, false, 5));
  }
  SUBCASE("parameter parity within 10 percent, alphas below 0.5 percent") {
    NetworkSpec cs;
    const int64_t cs_count = Network::build(cs, 1).count_parameters();
    for (Variant v : {Variant::Segmentation, Variant::Registration, Variant::JRSRegistration,
                      Variant::FullyHardSharing}) {
      NetworkSpec st;
      st.variant = v;
      st.filters = {23, 45, 91, 45, 23};
      const int64_t count = Network::build(st, 1).count_parameters();
      INFO(variant_name(v), " count ", count, " vs cross-stitch ", cs_count);
      CHECK(std::abs(double(count - cs_count)) / double(cs_count) < 0.10);
    }
    int64_t alphas = 0;
    Network net = Network::build(cs, 1);
    for (const auto& [name, t] : net.params)
      if (name.rfind("cs.", 0) == 0) alphas += t.numel();
    CHECK(double(alphas) / double(cs_count) < 0.005);
  }
}

TEST_CASE("same seed builds bitwise-identical parameters") {
  NetworkSpec spec = desk_spec(Variant::CrossStitch);
  Network a = Network::build(spec, 77);
  Network b = Network::build(spec, 77);
  REQUIRE(a.params.size() == b.params.size());
  for (const auto& [name, t] : a.params) CHECK(testutil::bitwise_equal(t, b.params.at(name)));
  Network c = Network::build(spec, 78);
  bool any_diff = false;
  for (const auto& [name, t] : a.params)
    any_diff = any_diff || !testutil::bitwise_equal(t, c.params.at(name));
  CHECK(any_diff);
}

TEST_CASE("identity cross-stitch equals fully decoupled paths") {
  const int n = 48;
  NetworkSpec cs_spec = desk_spec(Variant::CrossStitch, n);
  Network cs = Network::build(cs_spec, 11);
  for (int l : cs_spec.crossstitch_layers)
    cs.params.at("cs." + std::to_string(l) + ".alpha") = identity_alpha<float>(
        cs.params.at("cs." + std::to_string(l) + ".alpha").extent(0));

  // single-path networks with the same weights: segmentation path = the
  // Segmentation variant, registration path = the JRS-registration variant
  NetworkSpec seg_spec = desk_spec(Variant::Segmentation, n);
  NetworkSpec reg_spec = desk_spec(Variant::JRSRegistration, n);
  Network seg = Network::build(seg_spec, 12);
  Network reg = Network::build(reg_spec, 13);
  for (auto& [name, t] : seg.params) t = cs.params.at("seg." + name);
  for (auto& [name, t] : reg.params) t = cs.params.at("reg." + name);

  ForwardInputs in = random_inputs(n, 5, 14);
  Graph<float> g1, g2, g3;
  MultiResOutputs<float> out_cs = cs.forward(g1, in, Mode::Train);
  MultiResOutputs<float> out_seg = seg.forward(g2, in, Mode::Train);
  MultiResOutputs<float> out_reg = reg.forward(g3, in, Mode::Train);
  for (int r = 0; r < 3; ++r) {
    CHECK(max_abs_diff(out_cs.seg[size_t(r)]->value, out_seg.seg[size_t(r)]->value) <= 1e-5);
    CHECK(max_abs_diff(out_cs.dvf[size_t(r)]->value, out_reg.dvf[size_t(r)]->value) <= 1e-5);
  }
}

TEST_CASE("cross-stitch segmentation path can take the joint inputs") {
  NetworkSpec spec = desk_spec(Variant::CrossStitch);
  spec.seg_path_full_inputs = true;
  Network net = Network::build(spec, 15);
  CHECK(net.params.at("seg.enc1.c1.w").extent(1) == 2 + 5);
  Graph<float> g;
  MultiResOutputs<float> out = net.forward(g, random_inputs(48, 5, 16), Mode::Train);
  CHECK(out.seg[0]->value.all_finite());
}

TEST_CASE("gradient flow reaches nearly all parameters") {
  LossWeights w;
  for (Variant v : {Variant::Segmentation, Variant::Registration, Variant::JRSRegistration,
                    Variant::FullyHardSharing, Variant::CrossStitch}) {
    Network net = Network::build(desk_spec(v), 21);
    int64_t zero_count = 0, total_count = 0;
    std::map<std::string, bool> touched;
    for (uint64_t batch = 0; batch < 5; ++batch) {
      Graph<float> g;
      Network::NodeMap pn;
      ForwardInputs in = random_inputs(48, 5, 100 + batch);
      MultiResOutputs<float> out = net.forward(g, in, Mode::Train, &pn);
      Rng rng(31 + batch);
      Tensor<uint8_t> lab({1, 48, 48, 48});
      for (int64_t i = 0; i < lab.numel(); ++i)
        lab[i] = rng.uniform() < 0.7 ? 0 : uint8_t(1 + rng.uniform_index(4));
      Tensor<float> fo = kernels::one_hot<float, uint8_t>(lab, 5);
      auto tb = make_multires_targets<float>(in.fixed, fo, in.moving, in.moving_seg_onehot);
      MultiResTargets<float> tg;
      for (int r = 0; r < 3; ++r) {
        tg.fixed[size_t(r)] = g.leaf(tb.fixed[size_t(r)]);
        tg.fixed_onehot[size_t(r)] = g.leaf(tb.fixed_onehot[size_t(r)]);
        tg.moving[size_t(r)] = g.leaf(tb.moving[size_t(r)]);
        tg.moving_onehot[size_t(r)] = g.leaf(tb.moving_onehot[size_t(r)]);
      }
      auto [loss, bd] = total_loss<float>(g, v, out, tg, w);
      (void)bd;
      g.backward(loss);
      for (const auto& [name, node] : pn) {
        Tensor<float> grad = g.grad_or_zeros(node);
        for (int64_t i = 0; i < grad.numel(); ++i) {
          if (batch == 0) ++total_count;
          if (grad[i] != 0.f) touched[name + "#" + std::to_string(i)] = true;
        }
      }
    }
    int64_t nonzero = int64_t(touched.size());
    zero_count = total_count - nonzero;
    INFO(variant_name(v), ": ", zero_count, " of ", total_count, " never received gradient");
    CHECK(double(nonzero) >= 0.99 * double(total_count));
  }
}

TEST_CASE("eval before any training signals uninitialized stats") {
  Network net = Network::build(desk_spec(Variant::Segmentation), 33);
  Graph<float> g;
  CHECK_THROWS_AS(net.forward(g, random_inputs(48, 5, 34), Mode::Eval), ContractError);
}

TEST_CASE("invalid specs are rejected") {
  NetworkSpec bad = desk_spec(Variant::Segmentation);
  bad.input_patch = 42;  // not divisible by 4
  CHECK_THROWS_AS(Network::build(bad, 1), ConfigError);
  bad = desk_spec(Variant::Segmentation);
  bad.input_patch = 40;  // high-res output would be empty
  CHECK_THROWS_AS(Network::build(bad, 1), ConfigError);
  bad = desk_spec(Variant::CrossStitch);
  bad.crossstitch_layers = {5};
  CHECK_THROWS_AS(Network::build(bad, 1), ConfigError);
  // wrong channel count
  Network net = Network::build(desk_spec(Variant::JRSRegistration), 2);
  Graph<float> g;
  ForwardInputs in = random_inputs(48, 4, 3);  // 4 structures instead of 5
  CHECK_THROWS_AS(net.forward(g, in, Mode::Train), ShapeError);
}
