#include "xs/network.hpp"

#include <cstring>

namespace xs {

void NetworkSpec::validate() const {
  if (input_patch < 44 || input_patch % 4 != 0) {
    throw ConfigError("input_patch must be >= 44 and divisible by 4, got " +
                      std::to_string(input_patch));
  }
  for (int f : filters) {
    if (f < 1) throw ConfigError("filter counts must be positive");
  }
  if (num_structures < 2) throw ConfigError("num_structures must include background + organs");
  for (int l : crossstitch_layers) {
    if (l != 3 && l != 6 && l != 9 && l != 12) {
      throw ConfigError("cross-stitch units sit after the down/up layers {3,6,9,12}, got " +
                        std::to_string(l));
    }
  }
  if (!(leaky_slope > 0.f && leaky_slope < 1.f)) throw ConfigError("leaky_slope must be in (0,1)");
  if (!(bn_epsilon > 0.f)) throw ConfigError("bn_epsilon must be positive");
}

int NetworkSpec::trunk_in_channels() const {
  switch (variant) {
    case Variant::Segmentation: return 1;
    case Variant::Registration: return 2;
    default: return 2 + num_structures;  // (I_F, I_M, S_M one-hot)
  }
}

int NetworkSpec::seg_path_in_channels() const {
  return seg_path_full_inputs ? 2 + num_structures : 1;
}

namespace {

struct ConvDef {
  std::string name;
  int cin = 0, cout = 0, k = 3, stride = 1;
  bool bn = true;
};

// Trunk layer list of one path, in forward order.
std::vector<ConvDef> trunk_defs(const std::string& prefix, int cin,
                                const std::array<int, 5>& f) {
  std::vector<ConvDef> d;
  auto c3 = [&](const std::string& n, int ci, int co) { d.push_back({prefix + n, ci, co, 3, 1, true}); };
  auto c2s2 = [&](const std::string& n, int ci, int co) { d.push_back({prefix + n, ci, co, 2, 2, true}); };
  c3("enc1.c1", cin, f[0]);
  c3("enc1.c2", f[0], f[0]);
  c2s2("down1.c", f[0], f[1]);
  c3("enc2.c1", f[1], f[1]);
  c3("enc2.c2", f[1], f[1]);
  c2s2("down2.c", f[1], f[2]);
  c3("bott.c1", f[2], f[2]);
  c3("bott.c2", f[2], f[2]);
  c3("dec2.c1", f[2] + f[1], f[3]);  // upsampled bottleneck + enc2 skip
  c3("dec2.c2", f[3], f[3]);
  c3("dec1.c1", f[3] + f[0], f[4]);  // upsampled dec2 + enc1 skip
  c3("dec1.c2", f[4], f[4]);
  return d;
}

// Per-resolution 1x1x1 linear heads; channel source per resolution.
std::vector<ConvDef> head_defs(const std::string& prefix, const std::array<int, 5>& f,
                               bool seg, bool dvf, int classes) {
  std::vector<ConvDef> d;
  const char* res[3] = {"high", "mid", "low"};
  const int src[3] = {f[4], f[3], f[2]};
  if (seg) {
    for (int r = 0; r < 3; ++r)
      d.push_back({prefix + "head.seg." + res[r], src[r], classes, 1, 1, false});
  }
  if (dvf) {
    for (int r = 0; r < 3; ++r)
      d.push_back({prefix + "head.dvf." + res[r], src[r], 3, 1, 1, false});
  }
  return d;
}

std::vector<std::string> stream_prefixes(const NetworkSpec& spec) {
  if (spec.variant == Variant::CrossStitch) return {"seg.", "reg."};
  return {""};
}

std::vector<ConvDef> all_conv_defs(const NetworkSpec& spec) {
  std::vector<ConvDef> defs;
  for (const std::string& prefix : stream_prefixes(spec)) {
    int cin;
    bool seg_head, dvf_head;
    if (spec.variant == Variant::CrossStitch) {
      const bool is_seg = prefix == "seg.";
      cin = is_seg ? spec.seg_path_in_channels() : spec.trunk_in_channels();
      seg_head = is_seg;
      dvf_head = !is_seg;
    } else {
      cin = spec.trunk_in_channels();
      seg_head = variant_has_seg_head(spec.variant);
      dvf_head = variant_has_dvf_head(spec.variant);
    }
    auto t = trunk_defs(prefix, cin, spec.filters);
    defs.insert(defs.end(), t.begin(), t.end());
    auto h = head_defs(prefix, spec.filters, seg_head, dvf_head, spec.num_structures);
    defs.insert(defs.end(), h.begin(), h.end());
  }
  return defs;
}

// Channel count at each cross-stitch site (after down1/down2/up1/up2).
int cs_channels(const NetworkSpec& spec, int layer) {
  switch (layer) {
    case 3: return spec.filters[1];
    case 6: return spec.filters[2];
    case 9: return spec.filters[2];   // upsample keeps the bottleneck count
    case 12: return spec.filters[3];  // upsample keeps the mid-decoder count
  }
  throw ConfigError("invalid cross-stitch layer");
}

}  // namespace

Network Network::build(const NetworkSpec& spec, uint64_t seed) {
  spec.validate();
  Network net;
  net.spec = spec;
  Rng rng(seed);
  for (const ConvDef& cd : all_conv_defs(spec)) {
    net.params[cd.name + ".w"] = Tensor<float>::random_normal(
        {cd.cout, cd.cin, cd.k, cd.k, cd.k}, rng, 0.0, 0.02);
    net.params[cd.name + ".b"] = Tensor<float>({cd.cout});
    if (cd.bn) {
      net.params[cd.name + ".bn.g"] = Tensor<float>({cd.cout}, 1.f);
      net.params[cd.name + ".bn.b"] = Tensor<float>({cd.cout});
      net.stats[cd.name + ".bn.rm"] = Tensor<float>({cd.cout});
      net.stats[cd.name + ".bn.rv"] = Tensor<float>({cd.cout}, 1.f);
    }
  }
  if (spec.variant == Variant::CrossStitch) {
    for (int l : spec.crossstitch_layers) {
      net.params["cs." + std::to_string(l) + ".alpha"] =
          init_alpha<float>(cs_channels(spec, l), rng);
    }
  }
  return net;
}

int64_t Network::count_parameters() const {
  int64_t n = 0;
  for (const auto& [name, t] : params) n += t.numel();
  return n;
}

Tensor<float> concat_channel_tensors(const std::vector<const Tensor<float>*>& parts) {
  const Shape& s0 = parts.at(0)->shape();
  int64_t ctotal = 0;
  for (const auto* p : parts) {
    const Shape& s = p->shape();
    if (s.size() != 5 || s[0] != s0[0] || s[2] != s0[2] || s[3] != s0[3] || s[4] != s0[4])
      throw ShapeError("concat_channel_tensors: incompatible shapes");
    ctotal += s[1];
  }
  const int64_t n = s0[0], sp = s0[2] * s0[3] * s0[4];
  Tensor<float> out = Tensor<float>::uninit({n, ctotal, s0[2], s0[3], s0[4]});
  int64_t off = 0;
  for (const auto* p : parts) {
    const int64_t ci = p->extent(1);
    for (int64_t bn = 0; bn < n; ++bn) {
      std::memcpy(out.data() + (bn * ctotal + off) * sp, p->data() + bn * ci * sp,
                  size_t(ci * sp) * sizeof(float));
    }
    off += ci;
  }
  return out;
}

MultiResOutputs<float> Network::forward(Graph<float>& g, const ForwardInputs& in, Mode mode,
                                        NodeMap* param_nodes_out) {
  spec.validate();
  const Shape& fs = in.fixed.shape();
  if (fs.size() != 5 || fs[1] != 1) throw ShapeError("forward: fixed image must be [N,1,n,n,n]");
  const int64_t n = fs[2];
  if (fs[3] != n || fs[4] != n) throw DimError("forward: cubic input patch required");
  if (n < 44 || n % 4 != 0)
    throw DimError("forward: patch size must be >= 44 and divisible by 4, got " +
                   std::to_string(n));
  if (mode == Mode::Eval && !bn_initialized) {
    throw ContractError("forward: batch-norm running stats are uninitialized; train first");
  }

  const bool needs_moving = spec.variant != Variant::Segmentation;
  const bool needs_seg = variant_uses_moving_seg(spec.variant);
  if (needs_moving) check_same_shape(in.moving, in.fixed, "forward: moving image");
  if (needs_seg) {
    const Shape& ss = in.moving_seg_onehot.shape();
    if (ss.size() != 5 || ss[0] != fs[0] || ss[1] != spec.num_structures || ss[2] != n ||
        ss[3] != n || ss[4] != n)
      throw ShapeError("forward: moving segmentation must be [N," +
                       std::to_string(spec.num_structures) + ",n,n,n]");
  }

  NodeMap local_nodes;
  NodeMap& pn = param_nodes_out ? *param_nodes_out : local_nodes;
  const bool train = mode == Mode::Train;
  auto pnode = [&](const std::string& name) -> Node* {
    auto it = pn.find(name);
    if (it != pn.end()) return it->second;
    auto pit = params.find(name);
    if (pit == params.end()) throw ContractError("forward: missing parameter " + name);
    Node* nd = g.leaf(pit->second, train);
    pn.emplace(name, nd);
    return nd;
  };

  auto conv_block = [&](const std::string& name, Node* x, int stride, bool bn) -> Node* {
    Node* y = g.conv3d(x, pnode(name + ".w"), pnode(name + ".b"), stride);
    if (!bn) return y;
    if (train) {
      return g.bn_leaky_train(y, pnode(name + ".bn.g"), pnode(name + ".bn.b"),
                              &stats.at(name + ".bn.rm"), &stats.at(name + ".bn.rv"),
                              spec.bn_epsilon, spec.bn_momentum, spec.leaky_slope);
    }
    return g.bn_leaky_eval(y, pnode(name + ".bn.g"), pnode(name + ".bn.b"),
                           stats.at(name + ".bn.rm"), stats.at(name + ".bn.rv"),
                           spec.bn_epsilon, spec.leaky_slope);
  };

  // Assemble per-stream input tensors.
  std::vector<std::string> prefixes = stream_prefixes(spec);
  std::vector<Node*> x(prefixes.size());
  for (size_t si = 0; si < prefixes.size(); ++si) {
    Tensor<float> input;
    if (spec.variant == Variant::Segmentation) {
      input = in.fixed;
    } else if (spec.variant == Variant::Registration) {
      input = concat_channel_tensors({&in.fixed, &in.moving});
    } else if (spec.variant == Variant::CrossStitch && prefixes[si] == "seg.") {
      input = spec.seg_path_full_inputs
                  ? concat_channel_tensors({&in.fixed, &in.moving_seg_onehot, &in.moving})
                  : in.fixed;
    } else {
      input = concat_channel_tensors({&in.fixed, &in.moving, &in.moving_seg_onehot});
    }
    x[si] = g.leaf(std::move(input), false);
  }

  const bool is_cs = spec.variant == Variant::CrossStitch && prefixes.size() == 2;
  auto maybe_stitch = [&](int layer) {
    if (!is_cs) return;
    if (std::find(spec.crossstitch_layers.begin(), spec.crossstitch_layers.end(), layer) ==
        spec.crossstitch_layers.end())
      return;
    Node* alpha = pnode("cs." + std::to_string(layer) + ".alpha");
    auto [a, b] = cross_stitch_apply(g, alpha, x[0], x[1]);
    x[0] = a;
    x[1] = b;
  };

  std::vector<Node*> skip1(prefixes.size()), skip2(prefixes.size());
  std::vector<Node*> low(prefixes.size()), mid(prefixes.size()), high(prefixes.size());

  for (size_t si = 0; si < prefixes.size(); ++si) {
    const std::string& p = prefixes[si];
    x[si] = conv_block(p + "enc1.c1", x[si], 1, true);
    x[si] = conv_block(p + "enc1.c2", x[si], 1, true);
    skip1[si] = x[si];
  }
  for (size_t si = 0; si < prefixes.size(); ++si)
    x[si] = conv_block(prefixes[si] + "down1.c", x[si], 2, true);
  maybe_stitch(3);
  for (size_t si = 0; si < prefixes.size(); ++si) {
    const std::string& p = prefixes[si];
    x[si] = conv_block(p + "enc2.c1", x[si], 1, true);
    x[si] = conv_block(p + "enc2.c2", x[si], 1, true);
    skip2[si] = x[si];
  }
  for (size_t si = 0; si < prefixes.size(); ++si)
    x[si] = conv_block(prefixes[si] + "down2.c", x[si], 2, true);
  maybe_stitch(6);
  for (size_t si = 0; si < prefixes.size(); ++si) {
    const std::string& p = prefixes[si];
    x[si] = conv_block(p + "bott.c1", x[si], 1, true);
    x[si] = conv_block(p + "bott.c2", x[si], 1, true);
    low[si] = x[si];
  }
  for (size_t si = 0; si < prefixes.size(); ++si) x[si] = g.upsample_nearest(x[si], 2);
  maybe_stitch(9);
  for (size_t si = 0; si < prefixes.size(); ++si) {
    const std::string& p = prefixes[si];
    const Shape& us = x[si]->value.shape();
    Node* sk = g.center_crop(skip2[si], {us[2], us[3], us[4]});
    x[si] = g.concat_channels({x[si], sk});
    x[si] = conv_block(p + "dec2.c1", x[si], 1, true);
    x[si] = conv_block(p + "dec2.c2", x[si], 1, true);
    mid[si] = x[si];
  }
  for (size_t si = 0; si < prefixes.size(); ++si) x[si] = g.upsample_nearest(x[si], 2);
  maybe_stitch(12);
  for (size_t si = 0; si < prefixes.size(); ++si) {
    const std::string& p = prefixes[si];
    const Shape& us = x[si]->value.shape();
    Node* sk = g.center_crop(skip1[si], {us[2], us[3], us[4]});
    x[si] = g.concat_channels({x[si], sk});
    x[si] = conv_block(p + "dec1.c1", x[si], 1, true);
    x[si] = conv_block(p + "dec1.c2", x[si], 1, true);
    high[si] = x[si];
  }

  MultiResOutputs<float> out;
  const char* res[3] = {"high", "mid", "low"};
  auto attach = [&](const std::string& prefix, size_t si, bool seg, bool dvf) {
    std::array<Node*, 3> feat{high[si], mid[si], low[si]};
    for (int r = 0; r < 3; ++r) {
      if (seg) {
        out.seg[size_t(r)] = g.conv3d(feat[size_t(r)],
                                      pnode(prefix + "head.seg." + res[r] + ".w"),
                                      pnode(prefix + "head.seg." + res[r] + ".b"), 1);
      }
      if (dvf) {
        out.dvf[size_t(r)] = g.conv3d(feat[size_t(r)],
                                      pnode(prefix + "head.dvf." + res[r] + ".w"),
                                      pnode(prefix + "head.dvf." + res[r] + ".b"), 1);
      }
    }
  };
  if (spec.variant == Variant::CrossStitch) {
    attach("seg.", 0, true, false);
    attach("reg.", 1, false, true);
  } else {
    attach("", 0, variant_has_seg_head(spec.variant), variant_has_dvf_head(spec.variant));
  }

  if (train) bn_initialized = true;
  return out;
}

}  // namespace xs
