#include "xs/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "xs/warp.hpp"

namespace xs {

namespace {

template <typename T>
Tensor<T> extract_patch(const Tensor<T>& vol, const std::array<int64_t, 3>& start, int64_t n) {
  const Shape& s = vol.shape();
  Tensor<T> out = Tensor<T>::uninit({n, n, n});
  for (int64_t z = 0; z < n; ++z)
    for (int64_t y = 0; y < n; ++y)
      std::memcpy(out.data() + (z * n + y) * n,
                  vol.data() + ((start[0] + z) * s[1] + (start[1] + y)) * s[2] + start[2],
                  size_t(n) * sizeof(T));
  return out;
}

}  // namespace

Batch make_batch(const std::vector<DataPair>& pairs, int64_t n_patch, int num_structures,
                 int64_t batch_pairs, int64_t iteration, uint64_t seed) {
  if (pairs.empty()) throw ContractError("make_batch: empty dataset");
  for (const DataPair& p : pairs) {
    const Shape& s = p.fixed.shape();
    if (n_patch > s[0] || n_patch > s[1] || n_patch > s[2])
      throw DimError("make_batch: patch size " + std::to_string(n_patch) +
                     " exceeds volume " + shape_str(s) + " of pair " + p.id);
  }
  Rng rng = Rng(seed).fork(uint64_t(iteration));
  const int64_t nb = 2 * batch_pairs;
  const int64_t n = n_patch;
  const int64_t sp = n * n * n;
  Batch b;
  b.fixed = Tensor<float>({nb, 1, n, n, n});
  b.moving = Tensor<float>({nb, 1, n, n, n});
  b.fixed_onehot = Tensor<float>({nb, num_structures, n, n, n});
  b.moving_onehot = Tensor<float>({nb, num_structures, n, n, n});

  auto put = [&](int64_t slot, const Tensor<float>& f, const Tensor<float>& m,
                 const Tensor<uint8_t>& fs, const Tensor<uint8_t>& ms) {
    std::memcpy(b.fixed.data() + slot * sp, f.data(), size_t(sp) * 4);
    std::memcpy(b.moving.data() + slot * sp, m.data(), size_t(sp) * 4);
    float* fo = b.fixed_onehot.data() + slot * num_structures * sp;
    float* mo = b.moving_onehot.data() + slot * num_structures * sp;
    for (int64_t v = 0; v < sp; ++v) {
      fo[int64_t(fs[v]) * sp + v] = 1.f;
      mo[int64_t(ms[v]) * sp + v] = 1.f;
    }
  };

  for (int64_t j = 0; j < batch_pairs; ++j) {
    const DataPair& pair = pairs[rng.uniform_index(pairs.size())];
    const int stratum = int((iteration * batch_pairs + j) % 3);
    const PatchSample ps = sample_patch_in_stratum(pair.fixed_seg, n, stratum, rng);
    Tensor<float> f = extract_patch(pair.fixed, ps.start, n);
    Tensor<float> m = extract_patch(pair.moving, ps.start, n);
    Tensor<uint8_t> fs = extract_patch(pair.fixed_seg, ps.start, n);
    Tensor<uint8_t> ms = extract_patch(pair.moving_seg, ps.start, n);
    put(j, f, m, fs, ms);
    put(batch_pairs + j, m, f, ms, fs);  // role swap
  }
  return b;
}

namespace {

LossWeights weights_of(const TrainConfig& cfg) {
  LossWeights w;
  w.w_dice = cfg.w_dice;
  w.w_ncc = cfg.w_ncc;
  w.w_bend = cfg.w_bend;
  w.resolution_weights = cfg.resolution_weights;
  return w;
}

void dump_batch(const Batch& b, const std::string& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  const Shape& s = b.fixed.shape();
  for (int64_t i = 0; i < s[0]; ++i) {
    Tensor<float> f = Tensor<float>::uninit({s[2], s[3], s[4]});
    std::memcpy(f.data(), b.fixed.data() + i * f.numel(), size_t(f.numel()) * 4);
    write_volume((fs::path(dir) / ("nan_batch_fixed_" + std::to_string(i) + ".mhd")).string(),
                 f, {1, 1, 1});
    std::memcpy(f.data(), b.moving.data() + i * f.numel(), size_t(f.numel()) * 4);
    write_volume((fs::path(dir) / ("nan_batch_moving_" + std::to_string(i) + ".mhd")).string(),
                 f, {1, 1, 1});
  }
}

}  // namespace

TrainResult train_from(const TrainConfig& cfg, const std::vector<DataPair>& dataset,
                       Network net, OptimizerState opt, int64_t start_iteration,
                       const std::string& out_checkpoint, const std::string& log_path,
                       const std::function<void(const IterationLog&)>& on_iteration) {
  cfg.validate();
  if (dataset.empty()) throw ContractError("train: dataset manifest lists no pairs");
  const LossWeights weights = weights_of(cfg);
  weights.validate();

  std::ofstream log;
  if (!log_path.empty()) {
    log.open(log_path, start_iteration > 0 ? std::ios::app : std::ios::out);
    if (!log) throw FormatError("cannot open training log " + log_path);
    if (start_iteration == 0)
      log << "iter\ttotal\tdice\tncc\tbend\tres_high\tres_mid\tres_low\n";
  }

  TrainResult result;
  result.net = std::move(net);
  result.opt = std::move(opt);

  for (int64_t it = start_iteration + 1; it <= cfg.iterations; ++it) {
    Batch batch = make_batch(dataset, cfg.n_patch, cfg.net.num_structures, cfg.batch_pairs, it,
                             cfg.seed);
    Graph<float> g;
    Network::NodeMap pnodes;
    ForwardInputs in;
    in.fixed = batch.fixed;
    in.moving = batch.moving;
    in.moving_seg_onehot = batch.moving_onehot;
    MultiResOutputs<float> out = result.net.forward(g, in, Mode::Train, &pnodes);

    TargetBundle<float> tb =
        make_multires_targets(batch.fixed, batch.fixed_onehot, batch.moving, batch.moving_onehot);
    MultiResTargets<float> tg;
    for (int r = 0; r < kNumResolutions; ++r) {
      tg.fixed[size_t(r)] = g.leaf(std::move(tb.fixed[size_t(r)]));
      tg.fixed_onehot[size_t(r)] = g.leaf(std::move(tb.fixed_onehot[size_t(r)]));
      tg.moving[size_t(r)] = g.leaf(std::move(tb.moving[size_t(r)]));
      tg.moving_onehot[size_t(r)] = g.leaf(std::move(tb.moving_onehot[size_t(r)]));
    }
    auto [loss, breakdown] = total_loss<float>(g, cfg.net.variant, out, tg, weights);
    if (!std::isfinite(breakdown.total)) {
      const std::string dir =
          log_path.empty() ? std::string("nan_dump") : log_path + ".nan_dump";
      dump_batch(batch, dir);
      throw NumericError("training loss is not finite at iteration " + std::to_string(it) +
                         "; offending batch dumped to " + dir);
    }
    g.backward(loss);

    std::map<std::string, Tensor<float>> grads;
    for (const auto& [name, node] : pnodes) grads.emplace(name, g.grad_or_zeros(node));
    radam_step(result.opt, result.net.params, grads, cfg.opt);

    IterationLog entry{it, breakdown};
    result.log.push_back(entry);
    if (log) {
      char line[256];
      std::snprintf(line, sizeof line, "%lld\t%.8f\t%.8f\t%.8f\t%.8f\t%.8f\t%.8f\t%.8f\n",
                    (long long)it, breakdown.total, breakdown.dice, breakdown.ncc,
                    breakdown.bend, breakdown.per_resolution[0], breakdown.per_resolution[1],
                    breakdown.per_resolution[2]);
      log << line;
    }
    if (on_iteration) on_iteration(entry);
    if (!out_checkpoint.empty() &&
        (it % cfg.checkpoint_interval == 0 || it == cfg.iterations)) {
      save_checkpoint(out_checkpoint, result.net, &result.opt);
    }
  }
  return result;
}

TrainResult train(const TrainConfig& cfg, const std::vector<DataPair>& dataset,
                  const std::string& out_checkpoint, const std::string& log_path,
                  const std::function<void(const IterationLog&)>& on_iteration) {
  Network net = Network::build(cfg.net, cfg.seed);
  return train_from(cfg, dataset, std::move(net), OptimizerState{}, 0, out_checkpoint, log_path,
                    on_iteration);
}

// ---------------------------------------------------------------------------
// inference and evaluation
// ---------------------------------------------------------------------------

InferenceResult infer_volume(Network& net, const DataPair& pair, int64_t max_window) {
  const Shape& vs = pair.fixed.shape();
  const int64_t vmax = std::max({vs[0], vs[1], vs[2]});
  // smallest window whose high-res output covers the volume, capped for memory
  int64_t n_eval = std::min<int64_t>(max_window, ((vmax + 40) + 3) / 4 * 4);
  n_eval = std::max<int64_t>(n_eval, 44);
  const int64_t m = n_eval - 40;

  std::array<int64_t, 3> count, pad_hi;
  for (int a = 0; a < 3; ++a) {
    count[size_t(a)] = (vs[size_t(a)] + m - 1) / m;
    pad_hi[size_t(a)] = count[size_t(a)] * m - vs[size_t(a)] + 20;
  }
  const std::array<int64_t, 3> pad_lo{20, 20, 20};

  Tensor<float> pf = kernels::pad_replicate3(pair.fixed, pad_lo, pad_hi);
  Tensor<float> pm = kernels::pad_replicate3(pair.moving, pad_lo, pad_hi);
  Tensor<uint8_t> pseg = kernels::pad_replicate3(pair.moving_seg, pad_lo, pad_hi);
  const Shape& ps = pf.shape();

  const bool want_seg = variant_has_seg_head(net.spec.variant);
  const bool want_dvf = variant_has_dvf_head(net.spec.variant);
  const int classes = net.spec.num_structures;

  InferenceResult res;
  if (want_seg) res.seg_labels = Tensor<uint8_t>(vs);
  if (want_dvf) res.dvf = Tensor<float>({3, vs[0], vs[1], vs[2]});

  for (int64_t wz = 0; wz < count[0]; ++wz) {
    for (int64_t wy = 0; wy < count[1]; ++wy) {
      for (int64_t wx = 0; wx < count[2]; ++wx) {
        const std::array<int64_t, 3> o{wz * m, wy * m, wx * m};
        auto window5 = [&](auto& padded, auto tag) {
          using T = decltype(tag);
          Tensor<T> w = Tensor<T>::uninit({n_eval, n_eval, n_eval});
          for (int64_t z = 0; z < n_eval; ++z)
            for (int64_t y = 0; y < n_eval; ++y)
              std::memcpy(w.data() + (z * n_eval + y) * n_eval,
                          padded.data() + ((o[0] + z) * ps[1] + (o[1] + y)) * ps[2] + o[2],
                          size_t(n_eval) * sizeof(T));
          return w;
        };
        ForwardInputs in;
        in.fixed = window5(pf, float{}).reshaped({1, 1, n_eval, n_eval, n_eval});
        in.moving = window5(pm, float{}).reshaped({1, 1, n_eval, n_eval, n_eval});
        if (variant_uses_moving_seg(net.spec.variant)) {
          Tensor<uint8_t> segw = window5(pseg, uint8_t{}).reshaped({1, n_eval, n_eval, n_eval});
          in.moving_seg_onehot = kernels::one_hot<float, uint8_t>(segw, classes);
        }
        Graph<float> g;
        MultiResOutputs<float> out = net.forward(g, in, Mode::Eval);
        // write the high-resolution window back, clipped to the volume
        const std::array<int64_t, 3> lim{std::min(m, vs[0] - o[0]), std::min(m, vs[1] - o[1]),
                                         std::min(m, vs[2] - o[2])};
        if (want_seg) {
          const Tensor<float>& logits = out.seg[0]->value;  // [1,C,m,m,m]
          const int64_t sp = m * m * m;
          for (int64_t z = 0; z < lim[0]; ++z)
            for (int64_t y = 0; y < lim[1]; ++y)
              for (int64_t x = 0; x < lim[2]; ++x) {
                const int64_t v = (z * m + y) * m + x;
                int best = 0;
                float bv = logits[v];
                for (int c = 1; c < classes; ++c) {
                  const float cv = logits[c * sp + v];
                  if (cv > bv) {
                    bv = cv;
                    best = c;
                  }
                }
                res.seg_labels[((o[0] + z) * vs[1] + (o[1] + y)) * vs[2] + (o[2] + x)] =
                    uint8_t(best);
              }
        }
        if (want_dvf) {
          const Tensor<float>& dvf = out.dvf[0]->value;  // [1,3,m,m,m]
          const int64_t sp = m * m * m;
          const int64_t vsp = vs[0] * vs[1] * vs[2];
          for (int c = 0; c < 3; ++c)
            for (int64_t z = 0; z < lim[0]; ++z)
              for (int64_t y = 0; y < lim[1]; ++y)
                for (int64_t x = 0; x < lim[2]; ++x)
                  res.dvf[c * vsp + ((o[0] + z) * vs[1] + (o[1] + y)) * vs[2] + (o[2] + x)] =
                      dvf[c * sp + (z * m + y) * m + x];
        }
      }
    }
  }
  return res;
}

void append_case_metrics(MetricsReport& report, const std::string& method,
                         const std::string& path, const std::vector<std::string>& structures,
                         const Tensor<uint8_t>& pred, const Tensor<uint8_t>& truth,
                         const std::array<double, 3>& spacing) {
  for (size_t si = 0; si < structures.size(); ++si) {
    const uint8_t label = uint8_t(si + 1);
    MetricsRow* row = nullptr;
    for (MetricsRow& r : report.rows)
      if (r.method == method && r.path == path && r.structure == structures[si]) row = &r;
    if (!row) {
      report.rows.push_back({method, path, structures[si], {}, {}, {}, 0});
      row = &report.rows.back();
      if (std::find(report.structures.begin(), report.structures.end(), structures[si]) ==
          report.structures.end())
        report.structures.push_back(structures[si]);
    }
    bool both_empty = false;
    row->dsc_values.push_back(dsc(pred, truth, label, &both_empty));
    try {
      row->msd_values.push_back(mean_surface_distance(pred, truth, label, spacing));
      row->hd95_values.push_back(hd95(pred, truth, label, spacing));
    } catch (const EmptyStructureError&) {
      row->failures += 1;
    }
  }
}

MetricsReport evaluate(Network& net, const std::vector<DataPair>& dataset,
                       const EvalOptions& opts) {
  MetricsReport report;
  report.structures = opts.structures;
  const std::string method = variant_name(net.spec.variant);
  const bool want_seg = variant_has_seg_head(net.spec.variant);
  const bool want_dvf = variant_has_dvf_head(net.spec.variant);

  for (const DataPair& pair : dataset) {
    InferenceResult inf = infer_volume(net, pair);
    if (want_seg) {
      append_case_metrics(report, method, "Segmentation", opts.structures, inf.seg_labels,
                          pair.fixed_seg, pair.spacing);
    }
    if (want_dvf) {
      const Shape& vs = pair.fixed.shape();
      Tensor<uint8_t> warped =
          warp_labels(pair.moving_seg.reshaped({1, vs[0], vs[1], vs[2]}),
                      inf.dvf.reshaped({1, 3, vs[0], vs[1], vs[2]}))
              .reshaped({vs[0], vs[1], vs[2]});
      append_case_metrics(report, method, "Registration", opts.structures, warped,
                          pair.fixed_seg, pair.spacing);
    }
  }

  if (opts.per_organ_selection && want_seg && want_dvf) {
    for (const std::string& s : report.structures) {
      const MetricsRow* seg = report.find("Segmentation", s);
      const MetricsRow* reg = report.find("Registration", s);
      if (!seg || !reg) continue;
      const bool seg_ok = seg->msd().cases > 0;
      const bool reg_ok = reg->msd().cases > 0;
      const MetricsRow* pick = seg;
      if (!seg_ok && reg_ok) {
        pick = reg;
      } else if (seg_ok && reg_ok) {
        pick = seg->msd().mean <= reg->msd().mean ? seg : reg;
      }
      MetricsRow sel = *pick;
      sel.path = "Selected";
      report.rows.push_back(std::move(sel));
    }
  }
  return report;
}

}  // namespace xs
