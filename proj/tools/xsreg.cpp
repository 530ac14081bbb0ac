// xsreg: synthetic-phantom experiment driver for the joint
// registration/segmentation networks. Subcommands: synth, train, eval, warp,
// metrics, gradcheck. Exit codes: 0 success, 1 configuration/format/contract
// error, 2 numerical failure.

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>

#include <CLI11.hpp>

#include "xs/gradcheck.hpp"
#include "xs/io.hpp"
#include "xs/train.hpp"
#include "xs/warp.hpp"

namespace fs = std::filesystem;
using namespace xs;

namespace {

struct CommonOpts {
  std::string config_path;
  int threads = 0;
};

RunConfig load_config_or_default(const std::string& path) {
  if (path.empty()) return RunConfig{};
  return load_run_config(path);
}

std::string manifest_in(const std::string& data) {
  fs::path p(data);
  if (fs::is_directory(p)) p /= "manifest.json";
  return p.string();
}

int run_synth(const std::string& config, const std::string& out_dir, int64_t n_pairs,
              uint64_t seed, int64_t size_override) {
  RunConfig rc = load_config_or_default(config);
  PhantomSpec spec = rc.phantom;
  if (size_override > 0) spec.size = size_override;
  spec.validate();
  Manifest manifest;
  manifest.spacing = spec.spacing;
  for (const char* n : PhantomSpec::kOrganNames) manifest.structures.push_back(n);
  fs::create_directories(out_dir);
  for (int64_t i = 0; i < n_pairs; ++i) {
    char id[32];
    std::snprintf(id, sizeof id, "pair_%03lld", (long long)i);
    PhantomPair pair = make_pair(spec, seed + uint64_t(i));
    ManifestEntry entry;
    write_pair(out_dir, id, pair, spec.spacing, &entry);
    manifest.pairs.push_back(entry);
    std::printf("wrote %s (seed %llu)\n", id, (unsigned long long)(seed + uint64_t(i)));
  }
  write_manifest((fs::path(out_dir) / "manifest.json").string(), manifest);
  std::printf("manifest: %s\n", (fs::path(out_dir) / "manifest.json").string().c_str());
  return 0;
}

int run_train(const std::string& config, const std::string& data, const std::string& out_ckpt,
              const std::string& log_path, const std::string& variant_override,
              int64_t iterations_override, int64_t seed_override, int64_t n_patch_override,
              const std::vector<int>& filters_override) {
  RunConfig rc = load_config_or_default(config);
  TrainConfig cfg = rc.train;
  if (!variant_override.empty()) cfg.net.variant = parse_variant(variant_override);
  if (iterations_override > 0) cfg.iterations = iterations_override;
  if (seed_override >= 0) cfg.seed = uint64_t(seed_override);
  if (n_patch_override > 0) {
    cfg.n_patch = n_patch_override;
    cfg.net.input_patch = int(n_patch_override);
  }
  if (!filters_override.empty()) {
    if (filters_override.size() != 5) throw ConfigError("--filters needs 5 values");
    std::copy(filters_override.begin(), filters_override.end(), cfg.net.filters.begin());
  }
  std::vector<DataPair> dataset = load_dataset(manifest_in(data));
  const std::string log = log_path.empty() ? out_ckpt + ".log" : log_path;
  std::printf("training %s for %lld iterations on %zu pairs (n_patch %lld, seed %llu)\n",
              variant_name(cfg.net.variant), (long long)cfg.iterations, dataset.size(),
              (long long)cfg.n_patch, (unsigned long long)cfg.seed);
  TrainResult res = train(cfg, dataset, out_ckpt, log, [&](const IterationLog& e) {
    if (e.iteration % 100 == 0 || e.iteration == 1) {
      std::printf("  iter %6lld  total %.5f  dice %.5f  ncc %.5f  bend %.5f\n",
                  (long long)e.iteration, e.loss.total, e.loss.dice, e.loss.ncc, e.loss.bend);
      std::fflush(stdout);
    }
  });
  std::printf("checkpoint: %s\nlog: %s\n", out_ckpt.c_str(), log.c_str());
  return 0;
}

int run_eval(const std::string& ckpt, const std::string& data, const std::string& report_path) {
  Network net = load_checkpoint(ckpt);
  std::vector<std::string> structures;
  std::vector<DataPair> dataset = load_dataset(manifest_in(data), &structures);
  EvalOptions opts;
  opts.structures = structures;
  MetricsReport report = evaluate(net, dataset, opts);
  const std::string table = format_report_table(report);
  std::fputs(table.c_str(), stdout);
  if (!report_path.empty()) {
    std::ofstream os(report_path);
    os << table;
    std::ofstream csv(report_path + ".csv");
    csv << format_report_delimited(report);
    std::printf("report: %s (+ .csv)\n", report_path.c_str());
  }
  return 0;
}

int run_warp(const std::string& moving, const std::string& dvf_path, const std::string& out,
             bool labels) {
  std::array<double, 3> spacing;
  Tensor<float> dvf = read_volume_float(dvf_path, nullptr);
  if (dvf.rank() != 4 || dvf.extent(0) != 3)
    throw FormatError("warp: displacement volume must have 3 channels");
  const Shape vs{dvf.extent(1), dvf.extent(2), dvf.extent(3)};
  Tensor<float> dvf5 = dvf.reshaped({1, 3, vs[0], vs[1], vs[2]});
  if (labels) {
    Tensor<uint8_t> mov = read_volume_labels(moving, &spacing);
    check_same_shape(mov, Tensor<uint8_t>(vs), "warp: moving vs dvf");
    Tensor<uint8_t> warped =
        warp_labels(mov.reshaped({1, vs[0], vs[1], vs[2]}), dvf5).reshaped(vs);
    write_volume(out, warped, spacing);
  } else {
    Tensor<float> mov = read_volume_float(moving, &spacing);
    check_same_shape(mov, Tensor<float>(vs), "warp: moving vs dvf");
    Tensor<float> warped =
        warp_trilinear(mov.reshaped({1, 1, vs[0], vs[1], vs[2]}), dvf5).reshaped(vs);
    write_volume(out, warped, spacing);
  }
  std::printf("wrote %s\n", out.c_str());
  return 0;
}

int run_metrics(const std::string& pred_path, const std::string& truth_path,
                const std::string& report_path) {
  std::array<double, 3> spacing;
  Tensor<uint8_t> pred = read_volume_labels(pred_path, &spacing);
  Tensor<uint8_t> truth = read_volume_labels(truth_path, nullptr);
  check_same_shape(pred, truth, "metrics: pred vs truth");
  uint8_t max_label = 0;
  for (int64_t i = 0; i < truth.numel(); ++i) max_label = std::max(max_label, truth[i]);
  for (int64_t i = 0; i < pred.numel(); ++i) max_label = std::max(max_label, pred[i]);
  std::vector<std::string> structures;
  for (int l = 1; l <= int(max_label); ++l) structures.push_back("label_" + std::to_string(l));
  MetricsReport report;
  report.structures = structures;
  append_case_metrics(report, "volumes", "Pred", structures, pred, truth, spacing);
  const std::string table = format_report_table(report);
  std::fputs(table.c_str(), stdout);
  if (!report_path.empty()) {
    std::ofstream os(report_path);
    os << table;
    std::ofstream csv(report_path + ".csv");
    csv << format_report_delimited(report);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"cross-stitch joint registration/segmentation experiments"};
  app.require_subcommand(1);
  int threads = 0;
  app.add_option("--threads", threads, "worker threads (0 = hardware), 1 = deterministic single-thread");

  std::string config, out_dir, data, ckpt, report, log_path;
  std::string moving, dvf_path, out_path, pred_path, truth_path, variant;
  int64_t pairs = 12, size_override = 0, iterations = 0;
  int64_t seed = 1, seed_override = -1, n_patch_cli = 0;
  std::vector<int> filters_cli;
  bool labels = false;

  CLI::App* synth = app.add_subcommand("synth", "generate a synthetic phantom dataset");
  synth->add_option("--config", config, "JSON run configuration");
  synth->add_option("--out", out_dir, "output directory")->required();
  synth->add_option("--pairs", pairs, "number of fixed/moving pairs");
  synth->add_option("--seed", seed, "base seed");
  synth->add_option("--size", size_override, "override phantom volume size");

  CLI::App* train_cmd = app.add_subcommand("train", "train a network variant");
  train_cmd->add_option("--config", config, "JSON run configuration");
  train_cmd->add_option("--data", data, "dataset directory or manifest path")->required();
  train_cmd->add_option("--out", ckpt, "output checkpoint path")->required();
  train_cmd->add_option("--log", log_path, "training log path (default <ckpt>.log)");
  train_cmd->add_option("--variant", variant,
                        "segmentation|registration|jrs_registration|fully_hard_sharing|cross_stitch");
  train_cmd->add_option("--iterations", iterations, "override iteration count");
  train_cmd->add_option("--seed", seed_override, "override seed");
  train_cmd->add_option("--n-patch", n_patch_cli, "override training patch size");
  train_cmd->add_option("--filters", filters_cli, "override the 5 per-level filter counts");

  CLI::App* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint");
  eval_cmd->add_option("--ckpt", ckpt, "checkpoint path")->required();
  eval_cmd->add_option("--data", data, "dataset directory or manifest path")->required();
  eval_cmd->add_option("--report", report, "report output path (text + .csv)");

  CLI::App* warp_cmd = app.add_subcommand("warp", "apply a displacement field to a volume");
  warp_cmd->add_option("--moving", moving, "moving volume (.mhd)")->required();
  warp_cmd->add_option("--dvf", dvf_path, "3-channel displacement volume (.mhd)")->required();
  warp_cmd->add_option("--out", out_path, "output volume path")->required();
  warp_cmd->add_flag("--labels", labels, "nearest-neighbor label warp");

  CLI::App* metrics_cmd = app.add_subcommand("metrics", "compare two label volumes");
  metrics_cmd->add_option("--pred", pred_path, "predicted labels (.mhd)")->required();
  metrics_cmd->add_option("--truth", truth_path, "ground-truth labels (.mhd)")->required();
  metrics_cmd->add_option("--report", report, "report output path");

  CLI::App* gc = app.add_subcommand("gradcheck", "run the finite-difference gradient suite");
  uint64_t gc_seed = 7;
  gc->add_option("--seed", gc_seed, "suite seed");

  CLI11_PARSE(app, argc, argv);
  if (threads > 0) setenv("XS_THREADS", std::to_string(threads).c_str(), 1);

  try {
    if (synth->parsed()) return run_synth(config, out_dir, pairs, uint64_t(seed), size_override);
    if (train_cmd->parsed())
      return run_train(config, data, ckpt, log_path, variant, iterations, seed_override,
                       n_patch_cli, filters_cli);
    if (eval_cmd->parsed()) return run_eval(ckpt, data, report);
    if (warp_cmd->parsed()) return run_warp(moving, dvf_path, out_path, labels);
    if (metrics_cmd->parsed()) return run_metrics(pred_path, truth_path, report);
    if (gc->parsed()) {
      std::printf("gradient suite (seed %llu):\n", (unsigned long long)gc_seed);
      const bool ok = gradient_suite_passes(gc_seed, 1e-4, stdout);
      std::printf("%s\n", ok ? "all gradients ok" : "GRADIENT CHECKS FAILED");
      return ok ? 0 : 2;
    }
  } catch (const NumericError& e) {
    std::fprintf(stderr, "numerical failure: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
