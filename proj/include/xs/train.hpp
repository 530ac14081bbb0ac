#ifndef XS_TRAIN_HPP
#define XS_TRAIN_HPP

#include <functional>
#include <string>
#include <vector>

#include "xs/io.hpp"
#include "xs/losses.hpp"
#include "xs/metrics.hpp"
#include "xs/network.hpp"
#include "xs/optimizer.hpp"

namespace xs {

// One training batch: batch_pairs patch pairs plus their role-swapped copies
// (fixed <-> moving), giving an effective batch of 2 * batch_pairs.
struct Batch {
  Tensor<float> fixed, moving;               // [N,1,n,n,n]
  Tensor<float> fixed_onehot, moving_onehot; // [N,C,n,n,n]
};

Batch make_batch(const std::vector<DataPair>& pairs, int64_t n_patch, int num_structures,
                 int64_t batch_pairs, int64_t iteration, uint64_t seed);

struct IterationLog {
  int64_t iteration = 0;
  LossBreakdown loss;
};

struct TrainResult {
  Network net;
  OptimizerState opt;
  std::vector<IterationLog> log;
};

// Runs the full optimization loop; checkpoints at checkpoint_interval and at
// the end when out_checkpoint is set. log_path gets one delimited line per
// iteration. A non-finite loss aborts with a diagnostic batch dump.
TrainResult train(const TrainConfig& cfg, const std::vector<DataPair>& dataset,
                  const std::string& out_checkpoint = "", const std::string& log_path = "",
                  const std::function<void(const IterationLog&)>& on_iteration = nullptr);

// Resume support: continues a run loaded from checkpoint up to cfg.iterations.
TrainResult train_from(const TrainConfig& cfg, const std::vector<DataPair>& dataset,
                       Network net, OptimizerState opt, int64_t start_iteration,
                       const std::string& out_checkpoint = "", const std::string& log_path = "",
                       const std::function<void(const IterationLog&)>& on_iteration = nullptr);

// Full-volume inference by tiling valid windows (stride = output size); the
// volume is edge-replication padded where windows do not tile exactly.
struct InferenceResult {
  Tensor<uint8_t> seg_labels;  // [D,H,W]; empty when the variant has no seg head
  Tensor<float> dvf;           // [3,D,H,W]; empty when no registration head
};

InferenceResult infer_volume(Network& net, const DataPair& pair, int64_t max_window = 136);

struct EvalOptions {
  std::vector<std::string> structures;  // names for labels 1..C-1
  bool per_organ_selection = true;      // add per-organ best-path rows
};

MetricsReport evaluate(Network& net, const std::vector<DataPair>& dataset,
                       const EvalOptions& opts);

// Metric rows for a single predicted labels volume against the truth
// (shared by evaluate() and the standalone metrics CLI).
void append_case_metrics(MetricsReport& report, const std::string& method,
                         const std::string& path, const std::vector<std::string>& structures,
                         const Tensor<uint8_t>& pred, const Tensor<uint8_t>& truth,
                         const std::array<double, 3>& spacing);

}  // namespace xs

#endif  // XS_TRAIN_HPP
