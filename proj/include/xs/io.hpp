#ifndef XS_IO_HPP
#define XS_IO_HPP

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "xs/network.hpp"
#include "xs/optimizer.hpp"
#include "xs/phantom.hpp"

namespace xs {

// ---------------------------------------------------------------------------
// MetaImage (.mhd text header + .raw buffer), little-endian, x fastest.
// Intensities are 32-bit float, labels 8-bit unsigned; displacement fields
// are stored as 3-channel float volumes (channel-interleaved per voxel).
// ---------------------------------------------------------------------------
struct VolumeMeta {
  Shape dims;                              // (D,H,W), i.e. (z,y,x)
  std::array<double, 3> spacing{1, 1, 1};  // mm, (z,y,x)
  int channels = 1;
  enum class Type { Float32, UInt8 } type = Type::Float32;
};

void write_volume(const std::string& path, const Tensor<float>& vol,
                  const std::array<double, 3>& spacing);  // [D,H,W] or [C,D,H,W]
void write_volume(const std::string& path, const Tensor<uint8_t>& vol,
                  const std::array<double, 3>& spacing);  // [D,H,W]

VolumeMeta read_volume_meta(const std::string& path);
Tensor<float> read_volume_float(const std::string& path, std::array<double, 3>* spacing);
Tensor<uint8_t> read_volume_labels(const std::string& path, std::array<double, 3>* spacing);

// ---------------------------------------------------------------------------
// Checkpoint container: magic "XSJR", version, network spec, named float
// blobs (parameters + BN running stats), optional optimizer state.
// Bit-exact round-trip.
// ---------------------------------------------------------------------------
void save_checkpoint(const std::string& path, const Network& net,
                     const OptimizerState* opt = nullptr);
Network load_checkpoint(const std::string& path, OptimizerState* opt = nullptr);

// ---------------------------------------------------------------------------
// Dataset manifest (JSON): pair ids, seeds, file names, spacing, structures.
// ---------------------------------------------------------------------------
struct ManifestEntry {
  std::string id;
  uint64_t seed = 0;
  std::string fixed, moving, fixed_seg, moving_seg;
  std::string dvf;  // optional ground-truth field, empty if absent
};

struct Manifest {
  std::array<double, 3> spacing{1, 1, 1};
  std::vector<std::string> structures;
  std::vector<ManifestEntry> pairs;
};

void write_manifest(const std::string& path, const Manifest& m);
Manifest read_manifest(const std::string& path);

struct DataPair {
  std::string id;
  Tensor<float> fixed, moving;            // [D,H,W]
  Tensor<uint8_t> fixed_seg, moving_seg;  // [D,H,W]
  std::array<double, 3> spacing{1, 1, 1};
};

// Loads every pair listed in a manifest (paths relative to its directory).
std::vector<DataPair> load_dataset(const std::string& manifest_path,
                                   std::vector<std::string>* structures = nullptr);

void write_pair(const std::string& dir, const std::string& id, const PhantomPair& pair,
                const std::array<double, 3>& spacing, ManifestEntry* entry);

// ---------------------------------------------------------------------------
// Run configuration (JSON document, strict keys). Defaults documented in the
// README; unknown keys are rejected.
// ---------------------------------------------------------------------------
struct TrainConfig {
  NetworkSpec net;
  int64_t n_patch = 96;
  int64_t iterations = 2000;
  int64_t batch_pairs = 2;  // before role swapping
  RAdamConfig opt;
  double w_dice = 1.0, w_ncc = 1.0, w_bend = 0.5;
  std::array<double, 3> resolution_weights{1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0};
  uint64_t seed = 1;
  int64_t checkpoint_interval = 500;

  void validate() const;
};

struct RunConfig {
  TrainConfig train;
  PhantomSpec phantom;
};

RunConfig parse_run_config(const std::string& json_text);
RunConfig load_run_config(const std::string& path);

}  // namespace xs

#endif  // XS_IO_HPP
