#ifndef XS_PHANTOM_HPP
#define XS_PHANTOM_HPP

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "xs/tensor.hpp"

namespace xs {

struct GenerationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Synthetic pelvic phantom: four organ analogues on a noisy background.
//   1 bladder   - large ellipsoid, high contrast, variable volume
//   2 prostate  - medium ellipsoid, medium contrast
//   3 vesicles  - small twin lobes, low contrast
//   4 rectum    - curved tube
struct PhantomSpec {
  int64_t size = 96;
  std::array<double, 3> spacing{1.0, 1.0, 1.0};
  double background_mean = 0.25;
  std::array<double, 4> organ_means{0.85, 0.55, 0.28, 0.65};
  double noise_sigma = 0.01;
  // smooth random deformation, displacements in voxels
  double deform_magnitude_lo = 2.0;
  double deform_magnitude_hi = 5.0;
  double deform_smoothness = 6.0;
  double bladder_extra = 2.5;  // additional radial push at the bladder
  // per-organ directional shifts (Gaussian bumps at the organ centroids);
  // upper bounds in voxels, drawn per pair
  std::array<double, 4> organ_shift{3.0, 2.5, 2.0, 2.0};
  // fixed = warp(moving) by default; independent phantoms behind this flag
  bool independent_pair = false;

  static constexpr int kNumLabels = 5;  // background + 4 organs
  static const std::array<const char*, 4> kOrganNames;

  void validate() const;
};

struct Phantom {
  Tensor<float> volume;      // [D,H,W], intensities in [0,1]
  Tensor<uint8_t> labels;    // [D,H,W]
};

struct PhantomPair {
  Tensor<float> fixed, moving;            // [D,H,W]
  Tensor<uint8_t> fixed_seg, moving_seg;  // [D,H,W]
  Tensor<float> dvf_star;                 // [3,D,H,W], fixed -> moving sampling
  uint64_t seed = 0;
};

// Deterministic given (spec, seed); every structure has >= 50 voxels.
Phantom generate_phantom(const PhantomSpec& spec, uint64_t seed);

// White noise smoothed by a Gaussian of the given std (voxels), rescaled so
// the max displacement magnitude equals `magnitude`; regenerated until the
// deformation Jacobian determinant stays positive.
Tensor<float> generate_deformation(int64_t size, double magnitude, double smoothness,
                                   uint64_t seed);

double min_jacobian_determinant(const Tensor<float>& dvf);

PhantomPair make_pair(const PhantomSpec& spec, uint64_t seed);

// Class-balanced patch sampling: centers drawn round-robin from the targets
// (prostate+vesicles), the OARs (bladder+rectum) and the remainder.
struct PatchSample {
  std::array<int64_t, 3> start;  // patch origin, clamped inside the volume
  int stratum;                   // 0 targets, 1 OARs, 2 remainder
};

std::vector<PatchSample> sample_patches(const PhantomPair& pair, int64_t n_patch, int64_t count,
                                        uint64_t seed);
PatchSample sample_patch_in_stratum(const Tensor<uint8_t>& seg, int64_t n_patch, int stratum,
                                    Rng& rng);

}  // namespace xs

#endif  // XS_PHANTOM_HPP
