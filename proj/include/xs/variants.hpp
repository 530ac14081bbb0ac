#ifndef XS_VARIANTS_HPP
#define XS_VARIANTS_HPP

#include <array>
#include <string>

#include "xs/common.hpp"
#include "xs/graph.hpp"

namespace xs {

enum class Variant {
  Segmentation,
  Registration,
  JRSRegistration,
  FullyHardSharing,
  CrossStitch,
};

inline const char* variant_name(Variant v) {
  switch (v) {
    case Variant::Segmentation: return "segmentation";
    case Variant::Registration: return "registration";
    case Variant::JRSRegistration: return "jrs_registration";
    case Variant::FullyHardSharing: return "fully_hard_sharing";
    case Variant::CrossStitch: return "cross_stitch";
  }
  return "?";
}

inline Variant parse_variant(const std::string& s) {
  if (s == "segmentation") return Variant::Segmentation;
  if (s == "registration") return Variant::Registration;
  if (s == "jrs_registration") return Variant::JRSRegistration;
  if (s == "fully_hard_sharing") return Variant::FullyHardSharing;
  if (s == "cross_stitch") return Variant::CrossStitch;
  throw ConfigError("unknown variant '" + s + "'");
}

inline bool variant_has_seg_head(Variant v) {
  return v == Variant::Segmentation || v == Variant::FullyHardSharing ||
         v == Variant::CrossStitch;
}

inline bool variant_has_dvf_head(Variant v) { return v != Variant::Segmentation; }

inline bool variant_uses_moving_seg(Variant v) {
  return v == Variant::JRSRegistration || v == Variant::FullyHardSharing ||
         v == Variant::CrossStitch;
}

// Resolution index convention used throughout: 0 = high, 1 = mid, 2 = low.
inline constexpr int kNumResolutions = 3;

inline int64_t output_size_high(int64_t n) { return n - 40; }
inline int64_t output_size_mid(int64_t n) { return n / 2 - 18; }
inline int64_t output_size_low(int64_t n) { return n / 4 - 7; }

inline int64_t output_size(int64_t n, int res) {
  switch (res) {
    case 0: return output_size_high(n);
    case 1: return output_size_mid(n);
    default: return output_size_low(n);
  }
}

// Spatial scale of each resolution relative to the input patch.
inline int64_t resolution_scale(int res) { return res == 0 ? 1 : (res == 1 ? 2 : 4); }

template <typename T>
struct MultiResOutputs {
  std::array<typename Graph<T>::Node*, 3> seg{nullptr, nullptr, nullptr};
  std::array<typename Graph<T>::Node*, 3> dvf{nullptr, nullptr, nullptr};
};

}  // namespace xs

#endif  // XS_VARIANTS_HPP
