#ifndef XS_METRICS_HPP
#define XS_METRICS_HPP

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "xs/tensor.hpp"

namespace xs {

struct EmptyStructureError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Integer label volume with physical voxel spacing in mm, axis order (z,y,x).
struct LabelVolume {
  Tensor<uint8_t> labels;  // [D,H,W]
  std::array<double, 3> spacing{1.0, 1.0, 1.0};
  std::vector<std::string> structure_names;  // names of labels 1..N

  int num_structures() const { return int(structure_names.size()); }
};

using Coord = std::array<int64_t, 3>;

// Dice overlap 2|P∩T| / (|P|+|T|); both masks empty counts as 1 and sets
// *both_empty when provided.
double dsc(const Tensor<uint8_t>& pred, const Tensor<uint8_t>& truth, uint8_t label,
           bool* both_empty = nullptr);

// Boundary voxels of the mask: any of the 6 face neighbors outside the mask
// (the volume border counts as outside). Throws EmptyStructureError.
std::vector<Coord> extract_surface(const Tensor<uint8_t>& labels, uint8_t label);

// Directed surface distances from every voxel of `from` to the nearest voxel
// of `to`, Euclidean in mm. Exact; brute force or a separable distance
// transform (both agree to floating-point exactness).
std::vector<double> surface_distances_brute(const std::vector<Coord>& from,
                                            const std::vector<Coord>& to,
                                            const std::array<double, 3>& spacing);
std::vector<double> surface_distances_edt(const std::vector<Coord>& from,
                                          const std::vector<Coord>& to,
                                          const std::array<double, 3>& spacing,
                                          const Shape& dims);

// Symmetric mean surface distance in mm. Throws EmptyStructureError if either
// structure is empty.
double mean_surface_distance(const Tensor<uint8_t>& pred, const Tensor<uint8_t>& truth,
                             uint8_t label, const std::array<double, 3>& spacing);

// 95th percentile of the pooled (both directions) surface-distance samples,
// linear interpolation between order statistics.
double hd95(const Tensor<uint8_t>& pred, const Tensor<uint8_t>& truth, uint8_t label,
            const std::array<double, 3>& spacing);

double percentile_linear(std::vector<double> values, double q);

// ---------------------------------------------------------------------------
// reporting
// ---------------------------------------------------------------------------
struct Aggregate {
  double mean = 0;
  double stddev = 0;  // population
  double median = 0;
  int cases = 0;
};

Aggregate aggregate_values(const std::vector<double>& values);

struct MetricsRow {
  std::string method;     // variant name
  std::string path;       // "Segmentation", "Registration" or "Selected"
  std::string structure;  // organ analogue name
  std::vector<double> dsc_values;
  std::vector<double> msd_values;   // mm; failures excluded
  std::vector<double> hd95_values;  // mm; failures excluded
  int failures = 0;                 // cases with an empty structure

  Aggregate dsc() const { return aggregate_values(dsc_values); }
  Aggregate msd() const { return aggregate_values(msd_values); }
  Aggregate hd95() const { return aggregate_values(hd95_values); }
};

struct MetricsReport {
  std::vector<std::string> structures;
  std::vector<MetricsRow> rows;

  const MetricsRow* find(const std::string& path, const std::string& structure) const;
};

// Plain-text tables in the mu +/- sigma / median layout, one block per
// metric, plus failure counts. Parsable back via parse_report_table.
std::string format_report_table(const MetricsReport& report);

// Machine-readable delimited form (one line per case value); exact
// round-trip through parse_report_delimited.
std::string format_report_delimited(const MetricsReport& report);
MetricsReport parse_report_delimited(const std::string& text);

// Parses the aggregate table back; returns rows whose aggregates match the
// printed precision (med/mean/std only, per-case values are not in the table).
struct ParsedTableEntry {
  std::string path, structure, metric;
  double mean, stddev, median;
  int failures;
};
std::vector<ParsedTableEntry> parse_report_table(const std::string& text);

}  // namespace xs

#endif  // XS_METRICS_HPP
