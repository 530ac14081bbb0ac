#ifndef XS_GRADCHECK_HPP
#define XS_GRADCHECK_HPP

#include <cstdio>
#include <functional>
#include <string>
#include <vector>

#include "xs/graph.hpp"

namespace xs {

struct GradCheckResult {
  std::string name;
  double max_rel_err = 0;
  bool pass = false;
};

// Builds a scalar loss from leaf nodes created over the given input tensors
// (all marked trainable) and compares analytic gradients against central
// finite differences at 64-bit precision.
using GradBuilder =
    std::function<Graph<double>::Node*(Graph<double>&, std::vector<Graph<double>::Node*>&)>;

GradCheckResult gradcheck(const std::string& name, std::vector<Tensor<double>> inputs,
                          const GradBuilder& builder, double tol = 1e-4, double h = 1e-4);

// The full finite-difference suite over every differentiable operation.
std::vector<GradCheckResult> run_gradient_suite(uint64_t seed = 7, double tol = 1e-4,
                                                std::FILE* out = nullptr);

bool gradient_suite_passes(uint64_t seed = 7, double tol = 1e-4, std::FILE* out = nullptr);

}  // namespace xs

#endif  // XS_GRADCHECK_HPP
