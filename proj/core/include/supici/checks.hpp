#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace supici::checks {

struct CheckResult {
  std::string name;
  bool passed = false;
  double worst_rel_err = 0.0;  // meaningful for gradient checks
  int cases = 0;
  std::string detail;
};

/// Central finite-difference checks (h = 1e-5) for every loss kernel, with
/// random instances kept away from the non-smooth loci. Passing means
/// relative error <= 1e-4 on every sampled coordinate.
std::vector<CheckResult> kernel_gradient_suite(std::uint64_t seed, int instances_per_kernel = 100);

/// Full-detector finite-difference checks (h = 1e-4, tolerance 1e-3) for the
/// contrastive, supervised, and student-total loss paths, sampling
/// coordinates from every parameter layer against a frozen loss plan.
std::vector<CheckResult> detector_gradient_suite(std::uint64_t seed, int coords_per_layer = 20);

/// Monotonicity and invariance checks: EMA convexity/fixed point,
/// pseudo-label delta-antitonicity, WE dead zone and factor monotonicity,
/// contrastive scale/permutation invariance, NMS brute-force agreement,
/// hit-criterion translation invariance, plus geometry round-trips.
std::vector<CheckResult> invariant_suite(std::uint64_t seed);

bool all_passed(const std::vector<CheckResult>& results);

}  // namespace supici::checks
