#pragma once

// Self-diagnostic suites: finite-difference gradient checks for every
// differentiable op and composite block, plus oracle equivalence for the
// optimized conv3d and NSD kernels. Shared by the `gradcheck` CLI
// subcommand and the acceptance harness.

#include <cstdint>
#include <string>
#include <vector>

namespace voxseg::checks {

struct CheckResult {
  std::string name;
  int instances = 0;
  double worst = 0.0;      // max relative error (gradients), max |diff| (conv),
                           // or mismatch count (nsd)
  double tolerance = 0.0;  // pass iff worst < tolerance (nsd: worst == 0)
  bool pass = false;
};

/// Finite-difference checks over every differentiable op and every composite
/// block, `instances` random instances each. Blocks with internal batchnorm
/// run in eval mode on positive-path fixtures (train-mode batchnorm centers
/// preactivations on the leaky-ReLU kink, where finite differences are
/// meaningless); train-mode batchnorm has its own dedicated entry.
std::vector<CheckResult> gradient_suite(std::uint64_t seed, int instances, double tolerance);

/// Optimized conv3d vs the naive reference on `configs` random
/// configurations cycling through dilations 1, 2, 4 and 8.
CheckResult conv_oracle(std::uint64_t seed, int configs, double tolerance);

/// metrics::nsd vs the all-pairs brute-force oracle on `pairs` random label
/// volumes (<= 16^3). The two must agree bitwise; `worst` counts mismatches.
CheckResult nsd_oracle(std::uint64_t seed, int pairs);

}  // namespace voxseg::checks
