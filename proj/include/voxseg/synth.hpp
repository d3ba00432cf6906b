#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "voxseg/volume.hpp"

namespace voxseg::synth {

// Two-component phantom: an ellipsoidal "head" (label 1) and a smaller
// "body" (label 2) offset along one axis so the components never touch.
struct SynthSpec {
  Shape dims{32, 32, 32};
  std::array<double, 3> spacing{1.0, 1.0, 1.0};
  double noise_std = 0.05;
  std::uint64_t seed = 0;
  std::string id;
};

// Deterministic per seed; labels are exact ellipsoid membership while the
// image holds distinct class means (0.2 / 0.7 / 1.0) plus Gaussian noise.
std::pair<Volume, LabelMap> gen_case(const SynthSpec& spec);

// Convenience wrapper: n cases with independent per-case streams derived
// from base_seed, ids "synth-0", "synth-1", ...
std::vector<std::pair<Volume, LabelMap>> make_dataset(std::size_t n, std::uint64_t base_seed,
                                                      SynthSpec proto = {});

}  // namespace voxseg::synth
