#pragma once

#include <array>
#include <cstdint>
#include <utility>
#include <vector>

#include "voxseg/rng.hpp"
#include "voxseg/volume.hpp"

namespace voxseg {

/// Whole-volume z-score: (x - mean) / max(std, 1e-8). A constant volume
/// maps to all zeros via the floor.
Volume zscore_normalize(const Volume& v);

/// Deterministic test/9-fold split: shuffle by seed, take ceil(10%) as the
/// test set, deal the remainder round-robin into nine folds.
struct SplitPlan {
  std::vector<std::string> test_ids;
  std::array<std::vector<std::string>, 9> folds;
  std::uint64_t seed = 0;
};

SplitPlan make_split(const std::vector<std::string>& ids, std::uint64_t seed);

/// Region bookkeeping for pad_or_crop so predictions can be written back
/// onto the original voxel grid.
struct Placement {
  Shape original;                        // input dims [D,H,W]
  std::array<std::int64_t, 3> src_lo{};  // region copied out of the input
  std::array<std::int64_t, 3> len{};
  std::array<std::int64_t, 3> dst_lo{};  // where that region sits in the output
};

/// Center the volume inside `target` dims (zero-fill), or center-crop when
/// the input is larger. Target dims must be multiples of 16 (the network
/// downsamples four times).
std::pair<Tensor, Placement> pad_or_crop(const Tensor& vol, const Shape& target,
                                         float fill = 0.0f);

/// Undo pad_or_crop: place the processed volume's voxels back onto the
/// original grid. Voxels that were cropped away come back as `fill`.
Tensor invert_pad_or_crop(const Tensor& processed, const Placement& p, float fill = 0.0f);

/// Sampled augmentation: per-axis rotation angles (degrees) and flips.
struct AugmentParams {
  std::array<double, 3> angles_deg{0.0, 0.0, 0.0};
  std::array<bool, 3> flips{false, false, false};
};

/// Draw order is pinned (three angles, then three flips) so streams are
/// reproducible.
AugmentParams sample_augment(Rng& rng, double max_angle_deg = 10.0, double flip_prob = 0.5);

/// Apply a fixed augmentation: rotation about the volume center (trilinear
/// for the image, nearest for labels, background fill), then axis flips
/// applied identically to both. Shapes are unchanged.
std::pair<Volume, LabelMap> augment_with(const Volume& v, const LabelMap& l,
                                         const AugmentParams& p);

std::pair<Volume, LabelMap> augment(const Volume& v, const LabelMap& l, Rng& rng,
                                    double max_angle_deg = 10.0, double flip_prob = 0.5);

/// One-hot encode labels to [1, num_classes, D, H, W].
Tensor onehot(const LabelMap& l, std::int64_t num_classes = 3);

}  // namespace voxseg
