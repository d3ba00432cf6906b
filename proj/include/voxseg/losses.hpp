#pragma once

#include "voxseg/tensor.hpp"

namespace voxseg {

/// Combined training loss, kept as three scalar tensors so each part stays
/// differentiable. total is formed by adding the two part scalars, so
/// total == dice_part + bce_part holds exactly.
struct LossValue {
  Tensor total;
  Tensor dice_part;
  Tensor bce_part;
};

/// Soft Dice loss with squared-denominator formulation:
///   1 - mean over batch and foreground channels (c >= 1) of
///       (2*sum(p*q) + eps) / (sum(p^2) + sum(q^2) + eps),   eps = 1e-5.
/// Background (channel 0) is excluded from the mean. Differentiable w.r.t.
/// probs; onehot is treated as constant.
Tensor soft_dice_loss(const Tensor& probs, const Tensor& onehot, Tape* tape);

/// Per-channel binary cross entropy, averaged over every voxel and channel:
///   mean of -[q*ln(p~) + (1-q)*ln(1-p~)],  p~ = clamp(p, 1e-7, 1-1e-7).
/// Gradient is zero where the clamp is active.
Tensor bce_loss(const Tensor& probs, const Tensor& onehot, Tape* tape);

/// Dice + BCE.
LossValue combined_loss(const Tensor& probs, const Tensor& onehot, Tape* tape);

}  // namespace voxseg
