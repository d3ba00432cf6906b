#pragma once

// Slow, obviously-correct reference implementations. These exist purely to
// cross-check the optimized kernels in ops.cpp / metrics.cpp and are used by
// the test suite and the `gradcheck` CLI subcommand. Nothing in the training
// path calls into this header.

#include <array>
#include <cstdint>
#include <functional>
#include <vector>

#include "voxseg/tensor.hpp"

namespace voxseg::oracle {

// Direct 7-loop convolution: for every output voxel, walk the kernel and
// accumulate in double precision. Stride is fixed at 1, "same"-style padding
// and dilation match conv3d().
Tensor naive_conv3d(const Tensor& input, const Tensor& weight, const Tensor& bias,
                    const std::array<std::int64_t, 3>& padding, std::int64_t dilation);

// Central finite differences of a scalar function with respect to every
// element of x. Returns one derivative per element of x (row-major order).
// x is restored to its original contents before returning.
std::vector<double> fd_grad(const std::function<double(const Tensor&)>& fn, Tensor x,
                            double h = 1e-3);

// All-pairs normalized surface distance for one class label. `pred` and `ref`
// are rank-3 [D,H,W] label volumes; a voxel belongs to the class surface when
// it carries the class label and at least one of its six face neighbours does
// not (volume borders count as background). Distances are Euclidean in
// millimetres using `spacing` (per-axis, D/H/W order). Both surfaces empty
// -> 1.0; exactly one empty -> 0.0.
double brute_nsd(const Tensor& pred, const Tensor& ref, int cls,
                 const std::array<double, 3>& spacing, double tau_mm);

}  // namespace voxseg::oracle
