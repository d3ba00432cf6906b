#pragma once

#include <array>
#include <functional>
#include <vector>

#include "voxseg/tensor.hpp"

namespace voxseg {

/// Parameters of a 3D convolution. Stride is fixed at 1; downsampling is
/// done by pooling. Padding is per-axis; "same" behaviour for a 3x3x3
/// kernel needs padding == dilation.
struct ConvParams {
  Tensor weight;  // [out_ch, in_ch, kd, kh, kw]
  Tensor bias;    // [out_ch]
  std::array<std::int64_t, 3> padding{1, 1, 1};
  std::int64_t dilation = 1;
};

struct BatchNormState {
  Tensor gamma;         // [ch]
  Tensor beta;          // [ch]
  Tensor running_mean;  // [ch] buffer
  Tensor running_var;   // [ch] buffer
  float momentum = 0.1f;
  float eps = 1e-5f;
  bool training = true;
};

BatchNormState make_batchnorm(std::int64_t channels);

// ---------------------------------------------------------------------------
// Primitive forward ops. All take an optional tape; with tape == nullptr they
// are pure functions and the output never requires grad.
// ---------------------------------------------------------------------------

Tensor conv3d(const Tensor& input, const ConvParams& p, Tape* tape);

/// Context saved by conv3d for its backward pass.
struct Conv3dContext {
  Tensor input;
  Tensor weight;
  std::array<std::int64_t, 3> padding{};
  std::int64_t dilation = 1;
};

struct Conv3dGrads {
  Tensor input;
  Tensor weight;
  Tensor bias;
};

/// Standalone conv backward: gradients w.r.t. input, weight and bias given
/// the upstream gradient and the saved forward context.
Conv3dGrads conv3d_backward(const Tensor& grad_out, const Conv3dContext& ctx);

struct MaxPool3dResult {
  Tensor output;
  std::vector<std::int64_t> argmax;  // flat input index per output element
};

/// 2x2x2 max pooling with stride 2; requires even spatial dims. Ties break
/// toward the lowest linear index.
MaxPool3dResult maxpool3d(const Tensor& input, Tape* tape);
Tensor maxpool3d_backward(const Tensor& grad_out, const std::vector<std::int64_t>& argmax,
                          const Shape& input_shape);

/// Nearest-neighbor upsampling by an integer factor per spatial axis.
Tensor upsample3d(const Tensor& input, std::int64_t factor, Tape* tape);
/// Adjoint of upsample3d: sums gradients over each replication block.
Tensor upsample3d_backward(const Tensor& grad_out, std::int64_t factor, const Shape& input_shape);

Tensor batchnorm3d(const Tensor& input, BatchNormState& state, Tape* tape);

Tensor leaky_relu(const Tensor& input, float slope, Tape* tape);

Tensor concat_channels(const std::vector<Tensor>& inputs, Tape* tape);
std::vector<Tensor> concat_channels_backward(const Tensor& grad_out,
                                             const std::vector<std::int64_t>& channel_extents);

Tensor add(const Tensor& a, const Tensor& b, Tape* tape);

/// Elementwise product (shapes must match).
Tensor mul(const Tensor& a, const Tensor& b, Tape* tape);

/// Per-voxel softmax over the channel axis, computed with max subtraction.
Tensor softmax_channels(const Tensor& logits, Tape* tape);

/// Scalar sum of all elements (double accumulation).
Tensor sum_all(const Tensor& x, Tape* tape);

// ---------------------------------------------------------------------------
// Gradient checking
// ---------------------------------------------------------------------------

/// Finite-difference check of an op (or composite) under a sum reduction.
/// `fn` maps the inputs to the op output on the given tape; the analytic
/// gradients of sum(output) w.r.t. every input element are compared against
/// central differences. Returns the max relative error
/// |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
double gradcheck(const std::function<Tensor(Tape&, std::vector<Tensor>&)>& fn,
                 std::vector<Tensor> inputs, double h = 1e-3);

}  // namespace voxseg
