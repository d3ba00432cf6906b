#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "voxseg/ops.hpp"
#include "voxseg/rng.hpp"
#include "voxseg/tensor.hpp"

namespace voxseg {

// ---------------------------------------------------------------------------
// Architecture configuration. Three variants share the same encoder/decoder
// skeleton:
//   unet3d         plain encoder, two-layer bottleneck, logits from the last
//                  decoder block through a 1x1x1 conv
//   unet3d_dilated same, but the bottleneck stacks four layers with
//                  dilation rates 1,2,4,8
//   proposed       adds residual connections in every encoder block and a
//                  decoder-ensemble head: all four decoder outputs are
//                  upsampled to full resolution, concatenated, and mapped to
//                  logits by one 1x1x1 conv
// ---------------------------------------------------------------------------

struct ModelConfig {
  std::int64_t levels = 4;  // encoder/decoder depth; the shape algebra assumes 4
  std::int64_t base_channels = 16;
  std::int64_t in_channels = 1;
  std::int64_t num_classes = 3;
  std::array<std::int64_t, 4> dilation_rates{1, 2, 4, 8};
  float leaky_slope = 0.01f;
  std::string variant = "proposed";
};

/// Throws ConfigError when the config violates the architecture contract
/// (levels != 4, non-positive channels, non-doubling dilation rates,
/// unknown variant).
void validate_config(const ModelConfig& config);

/// One conv -> batchnorm -> leaky-ReLU unit.
struct ConvBnUnit {
  ConvParams conv;
  BatchNormState bn;
};

struct EncoderBlock {
  ConvBnUnit c1, c2;
  bool residual = false;
  bool has_proj = false;  // 1x1x1 projection on the residual path
  ConvParams proj;
};

struct Bottleneck {
  std::vector<ConvBnUnit> layers;
};

struct DecoderBlock {
  ConvBnUnit c1, c2;
};

struct Model {
  ModelConfig config;
  std::vector<EncoderBlock> encoders;  // index = level, 0 at full resolution
  Bottleneck bottleneck;
  std::vector<DecoderBlock> decoders;  // index = level, 0 at full resolution
  ConvParams head;                     // 1x1x1 conv producing the logits
};

// ---------------------------------------------------------------------------
// Block builders. Weights use fan-in-scaled uniform init with the leaky-ReLU
// gain; biases start at zero, batchnorm at gamma=1 / beta=0.
// ---------------------------------------------------------------------------

ConvBnUnit make_conv_bn(std::int64_t in_ch, std::int64_t out_ch, std::int64_t dilation, Rng& rng,
                        float leaky_slope);

EncoderBlock make_encoder_block(std::int64_t in_ch, std::int64_t out_ch, bool residual, Rng& rng,
                                float leaky_slope);

/// Sequential conv-BN-leaky stack: the first layer maps in_ch -> width, the
/// rest keep width. One layer per dilation rate.
Bottleneck make_bottleneck(std::int64_t in_ch, std::int64_t width,
                           const std::vector<std::int64_t>& dilations, Rng& rng,
                           float leaky_slope);

DecoderBlock make_decoder_block(std::int64_t x_ch, std::int64_t skip_ch, Rng& rng,
                                float leaky_slope);

/// Assemble a full model. Identical (config, seed) pairs produce bit-identical
/// initial parameters.
Model build_model(const ModelConfig& config, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Block forwards. All record onto the tape when one is given.
// ---------------------------------------------------------------------------

/// Returns (skip, pooled): skip at the input resolution, pooled at half.
std::pair<Tensor, Tensor> encoder_forward(EncoderBlock& blk, const Tensor& x, float leaky_slope,
                                          Tape* tape);

Tensor bottleneck_forward(Bottleneck& bn, const Tensor& x, float leaky_slope, Tape* tape);

/// upsample2(x) ++ skip -> conv-BN-leaky x2; output channels = skip channels.
Tensor decoder_forward(DecoderBlock& blk, const Tensor& x, const Tensor& skip, float leaky_slope,
                       Tape* tape);

/// Decoder-ensemble head: outputs ordered deepest first are upsampled to the
/// resolution of the last entry, concatenated on channels, and reduced to
/// logits by the 1x1x1 head conv.
Tensor deep_supervision_forward(const ConvParams& head, const std::vector<Tensor>& decoder_outputs,
                                Tape* tape);

/// Full forward pass. Requires [N, in_channels, D, H, W] input with spatial
/// dims divisible by 16 (use pad_or_crop first).
Tensor forward(Model& m, const Tensor& batch, Tape* tape);

/// Forward that also exposes the per-level decoder outputs (deepest first),
/// for tests and diagnostics.
struct ForwardTrace {
  std::vector<Tensor> decoder_outputs;
  Tensor logits;
};
ForwardTrace forward_trace(Model& m, const Tensor& batch, Tape* tape);

// ---------------------------------------------------------------------------
// Parameter registry: stable names, deterministic order. Returned handles
// alias the model's storage.
// ---------------------------------------------------------------------------

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

/// Trainable tensors: conv weights/biases, batchnorm gamma/beta, projections,
/// the head.
std::vector<NamedTensor> named_parameters(const Model& m);

/// Non-trainable state carried in checkpoints: batchnorm running stats.
std::vector<NamedTensor> named_buffers(const Model& m);

std::size_t parameter_count(const Model& m);

/// Toggle train/eval mode on every batchnorm in the model.
void set_training(Model& m, bool training);

/// Mark every trainable parameter as requiring gradients (or not).
void set_parameter_grads(Model& m, bool requires_grad);

}  // namespace voxseg
