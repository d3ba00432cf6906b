#include "voxseg/blocks.hpp"

#include <cmath>

#include "voxseg/errors.hpp"

namespace voxseg {

namespace {

constexpr std::int64_t kKernel = 3;

// Fan-in-scaled uniform init with the leaky-ReLU gain.
void init_weight(Tensor& w, std::int64_t fan_in, float leaky_slope, Rng& rng) {
  const double gain = std::sqrt(2.0 / (1.0 + static_cast<double>(leaky_slope) * leaky_slope));
  const double bound = gain * std::sqrt(3.0 / static_cast<double>(fan_in));
  for (float& v : w.data()) v = static_cast<float>(rng.uniform(-bound, bound));
}

ConvParams make_conv3(std::int64_t in_ch, std::int64_t out_ch, std::int64_t dilation, Rng& rng,
                      float leaky_slope) {
  ConvParams p;
  p.weight = Tensor(Shape{out_ch, in_ch, kKernel, kKernel, kKernel});
  init_weight(p.weight, in_ch * kKernel * kKernel * kKernel, leaky_slope, rng);
  p.bias = Tensor::zeros(Shape{out_ch});
  p.padding = {dilation, dilation, dilation};  // "same" for a 3x3x3 kernel
  p.dilation = dilation;
  return p;
}

ConvParams make_conv1(std::int64_t in_ch, std::int64_t out_ch, Rng& rng, float leaky_slope) {
  ConvParams p;
  p.weight = Tensor(Shape{out_ch, in_ch, 1, 1, 1});
  init_weight(p.weight, in_ch, leaky_slope, rng);
  p.bias = Tensor::zeros(Shape{out_ch});
  p.padding = {0, 0, 0};
  p.dilation = 1;
  return p;
}

Tensor conv_bn_leaky(ConvBnUnit& u, const Tensor& x, float slope, Tape* tape) {
  return leaky_relu(batchnorm3d(conv3d(x, u.conv, tape), u.bn, tape), slope, tape);
}

void add_unit_params(std::vector<NamedTensor>& out, const std::string& prefix,
                     const ConvBnUnit& u) {
  out.push_back({prefix + ".conv.weight", u.conv.weight});
  out.push_back({prefix + ".conv.bias", u.conv.bias});
  out.push_back({prefix + ".bn.gamma", u.bn.gamma});
  out.push_back({prefix + ".bn.beta", u.bn.beta});
}

void add_unit_buffers(std::vector<NamedTensor>& out, const std::string& prefix,
                      const ConvBnUnit& u) {
  out.push_back({prefix + ".bn.running_mean", u.bn.running_mean});
  out.push_back({prefix + ".bn.running_var", u.bn.running_var});
}

// Apply fn(prefix, unit) over every ConvBnUnit in deterministic order, and
// conv_fn(prefix, conv) over the standalone convs (projections, head).
template <typename UnitFn, typename ConvFn>
void visit_model(const Model& m, UnitFn unit_fn, ConvFn conv_fn) {
  for (std::size_t l = 0; l < m.encoders.size(); ++l) {
    const std::string p = "enc" + std::to_string(l);
    unit_fn(p + ".c1", m.encoders[l].c1);
    unit_fn(p + ".c2", m.encoders[l].c2);
    if (m.encoders[l].has_proj) conv_fn(p + ".proj", m.encoders[l].proj);
  }
  for (std::size_t i = 0; i < m.bottleneck.layers.size(); ++i) {
    unit_fn("bottleneck." + std::to_string(i), m.bottleneck.layers[i]);
  }
  for (std::size_t l = m.decoders.size(); l-- > 0;) {
    const std::string p = "dec" + std::to_string(l);
    unit_fn(p + ".c1", m.decoders[l].c1);
    unit_fn(p + ".c2", m.decoders[l].c2);
  }
  conv_fn("head", m.head);
}

}  // namespace

void validate_config(const ModelConfig& config) {
  if (config.levels != 4) {
    throw ConfigError("model levels must be 4, got " + std::to_string(config.levels));
  }
  if (config.base_channels < 1 || config.in_channels < 1 || config.num_classes < 2) {
    throw ConfigError("base_channels/in_channels must be positive and num_classes >= 2");
  }
  if (config.dilation_rates[0] != 1) {
    throw ConfigError("first bottleneck dilation rate must be 1");
  }
  for (int i = 0; i + 1 < 4; ++i) {
    if (config.dilation_rates[static_cast<std::size_t>(i + 1)] !=
        2 * config.dilation_rates[static_cast<std::size_t>(i)]) {
      throw ConfigError("bottleneck dilation rates must double: 1,2,4,8");
    }
  }
  if (!(config.leaky_slope > 0.0f) || config.leaky_slope >= 1.0f) {
    throw ConfigError("leaky_slope must lie in (0, 1)");
  }
  if (config.variant != "unet3d" && config.variant != "unet3d_dilated" &&
      config.variant != "proposed") {
    throw ConfigError("unknown variant '" + config.variant +
                      "' (expected unet3d, unet3d_dilated or proposed)");
  }
}

ConvBnUnit make_conv_bn(std::int64_t in_ch, std::int64_t out_ch, std::int64_t dilation, Rng& rng,
                        float leaky_slope) {
  ConvBnUnit u;
  u.conv = make_conv3(in_ch, out_ch, dilation, rng, leaky_slope);
  u.bn = make_batchnorm(out_ch);
  return u;
}

EncoderBlock make_encoder_block(std::int64_t in_ch, std::int64_t out_ch, bool residual, Rng& rng,
                                float leaky_slope) {
  EncoderBlock blk;
  blk.c1 = make_conv_bn(in_ch, out_ch, 1, rng, leaky_slope);
  blk.c2 = make_conv_bn(out_ch, out_ch, 1, rng, leaky_slope);
  blk.residual = residual;
  if (residual && in_ch != out_ch) {
    blk.has_proj = true;
    blk.proj = make_conv1(in_ch, out_ch, rng, leaky_slope);
  }
  return blk;
}

Bottleneck make_bottleneck(std::int64_t in_ch, std::int64_t width,
                           const std::vector<std::int64_t>& dilations, Rng& rng,
                           float leaky_slope) {
  Bottleneck bn;
  std::int64_t ch = in_ch;
  for (std::int64_t d : dilations) {
    bn.layers.push_back(make_conv_bn(ch, width, d, rng, leaky_slope));
    ch = width;
  }
  return bn;
}

DecoderBlock make_decoder_block(std::int64_t x_ch, std::int64_t skip_ch, Rng& rng,
                                float leaky_slope) {
  DecoderBlock blk;
  blk.c1 = make_conv_bn(x_ch + skip_ch, skip_ch, 1, rng, leaky_slope);
  blk.c2 = make_conv_bn(skip_ch, skip_ch, 1, rng, leaky_slope);
  return blk;
}

Model build_model(const ModelConfig& config, std::uint64_t seed) {
  validate_config(config);
  Rng rng(derive_stream(seed, {hash_string("init")}));

  Model m;
  m.config = config;
  const std::int64_t base = config.base_channels;
  const bool residual = config.variant == "proposed";

  std::int64_t in_ch = config.in_channels;
  for (int l = 0; l < 4; ++l) {
    const std::int64_t out_ch = base << l;
    m.encoders.push_back(make_encoder_block(in_ch, out_ch, residual, rng, config.leaky_slope));
    in_ch = out_ch;
  }

  // Bottleneck doubles the deepest encoder width (base*8 -> base*16); the
  // plain variant stacks two undilated layers, the others follow the rates.
  const std::vector<std::int64_t> dilations =
      config.variant == "unet3d"
          ? std::vector<std::int64_t>{1, 1}
          : std::vector<std::int64_t>(config.dilation_rates.begin(), config.dilation_rates.end());
  m.bottleneck = make_bottleneck(base << 3, base << 4, dilations, rng, config.leaky_slope);

  m.decoders.resize(4);
  for (int l = 3; l >= 0; --l) {
    // x arrives from the level below (bottleneck for l=3), skip from level l
    m.decoders[static_cast<std::size_t>(l)] =
        make_decoder_block(base << (l + 1), base << l, rng, config.leaky_slope);
  }

  const std::int64_t head_in = config.variant == "proposed" ? base * 15 : base;
  m.head = make_conv1(head_in, config.num_classes, rng, config.leaky_slope);
  return m;
}

std::pair<Tensor, Tensor> encoder_forward(EncoderBlock& blk, const Tensor& x, float leaky_slope,
                                          Tape* tape) {
  Tensor h = conv_bn_leaky(blk.c1, x, leaky_slope, tape);
  h = conv_bn_leaky(blk.c2, h, leaky_slope, tape);
  Tensor skip = h;
  if (blk.residual) {
    const Tensor shortcut = blk.has_proj ? conv3d(x, blk.proj, tape) : x;
    skip = add(h, shortcut, tape);
  }
  MaxPool3dResult pooled = maxpool3d(skip, tape);
  return {skip, pooled.output};
}

Tensor bottleneck_forward(Bottleneck& bn, const Tensor& x, float leaky_slope, Tape* tape) {
  Tensor h = x;
  for (ConvBnUnit& layer : bn.layers) h = conv_bn_leaky(layer, h, leaky_slope, tape);
  return h;
}

Tensor decoder_forward(DecoderBlock& blk, const Tensor& x, const Tensor& skip, float leaky_slope,
                       Tape* tape) {
  Tensor up = upsample3d(x, 2, tape);
  if (up.dim(0) != skip.dim(0) || up.dim(2) != skip.dim(2) || up.dim(3) != skip.dim(3) ||
      up.dim(4) != skip.dim(4)) {
    throw DimensionError("decoder: upsampled input " + shape_str(up.shape()) +
                         " does not match skip " + shape_str(skip.shape()));
  }
  Tensor h = concat_channels({up, skip}, tape);
  h = conv_bn_leaky(blk.c1, h, leaky_slope, tape);
  return conv_bn_leaky(blk.c2, h, leaky_slope, tape);
}

Tensor deep_supervision_forward(const ConvParams& head, const std::vector<Tensor>& decoder_outputs,
                                Tape* tape) {
  if (decoder_outputs.empty()) throw DimensionError("deep supervision head needs decoder outputs");
  const Tensor& ref = decoder_outputs.back();  // full resolution
  std::vector<Tensor> ups;
  ups.reserve(decoder_outputs.size());
  for (const Tensor& o : decoder_outputs) {
    if (o.dim(0) != ref.dim(0)) {
      throw DimensionError("deep supervision head: inconsistent batch dims");
    }
    const std::int64_t factor = ref.dim(2) / o.dim(2);
    if (factor < 1 || o.dim(2) * factor != ref.dim(2) || o.dim(3) * factor != ref.dim(3) ||
        o.dim(4) * factor != ref.dim(4)) {
      throw DimensionError("deep supervision head: decoder output " + shape_str(o.shape()) +
                           " is not an integer downscale of " + shape_str(ref.shape()));
    }
    ups.push_back(factor == 1 ? o : upsample3d(o, factor, tape));
  }
  return conv3d(concat_channels(ups, tape), head, tape);
}

ForwardTrace forward_trace(Model& m, const Tensor& batch, Tape* tape) {
  if (!batch.defined() || batch.rank() != 5) {
    throw DimensionError("forward expects [N, C, D, H, W] input");
  }
  if (batch.dim(1) != m.config.in_channels) {
    throw DimensionError("forward: input has " + std::to_string(batch.dim(1)) +
                         " channels, model expects " + std::to_string(m.config.in_channels));
  }
  for (int a = 2; a < 5; ++a) {
    if (batch.dim(a) % 16 != 0) {
      throw DimensionError("forward: spatial dims must be divisible by 16, got " +
                           shape_str(batch.shape()) + " (run pad_or_crop first)");
    }
  }

  const float slope = m.config.leaky_slope;
  std::vector<Tensor> skips;
  Tensor x = batch;
  for (EncoderBlock& enc : m.encoders) {
    auto [skip, pooled] = encoder_forward(enc, x, slope, tape);
    skips.push_back(skip);
    x = pooled;
  }
  x = bottleneck_forward(m.bottleneck, x, slope, tape);

  ForwardTrace trace;
  for (std::size_t l = m.decoders.size(); l-- > 0;) {
    x = decoder_forward(m.decoders[l], x, skips[l], slope, tape);
    trace.decoder_outputs.push_back(x);  // deepest first
  }

  if (m.config.variant == "proposed") {
    trace.logits = deep_supervision_forward(m.head, trace.decoder_outputs, tape);
  } else {
    trace.logits = conv3d(trace.decoder_outputs.back(), m.head, tape);
  }
  return trace;
}

Tensor forward(Model& m, const Tensor& batch, Tape* tape) {
  return forward_trace(m, batch, tape).logits;
}

std::vector<NamedTensor> named_parameters(const Model& m) {
  std::vector<NamedTensor> out;
  visit_model(
      m, [&](const std::string& p, const ConvBnUnit& u) { add_unit_params(out, p, u); },
      [&](const std::string& p, const ConvParams& c) {
        out.push_back({p + ".weight", c.weight});
        out.push_back({p + ".bias", c.bias});
      });
  return out;
}

std::vector<NamedTensor> named_buffers(const Model& m) {
  std::vector<NamedTensor> out;
  visit_model(
      m, [&](const std::string& p, const ConvBnUnit& u) { add_unit_buffers(out, p, u); },
      [](const std::string&, const ConvParams&) {});
  return out;
}

std::size_t parameter_count(const Model& m) {
  std::size_t n = 0;
  for (const NamedTensor& p : named_parameters(m)) {
    n += static_cast<std::size_t>(p.tensor.numel());
  }
  return n;
}

void set_training(Model& m, bool training) {
  for (EncoderBlock& e : m.encoders) {
    e.c1.bn.training = training;
    e.c2.bn.training = training;
  }
  for (ConvBnUnit& u : m.bottleneck.layers) u.bn.training = training;
  for (DecoderBlock& d : m.decoders) {
    d.c1.bn.training = training;
    d.c2.bn.training = training;
  }
}

void set_parameter_grads(Model& m, bool requires_grad) {
  for (NamedTensor& p : named_parameters(m)) p.tensor.set_requires_grad(requires_grad);
}

}  // namespace voxseg
