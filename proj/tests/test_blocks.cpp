#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "doctest.h"
#include "voxseg/blocks.hpp"
#include "voxseg/errors.hpp"
#include "voxseg/ops.hpp"

using namespace voxseg;

namespace {

Tensor fixed_weights(const Shape& shape, std::uint64_t salt) {
  Rng rng(derive_stream(0xabcdef, {salt}));
  Tensor w(shape);
  for (float& v : w.data()) v = static_cast<float>(rng.uniform(0.5, 1.5));
  return w;
}

Tensor random_tensor(const Shape& shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(shape);
  for (float& v : t.data()) v = static_cast<float>(rng.uniform(lo, hi));
  return t;
}

ModelConfig test_config(const std::string& variant, std::int64_t base = 8) {
  ModelConfig c;
  c.base_channels = base;
  c.variant = variant;
  return c;
}

// How far a centered single-voxel perturbation travels along the D axis
// through a linearized (slope 1, eval-mode BN) all-ones conv stack.
std::int64_t perturbation_reach(Bottleneck& bn, std::int64_t extent) {
  for (ConvBnUnit& u : bn.layers) {
    for (float& v : u.conv.weight.data()) v = 1.0f;
    u.bn.training = false;  // (x-0)/sqrt(1+eps): identity up to a scale
  }
  Tensor zero = Tensor::zeros({1, 1, extent, 1, 1});
  Tensor spike = Tensor::zeros({1, 1, extent, 1, 1});
  const std::int64_t center = extent / 2;
  spike.data()[static_cast<std::size_t>(center)] = 1.0f;

  const Tensor base = bottleneck_forward(bn, zero, 1.0f, nullptr);
  const Tensor out = bottleneck_forward(bn, spike, 1.0f, nullptr);
  std::int64_t reach = 0;
  for (std::int64_t d = 0; d < extent; ++d) {
    if (std::abs(out.data()[static_cast<std::size_t>(d)] -
                 base.data()[static_cast<std::size_t>(d)]) > 1e-6f) {
      reach = std::max(reach, std::abs(d - center));
    }
  }
  return reach;
}

}  // namespace

// ============================================================================
// Config validation
// ============================================================================

TEST_CASE("validate_config rejects malformed configurations") {
  CHECK_NOTHROW(validate_config(test_config("unet3d")));
  CHECK_NOTHROW(validate_config(test_config("unet3d_dilated")));
  CHECK_NOTHROW(validate_config(test_config("proposed")));

  ModelConfig bad = test_config("resnet50");
  CHECK_THROWS_AS(validate_config(bad), ConfigError);

  bad = test_config("proposed");
  bad.levels = 3;
  CHECK_THROWS_AS(validate_config(bad), ConfigError);

  bad = test_config("proposed");
  bad.dilation_rates = {1, 2, 4, 6};
  CHECK_THROWS_AS(validate_config(bad), ConfigError);

  bad = test_config("proposed");
  bad.dilation_rates = {2, 4, 8, 16};
  CHECK_THROWS_AS(validate_config(bad), ConfigError);

  bad = test_config("proposed");
  bad.base_channels = 0;
  CHECK_THROWS_AS(validate_config(bad), ConfigError);
}

// ============================================================================
// Encoder block
// ============================================================================

TEST_CASE("encoder block shape algebra: 1x1x16^3 base 8 -> skip 1x8x16^3, pooled 1x8x8^3") {
  Rng rng(1);
  EncoderBlock blk = make_encoder_block(1, 8, true, rng, 0.01f);
  Tensor x = random_tensor({1, 1, 16, 16, 16}, rng);
  auto [skip, pooled] = encoder_forward(blk, x, 0.01f, nullptr);
  CHECK(skip.shape() == Shape{1, 8, 16, 16, 16});
  CHECK(pooled.shape() == Shape{1, 8, 8, 8, 8});
}

TEST_CASE("encoder block with zero conv weights reduces to the projection path") {
  Rng rng(2);
  EncoderBlock blk = make_encoder_block(2, 4, true, rng, 0.01f);
  REQUIRE(blk.has_proj);
  for (float& v : blk.c1.conv.weight.data()) v = 0.0f;
  for (float& v : blk.c2.conv.weight.data()) v = 0.0f;

  Tensor x = random_tensor({1, 2, 4, 4, 4}, rng);
  auto [skip, pooled] = encoder_forward(blk, x, 0.01f, nullptr);
  const Tensor projected = conv3d(x, blk.proj, nullptr);
  for (std::size_t i = 0; i < projected.data().size(); ++i) {
    CHECK(skip.data()[i] == projected.data()[i]);
  }
}

TEST_CASE("encoder block without residual has no projection parameters") {
  Rng rng(3);
  EncoderBlock blk = make_encoder_block(1, 8, false, rng, 0.01f);
  CHECK_FALSE(blk.residual);
  CHECK_FALSE(blk.has_proj);
}

TEST_CASE("encoder block pooling rejects odd spatial dims") {
  Rng rng(4);
  EncoderBlock blk = make_encoder_block(1, 4, false, rng, 0.01f);
  Tensor x = random_tensor({1, 1, 5, 4, 4}, rng);
  CHECK_THROWS_AS((void)encoder_forward(blk, x, 0.01f, nullptr), DimensionError);
}

// Block-level gradchecks run the batchnorms in eval mode with a fixture that
// keeps every leaky preactivation strictly positive: train-mode BN centers
// preactivations on the ReLU kink, where a finite-difference step crosses the
// slope change and the estimate goes wrong by construction, not by a bug.
// Train-mode BN gradients have their own dedicated check in test_tensor.
namespace {

void positive_eval_fixture(ConvBnUnit& u, Rng& rng) {
  for (float& v : u.conv.weight.data()) v = static_cast<float>(rng.uniform(0.05, 0.3));
  u.bn.training = false;
  for (float& v : u.bn.gamma.data()) v = static_cast<float>(rng.uniform(0.5, 1.5));
  for (float& v : u.bn.beta.data()) v = static_cast<float>(rng.uniform(0.1, 0.3));
  for (float& v : u.bn.running_mean.data()) v = static_cast<float>(rng.uniform(-0.3, -0.1));
  for (float& v : u.bn.running_var.data()) v = static_cast<float>(rng.uniform(0.5, 2.0));
}

float min_preactivation(const Tensor& x, ConvBnUnit& u) {
  const Tensor pre = batchnorm3d(conv3d(x, u.conv, nullptr), u.bn, nullptr);
  float m = std::numeric_limits<float>::max();
  for (float v : pre.data()) m = std::min(m, v);
  return m;
}

}  // namespace

TEST_CASE("gradcheck through a full residual encoder block") {
  Rng rng(derive_stream(0xb10c, {7}));
  EncoderBlock blk = make_encoder_block(1, 2, true, rng, 0.01f);
  positive_eval_fixture(blk.c1, rng);
  positive_eval_fixture(blk.c2, rng);
  for (float& v : blk.proj.weight.data()) v = static_cast<float>(rng.uniform(0.05, 0.3));
  Tensor x = random_tensor({1, 1, 4, 4, 4}, rng, 0.25, 1.25);
  const Tensor wts = fixed_weights({1, 2, 4, 4, 4}, 41);

  // the kink-free guarantee the fixture is built for
  const float m1 = min_preactivation(x, blk.c1);
  REQUIRE(m1 > 0.05f);
  const Tensor h1 = leaky_relu(batchnorm3d(conv3d(x, blk.c1.conv, nullptr), blk.c1.bn, nullptr),
                               0.01f, nullptr);
  REQUIRE(min_preactivation(h1, blk.c2) > 0.05f);

  const auto fn = [&](Tape& tape, std::vector<Tensor>& inputs) {
    blk.c1.conv.weight = inputs[1];
    blk.c2.conv.weight = inputs[2];
    blk.proj.weight = inputs[3];
    blk.c1.bn.gamma = inputs[4];
    auto [skip, pooled] = encoder_forward(blk, inputs[0], 0.01f, &tape);
    return mul(skip, wts, &tape);  // two-level weighting avoids cancellation
  };
  const double err = gradcheck(
      fn, {x, blk.c1.conv.weight, blk.c2.conv.weight, blk.proj.weight, blk.c1.bn.gamma}, 5e-3);
  CHECK(err < 1e-2);
}

// ============================================================================
// Bottleneck
// ============================================================================

TEST_CASE("dilated bottleneck preserves spatial dims even when smaller than the kernel span") {
  Rng rng(5);
  Bottleneck bn = make_bottleneck(3, 3, {1, 2, 4, 8}, rng, 0.01f);
  Tensor x = random_tensor({1, 3, 2, 4, 2}, rng);
  const Tensor y = bottleneck_forward(bn, x, 0.01f, nullptr);
  CHECK(y.shape() == Shape{1, 3, 2, 4, 2});
}

TEST_CASE("bottleneck of zero input stays zero") {
  Rng rng(6);
  Bottleneck bn = make_bottleneck(2, 4, {1, 2, 4, 8}, rng, 0.01f);
  Tensor x = Tensor::zeros({1, 2, 4, 4, 4});
  const Tensor y = bottleneck_forward(bn, x, 0.01f, nullptr);
  for (float v : y.data()) CHECK(v == 0.0f);
}

TEST_CASE("single-voxel perturbation reaches +-15 through the dilated stack, +-2 plain") {
  Rng rng(7);
  Bottleneck dilated = make_bottleneck(1, 1, {1, 2, 4, 8}, rng, 0.01f);
  Bottleneck plain = make_bottleneck(1, 1, {1, 1}, rng, 0.01f);

  const std::int64_t dilated_reach = perturbation_reach(dilated, 37);
  const std::int64_t plain_reach = perturbation_reach(plain, 37);
  CHECK(dilated_reach == 15);  // sum of dilations 1+2+4+8 per side -> 30 across
  CHECK(plain_reach == 2);
  // receptive-field diameter difference between the two bottlenecks
  CHECK(2 * dilated_reach - 2 * plain_reach == 26);
}

// ============================================================================
// Decoder block
// ============================================================================

TEST_CASE("decoder block shape algebra: x 1x32x4^3 + skip 1x16x8^3 -> 1x16x8^3") {
  Rng rng(8);
  DecoderBlock blk = make_decoder_block(32, 16, rng, 0.01f);
  Tensor x = random_tensor({1, 32, 4, 4, 4}, rng);
  Tensor skip = random_tensor({1, 16, 8, 8, 8}, rng);
  const Tensor y = decoder_forward(blk, x, skip, 0.01f, nullptr);
  CHECK(y.shape() == Shape{1, 16, 8, 8, 8});
}

TEST_CASE("decoder block rejects skips that do not match the upsampled input") {
  Rng rng(9);
  DecoderBlock blk = make_decoder_block(4, 2, rng, 0.01f);
  Tensor x = random_tensor({1, 4, 4, 4, 4}, rng);
  Tensor skip = random_tensor({1, 2, 8, 8, 6}, rng);
  CHECK_THROWS_AS((void)decoder_forward(blk, x, skip, 0.01f, nullptr), DimensionError);
}

TEST_CASE("gradcheck through a decoder block") {
  Rng rng(derive_stream(0xdec0, {3}));
  DecoderBlock blk = make_decoder_block(2, 1, rng, 0.01f);
  positive_eval_fixture(blk.c1, rng);
  positive_eval_fixture(blk.c2, rng);
  Tensor x = random_tensor({1, 2, 2, 2, 2}, rng, 0.25, 1.25);
  Tensor skip = random_tensor({1, 1, 4, 4, 4}, rng, 0.25, 1.25);
  const Tensor wts = fixed_weights({1, 1, 4, 4, 4}, 42);

  {
    const Tensor cat = concat_channels({upsample3d(x, 2, nullptr), skip}, nullptr);
    const float m1 = min_preactivation(cat, blk.c1);
    REQUIRE(m1 > 0.05f);
    const Tensor h1 = leaky_relu(
        batchnorm3d(conv3d(cat, blk.c1.conv, nullptr), blk.c1.bn, nullptr), 0.01f, nullptr);
    REQUIRE(min_preactivation(h1, blk.c2) > 0.05f);
  }

  const auto fn = [&](Tape& tape, std::vector<Tensor>& inputs) {
    blk.c1.conv.weight = inputs[2];
    blk.c2.conv.weight = inputs[3];
    const Tensor y = decoder_forward(blk, inputs[0], inputs[1], 0.01f, &tape);
    return mul(y, wts, &tape);
  };
  const double err =
      gradcheck(fn, {x, skip, blk.c1.conv.weight, blk.c2.conv.weight}, 5e-3);
  CHECK(err < 1e-2);
}

// ============================================================================
// Deep-supervision head
// ============================================================================

TEST_CASE("deep supervision head concatenates 120 channels and emits 1x3x64^3 logits") {
  Rng rng(10);
  ConvParams head;
  {
    head.weight = random_tensor({3, 120, 1, 1, 1}, rng);
    head.bias = Tensor::zeros({3});
    head.padding = {0, 0, 0};
  }
  // decoder outputs, deepest first: channels 64,32,16,8 at 8^3..64^3
  std::vector<Tensor> outs = {
      random_tensor({1, 64, 8, 8, 8}, rng),
      random_tensor({1, 32, 16, 16, 16}, rng),
      random_tensor({1, 16, 32, 32, 32}, rng),
      random_tensor({1, 8, 64, 64, 64}, rng),
  };
  // the 1x1x1 conv only accepts the concat when it carries exactly 120 channels
  const Tensor logits = deep_supervision_forward(head, outs, nullptr);
  CHECK(logits.shape() == Shape{1, 3, 64, 64, 64});
}

TEST_CASE("zero head weights give zero logits and a uniform softmax") {
  Rng rng(11);
  ConvParams head;
  head.weight = Tensor::zeros({3, 15, 1, 1, 1});
  head.bias = Tensor::zeros({3});
  head.padding = {0, 0, 0};
  std::vector<Tensor> outs = {
      random_tensor({1, 8, 2, 2, 2}, rng),
      random_tensor({1, 4, 4, 4, 4}, rng),
      random_tensor({1, 2, 8, 8, 8}, rng),
      random_tensor({1, 1, 16, 16, 16}, rng),
  };
  const Tensor logits = deep_supervision_forward(head, outs, nullptr);
  for (float v : logits.data()) CHECK(v == 0.0f);
  const Tensor probs = softmax_channels(logits, nullptr);
  for (float v : probs.data()) CHECK(v == doctest::Approx(1.0 / 3.0));
}

TEST_CASE("deep supervision head rejects inconsistent batch dims") {
  Rng rng(12);
  ConvParams head;
  head.weight = Tensor::zeros({3, 3, 1, 1, 1});
  head.bias = Tensor::zeros({3});
  head.padding = {0, 0, 0};
  std::vector<Tensor> outs = {
      random_tensor({2, 2, 4, 4, 4}, rng),
      random_tensor({1, 1, 8, 8, 8}, rng),
  };
  CHECK_THROWS_AS((void)deep_supervision_forward(head, outs, nullptr), DimensionError);
}

// ============================================================================
// build_model
// ============================================================================

TEST_CASE("build_model is deterministic: same seed and config give identical parameters") {
  const ModelConfig cfg = test_config("proposed");
  Model a = build_model(cfg, 1234);
  Model b = build_model(cfg, 1234);
  const auto pa = named_parameters(a), pb = named_parameters(b);
  REQUIRE(pa.size() == pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) {
    CHECK(pa[i].name == pb[i].name);
    REQUIRE(pa[i].tensor.shape() == pb[i].tensor.shape());
    const auto da = pa[i].tensor.data(), db = pb[i].tensor.data();
    for (std::size_t j = 0; j < da.size(); ++j) REQUIRE(da[j] == db[j]);
  }

  Model c = build_model(cfg, 1235);
  const auto pc = named_parameters(c);
  bool any_diff = false;
  for (std::size_t j = 0; j < pa[0].tensor.data().size(); ++j) {
    if (pa[0].tensor.data()[j] != pc[0].tensor.data()[j]) any_diff = true;
  }
  CHECK(any_diff);
}

TEST_CASE("proposed differs from unet3d_dilated only by projections and the head") {
  Model dil = build_model(test_config("unet3d_dilated"), 5);
  Model pro = build_model(test_config("proposed"), 5);

  std::map<std::string, Shape> dil_params, pro_params;
  for (const auto& p : named_parameters(dil)) dil_params[p.name] = p.tensor.shape();
  for (const auto& p : named_parameters(pro)) pro_params[p.name] = p.tensor.shape();

  std::set<std::string> extra;
  for (const auto& [name, shape] : pro_params) {
    if (!dil_params.count(name)) extra.insert(name);
  }
  CHECK(extra == std::set<std::string>{"enc0.proj.weight", "enc0.proj.bias", "enc1.proj.weight",
                                       "enc1.proj.bias", "enc2.proj.weight", "enc2.proj.bias",
                                       "enc3.proj.weight", "enc3.proj.bias"});
  // nothing in the dilated variant is missing from the proposed one
  for (const auto& [name, shape] : dil_params) REQUIRE(pro_params.count(name) == 1);

  // shared names have identical shapes except the wider ensemble head
  for (const auto& [name, shape] : dil_params) {
    if (name == "head.weight") {
      CHECK(shape == Shape{3, 8, 1, 1, 1});
      CHECK(pro_params[name] == Shape{3, 120, 1, 1, 1});
    } else {
      CHECK(pro_params[name] == shape);
    }
  }

  // the count difference is exactly those projections plus the wider head
  std::size_t proj_params = 0;
  for (const std::string& name : extra) proj_params += static_cast<std::size_t>(
      shape_numel(pro_params[name]));
  const std::size_t head_growth =
      static_cast<std::size_t>(shape_numel(pro_params["head.weight"]) -
                               shape_numel(dil_params["head.weight"]));
  CHECK(parameter_count(pro) == parameter_count(dil) + proj_params + head_growth);
}

TEST_CASE("parameter counts: frozen regression values for base 8") {
  // counted by parameter_count at build time and pinned here
  CHECK(parameter_count(build_model(test_config("unet3d"), 0)) == 1472979);
  CHECK(parameter_count(build_model(test_config("unet3d_dilated"), 0)) == 2358483);
  CHECK(parameter_count(build_model(test_config("proposed"), 0)) == 2361635);
}

TEST_CASE("channel algebra invariant: encoder level widths double from base") {
  Model m = build_model(test_config("proposed", 4), 3);
  for (std::size_t l = 0; l < 4; ++l) {
    CHECK(m.encoders[l].c2.conv.weight.dim(0) == (4 << l));
  }
  CHECK(m.bottleneck.layers.back().conv.weight.dim(0) == 4 << 4);
  REQUIRE(m.bottleneck.layers.size() == 4);
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK(m.bottleneck.layers[i].conv.dilation == std::array<std::int64_t, 4>{1, 2, 4, 8}[i]);
  }
}

TEST_CASE("build_model rejects unknown variants") {
  CHECK_THROWS_AS((void)build_model(test_config("vnet"), 0), ConfigError);
}

// ============================================================================
// Full forward
// ============================================================================

TEST_CASE("forward maps 1x1x32x64x32 to 1x3x32x64x32 for every variant") {
  Rng rng(20);
  Tensor x = random_tensor({1, 1, 32, 64, 32}, rng);
  for (const std::string variant : {"unet3d", "unet3d_dilated", "proposed"}) {
    Model m = build_model(test_config(variant), 7);
    const Tensor logits = forward(m, x, nullptr);
    CHECK(logits.shape() == Shape{1, 3, 32, 64, 32});
    CHECK(logits.all_finite());
  }
}

TEST_CASE("eval-mode forward is pure: two calls give bit-identical logits") {
  Rng rng(21);
  Tensor x = random_tensor({1, 1, 16, 16, 16}, rng);
  Model m = build_model(test_config("proposed", 4), 9);
  set_training(m, false);
  const Tensor a = forward(m, x, nullptr);
  const Tensor b = forward(m, x, nullptr);
  for (std::size_t i = 0; i < a.data().size(); ++i) REQUIRE(a.data()[i] == b.data()[i]);
}

TEST_CASE("all-zero input produces finite logits") {
  Model m = build_model(test_config("proposed", 4), 10);
  Tensor x = Tensor::zeros({1, 1, 16, 16, 16});
  const Tensor logits = forward(m, x, nullptr);
  CHECK(logits.all_finite());
}

TEST_CASE("forward rejects inputs whose spatial dims are not divisible by 16") {
  Model m = build_model(test_config("unet3d", 4), 11);
  Tensor x = Tensor::zeros({1, 1, 24, 32, 32});
  CHECK_THROWS_AS((void)forward(m, x, nullptr), DimensionError);
  Tensor wrong_ch = Tensor::zeros({1, 2, 16, 16, 16});
  CHECK_THROWS_AS((void)forward(m, wrong_ch, nullptr), DimensionError);
  Tensor wrong_rank = Tensor::zeros({1, 16, 16, 16});
  CHECK_THROWS_AS((void)forward(m, wrong_rank, nullptr), DimensionError);
}

// ============================================================================
// Deep-supervision gradient flow
// ============================================================================

TEST_CASE("gradient reaches every decoder level, and the deepest one directly") {
  Rng rng(30);
  Tensor x = random_tensor({1, 1, 16, 16, 16}, rng);
  const Tensor wts = fixed_weights({1, 3, 16, 16, 16}, 44);

  const auto run = [&](const std::string& variant) {
    Model m = build_model(test_config(variant, 4), 13);
    set_parameter_grads(m, true);
    Tape tape;
    ForwardTrace trace = forward_trace(m, x, &tape);
    const Tensor loss = sum_all(mul(trace.logits, wts, &tape), &tape);
    tape.backward(loss);

    // every decoder level's conv params received gradient
    for (std::size_t l = 0; l < 4; ++l) {
      const Tensor& w = m.decoders[l].c2.conv.weight;
      REQUIRE(w.has_grad());
      double mass = 0.0;
      for (float g : w.grad()) mass += std::abs(g);
      CHECK(mass > 0.0);
    }

    // min op-path length from the loss back to the deepest decoder output
    const auto depths = op_depths_from(tape, loss.id());
    const auto it = depths.find(trace.decoder_outputs.front().id());
    REQUIRE(it != depths.end());
    return it->second;
  };

  const std::int64_t direct = run("proposed");
  const std::int64_t chained = run("unet3d");
  // ensemble head: upsample -> concat -> 1x1x1 conv -> weighting -> sum
  CHECK(direct <= 5);
  // plain variant: the deepest output reaches the loss only through the
  // remaining three decoder blocks
  CHECK(chained > 2 * direct);
  CHECK(direct < chained);
}
