#include "voxseg/checks.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "voxseg/blocks.hpp"
#include "voxseg/losses.hpp"
#include "voxseg/metrics.hpp"
#include "voxseg/ops.hpp"
#include "voxseg/oracle.hpp"

namespace voxseg::checks {

namespace {

Tensor random_tensor(const Shape& shape, Rng& rng, float lo = -1.0f, float hi = 1.0f) {
  Tensor t(shape);
  for (float& v : t.data()) v = static_cast<float>(rng.uniform(lo, hi));
  return t;
}

// Alternating two-level weights: keeps sums of normalized outputs
// non-degenerate (see the batchnorm gradient notes in the unit tests).
Tensor two_level_weights(const Shape& shape) {
  Tensor t(shape);
  for (std::size_t i = 0; i < t.data().size(); ++i) {
    t.data()[i] = (i % 2) ? 10.0f : 20.0f;
  }
  return t;
}

// Eval-mode conv+bn fixture whose preactivations stay clear of the
// leaky-ReLU kink for positive inputs: positive weights, negative running
// means, moderate gamma/variance.
void positive_eval_fixture(ConvBnUnit& u, Rng& rng) {
  for (float& v : u.conv.weight.data()) v = static_cast<float>(rng.uniform(0.05, 0.3));
  for (float& v : u.conv.bias.data()) v = static_cast<float>(rng.uniform(0.05, 0.2));
  u.bn.training = false;
  for (float& v : u.bn.gamma.data()) v = static_cast<float>(rng.uniform(0.5, 1.5));
  for (float& v : u.bn.beta.data()) v = static_cast<float>(rng.uniform(0.1, 0.3));
  for (float& v : u.bn.running_mean.data()) v = static_cast<float>(rng.uniform(-0.3, -0.1));
  for (float& v : u.bn.running_var.data()) v = static_cast<float>(rng.uniform(0.5, 2.0));
}

using Fn = std::function<Tensor(Tape&, std::vector<Tensor>&)>;

struct Instance {
  Fn fn;
  std::vector<Tensor> inputs;
  double h = 1e-3;
};

using InstanceMaker = std::function<Instance(Rng&)>;

CheckResult run_entry(const std::string& name, const InstanceMaker& make, std::uint64_t seed,
                      int instances, double tolerance) {
  CheckResult r;
  r.name = name;
  r.instances = instances;
  r.tolerance = tolerance;
  for (int i = 0; i < instances; ++i) {
    Rng rng(derive_stream(seed, {hash_string(name), static_cast<std::uint64_t>(i)}));
    Instance inst = make(rng);
    r.worst = std::max(r.worst, gradcheck(inst.fn, std::move(inst.inputs), inst.h));
  }
  r.pass = r.worst < tolerance;
  return r;
}

// Random one-hot target matching [1, C, D, H, W] probs.
Tensor random_onehot(const Shape& probs_shape, Rng& rng) {
  Tensor t = Tensor::zeros(probs_shape);
  const std::int64_t C = probs_shape[1];
  const std::int64_t spatial = probs_shape[2] * probs_shape[3] * probs_shape[4];
  for (std::int64_t i = 0; i < spatial; ++i) {
    const std::int64_t c = static_cast<std::int64_t>(rng.bounded(static_cast<std::uint64_t>(C)));
    t.data()[static_cast<std::size_t>(c * spatial + i)] = 1.0f;
  }
  return t;
}

}  // namespace

std::vector<CheckResult> gradient_suite(std::uint64_t seed, int instances, double tolerance) {
  std::vector<CheckResult> results;
  const auto entry = [&](const std::string& name, const InstanceMaker& make) {
    results.push_back(run_entry(name, make, seed, instances, tolerance));
  };

  // --- primitive ops -------------------------------------------------------

  entry("add", [](Rng& rng) {
    Instance in;
    in.inputs = {random_tensor({1, 2, 3, 3, 3}, rng), random_tensor({1, 2, 3, 3, 3}, rng)};
    in.fn = [](Tape& t, std::vector<Tensor>& x) { return add(x[0], x[1], &t); };
    return in;
  });

  entry("mul", [](Rng& rng) {
    Instance in;
    in.inputs = {random_tensor({1, 2, 3, 3, 3}, rng), random_tensor({1, 2, 3, 3, 3}, rng)};
    in.fn = [](Tape& t, std::vector<Tensor>& x) { return mul(x[0], x[1], &t); };
    return in;
  });

  entry("sum_all", [](Rng& rng) {
    Instance in;
    in.inputs = {random_tensor({2, 3, 2, 2, 2}, rng)};
    in.fn = [](Tape& t, std::vector<Tensor>& x) { return sum_all(x[0], &t); };
    return in;
  });

  entry("leaky_relu", [](Rng& rng) {
    // magnitudes in [0.1, 1] with random signs: the finite-difference step
    // never crosses the kink
    Tensor x(Shape{1, 2, 3, 3, 3});
    for (float& v : x.data()) {
      const double u = rng.uniform(0.1, 1.0);
      v = static_cast<float>(rng.bernoulli(0.5) ? u : -u);
    }
    Instance in;
    in.inputs = {x};
    in.fn = [](Tape& t, std::vector<Tensor>& xs) { return leaky_relu(xs[0], 0.01f, &t); };
    return in;
  });

  entry("conv3d", [](Rng& rng) {
    // positive operands keep every derivative bounded away from zero, so
    // float32 FD noise cannot dominate the relative error
    const std::int64_t cin = 1 + static_cast<std::int64_t>(rng.bounded(2));
    const std::int64_t cout = 1 + static_cast<std::int64_t>(rng.bounded(2));
    const std::int64_t s = 3 + static_cast<std::int64_t>(rng.bounded(2));
    Instance in;
    in.inputs = {random_tensor({1, cin, s, s, s}, rng, 0.5f, 1.5f),
                 random_tensor({cout, cin, 3, 3, 3}, rng, 0.5f, 1.5f),
                 random_tensor({cout}, rng, 0.5f, 1.5f)};
    in.fn = [](Tape& t, std::vector<Tensor>& x) {
      ConvParams p{x[1], x[2], {1, 1, 1}, 1};
      return conv3d(x[0], p, &t);
    };
    return in;
  });

  entry("conv3d_dilated", [](Rng& rng) {
    const std::int64_t d = rng.bernoulli(0.5) ? 2 : 4;
    const std::int64_t s = 2 * d + 1;  // every kernel tap lands inside at the center
    Instance in;
    in.inputs = {random_tensor({1, 1, s, s, s}, rng, 0.5f, 1.5f),
                 random_tensor({1, 1, 3, 3, 3}, rng, 0.5f, 1.5f),
                 random_tensor({1}, rng, 0.5f, 1.5f)};
    in.fn = [d](Tape& t, std::vector<Tensor>& x) {
      ConvParams p{x[1], x[2], {d, d, d}, d};
      return conv3d(x[0], p, &t);
    };
    return in;
  });

  entry("maxpool3d", [](Rng& rng) {
    // well-separated values so FD never crosses an argmax boundary
    Tensor x(Shape{1, 2, 4, 4, 4});
    std::vector<int> order(static_cast<std::size_t>(x.numel()));
    std::iota(order.begin(), order.end(), 0);
    rng.shuffle(order);
    for (std::size_t i = 0; i < order.size(); ++i) {
      x.data()[i] = 0.05f * static_cast<float>(order[i]);
    }
    Instance in;
    in.inputs = {x};
    in.fn = [](Tape& t, std::vector<Tensor>& xs) { return maxpool3d(xs[0], &t).output; };
    return in;
  });

  entry("upsample3d", [](Rng& rng) {
    const std::int64_t factor = rng.bernoulli(0.5) ? 2 : 4;
    Instance in;
    in.inputs = {random_tensor({1, 2, 2, 2, 2}, rng)};
    in.fn = [factor](Tape& t, std::vector<Tensor>& x) { return upsample3d(x[0], factor, &t); };
    return in;
  });

  entry("batchnorm3d_train", [](Rng& rng) {
    const Tensor wts = two_level_weights({2, 2, 3, 3, 3});
    Instance in;
    in.inputs = {random_tensor({2, 2, 3, 3, 3}, rng), random_tensor({2}, rng, 0.5f, 1.5f),
                 random_tensor({2}, rng)};
    in.h = 5e-3;
    in.fn = [wts](Tape& t, std::vector<Tensor>& x) {
      BatchNormState s = make_batchnorm(2);
      s.gamma = x[1];
      s.beta = x[2];
      Tensor y = batchnorm3d(x[0], s, &t);
      return mul(y, wts, &t);
    };
    return in;
  });

  entry("batchnorm3d_eval", [](Rng& rng) {
    BatchNormState s = make_batchnorm(2);
    s.training = false;
    for (float& v : s.running_mean.data()) v = static_cast<float>(rng.uniform(-0.5, 0.5));
    for (float& v : s.running_var.data()) v = static_cast<float>(rng.uniform(0.5, 2.0));
    Instance in;
    in.inputs = {random_tensor({1, 2, 3, 3, 3}, rng), random_tensor({2}, rng, 0.5f, 1.5f),
                 random_tensor({2}, rng)};
    in.fn = [s](Tape& t, std::vector<Tensor>& x) mutable {
      s.gamma = x[1];
      s.beta = x[2];
      return batchnorm3d(x[0], s, &t);
    };
    return in;
  });

  {
    int counter = 0;
    entry("softmax_channels", [&counter](Rng& rng) {
      // Reduce through a single channel's mass: for that scalar, every
      // logit's derivative is p_sel*(delta - p_i), bounded away from zero,
      // so the per-element relative error stays meaningful in float32. A
      // generic weighted sum would have sign changes (zero derivatives)
      // wherever a weight equals the weighted channel mean.
      const std::int64_t sel = counter++ % 3;
      Tensor wts = Tensor::zeros({1, 3, 2, 2, 2});
      const std::int64_t spatial = 8;
      for (std::int64_t i = 0; i < spatial; ++i) {
        wts.data()[static_cast<std::size_t>(sel * spatial + i)] = 1.0f;
      }
      Instance in;
      in.inputs = {random_tensor({1, 3, 2, 2, 2}, rng, -0.5f, 0.5f)};
      in.h = 5e-3;
      in.fn = [wts](Tape& t, std::vector<Tensor>& x) {
        return mul(softmax_channels(x[0], &t), wts, &t);
      };
      return in;
    });
  }

  entry("concat_channels", [](Rng& rng) {
    Tensor wts(Shape{1, 3, 2, 2, 2});
    for (float& v : wts.data()) v = static_cast<float>(rng.uniform(0.5, 1.5));
    Instance in;
    in.inputs = {random_tensor({1, 2, 2, 2, 2}, rng), random_tensor({1, 1, 2, 2, 2}, rng)};
    in.fn = [wts](Tape& t, std::vector<Tensor>& x) {
      return mul(concat_channels({x[0], x[1]}, &t), wts, &t);
    };
    return in;
  });

  // --- losses (checked in probability space) --------------------------------
  // In prob space every derivative is sign-definite (for one-hot targets the
  // dice and bce parts push the same way), so the strict per-element relative
  // error is meaningful. Through softmax the logit-space gradient crosses
  // zero somewhere, and float32 FD noise dominates at those elements; the
  // softmax Jacobian itself is covered by its own entry above. The scalar
  // losses live in float32, so the difference quotient needs a large step to
  // rise above the rounding noise floor.

  const auto loss_entry = [&](const std::string& name, auto&& loss_fn) {
    entry(name, [loss_fn](Rng& rng) {
      const Shape shape{1, 3, 4, 4, 4};
      const Tensor target = random_onehot(shape, rng);
      const Tensor probs = softmax_channels(random_tensor(shape, rng), nullptr);
      Instance in;
      in.inputs = {probs};
      in.h = 1e-2;
      in.fn = [loss_fn, target](Tape& t, std::vector<Tensor>& x) {
        return loss_fn(x[0], target, &t);
      };
      return in;
    });
  };
  loss_entry("soft_dice_loss", [](const Tensor& p, const Tensor& q, Tape* t) {
    return soft_dice_loss(p, q, t);
  });
  loss_entry("bce_loss",
             [](const Tensor& p, const Tensor& q, Tape* t) { return bce_loss(p, q, t); });
  loss_entry("combined_loss", [](const Tensor& p, const Tensor& q, Tape* t) {
    return combined_loss(p, q, t).total;
  });

  // --- composite blocks (eval-mode batchnorm, positive-path fixtures) ------

  entry("encoder_block", [](Rng& rng) {
    EncoderBlock blk = make_encoder_block(1, 2, true, rng, 0.01f);
    positive_eval_fixture(blk.c1, rng);
    positive_eval_fixture(blk.c2, rng);
    for (float& v : blk.proj.weight.data()) v = static_cast<float>(rng.uniform(0.05, 0.3));
    Instance in;
    in.inputs = {random_tensor({1, 1, 4, 4, 4}, rng, 0.25f, 1.25f)};
    in.h = 5e-3;
    in.fn = [blk](Tape& t, std::vector<Tensor>& x) mutable {
      return encoder_forward(blk, x[0], 0.01f, &t).first;
    };
    return in;
  });

  entry("bottleneck", [](Rng& rng) {
    Bottleneck bn = make_bottleneck(1, 2, {1, 2, 4, 8}, rng, 0.01f);
    for (ConvBnUnit& u : bn.layers) positive_eval_fixture(u, rng);
    Instance in;
    in.inputs = {random_tensor({1, 1, 5, 5, 5}, rng, 0.25f, 1.25f)};
    in.h = 5e-3;
    in.fn = [bn](Tape& t, std::vector<Tensor>& x) mutable {
      return bottleneck_forward(bn, x[0], 0.01f, &t);
    };
    return in;
  });

  entry("decoder_block", [](Rng& rng) {
    DecoderBlock blk = make_decoder_block(2, 1, rng, 0.01f);
    positive_eval_fixture(blk.c1, rng);
    positive_eval_fixture(blk.c2, rng);
    Instance in;
    in.inputs = {random_tensor({1, 2, 2, 2, 2}, rng, 0.25f, 1.25f),
                 random_tensor({1, 1, 4, 4, 4}, rng, 0.25f, 1.25f)};
    in.h = 5e-3;
    in.fn = [blk](Tape& t, std::vector<Tensor>& x) mutable {
      return decoder_forward(blk, x[0], x[1], 0.01f, &t);
    };
    return in;
  });

  entry("deep_supervision_head", [](Rng& rng) {
    // four decoder outputs, deepest first, at 1/8 .. 1/1 of full resolution
    Instance in;
    in.inputs = {random_tensor({1, 8, 1, 1, 1}, rng), random_tensor({1, 4, 2, 2, 2}, rng),
                 random_tensor({1, 2, 4, 4, 4}, rng), random_tensor({1, 1, 8, 8, 8}, rng)};
    Tensor w = random_tensor({3, 15, 1, 1, 1}, rng, 0.5f, 1.5f);
    Tensor b = random_tensor({3}, rng, 0.5f, 1.5f);
    const ConvParams head{w, b, {0, 0, 0}, 1};
    in.fn = [head](Tape& t, std::vector<Tensor>& x) {
      return deep_supervision_forward(head, {x[0], x[1], x[2], x[3]}, &t);
    };
    return in;
  });

  return results;
}

CheckResult conv_oracle(std::uint64_t seed, int configs, double tolerance) {
  CheckResult r;
  r.name = "conv3d vs naive_conv3d";
  r.instances = configs;
  r.tolerance = tolerance;
  const std::array<std::int64_t, 4> dilations{1, 2, 4, 8};
  for (int i = 0; i < configs; ++i) {
    Rng rng(derive_stream(seed, {hash_string("conv-oracle"), static_cast<std::uint64_t>(i)}));
    const std::int64_t d = dilations[static_cast<std::size_t>(i) % dilations.size()];
    const std::int64_t B = 1 + static_cast<std::int64_t>(rng.bounded(2));
    const std::int64_t cin = 1 + static_cast<std::int64_t>(rng.bounded(3));
    const std::int64_t cout = 1 + static_cast<std::int64_t>(rng.bounded(3));
    const Shape dims{5 + static_cast<std::int64_t>(rng.bounded(5)),
                     5 + static_cast<std::int64_t>(rng.bounded(5)),
                     5 + static_cast<std::int64_t>(rng.bounded(5))};
    // same-padding most of the time, valid (pad 0) occasionally when the
    // volume is big enough for a non-empty output
    std::int64_t pad = rng.bernoulli(0.8) ? d : 0;
    if (pad == 0 && (dims[0] <= 2 * d || dims[1] <= 2 * d || dims[2] <= 2 * d)) pad = d;

    Tensor x = random_tensor({B, cin, dims[0], dims[1], dims[2]}, rng);
    Tensor w = random_tensor({cout, cin, 3, 3, 3}, rng);
    Tensor b = random_tensor({cout}, rng);
    ConvParams p{w, b, {pad, pad, pad}, d};
    const Tensor fast = conv3d(x, p, nullptr);
    const Tensor slow = oracle::naive_conv3d(x, w, b, {pad, pad, pad}, d);
    for (std::size_t k = 0; k < fast.data().size(); ++k) {
      r.worst = std::max(r.worst,
                         static_cast<double>(std::abs(fast.data()[k] - slow.data()[k])));
    }
  }
  r.pass = r.worst < tolerance;
  return r;
}

CheckResult nsd_oracle(std::uint64_t seed, int pairs) {
  CheckResult r;
  r.name = "nsd vs brute_nsd";
  r.instances = pairs;
  r.tolerance = 0.0;
  for (int i = 0; i < pairs; ++i) {
    Rng rng(derive_stream(seed, {hash_string("nsd-oracle"), static_cast<std::uint64_t>(i)}));
    const Shape dims{4 + static_cast<std::int64_t>(rng.bounded(13)),
                     4 + static_cast<std::int64_t>(rng.bounded(13)),
                     4 + static_cast<std::int64_t>(rng.bounded(13))};
    const std::array<double, 3> spacing{rng.uniform(0.5, 2.0), rng.uniform(0.5, 2.0),
                                        rng.uniform(0.5, 2.0)};
    const double tau = rng.uniform(1.0, 6.0);
    const int cls = rng.bernoulli(0.5) ? 1 : 2;

    // blobby random labels: a few seeded balls per class over background
    Tensor pred = Tensor::zeros(dims), gt = Tensor::zeros(dims);
    const auto paint = [&](Tensor& vol) {
      const int balls = 1 + static_cast<int>(rng.bounded(3));
      for (int k = 0; k < balls; ++k) {
        const double cd = rng.uniform(0.0, static_cast<double>(dims[0]));
        const double ch = rng.uniform(0.0, static_cast<double>(dims[1]));
        const double cw = rng.uniform(0.0, static_cast<double>(dims[2]));
        const double rad = rng.uniform(1.0, 4.0);
        const float label = rng.bernoulli(0.5) ? 1.0f : 2.0f;
        float* p = vol.data().data();
        std::int64_t idx = 0;
        for (std::int64_t dd = 0; dd < dims[0]; ++dd)
          for (std::int64_t hh = 0; hh < dims[1]; ++hh)
            for (std::int64_t ww = 0; ww < dims[2]; ++ww, ++idx) {
              const double dist2 = (dd - cd) * (dd - cd) + (hh - ch) * (hh - ch) +
                                   (ww - cw) * (ww - cw);
              if (dist2 <= rad * rad) p[idx] = label;
            }
      }
    };
    paint(pred);
    paint(gt);

    const auto binary = [cls](const Tensor& vol) {
      Tensor m = Tensor::zeros(vol.shape());
      for (std::size_t k = 0; k < vol.data().size(); ++k) {
        m.data()[k] = vol.data()[k] == static_cast<float>(cls) ? 1.0f : 0.0f;
      }
      return m;
    };
    const double fast = nsd(binary(pred), binary(gt), spacing, tau);
    const double slow = oracle::brute_nsd(pred, gt, cls, spacing, tau);
    if (fast != slow) r.worst += 1.0;
  }
  r.pass = r.worst == 0.0;
  return r;
}

}  // namespace voxseg::checks
