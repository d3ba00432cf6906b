#include "voxseg/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "voxseg/errors.hpp"

namespace voxseg {

namespace {

void require_rank5(const Tensor& t, const char* what) {
  if (!t.defined() || t.rank() != 5) {
    throw DimensionError(std::string(what) + " must be a rank-5 [N,C,D,H,W] tensor");
  }
}

struct ConvDims {
  std::int64_t n, ci, di, hi, wi;
  std::int64_t co, kd, kh, kw;
  std::int64_t pd, ph, pw, dil;
  std::int64_t od, oh, ow;  // output spatial dims
};

ConvDims conv_dims(const Shape& in, const Shape& w, const std::array<std::int64_t, 3>& pad,
                   std::int64_t dilation) {
  ConvDims d{};
  d.n = in[0];
  d.ci = in[1];
  d.di = in[2];
  d.hi = in[3];
  d.wi = in[4];
  d.co = w[0];
  d.kd = w[2];
  d.kh = w[3];
  d.kw = w[4];
  d.pd = pad[0];
  d.ph = pad[1];
  d.pw = pad[2];
  d.dil = dilation;
  if (dilation < 1) throw ConfigError("conv3d dilation must be positive");
  if (d.pd < 0 || d.ph < 0 || d.pw < 0) throw ConfigError("conv3d padding must be non-negative");
  if (w[1] != d.ci) {
    throw DimensionError("conv3d weight expects " + std::to_string(w[1]) + " input channels, got " +
                         std::to_string(d.ci));
  }
  d.od = d.di + 2 * d.pd - dilation * (d.kd - 1);
  d.oh = d.hi + 2 * d.ph - dilation * (d.kh - 1);
  d.ow = d.wi + 2 * d.pw - dilation * (d.kw - 1);
  if (d.od < 1 || d.oh < 1 || d.ow < 1) {
    throw DimensionError("conv3d input " + shape_str(in) + " too small for kernel extent");
  }
  return d;
}

// out[n,co,od,oh,ow] += sum_{ci,k} w[co,ci,k] * in[n,ci,od-pd+kd*dil, ...]
void conv3d_forward_impl(const float* in, const float* w, const float* b, float* out,
                         const ConvDims& g) {
  const std::int64_t out_spatial = g.od * g.oh * g.ow;
  for (std::int64_t n = 0; n < g.n; ++n) {
    for (std::int64_t co = 0; co < g.co; ++co) {
      float* oslab = out + (n * g.co + co) * out_spatial;
      const float bv = b ? b[co] : 0.0f;
      std::fill(oslab, oslab + out_spatial, bv);
      for (std::int64_t ci = 0; ci < g.ci; ++ci) {
        const float* islab = in + (n * g.ci + ci) * g.di * g.hi * g.wi;
        const float* wslab = w + (co * g.ci + ci) * g.kd * g.kh * g.kw;
        for (std::int64_t kd = 0; kd < g.kd; ++kd) {
          const std::int64_t od_lo = std::max<std::int64_t>(0, g.pd - kd * g.dil);
          const std::int64_t od_hi = std::min(g.od, g.di + g.pd - kd * g.dil);
          for (std::int64_t kh = 0; kh < g.kh; ++kh) {
            const std::int64_t oh_lo = std::max<std::int64_t>(0, g.ph - kh * g.dil);
            const std::int64_t oh_hi = std::min(g.oh, g.hi + g.ph - kh * g.dil);
            for (std::int64_t kw = 0; kw < g.kw; ++kw) {
              const float wv = wslab[(kd * g.kh + kh) * g.kw + kw];
              const std::int64_t ow_lo = std::max<std::int64_t>(0, g.pw - kw * g.dil);
              const std::int64_t ow_hi = std::min(g.ow, g.wi + g.pw - kw * g.dil);
              const std::int64_t len = ow_hi - ow_lo;
              if (len <= 0) continue;
              const std::int64_t wshift = kw * g.dil - g.pw;
              for (std::int64_t od = od_lo; od < od_hi; ++od) {
                const std::int64_t id = od - g.pd + kd * g.dil;
                for (std::int64_t oh = oh_lo; oh < oh_hi; ++oh) {
                  const std::int64_t ih = oh - g.ph + kh * g.dil;
                  float* orow = oslab + (od * g.oh + oh) * g.ow + ow_lo;
                  const float* irow = islab + (id * g.hi + ih) * g.wi + ow_lo + wshift;
                  for (std::int64_t i = 0; i < len; ++i) orow[i] += wv * irow[i];
                }
              }
            }
          }
        }
      }
    }
  }
}

// Scatter formulation: gi[n,ci,id,ih,iw] += w[co,ci,k] * go[n,co,od,oh,ow]
// over the same index map as the forward pass.
void conv3d_grad_input_impl(const float* go, const float* w, float* gi, const ConvDims& g) {
  for (std::int64_t n = 0; n < g.n; ++n) {
    for (std::int64_t co = 0; co < g.co; ++co) {
      const float* goslab = go + (n * g.co + co) * g.od * g.oh * g.ow;
      for (std::int64_t ci = 0; ci < g.ci; ++ci) {
        float* gislab = gi + (n * g.ci + ci) * g.di * g.hi * g.wi;
        const float* wslab = w + (co * g.ci + ci) * g.kd * g.kh * g.kw;
        for (std::int64_t kd = 0; kd < g.kd; ++kd) {
          const std::int64_t od_lo = std::max<std::int64_t>(0, g.pd - kd * g.dil);
          const std::int64_t od_hi = std::min(g.od, g.di + g.pd - kd * g.dil);
          for (std::int64_t kh = 0; kh < g.kh; ++kh) {
            const std::int64_t oh_lo = std::max<std::int64_t>(0, g.ph - kh * g.dil);
            const std::int64_t oh_hi = std::min(g.oh, g.hi + g.ph - kh * g.dil);
            for (std::int64_t kw = 0; kw < g.kw; ++kw) {
              const float wv = wslab[(kd * g.kh + kh) * g.kw + kw];
              const std::int64_t ow_lo = std::max<std::int64_t>(0, g.pw - kw * g.dil);
              const std::int64_t ow_hi = std::min(g.ow, g.wi + g.pw - kw * g.dil);
              const std::int64_t len = ow_hi - ow_lo;
              if (len <= 0) continue;
              const std::int64_t wshift = kw * g.dil - g.pw;
              for (std::int64_t od = od_lo; od < od_hi; ++od) {
                const std::int64_t id = od - g.pd + kd * g.dil;
                for (std::int64_t oh = oh_lo; oh < oh_hi; ++oh) {
                  const std::int64_t ih = oh - g.ph + kh * g.dil;
                  const float* gorow = goslab + (od * g.oh + oh) * g.ow + ow_lo;
                  float* girow = gislab + (id * g.hi + ih) * g.wi + ow_lo + wshift;
                  for (std::int64_t i = 0; i < len; ++i) girow[i] += wv * gorow[i];
                }
              }
            }
          }
        }
      }
    }
  }
}

void conv3d_grad_weight_impl(const float* go, const float* in, float* gw, const ConvDims& g) {
  for (std::int64_t co = 0; co < g.co; ++co) {
    for (std::int64_t ci = 0; ci < g.ci; ++ci) {
      float* gwslab = gw + (co * g.ci + ci) * g.kd * g.kh * g.kw;
      for (std::int64_t kd = 0; kd < g.kd; ++kd) {
        const std::int64_t od_lo = std::max<std::int64_t>(0, g.pd - kd * g.dil);
        const std::int64_t od_hi = std::min(g.od, g.di + g.pd - kd * g.dil);
        for (std::int64_t kh = 0; kh < g.kh; ++kh) {
          const std::int64_t oh_lo = std::max<std::int64_t>(0, g.ph - kh * g.dil);
          const std::int64_t oh_hi = std::min(g.oh, g.hi + g.ph - kh * g.dil);
          for (std::int64_t kw = 0; kw < g.kw; ++kw) {
            const std::int64_t ow_lo = std::max<std::int64_t>(0, g.pw - kw * g.dil);
            const std::int64_t ow_hi = std::min(g.ow, g.wi + g.pw - kw * g.dil);
            const std::int64_t len = ow_hi - ow_lo;
            const std::int64_t wshift = kw * g.dil - g.pw;
            double acc = 0.0;
            if (len > 0) {
              for (std::int64_t n = 0; n < g.n; ++n) {
                const float* goslab = go + (n * g.co + co) * g.od * g.oh * g.ow;
                const float* islab = in + (n * g.ci + ci) * g.di * g.hi * g.wi;
                for (std::int64_t od = od_lo; od < od_hi; ++od) {
                  const std::int64_t id = od - g.pd + kd * g.dil;
                  for (std::int64_t oh = oh_lo; oh < oh_hi; ++oh) {
                    const std::int64_t ih = oh - g.ph + kh * g.dil;
                    const float* gorow = goslab + (od * g.oh + oh) * g.ow + ow_lo;
                    const float* irow = islab + (id * g.hi + ih) * g.wi + ow_lo + wshift;
                    double dot = 0.0;
                    for (std::int64_t i = 0; i < len; ++i) {
                      dot += static_cast<double>(gorow[i]) * static_cast<double>(irow[i]);
                    }
                    acc += dot;
                  }
                }
              }
            }
            gwslab[(kd * g.kh + kh) * g.kw + kw] += static_cast<float>(acc);
          }
        }
      }
    }
  }
}

void conv3d_grad_bias_impl(const float* go, float* gb, const ConvDims& g) {
  const std::int64_t out_spatial = g.od * g.oh * g.ow;
  for (std::int64_t co = 0; co < g.co; ++co) {
    double acc = 0.0;
    for (std::int64_t n = 0; n < g.n; ++n) {
      const float* slab = go + (n * g.co + co) * out_spatial;
      for (std::int64_t i = 0; i < out_spatial; ++i) acc += slab[i];
    }
    gb[co] += static_cast<float>(acc);
  }
}

bool wants_grad(Tape* tape, std::initializer_list<const Tensor*> inputs) {
  if (!tape) return false;
  for (const Tensor* t : inputs) {
    if (t->defined() && t->requires_grad()) return true;
  }
  return false;
}

}  // namespace

BatchNormState make_batchnorm(std::int64_t channels) {
  BatchNormState s;
  s.gamma = Tensor::full({channels}, 1.0f, true);
  s.beta = Tensor::zeros({channels}, true);
  s.running_mean = Tensor::zeros({channels});
  s.running_var = Tensor::full({channels}, 1.0f);
  return s;
}

Tensor conv3d(const Tensor& input, const ConvParams& p, Tape* tape) {
  require_rank5(input, "conv3d input");
  require_rank5(p.weight, "conv3d weight");
  if (!p.bias.defined() || p.bias.rank() != 1 || p.bias.dim(0) != p.weight.dim(0)) {
    throw DimensionError("conv3d bias must be [out_ch]");
  }
  const ConvDims g = conv_dims(input.shape(), p.weight.shape(), p.padding, p.dilation);

  Tensor out({g.n, g.co, g.od, g.oh, g.ow});
  conv3d_forward_impl(input.data().data(), p.weight.data().data(), p.bias.data().data(),
                      out.data().data(), g);

  if (wants_grad(tape, {&input, &p.weight, &p.bias})) {
    out.set_requires_grad(true);
    Tensor in = input, w = p.weight, b = p.bias, o = out;
    tape->record(
        {"conv3d", {input.id(), p.weight.id(), p.bias.id()}, out.id(), [in, w, b, o, g]() mutable {
           if (!o.has_grad()) return;
           const float* go = o.grad().data();
           if (in.requires_grad()) {
             conv3d_grad_input_impl(go, w.data().data(), in.grad().data(), g);
           }
           if (w.requires_grad()) {
             conv3d_grad_weight_impl(go, in.data().data(), w.grad().data(), g);
           }
           if (b.requires_grad()) {
             conv3d_grad_bias_impl(go, b.grad().data(), g);
           }
         }});
  }
  return out;
}

Conv3dGrads conv3d_backward(const Tensor& grad_out, const Conv3dContext& ctx) {
  if (!ctx.input.defined() || !ctx.weight.defined()) {
    throw StateError("conv3d_backward: forward context not saved");
  }
  const ConvDims g = conv_dims(ctx.input.shape(), ctx.weight.shape(), ctx.padding, ctx.dilation);
  const Shape expected{g.n, g.co, g.od, g.oh, g.ow};
  if (!grad_out.defined() || grad_out.shape() != expected) {
    throw DimensionError("conv3d_backward: grad_out must have shape " + shape_str(expected));
  }
  Conv3dGrads grads;
  grads.input = Tensor::zeros(ctx.input.shape());
  grads.weight = Tensor::zeros(ctx.weight.shape());
  grads.bias = Tensor::zeros({g.co});
  const float* go = grad_out.data().data();
  conv3d_grad_input_impl(go, ctx.weight.data().data(), grads.input.data().data(), g);
  conv3d_grad_weight_impl(go, ctx.input.data().data(), grads.weight.data().data(), g);
  conv3d_grad_bias_impl(go, grads.bias.data().data(), g);
  return grads;
}

MaxPool3dResult maxpool3d(const Tensor& input, Tape* tape) {
  require_rank5(input, "maxpool3d input");
  const std::int64_t N = input.dim(0), C = input.dim(1), D = input.dim(2), H = input.dim(3),
                     W = input.dim(4);
  if (D % 2 || H % 2 || W % 2) {
    throw DimensionError("maxpool3d requires even spatial dims, got " + shape_str(input.shape()));
  }
  const std::int64_t Do = D / 2, Ho = H / 2, Wo = W / 2;
  Tensor out({N, C, Do, Ho, Wo});
  std::vector<std::int64_t> argmax(static_cast<std::size_t>(out.numel()));
  const float* in = input.data().data();
  float* o = out.data().data();
  std::int64_t oi = 0;
  for (std::int64_t n = 0; n < N; ++n) {
    for (std::int64_t c = 0; c < C; ++c) {
      const float* slab = in + (n * C + c) * D * H * W;
      const std::int64_t base = (n * C + c) * D * H * W;
      for (std::int64_t od = 0; od < Do; ++od) {
        for (std::int64_t oh = 0; oh < Ho; ++oh) {
          for (std::int64_t ow = 0; ow < Wo; ++ow, ++oi) {
            float best = -std::numeric_limits<float>::infinity();
            std::int64_t best_idx = 0;
            for (std::int64_t kd = 0; kd < 2; ++kd) {
              for (std::int64_t kh = 0; kh < 2; ++kh) {
                for (std::int64_t kw = 0; kw < 2; ++kw) {
                  const std::int64_t idx =
                      ((od * 2 + kd) * H + (oh * 2 + kh)) * W + (ow * 2 + kw);
                  const float v = slab[idx];
                  if (v > best) {  // strict: ties keep the lowest linear index
                    best = v;
                    best_idx = base + idx;
                  }
                }
              }
            }
            o[oi] = best;
            argmax[static_cast<std::size_t>(oi)] = best_idx;
          }
        }
      }
    }
  }

  MaxPool3dResult result{out, std::move(argmax)};
  if (wants_grad(tape, {&input})) {
    out.set_requires_grad(true);
    Tensor in_t = input, o_t = out;
    auto am = result.argmax;
    tape->record({"maxpool3d", {input.id()}, out.id(), [in_t, o_t, am]() mutable {
                    if (!o_t.has_grad()) return;
                    auto gi = in_t.grad();
                    auto go = o_t.grad();
                    for (std::size_t i = 0; i < am.size(); ++i) {
                      gi[static_cast<std::size_t>(am[i])] += go[i];
                    }
                  }});
  }
  return result;
}

Tensor maxpool3d_backward(const Tensor& grad_out, const std::vector<std::int64_t>& argmax,
                          const Shape& input_shape) {
  if (static_cast<std::size_t>(grad_out.numel()) != argmax.size()) {
    throw DimensionError("maxpool3d_backward: grad_out does not match argmax record");
  }
  Tensor gi = Tensor::zeros(input_shape);
  auto g = gi.data();
  auto go = grad_out.data();
  for (std::size_t i = 0; i < argmax.size(); ++i) g[static_cast<std::size_t>(argmax[i])] += go[i];
  return gi;
}

Tensor upsample3d(const Tensor& input, std::int64_t factor, Tape* tape) {
  require_rank5(input, "upsample3d input");
  if (factor < 1) throw ConfigError("upsample3d factor must be >= 1");
  const std::int64_t N = input.dim(0), C = input.dim(1), D = input.dim(2), H = input.dim(3),
                     W = input.dim(4);
  Tensor out({N, C, D * factor, H * factor, W * factor});
  const float* in = input.data().data();
  float* o = out.data().data();
  const std::int64_t Ho = H * factor, Wo = W * factor;
  std::int64_t oi = 0;
  for (std::int64_t nc = 0; nc < N * C; ++nc) {
    const float* slab = in + nc * D * H * W;
    for (std::int64_t od = 0; od < D * factor; ++od) {
      const std::int64_t id = od / factor;
      for (std::int64_t oh = 0; oh < Ho; ++oh) {
        const std::int64_t ih = oh / factor;
        const float* irow = slab + (id * H + ih) * W;
        for (std::int64_t ow = 0; ow < Wo; ++ow, ++oi) o[oi] = irow[ow / factor];
      }
    }
  }

  if (wants_grad(tape, {&input})) {
    out.set_requires_grad(true);
    Tensor in_t = input, o_t = out;
    const Shape ishape = input.shape();
    tape->record({"upsample3d", {input.id()}, out.id(), [in_t, o_t, factor, ishape]() mutable {
                    if (!o_t.has_grad()) return;
                    Tensor go = Tensor::from_data(o_t.shape(),
                                                  {o_t.grad().begin(), o_t.grad().end()});
                    Tensor gi = upsample3d_backward(go, factor, ishape);
                    in_t.accumulate_grad(gi.data());
                  }});
  }
  return out;
}

Tensor upsample3d_backward(const Tensor& grad_out, std::int64_t factor, const Shape& input_shape) {
  if (factor < 1) throw ConfigError("upsample3d factor must be >= 1");
  Tensor gi = Tensor::zeros(input_shape);
  const std::int64_t N = input_shape[0], C = input_shape[1], D = input_shape[2],
                     H = input_shape[3], W = input_shape[4];
  const Shape expected{N, C, D * factor, H * factor, W * factor};
  if (grad_out.shape() != expected) {
    throw DimensionError("upsample3d_backward: grad_out must have shape " + shape_str(expected));
  }
  const float* go = grad_out.data().data();
  float* g = gi.data().data();
  const std::int64_t Ho = H * factor, Wo = W * factor;
  std::int64_t oi = 0;
  for (std::int64_t nc = 0; nc < N * C; ++nc) {
    float* slab = g + nc * D * H * W;
    for (std::int64_t od = 0; od < D * factor; ++od) {
      const std::int64_t id = od / factor;
      for (std::int64_t oh = 0; oh < Ho; ++oh) {
        const std::int64_t ih = oh / factor;
        float* grow = slab + (id * H + ih) * W;
        for (std::int64_t ow = 0; ow < Wo; ++ow, ++oi) grow[ow / factor] += go[oi];
      }
    }
  }
  return gi;
}

Tensor batchnorm3d(const Tensor& input, BatchNormState& state, Tape* tape) {
  require_rank5(input, "batchnorm3d input");
  const std::int64_t N = input.dim(0), C = input.dim(1), D = input.dim(2), H = input.dim(3),
                     W = input.dim(4);
  if (state.gamma.dim(0) != C) {
    throw DimensionError("batchnorm3d state has " + std::to_string(state.gamma.dim(0)) +
                         " channels, input has " + std::to_string(C));
  }
  const std::int64_t spatial = D * H * W;
  const std::int64_t M = N * spatial;  // elements per channel

  Tensor out(input.shape());
  const float* in = input.data().data();
  float* o = out.data().data();
  const float* gamma = state.gamma.data().data();
  const float* beta = state.beta.data().data();

  std::vector<float> mean(static_cast<std::size_t>(C)), invstd(static_cast<std::size_t>(C));
  if (state.training) {
    float* rm = state.running_mean.data().data();
    float* rv = state.running_var.data().data();
    for (std::int64_t c = 0; c < C; ++c) {
      double sum = 0.0, sumsq = 0.0;
      for (std::int64_t n = 0; n < N; ++n) {
        const float* slab = in + (n * C + c) * spatial;
        for (std::int64_t i = 0; i < spatial; ++i) {
          const double v = slab[i];
          sum += v;
          sumsq += v * v;
        }
      }
      const double mu = sum / static_cast<double>(M);
      double var = sumsq / static_cast<double>(M) - mu * mu;
      if (var < 0.0) var = 0.0;  // guard tiny negative from cancellation
      mean[static_cast<std::size_t>(c)] = static_cast<float>(mu);
      invstd[static_cast<std::size_t>(c)] =
          static_cast<float>(1.0 / std::sqrt(var + static_cast<double>(state.eps)));
      rm[c] = (1.0f - state.momentum) * rm[c] + state.momentum * static_cast<float>(mu);
      rv[c] = (1.0f - state.momentum) * rv[c] + state.momentum * static_cast<float>(var);
    }
  } else {
    const float* rm = state.running_mean.data().data();
    const float* rv = state.running_var.data().data();
    for (std::int64_t c = 0; c < C; ++c) {
      mean[static_cast<std::size_t>(c)] = rm[c];
      invstd[static_cast<std::size_t>(c)] =
          static_cast<float>(1.0 / std::sqrt(static_cast<double>(rv[c]) +
                                             static_cast<double>(state.eps)));
    }
  }

  for (std::int64_t n = 0; n < N; ++n) {
    for (std::int64_t c = 0; c < C; ++c) {
      const float* islab = in + (n * C + c) * spatial;
      float* oslab = o + (n * C + c) * spatial;
      const float mu = mean[static_cast<std::size_t>(c)];
      const float is = invstd[static_cast<std::size_t>(c)];
      const float gm = gamma[c], bt = beta[c];
      for (std::int64_t i = 0; i < spatial; ++i) oslab[i] = (islab[i] - mu) * is * gm + bt;
    }
  }

  if (wants_grad(tape, {&input, &state.gamma, &state.beta})) {
    out.set_requires_grad(true);
    Tensor in_t = input, o_t = out, gamma_t = state.gamma, beta_t = state.beta;
    const bool training = state.training;
    tape->record({"batchnorm3d",
                  {input.id(), state.gamma.id(), state.beta.id()},
                  out.id(),
                  [in_t, o_t, gamma_t, beta_t, mean, invstd, training, N, C, spatial]() mutable {
                    if (!o_t.has_grad()) return;
                    const float* x = in_t.data().data();
                    const float* go = o_t.grad().data();
                    const float* gm = gamma_t.data().data();
                    const std::int64_t M = N * spatial;
                    for (std::int64_t c = 0; c < C; ++c) {
                      const float mu = mean[static_cast<std::size_t>(c)];
                      const float is = invstd[static_cast<std::size_t>(c)];
                      double sum_dy = 0.0, sum_dy_xhat = 0.0;
                      for (std::int64_t n = 0; n < N; ++n) {
                        const std::int64_t off = (n * C + c) * spatial;
                        for (std::int64_t i = 0; i < spatial; ++i) {
                          const double dy = go[off + i];
                          sum_dy += dy;
                          sum_dy_xhat += dy * static_cast<double>((x[off + i] - mu) * is);
                        }
                      }
                      if (gamma_t.requires_grad()) {
                        gamma_t.grad()[static_cast<std::size_t>(c)] +=
                            static_cast<float>(sum_dy_xhat);
                      }
                      if (beta_t.requires_grad()) {
                        beta_t.grad()[static_cast<std::size_t>(c)] += static_cast<float>(sum_dy);
                      }
                      if (in_t.requires_grad()) {
                        auto gi = in_t.grad();
                        const double mean_dy = sum_dy / static_cast<double>(M);
                        const double mean_dy_xhat = sum_dy_xhat / static_cast<double>(M);
                        const double scale = static_cast<double>(gm[c]) * is;
                        for (std::int64_t n = 0; n < N; ++n) {
                          const std::int64_t off = (n * C + c) * spatial;
                          if (training) {
                            for (std::int64_t i = 0; i < spatial; ++i) {
                              const double xhat = (x[off + i] - mu) * is;
                              gi[off + i] += static_cast<float>(
                                  scale * (go[off + i] - mean_dy - xhat * mean_dy_xhat));
                            }
                          } else {
                            for (std::int64_t i = 0; i < spatial; ++i) {
                              gi[off + i] += static_cast<float>(scale * go[off + i]);
                            }
                          }
                        }
                      }
                    }
                  }});
  }
  return out;
}

Tensor leaky_relu(const Tensor& input, float slope, Tape* tape) {
  if (!input.defined()) throw DimensionError("leaky_relu on undefined tensor");
  Tensor out(input.shape());
  auto in = input.data();
  auto o = out.data();
  for (std::size_t i = 0; i < in.size(); ++i) o[i] = in[i] >= 0.0f ? in[i] : slope * in[i];

  if (wants_grad(tape, {&input})) {
    out.set_requires_grad(true);
    Tensor in_t = input, o_t = out;
    tape->record({"leaky_relu", {input.id()}, out.id(), [in_t, o_t, slope]() mutable {
                    if (!o_t.has_grad()) return;
                    auto gi = in_t.grad();
                    auto go = o_t.grad();
                    auto x = in_t.data();
                    // subgradient at 0 is 1
                    for (std::size_t i = 0; i < x.size(); ++i) {
                      gi[i] += x[i] >= 0.0f ? go[i] : slope * go[i];
                    }
                  }});
  }
  return out;
}

Tensor concat_channels(const std::vector<Tensor>& inputs, Tape* tape) {
  if (inputs.empty()) throw DimensionError("concat_channels needs at least one input");
  for (const Tensor& t : inputs) require_rank5(t, "concat_channels input");
  const Shape& first = inputs[0].shape();
  std::int64_t total_c = 0;
  for (const Tensor& t : inputs) {
    const Shape& s = t.shape();
    if (s[0] != first[0] || s[2] != first[2] || s[3] != first[3] || s[4] != first[4]) {
      throw DimensionError("concat_channels: non-channel dims differ: " + shape_str(first) +
                           " vs " + shape_str(s));
    }
    total_c += s[1];
  }
  const std::int64_t N = first[0], spatial = first[2] * first[3] * first[4];
  Tensor out({N, total_c, first[2], first[3], first[4]});
  float* o = out.data().data();
  for (std::int64_t n = 0; n < N; ++n) {
    std::int64_t c_off = 0;
    for (const Tensor& t : inputs) {
      const std::int64_t c = t.dim(1);
      const float* src = t.data().data() + n * c * spatial;
      std::memcpy(o + (n * total_c + c_off) * spatial, src,
                  static_cast<std::size_t>(c * spatial) * sizeof(float));
      c_off += c;
    }
  }

  bool any = false;
  for (const Tensor& t : inputs) any = any || t.requires_grad();
  if (tape && any) {
    out.set_requires_grad(true);
    std::vector<std::uint64_t> ids;
    std::vector<std::int64_t> extents;
    for (const Tensor& t : inputs) {
      ids.push_back(t.id());
      extents.push_back(t.dim(1));
    }
    std::vector<Tensor> ins = inputs;
    Tensor o_t = out;
    tape->record({"concat_channels", ids, out.id(), [ins, o_t, extents]() mutable {
                    if (!o_t.has_grad()) return;
                    Tensor go = Tensor::from_data(o_t.shape(),
                                                  {o_t.grad().begin(), o_t.grad().end()});
                    auto slices = concat_channels_backward(go, extents);
                    for (std::size_t i = 0; i < ins.size(); ++i) {
                      if (ins[i].requires_grad()) ins[i].accumulate_grad(slices[i].data());
                    }
                  }});
  }
  return out;
}

std::vector<Tensor> concat_channels_backward(const Tensor& grad_out,
                                             const std::vector<std::int64_t>& channel_extents) {
  require_rank5(grad_out, "concat_channels_backward grad");
  std::int64_t total_c = 0;
  for (std::int64_t c : channel_extents) total_c += c;
  if (grad_out.dim(1) != total_c) {
    throw DimensionError("concat_channels_backward: channel extents do not sum to grad channels");
  }
  const std::int64_t N = grad_out.dim(0);
  const std::int64_t spatial = grad_out.dim(2) * grad_out.dim(3) * grad_out.dim(4);
  const float* go = grad_out.data().data();
  std::vector<Tensor> slices;
  std::int64_t c_off = 0;
  for (std::int64_t c : channel_extents) {
    Tensor s({N, c, grad_out.dim(2), grad_out.dim(3), grad_out.dim(4)});
    float* dst = s.data().data();
    for (std::int64_t n = 0; n < N; ++n) {
      std::memcpy(dst + n * c * spatial, go + (n * total_c + c_off) * spatial,
                  static_cast<std::size_t>(c * spatial) * sizeof(float));
    }
    slices.push_back(std::move(s));
    c_off += c;
  }
  return slices;
}

Tensor add(const Tensor& a, const Tensor& b, Tape* tape) {
  if (!a.defined() || !b.defined() || a.shape() != b.shape()) {
    throw DimensionError("add: shapes differ");
  }
  Tensor out(a.shape());
  auto x = a.data();
  auto y = b.data();
  auto o = out.data();
  for (std::size_t i = 0; i < x.size(); ++i) o[i] = x[i] + y[i];

  if (wants_grad(tape, {&a, &b})) {
    out.set_requires_grad(true);
    Tensor a_t = a, b_t = b, o_t = out;
    tape->record({"add", {a.id(), b.id()}, out.id(), [a_t, b_t, o_t]() mutable {
                    if (!o_t.has_grad()) return;
                    auto go = o_t.grad();
                    if (a_t.requires_grad()) a_t.accumulate_grad(go);
                    if (b_t.requires_grad()) b_t.accumulate_grad(go);
                  }});
  }
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b, Tape* tape) {
  if (!a.defined() || !b.defined() || a.shape() != b.shape()) {
    throw DimensionError("mul: shapes differ");
  }
  Tensor out(a.shape());
  auto x = a.data();
  auto y = b.data();
  auto o = out.data();
  for (std::size_t i = 0; i < x.size(); ++i) o[i] = x[i] * y[i];

  if (wants_grad(tape, {&a, &b})) {
    out.set_requires_grad(true);
    Tensor a_t = a, b_t = b, o_t = out;
    tape->record({"mul", {a.id(), b.id()}, out.id(), [a_t, b_t, o_t]() mutable {
                    if (!o_t.has_grad()) return;
                    auto go = o_t.grad();
                    if (a_t.requires_grad()) {
                      auto ga = a_t.grad();
                      auto yv = b_t.data();
                      for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * yv[i];
                    }
                    if (b_t.requires_grad()) {
                      auto gb = b_t.grad();
                      auto xv = a_t.data();
                      for (std::size_t i = 0; i < go.size(); ++i) gb[i] += go[i] * xv[i];
                    }
                  }});
  }
  return out;
}

Tensor softmax_channels(const Tensor& logits, Tape* tape) {
  require_rank5(logits, "softmax_channels input");
  const std::int64_t N = logits.dim(0), C = logits.dim(1);
  const std::int64_t spatial = logits.dim(2) * logits.dim(3) * logits.dim(4);
  if (C < 1) throw DimensionError("softmax_channels needs at least one channel");

  Tensor out(logits.shape());
  const float* x = logits.data().data();
  float* p = out.data().data();
  for (std::int64_t n = 0; n < N; ++n) {
    const std::int64_t base = n * C * spatial;
    for (std::int64_t i = 0; i < spatial; ++i) {
      float m = x[base + i];
      for (std::int64_t c = 1; c < C; ++c) m = std::max(m, x[base + c * spatial + i]);
      double sum = 0.0;
      for (std::int64_t c = 0; c < C; ++c) {
        const double e = std::exp(static_cast<double>(x[base + c * spatial + i] - m));
        p[base + c * spatial + i] = static_cast<float>(e);
        sum += e;
      }
      const double inv = 1.0 / sum;
      for (std::int64_t c = 0; c < C; ++c) {
        p[base + c * spatial + i] = static_cast<float>(p[base + c * spatial + i] * inv);
      }
    }
  }

  if (wants_grad(tape, {&logits})) {
    out.set_requires_grad(true);
    Tensor x_t = logits, o_t = out;
    tape->record({"softmax_channels", {logits.id()}, out.id(), [x_t, o_t, N, C, spatial]() mutable {
                    if (!o_t.has_grad()) return;
                    auto gi = x_t.grad();
                    auto go = o_t.grad();
                    auto pr = o_t.data();
                    for (std::int64_t n = 0; n < N; ++n) {
                      const std::int64_t base = n * C * spatial;
                      for (std::int64_t i = 0; i < spatial; ++i) {
                        double dot = 0.0;
                        for (std::int64_t c = 0; c < C; ++c) {
                          const std::int64_t k = base + c * spatial + i;
                          dot += static_cast<double>(go[k]) * static_cast<double>(pr[k]);
                        }
                        for (std::int64_t c = 0; c < C; ++c) {
                          const std::int64_t k = base + c * spatial + i;
                          gi[k] += static_cast<float>(static_cast<double>(pr[k]) *
                                                      (static_cast<double>(go[k]) - dot));
                        }
                      }
                    }
                  }});
  }
  return out;
}

Tensor sum_all(const Tensor& x, Tape* tape) {
  if (!x.defined()) throw DimensionError("sum_all on undefined tensor");
  double acc = 0.0;
  for (float v : x.data()) acc += v;
  Tensor out = Tensor::full({1}, static_cast<float>(acc));

  if (wants_grad(tape, {&x})) {
    out.set_requires_grad(true);
    Tensor x_t = x, o_t = out;
    tape->record({"sum_all", {x.id()}, out.id(), [x_t, o_t]() mutable {
                    if (!o_t.has_grad()) return;
                    const float g = o_t.grad()[0];
                    auto gi = x_t.grad();
                    for (float& v : gi) v += g;
                  }});
  }
  return out;
}

double gradcheck(const std::function<Tensor(Tape&, std::vector<Tensor>&)>& fn,
                 std::vector<Tensor> inputs, double h) {
  for (Tensor& t : inputs) {
    t.set_requires_grad(true);
    t.zero_grad();
  }
  Tape tape;
  Tensor out = fn(tape, inputs);
  Tensor loss = sum_all(out, &tape);
  tape.backward(loss);

  std::vector<std::vector<double>> analytic;
  for (Tensor& t : inputs) {
    std::vector<double> g(static_cast<std::size_t>(t.numel()), 0.0);
    if (t.has_grad()) {
      auto gr = t.grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] = gr[i];
    }
    analytic.push_back(std::move(g));
  }

  const auto eval = [&]() {
    Tape scratch;
    Tensor o = fn(scratch, inputs);
    double s = 0.0;
    for (float v : o.data()) s += v;
    return s;
  };

  double max_rel = 0.0;
  for (std::size_t ti = 0; ti < inputs.size(); ++ti) {
    auto data = inputs[ti].data();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const float saved = data[i];
      data[i] = static_cast<float>(saved + h);
      const double f_plus = eval();
      data[i] = static_cast<float>(saved - h);
      const double f_minus = eval();
      data[i] = saved;
      const double numeric = (f_plus - f_minus) / (2.0 * h);
      const double ana = analytic[ti][i];
      const double denom = std::max({std::abs(ana), std::abs(numeric), 1e-8});
      max_rel = std::max(max_rel, std::abs(ana - numeric) / denom);
    }
  }
  return max_rel;
}

}  // namespace voxseg
