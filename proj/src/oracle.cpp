#include "voxseg/oracle.hpp"

#include <cmath>
#include <limits>

#include "voxseg/errors.hpp"

namespace voxseg::oracle {

Tensor naive_conv3d(const Tensor& input, const Tensor& weight, const Tensor& bias,
                    const std::array<std::int64_t, 3>& padding, std::int64_t dilation) {
  if (input.rank() != 5 || weight.rank() != 5) {
    throw DimensionError("naive_conv3d expects rank-5 input and weight");
  }
  const std::int64_t N = input.dim(0), Ci = input.dim(1);
  const std::int64_t Di = input.dim(2), Hi = input.dim(3), Wi = input.dim(4);
  const std::int64_t Co = weight.dim(0);
  const std::int64_t Kd = weight.dim(2), Kh = weight.dim(3), Kw = weight.dim(4);
  if (weight.dim(1) != Ci) throw DimensionError("naive_conv3d channel mismatch");
  const std::int64_t Do = Di + 2 * padding[0] - dilation * (Kd - 1);
  const std::int64_t Ho = Hi + 2 * padding[1] - dilation * (Kh - 1);
  const std::int64_t Wo = Wi + 2 * padding[2] - dilation * (Kw - 1);
  if (Do < 1 || Ho < 1 || Wo < 1) throw DimensionError("naive_conv3d output would be empty");

  Tensor out({N, Co, Do, Ho, Wo});
  const float* x = input.data().data();
  const float* w = weight.data().data();
  const float* b = bias.defined() ? bias.data().data() : nullptr;
  float* o = out.data().data();

  std::int64_t oi = 0;
  for (std::int64_t n = 0; n < N; ++n) {
    for (std::int64_t co = 0; co < Co; ++co) {
      for (std::int64_t od = 0; od < Do; ++od) {
        for (std::int64_t oh = 0; oh < Ho; ++oh) {
          for (std::int64_t ow = 0; ow < Wo; ++ow, ++oi) {
            double acc = b ? static_cast<double>(b[co]) : 0.0;
            for (std::int64_t ci = 0; ci < Ci; ++ci) {
              for (std::int64_t kd = 0; kd < Kd; ++kd) {
                const std::int64_t id = od - padding[0] + kd * dilation;
                if (id < 0 || id >= Di) continue;
                for (std::int64_t kh = 0; kh < Kh; ++kh) {
                  const std::int64_t ih = oh - padding[1] + kh * dilation;
                  if (ih < 0 || ih >= Hi) continue;
                  for (std::int64_t kw = 0; kw < Kw; ++kw) {
                    const std::int64_t iw = ow - padding[2] + kw * dilation;
                    if (iw < 0 || iw >= Wi) continue;
                    const double xv = x[((n * Ci + ci) * Di + id) * Hi * Wi + ih * Wi + iw];
                    const double wv = w[((co * Ci + ci) * Kd + kd) * Kh * Kw + kh * Kw + kw];
                    acc += xv * wv;
                  }
                }
              }
            }
            o[oi] = static_cast<float>(acc);
          }
        }
      }
    }
  }
  return out;
}

std::vector<double> fd_grad(const std::function<double(const Tensor&)>& fn, Tensor x, double h) {
  auto data = x.data();
  std::vector<double> grad(data.size(), 0.0);
  for (std::size_t i = 0; i < data.size(); ++i) {
    const float saved = data[i];
    data[i] = static_cast<float>(saved + h);
    const double fp = fn(x);
    data[i] = static_cast<float>(saved - h);
    const double fm = fn(x);
    data[i] = saved;
    grad[i] = (fp - fm) / (2.0 * h);
  }
  return grad;
}

namespace {

// Surface voxel coordinates (d,h,w order) for one class, reimplemented here
// from scratch so the oracle does not share code with metrics.cpp.
std::vector<std::array<std::int64_t, 3>> surface(const Tensor& vol, int cls) {
  const std::int64_t D = vol.dim(0), H = vol.dim(1), W = vol.dim(2);
  const float* v = vol.data().data();
  const auto is_cls = [&](std::int64_t d, std::int64_t h, std::int64_t w) {
    if (d < 0 || d >= D || h < 0 || h >= H || w < 0 || w >= W) return false;
    return static_cast<int>(v[(d * H + h) * W + w]) == cls;
  };
  std::vector<std::array<std::int64_t, 3>> out;
  for (std::int64_t d = 0; d < D; ++d) {
    for (std::int64_t h = 0; h < H; ++h) {
      for (std::int64_t w = 0; w < W; ++w) {
        if (!is_cls(d, h, w)) continue;
        if (!is_cls(d - 1, h, w) || !is_cls(d + 1, h, w) || !is_cls(d, h - 1, w) ||
            !is_cls(d, h + 1, w) || !is_cls(d, h, w - 1) || !is_cls(d, h, w + 1)) {
          out.push_back({d, h, w});
        }
      }
    }
  }
  return out;
}

// Count of voxels in `from` whose nearest neighbour in `to` lies within tau.
// Exact squared-distance comparison, all pairs.
std::size_t within(const std::vector<std::array<std::int64_t, 3>>& from,
                   const std::vector<std::array<std::int64_t, 3>>& to,
                   const std::array<double, 3>& sp, double tau_sq) {
  std::size_t count = 0;
  for (const auto& a : from) {
    double best = std::numeric_limits<double>::infinity();
    for (const auto& b : to) {
      const double dd = static_cast<double>(a[0] - b[0]) * sp[0];
      const double dh = static_cast<double>(a[1] - b[1]) * sp[1];
      const double dw = static_cast<double>(a[2] - b[2]) * sp[2];
      const double d2 = dd * dd + dh * dh + dw * dw;
      if (d2 < best) best = d2;
    }
    if (best <= tau_sq) ++count;
  }
  return count;
}

}  // namespace

double brute_nsd(const Tensor& pred, const Tensor& ref, int cls,
                 const std::array<double, 3>& spacing, double tau_mm) {
  if (pred.rank() != 3 || ref.rank() != 3 || pred.shape() != ref.shape()) {
    throw DimensionError("brute_nsd expects matching rank-3 volumes");
  }
  const auto sp = surface(pred, cls);
  const auto sr = surface(ref, cls);
  if (sp.empty() && sr.empty()) return 1.0;
  if (sp.empty() || sr.empty()) return 0.0;
  const double tau_sq = tau_mm * tau_mm;
  const std::size_t hits = within(sp, sr, spacing, tau_sq) + within(sr, sp, spacing, tau_sq);
  return static_cast<double>(hits) / static_cast<double>(sp.size() + sr.size());
}

}  // namespace voxseg::oracle
