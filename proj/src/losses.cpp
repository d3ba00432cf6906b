#include "voxseg/losses.hpp"

#include <cmath>
#include <vector>

#include "voxseg/errors.hpp"
#include "voxseg/ops.hpp"

namespace voxseg {

namespace {

constexpr double kDiceEps = 1e-5;
constexpr double kBceClamp = 1e-7;

void check_pair(const Tensor& probs, const Tensor& onehot, const char* op) {
  if (!probs.defined() || probs.rank() != 5) {
    throw DimensionError(std::string(op) + " expects rank-5 [N,C,D,H,W] probabilities");
  }
  if (!onehot.defined() || onehot.shape() != probs.shape()) {
    throw DimensionError(std::string(op) + ": probs and onehot shapes differ");
  }
}

}  // namespace

Tensor soft_dice_loss(const Tensor& probs, const Tensor& onehot, Tape* tape) {
  check_pair(probs, onehot, "soft_dice_loss");
  const std::int64_t N = probs.dim(0), C = probs.dim(1);
  if (C < 2) throw DimensionError("soft_dice_loss needs a background plus foreground channels");
  const std::int64_t spatial = probs.dim(2) * probs.dim(3) * probs.dim(4);
  const std::int64_t fg = C - 1;  // channels 1..C-1

  const float* p = probs.data().data();
  const float* q = onehot.data().data();

  // per (batch, fg class): numerator A = 2*sum(pq)+eps, denominator
  // B = sum(p^2)+sum(q^2)+eps; saved for the analytic backward
  std::vector<double> A(static_cast<std::size_t>(N * fg));
  std::vector<double> B(static_cast<std::size_t>(N * fg));
  double mean_dice = 0.0;
  for (std::int64_t n = 0; n < N; ++n) {
    for (std::int64_t c = 1; c < C; ++c) {
      const std::int64_t off = (n * C + c) * spatial;
      double pq = 0.0, p2 = 0.0, q2 = 0.0;
      for (std::int64_t i = 0; i < spatial; ++i) {
        const double pv = p[off + i], qv = q[off + i];
        pq += pv * qv;
        p2 += pv * pv;
        q2 += qv * qv;
      }
      const double a = 2.0 * pq + kDiceEps;
      const double b = p2 + q2 + kDiceEps;
      A[static_cast<std::size_t>(n * fg + (c - 1))] = a;
      B[static_cast<std::size_t>(n * fg + (c - 1))] = b;
      mean_dice += a / b;
    }
  }
  mean_dice /= static_cast<double>(N * fg);
  Tensor out = Tensor::full({1}, static_cast<float>(1.0 - mean_dice));

  if (tape && probs.requires_grad()) {
    out.set_requires_grad(true);
    Tensor p_t = probs, q_t = onehot, o_t = out;
    tape->record(
        {"soft_dice_loss", {probs.id(), onehot.id()}, out.id(),
         [p_t, q_t, o_t, A, B, N, C, spatial, fg]() mutable {
           if (!o_t.has_grad()) return;
           const double g = o_t.grad()[0];
           const double scale = -g / static_cast<double>(N * fg);  // d(1 - mean)/d(dice)
           auto gp = p_t.grad();
           const float* pv = p_t.data().data();
           const float* qv = q_t.data().data();
           for (std::int64_t n = 0; n < N; ++n) {
             for (std::int64_t c = 1; c < C; ++c) {
               const std::int64_t off = (n * C + c) * spatial;
               const double a = A[static_cast<std::size_t>(n * fg + (c - 1))];
               const double b = B[static_cast<std::size_t>(n * fg + (c - 1))];
               const double inv_b2 = 1.0 / (b * b);
               for (std::int64_t i = 0; i < spatial; ++i) {
                 // d(a/b)/dp = (2q*b - a*2p) / b^2
                 const double d =
                     (2.0 * qv[off + i] * b - a * 2.0 * pv[off + i]) * inv_b2;
                 gp[static_cast<std::size_t>(off + i)] += static_cast<float>(scale * d);
               }
             }
           }
         }});
  }
  return out;
}

Tensor bce_loss(const Tensor& probs, const Tensor& onehot, Tape* tape) {
  check_pair(probs, onehot, "bce_loss");
  const float* p = probs.data().data();
  const float* q = onehot.data().data();
  const std::int64_t count = probs.numel();

  double acc = 0.0;
  for (std::int64_t i = 0; i < count; ++i) {
    const double pc = std::min(std::max(static_cast<double>(p[i]), kBceClamp), 1.0 - kBceClamp);
    const double qv = q[i];
    acc -= qv * std::log(pc) + (1.0 - qv) * std::log(1.0 - pc);
  }
  Tensor out = Tensor::full({1}, static_cast<float>(acc / static_cast<double>(count)));

  if (tape && probs.requires_grad()) {
    out.set_requires_grad(true);
    Tensor p_t = probs, q_t = onehot, o_t = out;
    tape->record({"bce_loss", {probs.id(), onehot.id()}, out.id(), [p_t, q_t, o_t, count]() mutable {
                    if (!o_t.has_grad()) return;
                    const double g = o_t.grad()[0] / static_cast<double>(count);
                    auto gp = p_t.grad();
                    const float* pv = p_t.data().data();
                    const float* qv = q_t.data().data();
                    for (std::int64_t i = 0; i < count; ++i) {
                      const double pd = pv[i];
                      // clamp active -> zero gradient
                      if (pd < kBceClamp || pd > 1.0 - kBceClamp) continue;
                      const double d = -(qv[i] / pd - (1.0 - qv[i]) / (1.0 - pd));
                      gp[static_cast<std::size_t>(i)] += static_cast<float>(g * d);
                    }
                  }});
  }
  return out;
}

LossValue combined_loss(const Tensor& probs, const Tensor& onehot, Tape* tape) {
  LossValue v;
  v.dice_part = soft_dice_loss(probs, onehot, tape);
  v.bce_part = bce_loss(probs, onehot, tape);
  v.total = add(v.dice_part, v.bce_part, tape);
  return v;
}

}  // namespace voxseg
