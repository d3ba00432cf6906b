#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "voxseg/errors.hpp"
#include "voxseg/losses.hpp"
#include "voxseg/ops.hpp"
#include "voxseg/rng.hpp"

using namespace voxseg;

namespace {

// random label volume -> one-hot [1,C,D,H,W]
Tensor random_onehot(std::int64_t C, std::int64_t s, Rng& rng) {
  Tensor oh(Shape{1, C, s, s, s});
  const std::int64_t spatial = s * s * s;
  for (std::int64_t i = 0; i < spatial; ++i) {
    const std::int64_t c = static_cast<std::int64_t>(rng.bounded(static_cast<std::uint64_t>(C)));
    oh.data()[static_cast<std::size_t>(c * spatial + i)] = 1.0f;
  }
  return oh;
}

Tensor random_probs(std::int64_t C, std::int64_t s, Rng& rng) {
  Tensor logits(Shape{1, C, s, s, s});
  for (float& v : logits.data()) v = static_cast<float>(rng.uniform(-2.0, 2.0));
  return softmax_channels(logits, nullptr);
}

}  // namespace

TEST_CASE("soft dice: perfect, half-confidence, and disjoint predictions") {
  Rng rng(1);
  Tensor oh = random_onehot(3, 8, rng);
  CHECK(soft_dice_loss(oh, oh, nullptr).scalar() < 1e-4);  // perfect overlap

  // background + one foreground class; fg probs 0.5 against fg onehot 1:
  // dice = (2*0.5V)/(0.25V + V) = 0.8 -> loss 0.2
  const std::int64_t V = 4 * 4 * 4;
  Tensor oh2(Shape{1, 2, 4, 4, 4});
  Tensor p2(Shape{1, 2, 4, 4, 4});
  for (std::int64_t i = 0; i < V; ++i) {
    oh2.data()[static_cast<std::size_t>(V + i)] = 1.0f;
    p2.data()[static_cast<std::size_t>(i)] = 0.5f;
    p2.data()[static_cast<std::size_t>(V + i)] = 0.5f;
  }
  CHECK(soft_dice_loss(p2, oh2, nullptr).scalar() == doctest::Approx(0.2).epsilon(1e-4));

  // all-zero probs against all-ones onehot: dice ~ 0, loss ~ 1
  Tensor zero = Tensor::zeros({1, 2, 4, 4, 4});
  CHECK(soft_dice_loss(zero, oh2, nullptr).scalar() == doctest::Approx(1.0).epsilon(1e-3));

  CHECK_THROWS_AS(soft_dice_loss(p2, Tensor::zeros({1, 2, 4, 4, 2}), nullptr), DimensionError);
  CHECK_THROWS_AS(soft_dice_loss(Tensor::zeros({1, 1, 2, 2, 2}),
                                 Tensor::zeros({1, 1, 2, 2, 2}), nullptr),
                  DimensionError);  // needs >= 2 channels
}

TEST_CASE("bce: exact targets, half-confidence, and maximally wrong") {
  Rng rng(2);
  Tensor oh = random_onehot(3, 8, rng);
  CHECK(bce_loss(oh, oh, nullptr).scalar() < 1e-6);  // p = q in {0,1}, clamp floor

  Tensor half = Tensor::full({1, 3, 4, 4, 4}, 0.5f);
  CHECK(bce_loss(half, oh.defined() ? random_onehot(3, 4, rng) : oh, nullptr).scalar() ==
        doctest::Approx(std::log(2.0)).epsilon(1e-6));

  // p = 1-q everywhere: every term hits the clamp, -ln(1e-7) = 16.118...
  Tensor oh3 = random_onehot(3, 4, rng);
  Tensor flipped(oh3.shape());
  for (std::size_t i = 0; i < flipped.data().size(); ++i) {
    flipped.data()[i] = 1.0f - oh3.data()[i];
  }
  CHECK(bce_loss(flipped, oh3, nullptr).scalar() ==
        doctest::Approx(-std::log(1e-7)).epsilon(1e-4));

  CHECK_THROWS_AS(bce_loss(half, Tensor::zeros({1, 3, 4, 4, 2}), nullptr), DimensionError);
}

TEST_CASE("combined loss is exactly additive with finite non-negative parts") {
  Rng rng(3);
  for (int i = 0; i < 10; ++i) {
    Tensor probs = random_probs(3, 6, rng);
    Tensor oh = random_onehot(3, 6, rng);
    LossValue v = combined_loss(probs, oh, nullptr);
    CHECK(v.total.scalar() == v.dice_part.scalar() + v.bce_part.scalar());  // exact
    CHECK(v.dice_part.scalar() >= 0.0f);
    CHECK(v.dice_part.scalar() <= 1.0f);
    CHECK(v.bce_part.scalar() >= 0.0f);
    CHECK(v.bce_part.scalar() <= 16.12f);
    CHECK(v.total.all_finite());
  }

  Tensor oh = random_onehot(3, 8, rng);
  CHECK(combined_loss(oh, oh, nullptr).total.scalar() < 1e-4);  // perfect prediction

  // p = 0.5, one foreground class fully on: ln 2 + 0.2
  const std::int64_t V = 4 * 4 * 4;
  Tensor oh2(Shape{1, 2, 4, 4, 4});
  for (std::int64_t i = 0; i < V; ++i) oh2.data()[static_cast<std::size_t>(V + i)] = 1.0f;
  Tensor half = Tensor::full({1, 2, 4, 4, 4}, 0.5f);
  LossValue v = combined_loss(half, oh2, nullptr);
  CHECK(v.total.scalar() == doctest::Approx(std::log(2.0) + 0.2).epsilon(1e-4));
}

TEST_CASE("moving probs toward the target never increases either part") {
  Rng rng(4);
  for (int inst = 0; inst < 20; ++inst) {
    Tensor probs = random_probs(3, 5, rng);
    Tensor oh = random_onehot(3, 5, rng);
    double prev_dice = 1e9, prev_bce = 1e9;
    for (int step = 0; step <= 10; ++step) {
      const float t = static_cast<float>(step) / 10.0f;
      Tensor interp(probs.shape());
      for (std::size_t i = 0; i < interp.data().size(); ++i) {
        interp.data()[i] = probs.data()[i] + t * (oh.data()[i] - probs.data()[i]);
      }
      LossValue v = combined_loss(interp, oh, nullptr);
      CHECK(v.dice_part.scalar() <= prev_dice + 1e-6);
      CHECK(v.bce_part.scalar() <= prev_bce + 1e-6);
      prev_dice = v.dice_part.scalar();
      prev_bce = v.bce_part.scalar();
    }
  }
}

TEST_CASE("gradcheck: dice and bce against finite differences") {
  Rng rng(5);
  // probs well inside (0,1) keep bce away from its clamp
  Tensor probs(Shape{1, 3, 4, 4, 4});
  for (float& v : probs.data()) v = static_cast<float>(rng.uniform(0.1, 0.9));
  Tensor oh = random_onehot(3, 4, rng);

  const double dice_err = gradcheck(
      [oh](Tape& t, std::vector<Tensor>& in) { return soft_dice_loss(in[0], oh, &t); }, {probs});
  CHECK(dice_err < 1e-2);

  const double bce_err = gradcheck(
      [oh](Tape& t, std::vector<Tensor>& in) { return bce_loss(in[0], oh, &t); }, {probs});
  CHECK(bce_err < 1e-2);
}

TEST_CASE("gradcheck: combined loss through softmax on random logits") {
  Rng rng(6);
  Tensor logits(Shape{1, 3, 4, 4, 4});
  for (float& v : logits.data()) v = static_cast<float>(rng.uniform(-1.5, 1.5));
  const double err = gradcheck(
      [&rng](Tape& t, std::vector<Tensor>& in) {
        (void)rng;
        Tensor probs = softmax_channels(in[0], &t);
        Rng orng(7);
        Tensor oh(in[0].shape());
        const std::int64_t spatial = 64;
        for (std::int64_t i = 0; i < spatial; ++i) {
          const std::int64_t c = static_cast<std::int64_t>(orng.bounded(3));
          oh.data()[static_cast<std::size_t>(c * spatial + i)] = 1.0f;
        }
        return combined_loss(probs, oh, &t).total;
      },
      {logits}, 4e-2);  // the float32 store of the scalar loss sets the FD
                        // noise floor; a larger step amortizes it and the
                        // composite is smooth enough that truncation stays
                        // far below the tolerance
  CHECK(err < 1e-2);
}

TEST_CASE("loss gradients flow through the tape end to end") {
  Rng rng(8);
  Tensor logits(Shape{1, 3, 2, 2, 2});
  for (float& v : logits.data()) v = static_cast<float>(rng.uniform(-1.0, 1.0));
  logits.set_requires_grad(true);
  Tensor oh = random_onehot(3, 2, rng);

  Tape tape;
  Tensor probs = softmax_channels(logits, &tape);
  LossValue v = combined_loss(probs, oh, &tape);
  tape.backward(v.total);

  REQUIRE(logits.has_grad());
  double norm = 0.0;
  for (float g : logits.grad()) norm += std::abs(g);
  CHECK(norm > 0.0);
}
