#include "voxseg/synth.hpp"

#include <algorithm>
#include <cmath>

#include "voxseg/errors.hpp"
#include "voxseg/rng.hpp"

namespace voxseg::synth {

namespace {

constexpr float kBackgroundMean = 0.2f;
constexpr float kHeadMean = 0.7f;
constexpr float kBodyMean = 1.0f;

struct Ellipsoid {
  std::array<double, 3> center;  // voxel coordinates
  std::array<double, 3> radii;   // voxel units
  std::array<std::array<double, 3>, 3> rot;  // row-major rotation
};

std::array<std::array<double, 3>, 3> euler_rotation(double a, double b, double c) {
  const double ca = std::cos(a), sa = std::sin(a);
  const double cb = std::cos(b), sb = std::sin(b);
  const double cc = std::cos(c), sc = std::sin(c);
  // R = Rz(a) * Ry(b) * Rx(c), any fixed convention works here
  return {{{ca * cb, ca * sb * sc - sa * cc, ca * sb * cc + sa * sc},
           {sa * cb, sa * sb * sc + ca * cc, sa * sb * cc - ca * sc},
           {-sb, cb * sc, cb * cc}}};
}

bool inside(const Ellipsoid& e, double d, double h, double w) {
  const double x = d - e.center[0], y = h - e.center[1], z = w - e.center[2];
  double q = 0.0;
  for (int i = 0; i < 3; ++i) {
    const double u = (e.rot[i][0] * x + e.rot[i][1] * y + e.rot[i][2] * z) / e.radii[i];
    q += u * u;
  }
  return q <= 1.0;
}

}  // namespace

std::pair<Volume, LabelMap> gen_case(const SynthSpec& spec) {
  if (spec.dims.size() != 3) {
    throw DimensionError("gen_case expects 3 dims, got " + shape_str(spec.dims));
  }
  for (std::int64_t d : spec.dims) {
    if (d < 16) throw ConfigError("gen_case dims must be >= 16, got " + shape_str(spec.dims));
  }

  const std::int64_t D = spec.dims[0], H = spec.dims[1], W = spec.dims[2];
  const double s = static_cast<double>(std::min({D, H, W})) / 32.0;  // scale to volume size

  Rng rng(derive_stream(spec.seed, {hash_string("synth-case")}));

  // Draw order is part of the format: head jitter, head radii, head angles,
  // body radii, body angles, offset axis. Changing it changes every case.
  Ellipsoid head;
  for (int i = 0; i < 3; ++i) {
    head.center[static_cast<std::size_t>(i)] =
        static_cast<double>(spec.dims[static_cast<std::size_t>(i)]) / 2.0 +
        rng.uniform(-1.5, 1.5) * s;
  }
  for (int i = 0; i < 3; ++i) head.radii[static_cast<std::size_t>(i)] = rng.uniform(5.0, 6.0) * s;
  {
    const double a = rng.uniform(-3.14159265358979, 3.14159265358979);
    const double b = rng.uniform(-3.14159265358979, 3.14159265358979);
    const double c = rng.uniform(-3.14159265358979, 3.14159265358979);
    head.rot = euler_rotation(a, b, c);
  }

  Ellipsoid body;
  for (int i = 0; i < 3; ++i) body.radii[static_cast<std::size_t>(i)] = rng.uniform(4.2, 5.2) * s;
  {
    const double a = rng.uniform(-3.14159265358979, 3.14159265358979);
    const double b = rng.uniform(-3.14159265358979, 3.14159265358979);
    const double c = rng.uniform(-3.14159265358979, 3.14159265358979);
    body.rot = euler_rotation(a, b, c);
  }

  // Place the body beyond the head along one axis, on whichever side has
  // more room. The gap of 1.5·s keeps the components strictly disjoint even
  // after rotation (rotations never exceed the max radius).
  const int axis = static_cast<int>(rng.bounded(3));
  const double max_rh = *std::max_element(head.radii.begin(), head.radii.end());
  const double max_rb = *std::max_element(body.radii.begin(), body.radii.end());
  const double mid = (static_cast<double>(spec.dims[static_cast<std::size_t>(axis)]) - 1.0) / 2.0;
  const double dir = head.center[static_cast<std::size_t>(axis)] <= mid ? 1.0 : -1.0;
  body.center = head.center;
  body.center[static_cast<std::size_t>(axis)] += dir * (max_rh + max_rb + 1.5 * s);

  Volume vol{Tensor(spec.dims), spec.spacing, spec.id};
  LabelMap lab{Tensor(spec.dims), spec.spacing, spec.id};
  float* iv = vol.data.data().data();
  float* lv = lab.labels.data().data();

  std::int64_t idx = 0;
  for (std::int64_t d = 0; d < D; ++d) {
    for (std::int64_t h = 0; h < H; ++h) {
      for (std::int64_t w = 0; w < W; ++w, ++idx) {
        const double dd = static_cast<double>(d);
        const double dh = static_cast<double>(h);
        const double dw = static_cast<double>(w);
        float mean = kBackgroundMean;
        float label = 0.0f;
        if (inside(head, dd, dh, dw)) {
          mean = kHeadMean;
          label = 1.0f;
        } else if (inside(body, dd, dh, dw)) {
          mean = kBodyMean;
          label = 2.0f;
        }
        lv[idx] = label;
        iv[idx] = mean;
      }
    }
  }
  if (spec.noise_std > 0.0) {
    const std::int64_t n = D * H * W;
    for (std::int64_t i = 0; i < n; ++i) {
      iv[i] += static_cast<float>(spec.noise_std * rng.normal());
    }
  }
  return {std::move(vol), std::move(lab)};
}

std::vector<std::pair<Volume, LabelMap>> make_dataset(std::size_t n, std::uint64_t base_seed,
                                                      SynthSpec proto) {
  std::vector<std::pair<Volume, LabelMap>> cases;
  cases.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    SynthSpec spec = proto;
    spec.seed = derive_stream(base_seed, {static_cast<std::uint64_t>(i)});
    spec.id = "synth-" + std::to_string(i);
    cases.push_back(gen_case(spec));
  }
  return cases;
}

}  // namespace voxseg::synth
