#include "voxseg/pipeline.hpp"

#include <algorithm>
#include <cmath>

#include "voxseg/errors.hpp"

namespace voxseg {

Volume zscore_normalize(const Volume& v) {
  if (!v.data.defined() || v.data.rank() != 3) {
    throw DimensionError("zscore_normalize expects a rank-3 volume");
  }
  auto src = v.data.data();
  double sum = 0.0, sumsq = 0.0;
  for (float x : src) {
    sum += x;
    sumsq += static_cast<double>(x) * x;
  }
  const double n = static_cast<double>(src.size());
  const double mean = sum / n;
  double var = sumsq / n - mean * mean;
  if (var < 0.0) var = 0.0;
  const double denom = std::max(std::sqrt(var), 1e-8);

  Volume out{Tensor(v.data.shape()), v.spacing, v.id};
  auto dst = out.data.data();
  for (std::size_t i = 0; i < src.size(); ++i) {
    dst[i] = static_cast<float>((src[i] - mean) / denom);
  }
  return out;
}

SplitPlan make_split(const std::vector<std::string>& ids, std::uint64_t seed) {
  if (ids.size() < 10) {
    throw ConfigError("make_split needs at least 10 ids, got " + std::to_string(ids.size()));
  }
  std::vector<std::string> shuffled = ids;
  Rng rng(derive_stream(seed, {hash_string("split")}));
  rng.shuffle(shuffled);

  SplitPlan plan;
  plan.seed = seed;
  const std::size_t n_test = (shuffled.size() + 9) / 10;  // ceil(10%)
  plan.test_ids.assign(shuffled.begin(), shuffled.begin() + static_cast<std::ptrdiff_t>(n_test));
  std::size_t fold = 0;
  for (std::size_t i = n_test; i < shuffled.size(); ++i) {
    plan.folds[fold].push_back(shuffled[i]);
    fold = (fold + 1) % 9;
  }
  return plan;
}

std::pair<Tensor, Placement> pad_or_crop(const Tensor& vol, const Shape& target, float fill) {
  if (!vol.defined() || vol.rank() != 3 || target.size() != 3) {
    throw DimensionError("pad_or_crop expects a rank-3 volume and 3 target dims");
  }
  for (std::int64_t t : target) {
    if (t < 16 || t % 16 != 0) {
      throw ConfigError("pad_or_crop target dims must be multiples of 16 and >= 16, got " +
                        shape_str(target));
    }
  }

  Placement p;
  p.original = vol.shape();
  for (int a = 0; a < 3; ++a) {
    const std::int64_t in = vol.dim(a), out = target[static_cast<std::size_t>(a)];
    if (in <= out) {
      p.src_lo[static_cast<std::size_t>(a)] = 0;
      p.len[static_cast<std::size_t>(a)] = in;
      p.dst_lo[static_cast<std::size_t>(a)] = (out - in) / 2;
    } else {
      p.src_lo[static_cast<std::size_t>(a)] = (in - out) / 2;
      p.len[static_cast<std::size_t>(a)] = out;
      p.dst_lo[static_cast<std::size_t>(a)] = 0;
    }
  }

  Tensor out = Tensor::full(target, fill);
  const float* src = vol.data().data();
  float* dst = out.data().data();
  const std::int64_t iH = vol.dim(1), iW = vol.dim(2);
  const std::int64_t oH = target[1], oW = target[2];
  for (std::int64_t d = 0; d < p.len[0]; ++d) {
    for (std::int64_t h = 0; h < p.len[1]; ++h) {
      const float* srow = src + ((p.src_lo[0] + d) * iH + p.src_lo[1] + h) * iW + p.src_lo[2];
      float* drow = dst + ((p.dst_lo[0] + d) * oH + p.dst_lo[1] + h) * oW + p.dst_lo[2];
      std::copy(srow, srow + p.len[2], drow);
    }
  }
  return {out, p};
}

Tensor invert_pad_or_crop(const Tensor& processed, const Placement& p, float fill) {
  if (!processed.defined() || processed.rank() != 3) {
    throw DimensionError("invert_pad_or_crop expects a rank-3 volume");
  }
  for (int a = 0; a < 3; ++a) {
    if (p.dst_lo[static_cast<std::size_t>(a)] + p.len[static_cast<std::size_t>(a)] >
        processed.dim(a)) {
      throw DimensionError("invert_pad_or_crop: placement does not fit the processed volume");
    }
  }
  Tensor out = Tensor::full(p.original, fill);
  const float* src = processed.data().data();
  float* dst = out.data().data();
  const std::int64_t iH = processed.dim(1), iW = processed.dim(2);
  const std::int64_t oH = p.original[1], oW = p.original[2];
  for (std::int64_t d = 0; d < p.len[0]; ++d) {
    for (std::int64_t h = 0; h < p.len[1]; ++h) {
      const float* srow = src + ((p.dst_lo[0] + d) * iH + p.dst_lo[1] + h) * iW + p.dst_lo[2];
      float* drow = dst + ((p.src_lo[0] + d) * oH + p.src_lo[1] + h) * oW + p.src_lo[2];
      std::copy(srow, srow + p.len[2], drow);
    }
  }
  return out;
}

AugmentParams sample_augment(Rng& rng, double max_angle_deg, double flip_prob) {
  AugmentParams p;
  for (int a = 0; a < 3; ++a) {
    p.angles_deg[static_cast<std::size_t>(a)] = rng.uniform(-max_angle_deg, max_angle_deg);
  }
  for (int a = 0; a < 3; ++a) p.flips[static_cast<std::size_t>(a)] = rng.bernoulli(flip_prob);
  return p;
}

namespace {

using Mat3 = std::array<std::array<double, 3>, 3>;

Mat3 matmul(const Mat3& a, const Mat3& b) {
  Mat3 c{};
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j)
      for (int k = 0; k < 3; ++k) c[i][j] += a[i][k] * b[k][j];
  return c;
}

// rotation about one coordinate axis; the other two coordinates mix
Mat3 axis_rotation(int axis, double rad) {
  const double c = std::cos(rad), s = std::sin(rad);
  const int u = (axis + 1) % 3, v = (axis + 2) % 3;
  Mat3 m{};
  m[axis][axis] = 1.0;
  m[u][u] = c;
  m[u][v] = -s;
  m[v][u] = s;
  m[v][v] = c;
  return m;
}

Mat3 transpose(const Mat3& m) {
  Mat3 t{};
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) t[i][j] = m[j][i];
  return t;
}

void flip_inplace(Tensor& t, const std::array<bool, 3>& flips) {
  const std::int64_t D = t.dim(0), H = t.dim(1), W = t.dim(2);
  float* v = t.data().data();
  const auto at = [&](std::int64_t d, std::int64_t h, std::int64_t w) -> float& {
    return v[(d * H + h) * W + w];
  };
  if (flips[0]) {
    for (std::int64_t d = 0; d < D / 2; ++d)
      for (std::int64_t h = 0; h < H; ++h)
        for (std::int64_t w = 0; w < W; ++w) std::swap(at(d, h, w), at(D - 1 - d, h, w));
  }
  if (flips[1]) {
    for (std::int64_t d = 0; d < D; ++d)
      for (std::int64_t h = 0; h < H / 2; ++h)
        for (std::int64_t w = 0; w < W; ++w) std::swap(at(d, h, w), at(d, H - 1 - h, w));
  }
  if (flips[2]) {
    for (std::int64_t d = 0; d < D; ++d)
      for (std::int64_t h = 0; h < H; ++h)
        for (std::int64_t w = 0; w < W / 2; ++w) std::swap(at(d, h, w), at(d, h, W - 1 - w));
  }
}

}  // namespace

std::pair<Volume, LabelMap> augment_with(const Volume& v, const LabelMap& l,
                                         const AugmentParams& p) {
  if (!v.data.defined() || !l.labels.defined() || v.data.shape() != l.labels.shape()) {
    throw DimensionError("augment: image and labels must share a shape");
  }
  const std::int64_t D = v.data.dim(0), H = v.data.dim(1), W = v.data.dim(2);

  Tensor img, lab;
  const bool rotate = p.angles_deg[0] != 0.0 || p.angles_deg[1] != 0.0 || p.angles_deg[2] != 0.0;
  if (!rotate) {
    img = v.data.clone();
    lab = l.labels.clone();
  } else {
    constexpr double kDegToRad = 3.14159265358979323846 / 180.0;
    const Mat3 r = matmul(axis_rotation(0, p.angles_deg[0] * kDegToRad),
                          matmul(axis_rotation(1, p.angles_deg[1] * kDegToRad),
                                 axis_rotation(2, p.angles_deg[2] * kDegToRad)));
    const Mat3 rinv = transpose(r);  // orthogonal

    // rotate about the volume center, working in millimetres
    const std::array<double, 3> sp = v.spacing;
    const std::array<double, 3> center{(static_cast<double>(D) - 1.0) / 2.0 * sp[0],
                                       (static_cast<double>(H) - 1.0) / 2.0 * sp[1],
                                       (static_cast<double>(W) - 1.0) / 2.0 * sp[2]};
    img = Tensor(v.data.shape());
    lab = Tensor(l.labels.shape());
    const float* iv = v.data.data().data();
    const float* lv = l.labels.data().data();
    float* io = img.data().data();
    float* lo = lab.data().data();

    const auto image_at = [&](std::int64_t d, std::int64_t h, std::int64_t w) -> double {
      if (d < 0 || d >= D || h < 0 || h >= H || w < 0 || w >= W) return 0.0;
      return iv[(d * H + h) * W + w];
    };

    std::int64_t oi = 0;
    for (std::int64_t d = 0; d < D; ++d) {
      for (std::int64_t h = 0; h < H; ++h) {
        for (std::int64_t w = 0; w < W; ++w, ++oi) {
          const double pd = static_cast<double>(d) * sp[0] - center[0];
          const double ph = static_cast<double>(h) * sp[1] - center[1];
          const double pw = static_cast<double>(w) * sp[2] - center[2];
          const double sd =
              (rinv[0][0] * pd + rinv[0][1] * ph + rinv[0][2] * pw + center[0]) / sp[0];
          const double sh =
              (rinv[1][0] * pd + rinv[1][1] * ph + rinv[1][2] * pw + center[1]) / sp[1];
          const double sw =
              (rinv[2][0] * pd + rinv[2][1] * ph + rinv[2][2] * pw + center[2]) / sp[2];

          // image: trilinear
          const std::int64_t fd = static_cast<std::int64_t>(std::floor(sd));
          const std::int64_t fh = static_cast<std::int64_t>(std::floor(sh));
          const std::int64_t fw = static_cast<std::int64_t>(std::floor(sw));
          const double td = sd - static_cast<double>(fd);
          const double th = sh - static_cast<double>(fh);
          const double tw = sw - static_cast<double>(fw);
          double acc = 0.0;
          for (int cd = 0; cd < 2; ++cd)
            for (int ch = 0; ch < 2; ++ch)
              for (int cw = 0; cw < 2; ++cw) {
                const double wgt = (cd ? td : 1.0 - td) * (ch ? th : 1.0 - th) *
                                   (cw ? tw : 1.0 - tw);
                if (wgt != 0.0) acc += wgt * image_at(fd + cd, fh + ch, fw + cw);
              }
          io[oi] = static_cast<float>(acc);

          // labels: nearest neighbour, background outside
          const std::int64_t nd = static_cast<std::int64_t>(std::llround(sd));
          const std::int64_t nh = static_cast<std::int64_t>(std::llround(sh));
          const std::int64_t nw = static_cast<std::int64_t>(std::llround(sw));
          lo[oi] = (nd < 0 || nd >= D || nh < 0 || nh >= H || nw < 0 || nw >= W)
                       ? 0.0f
                       : lv[(nd * H + nh) * W + nw];
        }
      }
    }
  }

  flip_inplace(img, p.flips);
  flip_inplace(lab, p.flips);
  return {Volume{img, v.spacing, v.id}, LabelMap{lab, l.spacing, l.id}};
}

std::pair<Volume, LabelMap> augment(const Volume& v, const LabelMap& l, Rng& rng,
                                    double max_angle_deg, double flip_prob) {
  return augment_with(v, l, sample_augment(rng, max_angle_deg, flip_prob));
}

Tensor onehot(const LabelMap& l, std::int64_t num_classes) {
  if (!l.labels.defined() || l.labels.rank() != 3) {
    throw DimensionError("onehot expects rank-3 labels");
  }
  const std::int64_t D = l.labels.dim(0), H = l.labels.dim(1), W = l.labels.dim(2);
  const std::int64_t spatial = D * H * W;
  Tensor out(Shape{1, num_classes, D, H, W});
  auto src = l.labels.data();
  float* dst = out.data().data();
  for (std::int64_t i = 0; i < spatial; ++i) {
    const float v = src[static_cast<std::size_t>(i)];
    const std::int64_t c = static_cast<std::int64_t>(v);
    if (static_cast<float>(c) != v || c < 0 || c >= num_classes) {
      throw DataError("onehot: label value " + std::to_string(v) + " outside [0, " +
                      std::to_string(num_classes) + ")");
    }
    dst[c * spatial + i] = 1.0f;
  }
  return out;
}

}  // namespace voxseg
