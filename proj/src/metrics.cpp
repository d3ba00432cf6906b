#include "voxseg/metrics.hpp"

#include <cmath>
#include <cstdint>

#include "voxseg/errors.hpp"

namespace voxseg {

namespace {

void check_masks(const Tensor& a, const Tensor& b, const char* op) {
  if (!a.defined() || !b.defined() || a.rank() != 3 || b.rank() != 3 || a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + " expects two matching rank-3 [D,H,W] volumes");
  }
}

struct OverlapCounts {
  std::int64_t a = 0, b = 0, both = 0;
};

OverlapCounts count_overlap(const Tensor& pred, const Tensor& gt) {
  OverlapCounts c;
  auto p = pred.data();
  auto g = gt.data();
  for (std::size_t i = 0; i < p.size(); ++i) {
    const bool ip = p[i] != 0.0f, ig = g[i] != 0.0f;
    c.a += ip;
    c.b += ig;
    c.both += ip && ig;
  }
  return c;
}

std::vector<std::array<std::int64_t, 3>> surface_indices(const Tensor& mask) {
  const std::int64_t D = mask.dim(0), H = mask.dim(1), W = mask.dim(2);
  const float* v = mask.data().data();
  const auto fg = [&](std::int64_t d, std::int64_t h, std::int64_t w) {
    if (d < 0 || d >= D || h < 0 || h >= H || w < 0 || w >= W) return false;
    return v[(d * H + h) * W + w] != 0.0f;
  };
  std::vector<std::array<std::int64_t, 3>> out;
  for (std::int64_t d = 0; d < D; ++d) {
    for (std::int64_t h = 0; h < H; ++h) {
      for (std::int64_t w = 0; w < W; ++w) {
        if (!fg(d, h, w)) continue;
        if (!fg(d - 1, h, w) || !fg(d + 1, h, w) || !fg(d, h - 1, w) || !fg(d, h + 1, w) ||
            !fg(d, h, w - 1) || !fg(d, h, w + 1)) {
          out.push_back({d, h, w});
        }
      }
    }
  }
  return out;
}

}  // namespace

double dsc(const Tensor& pred, const Tensor& gt) {
  check_masks(pred, gt, "dsc");
  const OverlapCounts c = count_overlap(pred, gt);
  if (c.a + c.b == 0) return 1.0;
  return 2.0 * static_cast<double>(c.both) / static_cast<double>(c.a + c.b);
}

double jaccard(const Tensor& pred, const Tensor& gt) {
  check_masks(pred, gt, "jaccard");
  const OverlapCounts c = count_overlap(pred, gt);
  const std::int64_t uni = c.a + c.b - c.both;
  if (uni == 0) return 1.0;
  return static_cast<double>(c.both) / static_cast<double>(uni);
}

std::vector<std::array<double, 3>> extract_surface(const Tensor& mask,
                                                   const std::array<double, 3>& spacing) {
  if (!mask.defined() || mask.rank() != 3) {
    throw DimensionError("extract_surface expects a rank-3 [D,H,W] mask");
  }
  std::vector<std::array<double, 3>> out;
  for (const auto& idx : surface_indices(mask)) {
    out.push_back({static_cast<double>(idx[0]) * spacing[0],
                   static_cast<double>(idx[1]) * spacing[1],
                   static_cast<double>(idx[2]) * spacing[2]});
  }
  return out;
}

double nsd(const Tensor& pred, const Tensor& gt, const std::array<double, 3>& spacing,
           double tolerance_mm) {
  check_masks(pred, gt, "nsd");
  if (tolerance_mm <= 0.0) throw ConfigError("nsd tolerance must be positive");
  for (double s : spacing) {
    if (s <= 0.0) throw ConfigError("nsd spacing must be positive");
  }

  const auto sp = surface_indices(pred);
  const auto sg = surface_indices(gt);
  if (sp.empty() && sg.empty()) return 1.0;
  if (sp.empty() || sg.empty()) return 0.0;

  const std::int64_t D = pred.dim(0), H = pred.dim(1), W = pred.dim(2);
  const double tau_sq = tolerance_mm * tolerance_mm;

  // All integer displacements whose physical length is within tau. The
  // squared-distance expression mirrors the brute-force oracle term for
  // term, so the within-tolerance classification is bitwise identical.
  std::vector<std::array<std::int64_t, 3>> offsets;
  const auto rad = [&](double s) { return static_cast<std::int64_t>(std::floor(tolerance_mm / s)); };
  const std::int64_t rd = rad(spacing[0]), rh = rad(spacing[1]), rw = rad(spacing[2]);
  for (std::int64_t od = -rd; od <= rd; ++od) {
    for (std::int64_t oh = -rh; oh <= rh; ++oh) {
      for (std::int64_t ow = -rw; ow <= rw; ++ow) {
        const double dd = static_cast<double>(od) * spacing[0];
        const double dh = static_cast<double>(oh) * spacing[1];
        const double dw = static_cast<double>(ow) * spacing[2];
        if (dd * dd + dh * dh + dw * dw <= tau_sq) offsets.push_back({od, oh, ow});
      }
    }
  }

  const auto occupancy = [&](const std::vector<std::array<std::int64_t, 3>>& surf) {
    std::vector<std::uint8_t> occ(static_cast<std::size_t>(D * H * W), 0);
    for (const auto& s : surf) occ[static_cast<std::size_t>((s[0] * H + s[1]) * W + s[2])] = 1;
    return occ;
  };
  const auto occ_p = occupancy(sp);
  const auto occ_g = occupancy(sg);

  const auto hits = [&](const std::vector<std::array<std::int64_t, 3>>& from,
                        const std::vector<std::uint8_t>& to_occ) {
    std::size_t n = 0;
    for (const auto& a : from) {
      for (const auto& o : offsets) {
        const std::int64_t d = a[0] + o[0], h = a[1] + o[1], w = a[2] + o[2];
        if (d < 0 || d >= D || h < 0 || h >= H || w < 0 || w >= W) continue;
        if (to_occ[static_cast<std::size_t>((d * H + h) * W + w)]) {
          ++n;
          break;
        }
      }
    }
    return n;
  };

  const std::size_t within = hits(sp, occ_g) + hits(sg, occ_p);
  return static_cast<double>(within) / static_cast<double>(sp.size() + sg.size());
}

MetricsReport evaluate_case(const Tensor& pred_labels, const Tensor& gt_labels,
                            const std::array<double, 3>& spacing, const std::string& case_id) {
  check_masks(pred_labels, gt_labels, "evaluate_case");
  for (const Tensor* t : {&pred_labels, &gt_labels}) {
    for (float v : t->data()) {
      if (v != 0.0f && v != 1.0f && v != 2.0f) {
        throw DataError("evaluate_case: label value " + std::to_string(v) +
                        " outside {0,1,2}");
      }
    }
  }

  const auto binarize = [](const Tensor& labels, float cls) {
    Tensor m(labels.shape());
    auto src = labels.data();
    auto dst = m.data();
    for (std::size_t i = 0; i < src.size(); ++i) dst[i] = src[i] == cls ? 1.0f : 0.0f;
    return m;
  };

  MetricsReport report;
  report.case_id = case_id;
  for (int cls : {1, 2}) {
    const Tensor mp = binarize(pred_labels, static_cast<float>(cls));
    const Tensor mg = binarize(gt_labels, static_cast<float>(cls));
    ClassMetrics m;
    m.dsc = dsc(mp, mg);
    m.ji = jaccard(mp, mg);
    m.nsd = nsd(mp, mg, spacing);
    report.per_class[cls] = m;
    report.mean_foreground.dsc += m.dsc / 2.0;
    report.mean_foreground.ji += m.ji / 2.0;
    report.mean_foreground.nsd += m.nsd / 2.0;
  }
  return report;
}

}  // namespace voxseg
