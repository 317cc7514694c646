#pragma once

// Dice, Jaccard, average surface distance and 95th-percentile Hausdorff
// distance on 2-D binary masks. Distances are in pixels.

#include <algorithm>
#include <cmath>
#include <vector>

#include "eviatta/grid.hpp"
#include "eviatta/sampler.hpp"
#include "eviatta/tensor.hpp"

namespace eviatta {

struct MetricReport {
  Real dice = 0;
  Real jaccard = 0;
  Real asd = 0;
  Real hd95 = 0;
};

struct Overlap {
  Real dice = 0;
  Real jaccard = 0;
};

inline Overlap overlap_metrics(const Mask& pred, const Mask& gt) {
  if (!pred.same_extent(gt)) throw ShapeError("overlap_metrics: mask extents differ");
  std::size_t a = 0, b = 0, inter = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool p = pred.values[i] != 0, g = gt.values[i] != 0;
    a += p;
    b += g;
    inter += p && g;
  }
  if (a + b == 0) return {1, 1};
  const Real uni = static_cast<Real>(a + b - inter);
  return {2.0 * static_cast<Real>(inter) / static_cast<Real>(a + b), static_cast<Real>(inter) / uni};
}

/// Foreground pixels with at least one background 4-neighbour; outside the
/// image counts as background.
inline Mask boundary(const Mask& m) {
  Mask b(m.rows, m.cols, 0);
  for (std::size_t r = 0; r < m.rows; ++r)
    for (std::size_t c = 0; c < m.cols; ++c) {
      if (!m(r, c)) continue;
      const bool edge = r == 0 || c == 0 || r + 1 == m.rows || c + 1 == m.cols || !m(r - 1, c) || !m(r + 1, c) ||
                        !m(r, c - 1) || !m(r, c + 1);
      b(r, c) = edge ? 1 : 0;
    }
  return b;
}

/// Linear-interpolation percentile (q in [0, 1]) of unsorted values.
inline Real percentile(std::vector<Real> v, Real q) {
  if (v.empty()) return 0;
  std::sort(v.begin(), v.end());
  const Real pos = q * static_cast<Real>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (pos - static_cast<Real>(lo)) * (v[hi] - v[lo]);
}

struct SurfaceDistances {
  Real asd = 0;
  Real hd95 = 0;
};

enum class SurfacePooling {
  pooled,       // one multiset of both directed distance sets
  max_directed  // max over the two directed statistics
};

/// Image diagonal, the penalty when exactly one boundary is empty.
inline Real surface_sentinel(std::size_t rows, std::size_t cols) {
  const Real r = static_cast<Real>(rows > 0 ? rows - 1 : 0), c = static_cast<Real>(cols > 0 ? cols - 1 : 0);
  return std::sqrt(r * r + c * c);
}

inline SurfaceDistances surface_metrics(const Mask& pred, const Mask& gt, SurfacePooling pooling = SurfacePooling::pooled) {
  if (!pred.same_extent(gt)) throw ShapeError("surface_metrics: mask extents differ");
  const Mask bp = boundary(pred), bg = boundary(gt);
  const bool ep = std::none_of(bp.values.begin(), bp.values.end(), [](auto v) { return v != 0; });
  const bool eg = std::none_of(bg.values.begin(), bg.values.end(), [](auto v) { return v != 0; });
  if (ep && eg) return {0, 0};
  if (ep || eg) {
    const Real s = surface_sentinel(pred.rows, pred.cols);
    return {s, s};
  }
  const auto dist_to_gt = detail::squared_distance_to(bg);
  const auto dist_to_pred = detail::squared_distance_to(bp);
  std::vector<Real> forward, backward_;
  for (std::size_t i = 0; i < bp.size(); ++i) {
    if (bp.values[i]) forward.push_back(std::sqrt(dist_to_gt.values[i]));
    if (bg.values[i]) backward_.push_back(std::sqrt(dist_to_pred.values[i]));
  }
  auto mean_of = [](const std::vector<Real>& v) {
    Real s = 0;
    for (Real x : v) s += x;
    return s / static_cast<Real>(v.size());
  };
  if (pooling == SurfacePooling::max_directed) {
    return {std::max(mean_of(forward), mean_of(backward_)),
            std::max(percentile(forward, 0.95), percentile(backward_, 0.95))};
  }
  std::vector<Real> pooled = forward;
  pooled.insert(pooled.end(), backward_.begin(), backward_.end());
  return {mean_of(pooled), percentile(pooled, 0.95)};
}

/// Foreground where the class-1 softmax probability exceeds 0.5 (C = 2), or
/// where class 1 is the strict argmax for larger C.
inline Mask binarize_logits(const Tensor& logits) {
  if (logits.rank() != 3 || logits.dim(2) < 2) throw ShapeError("binarize_logits expects H×W×C with C >= 2");
  const std::size_t H = logits.dim(0), W = logits.dim(1), C = logits.dim(2);
  Mask m(H, W, 0);
  for (std::size_t p = 0; p < H * W; ++p) {
    const Real* z = logits.data().data() + p * C;
    bool fg = true;
    for (std::size_t c = 0; c < C; ++c)
      if (c != 1 && !(z[1] > z[c])) fg = false;
    m.values[p] = fg ? 1 : 0;
  }
  return m;
}

inline MetricReport evaluate(const Mask& pred, const Mask& gt, SurfacePooling pooling = SurfacePooling::pooled) {
  const auto o = overlap_metrics(pred, gt);
  const auto s = surface_metrics(pred, gt, pooling);
  return {o.dice, o.jaccard, s.asd, s.hd95};
}

}  // namespace eviatta
