#pragma once

// Hierarchical evidential sampling: rank images by mean distribution
// uncertainty, then query pixels by distance-reweighted data uncertainty,
// re-estimating the maps after every answered point.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "eviatta/evidential.hpp"
#include "eviatta/grid.hpp"
#include "eviatta/prompt.hpp"
#include "eviatta/tensor.hpp"

namespace eviatta {

// ---------------------------------------------------------------------------
// Otsu

inline constexpr std::size_t kOtsuBins = 256;

struct OtsuResult {
  Real threshold = 0;
  std::size_t boundary = 0;  // first bin of the upper class
  bool degenerate = false;
};

/// Bin of `v` in a kOtsuBins histogram spanning [lo, hi].
inline std::size_t otsu_bin(Real v, Real lo, Real hi) {
  const auto b = static_cast<std::size_t>((v - lo) / (hi - lo) * static_cast<Real>(kOtsuBins));
  return std::min(b, kOtsuBins - 1);
}

/// Between-class variance score of a split, up to a positive constant.
/// Computed from integer bin statistics so ties are exact.
inline Real otsu_split_score(std::int64_t n0, std::int64_t s0, std::int64_t n1, std::int64_t s1) {
  if (n0 == 0 || n1 == 0) return -1;
  const Real diff = static_cast<Real>(n1 * s0 - n0 * s1);
  return diff * diff / (static_cast<Real>(n0) * static_cast<Real>(n1));
}

inline OtsuResult otsu_threshold(const RealMap& map) {
  OtsuResult r;
  if (map.size() == 0) {
    r.degenerate = true;
    return r;
  }
  const auto [lo_it, hi_it] = std::minmax_element(map.values.begin(), map.values.end());
  const Real lo = *lo_it, hi = *hi_it;
  if (!std::isfinite(lo) || !std::isfinite(hi)) throw NumericError("otsu_threshold: non-finite map");
  if (hi - lo < 1e-9) {
    r.degenerate = true;
    r.threshold = lo;
    return r;
  }
  std::array<std::int64_t, kOtsuBins> hist{};
  for (Real v : map.values) ++hist[otsu_bin(v, lo, hi)];
  std::int64_t n_total = 0, s_total = 0;
  for (std::size_t b = 0; b < kOtsuBins; ++b) {
    n_total += hist[b];
    s_total += hist[b] * static_cast<std::int64_t>(b);
  }
  std::int64_t n0 = 0, s0 = 0;
  Real best = -1;
  std::size_t best_k = 1;
  for (std::size_t k = 1; k < kOtsuBins; ++k) {
    n0 += hist[k - 1];
    s0 += hist[k - 1] * static_cast<std::int64_t>(k - 1);
    const Real score = otsu_split_score(n0, s0, n_total - n0, s_total - s0);
    if (score > best) {
      best = score;
      best_k = k;
    }
  }
  r.boundary = best_k;
  r.threshold = lo + static_cast<Real>(best_k) * (hi - lo) / static_cast<Real>(kOtsuBins);
  return r;
}

// ---------------------------------------------------------------------------
// Exact Euclidean distance transform

namespace detail {

// Lower envelope of parabolas (Felzenszwalb & Huttenlocher) on one line of
// squared distances. `f` is read, `d` written.
inline void squared_edt_1d(const std::vector<Real>& f, std::vector<Real>& d, std::vector<std::size_t>& v,
                           std::vector<Real>& z) {
  const std::size_t n = f.size();
  constexpr Real inf = std::numeric_limits<Real>::infinity();
  v.assign(n, 0);
  z.assign(n + 1, 0);
  d.assign(n, 0);
  std::size_t k = 0;
  // skip leading infinite samples: they never form part of the envelope
  std::size_t first = 0;
  while (first < n && f[first] == inf) ++first;
  if (first == n) {
    std::fill(d.begin(), d.end(), inf);
    return;
  }
  v[0] = first;
  z[0] = -inf;
  z[1] = inf;
  for (std::size_t q = first + 1; q < n; ++q) {
    if (f[q] == inf) continue;
    const Real qq = static_cast<Real>(q);
    Real s;
    while (true) {
      const Real vk = static_cast<Real>(v[k]);
      s = ((f[q] + qq * qq) - (f[v[k]] + vk * vk)) / (2 * qq - 2 * vk);
      if (s <= z[k] && k > 0) {
        --k;
        continue;
      }
      break;
    }
    if (s <= z[k]) {
      // k == 0 and the new parabola dominates everywhere
      v[0] = q;
      z[0] = -inf;
      z[1] = inf;
      continue;
    }
    ++k;
    v[k] = q;
    z[k] = s;
    z[k + 1] = inf;
  }
  k = 0;
  for (std::size_t q = 0; q < n; ++q) {
    while (z[k + 1] < static_cast<Real>(q)) ++k;
    const Real diff = static_cast<Real>(q) - static_cast<Real>(v[k]);
    d[q] = diff * diff + f[v[k]];
  }
}

/// Squared Euclidean distance from every pixel to the nearest set pixel of
/// `targets`. Infinite when `targets` is empty.
inline Grid<Real> squared_distance_to(const Mask& targets) {
  const std::size_t H = targets.rows, W = targets.cols;
  constexpr Real inf = std::numeric_limits<Real>::infinity();
  Grid<Real> g(H, W, inf);
  for (std::size_t i = 0; i < g.size(); ++i)
    if (targets.values[i]) g.values[i] = 0;
  std::vector<Real> f, d, z;
  std::vector<std::size_t> v;
  for (std::size_t c = 0; c < W; ++c) {
    f.resize(H);
    for (std::size_t r = 0; r < H; ++r) f[r] = g(r, c);
    squared_edt_1d(f, d, v, z);
    for (std::size_t r = 0; r < H; ++r) g(r, c) = d[r];
  }
  for (std::size_t r = 0; r < H; ++r) {
    f.assign(g.values.begin() + static_cast<std::ptrdiff_t>(r * W),
             g.values.begin() + static_cast<std::ptrdiff_t>((r + 1) * W));
    squared_edt_1d(f, d, v, z);
    std::copy(d.begin(), d.end(), g.values.begin() + static_cast<std::ptrdiff_t>(r * W));
  }
  return g;
}

}  // namespace detail

/// Euclidean distance from each uncertain pixel to the nearest confident
/// one; confident pixels get 0. When no pixel is confident, the ring just
/// outside the image acts as the confident frontier.
inline RealMap distance_map(const Mask& uncertain) {
  const std::size_t H = uncertain.rows, W = uncertain.cols;
  const bool any_confident = std::any_of(uncertain.values.begin(), uncertain.values.end(), [](auto v) { return !v; });
  RealMap out(H, W, 0.0);
  if (any_confident) {
    Mask confident(H, W, 0);
    for (std::size_t i = 0; i < confident.size(); ++i) confident.values[i] = uncertain.values[i] ? 0 : 1;
    auto sq = detail::squared_distance_to(confident);
    for (std::size_t i = 0; i < out.size(); ++i) out.values[i] = std::sqrt(sq.values[i]);
    return out;
  }
  Mask padded(H + 2, W + 2, 1);
  for (std::size_t r = 0; r < H; ++r)
    for (std::size_t c = 0; c < W; ++c) padded(r + 1, c + 1) = 0;
  auto sq = detail::squared_distance_to(padded);
  for (std::size_t r = 0; r < H; ++r)
    for (std::size_t c = 0; c < W; ++c) out(r, c) = std::sqrt(sq(r + 1, c + 1));
  return out;
}

// ---------------------------------------------------------------------------
// Pixel and sample selection

struct PixelQuery {
  std::size_t row = 0;
  std::size_t col = 0;
  Real score = 0;
  std::size_t iteration = 0;
  bool fallback = false;  // chosen by plain argmax of the base map
  bool operator==(const PixelQuery&) const = default;
};

namespace detail {
inline std::optional<std::size_t> argmax_allowed(const std::vector<Real>& v, const Mask* excluded) {
  std::optional<std::size_t> best;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (excluded && excluded->values[i]) continue;
    if (!best || v[i] > v[*best]) best = i;
  }
  return best;
}
}  // namespace detail

/// Row-major first argmax of dist ⊙ data over pixels not in `excluded`.
/// Falls back to the argmax of `data` alone when the product is all zero.
inline PixelQuery select_pixel(const RealMap& data, const RealMap& dist, const Mask* excluded = nullptr) {
  if (!data.same_extent(dist)) throw ShapeError("select_pixel: map extents differ");
  if (excluded && !excluded->same_extent(data)) throw ShapeError("select_pixel: exclusion mask extent differs");
  std::vector<Real> prod(data.size());
  for (std::size_t i = 0; i < prod.size(); ++i) prod[i] = data.values[i] * dist.values[i];
  auto best = detail::argmax_allowed(prod, excluded);
  if (!best) throw std::logic_error("select_pixel: every pixel is excluded");
  PixelQuery q;
  if (prod[*best] > 0) {
    q.score = prod[*best];
  } else {
    best = detail::argmax_allowed(data.values, excluded);
    q.score = data.values[*best];
    q.fallback = true;
  }
  q.row = *best / data.cols;
  q.col = *best % data.cols;
  return q;
}

/// Otsu split + distance transform + reweighted argmax on one map.
inline PixelQuery select_distance_aware(const RealMap& base, const Mask* excluded = nullptr) {
  const auto otsu = otsu_threshold(base);
  if (otsu.degenerate) {
    RealMap zero(base.rows, base.cols, 0.0);
    return select_pixel(base, zero, excluded);
  }
  Mask uncertain(base.rows, base.cols, 0);
  for (std::size_t i = 0; i < base.size(); ++i) uncertain.values[i] = base.values[i] > otsu.threshold ? 1 : 0;
  return select_pixel(base, distance_map(uncertain), excluded);
}

struct SelectionResult {
  std::vector<std::size_t> selected_indices;  // in descending score order
  std::vector<Real> scores;
};

/// round-half-up(fraction·N), at least 1, at most N.
inline std::size_t budget_from_fraction(Real fraction, std::size_t n) {
  if (!(fraction > 0 && fraction <= 1)) throw std::invalid_argument("sample fraction must lie in (0, 1]");
  auto k = static_cast<std::size_t>(std::floor(fraction * static_cast<Real>(n) + 0.5));
  return std::clamp<std::size_t>(k, 1, n);
}

/// Indices of the K largest scores; ties go to the lower index. K clamps to N.
inline SelectionResult select_topk_samples(const std::vector<Real>& scores, std::size_t k) {
  if (scores.empty()) throw std::invalid_argument("select_topk_samples: no samples");
  k = std::min(k, scores.size());
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  idx.resize(k);
  return {idx, scores};
}

// ---------------------------------------------------------------------------
// Acquisition rules

enum class UncertaintyKind { overall, data, dis, random };

inline const char* to_string(UncertaintyKind k) {
  switch (k) {
    case UncertaintyKind::overall: return "U";
    case UncertaintyKind::data: return "U_data";
    case UncertaintyKind::dis: return "U_dis";
    case UncertaintyKind::random: return "random";
  }
  return "?";
}

/// Which score ranks images and which map drives pixel queries.
struct AcquisitionRule {
  UncertaintyKind sample_score = UncertaintyKind::dis;
  UncertaintyKind pixel_score = UncertaintyKind::data;
  bool distance_aware = true;  // Otsu + distance reweighting on the pixel map

  static AcquisitionRule eviatta() { return {UncertaintyKind::dis, UncertaintyKind::data, true}; }
  static AcquisitionRule entropy() { return {UncertaintyKind::overall, UncertaintyKind::overall, false}; }
  static AcquisitionRule random() { return {UncertaintyKind::random, UncertaintyKind::random, false}; }
  static AcquisitionRule swapped() { return {UncertaintyKind::data, UncertaintyKind::dis, true}; }
};

inline const RealMap& pick_map(const UncertaintyMaps& m, UncertaintyKind k) {
  switch (k) {
    case UncertaintyKind::overall: return m.overall;
    case UncertaintyKind::data: return m.data;
    case UncertaintyKind::dis: return m.dis;
    default: throw std::logic_error("random has no uncertainty map");
  }
}

/// Image score for sample ranking; random draws a uniform score.
inline Real sample_score(const UncertaintyMaps& m, UncertaintyKind k, std::mt19937_64& rng) {
  if (k == UncertaintyKind::random) return std::uniform_real_distribution<Real>(0, 1)(rng);
  return image_distribution_score(pick_map(m, k));
}

/// Next pixel to query under `rule`, never one already in `excluded`.
inline PixelQuery next_pixel(const UncertaintyMaps& m, const AcquisitionRule& rule, const Mask& excluded,
                             std::mt19937_64& rng) {
  if (rule.pixel_score == UncertaintyKind::random) {
    std::vector<std::size_t> free;
    for (std::size_t i = 0; i < excluded.size(); ++i)
      if (!excluded.values[i]) free.push_back(i);
    if (free.empty()) throw std::logic_error("next_pixel: every pixel is excluded");
    const std::size_t pick = free[std::uniform_int_distribution<std::size_t>(0, free.size() - 1)(rng)];
    return {pick / excluded.cols, pick % excluded.cols, 0, 0, false};
  }
  const RealMap& base = pick_map(m, rule.pixel_score);
  if (rule.distance_aware) return select_distance_aware(base, &excluded);
  RealMap ones(base.rows, base.cols, 1.0);
  return select_pixel(base, ones, &excluded);
}

// ---------------------------------------------------------------------------
// Oracles and the iterative annotation loop

class OracleError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Answers label(sample, row, col) with 0 (background) or 1 (foreground).
class LabelOracle {
 public:
  virtual ~LabelOracle() = default;
  virtual int label(std::size_t sample_id, std::size_t row, std::size_t col) = 0;
};

/// Headless oracle that reads stored ground-truth masks.
class GroundTruthOracle final : public LabelOracle {
 public:
  explicit GroundTruthOracle(std::function<const Mask&(std::size_t)> lookup) : lookup_(std::move(lookup)) {}
  int label(std::size_t sample_id, std::size_t row, std::size_t col) override {
    const Mask& m = lookup_(sample_id);
    if (row >= m.rows || col >= m.cols) throw OracleError("ground-truth oracle: coordinate out of range");
    return m(row, col) ? 1 : 0;
  }

 private:
  std::function<const Mask&(std::size_t)> lookup_;
};

using PromptForward = std::function<Tensor(const PromptSet&)>;

/// Resumable state of one sample's annotation loop. The synchronous loop
/// and the interactive service both drive it.
class AnnotationCursor {
 public:
  AnnotationCursor(std::size_t sample_id, PromptSet initial, std::size_t budget, AcquisitionRule rule,
                   PromptForward forward, std::uint64_t seed)
      : sample_id_(sample_id),
        prompts_(std::move(initial)),
        budget_(budget),
        rule_(rule),
        forward_(std::move(forward)),
        rng_(seed) {
    snapshots_.push_back(forward_(prompts_));
    const auto& l = snapshots_.back();
    queried_ = Mask(l.dim(0), l.dim(1), 0);
  }

  std::size_t sample_id() const { return sample_id_; }
  std::size_t budget() const { return budget_; }
  std::size_t answered() const { return prompts_.points.size(); }
  bool complete() const { return answered() >= budget_; }
  const PromptSet& prompts() const { return prompts_; }
  /// Logits for the prompt prefixes g^{0:0} .. g^{0:m}.
  const std::vector<Tensor>& snapshots() const { return snapshots_; }
  const std::vector<PixelQuery>& queries() const { return queries_; }
  const Tensor& current_logits() const { return snapshots_.back(); }

  /// Uncertainty maps of the latest snapshot.
  UncertaintyMaps current_maps() const { return decompose(evidence_from_logits(current_logits())); }

  /// The pending query; computed once and then stable until answered.
  const PixelQuery& pending() {
    if (complete()) throw std::logic_error("annotation budget exhausted");
    if (!pending_) {
      PixelQuery q = next_pixel(current_maps(), rule_, queried_, rng_);
      q.iteration = answered();
      pending_ = q;
    }
    return *pending_;
  }

  void answer(int label) {
    if (label != 0 && label != 1) throw std::invalid_argument("label must be 0 or 1");
    const PixelQuery q = pending();
    queries_.push_back(q);
    queried_(q.row, q.col) = 1;
    prompts_.points.push_back({static_cast<int>(q.row), static_cast<int>(q.col), label == 1});
    pending_.reset();
    snapshots_.push_back(forward_(prompts_));
  }

 private:
  std::size_t sample_id_;
  PromptSet prompts_;
  std::size_t budget_;
  AcquisitionRule rule_;
  PromptForward forward_;
  std::mt19937_64 rng_;
  std::vector<Tensor> snapshots_;
  std::vector<PixelQuery> queries_;
  Mask queried_;
  std::optional<PixelQuery> pending_;
};

struct AnnotationResult {
  PromptSet prompts;
  std::vector<Tensor> snapshots;
  std::vector<PixelQuery> queries;
};

/// Runs the query/answer loop to the budget with a synchronous oracle.
/// OracleError propagates to the caller, which keeps the sample unlabelled.
inline AnnotationResult annotate_iteratively(std::size_t sample_id, const PromptSet& initial, PromptForward forward,
                                             LabelOracle& oracle, std::size_t budget,
                                             AcquisitionRule rule = AcquisitionRule::eviatta(),
                                             std::uint64_t seed = 0) {
  AnnotationCursor cur(sample_id, initial, budget, rule, std::move(forward), seed);
  while (!cur.complete()) {
    const PixelQuery q = cur.pending();
    cur.answer(oracle.label(sample_id, q.row, q.col));
  }
  return {cur.prompts(), cur.snapshots(), cur.queries()};
}

}  // namespace eviatta
