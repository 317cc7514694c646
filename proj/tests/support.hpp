#pragma once

// Shared fixtures and independent reference implementations for the tests.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <random>
#include <vector>

#include "eviatta/grid.hpp"
#include "eviatta/losses.hpp"
#include "eviatta/model.hpp"
#include "eviatta/tensor.hpp"

namespace eviatta::testing {

/// H=16, d=8 configuration for gradient checks.
inline ModelConfig tiny_config(std::uint64_t seed = 3) {
  ModelConfig c;
  c.image_size = 16;
  c.token_grid = 4;
  c.embed_dim = 8;
  c.stem_channels = 4;
  c.decoder_hidden = 8;
  c.seed = seed;
  return c;
}

inline Tensor random_tensor(Shape shape, std::mt19937_64& rng, Real lo = -2, Real hi = 2, bool requires_grad = false) {
  std::uniform_real_distribution<Real> u(lo, hi);
  std::vector<Real> v(shape_numel(shape));
  for (auto& x : v) x = u(rng);
  return Tensor::from(std::move(shape), std::move(v), requires_grad);
}

inline RealMap random_map(std::size_t rows, std::size_t cols, std::mt19937_64& rng, Real lo = 0, Real hi = 1) {
  std::uniform_real_distribution<Real> u(lo, hi);
  RealMap m(rows, cols, 0.0);
  for (auto& v : m.values) v = u(rng);
  return m;
}

inline Mask random_mask(std::size_t rows, std::size_t cols, double p, std::mt19937_64& rng) {
  std::bernoulli_distribution b(p);
  Mask m(rows, cols, 0);
  for (auto& v : m.values) v = b(rng) ? 1 : 0;
  return m;
}

/// Union of a few random discs, closer to segmentation masks than noise.
inline Mask random_blob_mask(std::size_t n, std::mt19937_64& rng, int discs = 3) {
  std::uniform_real_distribution<double> pos(0, static_cast<double>(n)), rad(1.5, static_cast<double>(n) / 4);
  Mask m(n, n, 0);
  for (int k = 0; k < discs; ++k) {
    const double cy = pos(rng), cx = pos(rng), r = rad(rng);
    for (std::size_t y = 0; y < n; ++y)
      for (std::size_t x = 0; x < n; ++x)
        if ((y - cy) * (y - cy) + (x - cx) * (x - cx) <= r * r) m(y, x) = 1;
  }
  return m;
}

// ---------------------------------------------------------------------------
// Brute-force oracles

/// Nearest confident pixel by exhaustive search; border ring when none.
inline RealMap brute_distance_map(const Mask& uncertain) {
  const auto H = static_cast<long>(uncertain.rows), W = static_cast<long>(uncertain.cols);
  RealMap out(uncertain.rows, uncertain.cols, 0.0);
  bool any_confident = false;
  for (auto v : uncertain.values) any_confident |= v == 0;
  for (long r = 0; r < H; ++r)
    for (long c = 0; c < W; ++c) {
      if (!uncertain(r, c)) continue;
      long best = std::numeric_limits<long>::max();
      if (any_confident) {
        for (long rr = 0; rr < H; ++rr)
          for (long cc = 0; cc < W; ++cc)
            if (!uncertain(rr, cc)) best = std::min(best, (r - rr) * (r - rr) + (c - cc) * (c - cc));
      } else {
        for (long rr = -1; rr <= H; ++rr)
          for (long cc = -1; cc <= W; ++cc) {
            const bool ring = rr == -1 || cc == -1 || rr == H || cc == W;
            if (ring) best = std::min(best, (r - rr) * (r - rr) + (c - cc) * (c - cc));
          }
      }
      out(r, c) = std::sqrt(static_cast<Real>(best));
    }
  return out;
}

struct BruteOtsu {
  std::size_t boundary = 0;
  Real threshold = 0;
  bool degenerate = false;
};

/// Scans all 255 bin boundaries, comparing between-class variance exactly in
/// 128-bit integer arithmetic on bin indices.
inline BruteOtsu brute_otsu(const RealMap& map) {
  BruteOtsu r;
  const Real lo = *std::min_element(map.values.begin(), map.values.end());
  const Real hi = *std::max_element(map.values.begin(), map.values.end());
  if (hi - lo < 1e-9) {
    r.degenerate = true;
    return r;
  }
  std::vector<long long> bins;
  for (Real v : map.values) {
    long long b = static_cast<long long>(std::floor((v - lo) / (hi - lo) * 256.0));
    bins.push_back(std::clamp<long long>(b, 0, 255));
  }
  using i128 = __int128;
  i128 best_num = -1, best_den = 1;
  for (long long k = 1; k < 256; ++k) {
    long long n0 = 0, n1 = 0, s0 = 0, s1 = 0;
    for (long long b : bins) {
      if (b < k) ++n0, s0 += b;
      else ++n1, s1 += b;
    }
    if (n0 == 0 || n1 == 0) continue;
    // w0·w1·(μ0 − μ1)² ∝ (n1·s0 − n0·s1)² / (n0·n1)
    const i128 d = static_cast<i128>(n1) * s0 - static_cast<i128>(n0) * s1;
    const i128 num = d * d, den = static_cast<i128>(n0) * n1;
    if (best_num < 0 || num * best_den > best_num * den) {
      best_num = num;
      best_den = den;
      r.boundary = static_cast<std::size_t>(k);
    }
  }
  r.threshold = lo + static_cast<Real>(r.boundary) * (hi - lo) / 256.0;
  return r;
}

/// Boundary by definition: foreground with a background (or off-image) 4-neighbour.
inline std::vector<std::pair<long, long>> brute_boundary(const Mask& m) {
  std::vector<std::pair<long, long>> pts;
  const auto H = static_cast<long>(m.rows), W = static_cast<long>(m.cols);
  auto fg = [&](long r, long c) { return r >= 0 && c >= 0 && r < H && c < W && m(r, c) != 0; };
  for (long r = 0; r < H; ++r)
    for (long c = 0; c < W; ++c)
      if (fg(r, c) && (!fg(r - 1, c) || !fg(r + 1, c) || !fg(r, c - 1) || !fg(r, c + 1))) pts.push_back({r, c});
  return pts;
}

struct BruteSurface {
  Real asd = 0;
  Real hd95 = 0;
};

inline BruteSurface brute_surface(const Mask& pred, const Mask& gt) {
  const auto bp = brute_boundary(pred), bg = brute_boundary(gt);
  if (bp.empty() && bg.empty()) return {0, 0};
  if (bp.empty() || bg.empty()) {
    const Real d = std::hypot(static_cast<Real>(pred.rows - 1), static_cast<Real>(pred.cols - 1));
    return {d, d};
  }
  auto directed = [](const auto& from, const auto& to) {
    std::vector<Real> out;
    for (auto [r, c] : from) {
      long best = std::numeric_limits<long>::max();
      for (auto [rr, cc] : to) best = std::min(best, (r - rr) * (r - rr) + (c - cc) * (c - cc));
      out.push_back(std::sqrt(static_cast<Real>(best)));
    }
    return out;
  };
  std::vector<Real> all = directed(bp, bg);
  const auto back = directed(bg, bp);
  all.insert(all.end(), back.begin(), back.end());
  Real s = 0;
  for (Real v : all) s += v;
  BruteSurface out;
  out.asd = s / static_cast<Real>(all.size());
  std::sort(all.begin(), all.end());
  const Real pos = 0.95 * static_cast<Real>(all.size() - 1);
  const std::size_t i = static_cast<std::size_t>(pos);
  const std::size_t j = std::min(i + 1, all.size() - 1);
  out.hd95 = all[i] + (pos - static_cast<Real>(i)) * (all[j] - all[i]);
  return out;
}

// ---------------------------------------------------------------------------
// Finite differences

struct GradCheck {
  Real max_rel_error = 0;
  std::size_t checked = 0;
  Real loss = 0;
  Real max_abs_grad = 0;
};

/// Compares the analytic gradient of `loss()` w.r.t. `params` with central
/// differences of `value()` on up to `per_param` randomly chosen coordinates
/// each. `value` defaults to `loss`; stop-gradient losses pass a version with
/// the teachers held fixed. The relative error uses max(|a|, |n|, floor).
inline GradCheck check_gradients(const std::function<Tensor()>& loss, std::vector<Tensor> params,
                                 std::mt19937_64& rng, std::size_t per_param = 6, Real step = 1e-5,
                                 Real floor = 1e-6, std::function<Tensor()> value = {}) {
  if (!value) value = loss;
  for (auto& p : params) p.zero_grad();
  Tensor l = loss();
  backward(l);
  std::vector<std::vector<Real>> analytic;
  for (auto& p : params) {
    auto g = p.grad();
    analytic.emplace_back(g.begin(), g.end());
    if (analytic.back().empty()) analytic.back().assign(p.numel(), 0);
  }
  GradCheck gc;
  gc.loss = l.item();
  for (const auto& a : analytic)
    for (Real v : a) gc.max_abs_grad = std::max(gc.max_abs_grad, std::abs(v));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto data = params[i].mutable_data();
    std::vector<std::size_t> idx(data.size());
    for (std::size_t j = 0; j < idx.size(); ++j) idx[j] = j;
    std::shuffle(idx.begin(), idx.end(), rng);
    idx.resize(std::min(per_param, idx.size()));
    for (std::size_t j : idx) {
      const Real orig = data[j];
      data[j] = orig + step;
      const Real up = value().item();
      data[j] = orig - step;
      const Real down = value().item();
      data[j] = orig;
      const Real numeric = (up - down) / (2 * step);
      const Real a = analytic[i][j];
      const Real rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), floor});
      gc.max_rel_error = std::max(gc.max_rel_error, rel);
      ++gc.checked;
    }
  }
  for (auto& p : params) p.zero_grad();
  return gc;
}

// ---------------------------------------------------------------------------
// Loss gradients on the tiny model

enum class LossKind { prompt, replay, var };

inline const char* to_string(LossKind k) {
  return k == LossKind::prompt ? "L_prompt" : k == LossKind::replay ? "L_replay" : "L_var";
}

/// Tiny model with adapters on all four projections, random B factors and a
/// token-dependent sigma head, so every trainable parameter has a gradient.
inline PromptableModel gradient_model(std::uint64_t seed) {
  PromptableModel m(tiny_config(seed));
  m.inject_lora(15, 4, seed + 1);
  std::mt19937_64 rng(seed + 2);
  std::normal_distribution<Real> nd(0, 0.3);
  for (const auto& [name, t] : m.named_parameters()) {
    if (!(name.ends_with(".B") || name == "sigma.w")) continue;
    Tensor p = t;
    for (auto& v : p.mutable_data()) v = nd(rng) * (name == "sigma.w" ? 0.2 : 1.0);
  }
  m.set_mode(TrainMode::adapt);
  return m;
}

/// Central-difference check of one loss term w.r.t. every trainable
/// coordinate. Teachers are stop-gradient, so the numerical side holds them
/// at their current values.
inline GradCheck loss_gradient_check(LossKind kind, std::uint64_t seed, Real step = 1e-5) {
  PromptableModel m = gradient_model(seed);
  std::mt19937_64 rng(seed + 3);
  const std::size_t n = m.config().image_size;
  std::uniform_int_distribution<int> coord(0, static_cast<int>(n) - 1);
  auto image = [&] { return random_map(n, n, rng); };
  auto prompt = [&](std::size_t points) {
    int a = coord(rng), b = coord(rng), c = coord(rng), d = coord(rng);
    PromptSet p{{std::min(a, b), std::min(c, d), std::max(a, b), std::max(c, d)}, {}};
    for (std::size_t i = 0; i < points; ++i) p.points.push_back({coord(rng), coord(rng), i % 2 == 0});
    return p;
  };

  std::function<Tensor()> analytic, value;
  if (kind == LossKind::prompt) {
    const auto stem = m.stem(image());
    const PromptSet p = prompt(3);
    auto snapshots = [&m, stem, p] {
      const Tensor tokens = m.encode_tokens(stem.tokens0);
      std::vector<Tensor> out;
      for (std::size_t k = 0; k <= p.points.size(); ++k)
        out.push_back(m.decode(tokens, stem.skip, m.encode_prompt(p.prefix(k))));
      return out;
    };
    std::vector<Tensor> teachers;
    {
      NoGradGuard g;
      teachers = snapshots();
    }
    analytic = [snapshots] {
      const auto s = snapshots();
      return prompt_consistency_loss(s);
    };
    value = [snapshots, teachers] {
      const auto s = snapshots();
      Tensor total = zero_loss();
      for (std::size_t k = 0; k + 1 < s.size(); ++k) total = add(total, masked_kl(teachers[k + 1], s[k]));
      return total;
    };
  } else if (kind == LossKind::replay) {
    struct Entry {
      StemOutput stem;
      PromptSet prompt;
      Tensor stored;
    };
    std::vector<Entry> entries;
    std::normal_distribution<Real> nd(0, 0.5);
    for (int e = 0; e < 3; ++e) {
      Entry en{m.stem(image()), prompt(static_cast<std::size_t>(e)), {}};
      NoGradGuard g;
      en.stored = m.decode(m.encode_tokens(en.stem.tokens0), en.stem.skip, m.encode_prompt(en.prompt)).clone();
      for (auto& v : en.stored.mutable_data()) v += nd(rng);  // logits stored under older adapters
      entries.push_back(std::move(en));
    }
    analytic = [&m, entries] {
      std::vector<Tensor> stored, current;
      for (const auto& e : entries) {
        stored.push_back(e.stored);
        current.push_back(m.decode(m.encode_tokens(e.stem.tokens0), e.stem.skip, m.encode_prompt(e.prompt)));
      }
      return replay_loss(stored, current);
    };
  } else {
    const auto stem = m.stem(image());
    const PromptSet p = prompt(0);
    const Tensor eps = m.draw_noise(seed + 4);
    Tensor det;
    {
      NoGradGuard g;
      det = m.decode(m.encode_tokens(stem.tokens0), stem.skip, m.encode_prompt(p));
    }
    auto student = [&m, stem, p, eps] {
      const Tensor tokens = m.encode_tokens(stem.tokens0);
      return m.decode(m.perturb(tokens, eps), stem.skip, m.encode_prompt(p));
    };
    analytic = [&m, stem, p, student] {
      const Tensor det_live = m.decode(m.encode_tokens(stem.tokens0), stem.skip, m.encode_prompt(p));
      return variational_consistency_loss(det_live, student());
    };
    value = [det, student] { return variational_consistency_loss(det, student()); };
  }
  return check_gradients(analytic, m.trainable_parameters(), rng, std::numeric_limits<std::size_t>::max(), step,
                         1e-7, value);
}

}  // namespace eviatta::testing
