#pragma once

// Dirichlet evidence from decoder logits and the entropy decomposition
// U = U_data + U_dis. All entropies are in nats.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <vector>

#include "eviatta/grid.hpp"
#include "eviatta/tensor.hpp"

namespace eviatta {

inline constexpr Real kLogitClamp = 30.0;

/// Digamma by upward recurrence to x >= 10, then the asymptotic series with
/// six Bernoulli terms.
inline Real digamma(Real x) {
  if (!(x > 0)) throw std::domain_error("digamma: argument must be positive");
  Real shift = 0;
  while (x < 10) {
    shift -= 1 / x;
    x += 1;
  }
  const Real inv = 1 / x, inv2 = inv * inv;
  const Real series =
      inv2 * (1.0 / 12 - inv2 * (1.0 / 120 - inv2 * (1.0 / 252 - inv2 * (1.0 / 240 - inv2 * (1.0 / 132 - inv2 * 691.0 / 32760)))));
  return shift + std::log(x) - 0.5 * inv - series;
}

/// Per-pixel Dirichlet parameters (H×W×C, row-major with classes innermost).
struct EvidenceField {
  std::size_t rows = 0, cols = 0, classes = 0;
  std::vector<Real> alpha;
  std::vector<Real> strength;   // H×W
  std::vector<Real> posterior;  // H×W×C

  std::size_t pixels() const { return rows * cols; }
};

struct UncertaintyMaps {
  RealMap overall;
  RealMap data;
  RealMap dis;
  Real max_violation = 0;  // largest negative U - U_data before flooring
};

/// Builds an EvidenceField from per-pixel alpha values (H×W×C).
inline EvidenceField field_from_alpha(std::size_t rows, std::size_t cols, std::size_t classes, std::vector<Real> alpha) {
  if (alpha.size() != rows * cols * classes) throw ShapeError("field_from_alpha: size mismatch");
  EvidenceField f{rows, cols, classes, std::move(alpha), {}, {}};
  f.strength.assign(rows * cols, 0);
  f.posterior.assign(f.alpha.size(), 0);
  for (std::size_t p = 0; p < rows * cols; ++p) {
    Real s = 0;
    for (std::size_t c = 0; c < classes; ++c) s += f.alpha[p * classes + c];
    f.strength[p] = s;
    for (std::size_t c = 0; c < classes; ++c) f.posterior[p * classes + c] = f.alpha[p * classes + c] / s;
  }
  return f;
}

/// alpha = exp(clamp(logits, ±30)) + 1.
inline EvidenceField evidence_from_logits(const Tensor& logits) {
  if (logits.rank() != 3) throw ShapeError("evidence_from_logits expects H×W×C logits, got " + shape_str(logits.shape()));
  std::vector<Real> alpha(logits.numel());
  for (std::size_t i = 0; i < alpha.size(); ++i) {
    const Real z = logits[i];
    if (!std::isfinite(z)) throw NumericError("evidence_from_logits: non-finite logit");
    alpha[i] = std::exp(std::clamp(z, -kLogitClamp, kLogitClamp)) + 1.0;
  }
  return field_from_alpha(logits.dim(0), logits.dim(1), logits.dim(2), std::move(alpha));
}

/// Shannon entropy of the posterior mean.
inline RealMap overall_uncertainty(const EvidenceField& f) {
  RealMap u(f.rows, f.cols, 0.0);
  for (std::size_t p = 0; p < f.pixels(); ++p) {
    Real h = 0;
    for (std::size_t c = 0; c < f.classes; ++c) {
      const Real q = f.posterior[p * f.classes + c];
      if (q > 0) h -= q * std::log(q);
    }
    u.values[p] = h;
  }
  return u;
}

/// Expected entropy of the categorical under the Dirichlet:
/// sum_c rho_c (psi(S+1) - psi(alpha_c+1)).
inline RealMap data_uncertainty(const EvidenceField& f) {
  RealMap u(f.rows, f.cols, 0.0);
  for (std::size_t p = 0; p < f.pixels(); ++p) {
    const Real ps = digamma(f.strength[p] + 1);
    Real h = 0;
    for (std::size_t c = 0; c < f.classes; ++c)
      h += f.posterior[p * f.classes + c] * (ps - digamma(f.alpha[p * f.classes + c] + 1));
    u.values[p] = h;
  }
  return u;
}

/// U_dis = U - U_data floored at zero. `max_violation` receives the largest
/// amount clipped.
inline RealMap distribution_uncertainty(const RealMap& overall, const RealMap& data, Real* max_violation = nullptr) {
  if (!overall.same_extent(data)) throw ShapeError("distribution_uncertainty: map extents differ");
  RealMap u(overall.rows, overall.cols, 0.0);
  Real worst = 0;
  for (std::size_t i = 0; i < u.size(); ++i) {
    const Real d = overall.values[i] - data.values[i];
    if (d < 0) worst = std::max(worst, -d);
    u.values[i] = std::max(d, Real{0});
  }
  if (max_violation) *max_violation = worst;
  return u;
}

/// Tolerated clipping in the decomposition before it is treated as an error.
inline constexpr Real kDecompositionSlack = 1e-6;

inline UncertaintyMaps decompose(const EvidenceField& f) {
  UncertaintyMaps m;
  m.overall = overall_uncertainty(f);
  m.data = data_uncertainty(f);
  m.dis = distribution_uncertainty(m.overall, m.data, &m.max_violation);
  if (m.max_violation > kDecompositionSlack)
    throw NumericError("uncertainty decomposition violated by " + std::to_string(m.max_violation));
  return m;
}

/// Image-level score: the arithmetic mean of a per-pixel map.
inline Real image_distribution_score(const RealMap& dis) {
  if (dis.size() == 0) return 0;
  Real s = 0;
  for (Real v : dis.values) s += v;
  return s / static_cast<Real>(dis.size());
}

struct MonteCarloEstimate {
  Real mean = 0;
  Real std_err = 0;
};

/// Monte-Carlo estimate of E[H(rho)] for rho ~ Dir(alpha), drawing rho by
/// normalising independent Gamma(alpha_c, 1) variates.
inline MonteCarloEstimate mc_dirichlet_oracle(const std::vector<Real>& alpha, std::size_t n_samples, std::uint64_t seed) {
  if (alpha.empty()) throw std::invalid_argument("mc_dirichlet_oracle: empty alpha");
  for (Real a : alpha)
    if (!(a > 0)) throw std::invalid_argument("mc_dirichlet_oracle: alpha must be positive");
  std::mt19937_64 rng(seed);
  std::vector<std::gamma_distribution<Real>> gammas;
  for (Real a : alpha) gammas.emplace_back(a, 1.0);
  std::vector<Real> g(alpha.size());
  Real mean = 0, m2 = 0;
  for (std::size_t n = 1; n <= n_samples; ++n) {
    Real s = 0;
    for (std::size_t c = 0; c < alpha.size(); ++c) s += (g[c] = gammas[c](rng));
    Real h = 0;
    for (Real v : g) {
      const Real q = v / s;
      if (q > 0) h -= q * std::log(q);
    }
    const Real delta = h - mean;
    mean += delta / static_cast<Real>(n);
    m2 += delta * (h - mean);
  }
  const Real var = n_samples > 1 ? m2 / static_cast<Real>(n_samples - 1) : 0;
  return {mean, std::sqrt(var / static_cast<Real>(n_samples))};
}

}  // namespace eviatta
