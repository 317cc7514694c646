#pragma once

// Dual consistency regularisation: progressive prompt consistency, replay
// consistency and variational feature consistency. Each term is a masked
// KL(sg(teacher) ‖ student) restricted to pixels where the teacher is
// strictly more confident than the student.

#include <span>
#include <vector>

#include "eviatta/grid.hpp"
#include "eviatta/tensor.hpp"

namespace eviatta {

enum class KlReduction {
  mean,  // average over indicator pixels
  sum    // total over indicator pixels
};

/// Pixel passes iff max_c softmax(teacher) > max_c softmax(student), strictly.
inline Mask confidence_indicator(const Tensor& teacher_logits, const Tensor& student_logits) {
  if (teacher_logits.shape() != student_logits.shape() || teacher_logits.rank() != 3)
    throw ShapeError("confidence_indicator: expected matching H×W×C logits");
  const std::size_t H = teacher_logits.dim(0), W = teacher_logits.dim(1), C = teacher_logits.dim(2);
  auto max_prob = [C](const Real* z) {
    Real mx = z[0];
    for (std::size_t c = 1; c < C; ++c) mx = std::max(mx, z[c]);
    Real s = 0;
    for (std::size_t c = 0; c < C; ++c) s += std::exp(z[c] - mx);
    return 1.0 / s;
  };
  Mask m(H, W, 0);
  for (std::size_t p = 0; p < H * W; ++p) {
    const Real t = max_prob(teacher_logits.data().data() + p * C);
    const Real s = max_prob(student_logits.data().data() + p * C);
    m.values[p] = t > s ? 1 : 0;
  }
  return m;
}

/// Masked KL(sg(teacher) ‖ student); zero when no pixel passes.
inline Tensor masked_kl(const Tensor& teacher_logits, const Tensor& student_logits,
                        KlReduction reduction = KlReduction::mean) {
  const Mask ind = confidence_indicator(teacher_logits, student_logits);
  const Tensor kl = kl_divergence(detach(teacher_logits), student_logits);
  Tensor m = masked_mean(kl, ind.values);
  if (reduction == KlReduction::sum) {
    std::size_t n = 0;
    for (auto v : ind.values) n += v != 0;
    if (n > 0) m = scale(m, static_cast<Real>(n));
  }
  return m;
}

inline Tensor zero_loss() { return Tensor::scalar(0); }

/// sum_m masked_kl(y^{m+1} as teacher, y^m as student) over one sample's
/// prompt-prefix logits y^0 .. y^M.
inline Tensor prompt_consistency_loss(std::span<const Tensor> snapshots, KlReduction reduction = KlReduction::mean) {
  Tensor total = zero_loss();
  for (std::size_t m = 0; m + 1 < snapshots.size(); ++m)
    total = add(total, masked_kl(snapshots[m + 1], snapshots[m], reduction));
  return total;
}

/// Mean over replayed entries of masked_kl(stored as teacher, current as student).
inline Tensor replay_loss(std::span<const Tensor> stored, std::span<const Tensor> current,
                          KlReduction reduction = KlReduction::mean) {
  if (stored.size() != current.size()) throw ShapeError("replay_loss: stored/current count mismatch");
  if (stored.empty()) return zero_loss();
  Tensor total = zero_loss();
  for (std::size_t i = 0; i < stored.size(); ++i) total = add(total, masked_kl(stored[i], current[i], reduction));
  return scale(total, 1.0 / static_cast<Real>(stored.size()));
}

/// masked_kl(deterministic as teacher, variational as student).
inline Tensor variational_consistency_loss(const Tensor& deterministic, const Tensor& variational,
                                           KlReduction reduction = KlReduction::mean) {
  return masked_kl(deterministic, variational, reduction);
}

struct LossTerms {
  Tensor prompt = zero_loss();
  Tensor replay = zero_loss();
  Tensor var = zero_loss();

  /// Unweighted sum of the three terms.
  Tensor total() const { return add(add(prompt, replay), var); }
};

}  // namespace eviatta
