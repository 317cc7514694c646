#pragma once

// Source-domain training of the full promptable model (adapters and sigma
// head excluded) with per-pixel cross-entropy. Prompts are the ground-truth
// box plus, on some samples, simulated clicks. Some samples also get an
// appearance-flipped patch whose true label is only recoverable from the
// clicks placed inside it, which teaches the model to trust point prompts.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "eviatta/metrics.hpp"
#include "eviatta/model.hpp"
#include "eviatta/synth.hpp"

namespace eviatta {

struct PretrainConfig {
  std::size_t epochs = 30;
  Real lr = 1e-3;
  std::size_t batch = 8;
  double click_prob = 0.5;     // probability of simulated clicks on a plain sample
  double patch_prob = 0.35;    // probability of an appearance-flipped patch
  std::size_t max_clicks = 5;
  std::uint64_t seed = 0;
};

struct PretrainReport {
  Real final_loss = 0;
  Real source_dice = 0;
  std::size_t steps = 0;
};

struct TrainingExample {
  RealMap image;
  PromptSet prompts;
};

/// Builds one augmented training input from a labelled sample.
inline TrainingExample make_training_example(const Sample& s, const PretrainConfig& cfg, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0, 1);
  TrainingExample ex{s.image, {s.box, {}}};
  const auto& b = s.box;
  auto rand_in_box = [&](int& r, int& c) {
    r = std::uniform_int_distribution<int>(b.r0, b.r1)(rng);
    c = std::uniform_int_distribution<int>(b.c0, b.c1)(rng);
  };
  auto click = [&](int r, int c) {
    ex.prompts.points.push_back({r, c, s.mask(static_cast<std::size_t>(r), static_cast<std::size_t>(c)) != 0});
  };
  if (u(rng) < cfg.patch_prob) {
    // flip appearance inside a disk: foreground takes the background level and vice versa
    int pr, pc;
    rand_in_box(pr, pc);
    const double radius = 3.0 + 4.0 * u(rng);
    double fg = 0, bg = 0;
    std::size_t nf = 0, nb = 0;
    for (std::size_t i = 0; i < s.mask.size(); ++i) {
      if (s.mask.values[i]) fg += s.image.values[i], ++nf;
      else bg += s.image.values[i], ++nb;
    }
    fg /= std::max<std::size_t>(nf, 1);
    bg /= std::max<std::size_t>(nb, 1);
    for (std::size_t r = 0; r < s.mask.rows; ++r)
      for (std::size_t c = 0; c < s.mask.cols; ++c) {
        const double dr = static_cast<double>(r) - pr, dc = static_cast<double>(c) - pc;
        if (dr * dr + dc * dc > radius * radius) continue;
        auto& v = ex.image(r, c);
        v = std::clamp(v + (s.mask(r, c) ? bg - fg : fg - bg), 0.0, 1.0);
      }
    click(pr, pc);
    const int extra = std::uniform_int_distribution<int>(0, 2)(rng);
    for (int i = 0; i < extra; ++i) {
      int r, c;
      rand_in_box(r, c);
      click(r, c);
    }
  } else if (u(rng) < cfg.click_prob) {
    const int n = std::uniform_int_distribution<int>(1, static_cast<int>(cfg.max_clicks))(rng);
    for (int i = 0; i < n; ++i) {
      int r, c;
      rand_in_box(r, c);
      click(r, c);
    }
  }
  return ex;
}

inline std::vector<int> mask_labels(const Mask& m) {
  std::vector<int> out(m.size());
  for (std::size_t i = 0; i < m.size(); ++i) out[i] = m.values[i] ? 1 : 0;
  return out;
}

/// Mean Dice of box-prompted predictions.
inline Real mean_box_dice(const PromptableModel& model, std::span<const Sample> samples) {
  if (samples.empty()) return 0;
  Real total = 0;
  for (const auto& s : samples) {
    const Tensor logits = model.forward(s.image, {s.box, {}}).logits;
    total += overlap_metrics(binarize_logits(logits), s.mask).dice;
  }
  return total / static_cast<Real>(samples.size());
}

/// Mean standard deviation of the encoder token features.
inline Real mean_feature_std(const PromptableModel& model, std::span<const Sample> samples) {
  Real total = 0;
  for (const auto& s : samples) {
    const Tensor f = model.encode(s.image).tokens;
    Real mean = 0, sq = 0;
    for (Real v : f.data()) mean += v;
    mean /= static_cast<Real>(f.numel());
    for (Real v : f.data()) sq += (v - mean) * (v - mean);
    total += std::sqrt(sq / static_cast<Real>(f.numel()));
  }
  return samples.empty() ? 0 : total / static_cast<Real>(samples.size());
}

/// Trains every non-adapter parameter; afterwards the sigma head is set to
/// 0.05 × the mean feature standard deviation. Throws NumericError if the
/// loss diverges.
inline PretrainReport pretrain_source(PromptableModel& model, std::span<const Sample> corpus,
                                      const PretrainConfig& cfg) {
  PretrainReport report;
  model.set_mode(TrainMode::pretrain);
  std::vector<Tensor> params = model.pretrained_parameters();
  AdamState adam;
  std::mt19937_64 rng(cfg.seed);
  std::vector<std::size_t> order(corpus.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  const std::size_t batch = std::max<std::size_t>(cfg.batch, 1);
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    Real epoch_loss = 0;
    for (std::size_t start = 0; start < order.size(); start += batch) {
      const std::size_t end = std::min(order.size(), start + batch);
      for (auto& p : params) p.zero_grad();
      for (std::size_t i = start; i < end; ++i) {
        const Sample& s = corpus[order[i]];
        const TrainingExample ex = make_training_example(s, cfg, rng);
        const Tensor logits = model.forward(ex.image, ex.prompts).logits;
        const auto labels = mask_labels(s.mask);
        Tensor loss = scale(cross_entropy(logits, labels), 1.0 / static_cast<Real>(end - start));
        if (!std::isfinite(loss.item())) throw NumericError("pretraining diverged");
        epoch_loss += loss.item() * static_cast<Real>(end - start);
        backward(loss);
      }
      if (!adam_step(params, adam, cfg.lr)) throw NumericError("pretraining produced a non-finite gradient");
      ++report.steps;
    }
    report.final_loss = epoch_loss / static_cast<Real>(std::max<std::size_t>(corpus.size(), 1));
  }
  model.set_mode(TrainMode::inference);
  const std::size_t probe = std::min<std::size_t>(corpus.size(), 32);
  if (probe > 0) model.init_sigma_head(0.05 * mean_feature_std(model, corpus.first(probe)));
  report.source_dice = mean_box_dice(model, corpus);
  return report;
}

}  // namespace eviatta
