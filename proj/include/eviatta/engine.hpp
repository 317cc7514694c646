#pragma once

// Online active test-time adaptation. Each test batch is forwarded with its
// initial prompts, a few samples are picked for pixel annotation, a replay
// buffer of expert-corrected predictions is maintained, and exactly one Adam
// step is taken on the adapters before the batch is scored.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <deque>
#include <memory>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "eviatta/evidential.hpp"
#include "eviatta/losses.hpp"
#include "eviatta/metrics.hpp"
#include "eviatta/model.hpp"
#include "eviatta/sampler.hpp"
#include "eviatta/synth.hpp"

namespace eviatta {

enum class Regime { batchwise, instancewise };
enum class ScoringMode { post_step, pre_step };

inline const char* to_string(Regime r) { return r == Regime::batchwise ? "batchwise" : "instancewise"; }
inline const char* to_string(ScoringMode s) { return s == ScoringMode::post_step ? "post" : "pre"; }

inline Regime parse_regime(const std::string& s) {
  if (s == "batchwise") return Regime::batchwise;
  if (s == "instancewise") return Regime::instancewise;
  throw std::invalid_argument("unknown regime: " + s);
}

inline ScoringMode parse_scoring(const std::string& s) {
  if (s == "post") return ScoringMode::post_step;
  if (s == "pre") return ScoringMode::pre_step;
  throw std::invalid_argument("unknown scoring mode: " + s);
}

inline UncertaintyKind parse_uncertainty_kind(const std::string& s) {
  if (s == "U") return UncertaintyKind::overall;
  if (s == "U_data") return UncertaintyKind::data;
  if (s == "U_dis") return UncertaintyKind::dis;
  if (s == "random") return UncertaintyKind::random;
  throw std::invalid_argument("unknown uncertainty kind: " + s);
}

/// Named presets, or an explicit "<sample>/<pixel>" pairing such as
/// "U_dis/U_data". Explicit pairings use distance reweighting whenever the
/// pixel map is U_data or U_dis.
inline AcquisitionRule sampler_rule(const std::string& name) {
  if (name == "eviatta") return AcquisitionRule::eviatta();
  if (name == "entropy") return AcquisitionRule::entropy();
  if (name == "random") return AcquisitionRule::random();
  if (name == "swapped") return AcquisitionRule::swapped();
  const auto slash = name.find('/');
  if (slash == std::string::npos) throw std::invalid_argument("unknown sampler: " + name);
  AcquisitionRule r;
  r.sample_score = parse_uncertainty_kind(name.substr(0, slash));
  r.pixel_score = parse_uncertainty_kind(name.substr(slash + 1));
  r.distance_aware = r.pixel_score == UncertaintyKind::data || r.pixel_score == UncertaintyKind::dis;
  return r;
}

struct LossToggles {
  bool prompt = true;
  bool replay = true;
  bool var = true;

  bool any() const { return prompt || replay || var; }
  bool operator==(const LossToggles&) const = default;
};

struct RunConfig {
  Regime regime = Regime::batchwise;
  std::size_t batch_size = 32;
  Real sample_fraction = 0.10;  // ignored instance-wise, where every sample is annotated
  std::size_t points = 5;       // M
  Real lr = 1e-4;
  std::size_t buffer_capacity = 128;
  std::size_t replay_draw = 16;
  std::string sampler = "eviatta";
  LossToggles losses;
  unsigned lora_targets = kLoraO;
  std::size_t lora_rank = 4;
  bool freeze_sigma = false;
  bool adapt = true;  // false: no optimizer steps at all
  ScoringMode scoring = ScoringMode::post_step;
  KlReduction reduction = KlReduction::mean;
  int prompt_noise = 0;       // box corner jitter in pixels
  bool record_time = false;   // wall_ms stays 0 unless set, so logs are reproducible
  std::uint64_t seed = 0;

  static RunConfig batchwise() { return {}; }

  static RunConfig instancewise() {
    RunConfig c;
    c.regime = Regime::instancewise;
    c.batch_size = 1;
    c.lr = 1e-5;
    c.replay_draw = 1;
    return c;
  }

  /// Box prompts only and no updates.
  static RunConfig zero_shot() {
    RunConfig c;
    c.sampler = "random";
    c.points = 0;
    c.losses = {false, false, false};
    c.adapt = false;
    return c;
  }

  std::size_t effective_batch() const { return regime == Regime::instancewise ? 1 : batch_size; }
  Real budget_label() const { return regime == Regime::instancewise ? 1.0 : sample_fraction; }

  void validate() const {
    if (effective_batch() == 0) throw std::invalid_argument("batch size must be positive");
    if (!(sample_fraction > 0 && sample_fraction <= 1)) throw std::invalid_argument("sample fraction must lie in (0, 1]");
    if (!(lr >= 0) || !std::isfinite(lr)) throw std::invalid_argument("learning rate must be a finite non-negative number");
    if (buffer_capacity == 0) throw std::invalid_argument("replay buffer capacity must be positive");
    if (lora_rank == 0) throw std::invalid_argument("LoRA rank must be positive");
    if ((lora_targets & ~unsigned{15}) != 0) throw std::invalid_argument("invalid LoRA target mask");
    if (prompt_noise < 0) throw std::invalid_argument("prompt noise must be non-negative");
    sampler_rule(sampler);
  }
};

// ---------------------------------------------------------------------------
// Replay buffer

struct ReplayEntry {
  std::size_t sample_id = 0;
  std::shared_ptr<const StemOutput> stem;  // frozen encoder state of the image
  PromptSet prompts;
  Tensor stored_logits;
  std::uint64_t inserted = 0;
};

/// FIFO store of annotated samples with their post-annotation logits.
class ReplayBuffer {
 public:
  explicit ReplayBuffer(std::size_t capacity = 128) : capacity_(capacity) {
    if (capacity_ == 0) throw std::invalid_argument("replay buffer capacity must be positive");
  }

  std::size_t capacity() const { return capacity_; }
  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  const std::deque<ReplayEntry>& entries() const { return entries_; }
  std::uint64_t pushed() const { return counter_; }

  void push(ReplayEntry e) {
    e.inserted = counter_++;
    entries_.push_back(std::move(e));
    while (entries_.size() > capacity_) entries_.pop_front();
  }

  /// Uniform draw without replacement; `count` clamps to the buffer size.
  std::vector<const ReplayEntry*> draw(std::size_t count, std::mt19937_64& rng) const {
    std::vector<std::size_t> idx(entries_.size());
    std::iota(idx.begin(), idx.end(), 0);
    count = std::min(count, idx.size());
    for (std::size_t i = 0; i < count; ++i) {
      const std::size_t j = std::uniform_int_distribution<std::size_t>(i, idx.size() - 1)(rng);
      std::swap(idx[i], idx[j]);
    }
    std::vector<const ReplayEntry*> out;
    out.reserve(count);
    for (std::size_t i = 0; i < count; ++i) out.push_back(&entries_[idx[i]]);
    return out;
  }

  std::vector<const ReplayEntry*> draw(std::size_t count, std::uint64_t seed) const {
    std::mt19937_64 rng(seed);
    return draw(count, rng);
  }

 private:
  std::size_t capacity_;
  std::deque<ReplayEntry> entries_;
  std::uint64_t counter_ = 0;
};

// ---------------------------------------------------------------------------
// Metric log

struct BatchRecord {
  std::size_t batch_index = 0;
  std::string sampler;
  Real budget = 0;
  MetricReport metrics;  // mean over the batch
  Real loss = 0;
  Real wall_ms = 0;
  bool stepped = false;
  std::size_t labeled = 0;
};

struct MetricLog {
  std::vector<BatchRecord> batches;
  std::vector<MetricReport> per_sample;  // stream order
  std::vector<std::string> events;

  MetricReport aggregate() const {
    MetricReport m;
    if (per_sample.empty()) return m;
    for (const auto& r : per_sample) {
      m.dice += r.dice;
      m.jaccard += r.jaccard;
      m.asd += r.asd;
      m.hd95 += r.hd95;
    }
    const Real n = static_cast<Real>(per_sample.size());
    m.dice /= n;
    m.jaccard /= n;
    m.asd /= n;
    m.hd95 /= n;
    return m;
  }

  static constexpr const char* kCsvHeader = "batch_index,sampler,budget,dice,jaccard,asd,hd95,loss,wall_ms";

  static std::string csv_row(const BatchRecord& b) {
    char buf[256];
    std::snprintf(buf, sizeof buf, "%zu,%s,%.2f,%.6f,%.6f,%.6f,%.6f,%.8f,%.3f", b.batch_index, b.sampler.c_str(),
                  b.budget, b.metrics.dice, b.metrics.jaccard, b.metrics.asd, b.metrics.hd95, b.loss, b.wall_ms);
    return buf;
  }

  std::string to_csv() const {
    std::string out = std::string(kCsvHeader) + "\n";
    for (const auto& b : batches) out += csv_row(b) + "\n";
    return out;
  }
};

// ---------------------------------------------------------------------------
// Engine

/// Stateful adaptation run. A batch goes through begin_batch, the
/// annotation of every open cursor, and finish_batch. run() drives the
/// phases with a synchronous oracle; the HTTP service drives them one
/// answer at a time.
class AdaptationEngine {
 public:
  AdaptationEngine(PromptableModel model, RunConfig cfg)
      : model_(std::move(model)), cfg_(std::move(cfg)), rule_(sampler_rule(cfg_.sampler)),
        buffer_(cfg_.buffer_capacity), rng_(mix_seed(cfg_.seed, 0xE1)) {
    cfg_.validate();
    model_.inject_lora(cfg_.lora_targets, cfg_.lora_rank, mix_seed(cfg_.seed, 0x10A));
    model_.set_freeze_sigma(cfg_.freeze_sigma);
    model_.set_mode(cfg_.adapt ? TrainMode::adapt : TrainMode::inference);
    trainable_ = model_.trainable_parameters();
  }

  // open cursors hold a pointer back to the engine
  AdaptationEngine(const AdaptationEngine&) = delete;
  AdaptationEngine& operator=(const AdaptationEngine&) = delete;

  const PromptableModel& model() const { return model_; }
  const RunConfig& config() const { return cfg_; }
  const ReplayBuffer& buffer() const { return buffer_; }
  const MetricLog& log() const { return log_; }
  std::size_t steps_taken() const { return adam_.step; }
  std::size_t batches_done() const { return log_.batches.size(); }

  /// Inference forward on a cached stem; records no graph.
  Tensor predict(const StemOutput& stem, const PromptSet& prompts) const {
    NoGradGuard guard;
    const Tensor tokens = model_.encode_tokens(stem.tokens0);
    return model_.decode(tokens, stem.skip, model_.encode_prompt(prompts));
  }

  PromptSet initial_prompt(const Sample& s) const {
    const Box b = perturb_prompt(s.box, cfg_.prompt_noise, mix_seed(cfg_.seed ^ 0xB0C5, s.id), s.image.rows,
                                 s.image.cols);
    return {b, {}};
  }

  // -- phases ---------------------------------------------------------------

  bool batch_open() const { return open_.has_value(); }

  /// Steps (1) to (3): forward, uncertainty, sample selection, open cursors.
  void begin_batch(std::span<const Sample> batch) {
    if (open_) throw std::logic_error("begin_batch: previous batch still open");
    if (batch.empty()) throw std::invalid_argument("begin_batch: empty batch");
    OpenBatch ob;
    ob.started = std::chrono::steady_clock::now();
    ob.samples.assign(batch.begin(), batch.end());
    const std::size_t n = ob.samples.size();
    std::vector<Real> scores(n);
    {
      NoGradGuard guard;
      for (std::size_t i = 0; i < n; ++i) {
        ob.stems.push_back(std::make_shared<const StemOutput>(model_.stem(ob.samples[i].image)));
        ob.initial.push_back(initial_prompt(ob.samples[i]));
      }
    }
    for (std::size_t i = 0; i < n; ++i) {
      ob.initial_logits.push_back(predict(*ob.stems[i], ob.initial[i]));
      if (cfg_.regime == Regime::batchwise)
        scores[i] = sample_score(decompose(evidence_from_logits(ob.initial_logits[i])), rule_.sample_score, rng_);
    }
    const std::size_t k = cfg_.regime == Regime::instancewise ? n : budget_from_fraction(cfg_.sample_fraction, n);
    if (cfg_.regime == Regime::instancewise) {
      ob.selection.selected_indices.resize(n);
      std::iota(ob.selection.selected_indices.begin(), ob.selection.selected_indices.end(), 0);
      ob.selection.scores = scores;
    } else {
      ob.selection = select_topk_samples(scores, k);
    }
    for (std::size_t pos : ob.selection.selected_indices) {
      auto stem = ob.stems[pos];
      PromptForward fwd = [this, stem](const PromptSet& p) { return predict(*stem, p); };
      ob.cursors.emplace_back(ob.samples[pos].id, ob.initial[pos], cfg_.points, rule_, std::move(fwd), rng_());
      ob.failed.push_back(false);
    }
    open_ = std::move(ob);
  }

  std::span<const Sample> open_samples() const { return require_open().samples; }
  const SelectionResult& selection() const { return require_open().selection; }
  std::size_t cursor_count() const { return require_open().cursors.size(); }
  AnnotationCursor& cursor(std::size_t k) { return require_open().cursors.at(k); }
  const Tensor& initial_logits(std::size_t pos) const { return require_open().initial_logits.at(pos); }

  /// An oracle failure leaves the sample unlabelled for this batch.
  void mark_failed(std::size_t k, const std::string& why) {
    require_open().failed.at(k) = true;
    log_.events.push_back("batch " + std::to_string(log_.batches.size()) + ": oracle failure on sample " +
                          std::to_string(cursor(k).sample_id()) + ": " + why);
  }

  /// Step (4) with a synchronous oracle.
  void annotate_open(LabelOracle& oracle) {
    auto& ob = require_open();
    for (std::size_t k = 0; k < ob.cursors.size(); ++k) {
      auto& cur = ob.cursors[k];
      try {
        while (!cur.complete()) {
          const PixelQuery q = cur.pending();
          cur.answer(oracle.label(cur.sample_id(), q.row, q.col));
        }
      } catch (const OracleError& e) {
        mark_failed(k, e.what());
      }
    }
  }

  /// Steps (5) to (8): replay, loss, one optimizer step, scoring.
  const BatchRecord& finish_batch() {
    auto& ob = require_open();
    const std::size_t n = ob.samples.size();
    for (const auto& c : ob.cursors)
      if (!c.complete() && !ob.failed[&c - ob.cursors.data()])
        throw std::logic_error("finish_batch: annotation still in progress");

    std::vector<int> labeled_slot(n, -1);
    for (std::size_t k = 0; k < ob.cursors.size(); ++k)
      if (!ob.failed[k]) labeled_slot[ob.selection.selected_indices[k]] = static_cast<int>(k);

    for (std::size_t pos = 0; pos < n; ++pos) {
      if (labeled_slot[pos] < 0) continue;
      const auto& cur = ob.cursors[static_cast<std::size_t>(labeled_slot[pos])];
      buffer_.push({ob.samples[pos].id, ob.stems[pos], cur.prompts(), cur.current_logits(), 0});
    }
    const auto replayed = buffer_.draw(cfg_.replay_draw, rng_);

    BatchRecord rec;
    rec.batch_index = log_.batches.size();
    rec.sampler = cfg_.sampler;
    rec.budget = cfg_.budget_label();

    if (cfg_.adapt) {
      model_.zero_grad();
      LossTerms terms = build_losses(ob, labeled_slot, replayed);
      const Tensor total = terms.total();
      rec.loss = total.item();
      if (!std::isfinite(rec.loss)) {
        log_.events.push_back("batch " + std::to_string(rec.batch_index) + ": non-finite loss, step skipped");
      } else {
        backward(total);
        if (adam_step(trainable_, adam_, cfg_.lr))
          rec.stepped = true;
        else
          log_.events.push_back("batch " + std::to_string(rec.batch_index) + ": non-finite gradient, step skipped");
      }
      model_.zero_grad();
    }

    MetricReport sum;
    for (std::size_t pos = 0; pos < n; ++pos) {
      const bool labeled = labeled_slot[pos] >= 0;
      const AnnotationCursor* cur = labeled ? &ob.cursors[static_cast<std::size_t>(labeled_slot[pos])] : nullptr;
      Tensor logits;
      if (cfg_.scoring == ScoringMode::post_step)
        logits = predict(*ob.stems[pos], labeled ? cur->prompts() : ob.initial[pos]);
      else
        logits = labeled ? cur->current_logits() : ob.initial_logits[pos];
      const MetricReport m = evaluate(binarize_logits(logits), ob.samples[pos].mask);
      log_.per_sample.push_back(m);
      sum.dice += m.dice;
      sum.jaccard += m.jaccard;
      sum.asd += m.asd;
      sum.hd95 += m.hd95;
      rec.labeled += labeled;
    }
    const Real nn = static_cast<Real>(n);
    rec.metrics = {sum.dice / nn, sum.jaccard / nn, sum.asd / nn, sum.hd95 / nn};
    if (cfg_.record_time)
      rec.wall_ms = std::chrono::duration<Real, std::milli>(std::chrono::steady_clock::now() - ob.started).count();
    log_.batches.push_back(rec);
    open_.reset();
    return log_.batches.back();
  }

  /// Processes the stream in batches with a synchronous oracle.
  const MetricLog& run(std::span<const Sample> stream, LabelOracle& oracle) {
    const std::size_t b = cfg_.effective_batch();
    for (std::size_t start = 0; start < stream.size(); start += b) {
      begin_batch(stream.subspan(start, std::min(b, stream.size() - start)));
      annotate_open(oracle);
      finish_batch();
    }
    return log_;
  }

 private:
  struct OpenBatch {
    std::chrono::steady_clock::time_point started;
    std::vector<Sample> samples;
    std::vector<std::shared_ptr<const StemOutput>> stems;
    std::vector<PromptSet> initial;
    std::vector<Tensor> initial_logits;
    SelectionResult selection;
    std::vector<AnnotationCursor> cursors;
    std::vector<bool> failed;
  };

  OpenBatch& require_open() {
    if (!open_) throw std::logic_error("no batch is open");
    return *open_;
  }
  const OpenBatch& require_open() const {
    if (!open_) throw std::logic_error("no batch is open");
    return *open_;
  }

  LossTerms build_losses(const OpenBatch& ob, const std::vector<int>& labeled_slot,
                         const std::vector<const ReplayEntry*>& replayed) {
    LossTerms terms;
    const std::size_t n = ob.samples.size();
    std::size_t n_labeled = 0;
    for (int s : labeled_slot) n_labeled += s >= 0;

    if (cfg_.losses.prompt && n_labeled > 0) {
      Tensor acc = zero_loss();
      for (std::size_t pos = 0; pos < n; ++pos) {
        if (labeled_slot[pos] < 0) continue;
        const auto& cur = ob.cursors[static_cast<std::size_t>(labeled_slot[pos])];
        const Tensor tokens = model_.encode_tokens(ob.stems[pos]->tokens0);
        std::vector<Tensor> snaps;
        for (std::size_t m = 0; m <= cur.prompts().points.size(); ++m)
          snaps.push_back(model_.decode(tokens, ob.stems[pos]->skip, model_.encode_prompt(cur.prompts().prefix(m))));
        acc = add(acc, prompt_consistency_loss(snaps, cfg_.reduction));
      }
      terms.prompt = scale(acc, 1.0 / static_cast<Real>(n_labeled));
    }

    if (cfg_.losses.replay && !replayed.empty()) {
      std::vector<Tensor> stored, current;
      for (const ReplayEntry* e : replayed) {
        const Tensor tokens = model_.encode_tokens(e->stem->tokens0);
        stored.push_back(e->stored_logits);
        current.push_back(model_.decode(tokens, e->stem->skip, model_.encode_prompt(e->prompts)));
      }
      terms.replay = replay_loss(stored, current, cfg_.reduction);
    }

    if (cfg_.losses.var && n_labeled < n) {
      Tensor acc = zero_loss();
      for (std::size_t pos = 0; pos < n; ++pos) {
        if (labeled_slot[pos] >= 0) continue;
        const Tensor tokens = model_.encode_tokens(ob.stems[pos]->tokens0);
        const PromptEmbedding pe = model_.encode_prompt(ob.initial[pos]);
        const Tensor det = model_.decode(tokens, ob.stems[pos]->skip, pe);
        const Tensor z = model_.perturb(tokens, model_.draw_noise(rng_()));
        const Tensor var = model_.decode(z, ob.stems[pos]->skip, pe);
        acc = add(acc, variational_consistency_loss(det, var, cfg_.reduction));
      }
      terms.var = scale(acc, 1.0 / static_cast<Real>(n - n_labeled));
    }
    return terms;
  }

  PromptableModel model_;
  RunConfig cfg_;
  AcquisitionRule rule_;
  ReplayBuffer buffer_;
  std::mt19937_64 rng_;
  std::vector<Tensor> trainable_;
  AdamState adam_;
  MetricLog log_;
  std::optional<OpenBatch> open_;
};

inline GroundTruthOracle make_ground_truth_oracle(std::span<const Sample> corpus) {
  auto index = std::make_shared<std::unordered_map<std::size_t, const Mask*>>();
  for (const auto& s : corpus) (*index)[s.id] = &s.mask;
  return GroundTruthOracle([index](std::size_t id) -> const Mask& {
    auto it = index->find(id);
    if (it == index->end()) throw OracleError("no ground truth for sample " + std::to_string(id));
    return *it->second;
  });
}

/// Runs one configuration over a stream with ground-truth answers.
inline MetricLog adapt_stream(std::span<const Sample> stream, const PromptableModel& pretrained, const RunConfig& cfg,
                              LabelOracle& oracle) {
  AdaptationEngine engine(pretrained.clone(), cfg);
  return engine.run(stream, oracle);
}

inline MetricLog adapt_stream(std::span<const Sample> stream, const PromptableModel& pretrained, const RunConfig& cfg) {
  GroundTruthOracle oracle = make_ground_truth_oracle(stream);
  return adapt_stream(stream, pretrained, cfg, oracle);
}

}  // namespace eviatta
