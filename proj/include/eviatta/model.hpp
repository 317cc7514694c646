#pragma once

// Desk-scale promptable segmentation network.
//
//   image encoder   conv3x3/2 -> GELU (kept as a half-resolution skip map)
//                   -> conv3x3/s to a g×g token grid -> + learned positions
//                   -> pre-LN single-head self-attention (W_Q, W_K, W_V, W_O,
//                   each optionally carrying a LoRA adapter) -> pre-LN MLP
//   prompt encoder  sparse tokens (sinusoidal position + label embedding,
//                   mean pooled) and dense maps (box interior, Gaussian
//                   bumps per label kind) at decoder resolution
//   mask decoder    per-pixel MLP over [upsampled tokens, skip, dense prompt,
//                   pooled prompt] at half resolution, nearest-upsampled to
//                   H×W×C logits
//   sigma head      1x1 conv + softplus on the token grid; the variational
//                   path decodes z = tokens + eps ⊙ sigma instead.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <map>
#include <numbers>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "eviatta/grid.hpp"
#include "eviatta/prompt.hpp"
#include "eviatta/tensor.hpp"

namespace eviatta {

enum LoraTarget : unsigned { kLoraQ = 1u, kLoraK = 2u, kLoraV = 4u, kLoraO = 8u };

inline const char* lora_target_name(unsigned t) {
  switch (t) {
    case kLoraQ: return "q";
    case kLoraK: return "k";
    case kLoraV: return "v";
    case kLoraO: return "o";
  }
  return "?";
}

/// Parses "q,v" / "o" / "none" into a target bitmask.
inline unsigned parse_lora_targets(const std::string& spec) {
  if (spec.empty() || spec == "none") return 0;
  unsigned mask = 0;
  std::size_t start = 0;
  while (start <= spec.size()) {
    const std::size_t end = std::min(spec.find_first_of(",+", start), spec.size());
    std::string tok = spec.substr(start, end - start);
    for (auto& ch : tok) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
    if (tok == "q" || tok == "wq") mask |= kLoraQ;
    else if (tok == "k" || tok == "wk") mask |= kLoraK;
    else if (tok == "v" || tok == "wv") mask |= kLoraV;
    else if (tok == "o" || tok == "wo") mask |= kLoraO;
    else throw std::invalid_argument("unknown LoRA target: " + tok);
    start = end + 1;
  }
  return mask;
}

inline std::string format_lora_targets(unsigned mask) {
  std::string s;
  for (unsigned t : {kLoraQ, kLoraK, kLoraV, kLoraO})
    if (mask & t) s += (s.empty() ? "" : ",") + std::string(lora_target_name(t));
  return s.empty() ? "none" : s;
}

struct ModelConfig {
  std::size_t image_size = 64;
  std::size_t token_grid = 8;
  std::size_t embed_dim = 32;
  std::size_t classes = 2;
  std::size_t lora_rank = 4;
  unsigned lora_targets = kLoraO;
  std::size_t stem_channels = 8;
  std::size_t decoder_hidden = 32;
  double point_sigma = 0.05;  // Gaussian bump width as a fraction of image size
  std::uint64_t seed = 0;

  std::size_t half() const { return (image_size - 1) / 2 + 1; }
  std::size_t token_stride() const { return (image_size + 2 * token_grid - 1) / (2 * token_grid); }
  std::size_t token_upsample() const { return half() / token_grid; }

  void validate() const {
    if (image_size < 4 || image_size % 2 != 0) throw std::invalid_argument("image_size must be even and >= 4");
    if (token_grid == 0 || image_size % token_grid != 0)
      throw std::invalid_argument("image_size must be divisible by token_grid");
    if ((half() - 1) / token_stride() + 1 != token_grid || half() % token_grid != 0)
      throw std::invalid_argument("token grid does not tile the half-resolution map");
    if (lora_rank == 0) throw std::invalid_argument("lora_rank must be >= 1");
    if (embed_dim < 4 || embed_dim % 4 != 0) throw std::invalid_argument("embed_dim must be a positive multiple of 4");
    if (classes < 2) throw std::invalid_argument("classes must be >= 2");
  }

  bool operator==(const ModelConfig&) const = default;
};

/// Image-encoder output. `skip` is frozen-path detail at half resolution,
/// `tokens` is the g²×d feature grid the adapters act on.
struct ImageEmbedding {
  Tensor skip;    // half×half×stem_channels
  Tensor tokens;  // g²×d
};

/// Encoder state before the attention block; frozen during adaptation, so
/// callers may cache it per image.
struct StemOutput {
  Tensor skip;     // half×half×stem_channels
  Tensor tokens0;  // g²×d
};

struct PromptEmbedding {
  Tensor dense;   // half²×kDenseChannels (constant)
  Tensor pooled;  // 1×d
};

inline constexpr std::size_t kPromptLabels = 4;  // negative, positive, box top-left, box bottom-right
inline constexpr std::size_t kDenseChannels = 5; // box interior + one bump map per label

struct ForwardResult {
  Tensor logits;  // H×W×C
  Tensor sigma;   // g²×d, only for variational forwards
};

enum class TrainMode { inference, pretrain, adapt };

class PromptableModel {
 public:
  explicit PromptableModel(ModelConfig cfg) : cfg_(cfg) {
    cfg_.validate();
    init_parameters();
  }

  const ModelConfig& config() const { return cfg_; }

  // -------------------------------------------------------------------------
  // Parameters

  const std::vector<std::pair<std::string, Tensor>>& named_parameters() const { return params_; }

  Tensor& param(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("no parameter named " + name);
    return params_[it->second].second;
  }
  const Tensor& param(const std::string& name) const { return const_cast<PromptableModel*>(this)->param(name); }
  bool has_param(const std::string& name) const { return index_.count(name) != 0; }

  static bool is_adapter_name(const std::string& n) { return n.rfind("lora.", 0) == 0; }
  static bool is_sigma_name(const std::string& n) { return n.rfind("sigma.", 0) == 0; }

  /// LoRA A/B for every configured target plus the sigma head (unless frozen).
  std::vector<Tensor> trainable_parameters() const {
    std::vector<Tensor> out;
    for (const auto& [n, t] : params_)
      if (is_adapter_name(n) || (is_sigma_name(n) && !freeze_sigma_)) out.push_back(t);
    return out;
  }

  std::vector<std::string> trainable_names() const {
    std::vector<std::string> out;
    for (const auto& [n, t] : params_)
      if (is_adapter_name(n) || (is_sigma_name(n) && !freeze_sigma_)) out.push_back(n);
    return out;
  }

  /// Backbone, prompt-encoder and decoder weights.
  std::vector<Tensor> pretrained_parameters() const {
    std::vector<Tensor> out;
    for (const auto& [n, t] : params_)
      if (!is_adapter_name(n) && !is_sigma_name(n)) out.push_back(t);
    return out;
  }

  void set_freeze_sigma(bool f) { freeze_sigma_ = f; }
  bool sigma_frozen() const { return freeze_sigma_; }

  void set_mode(TrainMode mode) {
    for (auto& [n, t] : params_) {
      bool on = false;
      if (mode == TrainMode::pretrain) on = !is_adapter_name(n) && !is_sigma_name(n);
      if (mode == TrainMode::adapt) on = is_adapter_name(n) || (is_sigma_name(n) && !freeze_sigma_);
      t.set_requires_grad(on);
      t.zero_grad();
    }
  }

  void zero_grad() {
    for (auto& [n, t] : params_) t.zero_grad();
  }

  /// Re-creates adapters on `targets`: A ~ N(0, 0.02²), B = 0.
  void inject_lora(unsigned targets, std::size_t rank, std::uint64_t seed) {
    std::vector<std::pair<std::string, Tensor>> kept;
    for (auto& p : params_)
      if (!is_adapter_name(p.first)) kept.push_back(std::move(p));
    params_ = std::move(kept);
    cfg_.lora_targets = targets;
    cfg_.lora_rank = rank;
    cfg_.validate();
    std::mt19937_64 rng(seed);
    std::normal_distribution<Real> nd(0, 0.02);
    const std::size_t d = cfg_.embed_dim;
    for (unsigned t : {kLoraQ, kLoraK, kLoraV, kLoraO}) {
      if (!(targets & t)) continue;
      std::vector<Real> a(rank * d);
      for (auto& v : a) v = nd(rng);
      params_.emplace_back(std::string("lora.") + lora_target_name(t) + ".A", Tensor::from({rank, d}, std::move(a)));
      params_.emplace_back(std::string("lora.") + lora_target_name(t) + ".B", Tensor::zeros({d, rank}));
    }
    reindex();
  }

  /// Effective low-rank update B·A (d×d) of one target; zeros if absent.
  std::vector<Real> lora_delta(unsigned target) const {
    const std::size_t d = cfg_.embed_dim, r = cfg_.lora_rank;
    std::vector<Real> delta(d * d, 0);
    const std::string base = std::string("lora.") + lora_target_name(target);
    if (!has_param(base + ".A")) return delta;
    const auto& A = param(base + ".A");
    const auto& B = param(base + ".B");
    for (std::size_t i = 0; i < d; ++i)
      for (std::size_t k = 0; k < r; ++k)
        for (std::size_t j = 0; j < d; ++j) delta[i * d + j] += B[i * r + k] * A[k * d + j];
    return delta;
  }

  /// Sets the sigma head so softplus output starts at `target_sigma` everywhere.
  void init_sigma_head(Real target_sigma) {
    auto w = param("sigma.w").mutable_data();
    std::fill(w.begin(), w.end(), 0.0);
    auto b = param("sigma.b").mutable_data();
    const Real s = std::max(target_sigma, Real{1e-6});
    std::fill(b.begin(), b.end(), std::log(std::expm1(s)));
  }

  // -------------------------------------------------------------------------
  // Forward pieces

  /// Grayscale H×W image replicated to three channels.
  Tensor image_tensor(const RealMap& image) const {
    if (image.rows != cfg_.image_size || image.cols != cfg_.image_size)
      throw ShapeError("image extent does not match model image_size");
    std::vector<Real> v(image.size() * 3);
    for (std::size_t i = 0; i < image.size(); ++i) v[3 * i] = v[3 * i + 1] = v[3 * i + 2] = image.values[i];
    return Tensor::from({image.rows, image.cols, 3}, std::move(v));
  }

  StemOutput stem(const RealMap& image) const {
    const Tensor x = image_tensor(image);
    Tensor skip = gelu(conv2d(x, param("stem.conv1.w"), param("stem.conv1.b"), 2));
    Tensor t = conv2d(skip, param("stem.conv2.w"), param("stem.conv2.b"), cfg_.token_stride());
    const std::size_t g = cfg_.token_grid, d = cfg_.embed_dim;
    t = add(reshape(t, {g * g, d}), param("enc.pos"));
    return {skip, t};
  }

  /// Attention block and MLP on the stem tokens.
  Tensor encode_tokens(const Tensor& tokens0) const {
    const std::size_t d = cfg_.embed_dim;
    Tensor n1 = layer_norm(tokens0, param("enc.ln1.g"), param("enc.ln1.b"));
    Tensor q = project(n1, "attn.wq", kLoraQ);
    Tensor k = project(n1, "attn.wk", kLoraK);
    Tensor v = project(n1, "attn.wv", kLoraV);
    Tensor att = softmax(scale(matmul(q, transpose(k)), 1.0 / std::sqrt(static_cast<Real>(d))));
    Tensor x = add(tokens0, project(matmul(att, v), "attn.wo", kLoraO));
    Tensor n2 = layer_norm(x, param("enc.ln2.g"), param("enc.ln2.b"));
    Tensor h = gelu(add_bias(matmul(n2, param("mlp.w1")), param("mlp.b1")));
    return add(x, add_bias(matmul(h, param("mlp.w2")), param("mlp.b2")));
  }

  ImageEmbedding encode(const RealMap& image) const {
    auto s = stem(image);
    return {s.skip, encode_tokens(s.tokens0)};
  }

  PromptEmbedding encode_prompt(const PromptSet& prompts) const {
    prompts.validate(cfg_.image_size, cfg_.image_size);
    struct Tok {
      double row, col;
      std::size_t label;
    };
    std::vector<Tok> toks;
    toks.push_back({static_cast<double>(prompts.box.r0), static_cast<double>(prompts.box.c0), 2});
    toks.push_back({static_cast<double>(prompts.box.r1), static_cast<double>(prompts.box.c1), 3});
    for (const auto& p : prompts.points)
      toks.push_back({static_cast<double>(p.row), static_cast<double>(p.col), p.positive ? 1u : 0u});

    // pooled sparse tokens: mean(sinusoid) + mean(one-hot) · label_emb
    const std::size_t d = cfg_.embed_dim, n = toks.size();
    const double size = static_cast<double>(cfg_.image_size);
    std::vector<Real> pos(d, 0), hist(kPromptLabels, 0);
    for (const auto& t : toks) {
      const auto e = sinusoid(t.row / size, t.col / size);
      for (std::size_t i = 0; i < d; ++i) pos[i] += e[i] / static_cast<Real>(n);
      hist[t.label] += 1.0 / static_cast<Real>(n);
    }
    Tensor pooled = add(Tensor::from({1, d}, std::move(pos)),
                        matmul(Tensor::from({1, kPromptLabels}, std::move(hist)), param("prompt.label_emb")));

    // dense maps at decoder resolution
    const std::size_t h = cfg_.half();
    const double f = size / static_cast<double>(h);
    const double sig = cfg_.point_sigma * size;
    std::vector<Real> dense(h * h * kDenseChannels, 0);
    for (std::size_t i = 0; i < h; ++i)
      for (std::size_t j = 0; j < h; ++j) {
        const double y = (static_cast<double>(i) + 0.5) * f - 0.5, x = (static_cast<double>(j) + 0.5) * f - 0.5;
        Real* cell = dense.data() + (i * h + j) * kDenseChannels;
        const auto& b = prompts.box;
        cell[0] = (y >= b.r0 - 0.5 && y <= b.r1 + 0.5 && x >= b.c0 - 0.5 && x <= b.c1 + 0.5) ? 1.0 : 0.0;
        for (const auto& t : toks) {
          const double dy = y - t.row, dx = x - t.col;
          cell[1 + t.label] += std::exp(-(dy * dy + dx * dx) / (2 * sig * sig));
        }
      }
    return {Tensor::from({h * h, kDenseChannels}, std::move(dense)), pooled};
  }

  /// Mask decoder on a token grid (deterministic features or a perturbed z).
  Tensor decode(const Tensor& tokens, const Tensor& skip, const PromptEmbedding& prompt) const {
    const std::size_t g = cfg_.token_grid, h = cfg_.half(), hid = cfg_.decoder_hidden;
    Tensor a = matmul(tokens, param("dec.wf"));
    a = reshape(upsample_nearest(reshape(a, {g, g, hid}), cfg_.token_upsample()), {h * h, hid});
    Tensor b = matmul(reshape(skip, {h * h, cfg_.stem_channels}), param("dec.ws"));
    Tensor c = matmul(prompt.dense, param("dec.wp"));
    Tensor gvec = reshape(add(matmul(prompt.pooled, param("dec.wg")), param("dec.b1")), {hid});
    Tensor pre = add_bias(add(add(a, b), c), gvec);
    Tensor out = add_bias(matmul(gelu(pre), param("dec.w2")), param("dec.b2"));
    out = reshape(out, {h, h, cfg_.classes});
    return upsample_nearest(out, cfg_.image_size / h);
  }

  Tensor sigma(const Tensor& tokens) const {
    return softplus(add_bias(matmul(tokens, param("sigma.w")), param("sigma.b")));
  }

  /// Standard-normal noise for one variational draw.
  Tensor draw_noise(std::uint64_t seed) const {
    std::mt19937_64 rng(seed);
    std::normal_distribution<Real> nd(0, 1);
    const std::size_t n = cfg_.token_grid * cfg_.token_grid, d = cfg_.embed_dim;
    std::vector<Real> eps(n * d);
    for (auto& v : eps) v = nd(rng);
    return Tensor::from({n, d}, std::move(eps));
  }

  /// z = tokens + eps ⊙ sigma(tokens).
  Tensor perturb(const Tensor& tokens, const Tensor& eps, Tensor* sigma_out = nullptr) const {
    Tensor s = sigma(tokens);
    if (sigma_out) *sigma_out = s;
    return add(tokens, mul(eps, s));
  }

  ForwardResult forward(const RealMap& image, const PromptSet& prompts, bool variational = false,
                        std::uint64_t seed = 0) const {
    const ImageEmbedding emb = encode(image);
    const PromptEmbedding pe = encode_prompt(prompts);
    if (!variational) return {decode(emb.tokens, emb.skip, pe), {}};
    ForwardResult r;
    Tensor z = perturb(emb.tokens, draw_noise(seed), &r.sigma);
    r.logits = decode(z, emb.skip, pe);
    return r;
  }

  // -------------------------------------------------------------------------
  // Checkpoints: "EVIA", u32 version, config block, u32 record count, then
  // per record u32 name length, name, u32 rank, u64 extents, f64 values.
  // Everything little-endian.

  static constexpr std::uint32_t kCheckpointVersion = 1;

  std::string serialize() const {
    static_assert(std::endian::native == std::endian::little, "checkpoint writer assumes a little-endian host");
    std::string out = "EVIA";
    put<std::uint32_t>(out, kCheckpointVersion);
    put<std::uint64_t>(out, cfg_.image_size);
    put<std::uint64_t>(out, cfg_.token_grid);
    put<std::uint64_t>(out, cfg_.embed_dim);
    put<std::uint64_t>(out, cfg_.classes);
    put<std::uint64_t>(out, cfg_.lora_rank);
    put<std::uint32_t>(out, cfg_.lora_targets);
    put<std::uint64_t>(out, cfg_.stem_channels);
    put<std::uint64_t>(out, cfg_.decoder_hidden);
    put<double>(out, cfg_.point_sigma);
    put<std::uint64_t>(out, cfg_.seed);
    put<std::uint32_t>(out, static_cast<std::uint32_t>(params_.size()));
    for (const auto& [name, t] : params_) {
      put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
      out += name;
      put<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
      for (auto e : t.shape()) put<std::uint64_t>(out, e);
      for (Real v : t.data()) put<double>(out, v);
    }
    return out;
  }

  static PromptableModel deserialize(const std::string& bytes) {
    std::size_t pos = 0;
    if (bytes.size() < 8 || bytes.compare(0, 4, "EVIA") != 0) throw std::runtime_error("checkpoint: bad magic");
    pos = 4;
    if (get<std::uint32_t>(bytes, pos) != kCheckpointVersion) throw std::runtime_error("checkpoint: unsupported version");
    ModelConfig cfg;
    cfg.image_size = get<std::uint64_t>(bytes, pos);
    cfg.token_grid = get<std::uint64_t>(bytes, pos);
    cfg.embed_dim = get<std::uint64_t>(bytes, pos);
    cfg.classes = get<std::uint64_t>(bytes, pos);
    cfg.lora_rank = get<std::uint64_t>(bytes, pos);
    cfg.lora_targets = get<std::uint32_t>(bytes, pos);
    cfg.stem_channels = get<std::uint64_t>(bytes, pos);
    cfg.decoder_hidden = get<std::uint64_t>(bytes, pos);
    cfg.point_sigma = get<double>(bytes, pos);
    cfg.seed = get<std::uint64_t>(bytes, pos);
    PromptableModel m(cfg);
    m.params_.clear();
    const auto count = get<std::uint32_t>(bytes, pos);
    for (std::uint32_t i = 0; i < count; ++i) {
      const auto len = get<std::uint32_t>(bytes, pos);
      if (pos + len > bytes.size()) throw std::runtime_error("checkpoint: truncated name");
      std::string name = bytes.substr(pos, len);
      pos += len;
      const auto rank = get<std::uint32_t>(bytes, pos);
      Shape shape(rank);
      for (auto& e : shape) e = get<std::uint64_t>(bytes, pos);
      std::vector<Real> v(shape_numel(shape));
      for (auto& x : v) x = get<double>(bytes, pos);
      m.params_.emplace_back(std::move(name), Tensor::from(std::move(shape), std::move(v)));
    }
    if (pos != bytes.size()) throw std::runtime_error("checkpoint: trailing bytes");
    m.reindex();
    return m;
  }

  /// Deep copy with independent parameter storage.
  PromptableModel clone() const {
    PromptableModel m(*this);
    for (auto& [n, t] : m.params_) t = t.clone(t.requires_grad());
    return m;
  }

 private:
  Tensor project(const Tensor& x, const std::string& weight, unsigned target) const {
    Tensor y = matmul(x, param(weight));
    if (cfg_.lora_targets & target) {
      const std::string base = std::string("lora.") + lora_target_name(target);
      y = add(y, matmul(matmul(x, param(base + ".B")), param(base + ".A")));
    }
    return y;
  }

  std::vector<Real> sinusoid(double y, double x) const {
    const std::size_t d = cfg_.embed_dim, nf = d / 4;
    std::vector<Real> e(d);
    for (std::size_t k = 0; k < nf; ++k) {
      const double w = std::numbers::pi * static_cast<double>(k + 1);
      e[4 * k + 0] = std::sin(w * y);
      e[4 * k + 1] = std::cos(w * y);
      e[4 * k + 2] = std::sin(w * x);
      e[4 * k + 3] = std::cos(w * x);
    }
    return e;
  }

  void init_parameters() {
    std::mt19937_64 rng(cfg_.seed);
    auto gaussian = [&](Shape s, Real stddev) {
      std::normal_distribution<Real> nd(0, stddev);
      std::vector<Real> v(shape_numel(s));
      for (auto& x : v) x = nd(rng);
      return Tensor::from(std::move(s), std::move(v));
    };
    const std::size_t c1 = cfg_.stem_channels, d = cfg_.embed_dim, g = cfg_.token_grid, hid = cfg_.decoder_hidden;
    auto he = [](std::size_t fan_in) { return std::sqrt(2.0 / static_cast<Real>(fan_in)); };
    auto add_p = [&](const std::string& n, Tensor t) { params_.emplace_back(n, std::move(t)); };
    add_p("stem.conv1.w", gaussian({3, 3, 3, c1}, he(27)));
    add_p("stem.conv1.b", Tensor::zeros({c1}));
    add_p("stem.conv2.w", gaussian({3, 3, c1, d}, he(9 * c1)));
    add_p("stem.conv2.b", Tensor::zeros({d}));
    add_p("enc.pos", gaussian({g * g, d}, 0.02));
    add_p("enc.ln1.g", Tensor::full({d}, 1.0));
    add_p("enc.ln1.b", Tensor::zeros({d}));
    for (const char* w : {"attn.wq", "attn.wk", "attn.wv", "attn.wo"}) add_p(w, gaussian({d, d}, 1.0 / std::sqrt(static_cast<Real>(d))));
    add_p("enc.ln2.g", Tensor::full({d}, 1.0));
    add_p("enc.ln2.b", Tensor::zeros({d}));
    add_p("mlp.w1", gaussian({d, 2 * d}, he(d)));
    add_p("mlp.b1", Tensor::zeros({2 * d}));
    add_p("mlp.w2", gaussian({2 * d, d}, 0.5 / std::sqrt(static_cast<Real>(2 * d))));
    add_p("mlp.b2", Tensor::zeros({d}));
    add_p("prompt.label_emb", gaussian({kPromptLabels, d}, 0.5));
    add_p("dec.wf", gaussian({d, hid}, he(d) * 0.5));
    add_p("dec.ws", gaussian({c1, hid}, he(c1)));
    add_p("dec.wp", gaussian({kDenseChannels, hid}, 1.0));
    add_p("dec.wg", gaussian({d, hid}, 0.5 / std::sqrt(static_cast<Real>(d))));
    add_p("dec.b1", Tensor::zeros({1, hid}));
    add_p("dec.w2", gaussian({hid, cfg_.classes}, 1.0 / std::sqrt(static_cast<Real>(hid))));
    add_p("dec.b2", Tensor::zeros({cfg_.classes}));
    add_p("sigma.w", Tensor::zeros({d, d}));
    add_p("sigma.b", Tensor::full({d}, std::log(std::expm1(0.05))));
    reindex();
    inject_lora(cfg_.lora_targets, cfg_.lora_rank, mix(cfg_.seed, 0x4C6F5241));
  }

  static std::uint64_t mix(std::uint64_t a, std::uint64_t b) {
    std::uint64_t z = a * 0x9E3779B97F4A7C15ull + b;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    return z ^ (z >> 31);
  }

  void reindex() {
    index_.clear();
    for (std::size_t i = 0; i < params_.size(); ++i) index_[params_[i].first] = i;
  }

  template <class T>
  static void put(std::string& out, T v) {
    char buf[sizeof(T)];
    std::memcpy(buf, &v, sizeof(T));
    out.append(buf, sizeof(T));
  }

  template <class T>
  static T get(const std::string& in, std::size_t& pos) {
    if (pos + sizeof(T) > in.size()) throw std::runtime_error("checkpoint: truncated");
    T v;
    std::memcpy(&v, in.data() + pos, sizeof(T));
    pos += sizeof(T);
    return v;
  }

  ModelConfig cfg_;
  std::vector<std::pair<std::string, Tensor>> params_;
  std::map<std::string, std::size_t> index_;
  bool freeze_sigma_ = false;
};

}  // namespace eviatta
