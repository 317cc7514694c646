#pragma once

// Synthetic promptable-segmentation corpus: one bright object (ellipse or
// smooth blob) on a textured background, with optional appearance and
// geometric shifts applied jointly to image and mask.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numbers>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "eviatta/grid.hpp"
#include "eviatta/pgm.hpp"
#include "eviatta/prompt.hpp"

namespace eviatta {

enum class ShapeKind { ellipse, blob };

struct SceneSpec {
  ShapeKind kind = ShapeKind::ellipse;
  double center_row = 32, center_col = 32;
  double radius_row = 10, radius_col = 10;
  double rotation = 0;                 // radians
  std::vector<double> harmonic_amp;    // blob radius modulation, k = 2, 3, ...
  std::vector<double> harmonic_phase;
  double fg_intensity = 0.7;
  double bg_intensity = 0.25;
  double texture_scale = 0.0;          // amplitude of low-frequency background texture
  double pixel_noise = 0.0;            // per-pixel Gaussian noise of the source scanner
  std::uint64_t seed = 0;
};

struct ShiftSpec {
  double gamma = 1.0;
  double noise_std = 0.0;
  int blur_passes = 0;
  double warp_amp = 0.0;  // pixels
  std::string severity = "none";

  bool is_identity() const { return gamma == 1.0 && noise_std == 0.0 && blur_passes == 0 && warp_amp == 0.0; }

  static ShiftSpec identity() { return {}; }
  static ShiftSpec preset(const std::string& name) {
    if (name == "none") return {};
    if (name == "mild") return {0.7, 0.02, 0, 1.0, name};
    if (name == "moderate") return {0.5, 0.04, 1, 2.0, name};
    if (name == "severe") return {0.4, 0.06, 1, 3.0, name};
    throw std::invalid_argument("unknown shift preset: " + name);
  }
};

/// Parameter ranges scenes are drawn from.
struct SceneFamily {
  std::size_t image_size = 64;
  double center_lo = 0.32, center_hi = 0.68;  // fraction of image size
  double radius_lo = 0.12, radius_hi = 0.27;
  double fg_lo = 0.60, fg_hi = 0.85;
  double bg_lo = 0.12, bg_hi = 0.35;
  double texture = 0.05;
  double pixel_noise = 0.03;
  double blob_fraction = 0.5;
};

struct Sample {
  std::size_t id = 0;
  RealMap image;  // H×W in [0, 1]
  Mask mask;
  Box box;
};

inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = a * 0x9E3779B97F4A7C15ull + b + 0x632BE59BD9B4E019ull;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

inline SceneSpec draw_scene(const SceneFamily& fam, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0, 1);
  const double n = static_cast<double>(fam.image_size);
  SceneSpec s;
  s.seed = seed;
  s.kind = u(rng) < fam.blob_fraction ? ShapeKind::blob : ShapeKind::ellipse;
  s.center_row = n * (fam.center_lo + (fam.center_hi - fam.center_lo) * u(rng));
  s.center_col = n * (fam.center_lo + (fam.center_hi - fam.center_lo) * u(rng));
  s.radius_row = n * (fam.radius_lo + (fam.radius_hi - fam.radius_lo) * u(rng));
  s.radius_col = n * (fam.radius_lo + (fam.radius_hi - fam.radius_lo) * u(rng));
  s.rotation = std::numbers::pi * u(rng);
  if (s.kind == ShapeKind::blob) {
    for (int k = 0; k < 3; ++k) {
      s.harmonic_amp.push_back(0.15 * u(rng) / (k + 1));
      s.harmonic_phase.push_back(2 * std::numbers::pi * u(rng));
    }
  }
  s.fg_intensity = fam.fg_lo + (fam.fg_hi - fam.fg_lo) * u(rng);
  s.bg_intensity = fam.bg_lo + (fam.bg_hi - fam.bg_lo) * u(rng);
  s.texture_scale = fam.texture;
  s.pixel_noise = fam.pixel_noise;
  return s;
}

/// Whether scene coordinate (y, x) lies inside the object.
inline bool scene_inside(const SceneSpec& s, double y, double x) {
  const double dy = y - s.center_row, dx = x - s.center_col;
  const double cr = std::cos(s.rotation), sr = std::sin(s.rotation);
  const double u = cr * dy + sr * dx, v = -sr * dy + cr * dx;
  const double a = u / s.radius_row, b = v / s.radius_col;
  double rho2 = a * a + b * b;
  if (s.kind == ShapeKind::ellipse || s.harmonic_amp.empty()) return rho2 <= 1.0;
  const double theta = std::atan2(b, a);
  double scale = 1.0;
  for (std::size_t k = 0; k < s.harmonic_amp.size(); ++k)
    scale += s.harmonic_amp[k] * std::cos(static_cast<double>(k + 2) * theta + s.harmonic_phase[k]);
  return rho2 <= scale * scale;
}

namespace detail {
inline RealMap box_blur(const RealMap& m) {
  RealMap out(m.rows, m.cols, 0.0);
  const auto R = static_cast<std::ptrdiff_t>(m.rows), C = static_cast<std::ptrdiff_t>(m.cols);
  for (std::ptrdiff_t r = 0; r < R; ++r)
    for (std::ptrdiff_t c = 0; c < C; ++c) {
      double s = 0;
      int n = 0;
      for (std::ptrdiff_t dr = -1; dr <= 1; ++dr)
        for (std::ptrdiff_t dc = -1; dc <= 1; ++dc) {
          const auto rr = r + dr, cc = c + dc;
          if (rr < 0 || cc < 0 || rr >= R || cc >= C) continue;
          s += m(static_cast<std::size_t>(rr), static_cast<std::size_t>(cc));
          ++n;
        }
      out(static_cast<std::size_t>(r), static_cast<std::size_t>(c)) = s / n;
    }
  return out;
}
}  // namespace detail

/// Renders image and mask of one scene under a shift. The warp displaces
/// the sampling coordinates, so image and mask stay consistent.
inline Sample render_scene(const SceneSpec& s, const ShiftSpec& shift, std::size_t size) {
  Sample out;
  out.image = RealMap(size, size, 0.0);
  out.mask = Mask(size, size, 0);
  std::mt19937_64 tex_rng(mix_seed(s.seed, 1));
  std::uniform_real_distribution<double> u(0, 1);
  const double n = static_cast<double>(size);
  const double f1 = 1 + 2 * u(tex_rng), f2 = 1 + 2 * u(tex_rng), p1 = 6.283 * u(tex_rng), p2 = 6.283 * u(tex_rng);
  std::normal_distribution<double> pix_noise(0, 1);
  std::mt19937_64 warp_rng(mix_seed(s.seed, 2));
  const double wf1 = 1 + u(warp_rng), wf2 = 1 + u(warp_rng), wp1 = 6.283 * u(warp_rng), wp2 = 6.283 * u(warp_rng);
  for (std::size_t r = 0; r < size; ++r)
    for (std::size_t c = 0; c < size; ++c) {
      double y = static_cast<double>(r), x = static_cast<double>(c);
      if (shift.warp_amp != 0) {
        const double dy = shift.warp_amp * std::sin(2 * std::numbers::pi * wf1 * x / n + wp1);
        const double dx = shift.warp_amp * std::sin(2 * std::numbers::pi * wf2 * y / n + wp2);
        y += dy;
        x += dx;
      }
      const bool in = scene_inside(s, y, x);
      out.mask(r, c) = in ? 1 : 0;
      const double texture = s.texture_scale * std::sin(2 * std::numbers::pi * f1 * y / n + p1) *
                             std::cos(2 * std::numbers::pi * f2 * x / n + p2);
      out.image(r, c) = (in ? s.fg_intensity : s.bg_intensity) + texture;
    }
  // scanner noise belongs to the scene, so it is drawn in a fixed order
  for (auto& v : out.image.values) v += s.pixel_noise * pix_noise(tex_rng);
  for (int i = 0; i < shift.blur_passes; ++i) out.image = detail::box_blur(out.image);
  if (shift.gamma != 1.0)
    for (auto& v : out.image.values) v = std::pow(std::clamp(v, 0.0, 1.0), shift.gamma);
  if (shift.noise_std > 0) {
    std::mt19937_64 shift_rng(mix_seed(s.seed, 3));
    std::normal_distribution<double> nd(0, shift.noise_std);
    for (auto& v : out.image.values) v += nd(shift_rng);
  }
  for (auto& v : out.image.values) v = std::clamp(v, 0.0, 1.0);
  return out;
}

/// Tight bounding box of the mask's foreground.
inline Box mask_bbox(const Mask& m) {
  Box b{static_cast<int>(m.rows), static_cast<int>(m.cols), -1, -1};
  for (std::size_t r = 0; r < m.rows; ++r)
    for (std::size_t c = 0; c < m.cols; ++c)
      if (m(r, c)) {
        b.r0 = std::min(b.r0, static_cast<int>(r));
        b.c0 = std::min(b.c0, static_cast<int>(c));
        b.r1 = std::max(b.r1, static_cast<int>(r));
        b.c1 = std::max(b.c1, static_cast<int>(c));
      }
  if (b.r1 < 0) throw std::invalid_argument("mask_bbox: empty mask");
  return b;
}

/// Area within [5%, 60%] of the image and no foreground on the border.
inline bool mask_acceptable(const Mask& m) {
  std::size_t area = 0;
  for (std::size_t r = 0; r < m.rows; ++r)
    for (std::size_t c = 0; c < m.cols; ++c) {
      if (!m(r, c)) continue;
      ++area;
      if (r == 0 || c == 0 || r + 1 == m.rows || c + 1 == m.cols) return false;
    }
  const double frac = static_cast<double>(area) / static_cast<double>(m.size());
  return frac >= 0.05 && frac <= 0.60;
}

inline constexpr int kMaxSceneRetries = 64;

/// Sample `index` of a corpus: draws scenes until one satisfies the area
/// bounds (bounded retries).
inline Sample generate_sample(const SceneFamily& fam, const ShiftSpec& shift, std::uint64_t seed, std::size_t index) {
  for (int attempt = 0; attempt < kMaxSceneRetries; ++attempt) {
    const SceneSpec scene = draw_scene(fam, mix_seed(mix_seed(seed, index), static_cast<std::uint64_t>(attempt)));
    Sample s = render_scene(scene, shift, fam.image_size);
    if (!mask_acceptable(s.mask)) continue;
    s.id = index;
    s.box = mask_bbox(s.mask);
    return s;
  }
  throw std::runtime_error("generate_sample: scene constraints not met after retries");
}

inline std::vector<Sample> generate_corpus(std::size_t n, const SceneFamily& fam, const ShiftSpec& shift,
                                           std::uint64_t seed) {
  if (n == 0) throw std::invalid_argument("generate_corpus: n must be positive");
  std::vector<Sample> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) out.push_back(generate_sample(fam, shift, seed, i));
  return out;
}

/// Offsets each box coordinate by uniform integer noise in
/// [-noise_level, noise_level], then clamps and re-orders.
inline Box perturb_prompt(const Box& box, int noise_level, std::uint64_t seed, std::size_t rows, std::size_t cols) {
  if (noise_level <= 0) return box;
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> d(-noise_level, noise_level);
  auto clampr = [&](int v) { return std::clamp(v, 0, static_cast<int>(rows) - 1); };
  auto clampc = [&](int v) { return std::clamp(v, 0, static_cast<int>(cols) - 1); };
  int r0 = clampr(box.r0 + d(rng));
  int c0 = clampc(box.c0 + d(rng));
  int r1 = clampr(box.r1 + d(rng));
  int c1 = clampc(box.c1 + d(rng));
  if (r0 > r1) std::swap(r0, r1);
  if (c0 > c1) std::swap(c0, c1);
  return {r0, c0, r1, c1};
}

// ---------------------------------------------------------------------------
// On-disk corpus: manifest.json plus one PGM per image and mask.

inline void save_corpus(const std::filesystem::path& dir, const std::vector<Sample>& samples,
                        const nlohmann::json& provenance = {}) {
  std::filesystem::create_directories(dir);
  nlohmann::json manifest;
  manifest["format"] = "eviatta-corpus";
  manifest["version"] = 1;
  if (!provenance.is_null()) manifest["provenance"] = provenance;
  auto& list = manifest["samples"] = nlohmann::json::array();
  for (const auto& s : samples) {
    char name[32];
    std::snprintf(name, sizeof name, "%05zu", s.id);
    const std::string img = std::string("img_") + name + ".pgm", msk = std::string("mask_") + name + ".pgm";
    write_file((dir / img).string(), encode_pgm(quantize(s.image)));
    Grid<std::uint8_t> m8(s.mask.rows, s.mask.cols, 0);
    for (std::size_t i = 0; i < m8.size(); ++i) m8.values[i] = s.mask.values[i] ? 255 : 0;
    write_file((dir / msk).string(), encode_pgm(m8));
    list.push_back({{"id", s.id}, {"image", img}, {"mask", msk}, {"box", {s.box.r0, s.box.c0, s.box.r1, s.box.c1}}});
  }
  write_file((dir / "manifest.json").string(), manifest.dump(2) + "\n");
}

inline std::vector<Sample> load_corpus(const std::filesystem::path& dir) {
  const auto manifest = nlohmann::json::parse(read_file((dir / "manifest.json").string()));
  if (manifest.value("format", "") != "eviatta-corpus") throw std::runtime_error("not an eviatta corpus manifest");
  std::vector<Sample> out;
  for (const auto& e : manifest.at("samples")) {
    Sample s;
    s.id = e.at("id").get<std::size_t>();
    s.image = dequantize(decode_pgm(read_file((dir / e.at("image").get<std::string>()).string())));
    const auto m8 = decode_pgm(read_file((dir / e.at("mask").get<std::string>()).string()));
    s.mask = Mask(m8.rows, m8.cols, 0);
    for (std::size_t i = 0; i < m8.size(); ++i) s.mask.values[i] = m8.values[i] >= 128 ? 1 : 0;
    const auto& b = e.at("box");
    s.box = {b.at(0).get<int>(), b.at(1).get<int>(), b.at(2).get<int>(), b.at(3).get<int>()};
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace eviatta
