#pragma once

// Binary 8-bit PGM (P5) encoding plus base64, used for corpus files and
// for images shipped over HTTP.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "eviatta/grid.hpp"

namespace eviatta {

inline std::string encode_pgm(const Grid<std::uint8_t>& img) {
  std::string out = "P5\n" + std::to_string(img.cols) + " " + std::to_string(img.rows) + "\n255\n";
  out.append(reinterpret_cast<const char*>(img.values.data()), img.values.size());
  return out;
}

inline Grid<std::uint8_t> decode_pgm(const std::string& bytes) {
  std::istringstream in(bytes);
  std::string magic;
  std::size_t w = 0, h = 0, maxval = 0;
  in >> magic >> w >> h >> maxval;
  if (magic != "P5" || !in || maxval != 255) throw std::runtime_error("decode_pgm: not an 8-bit binary PGM");
  in.get();  // single whitespace before the raster
  Grid<std::uint8_t> img(h, w, 0);
  in.read(reinterpret_cast<char*>(img.values.data()), static_cast<std::streamsize>(img.values.size()));
  if (static_cast<std::size_t>(in.gcount()) != img.values.size()) throw std::runtime_error("decode_pgm: truncated raster");
  return img;
}

/// [0, 1] reals to 8-bit, rounding to nearest.
inline Grid<std::uint8_t> quantize(const RealMap& m) {
  Grid<std::uint8_t> g(m.rows, m.cols, 0);
  for (std::size_t i = 0; i < m.size(); ++i)
    g.values[i] = static_cast<std::uint8_t>(std::lround(std::clamp(m.values[i], 0.0, 1.0) * 255.0));
  return g;
}

/// Min-max normalised 8-bit rendering of an arbitrary map (heatmaps).
inline Grid<std::uint8_t> quantize_normalized(const RealMap& m) {
  if (m.size() == 0) return {};
  const auto [lo, hi] = std::minmax_element(m.values.begin(), m.values.end());
  const double span = *hi - *lo;
  RealMap n(m.rows, m.cols, 0.0);
  if (span > 0)
    for (std::size_t i = 0; i < m.size(); ++i) n.values[i] = (m.values[i] - *lo) / span;
  return quantize(n);
}

inline RealMap dequantize(const Grid<std::uint8_t>& g) {
  RealMap m(g.rows, g.cols, 0.0);
  for (std::size_t i = 0; i < g.size(); ++i) m.values[i] = g.values[i] / 255.0;
  return m;
}

inline std::string read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

inline void write_file(const std::string& path, const std::string& bytes) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + path);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

inline std::string base64_encode(const std::string& in) {
  static constexpr char table[] = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
  std::string out;
  out.reserve((in.size() + 2) / 3 * 4);
  std::size_t i = 0;
  for (; i + 2 < in.size(); i += 3) {
    const std::uint32_t n = (std::uint8_t(in[i]) << 16) | (std::uint8_t(in[i + 1]) << 8) | std::uint8_t(in[i + 2]);
    out += table[(n >> 18) & 63];
    out += table[(n >> 12) & 63];
    out += table[(n >> 6) & 63];
    out += table[n & 63];
  }
  if (i < in.size()) {
    std::uint32_t n = std::uint8_t(in[i]) << 16;
    if (i + 1 < in.size()) n |= std::uint8_t(in[i + 1]) << 8;
    out += table[(n >> 18) & 63];
    out += table[(n >> 12) & 63];
    out += i + 1 < in.size() ? table[(n >> 6) & 63] : '=';
    out += '=';
  }
  return out;
}

inline std::string base64_decode(const std::string& in) {
  auto val = [](char c) -> int {
    if (c >= 'A' && c <= 'Z') return c - 'A';
    if (c >= 'a' && c <= 'z') return c - 'a' + 26;
    if (c >= '0' && c <= '9') return c - '0' + 52;
    if (c == '+') return 62;
    if (c == '/') return 63;
    return -1;
  };
  std::string out;
  std::uint32_t buf = 0;
  int bits = 0;
  for (char c : in) {
    if (c == '=') break;
    const int v = val(c);
    if (v < 0) throw std::runtime_error("base64_decode: invalid character");
    buf = (buf << 6) | static_cast<std::uint32_t>(v);
    bits += 6;
    if (bits >= 8) {
      bits -= 8;
      out += static_cast<char>((buf >> bits) & 0xFF);
    }
  }
  return out;
}

}  // namespace eviatta
