#pragma once

#include <cstddef>
#include <stdexcept>
#include <vector>

namespace eviatta {

/// Row-major 2-D array. Used for images, masks and per-pixel maps.
template <class T>
struct Grid {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<T> values;

  Grid() = default;
  Grid(std::size_t r, std::size_t c, T fill = T{}) : rows(r), cols(c), values(r * c, fill) {}
  Grid(std::size_t r, std::size_t c, std::vector<T> v) : rows(r), cols(c), values(std::move(v)) {
    if (values.size() != r * c) throw std::invalid_argument("Grid: value count does not match extents");
  }

  T& operator()(std::size_t r, std::size_t c) { return values[r * cols + c]; }
  const T& operator()(std::size_t r, std::size_t c) const { return values[r * cols + c]; }
  std::size_t size() const { return values.size(); }
  bool same_extent(const auto& other) const { return rows == other.rows && cols == other.cols; }

  bool operator==(const Grid&) const = default;
};

using RealMap = Grid<double>;
using Mask = Grid<unsigned char>;

}  // namespace eviatta
