#pragma once

#include <algorithm>
#include <cstddef>
#include <stdexcept>
#include <vector>

namespace eviatta {

/// Inclusive pixel box (r0, c0) .. (r1, c1).
struct Box {
  int r0 = 0, c0 = 0, r1 = 0, c1 = 0;
  bool operator==(const Box&) const = default;
};

struct PointPrompt {
  int row = 0;
  int col = 0;
  bool positive = true;
  bool operator==(const PointPrompt&) const = default;
};

/// One initial box plus labelled points in annotation order.
struct PromptSet {
  Box box;
  std::vector<PointPrompt> points;

  bool operator==(const PromptSet&) const = default;

  /// The prompt made of the box and the first `m` points.
  PromptSet prefix(std::size_t m) const {
    PromptSet p{box, {}};
    p.points.assign(points.begin(), points.begin() + static_cast<std::ptrdiff_t>(std::min(m, points.size())));
    return p;
  }

  void validate(std::size_t rows, std::size_t cols) const {
    const int R = static_cast<int>(rows), C = static_cast<int>(cols);
    if (box.r0 < 0 || box.c0 < 0 || box.r1 >= R || box.c1 >= C || box.r0 > box.r1 || box.c0 > box.c1)
      throw std::out_of_range("prompt box out of bounds or inverted");
    for (const auto& p : points)
      if (p.row < 0 || p.col < 0 || p.row >= R || p.col >= C) throw std::out_of_range("point prompt out of bounds");
  }
};

}  // namespace eviatta
