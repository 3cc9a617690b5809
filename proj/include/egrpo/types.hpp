#pragma once

#include <compare>
#include <cstdint>
#include <variant>

namespace egrpo {

using Token = std::uint32_t;

// Reserved end-of-sequence id in every vocabulary.
inline constexpr Token kEos = 0;

// Grid cell, zero-based.
struct Point {
  int row = 0;
  int col = 0;
  auto operator<=>(const Point&) const = default;
};

struct Label {
  int id = 0;
  auto operator<=>(const Label&) const = default;
};

// Parsed response. Variant order defines the canonical ordering used to break
// majority-vote ties: points sort before labels, then by value.
using Answer = std::variant<Point, Label>;

}  // namespace egrpo
