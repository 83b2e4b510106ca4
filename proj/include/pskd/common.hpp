#pragma once

#include <algorithm>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace pskd {

inline constexpr int kUnlabeled = -1;

[[noreturn]] inline void fail(const std::string& msg) { throw std::runtime_error(msg); }

/// Axis-aligned box in pixel coordinates; valid when x1 < x2 and y1 < y2.
struct Box {
  double x1 = 0, y1 = 0, x2 = 0, y2 = 0;

  double width() const { return x2 - x1; }
  double height() const { return y2 - y1; }
  double area() const { return valid() ? width() * height() : 0.0; }
  bool valid() const { return x2 > x1 && y2 > y1; }
  double cx() const { return 0.5 * (x1 + x2); }
  double cy() const { return 0.5 * (y1 + y2); }

  Box clipped(double w, double h) const {
    Box b;
    b.x1 = std::clamp(x1, 0.0, w);
    b.y1 = std::clamp(y1, 0.0, h);
    b.x2 = std::clamp(x2, 0.0, w);
    b.y2 = std::clamp(y2, 0.0, h);
    return b;
  }
};

inline double iou(const Box& a, const Box& b) {
  const double ix = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
  const double iy = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
  if (ix <= 0 || iy <= 0) return 0.0;
  const double inter = ix * iy;
  return inter / (a.area() + b.area() - inter);
}

inline uint64_t fnv1a64(const void* data, size_t n, uint64_t h = 1469598103934665603ull) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 1099511628211ull;
  }
  return h;
}

}  // namespace pskd
