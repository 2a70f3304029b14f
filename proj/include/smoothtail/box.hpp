#pragma once

#include <algorithm>
#include <array>

namespace smoothtail {

// Axis-aligned box in absolute pixels, corner form.
struct Box {
  double x_min = 0.0;
  double y_min = 0.0;
  double x_max = 0.0;
  double y_max = 0.0;

  double width() const { return x_max - x_min; }
  double height() const { return y_max - y_min; }
  double area() const { return std::max(0.0, width()) * std::max(0.0, height()); }
  bool valid() const { return x_min < x_max && y_min < y_max; }

  friend bool operator==(const Box&, const Box&) = default;
};

// Normalized (cx, cy, w, h); the only representation the model sees.
using NormBox = std::array<double, 4>;

inline double iou(const Box& a, const Box& b) {
  const double iw = std::min(a.x_max, b.x_max) - std::max(a.x_min, b.x_min);
  const double ih = std::min(a.y_max, b.y_max) - std::max(a.y_min, b.y_min);
  if (iw <= 0.0 || ih <= 0.0) return 0.0;
  const double inter = iw * ih;
  const double uni = a.area() + b.area() - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

inline NormBox to_normalized(const Box& b, double image_width, double image_height) {
  return {(b.x_min + b.x_max) * 0.5 / image_width, (b.y_min + b.y_max) * 0.5 / image_height,
          b.width() / image_width, b.height() / image_height};
}

inline Box from_normalized(const NormBox& n, double image_width, double image_height) {
  return {(n[0] - 0.5 * n[2]) * image_width, (n[1] - 0.5 * n[3]) * image_height,
          (n[0] + 0.5 * n[2]) * image_width, (n[1] + 0.5 * n[3]) * image_height};
}

// Corner form of a normalized box, still in normalized units.
inline Box corners(const NormBox& n) {
  return {n[0] - 0.5 * n[2], n[1] - 0.5 * n[3], n[0] + 0.5 * n[2], n[1] + 0.5 * n[3]};
}

}  // namespace smoothtail
