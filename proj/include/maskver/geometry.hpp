#pragma once

#include <algorithm>
#include <cmath>
#include <numbers>

#include "maskver/error.hpp"

namespace maskver {

/// Axis-aligned box in pixels, corner form. The constructor reorders corners so
/// that x1 <= x2 and y1 <= y2 always hold.
struct BoundingBox {
  double x1 = 0, y1 = 0, x2 = 0, y2 = 0;

  constexpr BoundingBox() = default;
  constexpr BoundingBox(double ax1, double ay1, double ax2, double ay2)
      : x1(std::min(ax1, ax2)), y1(std::min(ay1, ay2)), x2(std::max(ax1, ax2)), y2(std::max(ay1, ay2)) {}

  static constexpr BoundingBox from_center(double cx, double cy, double w, double h) {
    return {cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2};
  }

  constexpr double width() const { return x2 - x1; }
  constexpr double height() const { return y2 - y1; }
  constexpr double area() const { return width() * height(); }
  constexpr double cx() const { return (x1 + x2) / 2; }
  constexpr double cy() const { return (y1 + y2) / 2; }

  friend constexpr bool operator==(const BoundingBox&, const BoundingBox&) = default;
};

inline double intersection_area(const BoundingBox& a, const BoundingBox& b) {
  const double w = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
  const double h = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
  return (w > 0 && h > 0) ? w * h : 0.0;
}

/// Intersection over union. Two zero-area boxes have IoU 0.
inline double iou(const BoundingBox& a, const BoundingBox& b) {
  const double inter = intersection_area(a, b);
  const double uni = a.area() + b.area() - inter;
  if (uni <= 0) return 0.0;
  return std::clamp(inter / uni, 0.0, 1.0);
}

/// Aspect-ratio consistency term v = 4/pi^2 (atan(w_gt/h_gt) - atan(w/h))^2.
/// `pred` supplies w/h, `truth` supplies w_gt/h_gt. Heights must be positive.
inline double aspect_consistency(const BoundingBox& pred, const BoundingBox& truth) {
  if (!(pred.height() > 0) || !(truth.height() > 0)) {
    throw InvalidArgument("aspect_consistency: box height must be positive");
  }
  const double d = std::atan(truth.width() / truth.height()) - std::atan(pred.width() / pred.height());
  return 4.0 / (std::numbers::pi * std::numbers::pi) * d * d;
}

/// Trade-off weight alpha = v / ((1 - IoU) + v); 0 when both terms vanish.
inline double ciou_weight(double overlap, double v) {
  const double denom = (1.0 - overlap) + v;
  if (denom <= 0) return 0.0;
  return v / denom;
}

/// Complete IoU as a similarity: IoU - (rho^2 / c^2 + alpha * v).
/// rho is the distance between box centers, c the diagonal of the smallest enclosing box.
inline double ciou(const BoundingBox& pred, const BoundingBox& truth) {
  if (!(pred.area() > 0) || !(truth.area() > 0)) {
    throw InvalidArgument("ciou: boxes must have positive area");
  }
  const double overlap = iou(pred, truth);
  const double dx = pred.cx() - truth.cx();
  const double dy = pred.cy() - truth.cy();
  const double rho2 = dx * dx + dy * dy;
  const double cw = std::max(pred.x2, truth.x2) - std::min(pred.x1, truth.x1);
  const double ch = std::max(pred.y2, truth.y2) - std::min(pred.y1, truth.y1);
  const double c2 = cw * cw + ch * ch;
  const double v = aspect_consistency(pred, truth);
  const double alpha = ciou_weight(overlap, v);
  return overlap - (rho2 / c2 + alpha * v);
}

/// Aspect-preserving resize of a src_w x src_h frame into a dst x dst square
/// with symmetric padding.
struct LetterboxTransform {
  double scale = 1;
  double pad_x = 0;
  double pad_y = 0;
  int src_w = 0;
  int src_h = 0;
  int dst = 0;

  // Size of the resized image inside the padded square.
  int resized_w() const { return static_cast<int>(std::lround(src_w * scale)); }
  int resized_h() const { return static_cast<int>(std::lround(src_h * scale)); }
};

inline LetterboxTransform letterbox_for(int src_w, int src_h, int dst) {
  if (src_w <= 0 || src_h <= 0 || dst <= 0) {
    throw InvalidArgument("letterbox_for: dimensions must be positive");
  }
  LetterboxTransform t;
  t.src_w = src_w;
  t.src_h = src_h;
  t.dst = dst;
  t.scale = std::min(static_cast<double>(dst) / src_w, static_cast<double>(dst) / src_h);
  t.pad_x = std::max(0.0, (dst - t.scale * src_w) / 2);
  t.pad_y = std::max(0.0, (dst - t.scale * src_h) / 2);
  return t;
}

inline BoundingBox to_network(const BoundingBox& b, const LetterboxTransform& t) {
  return {b.x1 * t.scale + t.pad_x, b.y1 * t.scale + t.pad_y, b.x2 * t.scale + t.pad_x,
          b.y2 * t.scale + t.pad_y};
}

/// Inverse of to_network, clamped to the source frame.
inline BoundingBox from_network(const BoundingBox& b, const LetterboxTransform& t) {
  auto cx = [&](double x) { return std::clamp((x - t.pad_x) / t.scale, 0.0, static_cast<double>(t.src_w)); };
  auto cy = [&](double y) { return std::clamp((y - t.pad_y) / t.scale, 0.0, static_cast<double>(t.src_h)); };
  return {cx(b.x1), cy(b.y1), cx(b.x2), cy(b.y2)};
}

}  // namespace maskver
