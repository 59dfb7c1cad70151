#pragma once

// Detector head post-processing: anchor grids, box decoding, and class-aware NMS.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "maskver/error.hpp"
#include "maskver/geometry.hpp"
#include "maskver/tensor.hpp"

namespace maskver {

enum class DetectionClass : int { mask = 0, no_mask = 1 };

inline constexpr std::size_t kNumClasses = 2;
inline constexpr std::size_t kAnchorsPerLayer = 3;
inline constexpr std::size_t kNumLayers = 3;
// cx, cy, w, h, objectness, then one logit per class.
inline constexpr std::size_t kHeadChannels = 5 + kNumClasses;

inline std::string_view class_name(DetectionClass c) { return c == DetectionClass::mask ? "mask" : "no_mask"; }

inline std::optional<DetectionClass> class_from_index(long index) {
  if (index == 0) return DetectionClass::mask;
  if (index == 1) return DetectionClass::no_mask;
  return std::nullopt;
}

inline std::optional<DetectionClass> parse_class(std::string_view s) {
  if (s == "mask" || s == "0") return DetectionClass::mask;
  if (s == "no_mask" || s == "1") return DetectionClass::no_mask;
  return std::nullopt;
}

struct Detection {
  BoundingBox box;
  DetectionClass cls = DetectionClass::mask;
  double confidence = 0;

  friend bool operator==(const Detection&, const Detection&) = default;
};

struct AnchorSize {
  double w = 0, h = 0;
  friend bool operator==(const AnchorSize&, const AnchorSize&) = default;
};

/// Three detection layers, three anchors each, strides strictly increasing.
struct AnchorSet {
  std::array<std::array<AnchorSize, kAnchorsPerLayer>, kNumLayers> anchors{{
      {{{10, 13}, {16, 30}, {33, 23}}},
      {{{30, 61}, {62, 45}, {59, 119}}},
      {{{116, 90}, {156, 198}, {373, 326}}},
  }};
  std::array<int, kNumLayers> strides{8, 16, 32};

  void validate(int input_size) const {
    for (std::size_t l = 0; l < kNumLayers; ++l) {
      if (strides[l] <= 0) throw InvalidArgument("anchor strides must be positive");
      if (l > 0 && strides[l] <= strides[l - 1]) throw InvalidArgument("anchor strides must be strictly increasing");
      if (input_size % strides[l] != 0) {
        throw InvalidArgument("input size " + std::to_string(input_size) + " not divisible by stride " +
                              std::to_string(strides[l]));
      }
      for (const auto& a : anchors[l]) {
        if (!(a.w > 0) || !(a.h > 0)) throw InvalidArgument("anchor sizes must be positive");
      }
    }
  }

  friend bool operator==(const AnchorSet&, const AnchorSet&) = default;
};

struct DetectorConfig {
  double confidence_threshold = 0.25;
  double nms_iou_threshold = 0.45;
  int input_size = 640;
  std::size_t max_detections = 300;

  void validate() const {
    if (!(confidence_threshold > 0 && confidence_threshold < 1)) {
      throw InvalidArgument("confidence threshold must lie in (0,1)");
    }
    if (!(nms_iou_threshold > 0 && nms_iou_threshold < 1)) throw InvalidArgument("NMS IoU threshold must lie in (0,1)");
    if (input_size <= 0 || input_size % 32 != 0) throw InvalidArgument("input size must be a positive multiple of 32");
  }
};

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }
inline double logit(double p) { return std::log(p / (1.0 - p)); }

namespace detail {

// Accepts 1 x A x S x S x K or A x S x S x K; returns S.
inline std::size_t check_layer_shape(const Tensor& t) {
  Shape s = t.shape();
  if (s.size() == 5) {
    if (s[0] != 1) throw ShapeError("detector layer batch must be 1, got " + shape_string(t.shape()));
    s.erase(s.begin());
  }
  if (s.size() != 4 || s[0] != kAnchorsPerLayer || s[1] != s[2] || s[3] != kHeadChannels) {
    throw ShapeError("detector layer must be 3 x S x S x 7, got " + shape_string(t.shape()));
  }
  return s[1];
}

}  // namespace detail

/// Decode one head layer into candidates in network-input pixels:
///   bx = (2 sig(tx) - 0.5 + col) * stride,  by = (2 sig(ty) - 0.5 + row) * stride
///   bw = aw * (2 sig(tw))^2,                 bh = ah * (2 sig(th))^2
///   confidence = sig(obj) * max_c sig(cls_c); emitted when confidence >= threshold.
inline std::vector<Detection> decode_layer(const Tensor& layer, const std::array<AnchorSize, kAnchorsPerLayer>& anchors,
                                           int stride, double conf_threshold) {
  const std::size_t grid = detail::check_layer_shape(layer);
  const auto& d = layer.data();
  std::vector<Detection> out;
  for (std::size_t a = 0; a < kAnchorsPerLayer; ++a) {
    for (std::size_t row = 0; row < grid; ++row) {
      for (std::size_t col = 0; col < grid; ++col) {
        const float* cell = &d[((a * grid + row) * grid + col) * kHeadChannels];
        const double obj = sigmoid(cell[4]);
        std::size_t best = 0;
        double best_p = sigmoid(cell[5]);
        for (std::size_t c = 1; c < kNumClasses; ++c) {
          const double p = sigmoid(cell[5 + c]);
          if (p > best_p) {
            best_p = p;
            best = c;
          }
        }
        const double conf = obj * best_p;
        if (!(conf >= conf_threshold)) continue;
        const double cx = (2.0 * sigmoid(cell[0]) - 0.5 + static_cast<double>(col)) * stride;
        const double cy = (2.0 * sigmoid(cell[1]) - 0.5 + static_cast<double>(row)) * stride;
        const double sw = 2.0 * sigmoid(cell[2]);
        const double sh = 2.0 * sigmoid(cell[3]);
        out.push_back({BoundingBox::from_center(cx, cy, anchors[a].w * sw * sw, anchors[a].h * sh * sh),
                       *class_from_index(static_cast<long>(best)), conf});
      }
    }
  }
  return out;
}

/// Logits that decode back to a given box at a given cell and anchor.
struct EncodedBox {
  std::size_t row = 0, col = 0;
  double tx = 0, ty = 0, tw = 0, th = 0;
};

/// Inverse of the decode equations. The box center must fall in the cell's
/// decodable range and its size below 4x the anchor; otherwise nullopt.
inline std::optional<EncodedBox> encode_box(const BoundingBox& box, const AnchorSize& anchor, int stride,
                                            std::size_t grid) {
  const double gx = box.cx() / stride, gy = box.cy() / stride;
  if (gx < 0 || gy < 0) return std::nullopt;
  EncodedBox e;
  e.col = std::min(static_cast<std::size_t>(gx), grid - 1);
  e.row = std::min(static_cast<std::size_t>(gy), grid - 1);
  const double px = (gx - static_cast<double>(e.col) + 0.5) / 2.0;
  const double py = (gy - static_cast<double>(e.row) + 0.5) / 2.0;
  const double pw = std::sqrt(box.width() / anchor.w) / 2.0;
  const double ph = std::sqrt(box.height() / anchor.h) / 2.0;
  for (double p : {px, py, pw, ph}) {
    if (!(p > 0 && p < 1)) return std::nullopt;
  }
  e.tx = logit(px);
  e.ty = logit(py);
  e.tw = logit(pw);
  e.th = logit(ph);
  return e;
}

namespace detail {

// Strict weak order: confidence desc, area desc, x1 asc, then y1 asc and class.
inline bool ranks_before(const Detection& a, const Detection& b) {
  if (a.confidence != b.confidence) return a.confidence > b.confidence;
  if (a.box.area() != b.box.area()) return a.box.area() > b.box.area();
  if (a.box.x1 != b.box.x1) return a.box.x1 < b.box.x1;
  if (a.box.y1 != b.box.y1) return a.box.y1 < b.box.y1;
  return static_cast<int>(a.cls) < static_cast<int>(b.cls);
}

}  // namespace detail

/// Greedy class-aware non-maximum suppression. A candidate is dropped when a
/// higher-ranked kept candidate of the same class overlaps it with IoU > threshold.
/// Output is in rank order and holds at most max_detections entries.
inline std::vector<Detection> nms(std::vector<Detection> candidates, double iou_threshold,
                                  std::size_t max_detections = 300) {
  std::stable_sort(candidates.begin(), candidates.end(), detail::ranks_before);
  std::vector<Detection> kept;
  std::vector<bool> suppressed(candidates.size(), false);
  for (std::size_t i = 0; i < candidates.size() && kept.size() < max_detections; ++i) {
    if (suppressed[i]) continue;
    kept.push_back(candidates[i]);
    for (std::size_t j = i + 1; j < candidates.size(); ++j) {
      if (!suppressed[j] && candidates[j].cls == candidates[i].cls &&
          iou(candidates[i].box, candidates[j].box) > iou_threshold) {
        suppressed[j] = true;
      }
    }
  }
  return kept;
}

}  // namespace maskver
