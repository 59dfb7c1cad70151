#pragma once

// Frame-level face detection: letterbox, run the head model, decode, NMS, unmap.

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "maskver/detection.hpp"
#include "maskver/error.hpp"
#include "maskver/geometry.hpp"
#include "maskver/image.hpp"
#include "maskver/inference.hpp"

namespace maskver {

/// Per-model overrides read from a sidecar text file next to the model.
struct ModelMetadata {
  AnchorSet anchors;
  std::vector<std::string> class_names{"mask", "no_mask"};
};

namespace detail {

inline std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

inline std::vector<double> parse_numbers(const std::string& value, const std::string& where) {
  std::string s = value;
  for (char& c : s) {
    if (c == ',') c = ' ';
  }
  std::istringstream is(s);
  std::vector<double> out;
  std::string tok;
  while (is >> tok) {
    try {
      std::size_t used = 0;
      out.push_back(std::stod(tok, &used));
      if (used != tok.size()) throw std::invalid_argument(tok);
    } catch (const std::exception&) {
      throw ParseError(where, "not a number: " + tok);
    }
  }
  return out;
}

}  // namespace detail

/// Parses "key = value" lines; '#' starts a comment. Keys:
///   anchors = 18 numbers (w h pairs, layer by layer)
///   strides = 3 integers
///   names   = comma-separated class names (exactly mask,no_mask order of indices)
inline ModelMetadata parse_model_metadata(const std::string& text, const std::string& origin = "metadata") {
  ModelMetadata m;
  std::istringstream is(text);
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const std::string where = origin + ":" + std::to_string(lineno);
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ParseError(where, "expected key = value");
    const std::string key = detail::trim(line.substr(0, eq));
    const std::string value = detail::trim(line.substr(eq + 1));
    if (key == "anchors") {
      const auto v = detail::parse_numbers(value, where);
      if (v.size() != 2 * kNumLayers * kAnchorsPerLayer) throw ParseError(where, "anchors needs 18 numbers");
      for (std::size_t i = 0; i < kNumLayers * kAnchorsPerLayer; ++i) {
        m.anchors.anchors[i / kAnchorsPerLayer][i % kAnchorsPerLayer] = {v[2 * i], v[2 * i + 1]};
      }
    } else if (key == "strides") {
      const auto v = detail::parse_numbers(value, where);
      if (v.size() != kNumLayers) throw ParseError(where, "strides needs 3 integers");
      for (std::size_t i = 0; i < kNumLayers; ++i) {
        if (v[i] != std::floor(v[i])) throw ParseError(where, "strides must be integers");
        m.anchors.strides[i] = static_cast<int>(v[i]);
      }
    } else if (key == "names") {
      m.class_names.clear();
      std::istringstream ns(value);
      std::string name;
      while (std::getline(ns, name, ',')) m.class_names.push_back(detail::trim(name));
      if (m.class_names.size() != kNumClasses) throw ParseError(where, "exactly two class names required");
      for (std::size_t i = 0; i < kNumClasses; ++i) {
        if (m.class_names[i] != class_name(static_cast<DetectionClass>(i))) {
          throw ParseError(where, "class names must be mask,no_mask in index order");
        }
      }
    } else {
      throw ParseError(where, "unknown key " + key);
    }
  }
  return m;
}

/// Sidecar for a model file is "<model path>.meta"; missing sidecar means defaults.
inline ModelMetadata load_model_metadata(const std::string& model_path) {
  const std::string meta = model_path + ".meta";
  if (!std::filesystem::exists(meta)) return {};
  std::ifstream f(meta);
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_model_metadata(ss.str(), meta);
}

/// Runs the full detection path on one RGB frame. Boxes come back in frame pixels,
/// clamped to the frame, confidence-descending.
inline std::vector<Detection> detect_faces(const Image& frame, const ModelHandle& model, const DetectorConfig& cfg = {},
                                           const AnchorSet& anchors = {}) {
  cfg.validate();
  anchors.validate(cfg.input_size);
  if (frame.empty()) throw ImageDecodeError("empty frame");
  const auto t = letterbox_for(frame.width, frame.height, cfg.input_size);
  const Tensors heads = model.run({letterbox_tensor(frame, t)});
  if (heads.size() != kNumLayers) {
    throw ShapeError(model.id() + ": detector must produce 3 head layers, got " + std::to_string(heads.size()));
  }
  std::vector<Detection> candidates;
  for (std::size_t l = 0; l < kNumLayers; ++l) {
    auto layer = decode_layer(heads[l], anchors.anchors[l], anchors.strides[l], cfg.confidence_threshold);
    const std::size_t expected_grid = static_cast<std::size_t>(cfg.input_size / anchors.strides[l]);
    if (heads[l].shape()[heads[l].rank() - 2] != expected_grid) {
      throw ShapeError(model.id() + ": layer " + std::to_string(l) + " grid does not match stride " +
                       std::to_string(anchors.strides[l]));
    }
    candidates.insert(candidates.end(), layer.begin(), layer.end());
  }
  auto kept = nms(std::move(candidates), cfg.nms_iou_threshold, cfg.max_detections);
  for (auto& d : kept) d.box = from_network(d.box, t);
  return kept;
}

/// Detection box grown by margin_fraction of its size on every side, clamped to the frame.
inline BoundingBox face_crop_region(const Image& frame, const Detection& d, double margin_fraction = 0.1) {
  const double mx = d.box.width() * margin_fraction, my = d.box.height() * margin_fraction;
  const BoundingBox grown(d.box.x1 - mx, d.box.y1 - my, d.box.x2 + mx, d.box.y2 + my);
  const BoundingBox clamped(std::clamp(grown.x1, 0.0, static_cast<double>(frame.width)),
                            std::clamp(grown.y1, 0.0, static_cast<double>(frame.height)),
                            std::clamp(grown.x2, 0.0, static_cast<double>(frame.width)),
                            std::clamp(grown.y2, 0.0, static_cast<double>(frame.height)));
  if (!(clamped.width() > 0) || !(clamped.height() > 0)) throw InvalidArgument("detection box does not intersect frame");
  return clamped;
}

/// Crop the face region and resample it to out_size x out_size.
inline Image crop_face(const Image& frame, const Detection& d, double margin_fraction = 0.1,
                       int out_size = static_cast<int>(refnet::kChipSize)) {
  const BoundingBox r = face_crop_region(frame, d, margin_fraction);
  const int x1 = static_cast<int>(std::floor(r.x1)), y1 = static_cast<int>(std::floor(r.y1));
  const int x2 = std::max(x1 + 1, static_cast<int>(std::ceil(r.x2)));
  const int y2 = std::max(y1 + 1, static_cast<int>(std::ceil(r.y2)));
  return resize_image(crop_image(frame, x1, y1, std::min(x2, frame.width), std::min(y2, frame.height)), out_size,
                      out_size);
}

}  // namespace maskver
