#pragma once

// JSON shapes shared by the CLI and the HTTP service.

#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "maskver/gallery.hpp"
#include "maskver/pipeline.hpp"

namespace maskver {

inline nlohmann::ordered_json box_to_json(const BoundingBox& b) {
  nlohmann::ordered_json j;
  j["x1"] = b.x1;
  j["y1"] = b.y1;
  j["x2"] = b.x2;
  j["y2"] = b.y2;
  return j;
}

inline nlohmann::ordered_json detection_to_json(const Detection& d) {
  nlohmann::ordered_json j;
  j["box"] = box_to_json(d.box);
  j["class"] = std::string(class_name(d.cls));
  j["confidence"] = d.confidence;
  return j;
}

inline nlohmann::ordered_json detections_to_json(const std::vector<Detection>& ds) {
  auto arr = nlohmann::ordered_json::array();
  for (const auto& d : ds) arr.push_back(detection_to_json(d));
  return arr;
}

// Infinite distance (empty gallery) is written as null.
inline nlohmann::ordered_json distance_to_json(double d) {
  return std::isfinite(d) ? nlohmann::ordered_json(d) : nlohmann::ordered_json();
}

inline nlohmann::ordered_json face_result_to_json(const FaceResult& f) {
  auto j = detection_to_json(f.detection);
  j["decision"] = f.match.decision();
  j["distance"] = distance_to_json(f.match.distance);
  j["threshold_used"] = f.match.threshold_used;
  return j;
}

inline nlohmann::ordered_json verify_response_to_json(const Image& frame, const std::vector<FaceResult>& faces) {
  nlohmann::ordered_json j;
  j["image_width"] = frame.width;
  j["image_height"] = frame.height;
  auto arr = nlohmann::ordered_json::array();
  for (const auto& f : faces) arr.push_back(face_result_to_json(f));
  j["faces"] = std::move(arr);
  return j;
}

inline nlohmann::ordered_json gallery_listing_json(const Gallery& g) {
  auto arr = nlohmann::ordered_json::array();
  for (const auto& r : g.records) {
    nlohmann::ordered_json j;
    j["student_id"] = r.student_id;
    j["name"] = r.name;
    j["embeddings_count"] = r.embeddings.size();
    arr.push_back(std::move(j));
  }
  return arr;
}

}  // namespace maskver
