#pragma once

// Detector + embedder + gallery composed into the per-frame verification path.
// The CLI and the HTTP service both go through this type so that they reach
// identical decisions for identical inputs.

#include <string>
#include <utility>
#include <vector>

#include "maskver/detector.hpp"
#include "maskver/evaluation.hpp"
#include "maskver/gallery.hpp"
#include "maskver/inference.hpp"

namespace maskver {

struct FaceResult {
  Detection detection;
  MatchResult match;
};

struct AnalyzedFace {
  Detection detection;
  FaceEmbedding embedding;
};

class Pipeline {
 public:
  Pipeline() = default;
  Pipeline(ModelHandle detector, ModelHandle embedder, DetectorConfig cfg = {}, AnchorSet anchors = {})
      : detector_(std::move(detector)), embedder_(std::move(embedder)), cfg_(cfg), anchors_(anchors) {
    cfg_.validate();
    anchors_.validate(cfg_.input_size);
  }

  /// Loads both models by id or path; the detector sidecar (if any) supplies anchors.
  static Pipeline load(const std::string& detector_path, const std::string& embedder_path, DetectorConfig cfg = {}) {
    AnchorSet anchors;
    if (!is_builtin_model(detector_path)) {
      if (auto p = resolve_model_path(detector_path)) anchors = load_model_metadata(p->string()).anchors;
    }
    auto det = load_model(detector_path, detector_specs(cfg.input_size, anchors));
    auto emb = load_model(embedder_path, embedder_specs());
    return Pipeline(std::move(det), std::move(emb), cfg, anchors);
  }

  bool ready() const { return detector_.loaded() && embedder_.loaded(); }
  const DetectorConfig& config() const { return cfg_; }
  const ModelHandle& detector() const { return detector_; }
  const ModelHandle& embedder() const { return embedder_; }

  std::vector<Detection> detect(const Image& frame) const { return detect_faces(frame, detector_, cfg_, anchors_); }

  /// Embedding of an already-cropped face; the chip is resampled to the embedder input.
  FaceEmbedding embed(const Image& chip) const {
    const auto& dims = embedder_.inputs().at(0).dims;
    if (dims.size() != 4 || dims[1] != 3) throw ModelError(embedder_.id() + ": embedder input must be N x 3 x H x W");
    const auto h = static_cast<int>(dims[2]), w = static_cast<int>(dims[3]);
    Tensor t = image_to_chw(resize_image(chip, w, h));
    const Tensors out = embedder_.run({std::move(t).reshaped({1, 3, static_cast<std::size_t>(h), static_cast<std::size_t>(w)})});
    if (out.at(0).size() != kEmbeddingSize) throw ModelError(embedder_.id() + ": embedder must emit 128 values");
    return FaceEmbedding(out[0].data());
  }

  std::vector<AnalyzedFace> analyze(const Image& frame) const {
    std::vector<AnalyzedFace> faces;
    for (const auto& d : detect(frame)) {
      faces.push_back({d, embed(crop_face(frame, d, margin_, chip_size()))});
    }
    return faces;
  }

  std::vector<FaceResult> verify(const Image& frame, const Gallery& gallery, double threshold) const {
    std::vector<FaceResult> out;
    for (auto& f : analyze(frame)) out.push_back({f.detection, match(gallery, f.embedding, threshold)});
    return out;
  }

 private:
  int chip_size() const {
    const auto& dims = embedder_.inputs().at(0).dims;
    return dims.size() == 4 ? static_cast<int>(dims[3]) : static_cast<int>(refnet::kChipSize);
  }

  ModelHandle detector_;
  ModelHandle embedder_;
  DetectorConfig cfg_;
  AnchorSet anchors_;
  double margin_ = 0.1;
};

/// A pair of face chips with its ground-truth relation.
struct ChipPair {
  Image a, b;
  bool same = false;
};

/// k-fold verification over chip pairs, scoring each pair by embedding distance.
inline VerificationReport verification_protocol(const std::vector<ChipPair>& pairs, const Pipeline& embedder,
                                                std::size_t folds = 10) {
  return verification_protocol(
      pairs, [&](const ChipPair& p) { return euclidean_distance(embedder.embed(p.a), embedder.embed(p.b)); }, folds);
}

}  // namespace maskver
