#pragma once

// Detection scoring at a fixed IoU: label parsing, prediction/ground-truth matching,
// precision/recall, PR curves, all-points AP and mAP; dataset splitting; and the
// k-fold pair-verification protocol for embedders.

#include <algorithm>
#include <concepts>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "maskver/detection.hpp"
#include "maskver/error.hpp"
#include "maskver/geometry.hpp"

namespace maskver {

struct GroundTruthBox {
  DetectionClass cls = DetectionClass::mask;
  BoundingBox box;

  friend bool operator==(const GroundTruthBox&, const GroundTruthBox&) = default;
};

/// Normalized label lines "class cx cy w h" (values in [0,1]) to pixel corner boxes.
inline std::vector<GroundTruthBox> parse_labels(const std::string& text, int image_w, int image_h,
                                                const std::string& origin = "labels") {
  if (image_w <= 0 || image_h <= 0) throw InvalidArgument("parse_labels: image size must be positive");
  std::vector<GroundTruthBox> out;
  std::istringstream is(text);
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const std::string where = origin + ":" + std::to_string(lineno);
    std::istringstream ls(line);
    std::vector<std::string> tok;
    for (std::string t; ls >> t;) tok.push_back(t);
    if (tok.empty()) continue;
    if (tok.size() != 5) throw ParseError(where, "expected 'class cx cy w h', got " + std::to_string(tok.size()) + " fields");
    long cls_index = 0;
    double v[4];
    try {
      std::size_t used = 0;
      cls_index = std::stol(tok[0], &used);
      if (used != tok[0].size()) throw std::invalid_argument(tok[0]);
      for (int i = 0; i < 4; ++i) {
        v[i] = std::stod(tok[i + 1], &used);
        if (used != tok[i + 1].size()) throw std::invalid_argument(tok[i + 1]);
      }
    } catch (const std::exception&) {
      throw ParseError(where, "malformed number");
    }
    const auto cls = class_from_index(cls_index);
    if (!cls) throw ParseError(where, "unknown class " + tok[0] + " (only 0 = mask, 1 = no_mask)");
    for (double x : v) {
      if (!(x >= 0.0 && x <= 1.0)) throw ParseError(where, "value outside [0,1]");
    }
    if (!(v[2] > 0 && v[3] > 0)) throw ParseError(where, "box must have positive size");
    out.push_back({*cls, BoundingBox::from_center(v[0] * image_w, v[1] * image_h, v[2] * image_w, v[3] * image_h)});
  }
  return out;
}

inline std::string format_label_line(const GroundTruthBox& g, int image_w, int image_h) {
  std::ostringstream os;
  os << std::setprecision(17) << static_cast<int>(g.cls) << ' ' << g.box.cx() / image_w << ' ' << g.box.cy() / image_h
     << ' ' << g.box.width() / image_w << ' ' << g.box.height() / image_h;
  return os.str();
}

/// TP/FP assignment for one image.
struct MatchOutcome {
  std::vector<bool> is_tp;                  // indexed like the input predictions
  std::array<std::size_t, kNumClasses> fn{};  // unmatched ground truths per class
  std::array<std::size_t, kNumClasses> gt{};  // ground truths per class

  std::size_t tp_count() const { return static_cast<std::size_t>(std::count(is_tp.begin(), is_tp.end(), true)); }
  std::size_t fp_count() const { return is_tp.size() - tp_count(); }
  std::size_t fn_count() const { return fn[0] + fn[1]; }
};

/// Greedy by descending confidence: a prediction is TP when it reaches iou >= threshold
/// with a still-unmatched ground truth of its class (the best such one is consumed).
inline MatchOutcome match_detections(const std::vector<Detection>& preds, const std::vector<GroundTruthBox>& gts,
                                     double iou_threshold = 0.5) {
  MatchOutcome m;
  m.is_tp.assign(preds.size(), false);
  std::vector<std::size_t> order(preds.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return preds[a].confidence > preds[b].confidence; });
  std::vector<bool> used(gts.size(), false);
  for (std::size_t p : order) {
    double best = -1;
    std::optional<std::size_t> best_gt;
    for (std::size_t g = 0; g < gts.size(); ++g) {
      if (used[g] || gts[g].cls != preds[p].cls) continue;
      const double o = iou(preds[p].box, gts[g].box);
      if (o >= iou_threshold && o > best) {
        best = o;
        best_gt = g;
      }
    }
    if (best_gt) {
      used[*best_gt] = true;
      m.is_tp[p] = true;
    }
  }
  for (std::size_t g = 0; g < gts.size(); ++g) {
    const auto c = static_cast<std::size_t>(gts[g].cls);
    ++m.gt[c];
    if (!used[g]) ++m.fn[c];
  }
  return m;
}

inline double precision(std::size_t tp, std::size_t fp) {
  return tp + fp == 0 ? 0.0 : static_cast<double>(tp) / static_cast<double>(tp + fp);
}

inline double recall(std::size_t tp, std::size_t fn) {
  return tp + fn == 0 ? 0.0 : static_cast<double>(tp) / static_cast<double>(tp + fn);
}

struct PRPoint {
  double confidence = 0;  // cut: predictions with confidence >= this are counted
  std::size_t tp = 0, fp = 0, fn = 0;
  double precision = 0, recall = 0;
};

/// One point per prediction in the given (confidence-descending) order.
inline std::vector<PRPoint> pr_curve(std::span<const double> confidences, const std::vector<bool>& is_tp,
                                     std::size_t total_gt) {
  std::vector<PRPoint> out;
  std::size_t tp = 0, fp = 0;
  for (std::size_t i = 0; i < is_tp.size(); ++i) {
    is_tp[i] ? ++tp : ++fp;
    const std::size_t fn = total_gt - std::min(tp, total_gt);
    out.push_back({confidences.empty() ? 0.0 : confidences[i], tp, fp, fn, precision(tp, fp), recall(tp, fn)});
  }
  return out;
}

/// All-points interpolated AP over TP flags sorted by confidence descending.
/// Precision is replaced by its running maximum from high recall to low, then
/// integrated over the recall steps. nullopt when the class has no ground truth.
inline std::optional<double> average_precision(const std::vector<bool>& is_tp, std::size_t total_gt) {
  if (total_gt == 0) return std::nullopt;
  std::vector<double> rec{0.0}, prec{1.0};
  std::size_t tp = 0, fp = 0;
  for (bool t : is_tp) {
    t ? ++tp : ++fp;
    rec.push_back(static_cast<double>(tp) / static_cast<double>(total_gt));
    prec.push_back(precision(tp, fp));
  }
  rec.push_back(1.0);
  prec.push_back(0.0);
  for (std::size_t i = prec.size() - 1; i > 0; --i) prec[i - 1] = std::max(prec[i - 1], prec[i]);
  double ap = 0;
  for (std::size_t i = 1; i < rec.size(); ++i) {
    if (rec[i] != rec[i - 1]) ap += (rec[i] - rec[i - 1]) * prec[i];
  }
  return std::clamp(ap, 0.0, 1.0);
}

/// Mean of the defined per-class APs; nullopt when none is defined.
inline std::optional<double> mean_average_precision(std::span<const std::optional<double>> aps,
                                                    std::vector<std::string>* warnings = nullptr) {
  double sum = 0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < aps.size(); ++i) {
    if (aps[i]) {
      sum += *aps[i];
      ++n;
    } else if (warnings) {
      warnings->push_back("class " + std::to_string(i) + " has no ground truth; excluded from mAP");
    }
  }
  if (n == 0) return std::nullopt;
  return sum / static_cast<double>(n);
}

// ---------------------------------------------------------------------------
// Dataset-level report

struct ImageEval {
  std::string stem;
  std::vector<GroundTruthBox> ground_truth;
  std::vector<Detection> predictions;
};

struct ClassReport {
  std::optional<double> ap;
  std::size_t gt = 0;
  std::size_t tp = 0, fp = 0, fn = 0;  // at the operating confidence
  double precision = 0, recall = 0;
  std::vector<PRPoint> curve;
};

struct EvalReport {
  double iou_threshold = 0.5;
  double operating_confidence = 0.25;
  std::array<ClassReport, kNumClasses> classes;
  std::optional<double> map;
  std::size_t images = 0;
  std::size_t tp = 0, fp = 0, fn = 0;
  double precision = 0, recall = 0;
  std::vector<std::string> warnings;
};

inline EvalReport evaluate(const std::vector<ImageEval>& images, double iou_threshold = 0.5,
                           double operating_confidence = 0.25) {
  EvalReport r;
  r.iou_threshold = iou_threshold;
  r.operating_confidence = operating_confidence;
  r.images = images.size();
  struct Scored {
    double confidence;
    bool tp;
  };
  std::array<std::vector<Scored>, kNumClasses> scored;
  for (const auto& img : images) {
    const auto m = match_detections(img.predictions, img.ground_truth, iou_threshold);
    for (std::size_t c = 0; c < kNumClasses; ++c) r.classes[c].gt += m.gt[c];
    for (std::size_t i = 0; i < img.predictions.size(); ++i) {
      scored[static_cast<std::size_t>(img.predictions[i].cls)].push_back({img.predictions[i].confidence, m.is_tp[i]});
    }
  }
  std::array<std::optional<double>, kNumClasses> aps;
  for (std::size_t c = 0; c < kNumClasses; ++c) {
    auto& s = scored[c];
    std::stable_sort(s.begin(), s.end(), [](const Scored& a, const Scored& b) { return a.confidence > b.confidence; });
    std::vector<double> conf;
    std::vector<bool> flags;
    for (const auto& x : s) {
      conf.push_back(x.confidence);
      flags.push_back(x.tp);
    }
    auto& cr = r.classes[c];
    cr.ap = average_precision(flags, cr.gt);
    aps[c] = cr.ap;
    cr.curve = pr_curve(conf, flags, cr.gt);
    for (const auto& x : s) {
      if (x.confidence < operating_confidence) continue;
      x.tp ? ++cr.tp : ++cr.fp;
    }
    cr.fn = cr.gt - std::min(cr.tp, cr.gt);
    cr.precision = precision(cr.tp, cr.fp);
    cr.recall = recall(cr.tp, cr.fn);
    r.tp += cr.tp;
    r.fp += cr.fp;
    r.fn += cr.fn;
  }
  r.precision = precision(r.tp, r.fp);
  r.recall = recall(r.tp, r.fn);
  r.map = mean_average_precision(aps);
  for (std::size_t c = 0; c < kNumClasses; ++c) {
    if (!aps[c]) {
      r.warnings.push_back("class " + std::string(class_name(static_cast<DetectionClass>(c))) +
                           " has no ground truth; excluded from mAP");
    }
  }
  return r;
}

inline nlohmann::ordered_json report_to_json(const EvalReport& r) {
  auto opt = [](const std::optional<double>& v) { return v ? nlohmann::ordered_json(*v) : nlohmann::ordered_json(); };
  nlohmann::ordered_json j;
  j["iou_threshold"] = r.iou_threshold;
  j["operating_confidence"] = r.operating_confidence;
  j["images"] = r.images;
  j["map"] = opt(r.map);
  j["precision"] = r.precision;
  j["recall"] = r.recall;
  j["tp"] = r.tp;
  j["fp"] = r.fp;
  j["fn"] = r.fn;
  nlohmann::ordered_json classes = nlohmann::ordered_json::object();
  for (std::size_t c = 0; c < kNumClasses; ++c) {
    const auto& cr = r.classes[c];
    nlohmann::ordered_json cj;
    cj["ap"] = opt(cr.ap);
    cj["ground_truth"] = cr.gt;
    cj["tp"] = cr.tp;
    cj["fp"] = cr.fp;
    cj["fn"] = cr.fn;
    cj["precision"] = cr.precision;
    cj["recall"] = cr.recall;
    classes[std::string(class_name(static_cast<DetectionClass>(c)))] = std::move(cj);
  }
  j["classes"] = std::move(classes);
  j["warnings"] = r.warnings;
  return j;
}

inline std::string report_table(const EvalReport& r) {
  std::ostringstream os;
  auto fmt = [](const std::optional<double>& v) {
    std::ostringstream s;
    if (v) {
      s << std::fixed << std::setprecision(4) << *v;
    } else {
      s << "n/a";
    }
    return s.str();
  };
  os << std::left << std::setw(10) << "class" << std::right << std::setw(8) << "GT" << std::setw(8) << "TP"
     << std::setw(8) << "FP" << std::setw(8) << "FN" << std::setw(11) << "precision" << std::setw(9) << "recall"
     << std::setw(10) << "AP@" + fmt(r.iou_threshold).substr(0, 3) << '\n';
  for (std::size_t c = 0; c < kNumClasses; ++c) {
    const auto& cr = r.classes[c];
    os << std::left << std::setw(10) << class_name(static_cast<DetectionClass>(c)) << std::right << std::setw(8) << cr.gt
       << std::setw(8) << cr.tp << std::setw(8) << cr.fp << std::setw(8) << cr.fn << std::setw(11)
       << fmt(cr.precision) << std::setw(9) << fmt(cr.recall) << std::setw(10) << fmt(cr.ap) << '\n';
  }
  os << std::left << std::setw(10) << "all" << std::right << std::setw(8) << (r.classes[0].gt + r.classes[1].gt)
     << std::setw(8) << r.tp << std::setw(8) << r.fp << std::setw(8) << r.fn << std::setw(11) << fmt(r.precision)
     << std::setw(9) << fmt(r.recall) << std::setw(10) << fmt(r.map) << '\n';
  os << "mAP@" << fmt(r.iou_threshold).substr(0, 3) << " = " << fmt(r.map) << " over " << r.images << " images\n";
  for (const auto& w : r.warnings) os << "warning: " << w << '\n';
  return os.str();
}

inline std::string pr_curve_csv(const std::vector<PRPoint>& curve) {
  std::ostringstream os;
  os << std::setprecision(17) << "confidence,tp,fp,fn,precision,recall\n";
  for (const auto& p : curve) {
    os << p.confidence << ',' << p.tp << ',' << p.fp << ',' << p.fn << ',' << p.precision << ',' << p.recall << '\n';
  }
  return os.str();
}

// ---------------------------------------------------------------------------
// Predictions interchange: "image_stem class confidence x1 y1 x2 y2" per line.

inline std::string format_prediction_line(const std::string& stem, const Detection& d) {
  std::ostringstream os;
  os << std::setprecision(17) << stem << ' ' << class_name(d.cls) << ' ' << d.confidence << ' ' << d.box.x1 << ' '
     << d.box.y1 << ' ' << d.box.x2 << ' ' << d.box.y2;
  return os.str();
}

inline std::map<std::string, std::vector<Detection>> parse_predictions(const std::string& text,
                                                                       const std::string& origin = "predictions") {
  std::map<std::string, std::vector<Detection>> out;
  std::istringstream is(text);
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const std::string where = origin + ":" + std::to_string(lineno);
    std::istringstream ls(line);
    std::vector<std::string> tok;
    for (std::string t; ls >> t;) tok.push_back(t);
    if (tok.empty() || tok[0].starts_with("#")) continue;
    if (tok.size() != 7) throw ParseError(where, "expected 'stem class confidence x1 y1 x2 y2'");
    const auto cls = parse_class(tok[1]);
    if (!cls) throw ParseError(where, "unknown class " + tok[1]);
    double v[5];
    try {
      for (int i = 0; i < 5; ++i) {
        std::size_t used = 0;
        v[i] = std::stod(tok[i + 2], &used);
        if (used != tok[i + 2].size()) throw std::invalid_argument(tok[i + 2]);
      }
    } catch (const std::exception&) {
      throw ParseError(where, "malformed number");
    }
    if (!(v[0] >= 0 && v[0] <= 1)) throw ParseError(where, "confidence outside [0,1]");
    out[tok[0]].push_back({BoundingBox(v[1], v[2], v[3], v[4]), *cls, v[0]});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Train/test split

struct Split {
  std::vector<std::string> train, test;
};

/// Sorts stems, shuffles them with a seeded Fisher-Yates (mt19937_64), and cuts
/// train_parts : test_parts with the train count rounded to nearest.
inline Split split_stems(std::vector<std::string> stems, unsigned train_parts, unsigned test_parts, std::uint64_t seed) {
  if (train_parts + test_parts == 0) throw InvalidArgument("split ratio must not be 0:0");
  std::sort(stems.begin(), stems.end());
  std::mt19937_64 gen(seed);
  for (std::size_t i = stems.size(); i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(gen() % i);
    std::swap(stems[i - 1], stems[j]);
  }
  const auto n_train = static_cast<std::size_t>(
      std::llround(static_cast<double>(stems.size()) * train_parts / static_cast<double>(train_parts + test_parts)));
  Split s;
  s.train.assign(stems.begin(), stems.begin() + static_cast<std::ptrdiff_t>(n_train));
  s.test.assign(stems.begin() + static_cast<std::ptrdiff_t>(n_train), stems.end());
  return s;
}

// ---------------------------------------------------------------------------
// k-fold pair verification

struct ScoredPair {
  double distance = 0;
  bool same = false;
};

struct VerificationReport {
  std::vector<double> fold_accuracy;
  std::vector<double> fold_threshold;
  double mean_accuracy = 0;
  double std_accuracy = 0;  // population standard deviation
};

namespace detail {

// Pairs predicted "same" when distance <= threshold.
inline double accuracy_at(std::span<const ScoredPair> pairs, double threshold) {
  if (pairs.empty()) return 0;
  std::size_t correct = 0;
  for (const auto& p : pairs) correct += ((p.distance <= threshold) == p.same) ? 1 : 0;
  return static_cast<double>(correct) / static_cast<double>(pairs.size());
}

}  // namespace detail

/// Folds are contiguous blocks of pairs. For each held-out fold the threshold is the
/// candidate with the best accuracy on the remaining folds (first on ties). Candidates
/// are midpoints between consecutive distinct sorted training distances, plus one
/// below the minimum and one above the maximum.
inline VerificationReport verification_protocol(std::span<const ScoredPair> pairs, std::size_t folds = 10) {
  if (folds < 2) throw InvalidArgument("verification needs at least 2 folds");
  if (pairs.empty() || pairs.size() % folds != 0) {
    throw InvalidArgument("pair count " + std::to_string(pairs.size()) + " not divisible by " + std::to_string(folds) +
                          " folds");
  }
  const std::size_t per = pairs.size() / folds;
  for (std::size_t f = 0; f < folds; ++f) {
    const auto fold = pairs.subspan(f * per, per);
    const bool any_same = std::any_of(fold.begin(), fold.end(), [](const auto& p) { return p.same; });
    const bool any_diff = std::any_of(fold.begin(), fold.end(), [](const auto& p) { return !p.same; });
    if (!any_same || !any_diff) throw InvalidArgument("fold " + std::to_string(f) + " holds a single class");
  }
  VerificationReport rep;
  for (std::size_t f = 0; f < folds; ++f) {
    std::vector<ScoredPair> train;
    for (std::size_t i = 0; i < pairs.size(); ++i) {
      if (i / per != f) train.push_back(pairs[i]);
    }
    std::vector<double> d;
    for (const auto& p : train) d.push_back(p.distance);
    std::sort(d.begin(), d.end());
    d.erase(std::unique(d.begin(), d.end()), d.end());
    std::vector<double> candidates{d.front() - 1.0};
    for (std::size_t i = 0; i + 1 < d.size(); ++i) candidates.push_back((d[i] + d[i + 1]) / 2);
    candidates.push_back(d.back() + 1.0);
    double best_t = candidates.front(), best_acc = -1;
    for (double t : candidates) {
      const double acc = detail::accuracy_at(train, t);
      if (acc > best_acc) {
        best_acc = acc;
        best_t = t;
      }
    }
    rep.fold_threshold.push_back(best_t);
    rep.fold_accuracy.push_back(detail::accuracy_at(pairs.subspan(f * per, per), best_t));
  }
  const double n = static_cast<double>(folds);
  rep.mean_accuracy = std::accumulate(rep.fold_accuracy.begin(), rep.fold_accuracy.end(), 0.0) / n;
  double var = 0;
  for (double a : rep.fold_accuracy) var += (a - rep.mean_accuracy) * (a - rep.mean_accuracy);
  rep.std_accuracy = std::sqrt(var / n);
  return rep;
}

/// Scores each pair with distance_of(pair); Pair must expose a bool `same`.
template <class Pair, class DistanceFn>
  requires std::invocable<DistanceFn&, const Pair&>
VerificationReport verification_protocol(const std::vector<Pair>& pairs, DistanceFn&& distance_of,
                                         std::size_t folds = 10) {
  std::vector<ScoredPair> scored;
  scored.reserve(pairs.size());
  for (const auto& p : pairs) scored.push_back({distance_of(p), p.same});
  return verification_protocol(std::span<const ScoredPair>(scored), folds);
}

}  // namespace maskver
