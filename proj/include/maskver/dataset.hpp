#pragma once

// On-disk dataset layout: <root>/images/<stem>.{jpg,jpeg,png} with
// <root>/labels/<stem>.txt holding normalized label lines.

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "maskver/error.hpp"
#include "maskver/evaluation.hpp"
#include "maskver/image.hpp"

namespace maskver {

inline std::string read_file(const std::filesystem::path& p) {
  std::ifstream f(p, std::ios::binary);
  if (!f) throw IoError("cannot open " + p.string());
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

inline Image load_image_file(const std::filesystem::path& p) { return decode_image(read_file(p)); }

struct DatasetItem {
  std::string stem;
  std::filesystem::path image;
  std::filesystem::path labels;  // may not exist: no objects in the image
};

inline std::vector<DatasetItem> list_dataset(const std::filesystem::path& root) {
  namespace fs = std::filesystem;
  const auto images = root / "images";
  if (!fs::is_directory(images)) throw IoError("dataset has no images/ directory: " + root.string());
  std::vector<DatasetItem> items;
  for (const auto& e : fs::directory_iterator(images)) {
    if (!e.is_regular_file()) continue;
    auto ext = e.path().extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    if (ext != ".jpg" && ext != ".jpeg" && ext != ".png") continue;
    const auto stem = e.path().stem().string();
    items.push_back({stem, e.path(), root / "labels" / (stem + ".txt")});
  }
  std::sort(items.begin(), items.end(), [](const auto& a, const auto& b) { return a.stem < b.stem; });
  return items;
}

/// Thrown when one or more label files fail to parse; lists every failure.
class DatasetError : public Error {
 public:
  explicit DatasetError(std::vector<std::string> problems)
      : Error(join(problems)), problems_(std::move(problems)) {}
  const std::vector<std::string>& problems() const { return problems_; }

 private:
  static std::string join(const std::vector<std::string>& p) {
    std::string s = "dataset errors:";
    for (const auto& x : p) s += "\n  " + x;
    return s;
  }
  std::vector<std::string> problems_;
};

/// Ground truth for every image, paired with predictions from `predictions` (by stem)
/// or, when absent, from `predict(image)`.
template <class PredictFn>
std::vector<ImageEval> load_evaluation_set(const std::filesystem::path& root,
                                           const std::map<std::string, std::vector<Detection>>* predictions,
                                           PredictFn&& predict) {
  std::vector<ImageEval> out;
  std::vector<std::string> problems;
  for (const auto& item : list_dataset(root)) {
    ImageEval ev;
    ev.stem = item.stem;
    try {
      const Image img = load_image_file(item.image);
      if (std::filesystem::exists(item.labels)) {
        ev.ground_truth = parse_labels(read_file(item.labels), img.width, img.height, item.labels.string());
      }
      if (predictions) {
        if (auto it = predictions->find(item.stem); it != predictions->end()) ev.predictions = it->second;
      } else {
        ev.predictions = predict(img);
      }
    } catch (const ParseError& e) {
      problems.push_back(e.what());
      continue;
    } catch (const ImageDecodeError& e) {
      problems.push_back(item.image.string() + ": " + e.what());
      continue;
    }
    out.push_back(std::move(ev));
  }
  if (!problems.empty()) throw DatasetError(std::move(problems));
  return out;
}

}  // namespace maskver
