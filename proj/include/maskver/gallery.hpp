#pragma once

// Enrollment gallery: records of 128-D embeddings, nearest-neighbour matching,
// and versioned JSON persistence.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <fcntl.h>
#include <unistd.h>

#include <nlohmann/json.hpp>

#include "maskver/embedding.hpp"
#include "maskver/error.hpp"

namespace maskver {

inline constexpr double kDefaultMatchThreshold = 0.6;
inline constexpr int kGalleryVersion = 1;

inline double euclidean_distance(std::span<const float> a, std::span<const float> b) {
  if (a.size() != b.size()) {
    throw InvalidArgument("euclidean_distance: length mismatch " + std::to_string(a.size()) + " vs " +
                          std::to_string(b.size()));
  }
  double acc = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
    acc += d * d;
  }
  return std::sqrt(acc);
}

inline double euclidean_distance(const FaceEmbedding& a, const FaceEmbedding& b) {
  return euclidean_distance(a.values(), b.values());
}

struct EnrollmentRecord {
  std::string student_id;
  std::string name;
  std::vector<FaceEmbedding> embeddings;
  std::vector<std::int64_t> enrolled_at;  // UTC seconds, one per embedding

  friend bool operator==(const EnrollmentRecord&, const EnrollmentRecord&) = default;
};

/// Records in enrollment order; student_id is unique.
struct Gallery {
  std::vector<EnrollmentRecord> records;

  const EnrollmentRecord* find(const std::string& id) const {
    auto it = std::find_if(records.begin(), records.end(), [&](const auto& r) { return r.student_id == id; });
    return it == records.end() ? nullptr : &*it;
  }
  std::size_t size() const { return records.size(); }
  bool empty() const { return records.empty(); }

  friend bool operator==(const Gallery&, const Gallery&) = default;
};

inline std::int64_t utc_now_seconds() {
  return std::chrono::duration_cast<std::chrono::seconds>(std::chrono::system_clock::now().time_since_epoch()).count();
}

/// Adds `emb` to the record for `student_id`, creating the record when absent.
/// Enrolling an embedding the record already holds changes nothing.
inline Gallery enroll(Gallery g, const std::string& student_id, const std::string& name, const FaceEmbedding& emb,
                      std::int64_t enrolled_at = utc_now_seconds()) {
  if (student_id.empty()) throw InvalidArgument("student_id must not be empty");
  auto it = std::find_if(g.records.begin(), g.records.end(), [&](const auto& r) { return r.student_id == student_id; });
  if (it == g.records.end()) {
    g.records.push_back({student_id, name, {emb}, {enrolled_at}});
    return g;
  }
  if (!name.empty()) it->name = name;
  if (std::find(it->embeddings.begin(), it->embeddings.end(), emb) == it->embeddings.end()) {
    it->embeddings.push_back(emb);
    it->enrolled_at.push_back(enrolled_at);
  }
  return g;
}

struct RemoveResult {
  Gallery gallery;
  bool found = false;
};

inline RemoveResult remove(Gallery g, const std::string& student_id) {
  const auto before = g.records.size();
  std::erase_if(g.records, [&](const auto& r) { return r.student_id == student_id; });
  const bool found = g.records.size() != before;
  return {std::move(g), found};
}

struct MatchResult {
  std::optional<std::string> student_id;  // empty means unknown
  double distance = std::numeric_limits<double>::infinity();
  std::optional<double> runner_up_distance;
  double threshold_used = kDefaultMatchThreshold;

  bool matched() const { return student_id.has_value(); }
  std::string decision() const { return student_id.value_or("unknown"); }
};

/// Nearest record by minimum distance over its embeddings. Equal distances go to the
/// lexicographically smaller student_id. Matched iff the best distance <= threshold.
inline MatchResult match(const Gallery& g, const FaceEmbedding& query, double threshold = kDefaultMatchThreshold) {
  if (!(threshold > 0)) throw InvalidArgument("match threshold must be positive");
  MatchResult r;
  r.threshold_used = threshold;
  const EnrollmentRecord* best = nullptr;
  std::optional<double> second;
  for (const auto& rec : g.records) {
    double d = std::numeric_limits<double>::infinity();
    for (const auto& e : rec.embeddings) d = std::min(d, euclidean_distance(query, e));
    const bool better = !best || d < r.distance || (d == r.distance && rec.student_id < best->student_id);
    if (better) {
      if (best) second = r.distance;
      best = &rec;
      r.distance = d;
    } else if (!second || d < *second) {
      second = d;
    }
  }
  r.runner_up_distance = second;
  if (best && r.distance <= threshold) r.student_id = best->student_id;
  return r;
}

// ---------------------------------------------------------------------------
// Persistence: {"version": 1, "students": [{"id", "name", "enrolled_at", "embeddings"}]}

inline std::string gallery_to_json(const Gallery& g) {
  nlohmann::ordered_json students = nlohmann::ordered_json::array();
  for (const auto& r : g.records) {
    nlohmann::ordered_json s;
    s["id"] = r.student_id;
    s["name"] = r.name;
    s["enrolled_at"] = r.enrolled_at;
    nlohmann::ordered_json embs = nlohmann::ordered_json::array();
    for (const auto& e : r.embeddings) {
      nlohmann::ordered_json vals = nlohmann::ordered_json::array();
      for (float v : e.values()) vals.push_back(static_cast<double>(v));
      embs.push_back(std::move(vals));
    }
    s["embeddings"] = std::move(embs);
    students.push_back(std::move(s));
  }
  nlohmann::ordered_json root;
  root["version"] = kGalleryVersion;
  root["students"] = std::move(students);
  return root.dump();
}

inline Gallery gallery_from_json(const std::string& text, const std::string& origin = "gallery") {
  nlohmann::json root;
  try {
    root = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(origin, std::string("invalid JSON: ") + e.what());
  }
  if (!root.is_object() || !root.contains("version")) throw ParseError(origin, "missing version field");
  if (!root["version"].is_number_integer() || root["version"].get<int>() != kGalleryVersion) {
    throw VersionError(origin + ": unsupported gallery version " + root["version"].dump() + " (expected " +
                       std::to_string(kGalleryVersion) + ")");
  }
  if (!root.contains("students") || !root["students"].is_array()) throw ParseError(origin, "missing students array");
  Gallery g;
  const auto& students = root["students"];
  for (std::size_t i = 0; i < students.size(); ++i) {
    const auto& s = students[i];
    std::string where = origin + ": student[" + std::to_string(i) + "]";
    if (!s.is_object() || !s.contains("id") || !s["id"].is_string()) throw ParseError(where, "missing id");
    EnrollmentRecord rec;
    rec.student_id = s["id"].get<std::string>();
    where += " (id=" + rec.student_id + ")";
    if (rec.student_id.empty()) throw ParseError(where, "empty id");
    if (g.find(rec.student_id)) throw ParseError(where, "duplicate id");
    if (!s.contains("name") || !s["name"].is_string()) throw ParseError(where, "missing name");
    rec.name = s["name"].get<std::string>();
    if (!s.contains("embeddings") || !s["embeddings"].is_array() || s["embeddings"].empty()) {
      throw ParseError(where, "needs at least one embedding");
    }
    for (std::size_t k = 0; k < s["embeddings"].size(); ++k) {
      const auto& e = s["embeddings"][k];
      if (!e.is_array() || e.size() != kEmbeddingSize) {
        throw ParseError(where, "embedding " + std::to_string(k) + " has " + std::to_string(e.is_array() ? e.size() : 0) +
                                    " values, expected 128");
      }
      std::vector<float> vals;
      vals.reserve(kEmbeddingSize);
      for (const auto& v : e) {
        if (!v.is_number()) throw ParseError(where, "embedding " + std::to_string(k) + " holds a non-number");
        vals.push_back(static_cast<float>(v.get<double>()));
      }
      try {
        rec.embeddings.emplace_back(vals);
      } catch (const InvalidArgument& ex) {
        throw ParseError(where, ex.what());
      }
    }
    if (s.contains("enrolled_at")) {
      if (!s["enrolled_at"].is_array()) throw ParseError(where, "enrolled_at must be an array");
      for (const auto& t : s["enrolled_at"]) {
        if (!t.is_number_integer()) throw ParseError(where, "enrolled_at holds a non-integer");
        rec.enrolled_at.push_back(t.get<std::int64_t>());
      }
    }
    if (rec.enrolled_at.size() != rec.embeddings.size()) {
      throw ParseError(where, "enrolled_at length does not match embeddings");
    }
    g.records.push_back(std::move(rec));
  }
  return g;
}

namespace detail {

// Write via temp file + fsync + rename so readers never see a partial file.
inline void write_file_durably(const std::filesystem::path& path, const std::string& content) {
  const auto tmp = path.string() + ".tmp";
  const int fd = ::open(tmp.c_str(), O_WRONLY | O_CREAT | O_TRUNC | O_CLOEXEC, 0644);
  if (fd < 0) throw IoError("cannot open " + tmp + " for writing");
  std::size_t off = 0;
  while (off < content.size()) {
    const auto n = ::write(fd, content.data() + off, content.size() - off);
    if (n <= 0) {
      ::close(fd);
      throw IoError("write failed: " + tmp);
    }
    off += static_cast<std::size_t>(n);
  }
  if (::fsync(fd) != 0) {
    ::close(fd);
    throw IoError("fsync failed: " + tmp);
  }
  ::close(fd);
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("rename to " + path.string() + " failed: " + ec.message());
  const auto dir = path.has_parent_path() ? path.parent_path() : std::filesystem::path(".");
  if (const int dfd = ::open(dir.c_str(), O_RDONLY | O_DIRECTORY | O_CLOEXEC); dfd >= 0) {
    ::fsync(dfd);
    ::close(dfd);
  }
}

}  // namespace detail

inline void save(const Gallery& g, const std::filesystem::path& path) {
  detail::write_file_durably(path, gallery_to_json(g));
}

inline Gallery load(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open gallery " + path.string());
  std::stringstream ss;
  ss << f.rdbuf();
  return gallery_from_json(ss.str(), path.string());
}

/// Loads the gallery at path, or an empty one when the file does not exist.
inline Gallery load_or_empty(const std::filesystem::path& path) {
  return std::filesystem::exists(path) ? load(path) : Gallery{};
}

/// Shared gallery for concurrent use. Readers take immutable snapshots; writers are
/// serialized, persist the new state (when a path is set), then publish it.
class GalleryStore {
 public:
  explicit GalleryStore(Gallery initial = {}, std::optional<std::filesystem::path> path = std::nullopt)
      : path_(std::move(path)), current_(std::make_shared<const Gallery>(std::move(initial))) {}

  static GalleryStore open(const std::filesystem::path& path) { return GalleryStore(load_or_empty(path), path); }

  GalleryStore(GalleryStore&& other) noexcept : path_(std::move(other.path_)), current_(other.snapshot()) {}

  std::shared_ptr<const Gallery> snapshot() const {
    std::lock_guard lock(snap_mu_);
    return current_;
  }

  /// Applies fn to a copy of the current gallery; returns the published result.
  std::shared_ptr<const Gallery> update(const std::function<Gallery(Gallery)>& fn) {
    std::lock_guard writer(write_mu_);
    auto next = std::make_shared<const Gallery>(fn(*snapshot()));
    if (path_) save(*next, *path_);
    std::lock_guard lock(snap_mu_);
    current_ = next;
    return next;
  }

  const std::optional<std::filesystem::path>& path() const { return path_; }

 private:
  std::optional<std::filesystem::path> path_;
  mutable std::mutex snap_mu_;
  std::mutex write_mu_;
  std::shared_ptr<const Gallery> current_;
};

}  // namespace maskver
