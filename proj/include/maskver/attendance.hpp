#pragma once

// Append-only attendance log, one JSON object per line, fsync'd on every append.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include <fcntl.h>
#include <unistd.h>

#include <nlohmann/json.hpp>

#include "maskver/detection.hpp"
#include "maskver/error.hpp"

namespace maskver {

struct AttendanceEvent {
  double timestamp = 0;  // UTC seconds since the epoch
  std::string decision;  // student id or "unknown"
  std::optional<double> distance;  // absent when nothing was enrolled
  DetectionClass mask_status = DetectionClass::no_mask;
  double confidence = 0;
  std::string session_id;

  friend bool operator==(const AttendanceEvent&, const AttendanceEvent&) = default;
};

inline nlohmann::ordered_json to_json(const AttendanceEvent& e) {
  nlohmann::ordered_json j;
  j["timestamp"] = e.timestamp;
  j["decision"] = e.decision;
  j["distance"] = e.distance ? nlohmann::ordered_json(*e.distance) : nlohmann::ordered_json();
  j["mask_status"] = std::string(class_name(e.mask_status));
  j["confidence"] = e.confidence;
  j["session_id"] = e.session_id;
  return j;
}

inline AttendanceEvent attendance_from_json(const nlohmann::json& j) {
  AttendanceEvent e;
  e.timestamp = j.at("timestamp").get<double>();
  e.decision = j.at("decision").get<std::string>();
  if (!j.at("distance").is_null()) e.distance = j["distance"].get<double>();
  const auto cls = parse_class(j.at("mask_status").get<std::string>());
  if (!cls) throw ParseError("attendance", "bad mask_status");
  e.mask_status = *cls;
  e.confidence = j.at("confidence").get<double>();
  e.session_id = j.at("session_id").get<std::string>();
  return e;
}

inline double utc_now() {
  return std::chrono::duration<double>(std::chrono::system_clock::now().time_since_epoch()).count();
}

/// Thread-safe appender. Timestamps are made non-decreasing per session.
class AttendanceLog {
 public:
  AttendanceLog() = default;
  explicit AttendanceLog(std::filesystem::path path) : path_(std::move(path)) {
    if (std::filesystem::exists(*path_)) {
      for (const auto& e : read_all()) last_ts_[e.session_id] = std::max(last_ts_[e.session_id], e.timestamp);
    }
  }
  ~AttendanceLog() { close(); }
  AttendanceLog(const AttendanceLog&) = delete;
  AttendanceLog& operator=(const AttendanceLog&) = delete;

  /// Appends and returns the event as stored (timestamp possibly raised).
  AttendanceEvent append(AttendanceEvent e) {
    std::lock_guard lock(mu_);
    auto& last = last_ts_[e.session_id];
    e.timestamp = std::max(e.timestamp, last);
    last = e.timestamp;
    if (path_) {
      if (fd_ < 0) {
        fd_ = ::open(path_->c_str(), O_WRONLY | O_CREAT | O_APPEND | O_CLOEXEC, 0644);
        if (fd_ < 0) throw IoError("cannot open attendance log " + path_->string());
      }
      const std::string line = to_json(e).dump() + "\n";
      if (::write(fd_, line.data(), line.size()) != static_cast<ssize_t>(line.size())) {
        throw IoError("attendance append failed");
      }
      if (::fsync(fd_) != 0) throw IoError("attendance fsync failed");
    } else {
      memory_.push_back(e);
    }
    return e;
  }

  /// Events with timestamp >= since, in append order.
  std::vector<AttendanceEvent> since(double since_ts) const {
    std::vector<AttendanceEvent> out;
    for (auto& e : read_all()) {
      if (e.timestamp >= since_ts) out.push_back(std::move(e));
    }
    return out;
  }

  std::vector<AttendanceEvent> read_all() const {
    std::lock_guard lock(mu_);
    if (!path_) return memory_;
    std::vector<AttendanceEvent> out;
    std::ifstream f(*path_);
    std::string line;
    int lineno = 0;
    while (std::getline(f, line)) {
      ++lineno;
      if (line.empty()) continue;
      try {
        out.push_back(attendance_from_json(nlohmann::json::parse(line)));
      } catch (const nlohmann::json::exception& ex) {
        throw ParseError(path_->string() + ":" + std::to_string(lineno), ex.what());
      }
    }
    return out;
  }

  void flush() {
    std::lock_guard lock(mu_);
    if (fd_ >= 0) ::fsync(fd_);
  }

  void close() {
    std::lock_guard lock(mu_);
    if (fd_ >= 0) {
      ::fsync(fd_);
      ::close(fd_);
      fd_ = -1;
    }
  }

  const std::optional<std::filesystem::path>& path() const { return path_; }

 private:
  std::optional<std::filesystem::path> path_;
  mutable std::mutex mu_;
  int fd_ = -1;
  std::map<std::string, double> last_ts_;
  std::vector<AttendanceEvent> memory_;
};

}  // namespace maskver
