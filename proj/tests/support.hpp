#pragma once

// Hand-rolled generators and synthetic scenes shared by the unit and acceptance tests.

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "maskver/detection.hpp"
#include "maskver/geometry.hpp"
#include "maskver/image.hpp"

namespace testing_support {

using maskver::BoundingBox;
using maskver::Detection;
using maskver::DetectionClass;
using maskver::Image;

class Gen {
 public:
  explicit Gen(std::uint64_t seed) : rng_(seed) {}
  double uniform(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng_); }
  int integer(int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng_); }
  bool coin() { return integer(0, 1) == 1; }

  BoundingBox box(double extent = 640, double min_side = 1) {
    const double w = uniform(min_side, extent / 2), h = uniform(min_side, extent / 2);
    const double x = uniform(0, extent - w), y = uniform(0, extent - h);
    return {x, y, x + w, y + h};
  }

  // Boxes clustered around a few centres so that overlaps are common.
  std::vector<Detection> detections(std::size_t n) {
    std::vector<Detection> out;
    const int clusters = integer(1, 4);
    std::vector<BoundingBox> seeds;
    for (int i = 0; i < clusters; ++i) seeds.push_back(box(200, 20));
    for (std::size_t i = 0; i < n; ++i) {
      const auto& s = seeds[static_cast<std::size_t>(integer(0, clusters - 1))];
      const double j = s.width() * 0.3;
      BoundingBox b{s.x1 + uniform(-j, j), s.y1 + uniform(-j, j), s.x2 + uniform(-j, j), s.y2 + uniform(-j, j)};
      // Coarse confidences force ties through the secondary ordering keys.
      const double conf = integer(1, 8) / 8.0;
      out.push_back({b, coin() ? DetectionClass::mask : DetectionClass::no_mask, conf});
    }
    return out;
  }

  std::mt19937_64& engine() { return rng_; }

 private:
  std::mt19937_64 rng_;
};

inline constexpr std::uint8_t kGrey = 114;

// A face: a warm patch split into a 3x3 grid whose palette is keyed by identity.
// Coarse cells survive resampling to the embedder chip. Masked faces get a blue
// band over the lower third.
inline void draw_face(Image& img, int identity, int x, int y, int w, int h, bool masked = false) {
  std::mt19937 rng(static_cast<std::uint32_t>(identity) * 7919u + 17u);
  auto channel = [&](int lo, int hi) { return static_cast<std::uint8_t>(std::uniform_int_distribution<int>(lo, hi)(rng)); };
  for (int cy = 0; cy < 3; ++cy) {
    for (int cx = 0; cx < 3; ++cx) {
      const std::uint8_t r = channel(170, 255), g = channel(0, 255), b = channel(0, 120);
      img.fill_rect(x + cx * w / 3, y + cy * h / 3, x + (cx + 1) * w / 3, y + (cy + 1) * h / 3, r, g, b);
    }
  }
  if (masked) img.fill_rect(x, y + 2 * h / 3, x + w, y + h, 40, 80, 220);
}

inline Image face_frame(int identity, bool masked = false, int width = 320, int height = 240) {
  Image img(width, height, kGrey, kGrey, kGrey);
  draw_face(img, identity, width / 2 - 50, height / 2 - 60, 100, 120, masked);
  return img;
}

struct TempDir {
  std::filesystem::path path;
  explicit TempDir(const std::string& tag) {
    path = std::filesystem::temp_directory_path() /
           ("maskver-" + tag + "-" + std::to_string(std::random_device{}()));
    std::filesystem::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
};

}  // namespace testing_support
