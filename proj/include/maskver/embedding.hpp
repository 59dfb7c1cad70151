#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <span>

#include "maskver/error.hpp"

namespace maskver {

inline constexpr std::size_t kEmbeddingSize = 128;

/// 128-D face descriptor. Values are always finite.
class FaceEmbedding {
 public:
  FaceEmbedding() { values_.fill(0.0f); }

  explicit FaceEmbedding(std::span<const float> values) {
    if (values.size() != kEmbeddingSize) {
      throw InvalidArgument("embedding must have 128 values, got " + std::to_string(values.size()));
    }
    for (std::size_t i = 0; i < kEmbeddingSize; ++i) {
      if (!std::isfinite(values[i])) throw InvalidArgument("embedding value " + std::to_string(i) + " is not finite");
      values_[i] = values[i];
    }
  }

  static FaceEmbedding one_hot(std::size_t index, float value = 1.0f) {
    FaceEmbedding e;
    e.values_.at(index) = value;
    return e;
  }

  float operator[](std::size_t i) const { return values_[i]; }
  std::span<const float, kEmbeddingSize> values() const { return values_; }
  static constexpr std::size_t size() { return kEmbeddingSize; }

  friend bool operator==(const FaceEmbedding&, const FaceEmbedding&) = default;

 private:
  std::array<float, kEmbeddingSize> values_;
};

}  // namespace maskver
