#pragma once

// 8-bit RGB images, codec and resampling (OpenCV-backed), and image-to-tensor conversion.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "maskver/error.hpp"
#include "maskver/geometry.hpp"
#include "maskver/tensor.hpp"

namespace maskver {

/// Interleaved RGB, row-major, 3 bytes per pixel.
struct Image {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> rgb;

  Image() = default;
  Image(int w, int h, std::uint8_t r = 0, std::uint8_t g = 0, std::uint8_t b = 0) : width(w), height(h) {
    if (w <= 0 || h <= 0) throw InvalidArgument("image dimensions must be positive");
    rgb.resize(static_cast<std::size_t>(w) * h * 3);
    for (std::size_t i = 0; i < rgb.size(); i += 3) {
      rgb[i] = r;
      rgb[i + 1] = g;
      rgb[i + 2] = b;
    }
  }

  bool empty() const { return width == 0 || height == 0; }
  std::uint8_t* px(int x, int y) { return &rgb[(static_cast<std::size_t>(y) * width + x) * 3]; }
  const std::uint8_t* px(int x, int y) const { return &rgb[(static_cast<std::size_t>(y) * width + x) * 3]; }

  void fill_rect(int x1, int y1, int x2, int y2, std::uint8_t r, std::uint8_t g, std::uint8_t b) {
    x1 = std::clamp(x1, 0, width);
    x2 = std::clamp(x2, 0, width);
    y1 = std::clamp(y1, 0, height);
    y2 = std::clamp(y2, 0, height);
    for (int y = y1; y < y2; ++y) {
      for (int x = x1; x < x2; ++x) {
        auto* p = px(x, y);
        p[0] = r;
        p[1] = g;
        p[2] = b;
      }
    }
  }

  friend bool operator==(const Image&, const Image&) = default;
};

namespace detail {

inline cv::Mat as_mat(const Image& img) {
  // Non-owning view; OpenCV's functions below never write through it.
  return cv::Mat(img.height, img.width, CV_8UC3, const_cast<std::uint8_t*>(img.rgb.data()));
}

inline Image from_mat_rgb(const cv::Mat& m) {
  Image out;
  out.width = m.cols;
  out.height = m.rows;
  out.rgb.resize(static_cast<std::size_t>(m.cols) * m.rows * 3);
  cv::Mat dst(m.rows, m.cols, CV_8UC3, out.rgb.data());
  m.copyTo(dst);
  return out;
}

// libjpeg happily decodes a truncated stream (filling grey); require the EOI marker.
inline bool jpeg_complete(std::string_view bytes) {
  std::size_t end = bytes.size();
  while (end > 0 && (bytes[end - 1] == '\0' || bytes[end - 1] == '\n' || bytes[end - 1] == '\r')) --end;
  return end >= 4 && static_cast<unsigned char>(bytes[end - 2]) == 0xFF &&
         static_cast<unsigned char>(bytes[end - 1]) == 0xD9;
}

}  // namespace detail

/// Decode PNG/JPEG/BMP bytes into RGB. Throws ImageDecodeError on anything undecodable or truncated.
inline Image decode_image(std::string_view bytes) {
  if (bytes.size() < 8) throw ImageDecodeError("image payload too short");
  const bool is_jpeg = static_cast<unsigned char>(bytes[0]) == 0xFF && static_cast<unsigned char>(bytes[1]) == 0xD8;
  if (is_jpeg && !detail::jpeg_complete(bytes)) throw ImageDecodeError("truncated JPEG stream");
  cv::Mat raw(1, static_cast<int>(bytes.size()), CV_8UC1, const_cast<char*>(bytes.data()));
  cv::Mat bgr;
  try {
    bgr = cv::imdecode(raw, cv::IMREAD_COLOR);
  } catch (const cv::Exception& e) {
    throw ImageDecodeError(std::string("image decode failed: ") + e.what());
  }
  if (bgr.empty()) throw ImageDecodeError("undecodable image");
  cv::Mat rgb;
  cv::cvtColor(bgr, rgb, cv::COLOR_BGR2RGB);
  return detail::from_mat_rgb(rgb);
}

/// Encode as PNG (".png") or JPEG (".jpg").
inline std::string encode_image(const Image& img, const std::string& ext = ".png") {
  cv::Mat bgr;
  cv::cvtColor(detail::as_mat(img), bgr, cv::COLOR_RGB2BGR);
  std::vector<std::uint8_t> buf;
  if (!cv::imencode(ext, bgr, buf)) throw Error("image encode failed for " + ext);
  return {buf.begin(), buf.end()};
}

inline Image resize_image(const Image& img, int w, int h) {
  if (w <= 0 || h <= 0) throw InvalidArgument("resize target must be positive");
  if (w == img.width && h == img.height) return img;
  cv::Mat out;
  cv::resize(detail::as_mat(img), out, cv::Size(w, h), 0, 0, cv::INTER_LINEAR);
  return detail::from_mat_rgb(out);
}

/// Copy of the pixel rectangle [x1,x2) x [y1,y2); bounds must lie in the image.
inline Image crop_image(const Image& img, int x1, int y1, int x2, int y2) {
  if (x1 < 0 || y1 < 0 || x2 > img.width || y2 > img.height || x2 <= x1 || y2 <= y1) {
    throw InvalidArgument("crop rectangle outside image");
  }
  Image out(x2 - x1, y2 - y1);
  for (int y = y1; y < y2; ++y) {
    std::copy_n(img.px(x1, y), static_cast<std::size_t>(x2 - x1) * 3, out.px(0, y - y1));
  }
  return out;
}

inline constexpr float kLetterboxPad = 114.0f / 255.0f;

/// Letterbox into a dst x dst square (pad value 114/255) and emit a 1x3xdst x dst tensor in [0,1].
inline Tensor letterbox_tensor(const Image& img, const LetterboxTransform& t) {
  const int rw = std::max(1, t.resized_w()), rh = std::max(1, t.resized_h());
  const Image resized = resize_image(img, rw, rh);
  const int ox = static_cast<int>(std::lround(t.pad_x - 0.1));
  const int oy = static_cast<int>(std::lround(t.pad_y - 0.1));
  const auto dst = static_cast<std::size_t>(t.dst);
  Tensor out({1, 3, dst, dst}, kLetterboxPad);
  auto& d = out.data();
  const std::size_t plane = dst * dst;
  for (int y = 0; y < rh; ++y) {
    const int ny = y + oy;
    if (ny < 0 || ny >= t.dst) continue;
    for (int x = 0; x < rw; ++x) {
      const int nx = x + ox;
      if (nx < 0 || nx >= t.dst) continue;
      const auto* p = resized.px(x, y);
      const std::size_t at = static_cast<std::size_t>(ny) * dst + static_cast<std::size_t>(nx);
      for (std::size_t c = 0; c < 3; ++c) d[c * plane + at] = static_cast<float>(p[c]) / 255.0f;
    }
  }
  return out;
}

/// Channel-first 3 x h x w tensor with values in [0,1].
inline Tensor image_to_chw(const Image& img) {
  const auto w = static_cast<std::size_t>(img.width), h = static_cast<std::size_t>(img.height);
  Tensor out({3, h, w});
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const auto* p = img.px(static_cast<int>(x), static_cast<int>(y));
      for (std::size_t c = 0; c < 3; ++c) out.at(c, y, x) = static_cast<float>(p[c]) / 255.0f;
    }
  }
  return out;
}

}  // namespace maskver
