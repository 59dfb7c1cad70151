#pragma once

// Minimal forward-only residual network: the primitives a residual block is
// built from, the block itself, a small seeded embedder, and the weight file
// reader/writer. Layout of the weight file is documented in docs/weights-format.md.

#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iterator>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "maskver/embedding.hpp"
#include "maskver/error.hpp"
#include "maskver/tensor.hpp"

namespace maskver::refnet {

inline constexpr float kBatchNormEpsilon = 1e-5f;

inline double silu(double x) { return x / (1.0 + std::exp(-x)); }

inline Tensor silu(Tensor t) {
  for (auto& v : t.data()) v = static_cast<float>(silu(static_cast<double>(v)));
  return t;
}

struct Conv2dParams {
  Tensor weight;              // out x in x kh x kw
  std::vector<float> bias;    // out, or empty for no bias
  std::size_t stride = 1;
  std::size_t pad = 0;

  std::size_t out_channels() const { return weight.dim(0); }
  std::size_t in_channels() const { return weight.dim(1); }
};

struct BatchNormParams {
  std::vector<float> mean, var, gain, bias;

  static BatchNormParams neutral(std::size_t channels) {
    return {std::vector<float>(channels, 0.0f), std::vector<float>(channels, 1.0f),
            std::vector<float>(channels, 1.0f), std::vector<float>(channels, 0.0f)};
  }
  std::size_t channels() const { return mean.size(); }
};

/// Cross-correlation of a C x H x W input with explicit stride and zero padding.
inline Tensor conv2d(const Tensor& input, const Conv2dParams& p) {
  if (input.rank() != 3) throw ShapeError("conv2d: input must be C x H x W, got " + shape_string(input.shape()));
  if (p.weight.rank() != 4) throw ShapeError("conv2d: kernel must be rank 4");
  if (p.in_channels() != input.dim(0)) {
    throw ShapeError("conv2d: kernel expects " + std::to_string(p.in_channels()) + " input channels, got " +
                     std::to_string(input.dim(0)));
  }
  if (!p.bias.empty() && p.bias.size() != p.out_channels()) throw ShapeError("conv2d: bias length mismatch");
  if (p.stride == 0) throw InvalidArgument("conv2d: stride must be positive");

  const std::size_t in_c = input.dim(0), in_h = input.dim(1), in_w = input.dim(2);
  const std::size_t kh = p.weight.dim(2), kw = p.weight.dim(3);
  if (in_h + 2 * p.pad < kh || in_w + 2 * p.pad < kw) throw ShapeError("conv2d: kernel larger than padded input");
  const std::size_t out_h = (in_h + 2 * p.pad - kh) / p.stride + 1;
  const std::size_t out_w = (in_w + 2 * p.pad - kw) / p.stride + 1;

  Tensor out({p.out_channels(), out_h, out_w});
  const auto& w = p.weight.data();
  for (std::size_t oc = 0; oc < p.out_channels(); ++oc) {
    const float b = p.bias.empty() ? 0.0f : p.bias[oc];
    for (std::size_t oy = 0; oy < out_h; ++oy) {
      for (std::size_t ox = 0; ox < out_w; ++ox) {
        float acc = 0.0f;
        for (std::size_t ic = 0; ic < in_c; ++ic) {
          for (std::size_t ky = 0; ky < kh; ++ky) {
            const auto iy = static_cast<std::ptrdiff_t>(oy * p.stride + ky) - static_cast<std::ptrdiff_t>(p.pad);
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(in_h)) continue;
            for (std::size_t kx = 0; kx < kw; ++kx) {
              const auto ix = static_cast<std::ptrdiff_t>(ox * p.stride + kx) - static_cast<std::ptrdiff_t>(p.pad);
              if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(in_w)) continue;
              acc += w[((oc * in_c + ic) * kh + ky) * kw + kx] *
                     input.at(ic, static_cast<std::size_t>(iy), static_cast<std::size_t>(ix));
            }
          }
        }
        out.at(oc, oy, ox) = acc + b;
      }
    }
  }
  return out;
}

/// (x - mean) / sqrt(var + eps) * gain + bias, per channel.
inline Tensor batch_norm(Tensor x, const BatchNormParams& p) {
  if (x.rank() != 3) throw ShapeError("batch_norm: input must be C x H x W");
  const std::size_t c = x.dim(0);
  if (p.mean.size() != c || p.var.size() != c || p.gain.size() != c || p.bias.size() != c) {
    throw ShapeError("batch_norm: parameter length does not match " + std::to_string(c) + " channels");
  }
  const std::size_t plane = x.dim(1) * x.dim(2);
  for (std::size_t ch = 0; ch < c; ++ch) {
    if (!(p.var[ch] > 0)) throw InvalidArgument("batch_norm: variance must be positive");
    const float inv = 1.0f / std::sqrt(p.var[ch] + kBatchNormEpsilon);
    for (std::size_t i = 0; i < plane; ++i) {
      float& v = x[ch * plane + i];
      v = (v - p.mean[ch]) * inv * p.gain[ch] + p.bias[ch];
    }
  }
  return x;
}

enum class Activation { none, silu };

/// conv1 -> bn1 -> activation -> conv2 -> bn2 forms the residual branch F.
/// `projection` is the 1x1 skip-path conv used when F changes the shape.
struct ResidualBlockParams {
  Conv2dParams conv1;
  BatchNormParams bn1;
  Conv2dParams conv2;
  BatchNormParams bn2;
  std::optional<Conv2dParams> projection;
  Activation inner = Activation::silu;
};

inline Tensor residual_branch(const Tensor& x, const ResidualBlockParams& p) {
  Tensor f = batch_norm(conv2d(x, p.conv1), p.bn1);
  if (p.inner == Activation::silu) f = silu(std::move(f));
  return batch_norm(conv2d(f, p.conv2), p.bn2);
}

/// H(x) = F(x) + x, with x replaced by projection(x) when a projection is given.
inline Tensor residual_block(const Tensor& x, const ResidualBlockParams& p) {
  Tensor h = residual_branch(x, p);
  const Tensor skip = p.projection ? conv2d(x, *p.projection) : x;
  if (skip.shape() != h.shape()) {
    throw ShapeError("residual_block: branch output " + shape_string(h.shape()) + " vs skip " +
                     shape_string(skip.shape()) + (p.projection ? "" : " (no projection given)"));
  }
  for (std::size_t i = 0; i < h.size(); ++i) h[i] += skip[i];
  return h;
}

// ---------------------------------------------------------------------------
// Weight files

using NamedTensors = std::map<std::string, Tensor>;

namespace detail {

inline constexpr std::array<char, 4> kWeightMagic{'M', 'V', 'W', 'T'};
inline constexpr std::uint32_t kWeightVersion = 1;

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFFu));
}

class ByteReader {
 public:
  ByteReader(const std::string& bytes, std::string origin) : bytes_(bytes), origin_(std::move(origin)) {}

  std::uint32_t u32(const std::string& what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes_[pos_++])) << (8 * i);
    return v;
  }
  std::string take(std::size_t n, const std::string& what) {
    need(n, what);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n, const std::string& what) const {
    if (bytes_.size() - pos_ < n) throw ParseError(origin_, "truncated while reading " + what);
  }
  const std::string& bytes_;
  std::string origin_;
  std::size_t pos_ = 0;
};

}  // namespace detail

/// Serialize named tensors: magic "MVWT", u32 version, u32 record count, then per record
/// u32 name length, name bytes, u32 rank, rank x u32 extents, float32 payload. All little-endian.
inline std::string encode_weights(const NamedTensors& tensors) {
  std::string out(detail::kWeightMagic.begin(), detail::kWeightMagic.end());
  detail::put_u32(out, detail::kWeightVersion);
  detail::put_u32(out, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    detail::put_u32(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    detail::put_u32(out, static_cast<std::uint32_t>(t.rank()));
    for (auto e : t.shape()) detail::put_u32(out, static_cast<std::uint32_t>(e));
    for (float v : t.data()) detail::put_u32(out, std::bit_cast<std::uint32_t>(v));
  }
  return out;
}

inline NamedTensors decode_weights(const std::string& bytes, const std::string& origin = "weights") {
  detail::ByteReader r(bytes, origin);
  if (r.take(4, "magic") != std::string(detail::kWeightMagic.begin(), detail::kWeightMagic.end())) {
    throw ParseError(origin, "bad magic, not a refnet weight file");
  }
  if (auto v = r.u32("version"); v != detail::kWeightVersion) {
    throw VersionError(origin + ": unsupported weight file version " + std::to_string(v));
  }
  const auto count = r.u32("record count");
  NamedTensors out;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::string rec = "record " + std::to_string(i);
    const auto name = r.take(r.u32(rec + " name length"), rec + " name");
    const auto rank = r.u32(rec + " rank");
    if (rank == 0 || rank > 8) throw ParseError(origin, rec + " (" + name + "): bad rank " + std::to_string(rank));
    Shape shape;
    for (std::uint32_t d = 0; d < rank; ++d) {
      shape.push_back(r.u32(rec + " extent"));
      if (shape.back() == 0) throw ParseError(origin, rec + " (" + name + "): zero extent");
    }
    std::vector<float> data(element_count(shape));
    for (auto& v : data) v = std::bit_cast<float>(r.u32(rec + " (" + name + ") payload"));
    if (!out.emplace(name, Tensor(std::move(shape), std::move(data))).second) {
      throw ParseError(origin, rec + ": duplicate tensor name " + name);
    }
  }
  if (!r.done()) throw ParseError(origin, "trailing bytes after last record");
  return out;
}

inline void write_weights(const std::string& path, const NamedTensors& tensors) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path + " for writing");
  const auto bytes = encode_weights(tensors);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw IoError("write failed: " + path);
}

inline NamedTensors read_weights(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path);
  std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return decode_weights(bytes, path);
}

// ---------------------------------------------------------------------------
// Tiny embedder: 3x64x64 chip -> stem conv -> 6 residual blocks -> global average pool -> 128-D.

inline constexpr std::size_t kChipSize = 64;
inline constexpr std::uint32_t kDefaultEmbedderSeed = 20240611;
// Untrained features are strongly correlated; a wide head spreads distinct chips
// past the default 0.6 match threshold.
inline constexpr float kHeadGain = 16.0f;

struct BlockLayout {
  std::size_t in, out, stride;
};

inline constexpr std::size_t kStemChannels = 8;
inline constexpr std::array<BlockLayout, 6> kEmbedderBlocks{{
    {8, 8, 1}, {8, 16, 2}, {16, 16, 1}, {16, 32, 2}, {32, 32, 1}, {32, 64, 2},
}};

class TinyEmbedder {
 public:
  /// Build from named tensors; throws ShapeError when a tensor is missing or mis-shaped.
  explicit TinyEmbedder(const NamedTensors& w) {
    stem_ = conv(w, "stem.conv", kStemChannels, 3, 3, 1, 1);
    stem_bn_ = bn(w, "stem.bn", kStemChannels);
    for (std::size_t i = 0; i < kEmbedderBlocks.size(); ++i) {
      const auto& l = kEmbedderBlocks[i];
      const std::string pre = "block" + std::to_string(i);
      ResidualBlockParams p;
      p.conv1 = conv(w, pre + ".conv1", l.out, l.in, 3, l.stride, 1);
      p.bn1 = bn(w, pre + ".bn1", l.out);
      p.conv2 = conv(w, pre + ".conv2", l.out, l.out, 3, 1, 1);
      p.bn2 = bn(w, pre + ".bn2", l.out);
      if (l.in != l.out || l.stride != 1) p.projection = conv(w, pre + ".proj", l.out, l.in, 1, l.stride, 0);
      p.inner = Activation::silu;
      blocks_.push_back(std::move(p));
    }
    fc_w_ = get(w, "head.fc.w", {kEmbeddingSize, kEmbedderBlocks.back().out}).data();
    fc_b_ = get(w, "head.fc.b", {kEmbeddingSize}).data();
  }

  /// Weights drawn from a fixed mt19937 stream; identical across platforms.
  static NamedTensors seeded_weights(std::uint32_t seed = kDefaultEmbedderSeed) {
    std::mt19937 gen(seed);
    auto uniform = [&](float lo, float hi) {
      const float u = static_cast<float>(gen() >> 8) * (1.0f / 16777216.0f);
      return lo + (hi - lo) * u;
    };
    NamedTensors w;
    auto add_conv = [&](const std::string& name, std::size_t out, std::size_t in, std::size_t k, bool bias) {
      const float limit = std::sqrt(6.0f / static_cast<float>(in * k * k));
      Tensor t({out, in, k, k});
      for (auto& v : t.data()) v = uniform(-limit, limit);
      w.emplace(name + ".w", std::move(t));
      if (bias) {
        Tensor b({out});
        for (auto& v : b.data()) v = uniform(-0.05f, 0.05f);
        w.emplace(name + ".b", std::move(b));
      }
    };
    auto add_bn = [&](const std::string& name, std::size_t c) {
      Tensor mean({c}), var({c}), gain({c}), bias({c});
      for (std::size_t i = 0; i < c; ++i) {
        mean[i] = uniform(-0.1f, 0.1f);
        var[i] = uniform(0.5f, 1.5f);
        gain[i] = uniform(0.8f, 1.2f);
        bias[i] = uniform(-0.1f, 0.1f);
      }
      w.emplace(name + ".mean", std::move(mean));
      w.emplace(name + ".var", std::move(var));
      w.emplace(name + ".gain", std::move(gain));
      w.emplace(name + ".bias", std::move(bias));
    };
    add_conv("stem.conv", kStemChannels, 3, 3, true);
    add_bn("stem.bn", kStemChannels);
    for (std::size_t i = 0; i < kEmbedderBlocks.size(); ++i) {
      const auto& l = kEmbedderBlocks[i];
      const std::string pre = "block" + std::to_string(i);
      add_conv(pre + ".conv1", l.out, l.in, 3, true);
      add_bn(pre + ".bn1", l.out);
      add_conv(pre + ".conv2", l.out, l.out, 3, true);
      add_bn(pre + ".bn2", l.out);
      if (l.in != l.out || l.stride != 1) add_conv(pre + ".proj", l.out, l.in, 1, false);
    }
    const std::size_t feat = kEmbedderBlocks.back().out;
    const float limit = kHeadGain * std::sqrt(6.0f / static_cast<float>(feat));
    Tensor fc({kEmbeddingSize, feat});
    for (auto& v : fc.data()) v = uniform(-limit, limit);
    w.emplace("head.fc.w", std::move(fc));
    w.emplace("head.fc.b", Tensor({kEmbeddingSize}));
    return w;
  }

  static TinyEmbedder seeded(std::uint32_t seed = kDefaultEmbedderSeed) { return TinyEmbedder(seeded_weights(seed)); }

  /// 64-D pooled features before the output projection.
  Tensor features(const Tensor& chip) const {
    if (chip.shape() != Shape{3, kChipSize, kChipSize}) {
      throw ShapeError("tiny_embedder: expected chip 3x64x64, got " + shape_string(chip.shape()));
    }
    Tensor x = silu(batch_norm(conv2d(chip, stem_), stem_bn_));
    for (const auto& b : blocks_) x = silu(residual_block(x, b));
    const std::size_t c = x.dim(0), plane = x.dim(1) * x.dim(2);
    Tensor pooled({c});
    for (std::size_t ch = 0; ch < c; ++ch) {
      float acc = 0.0f;
      for (std::size_t i = 0; i < plane; ++i) acc += x[ch * plane + i];
      pooled[ch] = acc / static_cast<float>(plane);
    }
    return pooled;
  }

  FaceEmbedding embed(const Tensor& chip) const {
    const Tensor f = features(chip);
    std::array<float, kEmbeddingSize> out{};
    const std::size_t n = f.size();
    for (std::size_t o = 0; o < kEmbeddingSize; ++o) {
      float acc = fc_b_[o];
      for (std::size_t i = 0; i < n; ++i) acc += fc_w_[o * n + i] * f[i];
      out[o] = acc;
    }
    return FaceEmbedding(out);
  }

 private:
  static const Tensor& get(const NamedTensors& w, const std::string& name, const Shape& shape) {
    auto it = w.find(name);
    if (it == w.end()) throw ShapeError("tiny_embedder: missing tensor " + name);
    if (it->second.shape() != shape) {
      throw ShapeError("tiny_embedder: tensor " + name + " has shape " + shape_string(it->second.shape()) +
                       ", expected " + shape_string(shape));
    }
    return it->second;
  }
  static Conv2dParams conv(const NamedTensors& w, const std::string& name, std::size_t out, std::size_t in,
                           std::size_t k, std::size_t stride, std::size_t pad) {
    Conv2dParams p;
    p.weight = get(w, name + ".w", {out, in, k, k});
    if (w.contains(name + ".b")) p.bias = get(w, name + ".b", {out}).data();
    p.stride = stride;
    p.pad = pad;
    return p;
  }
  static BatchNormParams bn(const NamedTensors& w, const std::string& name, std::size_t c) {
    return {get(w, name + ".mean", {c}).data(), get(w, name + ".var", {c}).data(), get(w, name + ".gain", {c}).data(),
            get(w, name + ".bias", {c}).data()};
  }

  Conv2dParams stem_;
  BatchNormParams stem_bn_;
  std::vector<ResidualBlockParams> blocks_;
  std::vector<float> fc_w_;
  std::vector<float> fc_b_;
};

}  // namespace maskver::refnet
