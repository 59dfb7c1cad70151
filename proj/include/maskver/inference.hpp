#pragma once

// Model loading and execution behind one handle type. Three backends:
//   * "tiny-embedder" or a refnet weight file (*.bin): the seeded residual embedder
//   * "stub-detector[:SIZE]": a deterministic blob finder that emits detector head tensors
//   * *.onnx: executed by OpenCV's DNN module
// ModelHandle::run checks every input and output against the declared specs.

#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <opencv2/dnn.hpp>

#include "maskver/detection.hpp"
#include "maskver/error.hpp"
#include "maskver/image.hpp"
#include "maskver/onnx_meta.hpp"
#include "maskver/refnet.hpp"
#include "maskver/tensor.hpp"

namespace maskver {

enum class ElementType { f32 };

inline constexpr std::int64_t kSymbolic = -1;

struct TensorSpec {
  std::string name;
  std::vector<std::int64_t> dims;  // kSymbolic marks the (single) free batch extent
  ElementType type = ElementType::f32;

  void validate() const {
    int symbolic = 0;
    for (auto d : dims) {
      if (d == kSymbolic) {
        ++symbolic;
      } else if (d <= 0) {
        throw InvalidArgument("tensor spec " + name + ": extents must be positive or symbolic");
      }
    }
    if (symbolic > 1) throw InvalidArgument("tensor spec " + name + ": at most one symbolic extent");
  }

  bool accepts(const Shape& shape) const {
    if (shape.size() != dims.size()) return false;
    for (std::size_t i = 0; i < dims.size(); ++i) {
      if (dims[i] != kSymbolic && static_cast<std::size_t>(dims[i]) != shape[i]) return false;
    }
    return true;
  }

  std::string str() const {
    std::string s = name + "[";
    for (std::size_t i = 0; i < dims.size(); ++i) {
      s += (i ? "x" : "") + (dims[i] == kSymbolic ? std::string("N") : std::to_string(dims[i]));
    }
    return s + "]";
  }

  friend bool operator==(const TensorSpec&, const TensorSpec&) = default;
};

using TensorSpecs = std::vector<TensorSpec>;
using Tensors = std::vector<Tensor>;

/// What the caller needs from a model. Empty vectors are not checked.
struct ExpectedSpecs {
  TensorSpecs inputs;
  TensorSpecs outputs;
};

class Backend {
 public:
  virtual ~Backend() = default;
  virtual const std::string& id() const = 0;
  virtual const TensorSpecs& inputs() const = 0;
  virtual const TensorSpecs& outputs() const = 0;
  // Inputs are already validated. Must be safe to call concurrently.
  virtual Tensors run(const Tensors& inputs) const = 0;
};

class ModelHandle {
 public:
  ModelHandle() = default;
  explicit ModelHandle(std::shared_ptr<const Backend> backend) : backend_(std::move(backend)) {
    for (const auto& s : backend_->inputs()) s.validate();
    for (const auto& s : backend_->outputs()) s.validate();
  }

  bool loaded() const { return backend_ != nullptr; }
  const std::string& id() const { return backend().id(); }
  const TensorSpecs& inputs() const { return backend().inputs(); }
  const TensorSpecs& outputs() const { return backend().outputs(); }

  Tensors run(const Tensors& in) const {
    const auto& specs = backend().inputs();
    if (in.size() != specs.size()) {
      throw ShapeError(id() + ": expected " + std::to_string(specs.size()) + " inputs, got " + std::to_string(in.size()));
    }
    std::optional<std::size_t> batch;
    for (std::size_t i = 0; i < in.size(); ++i) {
      if (!specs[i].accepts(in[i].shape())) {
        throw ShapeError(id() + ": input " + specs[i].str() + " does not accept shape " + shape_string(in[i].shape()));
      }
      for (std::size_t d = 0; d < specs[i].dims.size(); ++d) {
        if (specs[i].dims[d] == kSymbolic) batch = in[i].shape()[d];
      }
    }
    Tensors out = backend().run(in);
    const auto& ospecs = backend().outputs();
    if (out.size() != ospecs.size()) throw ModelError(id() + ": backend returned wrong number of outputs");
    for (std::size_t i = 0; i < out.size(); ++i) {
      bool ok = ospecs[i].accepts(out[i].shape());
      for (std::size_t d = 0; ok && d < ospecs[i].dims.size(); ++d) {
        if (ospecs[i].dims[d] == kSymbolic && batch) ok = out[i].shape()[d] == *batch;
      }
      if (!ok) {
        throw ModelError(id() + ": output " + ospecs[i].str() + " got shape " + shape_string(out[i].shape()));
      }
    }
    return out;
  }

 private:
  const Backend& backend() const {
    if (!backend_) throw ModelError("model not loaded");
    return *backend_;
  }
  std::shared_ptr<const Backend> backend_;
};

namespace detail {

inline bool dims_subsume(const std::vector<std::int64_t>& declared, const std::vector<std::int64_t>& expected) {
  if (declared.size() != expected.size()) return false;
  for (std::size_t i = 0; i < declared.size(); ++i) {
    if (declared[i] == kSymbolic || expected[i] == kSymbolic) continue;
    if (declared[i] != expected[i]) return false;
  }
  return true;
}

inline void check_subsumes(const std::string& model, const char* what, const TensorSpecs& declared,
                           const TensorSpecs& expected) {
  if (expected.empty()) return;
  auto list = [](const TensorSpecs& s) {
    std::string out;
    for (const auto& t : s) out += (out.empty() ? "" : ", ") + t.str();
    return out;
  };
  bool ok = declared.size() == expected.size();
  for (std::size_t i = 0; ok && i < declared.size(); ++i) ok = dims_subsume(declared[i].dims, expected[i].dims);
  if (!ok) {
    throw ModelError(model + ": " + what + " spec mismatch: expected " + list(expected) + ", found " + list(declared));
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------

class EmbedderBackend final : public Backend {
 public:
  EmbedderBackend(std::string id, refnet::TinyEmbedder net) : id_(std::move(id)), net_(std::move(net)) {
    const auto s = static_cast<std::int64_t>(refnet::kChipSize);
    in_ = {{"chip", {kSymbolic, 3, s, s}, ElementType::f32}};
    out_ = {{"embedding", {kSymbolic, static_cast<std::int64_t>(kEmbeddingSize)}, ElementType::f32}};
  }
  const std::string& id() const override { return id_; }
  const TensorSpecs& inputs() const override { return in_; }
  const TensorSpecs& outputs() const override { return out_; }

  Tensors run(const Tensors& inputs) const override {
    const Tensor& batch = inputs.at(0);
    const std::size_t n = batch.dim(0);
    const std::size_t chip = batch.size() / n;
    std::vector<float> out;
    out.reserve(n * kEmbeddingSize);
    for (std::size_t b = 0; b < n; ++b) {
      Tensor one({3, refnet::kChipSize, refnet::kChipSize},
                 std::vector<float>(batch.data().begin() + static_cast<std::ptrdiff_t>(b * chip),
                                    batch.data().begin() + static_cast<std::ptrdiff_t>((b + 1) * chip)));
      const auto e = net_.embed(one);
      out.insert(out.end(), e.values().begin(), e.values().end());
    }
    return {Tensor({n, kEmbeddingSize}, std::move(out))};
  }

 private:
  std::string id_;
  refnet::TinyEmbedder net_;
  TensorSpecs in_, out_;
};

/// Deterministic stand-in for a trained detector. A pixel is foreground when any
/// channel differs from the letterbox grey (114/255) by more than 0.1. Each
/// 4-connected foreground component of at least 8x8 px that does not touch the
/// input border becomes one detection: class "mask" when the lower third of the
/// component is dominated by blue, otherwise "no_mask". Detections are written
/// into the head tensors through the inverse decode, with confidence about 0.907.
class StubDetectorBackend final : public Backend {
 public:
  static constexpr double kObjectnessLogit = 3.0;
  static constexpr double kClassLogit = 3.0;
  static constexpr double kBackgroundLogit = -20.0;

  explicit StubDetectorBackend(int input_size = 640, AnchorSet anchors = {})
      : id_(input_size == 640 ? "stub-detector" : "stub-detector:" + std::to_string(input_size)),
        size_(input_size),
        anchors_(anchors) {
    anchors_.validate(size_);
    in_ = {{"images", {1, 3, size_, size_}, ElementType::f32}};
    for (std::size_t l = 0; l < kNumLayers; ++l) {
      const std::int64_t g = size_ / anchors_.strides[l];
      out_.push_back({"head" + std::to_string(l), {1, 3, g, g, static_cast<std::int64_t>(kHeadChannels)}, ElementType::f32});
    }
  }
  const std::string& id() const override { return id_; }
  const TensorSpecs& inputs() const override { return in_; }
  const TensorSpecs& outputs() const override { return out_; }

  struct Blob {
    BoundingBox box;
    DetectionClass cls;
  };

  /// The components the stub reports, in network-input pixels.
  std::vector<Blob> find_blobs(const Tensor& image) const {
    const auto n = static_cast<std::size_t>(size_);
    const std::size_t plane = n * n;
    const auto& d = image.data();
    std::vector<std::uint8_t> fg(plane, 0);
    for (std::size_t i = 0; i < plane; ++i) {
      for (std::size_t c = 0; c < 3; ++c) {
        if (std::abs(d[c * plane + i] - kLetterboxPad) > 0.1f) fg[i] = 1;
      }
    }
    std::vector<Blob> blobs;
    std::vector<std::int32_t> label(plane, -1);
    std::vector<std::size_t> stack, members;
    for (std::size_t start = 0; start < plane; ++start) {
      if (!fg[start] || label[start] >= 0) continue;
      const auto id = static_cast<std::int32_t>(blobs.size() + 1);
      std::size_t x1 = n, y1 = n, x2 = 0, y2 = 0;
      bool touches_border = false;
      members.clear();
      stack.assign(1, start);
      label[start] = id;
      while (!stack.empty()) {
        const std::size_t p = stack.back();
        stack.pop_back();
        members.push_back(p);
        const std::size_t x = p % n, y = p / n;
        x1 = std::min(x1, x);
        x2 = std::max(x2, x);
        y1 = std::min(y1, y);
        y2 = std::max(y2, y);
        if (x == 0 || y == 0 || x == n - 1 || y == n - 1) touches_border = true;
        auto visit = [&](std::size_t q) {
          if (fg[q] && label[q] < 0) {
            label[q] = id;
            stack.push_back(q);
          }
        };
        if (x > 0) visit(p - 1);
        if (x + 1 < n) visit(p + 1);
        if (y > 0) visit(p - n);
        if (y + 1 < n) visit(p + n);
      }
      const std::size_t w = x2 - x1 + 1, h = y2 - y1 + 1;
      if (touches_border || w < 8 || h < 8) continue;
      double r = 0, g = 0, b = 0;
      std::size_t count = 0;
      const std::size_t lower = y2 + 1 - h / 3;
      for (std::size_t p : members) {
        if (p / n < lower) continue;
        r += d[p];
        g += d[plane + p];
        b += d[2 * plane + p];
        ++count;
      }
      const bool masked = count > 0 && (b - std::max(r, g)) / static_cast<double>(count) > 0.15;
      blobs.push_back({BoundingBox(static_cast<double>(x1), static_cast<double>(y1), static_cast<double>(x2 + 1),
                                   static_cast<double>(y2 + 1)),
                       masked ? DetectionClass::mask : DetectionClass::no_mask});
    }
    return blobs;
  }

  Tensors run(const Tensors& inputs) const override {
    Tensors heads;
    for (std::size_t l = 0; l < kNumLayers; ++l) {
      const auto g = static_cast<std::size_t>(size_ / anchors_.strides[l]);
      Tensor t({1, kAnchorsPerLayer, g, g, kHeadChannels}, 0.0f);
      for (std::size_t i = 4; i < t.size(); i += kHeadChannels) t[i] = static_cast<float>(kBackgroundLogit);
      heads.push_back(std::move(t));
    }
    for (const auto& blob : find_blobs(inputs.at(0))) place(blob, heads);
    return heads;
  }

 private:
  // Writes the blob at the anchor whose size ratio to the box is closest to 1.
  void place(const Blob& blob, Tensors& heads) const {
    double best_ratio = 0;
    std::optional<std::pair<std::size_t, std::size_t>> best;
    for (std::size_t l = 0; l < kNumLayers; ++l) {
      for (std::size_t a = 0; a < kAnchorsPerLayer; ++a) {
        const auto& anc = anchors_.anchors[l][a];
        const double rw = blob.box.width() / anc.w, rh = blob.box.height() / anc.h;
        const double ratio = std::max({rw, 1 / rw, rh, 1 / rh});
        if (rw >= 3.9 || rh >= 3.9) continue;
        if (!best || ratio < best_ratio) {
          best_ratio = ratio;
          best = {l, a};
        }
      }
    }
    if (!best) return;
    const auto [l, a] = *best;
    const auto g = static_cast<std::size_t>(size_ / anchors_.strides[l]);
    const auto enc = encode_box(blob.box, anchors_.anchors[l][a], anchors_.strides[l], g);
    if (!enc) return;
    float* cell = &heads[l][((a * g + enc->row) * g + enc->col) * kHeadChannels];
    cell[0] = static_cast<float>(enc->tx);
    cell[1] = static_cast<float>(enc->ty);
    cell[2] = static_cast<float>(enc->tw);
    cell[3] = static_cast<float>(enc->th);
    cell[4] = static_cast<float>(kObjectnessLogit);
    const bool mask = blob.cls == DetectionClass::mask;
    cell[5] = static_cast<float>(mask ? kClassLogit : -kClassLogit);
    cell[6] = static_cast<float>(mask ? -kClassLogit : kClassLogit);
  }

  std::string id_;
  int size_;
  AnchorSet anchors_;
  TensorSpecs in_, out_;
};

/// Returns fixed tensors regardless of input; for wiring hand-built head outputs into tests.
class ConstantBackend final : public Backend {
 public:
  ConstantBackend(std::string id, TensorSpecs inputs, Tensors outputs) : id_(std::move(id)), in_(std::move(inputs)) {
    for (std::size_t i = 0; i < outputs.size(); ++i) {
      std::vector<std::int64_t> dims(outputs[i].shape().begin(), outputs[i].shape().end());
      out_.push_back({"out" + std::to_string(i), std::move(dims), ElementType::f32});
    }
    values_ = std::move(outputs);
  }
  const std::string& id() const override { return id_; }
  const TensorSpecs& inputs() const override { return in_; }
  const TensorSpecs& outputs() const override { return out_; }
  Tensors run(const Tensors&) const override { return values_; }

 private:
  std::string id_;
  TensorSpecs in_, out_;
  Tensors values_;
};

/// ONNX graph executed by OpenCV DNN. cv::dnn::Net::forward mutates the net, so runs are serialized.
class OnnxBackend final : public Backend {
 public:
  explicit OnnxBackend(const std::string& path) : id_(path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw ModelError("cannot open model " + path);
    const std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    onnx::GraphIo io;
    try {
      io = onnx::read_graph_io(bytes);
    } catch (const ParseError& e) {
      throw ModelError(path + ": corrupt model (" + e.what() + ")");
    }
    auto convert = [&](const onnx::ValueInfo& v) {
      if (v.elem_type != 1) throw ModelError(path + ": tensor " + v.name + " is not float32");
      TensorSpec s{v.name, v.dims, ElementType::f32};
      // Several symbolic extents cannot be honoured; only the leading one stays free.
      for (std::size_t i = 1; i < s.dims.size(); ++i) {
        if (s.dims[i] == kSymbolic) throw ModelError(path + ": tensor " + v.name + " has a non-batch symbolic extent");
      }
      return s;
    };
    for (const auto& v : io.inputs) in_.push_back(convert(v));
    for (const auto& v : io.outputs) out_.push_back(convert(v));
    try {
      net_ = cv::dnn::readNetFromONNX(bytes.data(), bytes.size());
    } catch (const cv::Exception& e) {
      throw ModelError(path + ": corrupt model (" + e.what() + ")");
    }
    if (net_.empty()) throw ModelError(path + ": corrupt model");
    net_.setPreferableBackend(cv::dnn::DNN_BACKEND_OPENCV);
    net_.setPreferableTarget(cv::dnn::DNN_TARGET_CPU);
  }
  const std::string& id() const override { return id_; }
  const TensorSpecs& inputs() const override { return in_; }
  const TensorSpecs& outputs() const override { return out_; }

  Tensors run(const Tensors& inputs) const override {
    std::lock_guard lock(mu_);
    std::vector<cv::Mat> keep;
    for (std::size_t i = 0; i < inputs.size(); ++i) {
      std::vector<int> dims(inputs[i].shape().begin(), inputs[i].shape().end());
      cv::Mat m(static_cast<int>(dims.size()), dims.data(), CV_32F, const_cast<float*>(inputs[i].data().data()));
      keep.push_back(m.clone());
      net_.setInput(keep.back(), in_[i].name);
    }
    std::vector<cv::String> names;
    for (const auto& o : out_) names.push_back(o.name);
    std::vector<cv::Mat> outs;
    try {
      net_.forward(outs, names);
    } catch (const cv::Exception& e) {
      throw ModelError(id_ + ": execution failed: " + e.what());
    }
    Tensors result;
    for (auto& m : outs) {
      Shape shape;
      for (int d = 0; d < m.dims; ++d) shape.push_back(static_cast<std::size_t>(m.size[d]));
      const cv::Mat c = m.isContinuous() ? m : m.clone();
      const auto* p = c.ptr<float>();
      result.emplace_back(std::move(shape), std::vector<float>(p, p + c.total()));
    }
    return result;
  }

 private:
  std::string id_;
  TensorSpecs in_, out_;
  mutable std::mutex mu_;
  mutable cv::dnn::Net net_;
};

// ---------------------------------------------------------------------------

inline constexpr const char* kTinyEmbedderId = "tiny-embedder";
inline constexpr const char* kStubDetectorId = "stub-detector";

inline std::optional<std::filesystem::path> model_dir_from_env() {
  if (const char* d = std::getenv("MASKVER_MODEL_DIR"); d && *d) return std::filesystem::path(d);
  return std::nullopt;
}

/// Existing path as given, else relative to MASKVER_MODEL_DIR.
inline std::optional<std::filesystem::path> resolve_model_path(const std::string& path) {
  namespace fs = std::filesystem;
  if (fs::exists(path)) return fs::path(path);
  if (auto dir = model_dir_from_env(); dir && fs::path(path).is_relative() && fs::exists(*dir / path)) {
    return *dir / path;
  }
  return std::nullopt;
}

inline bool is_builtin_model(const std::string& id) {
  return id == kTinyEmbedderId || id == kStubDetectorId || id.starts_with(std::string(kStubDetectorId) + ":");
}

/// Load a model by builtin id or file path and check it against `expected`.
inline ModelHandle load_model(const std::string& path, const ExpectedSpecs& expected = {}) {
  std::shared_ptr<const Backend> backend;
  if (path == kTinyEmbedderId) {
    backend = std::make_shared<EmbedderBackend>(path, refnet::TinyEmbedder::seeded());
  } else if (path == kStubDetectorId) {
    backend = std::make_shared<StubDetectorBackend>();
  } else if (path.starts_with(std::string(kStubDetectorId) + ":")) {
    int size = 0;
    try {
      size = std::stoi(path.substr(std::string(kStubDetectorId).size() + 1));
    } catch (const std::exception&) {
      throw ModelError("bad stub detector size in " + path);
    }
    try {
      backend = std::make_shared<StubDetectorBackend>(size);
    } catch (const InvalidArgument& e) {
      throw ModelError(path + ": " + e.what());
    }
  } else {
    const auto resolved = resolve_model_path(path);
    if (!resolved) throw ModelError("model file not found: " + path);
    const auto ext = resolved->extension().string();
    if (ext == ".onnx") {
      backend = std::make_shared<OnnxBackend>(resolved->string());
    } else if (ext == ".bin") {
      try {
        backend = std::make_shared<EmbedderBackend>(resolved->string(),
                                                    refnet::TinyEmbedder(refnet::read_weights(resolved->string())));
      } catch (const ParseError& e) {
        throw ModelError(resolved->string() + ": corrupt model (" + e.what() + ")");
      } catch (const ShapeError& e) {
        throw ModelError(resolved->string() + ": corrupt model (" + e.what() + ")");
      }
    } else {
      throw ModelError("unrecognised model format: " + resolved->string());
    }
  }
  ModelHandle handle(std::move(backend));
  detail::check_subsumes(handle.id(), "input", handle.inputs(), expected.inputs);
  detail::check_subsumes(handle.id(), "output", handle.outputs(), expected.outputs);
  return handle;
}

/// Specs a face detector must satisfy: 1x3xSxS input and three head layers.
inline ExpectedSpecs detector_specs(int input_size = 640, const AnchorSet& anchors = {}) {
  ExpectedSpecs e;
  e.inputs = {{"images", {1, 3, input_size, input_size}, ElementType::f32}};
  for (std::size_t l = 0; l < kNumLayers; ++l) {
    const std::int64_t g = input_size / anchors.strides[l];
    e.outputs.push_back({"head" + std::to_string(l), {1, 3, g, g, static_cast<std::int64_t>(kHeadChannels)}, ElementType::f32});
  }
  return e;
}

/// Specs an embedder must satisfy: one N x 3 x H x W input, one N x 128 output.
inline ExpectedSpecs embedder_specs() {
  ExpectedSpecs e;
  e.outputs = {{"embedding", {kSymbolic, static_cast<std::int64_t>(kEmbeddingSize)}, ElementType::f32}};
  return e;
}

}  // namespace maskver
