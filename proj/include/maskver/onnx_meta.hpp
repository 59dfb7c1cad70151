#pragma once

// Reads graph input/output declarations straight from an ONNX ModelProto.
// Only the handful of protobuf fields needed for I/O specs are decoded; the
// rest of the message is skipped by wire type.

#include <cstdint>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "maskver/error.hpp"

namespace maskver::onnx {

struct ValueInfo {
  std::string name;
  int elem_type = 0;               // TensorProto.DataType; 1 = FLOAT
  std::vector<std::int64_t> dims;  // -1 for symbolic or unknown extents
};

struct GraphIo {
  std::vector<ValueInfo> inputs;
  std::vector<ValueInfo> outputs;
};

namespace detail {

class WireReader {
 public:
  explicit WireReader(std::string_view buf) : buf_(buf) {}

  bool done() const { return pos_ >= buf_.size(); }

  std::uint64_t varint() {
    std::uint64_t v = 0;
    for (int shift = 0; shift < 64; shift += 7) {
      if (pos_ >= buf_.size()) throw ParseError("onnx", "truncated varint");
      const auto b = static_cast<unsigned char>(buf_[pos_++]);
      v |= static_cast<std::uint64_t>(b & 0x7F) << shift;
      if (!(b & 0x80)) return v;
    }
    throw ParseError("onnx", "varint too long");
  }

  std::string_view bytes() {
    const auto n = varint();
    if (n > buf_.size() - pos_) throw ParseError("onnx", "length-delimited field overruns message");
    auto s = buf_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  void skip(int wire_type) {
    switch (wire_type) {
      case 0: varint(); break;
      case 1: advance(8); break;
      case 2: bytes(); break;
      case 5: advance(4); break;
      default: throw ParseError("onnx", "unsupported wire type " + std::to_string(wire_type));
    }
  }

 private:
  void advance(std::size_t n) {
    if (n > buf_.size() - pos_) throw ParseError("onnx", "fixed field overruns message");
    pos_ += n;
  }
  std::string_view buf_;
  std::size_t pos_ = 0;
};

// Calls fn(field_number, wire_type, reader) for each field in the message.
template <class Fn>
void for_each_field(std::string_view msg, Fn&& fn) {
  WireReader r(msg);
  while (!r.done()) {
    const auto key = r.varint();
    const int field = static_cast<int>(key >> 3);
    const int wire = static_cast<int>(key & 7);
    fn(field, wire, r);
  }
}

inline ValueInfo parse_value_info(std::string_view msg) {
  ValueInfo vi;
  for_each_field(msg, [&](int field, int wire, WireReader& r) {
    if (field == 1 && wire == 2) {
      vi.name = std::string(r.bytes());
    } else if (field == 2 && wire == 2) {  // TypeProto
      for_each_field(r.bytes(), [&](int tf, int tw, WireReader& tr) {
        if (tf != 1 || tw != 2) return tr.skip(tw);
        for_each_field(tr.bytes(), [&](int f, int w, WireReader& rr) {  // TypeProto.Tensor
          if (f == 1 && w == 0) {
            vi.elem_type = static_cast<int>(rr.varint());
          } else if (f == 2 && w == 2) {  // TensorShapeProto
            for_each_field(rr.bytes(), [&](int sf, int sw, WireReader& sr) {
              if (sf != 1 || sw != 2) return sr.skip(sw);
              std::int64_t value = -1;
              for_each_field(sr.bytes(), [&](int df, int dw, WireReader& dr) {
                if (df == 1 && dw == 0) {
                  value = static_cast<std::int64_t>(dr.varint());
                } else {
                  dr.skip(dw);
                }
              });
              vi.dims.push_back(value > 0 ? value : -1);
            });
          } else {
            rr.skip(w);
          }
        });
      });
    } else {
      r.skip(wire);
    }
  });
  return vi;
}

}  // namespace detail

/// Graph inputs (minus initializers) and outputs of a serialized ModelProto.
inline GraphIo read_graph_io(std::string_view model_bytes) {
  std::string_view graph;
  detail::for_each_field(model_bytes, [&](int field, int wire, detail::WireReader& r) {
    if (field == 7 && wire == 2) {
      graph = r.bytes();
    } else {
      r.skip(wire);
    }
  });
  if (graph.empty()) throw ParseError("onnx", "model has no graph");

  GraphIo io;
  std::set<std::string> initializers;
  detail::for_each_field(graph, [&](int field, int wire, detail::WireReader& r) {
    if (field == 11 && wire == 2) {
      io.inputs.push_back(detail::parse_value_info(r.bytes()));
    } else if (field == 12 && wire == 2) {
      io.outputs.push_back(detail::parse_value_info(r.bytes()));
    } else if (field == 5 && wire == 2) {
      detail::for_each_field(r.bytes(), [&](int tf, int tw, detail::WireReader& tr) {
        if (tf == 8 && tw == 2) {
          initializers.insert(std::string(tr.bytes()));
        } else {
          tr.skip(tw);
        }
      });
    } else {
      r.skip(wire);
    }
  });
  std::erase_if(io.inputs, [&](const ValueInfo& v) { return initializers.contains(v.name); });
  if (io.inputs.empty() || io.outputs.empty()) throw ParseError("onnx", "graph declares no inputs or outputs");
  return io;
}

}  // namespace maskver::onnx
