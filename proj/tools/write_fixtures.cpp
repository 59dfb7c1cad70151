// Regenerates the frozen tiny-embedder weights file and golden embedding.
// Usage: maskver_fixtures <models_dir> <golden_file>

#include <cstdio>
#include <fstream>
#include <iostream>

#include "maskver/refnet.hpp"

namespace {

maskver::Tensor golden_chip() {
  using maskver::refnet::kChipSize;
  maskver::Tensor t({3, kChipSize, kChipSize});
  auto& d = t.data();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] = static_cast<float>((i * 37 + i / 64 * 11) % 17) / 16.0f;
  return t;
}

}  // namespace

int main(int argc, char** argv) {
  if (argc != 3) {
    std::cerr << "usage: maskver_fixtures <models_dir> <golden_file>\n";
    return 2;
  }
  using maskver::refnet::TinyEmbedder;
  maskver::refnet::write_weights(std::string(argv[1]) + "/tiny-embedder.bin", TinyEmbedder::seeded_weights());
  const auto e = TinyEmbedder::seeded().embed(golden_chip());
  std::ofstream out(argv[2]);
  char buf[64];
  for (float v : e.values()) {
    std::snprintf(buf, sizeof buf, "%a\n", static_cast<double>(v));
    out << buf;
  }
  return 0;
}
