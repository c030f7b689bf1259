#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace plug {

// Interleaved 8-bit image, c in {1,3}.
struct Image8 {
  int h = 0, w = 0, c = 0;
  std::vector<uint8_t> v;

  Image8() = default;
  Image8(int h_, int w_, int c_) : h(h_), w(w_), c(c_), v((size_t)h_ * w_ * c_, 0) {}
  uint8_t& at(int y, int x, int ch = 0) { return v[((size_t)y * w + x) * c + ch]; }
  uint8_t at(int y, int x, int ch = 0) const { return v[((size_t)y * w + x) * c + ch]; }
  bool operator==(const Image8&) const = default;
};

void write_png(const std::string& path, const Image8& img);
Image8 read_png(const std::string& path);

}  // namespace plug
