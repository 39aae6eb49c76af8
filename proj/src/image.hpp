#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "common.hpp"

namespace unext {

// 8-bit raster, interleaved row-major; channels is 1 or 3
struct ImageU8 {
  int64_t width = 0;
  int64_t height = 0;
  int64_t channels = 0;
  std::vector<uint8_t> pixels;
};

// Dispatches on magic bytes.  PNG support covers 8-bit non-interlaced
// grayscale and RGB; PGM (P5) and PPM (P6) are the fallback formats.
ImageU8 read_image(const std::string& path);

void write_png_gray(const std::string& path, const uint8_t* data, int64_t width, int64_t height);

}  // namespace unext
