#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ukf/common.hpp"

namespace ukf {

// 8-bit RGB raster, row-major, interleaved channels.
struct ImageU8 {
  int width = 0;
  int height = 0;
  std::vector<uint8_t> rgb;  // 3 * width * height

  bool valid() const {
    return width >= 1 && height >= 1 &&
           rgb.size() == static_cast<size_t>(3) * width * height;
  }
};

// Binary mask raster; values are {0 background, 1 coral}.
struct Mask {
  int width = 0;
  int height = 0;
  std::vector<uint8_t> v;  // width * height

  bool valid() const {
    return width >= 1 && height >= 1 && v.size() == static_cast<size_t>(width) * height;
  }
};

// Binary PPM (P6). Lossless, 8-bit RGB.
void write_ppm(const std::string& path, const ImageU8& img);
ImageU8 read_ppm(const std::string& path);

// Binary PGM (P5). Masks are stored with {0, 255} and mapped to {0, 1} on load.
void write_mask_pgm(const std::string& path, const Mask& mask);
Mask read_mask_pgm(const std::string& path);

}  // namespace ukf
