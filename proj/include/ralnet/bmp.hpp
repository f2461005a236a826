#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

namespace ralnet {

struct GrayImage {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> pixels;  // row-major, top row first

  std::uint8_t at(int x, int y) const { return pixels[static_cast<std::size_t>(y) * width + x]; }
};

// Uncompressed BMP: 8-bit palettized, 24-bit or 32-bit; colour is reduced
// to gray with integer Rec. 601 weights.
GrayImage read_bmp(const std::filesystem::path& path);
GrayImage decode_bmp(const std::vector<std::uint8_t>& bytes);

// 8-bit BMP with a gray palette.
void write_bmp(const std::filesystem::path& path, const GrayImage& image);

}  // namespace ralnet
