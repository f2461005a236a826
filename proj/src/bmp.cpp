#include "ralnet/bmp.hpp"

#include <cstdlib>
#include <string>

#include "ralnet/binary_io.hpp"

namespace ralnet {

namespace {

std::uint16_t le16(const std::vector<std::uint8_t>& b, std::size_t off) {
  return static_cast<std::uint16_t>(b[off] | (b[off + 1] << 8));
}
std::uint32_t le32(const std::vector<std::uint8_t>& b, std::size_t off) {
  return static_cast<std::uint32_t>(b[off]) | (static_cast<std::uint32_t>(b[off + 1]) << 8) |
         (static_cast<std::uint32_t>(b[off + 2]) << 16) | (static_cast<std::uint32_t>(b[off + 3]) << 24);
}

std::uint8_t luma(std::uint8_t r, std::uint8_t g, std::uint8_t b) {
  return static_cast<std::uint8_t>((299u * r + 587u * g + 114u * b + 500u) / 1000u);
}

}  // namespace

GrayImage decode_bmp(const std::vector<std::uint8_t>& b) {
  if (b.size() < 54 || b[0] != 'B' || b[1] != 'M') throw FormatError("bmp: missing BM header");
  const std::uint32_t data_off = le32(b, 10);
  const std::uint32_t header_size = le32(b, 14);
  if (header_size < 40) throw FormatError("bmp: unsupported header size " + std::to_string(header_size));
  const auto width = static_cast<std::int32_t>(le32(b, 18));
  const auto raw_height = static_cast<std::int32_t>(le32(b, 22));
  const std::uint16_t bpp = le16(b, 28);
  const std::uint32_t compression = le32(b, 30);
  std::uint32_t colors = le32(b, 46);
  if (compression != 0 && !(compression == 3 && bpp == 32)) {
    throw FormatError("bmp: compressed images are not supported");
  }
  if (width <= 0 || raw_height == 0) throw FormatError("bmp: invalid dimensions");
  const bool top_down = raw_height < 0;
  const int height = std::abs(raw_height);
  if (bpp != 8 && bpp != 24 && bpp != 32) throw FormatError("bmp: unsupported bit depth " + std::to_string(bpp));

  std::vector<std::uint8_t> palette(256);
  if (bpp == 8) {
    if (colors == 0) colors = 256;
    const std::size_t pal_off = 14 + header_size;
    if (colors > 256 || pal_off + 4 * colors > b.size()) throw FormatError("bmp: truncated palette");
    for (std::uint32_t i = 0; i < colors; ++i) {
      const std::size_t o = pal_off + 4 * i;
      palette[i] = luma(b[o + 2], b[o + 1], b[o]);
    }
  }
  const std::size_t bytes_pp = bpp / 8;
  const std::size_t stride = (static_cast<std::size_t>(width) * bytes_pp + 3) & ~std::size_t{3};
  if (data_off + stride * height > b.size()) throw FormatError("bmp: truncated pixel data");

  GrayImage img;
  img.width = width;
  img.height = height;
  img.pixels.resize(static_cast<std::size_t>(width) * height);
  for (int y = 0; y < height; ++y) {
    const int src_row = top_down ? y : height - 1 - y;
    const std::uint8_t* row = b.data() + data_off + stride * src_row;
    std::uint8_t* dst = img.pixels.data() + static_cast<std::size_t>(y) * width;
    for (int x = 0; x < width; ++x) {
      if (bpp == 8) {
        dst[x] = palette[row[x]];
      } else {
        const std::uint8_t* p = row + x * bytes_pp;
        dst[x] = luma(p[2], p[1], p[0]);
      }
    }
  }
  return img;
}

GrayImage read_bmp(const std::filesystem::path& path) {
  try {
    return decode_bmp(read_file_bytes(path));
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

void write_bmp(const std::filesystem::path& path, const GrayImage& image) {
  const std::size_t stride = (static_cast<std::size_t>(image.width) + 3) & ~std::size_t{3};
  const std::uint32_t data_off = 14 + 40 + 256 * 4;
  const std::uint32_t file_size = data_off + static_cast<std::uint32_t>(stride * image.height);
  std::vector<std::uint8_t> b;
  auto put16 = [&](std::uint16_t v) {
    b.push_back(v & 0xff);
    b.push_back(v >> 8);
  };
  auto put32 = [&](std::uint32_t v) {
    for (int i = 0; i < 4; ++i) b.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  };
  b.push_back('B');
  b.push_back('M');
  put32(file_size);
  put32(0);
  put32(data_off);
  put32(40);
  put32(static_cast<std::uint32_t>(image.width));
  put32(static_cast<std::uint32_t>(image.height));
  put16(1);
  put16(8);
  put32(0);
  put32(static_cast<std::uint32_t>(stride * image.height));
  put32(2835);
  put32(2835);
  put32(256);
  put32(0);
  for (int i = 0; i < 256; ++i) {
    b.push_back(static_cast<std::uint8_t>(i));
    b.push_back(static_cast<std::uint8_t>(i));
    b.push_back(static_cast<std::uint8_t>(i));
    b.push_back(0);
  }
  for (int y = image.height - 1; y >= 0; --y) {
    const std::uint8_t* row = image.pixels.data() + static_cast<std::size_t>(y) * image.width;
    b.insert(b.end(), row, row + image.width);
    b.insert(b.end(), stride - image.width, 0);
  }
  write_file_bytes(path, b);
}

}  // namespace ralnet
