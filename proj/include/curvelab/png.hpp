#pragma once

// Minimal 8-bit RGB PNG writer (zlib for the IDAT stream).

#include <cstdint>
#include <cstdio>
#include <stdexcept>
#include <string>
#include <vector>

#include <zlib.h>

#include "curvelab/check.hpp"

namespace curvelab {

struct RgbImage {
  int h = 0, w = 0;
  std::vector<std::uint8_t> pixels;  // h * w * 3, row-major

  RgbImage() = default;
  RgbImage(int height, int width, std::uint8_t fill = 0)
      : h(height), w(width), pixels(static_cast<std::size_t>(height) * width * 3, fill) {}

  void set(int y, int x, std::uint8_t r, std::uint8_t g, std::uint8_t b) {
    if (y < 0 || y >= h || x < 0 || x >= w) return;
    std::size_t i = (static_cast<std::size_t>(y) * w + x) * 3;
    pixels[i] = r;
    pixels[i + 1] = g;
    pixels[i + 2] = b;
  }
};

namespace detail {

inline void push_u32(std::vector<std::uint8_t>* out, std::uint32_t v) {
  out->push_back(static_cast<std::uint8_t>(v >> 24));
  out->push_back(static_cast<std::uint8_t>(v >> 16));
  out->push_back(static_cast<std::uint8_t>(v >> 8));
  out->push_back(static_cast<std::uint8_t>(v));
}

inline void push_chunk(std::vector<std::uint8_t>* out, const char type[4],
                       const std::vector<std::uint8_t>& payload) {
  push_u32(out, static_cast<std::uint32_t>(payload.size()));
  std::size_t crc_start = out->size();
  out->insert(out->end(), type, type + 4);
  out->insert(out->end(), payload.begin(), payload.end());
  std::uint32_t crc = static_cast<std::uint32_t>(
      ::crc32(0, out->data() + crc_start, static_cast<uInt>(out->size() - crc_start)));
  push_u32(out, crc);
}

}  // namespace detail

inline std::vector<std::uint8_t> encode_png(const RgbImage& img) {
  CVL_CHECK(img.h > 0 && img.w > 0, "png: empty image");
  CVL_CHECK(img.pixels.size() == static_cast<std::size_t>(img.h) * img.w * 3,
            "png: pixel buffer size mismatch");
  std::vector<std::uint8_t> raw;
  raw.reserve(static_cast<std::size_t>(img.h) * (img.w * 3 + 1));
  for (int y = 0; y < img.h; ++y) {
    raw.push_back(0);  // filter: none
    const std::uint8_t* row = img.pixels.data() + static_cast<std::size_t>(y) * img.w * 3;
    raw.insert(raw.end(), row, row + img.w * 3);
  }
  uLongf bound = ::compressBound(static_cast<uLong>(raw.size()));
  std::vector<std::uint8_t> compressed(bound);
  if (::compress2(compressed.data(), &bound, raw.data(), static_cast<uLong>(raw.size()), 6) != Z_OK)
    throw std::runtime_error("png: zlib compression failed");
  compressed.resize(bound);

  std::vector<std::uint8_t> out = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
  std::vector<std::uint8_t> ihdr;
  detail::push_u32(&ihdr, static_cast<std::uint32_t>(img.w));
  detail::push_u32(&ihdr, static_cast<std::uint32_t>(img.h));
  ihdr.push_back(8);  // bit depth
  ihdr.push_back(2);  // color type: truecolor
  ihdr.push_back(0);  // compression
  ihdr.push_back(0);  // filter
  ihdr.push_back(0);  // interlace
  detail::push_chunk(&out, "IHDR", ihdr);
  detail::push_chunk(&out, "IDAT", compressed);
  detail::push_chunk(&out, "IEND", {});
  return out;
}

inline void write_png(const std::string& path, const RgbImage& img) {
  std::vector<std::uint8_t> bytes = encode_png(img);
  std::FILE* f = std::fopen(path.c_str(), "wb");
  if (!f) throw std::runtime_error("png: cannot open " + path + " for writing");
  std::size_t written = std::fwrite(bytes.data(), 1, bytes.size(), f);
  std::fclose(f);
  if (written != bytes.size()) throw std::runtime_error("png: short write to " + path);
}

}  // namespace curvelab
