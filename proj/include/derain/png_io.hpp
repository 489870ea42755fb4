#pragma once
#include <png.h>

#include <algorithm>
#include <cmath>
#include <csetjmp>
#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include "derain/image.hpp"

// PNG input/output: 8-bit RGB for images, 16-bit grayscale for transmission
// maps. Values quantize as round(v * 255) / round(v * 65535); reading divides
// back, so a write/read round trip is exact at quantized resolution.
// Writes go to "<path>.partial" and are renamed into place, so an interrupted
// write never leaves a truncated file under the final name.

namespace derain {

namespace detail {

struct PngFile {
  std::FILE* fp = nullptr;
  ~PngFile() {
    if (fp) std::fclose(fp);
  }
};

struct PngReader {
  png_structp png = nullptr;
  png_infop info = nullptr;
  ~PngReader() {
    if (png) png_destroy_read_struct(&png, info ? &info : nullptr, nullptr);
  }
};

struct PngWriter {
  png_structp png = nullptr;
  png_infop info = nullptr;
  ~PngWriter() {
    if (png) png_destroy_write_struct(&png, info ? &info : nullptr);
  }
};

inline uint8_t quant8(float v) {
  return uint8_t(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
}
inline uint16_t quant16(float v) {
  return uint16_t(std::lround(std::clamp(v, 0.0f, 1.0f) * 65535.0f));
}

inline void finalize_partial(const std::string& partial, const std::string& path) {
  std::error_code ec;
  std::filesystem::rename(partial, path, ec);
  if (ec) throw IoError("png: cannot finalize '" + path + "': " + ec.message());
}

}  // namespace detail

inline void write_png_rgb8(const std::string& path, const Image& im) {
  const std::string partial = path + ".partial";
  detail::PngFile file;
  file.fp = std::fopen(partial.c_str(), "wb");
  if (!file.fp) throw IoError("png: cannot open '" + partial + "' for writing");

  detail::PngWriter w;
  w.png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!w.png) throw IoError("png: writer allocation failed");
  w.info = png_create_info_struct(w.png);
  if (!w.info) throw IoError("png: writer allocation failed");

  std::vector<uint8_t> rows(size_t(im.height) * im.width * 3);
  std::vector<png_bytep> row_ptrs(size_t(im.height));
  for (size_t i = 0; i < rows.size(); ++i) rows[i] = detail::quant8(im.data[i]);
  for (int y = 0; y < im.height; ++y)
    row_ptrs[size_t(y)] = rows.data() + size_t(y) * im.width * 3;

  if (setjmp(png_jmpbuf(w.png))) throw IoError("png: write failed for '" + path + "'");
  png_init_io(w.png, file.fp);
  png_set_IHDR(w.png, w.info, png_uint_32(im.width), png_uint_32(im.height), 8,
               PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(w.png, w.info);
  png_write_image(w.png, row_ptrs.data());
  png_write_end(w.png, nullptr);
  std::fclose(file.fp);
  file.fp = nullptr;
  detail::finalize_partial(partial, path);
}

inline Image read_png_rgb8(const std::string& path) {
  detail::PngFile file;
  file.fp = std::fopen(path.c_str(), "rb");
  if (!file.fp) throw IoError("png: cannot open '" + path + "'");

  detail::PngReader r;
  r.png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!r.png) throw IoError("png: reader allocation failed");
  r.info = png_create_info_struct(r.png);
  if (!r.info) throw IoError("png: reader allocation failed");

  std::vector<uint8_t> rows;
  std::vector<png_bytep> row_ptrs;
  png_uint_32 width = 0, height = 0;

  if (setjmp(png_jmpbuf(r.png)))
    throw IoError("png: '" + path + "' is not a readable PNG image");
  png_init_io(r.png, file.fp);
  png_read_info(r.png, r.info);
  width = png_get_image_width(r.png, r.info);
  height = png_get_image_height(r.png, r.info);
  const int depth = png_get_bit_depth(r.png, r.info);
  const int color = png_get_color_type(r.png, r.info);

  // Normalize whatever arrived to 8-bit RGB.
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(r.png);
  if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(r.png);
  if (png_get_valid(r.png, r.info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(r.png);
  if (depth == 16) png_set_strip_16(r.png);
  if (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA)
    png_set_gray_to_rgb(r.png);
  png_set_strip_alpha(r.png);
  png_read_update_info(r.png, r.info);

  if (png_get_rowbytes(r.png, r.info) != size_t(width) * 3)
    throw IoError("png: '" + path + "' did not normalize to RGB");
  rows.resize(size_t(height) * width * 3);
  row_ptrs.resize(size_t(height));
  for (png_uint_32 y = 0; y < height; ++y)
    row_ptrs[y] = rows.data() + size_t(y) * width * 3;
  png_read_image(r.png, row_ptrs.data());
  png_read_end(r.png, nullptr);

  Image im(static_cast<int>(height), static_cast<int>(width));
  for (size_t i = 0; i < rows.size(); ++i) im.data[i] = float(rows[i]) / 255.0f;
  return im;
}

inline void write_png_gray16(const std::string& path, const TransmissionMap& t) {
  const std::string partial = path + ".partial";
  detail::PngFile file;
  file.fp = std::fopen(partial.c_str(), "wb");
  if (!file.fp) throw IoError("png: cannot open '" + partial + "' for writing");

  detail::PngWriter w;
  w.png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!w.png) throw IoError("png: writer allocation failed");
  w.info = png_create_info_struct(w.png);
  if (!w.info) throw IoError("png: writer allocation failed");

  // PNG 16-bit samples are big-endian; assemble bytes explicitly.
  std::vector<uint8_t> rows(size_t(t.height) * t.width * 2);
  std::vector<png_bytep> row_ptrs(size_t(t.height));
  for (size_t i = 0; i < t.data.size(); ++i) {
    const uint16_t q = detail::quant16(t.data[i]);
    rows[i * 2] = uint8_t(q >> 8);
    rows[i * 2 + 1] = uint8_t(q & 0xFF);
  }
  for (int y = 0; y < t.height; ++y)
    row_ptrs[size_t(y)] = rows.data() + size_t(y) * t.width * 2;

  if (setjmp(png_jmpbuf(w.png))) throw IoError("png: write failed for '" + path + "'");
  png_init_io(w.png, file.fp);
  png_set_IHDR(w.png, w.info, png_uint_32(t.width), png_uint_32(t.height), 16,
               PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(w.png, w.info);
  png_write_image(w.png, row_ptrs.data());
  png_write_end(w.png, nullptr);
  std::fclose(file.fp);
  file.fp = nullptr;
  detail::finalize_partial(partial, path);
}

inline TransmissionMap read_png_gray16(const std::string& path) {
  detail::PngFile file;
  file.fp = std::fopen(path.c_str(), "rb");
  if (!file.fp) throw IoError("png: cannot open '" + path + "'");

  detail::PngReader r;
  r.png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!r.png) throw IoError("png: reader allocation failed");
  r.info = png_create_info_struct(r.png);
  if (!r.info) throw IoError("png: reader allocation failed");

  std::vector<uint8_t> rows;
  std::vector<png_bytep> row_ptrs;
  png_uint_32 width = 0, height = 0;

  if (setjmp(png_jmpbuf(r.png)))
    throw IoError("png: '" + path + "' is not a readable PNG image");
  png_init_io(r.png, file.fp);
  png_read_info(r.png, r.info);
  width = png_get_image_width(r.png, r.info);
  height = png_get_image_height(r.png, r.info);
  if (png_get_bit_depth(r.png, r.info) != 16 ||
      png_get_color_type(r.png, r.info) != PNG_COLOR_TYPE_GRAY)
    throw IoError("png: '" + path + "' is not 16-bit grayscale");
  png_read_update_info(r.png, r.info);

  rows.resize(size_t(height) * width * 2);
  row_ptrs.resize(size_t(height));
  for (png_uint_32 y = 0; y < height; ++y)
    row_ptrs[y] = rows.data() + size_t(y) * width * 2;
  png_read_image(r.png, row_ptrs.data());
  png_read_end(r.png, nullptr);

  TransmissionMap t(static_cast<int>(height), static_cast<int>(width));
  for (size_t i = 0; i < t.data.size(); ++i) {
    const uint16_t q = uint16_t((rows[i * 2] << 8) | rows[i * 2 + 1]);
    t.data[i] = float(q) / 65535.0f;
  }
  return t;
}

}  // namespace derain
