#pragma once

// Minimal 8-bit PNG read/write via libpng. Images are interleaved
// row-major (HWC for RGB).

#include <csetjmp>
#include <cstdint>
#include <cstdio>
#include <memory>
#include <string>
#include <vector>

#include <png.h>

#include "astseg/common.hpp"

namespace astseg {

struct PngImage {
  int64_t w = 0, h = 0, channels = 0;
  std::vector<uint8_t> data;  // h * w * channels
};

namespace detail {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

inline void write_png_impl(const std::string& path, int64_t w, int64_t h,
                           int channels, const std::vector<uint8_t>& data) {
  check_io(static_cast<int64_t>(data.size()) == w * h * channels,
           "png write: data size does not match dimensions");
  FilePtr fp(std::fopen(path.c_str(), "wb"));
  check_io(fp != nullptr, "cannot open '" + path + "' for writing");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  check_io(png != nullptr, "png_create_write_struct failed");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    throw io_error("png_create_info_struct failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw io_error("libpng error while writing '" + path + "'");
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(w), static_cast<png_uint_32>(h), 8,
               channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  std::vector<png_bytep> rows(static_cast<size_t>(h));
  for (int64_t y = 0; y < h; ++y)
    rows[static_cast<size_t>(y)] =
        const_cast<png_bytep>(data.data() + y * w * channels);
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

}  // namespace detail

inline void write_png_rgb8(const std::string& path, int64_t w, int64_t h,
                           const std::vector<uint8_t>& rgb) {
  detail::write_png_impl(path, w, h, 3, rgb);
}

inline void write_png_gray8(const std::string& path, int64_t w, int64_t h,
                            const std::vector<uint8_t>& gray) {
  detail::write_png_impl(path, w, h, 1, gray);
}

// Reads an 8-bit PNG; gray and RGB come back as-is, palette expands to RGB,
// alpha channels are stripped, 16-bit depth narrows to 8.
inline PngImage read_png(const std::string& path) {
  detail::FilePtr fp(std::fopen(path.c_str(), "rb"));
  check_io(fp != nullptr, "cannot open '" + path + "'");
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  check_io(png != nullptr, "png_create_read_struct failed");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    throw io_error("png_create_info_struct failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw io_error("libpng error while reading '" + path + "'");
  }
  png_init_io(png, fp.get());
  png_read_info(png, info);

  const png_byte color_type = png_get_color_type(png, info);
  if (png_get_bit_depth(png, info) == 16) png_set_strip_16(png);
  if (color_type == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color_type == PNG_COLOR_TYPE_GRAY && png_get_bit_depth(png, info) < 8)
    png_set_expand_gray_1_2_4_to_8(png);
  if (color_type & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  png_read_update_info(png, info);

  PngImage img;
  img.w = png_get_image_width(png, info);
  img.h = png_get_image_height(png, info);
  img.channels = png_get_channels(png, info);
  check_io(img.channels == 1 || img.channels == 3,
           "unsupported channel count in '" + path + "'");
  img.data.resize(static_cast<size_t>(img.h * img.w * img.channels));
  std::vector<png_bytep> rows(static_cast<size_t>(img.h));
  for (int64_t y = 0; y < img.h; ++y)
    rows[static_cast<size_t>(y)] = img.data.data() + y * img.w * img.channels;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return img;
}

}  // namespace astseg
