#include "inrseg/png_io.hpp"

#include <cmath>
#include <cstdio>
#include <memory>
#include <vector>

#include <png.h>

#include "inrseg/errors.hpp"

namespace inrseg {

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

// Decodes any 8/16-bit PNG to packed 8-bit RGB rows.
struct DecodedPng {
  Index h = 0;
  Index w = 0;
  std::vector<unsigned char> rgb;  // h*w*3
};

DecodedPng decode_rgb8(const std::string& path) {
  FilePtr f(std::fopen(path.c_str(), "rb"));
  if (!f) raise_io("cannot open '" + path + "' for reading");

  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) raise_io("libpng read init failed");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    raise_io("libpng info init failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    raise_io("failed to decode PNG '" + path + "'");
  }

  png_init_io(png, f.get());
  png_read_info(png, info);

  png_set_strip_16(png);
  png_set_packing(png);
  png_set_strip_alpha(png);
  const png_byte color = png_get_color_type(png, info);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA) {
    if (png_get_bit_depth(png, info) < 8) png_set_expand_gray_1_2_4_to_8(png);
    png_set_gray_to_rgb(png);
  }
  png_read_update_info(png, info);

  DecodedPng out;
  out.h = static_cast<Index>(png_get_image_height(png, info));
  out.w = static_cast<Index>(png_get_image_width(png, info));
  const std::size_t rowbytes = png_get_rowbytes(png, info);
  if (rowbytes != static_cast<std::size_t>(out.w) * 3) {
    png_destroy_read_struct(&png, &info, nullptr);
    raise_io("unsupported PNG layout in '" + path + "'");
  }
  out.rgb.resize(static_cast<std::size_t>(out.h) * rowbytes);
  std::vector<png_bytep> rows(static_cast<std::size_t>(out.h));
  for (Index r = 0; r < out.h; ++r) {
    rows[static_cast<std::size_t>(r)] = out.rgb.data() + static_cast<std::size_t>(r) * rowbytes;
  }
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return out;
}

void encode_png(const std::string& path, Index h, Index w, int channels,
                const std::vector<unsigned char>& bytes) {
  FilePtr f(std::fopen(path.c_str(), "wb"));
  if (!f) raise_io("cannot open '" + path + "' for writing");

  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) raise_io("libpng write init failed");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    raise_io("libpng info init failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    raise_io("failed to encode PNG '" + path + "'");
  }

  png_init_io(png, f.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(w), static_cast<png_uint_32>(h), 8,
               channels == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  std::vector<png_bytep> rows(static_cast<std::size_t>(h));
  const std::size_t rowbytes = static_cast<std::size_t>(w) * static_cast<std::size_t>(channels);
  for (Index r = 0; r < h; ++r) {
    rows[static_cast<std::size_t>(r)] =
        const_cast<png_bytep>(bytes.data() + static_cast<std::size_t>(r) * rowbytes);
  }
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

unsigned char quantize(Scalar v) {
  const Scalar c = std::min(Scalar(1), std::max(Scalar(0), v));
  return static_cast<unsigned char>(std::lround(c * 255.0));
}

}  // namespace

Tensor load_png_rgb(const std::string& path) {
  const DecodedPng d = decode_rgb8(path);
  Tensor out({d.h, d.w, 3});
  for (Index i = 0; i < d.h * d.w * 3; ++i) {
    out.data()[i] = static_cast<Scalar>(d.rgb[static_cast<std::size_t>(i)]) / 255.0;
  }
  return out;
}

Tensor load_png_mask(const std::string& path) {
  const DecodedPng d = decode_rgb8(path);
  Tensor out({d.h, d.w});
  for (Index i = 0; i < d.h * d.w; ++i) {
    const unsigned char v = d.rgb[static_cast<std::size_t>(i) * 3];
    out.data()[i] = v > 127 ? 1.0 : 0.0;
  }
  return out;
}

void save_png_rgb(const std::string& path, const Tensor& image) {
  const Shape& sh = image.shape();
  if (sh.size() != 3 || sh[2] != 3) {
    raise_invalid_shape("save_png_rgb expects {H,W,3}, got " + shape_str(sh));
  }
  std::vector<unsigned char> bytes(static_cast<std::size_t>(sh[0] * sh[1] * 3));
  for (Index i = 0; i < sh[0] * sh[1] * 3; ++i) {
    bytes[static_cast<std::size_t>(i)] = quantize(image.data()[i]);
  }
  encode_png(path, sh[0], sh[1], 3, bytes);
}

void save_png_gray(const std::string& path, const Tensor& image) {
  const Shape& sh = image.shape();
  if (sh.size() != 2) raise_invalid_shape("save_png_gray expects {H,W}, got " + shape_str(sh));
  std::vector<unsigned char> bytes(static_cast<std::size_t>(sh[0] * sh[1]));
  for (Index i = 0; i < sh[0] * sh[1]; ++i) {
    bytes[static_cast<std::size_t>(i)] = quantize(image.data()[i]);
  }
  encode_png(path, sh[0], sh[1], 1, bytes);
}

void save_png_mask(const std::string& path, const Tensor& mask) {
  const Shape& sh = mask.shape();
  if (sh.size() != 2) raise_invalid_shape("save_png_mask expects {H,W}, got " + shape_str(sh));
  std::vector<unsigned char> bytes(static_cast<std::size_t>(sh[0] * sh[1]));
  for (Index i = 0; i < sh[0] * sh[1]; ++i) {
    const Scalar v = mask.data()[i];
    if (v != 0.0 && v != 1.0) raise_domain("mask values must be binary to save");
    bytes[static_cast<std::size_t>(i)] = v == 1.0 ? 255 : 0;
  }
  encode_png(path, sh[0], sh[1], 1, bytes);
}

}  // namespace inrseg
