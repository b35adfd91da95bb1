#pragma once

#include <string>

#include "inrseg/tensor.hpp"

namespace inrseg {

// 8-bit PNGs. Images load as {H,W,3} in [0,1] (gray/palette promoted to RGB,
// alpha stripped); masks load from single-channel files binarized at >127.
Tensor load_png_rgb(const std::string& path);
Tensor load_png_mask(const std::string& path);

// Values are clamped to [0,1] and quantized to 8 bits on save.
void save_png_rgb(const std::string& path, const Tensor& image);
void save_png_gray(const std::string& path, const Tensor& image);
// Binary {H,W} mask saved as 0/255 grayscale.
void save_png_mask(const std::string& path, const Tensor& mask);

}  // namespace inrseg
