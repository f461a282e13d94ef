#pragma once

#include <string>

#include "llfdisc/tensor.hpp"

namespace llf {

// Reads an 8-bit PNG into a (1,3,H,W) tensor scaled to [0,1] by value/255.
// Grayscale and palette files are expanded to RGB; alpha is dropped.
Tensor read_png(const std::string& path);

// Writes a (B,3,H,W) tensor (first batch item only) as 8-bit RGB PNG.
// Values are clamped to [0,1] and quantized as round-half-even of 255*v.
void write_png(const Tensor& image, const std::string& path);

}  // namespace llf
