#pragma once

#include "countgen/tensor.hpp"

#include <string>

namespace countgen {

// Binary 8-bit portable pixmap (P6). Values clamped to [0,1] then rounded.
void write_ppm(const std::string& path, const Tensor& image);  // [3,H,W]
Tensor read_ppm(const std::string& path);

// Binary 8-bit portable graymap (P5), same conventions.
void write_pgm(const std::string& path, const Tensor& image);  // [H,W]

}  // namespace countgen
