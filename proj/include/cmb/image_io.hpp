#pragma once

#include <string>

#include "cmb/tensor.hpp"

namespace cmb {

// 8-bit binary netpbm I/O. Images load as [3,H,W] (PPM) or [1,H,W] (PGM)
// scaled to [0,1]; writers quantize with round(v*255) clamped to [0,255].
Tensor load_image(const std::string& path);
void save_ppm(const std::string& path, const Tensor& image);  // [3,H,W]
void save_pgm(const std::string& path, const Tensor& map);    // [1,H,W] or [H,W]

} // namespace cmb
