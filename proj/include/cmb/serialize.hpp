#pragma once

#include <string>

#include "cmb/tensor.hpp"

namespace cmb {

// CMBT tensor container, little-endian:
//   magic "CMBT" (4 bytes), u8 version = 1, u8 rank,
//   u64 dims[rank], f64 payload in row-major order.
void save_tensor(const std::string& path, const Tensor& t);
Tensor load_tensor(const std::string& path);

} // namespace cmb
