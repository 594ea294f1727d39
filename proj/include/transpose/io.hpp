#pragma once

#include <string>

#include "transpose/tensor.hpp"

namespace transpose {

// P2 (ASCII) PGM, maxval 65535, values scaled linearly from [0, max(map)].
void write_pgm_map(const std::string& path, const double* data, int height, int width);

// L x L matrix as P2 PGM with each row scaled from [0, row max]; the
// convention for attention matrix exports.
void write_pgm_rows_scaled(const std::string& path, const Tensor& matrix);

// [3 x H x W] image with values in [0,1] as binary P6 PPM, maxval 255.
void write_ppm(const std::string& path, const Tensor& image);
Tensor read_ppm(const std::string& path);

}  // namespace transpose
