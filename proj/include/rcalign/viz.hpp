#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "rcalign/tensor.hpp"

// Text and image exports of [T x N] alignment matrices.
namespace rcalign::viz {

// One row per decoder step, comma-separated, 6 decimals fixed.
std::string matrix_csv(const Tensor& m);

// Numeric CSV -> [rows x cols]. Ragged rows or non-numeric cells raise
// ValueError naming the 1-based row.
Tensor parse_matrix_csv(std::string_view text);

// P5, width N, height T, pixel = round(255 * clamp(a, 0, 1)).
std::string to_pgm(const Tensor& alignment);
// P6 heat map interpolating blue (0) to red (1).
std::string to_ppm(const Tensor& alignment);

struct Image {
  std::size_t width = 0;
  std::size_t height = 0;
  std::size_t channels = 1;
  std::vector<std::uint8_t> pixels;  // row-major, interleaved channels

  std::uint8_t at(std::size_t row, std::size_t col, std::size_t channel = 0) const {
    return pixels[(row * width + col) * channels + channel];
  }
};

// Reads binary P5/P6 with maxval 255; anything else raises FormatError.
Image parse_pnm(std::string_view bytes);

}  // namespace rcalign::viz
