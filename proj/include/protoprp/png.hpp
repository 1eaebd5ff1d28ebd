#pragma once

#include "protoprp/tensor.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace protoprp {

// Minimal RGB8 PNG encoder (truecolor, 8-bit, filter 0, zlib-compressed).
void write_png_rgb(const std::string& path, int width, int height,
                   const std::vector<std::uint8_t>& rgb);

// Renders a [C,H,W] image with values in [0,1]; q = lround(255 * clamp(v, 0, 1)).
void write_image_png(const std::string& path, const Tensor& image);

// Renders a rank-2 relevance map with the diverging colormap.
// Quantization (bit-exact): let vmax = max |value| over the map.
//   vmax == 0          -> every pixel is white (255,255,255)
//   q = lround(255 * |v| / vmax)
//   v >= 0 -> (255, 255-q, 255-q)   zero=white shading to red
//   v <  0 -> (255-q, 255-q, 255)   shading to blue
void write_relevance_png(const std::string& path, const Tensor& map2d);

// The exact per-pixel rule above, exposed for tests.
void relevance_rgb(float value, float vmax, std::uint8_t out[3]);

} // namespace protoprp
