#pragma once

#include "it3d/diffmath/tensor.hpp"

#include <filesystem>

namespace it3d {

/// Linear [0, 1] -> sRGB transfer curve (IEC 61966-2-1).
double linear_to_srgb(double v);
double srgb_to_linear(double v);

/// Writes an [H, W, 3] linear image as 8-bit RGB PNG. Values are clamped to
/// [0, 1] and encoded with the sRGB curve unless `srgb` is false.
void save_png(const std::filesystem::path& path, const Tensorf& rgb, bool srgb = true);

/// Reads an 8-bit RGB(A) PNG back to an [H, W, 3] image, decoding sRGB when asked.
Tensorf load_png(const std::filesystem::path& path, bool srgb = true);

}  // namespace it3d
