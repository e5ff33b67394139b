#pragma once

#include <filesystem>

#include "maskdiff/tensor.hpp"

namespace maskdiff {

/// 8-bit binary PGM of a [1,H,W] or [H,W] image with values in [0,1]
/// (clamped, rounded to the nearest level). Masks come out as 0 and 255.
void write_pgm(const std::filesystem::path& path, const Tensor<float>& image);

/// Inverse of write_pgm; returns [1,H,W] scaled to [0,1].
Tensor<float> read_pgm(const std::filesystem::path& path);

/// Chain-space snapshot [-1,1] mapped to [0,1] for viewing.
Tensor<float> chain_to_unit(const Tensor<float>& y);

}  // namespace maskdiff
