#pragma once

// PNG and NIfTI-1 readers/writers for slices, masks and overlays.

#include <torch/torch.h>

#include <filesystem>

namespace dtrattunet {

// 8- or 16-bit PNG as a (H, W) float32 tensor of raw sample values. Colour
// images are reduced to luminance; alpha is dropped.
torch::Tensor read_png(const std::filesystem::path& path);

// (H, W) integer or float tensor with values in [0, 255] (8 bit) or
// [0, 65535] (16 bit).
void write_png_gray(const std::filesystem::path& path, const torch::Tensor& image, int bit_depth = 8);
// (H, W, 3) uint8 tensor.
void write_png_rgb(const std::filesystem::path& path, const torch::Tensor& rgb);

// NIfTI-1 volume (.nii or .nii.gz) as a (slices, rows, cols) float32 tensor
// with the header's intensity scaling applied. The third image axis is the
// slice axis.
torch::Tensor read_nifti(const std::filesystem::path& path);
// Writes a float32 (slices, rows, cols) volume; gzip-compressed when the name ends in .gz.
void write_nifti(const std::filesystem::path& path, const torch::Tensor& volume);

}  // namespace dtrattunet
