#pragma once

// Netpbm image files: binary PGM (P5) and PPM (P6), 8 bits per sample.

#include <cstdint>
#include <filesystem>
#include <vector>

namespace gabn {

struct GrayImage {
  std::size_t height = 0, width = 0;
  std::vector<std::uint8_t> pixels;  // row-major
};

struct RgbImage {
  std::size_t height = 0, width = 0;
  std::vector<std::uint8_t> pixels;  // row-major, interleaved RGB
};

void write_pgm(const std::filesystem::path& path, const GrayImage& img);
void write_ppm(const std::filesystem::path& path, const RgbImage& img);

GrayImage read_pgm(const std::filesystem::path& path);

// Reads P6 or P5 (gray replicated into three channels).
RgbImage read_rgb(const std::filesystem::path& path);

// Bilinear resampling with pixel-center alignment.
RgbImage resize_bilinear(const RgbImage& img, std::size_t height, std::size_t width);

bool has_image_extension(const std::filesystem::path& path);

}  // namespace gabn
