#pragma once

// GAM-guided erasure: rectangles of random size centered on the most
// attended pixels are overwritten with a fill value.

#include <cstddef>
#include <span>
#include <vector>

#include "gabn/gam.hpp"
#include "gabn/random.hpp"

namespace gabn {

struct MaskConfig {
  std::size_t n_mask = 3;
  std::size_t h_mask = 10;  // max rectangle height, pixels
  std::size_t w_mask = 10;  // max rectangle width, pixels
  // One value per channel, or a single value for every channel. 0 is the
  // normalized value of pixel 127.5.
  std::vector<double> fill_value{0.0};

  void validate(std::size_t image_height, std::size_t image_width) const;

  // n_mask = 3, h_mask = w_mask = ceil(side / 7).
  static MaskConfig defaults_for(std::size_t image_side);
};

struct Pixel {
  std::size_t row = 0, col = 0;
  bool operator==(const Pixel&) const = default;
};

struct MaskPlacement {
  Pixel center;
  std::size_t height = 0, width = 0;  // sampled H_t, W_t
  // Clipped rectangle, half-open: rows [top, bottom), cols [left, right).
  std::size_t top = 0, bottom = 0, left = 0, right = 0;
};

// The n highest-valued pixels in descending value order; equal values are
// ordered row-major.
template <typename T>
std::vector<Pixel> top_n_centers(const GamMap<T>& gam, std::size_t n);

// n pixel coordinates drawn uniformly (with replacement).
std::vector<Pixel> random_centers(std::size_t height, std::size_t width, std::size_t n, Rng& rng);

// Rectangle of height h, width w centered at `center`: floor(h/2) rows above,
// h - 1 - floor(h/2) below (same for columns), clipped to the image.
MaskPlacement place_mask(Pixel center, std::size_t h, std::size_t w, std::size_t image_height,
                         std::size_t image_width);

template <typename T>
struct ErasureResult {
  Tensor<T> image;
  std::vector<MaskPlacement> placements;
};

// Erases one rectangle per center from a [C, H, W] image. For every center,
// H_t is drawn from [1, h_mask] and then W_t from [1, w_mask]. The input
// image is not modified.
template <typename T>
ErasureResult<T> apply_masks(const Tensor<T>& image, std::span<const Pixel> centers,
                             const MaskConfig& cfg, Rng& rng);

}  // namespace gabn
