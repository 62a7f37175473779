#include "gabn/erasure.hpp"

#include <algorithm>
#include <numeric>
#include <string>

namespace gabn {

void MaskConfig::validate(std::size_t image_height, std::size_t image_width) const {
  if (h_mask < 1 || h_mask > image_height) {
    throw ConfigError("mask: h_mask must lie in [1, " + std::to_string(image_height) + "]");
  }
  if (w_mask < 1 || w_mask > image_width) {
    throw ConfigError("mask: w_mask must lie in [1, " + std::to_string(image_width) + "]");
  }
  if (fill_value.empty()) throw ConfigError("mask: fill_value needs at least one value");
}

MaskConfig MaskConfig::defaults_for(std::size_t image_side) {
  MaskConfig cfg;
  cfg.h_mask = cfg.w_mask = std::max<std::size_t>(1, (image_side + 6) / 7);
  return cfg;
}

template <typename T>
std::vector<Pixel> top_n_centers(const GamMap<T>& gam, std::size_t n) {
  const auto& v = gam.values;
  if (n > v.size()) {
    throw DomainError("top_n_centers: asked for " + std::to_string(n) + " of " +
                      std::to_string(v.size()) + " pixels");
  }
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n), idx.end(),
                    [&](std::size_t a, std::size_t b) {
                      return v[a] > v[b] || (v[a] == v[b] && a < b);
                    });
  std::vector<Pixel> out;
  out.reserve(n);
  const auto w = gam.width();
  for (std::size_t i = 0; i < n; ++i) out.push_back({idx[i] / w, idx[i] % w});
  return out;
}

std::vector<Pixel> random_centers(std::size_t height, std::size_t width, std::size_t n,
                                  Rng& rng) {
  std::vector<Pixel> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto r = static_cast<std::size_t>(rng.uniform_int(0, std::int64_t(height) - 1));
    const auto c = static_cast<std::size_t>(rng.uniform_int(0, std::int64_t(width) - 1));
    out.push_back({r, c});
  }
  return out;
}

MaskPlacement place_mask(Pixel center, std::size_t h, std::size_t w, std::size_t image_height,
                         std::size_t image_width) {
  MaskPlacement m{center, h, w, 0, 0, 0, 0};
  const auto r = static_cast<std::ptrdiff_t>(center.row);
  const auto c = static_cast<std::ptrdiff_t>(center.col);
  const auto up = static_cast<std::ptrdiff_t>(h / 2);
  const auto down = static_cast<std::ptrdiff_t>(h - 1 - h / 2);
  const auto lft = static_cast<std::ptrdiff_t>(w / 2);
  const auto rgt = static_cast<std::ptrdiff_t>(w - 1 - w / 2);
  m.top = static_cast<std::size_t>(std::max<std::ptrdiff_t>(0, r - up));
  m.bottom = static_cast<std::size_t>(
      std::min<std::ptrdiff_t>(static_cast<std::ptrdiff_t>(image_height), r + down + 1));
  m.left = static_cast<std::size_t>(std::max<std::ptrdiff_t>(0, c - lft));
  m.right = static_cast<std::size_t>(
      std::min<std::ptrdiff_t>(static_cast<std::ptrdiff_t>(image_width), c + rgt + 1));
  return m;
}

template <typename T>
ErasureResult<T> apply_masks(const Tensor<T>& image, std::span<const Pixel> centers,
                             const MaskConfig& cfg, Rng& rng) {
  if (image.rank() != 3) {
    throw ShapeError("apply_masks: image must be [C, H, W], got " + shape_str(image.shape()));
  }
  const auto ch = image.dim(0), h = image.dim(1), w = image.dim(2);
  cfg.validate(h, w);
  if (cfg.fill_value.size() != 1 && cfg.fill_value.size() != ch) {
    throw ConfigError("mask: fill_value has " + std::to_string(cfg.fill_value.size()) +
                      " entries for " + std::to_string(ch) + " channels");
  }
  ErasureResult<T> out{image, {}};
  out.placements.reserve(centers.size());
  for (const auto& center : centers) {
    if (center.row >= h || center.col >= w) {
      throw DomainError("apply_masks: center (" + std::to_string(center.row) + "," +
                        std::to_string(center.col) + ") outside the image");
    }
    const auto ht = static_cast<std::size_t>(rng.uniform_int(1, std::int64_t(cfg.h_mask)));
    const auto wt = static_cast<std::size_t>(rng.uniform_int(1, std::int64_t(cfg.w_mask)));
    const auto m = place_mask(center, ht, wt, h, w);
    for (std::size_t c = 0; c < ch; ++c) {
      const T fill = static_cast<T>(cfg.fill_value.size() == 1 ? cfg.fill_value[0]
                                                               : cfg.fill_value[c]);
      for (std::size_t y = m.top; y < m.bottom; ++y) {
        for (std::size_t x = m.left; x < m.right; ++x) out.image[(c * h + y) * w + x] = fill;
      }
    }
    out.placements.push_back(m);
  }
  return out;
}

template std::vector<Pixel> top_n_centers<float>(const GamMap<float>&, std::size_t);
template std::vector<Pixel> top_n_centers<double>(const GamMap<double>&, std::size_t);
template ErasureResult<float> apply_masks<float>(const Tensor<float>&, std::span<const Pixel>,
                                                 const MaskConfig&, Rng&);
template ErasureResult<double> apply_masks<double>(const Tensor<double>&, std::span<const Pixel>,
                                                   const MaskConfig&, Rng&);

}  // namespace gabn
