#pragma once

// Gradient attention maps: per-pixel sensitivity of the recognizer's
// probability gap T_GAM to the input image.

#include <filesystem>
#include <functional>
#include <map>
#include <span>
#include <vector>

#include "gabn/autodiff.hpp"
#include "gabn/models.hpp"

namespace gabn {

// Non-negative attention map of shape [H, W, 1].
template <typename T>
struct GamMap {
  Tensor<T> values;

  std::size_t height() const { return values.dim(0); }
  std::size_t width() const { return values.dim(1); }
  T at(std::size_t row, std::size_t col) const { return values[row * width() + col]; }
};

struct TGamValue {
  double value = 0.0;
};

// T_GAM = sum_i (P_max - P_i) / N over all N classes.
TGamValue compute_t_gam(std::span<const double> probs);

// Per-row T_GAM on the tape for probabilities [n, N] -> [n].
// Uses the identity sum_i (P_max - P_i) / N = P_max - mean_i P_i.
template <typename T>
ad::Var<T> t_gam(ad::Var<T> probs);

// Channel-wise max of |gradient| for an input gradient [N, C, H, W].
template <typename T>
std::vector<GamMap<T>> gam_from_input_gradient(const Tensor<T>& input_grad);

// Maps a batched input Var to class probabilities [N, classes].
template <typename T>
using ProbabilityFn = std::function<ad::Var<T>(ad::Var<T>)>;

// GAM of each image in [N, C, H, W] (or one [C, H, W] image) under an
// arbitrary probability model. Samples must not interact (no batch stats).
template <typename T>
std::vector<GamMap<T>> compute_gam(const ProbabilityFn<T>& model, const Tensor<T>& images);

// GAM under the recognizer's margin head. With labels the label column gets
// the angular margin, matching the training forward pass; without labels the
// margin-free head is used.
template <typename T>
std::vector<GamMap<T>> compute_gam(const Recognizer<T>& net, const Tensor<T>& images,
                                   std::span<const int> labels = {});

// Scales a map to [0, 1] by its maximum; an all-zero map is returned unchanged.
template <typename T>
GamMap<T> normalize_gam(const GamMap<T>& gam);

// Per-pixel arithmetic mean per group label.
template <typename T>
std::map<int, GamMap<T>> average_gam(std::span<const GamMap<T>> gams,
                                     std::span<const int> groups);

// Bilinear resampling with pixel-center alignment.
GamMap<float> resize_gam(const GamMap<float>& gam, std::size_t height, std::size_t width);

// Number of pixels strictly above fraction * max.
template <typename T>
std::size_t gam_support(const GamMap<T>& gam, double fraction = 0.2);

// 8-bit binary PGM (P5), max-normalized, rounded to nearest.
template <typename T>
void write_gam_pgm(const std::filesystem::path& path, const GamMap<T>& gam);

// Raw dump: u32 height, u32 width (little-endian), then float32 values row-major.
template <typename T>
void write_gam_raw(const std::filesystem::path& path, const GamMap<T>& gam);
GamMap<float> read_gam_raw(const std::filesystem::path& path);

}  // namespace gabn
