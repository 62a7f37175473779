#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "gabn/autodiff.hpp"

namespace gabn {

struct LossConfig {
  double scale = 64.0;         // s
  double margin = 0.35;        // m, radians
  double t_confidence = 0.7;   // P_max threshold for the confidence balance loss
  std::size_t num_races = 4;

  void validate() const;
};

// Per-batch confidence record feeding the confidence balance loss.
struct BatchConfidence {
  std::vector<double> p_max;
  double threshold = 0.7;

  std::size_t n_batch() const noexcept { return p_max.size(); }
  // Samples whose P_max is below the threshold.
  std::size_t n_confidence() const noexcept;
};

// Penalty angle added to every negative-class angle. Always a plain number:
// it never carries gradient into the identity loss.
struct PenaltyK {
  double value = 0.0;
};

// Cosine arccos clamp, keeping the arccos derivative finite.
inline constexpr double kCosineClamp = 1e-7;

// s * cos(clamp(theta_ij + offset_ij, 0, pi)) with theta = arccos(clamped cosine),
// offset = `margin` on each row's label column and `penalty` elsewhere.
template <typename T>
ad::Var<T> angular_logits(ad::Var<T> cosines, std::span<const int> labels, double margin,
                          double penalty, double scale);

// Mean cross-entropy of the race classifier: -mean_i log softmax(logits_i)[y_i].
template <typename T>
ad::Var<T> discriminator_ce_loss(ad::Var<T> logits, std::span<const int> race_labels);

// Cross-entropy against the uniform race posterior, averaged over samples:
// -mean_i sum_n (1/N) log softmax(logits_i)_n. Accepts [N] or [n, N].
template <typename T>
ad::Var<T> adversarial_uniform_loss(ad::Var<T> logits);

// Fraction of the batch whose P_max reaches the threshold:
// (n_batch - n_confidence) / n_batch. Not differentiable.
double confidence_balance_loss(const BatchConfidence& batch);

// ArcFace identity loss on pre-normalized embeddings [n, d] and class
// weights [classes, d].
template <typename T>
ad::Var<T> arcface_loss(ad::Var<T> embeddings, ad::Var<T> class_weights,
                        std::span<const int> labels, const LossConfig& cfg);

// ArcFace with every negative angle shifted by K (clamped to [0, pi]).
template <typename T>
ad::Var<T> combined_loss(ad::Var<T> embeddings, ad::Var<T> class_weights,
                         std::span<const int> labels, PenaltyK k, const LossConfig& cfg);

// Shared tail of arcface_loss/combined_loss once cosines are known.
template <typename T>
ad::Var<T> margin_cross_entropy(ad::Var<T> cosines, std::span<const int> labels,
                                double margin, double penalty, double scale);

}  // namespace gabn
