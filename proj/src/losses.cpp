#include "gabn/losses.hpp"

#include <cmath>
#include <numbers>
#include <string>

namespace gabn {

void LossConfig::validate() const {
  if (!(scale > 0)) throw ConfigError("loss: scale s must be > 0");
  if (!(margin >= 0 && margin < std::numbers::pi / 2)) {
    throw ConfigError("loss: margin m must lie in [0, pi/2)");
  }
  if (!(t_confidence > 0 && t_confidence < 1)) {
    throw ConfigError("loss: t_confidence must lie in (0, 1)");
  }
  if (num_races < 2) throw ConfigError("loss: num_races must be >= 2");
}

std::size_t BatchConfidence::n_confidence() const noexcept {
  std::size_t n = 0;
  for (double p : p_max) n += p < threshold ? 1 : 0;
  return n;
}

namespace {

template <typename T>
void check_unit_rows(const Tensor<T>& t, const char* what) {
  if (t.rank() != 2) {
    throw ShapeError(std::string("arcface: ") + what + " must be rank 2, got " +
                     shape_str(t.shape()));
  }
  const auto n = t.dim(0), d = t.dim(1);
  for (std::size_t i = 0; i < n; ++i) {
    double ss = 0;
    for (std::size_t j = 0; j < d; ++j) ss += double(t[i * d + j]) * double(t[i * d + j]);
    if (std::abs(std::sqrt(ss) - 1.0) > 1e-4) {
      throw DomainError(std::string("arcface: ") + what + " row " + std::to_string(i) +
                        " has norm " + std::to_string(std::sqrt(ss)) + ", expected 1");
    }
  }
}

}  // namespace

template <typename T>
ad::Var<T> angular_logits(ad::Var<T> cosines, std::span<const int> labels, double margin,
                          double penalty, double scale) {
  const auto& c = cosines.value();
  if (c.rank() != 2) throw ShapeError("angular_logits: cosines must be [n, classes]");
  const auto n = c.dim(0), k = c.dim(1);
  if (labels.size() != n) {
    throw ShapeError("angular_logits: " + std::to_string(labels.size()) + " labels for " +
                     std::to_string(n) + " rows");
  }
  Tensor<T> offsets(c.shape(), static_cast<T>(penalty));
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= k) {
      throw DomainError("angular_logits: label " + std::to_string(labels[i]) +
                        " outside [0, " + std::to_string(k) + ")");
    }
    offsets[i * k + labels[i]] = static_cast<T>(margin);
  }
  const T lim = T(1) - static_cast<T>(kCosineClamp);
  auto theta = ad::acos(ad::clamp(cosines, -lim, lim));
  auto shifted = ad::clamp(ad::add_const(theta, offsets), T(0), static_cast<T>(std::numbers::pi));
  return ad::scale(ad::cos(shifted), static_cast<T>(scale));
}

template <typename T>
ad::Var<T> discriminator_ce_loss(ad::Var<T> logits, std::span<const int> race_labels) {
  if (logits.value().rank() != 2) {
    throw ShapeError("discriminator_ce_loss: logits must be [n, races], got " +
                     shape_str(logits.shape()));
  }
  auto picked = ad::pick(ad::log_softmax(logits), race_labels);
  return ad::scale(ad::mean(picked), T(-1));
}

template <typename T>
ad::Var<T> adversarial_uniform_loss(ad::Var<T> logits) {
  auto rows = logits;
  if (logits.value().rank() == 1) rows = ad::reshape(logits, Shape{1, logits.value().size()});
  if (rows.value().rank() != 2) {
    throw ShapeError("adversarial_uniform_loss: logits must be [N] or [n, N]");
  }
  const auto n = rows.value().dim(0), races = rows.value().dim(1);
  if (races < 2) throw DomainError("adversarial_uniform_loss: needs >= 2 races");
  auto total = ad::sum(ad::log_softmax(rows));
  return ad::scale(total, T(-1) / static_cast<T>(n * races));
}

double confidence_balance_loss(const BatchConfidence& batch) {
  if (batch.n_batch() == 0) throw DomainError("confidence_balance_loss: empty batch");
  return static_cast<double>(batch.n_batch() - batch.n_confidence()) /
         static_cast<double>(batch.n_batch());
}

template <typename T>
ad::Var<T> margin_cross_entropy(ad::Var<T> cosines, std::span<const int> labels,
                                double margin, double penalty, double scale) {
  auto logits = angular_logits(cosines, labels, margin, penalty, scale);
  return ad::scale(ad::mean(ad::pick(ad::log_softmax(logits), labels)), T(-1));
}

template <typename T>
ad::Var<T> combined_loss(ad::Var<T> embeddings, ad::Var<T> class_weights,
                         std::span<const int> labels, PenaltyK k, const LossConfig& cfg) {
  if (!(k.value >= 0) || !std::isfinite(k.value)) {
    throw DomainError("combined_loss: K must be finite and >= 0");
  }
  check_unit_rows(embeddings.value(), "embeddings");
  check_unit_rows(class_weights.value(), "class weights");
  auto cosines = ad::linear(embeddings, class_weights);
  return margin_cross_entropy(cosines, labels, cfg.margin, k.value, cfg.scale);
}

template <typename T>
ad::Var<T> arcface_loss(ad::Var<T> embeddings, ad::Var<T> class_weights,
                        std::span<const int> labels, const LossConfig& cfg) {
  return combined_loss(embeddings, class_weights, labels, PenaltyK{0.0}, cfg);
}

#define GABN_INSTANTIATE_LOSSES(T)                                                          \
  template ad::Var<T> angular_logits<T>(ad::Var<T>, std::span<const int>, double, double,  \
                                        double);                                            \
  template ad::Var<T> discriminator_ce_loss<T>(ad::Var<T>, std::span<const int>);           \
  template ad::Var<T> adversarial_uniform_loss<T>(ad::Var<T>);                              \
  template ad::Var<T> margin_cross_entropy<T>(ad::Var<T>, std::span<const int>, double,     \
                                              double, double);                              \
  template ad::Var<T> combined_loss<T>(ad::Var<T>, ad::Var<T>, std::span<const int>,        \
                                       PenaltyK, const LossConfig&);                        \
  template ad::Var<T> arcface_loss<T>(ad::Var<T>, ad::Var<T>, std::span<const int>,         \
                                      const LossConfig&);

GABN_INSTANTIATE_LOSSES(float)
GABN_INSTANTIATE_LOSSES(double)

}  // namespace gabn
