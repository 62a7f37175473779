#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <vector>

#include "gabn/autodiff.hpp"
#include "gabn/random.hpp"

namespace gabn {

// Face-recognition network: strided conv stages (optionally followed by a
// residual block), a linear embedding layer and an L2-normalized output,
// plus a cosine margin head over `num_classes` identities.
struct RecognizerConfig {
  std::size_t image_side = 64;
  std::size_t in_channels = 3;
  std::vector<std::size_t> channels{8, 16, 32, 64};
  bool residual = true;
  std::size_t embedding_dim = 64;
  std::size_t num_classes = 80;
  double scale = 64.0;   // s
  double margin = 0.35;  // m, radians

  void validate() const;
};

// Race classifier over single-channel gradient attention maps.
struct DiscriminatorConfig {
  std::size_t image_side = 64;
  std::size_t in_channels = 1;
  std::vector<std::size_t> channels{8, 16};
  std::size_t num_races = 4;

  void validate() const;
};

template <typename T>
class Network {
 public:
  virtual ~Network() = default;

  // Per-sample input shape [C, H, W].
  virtual Shape input_shape() const = 0;

  // Batched forward [N, C, H, W] -> output, recording onto input's tape.
  virtual ad::Var<T> forward(ad::Var<T> input) const = 0;

  ParameterSet<T>& parameters() noexcept { return params_; }
  const ParameterSet<T>& parameters() const noexcept { return params_; }

 protected:
  void check_input(const char* who, const Shape& batch_shape) const;

  ParameterSet<T> params_;
};

// A finished forward pass: the tape, its input leaf, and the output node.
template <typename T>
struct ForwardPass {
  std::unique_ptr<ad::Tape<T>> tape;
  ad::Var<T> input;
  ad::Var<T> output;
};

// Accepts a single sample [C, H, W] or a batch [N, C, H, W].
template <typename T>
ForwardPass<T> forward(const Network<T>& net, const Tensor<T>& input, bool wrt_input = false);

// Gradients of `objective` w.r.t. the parameters bound in `pass`, and w.r.t.
// the input when the pass was recorded with wrt_input.
template <typename T>
GradientBundle<T> backward(const ForwardPass<T>& pass, ad::Var<T> objective);

template <typename T>
class Recognizer : public Network<T> {
 public:
  Recognizer(RecognizerConfig cfg, std::uint64_t seed);

  Shape input_shape() const override;
  // Unit-norm embeddings [N, embedding_dim].
  ad::Var<T> forward(ad::Var<T> input) const override;

  // Row-normalized class weights [num_classes, embedding_dim].
  ad::Var<T> class_weights(ad::Tape<T>& tape) const;
  // cos(theta) between each embedding and each class weight: [N, num_classes].
  ad::Var<T> cosines(ad::Var<T> embeddings) const;
  // Margin-head class probabilities. With labels, the label column carries
  // the additive angular margin; without, all columns use plain s*cos.
  ad::Var<T> probabilities(ad::Var<T> embeddings, std::span<const int> labels = {}) const;

  const RecognizerConfig& config() const noexcept { return cfg_; }

 private:
  struct Stage {
    std::size_t conv_w, conv_b;
    bool residual;
    std::size_t res_a_w, res_a_b, res_b_w, res_b_b;
  };

  RecognizerConfig cfg_;
  std::vector<Stage> stages_;
  std::size_t embed_w_ = 0, embed_b_ = 0, head_w_ = 0;
};

template <typename T>
class Discriminator : public Network<T> {
 public:
  Discriminator(DiscriminatorConfig cfg, std::uint64_t seed);

  Shape input_shape() const override;
  // Race logits [N, num_races].
  ad::Var<T> forward(ad::Var<T> input) const override;

  const DiscriminatorConfig& config() const noexcept { return cfg_; }

 private:
  DiscriminatorConfig cfg_;
  std::vector<std::pair<std::size_t, std::size_t>> convs_;
  std::size_t fc_w_ = 0, fc_b_ = 0;
};

template <typename T>
Recognizer<T> build_recognizer(const RecognizerConfig& cfg, std::uint64_t seed);

template <typename T>
Discriminator<T> build_discriminator(const DiscriminatorConfig& cfg, std::uint64_t seed);

// Unit-norm embeddings for [C, H, W] or [N, C, H, W] images; no tape kept.
template <typename T>
Tensor<T> embed(const Recognizer<T>& net, const Tensor<T>& images);

// Scaled-uniform fan-in initialization U(-gain*sqrt(3/fan_in), +...).
template <typename T>
Tensor<T> fan_in_uniform(Shape shape, std::size_t fan_in, double gain, Rng& rng);

}  // namespace gabn
