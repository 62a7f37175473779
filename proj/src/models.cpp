#include "gabn/models.hpp"

#include <cmath>
#include <numbers>
#include <string>

#include "gabn/losses.hpp"
#include "gabn/random.hpp"

namespace gabn {

void RecognizerConfig::validate() const {
  if (image_side == 0 || in_channels == 0) throw ConfigError("recognizer: empty input");
  if (channels.empty()) throw ConfigError("recognizer: needs at least one stage");
  for (auto c : channels) {
    if (c == 0) throw ConfigError("recognizer: zero-width stage");
  }
  const std::size_t reduction = std::size_t{1} << channels.size();
  if (image_side % reduction != 0) {
    throw ConfigError("recognizer: image side " + std::to_string(image_side) +
                      " not divisible by 2^" + std::to_string(channels.size()));
  }
  if (embedding_dim < 2) throw ConfigError("recognizer: embedding dimension must be >= 2");
  if (num_classes < 2) throw ConfigError("recognizer: needs >= 2 identity classes");
  if (!(scale > 0)) throw ConfigError("recognizer: scale s must be > 0");
  if (!(margin >= 0 && margin < std::numbers::pi / 2)) throw ConfigError("recognizer: margin must lie in [0, pi/2)");
}

void DiscriminatorConfig::validate() const {
  if (num_races < 2) throw ConfigError("discriminator: num_races must be >= 2");
  if (in_channels != 1) throw ConfigError("discriminator: input channel count must be 1");
  if (channels.empty()) throw ConfigError("discriminator: needs at least one conv stage");
  const std::size_t reduction = std::size_t{1} << (channels.size() + 1);
  if (image_side == 0 || image_side % reduction != 0) {
    throw ConfigError("discriminator: image side " + std::to_string(image_side) +
                      " not divisible by " + std::to_string(reduction));
  }
}

template <typename T>
void Network<T>::check_input(const char* who, const Shape& batch_shape) const {
  const Shape want = input_shape();
  const bool ok = batch_shape.size() == want.size() + 1 &&
                  std::equal(want.begin(), want.end(), batch_shape.begin() + 1);
  if (!ok) {
    throw ShapeError(std::string(who) + ": input shape " + shape_str(batch_shape) +
                     " does not match [N," + shape_str(want).substr(1));
  }
}

template <typename T>
Tensor<T> fan_in_uniform(Shape shape, std::size_t fan_in, double gain, Rng& rng) {
  Tensor<T> t(std::move(shape));
  const double bound = gain * std::sqrt(3.0 / static_cast<double>(fan_in));
  for (auto& v : t.data()) v = static_cast<T>(rng.uniform(-bound, bound));
  return t;
}

template <typename T>
ForwardPass<T> forward(const Network<T>& net, const Tensor<T>& input, bool wrt_input) {
  ForwardPass<T> pass;
  pass.tape = std::make_unique<ad::Tape<T>>();
  Tensor<T> batch = input;
  if (input.rank() == net.input_shape().size()) {
    Shape s = input.shape();
    s.insert(s.begin(), 1);
    batch = input.reshaped(std::move(s));
  }
  pass.input = pass.tape->leaf(std::move(batch), wrt_input);
  pass.output = net.forward(pass.input);
  return pass;
}

template <typename T>
GradientBundle<T> backward(const ForwardPass<T>& pass, ad::Var<T> objective) {
  const bool wrt_input = pass.tape->requires_grad(pass.input);
  return pass.tape->gradient_bundle(objective, wrt_input ? std::optional(pass.input)
                                                         : std::nullopt);
}

// ---- Recognizer ----------------------------------------------------------------

template <typename T>
Recognizer<T>::Recognizer(RecognizerConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
  cfg_.validate();
  Rng rng(seed);
  auto& P = this->params_;
  const double relu_gain = std::sqrt(2.0);
  std::size_t prev = cfg_.in_channels;
  for (std::size_t s = 0; s < cfg_.channels.size(); ++s) {
    const auto c = cfg_.channels[s];
    const std::string prefix = "stage" + std::to_string(s) + ".";
    Stage st{};
    st.conv_w = P.add(prefix + "conv.weight",
                      fan_in_uniform<T>({c, prev, 3, 3}, prev * 9, relu_gain, rng));
    st.conv_b = P.add(prefix + "conv.bias", Tensor<T>({c}));
    st.residual = cfg_.residual && s > 0;
    if (st.residual) {
      st.res_a_w = P.add(prefix + "res_a.weight",
                         fan_in_uniform<T>({c, c, 3, 3}, c * 9, relu_gain, rng));
      st.res_a_b = P.add(prefix + "res_a.bias", Tensor<T>({c}));
      // Small residual branch at init keeps the stage close to identity.
      st.res_b_w = P.add(prefix + "res_b.weight",
                         fan_in_uniform<T>({c, c, 3, 3}, c * 9, 0.25, rng));
      st.res_b_b = P.add(prefix + "res_b.bias", Tensor<T>({c}));
    }
    stages_.push_back(st);
    prev = c;
  }
  const std::size_t side = cfg_.image_side >> cfg_.channels.size();
  const std::size_t flat = prev * side * side;
  embed_w_ = P.add("embed.weight",
                   fan_in_uniform<T>({cfg_.embedding_dim, flat}, flat, 1.0, rng));
  embed_b_ = P.add("embed.bias", Tensor<T>({cfg_.embedding_dim}));
  head_w_ = P.add("head.weight", fan_in_uniform<T>({cfg_.num_classes, cfg_.embedding_dim},
                                                   cfg_.embedding_dim, 1.0, rng));
}

template <typename T>
Shape Recognizer<T>::input_shape() const {
  return {cfg_.in_channels, cfg_.image_side, cfg_.image_side};
}

template <typename T>
ad::Var<T> Recognizer<T>::forward(ad::Var<T> input) const {
  this->check_input("recognizer", input.shape());
  auto& tape = *input.tape;
  const auto& P = this->params_;
  auto h = input;
  for (const auto& st : stages_) {
    h = ad::relu(ad::conv2d(h, tape.parameter(P[st.conv_w]), tape.parameter(P[st.conv_b]),
                            {2, 1}));
    if (st.residual) {
      auto r = ad::relu(ad::conv2d(h, tape.parameter(P[st.res_a_w]),
                                   tape.parameter(P[st.res_a_b]), {1, 1}));
      r = ad::conv2d(r, tape.parameter(P[st.res_b_w]), tape.parameter(P[st.res_b_b]), {1, 1});
      h = ad::relu(ad::add(h, r));
    }
  }
  auto e = ad::linear(ad::flatten(h), tape.parameter(P[embed_w_]), tape.parameter(P[embed_b_]));
  return ad::l2_normalize(e);
}

template <typename T>
ad::Var<T> Recognizer<T>::class_weights(ad::Tape<T>& tape) const {
  return ad::l2_normalize(tape.parameter(this->params_[head_w_]));
}

template <typename T>
ad::Var<T> Recognizer<T>::cosines(ad::Var<T> embeddings) const {
  return ad::linear(embeddings, class_weights(*embeddings.tape));
}

template <typename T>
ad::Var<T> Recognizer<T>::probabilities(ad::Var<T> embeddings,
                                        std::span<const int> labels) const {
  auto cos = cosines(embeddings);
  const auto n = cos.value().dim(0);
  if (labels.empty()) {
    std::vector<int> any(n, 0);
    return ad::softmax(angular_logits(cos, std::span<const int>(any), 0.0, 0.0, cfg_.scale));
  }
  return ad::softmax(angular_logits(cos, labels, cfg_.margin, 0.0, cfg_.scale));
}

// ---- Discriminator -------------------------------------------------------------

template <typename T>
Discriminator<T>::Discriminator(DiscriminatorConfig cfg, std::uint64_t seed)
    : cfg_(std::move(cfg)) {
  cfg_.validate();
  Rng rng(seed);
  auto& P = this->params_;
  std::size_t prev = cfg_.in_channels;
  for (std::size_t s = 0; s < cfg_.channels.size(); ++s) {
    const auto c = cfg_.channels[s];
    const std::string prefix = "conv" + std::to_string(s) + ".";
    auto w = P.add(prefix + "weight",
                   fan_in_uniform<T>({c, prev, 3, 3}, prev * 9, std::sqrt(2.0), rng));
    auto b = P.add(prefix + "bias", Tensor<T>({c}));
    convs_.emplace_back(w, b);
    prev = c;
  }
  const std::size_t side = cfg_.image_side >> (cfg_.channels.size() + 1);
  const std::size_t flat = prev * side * side;
  fc_w_ = P.add("fc.weight", fan_in_uniform<T>({cfg_.num_races, flat}, flat, 1.0, rng));
  fc_b_ = P.add("fc.bias", Tensor<T>({cfg_.num_races}));
}

template <typename T>
Shape Discriminator<T>::input_shape() const {
  return {cfg_.in_channels, cfg_.image_side, cfg_.image_side};
}

template <typename T>
ad::Var<T> Discriminator<T>::forward(ad::Var<T> input) const {
  this->check_input("discriminator", input.shape());
  auto& tape = *input.tape;
  const auto& P = this->params_;
  auto h = input;
  for (const auto& [w, b] : convs_) {
    h = ad::relu(ad::conv2d(h, tape.parameter(P[w]), tape.parameter(P[b]), {2, 1}));
  }
  h = ad::max_pool2d(h, 2, 2);
  return ad::linear(ad::flatten(h), tape.parameter(P[fc_w_]), tape.parameter(P[fc_b_]));
}

template <typename T>
Recognizer<T> build_recognizer(const RecognizerConfig& cfg, std::uint64_t seed) {
  return Recognizer<T>(cfg, seed);
}

template <typename T>
Discriminator<T> build_discriminator(const DiscriminatorConfig& cfg, std::uint64_t seed) {
  return Discriminator<T>(cfg, seed);
}

template <typename T>
Tensor<T> embed(const Recognizer<T>& net, const Tensor<T>& images) {
  auto pass = forward(net, images, false);
  return pass.output.value();
}

#define GABN_INSTANTIATE_MODELS(T)                                                      \
  template class Network<T>;                                                            \
  template class Recognizer<T>;                                                         \
  template class Discriminator<T>;                                                      \
  template ForwardPass<T> forward<T>(const Network<T>&, const Tensor<T>&, bool);        \
  template GradientBundle<T> backward<T>(const ForwardPass<T>&, ad::Var<T>);            \
  template Recognizer<T> build_recognizer<T>(const RecognizerConfig&, std::uint64_t);   \
  template Discriminator<T> build_discriminator<T>(const DiscriminatorConfig&,          \
                                                   std::uint64_t);                      \
  template Tensor<T> embed<T>(const Recognizer<T>&, const Tensor<T>&);                  \
  template Tensor<T> fan_in_uniform<T>(Shape, std::size_t, double, Rng&);

GABN_INSTANTIATE_MODELS(float)
GABN_INSTANTIATE_MODELS(double)

}  // namespace gabn
