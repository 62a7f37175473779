#pragma once

// Reverse-mode automatic differentiation over a linear tape.
//
// A Tape records every op applied to its Vars in creation order, which is a
// topological order of the expression DAG. backward() walks that order in
// reverse, visiting each node once and accumulating gradients into the node's
// inputs. Second-order derivatives are not supported: backward closures work
// on plain tensors, not Vars.

#include <cstddef>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "gabn/tensor.hpp"

namespace gabn {

template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> value;
};

// Named, ordered parameter storage. Indices stay valid as parameters are added.
template <typename T>
class ParameterSet {
 public:
  std::size_t add(std::string name, Tensor<T> value) {
    for (const auto& p : params_) {
      if (p.name == name) throw DomainError("duplicate parameter name: " + name);
    }
    params_.push_back({std::move(name), std::move(value)});
    return params_.size() - 1;
  }

  Parameter<T>& operator[](std::size_t i) { return params_.at(i); }
  const Parameter<T>& operator[](std::size_t i) const { return params_.at(i); }

  Parameter<T>* find(std::string_view name) {
    for (auto& p : params_) {
      if (p.name == name) return &p;
    }
    return nullptr;
  }
  const Parameter<T>* find(std::string_view name) const {
    return const_cast<ParameterSet*>(this)->find(name);
  }

  std::size_t size() const noexcept { return params_.size(); }
  std::size_t numel() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.value.size();
    return n;
  }

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

 private:
  std::vector<Parameter<T>> params_;
};

// Gradients w.r.t. named parameters and, optionally, the network input.
template <typename T>
struct GradientBundle {
  std::map<std::string, Tensor<T>> parameters;
  std::optional<Tensor<T>> input;
};

namespace ad {

template <typename T>
class Tape;

template <typename T>
struct Var {
  Tape<T>* tape = nullptr;
  std::size_t id = 0;

  const Tensor<T>& value() const;
  const Shape& shape() const { return value().shape(); }
};

// Per-node gradients produced by Tape::backward.
template <typename T>
class Gradients {
 public:
  explicit Gradients(std::vector<Tensor<T>> grads) : grads_(std::move(grads)) {}

  // Gradient for `v`, or zeros of v's shape if nothing flowed into it.
  Tensor<T> wrt(Var<T> v) const {
    const auto& g = grads_.at(v.id);
    if (g.empty() && !v.value().empty()) return Tensor<T>(v.shape());
    return g;
  }
  bool reached(Var<T> v) const { return !grads_.at(v.id).empty(); }

 private:
  std::vector<Tensor<T>> grads_;
};

template <typename T>
class Tape {
 public:
  // What a node's backward closure sees. grads[k] is already allocated and
  // must be accumulated into; a null entry means input k needs no gradient.
  struct BackwardContext {
    const Tensor<T>& grad_out;
    const Tensor<T>& output;
    std::span<const Tensor<T>* const> inputs;
    std::span<Tensor<T>* const> grads;
  };
  using BackwardFn = std::function<void(const BackwardContext&)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Leaf holding data; `requires_grad` marks it as a differentiation target.
  Var<T> leaf(Tensor<T> value, bool requires_grad = false);

  // Leaf bound to a network parameter. Binding the same parameter twice is
  // allowed; gradients from both uses are summed in the bundle.
  Var<T> parameter(const Parameter<T>& param);

  Var<T> push(std::string_view op, Tensor<T> value, std::vector<Var<T>> inputs,
              BackwardFn backward);

  const Tensor<T>& value(Var<T> v) const { return nodes_.at(v.id).value; }
  std::string_view op(Var<T> v) const { return nodes_.at(v.id).op; }
  bool requires_grad(Var<T> v) const { return nodes_.at(v.id).requires_grad; }
  std::size_t size() const noexcept { return nodes_.size(); }

  // d(objective)/d(every node). The objective must hold exactly one element.
  Gradients<T> backward(Var<T> objective) const;

  // Parameter gradients keyed by parameter name; input gradient when given.
  GradientBundle<T> gradient_bundle(Var<T> objective,
                                    std::optional<Var<T>> input = std::nullopt) const;

  std::size_t last_backward_visits() const noexcept { return visits_; }

 private:
  struct Node {
    std::string_view op;
    Tensor<T> value;
    std::vector<std::size_t> inputs;
    bool requires_grad = false;
    BackwardFn backward;
  };

  std::vector<Node> nodes_;
  std::vector<std::pair<std::string, std::size_t>> bound_params_;
  mutable std::size_t visits_ = 0;
};

template <typename T>
const Tensor<T>& Var<T>::value() const {
  return tape->value(*this);
}

struct Conv2dOptions {
  std::size_t stride = 1;
  std::size_t padding = 0;
};

// ---- elementwise -----------------------------------------------------------
template <typename T> Var<T> add(Var<T> a, Var<T> b);
template <typename T> Var<T> sub(Var<T> a, Var<T> b);
template <typename T> Var<T> mul(Var<T> a, Var<T> b);
template <typename T> Var<T> scale(Var<T> a, T factor);
template <typename T> Var<T> add_scalar(Var<T> a, T offset);
// Adds a constant tensor (no gradient flows into `offsets`).
template <typename T> Var<T> add_const(Var<T> a, const Tensor<T>& offsets);
template <typename T> Var<T> relu(Var<T> a);
template <typename T> Var<T> abs(Var<T> a);
template <typename T> Var<T> square(Var<T> a);
template <typename T> Var<T> cos(Var<T> a);
// Requires every entry strictly inside (-1, 1).
template <typename T> Var<T> acos(Var<T> a);
// Gradient passes where lo <= x <= hi and is zero outside.
template <typename T> Var<T> clamp(Var<T> a, T lo, T hi);

// ---- reductions and shape ----------------------------------------------------
template <typename T> Var<T> sum(Var<T> a);
template <typename T> Var<T> mean(Var<T> a);
template <typename T> Var<T> reshape(Var<T> a, Shape shape);
// [N, ...] -> [N, prod(...)]
template <typename T> Var<T> flatten(Var<T> a);
// [n, k] -> [n]: entry labels[i] of row i.
template <typename T> Var<T> pick(Var<T> a, std::span<const int> labels);
// [n, k] -> [n]; the gradient goes to the first maximal entry.
template <typename T> Var<T> row_max(Var<T> a);
// [n, k] -> [n]
template <typename T> Var<T> row_mean(Var<T> a);
// [N, C, H, W] -> [N, 1, H, W]; the gradient goes to the first maximal channel.
template <typename T> Var<T> channel_max(Var<T> a);

// ---- linear algebra and layers --------------------------------------------------
// [m, k] x [k, n] -> [m, n]
template <typename T> Var<T> matmul(Var<T> a, Var<T> b);
// x [n, in], w [out, in] -> x w^T  (+ b [out])
template <typename T> Var<T> linear(Var<T> x, Var<T> w);
template <typename T> Var<T> linear(Var<T> x, Var<T> w, Var<T> b);
// x [N, C, H, W], w [O, C, kh, kw], b [O]
template <typename T> Var<T> conv2d(Var<T> x, Var<T> w, Var<T> b, Conv2dOptions opts);
template <typename T> Var<T> max_pool2d(Var<T> x, std::size_t kernel, std::size_t stride);
template <typename T> Var<T> avg_pool2d(Var<T> x, std::size_t kernel, std::size_t stride);
// Batch statistics over (N, H, W) per channel; gamma, beta: [C].
template <typename T> Var<T> batch_norm(Var<T> x, Var<T> gamma, Var<T> beta, T eps = T(1e-5));
// Rows of [n, d] scaled to unit L2 norm.
template <typename T> Var<T> l2_normalize(Var<T> x);
// Row-wise over [n, k].
template <typename T> Var<T> softmax(Var<T> x);
template <typename T> Var<T> log_softmax(Var<T> x);

// Names of every op the engine registers.
std::vector<std::string> required_op_set();

}  // namespace ad
}  // namespace gabn
