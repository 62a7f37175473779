#include "gabn/autodiff.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>

namespace gabn::ad {

namespace {

template <typename T>
using MatR = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapR = Eigen::Map<MatR<T>>;
template <typename T>
using CMapR = Eigen::Map<const MatR<T>>;

template <typename T>
Tape<T>& tape_of(std::string_view op, std::initializer_list<Var<T>> vars) {
  Tape<T>* tape = nullptr;
  for (const auto& v : vars) {
    if (v.tape == nullptr) throw DomainError(std::string(op) + ": unbound Var");
    if (tape != nullptr && v.tape != tape) {
      throw DomainError(std::string(op) + ": operands live on different tapes");
    }
    tape = v.tape;
  }
  return *tape;
}

void require(bool ok, std::string_view op, const std::string& what) {
  if (!ok) throw ShapeError(std::string(op) + ": " + what);
}

template <typename T>
void require_same_shape(std::string_view op, const Tensor<T>& a, const Tensor<T>& b) {
  require(a.shape() == b.shape(), op,
          "shape " + shape_str(a.shape()) + " != " + shape_str(b.shape()));
}

template <typename T>
void require_rank(std::string_view op, const Tensor<T>& a, std::size_t rank) {
  require(a.rank() == rank, op,
          "expected rank " + std::to_string(rank) + ", got " + shape_str(a.shape()));
}

// Elementwise y = f(x) with dy/dx = df(x, y).
template <typename T, typename F, typename DF>
Var<T> unary(std::string_view op, Var<T> a, F f, DF df) {
  auto& tape = tape_of(op, {a});
  const auto& x = a.value();
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = f(x[i]);
  return tape.push(op, std::move(out), {a}, [df](const auto& ctx) {
    const auto& x = *ctx.inputs[0];
    auto& g = *ctx.grads[0];
    for (std::size_t i = 0; i < x.size(); ++i) {
      g[i] += ctx.grad_out[i] * df(x[i], ctx.output[i]);
    }
  });
}

}  // namespace

// ---- Tape ------------------------------------------------------------------

template <typename T>
Var<T> Tape<T>::leaf(Tensor<T> value, bool requires_grad) {
  nodes_.push_back(Node{"leaf", std::move(value), {}, requires_grad, nullptr});
  return Var<T>{this, nodes_.size() - 1};
}

template <typename T>
Var<T> Tape<T>::parameter(const Parameter<T>& param) {
  nodes_.push_back(Node{"parameter", param.value, {}, true, nullptr});
  bound_params_.emplace_back(param.name, nodes_.size() - 1);
  return Var<T>{this, nodes_.size() - 1};
}

template <typename T>
Var<T> Tape<T>::push(std::string_view op, Tensor<T> value, std::vector<Var<T>> inputs,
                     BackwardFn backward) {
  Node node{op, std::move(value), {}, false, nullptr};
  node.inputs.reserve(inputs.size());
  for (const auto& in : inputs) {
    if (in.tape != this) throw DomainError(std::string(op) + ": input from another tape");
    node.inputs.push_back(in.id);
    node.requires_grad = node.requires_grad || nodes_[in.id].requires_grad;
  }
  if (node.requires_grad) node.backward = std::move(backward);
  nodes_.push_back(std::move(node));
  return Var<T>{this, nodes_.size() - 1};
}

template <typename T>
Gradients<T> Tape<T>::backward(Var<T> objective) const {
  if (objective.tape != this) throw DomainError("backward: objective from another tape");
  const auto& obj = nodes_.at(objective.id);
  if (obj.value.size() != 1) {
    throw ShapeError("backward: objective must be scalar, got shape " +
                     shape_str(obj.value.shape()));
  }
  std::vector<Tensor<T>> grads(nodes_.size());
  grads[objective.id] = Tensor<T>(obj.value.shape(), T(1));
  visits_ = 0;

  std::vector<const Tensor<T>*> in_values;
  std::vector<Tensor<T>*> in_grads;
  for (std::size_t i = objective.id + 1; i-- > 0;) {
    const Node& node = nodes_[i];
    if (grads[i].empty() || !node.backward) continue;
    ++visits_;
    in_values.assign(node.inputs.size(), nullptr);
    in_grads.assign(node.inputs.size(), nullptr);
    for (std::size_t k = 0; k < node.inputs.size(); ++k) {
      const Node& in = nodes_[node.inputs[k]];
      in_values[k] = &in.value;
      if (!in.requires_grad) continue;
      auto& g = grads[node.inputs[k]];
      if (g.empty()) g = Tensor<T>(in.value.shape());
      in_grads[k] = &g;
    }
    node.backward(BackwardContext{grads[i], node.value, in_values, in_grads});
  }
  return Gradients<T>(std::move(grads));
}

template <typename T>
GradientBundle<T> Tape<T>::gradient_bundle(Var<T> objective,
                                           std::optional<Var<T>> input) const {
  const auto grads = backward(objective);
  GradientBundle<T> bundle;
  for (const auto& [name, id] : bound_params_) {
    Var<T> v{const_cast<Tape*>(this), id};
    auto g = grads.wrt(v);
    auto [it, inserted] = bundle.parameters.try_emplace(name, g);
    if (!inserted) {
      for (std::size_t i = 0; i < g.size(); ++i) it->second[i] += g[i];
    }
  }
  if (input) bundle.input = grads.wrt(*input);
  return bundle;
}

// ---- elementwise -------------------------------------------------------------

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  auto& tape = tape_of("add", {a, b});
  require_same_shape("add", a.value(), b.value());
  Tensor<T> out = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  return tape.push("add", std::move(out), {a, b}, [](const auto& ctx) {
    for (auto* g : ctx.grads) {
      if (!g) continue;
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += ctx.grad_out[i];
    }
  });
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
  auto& tape = tape_of("sub", {a, b});
  require_same_shape("sub", a.value(), b.value());
  Tensor<T> out = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  return tape.push("sub", std::move(out), {a, b}, [](const auto& ctx) {
    if (auto* g = ctx.grads[0]) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += ctx.grad_out[i];
    }
    if (auto* g = ctx.grads[1]) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] -= ctx.grad_out[i];
    }
  });
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  auto& tape = tape_of("mul", {a, b});
  require_same_shape("mul", a.value(), b.value());
  Tensor<T> out = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  return tape.push("mul", std::move(out), {a, b}, [](const auto& ctx) {
    const auto& av = *ctx.inputs[0];
    const auto& bv = *ctx.inputs[1];
    if (auto* g = ctx.grads[0]) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += ctx.grad_out[i] * bv[i];
    }
    if (auto* g = ctx.grads[1]) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += ctx.grad_out[i] * av[i];
    }
  });
}

template <typename T>
Var<T> scale(Var<T> a, T factor) {
  return unary<T>("scale", a, [factor](T x) { return factor * x; },
                  [factor](T, T) { return factor; });
}

template <typename T>
Var<T> add_scalar(Var<T> a, T offset) {
  return unary<T>("add_scalar", a, [offset](T x) { return x + offset; },
                  [](T, T) { return T(1); });
}

template <typename T>
Var<T> add_const(Var<T> a, const Tensor<T>& offsets) {
  auto& tape = tape_of("add_const", {a});
  require_same_shape("add_const", a.value(), offsets);
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += offsets[i];
  return tape.push("add_const", std::move(out), {a}, [](const auto& ctx) {
    auto& g = *ctx.grads[0];
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += ctx.grad_out[i];
  });
}

template <typename T>
Var<T> relu(Var<T> a) {
  return unary<T>("relu", a, [](T x) { return x > T(0) ? x : T(0); },
                  [](T x, T) { return x > T(0) ? T(1) : T(0); });
}

template <typename T>
Var<T> abs(Var<T> a) {
  return unary<T>("abs", a, [](T x) { return std::abs(x); },
                  [](T x, T) { return x > T(0) ? T(1) : (x < T(0) ? T(-1) : T(0)); });
}

template <typename T>
Var<T> square(Var<T> a) {
  return unary<T>("square", a, [](T x) { return x * x; }, [](T x, T) { return T(2) * x; });
}

template <typename T>
Var<T> cos(Var<T> a) {
  return unary<T>("cos", a, [](T x) { return std::cos(x); },
                  [](T x, T) { return -std::sin(x); });
}

template <typename T>
Var<T> acos(Var<T> a) {
  for (T x : a.value().data()) {
    if (std::isnan(x)) throw NumericError("acos: non-finite input");
    if (!(x > T(-1) && x < T(1))) {
      throw DomainError("acos: input " + std::to_string(x) + " outside (-1, 1)");
    }
  }
  return unary<T>("acos", a, [](T x) { return std::acos(x); },
                  [](T x, T) { return T(-1) / std::sqrt(T(1) - x * x); });
}

template <typename T>
Var<T> clamp(Var<T> a, T lo, T hi) {
  if (!(lo <= hi)) throw DomainError("clamp: lo > hi");
  return unary<T>("clamp", a, [lo, hi](T x) { return std::clamp(x, lo, hi); },
                  [lo, hi](T x, T) { return (x >= lo && x <= hi) ? T(1) : T(0); });
}

// ---- reductions and shape -----------------------------------------------------

template <typename T>
Var<T> sum(Var<T> a) {
  auto& tape = tape_of("sum", {a});
  T total = 0;
  for (T x : a.value().data()) total += x;
  return tape.push("sum", Tensor<T>::scalar(total), {a}, [](const auto& ctx) {
    auto& g = *ctx.grads[0];
    const T go = ctx.grad_out[0];
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += go;
  });
}

template <typename T>
Var<T> mean(Var<T> a) {
  const auto n = a.value().size();
  require(n > 0, "mean", "empty tensor");
  return scale(sum(a), T(1) / static_cast<T>(n));
}

template <typename T>
Var<T> reshape(Var<T> a, Shape shape) {
  auto& tape = tape_of("reshape", {a});
  require(shape_numel(shape) == a.value().size(), "reshape",
          "cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  return tape.push("reshape", a.value().reshaped(std::move(shape)), {a},
                   [](const auto& ctx) {
                     auto& g = *ctx.grads[0];
                     for (std::size_t i = 0; i < g.size(); ++i) g[i] += ctx.grad_out[i];
                   });
}

template <typename T>
Var<T> flatten(Var<T> a) {
  require(a.value().rank() >= 1, "flatten", "rank-0 input");
  const auto n = a.shape()[0];
  return reshape(a, Shape{n, n == 0 ? 0 : a.value().size() / n});
}

template <typename T>
Var<T> pick(Var<T> a, std::span<const int> labels) {
  auto& tape = tape_of("pick", {a});
  const auto& x = a.value();
  require_rank("pick", x, 2);
  const auto n = x.dim(0), k = x.dim(1);
  require(labels.size() == n, "pick",
          std::to_string(labels.size()) + " labels for " + std::to_string(n) + " rows");
  std::vector<int> idx(labels.begin(), labels.end());
  Tensor<T> out(Shape{n});
  for (std::size_t i = 0; i < n; ++i) {
    if (idx[i] < 0 || static_cast<std::size_t>(idx[i]) >= k) {
      throw DomainError("pick: label " + std::to_string(idx[i]) + " outside [0, " +
                        std::to_string(k) + ")");
    }
    out[i] = x[i * k + idx[i]];
  }
  return tape.push("pick", std::move(out), {a}, [idx, k](const auto& ctx) {
    auto& g = *ctx.grads[0];
    for (std::size_t i = 0; i < idx.size(); ++i) g[i * k + idx[i]] += ctx.grad_out[i];
  });
}

template <typename T>
Var<T> row_max(Var<T> a) {
  auto& tape = tape_of("row_max", {a});
  const auto& x = a.value();
  require_rank("row_max", x, 2);
  const auto n = x.dim(0), k = x.dim(1);
  require(k > 0, "row_max", "empty rows");
  std::vector<std::size_t> arg(n);
  Tensor<T> out(Shape{n});
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < k; ++j) {
      if (x[i * k + j] > x[i * k + best]) best = j;
    }
    arg[i] = best;
    out[i] = x[i * k + best];
  }
  return tape.push("row_max", std::move(out), {a}, [arg, k](const auto& ctx) {
    auto& g = *ctx.grads[0];
    for (std::size_t i = 0; i < arg.size(); ++i) g[i * k + arg[i]] += ctx.grad_out[i];
  });
}

template <typename T>
Var<T> row_mean(Var<T> a) {
  auto& tape = tape_of("row_mean", {a});
  const auto& x = a.value();
  require_rank("row_mean", x, 2);
  const auto n = x.dim(0), k = x.dim(1);
  require(k > 0, "row_mean", "empty rows");
  Tensor<T> out(Shape{n});
  for (std::size_t i = 0; i < n; ++i) {
    T s = 0;
    for (std::size_t j = 0; j < k; ++j) s += x[i * k + j];
    out[i] = s / static_cast<T>(k);
  }
  return tape.push("row_mean", std::move(out), {a}, [k](const auto& ctx) {
    auto& g = *ctx.grads[0];
    const T inv = T(1) / static_cast<T>(k);
    for (std::size_t i = 0; i < ctx.grad_out.size(); ++i) {
      for (std::size_t j = 0; j < k; ++j) g[i * k + j] += ctx.grad_out[i] * inv;
    }
  });
}

template <typename T>
Var<T> channel_max(Var<T> a) {
  auto& tape = tape_of("channel_max", {a});
  const auto& x = a.value();
  require_rank("channel_max", x, 4);
  const auto n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  require(c > 0, "channel_max", "zero channels");
  std::vector<std::size_t> arg(n * hw);
  Tensor<T> out(Shape{n, 1, x.dim(2), x.dim(3)});
  for (std::size_t s = 0; s < n; ++s) {
    for (std::size_t p = 0; p < hw; ++p) {
      std::size_t best = s * c * hw + p;
      for (std::size_t ch = 1; ch < c; ++ch) {
        const auto idx = (s * c + ch) * hw + p;
        if (x[idx] > x[best]) best = idx;
      }
      arg[s * hw + p] = best;
      out[s * hw + p] = x[best];
    }
  }
  return tape.push("channel_max", std::move(out), {a}, [arg](const auto& ctx) {
    auto& g = *ctx.grads[0];
    for (std::size_t i = 0; i < arg.size(); ++i) g[arg[i]] += ctx.grad_out[i];
  });
}

// ---- linear algebra and layers ----------------------------------------------------

template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
  auto& tape = tape_of("matmul", {a, b});
  const auto& av = a.value();
  const auto& bv = b.value();
  require_rank("matmul", av, 2);
  require_rank("matmul", bv, 2);
  const auto m = av.dim(0), k = av.dim(1), n = bv.dim(1);
  require(bv.dim(0) == k, "matmul",
          "inner dims " + shape_str(av.shape()) + " x " + shape_str(bv.shape()));
  Tensor<T> out(Shape{m, n});
  MapR<T>(out.raw(), m, n).noalias() = CMapR<T>(av.raw(), m, k) * CMapR<T>(bv.raw(), k, n);
  return tape.push("matmul", std::move(out), {a, b}, [m, k, n](const auto& ctx) {
    CMapR<T> go(ctx.grad_out.raw(), m, n);
    if (auto* g = ctx.grads[0]) {
      MapR<T>(g->raw(), m, k).noalias() += go * CMapR<T>(ctx.inputs[1]->raw(), k, n).transpose();
    }
    if (auto* g = ctx.grads[1]) {
      MapR<T>(g->raw(), k, n).noalias() += CMapR<T>(ctx.inputs[0]->raw(), m, k).transpose() * go;
    }
  });
}

namespace {

template <typename T>
Var<T> linear_impl(Var<T> x, Var<T> w, const Var<T>* b) {
  auto& tape = b ? tape_of("linear", {x, w, *b}) : tape_of("linear", {x, w});
  const auto& xv = x.value();
  const auto& wv = w.value();
  require_rank("linear", xv, 2);
  require_rank("linear", wv, 2);
  const auto n = xv.dim(0), in = xv.dim(1), out_dim = wv.dim(0);
  require(wv.dim(1) == in, "linear",
          "input features " + std::to_string(in) + " != weight " + shape_str(wv.shape()));
  if (b) {
    require(b->value().shape() == Shape{out_dim}, "linear",
            "bias shape " + shape_str(b->shape()) + " != [" + std::to_string(out_dim) + "]");
  }
  Tensor<T> out(Shape{n, out_dim});
  MapR<T> o(out.raw(), n, out_dim);
  o.noalias() = CMapR<T>(xv.raw(), n, in) * CMapR<T>(wv.raw(), out_dim, in).transpose();
  if (b) {
    const auto& bv = b->value();
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < out_dim; ++j) out[i * out_dim + j] += bv[j];
    }
  }
  std::vector<Var<T>> inputs{x, w};
  if (b) inputs.push_back(*b);
  return tape.push("linear", std::move(out), std::move(inputs),
                   [n, in, out_dim](const auto& ctx) {
                     CMapR<T> go(ctx.grad_out.raw(), n, out_dim);
                     if (auto* g = ctx.grads[0]) {
                       MapR<T>(g->raw(), n, in).noalias() +=
                           go * CMapR<T>(ctx.inputs[1]->raw(), out_dim, in);
                     }
                     if (auto* g = ctx.grads[1]) {
                       MapR<T>(g->raw(), out_dim, in).noalias() +=
                           go.transpose() * CMapR<T>(ctx.inputs[0]->raw(), n, in);
                     }
                     if (ctx.grads.size() > 2 && ctx.grads[2]) {
                       auto& g = *ctx.grads[2];
                       for (std::size_t i = 0; i < n; ++i) {
                         for (std::size_t j = 0; j < out_dim; ++j) {
                           g[j] += ctx.grad_out[i * out_dim + j];
                         }
                       }
                     }
                   });
}

struct ConvGeometry {
  std::size_t n, c, h, w, o, kh, kw, stride, pad, ho, wo;
  std::size_t k() const { return c * kh * kw; }
  std::size_t p() const { return ho * wo; }
};

template <typename T>
void im2col(const T* img, const ConvGeometry& g, T* col) {
  const auto p = g.p();
  for (std::size_t ch = 0; ch < g.c; ++ch) {
    for (std::size_t ki = 0; ki < g.kh; ++ki) {
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        T* row = col + ((ch * g.kh + ki) * g.kw + kj) * p;
        const T* plane = img + ch * g.h * g.w;
        for (std::size_t oy = 0; oy < g.ho; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ki) -
                          static_cast<std::ptrdiff_t>(g.pad);
          T* dst = row + oy * g.wo;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) {
            std::fill(dst, dst + g.wo, T(0));
            continue;
          }
          const T* src = plane + iy * g.w;
          for (std::size_t ox = 0; ox < g.wo; ++ox) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kj) -
                            static_cast<std::ptrdiff_t>(g.pad);
            dst[ox] = (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.w)) ? T(0) : src[ix];
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const T* col, const ConvGeometry& g, T* img) {
  const auto p = g.p();
  for (std::size_t ch = 0; ch < g.c; ++ch) {
    for (std::size_t ki = 0; ki < g.kh; ++ki) {
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        const T* row = col + ((ch * g.kh + ki) * g.kw + kj) * p;
        T* plane = img + ch * g.h * g.w;
        for (std::size_t oy = 0; oy < g.ho; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ki) -
                          static_cast<std::ptrdiff_t>(g.pad);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) continue;
          const T* src = row + oy * g.wo;
          T* dst = plane + iy * g.w;
          for (std::size_t ox = 0; ox < g.wo; ++ox) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kj) -
                            static_cast<std::ptrdiff_t>(g.pad);
            if (ix >= 0 && ix < static_cast<std::ptrdiff_t>(g.w)) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

}  // namespace

template <typename T>
Var<T> linear(Var<T> x, Var<T> w) {
  return linear_impl<T>(x, w, nullptr);
}

template <typename T>
Var<T> linear(Var<T> x, Var<T> w, Var<T> b) {
  return linear_impl<T>(x, w, &b);
}

template <typename T>
Var<T> conv2d(Var<T> x, Var<T> w, Var<T> b, Conv2dOptions opts) {
  auto& tape = tape_of("conv2d", {x, w, b});
  const auto& xv = x.value();
  const auto& wv = w.value();
  require_rank("conv2d", xv, 4);
  require_rank("conv2d", wv, 4);
  require(opts.stride >= 1, "conv2d", "stride must be >= 1");
  ConvGeometry g{xv.dim(0), xv.dim(1), xv.dim(2), xv.dim(3), wv.dim(0), wv.dim(2), wv.dim(3),
                 opts.stride, opts.padding, 0, 0};
  require(wv.dim(1) == g.c, "conv2d",
          "input channels " + std::to_string(g.c) + " != weight channels " +
              std::to_string(wv.dim(1)));
  require(b.value().shape() == Shape{g.o}, "conv2d",
          "bias shape " + shape_str(b.shape()) + " != [" + std::to_string(g.o) + "]");
  require(g.h + 2 * g.pad >= g.kh && g.w + 2 * g.pad >= g.kw, "conv2d",
          "kernel larger than padded input " + shape_str(xv.shape()));
  g.ho = (g.h + 2 * g.pad - g.kh) / g.stride + 1;
  g.wo = (g.w + 2 * g.pad - g.kw) / g.stride + 1;

  const auto K = g.k(), P = g.p();
  auto cols = std::make_shared<AlignedVector<T>>(g.n * K * P);
  Tensor<T> out(Shape{g.n, g.o, g.ho, g.wo});
  CMapR<T> wm(wv.raw(), g.o, K);
  const auto& bv = b.value();
  for (std::size_t s = 0; s < g.n; ++s) {
    T* col = cols->data() + s * K * P;
    im2col(xv.raw() + s * g.c * g.h * g.w, g, col);
    MapR<T> o(out.raw() + s * g.o * P, g.o, P);
    o.noalias() = wm * CMapR<T>(col, K, P);
    for (std::size_t oc = 0; oc < g.o; ++oc) o.row(oc).array() += bv[oc];
  }
  return tape.push("conv2d", std::move(out), {x, w, b}, [g, cols](const auto& ctx) {
    const auto K = g.k(), P = g.p();
    CMapR<T> wm(ctx.inputs[1]->raw(), g.o, K);
    AlignedVector<T> dcol(ctx.grads[0] ? K * P : 0);
    for (std::size_t s = 0; s < g.n; ++s) {
      CMapR<T> go(ctx.grad_out.raw() + s * g.o * P, g.o, P);
      CMapR<T> col(cols->data() + s * K * P, K, P);
      if (auto* gw = ctx.grads[1]) {
        MapR<T>(gw->raw(), g.o, K).noalias() += go * col.transpose();
      }
      if (auto* gb = ctx.grads[2]) {
        for (std::size_t oc = 0; oc < g.o; ++oc) (*gb)[oc] += go.row(oc).sum();
      }
      if (auto* gx = ctx.grads[0]) {
        MapR<T>(dcol.data(), K, P).noalias() = wm.transpose() * go;
        col2im_add(dcol.data(), g, gx->raw() + s * g.c * g.h * g.w);
      }
    }
  });
}

namespace {

template <typename T>
Var<T> pool2d(std::string_view op, Var<T> x, std::size_t kernel, std::size_t stride,
              bool is_max) {
  auto& tape = tape_of(op, {x});
  const auto& xv = x.value();
  require_rank(op, xv, 4);
  require(kernel >= 1 && stride >= 1, op, "kernel and stride must be >= 1");
  const auto n = xv.dim(0), c = xv.dim(1), h = xv.dim(2), w = xv.dim(3);
  require(h >= kernel && w >= kernel, op, "kernel larger than input " + shape_str(xv.shape()));
  const auto ho = (h - kernel) / stride + 1, wo = (w - kernel) / stride + 1;
  Tensor<T> out(Shape{n, c, ho, wo});
  std::vector<std::size_t> arg(is_max ? out.size() : 0);
  const T inv = T(1) / static_cast<T>(kernel * kernel);
  for (std::size_t plane = 0; plane < n * c; ++plane) {
    const std::size_t base = plane * h * w;
    for (std::size_t oy = 0; oy < ho; ++oy) {
      for (std::size_t ox = 0; ox < wo; ++ox) {
        const auto o = (plane * ho + oy) * wo + ox;
        std::size_t best = base + oy * stride * w + ox * stride;
        T acc = 0;
        for (std::size_t ky = 0; ky < kernel; ++ky) {
          for (std::size_t kx = 0; kx < kernel; ++kx) {
            const auto idx = base + (oy * stride + ky) * w + ox * stride + kx;
            if (xv[idx] > xv[best]) best = idx;
            acc += xv[idx];
          }
        }
        if (is_max) {
          arg[o] = best;
          out[o] = xv[best];
        } else {
          out[o] = acc * inv;
        }
      }
    }
  }
  if (is_max) {
    return tape.push(op, std::move(out), {x}, [arg](const auto& ctx) {
      auto& g = *ctx.grads[0];
      for (std::size_t i = 0; i < arg.size(); ++i) g[arg[i]] += ctx.grad_out[i];
    });
  }
  return tape.push(op, std::move(out), {x}, [=](const auto& ctx) {
    auto& g = *ctx.grads[0];
    for (std::size_t plane = 0; plane < n * c; ++plane) {
      const std::size_t base = plane * h * w;
      for (std::size_t oy = 0; oy < ho; ++oy) {
        for (std::size_t ox = 0; ox < wo; ++ox) {
          const T go = ctx.grad_out[(plane * ho + oy) * wo + ox] * inv;
          for (std::size_t ky = 0; ky < kernel; ++ky) {
            for (std::size_t kx = 0; kx < kernel; ++kx) {
              g[base + (oy * stride + ky) * w + ox * stride + kx] += go;
            }
          }
        }
      }
    }
  });
}

}  // namespace

template <typename T>
Var<T> max_pool2d(Var<T> x, std::size_t kernel, std::size_t stride) {
  return pool2d<T>("max_pool2d", x, kernel, stride, true);
}

template <typename T>
Var<T> avg_pool2d(Var<T> x, std::size_t kernel, std::size_t stride) {
  return pool2d<T>("avg_pool2d", x, kernel, stride, false);
}

template <typename T>
Var<T> batch_norm(Var<T> x, Var<T> gamma, Var<T> beta, T eps) {
  auto& tape = tape_of("batch_norm", {x, gamma, beta});
  const auto& xv = x.value();
  require_rank("batch_norm", xv, 4);
  const auto n = xv.dim(0), c = xv.dim(1), hw = xv.dim(2) * xv.dim(3);
  require(gamma.value().shape() == Shape{c} && beta.value().shape() == Shape{c},
          "batch_norm", "gamma/beta must have shape [" + std::to_string(c) + "]");
  const auto count = static_cast<T>(n * hw);
  require(n * hw > 0, "batch_norm", "empty batch");
  auto xhat = std::make_shared<Tensor<T>>(xv.shape());
  auto inv_std = std::make_shared<std::vector<T>>(c);
  Tensor<T> out(xv.shape());
  const auto& gv = gamma.value();
  const auto& bv = beta.value();
  for (std::size_t ch = 0; ch < c; ++ch) {
    T mu = 0;
    for (std::size_t s = 0; s < n; ++s) {
      for (std::size_t p = 0; p < hw; ++p) mu += xv[(s * c + ch) * hw + p];
    }
    mu /= count;
    T var = 0;
    for (std::size_t s = 0; s < n; ++s) {
      for (std::size_t p = 0; p < hw; ++p) {
        const T d = xv[(s * c + ch) * hw + p] - mu;
        var += d * d;
      }
    }
    var /= count;
    const T is = T(1) / std::sqrt(var + eps);
    (*inv_std)[ch] = is;
    for (std::size_t s = 0; s < n; ++s) {
      for (std::size_t p = 0; p < hw; ++p) {
        const auto idx = (s * c + ch) * hw + p;
        (*xhat)[idx] = (xv[idx] - mu) * is;
        out[idx] = gv[ch] * (*xhat)[idx] + bv[ch];
      }
    }
  }
  return tape.push("batch_norm", std::move(out), {x, gamma, beta},
                   [n, c, hw, count, xhat, inv_std](const auto& ctx) {
                     const auto& gv = *ctx.inputs[1];
                     for (std::size_t ch = 0; ch < c; ++ch) {
                       T sum_g = 0, sum_gx = 0;
                       for (std::size_t s = 0; s < n; ++s) {
                         for (std::size_t p = 0; p < hw; ++p) {
                           const auto idx = (s * c + ch) * hw + p;
                           sum_g += ctx.grad_out[idx];
                           sum_gx += ctx.grad_out[idx] * (*xhat)[idx];
                         }
                       }
                       if (auto* gg = ctx.grads[1]) (*gg)[ch] += sum_gx;
                       if (auto* gb = ctx.grads[2]) (*gb)[ch] += sum_g;
                       if (auto* gx = ctx.grads[0]) {
                         const T k = gv[ch] * (*inv_std)[ch] / count;
                         for (std::size_t s = 0; s < n; ++s) {
                           for (std::size_t p = 0; p < hw; ++p) {
                             const auto idx = (s * c + ch) * hw + p;
                             (*gx)[idx] += k * (count * ctx.grad_out[idx] - sum_g -
                                                (*xhat)[idx] * sum_gx);
                           }
                         }
                       }
                     }
                   });
}

template <typename T>
Var<T> l2_normalize(Var<T> x) {
  auto& tape = tape_of("l2_normalize", {x});
  const auto& xv = x.value();
  require_rank("l2_normalize", xv, 2);
  const auto n = xv.dim(0), d = xv.dim(1);
  constexpr T eps = std::numeric_limits<T>::min();
  auto norms = std::make_shared<std::vector<T>>(n);
  Tensor<T> out(xv.shape());
  for (std::size_t i = 0; i < n; ++i) {
    T ss = 0;
    for (std::size_t j = 0; j < d; ++j) ss += xv[i * d + j] * xv[i * d + j];
    const T norm = std::sqrt(ss + eps);
    (*norms)[i] = norm;
    for (std::size_t j = 0; j < d; ++j) out[i * d + j] = xv[i * d + j] / norm;
  }
  return tape.push("l2_normalize", std::move(out), {x}, [n, d, norms](const auto& ctx) {
    auto& g = *ctx.grads[0];
    const auto& y = ctx.output;
    for (std::size_t i = 0; i < n; ++i) {
      T dot = 0;
      for (std::size_t j = 0; j < d; ++j) dot += y[i * d + j] * ctx.grad_out[i * d + j];
      for (std::size_t j = 0; j < d; ++j) {
        g[i * d + j] += (ctx.grad_out[i * d + j] - y[i * d + j] * dot) / (*norms)[i];
      }
    }
  });
}

template <typename T>
Var<T> softmax(Var<T> x) {
  auto& tape = tape_of("softmax", {x});
  const auto& xv = x.value();
  require_rank("softmax", xv, 2);
  const auto n = xv.dim(0), k = xv.dim(1);
  require(k > 0, "softmax", "empty rows");
  Tensor<T> out(xv.shape());
  for (std::size_t i = 0; i < n; ++i) {
    const T* row = xv.raw() + i * k;
    const T mx = *std::max_element(row, row + k);
    T z = 0;
    for (std::size_t j = 0; j < k; ++j) z += (out[i * k + j] = std::exp(row[j] - mx));
    for (std::size_t j = 0; j < k; ++j) out[i * k + j] /= z;
  }
  return tape.push("softmax", std::move(out), {x}, [n, k](const auto& ctx) {
    auto& g = *ctx.grads[0];
    const auto& y = ctx.output;
    for (std::size_t i = 0; i < n; ++i) {
      T dot = 0;
      for (std::size_t j = 0; j < k; ++j) dot += ctx.grad_out[i * k + j] * y[i * k + j];
      for (std::size_t j = 0; j < k; ++j) {
        g[i * k + j] += y[i * k + j] * (ctx.grad_out[i * k + j] - dot);
      }
    }
  });
}

template <typename T>
Var<T> log_softmax(Var<T> x) {
  auto& tape = tape_of("log_softmax", {x});
  const auto& xv = x.value();
  require_rank("log_softmax", xv, 2);
  const auto n = xv.dim(0), k = xv.dim(1);
  require(k > 0, "log_softmax", "empty rows");
  Tensor<T> out(xv.shape());
  for (std::size_t i = 0; i < n; ++i) {
    const T* row = xv.raw() + i * k;
    const T mx = *std::max_element(row, row + k);
    T z = 0;
    for (std::size_t j = 0; j < k; ++j) z += std::exp(row[j] - mx);
    const T lse = mx + std::log(z);
    for (std::size_t j = 0; j < k; ++j) out[i * k + j] = row[j] - lse;
  }
  return tape.push("log_softmax", std::move(out), {x}, [n, k](const auto& ctx) {
    auto& g = *ctx.grads[0];
    const auto& y = ctx.output;
    for (std::size_t i = 0; i < n; ++i) {
      T total = 0;
      for (std::size_t j = 0; j < k; ++j) total += ctx.grad_out[i * k + j];
      for (std::size_t j = 0; j < k; ++j) {
        g[i * k + j] += ctx.grad_out[i * k + j] - std::exp(y[i * k + j]) * total;
      }
    }
  });
}

std::vector<std::string> required_op_set() {
  return {"add",        "sub",         "mul",        "scale",       "add_scalar",
          "add_const",  "relu",        "abs",        "square",      "cos",
          "acos",       "clamp",       "sum",        "mean",        "reshape",
          "flatten",    "pick",        "row_max",    "row_mean",    "channel_max",
          "matmul",     "linear",      "conv2d",     "max_pool2d",  "avg_pool2d",
          "batch_norm", "l2_normalize", "softmax",   "log_softmax"};
}

#define GABN_INSTANTIATE_AD(T)                                                   \
  template class Tape<T>;                                                        \
  template Var<T> add<T>(Var<T>, Var<T>);                                        \
  template Var<T> sub<T>(Var<T>, Var<T>);                                        \
  template Var<T> mul<T>(Var<T>, Var<T>);                                        \
  template Var<T> scale<T>(Var<T>, T);                                           \
  template Var<T> add_scalar<T>(Var<T>, T);                                      \
  template Var<T> add_const<T>(Var<T>, const Tensor<T>&);                        \
  template Var<T> relu<T>(Var<T>);                                               \
  template Var<T> abs<T>(Var<T>);                                                \
  template Var<T> square<T>(Var<T>);                                             \
  template Var<T> cos<T>(Var<T>);                                                \
  template Var<T> acos<T>(Var<T>);                                               \
  template Var<T> clamp<T>(Var<T>, T, T);                                        \
  template Var<T> sum<T>(Var<T>);                                                \
  template Var<T> mean<T>(Var<T>);                                               \
  template Var<T> reshape<T>(Var<T>, Shape);                                     \
  template Var<T> flatten<T>(Var<T>);                                            \
  template Var<T> pick<T>(Var<T>, std::span<const int>);                         \
  template Var<T> row_max<T>(Var<T>);                                            \
  template Var<T> row_mean<T>(Var<T>);                                           \
  template Var<T> channel_max<T>(Var<T>);                                        \
  template Var<T> matmul<T>(Var<T>, Var<T>);                                     \
  template Var<T> linear<T>(Var<T>, Var<T>);                                     \
  template Var<T> linear<T>(Var<T>, Var<T>, Var<T>);                             \
  template Var<T> conv2d<T>(Var<T>, Var<T>, Var<T>, Conv2dOptions);              \
  template Var<T> max_pool2d<T>(Var<T>, std::size_t, std::size_t);               \
  template Var<T> avg_pool2d<T>(Var<T>, std::size_t, std::size_t);               \
  template Var<T> batch_norm<T>(Var<T>, Var<T>, Var<T>, T);                      \
  template Var<T> l2_normalize<T>(Var<T>);                                       \
  template Var<T> softmax<T>(Var<T>);                                            \
  template Var<T> log_softmax<T>(Var<T>);

GABN_INSTANTIATE_AD(float)
GABN_INSTANTIATE_AD(double)

}  // namespace gabn::ad
