#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <map>
#include <set>

#include "gabn/autodiff.hpp"
#include "gabn/random.hpp"
#include "test_util.hpp"

using namespace gabn;
using ad::Var;
using Tape = ad::Tape<double>;

namespace {

using OpFn = std::function<Var<double>(Tape&, const std::vector<Var<double>>&)>;

// Largest relative error between the tape gradient and central differences of
// sum(weights * f(inputs)) over every input entry. Denominators are floored at
// 1e-3 so entries with near-zero gradient are compared in absolute terms.
struct FdResult {
  double max_rel_err = 0;
  std::size_t points = 0;
};

FdResult finite_difference_check(const std::vector<Tensor<double>>& inputs, const OpFn& f,
                                 Rng& rng, double h = 1e-5) {
  auto evaluate = [&](const std::vector<Tensor<double>>& xs, const Tensor<double>* weights,
                      std::vector<Tensor<double>>* grads) {
    Tape tape;
    std::vector<Var<double>> vars;
    for (const auto& x : xs) vars.push_back(tape.leaf(x, true));
    auto out = f(tape, vars);
    auto obj = ad::sum(ad::mul(out, tape.leaf(*weights)));
    if (grads) {
      const auto g = tape.backward(obj);
      for (auto v : vars) grads->push_back(g.wrt(v));
    }
    return obj.value().item();
  };

  Tensor<double> weights;
  {
    Tape probe;
    std::vector<Var<double>> vars;
    for (const auto& x : inputs) vars.push_back(probe.leaf(x, true));
    weights = testutil::random_tensor(f(probe, vars).shape(), rng, -1.0, 1.0);
  }
  std::vector<Tensor<double>> analytic;
  evaluate(inputs, &weights, &analytic);

  FdResult res;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    for (std::size_t i = 0; i < inputs[k].size(); ++i) {
      auto plus = inputs, minus = inputs;
      plus[k][i] += h;
      minus[k][i] -= h;
      const double numeric =
          (evaluate(plus, &weights, nullptr) - evaluate(minus, &weights, nullptr)) / (2 * h);
      const double a = analytic[k][i];
      const double denom = std::max({std::abs(a), std::abs(numeric), 1e-3});
      res.max_rel_err = std::max(res.max_rel_err, std::abs(a - numeric) / denom);
      ++res.points;
    }
  }
  return res;
}

struct OpCase {
  std::string name;
  std::function<std::vector<Tensor<double>>(Rng&)> make_inputs;
  OpFn f;
};

Tensor<double> away_from_zero(Shape s, Rng& rng) {
  auto t = testutil::random_tensor(std::move(s), rng, 0.1, 1.0);
  for (auto& v : t.data()) v = rng.uniform() < 0.5 ? -v : v;
  return t;
}

// Distinct values with gaps far wider than the finite-difference step.
Tensor<double> spread_values(Shape s, Rng& rng) {
  Tensor<double> t(std::move(s));
  std::vector<std::size_t> order(t.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  rng.shuffle(order.begin(), order.end());
  for (std::size_t i = 0; i < t.size(); ++i) t[order[i]] = 0.05 * double(i) - 1.0;
  return t;
}

std::vector<OpCase> op_cases() {
  using V = std::vector<Var<double>>;
  auto rnd = [](Shape s) {
    return [s](Rng& r) { return std::vector{testutil::random_tensor(s, r, -1.0, 1.0)}; };
  };
  auto rnd2 = [](Shape a, Shape b) {
    return [a, b](Rng& r) {
      return std::vector{testutil::random_tensor(a, r, -1.0, 1.0),
                         testutil::random_tensor(b, r, -1.0, 1.0)};
    };
  };
  std::vector<OpCase> cases;
  cases.push_back({"add", rnd2({4, 5}, {4, 5}), [](Tape&, const V& v) { return ad::add(v[0], v[1]); }});
  cases.push_back({"sub", rnd2({4, 5}, {4, 5}), [](Tape&, const V& v) { return ad::sub(v[0], v[1]); }});
  cases.push_back({"mul", rnd2({4, 5}, {4, 5}), [](Tape&, const V& v) { return ad::mul(v[0], v[1]); }});
  cases.push_back({"scale", rnd({6, 5}), [](Tape&, const V& v) { return ad::scale(v[0], -2.5); }});
  cases.push_back({"add_scalar", rnd({6, 5}), [](Tape&, const V& v) { return ad::add_scalar(v[0], 0.7); }});
  cases.push_back({"add_const", rnd({6, 5}), [](Tape&, const V& v) {
                     Tensor<double> c(v[0].shape(), 0.3);
                     return ad::square(ad::add_const(v[0], c));
                   }});
  cases.push_back({"relu", [](Rng& r) { return std::vector{away_from_zero({6, 5}, r)}; },
                   [](Tape&, const V& v) { return ad::relu(v[0]); }});
  cases.push_back({"abs", [](Rng& r) { return std::vector{away_from_zero({6, 5}, r)}; },
                   [](Tape&, const V& v) { return ad::abs(v[0]); }});
  cases.push_back({"square", rnd({6, 5}), [](Tape&, const V& v) { return ad::square(v[0]); }});
  cases.push_back({"cos", rnd({6, 5}), [](Tape&, const V& v) { return ad::cos(v[0]); }});
  cases.push_back({"acos",
                   [](Rng& r) { return std::vector{testutil::random_tensor({6, 5}, r, -0.9, 0.9)}; },
                   [](Tape&, const V& v) { return ad::acos(v[0]); }});
  cases.push_back({"clamp",
                   [](Rng& r) {
                     auto t = testutil::random_tensor({6, 5}, r, -1.0, 1.0);
                     for (auto& x : t.data()) {
                       if (std::abs(std::abs(x) - 0.5) < 0.05) x *= 1.3;
                     }
                     return std::vector{t};
                   },
                   [](Tape&, const V& v) { return ad::clamp(v[0], -0.5, 0.5); }});
  cases.push_back({"sum", rnd({6, 5}), [](Tape&, const V& v) { return ad::sum(ad::square(v[0])); }});
  cases.push_back({"mean", rnd({6, 5}), [](Tape&, const V& v) { return ad::mean(ad::square(v[0])); }});
  cases.push_back({"reshape", rnd({6, 5}), [](Tape&, const V& v) {
                     return ad::square(ad::reshape(v[0], {3, 10}));
                   }});
  cases.push_back({"flatten", rnd({2, 3, 4, 5}), [](Tape&, const V& v) {
                     return ad::square(ad::flatten(v[0]));
                   }});
  cases.push_back({"pick", rnd({30, 4}), [](Tape&, const V& v) {
                     std::vector<int> labels(30);
                     for (int i = 0; i < 30; ++i) labels[i] = (i * 7) % 4;
                     return ad::square(ad::pick(v[0], std::span<const int>(labels)));
                   }});
  cases.push_back({"row_max", [](Rng& r) { return std::vector{spread_values({8, 5}, r)}; },
                   [](Tape&, const V& v) { return ad::square(ad::row_max(v[0])); }});
  cases.push_back({"row_mean", rnd({8, 5}), [](Tape&, const V& v) {
                     return ad::square(ad::row_mean(v[0]));
                   }});
  cases.push_back({"channel_max", [](Rng& r) { return std::vector{spread_values({2, 3, 4, 4}, r)}; },
                   [](Tape&, const V& v) { return ad::channel_max(v[0]); }});
  cases.push_back({"matmul", rnd2({5, 4}, {4, 6}), [](Tape&, const V& v) { return ad::matmul(v[0], v[1]); }});
  cases.push_back({"linear",
                   [](Rng& r) {
                     return std::vector{testutil::random_tensor({5, 4}, r, -1.0, 1.0),
                                        testutil::random_tensor({3, 4}, r, -1.0, 1.0),
                                        testutil::random_tensor({3}, r, -1.0, 1.0)};
                   },
                   [](Tape&, const V& v) { return ad::linear(v[0], v[1], v[2]); }});
  cases.push_back({"linear", rnd2({5, 4}, {3, 4}), [](Tape&, const V& v) { return ad::linear(v[0], v[1]); }});
  for (std::size_t stride : {1u, 2u}) {
    for (std::size_t pad : {0u, 1u}) {
      cases.push_back({"conv2d",
                       [](Rng& r) {
                         return std::vector{testutil::random_tensor({2, 2, 5, 5}, r, -1.0, 1.0),
                                            testutil::random_tensor({3, 2, 3, 3}, r, -1.0, 1.0),
                                            testutil::random_tensor({3}, r, -1.0, 1.0)};
                       },
                       [stride, pad](Tape&, const V& v) {
                         return ad::conv2d(v[0], v[1], v[2], {stride, pad});
                       }});
    }
  }
  cases.push_back({"max_pool2d", [](Rng& r) { return std::vector{spread_values({2, 2, 6, 6}, r)}; },
                   [](Tape&, const V& v) { return ad::max_pool2d(v[0], 2, 2); }});
  cases.push_back({"max_pool2d", [](Rng& r) { return std::vector{spread_values({1, 2, 5, 5}, r)}; },
                   [](Tape&, const V& v) { return ad::max_pool2d(v[0], 3, 1); }});
  cases.push_back({"avg_pool2d", rnd({2, 2, 6, 6}), [](Tape&, const V& v) { return ad::avg_pool2d(v[0], 2, 2); }});
  cases.push_back({"avg_pool2d", rnd({1, 2, 5, 5}), [](Tape&, const V& v) { return ad::avg_pool2d(v[0], 3, 1); }});
  cases.push_back({"batch_norm",
                   [](Rng& r) {
                     return std::vector{testutil::random_tensor({3, 2, 3, 3}, r, -1.0, 1.0),
                                        testutil::random_tensor({2}, r, 0.5, 1.5),
                                        testutil::random_tensor({2}, r, -1.0, 1.0)};
                   },
                   [](Tape&, const V& v) { return ad::batch_norm(v[0], v[1], v[2]); }});
  cases.push_back({"l2_normalize", rnd({8, 5}), [](Tape&, const V& v) { return ad::l2_normalize(v[0]); }});
  cases.push_back({"softmax", rnd({8, 5}), [](Tape&, const V& v) { return ad::softmax(v[0]); }});
  cases.push_back({"log_softmax", rnd({8, 5}), [](Tape&, const V& v) { return ad::log_softmax(v[0]); }});
  return cases;
}

}  // namespace

TEST(AutodiffGradients, EveryRegisteredOpMatchesCentralDifferences) {
  Rng rng(2024);
  std::map<std::string, FdResult> per_op;
  for (const auto& c : op_cases()) {
    // Several random draws per case until the op has >= 100 checked points.
    for (int draw = 0; draw < 200 && per_op[c.name].points < 100; ++draw) {
      const auto r = finite_difference_check(c.make_inputs(rng), c.f, rng);
      auto& acc = per_op[c.name];
      acc.points += r.points;
      acc.max_rel_err = std::max(acc.max_rel_err, r.max_rel_err);
    }
  }
  for (const auto& name : ad::required_op_set()) {
    ASSERT_TRUE(per_op.count(name)) << "op without gradient check: " << name;
    EXPECT_GE(per_op[name].points, 100u) << name;
    EXPECT_LT(per_op[name].max_rel_err, 1e-4) << name;
  }
}

TEST(AutodiffGradients, SquareAtThreeHasGradientSix) {
  Tape tape;
  auto x = tape.leaf(Tensor<double>::scalar(3.0), true);
  auto y = ad::square(x);
  EXPECT_DOUBLE_EQ(tape.backward(y).wrt(x).item(), 6.0);
}

TEST(AutodiffGradients, ObjectiveIndependentOfInputGivesZeroGradient) {
  Tape tape;
  auto x = tape.leaf(Tensor<double>({2, 3}, 1.5), true);
  auto c = tape.leaf(Tensor<double>::scalar(4.0), true);
  auto y = ad::square(c);
  const auto g = tape.backward(y);
  EXPECT_FALSE(g.reached(x));
  const auto gx = g.wrt(x);
  for (double v : gx.data()) EXPECT_EQ(v, 0.0);
}

TEST(AutodiffGradients, BackwardIsLinearInTheObjective) {
  Rng rng(5);
  const auto x0 = testutil::random_tensor({4, 6}, rng, -1.0, 1.0);
  auto grad_of = [&](double a, double b) {
    Tape tape;
    auto x = tape.leaf(x0, true);
    auto f = ad::sum(ad::log_softmax(x));
    auto g = ad::sum(ad::cos(ad::square(x)));
    auto obj = ad::add(ad::scale(f, a), ad::scale(g, b));
    return tape.backward(obj).wrt(x);
  };
  const double a = 0.7, b = -1.3;
  const auto combo = grad_of(a, b), gf = grad_of(1, 0), gg = grad_of(0, 1);
  for (std::size_t i = 0; i < combo.size(); ++i) {
    EXPECT_NEAR(combo[i], a * gf[i] + b * gg[i], 1e-10);
  }
}

TEST(AutodiffGradients, EachNodeVisitedOnceEvenWithSharedSubexpressions) {
  Tape tape;
  auto x = tape.leaf(Tensor<double>({3}, 2.0), true);
  auto y = ad::square(x);
  auto z = ad::add(y, y);  // y used twice
  auto obj = ad::sum(z);
  const auto g = tape.backward(obj);
  EXPECT_EQ(tape.last_backward_visits(), tape.size() - 1);  // every non-leaf node once
  const auto gx = g.wrt(x);
  for (double v : gx.data()) EXPECT_DOUBLE_EQ(v, 8.0);
}

TEST(AutodiffErrors, NonScalarObjectiveRejected) {
  Tape tape;
  auto x = tape.leaf(Tensor<double>({2, 2}, 1.0), true);
  EXPECT_THROW(tape.backward(ad::square(x)), ShapeError);
}

TEST(AutodiffErrors, ShapeMismatchNamesTheOp) {
  Tape tape;
  auto x = tape.leaf(Tensor<double>({1, 3, 4, 4}));
  auto w = tape.leaf(Tensor<double>({2, 1, 3, 3}));
  auto b = tape.leaf(Tensor<double>({2}));
  try {
    ad::conv2d(x, w, b, {});
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("conv2d"), std::string::npos) << e.what();
  }
  auto a = tape.leaf(Tensor<double>({2, 3}));
  auto c = tape.leaf(Tensor<double>({3, 2}));
  try {
    ad::add(a, c);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("add"), std::string::npos) << e.what();
  }
}

TEST(AutodiffErrors, AcosOutsideOpenIntervalRejected) {
  Tape tape;
  auto x = tape.leaf(Tensor<double>({1}, 1.0));
  EXPECT_THROW(ad::acos(x), DomainError);
}

TEST(AutodiffOps, SoftmaxOfEqualLogitsIsUniform) {
  Tape tape;
  auto p = ad::softmax(tape.leaf(Tensor<double>({1, 4}, 3.7)));
  for (double v : p.value().data()) EXPECT_DOUBLE_EQ(v, 0.25);
}

TEST(AutodiffOps, SoftmaxShiftInvariance) {
  Rng rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    const auto x = testutil::random_tensor({3, 7}, rng, -5.0, 5.0);
    const double c = rng.uniform(-20, 20);
    Tensor<double> shifted = x;
    for (auto& v : shifted.data()) v += c;
    Tape tape;
    const auto p = ad::softmax(tape.leaf(x)).value();
    const auto q = ad::softmax(tape.leaf(shifted)).value();
    for (std::size_t i = 0; i < p.size(); ++i) EXPECT_NEAR(p[i], q[i], 1e-12);
  }
}

TEST(AutodiffOps, L2NormalizedRowHasUnitSelfDot) {
  Rng rng(3);
  Tape tape;
  auto n = ad::l2_normalize(tape.leaf(testutil::random_tensor({4, 9}, rng, -2.0, 2.0)));
  auto dots = ad::linear(n, n);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(dots.value()[i * 4 + i], 1.0, 1e-12);
}

TEST(AutodiffOps, ChannelMaxOfAbs) {
  // Pixel 0 holds channels (1, -3), pixel 1 holds (2, 0); NCHW stores channel-major.
  Tape tape;
  auto x = tape.leaf(Tensor<double>({1, 2, 1, 2}, std::vector<double>{1, 2, -3, 0}));
  auto m = ad::channel_max(ad::abs(x));
  EXPECT_EQ(m.value().shape(), (Shape{1, 1, 1, 2}));
  EXPECT_DOUBLE_EQ(m.value()[0], 3.0);
  EXPECT_DOUBLE_EQ(m.value()[1], 2.0);
}

TEST(AutodiffOps, ConvolutionMatchesDirectLoop) {
  Rng rng(17);
  const auto x = testutil::random_tensor({2, 3, 6, 5}, rng, -1.0, 1.0);
  const auto w = testutil::random_tensor({4, 3, 3, 3}, rng, -1.0, 1.0);
  const auto b = testutil::random_tensor({4}, rng, -1.0, 1.0);
  for (std::size_t stride : {1u, 2u}) {
    for (std::size_t pad : {0u, 1u}) {
      Tape tape;
      const auto y =
          ad::conv2d(tape.leaf(x), tape.leaf(w), tape.leaf(b), {stride, pad}).value();
      const std::size_t oh = (6 + 2 * pad - 3) / stride + 1, ow = (5 + 2 * pad - 3) / stride + 1;
      ASSERT_EQ(y.shape(), (Shape{2, 4, oh, ow}));
      for (std::size_t n = 0; n < 2; ++n)
        for (std::size_t o = 0; o < 4; ++o)
          for (std::size_t i = 0; i < oh; ++i)
            for (std::size_t j = 0; j < ow; ++j) {
              double acc = b[o];
              for (std::size_t c = 0; c < 3; ++c)
                for (std::size_t ki = 0; ki < 3; ++ki)
                  for (std::size_t kj = 0; kj < 3; ++kj) {
                    const long r = long(i * stride + ki) - long(pad);
                    const long q = long(j * stride + kj) - long(pad);
                    if (r < 0 || q < 0 || r >= 6 || q >= 5) continue;
                    acc += x[((n * 3 + c) * 6 + r) * 5 + q] * w[((o * 3 + c) * 3 + ki) * 3 + kj];
                  }
              EXPECT_NEAR(y[((n * 4 + o) * oh + i) * ow + j], acc, 1e-12);
            }
    }
  }
}

TEST(AutodiffTape, GradientBundleSumsRepeatedParameterBindings) {
  Parameter<double> p{"w", Tensor<double>({2}, std::vector<double>{1.0, 2.0})};
  Tape tape;
  auto a = tape.parameter(p);
  auto b = tape.parameter(p);
  auto obj = ad::sum(ad::add(ad::square(a), ad::scale(b, 3.0)));
  const auto bundle = tape.gradient_bundle(obj);
  ASSERT_EQ(bundle.parameters.count("w"), 1u);
  EXPECT_DOUBLE_EQ(bundle.parameters.at("w")[0], 2.0 * 1.0 + 3.0);
  EXPECT_DOUBLE_EQ(bundle.parameters.at("w")[1], 2.0 * 2.0 + 3.0);
  EXPECT_FALSE(bundle.input.has_value());
}
