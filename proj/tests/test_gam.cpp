#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <fstream>

#include "gabn/gam.hpp"
#include "test_util.hpp"

using namespace gabn;

namespace {

// Tiny 2-layer net over [N, 2, 4, 4] images: conv3x3 -> relu -> linear -> softmax.
struct TinyNet {
  Tensor<double> conv_w, conv_b, fc_w;
  double logit_shift = 0.0;

  explicit TinyNet(Rng& rng)
      : conv_w(testutil::random_tensor({3, 2, 3, 3}, rng, -0.8, 0.8)),
        conv_b(testutil::random_tensor({3}, rng, -0.2, 0.2)),
        fc_w(testutil::random_tensor({5, 48}, rng, -0.5, 0.5)) {}

  ad::Var<double> logits(ad::Var<double> x) const {
    auto& tape = *x.tape;
    auto h = ad::relu(ad::conv2d(x, tape.leaf(conv_w), tape.leaf(conv_b), {1, 1}));
    auto z = ad::linear(ad::flatten(h), tape.leaf(fc_w));
    return logit_shift == 0.0 ? z : ad::add_scalar(z, logit_shift);
  }

  ProbabilityFn<double> probability_fn() const {
    return [this](ad::Var<double> x) { return ad::softmax(logits(x)); };
  }

  // Plain scalar T_GAM of one image, recomputed through compute_t_gam.
  double t_gam_of(const Tensor<double>& image) const {
    ad::Tape<double> tape;
    auto x = tape.leaf(Tensor<double>({1, 2, 4, 4}, std::vector<double>(image.data().begin(), image.data().end())));
    const auto p = ad::softmax(logits(x)).value();
    return compute_t_gam(p.data()).value;
  }
};

GamMap<double> filled(std::size_t h, std::size_t w, double v) {
  return {Tensor<double>({h, w, 1}, v)};
}

}  // namespace

TEST(ComputeTGam, Examples) {
  const std::vector<double> uniform{0.25, 0.25, 0.25, 0.25};
  const std::vector<double> onehot{1, 0, 0, 0};
  const std::vector<double> peaked{0.7, 0.1, 0.1, 0.1};
  EXPECT_DOUBLE_EQ(compute_t_gam(uniform).value, 0.0);
  EXPECT_DOUBLE_EQ(compute_t_gam(onehot).value, 0.75);
  EXPECT_NEAR(compute_t_gam(peaked).value, 0.45, 1e-15);
}

TEST(ComputeTGam, RejectsInvalidInput) {
  const std::vector<double> empty;
  const std::vector<double> unnormalized{0.5, 0.6};
  const std::vector<double> single{1.0};
  EXPECT_THROW(compute_t_gam(empty), DomainError);
  EXPECT_THROW(compute_t_gam(unnormalized), DomainError);
  EXPECT_THROW(compute_t_gam(single), DomainError);
}

TEST(ComputeTGam, BoundedAndPermutationInvariant) {
  Rng rng(51);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 2 + rng.uniform_int(0, 8);
    std::vector<double> p(n);
    double total = 0;
    for (auto& v : p) total += (v = rng.uniform(0.01, 1.0));
    for (auto& v : p) v /= total;
    const double value = compute_t_gam(p).value;
    EXPECT_GE(value, 0.0);
    EXPECT_LE(value, double(n - 1) / double(n) + 1e-12);
    auto shuffled = p;
    std::reverse(shuffled.begin(), shuffled.end());
    EXPECT_NEAR(compute_t_gam(shuffled).value, value, 1e-15);
  }
}

TEST(TGamTape, MatchesScalarDefinition) {
  Rng rng(52);
  ad::Tape<double> tape;
  auto logits = tape.leaf(testutil::random_tensor({6, 7}, rng, -3, 3));
  const auto probs = ad::softmax(logits);
  const auto t = t_gam(probs).value();
  for (std::size_t r = 0; r < 6; ++r) {
    std::span<const double> row(probs.value().raw() + r * 7, 7);
    EXPECT_NEAR(t[r], compute_t_gam(row).value, 1e-14);
  }
}

TEST(ComputeGam, MatchesFiniteDifferenceOnTinyNet) {
  Rng rng(53);
  TinyNet net(rng);
  const double h = 1e-6;
  for (int trial = 0; trial < 3; ++trial) {
    const auto images = testutil::random_tensor({1, 2, 4, 4}, rng, -1, 1);
    const auto gam = compute_gam<double>(net.probability_fn(), images).front();
    ASSERT_EQ(gam.height(), 4u);
    ASSERT_EQ(gam.width(), 4u);
    for (std::size_t y = 0; y < 4; ++y)
      for (std::size_t x = 0; x < 4; ++x) {
        double expected = 0;
        for (std::size_t c = 0; c < 2; ++c) {
          auto plus = images, minus = images;
          const auto i = (c * 4 + y) * 4 + x;
          plus[i] += h;
          minus[i] -= h;
          expected = std::max(expected, std::abs((net.t_gam_of(plus) - net.t_gam_of(minus)) / (2 * h)));
        }
        const double err = std::abs(gam.at(y, x) - expected) / std::max(std::abs(expected), 1e-3);
        EXPECT_LT(err, 1e-4) << "trial " << trial << " pixel " << y << "," << x;
      }
  }
}

TEST(ComputeGam, RecognizerMatchesFiniteDifference) {
  RecognizerConfig cfg;
  cfg.image_side = 8;
  cfg.channels = {3, 4};
  cfg.embedding_dim = 4;
  cfg.num_classes = 5;
  cfg.scale = 4.0;
  Recognizer<double> net(cfg, 9);
  Rng rng(54);
  const double h = 1e-6;
  auto t_of = [&](const Tensor<double>& img) {
    const auto pass = forward(net, img);
    const auto p = net.probabilities(pass.output).value();
    return compute_t_gam(p.data()).value;
  };
  for (int trial = 0; trial < 3; ++trial) {
    const auto img = testutil::random_tensor({3, 8, 8}, rng, -1, 1);
    const auto gam = compute_gam(net, img).front();
    double worst = 0;
    for (std::size_t y = 0; y < 8; ++y)
      for (std::size_t x = 0; x < 8; ++x) {
        double expected = 0;
        for (std::size_t c = 0; c < 3; ++c) {
          auto plus = img, minus = img;
          plus[(c * 8 + y) * 8 + x] += h;
          minus[(c * 8 + y) * 8 + x] -= h;
          expected = std::max(expected, std::abs((t_of(plus) - t_of(minus)) / (2 * h)));
        }
        worst = std::max(worst, std::abs(gam.at(y, x) - expected) / std::max(std::abs(expected), 1e-3));
      }
    EXPECT_LT(worst, 1e-4) << "trial " << trial;
  }
}

TEST(ComputeGam, ConstantNetworkGivesZeroMap) {
  const ProbabilityFn<double> constant = [](ad::Var<double> x) {
    const auto n = x.shape()[0];
    auto zero = ad::scale(ad::flatten(x), 0.0);
    auto logits = ad::linear(zero, x.tape->leaf(Tensor<double>({3, zero.shape()[1]}, 1.0)));
    return ad::softmax(ad::add_const(logits, Tensor<double>({n, 3}, std::vector<double>(3 * n, 0.5))));
  };
  Rng rng(55);
  const auto gams = compute_gam(constant, testutil::random_tensor({2, 3, 5, 6}, rng, -1, 1));
  ASSERT_EQ(gams.size(), 2u);
  for (const auto& g : gams) {
    EXPECT_EQ(g.height(), 5u);
    EXPECT_EQ(g.width(), 6u);
    for (double v : g.values.data()) EXPECT_EQ(v, 0.0);
  }
}

TEST(ComputeGam, LogitShiftInvariance) {
  Rng rng(56);
  TinyNet net(rng);
  const auto images = testutil::random_tensor({3, 2, 4, 4}, rng, -1, 1);
  const auto base = compute_gam<double>(net.probability_fn(), images);
  net.logit_shift = 7.25;
  const auto shifted = compute_gam<double>(net.probability_fn(), images);
  for (std::size_t n = 0; n < 3; ++n) {
    for (std::size_t i = 0; i < base[n].values.size(); ++i) {
      EXPECT_NEAR(base[n].values[i], shifted[n].values[i], 1e-10);
      EXPECT_GE(base[n].values[i], 0.0);
    }
  }
}

TEST(ComputeGam, BatchedEqualsPerImage) {
  Rng rng(57);
  TinyNet net(rng);
  const auto images = testutil::random_tensor({3, 2, 4, 4}, rng, -1, 1);
  const auto batched = compute_gam<double>(net.probability_fn(), images);
  for (std::size_t n = 0; n < 3; ++n) {
    Tensor<double> one({2, 4, 4}, std::vector<double>(images.raw() + n * 32, images.raw() + (n + 1) * 32));
    const auto single = compute_gam<double>(net.probability_fn(), one).front();
    for (std::size_t i = 0; i < 16; ++i) EXPECT_NEAR(batched[n].values[i], single.values[i], 1e-14);
  }
}

TEST(ComputeGam, ZeroClassNetworkRejected) {
  const ProbabilityFn<double> none = [](ad::Var<double> x) {
    return ad::linear(ad::flatten(x), x.tape->leaf(Tensor<double>({0, 4})));
  };
  EXPECT_THROW(compute_gam(none, Tensor<double>({1, 1, 2, 2})), DomainError);
}

TEST(NormalizeGam, ScalesByMaximum) {
  GamMap<double> m{Tensor<double>({1, 3, 1}, std::vector<double>{1, 2, 4})};
  const auto n = normalize_gam(m);
  EXPECT_DOUBLE_EQ(n.values[0], 0.25);
  EXPECT_DOUBLE_EQ(n.values[2], 1.0);
  const auto z = normalize_gam(filled(2, 2, 0.0));
  for (double v : z.values.data()) EXPECT_EQ(v, 0.0);
}

TEST(AverageGam, Examples) {
  Rng rng(58);
  GamMap<double> a{testutil::random_tensor({3, 4, 1}, rng, 0, 1)};
  {
    const std::vector<GamMap<double>> maps{a};
    const std::vector<int> groups{0};
    const auto avg = average_gam(std::span<const GamMap<double>>(maps), std::span<const int>(groups));
    EXPECT_TRUE(avg.at(0).values == a.values);
  }
  {
    const std::vector<GamMap<double>> maps{a, a};
    const std::vector<int> groups{2, 2};
    const auto avg = average_gam(std::span<const GamMap<double>>(maps), std::span<const int>(groups));
    for (std::size_t i = 0; i < a.values.size(); ++i) EXPECT_DOUBLE_EQ(avg.at(2).values[i], a.values[i]);
  }
  {
    const std::vector<GamMap<double>> maps{filled(2, 2, 0), filled(2, 2, 2), filled(2, 2, 5)};
    const std::vector<int> groups{0, 0, 1};
    const auto avg = average_gam(std::span<const GamMap<double>>(maps), std::span<const int>(groups));
    ASSERT_EQ(avg.size(), 2u);
    for (double v : avg.at(0).values.data()) EXPECT_EQ(v, 1.0);
    for (double v : avg.at(1).values.data()) EXPECT_EQ(v, 5.0);
  }
}

TEST(AverageGam, ShapeMismatchRejected) {
  const std::vector<GamMap<double>> maps{filled(2, 2, 1), filled(2, 3, 1)};
  const std::vector<int> groups{0, 0};
  EXPECT_THROW(average_gam(std::span<const GamMap<double>>(maps), std::span<const int>(groups)), ShapeError);
}

TEST(GamSupport, CountsPixelsAboveFractionOfMax) {
  GamMap<double> m{Tensor<double>({1, 5, 1}, std::vector<double>{0, 0.1, 0.2, 0.5, 1.0})};
  EXPECT_EQ(gam_support(m), 2u);  // 0.2 itself is not strictly above
  EXPECT_EQ(gam_support(m, 0.05), 4u);
  EXPECT_EQ(gam_support(filled(3, 3, 0.0)), 0u);
}

TEST(GamIo, PgmHeaderAndScaling) {
  const auto dir = testutil::fresh_dir("gam_pgm");
  GamMap<double> m{Tensor<double>({2, 3, 1}, std::vector<double>{0, 1, 2, 3, 4, 8})};
  write_gam_pgm(dir / "m.pgm", m);
  std::ifstream in(dir / "m.pgm", std::ios::binary);
  std::string magic;
  int w, h, maxval;
  in >> magic >> w >> h >> maxval;
  in.get();
  std::vector<unsigned char> px(6);
  in.read(reinterpret_cast<char*>(px.data()), 6);
  EXPECT_EQ(magic, "P5");
  EXPECT_EQ(w, 3);
  EXPECT_EQ(h, 2);
  EXPECT_EQ(maxval, 255);
  EXPECT_EQ(px, (std::vector<unsigned char>{0, 32, 64, 96, 128, 255}));
}

TEST(GamIo, RawRoundTrip) {
  const auto dir = testutil::fresh_dir("gam_raw");
  Rng rng(59);
  GamMap<float> m{testutil::random_tensor<float>({5, 7, 1}, rng, 0, 3)};
  write_gam_raw(dir / "m.raw", m);
  EXPECT_EQ(std::filesystem::file_size(dir / "m.raw"), 8u + 35u * 4u);
  const auto back = read_gam_raw(dir / "m.raw");
  EXPECT_TRUE(back.values == m.values);
}

TEST(ResizeGam, IdentityAndConstant) {
  Rng rng(60);
  GamMap<float> m{testutil::random_tensor<float>({4, 6, 1}, rng, 0, 1)};
  EXPECT_TRUE(resize_gam(m, 4, 6).values == m.values);
  GamMap<float> c{Tensor<float>({3, 3, 1}, 0.5f)};
  const auto big = resize_gam(c, 10, 7);
  EXPECT_EQ(big.height(), 10u);
  EXPECT_EQ(big.width(), 7u);
  for (float v : big.values.data()) EXPECT_FLOAT_EQ(v, 0.5f);
}
