#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <set>

#include "gabn/data.hpp"
#include "test_util.hpp"

using namespace gabn;

namespace {

SyntheticSpec small_spec() {
  SyntheticSpec s;
  s.ids_per_group = 3;
  s.eval_ids_per_group = 2;
  s.images_per_id = 3;
  s.image_side = 16;
  return s;
}

// Softmax regression on 4x4-average-pooled pixels, plain gradient descent.
struct LinearProbe {
  std::size_t features, classes;
  std::vector<double> w;  // [classes, features + 1]

  LinearProbe(std::size_t f, std::size_t c) : features(f), classes(c), w(c * (f + 1), 0.0) {}

  std::vector<double> scores(const std::vector<double>& x) const {
    std::vector<double> s(classes);
    for (std::size_t k = 0; k < classes; ++k) {
      double acc = w[k * (features + 1) + features];
      for (std::size_t j = 0; j < features; ++j) acc += w[k * (features + 1) + j] * x[j];
      s[k] = acc;
    }
    return s;
  }

  void fit(const std::vector<std::vector<double>>& xs, const std::vector<int>& ys, int iters, double lr) {
    for (int it = 0; it < iters; ++it) {
      std::vector<double> grad(w.size(), 0.0);
      for (std::size_t n = 0; n < xs.size(); ++n) {
        auto s = scores(xs[n]);
        const double mx = *std::max_element(s.begin(), s.end());
        double z = 0;
        for (auto& v : s) z += (v = std::exp(v - mx));
        for (std::size_t k = 0; k < classes; ++k) {
          const double d = s[k] / z - (int(k) == ys[n] ? 1.0 : 0.0);
          for (std::size_t j = 0; j < features; ++j) grad[k * (features + 1) + j] += d * xs[n][j];
          grad[k * (features + 1) + features] += d;
        }
      }
      for (std::size_t i = 0; i < w.size(); ++i) w[i] -= lr * grad[i] / double(xs.size());
    }
  }

  int predict(const std::vector<double>& x) const {
    const auto s = scores(x);
    return int(std::max_element(s.begin(), s.end()) - s.begin());
  }
};

std::vector<double> pooled_pixels(const GroupedDataset& ds, std::size_t i) {
  const auto side = ds.image_side, cell = std::size_t{4}, out = side / cell;
  const auto img = ds.image(i);
  std::vector<double> f(3 * out * out, 0.0);
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = 0; y < side; ++y)
      for (std::size_t x = 0; x < side; ++x) {
        f[(c * out + y / cell) * out + x / cell] += img[(c * side + y) * side + x] / double(cell * cell);
      }
  return f;
}

}  // namespace

TEST(SyntheticData, CountsAreBalanced) {
  SyntheticSpec s;
  s.eval_ids_per_group = 0;
  const auto ds = generate_synthetic_dataset(s);
  EXPECT_EQ(ds.size(), 800u);
  EXPECT_EQ(ds.images.shape(), (Shape{800, 3, 64, 64}));
  std::vector<int> per_group(4, 0);
  for (int g : ds.group) ++per_group[g];
  EXPECT_EQ(per_group, (std::vector<int>{200, 200, 200, 200}));
  EXPECT_EQ(ds.num_train_classes(), 80u);
}

TEST(SyntheticData, SameSeedIsBitwiseIdentical) {
  const auto a = generate_synthetic_dataset(small_spec());
  const auto b = generate_synthetic_dataset(small_spec());
  EXPECT_TRUE(a.images == b.images);
  EXPECT_EQ(a.identity, b.identity);
  auto other = small_spec();
  other.seed = 2;
  EXPECT_FALSE(generate_synthetic_dataset(other).images == a.images);
}

TEST(SyntheticData, EvalIdentitiesDisjointFromTrain) {
  const auto ds = generate_synthetic_dataset(small_spec());
  std::set<int> train_ids, eval_ids;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    (ds.split[i] == Split::train ? train_ids : eval_ids).insert(ds.identity[i]);
    EXPECT_EQ(ds.identity_group[ds.identity[i]], ds.group[i]);
  }
  std::vector<int> both;
  std::set_intersection(train_ids.begin(), train_ids.end(), eval_ids.begin(), eval_ids.end(),
                        std::back_inserter(both));
  EXPECT_TRUE(both.empty());
  EXPECT_EQ(train_ids.size(), 12u);
  EXPECT_EQ(eval_ids.size(), 8u);
  for (int id : eval_ids) EXPECT_EQ(ds.train_class[id], -1);
}

TEST(SyntheticData, PixelsWithinPreprocessedRange) {
  const auto ds = generate_synthetic_dataset(small_spec());
  for (float v : ds.images.data()) {
    EXPECT_GE(v, -0.99609375f);
    EXPECT_LE(v, 0.99609375f);
  }
}

TEST(SyntheticData, LinearProbeSeparatesGroups) {
  // Default generator settings; probe scored on held-out identities.
  const auto ds = generate_synthetic_dataset(SyntheticSpec{});
  std::vector<std::vector<double>> train_x, test_x;
  std::vector<int> train_y, test_y;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    auto& xs = ds.split[i] == Split::train ? train_x : test_x;
    auto& ys = ds.split[i] == Split::train ? train_y : test_y;
    xs.push_back(pooled_pixels(ds, i));
    ys.push_back(ds.group[i]);
  }
  LinearProbe probe(train_x.front().size(), 4);
  probe.fit(train_x, train_y, 300, 0.5);
  std::size_t correct = 0;
  for (std::size_t n = 0; n < test_x.size(); ++n) correct += probe.predict(test_x[n]) == test_y[n];
  EXPECT_GT(100.0 * double(correct) / double(test_x.size()), 90.0);
}

TEST(Preprocess, Examples) {
  EXPECT_EQ(preprocess_value(127.5), 0.0f);
  EXPECT_EQ(preprocess_value(255), 0.99609375f);
  EXPECT_EQ(preprocess_value(0), -0.99609375f);
  EXPECT_THROW(preprocess_value(-1), DomainError);
  EXPECT_THROW(preprocess_value(255.5), DomainError);
  EXPECT_THROW(preprocess_value(std::nan("")), DomainError);
}

TEST(Preprocess, RoundTripWithinOneStep) {
  RgbImage img{5, 7, {}};
  for (std::size_t i = 0; i < 5 * 7 * 3; ++i) img.pixels.push_back(std::uint8_t((i * 37) % 256));
  const auto t = preprocess(img);
  ASSERT_EQ(t.shape(), (Shape{3, 5, 7}));
  const auto back = deprocess(t);
  EXPECT_EQ(back.pixels, img.pixels);
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t p = 0; p < 35; ++p) {
      const double restored = double(t[c * 35 + p]) * 128.0 + 127.5;
      EXPECT_LT(std::abs(restored - img.pixels[p * 3 + c]) / 255.0, 1.0 / 256.0);
    }
}

TEST(ImageDataset, ExportImportRoundTrip) {
  const auto dir = testutil::fresh_dir("data_roundtrip");
  auto ds = generate_synthetic_dataset(small_spec());
  export_image_dataset(ds, dir);
  const auto back = load_image_dataset(dir, 16);
  ASSERT_EQ(back.size(), ds.size());
  EXPECT_EQ(back.group_names, ds.group_names);
  // Files are sorted by group, identity, file name; export order matches.
  std::size_t i = 0;
  for (std::size_t g = 0; g < ds.num_groups(); ++g) {
    std::vector<std::string> names;
    for (std::size_t k = 0; k < ds.size(); ++k)
      if (ds.group[k] == int(g)) names.push_back(ds.identity_names[ds.identity[k]]);
    std::sort(names.begin(), names.end());
    for (const auto& name : names) {
      EXPECT_EQ(back.identity_names[back.identity[i]], name);
      EXPECT_EQ(back.group[i], int(g));
      ++i;
    }
  }
  std::vector<float> a(ds.images.data().begin(), ds.images.data().end());
  std::vector<float> b(back.images.data().begin(), back.images.data().end());
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  EXPECT_EQ(a, b);
}

TEST(ImageDataset, TwoGroupsOneImageEach) {
  const auto dir = testutil::fresh_dir("data_two");
  for (const char* g : {"a", "b"}) {
    std::filesystem::create_directories(dir / g / "id0");
    write_ppm(dir / g / "id0" / "x.ppm", RgbImage{4, 4, std::vector<std::uint8_t>(48, 200)});
  }
  {
    std::ofstream junk(dir / "a" / "id0" / "broken.ppm");
    junk << "P6 garbage";
  }
  const auto ds = load_image_dataset(dir, 8);
  EXPECT_EQ(ds.size(), 2u);
  EXPECT_EQ(ds.group_names, (std::vector<std::string>{"a", "b"}));
  EXPECT_EQ(ds.images.shape(), (Shape{2, 3, 8, 8}));
}

TEST(ImageDataset, MissingDirectoryNamesThePath) {
  try {
    load_image_dataset("/nonexistent/faces", 8);
    FAIL() << "expected IoError";
  } catch (const IoError& e) {
    EXPECT_NE(std::string(e.what()).find("/nonexistent/faces"), std::string::npos);
  }
}

TEST(ImageDataset, EmptyGroupRejected) {
  const auto dir = testutil::fresh_dir("data_empty_group");
  std::filesystem::create_directories(dir / "a" / "id0");
  write_ppm(dir / "a" / "id0" / "x.ppm", RgbImage{4, 4, std::vector<std::uint8_t>(48, 10)});
  std::filesystem::create_directories(dir / "b" / "id0");
  EXPECT_THROW(load_image_dataset(dir, 8), IoError);
}

TEST(VerificationPairs, CountsFractionsAndGroups) {
  const auto ds = generate_synthetic_dataset(small_spec());
  const auto pairs = sample_verification_pairs(ds, 100, 0.5, 3);
  ASSERT_EQ(pairs.size(), 400u);
  std::vector<int> per_group(4, 0), positives(4, 0);
  for (const auto& p : pairs) {
    ++per_group[p.group];
    positives[p.group] += p.same;
    EXPECT_EQ(ds.group[p.a], p.group);
    EXPECT_EQ(ds.group[p.b], p.group);
    EXPECT_EQ(ds.split[p.a], Split::eval);
    EXPECT_EQ(ds.split[p.b], Split::eval);
    EXPECT_NE(p.a, p.b);
    EXPECT_EQ(p.same, ds.identity[p.a] == ds.identity[p.b]);
  }
  EXPECT_EQ(per_group, (std::vector<int>{100, 100, 100, 100}));
  EXPECT_EQ(positives, (std::vector<int>{50, 50, 50, 50}));

  for (const auto& p : sample_verification_pairs(ds, 20, 1.0, 4)) EXPECT_TRUE(p.same);
  for (const auto& p : sample_verification_pairs(ds, 20, 0.0, 4)) EXPECT_FALSE(p.same);
  const auto again = sample_verification_pairs(ds, 100, 0.5, 3);
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    EXPECT_EQ(pairs[i].a, again[i].a);
    EXPECT_EQ(pairs[i].b, again[i].b);
  }
}

TEST(VerificationPairs, InsufficientIdentitiesReportCounts) {
  auto s = small_spec();
  s.eval_ids_per_group = 1;
  const auto ds = generate_synthetic_dataset(s);
  try {
    sample_verification_pairs(ds, 10, 0.5, 1);
    FAIL() << "expected DomainError";
  } catch (const DomainError& e) {
    EXPECT_NE(std::string(e.what()).find("1 eval identities"), std::string::npos) << e.what();
  }
}

TEST(PairsCsv, RoundTripAndMalformedLine) {
  const auto dir = testutil::fresh_dir("pairs_csv");
  const std::vector<PairRecord> recs{{"a/1.ppm", "a/2.ppm", true, "g0"}, {"b/1.ppm", "c/1.ppm", false, "g1"}};
  write_pairs_csv(dir / "p.csv", recs);
  const auto back = read_pairs_csv(dir / "p.csv");
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[1].path_b, "c/1.ppm");
  EXPECT_FALSE(back[1].same);
  EXPECT_EQ(back[0].group, "g0");
  {
    std::ofstream bad(dir / "bad.csv");
    bad << "x,y,2,g\n";
  }
  EXPECT_THROW(read_pairs_csv(dir / "bad.csv"), IoError);
}
