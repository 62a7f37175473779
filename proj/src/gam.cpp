#include "gabn/gam.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <fstream>

#include "gabn/image_io.hpp"

namespace gabn {

TGamValue compute_t_gam(std::span<const double> probs) {
  if (probs.size() < 2) throw DomainError("compute_t_gam: needs at least 2 classes");
  double total = 0;
  for (double p : probs) {
    if (!(p >= 0.0 && p <= 1.0)) throw DomainError("compute_t_gam: probability outside [0, 1]");
    total += p;
  }
  if (std::abs(total - 1.0) > 1e-5) {
    throw DomainError("compute_t_gam: probabilities sum to " + std::to_string(total));
  }
  const double p_max = *std::max_element(probs.begin(), probs.end());
  double gap = 0;
  for (double p : probs) gap += p_max - p;
  return {gap / static_cast<double>(probs.size())};
}

template <typename T>
ad::Var<T> t_gam(ad::Var<T> probs) {
  if (probs.value().rank() != 2 || probs.value().dim(1) == 0) {
    throw DomainError("t_gam: network produced no classes, shape " + shape_str(probs.shape()));
  }
  return ad::sub(ad::row_max(probs), ad::row_mean(probs));
}

template <typename T>
std::vector<GamMap<T>> gam_from_input_gradient(const Tensor<T>& grad) {
  if (grad.rank() != 4) {
    throw ShapeError("gam: input gradient must be [N, C, H, W], got " + shape_str(grad.shape()));
  }
  const auto n = grad.dim(0), c = grad.dim(1), h = grad.dim(2), w = grad.dim(3);
  std::vector<GamMap<T>> out;
  out.reserve(n);
  for (std::size_t s = 0; s < n; ++s) {
    Tensor<T> map(Shape{h, w, 1});
    for (std::size_t p = 0; p < h * w; ++p) {
      T best = 0;
      for (std::size_t ch = 0; ch < c; ++ch) {
        best = std::max(best, std::abs(grad[(s * c + ch) * h * w + p]));
      }
      map[p] = best;
    }
    out.push_back({std::move(map)});
  }
  return out;
}

template <typename T>
std::vector<GamMap<T>> compute_gam(const ProbabilityFn<T>& model, const Tensor<T>& images) {
  ad::Tape<T> tape;
  Tensor<T> batch = images;
  if (images.rank() == 3) batch = images.reshaped({1, images.dim(0), images.dim(1), images.dim(2)});
  auto input = tape.leaf(std::move(batch), true);
  auto probs = model(input);
  auto objective = ad::sum(t_gam(probs));
  return gam_from_input_gradient(tape.backward(objective).wrt(input));
}

template <typename T>
std::vector<GamMap<T>> compute_gam(const Recognizer<T>& net, const Tensor<T>& images,
                                   std::span<const int> labels) {
  return compute_gam<T>(
      [&](ad::Var<T> x) { return net.probabilities(net.forward(x), labels); }, images);
}

template <typename T>
GamMap<T> normalize_gam(const GamMap<T>& gam) {
  GamMap<T> out = gam;
  T mx = 0;
  for (T v : gam.values.data()) mx = std::max(mx, v);
  if (mx > T(0)) {
    for (auto& v : out.values.data()) v /= mx;
  }
  return out;
}

template <typename T>
std::map<int, GamMap<T>> average_gam(std::span<const GamMap<T>> gams,
                                     std::span<const int> groups) {
  if (gams.size() != groups.size()) {
    throw ShapeError("average_gam: " + std::to_string(gams.size()) + " maps but " +
                     std::to_string(groups.size()) + " group labels");
  }
  std::map<int, GamMap<T>> sums;
  std::map<int, std::size_t> counts;
  for (std::size_t i = 0; i < gams.size(); ++i) {
    if (gams[i].values.shape() != gams.front().values.shape()) {
      throw ShapeError("average_gam: map " + std::to_string(i) + " has shape " +
                       shape_str(gams[i].values.shape()) + ", expected " +
                       shape_str(gams.front().values.shape()));
    }
    auto [it, fresh] = sums.try_emplace(groups[i], GamMap<T>{Tensor<T>(gams[i].values.shape())});
    auto& acc = it->second.values;
    for (std::size_t p = 0; p < acc.size(); ++p) acc[p] += gams[i].values[p];
    ++counts[groups[i]];
  }
  for (auto& [g, m] : sums) {
    const T inv = T(1) / static_cast<T>(counts[g]);
    for (auto& v : m.values.data()) v *= inv;
  }
  return sums;
}

GamMap<float> resize_gam(const GamMap<float>& gam, std::size_t height, std::size_t width) {
  const auto h = gam.height(), w = gam.width();
  if (h == height && w == width) return gam;
  if (h == 0 || w == 0 || height == 0 || width == 0) throw ShapeError("resize_gam: empty map");
  GamMap<float> out{Tensor<float>(Shape{height, width, 1})};
  const double sy = double(h) / double(height), sx = double(w) / double(width);
  for (std::size_t y = 0; y < height; ++y) {
    const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, double(h - 1));
    const auto y0 = static_cast<std::size_t>(fy);
    const auto y1 = std::min(y0 + 1, h - 1);
    const double wy = fy - double(y0);
    for (std::size_t x = 0; x < width; ++x) {
      const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, double(w - 1));
      const auto x0 = static_cast<std::size_t>(fx);
      const auto x1 = std::min(x0 + 1, w - 1);
      const double wx = fx - double(x0);
      out.values[y * width + x] = static_cast<float>(
          (1 - wy) * ((1 - wx) * gam.at(y0, x0) + wx * gam.at(y0, x1)) +
          wy * ((1 - wx) * gam.at(y1, x0) + wx * gam.at(y1, x1)));
    }
  }
  return out;
}

template <typename T>
std::size_t gam_support(const GamMap<T>& gam, double fraction) {
  T mx = 0;
  for (T v : gam.values.data()) mx = std::max(mx, v);
  if (mx <= T(0)) return 0;
  const T cut = static_cast<T>(fraction) * mx;
  return static_cast<std::size_t>(std::count_if(gam.values.data().begin(),
                                                gam.values.data().end(),
                                                [cut](T v) { return v > cut; }));
}

template <typename T>
void write_gam_pgm(const std::filesystem::path& path, const GamMap<T>& gam) {
  const auto norm = normalize_gam(gam);
  GrayImage img{gam.height(), gam.width(), std::vector<std::uint8_t>(norm.values.size())};
  for (std::size_t i = 0; i < norm.values.size(); ++i) {
    img.pixels[i] = static_cast<std::uint8_t>(std::lround(255.0 * double(norm.values[i])));
  }
  write_pgm(path, img);
}

template <typename T>
void write_gam_raw(const std::filesystem::path& path, const GamMap<T>& gam) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  auto put32 = [&](std::uint32_t v) {
    const char b[4] = {char(v & 0xff), char((v >> 8) & 0xff), char((v >> 16) & 0xff),
                       char((v >> 24) & 0xff)};
    out.write(b, 4);
  };
  put32(static_cast<std::uint32_t>(gam.height()));
  put32(static_cast<std::uint32_t>(gam.width()));
  for (T v : gam.values.data()) put32(std::bit_cast<std::uint32_t>(static_cast<float>(v)));
}

GamMap<float> read_gam_raw(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  auto get32 = [&]() {
    unsigned char b[4];
    if (!in.read(reinterpret_cast<char*>(b), 4)) throw IoError("truncated GAM dump " + path.string());
    return std::uint32_t(b[0]) | (std::uint32_t(b[1]) << 8) | (std::uint32_t(b[2]) << 16) |
           (std::uint32_t(b[3]) << 24);
  };
  const auto h = get32(), w = get32();
  Tensor<float> values(Shape{h, w, 1});
  for (auto& v : values.data()) v = std::bit_cast<float>(get32());
  return {std::move(values)};
}

#define GABN_INSTANTIATE_GAM(T)                                                             \
  template ad::Var<T> t_gam<T>(ad::Var<T>);                                                 \
  template std::vector<GamMap<T>> gam_from_input_gradient<T>(const Tensor<T>&);             \
  template std::vector<GamMap<T>> compute_gam<T>(const ProbabilityFn<T>&, const Tensor<T>&); \
  template std::vector<GamMap<T>> compute_gam<T>(const Recognizer<T>&, const Tensor<T>&,    \
                                                 std::span<const int>);                     \
  template GamMap<T> normalize_gam<T>(const GamMap<T>&);                                    \
  template std::map<int, GamMap<T>> average_gam<T>(std::span<const GamMap<T>>,              \
                                                   std::span<const int>);                   \
  template std::size_t gam_support<T>(const GamMap<T>&, double);                            \
  template void write_gam_pgm<T>(const std::filesystem::path&, const GamMap<T>&);           \
  template void write_gam_raw<T>(const std::filesystem::path&, const GamMap<T>&);

GABN_INSTANTIATE_GAM(float)
GABN_INSTANTIATE_GAM(double)

}  // namespace gabn
