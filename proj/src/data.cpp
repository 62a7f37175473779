#include "gabn/data.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <numbers>
#include <sstream>

namespace gabn {

std::size_t GroupedDataset::num_train_classes() const {
  return static_cast<std::size_t>(std::count_if(train_class.begin(), train_class.end(),
                                                [](int c) { return c >= 0; }));
}

std::vector<std::size_t> GroupedDataset::indices(Split which) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < split.size(); ++i) {
    if (split[i] == which) out.push_back(i);
  }
  return out;
}

Tensor<float> GroupedDataset::gather(std::span<const std::size_t> idx) const {
  const std::size_t stride = 3 * image_side * image_side;
  std::vector<float> out;
  out.reserve(idx.size() * stride);
  for (auto i : idx) {
    if (i >= size()) throw DomainError("gather: image index out of range");
    const auto* src = images.raw() + i * stride;
    out.insert(out.end(), src, src + stride);
  }
  return Tensor<float>({idx.size(), 3, image_side, image_side}, std::move(out));
}

void SyntheticSpec::validate() const {
  if (groups < 1 || ids_per_group < 1 || images_per_id < 1 || image_side < 8) {
    throw ConfigError("synthetic: groups, ids_per_group, images_per_id must be >= 1 and "
                      "image_side >= 8");
  }
  if (group_signal_strength < 0 || id_signal_strength < 0 || noise < 0) {
    throw ConfigError("synthetic: signal strengths and noise must be >= 0");
  }
}

float preprocess_value(double pixel) {
  if (!(pixel >= 0.0 && pixel <= 255.0)) {
    throw DomainError("preprocess: pixel value " + std::to_string(pixel) + " outside [0, 255]");
  }
  return static_cast<float>((pixel - 127.5) / 128.0);
}

Tensor<float> preprocess(const RgbImage& image) {
  const auto h = image.height, w = image.width;
  if (image.pixels.size() != 3 * h * w) throw ShapeError("preprocess: pixel buffer size mismatch");
  Tensor<float> out({3, h, w});
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      for (std::size_t c = 0; c < 3; ++c) {
        out[(c * h + y) * w + x] = preprocess_value(image.pixels[3 * (y * w + x) + c]);
      }
    }
  }
  return out;
}

RgbImage deprocess(const Tensor<float>& chw) {
  if (chw.rank() != 3 || chw.dim(0) != 3) {
    throw ShapeError("deprocess: expected [3, H, W], got " + shape_str(chw.shape()));
  }
  const auto h = chw.dim(1), w = chw.dim(2);
  RgbImage img{h, w, std::vector<std::uint8_t>(3 * h * w)};
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      for (std::size_t c = 0; c < 3; ++c) {
        const double v = double(chw[(c * h + y) * w + x]) * 128.0 + 127.5;
        img.pixels[3 * (y * w + x) + c] =
            static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
      }
    }
  }
  return img;
}

namespace {

constexpr std::size_t kGlobalBasis = 16;  // 4 x 4 grid over the face
constexpr std::size_t kLocalBasis = 9;    // 3 x 3 grid inside the group region

struct GroupStyle {
  std::array<double, 3> tone;
  double region_u, region_v, region_radius;
  double global_amp, local_amp;
  double occlusion_prob;
  double stripe_angle;
};

double lerp(double a, double b, double t) { return a + (b - a) * t; }

double gauss2(double du, double dv, double sigma) {
  return std::exp(-(du * du + dv * dv) / (2 * sigma * sigma));
}

GroupStyle style_for(std::size_t g, std::size_t groups, const SyntheticSpec& spec) {
  // 0 = identity information spread over the face, 1 = concentrated.
  const double loc = groups > 1 ? double(g) / double(groups - 1) : 0.0;
  static constexpr std::array<std::array<double, 2>, 4> kRegions{
      {{0.37, 0.40}, {0.63, 0.40}, {0.50, 0.74}, {0.50, 0.57}}};
  const std::size_t slot = groups > 1 && g == groups - 1 ? 3 : g % 3;
  const std::array<double, 3> light{205, 172, 150}, dark{100, 72, 58}, mid{152, 121, 104};
  GroupStyle s{};
  for (std::size_t c = 0; c < 3; ++c) {
    s.tone[c] = mid[c] + spec.group_signal_strength * (lerp(light[c], dark[c], loc) - mid[c]);
  }
  s.region_u = kRegions[slot][0];
  s.region_v = kRegions[slot][1];
  s.region_radius = lerp(0.22, 0.09, loc);
  s.global_amp = spec.id_signal_strength * lerp(22.0, 8.0, loc);
  s.local_amp = spec.id_signal_strength * lerp(10.0, 40.0, loc);
  s.occlusion_prob = lerp(0.05, 0.30, loc);
  s.stripe_angle = std::numbers::pi * double(g) / double(std::max<std::size_t>(groups, 1));
  return s;
}

struct IdentityCode {
  std::array<double, kGlobalBasis> global;
  std::array<double, kLocalBasis> local;
};

IdentityCode draw_identity(Rng& rng) {
  IdentityCode z{};
  for (auto& v : z.global) v = rng.normal();
  for (auto& v : z.local) v = rng.normal();
  return z;
}

RgbImage render(const GroupStyle& st, const IdentityCode& id, const SyntheticSpec& spec,
                Rng& rng) {
  const std::size_t S = spec.image_side;
  constexpr double kIntra = 0.4;
  IdentityCode z = id;
  for (auto& v : z.global) v += kIntra * rng.normal();
  for (auto& v : z.local) v += kIntra * rng.normal();
  const double shift_u = double(rng.uniform_int(-2, 2)) / double(S);
  const double shift_v = double(rng.uniform_int(-2, 2)) / double(S);
  const double brightness = 6.0 * rng.normal();
  const bool occluded = rng.uniform() < st.occlusion_prob;
  const double occ_half = st.region_radius * rng.uniform(0.7, 1.2);
  const double occ_u = st.region_u + shift_u + 0.3 * st.region_radius * rng.uniform(-1, 1);
  const double occ_v = st.region_v + shift_v + 0.3 * st.region_radius * rng.uniform(-1, 1);

  RgbImage img{S, S, std::vector<std::uint8_t>(3 * S * S)};
  const double r = st.region_radius;
  for (std::size_t y = 0; y < S; ++y) {
    for (std::size_t x = 0; x < S; ++x) {
      const double u = (x + 0.5) / double(S) - shift_u;
      const double v = (y + 0.5) / double(S) - shift_v;
      const double eu = (u - 0.5) / 0.36, ev = (v - 0.52) / 0.45;
      const double face = 1.0 / (1.0 + std::exp((std::sqrt(eu * eu + ev * ev) - 1.0) * 25.0));

      double feat = -60 * gauss2(u - 0.37, v - 0.40, 0.035) - 60 * gauss2(u - 0.63, v - 0.40, 0.035) -
                    25 * gauss2(u - 0.50, v - 0.57, 0.03);
      const double mu = (u - 0.5) / 0.09, mv = (v - 0.74) / 0.025;
      feat -= 45 * std::exp(-0.5 * (mu * mu + mv * mv));

      double idf = 0;
      for (std::size_t k = 0; k < kGlobalBasis; ++k) {
        const double cu = 0.25 + 0.1667 * double(k % 4), cv = 0.25 + 0.1667 * double(k / 4);
        idf += st.global_amp * z.global[k] * gauss2(u - cu, v - cv, 0.09);
      }
      for (std::size_t k = 0; k < kLocalBasis; ++k) {
        const double cu = st.region_u + 0.6 * r * (double(k % 3) - 1.0);
        const double cv = st.region_v + 0.6 * r * (double(k / 3) - 1.0);
        idf += st.local_amp * z.local[k] * gauss2(u - cu, v - cv, 0.35 * r);
      }

      double stripe = 0;
      const double fu = u - 0.5, fv = v - 0.2;
      if (fu * fu + fv * fv < 0.1 * 0.1) {
        const double t = fu * std::cos(st.stripe_angle) + fv * std::sin(st.stripe_angle);
        stripe = 15.0 * spec.group_signal_strength * std::sin(2 * std::numbers::pi * 18.0 * t);
      }

      const bool in_occ = occluded && std::abs(u + shift_u - occ_u) < occ_half &&
                          std::abs(v + shift_v - occ_v) < occ_half;
      for (std::size_t c = 0; c < 3; ++c) {
        double skin = st.tone[c] + feat + idf + stripe;
        if (in_occ) skin = st.tone[c];
        double val = (1.0 - face) * 40.0 + face * skin + brightness + 6.0 * spec.noise * rng.normal();
        img.pixels[3 * (y * S + x) + c] =
            static_cast<std::uint8_t>(std::clamp(std::lround(val), 0L, 255L));
      }
    }
  }
  return img;
}

std::string group_label(std::size_t g) { return "group" + std::to_string(g); }

}  // namespace

GroupedDataset generate_synthetic_dataset(const SyntheticSpec& spec) {
  spec.validate();
  GroupedDataset ds;
  ds.image_side = spec.image_side;
  const std::size_t ids_total = spec.ids_per_group + spec.eval_ids_per_group;
  const std::size_t total = spec.groups * ids_total * spec.images_per_id;
  const std::size_t stride = 3 * spec.image_side * spec.image_side;
  std::vector<float> pixels;
  pixels.reserve(total * stride);

  Rng root(spec.seed);
  int train_classes = 0;
  for (std::size_t g = 0; g < spec.groups; ++g) {
    ds.group_names.push_back(group_label(g));
    const auto style = style_for(g, spec.groups, spec);
    for (std::size_t i = 0; i < ids_total; ++i) {
      const int id = static_cast<int>(ds.identity_names.size());
      const Split sp = i < spec.ids_per_group ? Split::train : Split::eval;
      std::ostringstream name;
      name << "id" << std::setw(4) << std::setfill('0') << id;
      ds.identity_names.push_back(name.str());
      ds.identity_group.push_back(static_cast<int>(g));
      ds.identity_split.push_back(sp);
      ds.train_class.push_back(sp == Split::train ? train_classes++ : -1);

      Rng rng = root.split(static_cast<std::uint64_t>(id));
      const auto code = draw_identity(rng);
      for (std::size_t k = 0; k < spec.images_per_id; ++k) {
        const auto t = preprocess(render(style, code, spec, rng));
        pixels.insert(pixels.end(), t.data().begin(), t.data().end());
        ds.identity.push_back(id);
        ds.group.push_back(static_cast<int>(g));
        ds.split.push_back(sp);
      }
    }
  }
  ds.images = Tensor<float>({total, 3, spec.image_side, spec.image_side}, std::move(pixels));
  return ds;
}

GroupedDataset load_image_dataset(const std::filesystem::path& root, std::size_t image_side) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(root)) throw IoError("dataset root not found: " + root.string());
  auto sorted_entries = [](const fs::path& dir, bool dirs) {
    std::vector<fs::path> out;
    for (const auto& e : fs::directory_iterator(dir)) {
      if (dirs ? e.is_directory() : e.is_regular_file()) out.push_back(e.path());
    }
    std::sort(out.begin(), out.end());
    return out;
  };

  GroupedDataset ds;
  ds.image_side = image_side;
  std::vector<float> pixels;
  for (const auto& gdir : sorted_entries(root, true)) {
    const int g = static_cast<int>(ds.group_names.size());
    ds.group_names.push_back(gdir.filename().string());
    std::size_t group_images = 0;
    for (const auto& idir : sorted_entries(gdir, true)) {
      const int id = static_cast<int>(ds.identity_names.size());
      std::size_t id_images = 0;
      for (const auto& file : sorted_entries(idir, false)) {
        if (!has_image_extension(file)) continue;
        RgbImage img;
        try {
          img = read_rgb(file);
        } catch (const IoError& e) {
          std::cerr << "warning: skipping unreadable image " << file << ": " << e.what() << '\n';
          continue;
        }
        const auto t = preprocess(resize_bilinear(img, image_side, image_side));
        pixels.insert(pixels.end(), t.data().begin(), t.data().end());
        ds.identity.push_back(id);
        ds.group.push_back(g);
        ds.split.push_back(Split::train);
        ds.paths.push_back(file.string());
        ++id_images;
      }
      if (id_images == 0) continue;
      ds.identity_names.push_back(idir.filename().string());
      ds.identity_group.push_back(g);
      ds.identity_split.push_back(Split::train);
      ds.train_class.push_back(id);
      group_images += id_images;
    }
    if (group_images == 0) {
      throw IoError("dataset group '" + gdir.string() + "' contains no readable images");
    }
  }
  if (ds.group_names.empty()) throw IoError("dataset root has no group directories: " + root.string());
  const std::size_t n = ds.identity.size();
  ds.images = Tensor<float>({n, 3, image_side, image_side}, std::move(pixels));
  return ds;
}

void export_image_dataset(GroupedDataset& ds, const std::filesystem::path& root) {
  namespace fs = std::filesystem;
  ds.paths.assign(ds.size(), {});
  std::map<int, std::size_t> counter;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const int id = ds.identity[i];
    const fs::path dir = root / ds.group_names.at(ds.group[i]) / ds.identity_names.at(id);
    fs::create_directories(dir);
    std::ostringstream name;
    name << std::setw(4) << std::setfill('0') << counter[id]++ << ".ppm";
    const auto path = dir / name.str();
    write_ppm(path, deprocess(ds.image(i)));
    ds.paths[i] = path.string();
  }
}

std::vector<VerificationPair> sample_verification_pairs(const GroupedDataset& ds,
                                                        std::size_t per_group_count,
                                                        double positive_fraction,
                                                        std::uint64_t seed) {
  if (!(positive_fraction >= 0.0 && positive_fraction <= 1.0)) {
    throw DomainError("sample_verification_pairs: positive_fraction outside [0, 1]");
  }
  // group -> identity -> eval image indices
  std::map<int, std::map<int, std::vector<std::size_t>>> by_group;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    if (ds.split[i] == Split::eval) by_group[ds.group[i]][ds.identity[i]].push_back(i);
  }
  const auto n_pos = static_cast<std::size_t>(std::lround(per_group_count * positive_fraction));
  const auto n_neg = per_group_count - n_pos;

  Rng rng(seed);
  std::vector<VerificationPair> pairs;
  for (std::size_t g = 0; g < ds.num_groups(); ++g) {
    const auto& ids = by_group[static_cast<int>(g)];
    std::vector<const std::vector<std::size_t>*> multi, all;
    for (const auto& [id, imgs] : ids) {
      all.push_back(&imgs);
      if (imgs.size() >= 2) multi.push_back(&imgs);
    }
    if (n_pos > 0 && multi.empty()) {
      throw DomainError("sample_verification_pairs: group " + ds.group_names[g] +
                        " has 0 eval identities with >= 2 images; positives need 1");
    }
    if (n_neg > 0 && all.size() < 2) {
      throw DomainError("sample_verification_pairs: group " + ds.group_names[g] + " has " +
                        std::to_string(all.size()) + " eval identities; negatives need 2");
    }
    for (std::size_t k = 0; k < n_pos; ++k) {
      const auto& imgs = *multi[rng.uniform_int(0, std::int64_t(multi.size()) - 1)];
      const auto a = rng.uniform_int(0, std::int64_t(imgs.size()) - 1);
      auto b = rng.uniform_int(0, std::int64_t(imgs.size()) - 2);
      if (b >= a) ++b;
      pairs.push_back({imgs[a], imgs[b], true, static_cast<int>(g)});
    }
    for (std::size_t k = 0; k < n_neg; ++k) {
      const auto ia = rng.uniform_int(0, std::int64_t(all.size()) - 1);
      auto ib = rng.uniform_int(0, std::int64_t(all.size()) - 2);
      if (ib >= ia) ++ib;
      const auto& A = *all[ia];
      const auto& B = *all[ib];
      pairs.push_back({A[rng.uniform_int(0, std::int64_t(A.size()) - 1)],
                       B[rng.uniform_int(0, std::int64_t(B.size()) - 1)], false,
                       static_cast<int>(g)});
    }
  }
  return pairs;
}

std::vector<PairRecord> read_pairs_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open pairs file " + path.string());
  std::vector<PairRecord> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    std::vector<std::string> cols;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cols.push_back(cell);
    if (cols.size() != 4 || (cols[2] != "0" && cols[2] != "1")) {
      throw IoError(path.string() + ":" + std::to_string(lineno) +
                    ": expected pathA,pathB,same(0|1),group");
    }
    out.push_back({cols[0], cols[1], cols[2] == "1", cols[3]});
  }
  return out;
}

void write_pairs_csv(const std::filesystem::path& path, std::span<const PairRecord> pairs) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  for (const auto& p : pairs) {
    out << p.path_a << ',' << p.path_b << ',' << (p.same ? 1 : 0) << ',' << p.group << '\n';
  }
}

}  // namespace gabn
