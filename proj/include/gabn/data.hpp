#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "gabn/image_io.hpp"
#include "gabn/random.hpp"
#include "gabn/tensor.hpp"

namespace gabn {

enum class Split : std::uint8_t { train = 0, eval = 1 };

// Images with identity and group labels. Identities are indexed densely;
// every identity belongs to exactly one group and one split.
struct GroupedDataset {
  std::size_t image_side = 0;
  Tensor<float> images;  // [M, 3, side, side], preprocessed
  std::vector<int> identity;
  std::vector<int> group;
  std::vector<Split> split;
  std::vector<std::string> paths;  // source file per image; empty for synthetic data

  std::vector<std::string> group_names;
  std::vector<std::string> identity_names;
  std::vector<int> identity_group;
  std::vector<Split> identity_split;
  // Dense class index of each training identity, -1 for eval identities.
  std::vector<int> train_class;

  std::size_t size() const noexcept { return identity.size(); }
  std::size_t num_groups() const noexcept { return group_names.size(); }
  std::size_t num_train_classes() const;
  Tensor<float> image(std::size_t index) const { return images.slice0(index); }
  std::vector<std::size_t> indices(Split which) const;
  // Batch [n, 3, side, side] of the given images.
  Tensor<float> gather(std::span<const std::size_t> indices) const;
};

struct SyntheticSpec {
  std::size_t groups = 4;
  std::size_t ids_per_group = 20;       // training identities per group
  std::size_t eval_ids_per_group = 10;  // additional held-out identities per group
  std::size_t images_per_id = 10;
  std::size_t image_side = 64;
  std::uint64_t seed = 1;
  double group_signal_strength = 1.0;
  double id_signal_strength = 1.0;
  double noise = 1.0;

  void validate() const;
};

// Face-like template + group-specific skin tone and texture patch + identity
// pattern + per-image nuisance. Groups differ in how spatially concentrated
// their identity information is: the last group carries most of it in one
// small region that is also the most often occluded.
GroupedDataset generate_synthetic_dataset(const SyntheticSpec& spec);

// Reads root/<group>/<identity>/<image>.{ppm,pgm}, resizing to `image_side`.
// Unreadable files are skipped with a warning on stderr. All images are
// tagged as training data.
GroupedDataset load_image_dataset(const std::filesystem::path& root, std::size_t image_side);

// Writes the dataset as root/<group>/<identity>/<nnnn>.ppm and records the
// written paths in dataset.paths.
void export_image_dataset(GroupedDataset& dataset, const std::filesystem::path& root);

// (v - 127.5) / 128 for 8-bit [H, W, 3] pixels -> [3, H, W].
Tensor<float> preprocess(const RgbImage& image);
float preprocess_value(double pixel);
RgbImage deprocess(const Tensor<float>& chw);

struct VerificationPair {
  std::size_t a = 0, b = 0;  // image indices
  bool same = false;
  int group = 0;
};

// Within-group pairs from the eval split. round(count * positive_fraction)
// positives per group, the rest negatives.
std::vector<VerificationPair> sample_verification_pairs(const GroupedDataset& dataset,
                                                        std::size_t per_group_count,
                                                        double positive_fraction,
                                                        std::uint64_t seed);

struct PairRecord {
  std::string path_a, path_b;
  bool same = false;
  std::string group;
};

// CSV lines "pathA,pathB,same(0|1),group", no header.
std::vector<PairRecord> read_pairs_csv(const std::filesystem::path& path);
void write_pairs_csv(const std::filesystem::path& path, std::span<const PairRecord> pairs);

}  // namespace gabn
