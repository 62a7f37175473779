#pragma once

#include <cstddef>
#include <map>
#include <span>

#include "gabn/data.hpp"
#include "gabn/gam.hpp"
#include "gabn/metrics.hpp"
#include "gabn/models.hpp"

namespace gabn {

// Embeddings of the given dataset images, row k for indices[k]; computed in
// chunks of `batch` images.
Tensor<float> embed_images(const Recognizer<float>& net, const GroupedDataset& data,
                           std::span<const std::size_t> indices, std::size_t batch = 64);

// Embeds every image referenced by the pairs and scores them per group.
FairnessReport evaluate_pairs(const Recognizer<float>& net, const GroupedDataset& data,
                              std::span<const VerificationPair> pairs,
                              VerificationOptions options = {});

// Margin-free GAMs of the given images, max-normalized per image.
std::vector<GamMap<float>> normalized_gams(const Recognizer<float>& net,
                                           const GroupedDataset& data,
                                           std::span<const std::size_t> indices,
                                           std::size_t batch = 64);

// Per-group mean of the per-image normalized GAMs.
std::map<int, GamMap<float>> group_average_gams(const Recognizer<float>& net,
                                                const GroupedDataset& data,
                                                std::span<const std::size_t> indices,
                                                std::size_t batch = 64);

}  // namespace gabn
