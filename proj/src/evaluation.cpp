#include "gabn/evaluation.hpp"

#include <algorithm>
#include <map>

namespace gabn {

Tensor<float> embed_images(const Recognizer<float>& net, const GroupedDataset& data,
                           std::span<const std::size_t> indices, std::size_t batch) {
  const std::size_t d = net.config().embedding_dim;
  std::vector<float> out;
  out.reserve(indices.size() * d);
  for (std::size_t lo = 0; lo < indices.size(); lo += batch) {
    const auto chunk = indices.subspan(lo, std::min(batch, indices.size() - lo));
    const auto e = embed(net, data.gather(chunk));
    out.insert(out.end(), e.data().begin(), e.data().end());
  }
  return Tensor<float>({indices.size(), d}, std::move(out));
}

FairnessReport evaluate_pairs(const Recognizer<float>& net, const GroupedDataset& data,
                              std::span<const VerificationPair> pairs,
                              VerificationOptions options) {
  std::map<std::size_t, std::size_t> row;
  for (const auto& p : pairs) {
    row.try_emplace(p.a, 0);
    row.try_emplace(p.b, 0);
  }
  std::vector<std::size_t> idx;
  for (auto& [image, r] : row) {
    r = idx.size();
    idx.push_back(image);
  }
  const auto emb = embed_images(net, data, idx);
  std::vector<VerificationPair> local(pairs.begin(), pairs.end());
  for (auto& p : local) {
    p.a = row[p.a];
    p.b = row[p.b];
  }
  auto acc = verification_accuracy(emb, std::span<const VerificationPair>(local),
                                   data.num_groups(), options);
  return make_fairness_report(data.group_names, std::move(acc));
}

std::vector<GamMap<float>> normalized_gams(const Recognizer<float>& net,
                                           const GroupedDataset& data,
                                           std::span<const std::size_t> indices,
                                           std::size_t batch) {
  std::vector<GamMap<float>> out;
  out.reserve(indices.size());
  for (std::size_t lo = 0; lo < indices.size(); lo += batch) {
    const auto chunk = indices.subspan(lo, std::min(batch, indices.size() - lo));
    for (const auto& g : compute_gam(net, data.gather(chunk))) out.push_back(normalize_gam(g));
  }
  return out;
}

std::map<int, GamMap<float>> group_average_gams(const Recognizer<float>& net,
                                                const GroupedDataset& data,
                                                std::span<const std::size_t> indices,
                                                std::size_t batch) {
  const auto maps = normalized_gams(net, data, indices, batch);
  std::vector<int> groups;
  for (auto i : indices) groups.push_back(data.group[i]);
  return average_gam(std::span<const GamMap<float>>(maps), std::span<const int>(groups));
}

}  // namespace gabn
