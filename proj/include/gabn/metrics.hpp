#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "gabn/data.hpp"
#include "gabn/tensor.hpp"

namespace gabn {

// ---- verification ------------------------------------------------------------

// Accuracy (%) of "same iff similarity >= t" at the best t, sweeping t over
// every observed similarity and +inf.
double best_threshold_accuracy(std::span<const double> similarities, const std::vector<bool>& same);

// Mean held-out accuracy (%) over `folds` contiguous folds; each fold uses the
// best threshold of the remaining pairs.
double kfold_accuracy(std::span<const double> similarities, const std::vector<bool>& same,
                      std::size_t folds);

struct VerificationOptions {
  std::size_t folds = 0;  // 0 or 1: best threshold on all pairs of a group
};

// Cosine similarity of rows a and b of [M, d].
template <typename T>
double cosine_similarity(const Tensor<T>& embeddings, std::size_t a, std::size_t b);

// Per-group verification accuracy (%), indexed by group label 0..num_groups-1.
// Groups without pairs are rejected.
template <typename T>
std::vector<double> verification_accuracy(const Tensor<T>& embeddings,
                                          std::span<const VerificationPair> pairs,
                                          std::size_t num_groups,
                                          VerificationOptions options = {});

// ---- fairness ------------------------------------------------------------------

// Sample standard deviation (n - 1) of per-group accuracies.
double fairness_std(std::span<const double> accuracies);

// Highest error rate over lowest error rate, errors = 100 - accuracy.
double fairness_ser(std::span<const double> accuracies);

struct FairnessReport {
  std::vector<std::string> groups;
  std::vector<double> accuracy;  // %
  double average = 0.0;
  double std = 0.0;
  std::optional<double> ser;  // empty when some group is error-free
};

FairnessReport make_fairness_report(std::vector<std::string> groups,
                                    std::vector<double> accuracies);

// One header line "<group>,...,Avg,STD,SER" and one value line; SER is empty
// when undefined. Values use shortest round-trip formatting.
void write_report_csv(const std::filesystem::path& path, const FairnessReport& report);
// Reads the format above. Avg/STD/SER columns are optional and recomputed
// from the group columns, so a bare accuracy table can be replayed.
FairnessReport read_report_csv(const std::filesystem::path& path);
std::string format_report_table(const FairnessReport& report);

// ---- confidence ----------------------------------------------------------------

// Per-group P_max accumulator of one training step.
struct GroupConfidence {
  std::vector<double> p_max_sum;
  std::vector<std::size_t> count;

  explicit GroupConfidence(std::size_t groups = 0) : p_max_sum(groups, 0.0), count(groups, 0) {}
  void add(int group, double p_max);
  // NaN for a group without samples.
  double mean(std::size_t group) const;
};

struct ConfidenceCurve {
  std::vector<std::vector<double>> mean;  // [epoch][group]
  std::vector<double> gap;                // max - min over groups with samples
};

// `epochs[e]` holds the step accumulators of epoch e; samples are pooled
// over the epoch.
ConfidenceCurve confidence_curve(std::span<const std::vector<GroupConfidence>> epochs);

void write_confidence_csv(const std::filesystem::path& path, const ConfidenceCurve& curve,
                          std::span<const std::string> group_names);

// Shortest decimal text that parses back to the same double.
std::string format_double(double value);

}  // namespace gabn
