#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "gabn/data.hpp"
#include "gabn/erasure.hpp"
#include "gabn/losses.hpp"
#include "gabn/metrics.hpp"
#include "gabn/models.hpp"

namespace gabn {

struct TrainConfig {
  std::size_t epochs = 10;
  std::size_t steps_per_epoch = 50;
  std::size_t batch_size = 32;
  double lr = 0.1;
  double disc_lr = 0.01;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  std::vector<std::size_t> milestones;  // epochs at which lr (and disc_lr) drop by 10x
  std::uint64_t seed = 1;
  std::size_t disc_steps = 1;  // discriminator updates per recognizer update

  bool use_gam_ct = true;
  bool use_gam_sfre = true;
  bool use_conf_loss = true;
  bool use_random_erase_baseline = false;

  void validate() const;
  bool needs_gam() const noexcept { return use_gam_ct || use_gam_sfre; }
};

// Everything train_step needs besides the networks.
struct TrainSetup {
  RecognizerConfig recognizer;
  DiscriminatorConfig discriminator;
  LossConfig loss;
  MaskConfig mask;
  TrainConfig train;
};

struct StepReport {
  double l_id = 0;     // identity loss with K = 0 on the step's training images
  double l_conf = 0;
  double l_adv = 0;
  double l_cls = 0;    // discriminator loss of its last update in this step
  double l_final = 0;  // identity loss with K, the quantity minimized
  double k = 0;
  double lr = 0;
  GroupConfidence confidence;
  double wall_seconds = 0;
};

// SGD with momentum and L2 weight decay, one velocity buffer per parameter.
template <typename T>
struct SgdState {
  std::map<std::string, Tensor<T>> velocity;
};

// v <- momentum * v + grad + weight_decay * param;  param <- param - lr * v.
// A parameter without a gradient entry is treated as having zero gradient.
template <typename T>
void sgd_update(ParameterSet<T>& params, const std::map<std::string, Tensor<T>>& grads,
                SgdState<T>& state, double lr, double momentum, double weight_decay);

// base_lr / 10^(number of milestones <= epoch).
double learning_rate_at(double base_lr, const std::vector<std::size_t>& milestones,
                        std::size_t epoch);

struct Batch {
  Tensor<float> images;     // [n, 3, S, S]
  std::vector<int> labels;  // identity class
  std::vector<int> groups;  // race label
};

Batch make_batch(const GroupedDataset& data, std::span<const std::size_t> indices);

struct Optimizers {
  SgdState<float> recognizer;
  SgdState<float> discriminator;
};

// One GABN update. Order: recognizer forward on the originals (P_max, L_conf,
// T_GAM); GAM by backward to the input; erasure; discriminator update on the
// normalized GAMs; L_adv from the updated discriminator; K = L_conf + L_adv
// (each only when enabled); recognizer update on the (possibly erased)
// images with the K-shifted identity loss.
//
// On a non-finite loss a NumericError is thrown and both networks and both
// optimizer states are left as they were.
StepReport train_step(Recognizer<float>& recognizer, Discriminator<float>& discriminator,
                      const Batch& batch, const TrainSetup& setup, Optimizers& optimizers,
                      double lr, double disc_lr, Rng& mask_rng);

// Normalized GAMs of a batch stacked as [n, 1, H, W].
Tensor<float> gam_batch(const std::vector<GamMap<float>>& gams);

struct EpochSummary {
  std::size_t epoch = 0;
  std::size_t step = 0;  // global step count at the end of the epoch
  double l_id = 0, l_conf = 0, l_adv = 0, l_cls = 0, l_final = 0;
  double lr = 0;
  std::vector<double> mean_p_max;  // per group, pooled over the epoch
};

struct TrainResult {
  Recognizer<float> recognizer;
  Discriminator<float> discriminator;
  std::vector<EpochSummary> epochs;
  ConfidenceCurve confidence;
};

// Initial networks for a setup: seeds are derived from train.seed.
Recognizer<float> initial_recognizer(const TrainSetup& setup);
Discriminator<float> initial_discriminator(const TrainSetup& setup);

// Fills in class and race counts from the dataset and rejects datasets with
// fewer than 2 groups or fewer than 2 training identities in some group.
TrainSetup resolve_setup(TrainSetup setup, const GroupedDataset& data);

// Runs epochs x steps_per_epoch updates. With an output directory, writes
// metrics.csv (one row per epoch), confidence.csv and model.ckpt; `metadata`
// is stored in the checkpoint.
TrainResult train(const TrainSetup& setup, const GroupedDataset& data,
                  const std::optional<std::filesystem::path>& out_dir = std::nullopt,
                  const std::map<std::string, std::string>& metadata = {});

// Column layout of metrics.csv.
std::vector<std::string> metrics_header(std::span<const std::string> group_names);

}  // namespace gabn
