#include "gabn/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>

#include "gabn/checkpoint.hpp"
#include "gabn/gam.hpp"

namespace gabn {

void TrainConfig::validate() const {
  if (epochs < 1 || steps_per_epoch < 1 || batch_size < 1) {
    throw ConfigError("epochs, steps_per_epoch and batch_size must be >= 1");
  }
  if (!(lr > 0) || !(disc_lr > 0)) throw ConfigError("lr and disc_lr must be > 0");
  if (!(momentum >= 0 && momentum < 1)) throw ConfigError("momentum must be in [0, 1)");
  if (!(weight_decay >= 0)) throw ConfigError("weight_decay must be >= 0");
  if (disc_steps < 1) throw ConfigError("disc_steps must be >= 1");
  for (std::size_t i = 1; i < milestones.size(); ++i) {
    if (milestones[i] <= milestones[i - 1]) {
      throw ConfigError("milestones must be strictly increasing");
    }
  }
  if (use_gam_sfre && use_random_erase_baseline) {
    throw ConfigError("use_gam_sfre and use_random_erase_baseline are mutually exclusive");
  }
}

template <typename T>
void sgd_update(ParameterSet<T>& params, const std::map<std::string, Tensor<T>>& grads,
                SgdState<T>& state, double lr, double momentum, double weight_decay) {
  for (auto& p : params) {
    auto it = grads.find(p.name);
    if (it != grads.end() && it->second.shape() != p.value.shape()) {
      throw ShapeError("sgd_update: gradient shape " + shape_str(it->second.shape()) +
                       " != parameter shape " + shape_str(p.value.shape()) + " for " + p.name);
    }
    auto [vit, fresh] = state.velocity.try_emplace(p.name, Tensor<T>(p.value.shape()));
    auto& v = vit->second;
    if (v.shape() != p.value.shape()) {
      throw ShapeError("sgd_update: velocity shape mismatch for " + p.name);
    }
    const T mu = static_cast<T>(momentum), wd = static_cast<T>(weight_decay),
            step = static_cast<T>(lr);
    const T* g = it != grads.end() ? it->second.raw() : nullptr;
    T* w = p.value.raw();
    T* vel = v.raw();
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      vel[i] = mu * vel[i] + (g ? g[i] : T(0)) + wd * w[i];
      w[i] -= step * vel[i];
    }
  }
}

double learning_rate_at(double base_lr, const std::vector<std::size_t>& milestones,
                        std::size_t epoch) {
  double lr = base_lr;
  for (auto m : milestones) {
    if (epoch >= m) lr /= 10.0;
  }
  return lr;
}

Batch make_batch(const GroupedDataset& data, std::span<const std::size_t> idx) {
  Batch b;
  b.images = data.gather(idx);
  for (auto i : idx) {
    const int cls = data.train_class.at(data.identity[i]);
    if (cls < 0) throw DomainError("make_batch: image " + std::to_string(i) + " is not training data");
    b.labels.push_back(cls);
    b.groups.push_back(data.group[i]);
  }
  return b;
}

Tensor<float> gam_batch(const std::vector<GamMap<float>>& gams) {
  if (gams.empty()) throw DomainError("gam_batch: no maps");
  const auto h = gams.front().height(), w = gams.front().width();
  std::vector<float> out;
  out.reserve(gams.size() * h * w);
  for (const auto& g : gams) {
    const auto n = normalize_gam(g);
    out.insert(out.end(), n.values.data().begin(), n.values.data().end());
  }
  return Tensor<float>({gams.size(), 1, h, w}, std::move(out));
}

namespace {

void require_finite(double v, const char* what) {
  if (!std::isfinite(v)) throw NumericError(std::string("train_step: non-finite ") + what);
}

void require_finite(const std::map<std::string, Tensor<float>>& grads, const char* what) {
  for (const auto& [name, g] : grads) {
    for (float x : g.data()) {
      if (!std::isfinite(x)) {
        throw NumericError(std::string("train_step: non-finite ") + what + " gradient for " + name);
      }
    }
  }
}

}  // namespace

StepReport train_step(Recognizer<float>& rec, Discriminator<float>& disc, const Batch& batch,
                      const TrainSetup& setup, Optimizers& opt, double lr, double disc_lr,
                      Rng& mask_rng) {
  const auto t0 = std::chrono::steady_clock::now();
  const auto& tc = setup.train;
  const auto& lc = setup.loss;
  const std::size_t n = batch.labels.size();
  if (n == 0) throw DomainError("train_step: empty batch");

  StepReport report;
  report.lr = lr;
  report.confidence = GroupConfidence(setup.discriminator.num_races);

  // (1) forward on the originals.
  auto pass = forward(rec, batch.images, tc.needs_gam());
  auto cos = rec.cosines(pass.output);
  auto probs = ad::softmax(angular_logits(cos, batch.labels, lc.margin, 0.0, lc.scale));

  // (2) confidence balance loss from P_max.
  BatchConfidence conf{{}, lc.t_confidence};
  const auto& pv = probs.value();
  const std::size_t classes = pv.dim(1);
  for (std::size_t i = 0; i < n; ++i) {
    const auto row = pv.data().subspan(i * classes, classes);
    const double p_max = *std::max_element(row.begin(), row.end());
    conf.p_max.push_back(p_max);
    report.confidence.add(batch.groups[i], p_max);
  }
  report.l_conf = confidence_balance_loss(conf);

  // (3)-(4) T_GAM and the GAM of each original image.
  std::vector<GamMap<float>> gams;
  if (tc.needs_gam()) {
    auto objective = ad::sum(t_gam(probs));
    gams = gam_from_input_gradient(pass.tape->backward(objective).wrt(pass.input));
  }

  // (5) erasure.
  std::optional<Tensor<float>> erased;
  if (tc.use_gam_sfre || tc.use_random_erase_baseline) {
    const auto h = batch.images.dim(2), w = batch.images.dim(3);
    std::vector<Tensor<float>> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
      const auto count = std::min(setup.mask.n_mask, h * w);
      const auto centers = tc.use_gam_sfre ? top_n_centers(gams[i], count)
                                           : random_centers(h, w, count, mask_rng);
      out.push_back(apply_masks(batch.images.slice0(i), std::span<const Pixel>(centers),
                                setup.mask, mask_rng)
                        .image);
    }
    erased = stack<float>(out);
  }

  // (6)-(7) discriminator update, then the adversarial loss from its new state.
  const auto disc_backup = disc.parameters();
  const auto disc_opt_backup = opt.discriminator;
  auto restore_disc = [&] {
    disc.parameters() = disc_backup;
    opt.discriminator = disc_opt_backup;
  };
  try {
    if (tc.use_gam_ct) {
      const auto maps = gam_batch(gams);
      for (std::size_t s = 0; s < tc.disc_steps; ++s) {
        auto dpass = forward(disc, maps);
        auto l_cls = discriminator_ce_loss(dpass.output, batch.groups);
        report.l_cls = l_cls.value().item();
        require_finite(report.l_cls, "L_cls");
        const auto grads = backward(dpass, l_cls);
        require_finite(grads.parameters, "discriminator");
        sgd_update(disc.parameters(), grads.parameters, opt.discriminator, disc_lr, tc.momentum,
                   tc.weight_decay);
      }
      auto apass = forward(disc, maps);
      report.l_adv = adversarial_uniform_loss(apass.output).value().item();
      require_finite(report.l_adv, "L_adv");
    }

    // (8) penalty coefficient, a plain number.
    report.k = (tc.use_conf_loss ? report.l_conf : 0.0) + (tc.use_gam_ct ? report.l_adv : 0.0);

    // (9) identity update on the images the recognizer trains on.
    ForwardPass<float> erased_pass;
    ad::Var<float> train_cos = cos;
    ad::Tape<float>* tape = pass.tape.get();
    if (erased) {
      erased_pass = forward(rec, *erased, false);
      train_cos = rec.cosines(erased_pass.output);
      tape = erased_pass.tape.get();
    }
    auto l_final = margin_cross_entropy(train_cos, batch.labels, lc.margin, report.k, lc.scale);
    report.l_final = l_final.value().item();
    report.l_id = report.k == 0.0
                      ? report.l_final
                      : margin_cross_entropy(train_cos, batch.labels, lc.margin, 0.0, lc.scale)
                            .value()
                            .item();
    require_finite(report.l_final, "L_Final");
    require_finite(report.l_id, "L_ID");
    const auto grads = tape->gradient_bundle(l_final);
    require_finite(grads.parameters, "recognizer");
    sgd_update(rec.parameters(), grads.parameters, opt.recognizer, lr, tc.momentum,
               tc.weight_decay);
  } catch (const NumericError&) {
    restore_disc();
    throw;
  }

  report.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return report;
}

Recognizer<float> initial_recognizer(const TrainSetup& setup) {
  return build_recognizer<float>(setup.recognizer, Rng(setup.train.seed).split(3).next_u64());
}

Discriminator<float> initial_discriminator(const TrainSetup& setup) {
  return build_discriminator<float>(setup.discriminator,
                                    Rng(setup.train.seed).split(4).next_u64());
}

TrainSetup resolve_setup(TrainSetup setup, const GroupedDataset& data) {
  if (data.num_groups() < 2) {
    throw ConfigError("training needs at least 2 groups, dataset has " +
                      std::to_string(data.num_groups()));
  }
  std::vector<std::size_t> ids_per_group(data.num_groups(), 0);
  for (std::size_t id = 0; id < data.identity_group.size(); ++id) {
    if (data.train_class[id] >= 0) ++ids_per_group[data.identity_group[id]];
  }
  for (std::size_t g = 0; g < ids_per_group.size(); ++g) {
    if (ids_per_group[g] < 2) {
      throw ConfigError("training needs at least 2 identities per group; group " +
                        data.group_names[g] + " has " + std::to_string(ids_per_group[g]));
    }
  }
  const auto side = data.image_side;
  setup.recognizer.image_side = side;
  setup.recognizer.num_classes = data.num_train_classes();
  setup.recognizer.scale = setup.loss.scale;
  setup.recognizer.margin = setup.loss.margin;
  setup.discriminator.image_side = side;
  setup.discriminator.num_races = data.num_groups();
  setup.loss.num_races = data.num_groups();
  setup.recognizer.validate();
  setup.discriminator.validate();
  setup.loss.validate();
  setup.mask.validate(side, side);
  setup.train.validate();
  return setup;
}

std::vector<std::string> metrics_header(std::span<const std::string> group_names) {
  std::vector<std::string> cols{"epoch", "step", "L_ID", "L_conf", "L_adv", "L_cls", "L_Final",
                                "lr"};
  for (const auto& g : group_names) cols.push_back("mean_p_max_" + g);
  return cols;
}

TrainResult train(const TrainSetup& raw_setup, const GroupedDataset& data,
                  const std::optional<std::filesystem::path>& out_dir,
                  const std::map<std::string, std::string>& metadata) {
  const TrainSetup setup = resolve_setup(raw_setup, data);
  const auto& tc = setup.train;

  TrainResult result{initial_recognizer(setup), initial_discriminator(setup), {}, {}};
  Optimizers opt;
  Rng root(tc.seed);
  Rng batch_rng = root.split(1);
  Rng mask_rng = root.split(2);

  const auto pool = data.indices(Split::train);
  std::vector<std::size_t> order = pool;
  std::size_t cursor = order.size();
  auto next_batch = [&] {
    std::vector<std::size_t> idx;
    while (idx.size() < tc.batch_size) {
      if (cursor == order.size()) {
        batch_rng.shuffle(order.begin(), order.end());
        cursor = 0;
      }
      idx.push_back(order[cursor++]);
    }
    return make_batch(data, idx);
  };

  std::ofstream metrics;
  if (out_dir) {
    std::filesystem::create_directories(*out_dir);
    metrics.open(*out_dir / "metrics.csv");
    if (!metrics) throw IoError("cannot write " + (*out_dir / "metrics.csv").string());
    const auto header = metrics_header(data.group_names);
    for (std::size_t i = 0; i < header.size(); ++i) metrics << (i ? "," : "") << header[i];
    metrics << '\n';
  }

  std::vector<std::vector<GroupConfidence>> conf_epochs;
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < tc.epochs; ++epoch) {
    const double lr = learning_rate_at(tc.lr, tc.milestones, epoch);
    const double disc_lr = learning_rate_at(tc.disc_lr, tc.milestones, epoch);
    EpochSummary sum;
    sum.epoch = epoch;
    sum.lr = lr;
    std::vector<GroupConfidence> confs;
    for (std::size_t s = 0; s < tc.steps_per_epoch; ++s, ++step) {
      const auto batch = next_batch();
      const auto r = train_step(result.recognizer, result.discriminator, batch, setup, opt, lr,
                                disc_lr, mask_rng);
      sum.l_id += r.l_id;
      sum.l_conf += r.l_conf;
      sum.l_adv += r.l_adv;
      sum.l_cls += r.l_cls;
      sum.l_final += r.l_final;
      confs.push_back(r.confidence);
    }
    const double inv = 1.0 / double(tc.steps_per_epoch);
    for (double* v : {&sum.l_id, &sum.l_conf, &sum.l_adv, &sum.l_cls, &sum.l_final}) *v *= inv;
    sum.step = step;
    conf_epochs.push_back(std::move(confs));
    const auto curve = confidence_curve(std::span(conf_epochs).last(1));
    sum.mean_p_max = curve.mean.front();
    if (metrics) {
      metrics << sum.epoch << ',' << sum.step;
      for (double v : {sum.l_id, sum.l_conf, sum.l_adv, sum.l_cls, sum.l_final, sum.lr}) {
        metrics << ',' << format_double(v);
      }
      for (double v : sum.mean_p_max) metrics << ',' << format_double(v);
      metrics << '\n';
      metrics.flush();
    }
    result.epochs.push_back(std::move(sum));
  }
  result.confidence = confidence_curve(conf_epochs);

  if (out_dir) {
    write_confidence_csv(*out_dir / "confidence.csv", result.confidence, data.group_names);
    Checkpoint ckpt;
    ckpt.metadata = metadata;
    ckpt.metadata["num_classes"] = std::to_string(setup.recognizer.num_classes);
    ckpt.metadata["num_races"] = std::to_string(setup.discriminator.num_races);
    ckpt.metadata["image_side"] = std::to_string(data.image_side);
    std::string names;
    for (std::size_t g = 0; g < data.group_names.size(); ++g) {
      names += (g ? "," : "") + data.group_names[g];
    }
    ckpt.metadata["group_names"] = names;
    ckpt.put_parameters("recognizer.", result.recognizer.parameters());
    ckpt.put_parameters("discriminator.", result.discriminator.parameters());
    ckpt.save(*out_dir / "model.ckpt");
  }
  return result;
}

template void sgd_update(ParameterSet<float>&, const std::map<std::string, Tensor<float>>&,
                         SgdState<float>&, double, double, double);
template void sgd_update(ParameterSet<double>&, const std::map<std::string, Tensor<double>>&,
                         SgdState<double>&, double, double, double);

}  // namespace gabn
