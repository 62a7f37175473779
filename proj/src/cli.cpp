#include "gabn/cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <map>
#include <set>

#include "gabn/checkpoint.hpp"
#include "gabn/config.hpp"
#include "gabn/evaluation.hpp"
#include "gabn/training.hpp"

namespace gabn::cli {

namespace {

std::optional<std::filesystem::path> output_dir(const std::optional<std::filesystem::path>& flag,
                                                const std::optional<std::filesystem::path>& fallback) {
  if (flag) return flag;
  if (const char* env = std::getenv(kOutDirEnv); env && *env) return std::filesystem::path(env);
  return fallback;
}

struct LoadedModel {
  RunConfig config;
  Recognizer<float> recognizer;
  std::vector<std::string> group_names;
};

LoadedModel load_model(const std::filesystem::path& path) {
  if (!std::filesystem::is_regular_file(path)) throw IoError("checkpoint not found: " + path.string());
  const auto ckpt = Checkpoint::load(path);
  std::map<std::string, std::string> known;
  const auto& keys = RunConfig::keys();
  for (const auto& [k, v] : ckpt.metadata) {
    if (std::find(keys.begin(), keys.end(), k) != keys.end()) known[k] = v;
  }
  auto cfg = RunConfig::from_map(known);
  auto meta = [&](const char* key) -> const std::string& {
    auto it = ckpt.metadata.find(key);
    if (it == ckpt.metadata.end()) {
      throw IoError("checkpoint " + path.string() + " lacks metadata '" + key + "'");
    }
    return it->second;
  };
  auto rc = cfg.setup.recognizer;
  rc.image_side = std::stoul(meta("image_side"));
  rc.num_classes = std::stoul(meta("num_classes"));
  rc.scale = cfg.setup.loss.scale;
  rc.margin = cfg.setup.loss.margin;
  cfg.synthetic.image_side = rc.image_side;
  Recognizer<float> net(rc, 0);
  ckpt.load_parameters("recognizer.", net.parameters());

  std::vector<std::string> groups;
  std::string names = meta("group_names");
  std::size_t start = 0;
  while (start <= names.size()) {
    const auto comma = names.find(',', start);
    groups.push_back(names.substr(start, comma == std::string::npos ? names.npos : comma - start));
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  return {std::move(cfg), std::move(net), std::move(groups)};
}

GroupedDataset load_run_data(const RunConfig& cfg) {
  if (cfg.data_root.empty()) return generate_synthetic_dataset(cfg.synthetic);
  return load_image_dataset(cfg.data_root, cfg.image_side());
}

// Runs a command body, mapping errors to exit codes.
template <typename F>
int guarded(const char* cmd, F&& body) {
  try {
    return body();
  } catch (const NumericError& e) {
    std::cerr << "gabn " << cmd << ": numeric failure: " << e.what() << '\n';
    return kExitNumeric;
  } catch (const std::exception& e) {
    std::cerr << "gabn " << cmd << ": " << e.what() << '\n';
    return kExitUsage;
  }
}

std::vector<std::filesystem::path> image_files(const std::filesystem::path& root) {
  if (!std::filesystem::is_directory(root)) throw IoError("image directory not found: " + root.string());
  std::vector<std::filesystem::path> files;
  for (const auto& e : std::filesystem::recursive_directory_iterator(root)) {
    if (e.is_regular_file() && has_image_extension(e.path())) files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  return files;
}

}  // namespace

int cmd_train(const TrainOptions& opts) {
  return guarded("train", [&] {
    auto cfg = load_run_config(opts.config);
    for (const auto& kv : opts.overrides) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
      cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
    }
    cfg.out_dir = output_dir(opts.out, cfg.out_dir);
    if (!cfg.out_dir) {
      throw ConfigError("no output directory: set out_dir, pass --out or set " +
                        std::string(kOutDirEnv));
    }
    cfg.validate();
    const auto data = load_run_data(cfg);
    auto meta = cfg.to_map();
    meta.erase("out_dir");
    std::filesystem::create_directories(*cfg.out_dir);
    {
      std::ofstream resolved(*cfg.out_dir / "config.txt");
      for (const auto& [k, v] : meta) resolved << k << " = " << v << '\n';
    }
    const auto result = train(cfg.resolved_setup(), data, cfg.out_dir, meta);
    for (const auto& e : result.epochs) {
      std::cout << "epoch " << e.epoch << " step " << e.step << " L_ID " << e.l_id << " L_Final "
                << e.l_final << " L_conf " << e.l_conf << " L_adv " << e.l_adv << " L_cls "
                << e.l_cls << " lr " << e.lr << '\n';
    }
    std::cout << "wrote " << (*cfg.out_dir / "model.ckpt").string() << '\n';
    return kExitOk;
  });
}

int cmd_eval(const EvalOptions& opts) {
  return guarded("eval", [&]() -> int {
    const int sources = int(opts.pairs.has_value()) + int(opts.synthetic) + int(opts.replay.has_value());
    if (sources != 1) throw ConfigError("choose exactly one of --pairs, --synthetic, --replay");

    FairnessReport report;
    std::optional<std::filesystem::path> default_out;
    if (opts.replay) {
      report = read_report_csv(*opts.replay);
    } else {
      if (!opts.checkpoint) throw ConfigError("--checkpoint is required with --pairs/--synthetic");
      auto model = load_model(*opts.checkpoint);
      default_out = opts.checkpoint->parent_path();
      if (opts.synthetic) {
        const auto data = generate_synthetic_dataset(model.config.synthetic);
        const auto& ec = model.config.eval;
        const auto pairs =
            sample_verification_pairs(data, ec.pairs_per_group, ec.positive_fraction, ec.pair_seed);
        report = evaluate_pairs(model.recognizer, data, pairs, {ec.folds});
      } else {
        const auto records = read_pairs_csv(*opts.pairs);
        if (records.empty()) throw DomainError("pairs file has no pairs");
        std::set<std::string> group_set;
        std::map<std::string, std::size_t> image_index;
        for (const auto& r : records) {
          group_set.insert(r.group);
          image_index.try_emplace(r.path_a, 0);
          image_index.try_emplace(r.path_b, 0);
        }
        GroupedDataset data;
        data.image_side = model.recognizer.config().image_side;
        data.group_names.assign(group_set.begin(), group_set.end());
        std::vector<float> pixels;
        const auto base = opts.pairs->parent_path();
        for (auto& [path, idx] : image_index) {
          std::filesystem::path p(path);
          if (p.is_relative() && !std::filesystem::exists(p)) p = base / p;
          const auto t = preprocess(resize_bilinear(read_rgb(p), data.image_side, data.image_side));
          idx = data.identity.size();
          pixels.insert(pixels.end(), t.data().begin(), t.data().end());
          data.identity.push_back(0);
          data.group.push_back(0);
          data.split.push_back(Split::eval);
          data.paths.push_back(p.string());
        }
        data.images = Tensor<float>({data.identity.size(), 3, data.image_side, data.image_side},
                                    std::move(pixels));
        std::vector<VerificationPair> pairs;
        for (const auto& r : records) {
          const auto g = std::distance(group_set.begin(), group_set.find(r.group));
          pairs.push_back({image_index[r.path_a], image_index[r.path_b], r.same, int(g)});
        }
        report = evaluate_pairs(model.recognizer, data, pairs, {model.config.eval.folds});
      }
    }
    std::cout << format_report_table(report);
    if (const auto out = output_dir(opts.out, default_out)) {
      std::filesystem::create_directories(*out);
      write_report_csv(*out / "report.csv", report);
      std::cout << "wrote " << (*out / "report.csv").string() << '\n';
    }
    return kExitOk;
  });
}

int cmd_gam(const GamOptions& opts) {
  return guarded("gam", [&]() -> int {
    const auto out = output_dir(opts.out, std::nullopt);
    if (!out) throw ConfigError("--out is required");
    auto model = load_model(opts.checkpoint);
    const auto side = model.recognizer.config().image_side;

    std::vector<GamMap<float>> maps;
    std::vector<int> groups;
    std::vector<std::string> group_names;
    std::size_t written = 0;
    for (const auto& file : image_files(opts.images)) {
      RgbImage img;
      try {
        img = read_rgb(file);
      } catch (const IoError& e) {
        std::cerr << "warning: skipping " << file << ": " << e.what() << '\n';
        continue;
      }
      const auto input = preprocess(resize_bilinear(img, side, side));
      auto gam = normalize_gam(compute_gam(model.recognizer, input).front());
      const auto rel = std::filesystem::relative(file, opts.images);
      auto target = *out / rel;
      target.replace_extension(".pgm");
      std::filesystem::create_directories(target.parent_path());
      write_gam_pgm(target, resize_gam(gam, img.height, img.width));
      ++written;

      const std::string group = rel.has_parent_path() ? rel.begin()->string() : "all";
      auto it = std::find(group_names.begin(), group_names.end(), group);
      if (it == group_names.end()) it = group_names.insert(group_names.end(), group);
      groups.push_back(int(it - group_names.begin()));
      maps.push_back(std::move(gam));
    }
    if (written == 0) throw IoError("no decodable image under " + opts.images.string());
    if (opts.average_by_group) {
      const auto avg = average_gam(std::span<const GamMap<float>>(maps), std::span<const int>(groups));
      for (const auto& [g, m] : avg) {
        const auto path = *out / ("average_" + group_names[g] + ".pgm");
        write_gam_pgm(path, m);
        std::cout << group_names[g] << ": support " << gam_support(m) << " of "
                  << m.values.size() << " pixels -> " << path.string() << '\n';
      }
    }
    std::cout << "wrote " << written << " GAM heatmaps to " << out->string() << '\n';
    return kExitOk;
  });
}

int run(int argc, char** argv) {
  CLI::App app{"Gradient attention balance network: training, evaluation and GAM maps"};
  app.require_subcommand(1);

  TrainOptions train_opts;
  auto* train_cmd = app.add_subcommand("train", "Train a recognizer from a config file");
  train_cmd->add_option("--config", train_opts.config, "Config file (key = value)")->required();
  train_cmd->add_option("--out", train_opts.out, "Output directory");
  train_cmd->add_option("--set", train_opts.overrides, "Override a config key (key=value), repeatable");

  EvalOptions eval_opts;
  auto* eval_cmd = app.add_subcommand("eval", "Per-group verification accuracy and fairness");
  eval_cmd->add_option("--checkpoint", eval_opts.checkpoint, "Checkpoint written by train");
  auto* pairs_opt = eval_cmd->add_option("--pairs", eval_opts.pairs, "Pairs CSV: pathA,pathB,same,group");
  auto* synth_opt = eval_cmd->add_flag("--synthetic", eval_opts.synthetic,
                                       "Held-out pairs from the checkpoint's synthetic data");
  auto* replay_opt = eval_cmd->add_option("--replay", eval_opts.replay,
                                          "Report CSV with known per-group accuracies");
  pairs_opt->excludes(synth_opt)->excludes(replay_opt);
  synth_opt->excludes(replay_opt);
  eval_cmd->add_option("--out", eval_opts.out, "Output directory for report.csv");

  GamOptions gam_opts;
  auto* gam_cmd = app.add_subcommand("gam", "Write GAM heatmaps for a directory of images");
  gam_cmd->add_option("--checkpoint", gam_opts.checkpoint, "Checkpoint written by train")->required();
  gam_cmd->add_option("--images", gam_opts.images, "Image directory (<group>/... layout)")->required();
  gam_cmd->add_option("--out", gam_opts.out, "Output directory");
  gam_cmd->add_flag("--average-by-group", gam_opts.average_by_group,
                    "Also write one average heatmap per group");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  if (train_cmd->parsed()) return cmd_train(train_opts);
  if (eval_cmd->parsed()) return cmd_eval(eval_opts);
  return cmd_gam(gam_opts);
}

}  // namespace gabn::cli
