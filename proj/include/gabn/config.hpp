#pragma once

// Flat "key = value" run configuration. Lines starting with '#' and text
// after a '#' are comments; blank lines are ignored. Lists are comma-separated
// and booleans are true/false/1/0.

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "gabn/data.hpp"
#include "gabn/training.hpp"

namespace gabn {

struct EvalConfig {
  std::size_t pairs_per_group = 600;
  double positive_fraction = 0.5;
  std::uint64_t pair_seed = 7;
  std::size_t folds = 0;  // 0: best threshold over all pairs of a group
};

struct RunConfig {
  TrainSetup setup;
  // Erasure rectangle limits; unset means ceil(image_side / 7).
  std::optional<std::size_t> h_mask, w_mask;
  std::string data_root;  // empty: synthetic data
  SyntheticSpec synthetic;
  EvalConfig eval;
  std::optional<std::filesystem::path> out_dir;

  RunConfig();

  // Sets one key from its text form; unknown keys and bad values throw
  // ConfigError naming the key.
  void set(std::string_view key, std::string_view value);
  std::string get(std::string_view key) const;

  static const std::vector<std::string>& keys();

  // Every key with its current value, out_dir only when set.
  std::map<std::string, std::string> to_map() const;
  static RunConfig from_map(const std::map<std::string, std::string>& values);

  // Setup with mask limits resolved against the image side.
  TrainSetup resolved_setup() const;
  std::size_t image_side() const { return synthetic.image_side; }

  void validate() const;
};

// Parses config text into key/value pairs. Repeated keys and malformed lines
// throw ConfigError with the line number.
std::map<std::string, std::string> parse_config_text(std::string_view text,
                                                     std::string_view source = "config");

RunConfig load_run_config(const std::filesystem::path& path);

}  // namespace gabn
