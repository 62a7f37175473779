#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace gabn::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 2;
inline constexpr int kExitNumeric = 3;

// Environment variable that overrides the output directory of every command
// unless --out is given.
inline constexpr const char* kOutDirEnv = "GABN_OUT_DIR";

struct TrainOptions {
  std::filesystem::path config;
  std::optional<std::filesystem::path> out;
  std::vector<std::string> overrides;  // "key=value", applied after the file
};

struct EvalOptions {
  std::optional<std::filesystem::path> checkpoint;
  std::optional<std::filesystem::path> pairs;
  bool synthetic = false;
  std::optional<std::filesystem::path> replay;  // report CSV with known accuracies
  std::optional<std::filesystem::path> out;
};

struct GamOptions {
  std::filesystem::path checkpoint;
  std::filesystem::path images;
  std::optional<std::filesystem::path> out;
  bool average_by_group = false;
};

int cmd_train(const TrainOptions& options);
int cmd_eval(const EvalOptions& options);
int cmd_gam(const GamOptions& options);

// Parses argv and dispatches to a command.
int run(int argc, char** argv);

}  // namespace gabn::cli
