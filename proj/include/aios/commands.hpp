#pragma once

// Implementations behind the `aios` command-line tool. datagen, train and eval
// write config_echo.txt into their output directory; render writes the image
// with <stem>.json (detections) and <stem>.config_echo.txt beside it.

#include "aios/body_model.hpp"
#include "aios/config.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace aios {

struct CommandOptions {
  std::optional<std::filesystem::path> config;
  std::optional<std::uint64_t> seed;  // overrides data.seed, train.seed and model.init_seed
  std::optional<std::string> variant;
  std::optional<std::string> scheme;
  std::optional<std::string> threshold;  // number or preset name
  std::vector<std::string> overrides;    // "key=value"
  std::filesystem::path out;
  std::filesystem::path data;
  std::filesystem::path checkpoint;
  std::optional<std::filesystem::path> resume;
  std::optional<int> count;  // datagen scene count (data.num_scenes)
  int scene = 0;             // render scene index
  bool quiet = false;
};

// Process exit codes.
inline constexpr int kExitOk = 0;
inline constexpr int kExitCheckFailed = 1;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitCheckpoint = 3;
inline constexpr int kExitIo = 4;
inline constexpr int kExitNonFinite = 5;
inline constexpr int kExitOther = 6;

// Base config (file or defaults) with command-line overrides applied and validated.
RunConfig resolve_config(const CommandOptions& options, const RunConfig* base = nullptr);
// Number or preset name (agora-0.5, agora-0.3).
double parse_threshold(const std::string& text);

body::BodyModel make_body_model(const ModelConfig& config);

void cmd_datagen(const CommandOptions& options);
void cmd_train(const CommandOptions& options);
void cmd_eval(const CommandOptions& options);
// --out is the image path (binary PPM).
void cmd_render(const CommandOptions& options);
// Returns true when every check passed.
bool cmd_check(const CommandOptions& options);

}  // namespace aios
