#pragma once

// Adam training loop over a fixed scene set.
//
// Iteration i uses a batch drawn from an epoch permutation seeded by
// mix_seed(train.seed, epoch) and per-slot flips seeded by (train.seed, i), so
// the schedule is a pure function of the iteration index and resuming from a
// checkpoint continues bit-for-bit.

#include "aios/body_model.hpp"
#include "aios/config.hpp"
#include "aios/network.hpp"
#include "aios/objective.hpp"
#include "aios/scene.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace aios {

struct IterationLog {
  int iteration = 0;
  double lr = 0.0;
  double grad_norm = 0.0;  // before clipping
  LossReport loss;         // batch mean
};

// One line "iteration=… lr=… grad_norm=… total=… <term>=…" with %.17g values.
std::string format_log_line(const IterationLog& log);

class Trainer {
 public:
  Trainer(const RunConfig& config, const body::BodyModel& model, std::vector<SceneGroundTruth> scenes);

  // Runs iteration `iteration()` and advances. Throws NonFiniteLossError naming
  // the first non-finite term.
  IterationLog step();

  // Indices and flip flags of the batch used at an iteration.
  std::vector<std::pair<int, bool>> batch(int iteration) const;
  double learning_rate(int iteration) const;

  int iteration() const { return iteration_; }
  AiosNet& net() { return net_; }
  const RunConfig& config() const { return config_; }

  void save(const std::filesystem::path& path) const;
  // Restores parameters, optimizer state and the iteration counter.
  void resume(const std::filesystem::path& path);

  // Loss of one scene without updating parameters.
  LossReport evaluate_loss(const SceneGroundTruth& scene, Scheme scheme);

 private:
  RunConfig config_;
  const body::BodyModel* model_;
  std::vector<SceneGroundTruth> scenes_;
  std::vector<SceneGroundTruth> flipped_;
  AiosNet net_;
  LossContext loss_ctx_;
  int iteration_ = 0;
};

// Trains up to train.iterations, writing checkpoint.bin, loss_log.txt and
// config_echo.txt under out_dir (the log is appended to when resuming). A
// non-finite loss writes nonfinite_dump.txt and rethrows.
IterationLog run_training(Trainer& trainer, const std::filesystem::path& out_dir, bool quiet = false);

}  // namespace aios
