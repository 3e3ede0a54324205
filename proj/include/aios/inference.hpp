#pragma once

// Inference, evaluation and overlay rendering on top of a trained network.

#include "aios/body_model.hpp"
#include "aios/config.hpp"
#include "aios/metrics.hpp"
#include "aios/network.hpp"
#include "aios/scene.hpp"

#include <array>
#include <filesystem>
#include <string>
#include <vector>

namespace aios {

struct PersonPrediction {
  double score = 0.0;                     // probability
  std::array<Vec4, kNumParts> boxes{};    // normalized (cx, cy, w, h)
  Mat keypoints2d;                        // 33 × 2 pixels
  body::ParamSet params;
  Vec3 translation = Vec3::Zero();
};

// Final-stage detections with probability > threshold, sorted by score descending
// (ties to the lower candidate index).
std::vector<PersonPrediction> predict(AiosNet& net, const Mat& image, double threshold);

// Ground truth dressed up as perfect predictions (score 1).
std::vector<PersonPrediction> oracle_predictions(const SceneGroundTruth& scene);

// Accumulates detection and reconstruction metrics for one scene.
void score_scene(const body::BodyModel& model, const SceneGroundTruth& scene, const std::vector<PersonPrediction>& preds,
                 const EvalConfig& config, MetricAccumulator& acc);

struct EvalResult {
  MetricReport report;
  std::vector<int> detections_per_scene;
};

// Runs the network on every scene; per-scene work may fan out over worker threads
// (disabled by AIOS_DETERMINISTIC=1) and is reduced in scene order.
EvalResult evaluate(AiosNet& net, const body::BodyModel& model, const std::vector<SceneGroundTruth>& scenes,
                    const EvalConfig& config);

// Whether AIOS_DETERMINISTIC=1 is set.
bool deterministic_mode();
// Worker count for per-scene fan-out (1 in deterministic mode).
int worker_count();

// ---- rendering ----

struct RgbImage {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> pixels;  // row-major RGB
  void set(int x, int y, const std::array<std::uint8_t, 3>& c);
};

// Upscaled scene image with predicted boxes, 2D joints, projected mesh keypoints
// and a legend strip along the bottom.
RgbImage render_overlay(const body::BodyModel& model, const SceneGroundTruth& scene,
                        const std::vector<PersonPrediction>& preds, int scale = 4);
void write_ppm(const std::filesystem::path& path, const RgbImage& image);
RgbImage read_ppm(const std::filesystem::path& path);

}  // namespace aios
