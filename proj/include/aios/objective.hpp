#pragma once

// Total training loss over all stages of one scene: per-stage Hungarian
// matching, weighted terms, and gradient seeding onto the forward tape.
//
// Term names are "s{stage}.{term}" or "s{stage}.{term}.{part}" with terms
// cls, box_l1, giou, j2d, oks, param, kp3d, kp2d. Instance terms are averaged
// over the stage's matched candidates; an instance whose part has no box or
// no visible keypoints contributes zero. Unmatched candidates only enter the
// classification term.

#include "aios/body_model.hpp"
#include "aios/config.hpp"
#include "aios/decoder.hpp"
#include "aios/network.hpp"
#include "aios/scene.hpp"

#include <map>
#include <string>
#include <vector>

namespace aios {

struct LossReport {
  std::vector<std::string> names;          // insertion order
  std::map<std::string, double> values;    // unweighted term values
  std::map<std::string, double> weights;
  std::map<int, double> stage_totals;      // weighted sum per stage
  double total = 0.0;

  void add(const std::string& name, int stage, double value, double weight);
  bool has(const std::string& name) const { return values.count(name) != 0; }
  // Recomputes sum(weight × value) over all terms.
  double weighted_sum() const;
  // First non-finite term name, or empty.
  std::string first_non_finite() const;
  // Adds another report's terms scaled by s (for batch averaging).
  void accumulate(const LossReport& other, double s);
};

struct StageGrads {
  Mat scores;
  std::array<Mat, kNumParts> boxes;
  std::array<Mat, kNumParts> joints;
  Mat params;
  Mat translation;
};

struct LossContext {
  const LossConfig* config = nullptr;
  const body::BodyModel* model = nullptr;
  body::CameraModel camera;
  int width = 64;
  int height = 64;
};

// Loss of a single stage; fills grads (d total / d outputs) when non-null.
LossReport stage_loss(const LossContext& ctx, const StageOutput& out, const SceneGroundTruth& gt, StageGrads* grads);

// Sum over all stages. When grad_scale != 0, seeds grad_scale × d total / d outputs
// onto the tape of the forward result (call Tape::backward() afterwards).
LossReport total_loss(const LossContext& ctx, const ForwardResult& result, const SceneGroundTruth& gt,
                      double grad_scale);

// Normalized (x, y) keypoints of a part, K × 2.
Mat normalized_keypoints(const PersonGT& person, Part part, int width, int height);

}  // namespace aios
