#pragma once

// The whole detector: feature pipeline, encoder proposals and the progressive decoder.

#include "aios/autodiff.hpp"
#include "aios/config.hpp"
#include "aios/decoder.hpp"
#include "aios/features.hpp"

#include <vector>

namespace aios {

struct ForwardResult {
  EncoderOutput encoder;
  std::vector<StageOutput> stages;  // [0] encoder proposals, then decoder stages 1..S
  const StageOutput& final_stage() const { return stages.back(); }
};

class AiosNet {
 public:
  AiosNet(const ModelConfig& model, const SceneConfig& scene);

  // Forward pass for one (H·W) × 3 image. Heads compute only what the scheme supervises.
  ForwardResult forward(ad::Tape& t, const Mat& image, Scheme scheme);

  ad::ParamStore& params() { return store_; }
  const ad::ParamStore& params() const { return store_; }
  const ModelConfig& model_config() const { return model_; }
  const SceneConfig& scene_config() const { return scene_; }

 private:
  ModelConfig model_;
  SceneConfig scene_;
  body::CameraModel camera_;
  ad::ParamStore store_;
};

}  // namespace aios
