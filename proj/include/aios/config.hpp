#pragma once

// Run configuration: dotted keys with documented defaults, parsed from
// "key = value" files. Unknown keys are rejected.

#include "aios/losses.hpp"
#include "aios/scene.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace aios {

enum class Variant { kFull, kNaive };
enum class Scheme { kS23, kS3Only, kAll };

const char* variant_name(Variant v);
const char* scheme_name(Scheme s);
Variant parse_variant(const std::string& s);
Scheme parse_scheme(const std::string& s);

struct ModelConfig {
  Variant variant = Variant::kFull;
  std::array<int, 4> channels = {16, 32, 64, 64};  // backbone blocks, each stride 2
  int hidden_dim = 64;
  int heads = 4;
  int ffn_dim = 128;
  int enc_layers = 3;
  int points = 4;               // deformable sampling points per level per head
  int num_candidates = 60;      // M_h
  int num_body_candidates = 24; // M_b
  int lhand_joints = 5;
  int rhand_joints = 5;
  int face_joints = 6;
  int dec_layers_s1 = 2;
  int dec_layers_s2 = 2;
  int dec_layers_s3 = 2;
  int dec_layers_naive = 4;
  std::uint64_t init_seed = 1;
  int body_vertices = 400;
  double pose_blend_scale = 0.0;
  std::uint64_t body_seed = 20240101;

  static constexpr int kBodyJointTokens = 17;
  static constexpr int kNumLevels = 3;

  void validate(const SceneConfig& scene) const;
};

struct LossConfig {
  Scheme scheme = Scheme::kS23;
  double cls = 2.0;
  double box_l1 = 5.0;
  double giou = 2.0;
  double j2d = 10.0;
  std::array<double, kNumParts> oks = {4.0, 0.5, 0.5, 0.5};
  SmplxWeights smplx;
  double encoder = 1.0;  // multiplier on the encoder-proposal terms
  double focal_alpha = 0.25;
  double focal_gamma = 2.0;
  double oks_k = 0.1;
  MatchCostWeights match;

  // Multiplies every loss weight by s.
  void scale_weights(double s);
};

struct TrainConfig {
  int iterations = 2000;
  int batch_size = 4;
  double lr = 1e-4;
  double lr_drop_at = 0.8;    // fraction of iterations
  double lr_drop_factor = 0.1;
  double grad_clip = 0.1;     // global norm; <= 0 disables
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  bool flip = true;           // horizontal flip with probability 1/2
  std::uint64_t seed = 1;
  int log_every = 1;
  int checkpoint_every = 0;   // 0: only at the end
};

struct EvalConfig {
  double threshold = 0.5;        // score threshold (probability)
  double match_threshold = 0.05; // fraction of image width
  bool pelvis_align = true;
};

struct DataConfig {
  int num_scenes = 64;
  std::uint64_t seed = 1;
};

struct RunConfig {
  SceneConfig scene;
  ModelConfig model;
  LossConfig loss;
  TrainConfig train;
  EvalConfig eval;
  DataConfig data;

  void validate() const;
  // Applies one "key = value" assignment; throws ConfigError on unknown keys or bad values.
  void set(const std::string& key, const std::string& value);
  // All keys with their current values, in a fixed order.
  std::vector<std::pair<std::string, std::string>> entries() const;
  std::string echo() const;

  static RunConfig parse(const std::string& text);
  static RunConfig load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;
};

// Named score thresholds for evaluation.
double threshold_preset(const std::string& name);

}  // namespace aios
