#pragma once

// Synthetic multi-person scenes: sampled bodies, projected keypoints, part
// boxes and a splat-rendered image.
//
// Pixel coordinates have their origin at the center of the top-left pixel.
// Normalized coordinates are n = u / W, so the frame spans [0, (W-1)/W].

#include "aios/body_model.hpp"
#include "aios/common.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace aios {

struct SceneConfig {
  int width = 64;
  int height = 64;
  int min_persons = 1;
  int max_persons = 3;
  double depth_min = 3.0;         // meters
  double depth_max = 6.0;
  double pose_noise = 0.25;       // radians, body joints
  double hand_pose_noise = 0.3;   // radians, finger joints
  double shape_noise = 1.0;
  double expr_noise = 1.0;
  bool overlap_bias = true;       // place later persons near earlier ones
  double box_pad = 0.05;          // fraction of the tight box
  double min_box = 0.01;          // normalized minimum box side
  double background_noise = 0.1;
  double occluder_radius = 0.2;   // meters, pelvis disc of nearer persons
  // Augmentation stubs; only horizontal flip is implemented.
  bool color_jitter = false;
  bool random_resize = false;
  bool instance_crop = false;

  void validate() const;
};

struct PersonGT {
  body::ParamSet params;
  Vec3 translation = Vec3::Zero();
  Mat keypoints3d;                 // N_k x 3, model frame (without translation)
  Mat keypoints2d;                 // N_k x 2, pixels
  std::vector<std::uint8_t> visible;  // N_k flags
  std::array<Vec4, kNumParts> boxes{};  // normalized (cx, cy, w, h)
  std::array<bool, kNumParts> box_valid{};
  Vec3 color = Vec3::Zero();
};

struct SceneGroundTruth {
  int width = 0;
  int height = 0;
  Mat image;                       // (H*W) x 3, row-major pixels, values in [0, 1]
  body::CameraModel camera;        // shared intrinsics; translation unused (zero)
  std::vector<PersonGT> persons;
};

// Intrinsics used for every scene of a config: focal = W, principal point at the image center.
body::CameraModel scene_camera(const SceneConfig& config);

struct PartBoxes {
  std::array<Vec4, kNumParts> boxes{};
  std::array<bool, kNumParts> valid{};
};

// Tight boxes over visible part keypoints, padded, clamped to the frame and normalized.
PartBoxes derive_boxes(const Mat& keypoints2d, const std::vector<std::uint8_t>& visible, int width, int height,
                       double pad, double min_box);

SceneGroundTruth generate_scene(const SceneConfig& config, const body::BodyModel& model, std::uint64_t seed);

// Mirror image and labels about the vertical center line.
SceneGroundTruth horizontal_flip(const SceneGroundTruth& scene);

// Camera-frame person translation for a projected pelvis pixel at a given depth.
Vec3 unproject_pelvis(const body::CameraModel& camera, double u, double v, double depth);

// ---- dataset container ----

struct DatasetManifest {
  int format_version = 1;
  int num_scenes = 0;
  std::uint64_t seed = 0;
  SceneConfig config;
  std::vector<int> person_count_histogram;  // index = persons per scene
};

void write_dataset(const std::filesystem::path& dir, const std::vector<SceneGroundTruth>& scenes,
                   const SceneConfig& config, std::uint64_t seed);
std::vector<SceneGroundTruth> read_dataset(const std::filesystem::path& dir, DatasetManifest* manifest = nullptr);

void write_scene_record(const std::filesystem::path& path, const SceneGroundTruth& scene);
SceneGroundTruth read_scene_record(const std::filesystem::path& path, const body::CameraModel& camera);

// Scene i of a dataset generated with `seed` uses mix_seed(seed, i).
std::vector<SceneGroundTruth> generate_dataset(const SceneConfig& config, const body::BodyModel& model, int count,
                                               std::uint64_t seed);

}  // namespace aios
