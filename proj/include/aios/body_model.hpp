#pragma once

// Reduced SMPL-X-like whole-body model.
//
// Skeleton joint order matches the concatenated pose vector:
//   0..21  body (0 = pelvis, root)
//   22..36 left hand (5 fingers x 3 joints)
//   37..51 right hand
//   52     jaw
// The model frame is camera-aligned: x to the image right, y down, z away
// from the camera. A person in the rest pose faces the camera.

#include "aios/common.hpp"

#include <array>
#include <filesystem>
#include <vector>

namespace aios::body {

inline constexpr int kNumJoints = 53;
inline constexpr int kNumBodyJoints = 22;
inline constexpr int kNumHandJoints = 15;
inline constexpr int kLHandStart = 22;
inline constexpr int kRHandStart = 37;
inline constexpr int kJawJoint = 52;
inline constexpr int kNumShape = 10;
inline constexpr int kNumExpr = 10;
inline constexpr int kNumPose = kNumJoints * 3;                 // 159
inline constexpr int kNumParams = kNumPose + kNumShape + kNumExpr;  // 179
inline constexpr int kNumPoseFeatures = (kNumJoints - 1) * 9;     // 468

// Keypoint set used for 2D/3D supervision: 17 body, 5 per hand, 6 face.
inline constexpr int kNumBodyKeypoints = 17;
inline constexpr int kNumHandKeypoints = 5;
inline constexpr int kNumFaceKeypoints = 6;
inline constexpr int kNumKeypoints = kNumBodyKeypoints + 2 * kNumHandKeypoints + kNumFaceKeypoints;  // 33

struct KeypointRange {
  int start;
  int count;
};
KeypointRange keypoint_range(Part part);

// Joint index of each body/hand keypoint (face keypoints are vertices).
const std::array<int, kNumBodyKeypoints>& body_keypoint_joints();
const std::array<int, kNumHandKeypoints>& hand_keypoint_joints(bool left);

// Left/right mirror permutations.
const std::array<int, kNumJoints>& joint_mirror();
const std::array<int, kNumKeypoints>& keypoint_mirror();

// Skeleton parents; root = -1 and parent < child.
const std::array<int, kNumJoints>& default_parents();

// Joint index sets per part, used for per-part joint metrics.
std::vector<int> part_joints(Part part);

using PoseMat = Eigen::Matrix<double, kNumJoints, 3, Eigen::RowMajor>;

// Per-person pose, shape and expression parameters.
struct ParamSet {
  PoseMat pose = PoseMat::Zero();  // row j = axis-angle of joint j
  Eigen::Matrix<double, kNumShape, 1> beta = Eigen::Matrix<double, kNumShape, 1>::Zero();
  Eigen::Matrix<double, kNumExpr, 1> psi = Eigen::Matrix<double, kNumExpr, 1>::Zero();

  auto body() { return pose.topRows<kNumBodyJoints>(); }
  auto body() const { return pose.topRows<kNumBodyJoints>(); }
  auto lhand() { return pose.middleRows<kNumHandJoints>(kLHandStart); }
  auto lhand() const { return pose.middleRows<kNumHandJoints>(kLHandStart); }
  auto rhand() { return pose.middleRows<kNumHandJoints>(kRHandStart); }
  auto rhand() const { return pose.middleRows<kNumHandJoints>(kRHandStart); }
  auto jaw() { return pose.row(kJawJoint); }
  auto jaw() const { return pose.row(kJawJoint); }

  // Flat layout: 159 pose entries (row-major), then beta, then psi.
  Vec to_vector() const;
  // Validates finiteness and wraps every axis-angle into norm < 2*pi.
  static ParamSet from_vector(const Vec& v);
  void validate() const;
  void wrap();
  // Mirror across the x = 0 plane: swaps left/right joints and reflects rotations.
  ParamSet mirrored() const;
};

struct CameraModel {
  double focal = 64.0;
  Vec2 principal = Vec2(31.5, 31.5);
  Vec3 translation = Vec3(0.0, 0.0, 5.0);
};

struct TemplateOptions {
  int num_vertices = 400;
  double pose_blend_scale = 0.0;  // > 0 fills pose blendshapes with small random values
  unsigned seed = 20240101;
};

class BodyModel {
 public:
  int num_vertices = 0;
  int num_joints = kNumJoints;
  Mat template_vertices;        // N_v x 3
  Mat shape_blendshapes;        // (N_v*3) x 10, row = vertex*3 + coord
  Mat expression_blendshapes;   // (N_v*3) x 10
  Mat pose_blendshapes;         // (N_v*3) x 468
  std::vector<int> parents;     // N_j
  Mat joint_regressor;          // N_j x N_v
  Mat skinning_weights;         // N_v x N_j
  std::array<std::vector<int>, kNumParts> part_vertices;

  // Derived at construction / load.
  Mat keypoint_regressor;       // N_k x N_v
  bool has_pose_blendshapes = false;

  // Throws InvalidParameterError naming the first violated invariant.
  void validate() const;
  // Recomputes keypoint_regressor and has_pose_blendshapes from stored fields.
  void finalize();

  void save(const std::filesystem::path& path) const;
  static BodyModel load(const std::filesystem::path& path);
};

BodyModel make_procedural_model(const TemplateOptions& options = {});

Mat3 rodrigues(const Vec3& axis_angle);
// Derivatives dR/dv_k for k = 0..2.
std::array<Mat3, 3> rodrigues_jacobian(const Vec3& axis_angle);

struct BodyOutput {
  Mat vertices;   // N_v x 3
  Mat joints;     // N_j x 3, regressed from posed vertices
  Mat keypoints;  // N_k x 3
};

// Intermediate values needed by the reverse pass.
struct BodyState {
  ParamSet params;
  Mat shaped;                      // N_v x 3
  Mat rest_joints;                 // N_j x 3
  std::vector<Mat3> local_rot;     // R_j
  std::vector<Mat3> global_rot;    // M_j
  std::vector<Vec3> global_trans;  // t_j (joint origin)
  Mat skin_transforms;             // N_j x 12: [M_j | t_j - M_j J_j] row-major 3x4
  Mat posed_rest;                  // N_v x 3 (shaped + pose correctives)
  Mat blended;                     // N_v x 12
};

BodyOutput forward(const BodyModel& model, const ParamSet& params, BodyState* state = nullptr);

// Vector-Jacobian product. Any gradient argument may be empty (treated as zero).
// Returns dL/dparams in ParamSet::to_vector() layout.
Vec backward(const BodyModel& model, const BodyState& state, const Mat& grad_vertices, const Mat& grad_joints,
             const Mat& grad_keypoints);

// Pinhole projection of points + camera.translation.
Mat project(const Mat& points, const CameraModel& camera);

struct ProjectionGrad {
  Mat points;         // K x 3
  Vec3 translation;
};
ProjectionGrad project_backward(const Mat& points, const CameraModel& camera, const Mat& grad_uv);

}  // namespace aios::body
