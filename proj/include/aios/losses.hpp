#pragma once

// Matching costs and loss terms. Every differentiable term returns its value
// together with the analytic gradient with respect to its prediction inputs.

#include "aios/body_model.hpp"
#include "aios/common.hpp"
#include "aios/scene.hpp"

#include <array>
#include <map>
#include <string>
#include <utility>
#include <vector>

namespace aios {

// ---- boxes ----

// Generalized IoU of two normalized (cx, cy, w, h) boxes; throws DegenerateBoxError if w or h <= 0.
double giou(const Vec4& a, const Vec4& b);
double iou(const Vec4& a, const Vec4& b);

struct GiouGrad {
  double value;
  Vec4 grad_a;  // d giou / d a
  Vec4 grad_b;
};
GiouGrad giou_with_grad(const Vec4& a, const Vec4& b);

// ---- focal loss ----

struct FocalResult {
  double value;
  Vec grad;  // d value / d logits
};
// Sigmoid focal loss summed over tokens and divided by max(1, #positives).
FocalResult focal_loss(const Vec& logits, const std::vector<std::uint8_t>& labels, double alpha = 0.25, double gamma = 2.0);

// ---- OKS ----

struct OksResult {
  double value = 0.0;
  Mat grad;            // d value / d pred, K x 2
  bool valid = false;  // false when no joint is visible (term skipped)
};
// 1 - mean over visible joints of exp(-d^2 / (2 area k^2)).
OksResult oks_loss(const Mat& pred, const Mat& gt, const std::vector<std::uint8_t>& visible, double area, double k = 0.1);

// ---- assignment ----

// Minimum-cost assignment for an n x m cost matrix. Returns, for each row,
// its column or -1 (only when n > m). Exact Hungarian algorithm.
std::vector<int> hungarian(const Mat& cost);

struct MatchCostWeights {
  double cls = 2.0;
  double l1 = 5.0;
  double giou = 2.0;
};

struct MatchResult {
  std::vector<std::pair<int, int>> pairs;  // (candidate, gt), sorted by candidate
  std::vector<int> unmatched_candidates;
};

// Body-box matching: cost = w_cls * (-sigmoid(score)) + w_l1 * |box - gt|_1 + w_giou * (1 - GIoU).
MatchResult hungarian_match(const Vec& scores, const Mat& boxes, const std::vector<Vec4>& gt_boxes,
                            const MatchCostWeights& weights = {});

// ---- parametric-model supervision ----

// Which parameters a stage predicts and is supervised on.
enum class SmplxLevel { kNone = 0, kBody = 1, kFull = 2 };

struct SmplxWeights {
  double param_pose = 1.0;
  double param_shape = 0.01;
  double param_expr = 0.01;
  std::array<double, kNumParts> kp3d = {1.0, 0.5, 0.5, 0.5};
  std::array<double, kNumParts> kp2d = {1.0, 0.5, 0.5, 0.5};
};

struct SmplxLossResult {
  double param = 0.0;                           // mean |pred - gt| over supervised entries
  double param_weighted = 0.0;                  // per-type weighted, same normalizer
  std::array<double, kNumParts> kp3d{};         // mean L1 over pelvis-centered keypoint coordinates
  std::array<double, kNumParts> kp2d{};         // mean L1 over visible normalized 2D coordinates
  std::array<bool, kNumParts> kp3d_valid{};
  std::array<bool, kNumParts> kp2d_valid{};
  bool camera_degenerate = false;
  double weighted = 0.0;                        // param_weighted + sum_p w3[p] kp3d[p] + w2[p] kp2d[p]
  Vec grad_params;                              // d weighted / d params (179, ParamSet::to_vector layout)
  Vec3 grad_translation = Vec3::Zero();
};

// Parameter, 3D keypoint and reprojected 2D keypoint losses for one matched person.
// At SmplxLevel::kBody only body pose and shape are supervised and only body keypoints enter.
SmplxLossResult smplx_loss(const body::BodyModel& model, const body::CameraModel& intrinsics, int width, int height,
                           const Vec& pred_params, const Vec3& pred_translation, const PersonGT& gt, SmplxLevel level,
                           const SmplxWeights& weights = {});

// Number of parameter entries supervised at a level.
int supervised_param_count(SmplxLevel level);

}  // namespace aios
