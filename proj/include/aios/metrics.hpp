#pragma once

// Detection and reconstruction metrics: instance matching, per-part vertex
// and joint errors (with and without Procrustes alignment), F1-normalized
// aggregates and report writers. Errors are reported in millimeters.

#include "aios/body_model.hpp"
#include "aios/common.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

namespace aios {

// ---- Procrustes ----

struct SimilarityTransform {
  double scale = 1.0;
  Mat3 rotation = Mat3::Identity();
  Vec3 translation = Vec3::Zero();

  Mat apply(const Mat& points) const;  // s R p + t per row
};

// Similarity transform minimizing sum |s R P_i + t - Q_i|^2 with det R = +1.
SimilarityTransform procrustes_align(const Mat& P, const Mat& Q);

// ---- instance matching ----

struct InstanceMatch {
  std::vector<std::pair<int, int>> pairs;  // (prediction, gt)
  std::vector<int> false_positives;
  std::vector<int> false_negatives;
};

// Greedy minimum-distance matching on mean 2D distance over the gt's visible
// body joints. A pair is accepted only if that distance is below threshold_px.
InstanceMatch instance_match(const std::vector<Mat>& pred_joints, const std::vector<Mat>& gt_joints,
                             const std::vector<std::vector<std::uint8_t>>& gt_visible, double threshold_px);

// ---- reconstruction errors ----

inline constexpr int kNumReportParts = 5;  // body, lhand, rhand, face, all
using PartErrors = std::array<double, kNumReportParts>;
const char* report_part_name(int p);

enum class Alignment { kPelvis, kNone };

struct PersonErrors {
  PartErrors mve{};
  PartErrors mpjpe{};
  PartErrors pa_pve{};
  PartErrors pa_mpjpe{};
};

// Camera-frame meshes of prediction and ground truth compared per part.
PersonErrors compute_errors(const body::BodyModel& model, const body::ParamSet& pred, const Vec3& pred_translation,
                            const body::ParamSet& gt, const Vec3& gt_translation, Alignment alignment = Alignment::kPelvis);

// Same, from precomputed camera-frame vertices and joints.
PersonErrors compute_errors_from_meshes(const body::BodyModel& model, const Mat& pred_vertices, const Mat& pred_joints,
                                        const Mat& gt_vertices, const Mat& gt_joints, Alignment alignment);

// ---- aggregation ----

struct MetricReport {
  double f_score = 0.0;
  double precision = 0.0;
  double recall = 0.0;
  PartErrors mve{};
  PartErrors mpjpe{};
  PartErrors pa_pve{};
  PartErrors pa_mpjpe{};
  double nmve = 0.0;
  double nmje = 0.0;
  int true_positives = 0;
  int false_positives = 0;
  int false_negatives = 0;
};

// Error divided by F1; +infinity when F1 = 0.
double normalize_by_f1(double error, double f_score);

// Detection rates from counts (undefined precision/recall reported as 0),
// mean errors over matched instances, and NMVE = MVE/F1, NMJE = MPJPE/F1 on the "all" part.
MetricReport aggregate(int true_positives, int false_positives, int false_negatives, const std::vector<PersonErrors>& matched);

// Accumulates per-scene results in a fixed order.
class MetricAccumulator {
 public:
  void add(const InstanceMatch& match, const std::vector<PersonErrors>& matched_errors);
  MetricReport report() const;

 private:
  int tp_ = 0;
  int fp_ = 0;
  int fn_ = 0;
  std::vector<PersonErrors> errors_;
};

// Flat "key = value" text and JSON documents with the MetricReport field names.
std::string report_to_text(const MetricReport& report);
std::string report_to_json(const MetricReport& report);
void write_report(const std::filesystem::path& dir, const MetricReport& report, const std::string& stem = "metrics");

}  // namespace aios
