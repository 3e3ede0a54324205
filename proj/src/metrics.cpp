#include "aios/metrics.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>
#include <tuple>

namespace aios {

// ------------------------------------------------------------- Procrustes

Mat SimilarityTransform::apply(const Mat& points) const {
  Mat out = scale * points * rotation.transpose();
  out.rowwise() += translation.transpose();
  return out;
}

SimilarityTransform procrustes_align(const Mat& P, const Mat& Q) {
  if (P.rows() != Q.rows() || P.cols() != 3 || Q.cols() != 3) throw ShapeError("procrustes_align: expected two K x 3 point sets");
  const Eigen::Index n = P.rows();
  if (n < 3) throw AlignmentDegenerateError("procrustes_align: need at least 3 points");
  const Vec3 mu_p = P.colwise().mean().transpose();
  const Vec3 mu_q = Q.colwise().mean().transpose();
  const Mat pc = P.rowwise() - mu_p.transpose();
  const Mat qc = Q.rowwise() - mu_q.transpose();
  const double var_p = pc.squaredNorm() / n;
  const Mat3 sigma = (qc.transpose() * pc) / static_cast<double>(n);
  Eigen::JacobiSVD<Mat3> svd(sigma, Eigen::ComputeFullU | Eigen::ComputeFullV);
  const Vec3 d = svd.singularValues();
  if (!(var_p > 1e-20) || !(d(1) > 1e-12 * std::max(d(0), 1e-300))) {
    throw AlignmentDegenerateError("procrustes_align: point configuration is rank-degenerate");
  }
  Vec3 s(1.0, 1.0, 1.0);
  if (svd.matrixU().determinant() * svd.matrixV().determinant() < 0) s(2) = -1.0;
  SimilarityTransform t;
  t.rotation = svd.matrixU() * s.asDiagonal() * svd.matrixV().transpose();
  t.scale = d.dot(s) / var_p;
  t.translation = mu_q - t.scale * t.rotation * mu_p;
  return t;
}

// ------------------------------------------------------------- instance matching

InstanceMatch instance_match(const std::vector<Mat>& pred_joints, const std::vector<Mat>& gt_joints,
                             const std::vector<std::vector<std::uint8_t>>& gt_visible, double threshold_px) {
  if (gt_joints.size() != gt_visible.size()) throw ShapeError("instance_match: gt joints/visibility count mismatch");
  std::vector<std::tuple<double, int, int>> cand;
  for (std::size_t p = 0; p < pred_joints.size(); ++p) {
    for (std::size_t g = 0; g < gt_joints.size(); ++g) {
      const Mat& a = pred_joints[p];
      const Mat& b = gt_joints[g];
      const int k = static_cast<int>(std::min(a.rows(), b.rows()));
      double sum = 0.0;
      int count = 0;
      for (int j = 0; j < k; ++j) {
        if (!gt_visible[g][j]) continue;
        sum += (a.row(j) - b.row(j)).norm();
        ++count;
      }
      if (count == 0) continue;
      cand.emplace_back(sum / count, static_cast<int>(p), static_cast<int>(g));
    }
  }
  std::sort(cand.begin(), cand.end());
  std::vector<char> pred_used(pred_joints.size(), 0), gt_used(gt_joints.size(), 0);
  InstanceMatch m;
  for (const auto& [dist, p, g] : cand) {
    if (dist >= threshold_px) break;
    if (pred_used[p] || gt_used[g]) continue;
    pred_used[p] = gt_used[g] = 1;
    m.pairs.emplace_back(p, g);
  }
  std::sort(m.pairs.begin(), m.pairs.end());
  for (std::size_t p = 0; p < pred_joints.size(); ++p) {
    if (!pred_used[p]) m.false_positives.push_back(static_cast<int>(p));
  }
  for (std::size_t g = 0; g < gt_joints.size(); ++g) {
    if (!gt_used[g]) m.false_negatives.push_back(static_cast<int>(g));
  }
  return m;
}

// ------------------------------------------------------------- errors

const char* report_part_name(int p) {
  static const char* names[] = {"body", "lhand", "rhand", "face", "all"};
  return names[p];
}

namespace {

// Mean row distance over a subset (all rows if subset is null), in millimeters.
double mean_dist_mm(const Mat& a, const Mat& b, const std::vector<int>* subset) {
  double sum = 0.0;
  if (subset) {
    if (subset->empty()) return 0.0;
    for (int i : *subset) sum += (a.row(i) - b.row(i)).norm();
    return 1000.0 * sum / static_cast<double>(subset->size());
  }
  for (Eigen::Index i = 0; i < a.rows(); ++i) sum += (a.row(i) - b.row(i)).norm();
  return 1000.0 * sum / static_cast<double>(a.rows());
}

void fill_parts(PartErrors& out, const Mat& a, const Mat& b, const std::array<std::vector<int>, kNumParts>& sets) {
  for (int p = 0; p < kNumParts; ++p) out[p] = mean_dist_mm(a, b, &sets[p]);
  out[kNumParts] = mean_dist_mm(a, b, nullptr);
}

}  // namespace

PersonErrors compute_errors_from_meshes(const body::BodyModel& model, const Mat& pred_vertices, const Mat& pred_joints,
                                        const Mat& gt_vertices, const Mat& gt_joints, Alignment alignment) {
  std::array<std::vector<int>, kNumParts> joint_sets;
  for (int p = 0; p < kNumParts; ++p) joint_sets[p] = body::part_joints(static_cast<Part>(p));

  Mat pv = pred_vertices, pj = pred_joints, gv = gt_vertices, gj = gt_joints;
  if (alignment == Alignment::kPelvis) {
    const Eigen::RowVector3d pr = pred_joints.row(0);
    const Eigen::RowVector3d gr = gt_joints.row(0);
    pv.rowwise() -= pr;
    pj.rowwise() -= pr;
    gv.rowwise() -= gr;
    gj.rowwise() -= gr;
  }
  PersonErrors e;
  fill_parts(e.mve, pv, gv, model.part_vertices);
  fill_parts(e.mpjpe, pj, gj, joint_sets);
  // Procrustes on the full sets, part errors read off afterwards.
  const Mat pa_v = procrustes_align(pred_vertices, gt_vertices).apply(pred_vertices);
  const Mat pa_j = procrustes_align(pred_joints, gt_joints).apply(pred_joints);
  fill_parts(e.pa_pve, pa_v, gt_vertices, model.part_vertices);
  fill_parts(e.pa_mpjpe, pa_j, gt_joints, joint_sets);
  return e;
}

PersonErrors compute_errors(const body::BodyModel& model, const body::ParamSet& pred, const Vec3& pred_translation,
                            const body::ParamSet& gt, const Vec3& gt_translation, Alignment alignment) {
  body::BodyOutput a = body::forward(model, pred);
  body::BodyOutput b = body::forward(model, gt);
  a.vertices.rowwise() += pred_translation.transpose();
  a.joints.rowwise() += pred_translation.transpose();
  b.vertices.rowwise() += gt_translation.transpose();
  b.joints.rowwise() += gt_translation.transpose();
  return compute_errors_from_meshes(model, a.vertices, a.joints, b.vertices, b.joints, alignment);
}

// ------------------------------------------------------------- aggregation

double normalize_by_f1(double error, double f_score) {
  if (!(f_score > 0.0)) return std::numeric_limits<double>::infinity();
  return error / f_score;
}

MetricReport aggregate(int tp, int fp, int fn, const std::vector<PersonErrors>& matched) {
  MetricReport r;
  r.true_positives = tp;
  r.false_positives = fp;
  r.false_negatives = fn;
  r.precision = tp + fp > 0 ? static_cast<double>(tp) / (tp + fp) : 0.0;
  r.recall = tp + fn > 0 ? static_cast<double>(tp) / (tp + fn) : 0.0;
  r.f_score = r.precision + r.recall > 0 ? 2.0 * r.precision * r.recall / (r.precision + r.recall) : 0.0;
  if (!matched.empty()) {
    const double n = static_cast<double>(matched.size());
    for (const PersonErrors& e : matched) {
      for (int p = 0; p < kNumReportParts; ++p) {
        r.mve[p] += e.mve[p] / n;
        r.mpjpe[p] += e.mpjpe[p] / n;
        r.pa_pve[p] += e.pa_pve[p] / n;
        r.pa_mpjpe[p] += e.pa_mpjpe[p] / n;
      }
    }
  }
  r.nmve = normalize_by_f1(r.mve[kNumParts], r.f_score);
  r.nmje = normalize_by_f1(r.mpjpe[kNumParts], r.f_score);
  return r;
}

void MetricAccumulator::add(const InstanceMatch& match, const std::vector<PersonErrors>& matched_errors) {
  if (matched_errors.size() != match.pairs.size()) throw ShapeError("MetricAccumulator: one error record per matched pair");
  tp_ += static_cast<int>(match.pairs.size());
  fp_ += static_cast<int>(match.false_positives.size());
  fn_ += static_cast<int>(match.false_negatives.size());
  errors_.insert(errors_.end(), matched_errors.begin(), matched_errors.end());
}

MetricReport MetricAccumulator::report() const { return aggregate(tp_, fp_, fn_, errors_); }

// ------------------------------------------------------------- writers

namespace {

std::string fmt(double v) {
  if (std::isinf(v)) return "inf";
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

std::string report_to_text(const MetricReport& r) {
  std::ostringstream os;
  os << "f_score = " << fmt(r.f_score) << "\n";
  os << "precision = " << fmt(r.precision) << "\n";
  os << "recall = " << fmt(r.recall) << "\n";
  const std::pair<const char*, const PartErrors*> groups[] = {{"mve", &r.mve}, {"mpjpe", &r.mpjpe}, {"pa_pve", &r.pa_pve}, {"pa_mpjpe", &r.pa_mpjpe}};
  for (const auto& [name, errs] : groups) {
    for (int p = 0; p < kNumReportParts; ++p) os << name << "." << report_part_name(p) << " = " << fmt((*errs)[p]) << "\n";
  }
  os << "nmve = " << fmt(r.nmve) << "\n";
  os << "nmje = " << fmt(r.nmje) << "\n";
  os << "true_positives = " << r.true_positives << "\n";
  os << "false_positives = " << r.false_positives << "\n";
  os << "false_negatives = " << r.false_negatives << "\n";
  return os.str();
}

std::string report_to_json(const MetricReport& r) {
  auto num = [](double v) -> nlohmann::json {
    if (std::isinf(v)) return "inf";
    return v;
  };
  nlohmann::json j;
  j["f_score"] = num(r.f_score);
  j["precision"] = num(r.precision);
  j["recall"] = num(r.recall);
  const std::pair<const char*, const PartErrors*> groups[] = {{"mve", &r.mve}, {"mpjpe", &r.mpjpe}, {"pa_pve", &r.pa_pve}, {"pa_mpjpe", &r.pa_mpjpe}};
  for (const auto& [name, errs] : groups) {
    for (int p = 0; p < kNumReportParts; ++p) j[name][report_part_name(p)] = num((*errs)[p]);
  }
  j["nmve"] = num(r.nmve);
  j["nmje"] = num(r.nmje);
  j["true_positives"] = r.true_positives;
  j["false_positives"] = r.false_positives;
  j["false_negatives"] = r.false_negatives;
  return j.dump(2) + "\n";
}

void write_report(const std::filesystem::path& dir, const MetricReport& report, const std::string& stem) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  std::ofstream txt(dir / (stem + ".txt"));
  std::ofstream json(dir / (stem + ".json"));
  if (!txt || !json) throw IoError("cannot write metric report in " + dir.string());
  txt << report_to_text(report);
  json << report_to_json(report);
}

}  // namespace aios
