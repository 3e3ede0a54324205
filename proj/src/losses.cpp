#include "aios/losses.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace aios {

namespace {

void check_box(const Vec4& b) {
  if (!(b(2) > 0.0) || !(b(3) > 0.0) || !b.allFinite()) throw DegenerateBoxError("box must have finite w, h > 0");
}

double softplus(double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

double sigmoid(double x) { return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); }

double sign(double x) { return (x > 0) - (x < 0); }

// Overlap of [a0, a1] and [b0, b1] along one axis with its partial derivatives.
struct Span {
  double len;
  double d_a0, d_a1, d_b0, d_b1;
};

Span overlap(double a0, double a1, double b0, double b1) {
  const bool a_hi = a1 <= b1;
  const bool a_lo = a0 >= b0;
  const double len = (a_hi ? a1 : b1) - (a_lo ? a0 : b0);
  if (len <= 0.0) return {0.0, 0.0, 0.0, 0.0, 0.0};
  return {len, a_lo ? -1.0 : 0.0, a_hi ? 1.0 : 0.0, a_lo ? 0.0 : -1.0, a_hi ? 0.0 : 1.0};
}

Span hull(double a0, double a1, double b0, double b1) {
  const bool a_hi = a1 >= b1;
  const bool a_lo = a0 <= b0;
  return {(a_hi ? a1 : b1) - (a_lo ? a0 : b0), a_lo ? -1.0 : 0.0, a_hi ? 1.0 : 0.0, a_lo ? 0.0 : -1.0, a_hi ? 0.0 : 1.0};
}

}  // namespace

// ------------------------------------------------------------- boxes

GiouGrad giou_with_grad(const Vec4& a, const Vec4& b) {
  check_box(a);
  check_box(b);
  const double ax0 = a(0) - a(2) / 2, ax1 = a(0) + a(2) / 2, ay0 = a(1) - a(3) / 2, ay1 = a(1) + a(3) / 2;
  const double bx0 = b(0) - b(2) / 2, bx1 = b(0) + b(2) / 2, by0 = b(1) - b(3) / 2, by1 = b(1) + b(3) / 2;
  const Span ix = overlap(ax0, ax1, bx0, bx1);
  const Span iy = overlap(ay0, ay1, by0, by1);
  const Span hx = hull(ax0, ax1, bx0, bx1);
  const Span hy = hull(ay0, ay1, by0, by1);
  const double area_a = a(2) * a(3);
  const double area_b = b(2) * b(3);
  const double inter = ix.len * iy.len;
  const double uni = area_a + area_b - inter;
  const double cover = hx.len * hy.len;
  GiouGrad g;
  g.value = inter / uni - (cover - uni) / cover;

  // value = I/U + U/C - 1 with U = A_a + A_b - I.
  const double d_inter = 1.0 / uni + inter / (uni * uni) - 1.0 / cover;
  const double d_area = -inter / (uni * uni) + 1.0 / cover;
  const double d_cover = -uni / (cover * cover);

  // Corner gradients: x0, x1, y0, y1 for each box.
  const double gax0 = d_inter * ix.d_a0 * iy.len + d_cover * hx.d_a0 * hy.len;
  const double gax1 = d_inter * ix.d_a1 * iy.len + d_cover * hx.d_a1 * hy.len;
  const double gay0 = d_inter * iy.d_a0 * ix.len + d_cover * hy.d_a0 * hx.len;
  const double gay1 = d_inter * iy.d_a1 * ix.len + d_cover * hy.d_a1 * hx.len;
  const double gbx0 = d_inter * ix.d_b0 * iy.len + d_cover * hx.d_b0 * hy.len;
  const double gbx1 = d_inter * ix.d_b1 * iy.len + d_cover * hx.d_b1 * hy.len;
  const double gby0 = d_inter * iy.d_b0 * ix.len + d_cover * hy.d_b0 * hx.len;
  const double gby1 = d_inter * iy.d_b1 * ix.len + d_cover * hy.d_b1 * hx.len;

  g.grad_a = Vec4(gax0 + gax1, gay0 + gay1, 0.5 * (gax1 - gax0) + d_area * a(3), 0.5 * (gay1 - gay0) + d_area * a(2));
  g.grad_b = Vec4(gbx0 + gbx1, gby0 + gby1, 0.5 * (gbx1 - gbx0) + d_area * b(3), 0.5 * (gby1 - gby0) + d_area * b(2));
  return g;
}

double giou(const Vec4& a, const Vec4& b) { return giou_with_grad(a, b).value; }

double iou(const Vec4& a, const Vec4& b) {
  check_box(a);
  check_box(b);
  const Span ix = overlap(a(0) - a(2) / 2, a(0) + a(2) / 2, b(0) - b(2) / 2, b(0) + b(2) / 2);
  const Span iy = overlap(a(1) - a(3) / 2, a(1) + a(3) / 2, b(1) - b(3) / 2, b(1) + b(3) / 2);
  const double inter = ix.len * iy.len;
  return inter / (a(2) * a(3) + b(2) * b(3) - inter);
}

// ------------------------------------------------------------- focal

FocalResult focal_loss(const Vec& logits, const std::vector<std::uint8_t>& labels, double alpha, double gamma) {
  if (static_cast<Eigen::Index>(labels.size()) != logits.size()) throw ShapeError("focal_loss: labels/logits size mismatch");
  FocalResult r{0.0, Vec::Zero(logits.size())};
  int positives = 0;
  for (Eigen::Index i = 0; i < logits.size(); ++i) {
    const double x = logits(i);
    const double p = sigmoid(x);
    if (labels[i]) {
      ++positives;
      const double q = 1.0 - p;
      const double log_p = -softplus(-x);
      r.value += -alpha * std::pow(q, gamma) * log_p;
      r.grad(i) = alpha * std::pow(q, gamma) * (gamma * p * log_p - q);
    } else {
      const double log_q = -softplus(x);
      r.value += -(1.0 - alpha) * std::pow(p, gamma) * log_q;
      r.grad(i) = (1.0 - alpha) * std::pow(p, gamma) * (p - gamma * (1.0 - p) * log_q);
    }
  }
  const double norm = std::max(1, positives);
  r.value /= norm;
  r.grad /= norm;
  return r;
}

// ------------------------------------------------------------- OKS

OksResult oks_loss(const Mat& pred, const Mat& gt, const std::vector<std::uint8_t>& visible, double area, double k) {
  if (!(area > 0.0)) throw InvalidParameterError("oks_loss: area must be positive");
  if (pred.rows() != gt.rows() || pred.cols() != 2 || gt.cols() != 2 || static_cast<Eigen::Index>(visible.size()) != pred.rows()) {
    throw ShapeError("oks_loss: expected matching K x 2 inputs");
  }
  OksResult r;
  r.grad = Mat::Zero(pred.rows(), 2);
  const int n = static_cast<int>(std::count_if(visible.begin(), visible.end(), [](std::uint8_t v) { return v != 0; }));
  if (n == 0) return r;
  r.valid = true;
  const double s = area * k * k;
  double mean = 0.0;
  for (Eigen::Index i = 0; i < pred.rows(); ++i) {
    if (!visible[i]) continue;
    const Vec2 d = (pred.row(i) - gt.row(i)).transpose();
    const double e = std::exp(-d.squaredNorm() / (2.0 * s));
    mean += e / n;
    r.grad.row(i) = (e / (n * s)) * d.transpose();
  }
  r.value = 1.0 - mean;
  return r;
}

// ------------------------------------------------------------- assignment

std::vector<int> hungarian(const Mat& cost) {
  const int n = static_cast<int>(cost.rows());
  const int m = static_cast<int>(cost.cols());
  if (n == 0) return {};
  if (m == 0) return std::vector<int>(n, -1);
  if (!cost.allFinite()) throw InvalidParameterError("hungarian: cost matrix must be finite");
  if (n > m) {
    const std::vector<int> t = hungarian(cost.transpose());
    std::vector<int> out(n, -1);
    for (int c = 0; c < m; ++c) out[t[c]] = c;
    return out;
  }
  // Potentials method on a 1-indexed n x m problem with n <= m.
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(m + 1, 0.0);
  std::vector<int> p(m + 1, 0), way(m + 1, 0);
  for (int i = 1; i <= n; ++i) {
    p[0] = i;
    int j0 = 0;
    std::vector<double> minv(m + 1, inf);
    std::vector<char> used(m + 1, 0);
    do {
      used[j0] = 1;
      const int i0 = p[j0];
      double delta = inf;
      int j1 = 0;
      for (int j = 1; j <= m; ++j) {
        if (used[j]) continue;
        const double cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (int j = 0; j <= m; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const int j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<int> out(n, -1);
  for (int j = 1; j <= m; ++j) {
    if (p[j] != 0) out[p[j] - 1] = j - 1;
  }
  return out;
}

MatchResult hungarian_match(const Vec& scores, const Mat& boxes, const std::vector<Vec4>& gt_boxes, const MatchCostWeights& w) {
  const int c = static_cast<int>(scores.size());
  const int g = static_cast<int>(gt_boxes.size());
  if (boxes.rows() != c || boxes.cols() != 4) throw ShapeError("hungarian_match: boxes must be C x 4");
  MatchResult r;
  if (g == 0 || c == 0) {
    for (int i = 0; i < c; ++i) r.unmatched_candidates.push_back(i);
    return r;
  }
  Mat cost(c, g);
  for (int i = 0; i < c; ++i) {
    const Vec4 b = boxes.row(i).transpose();
    const double cls = -sigmoid(scores(i));
    for (int j = 0; j < g; ++j) {
      cost(i, j) = w.cls * cls + w.l1 * (b - gt_boxes[j]).cwiseAbs().sum() + w.giou * (1.0 - giou(b, gt_boxes[j]));
    }
  }
  const std::vector<int> assign = hungarian(cost);
  for (int i = 0; i < c; ++i) {
    if (assign[i] >= 0) {
      r.pairs.emplace_back(i, assign[i]);
    } else {
      r.unmatched_candidates.push_back(i);
    }
  }
  return r;
}

// ------------------------------------------------------------- parametric supervision

int supervised_param_count(SmplxLevel level) {
  switch (level) {
    case SmplxLevel::kNone:
      return 0;
    case SmplxLevel::kBody:
      return body::kNumBodyJoints * 3 + body::kNumShape;
    case SmplxLevel::kFull:
      return body::kNumParams;
  }
  return 0;
}

SmplxLossResult smplx_loss(const body::BodyModel& model, const body::CameraModel& intrinsics, int width, int height,
                           const Vec& pred_params, const Vec3& pred_translation, const PersonGT& gt, SmplxLevel level,
                           const SmplxWeights& w) {
  using namespace body;
  if (pred_params.size() != kNumParams) throw ShapeError("smplx_loss: expected 179 parameters");
  SmplxLossResult r;
  r.grad_params = Vec::Zero(kNumParams);
  if (level == SmplxLevel::kNone) return r;

  // Supervised entries and their type weights.
  const Vec gt_vec = gt.params.to_vector();
  std::vector<std::pair<int, double>> entries;
  for (int i = 0; i < kNumBodyJoints * 3; ++i) entries.emplace_back(i, w.param_pose);
  if (level == SmplxLevel::kFull) {
    for (int i = kNumBodyJoints * 3; i < kNumPose; ++i) entries.emplace_back(i, w.param_pose);
  }
  for (int i = 0; i < kNumShape; ++i) entries.emplace_back(kNumPose + i, w.param_shape);
  if (level == SmplxLevel::kFull) {
    for (int i = 0; i < kNumExpr; ++i) entries.emplace_back(kNumPose + kNumShape + i, w.param_expr);
  }
  const double n_param = static_cast<double>(entries.size());
  for (auto [i, wt] : entries) {
    const double d = pred_params(i) - gt_vec(i);
    r.param += std::abs(d) / n_param;
    r.param_weighted += wt * std::abs(d) / n_param;
    r.grad_params(i) += wt * sign(d) / n_param;
  }
  r.weighted = r.param_weighted;

  // Keypoints from the predicted parameters. Unsupervised fields are zeroed at body level.
  ParamSet pred;
  Eigen::Map<Eigen::Matrix<double, kNumPose, 1>>(pred.pose.data()) = pred_params.head<kNumPose>();
  pred.beta = pred_params.segment<kNumShape>(kNumPose);
  pred.psi = pred_params.segment<kNumExpr>(kNumPose + kNumShape);
  if (level == SmplxLevel::kBody) {
    pred.pose.bottomRows<kNumPose / 3 - kNumBodyJoints>().setZero();
    pred.psi.setZero();
  }
  BodyState state;
  const BodyOutput out = forward(model, pred, &state);
  Mat g_kp = Mat::Zero(kNumKeypoints, 3);

  const int nparts = level == SmplxLevel::kFull ? kNumParts : 1;
  const Vec3 pred_root = out.keypoints.row(0).transpose();
  const Vec3 gt_root = gt.keypoints3d.row(0).transpose();
  for (int part = 0; part < nparts; ++part) {
    const auto range = keypoint_range(static_cast<Part>(part));
    const double n_el = 3.0 * range.count;
    r.kp3d_valid[part] = true;
    for (int k = range.start; k < range.start + range.count; ++k) {
      for (int c = 0; c < 3; ++c) {
        const double d = (out.keypoints(k, c) - pred_root(c)) - (gt.keypoints3d(k, c) - gt_root(c));
        r.kp3d[part] += std::abs(d) / n_el;
        const double g = w.kp3d[part] * sign(d) / n_el;
        g_kp(k, c) += g;
        g_kp(0, c) -= g;
      }
    }
    r.weighted += w.kp3d[part] * r.kp3d[part];
  }

  CameraModel cam = intrinsics;
  cam.translation = pred_translation;
  Mat uv;
  try {
    uv = project(out.keypoints, cam);
  } catch (const ProjectionDegenerateError&) {
    r.camera_degenerate = true;
  }
  if (!r.camera_degenerate) {
    Mat g_uv = Mat::Zero(kNumKeypoints, 2);
    const double scale[2] = {1.0 / width, 1.0 / height};
    for (int part = 0; part < nparts; ++part) {
      const auto range = keypoint_range(static_cast<Part>(part));
      int nvis = 0;
      for (int k = range.start; k < range.start + range.count; ++k) nvis += gt.visible[k] ? 1 : 0;
      if (nvis == 0) continue;
      r.kp2d_valid[part] = true;
      const double n_el = 2.0 * nvis;
      for (int k = range.start; k < range.start + range.count; ++k) {
        if (!gt.visible[k]) continue;
        for (int c = 0; c < 2; ++c) {
          const double d = (uv(k, c) - gt.keypoints2d(k, c)) * scale[c];
          r.kp2d[part] += std::abs(d) / n_el;
          g_uv(k, c) += w.kp2d[part] * sign(d) * scale[c] / n_el;
        }
      }
      r.weighted += w.kp2d[part] * r.kp2d[part];
    }
    const ProjectionGrad pg = project_backward(out.keypoints, cam, g_uv);
    g_kp += pg.points;
    r.grad_translation = pg.translation;
  }

  Vec g_model = backward(model, state, Mat(), Mat(), g_kp);
  if (level == SmplxLevel::kBody) {
    g_model.segment(kNumBodyJoints * 3, kNumPose - kNumBodyJoints * 3).setZero();
    g_model.tail<kNumExpr>().setZero();
  }
  r.grad_params += g_model;
  return r;
}

}  // namespace aios
