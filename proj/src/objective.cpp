#include "aios/objective.hpp"

#include "aios/losses.hpp"

#include <cmath>
#include <limits>

namespace aios {

void LossReport::add(const std::string& name, int stage, double value, double weight) {
  if (!values.count(name)) names.push_back(name);
  values[name] = value;
  weights[name] = weight;
  stage_totals[stage] += weight * value;
  total += weight * value;
}

double LossReport::weighted_sum() const {
  double s = 0.0;
  for (const std::string& n : names) s += weights.at(n) * values.at(n);
  return s;
}

std::string LossReport::first_non_finite() const {
  for (const std::string& n : names) {
    if (!std::isfinite(values.at(n))) return n;
  }
  return {};
}

void LossReport::accumulate(const LossReport& other, double s) {
  for (const std::string& n : other.names) {
    if (!values.count(n)) {
      names.push_back(n);
      values[n] = 0.0;
      weights[n] = other.weights.at(n);
    }
    values[n] += s * other.values.at(n);
  }
  for (const auto& [k, v] : other.stage_totals) stage_totals[k] += s * v;
  total += s * other.total;
}

Mat normalized_keypoints(const PersonGT& person, Part part, int width, int height) {
  const body::KeypointRange r = body::keypoint_range(part);
  Mat out = person.keypoints2d.middleRows(r.start, r.count);
  out.col(0) /= width;
  out.col(1) /= height;
  return out;
}

namespace {

std::string term(int stage, const char* name, int part = -1) {
  std::string s = "s" + std::to_string(stage) + "." + name;
  if (part >= 0) s += std::string(".") + part_name(part);
  return s;
}

double sign(double x) { return (x > 0) - (x < 0); }

}  // namespace

LossReport stage_loss(const LossContext& ctx, const StageOutput& out, const SceneGroundTruth& gt, StageGrads* grads) {
  const LossConfig& cfg = *ctx.config;
  const int k = out.stage;
  const double mult = k == 0 ? cfg.encoder : 1.0;
  const int nc = out.num_candidates;
  LossReport rep;

  const Vec scores = out.scores.value().col(0);
  const Mat& boxes = out.boxes[0].value();
  std::vector<Vec4> gt_boxes;
  std::vector<int> gt_ids;
  for (std::size_t g = 0; g < gt.persons.size(); ++g) {
    if (!gt.persons[g].box_valid[0]) continue;
    gt_boxes.push_back(gt.persons[g].boxes[0]);
    gt_ids.push_back(static_cast<int>(g));
  }
  if (!scores.allFinite() || !boxes.allFinite()) {
    // Matching is undefined; surface the failure as a non-finite classification term.
    rep.add(term(k, "cls"), k, std::numeric_limits<double>::quiet_NaN(), mult * cfg.cls);
    return rep;
  }
  const MatchResult match = hungarian_match(scores, boxes, gt_boxes, cfg.match);

  if (grads) {
    grads->scores = Mat::Zero(nc, 1);
    for (int p = 0; p < kNumParts; ++p) {
      grads->boxes[p] = out.boxes[p].valid() ? Mat::Zero(nc, 4) : Mat();
      grads->joints[p] = out.joints[p].valid() ? Mat::Zero(nc, out.joints[p].cols()) : Mat();
    }
    grads->params = out.params.valid() ? Mat::Zero(nc, body::kNumParams) : Mat();
    grads->translation = out.translation.valid() ? Mat::Zero(nc, 3) : Mat();
  }

  // Classification over all candidates.
  std::vector<std::uint8_t> labels(static_cast<std::size_t>(nc), 0);
  for (const auto& pr : match.pairs) labels[pr.first] = 1;
  const FocalResult fl = focal_loss(scores, labels, cfg.focal_alpha, cfg.focal_gamma);
  const double w_cls = mult * cfg.cls;
  rep.add(term(k, "cls"), k, fl.value, w_cls);
  if (grads) grads->scores.col(0) += w_cls * fl.grad;

  const double n = static_cast<double>(match.pairs.size());
  if (match.pairs.empty()) return rep;

  // Boxes of every part the stage emits.
  for (int p = 0; p < kNumParts; ++p) {
    if (!out.boxes[p].valid()) continue;
    const Mat& pb = out.boxes[p].value();
    double l1 = 0.0, gi = 0.0;
    bool any = false;
    const double w_l1 = mult * cfg.box_l1, w_gi = mult * cfg.giou;
    for (const auto& [c, gi_idx] : match.pairs) {
      const PersonGT& person = gt.persons[gt_ids[gi_idx]];
      if (!person.box_valid[p]) continue;
      any = true;
      const Vec4 pred = pb.row(c).transpose();
      const Vec4& target = person.boxes[p];
      const GiouGrad gg = giou_with_grad(pred, target);
      l1 += (pred - target).cwiseAbs().sum() / 4.0 / n;
      gi += (1.0 - gg.value) / n;
      if (grads) {
        for (int e = 0; e < 4; ++e) grads->boxes[p](c, e) += w_l1 * sign(pred(e) - target(e)) / 4.0 / n;
        grads->boxes[p].row(c) -= (w_gi / n) * gg.grad_a.transpose();
      }
    }
    if (!any) continue;
    rep.add(term(k, "box_l1", p), k, l1, w_l1);
    rep.add(term(k, "giou", p), k, gi, w_gi);
  }

  // 2D joints: L1 and OKS per part.
  for (int p = 0; p < kNumParts; ++p) {
    if (!out.joints[p].valid()) continue;
    const Mat& pj = out.joints[p].value();
    const body::KeypointRange kr = body::keypoint_range(static_cast<Part>(p));
    double l1 = 0.0, oks = 0.0;
    bool any = false;
    const double w_j = mult * cfg.j2d, w_o = mult * cfg.oks[p];
    for (const auto& [c, gi_idx] : match.pairs) {
      const PersonGT& person = gt.persons[gt_ids[gi_idx]];
      const Mat target = normalized_keypoints(person, static_cast<Part>(p), ctx.width, ctx.height);
      const std::vector<std::uint8_t> vis(person.visible.begin() + kr.start, person.visible.begin() + kr.start + kr.count);
      Mat pred(kr.count, 2);
      for (int j = 0; j < kr.count; ++j) pred.row(j) = pj.block(c, 2 * j, 1, 2);
      const Vec4& body_box = person.boxes[0];
      const OksResult o = oks_loss(pred, target, vis, body_box(2) * body_box(3), cfg.oks_k);
      if (!o.valid) continue;
      any = true;
      int nv = 0;
      for (std::uint8_t v : vis) nv += v ? 1 : 0;
      double sum = 0.0;
      for (int j = 0; j < kr.count; ++j) {
        if (!vis[j]) continue;
        for (int e = 0; e < 2; ++e) {
          const double d = pred(j, e) - target(j, e);
          sum += std::abs(d);
          if (grads) grads->joints[p](c, 2 * j + e) += w_j * sign(d) / (2.0 * nv) / n;
        }
      }
      l1 += sum / (2.0 * nv) / n;
      oks += o.value / n;
      if (grads) {
        for (int j = 0; j < kr.count; ++j) {
          grads->joints[p](c, 2 * j) += w_o * o.grad(j, 0) / n;
          grads->joints[p](c, 2 * j + 1) += w_o * o.grad(j, 1) / n;
        }
      }
    }
    if (!any) continue;
    rep.add(term(k, "j2d", p), k, l1, w_j);
    rep.add(term(k, "oks", p), k, oks, w_o);
  }

  // Parametric-model terms at the stage's supervision level.
  if (out.level != SmplxLevel::kNone && out.params.valid()) {
    SmplxWeights sw = cfg.smplx;
    sw.param_pose *= mult;
    sw.param_shape *= mult;
    sw.param_expr *= mult;
    for (int p = 0; p < kNumParts; ++p) {
      sw.kp3d[p] *= mult;
      sw.kp2d[p] *= mult;
    }
    double param = 0.0;
    std::array<double, kNumParts> kp3d{}, kp2d{};
    std::array<bool, kNumParts> v3{}, v2{};
    const Mat& pp = out.params.value();
    const Mat& pt = out.translation.value();
    for (const auto& [c, gi_idx] : match.pairs) {
      const PersonGT& person = gt.persons[gt_ids[gi_idx]];
      const SmplxLossResult r = smplx_loss(*ctx.model, ctx.camera, ctx.width, ctx.height, pp.row(c).transpose(),
                                           pt.row(c).transpose(), person, out.level, sw);
      param += r.param_weighted / n;
      for (int p = 0; p < kNumParts; ++p) {
        if (r.kp3d_valid[p]) {
          kp3d[p] += r.kp3d[p] / n;
          v3[p] = true;
        }
        if (r.kp2d_valid[p]) {
          kp2d[p] += r.kp2d[p] / n;
          v2[p] = true;
        }
      }
      if (grads) {
        grads->params.row(c) += r.grad_params.transpose() / n;
        grads->translation.row(c) += r.grad_translation.transpose() / n;
      }
    }
    // Per-type parameter weights are applied inside the term.
    rep.add(term(k, "param"), k, param, 1.0);
    for (int p = 0; p < kNumParts; ++p) {
      if (v3[p]) rep.add(term(k, "kp3d", p), k, kp3d[p], sw.kp3d[p]);
      if (v2[p]) rep.add(term(k, "kp2d", p), k, kp2d[p], sw.kp2d[p]);
    }
  }
  return rep;
}

LossReport total_loss(const LossContext& ctx, const ForwardResult& result, const SceneGroundTruth& gt,
                      double grad_scale) {
  LossReport total;
  for (const StageOutput& out : result.stages) {
    StageGrads g;
    const LossReport r = stage_loss(ctx, out, gt, grad_scale != 0.0 ? &g : nullptr);
    total.accumulate(r, 1.0);
    if (grad_scale == 0.0) continue;
    ad::Tape& t = *out.scores.tape;
    if (!t.grad_enabled()) continue;
    auto seed = [&](const ad::Var& v, const Mat& m) {
      if (v.valid() && m.size() != 0 && m.cwiseAbs().maxCoeff() > 0.0) t.seed(v, grad_scale * m);
    };
    seed(out.scores, g.scores);
    for (int p = 0; p < kNumParts; ++p) {
      seed(out.boxes[p], g.boxes[p]);
      seed(out.joints[p], g.joints[p]);
    }
    seed(out.params, g.params);
    seed(out.translation, g.translation);
  }
  return total;
}

}  // namespace aios
