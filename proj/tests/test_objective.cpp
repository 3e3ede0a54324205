#include <doctest.h>

#include "aios/network.hpp"
#include "aios/objective.hpp"
#include "aios/rng.hpp"
#include "aios/scene.hpp"

using namespace aios;

namespace {

const body::BodyModel& model() {
  static const body::BodyModel m = body::make_procedural_model();
  return m;
}

ModelConfig small_config() {
  ModelConfig c;
  c.channels = {8, 8, 16, 16};
  c.hidden_dim = 16;
  c.heads = 2;
  c.ffn_dim = 32;
  c.enc_layers = 1;
  c.num_candidates = 12;
  c.num_body_candidates = 5;
  return c;
}

struct Run {
  LossReport report;
  std::map<std::string, double> grad_norms;  // per parameter
};

Run run(Scheme scheme, const LossConfig& base, std::uint64_t scene_seed = 5) {
  const SceneConfig sc;
  AiosNet net(small_config(), sc);
  LossConfig lc = base;
  lc.scheme = scheme;
  const LossContext ctx{&lc, &model(), scene_camera(sc), sc.width, sc.height};
  const SceneGroundTruth scene = generate_scene(sc, model(), scene_seed);
  net.params().zero_grad();
  ad::Tape t;
  const ForwardResult r = net.forward(t, scene.image, scheme);
  Run out;
  out.report = total_loss(ctx, r, scene, 1.0);
  t.backward();
  for (const ad::Param* p : net.params().all()) out.grad_norms[p->name] = p->grad.norm();
  return out;
}

double prefix_norm(const Run& r, const std::string& prefix) {
  double s = 0.0;
  bool any = false;
  for (const auto& [n, g] : r.grad_norms) {
    if (n.rfind(prefix, 0) == 0) {
      s += g * g;
      any = true;
    }
  }
  REQUIRE(any);
  return std::sqrt(s);
}

}  // namespace

TEST_CASE("objective: total equals the weighted sum and scales with the weights") {
  const LossConfig lc;
  const Run a = run(Scheme::kS23, lc);
  CHECK(a.report.total == doctest::Approx(a.report.weighted_sum()).epsilon(1e-12));
  double stages = 0.0;
  for (const auto& [k, v] : a.report.stage_totals) stages += v;
  CHECK(a.report.total == doctest::Approx(stages).epsilon(1e-12));
  CHECK(a.report.has("s0.cls"));
  CHECK(a.report.has("s1.cls"));
  CHECK(a.report.has("s3.param"));
  CHECK(a.report.has("s3.kp2d.body"));

  LossConfig doubled = lc;
  doubled.scale_weights(2.0);
  const Run b = run(Scheme::kS23, doubled);
  CHECK(b.report.total == doctest::Approx(2.0 * a.report.total).epsilon(1e-12));
  for (const std::string& n : a.report.names) {
    CHECK(b.report.values.at(n) * b.report.weights.at(n) ==
          doctest::Approx(2.0 * a.report.values.at(n) * a.report.weights.at(n)).epsilon(1e-12));
  }
}

TEST_CASE("objective: supervision schemes gate parametric-model terms and gradients") {
  const LossConfig lc;
  const Run s3 = run(Scheme::kS3Only, lc);
  for (const std::string& n : s3.report.names) {
    const bool smplx = n.find(".param") != std::string::npos || n.find(".kp3d") != std::string::npos ||
                       n.find(".kp2d") != std::string::npos;
    if (smplx) CHECK(n.rfind("s3.", 0) == 0);
  }
  CHECK(prefix_norm(s3, "dec.s1.smplx.") == 0.0);
  CHECK(prefix_norm(s3, "dec.s2.smplx.") == 0.0);
  CHECK(prefix_norm(s3, "dec.s3.smplx.body") > 0.0);

  const Run s23 = run(Scheme::kS23, lc);
  CHECK(s23.report.has("s2.param"));
  CHECK(!s23.report.has("s1.param"));
  CHECK(prefix_norm(s23, "dec.s1.smplx.") == 0.0);
  CHECK(prefix_norm(s23, "dec.s2.smplx.body") > 0.0);

  const Run all = run(Scheme::kAll, lc);
  CHECK(all.report.has("s1.param"));
  CHECK(prefix_norm(all, "dec.s1.smplx.body") > 0.0);
}

TEST_CASE("objective: perfect stage outputs cost only the classification term") {
  const SceneConfig sc;
  const SceneGroundTruth scene = generate_scene(sc, model(), 11);
  const LossConfig lc;
  const LossContext ctx{&lc, &model(), scene_camera(sc), sc.width, sc.height};
  ad::Tape t(false);
  const int n = static_cast<int>(scene.persons.size());
  StageOutput out;
  out.stage = 3;
  out.level = SmplxLevel::kFull;
  out.num_candidates = n;
  out.scores = t.constant(Mat::Constant(n, 1, 20.0));
  Mat params(n, body::kNumParams), tr(n, 3);
  for (int p = 0; p < kNumParts; ++p) {
    const int k = body::keypoint_range(static_cast<Part>(p)).count;
    Mat boxes(n, 4), joints(n, 2 * k);
    for (int i = 0; i < n; ++i) {
      boxes.row(i) = scene.persons[i].boxes[p].transpose();
      const Mat kp = normalized_keypoints(scene.persons[i], static_cast<Part>(p), sc.width, sc.height);
      for (int j = 0; j < k; ++j) joints.block(i, 2 * j, 1, 2) = kp.row(j);
    }
    out.boxes[p] = t.constant(boxes);
    out.joints[p] = t.constant(joints);
  }
  for (int i = 0; i < n; ++i) {
    params.row(i) = scene.persons[i].params.to_vector().transpose();
    tr.row(i) = scene.persons[i].translation.transpose();
  }
  out.params = t.constant(params);
  out.translation = t.constant(tr);
  const LossReport rep = stage_loss(ctx, out, scene, nullptr);
  for (const std::string& name : rep.names) {
    INFO(name);
    if (name == "s3.cls") continue;
    CHECK(rep.values.at(name) < 1e-9);
  }
  CHECK(rep.values.at("s3.cls") < 1e-6);
}
