#include <doctest.h>

#include "aios/body_model.hpp"
#include "aios/rng.hpp"

#include <cmath>
#include <filesystem>
#include <numbers>

using namespace aios;
using namespace aios::body;

namespace {

const BodyModel& model() {
  static const BodyModel m = make_procedural_model();
  return m;
}

const BodyModel& model_with_pose_blends() {
  static const BodyModel m = [] {
    TemplateOptions opt;
    opt.pose_blend_scale = 1e-3;
    return make_procedural_model(opt);
  }();
  return m;
}

ParamSet random_params(Rng& rng, double pose_sd = 0.4) {
  ParamSet p;
  for (int j = 0; j < kNumJoints; ++j) {
    for (int k = 0; k < 3; ++k) p.pose(j, k) = rng.normal(0.0, pose_sd);
  }
  for (int k = 0; k < kNumShape; ++k) p.beta(k) = rng.normal();
  for (int k = 0; k < kNumExpr; ++k) p.psi(k) = rng.normal();
  return p;
}

// Relative error with a small absolute floor: entries far below the loss
// scale are dominated by finite-difference round-off.
double rel_err(double a, double b) { return std::abs(a - b) / std::max(1e-4, std::max(std::abs(a), std::abs(b))); }

}  // namespace

TEST_CASE("rodrigues: identity, quarter turn, orthogonality") {
  CHECK((rodrigues(Vec3::Zero()) - Mat3::Identity()).norm() == 0.0);
  Mat3 expected;
  expected << 0, -1, 0, 1, 0, 0, 0, 0, 1;
  CHECK((rodrigues(Vec3(0, 0, std::numbers::pi / 2)) - expected).cwiseAbs().maxCoeff() < 1e-12);
  Rng rng(3);
  for (int t = 0; t < 50; ++t) {
    const Vec3 v(rng.normal(0, 2), rng.normal(0, 2), rng.normal(0, 2));
    const Mat3 r = rodrigues(v);
    CHECK((r * r.transpose() - Mat3::Identity()).cwiseAbs().maxCoeff() < 1e-10);
    CHECK(std::abs(r.determinant() - 1.0) < 1e-10);
  }
  CHECK_THROWS_AS(rodrigues(Vec3(NAN, 0, 0)), InvalidParameterError);
}

TEST_CASE("rodrigues: jacobian matches finite differences, including near zero") {
  Rng rng(5);
  for (double scale : {1e-9, 1e-4, 5e-3, 0.02, 1.0, 3.0}) {
    const Vec3 v = Vec3(rng.normal(), rng.normal(), rng.normal()).normalized() * scale;
    const auto jac = rodrigues_jacobian(v);
    for (int k = 0; k < 3; ++k) {
      const double h = 1e-6;
      Vec3 vp = v, vm = v;
      vp(k) += h;
      vm(k) -= h;
      const Mat3 fd = (rodrigues(vp) - rodrigues(vm)) / (2 * h);
      CHECK((fd - jac[k]).cwiseAbs().maxCoeff() < 1e-7);
    }
  }
}

TEST_CASE("body model: invariants hold and pelvis sits at the origin") {
  const BodyModel& m = model();
  CHECK(m.num_vertices == 400);
  CHECK_NOTHROW(m.validate());
  const Mat j = m.joint_regressor * m.template_vertices;
  CHECK(j.row(0).norm() < 1e-15);
  for (int k = 0; k < kNumShape; ++k) {
    Vec3 pelvis = Vec3::Zero();
    for (int i = 0; i < m.num_vertices; ++i) pelvis += m.joint_regressor(0, i) * m.shape_blendshapes.block<3, 1>(3 * i, k);
    CHECK(pelvis.norm() < 1e-14);
  }
  int total = 0;
  for (const auto& part : m.part_vertices) total += static_cast<int>(part.size());
  CHECK(total == m.num_vertices);
}

TEST_CASE("body model: validation rejects broken tables") {
  BodyModel m = model();
  m.skinning_weights(3, 0) += 0.1;
  CHECK_THROWS_AS(m.validate(), InvalidParameterError);
  m = model();
  m.parents[5] = 7;
  CHECK_THROWS_AS(m.validate(), InvalidParameterError);
  m = model();
  m.joint_regressor(2, 0) = -0.5;
  CHECK_THROWS_AS(m.validate(), InvalidParameterError);
}

TEST_CASE("forward: zero parameters reproduce the template") {
  const BodyOutput out = forward(model(), ParamSet{});
  CHECK((out.vertices - model().template_vertices).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("forward: first shape coefficient adds the first blendshape") {
  ParamSet p;
  p.beta(0) = 1.0;
  const BodyOutput out = forward(model(), p);
  const Mat& s = model().shape_blendshapes;
  for (int i = 0; i < model().num_vertices; ++i) {
    const Vec3 expected = model().template_vertices.row(i).transpose() + s.block<3, 1>(3 * i, 0);
    CHECK((out.vertices.row(i).transpose() - expected).norm() < 1e-12);
  }
}

TEST_CASE("forward: identity rotations leave the shaped mesh unchanged") {
  Rng rng(9);
  ParamSet p = random_params(rng);
  p.pose.setZero();
  const BodyOutput out = forward(model(), p);
  Vec offs = model().shape_blendshapes * p.beta + model().expression_blendshapes * p.psi;
  const Mat shaped = model().template_vertices + Eigen::Map<const Mat>(offs.data(), model().num_vertices, 3);
  CHECK((out.vertices - shaped).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("forward: global rigid equivariance about the pelvis") {
  Rng rng(11);
  for (int t = 0; t < 10; ++t) {
    ParamSet p = random_params(rng);
    p.pose.row(0).setZero();
    const BodyOutput base = forward(model(), p);
    const Vec3 r(rng.normal(), rng.normal(), rng.normal());
    p.pose.row(0) = r.transpose();
    const BodyOutput rotated = forward(model(), p);
    const Mat expected = base.vertices * rodrigues(r).transpose();
    CHECK((rotated.vertices - expected).cwiseAbs().maxCoeff() < 1e-8);
  }
}

TEST_CASE("forward: joint regression is linear") {
  Rng rng(13);
  const BodyOutput a = forward(model(), random_params(rng));
  const BodyOutput b = forward(model(), random_params(rng));
  const double s = 0.3, u = -1.7;
  const Mat lhs = model().joint_regressor * (s * a.vertices + u * b.vertices);
  CHECK((lhs - (s * a.joints + u * b.joints)).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("forward: mirrored parameters give the mirrored mesh") {
  Rng rng(15);
  const ParamSet p = random_params(rng);
  const BodyOutput out = forward(model(), p);
  const BodyOutput mir = forward(model(), p.mirrored());
  const auto& km = keypoint_mirror();
  for (int k = 0; k < kNumKeypoints; ++k) {
    const Vec3 a = out.keypoints.row(km[k]).transpose();
    const Vec3 b = mir.keypoints.row(k).transpose();
    CHECK(std::abs(a.x() + b.x()) < 1e-9);
    CHECK(std::abs(a.y() - b.y()) < 1e-9);
    CHECK(std::abs(a.z() - b.z()) < 1e-9);
  }
}

TEST_CASE("backward: analytic gradients match central differences at 20 random points") {
  for (const BodyModel* m : {&model(), &model_with_pose_blends()}) {
    Rng rng(17);
    CameraModel cam;
    for (int t = 0; t < 20; ++t) {
      const ParamSet p = random_params(rng);
      const Mat wv = Mat::Random(m->num_vertices, 3);
      const Mat wj = Mat::Random(kNumJoints, 3);
      const Mat wk = Mat::Random(kNumKeypoints, 2);
      auto loss = [&](const ParamSet& q) {
        const BodyOutput o = forward(*m, q);
        return (o.vertices.cwiseProduct(wv)).sum() + (o.joints.cwiseProduct(wj)).sum() +
               project(o.keypoints, cam).cwiseProduct(wk).sum();
      };
      BodyState st;
      const BodyOutput o = forward(*m, p, &st);
      const Mat gk = project_backward(o.keypoints, cam, wk).points;
      const Vec g = backward(*m, st, wv, wj, gk);
      const Vec x = p.to_vector();
      int bad = 0;
      for (int i = 0; i < kNumParams; ++i) {
        const double h = 1e-5;
        Vec xp = x, xm = x;
        xp(i) += h;
        xm(i) -= h;
        const double fd = (loss(ParamSet::from_vector(xp)) - loss(ParamSet::from_vector(xm))) / (2 * h);
        if (rel_err(fd, g(i)) >= 1e-4) ++bad;
      }
      CHECK(bad == 0);
    }
  }
}

TEST_CASE("project: pinhole arithmetic and degenerate depth") {
  CameraModel cam;
  cam.focal = 100;
  cam.principal = Vec2(50, 50);
  cam.translation = Vec3::Zero();
  Mat pts(2, 3);
  pts << 0, 0, 1, 0.5, 0, 1;
  const Mat uv = project(pts, cam);
  CHECK(uv(0, 0) == doctest::Approx(50));
  CHECK(uv(0, 1) == doctest::Approx(50));
  CHECK(uv(1, 0) == doctest::Approx(100));
  CHECK(uv(1, 1) == doctest::Approx(50));
  Mat far = pts;
  far.col(2) *= 2;
  CHECK(project(far, cam)(1, 0) - 50 == doctest::Approx(25));
  Mat bad(1, 3);
  bad << 0, 0, 1e-5;
  CHECK_THROWS_AS(project(bad, cam), ProjectionDegenerateError);
}

TEST_CASE("param set: wrap, flat round trip and invalid entries") {
  ParamSet p;
  p.pose(3, 0) = 2 * std::numbers::pi + 0.5;
  p.wrap();
  CHECK(p.pose(3, 0) == doctest::Approx(0.5));
  Rng rng(19);
  const ParamSet q = random_params(rng, 0.3);
  const ParamSet r = ParamSet::from_vector(q.to_vector());
  CHECK((r.to_vector() - q.to_vector()).norm() == 0.0);
  Vec v = q.to_vector();
  v(7) = INFINITY;
  CHECK_THROWS_AS(ParamSet::from_vector(v), InvalidParameterError);
  CHECK((q.mirrored().mirrored().to_vector() - q.to_vector()).norm() == 0.0);
}

TEST_CASE("body model: binary round trip") {
  const auto path = std::filesystem::temp_directory_path() / "aios_model_roundtrip.bin";
  model_with_pose_blends().save(path);
  const BodyModel back = BodyModel::load(path);
  std::filesystem::remove(path);
  CHECK((back.template_vertices - model_with_pose_blends().template_vertices).norm() == 0.0);
  CHECK((back.pose_blendshapes - model_with_pose_blends().pose_blendshapes).norm() == 0.0);
  CHECK(back.parents == model_with_pose_blends().parents);
  CHECK(back.part_vertices == model_with_pose_blends().part_vertices);
  CHECK(back.has_pose_blendshapes);
}
