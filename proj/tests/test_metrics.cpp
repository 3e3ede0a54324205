#include <doctest.h>

#include "aios/metrics.hpp"
#include "aios/rng.hpp"

#include <cmath>
#include <limits>

using namespace aios;

namespace {

const body::BodyModel& model() {
  static const body::BodyModel m = body::make_procedural_model();
  return m;
}

Mat3 random_rotation(Rng& rng) { return body::rodrigues(Vec3(rng.normal(), rng.normal(), rng.normal())); }

Mat random_points(Rng& rng, int n) { return Mat::NullaryExpr(n, 3, [&]() { return rng.normal(); }); }

body::ParamSet random_params(Rng& rng) {
  body::ParamSet p;
  for (int j = 0; j < body::kNumJoints; ++j) {
    for (int k = 0; k < 3; ++k) p.pose(j, k) = rng.normal(0, 0.3);
  }
  for (int k = 0; k < 10; ++k) {
    p.beta(k) = rng.normal();
    p.psi(k) = rng.normal();
  }
  return p;
}

}  // namespace

TEST_CASE("procrustes: identity, constructed similarity and residual bound") {
  Rng rng(1);
  const Mat p = random_points(rng, 20);
  const SimilarityTransform id = procrustes_align(p, p);
  CHECK(id.scale == doctest::Approx(1.0).epsilon(1e-12));
  CHECK((id.rotation - Mat3::Identity()).cwiseAbs().maxCoeff() < 1e-12);
  CHECK(id.translation.norm() < 1e-12);
  for (int t = 0; t < 20; ++t) {
    const Mat3 r = random_rotation(rng);
    const Vec3 tr(rng.normal(), rng.normal(), rng.normal());
    SimilarityTransform truth;
    truth.scale = 2.0;
    truth.rotation = r;
    truth.translation = tr;
    const Mat q = truth.apply(p);
    const SimilarityTransform est = procrustes_align(p, q);
    CHECK(std::abs(est.scale - 2.0) < 1e-8);
    CHECK((est.rotation - r).cwiseAbs().maxCoeff() < 1e-8);
    CHECK((est.translation - tr).cwiseAbs().maxCoeff() < 1e-8);

    const Mat noisy = q + 0.3 * random_points(rng, 20);
    const SimilarityTransform fit = procrustes_align(p, noisy);
    CHECK((fit.apply(p) - noisy).squaredNorm() <= (p - noisy).squaredNorm());
    CHECK(std::abs(fit.rotation.determinant() - 1.0) < 1e-12);
  }
  CHECK_THROWS_AS(procrustes_align(p.topRows(2), p.topRows(2)), AlignmentDegenerateError);
  CHECK_THROWS_AS(procrustes_align(p, Mat::Zero(20, 3)), AlignmentDegenerateError);
}

TEST_CASE("instance match: perfect, empty and one spurious prediction") {
  Mat a = Mat::Zero(17, 2), b = Mat::Zero(17, 2);
  a.col(0).setConstant(10);
  b.col(0).setConstant(40);
  const std::vector<std::uint8_t> vis(17, 1);
  InstanceMatch m = instance_match({a, b}, {a, b}, {vis, vis}, 3.2);
  CHECK(m.pairs.size() == 2);
  CHECK(aggregate(2, 0, 0, {PersonErrors{}, PersonErrors{}}).f_score == 1.0);

  m = instance_match({}, {a}, {vis}, 3.2);
  const MetricReport none = aggregate(0, 0, 1, {});
  CHECK(m.false_negatives.size() == 1);
  CHECK(none.recall == 0.0);
  CHECK(none.precision == 0.0);
  CHECK(none.f_score == 0.0);
  CHECK(std::isinf(none.nmve));

  Mat spurious = a;
  spurious.col(1).setConstant(30);
  m = instance_match({a, spurious, b}, {a, b}, {vis, vis}, 3.2);
  CHECK(m.pairs.size() == 2);
  CHECK(m.false_positives == std::vector<int>{1});
  const MetricReport r = aggregate(2, 1, 0, {PersonErrors{}, PersonErrors{}});
  CHECK(r.precision == doctest::Approx(2.0 / 3.0));
  CHECK(r.recall == 1.0);
  CHECK(r.f_score == doctest::Approx(0.8).epsilon(1e-12));
}

TEST_CASE("aggregate: F1 normalization against published table rows") {
  CHECK(normalize_by_f1(91.9, 0.94) == doctest::Approx(97.8).epsilon(0.05 / 97.8));
  CHECK(normalize_by_f1(99.7, 0.93) == doctest::Approx(107.2).epsilon(0.05 / 107.2));
  CHECK(normalize_by_f1(55.0, 1.0) == 55.0);
  CHECK(std::isinf(normalize_by_f1(55.0, 0.0)));
  // 47 hits, 3 spurious, 3 missed: P = R = F1 = 0.94.
  PersonErrors e;
  e.mve[4] = 91.9;
  e.mpjpe[4] = 80.0;
  const MetricReport r = aggregate(47, 3, 3, std::vector<PersonErrors>(47, e));
  CHECK(r.f_score == doctest::Approx(0.94).epsilon(1e-12));
  CHECK(std::abs(r.nmve - 97.8) <= 0.05);
  CHECK(std::abs(r.nmve - r.mve[4] / r.f_score) < 1e-9);
  CHECK(std::abs(r.nmje - r.mpjpe[4] / r.f_score) < 1e-9);
  CHECK(std::abs(r.f_score - 2 * r.precision * r.recall / (r.precision + r.recall)) < 1e-9);
}

TEST_CASE("compute errors: zero, rigid rotation and constructed offset") {
  Rng rng(2);
  const body::ParamSet p = random_params(rng);
  const Vec3 t(0.1, -0.2, 4.0);
  const PersonErrors zero = compute_errors(model(), p, t, p, t);
  for (int i = 0; i < kNumReportParts; ++i) {
    CHECK(zero.mve[i] < 1e-9);
    CHECK(zero.mpjpe[i] < 1e-9);
    CHECK(zero.pa_pve[i] < 1e-6);
    CHECK(zero.pa_mpjpe[i] < 1e-6);
  }
  body::ParamSet rot = p;
  rot.pose(0, 1) += 0.5;
  const PersonErrors r = compute_errors(model(), rot, t, p, t);
  CHECK(r.mve[4] > 10.0);
  CHECK(r.pa_pve[4] < 1e-6);

  const Vec3 shifted = t + Vec3(0.005, 0, 0);
  const PersonErrors aligned = compute_errors(model(), p, shifted, p, t, Alignment::kPelvis);
  const PersonErrors raw = compute_errors(model(), p, shifted, p, t, Alignment::kNone);
  CHECK(aligned.mve[4] < 1e-9);
  CHECK(raw.mve[4] == doctest::Approx(5.0).epsilon(1e-9));
  CHECK(raw.mpjpe[4] == doctest::Approx(5.0).epsilon(1e-9));
}

TEST_CASE("compute errors: PA-PVE invariant to similarity transforms of the prediction") {
  Rng rng(3);
  const body::ParamSet gp = random_params(rng);
  const body::ParamSet pp = random_params(rng);
  body::BodyOutput g = body::forward(model(), gp);
  body::BodyOutput p = body::forward(model(), pp);
  const PersonErrors base = compute_errors_from_meshes(model(), p.vertices, p.joints, g.vertices, g.joints, Alignment::kPelvis);
  for (int t = 0; t < 10; ++t) {
    SimilarityTransform s;
    s.scale = rng.uniform(0.5, 2.0);
    s.rotation = random_rotation(rng);
    s.translation = Vec3(rng.normal(), rng.normal(), rng.normal());
    const PersonErrors moved =
        compute_errors_from_meshes(model(), s.apply(p.vertices), s.apply(p.joints), g.vertices, g.joints, Alignment::kPelvis);
    for (int i = 0; i < kNumReportParts; ++i) {
      CHECK(std::abs(moved.pa_pve[i] - base.pa_pve[i]) < 1e-6);
      CHECK(std::abs(moved.pa_mpjpe[i] - base.pa_mpjpe[i]) < 1e-6);
    }
  }
}

TEST_CASE("metric report: text and json carry the field names") {
  PersonErrors e;
  e.mve = {1, 2, 3, 4, 5};
  const MetricReport r = aggregate(1, 0, 0, {e});
  const std::string txt = report_to_text(r);
  CHECK(txt.find("mve.rhand = 3") != std::string::npos);
  CHECK(txt.find("nmve = 5") != std::string::npos);
  const std::string js = report_to_json(aggregate(0, 1, 1, {}));
  CHECK(js.find("\"nmve\": \"inf\"") != std::string::npos);
  CHECK(js.find("\"f_score\"") != std::string::npos);
}
