#include <doctest.h>

#include "aios/losses.hpp"
#include "aios/rng.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

using namespace aios;

namespace {

const body::BodyModel& model() {
  static const body::BodyModel m = body::make_procedural_model();
  return m;
}

// Independent GIoU oracle: counts pixel centers of a res x res grid over [0,1]^2.
double giou_pixel_oracle(const Vec4& a, const Vec4& b, int res) {
  auto inside = [](const Vec4& box, double x, double y) {
    return x >= box(0) - box(2) / 2 && x < box(0) + box(2) / 2 && y >= box(1) - box(3) / 2 && y < box(1) + box(3) / 2;
  };
  const double hx0 = std::min(a(0) - a(2) / 2, b(0) - b(2) / 2), hx1 = std::max(a(0) + a(2) / 2, b(0) + b(2) / 2);
  const double hy0 = std::min(a(1) - a(3) / 2, b(1) - b(3) / 2), hy1 = std::max(a(1) + a(3) / 2, b(1) + b(3) / 2);
  long inter = 0, uni = 0, hull = 0;
  for (int iy = 0; iy < res; ++iy) {
    const double y = (iy + 0.5) / res;
    for (int ix = 0; ix < res; ++ix) {
      const double x = (ix + 0.5) / res;
      const bool ia = inside(a, x, y), ib = inside(b, x, y);
      inter += ia && ib;
      uni += ia || ib;
      hull += x >= hx0 && x < hx1 && y >= hy0 && y < hy1;
    }
  }
  return static_cast<double>(inter) / uni - static_cast<double>(hull - uni) / hull;
}

double brute_force_min(const Mat& cost) {
  // Minimum over all injections of the smaller side into the larger.
  const bool rows_small = cost.rows() <= cost.cols();
  const Mat c = rows_small ? cost : Mat(cost.transpose());
  std::vector<int> cols(c.cols());
  std::iota(cols.begin(), cols.end(), 0);
  double best = INFINITY;
  do {
    double s = 0.0;
    for (Eigen::Index i = 0; i < c.rows(); ++i) s += c(i, cols[i]);
    best = std::min(best, s);
  } while (std::next_permutation(cols.begin(), cols.end()));
  return best;
}

Vec4 random_box(Rng& rng) { return Vec4(rng.uniform(0.2, 0.8), rng.uniform(0.2, 0.8), rng.uniform(0.05, 0.4), rng.uniform(0.05, 0.4)); }

}  // namespace

TEST_CASE("giou: identity, symmetry, bound by IoU and the pixel-grid oracle") {
  const Vec4 a(0.25, 0.25, 0.2, 0.2);
  const Vec4 b(0.75, 0.75, 0.2, 0.2);
  CHECK(giou(a, a) == doctest::Approx(1.0).epsilon(1e-15));
  const double oracle = giou_pixel_oracle(a, b, 2000);
  CHECK(giou(a, b) == doctest::Approx(oracle).epsilon(1e-3));
  // Hull 0.7 x 0.7, union 0.08: -(0.49 - 0.08) / 0.49.
  CHECK(giou(a, b) == doctest::Approx(-0.836734693877551).epsilon(1e-12));
  CHECK(giou(Vec4(0.01, 0.01, 0.001, 0.001), Vec4(0.99, 0.99, 0.001, 0.001)) < -0.99);
  Rng rng(1);
  for (int t = 0; t < 200; ++t) {
    const Vec4 p = random_box(rng), q = random_box(rng);
    CHECK(giou(p, q) == doctest::Approx(giou(q, p)).epsilon(1e-14));
    CHECK(giou(p, q) <= iou(p, q) + 1e-15);
    CHECK(giou(p, q) > -1.0);
  }
  for (int t = 0; t < 5; ++t) {
    const Vec4 p = random_box(rng), q = random_box(rng);
    CHECK(giou(p, q) == doctest::Approx(giou_pixel_oracle(p, q, 1000)).epsilon(5e-3));
  }
  CHECK_THROWS_AS(giou(Vec4(0.5, 0.5, 0.0, 0.1), a), DegenerateBoxError);
}

TEST_CASE("giou: analytic gradient matches central differences") {
  Rng rng(2);
  for (int t = 0; t < 50; ++t) {
    const Vec4 p = random_box(rng), q = random_box(rng);
    const GiouGrad g = giou_with_grad(p, q);
    for (int k = 0; k < 4; ++k) {
      const double h = 1e-6;
      Vec4 pp = p, pm = p, qp = q, qm = q;
      pp(k) += h;
      pm(k) -= h;
      qp(k) += h;
      qm(k) -= h;
      CHECK(g.grad_a(k) == doctest::Approx((giou(pp, q) - giou(pm, q)) / (2 * h)).epsilon(1e-5));
      CHECK(g.grad_b(k) == doctest::Approx((giou(p, qp) - giou(p, qm)) / (2 * h)).epsilon(1e-5));
    }
  }
}

TEST_CASE("focal loss: closed forms, saturation and gradient") {
  Vec x(1);
  x << 0.0;
  CHECK(focal_loss(x, {1}).value == doctest::Approx(0.25 * 0.25 * std::log(2.0)).epsilon(1e-14));
  CHECK(focal_loss(x, {1}).value == doctest::Approx(0.04332).epsilon(1e-4));
  Rng rng(3);
  for (int t = 0; t < 20; ++t) {
    Vec v(1);
    v << rng.normal(0, 3);
    const double p = 1.0 / (1.0 + std::exp(-v(0)));
    CHECK(focal_loss(v, {1}, 0.5, 0.0).value == doctest::Approx(-0.5 * std::log(p)).epsilon(1e-12));
    CHECK(focal_loss(v, {0}, 0.5, 0.0).value == doctest::Approx(-0.5 * std::log(1 - p)).epsilon(1e-12));
  }
  Vec sat(4);
  sat << 20, -20, 20, -20;
  CHECK(focal_loss(sat, {1, 0, 1, 0}).value < 1e-6);
  // No positives: normalized by 1.
  Vec neg(2);
  neg << 0.3, -0.2;
  const FocalResult r = focal_loss(neg, {0, 0});
  double expect = 0.0;
  for (int i = 0; i < 2; ++i) {
    const double p = 1.0 / (1.0 + std::exp(-neg(i)));
    expect += -0.75 * p * p * std::log(1 - p);
  }
  CHECK(r.value == doctest::Approx(expect).epsilon(1e-12));

  Vec z(12);
  std::vector<std::uint8_t> labels(12);
  for (int i = 0; i < 12; ++i) {
    z(i) = rng.normal(0, 2);
    labels[i] = i % 3 == 0;
  }
  const FocalResult g = focal_loss(z, labels);
  for (int i = 0; i < 12; ++i) {
    Vec zp = z, zm = z;
    zp(i) += 1e-6;
    zm(i) -= 1e-6;
    CHECK(g.grad(i) == doctest::Approx((focal_loss(zp, labels).value - focal_loss(zm, labels).value) / 2e-6).epsilon(1e-6));
  }
}

TEST_CASE("oks loss: exact, closed form, range and gradient") {
  Mat gt(3, 2);
  gt << 0.2, 0.3, 0.5, 0.5, 0.7, 0.1;
  std::vector<std::uint8_t> vis = {1, 1, 0};
  CHECK(oks_loss(gt, gt, vis, 0.04).value == 0.0);
  Mat one(1, 2), tgt(1, 2);
  const double area = 0.05, k = 0.1;
  tgt << 0.4, 0.4;
  one << 0.4 + std::sqrt(2 * area * k * k), 0.4;
  CHECK(oks_loss(one, tgt, {1}, area, k).value == doctest::Approx(1 - std::exp(-1.0)).epsilon(1e-12));
  CHECK(oks_loss(one, tgt, {1}, area, k).value == doctest::Approx(0.6321).epsilon(1e-4));
  CHECK_FALSE(oks_loss(one, tgt, {0}, area, k).valid);
  Rng rng(4);
  for (int t = 0; t < 10; ++t) {
    Mat pred = gt + 0.05 * Mat::Random(3, 2);
    const OksResult r = oks_loss(pred, gt, vis, 0.04);
    CHECK(r.value >= 0.0);
    CHECK(r.value < 1.0);
    for (int i = 0; i < 3; ++i) {
      for (int c = 0; c < 2; ++c) {
        Mat pp = pred, pm = pred;
        pp(i, c) += 1e-6;
        pm(i, c) -= 1e-6;
        const double fd = (oks_loss(pp, gt, vis, 0.04).value - oks_loss(pm, gt, vis, 0.04).value) / 2e-6;
        CHECK(r.grad(i, c) == doctest::Approx(fd).epsilon(1e-5).scale(1e-3));
      }
    }
  }
}

TEST_CASE("hungarian: trivial cases and exhaustive oracle") {
  Mat one(1, 1);
  one << 3.0;
  CHECK(hungarian(one) == std::vector<int>{0});
  Mat diag(2, 2);
  diag << 0, 9, 9, 0;
  CHECK(hungarian(diag) == std::vector<int>{0, 1});
  Rng rng(5);
  for (int t = 0; t < 200; ++t) {
    const Mat fixed = Mat::NullaryExpr(8, 5, [&]() { return rng.uniform_int(0, 10000) / 1024.0; });
    const std::vector<int> fa = hungarian(fixed);
    double fs = 0.0;
    for (int i = 0; i < 8; ++i) fs += fa[i] < 0 ? 0.0 : fixed(i, fa[i]);
    CHECK(fs == brute_force_min(fixed));

    // Dyadic costs keep every partial sum exact, so optimal costs compare with ==.
    const int rows = rng.uniform_int(1, 8), cols = rng.uniform_int(1, 8);
    const Mat c = Mat::NullaryExpr(rows, cols, [&]() { return rng.uniform_int(0, 10000) / 1024.0; });
    const std::vector<int> a = hungarian(c);
    double s = 0.0;
    std::vector<int> used;
    for (int i = 0; i < rows; ++i) {
      if (a[i] < 0) continue;
      s += c(i, a[i]);
      used.push_back(a[i]);
    }
    std::sort(used.begin(), used.end());
    CHECK(std::adjacent_find(used.begin(), used.end()) == used.end());
    CHECK(static_cast<int>(used.size()) == std::min(rows, cols));
    CHECK(s == brute_force_min(c));
  }
}

TEST_CASE("hungarian_match: forced, permutation-invariant cost") {
  Vec s(1);
  s << 0.3;
  Mat b(1, 4);
  b << 0.5, 0.5, 0.2, 0.2;
  const MatchResult m = hungarian_match(s, b, {Vec4(0.4, 0.4, 0.2, 0.3)});
  REQUIRE(m.pairs.size() == 1);
  CHECK(m.pairs[0] == std::make_pair(0, 0));
  CHECK(hungarian_match(s, b, {}).unmatched_candidates == std::vector<int>{0});

  Rng rng(6);
  for (int t = 0; t < 20; ++t) {
    const int c = 6, g = 3;
    Vec scores(c);
    Mat boxes(c, 4);
    for (int i = 0; i < c; ++i) {
      scores(i) = rng.normal();
      boxes.row(i) = random_box(rng).transpose();
    }
    std::vector<Vec4> gts;
    for (int j = 0; j < g; ++j) gts.push_back(random_box(rng));
    std::vector<int> perm(c);
    std::iota(perm.begin(), perm.end(), 0);
    std::reverse(perm.begin(), perm.end());
    std::rotate(perm.begin(), perm.begin() + 2, perm.end());
    Vec ps(c);
    Mat pb(c, 4);
    for (int i = 0; i < c; ++i) {
      ps(i) = scores(perm[i]);
      pb.row(i) = boxes.row(perm[i]);
    }
    auto total = [&](const Vec& sc, const Mat& bx, const MatchResult& r) {
      double sum = 0;
      for (auto [ci, gi] : r.pairs) {
        const Vec4 bb = bx.row(ci).transpose();
        sum += -2.0 / (1 + std::exp(-sc(ci))) + 5 * (bb - gts[gi]).cwiseAbs().sum() + 2 * (1 - giou(bb, gts[gi]));
      }
      return sum;
    };
    const MatchResult m1 = hungarian_match(scores, boxes, gts);
    const MatchResult m2 = hungarian_match(ps, pb, gts);
    CHECK(m1.pairs.size() == 3);
    CHECK(m1.unmatched_candidates.size() == 3);
    CHECK(total(scores, boxes, m1) == doctest::Approx(total(ps, pb, m2)).epsilon(1e-12));
  }
}

TEST_CASE("smplx loss: perfect prediction, L1 arithmetic and gradients") {
  SceneConfig cfg;
  const SceneGroundTruth scene = generate_scene(cfg, model(), 21);
  const PersonGT& gt = scene.persons[0];
  const Vec x = gt.params.to_vector();
  const SmplxLossResult perfect = smplx_loss(model(), scene.camera, scene.width, scene.height, x, gt.translation, gt, SmplxLevel::kFull);
  CHECK(perfect.param == 0.0);
  for (int p = 0; p < kNumParts; ++p) {
    CHECK(perfect.kp3d[p] < 1e-12);
    CHECK(perfect.kp2d[p] < 1e-9);
  }
  CHECK(perfect.weighted < 1e-9);

  Vec off = x;
  off(body::kNumPose) += 1.0;
  const SmplxLossResult r = smplx_loss(model(), scene.camera, scene.width, scene.height, off, gt.translation, gt, SmplxLevel::kFull);
  CHECK(r.param == doctest::Approx(1.0 / 179.0).epsilon(1e-14));
  CHECK(supervised_param_count(SmplxLevel::kBody) == 76);

  Mat ptb(1, 1);
  Rng rng(7);
  for (SmplxLevel level : {SmplxLevel::kBody, SmplxLevel::kFull}) {
    for (int t = 0; t < 10; ++t) {
      Vec p = x;
      for (int i = 0; i < p.size(); ++i) p(i) += rng.normal(0, 0.2);
      const Vec3 tr = gt.translation + Vec3(rng.normal(0, 0.1), rng.normal(0, 0.1), rng.normal(0, 0.2));
      const SmplxLossResult a = smplx_loss(model(), scene.camera, scene.width, scene.height, p, tr, gt, level);
      auto f = [&](const Vec& q, const Vec3& tt) {
        return smplx_loss(model(), scene.camera, scene.width, scene.height, q, tt, gt, level).weighted;
      };
      int bad = 0;
      for (int i = 0; i < p.size(); ++i) {
        const double h = 1e-6;
        Vec pp = p, pm = p;
        pp(i) += h;
        pm(i) -= h;
        const double fd = (f(pp, tr) - f(pm, tr)) / (2 * h);
        if (std::abs(fd - a.grad_params(i)) > 1e-3 * std::max({std::abs(fd), std::abs(a.grad_params(i)), 1e-3})) ++bad;
      }
      for (int c = 0; c < 3; ++c) {
        Vec3 tp = tr, tm = tr;
        tp(c) += 1e-6;
        tm(c) -= 1e-6;
        const double fd = (f(p, tp) - f(p, tm)) / 2e-6;
        if (std::abs(fd - a.grad_translation(c)) > 1e-3 * std::max({std::abs(fd), 1e-3})) ++bad;
      }
      CHECK(bad == 0);
      if (level == SmplxLevel::kBody) {
        CHECK(a.grad_params.segment(66, 159 - 66).cwiseAbs().maxCoeff() == 0.0);
        CHECK(a.grad_params.tail(10).cwiseAbs().maxCoeff() == 0.0);
      }
    }
  }
}
