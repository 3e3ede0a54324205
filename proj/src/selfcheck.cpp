#include "aios/selfcheck.hpp"

#include "aios/config.hpp"
#include "aios/decoder.hpp"
#include "aios/features.hpp"
#include "aios/losses.hpp"
#include "aios/metrics.hpp"
#include "aios/network.hpp"
#include "aios/objective.hpp"
#include "aios/rng.hpp"
#include "aios/scene.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <map>
#include <numeric>
#include <sstream>

namespace aios {

double relative_error(double a, double b, double floor) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

namespace {

constexpr double kGradFloor = 1e-6;

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), f, v);
  return buf;
}

// Runs body, catching exceptions as failures, and times it.
CheckResult timed(const std::string& name, const std::function<void(CheckResult&)>& body) {
  CheckResult r;
  r.name = name;
  const auto t0 = std::chrono::steady_clock::now();
  try {
    r.passed = true;
    body(r);
  } catch (const std::exception& e) {
    r.passed = false;
    r.detail = std::string("exception: ") + e.what();
  }
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

body::ParamSet random_params(Rng& rng, double pose_sd = 0.4) {
  body::ParamSet p;
  for (int j = 0; j < body::kNumJoints; ++j) {
    for (int k = 0; k < 3; ++k) p.pose(j, k) = rng.normal(0.0, pose_sd);
  }
  for (int k = 0; k < body::kNumShape; ++k) p.beta(k) = rng.normal();
  for (int k = 0; k < body::kNumExpr; ++k) p.psi(k) = rng.normal();
  return p;
}

Mat random_mat(Rng& rng, Eigen::Index rows, Eigen::Index cols) {
  Mat m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform(-1.0, 1.0);
  return m;
}

Mat3 random_rotation(Rng& rng) { return body::rodrigues(Vec3(rng.normal(), rng.normal(), rng.normal())); }

// Central difference of f along one coordinate of x.
template <typename F>
double central_difference(F&& f, double& x, double h) {
  const double x0 = x;
  x = x0 + h;
  const double fp = f();
  x = x0 - h;
  const double fm = f();
  x = x0;
  return (fp - fm) / (2.0 * h);
}

// Tracks the worst relative error of a gradient suite.
struct GradTally {
  double tolerance = 1e-3;
  double worst = 0.0;
  int checked = 0;
  int failed = 0;
  std::string first_failure;

  void add(double fd, double analytic, const std::string& where) {
    const double e = relative_error(fd, analytic, kGradFloor);
    ++checked;
    worst = std::max(worst, e);
    if (!(e < tolerance)) {
      if (failed++ == 0) {
        first_failure = where + " fd=" + fmt("%.6g", fd) + " analytic=" + fmt("%.6g", analytic);
      }
    }
  }
  void finish(CheckResult& r) const {
    r.passed = failed == 0 && checked > 0;
    r.detail = std::to_string(checked) + " entries, max rel err " + fmt("%.2e", worst);
    if (failed > 0) r.detail += ", " + std::to_string(failed) + " failed (first: " + first_failure + ")";
  }
};

// Raw values of a stage output; rebuilt as tape constants for every evaluation.
struct OutputValues {
  Mat scores;
  std::array<Mat, kNumParts> boxes;
  std::array<Mat, kNumParts> joints;
  Mat params;
  Mat translation;
};

StageOutput as_stage_output(ad::Tape& t, const OutputValues& v, int stage, SmplxLevel level) {
  StageOutput out;
  out.stage = stage;
  out.level = level;
  out.num_candidates = static_cast<int>(v.scores.rows());
  out.scores = t.constant(v.scores);
  for (int p = 0; p < kNumParts; ++p) {
    out.boxes[p] = t.constant(v.boxes[p]);
    out.joints[p] = t.constant(v.joints[p]);
  }
  out.params = t.constant(v.params);
  out.translation = t.constant(v.translation);
  return out;
}

// Candidates 0..n-1 sit near the n ground-truth persons; the rest are random.
OutputValues random_outputs(Rng& rng, const SceneGroundTruth& scene, int extra) {
  const int n = static_cast<int>(scene.persons.size());
  const int c = n + extra;
  OutputValues v;
  v.scores = random_mat(rng, c, 1) * 2.0;
  for (int p = 0; p < kNumParts; ++p) {
    const int k = body::keypoint_range(static_cast<Part>(p)).count;
    v.boxes[p] = Mat(c, 4);
    v.joints[p] = Mat(c, 2 * k);
    for (int i = 0; i < c; ++i) {
      Vec4 b(rng.uniform(0.2, 0.8), rng.uniform(0.2, 0.8), rng.uniform(0.05, 0.3), rng.uniform(0.05, 0.3));
      if (i < n) {
        b = scene.persons[i].boxes[p] + Vec4(rng.normal(0, 0.02), rng.normal(0, 0.02), rng.normal(0, 0.01), rng.normal(0, 0.01));
        b(2) = std::max(b(2), 0.02);
        b(3) = std::max(b(3), 0.02);
      }
      v.boxes[p].row(i) = b.transpose();
      const Mat kp = i < n ? normalized_keypoints(scene.persons[i], static_cast<Part>(p), scene.width, scene.height) : Mat();
      for (int j = 0; j < k; ++j) {
        for (int e = 0; e < 2; ++e) {
          v.joints[p](i, 2 * j + e) = i < n ? kp(j, e) + rng.normal(0, 0.03) : rng.uniform(0.1, 0.9);
        }
      }
    }
  }
  v.params = Mat(c, body::kNumParams);
  v.translation = Mat(c, 3);
  for (int i = 0; i < c; ++i) {
    const Vec x = i < n ? scene.persons[i].params.to_vector() : Vec(Vec::Zero(body::kNumParams));
    for (int e = 0; e < body::kNumParams; ++e) v.params(i, e) = x(e) + rng.normal(0, 0.2);
    const Vec3 tr = i < n ? scene.persons[i].translation : Vec3(0, 0, 4);
    v.translation.row(i) = (tr + Vec3(rng.normal(0, 0.1), rng.normal(0, 0.1), rng.normal(0, 0.2))).transpose();
  }
  return v;
}

void zero_weights(LossConfig& c) {
  c.cls = c.box_l1 = c.giou = c.j2d = 0.0;
  c.oks.fill(0.0);
  c.smplx.param_pose = c.smplx.param_shape = c.smplx.param_expr = 0.0;
  c.smplx.kp3d.fill(0.0);
  c.smplx.kp2d.fill(0.0);
  c.encoder = 1.0;
}

enum class Feeds { kScores, kBoxes, kJoints, kSmplx };

struct IsolatedTerm {
  std::string name;
  Feeds feeds;
  std::function<void(LossConfig&)> enable;
};

std::vector<IsolatedTerm> isolated_terms() {
  std::vector<IsolatedTerm> terms = {
      {"cls", Feeds::kScores, [](LossConfig& c) { c.cls = 1.0; }},
      {"box_l1", Feeds::kBoxes, [](LossConfig& c) { c.box_l1 = 1.0; }},
      {"giou", Feeds::kBoxes, [](LossConfig& c) { c.giou = 1.0; }},
      {"j2d", Feeds::kJoints, [](LossConfig& c) { c.j2d = 1.0; }},
      {"param", Feeds::kSmplx, [](LossConfig& c) {
         c.smplx.param_pose = 1.0;
         c.smplx.param_shape = 0.5;
         c.smplx.param_expr = 0.25;
       }},
  };
  for (int p = 0; p < kNumParts; ++p) {
    const std::string part = part_name(p);
    terms.push_back({"oks." + part, Feeds::kJoints, [p](LossConfig& c) { c.oks[p] = 1.0; }});
    terms.push_back({"kp3d." + part, Feeds::kSmplx, [p](LossConfig& c) { c.smplx.kp3d[p] = 1.0; }});
    terms.push_back({"kp2d." + part, Feeds::kSmplx, [p](LossConfig& c) { c.smplx.kp2d[p] = 1.0; }});
  }
  return terms;
}

// Reference rule for which token pairs may attend, evaluated per (candidate, token) pair.
bool rule_allows(const TokenSpec& query, int query_candidate, const TokenSpec& key, int key_candidate) {
  const bool same_candidate = query_candidate == key_candidate;
  if (query.kind == TokenKind::kJoint) return same_candidate;
  if (query.kind == TokenKind::kPartLoc) return same_candidate || key.kind == TokenKind::kBodyLoc;
  return key.kind != TokenKind::kJoint;
}

}  // namespace

namespace checks {

CheckResult nmve_arithmetic(double tolerance) {
  return timed("nmve arithmetic", [&](CheckResult& r) {
    const double a = normalize_by_f1(91.9, 0.94);
    const double b = normalize_by_f1(99.7, 0.93);
    r.passed = std::abs(a - 97.8) <= tolerance && std::abs(b - 107.2) <= tolerance;
    r.detail = "91.9/0.94 = " + fmt("%.4f", a) + ", 99.7/0.93 = " + fmt("%.4f", b);
  });
}

CheckResult hungarian_oracle(int trials, int max_size, std::uint64_t seed) {
  return timed("hungarian oracle", [&](CheckResult& r) {
    Rng rng(seed);
    int bad = 0;
    for (int t = 0; t < trials; ++t) {
      const int n = rng.uniform_int(1, max_size), m = rng.uniform_int(1, max_size);
      // Dyadic entries keep every sum exact, so equality is exact.
      Mat cost(n, m);
      for (Eigen::Index i = 0; i < cost.size(); ++i) cost.data()[i] = rng.uniform_int(0, 1 << 20) / 1024.0;
      const std::vector<int> a = hungarian(cost);
      double got = 0.0;
      std::vector<int> used;
      for (int i = 0; i < n; ++i) {
        if (a[i] < 0) continue;
        got += cost(i, a[i]);
        used.push_back(a[i]);
      }
      std::sort(used.begin(), used.end());
      const bool injective = std::adjacent_find(used.begin(), used.end()) == used.end();
      const bool complete = static_cast<int>(used.size()) == std::min(n, m);

      const Mat c = n <= m ? cost : Mat(cost.transpose());
      std::vector<int> cols(static_cast<std::size_t>(c.cols()));
      std::iota(cols.begin(), cols.end(), 0);
      double best = INFINITY;
      do {
        double s = 0.0;
        for (Eigen::Index i = 0; i < c.rows(); ++i) s += c(i, cols[i]);
        best = std::min(best, s);
      } while (std::next_permutation(cols.begin(), cols.end()));
      if (!(injective && complete && got == best)) ++bad;
    }
    r.passed = bad == 0;
    r.detail = std::to_string(trials) + " matrices up to " + std::to_string(max_size) + "x" + std::to_string(max_size) +
               ", " + std::to_string(bad) + " mismatches";
  });
}

CheckResult body_gradients(const body::BodyModel& model, int points, double tolerance, std::uint64_t seed) {
  return timed("gradients: body model", [&](CheckResult& r) {
    Rng rng(seed);
    GradTally tally;
    tally.tolerance = tolerance;
    for (int t = 0; t < points; ++t) {
      const body::ParamSet p = random_params(rng);
      const Mat wv = random_mat(rng, model.num_vertices, 3);
      const Mat wj = random_mat(rng, body::kNumJoints, 3);
      const Mat wk = random_mat(rng, body::kNumKeypoints, 3);
      body::BodyState st;
      body::forward(model, p, &st);
      const Vec g = body::backward(model, st, wv, wj, wk);
      Vec x = p.to_vector();
      auto f = [&] {
        const body::BodyOutput o = body::forward(model, body::ParamSet::from_vector(x));
        return o.vertices.cwiseProduct(wv).sum() + o.joints.cwiseProduct(wj).sum() + o.keypoints.cwiseProduct(wk).sum();
      };
      for (int i = 0; i < body::kNumParams; ++i) {
        tally.add(central_difference(f, x(i), 1e-6), g(i), "point " + std::to_string(t) + " param " + std::to_string(i));
      }
    }
    tally.finish(r);
  });
}

CheckResult projection_gradients(int points, double tolerance, std::uint64_t seed) {
  return timed("gradients: projection", [&](CheckResult& r) {
    Rng rng(seed);
    GradTally tally;
    tally.tolerance = tolerance;
    for (int t = 0; t < points; ++t) {
      body::CameraModel cam;
      cam.focal = rng.uniform(32.0, 128.0);
      cam.principal = Vec2(rng.uniform(20.0, 40.0), rng.uniform(20.0, 40.0));
      cam.translation = Vec3(rng.normal(0, 0.5), rng.normal(0, 0.5), rng.uniform(3.0, 6.0));
      Mat pts = random_mat(rng, 12, 3);
      const Mat w = random_mat(rng, 12, 2);
      const body::ProjectionGrad g = body::project_backward(pts, cam, w);
      auto f = [&] { return body::project(pts, cam).cwiseProduct(w).sum(); };
      for (Eigen::Index i = 0; i < pts.rows(); ++i) {
        for (int c = 0; c < 3; ++c) tally.add(central_difference(f, pts(i, c), 1e-6), g.points(i, c), "point coordinate");
      }
      for (int c = 0; c < 3; ++c) tally.add(central_difference(f, cam.translation(c), 1e-6), g.translation(c), "camera translation");
    }
    tally.finish(r);
  });
}

CheckResult loss_gradients(const body::BodyModel& model, int points, double tolerance, std::uint64_t seed) {
  return timed("gradients: loss terms", [&](CheckResult& r) {
    SceneConfig sc;
    sc.min_persons = 2;
    sc.max_persons = 3;
    LossContext ctx;
    ctx.model = &model;
    ctx.camera = scene_camera(sc);
    ctx.width = sc.width;
    ctx.height = sc.height;
    GradTally tally;
    tally.tolerance = tolerance;
    std::ostringstream per_term;
    const std::vector<IsolatedTerm> terms = isolated_terms();
    for (std::size_t ti = 0; ti < terms.size(); ++ti) {
      const IsolatedTerm& term = terms[ti];
      LossConfig cfg;
      zero_weights(cfg);
      term.enable(cfg);
      ctx.config = &cfg;
      Rng rng(mix_seed(seed, ti));
      GradTally local;
      local.tolerance = tolerance;
      int evaluated = 0;
      for (int t = 0; t < points; ++t) {
        const SceneGroundTruth scene = generate_scene(sc, model, mix_seed(seed, 1000 + t));
        OutputValues v = random_outputs(rng, scene, 2);
        StageGrads grads;
        {
          ad::Tape tape(false);
          const LossReport rep = stage_loss(ctx, as_stage_output(tape, v, 3, SmplxLevel::kFull), scene, &grads);
          const std::string prefix = "s3." + term.name;
          for (const std::string& n : rep.names) {
            if (n.compare(0, prefix.size(), prefix) == 0 && rep.weights.at(n) != 0.0) {
              ++evaluated;
              break;
            }
          }
        }
        auto f = [&] {
          ad::Tape tape(false);
          return stage_loss(ctx, as_stage_output(tape, v, 3, SmplxLevel::kFull), scene, nullptr).total;
        };
        auto check_all = [&](Mat& values, const Mat& analytic, Eigen::Index row_begin, Eigen::Index row_end) {
          for (Eigen::Index i = row_begin; i < row_end; ++i) {
            for (Eigen::Index c = 0; c < values.cols(); ++c) {
              const double fd = central_difference(f, values(i, c), 1e-6);
              const std::string where = term.name + " point " + std::to_string(t) + " (" + std::to_string(i) + "," + std::to_string(c) + ")";
              local.add(fd, analytic(i, c), where);
              tally.add(fd, analytic(i, c), where);
            }
          }
        };
        const Eigen::Index rows = v.scores.rows();
        switch (term.feeds) {
          case Feeds::kScores:
            check_all(v.scores, grads.scores, 0, rows);
            break;
          case Feeds::kBoxes:
            for (int p = 0; p < kNumParts; ++p) check_all(v.boxes[p], grads.boxes[p], 0, rows);
            break;
          case Feeds::kJoints:
            for (int p = 0; p < kNumParts; ++p) check_all(v.joints[p], grads.joints[p], 0, rows);
            break;
          case Feeds::kSmplx: {
            // One matched candidate per point keeps the cost bounded.
            const Eigen::Index c = t % static_cast<int>(scene.persons.size());
            check_all(v.params, grads.params, c, c + 1);
            check_all(v.translation, grads.translation, c, c + 1);
            break;
          }
        }
      }
      if (evaluated == 0) {
        tally.failed++;
        if (tally.first_failure.empty()) tally.first_failure = term.name + " never produced a value";
      }
      per_term << (ti ? " " : "") << term.name << "=" << fmt("%.1e", local.worst);
    }
    tally.finish(r);
    r.detail += "; worst per term: " + per_term.str();
  });
}

CheckResult network_gradients(const body::BodyModel& model, int entries, double tolerance, std::uint64_t seed) {
  return timed("gradients: network", [&](CheckResult& r) {
    SceneConfig sc;
    ModelConfig mc;
    mc.hidden_dim = 32;
    mc.ffn_dim = 64;
    mc.channels = {8, 16, 32, 32};
    mc.enc_layers = 1;
    mc.dec_layers_s1 = mc.dec_layers_s2 = mc.dec_layers_s3 = 1;
    mc.num_candidates = 20;
    mc.num_body_candidates = 8;
    mc.init_seed = seed;
    AiosNet net(mc, sc);
    LossConfig lc;
    lc.scheme = Scheme::kAll;
    LossContext ctx{&lc, &model, scene_camera(sc), sc.width, sc.height};
    const SceneGroundTruth scene = generate_scene(sc, model, mix_seed(seed, 1));

    ad::ParamStore& store = net.params();
    store.zero_grad();
    {
      ad::Tape t;
      const ForwardResult fr = net.forward(t, scene.image, lc.scheme);
      total_loss(ctx, fr, scene, 1.0);
      t.backward();
    }
    auto f = [&] {
      ad::Tape t(false);
      return total_loss(ctx, net.forward(t, scene.image, lc.scheme), scene, 0.0).total;
    };
    // Entries with a clearly non-zero gradient, drawn from distinct parameters.
    std::vector<ad::Param*> candidates;
    for (ad::Param* p : store.all()) {
      if (p->grad.cwiseAbs().maxCoeff() > 1e-4) candidates.push_back(p);
    }
    Rng rng(seed);
    GradTally tally;
    tally.tolerance = tolerance;
    for (int e = 0; e < entries && !candidates.empty(); ++e) {
      const int pi = rng.uniform_int(0, static_cast<int>(candidates.size()) - 1);
      ad::Param* p = candidates[pi];
      candidates.erase(candidates.begin() + pi);
      Eigen::Index idx = 0;
      for (int attempt = 0; attempt < 50; ++attempt) {
        idx = rng.uniform_int(0, static_cast<int>(p->value.size()) - 1);
        if (std::abs(p->grad.data()[idx]) > 1e-4) break;
      }
      const double fd = central_difference(f, p->value.data()[idx], 1e-6);
      tally.add(fd, p->grad.data()[idx], p->name + "[" + std::to_string(idx) + "]");
    }
    tally.finish(r);
  });
}

CheckResult procrustes(const body::BodyModel& model, int trials, double recover_tolerance, double invariance_mm,
                       std::uint64_t seed) {
  return timed("procrustes", [&](CheckResult& r) {
    Rng rng(seed);
    double worst_recover = 0.0, worst_invariance = 0.0;
    int rss_violations = 0;
    for (int t = 0; t < trials; ++t) {
      // Recovery of a constructed similarity.
      const Mat P = random_mat(rng, 30, 3);
      const double s = rng.uniform(0.5, 2.0);
      const Mat3 R = random_rotation(rng);
      const Vec3 tr(rng.normal(), rng.normal(), rng.normal());
      const Mat Q = ((s * P * R.transpose()).rowwise() + tr.transpose()).eval();
      const SimilarityTransform a = procrustes_align(P, Q);
      worst_recover = std::max({worst_recover, std::abs(a.scale - s), (a.rotation - R).cwiseAbs().maxCoeff(),
                                (a.translation - tr).cwiseAbs().maxCoeff()});

      // Alignment never increases the residual.
      const Mat Q2 = (Q + 0.3 * random_mat(rng, 30, 3)).eval();
      const Mat P2 = random_mat(rng, 30, 3);
      for (const Mat* src : {&P, &P2}) {
        const double before = (*src - Q2).squaredNorm();
        const double after = (procrustes_align(*src, Q2).apply(*src) - Q2).squaredNorm();
        if (after > before * (1.0 + 1e-12)) ++rss_violations;
      }

      // PA errors ignore similarity transforms of the prediction.
      const body::BodyOutput gt = body::forward(model, random_params(rng, 0.3));
      const body::BodyOutput pred = body::forward(model, random_params(rng, 0.3));
      const PersonErrors e0 = compute_errors_from_meshes(model, pred.vertices, pred.joints, gt.vertices, gt.joints, Alignment::kPelvis);
      SimilarityTransform sim;
      sim.scale = rng.uniform(0.5, 2.0);
      sim.rotation = random_rotation(rng);
      sim.translation = Vec3(rng.normal(), rng.normal(), rng.normal());
      const PersonErrors e1 = compute_errors_from_meshes(model, sim.apply(pred.vertices), sim.apply(pred.joints), gt.vertices,
                                                         gt.joints, Alignment::kPelvis);
      for (int p = 0; p < kNumReportParts; ++p) {
        worst_invariance = std::max({worst_invariance, std::abs(e0.pa_pve[p] - e1.pa_pve[p]), std::abs(e0.pa_mpjpe[p] - e1.pa_mpjpe[p])});
      }
    }
    r.passed = worst_recover < recover_tolerance && rss_violations == 0 && worst_invariance < invariance_mm;
    r.detail = "recovery err " + fmt("%.1e", worst_recover) + ", PA residual violations " + std::to_string(rss_violations) +
               ", PA invariance " + fmt("%.1e", worst_invariance) + " mm";
  });
}

CheckResult attention_masks(int layouts, int max_candidates, std::uint64_t seed) {
  return timed("attention masks", [&](CheckResult& r) {
    Rng rng(seed);
    const ModelConfig mc;
    const LayoutKind kinds[] = {LayoutKind::kBodyLocation, LayoutKind::kBodyDetail, LayoutKind::kWholeBody, LayoutKind::kNaiveFull};
    int bad = 0;
    long pairs = 0;
    for (int l = 0; l < layouts; ++l) {
      // Cycle through every stage of both variants, then randomize.
      const LayoutKind kind = l < 4 ? kinds[l] : kinds[rng.uniform_int(0, 3)];
      const int c = rng.uniform_int(1, max_candidates);
      const TokenLayout layout = make_layout(kind, mc);
      const int t = layout.size();
      const std::vector<std::uint8_t> mask = build_attention_mask(layout, c);
      const int n = t * c;
      if (static_cast<int>(mask.size()) != n * n) {
        ++bad;
        continue;
      }
      for (int qc = 0; qc < c; ++qc) {
        for (int qt = 0; qt < t; ++qt) {
          for (int kc = 0; kc < c; ++kc) {
            for (int kt = 0; kt < t; ++kt) {
              const int i = qc * t + qt, j = kc * t + kt;
              const bool expected = i == j || rule_allows(layout.tokens[qt], qc, layout.tokens[kt], kc);
              bad += (mask[static_cast<std::size_t>(i) * n + j] != 0) != expected;
              ++pairs;
            }
          }
        }
      }
    }
    r.passed = bad == 0;
    r.detail = std::to_string(layouts) + " layouts, " + std::to_string(pairs) + " pairs, " + std::to_string(bad) + " disagreements";
  });
}

CheckResult token_layouts(const body::BodyModel& model, int configs, std::uint64_t seed) {
  return timed("token layouts", [&](CheckResult& r) {
    Rng rng(seed);
    SceneConfig sc;
    std::vector<std::string> problems;
    auto expect = [&](bool ok, const std::string& what) {
      if (!ok && problems.size() < 5) problems.push_back(what);
      if (!ok) r.passed = false;
    };
    for (int k = 0; k < configs; ++k) {
      ModelConfig mc;
      mc.variant = rng.uniform() < 0.5 ? Variant::kFull : Variant::kNaive;
      mc.hidden_dim = rng.uniform() < 0.5 ? 16 : 32;
      mc.heads = rng.uniform() < 0.5 ? 2 : 4;
      mc.ffn_dim = 32;
      mc.channels = {8, 8, 16, 16};
      mc.enc_layers = 1;
      mc.points = rng.uniform_int(1, 3);
      mc.dec_layers_s1 = mc.dec_layers_s2 = mc.dec_layers_s3 = 1;
      mc.dec_layers_naive = rng.uniform_int(1, 2);
      mc.num_body_candidates = rng.uniform_int(1, 24);
      mc.num_candidates = rng.uniform_int(mc.num_body_candidates, 60);
      mc.init_seed = rng.next();
      const std::string tag = "config " + std::to_string(k) + ": ";

      const int expected_whole = 1 + ModelConfig::kBodyJointTokens + 3 + mc.lhand_joints + mc.rhand_joints + mc.face_joints;
      expect(make_layout(LayoutKind::kBodyLocation, mc).size() == 1, tag + "stage-1 layout");
      expect(make_layout(LayoutKind::kBodyDetail, mc).size() == 21, tag + "stage-2 layout");
      expect(make_layout(LayoutKind::kWholeBody, mc).size() == expected_whole, tag + "stage-3 layout");
      expect(make_layout(LayoutKind::kNaiveFull, mc).size() == 4, tag + "naive layout");

      AiosNet net(mc, sc);
      const SceneGroundTruth scene = generate_scene(sc, model, mix_seed(seed, k));
      ad::Tape t(false);
      const ForwardResult fr = net.forward(t, scene.image, Scheme::kAll);
      const int expected_stages = mc.variant == Variant::kFull ? 4 : 3;
      expect(static_cast<int>(fr.stages.size()) == expected_stages, tag + "stage count");
      if (static_cast<int>(fr.stages.size()) != expected_stages) continue;
      expect(fr.stages[1].num_candidates == mc.num_candidates, tag + "stage 1 keeps M_h");
      const Vec s1 = fr.stages[1].scores.value().col(0);
      std::vector<int> kept;
      for (int i : top_k(s1, mc.num_body_candidates)) kept.push_back(fr.stages[1].token_index[i]);
      for (std::size_t s = 2; s < fr.stages.size(); ++s) {
        const StageOutput& so = fr.stages[s];
        expect(so.num_candidates == mc.num_body_candidates, tag + "stage " + std::to_string(s) + " keeps M_b");
        expect(so.token_index == kept, tag + "stage " + std::to_string(s) + " keeps the top stage-1 candidates");
        expect(so.scores.rows() == mc.num_body_candidates, tag + "score rows");
        for (int p = 0; p < kNumParts; ++p) {
          expect(so.boxes[p].valid() && so.boxes[p].rows() == mc.num_body_candidates, tag + "box rows");
        }
      }
      const StageOutput& last = fr.final_stage();
      expect(last.joints[1].cols() == 2 * mc.lhand_joints && last.joints[2].cols() == 2 * mc.rhand_joints &&
                 last.joints[3].cols() == 2 * mc.face_joints && last.joints[0].cols() == 2 * ModelConfig::kBodyJointTokens,
             tag + "final joint columns");
    }
    std::string d = std::to_string(configs) + " random configs";
    for (const std::string& p : problems) d += "; " + p;
    r.detail = d;
  });
}

CheckResult giou_oks_properties(int trials, std::uint64_t seed) {
  return timed("giou/oks properties", [&](CheckResult& r) {
    Rng rng(seed);
    std::map<std::string, int> violations;
    auto expect = [&](bool ok, const char* what) {
      if (!ok) ++violations[what];
    };
    auto box = [&] { return Vec4(rng.uniform(0.1, 0.9), rng.uniform(0.1, 0.9), rng.uniform(0.02, 0.5), rng.uniform(0.02, 0.5)); };
    for (int t = 0; t < trials; ++t) {
      const Vec4 a = box(), b = box();
      const double g = giou(a, b), gb = giou(b, a), i = iou(a, b);
      expect(std::abs(giou(a, a) - 1.0) <= 1e-12, "giou self");
      expect(std::abs(g - gb) <= 1e-14, "giou symmetry");
      expect(g <= i + 1e-15 && g > -1.0 && g <= 1.0 && i >= 0.0 && i <= 1.0, "giou range");
      // Uniform scaling about the origin leaves GIoU unchanged.
      const double k = rng.uniform(0.5, 1.0);
      expect(std::abs(giou(Vec4(a * k), Vec4(b * k)) - g) <= 1e-12, "giou scale invariance");
      // Disjoint boxes have negative GIoU.
      const Vec4 far(a(0) + a(2) / 2 + 0.3 + 0.5, a(1), 0.2, 0.2);
      expect(giou(a, far) < 0.0, "giou disjoint");

      // OKS: zero at the target, bounded, monotone in distance, blind to invisible joints.
      const Mat gt = random_mat(rng, 6, 2);
      std::vector<std::uint8_t> vis = {1, 1, 1, 0, 1, 1};
      const double area = rng.uniform(0.01, 0.2);
      expect(oks_loss(gt, gt, vis, area).value == 0.0, "oks exact");
      Mat pred = gt + 0.05 * random_mat(rng, 6, 2);
      const OksResult o = oks_loss(pred, gt, vis, area);
      expect(o.valid && o.value >= 0.0 && o.value < 1.0, "oks range");
      Mat farther = pred;
      farther.row(0) = gt.row(0) + 2.0 * (pred.row(0) - gt.row(0));
      expect(oks_loss(farther, gt, vis, area).value >= o.value, "oks monotone");
      Mat hidden = pred;
      hidden.row(3) += Eigen::RowVector2d(5.0, -5.0);
      expect(oks_loss(hidden, gt, vis, area).value == o.value, "oks invisible");
      expect(!oks_loss(pred, gt, std::vector<std::uint8_t>(6, 0), area).valid, "oks no visible");
    }
    r.passed = violations.empty();
    r.detail = std::to_string(trials) + " trials";
    for (const auto& [what, n] : violations) r.detail += ", " + what + ": " + std::to_string(n);
  });
}

CheckResult body_tables(const body::BodyModel& model) {
  return timed("body model tables", [&](CheckResult& r) {
    try {
      model.validate();
      r.detail = std::to_string(model.num_vertices) + " vertices, " + std::to_string(model.num_joints) + " joints";
    } catch (const InvalidParameterError& e) {
      r.passed = false;
      r.detail = e.what();
    }
  });
}

CheckResult rest_pose(const body::BodyModel& model) {
  return timed("rest pose reproduces template", [&](CheckResult& r) {
    const body::BodyOutput out = body::forward(model, body::ParamSet{});
    const double err = (out.vertices - model.template_vertices).cwiseAbs().maxCoeff();
    r.passed = err < 1e-12;
    r.detail = "max vertex deviation " + fmt("%.2e", err);
  });
}

}  // namespace checks

std::vector<CheckResult> run_self_checks(bool corrupt_skinning) {
  body::BodyModel model = body::make_procedural_model();
  if (corrupt_skinning) model.skinning_weights *= 1.25;
  std::vector<CheckResult> out;
  out.push_back(checks::body_tables(model));
  out.push_back(checks::rest_pose(model));
  out.push_back(checks::nmve_arithmetic(0.05));
  out.push_back(checks::hungarian_oracle(200, 8, 1));
  out.push_back(checks::body_gradients(model, 10, 1e-3, 2));
  out.push_back(checks::projection_gradients(10, 1e-3, 3));
  out.push_back(checks::loss_gradients(model, 10, 1e-3, 4));
  out.push_back(checks::network_gradients(model, 10, 1e-3, 5));
  out.push_back(checks::procrustes(model, 50, 1e-8, 1e-6, 6));
  out.push_back(checks::attention_masks(50, 5, 7));
  out.push_back(checks::token_layouts(model, 20, 8));
  out.push_back(checks::giou_oks_properties(200, 9));
  return out;
}

std::string format_check_table(const std::vector<CheckResult>& results) {
  std::size_t width = 5;
  for (const CheckResult& r : results) width = std::max(width, r.name.size());
  std::ostringstream os;
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%-*s  %-6s %8s  ", static_cast<int>(width), "check", "result", "seconds");
  os << buf << "detail\n";
  int failed = 0;
  for (const CheckResult& r : results) {
    std::snprintf(buf, sizeof(buf), "%-*s  %-6s %8.2f  ", static_cast<int>(width), r.name.c_str(), r.passed ? "PASS" : "FAIL",
                  r.seconds);
    os << buf << r.detail << "\n";
    failed += !r.passed;
  }
  os << (failed == 0 ? "all " + std::to_string(results.size()) + " checks passed"
                     : std::to_string(failed) + " of " + std::to_string(results.size()) + " checks failed")
     << "\n";
  return os.str();
}

}  // namespace aios
