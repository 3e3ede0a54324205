#include <doctest.h>

#include "aios/decoder.hpp"
#include "aios/network.hpp"
#include "aios/rng.hpp"
#include "aios/selfcheck.hpp"

#include <numeric>

using namespace aios;

namespace {

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

Mat random_image(std::uint64_t seed) {
  Rng rng(seed);
  Mat img(64 * 64, 3);
  for (Eigen::Index i = 0; i < img.size(); ++i) img.data()[i] = rng.uniform();
  return img;
}

// Feature pipeline plus a decoder context over its tokens.
struct Fixture {
  ModelConfig config = small_config();
  ad::ParamStore store;
  ad::Tape tape{false};
  EncoderOutput enc;
  DecoderContext ctx;

  explicit Fixture(std::uint64_t seed = 1) {
    Rng rng(seed);
    init_feature_params(store, config, rng);
    init_decoder_params(store, config, rng);
    enc = run_feature_pipeline(tape, store, config, random_image(seed + 100), 64, 64);
    ctx.tape = &tape;
    ctx.store = &store;
    ctx.config = &config;
    ctx.image = &enc.tokens;
    ctx.memory = enc.tokens.content;
  }
};

}  // namespace

TEST_CASE("decoder: layout sizes and token positions") {
  const ModelConfig c;
  const TokenLayout bl = make_layout(LayoutKind::kBodyLocation, c);
  const TokenLayout bd = make_layout(LayoutKind::kBodyDetail, c);
  const TokenLayout wb = make_layout(LayoutKind::kWholeBody, c);
  const TokenLayout nv = make_layout(LayoutKind::kNaiveFull, c);
  CHECK(bl.size() == 1);
  CHECK(bd.size() == 21);
  CHECK(wb.size() == 1 + 17 + 3 + 5 + 5 + 6);
  CHECK(nv.size() == 4);
  CHECK(bd.location_of(Part::kBody) == 0);
  CHECK(bd.joints_of(Part::kBody).size() == 17);
  CHECK(bd.location_of(Part::kLHand) == 18);
  CHECK(bd.joints_of(Part::kLHand).empty());
  CHECK(wb.location_of(Part::kLHand) == 18);
  CHECK(wb.joints_of(Part::kLHand) == std::vector<int>{19, 20, 21, 22, 23});
  CHECK(wb.location_of(Part::kFace) == 30);
  CHECK(wb.joints_of(Part::kFace).size() == 6);
  CHECK(nv.joints_of(Part::kBody).empty());
}

TEST_CASE("decoder: attention mask follows the visibility rule") {
  const ModelConfig c;
  const TokenLayout wb = make_layout(LayoutKind::kWholeBody, c);
  const int t = wb.size();
  const auto m = build_attention_mask(wb, 2);
  const int n = 2 * t;
  auto allowed = [&](int i, int j) { return m[static_cast<std::size_t>(i) * n + j] != 0; };
  const int bl = 0, lhl = wb.location_of(Part::kLHand), bj = wb.joints_of(Part::kBody)[3];
  CHECK(allowed(bl, t + bl));         // body location sees other people's body locations
  CHECK(allowed(bl, t + lhl));        // ... and their part locations
  CHECK(!allowed(bl, bj));            // ... but no joint tokens, not even its own
  CHECK(allowed(lhl, bj));            // part location sees its own person
  CHECK(allowed(lhl, t + bl));        // and other body locations
  CHECK(!allowed(lhl, t + lhl));      // but not other part locations
  CHECK(!allowed(bj, t + bl));        // joints stay within their person
  CHECK(allowed(bj, lhl));
  for (int i = 0; i < n; ++i) CHECK(allowed(i, i));
  CHECK(checks::attention_masks(50, 5, 21).passed);
}

TEST_CASE("decoder: supervision level per stage and scheme") {
  CHECK(stage_level(Variant::kFull, Scheme::kS23, 1) == SmplxLevel::kNone);
  CHECK(stage_level(Variant::kFull, Scheme::kS23, 2) == SmplxLevel::kBody);
  CHECK(stage_level(Variant::kFull, Scheme::kS23, 3) == SmplxLevel::kFull);
  CHECK(stage_level(Variant::kFull, Scheme::kS3Only, 1) == SmplxLevel::kNone);
  CHECK(stage_level(Variant::kFull, Scheme::kS3Only, 2) == SmplxLevel::kNone);
  CHECK(stage_level(Variant::kFull, Scheme::kAll, 1) == SmplxLevel::kBody);
  CHECK(stage_level(Variant::kFull, Scheme::kAll, 2) == SmplxLevel::kBody);
  CHECK(stage_level(Variant::kNaive, Scheme::kS23, 2) == SmplxLevel::kFull);
  CHECK_THROWS_AS(stage_level(Variant::kNaive, Scheme::kS23, 3), ConfigError);
}

TEST_CASE("decoder: expansion builds M_b x 21 then M_b x 37 tokens with joint queries") {
  Fixture f;
  PersonTokenSet set = seed_tokens(f.enc.candidates);
  CHECK(set.content.rows() == f.config.num_candidates);
  const int mb = f.config.num_body_candidates;
  std::vector<int> keep(mb);
  std::iota(keep.begin(), keep.end(), 0);
  set = keep_candidates(set, keep);
  const PersonTokenSet s2 = expand_tokens(f.ctx, set, LayoutKind::kBodyDetail);
  CHECK(s2.content.rows() == mb * 21);
  CHECK(s2.queries.rows() == mb * 21);
  CHECK(s2.num_candidates == mb);
  const Mat& q2 = s2.queries.value();
  for (int c = 0; c < mb; ++c) {
    const Eigen::RowVector4d box = set.queries.value().row(c);
    CHECK(q2.row(c * 21) == box);
    CHECK(q2.row(c * 21 + 18) == box);  // new part location starts at the body box
    const double s = std::min(box(2), box(3)) / 4;
    const Eigen::RowVector4d jq(box(0), box(1), s, s);
    CHECK(q2.row(c * 21 + 1) == jq);
    // New tokens differ from their source by a learned embedding.
    CHECK(s2.content.value().row(c * 21 + 1) != s2.content.value().row(c * 21));
  }
  const PersonTokenSet s3 = expand_tokens(f.ctx, s2, LayoutKind::kWholeBody);
  CHECK(s3.content.rows() == mb * 37);
  const TokenLayout wb = make_layout(LayoutKind::kWholeBody, f.config);
  // Existing tokens are carried over unchanged; hand joints start at the hand box.
  for (int c = 0; c < mb; ++c) {
    CHECK(s3.content.value().row(c * 37 + 5) == s2.content.value().row(c * 21 + 5));
    const Eigen::RowVector4d hand = q2.row(c * 21 + 18);
    const int j = wb.joints_of(Part::kLHand)[0];
    CHECK(s3.queries.value()(c * 37 + j, 0) == hand(0));
    CHECK(s3.queries.value()(c * 37 + j, 2) == std::min(hand(2), hand(3)) / 4);
  }
  CHECK_THROWS_AS(expand_tokens(f.ctx, set, LayoutKind::kWholeBody), StateError);
  CHECK_THROWS_AS(expand_tokens(f.ctx, s3, LayoutKind::kWholeBody), StateError);
}

TEST_CASE("decoder: zero-initialized refinement leaves queries unchanged") {
  Fixture f;
  PersonTokenSet set = seed_tokens(f.enc.candidates);
  set = expand_tokens(f.ctx, keep_candidates(set, {0, 1, 2}), LayoutKind::kBodyDetail);
  const Mat before = set.queries.value();
  const Mat content = set.content.value();
  const auto pattern = mask_to_pattern(build_attention_mask(set.layout, 3), set.layout.size() * 3);
  decoder_layer(f.ctx, 2, 0, set, &pattern);
  CHECK(set.queries.value() == before);
  CHECK(set.content.value() != content);
}

TEST_CASE("decoder: network outputs are bounded and shaped per stage") {
  const ModelConfig c = small_config();
  const SceneConfig sc;
  for (Variant v : {Variant::kFull, Variant::kNaive}) {
    ModelConfig mc = c;
    mc.variant = v;
    AiosNet net(mc, sc);
    ad::Tape t(false);
    const ForwardResult r = net.forward(t, random_image(3), Scheme::kAll);
    REQUIRE(static_cast<int>(r.stages.size()) == 1 + num_decoder_stages(v));
    for (std::size_t s = 1; s < r.stages.size(); ++s) {
      const StageOutput& o = r.stages[s];
      for (int p = 0; p < kNumParts; ++p) {
        if (o.boxes[p].valid()) {
          CHECK(o.boxes[p].value().minCoeff() > 0.0);
          CHECK(o.boxes[p].value().maxCoeff() < 1.0);
        }
        if (o.joints[p].valid()) {
          CHECK(o.joints[p].value().minCoeff() > 0.0);
          CHECK(o.joints[p].value().maxCoeff() < 1.0);
        }
      }
      CHECK(o.params.valid());
      CHECK(o.params.cols() == body::kNumParams);
      CHECK(o.translation.value().col(2).minCoeff() > 0.0);
    }
    const StageOutput& last = r.final_stage();
    CHECK(last.joints[0].cols() == 34);
    CHECK(last.joints[3].cols() == 12);
    CHECK(last.num_candidates == mc.num_body_candidates);
  }
}

TEST_CASE("decoder: stage outputs are equivariant to candidate order") {
  Fixture f;
  const PersonTokenSet seeded = seed_tokens(f.enc.candidates);
  const std::vector<int> order = {0, 1, 2, 3, 4};
  const std::vector<int> perm = {3, 0, 4, 2, 1};
  PersonTokenSet a = expand_tokens(f.ctx, keep_candidates(seeded, order), LayoutKind::kBodyDetail);
  PersonTokenSet b = expand_tokens(f.ctx, keep_candidates(seeded, perm), LayoutKind::kBodyDetail);
  const StageOutput oa = run_stage(f.ctx, a, 2, 2, SmplxLevel::kBody);
  const StageOutput ob = run_stage(f.ctx, b, 2, 2, SmplxLevel::kBody);
  double err = 0.0;
  for (int i = 0; i < 5; ++i) {
    const int src = perm[i];
    err = std::max(err, std::abs(ob.scores.value()(i, 0) - oa.scores.value()(src, 0)));
    err = std::max(err, (ob.boxes[0].value().row(i) - oa.boxes[0].value().row(src)).cwiseAbs().maxCoeff());
    err = std::max(err, (ob.joints[0].value().row(i) - oa.joints[0].value().row(src)).cwiseAbs().maxCoeff());
    err = std::max(err, (ob.params.value().row(i) - oa.params.value().row(src)).cwiseAbs().maxCoeff());
  }
  CHECK(err < 1e-10);
}

TEST_CASE("decoder: camera translation places the pelvis at the box center") {
  ad::Tape t(false);
  Mat box(1, 4);
  box << 0.25, 0.6, 0.2, 0.5;
  const double f = 64.0;
  const Vec2 pp(31.5, 31.5);
  const Mat tr = camera_translation(t.constant(box), t.constant(Mat::Zero(1, 3)), f, pp, 64, 64).value();
  CHECK(tr(0, 2) == doctest::Approx(f * 1.7 / (0.5 * 64)).epsilon(1e-12));
  CHECK(f * tr(0, 0) / tr(0, 2) + pp(0) == doctest::Approx(0.25 * 64).epsilon(1e-12));
  CHECK(f * tr(0, 1) / tr(0, 2) + pp(1) == doctest::Approx(0.6 * 64).epsilon(1e-12));
}

TEST_CASE("decoder: whole-network parameter gradients match central differences") {
  const body::BodyModel model = body::make_procedural_model();
  const CheckResult r = checks::network_gradients(model, 10, 1e-3, 31);
  INFO(r.detail);
  CHECK(r.passed);
}
