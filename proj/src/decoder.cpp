#include "aios/decoder.hpp"

#include "aios/body_model.hpp"
#include "aios/nn.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

namespace aios {

namespace {

constexpr double kPriorProb = 0.01;
constexpr double kRefHeight = 1.7;    // meters; depth prior from the body box height
constexpr int kBodyHeadOut = body::kNumBodyJoints * 3 + body::kNumShape + 3;  // pose, beta, camera
constexpr int kHandHeadOut = body::kNumHandJoints * 3;
constexpr int kFaceHeadOut = 3 + body::kNumExpr;  // jaw, psi

// Rows of the embedding table: zero row, body joints, part locations, hand and face joints.
constexpr int kEmbedZero = 0;
constexpr int kEmbedBodyJoint = 1;
constexpr int kEmbedPart = kEmbedBodyJoint + ModelConfig::kBodyJointTokens;

std::string stage_prefix(int stage) { return "dec.s" + std::to_string(stage); }
std::string layer_prefix(int stage, int layer) { return stage_prefix(stage) + ".l" + std::to_string(layer); }

int part_joint_count(const ModelConfig& c, Part p) {
  switch (p) {
    case Part::kBody:
      return ModelConfig::kBodyJointTokens;
    case Part::kLHand:
      return c.lhand_joints;
    case Part::kRHand:
      return c.rhand_joints;
    case Part::kFace:
      return c.face_joints;
  }
  return 0;
}

int embed_joint_start(const ModelConfig& c, Part p) {
  int start = kEmbedPart + 3;
  if (p == Part::kBody) return kEmbedBodyJoint;
  if (p == Part::kLHand) return start;
  start += c.lhand_joints;
  if (p == Part::kRHand) return start;
  return start + c.rhand_joints;
}

std::vector<int> rows_at(const TokenLayout& layout, int num_candidates, int position) {
  std::vector<int> rows(static_cast<std::size_t>(num_candidates));
  for (int c = 0; c < num_candidates; ++c) rows[c] = c * layout.size() + position;
  return rows;
}

std::vector<int> rows_at(const TokenLayout& layout, int num_candidates, const std::vector<int>& positions) {
  std::vector<int> rows;
  rows.reserve(positions.size() * num_candidates);
  for (int c = 0; c < num_candidates; ++c) {
    for (int p : positions) rows.push_back(c * layout.size() + p);
  }
  return rows;
}

ad::Var query_pos(const DecoderContext& ctx, ad::Var queries) {
  return nn::mlp(*ctx.tape, *ctx.store, "dec.ref", ad::sine_embed(queries, ctx.config->hidden_dim / 4));
}

}  // namespace

// ------------------------------------------------------------------ layouts

int TokenLayout::location_of(Part part) const {
  for (int i = 0; i < size(); ++i) {
    if (tokens[i].kind != TokenKind::kJoint && tokens[i].part == part) return i;
  }
  return -1;
}

std::vector<int> TokenLayout::joints_of(Part part) const {
  std::vector<int> out;
  for (int i = 0; i < size(); ++i) {
    if (tokens[i].kind == TokenKind::kJoint && tokens[i].part == part) out.push_back(i);
  }
  return out;
}

TokenLayout make_layout(LayoutKind kind, const ModelConfig& config) {
  TokenLayout l;
  l.kind = kind;
  auto loc = [&](Part p) { l.tokens.push_back({p == Part::kBody ? TokenKind::kBodyLoc : TokenKind::kPartLoc, p, -1}); };
  auto joints = [&](Part p) {
    for (int j = 0; j < part_joint_count(config, p); ++j) l.tokens.push_back({TokenKind::kJoint, p, j});
  };
  loc(Part::kBody);
  switch (kind) {
    case LayoutKind::kBodyLocation:
      break;
    case LayoutKind::kBodyDetail:
      joints(Part::kBody);
      loc(Part::kLHand);
      loc(Part::kRHand);
      loc(Part::kFace);
      break;
    case LayoutKind::kWholeBody:
      joints(Part::kBody);
      for (Part p : {Part::kLHand, Part::kRHand, Part::kFace}) {
        loc(p);
        joints(p);
      }
      break;
    case LayoutKind::kNaiveFull:
      loc(Part::kLHand);
      loc(Part::kRHand);
      loc(Part::kFace);
      break;
  }
  return l;
}

std::vector<std::uint8_t> build_attention_mask(const TokenLayout& layout, int num_candidates) {
  const int t = layout.size();
  const int n = t * num_candidates;
  std::vector<std::uint8_t> mask(static_cast<std::size_t>(n) * n, 0);
  for (int i = 0; i < n; ++i) {
    const TokenKind ki = layout.tokens[i % t].kind;
    for (int j = 0; j < n; ++j) {
      const TokenKind kj = layout.tokens[j % t].kind;
      const bool same = i / t == j / t;
      bool ok = i == j;
      switch (ki) {
        case TokenKind::kBodyLoc:
          ok = ok || kj != TokenKind::kJoint;
          break;
        case TokenKind::kPartLoc:
          ok = ok || same || kj == TokenKind::kBodyLoc;
          break;
        case TokenKind::kJoint:
          ok = ok || same;
          break;
      }
      mask[static_cast<std::size_t>(i) * n + j] = ok ? 1 : 0;
    }
  }
  return mask;
}

ad::SparsePattern mask_to_pattern(const std::vector<std::uint8_t>& mask, int n) {
  if (mask.size() != static_cast<std::size_t>(n) * n) throw ShapeError("mask_to_pattern: mask is not n x n");
  ad::SparsePattern p;
  p.row_ptr.reserve(static_cast<std::size_t>(n) + 1);
  p.row_ptr.push_back(0);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) {
      if (mask[static_cast<std::size_t>(i) * n + j]) p.cols.push_back(j);
    }
    p.row_ptr.push_back(static_cast<int>(p.cols.size()));
  }
  return p;
}

SmplxLevel stage_level(Variant variant, Scheme scheme, int stage) {
  const int last = num_decoder_stages(variant);
  if (stage < 1 || stage > last) throw ConfigError("stage_level: stage out of range");
  if (stage == last) return SmplxLevel::kFull;
  if (stage == 1) return scheme == Scheme::kAll ? SmplxLevel::kBody : SmplxLevel::kNone;
  // Full variant, stage 2.
  return scheme == Scheme::kS3Only ? SmplxLevel::kNone : SmplxLevel::kBody;
}

int num_decoder_stages(Variant variant) { return variant == Variant::kFull ? 3 : 2; }

// ------------------------------------------------------------- parameters

namespace {

void add_layer_params(ad::ParamStore& store, const ModelConfig& c, const std::string& p, bool joints, Rng& rng) {
  const int d = c.hidden_dim;
  const int samples = c.heads * ModelConfig::kNumLevels * c.points;
  nn::add_layer_norm(store, p + ".norm1", d);
  nn::add_linear(store, p + ".q", d, d, rng);
  nn::add_linear(store, p + ".k", d, d, rng);
  nn::add_linear(store, p + ".v", d, d, rng);
  nn::add_linear(store, p + ".o", d, d, rng);
  nn::add_layer_norm(store, p + ".norm2", d);
  nn::add_linear(store, p + ".off", d, samples * 2, rng, nn::Init::kZero);
  // Offsets start on rays, one direction per head, spreading with the point index.
  ad::Param& ob = store.get(p + ".off.b");
  for (int h = 0; h < c.heads; ++h) {
    const double a = 2.0 * std::numbers::pi * h / c.heads;
    const double dx = std::cos(a), dy = std::sin(a);
    const double m = std::max(std::abs(dx), std::abs(dy));
    for (int l = 0; l < ModelConfig::kNumLevels; ++l) {
      for (int s = 0; s < c.points; ++s) {
        const int k = ((h * ModelConfig::kNumLevels + l) * c.points + s) * 2;
        ob.value(0, k) = dx / m * (s + 1);
        ob.value(0, k + 1) = dy / m * (s + 1);
      }
    }
  }
  nn::add_linear(store, p + ".aw", d, samples, rng, nn::Init::kZero);
  nn::add_linear(store, p + ".val", d, d, rng);
  nn::add_linear(store, p + ".out", d, d, rng);
  nn::add_layer_norm(store, p + ".norm3", d);
  nn::add_linear(store, p + ".ffn1", d, c.ffn_dim, rng);
  nn::add_linear(store, p + ".ffn2", c.ffn_dim, d, rng);
  nn::add_mlp(store, p + ".box", d, d, 4, rng, nn::Init::kZero);
  if (joints) nn::add_mlp(store, p + ".joint", d, d, 2, rng, nn::Init::kZero);
}

void add_stage_heads(ad::ParamStore& store, const ModelConfig& c, int stage, bool hands_face, bool naive_joints,
                     Rng& rng) {
  const int d = c.hidden_dim;
  const std::string p = stage_prefix(stage);
  nn::add_layer_norm(store, p + ".norm", d);
  nn::add_linear(store, p + ".cls", d, 1, rng, nn::Init::kXavier, -std::log((1.0 - kPriorProb) / kPriorProb));
  nn::add_mlp(store, p + ".smplx.body", 2 * d, d, kBodyHeadOut, rng, nn::Init::kSmall);
  if (hands_face) {
    nn::add_mlp(store, p + ".smplx.lhand", 2 * d, d, kHandHeadOut, rng, nn::Init::kSmall);
    nn::add_mlp(store, p + ".smplx.rhand", 2 * d, d, kHandHeadOut, rng, nn::Init::kSmall);
    nn::add_mlp(store, p + ".smplx.face", 2 * d, d, kFaceHeadOut, rng, nn::Init::kSmall);
  }
  if (naive_joints) {
    for (int k = 0; k < kNumParts; ++k) {
      const Part part = static_cast<Part>(k);
      nn::add_mlp(store, p + ".njoint." + part_name(k), d, d, 2 * part_joint_count(c, part), rng, nn::Init::kZero);
    }
  }
}

}  // namespace

void init_decoder_params(ad::ParamStore& store, const ModelConfig& c, Rng& rng) {
  const int d = c.hidden_dim;
  nn::add_mlp(store, "dec.ref", d, d, d, rng);
  auto embed = [&](const std::string& name, int rows) {
    ad::Param& e = store.add(name, rows, d);
    for (Eigen::Index i = 0; i < e.value.size(); ++i) e.value.data()[i] = rng.normal(0.0, 0.5);
  };
  embed("dec.embed.bj", ModelConfig::kBodyJointTokens);
  embed("dec.embed.part", 3);
  embed("dec.embed.lhj", c.lhand_joints);
  embed("dec.embed.rhj", c.rhand_joints);
  embed("dec.embed.fj", c.face_joints);

  for (int l = 0; l < c.dec_layers_s1; ++l) add_layer_params(store, c, layer_prefix(1, l), false, rng);
  add_stage_heads(store, c, 1, false, false, rng);
  if (c.variant == Variant::kFull) {
    for (int l = 0; l < c.dec_layers_s2; ++l) add_layer_params(store, c, layer_prefix(2, l), true, rng);
    add_stage_heads(store, c, 2, false, false, rng);
    for (int l = 0; l < c.dec_layers_s3; ++l) add_layer_params(store, c, layer_prefix(3, l), true, rng);
    add_stage_heads(store, c, 3, true, false, rng);
  } else {
    for (int l = 0; l < c.dec_layers_naive; ++l) add_layer_params(store, c, layer_prefix(2, l), false, rng);
    add_stage_heads(store, c, 2, true, true, rng);
  }
}

// ------------------------------------------------------------- custom ops

ad::Var camera_translation(ad::Var body_box, ad::Var cam, double focal, const Vec2& principal, int width, int height) {
  ad::Tape& t = *body_box.tape;
  if (body_box.cols() != 4 || cam.cols() != 3 || body_box.rows() != cam.rows()) throw ShapeError("camera_translation: shapes");
  const Mat& b = body_box.value();
  const Mat& c = cam.value();
  Mat out(b.rows(), 3);
  for (Eigen::Index i = 0; i < b.rows(); ++i) {
    const double h = std::max(b(i, 3), 1e-6);
    const double z = focal * kRefHeight / (h * height) * std::exp(c(i, 2));
    const double ex = b(i, 0) * std::exp(c(i, 0)), ey = b(i, 1) * std::exp(c(i, 1));
    const double px = ex / (ex + 1.0 - b(i, 0)), py = ey / (ey + 1.0 - b(i, 1));
    out(i, 0) = (px * width - principal.x()) * z / focal;
    out(i, 1) = (py * height - principal.y()) * z / focal;
    out(i, 2) = z;
  }
  return t.record(std::move(out), {body_box, cam},
                  [bid = body_box.id, cid = cam.id, focal, principal, width, height](ad::Tape& t, int self) {
                    const Mat& b = t.value(bid);
                    const Mat& c = t.value(cid);
                    const Mat& g = t.grad(self);
                    const bool gb = t.needs_grad(bid), gc = t.needs_grad(cid);
                    for (Eigen::Index i = 0; i < b.rows(); ++i) {
                      const double h = std::max(b(i, 3), 1e-6);
                      const double z = focal * kRefHeight / (h * height) * std::exp(c(i, 2));
                      const double ex = b(i, 0) * std::exp(c(i, 0)), ey = b(i, 1) * std::exp(c(i, 1));
                      const double px = ex / (ex + 1.0 - b(i, 0)), py = ey / (ey + 1.0 - b(i, 1));
                      const double gz = g(i, 2) + g(i, 0) * (px * width - principal.x()) / focal +
                                        g(i, 1) * (py * height - principal.y()) / focal;
                      const double gpx = g(i, 0) * width * z / focal;
                      const double gpy = g(i, 1) * height * z / focal;
                      const double sx = px * (1.0 - px), sy = py * (1.0 - py);
                      if (gc) {
                        Mat& ac = t.grad_acc(cid);
                        ac(i, 0) += gpx * sx;
                        ac(i, 1) += gpy * sy;
                        ac(i, 2) += gz * z;
                      }
                      if (gb) {
                        Mat& ab = t.grad_acc(bid);
                        const double qx = b(i, 0) * (1.0 - b(i, 0)), qy = b(i, 1) * (1.0 - b(i, 1));
                        if (qx > 1e-12) ab(i, 0) += gpx * sx / qx;
                        if (qy > 1e-12) ab(i, 1) += gpy * sy / qy;
                        if (b(i, 3) > 1e-6) ab(i, 3) -= gz * z / h;
                      }
                    }
                  });
}

ad::Var expand_queries(ad::Var q, const std::vector<int>& src, const std::vector<std::uint8_t>& as_joint) {
  ad::Tape& t = *q.tape;
  if (q.cols() != 4 || src.size() != as_joint.size()) throw ShapeError("expand_queries: shapes");
  const Mat& v = q.value();
  Mat out(static_cast<Eigen::Index>(src.size()), 4);
  for (std::size_t i = 0; i < src.size(); ++i) {
    if (src[i] < 0 || src[i] >= v.rows()) throw ShapeError("expand_queries: source out of range");
    const auto r = static_cast<Eigen::Index>(i);
    out.row(r) = v.row(src[i]);
    if (as_joint[i]) {
      const double s = std::min(v(src[i], 2), v(src[i], 3)) / 4.0;
      out(r, 2) = s;
      out(r, 3) = s;
    }
  }
  return t.record(std::move(out), {q}, [qid = q.id, src, as_joint](ad::Tape& t, int self) {
    const Mat& v = t.value(qid);
    const Mat& g = t.grad(self);
    Mat& acc = t.grad_acc(qid);
    for (std::size_t i = 0; i < src.size(); ++i) {
      const auto r = static_cast<Eigen::Index>(i);
      if (!as_joint[i]) {
        acc.row(src[i]) += g.row(r);
        continue;
      }
      acc(src[i], 0) += g(r, 0);
      acc(src[i], 1) += g(r, 1);
      const double gs = (g(r, 2) + g(r, 3)) / 4.0;
      if (v(src[i], 2) <= v(src[i], 3)) {
        acc(src[i], 2) += gs;
      } else {
        acc(src[i], 3) += gs;
      }
    }
  });
}

// ------------------------------------------------------------- layers

ad::Var deformable_cross_attend(const DecoderContext& ctx, const std::string& prefix, ad::Var tokens, ad::Var pos,
                                ad::Var queries) {
  ad::Tape& t = *ctx.tape;
  ad::ParamStore& s = *ctx.store;
  const ModelConfig& c = *ctx.config;
  const ad::Var qc = ad::add(tokens, pos);
  const ad::Var off = nn::linear(t, s, prefix + ".off", qc);
  const ad::Var aw = ad::grouped_softmax(nn::linear(t, s, prefix + ".aw", qc), ModelConfig::kNumLevels * c.points);
  const ad::Var loc = ad::sampling_locations(queries, off, c.points);
  const ad::Var value = nn::linear(t, s, prefix + ".val", ctx.memory);
  const ad::Var sampled = ad::deform_sample(value, loc, aw, ctx.image->levels, c.heads, c.points);
  return nn::linear(t, s, prefix + ".out", sampled);
}

void decoder_layer(const DecoderContext& ctx, int stage, int layer, PersonTokenSet& set, const ad::SparsePattern* mask) {
  ad::Tape& t = *ctx.tape;
  ad::ParamStore& s = *ctx.store;
  const ModelConfig& c = *ctx.config;
  const std::string p = layer_prefix(stage, layer);

  const ad::Var pos = query_pos(ctx, set.queries);
  ad::Var x = set.content;
  ad::Var h = nn::layer_norm(t, s, p + ".norm1", x);
  const ad::Var qk = ad::add(h, pos);
  const ad::Var a = ad::attention(nn::linear(t, s, p + ".q", qk), nn::linear(t, s, p + ".k", qk),
                                  nn::linear(t, s, p + ".v", h), c.heads, mask);
  x = ad::add(x, nn::linear(t, s, p + ".o", a));
  h = nn::layer_norm(t, s, p + ".norm2", x);
  x = ad::add(x, deformable_cross_attend(ctx, p, h, pos, set.queries));
  h = nn::layer_norm(t, s, p + ".norm3", x);
  x = ad::add(x, nn::linear(t, s, p + ".ffn2", ad::relu(nn::linear(t, s, p + ".ffn1", h))));
  set.content = x;

  // Query refinement: location tokens shift (cx, cy, w, h), joint tokens shift (x, y).
  const ad::Var hn = nn::layer_norm(t, s, stage_prefix(stage) + ".norm", x);
  const int n = set.layout.size() * set.num_candidates;
  std::vector<int> loc_rows, joint_rows;
  for (int i = 0; i < n; ++i) {
    (set.layout.tokens[i % set.layout.size()].kind == TokenKind::kJoint ? joint_rows : loc_rows).push_back(i);
  }
  const ad::Var dbox = nn::mlp(t, s, p + ".box", ad::gather_rows(hn, loc_rows));
  ad::Var delta = dbox;
  if (!joint_rows.empty()) {
    const ad::Var dj = nn::mlp(t, s, p + ".joint", ad::gather_rows(hn, joint_rows));
    const ad::Var padded[] = {dj, t.constant(Mat::Zero(dj.rows(), 2))};
    const ad::Var stacked[] = {dbox, ad::concat_cols(padded)};
    std::vector<int> order(static_cast<std::size_t>(n));
    for (std::size_t k = 0; k < loc_rows.size(); ++k) order[loc_rows[k]] = static_cast<int>(k);
    for (std::size_t k = 0; k < joint_rows.size(); ++k) order[joint_rows[k]] = static_cast<int>(loc_rows.size() + k);
    delta = ad::gather_rows(ad::concat_rows(stacked), order);
  }
  set.queries = ad::sigmoid_shift(set.queries, delta);
}

// ------------------------------------------------------------- token sets

PersonTokenSet seed_tokens(const CandidateSet& candidates) {
  PersonTokenSet set;
  set.stage = 1;
  set.layout.kind = LayoutKind::kBodyLocation;
  set.layout.tokens = {TokenSpec{}};
  set.num_candidates = static_cast<int>(candidates.tokens.rows());
  set.content = candidates.tokens;
  set.queries = candidates.queries;
  set.token_index = candidates.token_index;
  return set;
}

PersonTokenSet keep_candidates(const PersonTokenSet& set, const std::vector<int>& keep) {
  PersonTokenSet out = set;
  const int t = set.layout.size();
  std::vector<int> rows;
  out.token_index.clear();
  for (int c : keep) {
    if (c < 0 || c >= set.num_candidates) throw ShapeError("keep_candidates: index out of range");
    for (int k = 0; k < t; ++k) rows.push_back(c * t + k);
    out.token_index.push_back(set.token_index.empty() ? c : set.token_index[c]);
  }
  out.num_candidates = static_cast<int>(keep.size());
  out.content = ad::gather_rows(set.content, rows);
  out.queries = ad::gather_rows(set.queries, rows);
  return out;
}

PersonTokenSet expand_tokens(const DecoderContext& ctx, const PersonTokenSet& set, LayoutKind target) {
  const bool ok = (set.layout.kind == LayoutKind::kBodyLocation &&
                   (target == LayoutKind::kBodyDetail || target == LayoutKind::kNaiveFull)) ||
                  (set.layout.kind == LayoutKind::kBodyDetail && target == LayoutKind::kWholeBody);
  if (!ok) throw StateError("expand_tokens: tokens are not at the stage preceding the target layout");
  ad::Tape& t = *ctx.tape;
  ad::ParamStore& s = *ctx.store;
  const ModelConfig& c = *ctx.config;
  const TokenLayout next = make_layout(target, c);
  const TokenLayout& prev = set.layout;

  // Per target position: source position in the previous layout, embedding row, joint-query flag.
  std::vector<int> src_pos, emb_row;
  std::vector<std::uint8_t> joint_flag;
  for (const TokenSpec& spec : next.tokens) {
    int existing = -1;
    for (int k = 0; k < prev.size(); ++k) {
      const TokenSpec& q = prev.tokens[k];
      if (q.kind == spec.kind && q.part == spec.part && q.joint == spec.joint) existing = k;
    }
    if (existing >= 0) {
      src_pos.push_back(existing);
      emb_row.push_back(kEmbedZero);
      joint_flag.push_back(0);
    } else if (spec.kind == TokenKind::kPartLoc) {
      src_pos.push_back(prev.location_of(Part::kBody));
      emb_row.push_back(kEmbedPart + static_cast<int>(spec.part) - 1);
      joint_flag.push_back(0);
    } else {
      // Body joints hang off the body box; hand/face joints off their part box.
      const int parent = prev.location_of(spec.part);
      if (parent < 0) throw StateError("expand_tokens: missing parent location token");
      src_pos.push_back(parent);
      emb_row.push_back(embed_joint_start(c, spec.part) + spec.joint);
      joint_flag.push_back(1);
    }
  }

  const int tn = next.size(), tp = prev.size();
  std::vector<int> src_rows, emb_rows;
  std::vector<std::uint8_t> joint_rows;
  for (int cand = 0; cand < set.num_candidates; ++cand) {
    for (int k = 0; k < tn; ++k) {
      src_rows.push_back(cand * tp + src_pos[k]);
      emb_rows.push_back(emb_row[k]);
      joint_rows.push_back(joint_flag[k]);
    }
  }
  const ad::Var table_parts[] = {t.constant(Mat::Zero(1, c.hidden_dim)), t.param(s.get("dec.embed.bj")),
                                 t.param(s.get("dec.embed.part")),      t.param(s.get("dec.embed.lhj")),
                                 t.param(s.get("dec.embed.rhj")),       t.param(s.get("dec.embed.fj"))};
  const ad::Var table = ad::concat_rows(table_parts);

  PersonTokenSet out;
  out.stage = set.stage + 1;
  out.layout = next;
  out.num_candidates = set.num_candidates;
  out.token_index = set.token_index;
  out.content = ad::add(ad::gather_rows(set.content, src_rows), ad::gather_rows(table, emb_rows));
  out.queries = expand_queries(set.queries, src_rows, joint_rows);
  return out;
}

// ------------------------------------------------------------- stages

StageOutput run_stage(const DecoderContext& ctx, PersonTokenSet& set, int stage, int layers, SmplxLevel level) {
  ad::Tape& t = *ctx.tape;
  ad::ParamStore& s = *ctx.store;
  const ModelConfig& c = *ctx.config;
  const int nc = set.num_candidates;
  const TokenLayout& layout = set.layout;
  set.stage = stage;

  ad::SparsePattern pattern;
  const bool dense = layout.kind == LayoutKind::kBodyLocation;
  if (!dense) pattern = mask_to_pattern(build_attention_mask(layout, nc), layout.size() * nc);
  for (int l = 0; l < layers; ++l) decoder_layer(ctx, stage, l, set, dense ? nullptr : &pattern);

  StageOutput out;
  out.stage = stage;
  out.level = level;
  out.num_candidates = nc;
  out.token_index = set.token_index;
  const std::string p = stage_prefix(stage);
  const ad::Var h = nn::layer_norm(t, s, p + ".norm", set.content);
  const ad::Var xy = ad::slice_cols(set.queries, 0, 2);

  std::array<ad::Var, kNumParts> loc_h{};
  for (int k = 0; k < kNumParts; ++k) {
    const Part part = static_cast<Part>(k);
    const int pos = layout.location_of(part);
    if (pos < 0) continue;
    const std::vector<int> rows = rows_at(layout, nc, pos);
    out.boxes[k] = ad::gather_rows(set.queries, rows);
    loc_h[k] = ad::gather_rows(h, rows);
  }
  out.scores = nn::linear(t, s, p + ".cls", loc_h[0]);

  // 2D joints: joint-token positions, or box-relative regression from location tokens (naive).
  std::array<ad::Var, kNumParts> joint_mean{};
  const bool naive = layout.kind == LayoutKind::kNaiveFull;
  for (int k = 0; k < kNumParts; ++k) {
    const Part part = static_cast<Part>(k);
    const std::vector<int> jpos = layout.joints_of(part);
    const int nj = part_joint_count(c, part);
    if (!jpos.empty()) {
      const std::vector<int> rows = rows_at(layout, nc, jpos);
      out.joints[k] = ad::reshape(ad::gather_rows(xy, rows), nc, 2 * static_cast<Eigen::Index>(jpos.size()));
      joint_mean[k] = ad::block_mean(ad::gather_rows(h, rows), static_cast<int>(jpos.size()));
    } else if (naive) {
      const ad::Var center = ad::slice_cols(out.boxes[k], 0, 2);
      std::vector<ad::Var> reps(static_cast<std::size_t>(nj), center);
      const ad::Var delta = nn::mlp(t, s, p + ".njoint." + part_name(k), loc_h[k]);
      out.joints[k] = ad::sigmoid_shift(ad::concat_cols(reps), delta);
    }
  }

  if (level == SmplxLevel::kNone) return out;
  auto features = [&](int k) {
    const ad::Var mean = joint_mean[k].valid() ? joint_mean[k] : t.constant(Mat::Zero(nc, c.hidden_dim));
    const ad::Var parts[] = {loc_h[k], mean};
    return ad::concat_cols(parts);
  };
  const ad::Var body_out = nn::mlp(t, s, p + ".smplx.body", features(0));
  const ad::Var body_pose = ad::slice_cols(body_out, 0, body::kNumBodyJoints * 3);
  const ad::Var beta = ad::slice_cols(body_out, body::kNumBodyJoints * 3, body::kNumShape);
  const ad::Var cam = ad::slice_cols(body_out, body::kNumBodyJoints * 3 + body::kNumShape, 3);
  ad::Var lhand, rhand, jaw, psi;
  if (level == SmplxLevel::kFull) {
    lhand = nn::mlp(t, s, p + ".smplx.lhand", features(1));
    rhand = nn::mlp(t, s, p + ".smplx.rhand", features(2));
    const ad::Var face = nn::mlp(t, s, p + ".smplx.face", features(3));
    jaw = ad::slice_cols(face, 0, 3);
    psi = ad::slice_cols(face, 3, body::kNumExpr);
  } else {
    lhand = t.constant(Mat::Zero(nc, kHandHeadOut));
    rhand = t.constant(Mat::Zero(nc, kHandHeadOut));
    jaw = t.constant(Mat::Zero(nc, 3));
    psi = t.constant(Mat::Zero(nc, body::kNumExpr));
  }
  const ad::Var pieces[] = {body_pose, lhand, rhand, jaw, beta, psi};
  out.params = ad::concat_cols(pieces);
  out.translation = camera_translation(out.boxes[0], cam, ctx.focal, ctx.principal, ctx.width, ctx.height);
  return out;
}

}  // namespace aios
