#pragma once

// Progressive decoder: body-location stage, body-refinement stage with body
// joint tokens, whole-body stage with hand/face joint tokens, and the naive
// whole-body stage that works from location tokens only.
//
// Tokens of one candidate are stored contiguously (candidate-major), so row
// c·T + t holds token t of candidate c for a layout of T tokens.

#include "aios/autodiff.hpp"
#include "aios/config.hpp"
#include "aios/features.hpp"
#include "aios/losses.hpp"

#include <array>
#include <cstdint>
#include <vector>

namespace aios {

enum class LayoutKind { kBodyLocation, kBodyDetail, kWholeBody, kNaiveFull };
enum class TokenKind : std::uint8_t { kBodyLoc, kPartLoc, kJoint };

struct TokenSpec {
  TokenKind kind = TokenKind::kBodyLoc;
  Part part = Part::kBody;
  int joint = -1;  // index within the part's joint tokens
};

struct TokenLayout {
  LayoutKind kind = LayoutKind::kBodyLocation;
  std::vector<TokenSpec> tokens;

  int size() const { return static_cast<int>(tokens.size()); }
  // Position of the location token of a part, or -1.
  int location_of(Part part) const;
  // Positions of a part's joint tokens, in joint order.
  std::vector<int> joints_of(Part part) const;
};

// [bl], [bl, bj×17, lhl, rhl, fl], [bl, bj×17, lhl, lhj, rhl, rhj, fl, fj], [bl, lhl, rhl, fl].
TokenLayout make_layout(LayoutKind kind, const ModelConfig& config);

// Dense candidate-major mask, TRUE = attention allowed; entry (i, j) at i·N + j.
std::vector<std::uint8_t> build_attention_mask(const TokenLayout& layout, int num_candidates);
ad::SparsePattern mask_to_pattern(const std::vector<std::uint8_t>& mask, int n);

struct PersonTokenSet {
  int stage = 1;
  TokenLayout layout;
  int num_candidates = 0;
  ad::Var content;               // (C·T) × D
  ad::Var queries;               // (C·T) × 4: boxes for location tokens, (x, y, s, s) for joint tokens
  std::vector<int> token_index;  // encoder token of each candidate
};

struct StageOutput {
  int stage = 0;                      // 0 = encoder proposals
  SmplxLevel level = SmplxLevel::kNone;
  int num_candidates = 0;
  ad::Var scores;                     // C × 1 logits
  std::array<ad::Var, kNumParts> boxes{};   // C × 4, unset when the stage has no such token
  std::array<ad::Var, kNumParts> joints{};  // C × 2J normalized (x0, y0, x1, y1, ...)
  ad::Var params;                     // C × 179 ParamSet vectors (set when level != kNone)
  ad::Var translation;                // C × 3 camera-frame translation (set when level != kNone)
  std::vector<int> token_index;
};

// SMPL-X supervision level of a decoder stage (1-based) under a scheme.
SmplxLevel stage_level(Variant variant, Scheme scheme, int stage);
int num_decoder_stages(Variant variant);

struct DecoderContext {
  ad::Tape* tape = nullptr;
  ad::ParamStore* store = nullptr;
  const ModelConfig* config = nullptr;
  const ImageTokens* image = nullptr;
  ad::Var memory;  // image token content
  double focal = 64.0;
  Vec2 principal = Vec2(31.5, 31.5);
  int width = 64;
  int height = 64;
};

void init_decoder_params(ad::ParamStore& store, const ModelConfig& config, Rng& rng);

// Multi-head deformable cross-attention of tokens around their queries.
ad::Var deformable_cross_attend(const DecoderContext& ctx, const std::string& prefix, ad::Var tokens, ad::Var pos,
                                ad::Var queries);

// One masked decoder layer (self-attention, deformable cross-attention,
// feed-forward) followed by query refinement in inverse-sigmoid space.
void decoder_layer(const DecoderContext& ctx, int stage, int layer, PersonTokenSet& set, const ad::SparsePattern* mask);

// Seeds the stage-1 token set from encoder candidates.
PersonTokenSet seed_tokens(const CandidateSet& candidates);
// Keeps a subset of candidates (whole token blocks) in the given order.
PersonTokenSet keep_candidates(const PersonTokenSet& set, const std::vector<int>& keep);
// Expands a token set to the next layout; throws StateError on a wrong stage order.
PersonTokenSet expand_tokens(const DecoderContext& ctx, const PersonTokenSet& set, LayoutKind target);

// Runs the layers of a stage and its heads.
StageOutput run_stage(const DecoderContext& ctx, PersonTokenSet& set, int stage, int layers, SmplxLevel level);

// Camera translation from the body box and a (c0, c1, c2) head output:
// tz = z_ref·exp(c2) with z_ref from the box height; (tx, ty) place the pelvis at
// sigmoid(logit(box center) + (c0, c1)).
ad::Var camera_translation(ad::Var body_box, ad::Var cam, double focal, const Vec2& principal, int width, int height);

// Output row i copies query row src[i]; when as_joint[i] it becomes the joint
// query (cx, cy, s, s) with s = min(w, h)/4 of that box.
ad::Var expand_queries(ad::Var q, const std::vector<int>& src, const std::vector<std::uint8_t>& as_joint);

}  // namespace aios
