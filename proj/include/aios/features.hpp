#pragma once

// Image → multi-scale features → encoded image tokens → top-M_h candidates.

#include "aios/autodiff.hpp"
#include "aios/config.hpp"
#include "aios/rng.hpp"

#include <vector>

namespace aios {

struct FeaturePyramid {
  std::vector<ad::Var> levels;  // (H_l·W_l) × C row-major maps
  std::vector<int> heights;
  std::vector<int> widths;
  std::vector<int> strides;
};

struct ImageTokens {
  ad::Var content;               // M × D
  Mat positions;                 // M × 4 normalized (cx, cy, w, h) anchors
  std::vector<int> level_index;  // per token
  ad::LevelInfo levels;
};

struct CandidateSet {
  ad::Var tokens;                // M_h × D
  ad::Var queries;               // M_h × 4 sigmoid-bounded boxes
  Vec scores;                    // M_h logits, non-increasing
  std::vector<int> token_index;  // flat encoder index of each candidate
};

// Encoder-head outputs for every token, supervised as proposals.
struct EncoderOutput {
  ImageTokens tokens;
  ad::Var logits;  // M × 1
  ad::Var boxes;   // M × 4
  CandidateSet candidates;
};

// Parameters of the backbone, input projections, encoder and proposal heads.
void init_feature_params(ad::ParamStore& store, const ModelConfig& config, Rng& rng);

// Four stride-2 conv blocks; levels are the outputs of blocks 2, 3, 4 (strides 4, 8, 16).
FeaturePyramid extract_multiscale(ad::Tape& t, ad::ParamStore& store, const ModelConfig& config, const Mat& image,
                                  int width, int height);

// Projects each level to D channels and concatenates levels in order.
ImageTokens flatten_pyramid(ad::Tape& t, ad::ParamStore& store, const FeaturePyramid& pyramid, int width, int height);
// Splits a flattened M × C matrix back into per-level maps.
std::vector<Mat> unflatten(const Mat& flat, const ad::LevelInfo& levels);

// Sinusoidal encoding of the (cx, cy, w, h) anchors, D columns.
Mat positional_encoding(const Mat& positions, int dim);

// N_enc pre-norm layers of dense self-attention and feed-forward.
ImageTokens encode(ad::Tape& t, ad::ParamStore& store, const ModelConfig& config, const ImageTokens& tokens);

// Indices of the k largest values, ordered by value descending, ties to the lower index.
std::vector<int> top_k(const Vec& values, int k);

EncoderOutput select_candidates(ad::Tape& t, ad::ParamStore& store, const ModelConfig& config,
                                const ImageTokens& encoded);

// extract_multiscale → flatten → encode → select_candidates.
EncoderOutput run_feature_pipeline(ad::Tape& t, ad::ParamStore& store, const ModelConfig& config, const Mat& image,
                                   int width, int height);

}  // namespace aios
