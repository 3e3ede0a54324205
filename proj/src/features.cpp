#include "aios/features.hpp"

#include "aios/nn.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

namespace aios {

namespace {

constexpr int kNumBlocks = 4;
constexpr int kFirstLevelBlock = 1;  // blocks 1..3 (0-based) feed the pyramid
constexpr double kPriorProb = 0.01;

std::string block_name(int b) { return "feat.conv" + std::to_string(b); }

}  // namespace

void init_feature_params(ad::ParamStore& store, const ModelConfig& config, Rng& rng) {
  int in = 3;
  for (int b = 0; b < kNumBlocks; ++b) {
    const int out = config.channels[b];
    ad::Param& w = store.add(block_name(b) + ".w", 9 * in, out);
    const double sd = std::sqrt(2.0 / (9.0 * in));
    for (Eigen::Index i = 0; i < w.value.size(); ++i) w.value.data()[i] = rng.normal(0.0, sd);
    store.add(block_name(b) + ".b", 1, out).value.setZero();
    in = out;
  }
  const int d = config.hidden_dim;
  for (int l = 0; l < ModelConfig::kNumLevels; ++l) {
    nn::add_linear(store, "feat.proj" + std::to_string(l), config.channels[kFirstLevelBlock + l], d, rng);
    nn::add_layer_norm(store, "feat.proj" + std::to_string(l) + ".norm", d);
  }
  for (int l = 0; l < config.enc_layers; ++l) {
    const std::string p = "enc.l" + std::to_string(l);
    nn::add_layer_norm(store, p + ".norm1", d);
    nn::add_linear(store, p + ".q", d, d, rng);
    nn::add_linear(store, p + ".k", d, d, rng);
    nn::add_linear(store, p + ".v", d, d, rng);
    nn::add_linear(store, p + ".o", d, d, rng);
    nn::add_layer_norm(store, p + ".norm2", d);
    nn::add_linear(store, p + ".ffn1", d, config.ffn_dim, rng);
    nn::add_linear(store, p + ".ffn2", config.ffn_dim, d, rng);
  }
  nn::add_layer_norm(store, "enc.head_norm", d);
  nn::add_linear(store, "enc.cls", d, 1, rng, nn::Init::kXavier, -std::log((1.0 - kPriorProb) / kPriorProb));
  nn::add_mlp(store, "enc.box", d, d, 4, rng, nn::Init::kZero);
}

FeaturePyramid extract_multiscale(ad::Tape& t, ad::ParamStore& store, const ModelConfig& config, const Mat& image,
                                  int width, int height) {
  if (width % 16 != 0 || height % 16 != 0) throw ShapeError("extract_multiscale: image dims must be divisible by 16");
  if (image.rows() != static_cast<Eigen::Index>(width) * height || image.cols() != 3) {
    throw ShapeError("extract_multiscale: image must be (H*W) x 3");
  }
  FeaturePyramid pyr;
  ad::Var x = t.constant(image.array() - 0.5);
  int h = height, w = width, in = 3, stride = 1;
  for (int b = 0; b < kNumBlocks; ++b) {
    ad::ConvShape cs;
    cs.height = h;
    cs.width = w;
    cs.in_channels = in;
    cs.out_channels = config.channels[b];
    cs.stride = 2;
    x = ad::relu(ad::conv2d(x, t.param(store.get(block_name(b) + ".w")), t.param(store.get(block_name(b) + ".b")), cs));
    h = cs.out_height();
    w = cs.out_width();
    in = cs.out_channels;
    stride *= 2;
    if (b >= kFirstLevelBlock) {
      pyr.levels.push_back(x);
      pyr.heights.push_back(h);
      pyr.widths.push_back(w);
      pyr.strides.push_back(stride);
    }
  }
  return pyr;
}

ImageTokens flatten_pyramid(ad::Tape& t, ad::ParamStore& store, const FeaturePyramid& pyramid, int width, int height) {
  ImageTokens tok;
  std::vector<ad::Var> parts;
  int start = 0;
  for (std::size_t l = 0; l < pyramid.levels.size(); ++l) {
    const std::string p = "feat.proj" + std::to_string(l);
    parts.push_back(nn::layer_norm(t, store, p + ".norm", nn::linear(t, store, p, pyramid.levels[l])));
    tok.levels.heights.push_back(pyramid.heights[l]);
    tok.levels.widths.push_back(pyramid.widths[l]);
    tok.levels.starts.push_back(start);
    start += pyramid.heights[l] * pyramid.widths[l];
  }
  tok.content = ad::concat_rows(parts);
  tok.positions.resize(start, 4);
  tok.level_index.resize(start);
  for (std::size_t l = 0; l < pyramid.levels.size(); ++l) {
    const int s = pyramid.strides[l];
    for (int y = 0; y < pyramid.heights[l]; ++y) {
      for (int x = 0; x < pyramid.widths[l]; ++x) {
        const int i = tok.levels.starts[l] + y * pyramid.widths[l] + x;
        tok.positions(i, 0) = ((x + 0.5) * s - 0.5) / width;
        tok.positions(i, 1) = ((y + 0.5) * s - 0.5) / height;
        tok.positions(i, 2) = static_cast<double>(s) / width;
        tok.positions(i, 3) = static_cast<double>(s) / height;
        tok.level_index[i] = static_cast<int>(l);
      }
    }
  }
  return tok;
}

std::vector<Mat> unflatten(const Mat& flat, const ad::LevelInfo& levels) {
  if (flat.rows() != levels.total()) throw ShapeError("unflatten: row count does not match the pyramid");
  std::vector<Mat> out;
  for (int l = 0; l < levels.num_levels(); ++l) out.push_back(flat.middleRows(levels.starts[l], levels.heights[l] * levels.widths[l]));
  return out;
}

Mat positional_encoding(const Mat& positions, int dim) {
  if (dim % 8 != 0) throw ShapeError("positional_encoding: dim must be divisible by 8");
  ad::Tape t(false);
  return ad::sine_embed(t.constant(positions), dim / 4).value();
}

ImageTokens encode(ad::Tape& t, ad::ParamStore& store, const ModelConfig& config, const ImageTokens& tokens) {
  ImageTokens out = tokens;
  const ad::Var pos = t.constant(positional_encoding(tokens.positions, config.hidden_dim));
  ad::Var x = tokens.content;
  for (int l = 0; l < config.enc_layers; ++l) {
    const std::string p = "enc.l" + std::to_string(l);
    ad::Var h = nn::layer_norm(t, store, p + ".norm1", x);
    const ad::Var qk = ad::add(h, pos);
    const ad::Var a = ad::attention(nn::linear(t, store, p + ".q", qk), nn::linear(t, store, p + ".k", qk),
                                    nn::linear(t, store, p + ".v", h), config.heads, nullptr);
    x = ad::add(x, nn::linear(t, store, p + ".o", a));
    h = nn::layer_norm(t, store, p + ".norm2", x);
    x = ad::add(x, nn::linear(t, store, p + ".ffn2", ad::relu(nn::linear(t, store, p + ".ffn1", h))));
  }
  out.content = x;
  return out;
}

std::vector<int> top_k(const Vec& values, int k) {
  if (k < 0 || k > values.size()) throw ConfigError("top_k: k must be in [0, n]");
  std::vector<int> idx(static_cast<std::size_t>(values.size()));
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) { return values(a) > values(b); });
  idx.resize(static_cast<std::size_t>(k));
  return idx;
}

EncoderOutput select_candidates(ad::Tape& t, ad::ParamStore& store, const ModelConfig& config,
                                const ImageTokens& encoded) {
  const int m = static_cast<int>(encoded.positions.rows());
  if (config.num_candidates > m) throw ConfigError("select_candidates: M_h exceeds the token count M");
  EncoderOutput out;
  out.tokens = encoded;
  const ad::Var h = nn::layer_norm(t, store, "enc.head_norm", encoded.content);
  out.logits = nn::linear(t, store, "enc.cls", h);
  out.boxes = ad::sigmoid_shift(t.constant(encoded.positions), nn::mlp(t, store, "enc.box", h));
  const Vec logits = out.logits.value().col(0);
  const std::vector<int> keep = top_k(logits, config.num_candidates);
  out.candidates.token_index = keep;
  out.candidates.tokens = ad::gather_rows(encoded.content, keep);
  out.candidates.queries = ad::gather_rows(out.boxes, keep);
  out.candidates.scores.resize(static_cast<Eigen::Index>(keep.size()));
  for (std::size_t i = 0; i < keep.size(); ++i) out.candidates.scores(static_cast<Eigen::Index>(i)) = logits(keep[i]);
  return out;
}

EncoderOutput run_feature_pipeline(ad::Tape& t, ad::ParamStore& store, const ModelConfig& config, const Mat& image,
                                   int width, int height) {
  const FeaturePyramid pyr = extract_multiscale(t, store, config, image, width, height);
  const ImageTokens flat = flatten_pyramid(t, store, pyr, width, height);
  return select_candidates(t, store, config, encode(t, store, config, flat));
}

}  // namespace aios
