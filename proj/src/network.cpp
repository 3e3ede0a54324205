#include "aios/network.hpp"

#include "aios/scene.hpp"

namespace aios {

AiosNet::AiosNet(const ModelConfig& model, const SceneConfig& scene) : model_(model), scene_(scene) {
  model_.validate(scene_);
  camera_ = scene_camera(scene_);
  Rng rng(model_.init_seed);
  init_feature_params(store_, model_, rng);
  init_decoder_params(store_, model_, rng);
}

ForwardResult AiosNet::forward(ad::Tape& t, const Mat& image, Scheme scheme) {
  ForwardResult r;
  r.encoder = run_feature_pipeline(t, store_, model_, image, scene_.width, scene_.height);

  StageOutput enc;
  enc.stage = 0;
  enc.num_candidates = static_cast<int>(r.encoder.logits.rows());
  enc.scores = r.encoder.logits;
  enc.boxes[0] = r.encoder.boxes;
  r.stages.push_back(enc);

  DecoderContext ctx;
  ctx.tape = &t;
  ctx.store = &store_;
  ctx.config = &model_;
  ctx.image = &r.encoder.tokens;
  ctx.memory = r.encoder.tokens.content;
  ctx.focal = camera_.focal;
  ctx.principal = camera_.principal;
  ctx.width = scene_.width;
  ctx.height = scene_.height;

  const Variant v = model_.variant;
  PersonTokenSet set = seed_tokens(r.encoder.candidates);
  r.stages.push_back(run_stage(ctx, set, 1, model_.dec_layers_s1, stage_level(v, scheme, 1)));

  // Downsample to the M_b best-scoring candidates.
  const Vec s1 = r.stages.back().scores.value().col(0);
  set = keep_candidates(set, top_k(s1, model_.num_body_candidates));

  if (v == Variant::kFull) {
    set = expand_tokens(ctx, set, LayoutKind::kBodyDetail);
    r.stages.push_back(run_stage(ctx, set, 2, model_.dec_layers_s2, stage_level(v, scheme, 2)));
    set = expand_tokens(ctx, set, LayoutKind::kWholeBody);
    r.stages.push_back(run_stage(ctx, set, 3, model_.dec_layers_s3, stage_level(v, scheme, 3)));
  } else {
    set = expand_tokens(ctx, set, LayoutKind::kNaiveFull);
    r.stages.push_back(run_stage(ctx, set, 2, model_.dec_layers_naive, stage_level(v, scheme, 2)));
  }
  return r;
}

}  // namespace aios
