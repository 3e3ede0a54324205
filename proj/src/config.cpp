#include "aios/config.hpp"

#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <sstream>

namespace aios {

const char* variant_name(Variant v) { return v == Variant::kFull ? "full" : "naive"; }

const char* scheme_name(Scheme s) {
  switch (s) {
    case Scheme::kS23:
      return "s23";
    case Scheme::kS3Only:
      return "s3only";
    case Scheme::kAll:
      return "all";
  }
  return "s23";
}

Variant parse_variant(const std::string& s) {
  if (s == "full") return Variant::kFull;
  if (s == "naive") return Variant::kNaive;
  throw ConfigError("unknown variant '" + s + "' (expected full|naive)");
}

Scheme parse_scheme(const std::string& s) {
  if (s == "s23") return Scheme::kS23;
  if (s == "s3only") return Scheme::kS3Only;
  if (s == "all") return Scheme::kAll;
  throw ConfigError("unknown scheme '" + s + "' (expected all|s3only|s23)");
}

double threshold_preset(const std::string& name) {
  if (name == "agora-0.5") return 0.5;
  if (name == "agora-0.3") return 0.3;
  throw ConfigError("unknown threshold preset '" + name + "' (expected agora-0.5|agora-0.3)");
}

void ModelConfig::validate(const SceneConfig& scene) const {
  for (int c : channels) {
    if (c <= 0) throw ConfigError("model.channels must be positive");
  }
  if (hidden_dim <= 0 || heads <= 0 || hidden_dim % heads != 0) throw ConfigError("model.hidden_dim must be a positive multiple of model.heads");
  if (ffn_dim <= 0 || enc_layers < 0 || points <= 0) throw ConfigError("model: ffn_dim, points must be > 0 and enc_layers >= 0");
  if (scene.width % 16 != 0 || scene.height % 16 != 0) throw ConfigError("image size must be divisible by the largest stride (16)");
  const int m = (scene.width / 4) * (scene.height / 4) + (scene.width / 8) * (scene.height / 8) + (scene.width / 16) * (scene.height / 16);
  if (num_candidates <= 0 || num_candidates > m) throw ConfigError("model.num_candidates (M_h) must be in [1, M] with M = " + std::to_string(m));
  if (num_body_candidates <= 0 || num_body_candidates > num_candidates) throw ConfigError("model.num_body_candidates (M_b) must be in [1, M_h]");
  if (lhand_joints != 5 || rhand_joints != 5 || face_joints != 6) {
    throw ConfigError("hand/face joint-token counts must equal the keypoint set sizes (5, 5, 6)");
  }
  if (dec_layers_s1 < 1 || dec_layers_s2 < 1 || dec_layers_s3 < 1 || dec_layers_naive < 1) throw ConfigError("decoder stages need >= 1 layer");
  if (body_vertices < 252) throw ConfigError("model.body_vertices must be >= 252");
  if (pose_blend_scale < 0) throw ConfigError("model.pose_blend_scale must be >= 0");
}

void LossConfig::scale_weights(double s) {
  cls *= s;
  box_l1 *= s;
  giou *= s;
  j2d *= s;
  for (double& w : oks) w *= s;
  smplx.param_pose *= s;
  smplx.param_shape *= s;
  smplx.param_expr *= s;
  for (double& w : smplx.kp3d) w *= s;
  for (double& w : smplx.kp2d) w *= s;
}

void RunConfig::validate() const {
  scene.validate();
  model.validate(scene);
  if (train.iterations < 0 || train.batch_size < 1) throw ConfigError("train.iterations >= 0 and train.batch_size >= 1 required");
  if (!(train.lr > 0) || train.lr_drop_at < 0 || train.lr_drop_at > 1 || train.lr_drop_factor <= 0) throw ConfigError("train: bad learning-rate schedule");
  if (eval.threshold < 0 || eval.threshold > 1 || !(eval.match_threshold > 0)) throw ConfigError("eval: threshold in [0,1] and match_threshold > 0 required");
  if (data.num_scenes < 1) throw ConfigError("data.num_scenes must be >= 1");
  if (!(loss.focal_gamma >= 0) || loss.focal_alpha < 0 || loss.focal_alpha > 1 || !(loss.oks_k > 0)) throw ConfigError("loss: bad focal/oks constants");
}

// ------------------------------------------------------------- key table

namespace {

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

double to_double(const std::string& key, const std::string& s) {
  double v = 0;
  const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  if (r.ec != std::errc() || r.ptr != s.data() + s.size() || !std::isfinite(v)) throw ConfigError("config key " + key + ": expected a number, got '" + s + "'");
  return v;
}

long long to_int(const std::string& key, const std::string& s) {
  long long v = 0;
  const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  if (r.ec != std::errc() || r.ptr != s.data() + s.size()) throw ConfigError("config key " + key + ": expected an integer, got '" + s + "'");
  return v;
}

std::uint64_t to_u64(const std::string& key, const std::string& s) {
  std::uint64_t v = 0;
  const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  if (r.ec != std::errc() || r.ptr != s.data() + s.size()) throw ConfigError("config key " + key + ": expected an unsigned integer, got '" + s + "'");
  return v;
}

bool to_bool(const std::string& key, const std::string& s) {
  if (s == "true" || s == "1") return true;
  if (s == "false" || s == "0") return false;
  throw ConfigError("config key " + key + ": expected true|false, got '" + s + "'");
}

struct Entry {
  std::string key;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

#define AIOS_D(name, field) \
  Entry { name, [](const RunConfig& c) { return fmt_double(c.field); }, [](RunConfig& c, const std::string& v) { c.field = to_double(name, v); } }
#define AIOS_I(name, field) \
  Entry { name, [](const RunConfig& c) { return std::to_string(c.field); }, [](RunConfig& c, const std::string& v) { c.field = static_cast<int>(to_int(name, v)); } }
#define AIOS_U(name, field) \
  Entry { name, [](const RunConfig& c) { return std::to_string(c.field); }, [](RunConfig& c, const std::string& v) { c.field = to_u64(name, v); } }
#define AIOS_B(name, field) \
  Entry { name, [](const RunConfig& c) { return std::string(c.field ? "true" : "false"); }, [](RunConfig& c, const std::string& v) { c.field = to_bool(name, v); } }

const std::vector<Entry>& table() {
  static const std::vector<Entry> t = {
      AIOS_I("scene.width", scene.width),
      AIOS_I("scene.height", scene.height),
      AIOS_I("scene.min_persons", scene.min_persons),
      AIOS_I("scene.max_persons", scene.max_persons),
      AIOS_D("scene.depth_min", scene.depth_min),
      AIOS_D("scene.depth_max", scene.depth_max),
      AIOS_D("scene.pose_noise", scene.pose_noise),
      AIOS_D("scene.hand_pose_noise", scene.hand_pose_noise),
      AIOS_D("scene.shape_noise", scene.shape_noise),
      AIOS_D("scene.expr_noise", scene.expr_noise),
      AIOS_B("scene.overlap_bias", scene.overlap_bias),
      AIOS_D("scene.box_pad", scene.box_pad),
      AIOS_D("scene.min_box", scene.min_box),
      AIOS_D("scene.background_noise", scene.background_noise),
      AIOS_D("scene.occluder_radius", scene.occluder_radius),
      AIOS_B("scene.color_jitter", scene.color_jitter),
      AIOS_B("scene.random_resize", scene.random_resize),
      AIOS_B("scene.instance_crop", scene.instance_crop),

      Entry{"model.variant", [](const RunConfig& c) { return std::string(variant_name(c.model.variant)); },
            [](RunConfig& c, const std::string& v) { c.model.variant = parse_variant(v); }},
      Entry{"model.channels",
            [](const RunConfig& c) {
              const auto& ch = c.model.channels;
              return std::to_string(ch[0]) + "," + std::to_string(ch[1]) + "," + std::to_string(ch[2]) + "," + std::to_string(ch[3]);
            },
            [](RunConfig& c, const std::string& v) {
              std::stringstream ss(v);
              std::string item;
              int i = 0;
              while (std::getline(ss, item, ',')) {
                if (i >= 4) throw ConfigError("model.channels: expected 4 comma-separated integers");
                c.model.channels[i++] = static_cast<int>(to_int("model.channels", item));
              }
              if (i != 4) throw ConfigError("model.channels: expected 4 comma-separated integers");
            }},
      AIOS_I("model.hidden_dim", model.hidden_dim),
      AIOS_I("model.heads", model.heads),
      AIOS_I("model.ffn_dim", model.ffn_dim),
      AIOS_I("model.enc_layers", model.enc_layers),
      AIOS_I("model.points", model.points),
      AIOS_I("model.num_candidates", model.num_candidates),
      AIOS_I("model.num_body_candidates", model.num_body_candidates),
      AIOS_I("model.lhand_joints", model.lhand_joints),
      AIOS_I("model.rhand_joints", model.rhand_joints),
      AIOS_I("model.face_joints", model.face_joints),
      AIOS_I("model.dec_layers_s1", model.dec_layers_s1),
      AIOS_I("model.dec_layers_s2", model.dec_layers_s2),
      AIOS_I("model.dec_layers_s3", model.dec_layers_s3),
      AIOS_I("model.dec_layers_naive", model.dec_layers_naive),
      AIOS_U("model.init_seed", model.init_seed),
      AIOS_I("model.body_vertices", model.body_vertices),
      AIOS_D("model.pose_blend_scale", model.pose_blend_scale),
      AIOS_U("model.body_seed", model.body_seed),

      Entry{"loss.scheme", [](const RunConfig& c) { return std::string(scheme_name(c.loss.scheme)); },
            [](RunConfig& c, const std::string& v) { c.loss.scheme = parse_scheme(v); }},
      AIOS_D("loss.cls", loss.cls),
      AIOS_D("loss.box_l1", loss.box_l1),
      AIOS_D("loss.giou", loss.giou),
      AIOS_D("loss.j2d", loss.j2d),
      AIOS_D("loss.oks.body", loss.oks[0]),
      AIOS_D("loss.oks.lhand", loss.oks[1]),
      AIOS_D("loss.oks.rhand", loss.oks[2]),
      AIOS_D("loss.oks.face", loss.oks[3]),
      AIOS_D("loss.param.pose", loss.smplx.param_pose),
      AIOS_D("loss.param.shape", loss.smplx.param_shape),
      AIOS_D("loss.param.expr", loss.smplx.param_expr),
      AIOS_D("loss.kp3d.body", loss.smplx.kp3d[0]),
      AIOS_D("loss.kp3d.lhand", loss.smplx.kp3d[1]),
      AIOS_D("loss.kp3d.rhand", loss.smplx.kp3d[2]),
      AIOS_D("loss.kp3d.face", loss.smplx.kp3d[3]),
      AIOS_D("loss.kp2d.body", loss.smplx.kp2d[0]),
      AIOS_D("loss.kp2d.lhand", loss.smplx.kp2d[1]),
      AIOS_D("loss.kp2d.rhand", loss.smplx.kp2d[2]),
      AIOS_D("loss.kp2d.face", loss.smplx.kp2d[3]),
      AIOS_D("loss.encoder", loss.encoder),
      AIOS_D("loss.focal_alpha", loss.focal_alpha),
      AIOS_D("loss.focal_gamma", loss.focal_gamma),
      AIOS_D("loss.oks_k", loss.oks_k),
      AIOS_D("loss.match.cls", loss.match.cls),
      AIOS_D("loss.match.l1", loss.match.l1),
      AIOS_D("loss.match.giou", loss.match.giou),

      AIOS_I("train.iterations", train.iterations),
      AIOS_I("train.batch_size", train.batch_size),
      AIOS_D("train.lr", train.lr),
      AIOS_D("train.lr_drop_at", train.lr_drop_at),
      AIOS_D("train.lr_drop_factor", train.lr_drop_factor),
      AIOS_D("train.grad_clip", train.grad_clip),
      AIOS_D("train.adam_beta1", train.adam_beta1),
      AIOS_D("train.adam_beta2", train.adam_beta2),
      AIOS_D("train.adam_eps", train.adam_eps),
      AIOS_B("train.flip", train.flip),
      AIOS_U("train.seed", train.seed),
      AIOS_I("train.log_every", train.log_every),
      AIOS_I("train.checkpoint_every", train.checkpoint_every),

      AIOS_D("eval.threshold", eval.threshold),
      AIOS_D("eval.match_threshold", eval.match_threshold),
      AIOS_B("eval.pelvis_align", eval.pelvis_align),

      AIOS_I("data.num_scenes", data.num_scenes),
      AIOS_U("data.seed", data.seed),
  };
  return t;
}

#undef AIOS_D
#undef AIOS_I
#undef AIOS_U
#undef AIOS_B

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace

void RunConfig::set(const std::string& key, const std::string& value) {
  for (const Entry& e : table()) {
    if (e.key == key) {
      e.set(*this, trim(value));
      return;
    }
  }
  throw ConfigError("unknown config key '" + key + "'");
}

std::vector<std::pair<std::string, std::string>> RunConfig::entries() const {
  std::vector<std::pair<std::string, std::string>> out;
  for (const Entry& e : table()) out.emplace_back(e.key, e.get(*this));
  return out;
}

std::string RunConfig::echo() const {
  std::ostringstream os;
  for (const auto& [k, v] : entries()) os << k << " = " << v << "\n";
  return os.str();
}

RunConfig RunConfig::parse(const std::string& text) {
  RunConfig c;
  std::istringstream is(text);
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(lineno) + ": expected 'key = value'");
    c.set(trim(line.substr(0, eq)), line.substr(eq + 1));
  }
  c.validate();
  return c;
}

RunConfig RunConfig::load(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open config " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  return parse(ss.str());
}

void RunConfig::save(const std::filesystem::path& path) const {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write " + path.string());
  os << echo();
}

}  // namespace aios
