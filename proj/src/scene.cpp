#include "aios/scene.hpp"

#include "aios/binary_io.hpp"
#include "aios/rng.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>

namespace aios {

namespace {

using body::kNumKeypoints;

constexpr char kSceneMagic[] = "AIOSSC01";

// Body keypoint skeleton drawn as limbs (keypoint indices).
constexpr int kLimbs[][2] = {{0, 1},  {0, 2},  {1, 3},  {2, 4},   {3, 5},   {4, 6},   {5, 7},   {6, 8},
                             {0, 9},  {9, 10}, {9, 11}, {9, 12},  {11, 13}, {12, 14}, {13, 15}, {14, 16}};

Vec3 keypoint_code(int k) {
  return Vec3(0.5 + 0.5 * std::sin(1.7 * k), 0.5 + 0.5 * std::sin(2.3 * k + 1.0), 0.5 + 0.5 * std::sin(3.1 * k + 2.0));
}

void splat(Mat& image, int width, int height, double u, double v, double sigma, const Vec3& color, double alpha) {
  const int r = static_cast<int>(std::ceil(3.0 * sigma));
  const int u0 = std::max(0, static_cast<int>(std::floor(u)) - r);
  const int u1 = std::min(width - 1, static_cast<int>(std::ceil(u)) + r);
  const int v0 = std::max(0, static_cast<int>(std::floor(v)) - r);
  const int v1 = std::min(height - 1, static_cast<int>(std::ceil(v)) + r);
  const double inv = 1.0 / (2.0 * sigma * sigma);
  for (int y = v0; y <= v1; ++y) {
    for (int x = u0; x <= u1; ++x) {
      const double d2 = (x - u) * (x - u) + (y - v) * (y - v);
      const double a = alpha * std::exp(-d2 * inv);
      if (a < 1e-4) continue;
      auto px = image.row(static_cast<Eigen::Index>(y) * width + x);
      px = (1.0 - a) * px + a * color.transpose();
    }
  }
}

body::ParamSet sample_params(const SceneConfig& c, Rng& rng) {
  body::ParamSet p;
  // Root: mostly upright and facing the camera, with a random yaw.
  p.pose(0, 0) = rng.normal(0.0, 0.1);
  p.pose(0, 1) = rng.uniform(-0.6, 0.6);
  p.pose(0, 2) = rng.normal(0.0, 0.1);
  for (int j = 1; j < body::kNumBodyJoints; ++j) {
    for (int k = 0; k < 3; ++k) p.pose(j, k) = rng.normal(0.0, c.pose_noise);
  }
  for (int j = body::kLHandStart; j < body::kJawJoint; ++j) {
    for (int k = 0; k < 3; ++k) p.pose(j, k) = rng.normal(0.0, c.hand_pose_noise);
  }
  p.pose(body::kJawJoint, 0) = rng.uniform(0.0, 0.3);
  for (int k = 0; k < body::kNumShape; ++k) p.beta(k) = rng.normal(0.0, c.shape_noise);
  for (int k = 0; k < body::kNumExpr; ++k) p.psi(k) = rng.normal(0.0, c.expr_noise);
  return p;
}

bool in_frame(double u, double v, int width, int height) { return u >= 0.0 && u <= width - 1 && v >= 0.0 && v <= height - 1; }

void render(SceneGroundTruth& scene, const SceneConfig& c, Rng& rng) {
  const int w = scene.width;
  const int h = scene.height;
  scene.image.resize(static_cast<Eigen::Index>(w) * h, 3);
  for (Eigen::Index i = 0; i < scene.image.size(); ++i) {
    scene.image.data()[i] = 0.05 + c.background_noise * rng.uniform();
  }
  // Painter's order: far persons first.
  std::vector<int> order(scene.persons.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return scene.persons[a].translation.z() > scene.persons[b].translation.z();
  });
  for (int idx : order) {
    const PersonGT& p = scene.persons[idx];
    const double scale = scene.camera.focal / p.translation.z();
    const double sigma_limb = std::max(0.6, 0.035 * scale);
    const double sigma_kp = std::max(0.7, 0.045 * scale);
    for (const auto& limb : kLimbs) {
      if (!p.visible[limb[0]] || !p.visible[limb[1]]) continue;
      const Vec2 a = p.keypoints2d.row(limb[0]).transpose();
      const Vec2 b = p.keypoints2d.row(limb[1]).transpose();
      const int steps = std::max(1, static_cast<int>(std::ceil((b - a).norm())));
      for (int s = 0; s <= steps; ++s) {
        const Vec2 q = a + (b - a) * (static_cast<double>(s) / steps);
        splat(scene.image, w, h, q.x(), q.y(), sigma_limb, p.color, 0.6);
      }
    }
    for (int k = 0; k < kNumKeypoints; ++k) {
      if (!p.visible[k]) continue;
      const double sigma = k < body::kNumBodyKeypoints ? sigma_kp : 0.7 * sigma_kp;
      const Vec3 col = p.color.cwiseProduct(Vec3::Constant(0.4) + 0.6 * keypoint_code(k));
      splat(scene.image, w, h, p.keypoints2d(k, 0), p.keypoints2d(k, 1), sigma, col, 0.9);
    }
  }
  scene.image = scene.image.cwiseMax(0.0).cwiseMin(1.0);
}

// One attempt; may return fewer persons than sampled if some end up invisible.
SceneGroundTruth try_generate(const SceneConfig& c, const body::BodyModel& model, Rng& rng) {
  SceneGroundTruth scene;
  scene.width = c.width;
  scene.height = c.height;
  scene.camera = scene_camera(c);
  const int n = rng.uniform_int(c.min_persons, c.max_persons);
  std::vector<PersonGT> persons;
  std::vector<Vec2> pelvis_px;
  for (int i = 0; i < n; ++i) {
    PersonGT p;
    p.params = sample_params(c, rng);
    const double depth = rng.uniform(c.depth_min, c.depth_max);
    double u, v;
    if (c.overlap_bias && i > 0) {
      const Vec2& anchor = pelvis_px[rng.uniform_int(0, i - 1)];
      u = std::clamp(anchor.x() + rng.normal(0.0, 0.1 * c.width), 0.15 * c.width, 0.85 * c.width);
      v = std::clamp(anchor.y() + rng.normal(0.0, 0.05 * c.height), 0.3 * c.height, 0.55 * c.height);
    } else {
      u = rng.uniform(0.15 * c.width, 0.85 * c.width);
      v = rng.uniform(0.3 * c.height, 0.55 * c.height);
    }
    p.translation = unproject_pelvis(scene.camera, u, v, depth);
    p.color = Vec3(rng.uniform(0.45, 1.0), rng.uniform(0.45, 1.0), rng.uniform(0.45, 1.0));
    const body::BodyOutput out = body::forward(model, p.params);
    p.keypoints3d = out.keypoints;
    body::CameraModel cam = scene.camera;
    cam.translation = p.translation;
    p.keypoints2d = body::project(out.keypoints, cam);
    pelvis_px.emplace_back(p.keypoints2d(0, 0), p.keypoints2d(0, 1));
    persons.push_back(std::move(p));
  }
  // Visibility: inside the frame and not covered by a nearer person's pelvis disc.
  for (std::size_t i = 0; i < persons.size(); ++i) {
    PersonGT& p = persons[i];
    p.visible.assign(kNumKeypoints, 0);
    for (int k = 0; k < kNumKeypoints; ++k) {
      const double u = p.keypoints2d(k, 0);
      const double v = p.keypoints2d(k, 1);
      bool vis = in_frame(u, v, c.width, c.height);
      for (std::size_t j = 0; vis && j < persons.size(); ++j) {
        if (j == i || persons[j].translation.z() >= p.translation.z()) continue;
        const double radius = c.occluder_radius * scene.camera.focal / persons[j].translation.z();
        if ((Vec2(u, v) - pelvis_px[j]).norm() < radius) vis = false;
      }
      p.visible[k] = vis ? 1 : 0;
    }
  }
  for (PersonGT& p : persons) {
    const auto body = body::keypoint_range(Part::kBody);
    bool any = false;
    for (int k = body.start; k < body.start + body.count; ++k) any = any || p.visible[k];
    if (!any) continue;
    const PartBoxes boxes = derive_boxes(p.keypoints2d, p.visible, c.width, c.height, c.box_pad, c.min_box);
    p.boxes = boxes.boxes;
    p.box_valid = boxes.valid;
    scene.persons.push_back(std::move(p));
  }
  render(scene, c, rng);
  return scene;
}

}  // namespace

void SceneConfig::validate() const {
  if (width < 16 || height < 16) throw ConfigError("scene: image must be at least 16x16");
  if (min_persons < 1 || max_persons < min_persons) throw ConfigError("scene: need 1 <= min_persons <= max_persons");
  if (!(depth_min > 0.5) || depth_max < depth_min) throw ConfigError("scene: need 0.5 < depth_min <= depth_max");
  if (pose_noise < 0 || hand_pose_noise < 0 || shape_noise < 0 || expr_noise < 0) throw ConfigError("scene: noise scales must be >= 0");
  if (box_pad < 0 || !(min_box > 0) || min_box > 0.5) throw ConfigError("scene: need box_pad >= 0 and 0 < min_box <= 0.5");
  if (background_noise < 0 || background_noise > 0.5) throw ConfigError("scene: background_noise must be in [0, 0.5]");
  if (occluder_radius < 0) throw ConfigError("scene: occluder_radius must be >= 0");
}

body::CameraModel scene_camera(const SceneConfig& config) {
  body::CameraModel cam;
  cam.focal = config.width;
  cam.principal = Vec2((config.width - 1) / 2.0, (config.height - 1) / 2.0);
  cam.translation = Vec3::Zero();
  return cam;
}

Vec3 unproject_pelvis(const body::CameraModel& camera, double u, double v, double depth) {
  return Vec3((u - camera.principal.x()) * depth / camera.focal, (v - camera.principal.y()) * depth / camera.focal, depth);
}

PartBoxes derive_boxes(const Mat& keypoints2d, const std::vector<std::uint8_t>& visible, int width, int height,
                       double pad, double min_box) {
  PartBoxes out;
  const double max_x = (width - 1.0) / width;
  const double max_y = (height - 1.0) / height;
  for (int part = 0; part < kNumParts; ++part) {
    const auto range = body::keypoint_range(static_cast<Part>(part));
    double x0 = INFINITY, y0 = INFINITY, x1 = -INFINITY, y1 = -INFINITY;
    int count = 0;
    for (int k = range.start; k < range.start + range.count; ++k) {
      if (!visible[k]) continue;
      const double u = keypoints2d(k, 0);
      const double v = keypoints2d(k, 1);
      if (!in_frame(u, v, width, height)) continue;
      x0 = std::min(x0, u / width);
      x1 = std::max(x1, u / width);
      y0 = std::min(y0, v / height);
      y1 = std::max(y1, v / height);
      ++count;
    }
    out.valid[part] = count > 0;
    if (!count) {
      out.boxes[part] = Vec4::Zero();
      continue;
    }
    auto fit = [&](double lo, double hi, double limit, double& c, double& s) {
      const double mid = 0.5 * (lo + hi);
      double half = 0.5 * (hi - lo) * (1.0 + pad);
      lo = std::max(0.0, mid - half);
      hi = std::min(limit, mid + half);
      if (hi - lo < min_box) {
        half = 0.5 * min_box;
        lo = std::clamp(mid - half, 0.0, limit - min_box);
        hi = lo + min_box;
      }
      c = 0.5 * (lo + hi);
      s = hi - lo;
    };
    double cx, cy, w, h;
    fit(x0, x1, max_x, cx, w);
    fit(y0, y1, max_y, cy, h);
    out.boxes[part] = Vec4(cx, cy, w, h);
  }
  return out;
}

SceneGroundTruth generate_scene(const SceneConfig& config, const body::BodyModel& model, std::uint64_t seed) {
  config.validate();
  for (int attempt = 0; attempt < 10; ++attempt) {
    Rng rng(mix_seed(seed, static_cast<std::uint64_t>(attempt)));
    SceneGroundTruth scene = try_generate(config, model, rng);
    if (!scene.persons.empty()) return scene;
  }
  throw GenerationError("scene generation produced no visible person after 10 attempts");
}

SceneGroundTruth horizontal_flip(const SceneGroundTruth& scene) {
  SceneGroundTruth out = scene;
  const int w = scene.width;
  for (int y = 0; y < scene.height; ++y) {
    for (int x = 0; x < w; ++x) {
      out.image.row(static_cast<Eigen::Index>(y) * w + x) = scene.image.row(static_cast<Eigen::Index>(y) * w + (w - 1 - x));
    }
  }
  const auto& km = body::keypoint_mirror();
  const double max_x = (w - 1.0) / w;
  for (std::size_t i = 0; i < scene.persons.size(); ++i) {
    const PersonGT& src = scene.persons[i];
    PersonGT& dst = out.persons[i];
    dst.params = src.params.mirrored();
    dst.translation.x() = -src.translation.x();
    for (int k = 0; k < kNumKeypoints; ++k) {
      const int m = km[k];
      dst.keypoints3d.row(k) = src.keypoints3d.row(m);
      dst.keypoints3d(k, 0) = -src.keypoints3d(m, 0);
      dst.keypoints2d(k, 0) = (w - 1.0) - src.keypoints2d(m, 0);
      dst.keypoints2d(k, 1) = src.keypoints2d(m, 1);
      dst.visible[k] = src.visible[m];
    }
    for (int part = 0; part < kNumParts; ++part) {
      int from = part;
      if (part == static_cast<int>(Part::kLHand)) from = static_cast<int>(Part::kRHand);
      if (part == static_cast<int>(Part::kRHand)) from = static_cast<int>(Part::kLHand);
      dst.box_valid[part] = src.box_valid[from];
      dst.boxes[part] = src.boxes[from];
      if (src.box_valid[from]) dst.boxes[part](0) = max_x - src.boxes[from](0);
    }
  }
  return out;
}

std::vector<SceneGroundTruth> generate_dataset(const SceneConfig& config, const body::BodyModel& model, int count,
                                               std::uint64_t seed) {
  std::vector<SceneGroundTruth> scenes;
  scenes.reserve(count);
  for (int i = 0; i < count; ++i) scenes.push_back(generate_scene(config, model, mix_seed(seed, static_cast<std::uint64_t>(i))));
  return scenes;
}

// ------------------------------------------------------------- container

namespace {

nlohmann::json config_to_json(const SceneConfig& c) {
  return {{"width", c.width},
          {"height", c.height},
          {"min_persons", c.min_persons},
          {"max_persons", c.max_persons},
          {"depth_min", c.depth_min},
          {"depth_max", c.depth_max},
          {"pose_noise", c.pose_noise},
          {"hand_pose_noise", c.hand_pose_noise},
          {"shape_noise", c.shape_noise},
          {"expr_noise", c.expr_noise},
          {"overlap_bias", c.overlap_bias},
          {"box_pad", c.box_pad},
          {"min_box", c.min_box},
          {"background_noise", c.background_noise},
          {"occluder_radius", c.occluder_radius},
          {"color_jitter", c.color_jitter},
          {"random_resize", c.random_resize},
          {"instance_crop", c.instance_crop}};
}

SceneConfig config_from_json(const nlohmann::json& j) {
  SceneConfig c;
  c.width = j.at("width").get<int>();
  c.height = j.at("height").get<int>();
  c.min_persons = j.at("min_persons").get<int>();
  c.max_persons = j.at("max_persons").get<int>();
  c.depth_min = j.at("depth_min").get<double>();
  c.depth_max = j.at("depth_max").get<double>();
  c.pose_noise = j.at("pose_noise").get<double>();
  c.hand_pose_noise = j.at("hand_pose_noise").get<double>();
  c.shape_noise = j.at("shape_noise").get<double>();
  c.expr_noise = j.at("expr_noise").get<double>();
  c.overlap_bias = j.at("overlap_bias").get<bool>();
  c.box_pad = j.at("box_pad").get<double>();
  c.min_box = j.at("min_box").get<double>();
  c.background_noise = j.at("background_noise").get<double>();
  c.occluder_radius = j.at("occluder_radius").get<double>();
  c.color_jitter = j.at("color_jitter").get<bool>();
  c.random_resize = j.at("random_resize").get<bool>();
  c.instance_crop = j.at("instance_crop").get<bool>();
  return c;
}

std::string record_name(int i) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "scene_%05d.bin", i);
  return buf;
}

}  // namespace

void write_scene_record(const std::filesystem::path& path, const SceneGroundTruth& scene) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  bin::write_magic(os, std::string_view(kSceneMagic, 8));
  bin::write<std::uint32_t>(os, static_cast<std::uint32_t>(scene.width));
  bin::write<std::uint32_t>(os, static_cast<std::uint32_t>(scene.height));
  bin::write<std::uint32_t>(os, static_cast<std::uint32_t>(scene.persons.size()));
  bin::write<std::uint32_t>(os, static_cast<std::uint32_t>(kNumKeypoints));
  bin::write_f32(os, scene.image);
  for (const PersonGT& p : scene.persons) {
    const Vec params = p.params.to_vector();
    bin::write_f32(os, Mat(params.transpose()));
    bin::write_f32(os, Mat(p.translation.transpose()));
    bin::write_f32(os, p.keypoints3d);
    bin::write_f32(os, p.keypoints2d);
    Mat vis(1, kNumKeypoints);
    for (int k = 0; k < kNumKeypoints; ++k) vis(0, k) = p.visible[k];
    bin::write_f32(os, vis);
    Mat boxes(kNumParts, 4);
    Mat valid(1, kNumParts);
    for (int b = 0; b < kNumParts; ++b) {
      boxes.row(b) = p.boxes[b].transpose();
      valid(0, b) = p.box_valid[b] ? 1.0 : 0.0;
    }
    bin::write_f32(os, boxes);
    bin::write_f32(os, valid);
    bin::write_f32(os, Mat(p.color.transpose()));
  }
  if (!os) throw IoError("write failed: " + path.string());
}

SceneGroundTruth read_scene_record(const std::filesystem::path& path, const body::CameraModel& camera) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  bin::expect_magic(is, std::string_view(kSceneMagic, 8));
  SceneGroundTruth s;
  s.width = static_cast<int>(bin::read<std::uint32_t>(is));
  s.height = static_cast<int>(bin::read<std::uint32_t>(is));
  const auto n = bin::read<std::uint32_t>(is);
  if (bin::read<std::uint32_t>(is) != static_cast<std::uint32_t>(kNumKeypoints)) throw IoError("scene record keypoint count mismatch");
  if (s.width <= 0 || s.height <= 0 || s.width > 4096 || s.height > 4096 || n > 1024) throw IoError("scene record has implausible dimensions");
  s.camera = camera;
  s.image.resize(static_cast<Eigen::Index>(s.width) * s.height, 3);
  bin::read_f32(is, s.image);
  for (std::uint32_t i = 0; i < n; ++i) {
    PersonGT p;
    Mat params(1, body::kNumParams);
    bin::read_f32(is, params);
    p.params = body::ParamSet::from_vector(params.row(0).transpose());
    Mat t(1, 3);
    bin::read_f32(is, t);
    p.translation = t.row(0).transpose();
    p.keypoints3d.resize(kNumKeypoints, 3);
    p.keypoints2d.resize(kNumKeypoints, 2);
    bin::read_f32(is, p.keypoints3d);
    bin::read_f32(is, p.keypoints2d);
    Mat vis(1, kNumKeypoints);
    bin::read_f32(is, vis);
    p.visible.resize(kNumKeypoints);
    for (int k = 0; k < kNumKeypoints; ++k) p.visible[k] = vis(0, k) != 0.0 ? 1 : 0;
    Mat boxes(kNumParts, 4);
    Mat valid(1, kNumParts);
    bin::read_f32(is, boxes);
    bin::read_f32(is, valid);
    for (int b = 0; b < kNumParts; ++b) {
      p.boxes[b] = boxes.row(b).transpose();
      p.box_valid[b] = valid(0, b) != 0.0;
    }
    Mat col(1, 3);
    bin::read_f32(is, col);
    p.color = col.row(0).transpose();
    s.persons.push_back(std::move(p));
  }
  return s;
}

void write_dataset(const std::filesystem::path& dir, const std::vector<SceneGroundTruth>& scenes, const SceneConfig& config,
                   std::uint64_t seed) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  std::vector<int> hist(config.max_persons + 1, 0);
  nlohmann::json files = nlohmann::json::array();
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    const std::string name = record_name(static_cast<int>(i));
    write_scene_record(dir / name, scenes[i]);
    files.push_back(name);
    const std::size_t n = scenes[i].persons.size();
    if (n >= hist.size()) hist.resize(n + 1, 0);
    ++hist[n];
  }
  nlohmann::json m;
  m["format_version"] = 1;
  m["num_scenes"] = scenes.size();
  m["seed"] = seed;
  m["config"] = config_to_json(config);
  m["person_count_histogram"] = hist;
  m["files"] = files;
  m["record_layout"] = {
      "magic 'AIOSSC01'",
      "u32 width, u32 height, u32 num_persons, u32 num_keypoints",
      "f32 image[height*width][3]",
      "per person: f32 params[179] (pose 53x3 row-major, beta 10, psi 10), translation[3], keypoints3d[K][3], "
      "keypoints2d[K][2], visible[K], boxes[4][4] (body, lhand, rhand, face as cx cy w h), box_valid[4], color[3]"};
  std::ofstream os(dir / "manifest.json");
  if (!os) throw IoError("cannot write manifest in " + dir.string());
  os << m.dump(2) << "\n";
}

std::vector<SceneGroundTruth> read_dataset(const std::filesystem::path& dir, DatasetManifest* manifest) {
  std::ifstream is(dir / "manifest.json");
  if (!is) throw IoError("missing manifest.json in " + dir.string());
  nlohmann::json m;
  try {
    is >> m;
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("malformed manifest: ") + e.what());
  }
  DatasetManifest man;
  std::vector<SceneGroundTruth> scenes;
  try {
    man.format_version = m.at("format_version").get<int>();
    if (man.format_version != 1) throw IoError("unsupported dataset format version");
    man.num_scenes = m.at("num_scenes").get<int>();
    man.seed = m.at("seed").get<std::uint64_t>();
    man.config = config_from_json(m.at("config"));
    man.person_count_histogram = m.at("person_count_histogram").get<std::vector<int>>();
    const body::CameraModel cam = scene_camera(man.config);
    for (const auto& f : m.at("files")) scenes.push_back(read_scene_record(dir / f.get<std::string>(), cam));
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("malformed manifest: ") + e.what());
  }
  if (static_cast<int>(scenes.size()) != man.num_scenes) throw IoError("manifest scene count does not match its file list");
  if (manifest) *manifest = man;
  return scenes;
}

}  // namespace aios
