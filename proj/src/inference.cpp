#include "aios/inference.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <numeric>
#include <thread>

namespace aios {

namespace {

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

std::vector<PersonPrediction> predict(AiosNet& net, const Mat& image, double threshold) {
  const SceneConfig& sc = net.scene_config();
  ad::Tape t(false);
  const ForwardResult r = net.forward(t, image, Scheme::kS23);
  const StageOutput& out = r.final_stage();
  const Vec scores = out.scores.value().col(0);
  std::vector<int> order(static_cast<std::size_t>(scores.size()));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return scores(a) > scores(b); });

  std::vector<PersonPrediction> preds;
  for (int c : order) {
    const double p = sigmoid(scores(c));
    if (p < threshold) continue;
    PersonPrediction pp;
    pp.score = p;
    pp.keypoints2d = Mat::Zero(body::kNumKeypoints, 2);
    for (int k = 0; k < kNumParts; ++k) {
      if (out.boxes[k].valid()) pp.boxes[k] = out.boxes[k].value().row(c).transpose();
      if (!out.joints[k].valid()) continue;
      const body::KeypointRange kr = body::keypoint_range(static_cast<Part>(k));
      const Mat& j = out.joints[k].value();
      for (int i = 0; i < kr.count; ++i) {
        pp.keypoints2d(kr.start + i, 0) = j(c, 2 * i) * sc.width;
        pp.keypoints2d(kr.start + i, 1) = j(c, 2 * i + 1) * sc.height;
      }
    }
    if (out.params.valid()) {
      pp.params = body::ParamSet::from_vector(out.params.value().row(c).transpose());
      pp.translation = out.translation.value().row(c).transpose();
    }
    preds.push_back(std::move(pp));
  }
  return preds;
}

std::vector<PersonPrediction> oracle_predictions(const SceneGroundTruth& scene) {
  std::vector<PersonPrediction> out;
  for (const PersonGT& p : scene.persons) {
    PersonPrediction pp;
    pp.score = 1.0;
    pp.boxes = p.boxes;
    pp.keypoints2d = p.keypoints2d;
    pp.params = p.params;
    pp.translation = p.translation;
    out.push_back(std::move(pp));
  }
  return out;
}

void score_scene(const body::BodyModel& model, const SceneGroundTruth& scene, const std::vector<PersonPrediction>& preds,
                 const EvalConfig& config, MetricAccumulator& acc) {
  std::vector<Mat> pj, gj;
  std::vector<std::vector<std::uint8_t>> gv;
  for (const PersonPrediction& p : preds) pj.push_back(p.keypoints2d.topRows(body::kNumBodyKeypoints));
  for (const PersonGT& g : scene.persons) {
    gj.push_back(g.keypoints2d.topRows(body::kNumBodyKeypoints));
    gv.emplace_back(g.visible.begin(), g.visible.begin() + body::kNumBodyKeypoints);
  }
  const InstanceMatch m = instance_match(pj, gj, gv, config.match_threshold * scene.width);
  std::vector<PersonErrors> errs;
  const Alignment align = config.pelvis_align ? Alignment::kPelvis : Alignment::kNone;
  for (const auto& [p, g] : m.pairs) {
    errs.push_back(compute_errors(model, preds[p].params, preds[p].translation, scene.persons[g].params,
                                  scene.persons[g].translation, align));
  }
  acc.add(m, errs);
}

bool deterministic_mode() {
  const char* v = std::getenv("AIOS_DETERMINISTIC");
  return v != nullptr && std::string(v) == "1";
}

int worker_count() {
  if (deterministic_mode()) return 1;
  return static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
}

EvalResult evaluate(AiosNet& net, const body::BodyModel& model, const std::vector<SceneGroundTruth>& scenes,
                    const EvalConfig& config) {
  const int n = static_cast<int>(scenes.size());
  std::vector<std::vector<PersonPrediction>> preds(static_cast<std::size_t>(n));
  const int workers = std::min(worker_count(), std::max(1, n));
  auto run = [&](int w) {
    for (int i = w; i < n; i += workers) preds[i] = predict(net, scenes[i].image, config.threshold);
  };
  if (workers == 1) {
    run(0);
  } else {
    std::vector<std::thread> pool;
    for (int w = 0; w < workers; ++w) pool.emplace_back(run, w);
    for (std::thread& th : pool) th.join();
  }
  EvalResult r;
  MetricAccumulator acc;
  for (int i = 0; i < n; ++i) {
    score_scene(model, scenes[i], preds[i], config, acc);
    r.detections_per_scene.push_back(static_cast<int>(preds[i].size()));
  }
  r.report = acc.report();
  return r;
}

// ------------------------------------------------------------- rendering

namespace {

using Rgb = std::array<std::uint8_t, 3>;

constexpr int kLegendHeight = 12;

const Rgb kPalette[] = {{230, 25, 75},  {60, 180, 75},  {255, 225, 25}, {0, 130, 200},
                        {245, 130, 48}, {145, 30, 180}, {70, 240, 240}, {240, 50, 230}};

// 3×5 glyphs for digits and '.', one row per 3-bit mask.
const std::uint8_t kDigits[11][5] = {
    {7, 5, 5, 5, 7}, {2, 6, 2, 2, 7}, {7, 1, 7, 4, 7}, {7, 1, 7, 1, 7}, {5, 5, 7, 1, 1}, {7, 4, 7, 1, 7},
    {7, 4, 7, 5, 7}, {7, 1, 1, 1, 1}, {7, 5, 7, 5, 7}, {7, 5, 7, 1, 7}, {0, 0, 0, 0, 2}};

void draw_glyph(RgbImage& img, int x0, int y0, int glyph, const Rgb& c) {
  for (int r = 0; r < 5; ++r) {
    for (int b = 0; b < 3; ++b) {
      if (kDigits[glyph][r] & (4 >> b)) img.set(x0 + b, y0 + r, c);
    }
  }
}

void draw_rect(RgbImage& img, int x0, int y0, int x1, int y1, const Rgb& c) {
  for (int x = x0; x <= x1; ++x) {
    img.set(x, y0, c);
    img.set(x, y1, c);
  }
  for (int y = y0; y <= y1; ++y) {
    img.set(x0, y, c);
    img.set(x1, y, c);
  }
}

void draw_dot(RgbImage& img, double x, double y, const Rgb& c) {
  const int xi = static_cast<int>(std::lround(x)), yi = static_cast<int>(std::lround(y));
  for (int dy = -1; dy <= 1; ++dy) {
    for (int dx = -1; dx <= 1; ++dx) img.set(xi + dx, yi + dy, c);
  }
}

void draw_cross(RgbImage& img, double x, double y, const Rgb& c) {
  const int xi = static_cast<int>(std::lround(x)), yi = static_cast<int>(std::lround(y));
  for (int d = -2; d <= 2; ++d) {
    img.set(xi + d, yi + d, c);
    img.set(xi + d, yi - d, c);
  }
}

}  // namespace

void RgbImage::set(int x, int y, const std::array<std::uint8_t, 3>& c) {
  if (x < 0 || y < 0 || x >= width || y >= height) return;
  const std::size_t i = (static_cast<std::size_t>(y) * width + x) * 3;
  pixels[i] = c[0];
  pixels[i + 1] = c[1];
  pixels[i + 2] = c[2];
}

RgbImage render_overlay(const body::BodyModel& model, const SceneGroundTruth& scene,
                        const std::vector<PersonPrediction>& preds, int scale) {
  if (scale < 1) throw InvalidParameterError("render_overlay: scale must be >= 1");
  RgbImage img;
  img.width = scene.width * scale;
  img.height = scene.height * scale + kLegendHeight;
  img.pixels.assign(static_cast<std::size_t>(img.width) * img.height * 3, 0);
  for (int y = 0; y < scene.height * scale; ++y) {
    for (int x = 0; x < img.width; ++x) {
      const Eigen::Index src = static_cast<Eigen::Index>(y / scale) * scene.width + x / scale;
      Rgb c;
      for (int k = 0; k < 3; ++k) c[k] = static_cast<std::uint8_t>(std::lround(std::clamp(scene.image(src, k), 0.0, 1.0) * 255.0));
      img.set(x, y, c);
    }
  }
  // Pixel centers: image pixel u maps to overlay coordinate (u + 0.5)·scale − 0.5.
  auto to_px = [&](double u) { return (u + 0.5) * scale - 0.5; };
  body::CameraModel cam = scene.camera;
  const int max_legend = (img.width - 2) / 22;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    const PersonPrediction& p = preds[i];
    const Rgb& col = kPalette[i % std::size(kPalette)];
    const Vec4& b = p.boxes[0];
    draw_rect(img, static_cast<int>(std::lround(to_px((b(0) - b(2) / 2) * scene.width))),
              static_cast<int>(std::lround(to_px((b(1) - b(3) / 2) * scene.height))),
              static_cast<int>(std::lround(to_px((b(0) + b(2) / 2) * scene.width))),
              static_cast<int>(std::lround(to_px((b(1) + b(3) / 2) * scene.height))), col);
    for (Eigen::Index k = 0; k < p.keypoints2d.rows(); ++k) draw_dot(img, to_px(p.keypoints2d(k, 0)), to_px(p.keypoints2d(k, 1)), col);
    // Mesh keypoints of the predicted parameters, projected with the predicted translation.
    const body::BodyOutput bo = body::forward(model, p.params);
    cam.translation = p.translation;
    if ((bo.keypoints.col(2).array() + p.translation.z()).minCoeff() > 1e-6) {
      const Mat uv = body::project(bo.keypoints, cam);
      const Rgb light = {static_cast<std::uint8_t>(255 - (255 - col[0]) / 2), static_cast<std::uint8_t>(255 - (255 - col[1]) / 2),
                         static_cast<std::uint8_t>(255 - (255 - col[2]) / 2)};
      for (Eigen::Index k = 0; k < uv.rows(); ++k) draw_cross(img, to_px(uv(k, 0)), to_px(uv(k, 1)), light);
    }
    // Legend entry: swatch and score with two decimals.
    if (static_cast<int>(i) < max_legend) {
      const int x0 = 2 + static_cast<int>(i) * 22, y0 = scene.height * scale + 3;
      for (int dy = 0; dy < 5; ++dy) {
        for (int dx = 0; dx < 5; ++dx) img.set(x0 + dx, y0 + dy, col);
      }
      const int hundredths = static_cast<int>(std::lround(std::clamp(p.score, 0.0, 1.0) * 100));
      const int glyphs[] = {hundredths / 100, 10, (hundredths / 10) % 10, hundredths % 10};
      for (int g = 0; g < 4; ++g) draw_glyph(img, x0 + 7 + g * 4 - (g > 1 ? 2 : 0), y0, glyphs[g], {255, 255, 255});
    }
  }
  // Legend frame: always present, also for an empty prediction.
  draw_rect(img, 0, scene.height * scale, img.width - 1, img.height - 1, {128, 128, 128});
  return img;
}

void write_ppm(const std::filesystem::path& path, const RgbImage& image) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write " + path.string());
  os << "P6\n" << image.width << " " << image.height << "\n255\n";
  os.write(reinterpret_cast<const char*>(image.pixels.data()), static_cast<std::streamsize>(image.pixels.size()));
  if (!os) throw IoError("failed writing " + path.string());
}

RgbImage read_ppm(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  std::string magic;
  int maxval = 0;
  RgbImage img;
  is >> magic >> img.width >> img.height >> maxval;
  if (magic != "P6" || maxval != 255 || img.width <= 0 || img.height <= 0) throw IoError("unsupported PPM " + path.string());
  is.get();
  img.pixels.resize(static_cast<std::size_t>(img.width) * img.height * 3);
  is.read(reinterpret_cast<char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
  if (!is) throw IoError("truncated PPM " + path.string());
  return img;
}

}  // namespace aios
