#include <doctest.h>

#include "aios/checkpoint.hpp"
#include "aios/commands.hpp"
#include "aios/inference.hpp"
#include "aios/network.hpp"
#include "aios/scene.hpp"

#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <iterator>

using namespace aios;

namespace {

const body::BodyModel& model() {
  static const body::BodyModel m = body::make_procedural_model();
  return m;
}

std::filesystem::path temp_dir(const std::string& name) {
  const auto p = std::filesystem::temp_directory_path() / ("aios_cmd_" + name);
  std::filesystem::remove_all(p);
  return p;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

std::vector<std::string> small_overrides() {
  return {"model.channels=8,8,16,16", "model.hidden_dim=16", "model.heads=2", "model.ffn_dim=32", "model.enc_layers=1",
          "model.num_candidates=12", "model.num_body_candidates=5", "train.batch_size=2", "train.iterations=2"};
}

// A dataset and a briefly trained checkpoint shared by the command tests.
struct Workspace {
  std::filesystem::path root = temp_dir("ws");
  std::filesystem::path data = root / "data";
  std::filesystem::path run = root / "run";

  Workspace() {
    CommandOptions d;
    d.out = data;
    d.count = 3;
    d.seed = 2;
    d.quiet = true;
    cmd_datagen(d);
    CommandOptions t;
    t.data = data;
    t.out = run;
    t.overrides = small_overrides();
    t.quiet = true;
    cmd_train(t);
  }
};

const Workspace& workspace() {
  static const Workspace w;
  return w;
}

}  // namespace

TEST_CASE("checkpoint: round trip and incompatibility") {
  const auto dir = temp_dir("ck");
  std::filesystem::create_directories(dir);
  RunConfig c;
  c.model.hidden_dim = 16;
  c.model.heads = 2;
  AiosNet a(c.model, c.scene);
  save_checkpoint(dir / "a.bin", a.params(), c, 7);

  ModelConfig other = c.model;
  other.init_seed = 99;
  AiosNet b(other, c.scene);
  const CheckpointInfo info = load_checkpoint(dir / "a.bin", b.params());
  CHECK(info.iteration == 7);
  CHECK(info.config.echo() == c.echo());
  for (const ad::Param* p : a.params().all()) CHECK(b.params().get(p->name).value == p->value);

  ModelConfig wider = c.model;
  wider.hidden_dim = 32;
  AiosNet w(wider, c.scene);
  CHECK_THROWS_AS(load_checkpoint(dir / "a.bin", w.params()), CheckpointIncompatibleError);
  ModelConfig naive = c.model;
  naive.variant = Variant::kNaive;
  AiosNet n(naive, c.scene);
  CHECK_THROWS_AS(load_checkpoint(dir / "a.bin", n.params()), CheckpointIncompatibleError);

  std::ofstream(dir / "junk.bin") << "not a checkpoint";
  CHECK_THROWS_AS(read_checkpoint_info(dir / "junk.bin"), CheckpointIncompatibleError);
  std::filesystem::remove_all(dir);
}

TEST_CASE("eval: oracle predictions score F1 = 1 with zero errors") {
  const SceneConfig sc;
  const EvalConfig ec;
  MetricAccumulator acc;
  for (const SceneGroundTruth& s : generate_dataset(sc, model(), 4, 9)) score_scene(model(), s, oracle_predictions(s), ec, acc);
  const MetricReport r = acc.report();
  CHECK(r.f_score == 1.0);
  CHECK(r.false_positives == 0);
  CHECK(r.false_negatives == 0);
  for (int p = 0; p < kNumReportParts; ++p) {
    CHECK(r.mve[p] < 1e-9);
    CHECK(r.mpjpe[p] < 1e-9);
    CHECK(r.pa_pve[p] < 1e-6);
  }
}

TEST_CASE("datagen: deterministic per seed, with echo and manifest") {
  const auto dir = temp_dir("datagen");
  for (const char* sub : {"a", "b"}) {
    CommandOptions o;
    o.out = dir / sub;
    o.count = 8;
    o.seed = 1;
    o.quiet = true;
    cmd_datagen(o);
  }
  std::uintmax_t bytes = 0;
  for (const auto& e : std::filesystem::directory_iterator(dir / "a")) {
    CHECK(slurp(e.path()) == slurp(dir / "b" / e.path().filename()));
    bytes += e.file_size();
  }
  // 8 records at 64x64 stay far below the 10 MB budget for 64 scenes.
  CHECK(bytes * 8 < 10u * 1024 * 1024);
  DatasetManifest m;
  CHECK(read_dataset(dir / "a", &m).size() == 8);
  CHECK(m.seed == 1);
  CHECK(RunConfig::load(dir / "a" / "config_echo.txt").data.num_scenes == 8);
  std::filesystem::remove_all(dir);
}

TEST_CASE("train/eval: commands produce reports and honour threshold monotonicity") {
  const Workspace& w = workspace();
  CHECK(std::filesystem::exists(w.run / "checkpoint.bin"));
  CHECK(std::filesystem::exists(w.run / "loss_log.txt"));
  std::vector<MetricReport> reports;
  for (const char* t : {"agora-0.5", "agora-0.3", "0.0"}) {
    CommandOptions o;
    o.checkpoint = w.run / "checkpoint.bin";
    o.data = w.data;
    o.out = w.root / (std::string("eval_") + t);
    o.threshold = t;
    o.quiet = true;
    cmd_eval(o);
    CHECK(std::filesystem::exists(o.out / "metrics.json"));
    CHECK(std::filesystem::exists(o.out / "config_echo.txt"));
    const RunConfig echo = RunConfig::load(o.out / "config_echo.txt");
    CHECK(echo.eval.threshold == parse_threshold(t));
    const auto j = nlohmann::json::parse(slurp(o.out / "metrics.json"));
    MetricReport r;
    r.recall = j.at("recall").get<double>();
    r.precision = j.at("precision").get<double>();
    reports.push_back(r);
  }
  CHECK(reports[1].recall >= reports[0].recall);
  CHECK(reports[2].recall >= reports[1].recall);

  CommandOptions bad;
  bad.checkpoint = w.run / "checkpoint.bin";
  bad.data = w.data;
  bad.out = w.root / "eval_bad";
  bad.overrides = {"model.hidden_dim=32"};
  bad.config = w.run / "config_echo.txt";
  CHECK_THROWS_AS(cmd_eval(bad), CheckpointIncompatibleError);
}

TEST_CASE("render: deterministic image whose box count matches the detections") {
  const Workspace& w = workspace();
  for (const char* name : {"a.ppm", "b.ppm"}) {
    CommandOptions o;
    o.checkpoint = w.run / "checkpoint.bin";
    o.data = w.data;
    o.scene = 1;
    o.threshold = "0.0";
    o.out = w.root / "render" / name;
    o.quiet = true;
    cmd_render(o);
  }
  CHECK(slurp(w.root / "render" / "a.ppm") == slurp(w.root / "render" / "b.ppm"));
  const auto side = nlohmann::json::parse(slurp(w.root / "render" / "a.json"));
  const RunConfig cfg = RunConfig::load(w.run / "config_echo.txt");
  AiosNet net(cfg.model, cfg.scene);
  load_checkpoint(w.run / "checkpoint.bin", net.params());
  const auto scenes = read_dataset(w.data);
  const auto preds = predict(net, scenes[1].image, 0.0);
  CHECK(side.at("detections").get<std::size_t>() == preds.size());
  CHECK(side.at("people").size() == preds.size());

  CommandOptions out_of_range;
  out_of_range.checkpoint = w.run / "checkpoint.bin";
  out_of_range.data = w.data;
  out_of_range.scene = 3;
  out_of_range.out = w.root / "render" / "c.ppm";
  CHECK_THROWS_AS(cmd_render(out_of_range), ConfigError);
}

TEST_CASE("render: no predictions leave the scene untouched apart from the legend") {
  const SceneGroundTruth s = generate_scene(SceneConfig{}, model(), 4);
  const RgbImage img = render_overlay(model(), s, {}, 4);
  CHECK(img.width == 256);
  CHECK(img.height > 256);
  int differing = 0;
  for (int y = 0; y < 256; ++y) {
    for (int x = 0; x < 256; ++x) {
      const Eigen::Index src = static_cast<Eigen::Index>(y / 4) * 64 + x / 4;
      for (int k = 0; k < 3; ++k) {
        const auto v = static_cast<std::uint8_t>(std::lround(std::clamp(s.image(src, k), 0.0, 1.0) * 255.0));
        differing += img.pixels[(static_cast<std::size_t>(y) * img.width + x) * 3 + k] != v;
      }
    }
  }
  CHECK(differing == 0);
  // The legend strip carries a frame even when empty.
  bool legend_drawn = false;
  for (std::size_t i = static_cast<std::size_t>(256) * img.width * 3; i < img.pixels.size(); ++i) legend_drawn |= img.pixels[i] != 0;
  CHECK(legend_drawn);

  const auto dir = temp_dir("ppm");
  std::filesystem::create_directories(dir);
  write_ppm(dir / "x.ppm", img);
  const RgbImage back = read_ppm(dir / "x.ppm");
  CHECK(back.pixels == img.pixels);
  std::filesystem::remove_all(dir);
}

TEST_CASE("train: resuming through the command appends to the run") {
  const Workspace& w = workspace();
  CommandOptions o;
  o.data = w.data;
  o.out = w.root / "resumed";
  o.resume = w.run / "checkpoint.bin";
  o.overrides = {"train.iterations=3"};
  o.quiet = true;
  cmd_train(o);
  CHECK(read_checkpoint_info(o.out / "checkpoint.bin").iteration == 3);
  std::ifstream log(o.out / "loss_log.txt");
  std::string line;
  std::getline(log, line);
  CHECK(line.rfind("iteration=2 ", 0) == 0);

  CommandOptions mismatch;
  mismatch.data = w.data;
  mismatch.out = w.root / "mismatch";
  mismatch.overrides = {"scene.width=128", "scene.height=128"};
  CHECK_THROWS_AS(cmd_train(mismatch), ConfigError);
}
