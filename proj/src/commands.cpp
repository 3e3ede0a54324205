#include "aios/commands.hpp"

#include "aios/checkpoint.hpp"
#include "aios/inference.hpp"
#include "aios/metrics.hpp"
#include "aios/network.hpp"
#include "aios/scene.hpp"
#include "aios/selfcheck.hpp"
#include "aios/trainer.hpp"

#include <json.hpp>

#include <cstdlib>
#include <fstream>
#include <iostream>

namespace aios {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t");
  return s.substr(b, e - b + 1);
}

bool has_scene_override(const CommandOptions& options) {
  for (const std::string& o : options.overrides) {
    if (trim(o).rfind("scene.", 0) == 0) return true;
  }
  return false;
}

// Scene settings of a run must agree with the dataset it reads. Without an
// explicit config the dataset's settings are adopted.
void reconcile_scene(RunConfig& config, const CommandOptions& options, const DatasetManifest& manifest) {
  if (!options.config && !has_scene_override(options)) {
    config.scene = manifest.config;
    config.validate();
    return;
  }
  RunConfig probe = config;
  probe.scene = manifest.config;
  const auto a = config.entries(), b = probe.entries();
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].first.rfind("scene.", 0) == 0 && a[i].second != b[i].second) {
      throw ConfigError(a[i].first + " = " + a[i].second + " differs from the dataset (" + b[i].second + ")");
    }
  }
}

std::vector<SceneGroundTruth> load_dataset(const CommandOptions& options, DatasetManifest& manifest) {
  if (options.data.empty()) throw ConfigError("--data is required");
  return read_dataset(options.data, &manifest);
}

void require_checkpoint(const CommandOptions& options) {
  if (options.checkpoint.empty()) throw ConfigError("--checkpoint is required");
}

// Config stored in the checkpoint unless --config replaces it; loading then
// reports any dimension mismatch as an incompatible checkpoint.
RunConfig checkpoint_config(const CommandOptions& options) {
  require_checkpoint(options);
  if (options.config) return resolve_config(options);
  const CheckpointInfo info = read_checkpoint_info(options.checkpoint);
  return resolve_config(options, &info.config);
}

}  // namespace

double parse_threshold(const std::string& text) {
  const std::string t = trim(text);
  if (t.rfind("agora-", 0) == 0) return threshold_preset(t);
  try {
    std::size_t used = 0;
    const double v = std::stod(t, &used);
    if (used != t.size()) throw ConfigError("");
    return v;
  } catch (const std::exception&) {
    throw ConfigError("--threshold expects a number or a preset (agora-0.5, agora-0.3), got '" + text + "'");
  }
}

RunConfig resolve_config(const CommandOptions& options, const RunConfig* base) {
  RunConfig c = base ? *base : (options.config ? RunConfig::load(*options.config) : RunConfig{});
  for (const std::string& o : options.overrides) {
    const auto eq = o.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + o + "'");
    c.set(trim(o.substr(0, eq)), trim(o.substr(eq + 1)));
  }
  if (options.variant) c.model.variant = parse_variant(*options.variant);
  if (options.scheme) c.loss.scheme = parse_scheme(*options.scheme);
  if (options.threshold) c.eval.threshold = parse_threshold(*options.threshold);
  if (options.seed) {
    c.data.seed = *options.seed;
    c.train.seed = *options.seed;
    c.model.init_seed = *options.seed;
  }
  if (options.count) c.data.num_scenes = *options.count;
  c.validate();
  return c;
}

body::BodyModel make_body_model(const ModelConfig& config) {
  body::TemplateOptions opt;
  opt.num_vertices = config.body_vertices;
  opt.pose_blend_scale = config.pose_blend_scale;
  opt.seed = static_cast<unsigned>(config.body_seed);
  return body::make_procedural_model(opt);
}

void cmd_datagen(const CommandOptions& options) {
  if (options.out.empty()) throw ConfigError("--out is required");
  const RunConfig config = resolve_config(options);
  const body::BodyModel model = make_body_model(config.model);
  const auto scenes = generate_dataset(config.scene, model, config.data.num_scenes, config.data.seed);
  write_dataset(options.out, scenes, config.scene, config.data.seed);
  config.save(options.out / "config_echo.txt");
  if (!options.quiet) std::cout << "wrote " << scenes.size() << " scenes to " << options.out.string() << "\n";
}

void cmd_train(const CommandOptions& options) {
  if (options.out.empty()) throw ConfigError("--out is required");
  RunConfig config;
  if (options.resume) {
    const CheckpointInfo info = read_checkpoint_info(*options.resume);
    config = options.config ? resolve_config(options) : resolve_config(options, &info.config);
  } else {
    config = resolve_config(options);
  }
  DatasetManifest manifest;
  auto scenes = load_dataset(options, manifest);
  reconcile_scene(config, options, manifest);
  const body::BodyModel model = make_body_model(config.model);
  Trainer trainer(config, model, std::move(scenes));
  if (options.resume) trainer.resume(*options.resume);
  const IterationLog last = run_training(trainer, options.out, options.quiet);
  if (!options.quiet) {
    std::cout << "finished at iteration " << trainer.iteration() << " (last total " << last.loss.total << "), checkpoint "
              << (options.out / "checkpoint.bin").string() << "\n";
  }
}

void cmd_eval(const CommandOptions& options) {
  if (options.out.empty()) throw ConfigError("--out is required");
  RunConfig config = checkpoint_config(options);
  DatasetManifest manifest;
  const auto scenes = load_dataset(options, manifest);
  if (manifest.config.width != config.scene.width || manifest.config.height != config.scene.height) {
    throw CheckpointIncompatibleError("checkpoint image size " + std::to_string(config.scene.width) + "x" +
                                      std::to_string(config.scene.height) + " does not match the dataset");
  }
  AiosNet net(config.model, config.scene);
  load_checkpoint(options.checkpoint, net.params());
  const body::BodyModel model = make_body_model(config.model);
  const EvalResult result = evaluate(net, model, scenes, config.eval);

  std::filesystem::create_directories(options.out);
  write_report(options.out, result.report);
  std::ofstream det(options.out / "detections.txt");
  if (!det) throw IoError("cannot write " + (options.out / "detections.txt").string());
  for (std::size_t i = 0; i < result.detections_per_scene.size(); ++i) {
    det << "scene " << i << " detections " << result.detections_per_scene[i] << "\n";
  }
  config.save(options.out / "config_echo.txt");
  if (!options.quiet) std::cout << report_to_text(result.report);
}

void cmd_render(const CommandOptions& options) {
  if (options.out.empty()) throw ConfigError("--out is required (output .ppm path)");
  const RunConfig config = checkpoint_config(options);
  DatasetManifest manifest;
  const auto scenes = load_dataset(options, manifest);
  if (options.scene < 0 || options.scene >= static_cast<int>(scenes.size())) {
    throw ConfigError("--scene " + std::to_string(options.scene) + " is out of range [0, " + std::to_string(scenes.size()) + ")");
  }
  const SceneGroundTruth& scene = scenes[options.scene];
  if (scene.width != config.scene.width || scene.height != config.scene.height) {
    throw CheckpointIncompatibleError("checkpoint image size does not match the dataset");
  }
  AiosNet net(config.model, config.scene);
  load_checkpoint(options.checkpoint, net.params());
  const body::BodyModel model = make_body_model(config.model);
  const auto preds = predict(net, scene.image, config.eval.threshold);

  const std::filesystem::path dir = options.out.parent_path();
  if (!dir.empty()) std::filesystem::create_directories(dir);
  write_ppm(options.out, render_overlay(model, scene, preds));

  nlohmann::ordered_json side;
  side["scene"] = options.scene;
  side["threshold"] = config.eval.threshold;
  side["detections"] = preds.size();
  side["people"] = nlohmann::ordered_json::array();
  for (const PersonPrediction& p : preds) {
    nlohmann::ordered_json e;
    e["score"] = p.score;
    e["body_box"] = {p.boxes[0](0), p.boxes[0](1), p.boxes[0](2), p.boxes[0](3)};
    side["people"].push_back(e);
  }
  std::filesystem::path json_path = options.out;
  json_path.replace_extension(".json");
  std::ofstream js(json_path);
  if (!js) throw IoError("cannot write " + json_path.string());
  js << side.dump(2) << "\n";
  std::filesystem::path echo_path = options.out;
  echo_path.replace_extension(".config_echo.txt");
  config.save(echo_path);
  if (!options.quiet) std::cout << "rendered " << preds.size() << " detections to " << options.out.string() << "\n";
}

bool cmd_check(const CommandOptions& options) {
  const char* corrupt = std::getenv("AIOS_CHECK_CORRUPT");
  const bool corrupt_skinning = corrupt && std::string(corrupt) == "skinning";
  const auto results = run_self_checks(corrupt_skinning);
  const std::string table = format_check_table(results);
  std::cout << table;
  if (!options.out.empty()) {
    std::filesystem::create_directories(options.out);
    std::ofstream os(options.out / "check_report.txt");
    if (!os) throw IoError("cannot write " + (options.out / "check_report.txt").string());
    os << table;
  }
  for (const CheckResult& r : results) {
    if (!r.passed) return false;
  }
  return true;
}

}  // namespace aios
