// aios: data generation, training, evaluation, overlay rendering and self-checks.

#include "aios/commands.hpp"

#include <CLI11.hpp>

#include <iostream>

using namespace aios;

namespace {

void add_common(CLI::App* cmd, CommandOptions& o, bool model_flags) {
  cmd->add_option("--config", o.config, "run config file (key = value lines)")->check(CLI::ExistingFile);
  cmd->add_option("--set", o.overrides, "override a config key, key=value (repeatable)");
  cmd->add_flag("--quiet", o.quiet, "suppress progress output");
  if (!model_flags) return;
  cmd->add_option("--seed", o.seed, "sets data.seed, train.seed and model.init_seed");
  cmd->add_option("--variant", o.variant, "naive|full")->check(CLI::IsMember({"naive", "full"}));
  cmd->add_option("--scheme", o.scheme, "all|s3only|s23")->check(CLI::IsMember({"all", "s3only", "s23"}));
  cmd->add_option("--threshold", o.threshold, "score threshold: number or preset agora-0.5|agora-0.3");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"aios: multi-person whole-body mesh recovery at desk scale"};
  app.require_subcommand(1);
  CommandOptions o;

  auto* datagen = app.add_subcommand("datagen", "generate a synthetic scene dataset");
  add_common(datagen, o, true);
  datagen->add_option("--out", o.out, "output dataset directory")->required();
  datagen->add_option("--count", o.count, "number of scenes (data.num_scenes)");

  auto* train = app.add_subcommand("train", "train a model on a dataset");
  add_common(train, o, true);
  train->add_option("--data", o.data, "dataset directory")->required();
  train->add_option("--out", o.out, "run directory (checkpoint, loss log, config echo)")->required();
  train->add_option("--resume", o.resume, "checkpoint to continue from")->check(CLI::ExistingFile);

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on a dataset");
  add_common(eval, o, true);
  eval->add_option("--checkpoint", o.checkpoint, "checkpoint file")->required()->check(CLI::ExistingFile);
  eval->add_option("--data", o.data, "dataset directory")->required();
  eval->add_option("--out", o.out, "report directory")->required();

  auto* render = app.add_subcommand("render", "draw predictions over one scene");
  add_common(render, o, true);
  render->add_option("--checkpoint", o.checkpoint, "checkpoint file")->required()->check(CLI::ExistingFile);
  render->add_option("--data", o.data, "dataset directory")->required();
  render->add_option("--scene", o.scene, "scene index")->capture_default_str();
  render->add_option("--out", o.out, "output image (.ppm)")->required();

  auto* check = app.add_subcommand("check", "run the invariant self-check suite");
  check->add_option("--out", o.out, "also write check_report.txt here");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (*datagen) cmd_datagen(o);
    if (*train) cmd_train(o);
    if (*eval) cmd_eval(o);
    if (*render) cmd_render(o);
    if (*check) return cmd_check(o) ? kExitOk : kExitCheckFailed;
    return kExitOk;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const CheckpointIncompatibleError& e) {
    std::cerr << "checkpoint incompatible: " << e.what() << "\n";
    return kExitCheckpoint;
  } catch (const IoError& e) {
    std::cerr << "i/o error: " << e.what() << "\n";
    return kExitIo;
  } catch (const NonFiniteLossError& e) {
    std::cerr << "training aborted: " << e.what() << "\n";
    return kExitNonFinite;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitOther;
  }
}
