#include "aios/trainer.hpp"

#include "aios/checkpoint.hpp"
#include "aios/rng.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <numeric>
#include <sstream>

namespace aios {

namespace {

std::string g17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::vector<int> epoch_permutation(std::uint64_t seed, std::uint64_t epoch, int n) {
  std::vector<int> perm(static_cast<std::size_t>(n));
  std::iota(perm.begin(), perm.end(), 0);
  Rng rng(mix_seed(seed, epoch));
  for (int i = n - 1; i > 0; --i) std::swap(perm[i], perm[rng.uniform_int(0, i)]);
  return perm;
}

}  // namespace

std::string format_log_line(const IterationLog& log) {
  std::ostringstream os;
  os << "iteration=" << log.iteration << " lr=" << g17(log.lr) << " grad_norm=" << g17(log.grad_norm)
     << " total=" << g17(log.loss.total);
  for (const std::string& n : log.loss.names) os << " " << n << "=" << g17(log.loss.values.at(n));
  return os.str();
}

Trainer::Trainer(const RunConfig& config, const body::BodyModel& model, std::vector<SceneGroundTruth> scenes)
    : config_(config), model_(&model), scenes_(std::move(scenes)), net_(config.model, config.scene) {
  config_.validate();
  if (scenes_.empty()) throw ConfigError("Trainer: no training scenes");
  for (const SceneGroundTruth& s : scenes_) {
    if (s.width != config_.scene.width || s.height != config_.scene.height) {
      throw ShapeError("Trainer: scene size does not match scene.width/scene.height");
    }
    flipped_.push_back(horizontal_flip(s));
  }
  loss_ctx_.config = &config_.loss;
  loss_ctx_.model = model_;
  loss_ctx_.camera = scene_camera(config_.scene);
  loss_ctx_.width = config_.scene.width;
  loss_ctx_.height = config_.scene.height;
}

std::vector<std::pair<int, bool>> Trainer::batch(int iteration) const {
  const int n = static_cast<int>(scenes_.size());
  const int b = config_.train.batch_size;
  std::vector<std::pair<int, bool>> out;
  std::uint64_t cached_epoch = ~0ULL;
  std::vector<int> perm;
  for (int slot = 0; slot < b; ++slot) {
    const std::uint64_t g = static_cast<std::uint64_t>(iteration) * b + slot;
    const std::uint64_t epoch = g / n;
    if (epoch != cached_epoch) {
      perm = epoch_permutation(config_.train.seed, epoch, n);
      cached_epoch = epoch;
    }
    bool flip = false;
    if (config_.train.flip) flip = Rng(mix_seed(mix_seed(config_.train.seed, iteration), slot)).uniform() < 0.5;
    out.emplace_back(perm[g % n], flip);
  }
  return out;
}

double Trainer::learning_rate(int iteration) const {
  const auto drop = static_cast<int>(std::floor(config_.train.lr_drop_at * config_.train.iterations));
  return iteration >= drop ? config_.train.lr * config_.train.lr_drop_factor : config_.train.lr;
}

IterationLog Trainer::step() {
  const TrainConfig& tc = config_.train;
  IterationLog log;
  log.iteration = iteration_;
  log.lr = learning_rate(iteration_);
  ad::ParamStore& store = net_.params();
  store.zero_grad();

  const auto items = batch(iteration_);
  const double scale = 1.0 / static_cast<double>(items.size());
  for (const auto& [idx, flip] : items) {
    const SceneGroundTruth& scene = flip ? flipped_[idx] : scenes_[idx];
    ad::Tape t;
    const ForwardResult r = net_.forward(t, scene.image, config_.loss.scheme);
    const LossReport rep = total_loss(loss_ctx_, r, scene, scale);
    const std::string bad = rep.first_non_finite();
    if (!bad.empty() || !std::isfinite(rep.total)) {
      std::ostringstream os;
      os << "non-finite loss term '" << (bad.empty() ? "total" : bad) << "' at iteration " << iteration_ << " (scene "
         << idx << (flip ? ", flipped" : "") << ")\n";
      for (const std::string& n : rep.names) os << "  " << n << " = " << g17(rep.values.at(n)) << "\n";
      throw NonFiniteLossError(os.str());
    }
    t.backward();
    log.loss.accumulate(rep, scale);
  }

  double sq = 0.0;
  for (const ad::Param* p : store.all()) {
    const double s = p->grad.squaredNorm();
    if (!std::isfinite(s)) throw NonFiniteLossError("non-finite gradient for parameter '" + p->name + "' at iteration " + std::to_string(iteration_));
    sq += s;
  }
  log.grad_norm = std::sqrt(sq);
  const double clip = tc.grad_clip > 0 && log.grad_norm > tc.grad_clip ? tc.grad_clip / log.grad_norm : 1.0;

  const double t = static_cast<double>(iteration_ + 1);
  const double c1 = 1.0 - std::pow(tc.adam_beta1, t);
  const double c2 = 1.0 - std::pow(tc.adam_beta2, t);
  for (ad::Param* p : store.all()) {
    if (p->adam_m.size() != p->value.size()) {
      p->adam_m = Mat::Zero(p->value.rows(), p->value.cols());
      p->adam_v = Mat::Zero(p->value.rows(), p->value.cols());
    }
    const Mat g = p->grad * clip;
    p->adam_m = tc.adam_beta1 * p->adam_m + (1.0 - tc.adam_beta1) * g;
    p->adam_v = tc.adam_beta2 * p->adam_v + (1.0 - tc.adam_beta2) * g.cwiseProduct(g);
    p->value.array() -= log.lr * (p->adam_m.array() / c1) / ((p->adam_v.array() / c2).sqrt() + tc.adam_eps);
  }
  ++iteration_;
  return log;
}

void Trainer::save(const std::filesystem::path& path) const {
  save_checkpoint(path, net_.params(), config_, static_cast<std::uint64_t>(iteration_));
}

void Trainer::resume(const std::filesystem::path& path) {
  const CheckpointInfo info = load_checkpoint(path, net_.params());
  iteration_ = static_cast<int>(info.iteration);
}

LossReport Trainer::evaluate_loss(const SceneGroundTruth& scene, Scheme scheme) {
  ad::Tape t(false);
  const ForwardResult r = net_.forward(t, scene.image, scheme);
  return total_loss(loss_ctx_, r, scene, 0.0);
}

IterationLog run_training(Trainer& trainer, const std::filesystem::path& out_dir, bool quiet) {
  std::filesystem::create_directories(out_dir);
  trainer.config().save(out_dir / "config_echo.txt");
  std::ofstream log_file(out_dir / "loss_log.txt", trainer.iteration() > 0 ? std::ios::app : std::ios::trunc);
  if (!log_file) throw IoError("cannot write " + (out_dir / "loss_log.txt").string());
  const TrainConfig& tc = trainer.config().train;
  IterationLog last;
  while (trainer.iteration() < tc.iterations) {
    try {
      last = trainer.step();
    } catch (const NonFiniteLossError& e) {
      std::ofstream dump(out_dir / "nonfinite_dump.txt");
      dump << e.what();
      throw;
    }
    log_file << format_log_line(last) << "\n";
    if (!quiet && tc.log_every > 0 && (last.iteration % tc.log_every == 0 || trainer.iteration() == tc.iterations)) {
      std::cout << "iter " << last.iteration << " lr " << last.lr << " total " << last.loss.total << "\n";
    }
    if (tc.checkpoint_every > 0 && trainer.iteration() % tc.checkpoint_every == 0) trainer.save(out_dir / "checkpoint.bin");
  }
  log_file.flush();
  trainer.save(out_dir / "checkpoint.bin");
  return last;
}

}  // namespace aios
