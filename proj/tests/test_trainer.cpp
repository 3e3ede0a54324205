#include <doctest.h>

#include "aios/checkpoint.hpp"
#include "aios/scene.hpp"
#include "aios/trainer.hpp"

#include <filesystem>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>

using namespace aios;

namespace {

const body::BodyModel& model() {
  static const body::BodyModel m = body::make_procedural_model();
  return m;
}

RunConfig small_run() {
  RunConfig c;
  c.model.channels = {8, 8, 16, 16};
  c.model.hidden_dim = 16;
  c.model.heads = 2;
  c.model.ffn_dim = 32;
  c.model.enc_layers = 1;
  c.model.num_candidates = 12;
  c.model.num_body_candidates = 5;
  c.model.dec_layers_s1 = c.model.dec_layers_s2 = c.model.dec_layers_s3 = 1;
  c.train.batch_size = 2;
  c.train.iterations = 10;
  return c;
}

std::vector<SceneGroundTruth> scenes(int n, std::uint64_t seed) { return generate_dataset(SceneConfig{}, model(), n, seed); }

double mean_loss(Trainer& t, const std::vector<SceneGroundTruth>& s) {
  double total = 0.0;
  for (const SceneGroundTruth& x : s) total += t.evaluate_loss(x, t.config().loss.scheme).total;
  return total / static_cast<double>(s.size());
}

std::filesystem::path temp_dir(const std::string& name) {
  const auto p = std::filesystem::temp_directory_path() / ("aios_test_" + name);
  std::filesystem::remove_all(p);
  return p;
}

}  // namespace

TEST_CASE("trainer: ten iterations on two scenes reduce the loss") {
  const auto data = scenes(2, 3);
  Trainer t(small_run(), model(), data);
  const double before = mean_loss(t, data);
  for (int i = 0; i < 10; ++i) t.step();
  CHECK(t.iteration() == 10);
  CHECK(mean_loss(t, data) < before);
}

TEST_CASE("trainer: batches cover every scene once per epoch and the lr drops once") {
  RunConfig c = small_run();
  c.train.batch_size = 3;
  c.train.iterations = 100;
  const auto data = scenes(6, 4);
  Trainer t(c, model(), data);
  std::multiset<int> seen;
  for (int it = 0; it < 2; ++it) {
    for (const auto& [idx, flip] : t.batch(it)) seen.insert(idx);
  }
  for (int i = 0; i < 6; ++i) CHECK(seen.count(i) == 1);
  CHECK(t.batch(7) == t.batch(7));
  CHECK(t.learning_rate(79) == c.train.lr);
  CHECK(t.learning_rate(80) == c.train.lr * c.train.lr_drop_factor);
}

TEST_CASE("trainer: resuming reproduces the next iteration bit for bit") {
  const auto data = scenes(3, 5);
  const auto dir = temp_dir("resume");
  std::filesystem::create_directories(dir);
  RunConfig c = small_run();

  Trainer a(c, model(), data);
  for (int i = 0; i < 3; ++i) a.step();
  a.save(dir / "ck.bin");
  const std::string next = format_log_line(a.step());

  Trainer b(c, model(), data);
  b.resume(dir / "ck.bin");
  CHECK(b.iteration() == 3);
  CHECK(format_log_line(b.step()) == next);
  CHECK(read_checkpoint_info(dir / "ck.bin").config.echo() == c.echo());
  std::filesystem::remove_all(dir);
}

TEST_CASE("trainer: run_training writes the log, echo and checkpoint") {
  const auto data = scenes(2, 6);
  const auto dir = temp_dir("run");
  RunConfig c = small_run();
  c.train.iterations = 3;
  c.loss.scheme = Scheme::kS3Only;
  Trainer t(c, model(), data);
  run_training(t, dir, true);
  std::ifstream log(dir / "loss_log.txt");
  std::string line;
  int lines = 0;
  while (std::getline(log, line)) {
    CHECK(line.rfind("iteration=" + std::to_string(lines) + " ", 0) == 0);
    CHECK(line.find("s3.param=") != std::string::npos);
    CHECK(line.find("s2.param") == std::string::npos);
    CHECK(line.find("s2.kp3d") == std::string::npos);
    ++lines;
  }
  CHECK(lines == 3);
  CHECK(RunConfig::load(dir / "config_echo.txt").echo() == c.echo());
  CHECK(read_checkpoint_info(dir / "checkpoint.bin").iteration == 3);
  std::filesystem::remove_all(dir);
}

TEST_CASE("trainer: a non-finite loss aborts with a diagnostic dump") {
  auto data = scenes(2, 7);
  for (SceneGroundTruth& s : data) s.image(0, 0) = std::numeric_limits<double>::quiet_NaN();
  const auto dir = temp_dir("nan");
  Trainer t(small_run(), model(), data);
  CHECK_THROWS_AS(run_training(t, dir, true), NonFiniteLossError);
  std::ifstream dump(dir / "nonfinite_dump.txt");
  REQUIRE(dump);
  std::stringstream ss;
  ss << dump.rdbuf();
  CHECK(ss.str().find("non-finite loss term 's0.cls'") != std::string::npos);
  std::filesystem::remove_all(dir);
}
