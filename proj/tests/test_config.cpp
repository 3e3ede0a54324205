#include <doctest.h>

#include "aios/commands.hpp"
#include "aios/config.hpp"

#include <filesystem>

using namespace aios;

TEST_CASE("config: defaults echo and parse back identically") {
  const RunConfig c;
  CHECK_NOTHROW(c.validate());
  const RunConfig d = RunConfig::parse(c.echo());
  CHECK(d.echo() == c.echo());
}

TEST_CASE("config: non-default values survive the echo exactly") {
  RunConfig c;
  c.set("train.lr", "0.1");
  c.set("loss.oks.lhand", "0.30000000000000004");
  c.set("model.variant", "naive");
  c.set("loss.scheme", "s3only");
  c.set("model.channels", "8,16,32,32");
  c.set("scene.overlap_bias", "false");
  c.set("data.seed", "18446744073709551615");
  const RunConfig d = RunConfig::parse(c.echo());
  CHECK(d.train.lr == 0.1);
  CHECK(d.loss.oks[1] == 0.30000000000000004);
  CHECK(d.model.variant == Variant::kNaive);
  CHECK(d.loss.scheme == Scheme::kS3Only);
  CHECK(d.model.channels[0] == 8);
  CHECK(!d.scene.overlap_bias);
  CHECK(d.data.seed == 18446744073709551615ULL);
  CHECK(d.echo() == c.echo());

  const auto path = std::filesystem::temp_directory_path() / "aios_test_config.txt";
  c.save(path);
  CHECK(RunConfig::load(path).echo() == c.echo());
  std::filesystem::remove(path);
}

TEST_CASE("config: unknown keys and bad values are rejected") {
  RunConfig c;
  CHECK_THROWS_AS(c.set("model.hiden_dim", "64"), ConfigError);
  CHECK_THROWS_AS(c.set("train.lr", "fast"), ConfigError);
  CHECK_THROWS_AS(c.set("model.variant", "medium"), ConfigError);
  CHECK_THROWS_AS(RunConfig::parse("train.lr = 1e-4\nbogus = 1\n"), ConfigError);
  CHECK_THROWS_AS(RunConfig::parse("no equals sign\n"), ConfigError);
  CHECK_NOTHROW(RunConfig::parse("# comment\n\ntrain.lr = 1e-3\n"));
}

TEST_CASE("config: validation catches inconsistent model settings") {
  RunConfig c;
  c.model.num_body_candidates = c.model.num_candidates + 1;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = RunConfig{};
  c.model.num_candidates = 337;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = RunConfig{};
  c.scene.width = 60;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = RunConfig{};
  c.model.hidden_dim = 30;
  CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("config: command-line resolution") {
  CommandOptions o;
  o.seed = 9;
  o.variant = "naive";
  o.scheme = "all";
  o.threshold = "agora-0.3";
  o.overrides = {"train.iterations = 5", "eval.match_threshold=0.1"};
  const RunConfig c = resolve_config(o);
  CHECK(c.data.seed == 9);
  CHECK(c.train.seed == 9);
  CHECK(c.model.init_seed == 9);
  CHECK(c.model.variant == Variant::kNaive);
  CHECK(c.loss.scheme == Scheme::kAll);
  CHECK(c.eval.threshold == 0.3);
  CHECK(c.train.iterations == 5);
  CHECK(c.eval.match_threshold == 0.1);

  CHECK(parse_threshold("agora-0.5") == 0.5);
  CHECK(parse_threshold("0.25") == 0.25);
  CHECK_THROWS_AS(parse_threshold("agora-0.7"), ConfigError);
  CHECK_THROWS_AS(parse_threshold("0.5x"), ConfigError);
  o.overrides = {"train.iterations"};
  CHECK_THROWS_AS(resolve_config(o), ConfigError);
}
