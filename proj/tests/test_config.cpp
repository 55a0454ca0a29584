#include "doctest.h"

#include <fstream>

#include "cardiovae/config.hpp"
#include "test_util.hpp"

using namespace cardiovae;

namespace {

std::string message_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::config);
    return e.what();
  }
  FAIL("expected a config error");
  return "";
}

}  // namespace

TEST_CASE("defaults") {
  const auto s = resolve_settings({});
  CHECK(s.arch == ArchConfig::desk());
  CHECK(s.pretrain.batch_size == 128);
  CHECK(s.pretrain.epochs == 100);
  CHECK(s.finetune.batch_size == 32);
  CHECK(s.finetune.epochs == 50);
  CHECK(s.pretrain.adam.lr == 1e-3);
  CHECK(s.folds == 10);
  CHECK(s.synth.image_h == 64);
  CHECK(s.synth.signal_len == 4096);
}

TEST_CASE("parsing and resolution") {
  const auto cfg = parse_config_text(
      "# comment\n\narch = paper\nlatent_dim = 32\nseed = 7\nstreams = joint-only\nmodality = ecg\n"
      "channels = 4, 8, 16\nlambda_grid = 0.5,1\nsynth_positive_fraction = 0.3\n",
      "run.cfg");
  CHECK(cfg.at("seed").origin == "run.cfg:5");
  const auto s = resolve_settings(cfg);
  CHECK(s.arch.image_h == 224);
  CHECK(s.arch.signal_len == 60000);
  CHECK(s.arch.latent_dim == 32);
  CHECK(s.arch.channels == std::array<std::size_t, 3>{4, 8, 16});
  CHECK(s.pretrain.seed == 7);
  CHECK(s.finetune.seed == 7);
  CHECK(s.synth.seed == 7);
  CHECK(s.pretrain.streams == StreamMode::joint_only);
  CHECK(s.finetune.modality == Modality::ecg);
  CHECK(s.lambda_grid == std::vector<double>{0.5, 1.0});
  CHECK(s.synth.positive_fraction == 0.3);
  CHECK(s.synth.image_h == 224);
}

TEST_CASE("the preset applies before individual keys regardless of order") {
  const auto s = resolve_settings(parse_config_text("latent_dim = 8\narch = paper\n", "x"));
  CHECK(s.arch.latent_dim == 8);
  CHECK(s.arch.image_h == 224);
}

TEST_CASE("overrides replace file values") {
  auto base = parse_config_text("seed = 1\nfolds = 5\n", "file");
  merge_config(base, {{"seed", {"9", "--seed"}}});
  const auto s = resolve_settings(base);
  CHECK(s.seed == 9);
  CHECK(s.folds == 5);
}

TEST_CASE("errors carry line numbers") {
  const auto m1 = message_of([] { parse_config_text("seed = 1\nno equals here\n= 3\nseed = 2\n", "a.cfg"); });
  CHECK(m1.find("a.cfg:2") != std::string::npos);
  CHECK(m1.find("a.cfg:3") != std::string::npos);
  CHECK(m1.find("a.cfg:4") != std::string::npos);
  CHECK(m1.find("duplicate") != std::string::npos);

  const auto m2 = message_of([] { resolve_settings(parse_config_text("seed = 1\nbogus = 2\nfolds = x\n", "b.cfg")); });
  CHECK(m2.find("b.cfg:2: unknown key 'bogus'") != std::string::npos);
  CHECK(m2.find("b.cfg:3: folds") != std::string::npos);

  CHECK(message_of([] { resolve_settings(parse_config_text("streams = both\n", "c")); }).find("c:1") !=
        std::string::npos);
  message_of([] { resolve_settings(parse_config_text("folds = 1\n", "c")); });
  message_of([] { resolve_settings(parse_config_text("pretrain_batch = 0\n", "c")); });
  message_of([] { resolve_settings(parse_config_text("latent_dim = -3\n", "c")); });
  message_of([] { resolve_settings(parse_config_text("lambda_cxr = nan\n", "c")); });
  message_of([] { resolve_settings(parse_config_text("channels = 1,2\n", "c")); });
  message_of([] { resolve_settings(parse_config_text("ig_steps = 4\n", "c")); });
}

TEST_CASE("rendered settings replay to the same settings") {
  const auto s = resolve_settings(parse_config_text(
      "arch = desk\nimage_w = 48\nlambda_cxr = 0.1\nmax_beta = 0.3\nanneal_steps = 100\nsynth_noise_seed = 42\n"
      "reduction = sum\npretrain_lr = 0.0003\n",
      "x"));
  const auto text = render_settings(s);
  const auto again = resolve_settings(parse_config_text(text, "resolved"));
  CHECK(render_settings(again) == text);
  CHECK(again.arch == s.arch);
  CHECK(again.objective.lambda_cxr == 0.1);
  CHECK(again.objective.reduction == BatchReduction::sum);
  CHECK(again.synth.noise_seed == 42u);
  CHECK(again.pretrain.adam.lr == 0.0003);

  std::size_t lines = 0;
  for (char c : text) lines += c == '\n';
  CHECK(lines == config_keys().size());
}

TEST_CASE("config files") {
  testutil::TempDir dir("config");
  std::ofstream(dir / "run.cfg") << "seed = 3\n";
  CHECK(resolve_settings(read_config_file(dir / "run.cfg")).seed == 3);
  try {
    read_config_file(dir / "missing.cfg");
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::io);
  }
}
