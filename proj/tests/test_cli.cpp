#include "doctest.h"

#include <cstdlib>
#include <fstream>
#include <sstream>
#include <sys/wait.h>

#include "cardiovae/data.hpp"
#include "test_util.hpp"

namespace fs = std::filesystem;

namespace {

struct Run {
  int code = -1;
  std::string out, err;
};

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::ostringstream s;
  s << f.rdbuf();
  return s.str();
}

Run cli(const testutil::TempDir& dir, const std::string& args) {
  const auto out = dir / "stdout.txt", err = dir / "stderr.txt";
  const std::string cmd = std::string("'") + CARDIOVAE_CLI + "' " + args + " >'" + out.string() + "' 2>'" +
                          err.string() + "'";
  const int status = std::system(cmd.c_str());
  Run r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.out = slurp(out);
  r.err = slurp(err);
  return r;
}

std::string first_line(const std::string& s) { return s.substr(0, s.find('\n')); }

const char* kTinyConfig =
    "image_h = 8\nimage_w = 8\nsignal_len = 128\nchannels = 2,3,4\nlatent_dim = 3\nhead_hidden = 8\n"
    "synth_n = 16\n";

fs::path write_config(const testutil::TempDir& dir) {
  const auto p = dir / "tiny.cfg";
  std::ofstream(p) << kTinyConfig;
  return p;
}

}  // namespace

TEST_CASE("synth-data is deterministic and writes a resolved config") {
  testutil::TempDir dir("cli-synth");
  const auto cfg = write_config(dir);
  const auto a = cli(dir, "synth-data --config " + cfg.string() + " --seed 4 --out " + (dir / "a").string());
  const auto b = cli(dir, "synth-data --config " + cfg.string() + " --seed 4 --out " + (dir / "b").string());
  REQUIRE(a.code == 0);
  REQUIRE(b.code == 0);
  const auto da = cardiovae::read_dataset(first_line(a.out));
  const auto db = cardiovae::read_dataset(first_line(b.out));
  REQUIRE(da.size() == 16);
  REQUIRE(db.size() == 16);
  for (std::size_t i = 0; i < da.size(); ++i) {
    CHECK(da[i].id == db[i].id);
    CHECK(testutil::bitwise_equal(*da[i].image, *db[i].image));
    CHECK(testutil::bitwise_equal(*da[i].signal, *db[i].signal));
    CHECK(da[i].label == db[i].label);
  }
  const auto run_dir = fs::path(first_line(a.out)).parent_path();
  CHECK(run_dir.filename().string().find("-seed4") != std::string::npos);
  const auto resolved = slurp(run_dir / "config.resolved");
  CHECK(resolved.find("seed = 4\n") != std::string::npos);
  CHECK(resolved.find("image_h = 8\n") != std::string::npos);
}

TEST_CASE("pretrain, finetune, evaluate and attribute end to end") {
  testutil::TempDir dir("cli-flow");
  const auto cfg = write_config(dir).string();
  const auto out = (dir / "runs").string();
  const auto synth = cli(dir, "synth-data --config " + cfg + " --n 40 --out " + out);
  REQUIRE(synth.code == 0);
  const auto data = first_line(synth.out);

  const auto pre = cli(dir, "pretrain --config " + cfg + " --data " + data + " --epochs 2 --batch 8 --out " + out);
  REQUIRE_MESSAGE(pre.code == 0, pre.err);
  const fs::path pre_dir = first_line(pre.out);
  for (const char* f : {"checkpoint.cvxg", "best.cvxg", "history.csv", "frechet.csv", "config.resolved"})
    CHECK_MESSAGE(fs::exists(pre_dir / f), f);
  const auto frechet = slurp(pre_dir / "frechet.csv");
  CHECK(frechet.find("cxr,") != std::string::npos);
  CHECK(frechet.find("joint,") != std::string::npos);
  CHECK(slurp(pre_dir / "config.resolved").find("data = " + fs::path(data).lexically_normal().string()) !=
        std::string::npos);

  const auto ckpt = (pre_dir / "checkpoint.cvxg").string();
  const auto fine = cli(dir, "finetune --config " + cfg + " --data " + data + " --checkpoint " + ckpt +
                                 " --epochs 3 --out " + out);
  REQUIRE_MESSAGE(fine.code == 0, fine.err);
  const fs::path fine_dir = first_line(fine.out);
  CHECK(fs::exists(fine_dir / "finetuned.cvxg"));
  CHECK(fs::exists(fine_dir / "finetune_history.csv"));

  const auto eval = cli(dir, "evaluate --config " + cfg + " --data " + data + " --checkpoint " + ckpt +
                                 " --folds 3 --epochs 2 --out " + out);
  REQUIRE_MESSAGE(eval.code == 0, eval.err);
  CHECK(eval.out.find("auroc = ") != std::string::npos);

  const auto attr = cli(dir, "attribute --config " + cfg + " --data " + data + " --checkpoint " +
                                 (fine_dir / "finetuned.cvxg").string() + " --sample " +
                                 cardiovae::read_dataset(data)[0].id + " --steps 16 --out " + out);
  REQUIRE_MESSAGE(attr.code == 0, attr.err);
  CHECK(attr.out.find("_image.pgm") != std::string::npos);
  CHECK(attr.out.find("_summary.txt") != std::string::npos);
}

TEST_CASE("run directories never collide") {
  testutil::TempDir dir("cli-collide");
  const auto cfg = write_config(dir).string();
  const auto a = cli(dir, "synth-data --config " + cfg + " --out " + (dir / "r").string());
  const auto b = cli(dir, "synth-data --config " + cfg + " --out " + (dir / "r").string());
  REQUIRE(a.code == 0);
  REQUIRE(b.code == 0);
  CHECK(first_line(a.out) != first_line(b.out));
}

TEST_CASE("exit codes") {
  testutil::TempDir dir("cli-exit");
  const auto cfg = write_config(dir).string();
  const auto out = " --out " + (dir / "r").string();

  const auto no_cmd = cli(dir, "");
  CHECK(no_cmd.code == 2);

  const auto no_ckpt = cli(dir, "evaluate --data " + (dir / "x").string() + out);
  CHECK(no_ckpt.code == 2);
  CHECK(no_ckpt.err.rfind("error: usage:", 0) == 0);

  const auto bad_flag = cli(dir, "pretrain --no-such-flag" + out);
  CHECK(bad_flag.code == 2);

  const auto bad_key = cli(dir, "synth-data --set bogus=1" + out);
  CHECK(bad_key.code == 3);
  CHECK(bad_key.err.rfind("error: config:", 0) == 0);
  CHECK(bad_key.err.find("bogus") != std::string::npos);

  std::ofstream(dir / "broken.cfg") << "seed = 1\nthis line has no equals\n";
  const auto bad_file = cli(dir, "synth-data --config " + (dir / "broken.cfg").string() + out);
  CHECK(bad_file.code == 3);
  CHECK(bad_file.err.find("broken.cfg:2") != std::string::npos);

  const auto missing_cfg = cli(dir, "synth-data --config " + (dir / "nope.cfg").string() + out);
  CHECK(missing_cfg.code == 4);

  const auto missing_ckpt = cli(dir, "evaluate --config " + cfg + " --data " + (dir / "x").string() +
                                         " --checkpoint " + (dir / "nope.cvxg").string() + out);
  CHECK(missing_ckpt.code == 4);
  CHECK(missing_ckpt.err.rfind("error: io:", 0) == 0);

  std::ofstream(dir / "junk.cvxg") << "not a checkpoint";
  const auto junk = cli(dir, "evaluate --config " + cfg + " --data " + (dir / "x").string() + " --checkpoint " +
                                 (dir / "junk.cvxg").string() + out);
  CHECK(junk.code == 4);
}
