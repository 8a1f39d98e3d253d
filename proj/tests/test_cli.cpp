// CLI contract tests: exit codes, run.json provenance, inspect output, and a
// small gen-data -> train -> eval -> rollout smoke pass through the binary.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "gphyt/datagen.hpp"

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

using namespace gphyt;
namespace fs = std::filesystem;

namespace {

fs::path binary_path() {
  // tests/ and tools/ are sibling build directories
  return fs::path(TOOL_DIR) / "gphyt";
}

struct RunOutput {
  int exit_code = -1;
  std::string output;
};

RunOutput run_cli(const std::string& args) {
  const std::string cmd = binary_path().string() + " " + args + " 2>&1";
  FILE* pipe = popen(cmd.c_str(), "r");
  REQUIRE(pipe != nullptr);
  RunOutput out;
  char buf[4096];
  while (fgets(buf, sizeof(buf), pipe)) out.output += buf;
  const int status = pclose(pipe);
  out.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return out;
}

struct TempDir {
  fs::path path;
  explicit TempDir(const char* tag) {
    path = fs::temp_directory_path() / (std::string("gphyt_cli_") + tag);
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

void write_small_corpus_config(const fs::path& file) {
  std::ofstream os(file);
  os << "[heat2d]\nsystem = heat2d\ntimesteps = 16\ntrajectories = 6\nseed = 11\n\n"
     << "[advdiff2d]\nsystem = advdiff2d\ntimesteps = 16\ntrajectories = 4\nseed = 12\n"
     << "advect_x = -0.4:0.4\nadvect_y = -0.4:0.4\nnu = 0.002:0.005\nholdout = true\n";
}

void write_small_model_config(const fs::path& file) {
  std::ofstream os(file);
  os << "num_layers = 1\nembed_dim = 16\nmlp_dim = 16\nnum_heads = 2\n";
}

void write_small_train_config(const fs::path& file) {
  std::ofstream os(file);
  os << "total_steps = 30\nwarmup_steps = 5\nbatch_size = 4\ncheckpoint_interval = 30\n"
     << "eval_interval = 15\nlog_interval = 10\nval_samples = 8\n";
}

}  // namespace

TEST_CASE("--help exits 0 and prints usage") {
  auto r = run_cli("--help");
  CHECK(r.exit_code == 0);
  CHECK(r.output.find("gen-data") != std::string::npos);
  CHECK(r.output.find("rollout") != std::string::npos);
}

TEST_CASE("usage errors exit 1") {
  CHECK(run_cli("").exit_code == 1);                 // missing subcommand
  CHECK(run_cli("train").exit_code == 1);            // missing required options
  CHECK(run_cli("no-such-command").exit_code == 1);
}

TEST_CASE("missing manifest exits 2 and names the path") {
  TempDir dir("missing");
  write_small_model_config(dir.path / "m.cfg");
  write_small_train_config(dir.path / "t.cfg");
  auto r = run_cli("train --data " + (dir.path / "nope/manifest.json").string() +
                   " --model-config " + (dir.path / "m.cfg").string() + " --train-config " +
                   (dir.path / "t.cfg").string() + " --out " + (dir.path / "out").string());
  CHECK(r.exit_code == 2);
  CHECK(r.output.find("nope/manifest.json") != std::string::npos);
}

TEST_CASE("full pipeline smoke: gen-data, train, eval, rollout, inspect") {
  TempDir dir("smoke");
  write_small_corpus_config(dir.path / "corpus.cfg");
  write_small_model_config(dir.path / "model.cfg");
  write_small_train_config(dir.path / "train.cfg");
  const auto corpus = dir.path / "corpus";
  const auto run_dir = dir.path / "run";

  auto gen = run_cli("gen-data --config " + (dir.path / "corpus.cfg").string() + " --out " +
                     corpus.string());
  REQUIRE(gen.exit_code == 0);
  CHECK(fs::exists(corpus / "manifest.json"));
  CHECK(fs::exists(corpus / "run.json"));

  auto train = run_cli("train --data " + (corpus / "manifest.json").string() + " --model-config " +
                       (dir.path / "model.cfg").string() + " --train-config " +
                       (dir.path / "train.cfg").string() + " --out " + run_dir.string());
  REQUIRE(train.exit_code == 0);
  CHECK(fs::exists(run_dir / "checkpoint.bin"));
  CHECK(fs::exists(run_dir / "metrics.csv"));
  CHECK(fs::exists(run_dir / "run.json"));

  auto eval = run_cli("eval --data " + (corpus / "manifest.json").string() + " --checkpoint " +
                      (run_dir / "checkpoint.bin").string() + " --out " +
                      (dir.path / "eval").string() + " --zero-shot --max-samples 32");
  REQUIRE(eval.exit_code == 0);
  CHECK(eval.output.find("advdiff2d") != std::string::npos);
  CHECK(fs::exists(dir.path / "eval" / "report.csv"));

  auto roll = run_cli("rollout --data " + (corpus / "manifest.json").string() + " --checkpoint " +
                      (run_dir / "checkpoint.bin").string() + " --dataset heat2d --horizon 8 " +
                      "--out " + (dir.path / "roll").string());
  REQUIRE(roll.exit_code == 0);
  CHECK(fs::exists(dir.path / "roll" / "rollout.csv"));
  CHECK(fs::exists(dir.path / "roll" / "rollout_pred.bin"));

  SUBCASE("run.json carries version, config, and output hashes") {
    std::ifstream is(run_dir / "run.json");
    json run;
    is >> run;
    CHECK(run.at("version").get<std::string>().find("gphyt-") == 0);
    CHECK(run.at("command") == "train");
    CHECK(run.at("output_hashes").size() >= 1);
  }
  SUBCASE("inspect summarizes dims and per-channel ranges") {
    auto ins = run_cli("inspect " + (corpus / "heat2d/traj_0000.bin").string());
    REQUIRE(ins.exit_code == 0);
    CHECK(ins.output.find("T=16 H=16 W=32 C=5") != std::string::npos);
    CHECK(ins.output.find("temperature  present") != std::string::npos);
    CHECK(ins.output.find("pressure     masked") != std::string::npos);

    // min/max lines match a brute-force scan of the stored payload
    auto traj = read_trajectory(corpus / "heat2d/traj_0000.bin");
    float lo = std::numeric_limits<float>::infinity(), hi = -lo;
    for (const auto& f : traj.frames) {
      lo = std::min(lo, f.data[kTemperature].minCoeff());
      hi = std::max(hi, f.data[kTemperature].maxCoeff());
    }
    char expected[96];
    std::snprintf(expected, sizeof(expected), "min %-12g max %-12g", double(lo), double(hi));
    CHECK(ins.output.find(expected) != std::string::npos);
  }
  SUBCASE("malformed trajectory file exits 2") {
    std::ofstream bad(dir.path / "bad.bin");
    bad << "not a trajectory\n";
    bad.close();
    CHECK(run_cli("inspect " + (dir.path / "bad.bin").string()).exit_code == 2);
  }
  SUBCASE("gen-data reruns are reproducible (same output hashes)") {
    auto again = run_cli("gen-data --config " + (dir.path / "corpus.cfg").string() + " --out " +
                         (dir.path / "corpus2").string());
    REQUIRE(again.exit_code == 0);
    CHECK(hash_file(corpus / "heat2d/traj_0000.bin") ==
          hash_file(dir.path / "corpus2" / "heat2d/traj_0000.bin"));
  }
}
