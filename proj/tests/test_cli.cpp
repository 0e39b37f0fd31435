// End-to-end checks of the command-line surface: subcommands, exit codes,
// file outputs, and cross-run determinism of every artifact.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "diffmoe/analysis.hpp"
#include "diffmoe/checkpoint.hpp"

using namespace diffmoe;

namespace {

const std::string kCli = DIFFMOE_CLI_PATH;

std::string scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("diffmoe_cli_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir.string();
}

int run(const std::string& args) {
  const std::string cmd = kCli + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WEXITSTATUS(status);
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

const std::string kTrainFlags =
    " --blocks 2 --hidden 16 --heads 2 --experts 2 --steps 6 --batch 4"
    " --data-size 64";

}  // namespace

TEST_CASE("usage errors exit 1, unknown flags rejected") {
  CHECK(run("") == 1);
  CHECK(run("frobnicate") == 1);
  CHECK(run("train --no-such-flag 1") == 1);
  CHECK(run("sample") == 1);  // missing required --ckpt
  CHECK(run("--help") == 0);
}

TEST_CASE("missing checkpoint is a usage error; corrupt one is a runtime error") {
  CHECK(run("sample --ckpt /nonexistent/ck.bin") == 1);
  const std::string dir = scratch_dir("badckpt");
  std::ofstream(dir + "/ck.bin") << "junk";
  CHECK(run("sample --ckpt " + dir + "/ck.bin --out " + dir) == 2);
}

TEST_CASE("train, sample, analyze, sweep pipeline") {
  const std::string dir = scratch_dir("pipeline");
  REQUIRE(run("train --routing diffmoe --objective flow --seed 9" + kTrainFlags +
              " --out " + dir) == 0);
  CHECK(std::filesystem::exists(dir + "/ckpt.bin"));
  CHECK(std::filesystem::exists(dir + "/log.jsonl"));
  CHECK(std::filesystem::exists(dir + "/log.timing.jsonl"));

  REQUIRE(run("sample --ckpt " + dir + "/ckpt.bin --steps 6 --sampler euler --n 4"
              " --seed 1 --out " + dir) == 0);
  CHECK(std::filesystem::exists(dir + "/samples.bin"));
  CHECK(std::filesystem::exists(dir + "/manifest.jsonl"));
  Tensor samples = read_sample_container(dir + "/samples.bin");
  CHECK(samples.rows() == 4);
  CHECK(samples.cols() == 64);

  REQUIRE(run("analyze --ckpt " + dir + "/ckpt.bin --manifest " + dir +
              "/manifest.jsonl --steps 4 --n 4 --out " + dir) == 0);
  for (const char* f : {"/capacity_trace.csv", "/layer_expert.csv",
                        "/class_ranking.csv", "/activated_params.csv"})
    CHECK(std::filesystem::exists(dir + f));

  REQUIRE(run("sweep --ckpt " + dir + "/ckpt.bin --grid 0.9,0.5,0.1 --steps 3 --n 4"
              " --heldout 64 --out " + dir) == 0);
  CHECK(std::filesystem::exists(dir + "/sweep.csv"));
  const std::string sweep = slurp(dir + "/sweep.csv");
  CHECK(sweep.find("dynamic") != std::string::npos);
}

TEST_CASE("analyze rejects a manifest from a different checkpoint") {
  const std::string a = scratch_dir("mismatch_a");
  const std::string b = scratch_dir("mismatch_b");
  REQUIRE(run("train --routing diffmoe --objective flow --seed 9" + kTrainFlags +
              " --out " + a) == 0);
  REQUIRE(run("train --routing diffmoe --objective flow --seed 10" + kTrainFlags +
              " --out " + b) == 0);
  REQUIRE(run("sample --ckpt " + a + "/ckpt.bin --steps 4 --n 2 --out " + a) == 0);
  CHECK(run("analyze --ckpt " + b + "/ckpt.bin --manifest " + a + "/manifest.jsonl"
            " --steps 2 --n 2 --out " + b) == 2);
}

TEST_CASE("config file values are overridden by explicit flags") {
  const std::string dir = scratch_dir("config");
  {
    std::ofstream cfg(dir + "/toy.cfg");
    cfg << "routing=tc\n"
        << "objective=flow\n"
        << "blocks=2\n"
        << "hidden=16\n"
        << "heads=2\n"
        << "experts=2\n"
        << "steps=4\n"
        << "batch=4\n"
        << "data-size=64\n"
        << "seed=3\n";
  }
  REQUIRE(run("train --config " + dir + "/toy.cfg --out " + dir) == 0);
  Checkpoint from_file = load_checkpoint(dir + "/ckpt.bin");
  CHECK(from_file.config.routing == RoutingKind::TokenChoice);
  CHECK(from_file.state.step == 4);

  // flag wins over the file
  REQUIRE(run("train --config " + dir + "/toy.cfg --routing dense --steps 2 --out " +
              dir) == 0);
  Checkpoint overridden = load_checkpoint(dir + "/ckpt.bin");
  CHECK(overridden.config.routing == RoutingKind::Dense);
  CHECK(overridden.state.step == 2);
}

TEST_CASE("DIFFMOE_OUT provides the default output root") {
  const std::string dir = scratch_dir("envroot");
  const std::string cmd = "DIFFMOE_OUT=" + dir + " " + kCli +
                          " train --routing dense --objective flow --seed 9" +
                          kTrainFlags + " >/dev/null 2>&1";
  REQUIRE(WEXITSTATUS(std::system(cmd.c_str())) == 0);
  CHECK(std::filesystem::exists(dir + "/ckpt.bin"));
}

TEST_CASE("identical seed and config give bit-identical artifacts") {
  const std::string a = scratch_dir("det_a");
  const std::string b = scratch_dir("det_b");
  const std::string train_cmd =
      "train --routing diffmoe --objective flow --seed 9" + kTrainFlags;
  REQUIRE(run(train_cmd + " --out " + a) == 0);
  REQUIRE(run(train_cmd + " --out " + b) == 0);
  CHECK(slurp(a + "/log.jsonl") == slurp(b + "/log.jsonl"));
  CHECK(slurp(a + "/ckpt.bin") == slurp(b + "/ckpt.bin"));

  const std::string sample_cmd = " --steps 5 --sampler euler --n 3 --seed 2";
  REQUIRE(run("sample --ckpt " + a + "/ckpt.bin" + sample_cmd + " --out " + a) == 0);
  REQUIRE(run("sample --ckpt " + b + "/ckpt.bin" + sample_cmd + " --out " + b) == 0);
  CHECK(slurp(a + "/samples.bin") == slurp(b + "/samples.bin"));
  CHECK(slurp(a + "/manifest.jsonl") == slurp(b + "/manifest.jsonl"));
}

TEST_CASE("resume continues from a cadence checkpoint") {
  const std::string dir = scratch_dir("resume");
  REQUIRE(run("train --routing diffmoe --objective flow --blocks 2 --hidden 16"
              " --heads 2 --experts 2 --steps 6 --batch 4 --data-size 64 --seed 9"
              " --ckpt-every 3 --out " + dir) == 0);
  REQUIRE(std::filesystem::exists(dir + "/ckpt_step3.bin"));
  const std::string resumed = scratch_dir("resumed");
  REQUIRE(run("train --routing diffmoe --objective flow --blocks 2 --hidden 16"
              " --heads 2 --experts 2 --steps 6 --batch 4 --data-size 64 --seed 9"
              " --resume " + dir + "/ckpt_step3.bin --out " + resumed) == 0);
  CHECK(slurp(dir + "/ckpt.bin") == slurp(resumed + "/ckpt.bin"));
}
