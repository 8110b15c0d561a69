#include <doctest.h>
#include <sys/wait.h>

#include <cstdlib>
#include <fstream>
#include <sstream>
#include <string>

#include "test_util.hpp"

using cgt::testing::TempDir;
namespace fs = std::filesystem;

namespace {

const std::string kTiny =
    " --s 2 --L 2 --set sbm_nodes=120 --set sbm_dim=6 --k 5 --dim 16 --heads 2 --layers 1 --epochs 1"
    " --models mean,sum --gnn-epochs 5 --gnn-repeats 1";

// Runs the tool with output captured to `log`; returns the exit status.
int run_tool(const std::string& args, const fs::path& log) {
  const std::string cmd = std::string("\"") + CGT_TOOL_PATH + "\" " + args + " > \"" + log.string() + "\" 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

}  // namespace

TEST_CASE("version and usage errors") {
  TempDir dir("cli-usage");
  CHECK(run_tool("--version", dir / "log") == 0);
  CHECK(slurp(dir / "log").find("cgt") != std::string::npos);
  CHECK(run_tool("--help", dir / "log") == 0);
  CHECK(run_tool("frobnicate", dir / "log") == 2);
  CHECK(run_tool("sample --s notanumber --run " + (dir / "r").string(), dir / "log") == 2);
  CHECK(run_tool("sample --set colour=red --run " + (dir / "r").string(), dir / "log") == 2);
}

TEST_CASE("graph utilities") {
  TempDir dir("cli-graph");
  REQUIRE(run_tool("graph sbm " + (dir / "g").string() + " --nodes 50 --dim 3 --seed 4", dir / "log") == 0);
  REQUIRE(run_tool("graph save " + (dir / "g").string() + " " + (dir / "h").string(), dir / "log") == 0);
  for (const auto* f : {"edges.tsv", "features.csv", "labels.tsv"}) {
    CHECK(slurp(dir / "g" / f) == slurp(dir / "h" / f));
  }
  CHECK(run_tool("graph save " + (dir / "nothing").string() + " " + (dir / "x").string(), dir / "log") == 3);
}

TEST_CASE("stage verbs, exit codes and the report") {
  TempDir dir("cli-stages");
  const std::string run = " --run " + (dir / "run").string();
  CHECK(run_tool("train" + run + kTiny, dir / "log") == 3);
  REQUIRE(run_tool("sample" + run + kTiny, dir / "log") == 0);
  REQUIRE(run_tool("quantize" + run, dir / "log") == 0);
  // Config recorded in the manifest is reused; overriding an upstream key is refused.
  CHECK(run_tool("train" + run + " --k 6", dir / "log") == 2);
  CHECK(slurp(dir / "log").find("config differs") != std::string::npos);
  REQUIRE(run_tool("train" + run, dir / "log") == 0);
  REQUIRE(run_tool("generate" + run, dir / "log") == 0);
  REQUIRE(run_tool("bench" + run, dir / "log") == 0);
  CHECK(slurp(dir / "log").find("Benchmark effectiveness") != std::string::npos);
  REQUIRE(run_tool("stats" + run, dir / "log") == 0);
  REQUIRE(run_tool("report" + run, dir / "log") == 0);
  CHECK(slurp(dir / "log").find("Privacy") != std::string::npos);

  // Stale input, then recovery through --upstream.
  {
    std::ofstream out(dir / "run" / "variants" / "base" / "tokens_train.tsv", std::ios::app);
    out << "\n";
  }
  CHECK(run_tool("train" + run, dir / "log") == 2);
  CHECK(slurp(dir / "log").find("stale") != std::string::npos);
  CHECK(run_tool("train --upstream" + run, dir / "log") == 0);

  // A held lock.
  { std::ofstream(dir / "run" / "run.lock") << "x"; }
  CHECK(run_tool("train" + run, dir / "log") == 2);
  fs::remove(dir / "run" / "run.lock");
  CHECK(run_tool("report --run " + (dir / "empty").string(), dir / "log") == 3);
}

TEST_CASE("pipeline with a config file") {
  TempDir dir("cli-config");
  {
    std::ofstream conf(dir / "run.conf");
    conf << "# tiny run\ns = 2\nL = 2\nsbm_nodes = 120\nsbm_dim = 6\nk = 5\ndim = 16\nheads = 2\n"
            "layers = 1\nepochs = 1\ngnn_models = mean\ngnn_epochs = 5\ngnn_repeats = 1\nseed = 3\n";
  }
  const std::string run = " --run " + (dir / "run").string();
  REQUIRE(run_tool("pipeline --config " + (dir / "run.conf").string() + " --seed 8" + run, dir / "log") == 0);
  const std::string manifest = slurp(dir / "run" / "manifest.json");
  // Named flags take precedence over the file.
  CHECK(manifest.find("\"seed\": \"8\"") != std::string::npos);
  CHECK(manifest.find("\"gnn_models\": \"mean\"") != std::string::npos);
  CHECK(fs::exists(dir / "run" / "report.txt"));
  CHECK(run_tool("pipeline --config " + (dir / "missing.conf").string() + run, dir / "log") == 2);
}
