#include <gtest/gtest.h>

#include <sys/wait.h>
#include <unistd.h>

#include <cstdio>
#include <filesystem>
#include <string>

#include "voxpatch/voxb.hpp"

namespace fs = std::filesystem;

namespace {

struct Result {
  int code = -1;
  std::string out;
};

// runs the CLI through the shell, stderr folded into stdout
Result run(const std::string& args) {
  const std::string cmd = std::string(VOXPATCH_CLI) + " " + args + " 2>&1";
  Result r;
  FILE* f = popen(cmd.c_str(), "r");
  if (f == nullptr) return r;
  char buf[4096];
  while (std::fgets(buf, sizeof(buf), f) != nullptr) r.out += buf;
  const int status = pclose(f);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    dir = fs::temp_directory_path() / ("voxpatch_cli_" + std::to_string(::getpid()));
    fs::remove_all(dir);
    fs::create_directories(dir);
  }
  void TearDown() override { fs::remove_all(dir); }
  std::string path(const std::string& rel) const { return (dir / rel).string(); }
  fs::path dir;
};

}  // namespace

TEST_F(Cli, GenDataIsDeterministic) {
  auto a = run("gen-data --smoke --seed 7 --out " + path("a"));
  auto b = run("gen-data --smoke --seed 7 --out " + path("b"));
  ASSERT_EQ(a.code, 0) << a.out;
  ASSERT_EQ(b.code, 0) << b.out;
  // "manifest <path> <hash>"
  auto hash = [](const std::string& s) { return s.substr(s.find_last_of(' ') + 1); };
  EXPECT_EQ(hash(a.out), hash(b.out));
  EXPECT_TRUE(fs::exists(path("a/data/vocab.txt")));

  auto c = run("gen-data --smoke --seed 8 --out " + path("c"));
  EXPECT_NE(hash(a.out), hash(c.out));
}

TEST_F(Cli, ErrorsMapToExitCodes) {
  auto bad_flag = run("gen-data --no-such-flag");
  EXPECT_EQ(bad_flag.code, 23);
  EXPECT_EQ(bad_flag.out.rfind("error: UsageError:", 0), 0u) << bad_flag.out;

  auto bad_value = run("gen-data --out " + path("x") + " --set grid=abc");
  EXPECT_EQ(bad_value.code, 16);
  EXPECT_NE(bad_value.out.find("ConfigError"), std::string::npos);

  auto missing = run("complete --out " + path("x") + " --input " + path("nope.voxb") +
                     " --caption 'a chair' --output " + path("o.voxb"));
  EXPECT_EQ(missing.code, 24);
}

TEST_F(Cli, CompleteRejectsWrongGridSize) {
  const auto run_dir = path("r");
  ASSERT_EQ(run("gen-data --smoke --out " + run_dir).code, 0);
  auto vae = run("train-vae --out " + run_dir + " --steps 2");
  ASSERT_EQ(vae.code, 0) << vae.out;

  voxpatch::voxb::save(path("big.voxb"), voxpatch::VoxelGrid(voxpatch::Dims3::cube(32)));
  auto r = run("complete --out " + run_dir + " --from " + run_dir + "/ckpt/vae.ckpt --input " + path("big.voxb") +
               " --caption 'a chair' --output " + path("o.voxb"));
  EXPECT_EQ(r.code, 10);
  EXPECT_NE(r.out.find("DimensionMismatch"), std::string::npos) << r.out;
  EXPECT_FALSE(fs::exists(path("o.voxb")));
}
