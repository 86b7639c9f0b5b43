#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <string>

namespace {

struct Result {
  int code = -1;
  std::string out;
};

Result run(const std::string& args) {
  std::string cmd = std::string(OTAKEY_CLI_PATH) + " " + args + " 2>/dev/null";
  Result r;
  FILE* p = ::popen(cmd.c_str(), "r");
  if (!p) return r;
  char buf[4096];
  while (auto n = std::fread(buf, 1, sizeof buf, p)) r.out.append(buf, n);
  int status = ::pclose(p);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

}  // namespace

TEST(Cli, HelpAndParseErrors) {
  EXPECT_EQ(run("--help").code, 0);
  EXPECT_EQ(run("--no-such-flag").code, 2);
  EXPECT_EQ(run("adversary sweep --budget 4").code, 2);
  EXPECT_EQ(run("faultsweep --flow sideways").code, 2);
}

TEST(Cli, SimGrayCsv) {
  auto r = run("sim gray");
  EXPECT_EQ(r.code, 0);
  EXPECT_NE(r.out.find("OtaKey-gray,100,0,280,"), std::string::npos);
}

TEST(Cli, FaultsweepPasses) {
  auto r = run("faultsweep --flow ak-rotate");
  EXPECT_EQ(r.code, 0);
  EXPECT_NE(r.out.find("\"ok\": true"), std::string::npos);
}

TEST(Cli, MissingImageIsAnError) { EXPECT_EQ(run("device dump --image /nonexistent/otakey.bin").code, 1); }

TEST(Cli, DeviceLifecycleAcrossProcesses) {
  auto dir = std::filesystem::temp_directory_path() / "otakey_cli_spawn";
  std::filesystem::remove_all(dir);
  auto r = run("demo --devices 3 --spawn --out " + dir.string());
  EXPECT_EQ(r.code, 0) << r.out;
  EXPECT_TRUE(std::filesystem::exists(dir / "report.json"));
  std::filesystem::remove_all(dir);
}
