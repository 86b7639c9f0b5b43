#include <gtest/gtest.h>

#include <filesystem>

#include "otakey/demo.hpp"

using namespace otakey;
using namespace otakey::demo;

TEST(Demo, SingleDevice) {
  DemoOptions o;
  o.devices = 1;
  auto r = demo_end_to_end(o);
  EXPECT_TRUE(r.ok()) << r.to_json().dump();
  EXPECT_EQ(r.provisioned, 1u);
  EXPECT_EQ(r.residual_pks, 0u);
}

TEST(Demo, HundredDevicesWithPowerCut) {
  DemoOptions o;
  o.devices = 100;
  o.fault_device = 37;
  auto r = demo_end_to_end(o);
  EXPECT_TRUE(r.ok()) << r.to_json().dump();
  EXPECT_EQ(r.distinct_aks, 100u);
  EXPECT_EQ(r.distinct_cks, 100u);
  EXPECT_TRUE(r.fault_device_kept_old_key);
  EXPECT_EQ(r.cloud_auth_ok, 100u);
}

TEST(Demo, ManifestRoundTrip) {
  DemoOptions o;
  o.devices = 12;
  o.seed = 9;
  auto m = manifest_for(o);
  auto back = RunManifest::from_json(m.to_json());
  EXPECT_EQ(back.to_json(), m.to_json());
  EXPECT_EQ(back.seed, 9u);
}

TEST(Demo, OutputDirGetsReportAndManifest) {
  auto dir = std::filesystem::temp_directory_path() / "otakey_demo_out";
  std::filesystem::remove_all(dir);
  DemoOptions o;
  o.devices = 3;
  o.output_dir = dir;
  EXPECT_TRUE(demo_end_to_end(o).ok());
  EXPECT_TRUE(std::filesystem::exists(dir / "manifest.json"));
  EXPECT_TRUE(std::filesystem::exists(dir / "report.json"));
  std::filesystem::remove_all(dir);
}

TEST(CrashRun, AcknowledgedKeysSurviveKills) {
  auto dir = std::filesystem::temp_directory_path() / "otakey_crash_run";
  std::filesystem::remove_all(dir);
  CrashRunOptions o;
  o.devices = 100;
  o.kills = 20;
  o.journal_dir = dir;
  auto r = crash_consistency_run(o);
  EXPECT_TRUE(r.ok()) << r.to_json().dump();
  EXPECT_EQ(r.kills_fired, 20u);
  EXPECT_GT(r.checks, 0u);
  std::filesystem::remove_all(dir);
}
