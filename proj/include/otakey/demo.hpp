#pragma once

// End-to-end runs: a fleet of emulated devices provisioned and updated
// against a live agent and cloud stub on loopback sockets, and a crash run
// that kills the agent repeatedly while devices are being provisioned.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace otakey::demo {

// Everything needed to repeat a run.
struct RunManifest {
  std::string scenario;
  std::uint64_t seed = 0;
  nlohmann::json components;
  std::string output_dir;

  nlohmann::json to_json() const;
  static RunManifest from_json(const nlohmann::json& j);
};

struct DemoOptions {
  std::size_t devices = 100;
  std::uint64_t seed = 1;
  // This device loses power in the middle of its cloud-key update.
  std::optional<std::size_t> fault_device;
  // Worker threads (or concurrent processes with spawn). Above 1 the keys
  // depend on scheduling, so only the report's counts are reproducible.
  unsigned parallel = 1;
  // Run each device step as a separate `otakey device ...` process.
  bool spawn = false;
  std::filesystem::path executable;
  // Where images, the journal, manifest.json and report.json go. Required
  // with spawn; optional otherwise.
  std::filesystem::path output_dir;
};

struct DemoReport {
  std::size_t devices = 0;
  std::size_t provisioned = 0;
  std::size_t updated = 0;
  std::size_t distinct_aks = 0;
  std::size_t distinct_cks = 0;
  std::size_t residual_pks = 0;
  std::size_t cloud_auth_ok = 0;
  std::optional<std::size_t> fault_device;
  bool fault_device_kept_old_key = false;
  std::vector<std::string> failures;
  double seconds = 0;

  bool ok() const;
  nlohmann::json to_json() const;
};

DemoReport demo_end_to_end(const DemoOptions& options);
RunManifest manifest_for(const DemoOptions& options);

struct CrashRunOptions {
  std::size_t devices = 100;
  std::size_t kills = 20;
  std::uint64_t seed = 1;
  std::filesystem::path journal_dir;
};

struct CrashRunReport {
  std::size_t devices = 0;
  std::size_t kills_planned = 0;
  std::size_t kills_fired = 0;
  std::size_t acknowledged = 0;
  std::size_t checks = 0;
  std::vector<std::string> violations;

  bool ok() const { return violations.empty() && kills_fired == kills_planned; }
  nlohmann::json to_json() const;
};

// Provisions devices (agent key, then cloud key) while killing the agent at
// `kills` random journal appends, restarting it from its journal each time.
// After every restart the reloaded registry must hold every key the agent
// had acknowledged.
CrashRunReport crash_consistency_run(const CrashRunOptions& options);

}  // namespace otakey::demo
