#pragma once

// Analytical and seeded-stochastic model of fleet-wide key updates, comparing
// key-only updates against four firmware-update baselines:
//   BL1  full image, restart on failure
//   BL2  delta image, restart on failure
//   BL3  full image, chunked and resumable
//   BL4  delta image, chunked and resumable

#include <cstdint>
#include <filesystem>
#include <ostream>
#include <optional>
#include <string>
#include <vector>

namespace otakey::sim {

inline constexpr double kMB = 1e6;
inline constexpr double kMiB = 1024.0 * 1024.0;

enum class StrategyKind { BL1, BL2, BL3, BL4, OtaKey };
std::string_view to_string(StrategyKind kind);
inline constexpr StrategyKind kAllStrategies[] = {StrategyKind::BL1, StrategyKind::BL2, StrategyKind::BL3,
                                                  StrategyKind::BL4, StrategyKind::OtaKey};

// Per-device delta-processing cost for BL2/BL4, calibrated so BL2 reaches
// about 2000 s for 1000 devices at 32.1 MB, 6.5 MB/s and 5% failures.
inline constexpr double kDeltaOverheadSeconds = 2000.0 / 1050.0 - 0.2 * 32.1 / 6.5;

struct Strategy {
  StrategyKind kind = StrategyKind::BL1;
  double delta_ratio = 0.20;
  double chunk_size = kMiB;  // bytes, BL3/BL4
  double per_device_overhead = 0.0;  // seconds

  // Defaults for `kind`, including the delta overhead for BL2/BL4.
  static Strategy defaults(StrategyKind kind);
  bool delta() const { return kind == StrategyKind::BL2 || kind == StrategyKind::BL4; }
  bool resumable() const { return kind == StrategyKind::BL3 || kind == StrategyKind::BL4; }
  void validate() const;
};

struct ExpectedMode {};
struct StochasticMode {
  std::uint64_t seed = 0;
};

struct FleetConfig {
  std::int64_t n_devices = 1000;
  double bandwidth = 6.5 * kMB;  // bytes/s
  double failure_rate = 0.05;
  double firmware_size = 32.1 * kMB;  // bytes
  double key_payload = 36864.0;  // two 18 KiB key areas
  std::optional<StochasticMode> stochastic;  // Expected mode when empty
  double per_device_service_time = 1.0;  // seconds, OtaKey only

  void validate() const;
};

struct DeviceCost {
  double time_s = 0;
  double bytes = 0;
};

struct SimResult {
  double total_time = 0;  // seconds
  double total_bytes = 0;
  std::vector<DeviceCost> per_device_breakdown;  // filled in stochastic mode
};

// Bytes one successful transfer carries for this strategy.
double payload_bytes(const Strategy& s, const FleetConfig& c);
double single_device_time(const Strategy& s, double firmware_size, double bandwidth,
                          double key_payload = 36864.0);
SimResult fleet_update(const Strategy& s, const FleetConfig& c);
double fleet_volume(const Strategy& s, const FleetConfig& c);

struct GrayReleasePlan {
  std::int64_t batch_size = 100;
  double check_time = 180.0;
};
double gray_release_time(std::int64_t n_devices, const GrayReleasePlan& plan, double per_device_service_time);

struct FirmwareSample {
  std::string name;
  double size_mb;
};
// Typical firmware images used for the single-device comparison.
const std::vector<FirmwareSample>& typical_firmware();
inline constexpr std::int64_t kFleetSizes[] = {1000, 3000, 5000, 8000, 10000};

struct CsvRow {
  std::string strategy;
  std::int64_t n_devices;
  double firmware_mb;
  double time_s;
  double bytes;
};

struct SuiteOptions {
  double delta_ratio = 0.20;
  double failure_rate = 0.05;
  std::optional<std::uint64_t> seed;  // stochastic mode when set
};

std::vector<CsvRow> fig7_rows(const SuiteOptions& opt = {});  // single device, 1 MB/s
std::vector<CsvRow> fleet_rows(const SuiteOptions& opt = {});  // every firmware x fleet size, 6.5 MB/s
std::vector<CsvRow> gray_rows(const SuiteOptions& opt = {});
void write_csv(const std::filesystem::path& path, const std::vector<CsvRow>& rows);
void write_csv(std::ostream& out, const std::vector<CsvRow>& rows);
// Writes fig7.csv, fig8.csv, fig9.csv and gray.csv into `dir`.
std::vector<std::filesystem::path> run_experiment_suite(const std::filesystem::path& dir, const SuiteOptions& opt = {});

}  // namespace otakey::sim
