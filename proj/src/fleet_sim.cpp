#include "otakey/fleet_sim.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>

#include "otakey/error.hpp"

namespace otakey::sim {

std::string_view to_string(StrategyKind kind) {
  switch (kind) {
    case StrategyKind::BL1: return "BL1";
    case StrategyKind::BL2: return "BL2";
    case StrategyKind::BL3: return "BL3";
    case StrategyKind::BL4: return "BL4";
    case StrategyKind::OtaKey: return "OtaKey";
  }
  return "?";
}

Strategy Strategy::defaults(StrategyKind kind) {
  Strategy s;
  s.kind = kind;
  if (s.delta()) s.per_device_overhead = kDeltaOverheadSeconds;
  return s;
}

void Strategy::validate() const {
  if (!(delta_ratio > 0.0 && delta_ratio <= 1.0)) throw Error(ErrorCode::Config, "delta_ratio must be in (0, 1]");
  if (!(chunk_size > 0.0)) throw Error(ErrorCode::Config, "chunk_size must be positive");
  if (per_device_overhead < 0.0) throw Error(ErrorCode::Config, "per_device_overhead must be >= 0");
}

void FleetConfig::validate() const {
  if (n_devices < 0) throw Error(ErrorCode::Config, "n_devices must be >= 0");
  if (!(bandwidth > 0.0)) throw Error(ErrorCode::Config, "bandwidth must be positive");
  if (!(failure_rate >= 0.0 && failure_rate < 1.0)) throw Error(ErrorCode::Config, "failure_rate must be in [0, 1)");
  if (firmware_size < 0.0 || key_payload < 0.0) throw Error(ErrorCode::Config, "sizes must be >= 0");
}

double payload_bytes(const Strategy& s, const FleetConfig& c) {
  if (s.kind == StrategyKind::OtaKey) return c.key_payload;
  return s.delta() ? s.delta_ratio * c.firmware_size : c.firmware_size;
}

double single_device_time(const Strategy& s, double firmware_size, double bandwidth, double key_payload) {
  s.validate();
  if (!(bandwidth > 0.0)) throw Error(ErrorCode::Config, "bandwidth must be positive");
  switch (s.kind) {
    case StrategyKind::BL1:
    case StrategyKind::BL3:
      return firmware_size / bandwidth + s.per_device_overhead;
    case StrategyKind::BL2:
    case StrategyKind::BL4:
      return s.delta_ratio * firmware_size / bandwidth + s.per_device_overhead;
    case StrategyKind::OtaKey:
      return key_payload / bandwidth + s.per_device_overhead;
  }
  return 0.0;
}

namespace {

// Share of one transfer that is resent after a failure.
double resend_fraction(const Strategy& s, double payload) {
  if (!s.resumable() || payload <= 0.0) return 1.0;
  return std::min(1.0, s.chunk_size / payload);
}

// Time for one successful transfer, excluding retransmission.
double base_time(const Strategy& s, const FleetConfig& c) {
  if (s.kind == StrategyKind::OtaKey) return c.per_device_service_time;
  return payload_bytes(s, c) / c.bandwidth + s.per_device_overhead;
}

}  // namespace

SimResult fleet_update(const Strategy& s, const FleetConfig& c) {
  s.validate();
  c.validate();
  SimResult r;
  double payload = payload_bytes(s, c);
  double t = base_time(s, c);
  double frac = resend_fraction(s, payload);
  auto n = static_cast<double>(c.n_devices);

  if (!c.stochastic) {
    double factor = 1.0 + c.failure_rate * frac;
    r.total_time = n * factor * t;
    r.total_bytes = n * factor * payload;
    return r;
  }

  // One Bernoulli failure draw per device transfer; a failed transfer is
  // retransmitted once (whole payload, or one chunk when resumable).
  std::mt19937_64 rng(c.stochastic->seed);
  std::bernoulli_distribution fails(c.failure_rate);
  r.per_device_breakdown.reserve(static_cast<std::size_t>(c.n_devices));
  for (std::int64_t i = 0; i < c.n_devices; ++i) {
    double factor = fails(rng) ? 1.0 + frac : 1.0;
    DeviceCost cost{factor * t, factor * payload};
    r.total_time += cost.time_s;
    r.total_bytes += cost.bytes;
    r.per_device_breakdown.push_back(cost);
  }
  return r;
}

double fleet_volume(const Strategy& s, const FleetConfig& c) { return fleet_update(s, c).total_bytes; }

double gray_release_time(std::int64_t n_devices, const GrayReleasePlan& plan, double per_device_service_time) {
  if (plan.batch_size <= 0) throw Error(ErrorCode::Config, "batch_size must be positive");
  if (n_devices <= 0) return 0.0;
  auto batches = (n_devices + plan.batch_size - 1) / plan.batch_size;
  return static_cast<double>(n_devices) * per_device_service_time + static_cast<double>(batches) * plan.check_time;
}

const std::vector<FirmwareSample>& typical_firmware() {
  static const std::vector<FirmwareSample> kSamples{
      {"IoT Gateway (f1)", 9.68},
      {"DS-2CD2523G0-IS (f2)", 32.1},
      {"DJI Air2 (f3)", 175.84},
      {"Insta360OneRFW (f4)", 76.1},
  };
  return kSamples;
}

namespace {

Strategy strategy_for(StrategyKind kind, const SuiteOptions& opt) {
  auto s = Strategy::defaults(kind);
  s.delta_ratio = opt.delta_ratio;
  return s;
}

}  // namespace

std::vector<CsvRow> fig7_rows(const SuiteOptions& opt) {
  std::vector<CsvRow> rows;
  for (const auto& fw : typical_firmware()) {
    for (auto kind : kAllStrategies) {
      auto s = strategy_for(kind, opt);
      FleetConfig c;
      c.n_devices = 1;
      c.bandwidth = 1.0 * kMB;
      c.firmware_size = fw.size_mb * kMB;
      double t = single_device_time(s, c.firmware_size, c.bandwidth, c.key_payload);
      rows.push_back({std::string(to_string(kind)), 1, fw.size_mb, t, payload_bytes(s, c)});
    }
  }
  return rows;
}

std::vector<CsvRow> fleet_rows(const SuiteOptions& opt) {
  std::vector<CsvRow> rows;
  for (const auto& fw : typical_firmware()) {
    for (auto n : kFleetSizes) {
      for (auto kind : kAllStrategies) {
        auto s = strategy_for(kind, opt);
        FleetConfig c;
        c.n_devices = n;
        c.firmware_size = fw.size_mb * kMB;
        c.failure_rate = opt.failure_rate;
        if (opt.seed) c.stochastic = StochasticMode{*opt.seed};
        auto r = fleet_update(s, c);
        rows.push_back({std::string(to_string(kind)), n, fw.size_mb, r.total_time, r.total_bytes});
      }
    }
  }
  return rows;
}

std::vector<CsvRow> gray_rows(const SuiteOptions&) {
  std::vector<CsvRow> rows;
  FleetConfig c;
  for (std::int64_t n : {100, 300, 500, 1000}) {
    rows.push_back({"OtaKey-gray", n, 0.0, gray_release_time(n, {}, c.per_device_service_time),
                    static_cast<double>(n) * c.key_payload});
  }
  return rows;
}

void write_csv(const std::filesystem::path& path, const std::vector<CsvRow>& rows) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error(ErrorCode::Io, "cannot write " + path.string());
  write_csv(out, rows);
}

void write_csv(std::ostream& out, const std::vector<CsvRow>& rows) {
  out << "strategy,n_devices,firmware_mb,time_s,bytes\n";
  out.precision(10);
  for (const auto& r : rows) {
    out << r.strategy << ',' << r.n_devices << ',' << r.firmware_mb << ',' << r.time_s << ',' << r.bytes << '\n';
  }
}

std::vector<std::filesystem::path> run_experiment_suite(const std::filesystem::path& dir, const SuiteOptions& opt) {
  std::filesystem::create_directories(dir);
  std::vector<std::filesystem::path> written{dir / "fig7.csv", dir / "fig8.csv", dir / "fig9.csv", dir / "gray.csv"};
  write_csv(written[0], fig7_rows(opt));
  auto fleet = fleet_rows(opt);
  write_csv(written[1], fleet);
  write_csv(written[2], fleet);
  write_csv(written[3], gray_rows(opt));
  return written;
}

}  // namespace otakey::sim
