#include "otakey/demo.hpp"

#include <spawn.h>
#include <sys/wait.h>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <fstream>
#include <mutex>
#include <random>
#include <set>
#include <thread>

#include "otakey/agent.hpp"
#include "otakey/cloud.hpp"
#include "otakey/device.hpp"
#include "otakey/error.hpp"
#include "otakey/net.hpp"
#include "otakey/registry.hpp"
#include "otakey/testbed.hpp"

extern char** environ;

namespace otakey::demo {

namespace fs = std::filesystem;
using crypto::SymmetricKey;

nlohmann::json RunManifest::to_json() const {
  return {{"scenario", scenario}, {"seed", seed}, {"components", components}, {"output_dir", output_dir}};
}

RunManifest RunManifest::from_json(const nlohmann::json& j) {
  RunManifest m;
  m.scenario = j.at("scenario").get<std::string>();
  m.seed = j.at("seed").get<std::uint64_t>();
  m.components = j.value("components", nlohmann::json::object());
  m.output_dir = j.value("output_dir", "");
  return m;
}

bool DemoReport::ok() const {
  std::size_t expected_updates = fault_device ? devices - 1 : devices;
  return failures.empty() && provisioned == devices && updated == expected_updates && distinct_aks == devices &&
         distinct_cks == devices && residual_pks == 0 && cloud_auth_ok == devices &&
         (!fault_device || fault_device_kept_old_key);
}

nlohmann::json DemoReport::to_json() const {
  nlohmann::json j{{"devices", devices},
                   {"provisioned", provisioned},
                   {"updated", updated},
                   {"distinct_aks", distinct_aks},
                   {"distinct_cks", distinct_cks},
                   {"residual_pks", residual_pks},
                   {"cloud_auth_ok", cloud_auth_ok},
                   {"failures", failures},
                   {"seconds", seconds},
                   {"ok", ok()}};
  if (fault_device) {
    j["fault_device"] = *fault_device;
    j["fault_device_kept_old_key"] = fault_device_kept_old_key;
  }
  return j;
}

nlohmann::json CrashRunReport::to_json() const {
  return {{"devices", devices},         {"kills_planned", kills_planned}, {"kills_fired", kills_fired},
          {"acknowledged", acknowledged}, {"checks", checks},             {"violations", violations},
          {"ok", ok()}};
}

RunManifest manifest_for(const DemoOptions& o) {
  RunManifest m;
  m.scenario = o.spawn ? "demo-spawn" : "demo";
  m.seed = o.seed;
  m.output_dir = o.output_dir.string();
  m.components = {
      {"agent", {{"listen", "127.0.0.1:0"}, {"registry", o.output_dir.empty() ? "memory" : "registry.jsonl"}}},
      {"cloud", {{"listen", "127.0.0.1:0"}}},
      {"devices", {{"count", o.devices}, {"parallel", o.parallel}, {"spawn", o.spawn}}},
  };
  if (o.fault_device) m.components["devices"]["fault_device"] = *o.fault_device;
  return m;
}

namespace {

constexpr protocol::ProductOrder kDemoPo{'P', 'O', '-', 'D', 'E', 'M', 'O', '1'};
// Power is cut this many flash ops into the faulty device's cloud update,
// which lands inside the new record.
constexpr std::uint64_t kFaultOp = 12;

struct DeviceResult {
  bool provisioned = false;
  bool updated = false;
  bool login_ok = false;
  bool kept_old_key = false;
  std::optional<SymmetricKey> ak, ck;
  bool residual_pk = false;
  std::string failure;
};

Bytes firmware_for(std::uint64_t seed) {
  Bytes fw(4096);
  crypto::Rng(seed ^ 0xF1F1F1F1ULL).fill(fw);
  return fw;
}

std::uint64_t device_seed(std::uint64_t seed, std::size_t i) { return seed * 1'000'003ULL + i; }

void read_back(const device::DeviceState& state, DeviceResult& r) {
  auto scan = flash::scan_slots(state.flash);
  if (scan.agent) r.ak = scan.agent->record.key;
  if (scan.cloud) r.ck = scan.cloud->record.key;
  r.residual_pk = scan.product.has_value();
}

DeviceResult run_in_process(std::size_t i, const DemoOptions& o, const SymmetricKey& pk, const Bytes& fw,
                            const net::Endpoint& agent_ep, const net::Endpoint& cloud_ep) {
  DeviceResult r;
  protocol::DeviceIdentity identity{testbed::device_id_for(i), kDemoPo};
  auto state = device::burn_device(identity, pk, fw, crypto::Rng(device_seed(o.seed, i)));
  try {
    net::SocketTransport transport(agent_ep);
    net::RemoteCloud cloud(cloud_ep);

    device::device_request_ak(state, transport);
    device::device_update_cloud_key(state, transport);
    r.provisioned = device::device_cloud_login(state, cloud);
    if (!r.provisioned) r.failure = "initial cloud login failed";
    device::device_rotate_ak(state, transport);

    if (o.fault_device == i) {
      auto old_ck = flash::scan_slots(state.flash).cloud->record.key;
      state.flash.arm_power_cut(state.flash.op_count() + kFaultOp, 2);
      try {
        device::device_update_cloud_key(state, transport);
        r.updated = true;
      } catch (const flash::PowerCut&) {
        device::device_boot(state);
      }
      auto now = flash::scan_slots(state.flash).cloud;
      r.kept_old_key = now && now->record.key == old_ck && device::device_cloud_login(state, cloud);
    } else {
      device::device_update_cloud_key(state, transport);
      r.updated = true;
    }
    r.login_ok = device::device_cloud_login(state, cloud);
  } catch (const std::exception& e) {
    r.failure = e.what();
  }
  read_back(state, r);
  return r;
}

int run_process(const std::vector<std::string>& args) {
  std::vector<char*> argv;
  for (const auto& a : args) argv.push_back(const_cast<char*>(a.c_str()));
  argv.push_back(nullptr);
  pid_t pid = 0;
  if (posix_spawn(&pid, argv[0], nullptr, nullptr, argv.data(), environ) != 0) {
    throw Error(ErrorCode::Io, "cannot spawn " + args[0]);
  }
  int status = 0;
  if (waitpid(pid, &status, 0) < 0) throw Error(ErrorCode::Io, "waitpid failed");
  return WIFEXITED(status) ? WEXITSTATUS(status) : 128;
}

DeviceResult run_spawned(std::size_t i, const DemoOptions& o, const SymmetricKey& pk, const Bytes& fw,
                         const net::Endpoint& agent_ep, const net::Endpoint& cloud_ep) {
  DeviceResult r;
  protocol::DeviceIdentity identity{testbed::device_id_for(i), kDemoPo};
  char name[32];
  std::snprintf(name, sizeof name, "dev-%05zu.bin", i);
  auto image = o.output_dir / "devices" / name;
  device::save_device(device::burn_device(identity, pk, fw), image);

  std::string exe = o.executable.string();
  auto seed = device_seed(o.seed, i);
  auto step = [&](const std::string& cmd, std::uint64_t s, std::vector<std::string> extra = {}) {
    std::vector<std::string> args{exe,     "device",          cmd, "--image", image.string(), "--agent",
                                  agent_ep.str(), "--seed", std::to_string(s)};
    args.insert(args.end(), extra.begin(), extra.end());
    return run_process(args);
  };
  auto login = [&] {
    return run_process({exe, "device", "login", "--image", image.string(), "--cloud", cloud_ep.str()}) == 0;
  };

  try {
    if (step("provision", seed) != 0) throw Error(ErrorCode::Io, "provision step failed");
    if (step("update", seed + 1) != 0) throw Error(ErrorCode::Io, "cloud provisioning step failed");
    r.provisioned = login();
    if (!r.provisioned) r.failure = "initial cloud login failed";
    if (step("rotate", seed + 2) != 0) throw Error(ErrorCode::Io, "rotate step failed");
    if (o.fault_device == i) {
      auto old_ck = flash::scan_slots(device::load_device(image).flash).cloud->record.key;
      step("update", seed + 3, {"--power-cut-op", std::to_string(kFaultOp)});
      auto now = flash::scan_slots(device::load_device(image).flash).cloud;
      r.updated = now && now->record.key != old_ck;
      r.kept_old_key = now && now->record.key == old_ck && login();
    } else {
      if (step("update", seed + 3) != 0) throw Error(ErrorCode::Io, "cloud update step failed");
      r.updated = true;
    }
    r.login_ok = login();
  } catch (const std::exception& e) {
    r.failure = e.what();
  }
  read_back(device::load_device(image), r);
  return r;
}

void write_json(const fs::path& path, const nlohmann::json& j) {
  std::ofstream out(path);
  out << j.dump(2) << "\n";
  if (!out) throw Error(ErrorCode::Io, "cannot write " + path.string());
}

}  // namespace

DemoReport demo_end_to_end(const DemoOptions& o) {
  if (o.devices == 0) throw Error(ErrorCode::Config, "need at least one device");
  if (o.fault_device && *o.fault_device >= o.devices) throw Error(ErrorCode::Config, "fault device out of range");
  if (o.spawn && (o.output_dir.empty() || o.executable.empty())) {
    throw Error(ErrorCode::Config, "spawn mode needs an output directory and the otakey executable");
  }
  auto started = std::chrono::steady_clock::now();
  if (!o.output_dir.empty()) fs::create_directories(o.output_dir / "devices");

  cloud::CloudService cloud_service(cloud::CloudConfig{}, crypto::Rng(o.seed * 2 + 1));
  net::FrameServer cloud_server(net::Endpoint{"127.0.0.1", 0},
                                [&](const protocol::Frame& f) { return cloud_service.handle(f); });
  net::RemoteCloud agent_cloud(cloud_server.endpoint());

  auto pk = crypto::generate_key(o.seed);
  std::unique_ptr<agent::Registry> registry;
  if (o.output_dir.empty()) {
    registry = std::make_unique<agent::Registry>();
  } else {
    auto journal = o.output_dir / "registry.jsonl";
    fs::remove(journal);
    fs::remove(fs::path(journal).concat(".snapshot"));
    registry = std::make_unique<agent::Registry>(journal);
    registry->load();
  }
  registry->add_product_order(
      agent::ProductOrderRecord{kDemoPo, pk, static_cast<std::int64_t>(o.devices), 0, 4102444800, false});
  agent::Agent agent(*registry, agent_cloud, crypto::Rng(o.seed * 2));
  net::FrameServer agent_server(net::Endpoint{"127.0.0.1", 0},
                                [&](const protocol::Frame& f) { return agent.handle(f); });

  auto fw = firmware_for(o.seed);
  std::vector<DeviceResult> results(o.devices);
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i; (i = next.fetch_add(1)) < o.devices;) {
      results[i] = o.spawn ? run_spawned(i, o, pk, fw, agent_server.endpoint(), cloud_server.endpoint())
                           : run_in_process(i, o, pk, fw, agent_server.endpoint(), cloud_server.endpoint());
    }
  };
  std::vector<std::thread> pool;
  for (unsigned t = 1; t < std::max(1u, o.parallel); ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();

  agent_server.stop();
  cloud_server.stop();

  DemoReport report;
  report.devices = o.devices;
  report.fault_device = o.fault_device;
  std::set<SymmetricKey> aks, cks;
  for (std::size_t i = 0; i < results.size(); ++i) {
    const auto& r = results[i];
    report.provisioned += r.provisioned;
    report.updated += r.updated;
    report.cloud_auth_ok += r.login_ok;
    report.residual_pks += r.residual_pk;
    if (r.ak) aks.insert(*r.ak);
    if (r.ck) cks.insert(*r.ck);
    if (!r.failure.empty()) report.failures.push_back("device " + std::to_string(i) + ": " + r.failure);
    if (o.fault_device == i) report.fault_device_kept_old_key = r.kept_old_key;
  }
  report.distinct_aks = aks.size();
  report.distinct_cks = cks.size();
  report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();

  if (!o.output_dir.empty()) {
    write_json(o.output_dir / "manifest.json", manifest_for(o).to_json());
    write_json(o.output_dir / "report.json", report.to_json());
  }
  return report;
}

// ---------------------------------------------------------------------------
// Agent crash run

namespace {

class CrashHarness {
 public:
  CrashHarness(const CrashRunOptions& o, const SymmetricKey& pk, std::vector<std::size_t> points,
               std::vector<agent::CrashPoint> modes)
      : o_(o), pk_(pk), journal_(o.journal_dir / "registry.jsonl"), points_(std::move(points)),
        modes_(std::move(modes)), cloud_(cloud::CloudConfig{}, crypto::Rng(o.seed + 17)) {
    fs::create_directories(o.journal_dir);
    fs::remove(journal_);
    fs::remove(fs::path(journal_).concat(".snapshot"));
    start();
  }

  agent::Agent& agent() { return *agent_; }
  cloud::CloudService& cloud() { return cloud_; }
  std::size_t kills() const { return kills_; }

  // Called when the agent died: restart it from its journal.
  void restart() {
    ++kills_;
    appended_ += registry_->journal_records_written();
    agent_.reset();
    registry_.reset();
    start();
  }

  // Every acknowledged key must be in a registry freshly loaded from disk.
  void check(const std::map<protocol::DeviceId, SymmetricKey>& acked, CrashRunReport& report) const {
    agent::Registry reloaded(journal_);
    reloaded.load();
    ++report.checks;
    for (const auto& [id, key] : acked) {
      const auto* e = reloaded.find(id);
      if (!e || e->status != agent::EntryStatus::Active || e->ak != key) {
        report.violations.push_back("after kill " + std::to_string(kills_) + ": device " + to_hex(id) +
                                    " holds an acknowledged key the registry lost");
      }
    }
  }

 private:
  void start() {
    registry_ = std::make_unique<agent::Registry>(journal_);
    registry_->load();
    registry_->add_product_order(
        agent::ProductOrderRecord{kDemoPo, pk_, static_cast<std::int64_t>(o_.devices), 0, 4102444800, false});
    while (next_ < points_.size() && points_[next_] <= appended_) ++next_;
    if (next_ < points_.size()) {
      registry_->arm_crash(points_[next_] - appended_, modes_[next_]);
      ++next_;
    }
    agent_ = std::make_unique<agent::Agent>(*registry_, cloud_, crypto::Rng(o_.seed * 31 + kills_),
                                            [] { return std::int64_t{1700000000}; });
  }

  const CrashRunOptions& o_;
  SymmetricKey pk_;
  fs::path journal_;
  std::vector<std::size_t> points_;
  std::vector<agent::CrashPoint> modes_;
  std::size_t next_ = 0;
  std::size_t appended_ = 0;
  std::size_t kills_ = 0;
  cloud::CloudService cloud_;
  std::unique_ptr<agent::Registry> registry_;
  std::unique_ptr<agent::Agent> agent_;
};

// The agent process dying looks like a dropped connection to the device.
class CrashTransport final : public device::Transport {
 public:
  CrashTransport(CrashHarness& h, std::function<void()> after_restart)
      : h_(h), after_restart_(std::move(after_restart)) {}

  std::optional<protocol::Frame> exchange(const protocol::Frame& request) override {
    try {
      return h_.agent().handle(request);
    } catch (const agent::SimulatedCrash&) {
      h_.restart();
      after_restart_();
      return std::nullopt;
    }
  }

 private:
  CrashHarness& h_;
  std::function<void()> after_restart_;
};

}  // namespace

CrashRunReport crash_consistency_run(const CrashRunOptions& o) {
  if (o.journal_dir.empty()) throw Error(ErrorCode::Config, "crash run needs a journal directory");
  CrashRunReport report;
  report.devices = o.devices;
  report.kills_planned = o.kills;

  // Four appends per device: ak_pending, ak_active, ck_registered, ck_activated.
  std::mt19937_64 rng(o.seed);
  std::vector<std::size_t> all(4 * o.devices);
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i + 1;
  std::shuffle(all.begin(), all.end(), rng);
  std::vector<std::size_t> points(all.begin(), all.begin() + std::min(o.kills, all.size()));
  std::sort(points.begin(), points.end());
  std::vector<agent::CrashPoint> modes;
  for (std::size_t i = 0; i < points.size(); ++i) modes.push_back(static_cast<agent::CrashPoint>(rng() % 3));
  report.kills_planned = points.size();

  auto pk = crypto::generate_key(o.seed);
  CrashHarness harness(o, pk, points, modes);
  std::map<protocol::DeviceId, SymmetricKey> acked;
  CrashTransport transport(harness, [&] { harness.check(acked, report); });

  for (std::size_t i = 0; i < o.devices; ++i) {
    protocol::DeviceIdentity identity{testbed::device_id_for(i), kDemoPo};
    auto state = device::burn_device(identity, pk, {}, crypto::Rng(device_seed(o.seed, i)), 40 * 1024);

    for (int attempt = 0; attempt < 4 && !flash::scan_slots(state.flash).agent; ++attempt) {
      auto missing = state.acks_missing;
      try {
        device::device_request_ak(state, transport);
        if (state.acks_missing == missing) acked[identity.id] = flash::scan_slots(state.flash).agent->record.key;
      } catch (const Error&) {
      }
    }
    if (!flash::scan_slots(state.flash).agent) {
      report.violations.push_back("device " + std::to_string(i) + " never obtained an agent key");
      continue;
    }
    for (int attempt = 0; attempt < 4 && !flash::scan_slots(state.flash).cloud; ++attempt) {
      try {
        device::device_update_cloud_key(state, transport);
      } catch (const Error&) {
      }
    }
    auto key = flash::scan_slots(state.flash).agent->record.key;
    if (!harness.agent().accepts_device_key(identity.id, kDemoPo, key)) {
      report.violations.push_back("device " + std::to_string(i) + " holds an agent key the agent rejects");
    }
    if (!flash::scan_slots(state.flash).cloud || !device::device_cloud_login(state, harness.cloud())) {
      report.violations.push_back("device " + std::to_string(i) + " cannot log in to the cloud");
    }
  }
  harness.check(acked, report);
  report.kills_fired = harness.kills();
  report.acknowledged = acked.size();
  return report;
}

}  // namespace otakey::demo
