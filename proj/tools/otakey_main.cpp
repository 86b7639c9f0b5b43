// otakey: agent and cloud services, device emulation, sweeps and the
// simulation suite behind one binary.
//
// Exit codes: 0 pass, 1 invariant violation or failed operation,
// 2 configuration error.

#include <CLI11.hpp>

#include <atomic>
#include <csignal>
#include <fstream>
#include <iostream>
#include <thread>

#include <nlohmann/json.hpp>

#include "otakey/adversary.hpp"
#include "otakey/agent.hpp"
#include "otakey/cloud.hpp"
#include "otakey/demo.hpp"
#include "otakey/device.hpp"
#include "otakey/error.hpp"
#include "otakey/faultsweep.hpp"
#include "otakey/fleet_sim.hpp"
#include "otakey/net.hpp"
#include "otakey/registry.hpp"

namespace {

using namespace otakey;
namespace fs = std::filesystem;

constexpr int kPass = 0;
constexpr int kViolation = 1;
constexpr int kConfigError = 2;

std::atomic<bool> g_stop{false};
extern "C" void on_signal(int) { g_stop = true; }

void wait_for_signal() {
  std::signal(SIGINT, on_signal);
  std::signal(SIGTERM, on_signal);
  while (!g_stop) std::this_thread::sleep_for(std::chrono::milliseconds(100));
}

void emit_json(const nlohmann::json& j, const std::string& path) {
  if (path.empty()) {
    std::cout << j.dump(2) << "\n";
    return;
  }
  std::ofstream out(path);
  out << j.dump(2) << "\n";
  if (!out) throw Error(ErrorCode::Io, "cannot write " + path);
}

crypto::Rng rng_from(const std::optional<std::uint64_t>& seed) {
  return seed ? crypto::Rng(*seed) : crypto::Rng();
}

// ---------------------------------------------------------------------------

struct ServeArgs {
  std::string listen = "127.0.0.1:7000";
  std::string cloud = "127.0.0.1:7001";
  std::string po_file;
  std::string journal;
  std::optional<std::uint64_t> seed;
  bool allow_reprovision = false;
};

int agent_serve(const ServeArgs& a) {
  std::unique_ptr<agent::Registry> registry =
      a.journal.empty() ? std::make_unique<agent::Registry>() : std::make_unique<agent::Registry>(a.journal);
  registry->load();
  for (auto& po : agent::load_po_file(a.po_file)) registry->add_product_order(po);
  net::RemoteCloud cloud(net::Endpoint::parse(a.cloud));
  agent::Agent agent(*registry, cloud, rng_from(a.seed), agent::system_clock_seconds(),
                     agent::AgentOptions{a.allow_reprovision});
  net::FrameServer server(net::Endpoint::parse(a.listen), [&](const protocol::Frame& f) { return agent.handle(f); });
  std::cout << "agent listening on " << server.endpoint().str() << std::endl;
  wait_for_signal();
  server.stop();
  auto s = agent.stats();
  std::cout << nlohmann::json{{"ak_issued", s.ak_issued},   {"ak_finalized", s.ak_finalized},
                              {"ck_issued", s.ck_issued},   {"ck_finalized", s.ck_finalized},
                              {"rejected", s.rejected}}
                   .dump()
            << std::endl;
  return kPass;
}

int cloud_serve(const std::string& listen, const std::optional<std::uint64_t>& seed, const std::string& dump) {
  cloud::CloudService cloud(cloud::CloudConfig{}, rng_from(seed));
  net::FrameServer server(net::Endpoint::parse(listen), [&](const protocol::Frame& f) { return cloud.handle(f); });
  std::cout << "cloud listening on " << server.endpoint().str() << std::endl;
  wait_for_signal();
  server.stop();
  if (!dump.empty()) {
    std::ofstream out(dump);
    out << cloud.dump_json() << "\n";
  }
  return kPass;
}

// ---------------------------------------------------------------------------

struct DeviceArgs {
  std::string image;
  std::string agent = "127.0.0.1:7000";
  std::string cloud = "127.0.0.1:7001";
  std::optional<std::uint64_t> seed;
  std::optional<std::uint64_t> power_cut_op;
  // burn
  std::string id_hex, po_hex, pk_hex, firmware;
  std::size_t flash_size = flash::kDefaultFlashSize;
};

nlohmann::json describe_device(const device::DeviceState& state) {
  auto scan = flash::scan_slots(state.flash);
  nlohmann::json j{{"id", to_hex(state.identity.id)},
                   {"po", to_hex(state.identity.po)},
                   {"phase", device::to_string(state.phase())}};
  auto slot = [](const std::optional<flash::LocatedRecord>& r) -> nlohmann::json {
    if (!r) return nullptr;
    return {{"slot", flash::to_string(r->slot)}, {"seq", r->record.seq}};
  };
  j["product_key"] = slot(scan.product);
  j["agent_key"] = slot(scan.agent);
  j["cloud_key"] = slot(scan.cloud);
  return j;
}

int device_burn(const DeviceArgs& a) {
  protocol::DeviceIdentity identity{array_from_hex<12>(a.id_hex), array_from_hex<8>(a.po_hex)};
  Bytes fw;
  if (!a.firmware.empty()) {
    std::ifstream in(a.firmware, std::ios::binary);
    if (!in) throw Error(ErrorCode::Config, "cannot read firmware " + a.firmware);
    fw.assign(std::istreambuf_iterator<char>(in), {});
  }
  auto state = device::burn_device(identity, crypto::SymmetricKey::from_hex(a.pk_hex), fw, {}, a.flash_size);
  device::save_device(state, a.image);
  std::cout << describe_device(state).dump() << std::endl;
  return kPass;
}

int device_step(const std::string& step, const DeviceArgs& a) {
  auto state = device::load_device(a.image);
  state.rng = rng_from(a.seed);
  device::device_boot(state);

  if (step == "login") {
    net::RemoteCloud cloud(net::Endpoint::parse(a.cloud));
    bool ok = device::device_cloud_login(state, cloud);
    std::cout << nlohmann::json{{"login", ok}}.dump() << std::endl;
    return ok ? kPass : kViolation;
  }
  if (step == "dump") {
    auto j = describe_device(state);
    j["area_a_agent"] = flash::hex_dump(state.flash, flash::layout::kAreaAAgent);
    j["area_b_agent"] = flash::hex_dump(state.flash, flash::layout::kAreaBAgent);
    std::cout << j.dump(2) << std::endl;
    return kPass;
  }

  net::SocketTransport transport(net::Endpoint::parse(a.agent));
  if (a.power_cut_op) state.flash.arm_power_cut(state.flash.op_count() + *a.power_cut_op, 2);
  bool cut = false;
  try {
    if (step == "provision") device::device_request_ak(state, transport);
    if (step == "rotate") device::device_rotate_ak(state, transport);
    if (step == "update") device::device_update_cloud_key(state, transport);
  } catch (const flash::PowerCut&) {
    cut = true;
    device::device_boot(state);
  }
  device::save_device(state, a.image);
  auto j = describe_device(state);
  j["power_cut"] = cut;
  j["acks_missing"] = state.acks_missing;
  std::cout << j.dump() << std::endl;
  return kPass;
}

// ---------------------------------------------------------------------------

int run_sim(const std::string& which, const sim::SuiteOptions& opt, const std::string& out) {
  if (which == "suite") {
    if (out.empty()) throw Error(ErrorCode::Config, "sim suite needs --out <dir>");
    for (const auto& p : sim::run_experiment_suite(out, opt)) std::cout << p.string() << "\n";
    return kPass;
  }
  std::vector<sim::CsvRow> rows;
  if (which == "fig7") rows = sim::fig7_rows(opt);
  else if (which == "fig8" || which == "fig9") rows = sim::fleet_rows(opt);
  else if (which == "gray") rows = sim::gray_rows(opt);
  if (out.empty()) sim::write_csv(std::cout, rows);
  else sim::write_csv(out, rows);
  return kPass;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"otakey: over-the-air device key provisioning and update"};
  app.require_subcommand(1);

  // agent / cloud
  ServeArgs serve;
  auto* agent_cmd = app.add_subcommand("agent", "Agent server")->require_subcommand(1);
  auto* agent_serve_cmd = agent_cmd->add_subcommand("serve", "Serve devices over TCP");
  agent_serve_cmd->add_option("--listen", serve.listen, "host:port (port 0 picks one)")->capture_default_str();
  agent_serve_cmd->add_option("--cloud", serve.cloud, "Cloud stub host:port")->capture_default_str();
  agent_serve_cmd->add_option("--po-file", serve.po_file, "Product order JSON")->required();
  agent_serve_cmd->add_option("--journal", serve.journal, "Registry journal (in-memory if omitted)");
  agent_serve_cmd->add_option("--seed", serve.seed, "Deterministic key generation");
  agent_serve_cmd->add_flag("--allow-reprovision", serve.allow_reprovision);

  std::string cloud_listen = "127.0.0.1:7001", cloud_dump;
  std::optional<std::uint64_t> cloud_seed;
  auto* cloud_cmd = app.add_subcommand("cloud", "Cloud stub")->require_subcommand(1);
  auto* cloud_serve_cmd = cloud_cmd->add_subcommand("serve", "Serve the cloud API over TCP");
  cloud_serve_cmd->add_option("--listen", cloud_listen)->capture_default_str();
  cloud_serve_cmd->add_option("--seed", cloud_seed);
  cloud_serve_cmd->add_option("--dump", cloud_dump, "Write device records as JSON on exit");

  // device
  DeviceArgs dev;
  auto* device_cmd = app.add_subcommand("device", "Emulated device backed by a flash image file")->require_subcommand(1);
  auto* burn_cmd = device_cmd->add_subcommand("burn", "Stage 1: write the product key and firmware");
  burn_cmd->add_option("--image", dev.image)->required();
  burn_cmd->add_option("--id", dev.id_hex, "Device id, 24 hex digits")->required();
  burn_cmd->add_option("--po", dev.po_hex, "Product order, 16 hex digits")->required();
  burn_cmd->add_option("--pk", dev.pk_hex, "Product key, 32 hex digits")->required();
  burn_cmd->add_option("--firmware", dev.firmware);
  burn_cmd->add_option("--flash-size", dev.flash_size)->capture_default_str();
  std::vector<std::pair<std::string, CLI::App*>> steps;
  for (const char* name : {"provision", "rotate", "update", "login", "dump"}) {
    auto* c = device_cmd->add_subcommand(name);
    c->add_option("--image", dev.image)->required();
    c->add_option("--agent", dev.agent)->capture_default_str();
    c->add_option("--cloud", dev.cloud)->capture_default_str();
    c->add_option("--seed", dev.seed, "Deterministic nonces");
    c->add_option("--power-cut-op", dev.power_cut_op, "Cut power at this flash op of the step");
    steps.emplace_back(name, c);
  }
  device_cmd->get_subcommand("provision")->description("Stage 2: obtain an agent key");
  device_cmd->get_subcommand("rotate")->description("Rotate the agent key");
  device_cmd->get_subcommand("update")->description("Obtain or replace the cloud key");
  device_cmd->get_subcommand("login")->description("Authenticate to the cloud with the stored key");
  device_cmd->get_subcommand("dump")->description("Show the key areas");

  // demo
  demo::DemoOptions demo_opt;
  std::optional<std::size_t> crash_kills;
  std::string demo_out;
  auto* demo_cmd = app.add_subcommand("demo", "Provision and update a fleet end to end");
  demo_cmd->add_option("--devices", demo_opt.devices)->capture_default_str();
  demo_cmd->add_option("--seed", demo_opt.seed)->capture_default_str();
  demo_cmd->add_option("--fault-device", demo_opt.fault_device, "Cut power during this device's cloud update");
  demo_cmd->add_option("--parallel", demo_opt.parallel)->capture_default_str();
  demo_cmd->add_flag("--spawn", demo_opt.spawn, "Run each device step as a separate process");
  demo_cmd->add_option("--out", demo_out, "Artifact directory");
  demo_cmd->add_option("--kill-agent", crash_kills, "Instead: kill the agent this many times while provisioning");

  // sweeps
  std::string flow_name = "all", granularity = "word", report_path;
  auto* fs_cmd = app.add_subcommand("faultsweep", "Power-cut sweep over the key-update flows");
  fs_cmd->add_option("--flow", flow_name, "ak-init | ak-rotate | ck-update | all")->capture_default_str();
  fs_cmd->add_option("--granularity", granularity, "op | word")->capture_default_str();
  fs_cmd->add_option("--report", report_path, "JSON report path (stdout if omitted)");

  int budget = 2;
  unsigned threads = 0;
  std::string adv_flow = "ak-init";
  auto* adv_cmd = app.add_subcommand("adversary", "Attacker harness")->require_subcommand(1);
  auto* sweep_cmd = adv_cmd->add_subcommand("sweep", "Exhaustive tamper sweep");
  sweep_cmd->add_option("--flow", adv_flow)->capture_default_str();
  sweep_cmd->add_option("--budget", budget)->capture_default_str()->check(CLI::Range(0, 3));
  sweep_cmd->add_option("--threads", threads, "0 = one per core, up to 8");
  sweep_cmd->add_option("--report", report_path);
  auto* secrecy_cmd = adv_cmd->add_subcommand("secrecy", "Knowledge closure over an honest transcript");
  secrecy_cmd->add_option("--flow", adv_flow)->capture_default_str();
  secrecy_cmd->add_option("--report", report_path);

  // simulation
  sim::SuiteOptions sim_opt;
  std::string sim_out;
  auto* sim_cmd = app.add_subcommand("sim", "Fleet update simulator")->require_subcommand(1);
  const std::pair<const char*, const char*> sim_kinds[] = {
      {"fig7", "Single device at 1 MB/s, per firmware image"},
      {"fig8", "Fleet update time, every firmware image and fleet size"},
      {"fig9", "Fleet data volume (same rows as fig8; read the bytes column)"},
      {"gray", "Batched rollout time, 100 devices per batch"},
      {"suite", "Write every CSV into --out"},
  };
  for (auto [name, help] : sim_kinds) {
    auto* c = sim_cmd->add_subcommand(name, help);
    c->add_option("--delta-ratio", sim_opt.delta_ratio)->capture_default_str();
    c->add_option("--failure-rate", sim_opt.failure_rate)->capture_default_str();
    c->add_option("--seed", sim_opt.seed, "Stochastic mode with this seed");
    c->add_option("--out", sim_out, "CSV path (directory for suite)");
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int rc = app.exit(e);
    return rc == 0 ? kPass : kConfigError;
  }

  try {
    if (agent_serve_cmd->parsed()) return agent_serve(serve);
    if (cloud_serve_cmd->parsed()) return cloud_serve(cloud_listen, cloud_seed, cloud_dump);
    if (burn_cmd->parsed()) return device_burn(dev);
    for (const auto& [name, c] : steps) {
      if (c->parsed()) return device_step(name, dev);
    }

    if (demo_cmd->parsed()) {
      if (crash_kills) {
        demo::CrashRunOptions co;
        co.devices = demo_opt.devices;
        co.kills = *crash_kills;
        co.seed = demo_opt.seed;
        co.journal_dir = demo_out.empty() ? fs::temp_directory_path() / "otakey-crash" : fs::path(demo_out);
        auto r = demo::crash_consistency_run(co);
        std::cout << r.to_json().dump(2) << std::endl;
        return r.ok() ? kPass : kViolation;
      }
      demo_opt.output_dir = demo_out;
      demo_opt.executable = fs::canonical("/proc/self/exe");
      auto r = demo::demo_end_to_end(demo_opt);
      auto j = r.to_json();
      if (j["failures"].size() > 20) j["failures"] = "(see report.json)";
      std::cout << j.dump(2) << std::endl;
      return r.ok() ? kPass : kViolation;
    }

    if (fs_cmd->parsed()) {
      auto g = granularity == "op" ? faultsweep::Granularity::Op : faultsweep::Granularity::Word;
      if (granularity != "op" && granularity != "word") throw Error(ErrorCode::Config, "granularity: op | word");
      auto r = flow_name == "all" ? faultsweep::faultsweep_all(g)
                                  : faultsweep::faultsweep(testbed::flow_from_string(flow_name), g);
      emit_json(r.to_json(), report_path);
      std::cerr << r.cut_points << " cut points, " << r.violations.size() << " violations\n";
      return r.ok() ? kPass : kViolation;
    }

    if (sweep_cmd->parsed()) {
      auto r = adversary::tamper_sweep(testbed::flow_from_string(adv_flow), budget, threads);
      if (report_path.empty()) {
        auto j = r.to_json();
        j.erase("outcomes");
        std::cout << j.dump(2) << std::endl;
      } else {
        emit_json(r.to_json(), report_path);
      }
      std::cerr << r.runs << " runs, " << r.attacker_accepting << " attacker-accepting, " << r.replays_accepted
                << " replays accepted\n";
      return r.ok() ? kPass : kViolation;
    }
    if (secrecy_cmd->parsed()) {
      auto run = adversary::record_honest_run(testbed::flow_from_string(adv_flow));
      auto v = adversary::secrecy_check(run);
      emit_json(v.to_json(), report_path);
      return v.secret ? kPass : kViolation;
    }

    for (const char* name : {"fig7", "fig8", "fig9", "gray", "suite"}) {
      if (sim_cmd->get_subcommand(name)->parsed()) return run_sim(name, sim_opt, sim_out);
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return e.code() == ErrorCode::Config ? kConfigError : kViolation;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kViolation;
  }
  return kPass;
}
