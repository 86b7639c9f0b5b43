#pragma once

// One device, one agent and one cloud wired together in-process with
// deterministic randomness. Shared by the fault sweep, the adversary
// harness and the tests.

#include <memory>
#include <string>

#include "otakey/agent.hpp"
#include "otakey/cloud.hpp"
#include "otakey/device.hpp"
#include "otakey/registry.hpp"

namespace otakey::testbed {

enum class Flow { AkInit, AkRotate, CkUpdate };
std::string_view to_string(Flow flow);
Flow flow_from_string(std::string_view text);  // "ak-init" | "ak-rotate" | "ck-update"

struct TestbedOptions {
  std::uint64_t seed = 1;
  // Total connection_info length the cloud hands out; 0 keeps the default.
  std::size_t connection_info_size = 0;
  std::size_t flash_size = 40 * 1024;
};

inline constexpr protocol::ProductOrder kDefaultPo{0x50, 0x4f, 0x2d, 0x30, 0x30, 0x30, 0x30, 0x31};
protocol::DeviceId device_id_for(std::uint64_t index);

class Testbed {
 public:
  explicit Testbed(const TestbedOptions& options = {});
  Testbed(const Testbed&) = delete;
  Testbed& operator=(const Testbed&) = delete;

  crypto::SymmetricKey pk;
  protocol::DeviceIdentity identity;
  cloud::CloudService cloud;
  agent::Registry registry;
  agent::Agent agent;
  device::DeviceState device;
  device::LocalTransport transport;

  void request_ak(device::Transport& t) { device::device_request_ak(device, t, no_wait()); }
  void rotate_ak(device::Transport& t) { device::device_rotate_ak(device, t, no_wait()); }
  void update_ck(device::Transport& t) { device::device_update_cloud_key(device, t, no_wait()); }
  bool login() { return device::device_cloud_login(device, cloud); }
  void run(Flow flow, device::Transport& t);

  // Empty string when consistent; otherwise why not. Checks that the key the
  // device would present after boot is accepted by the agent, and that its
  // cloud key (if any) is accepted by the cloud.
  std::string key_consistency_violation() const;

  static device::RetryPolicy no_wait() { return device::RetryPolicy{}; }
};

}  // namespace otakey::testbed
