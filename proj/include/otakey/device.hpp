#pragma once

// Device-side state machine for agent-key initialization, agent-key
// rotation and cloud-key update, running against an emulated flash image.

#include <filesystem>
#include <functional>
#include <optional>
#include <set>
#include <vector>

#include "otakey/agent.hpp"
#include "otakey/cloud.hpp"
#include "otakey/crypto.hpp"
#include "otakey/flash.hpp"
#include "otakey/messages.hpp"

namespace otakey::device {

using protocol::DeviceIdentity;
using protocol::Frame;

// Request/response carrier. nullopt means the reply never arrived.
class Transport {
 public:
  virtual ~Transport() = default;
  virtual std::optional<Frame> exchange(const Frame& request) = 0;
};

// Delivers frames straight to an in-process agent.
class LocalTransport final : public Transport {
 public:
  explicit LocalTransport(agent::Agent& agent) : agent_(agent) {}
  std::optional<Frame> exchange(const Frame& request) override { return agent_.handle(request); }

 private:
  agent::Agent& agent_;
};

enum class Phase { Burned, AkIssued, CloudProvisioned, Updating };
std::string_view to_string(Phase phase);

enum class Check { Nonce1, Nonce2, Mac };

struct RetryPolicy {
  int max_attempts = 3;
  std::vector<double> backoff_seconds{1.0, 2.0, 4.0};
  std::function<void(double)> sleep = [](double) {};
};

struct DeviceState {
  DeviceIdentity identity;
  flash::FlashImage flash;
  crypto::Rng rng;
  std::set<crypto::Nonce> seen_nonce2;
  std::optional<flash::KeyKind> updating;
  // Order in which response checks ran, for observing the validation order.
  std::vector<Check> check_trace;
  std::uint64_t acks_missing = 0;

  DeviceState(DeviceIdentity id, flash::FlashImage image, crypto::Rng r = {})
      : identity(id), flash(std::move(image)), rng(std::move(r)) {}

  // Pure function of the flash contents plus the in-flight flow.
  Phase phase() const;
};

// Stage 1: a blank image with the batch product key and firmware.
DeviceState burn_device(DeviceIdentity identity, const crypto::SymmetricKey& pk, ByteView firmware,
                        crypto::Rng rng = {}, std::size_t flash_size = flash::kDefaultFlashSize);

// Reboot: clears volatile state, then finishes an interrupted stage-two
// cleanup (a committed agent key next to a leftover product key).
void device_boot(DeviceState& state);

// Each flow aborts by throwing otakey::Error and leaves the active keys as
// they were; PowerCut propagates if the flash loses power mid-flow.
void device_request_ak(DeviceState& state, Transport& transport, const RetryPolicy& retry = {});
void device_rotate_ak(DeviceState& state, Transport& transport, const RetryPolicy& retry = {});
void device_update_cloud_key(DeviceState& state, Transport& transport, const RetryPolicy& retry = {});

// A device on disk: the raw flash image at `path` plus `path`.json with
// the identity (id_hex, po_hex).
void save_device(const DeviceState& state, const std::filesystem::path& path);
DeviceState load_device(const std::filesystem::path& path);

// Challenge-response login with the cloud key currently in flash.
bool device_cloud_login(DeviceState& state, cloud::CloudApi& cloud);

}  // namespace otakey::device
