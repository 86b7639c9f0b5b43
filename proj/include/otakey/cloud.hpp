#pragma once

// Mock IoT cloud: per-device key registration with a dual-key acceptance
// window, activation switching, and challenge-response authentication.

#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "otakey/crypto.hpp"
#include "otakey/messages.hpp"

namespace otakey::cloud {

using protocol::DeviceId;

struct CloudCredentials {
  crypto::SymmetricKey key;
  Bytes connection_info;
};

struct CloudDeviceRecord {
  std::optional<crypto::SymmetricKey> old_key;
  std::optional<crypto::SymmetricKey> new_key;
  bool old_enabled = false;
  bool new_enabled = false;
  bool disabled = false;  // revoked by the agent
  Bytes connection_info;
  std::uint64_t activations = 0;
};

// Operations the agent and devices need from a cloud, local or remote.
class CloudApi {
 public:
  virtual ~CloudApi() = default;
  // Generates and registers a fresh key for `id`, opening the dual-key window.
  virtual CloudCredentials issue_key(const DeviceId& id) = 0;
  // Returns false when there was no pending key to activate.
  virtual bool activate_new_disable_old(const DeviceId& id) = 0;
  virtual void disable(const DeviceId& id) = 0;
  virtual crypto::Nonce challenge(const DeviceId& id) = 0;
  virtual bool authenticate(const DeviceId& id, const crypto::Nonce& challenge, const crypto::Tag& proof) = 0;
};

struct CloudConfig {
  bool auto_activate_on_new_key_login = true;
  std::string endpoint_prefix = "mqtts://cloud.otakey.local:8883/devices/";
};

class CloudService final : public CloudApi {
 public:
  explicit CloudService(CloudConfig config = {}, crypto::Rng rng = {});

  void register_new_key(const DeviceId& id, const crypto::SymmetricKey& key, ByteView connection_info);

  CloudCredentials issue_key(const DeviceId& id) override;
  bool activate_new_disable_old(const DeviceId& id) override;
  void disable(const DeviceId& id) override;
  crypto::Nonce challenge(const DeviceId& id) override;
  bool authenticate(const DeviceId& id, const crypto::Nonce& challenge, const crypto::Tag& proof) override;

  // Side-effect-free: would `key` currently authenticate for `id`?
  bool accepts(const DeviceId& id, const crypto::SymmetricKey& key) const;
  std::optional<CloudDeviceRecord> record(const DeviceId& id) const;
  std::size_t device_count() const;
  std::uint64_t successful_logins() const;
  std::string dump_json() const;

  // Frame handler for the wire service.
  protocol::Frame handle(const protocol::Frame& request);

 private:
  CloudConfig config_;
  mutable std::mutex mu_;
  crypto::Rng rng_;
  std::map<DeviceId, CloudDeviceRecord> records_;
  std::map<DeviceId, crypto::Nonce> challenges_;
  std::uint64_t logins_ = 0;
};

}  // namespace otakey::cloud
