#pragma once

// Agent-side protocol engine: issues and rotates agent keys, brokers cloud
// keys, and watches product orders for activation anomalies.

#include <functional>
#include <deque>
#include <map>
#include <mutex>
#include <optional>

#include "otakey/cloud.hpp"
#include "otakey/crypto.hpp"
#include "otakey/messages.hpp"
#include "otakey/registry.hpp"

namespace otakey::agent {

using Clock = std::function<std::int64_t()>;
Clock system_clock_seconds();

enum class AnomalyVerdict { Normal, SuspectedPkLeak };
std::string_view to_string(AnomalyVerdict verdict);

struct AnomalyReport {
  ProductOrder po{};
  std::int64_t observed_activations = 0;
  std::int64_t expected_count = 0;
  std::int64_t out_of_window = 0;
  AnomalyVerdict verdict = AnomalyVerdict::Normal;
};

struct AgentOptions {
  bool allow_reprovision = false;
};

struct AgentStats {
  std::uint64_t ak_issued = 0;
  std::uint64_t ak_finalized = 0;
  std::uint64_t ak_promoted = 0;
  std::uint64_t ck_issued = 0;
  std::uint64_t ck_finalized = 0;
  std::uint64_t rejected = 0;
};

class Agent {
 public:
  Agent(Registry& registry, cloud::CloudApi& cloud, crypto::Rng rng = {}, Clock clock = system_clock_seconds(),
        AgentOptions options = {});

  // Thread-safe; one reply frame per request frame. A SimulatedCrash from
  // the registry propagates to the caller.
  protocol::Frame handle(const protocol::Frame& request);

  protocol::Frame agent_issue_ak(const protocol::Frame& request);
  protocol::Frame agent_finalize_ak(const protocol::Frame& confirm);
  protocol::Frame agent_serve_cloud_update(const protocol::Frame& request);
  protocol::Frame agent_finalize_cloud_update(const protocol::Frame& confirm);

  // True if `key` is one the agent would accept on the device channel for
  // `id` right now: the active or pending agent key, or the PO's product key
  // while the device has no active agent key.
  bool accepts_device_key(const DeviceId& id, const ProductOrder& po, const crypto::SymmetricKey& key) const;

  std::size_t revoke_device(const DeviceId& id);
  std::size_t revoke_po(const ProductOrder& po);
  AnomalyReport anomaly_scan(const ProductOrder& po) const;
  // Operator override allowing an already provisioned id to request again.
  void reset_device(const DeviceId& id);

  std::size_t open_sessions() const;
  AgentStats stats() const;
  const Registry& registry() const { return registry_; }

 private:
  enum class AkFlow { Init, Rotate };
  struct AkSession {
    AkFlow flow;
    crypto::Nonce nonce1;
    crypto::Nonce nonce2;
    crypto::SymmetricKey new_ak;
  };
  struct CkSession {
    crypto::Nonce nonce1;
    crypto::Nonce nonce2;
    crypto::SymmetricKey agent_key;
  };

  protocol::Frame issue_ak_locked(const protocol::Frame& request);
  protocol::Frame finalize_ak_locked(const protocol::Frame& confirm);
  protocol::Frame serve_ck_locked(const protocol::Frame& request);
  protocol::Frame finalize_ck_locked(const protocol::Frame& confirm);

  // Opens `frame` under the entry's active key, or its pending key (which is
  // then promoted to active). Returns the key that worked.
  std::optional<std::pair<crypto::SymmetricKey, Bytes>> open_with_agent_key(const RegistryEntry& entry,
                                                                            const protocol::Frame& frame);
  void journal(const DeviceId& id, const ProductOrder& po, const char* ev,
               std::optional<crypto::SymmetricKey> key = std::nullopt);
  protocol::Frame reject(protocol::ErrorReason reason);
  // Records nonce1 for the device; false if it was seen recently, which
  // marks the request as a replay.
  bool fresh_nonce1(const DeviceId& id, const crypto::Nonce& nonce1);

  Registry& registry_;
  cloud::CloudApi& cloud_;
  crypto::Rng rng_;
  Clock clock_;
  AgentOptions options_;
  mutable std::mutex mu_;
  std::map<DeviceId, AkSession> ak_sessions_;
  std::map<DeviceId, CkSession> ck_sessions_;
  std::map<DeviceId, std::deque<crypto::Nonce>> recent_nonce1_;
  AgentStats stats_;
};

}  // namespace otakey::agent
