#include "otakey/agent.hpp"

#include <algorithm>

#include <chrono>

#include "otakey/error.hpp"

namespace otakey::agent {

using protocol::ErrorReason;
using protocol::Frame;
using protocol::MsgType;

Clock system_clock_seconds() {
  return [] {
    return std::chrono::duration_cast<std::chrono::seconds>(std::chrono::system_clock::now().time_since_epoch())
        .count();
  };
}

std::string_view to_string(AnomalyVerdict verdict) {
  return verdict == AnomalyVerdict::Normal ? "Normal" : "SuspectedPkLeak";
}

namespace {

template <std::size_t N>
std::optional<std::array<std::uint8_t, N>> fixed_header(const Frame& f) {
  if (f.header.size() != N) return std::nullopt;
  std::array<std::uint8_t, N> out{};
  std::copy(f.header.begin(), f.header.end(), out.begin());
  return out;
}

}  // namespace

Agent::Agent(Registry& registry, cloud::CloudApi& cloud, crypto::Rng rng, Clock clock, AgentOptions options)
    : registry_(registry), cloud_(cloud), rng_(std::move(rng)), clock_(std::move(clock)), options_(options) {}

Frame Agent::reject(ErrorReason reason) {
  ++stats_.rejected;
  return protocol::error_frame(reason);
}

void Agent::journal(const DeviceId& id, const ProductOrder& po, const char* ev,
                    std::optional<crypto::SymmetricKey> key) {
  JournalRecord r{clock_(), to_hex(id), to_hex(po), ev, std::nullopt};
  if (key) r.key_hex = key->hex();
  registry_.commit(r);
}

Frame Agent::handle(const Frame& request) {
  std::lock_guard lock(mu_);
  try {
    switch (request.type) {
      case MsgType::AkRequest: return issue_ak_locked(request);
      case MsgType::AkConfirm: return finalize_ak_locked(request);
      case MsgType::CkRequest: return serve_ck_locked(request);
      case MsgType::CkConfirm: return finalize_ck_locked(request);
      default: return reject(ErrorReason::BadRequest);
    }
  } catch (const Error& e) {
    if (e.code() == ErrorCode::Busy) return reject(ErrorReason::Busy);
    return reject(ErrorReason::BadRequest);
  }
}

Frame Agent::agent_issue_ak(const Frame& request) {
  std::lock_guard lock(mu_);
  return issue_ak_locked(request);
}

Frame Agent::agent_finalize_ak(const Frame& confirm) {
  std::lock_guard lock(mu_);
  return finalize_ak_locked(confirm);
}

Frame Agent::agent_serve_cloud_update(const Frame& request) {
  std::lock_guard lock(mu_);
  return serve_ck_locked(request);
}

Frame Agent::agent_finalize_cloud_update(const Frame& confirm) {
  std::lock_guard lock(mu_);
  return finalize_ck_locked(confirm);
}

std::optional<std::pair<crypto::SymmetricKey, Bytes>> Agent::open_with_agent_key(const RegistryEntry& entry,
                                                                                 const Frame& frame) {
  if (entry.ak) {
    try {
      return std::pair{*entry.ak, protocol::open_frame(frame, *entry.ak)};
    } catch (const Error&) {
    }
  }
  if (entry.pending_ak) {
    try {
      auto key = *entry.pending_ak;
      auto fields = protocol::open_frame(frame, key);
      // The device is already using the pending key, so its confirmation was
      // lost; promote it as if it had arrived.
      journal(entry.id, entry.po, event::kAkActive, key);
      ak_sessions_.erase(entry.id);
      ++stats_.ak_promoted;
      return std::pair{key, std::move(fields)};
    } catch (const Error& e) {
      if (e.code() == ErrorCode::Busy) throw;
    }
  }
  return std::nullopt;
}

bool Agent::fresh_nonce1(const DeviceId& id, const crypto::Nonce& nonce1) {
  constexpr std::size_t kRemembered = 32;
  auto& recent = recent_nonce1_[id];
  if (std::find(recent.begin(), recent.end(), nonce1) != recent.end()) return false;
  recent.push_back(nonce1);
  if (recent.size() > kRemembered) recent.pop_front();
  return true;
}

Frame Agent::issue_ak_locked(const Frame& request) {
  AkFlow flow;
  crypto::SymmetricKey channel_key;
  protocol::AkRequestPayload payload;
  ProductOrder po{};

  if (auto po_header = fixed_header<8>(request)) {
    flow = AkFlow::Init;
    po = *po_header;
    const auto* order = registry_.find_po(po);
    if (!order) return reject(ErrorReason::UnknownPO);
    if (order->revoked) return reject(ErrorReason::Revoked);
    channel_key = order->pk;
    try {
      payload = protocol::AkRequestPayload::decode(protocol::open_frame(request, channel_key));
    } catch (const Error&) {
      return reject(ErrorReason::BadRequest);
    }
    if (const auto* entry = registry_.find(payload.id)) {
      if (entry->status == EntryStatus::Revoked) return reject(ErrorReason::Revoked);
      if (entry->status == EntryStatus::Active && !options_.allow_reprovision) {
        return reject(ErrorReason::AlreadyProvisioned);
      }
      if (entry->status != EntryStatus::Unseen && entry->po != po) return reject(ErrorReason::BadRequest);
    }
  } else if (auto id_header = fixed_header<12>(request)) {
    flow = AkFlow::Rotate;
    const auto* entry = registry_.find(*id_header);
    if (!entry || entry->status == EntryStatus::Unseen) return reject(ErrorReason::BadRequest);
    if (entry->status == EntryStatus::Revoked) return reject(ErrorReason::Revoked);
    po = entry->po;
    if (const auto* order = registry_.find_po(po); order && order->revoked) return reject(ErrorReason::Revoked);
    auto opened = open_with_agent_key(*entry, request);
    if (!opened) return reject(ErrorReason::BadRequest);
    channel_key = opened->first;
    try {
      payload = protocol::AkRequestPayload::decode(opened->second);
    } catch (const Error&) {
      return reject(ErrorReason::BadRequest);
    }
    if (payload.id != *id_header) return reject(ErrorReason::BadRequest);
  } else {
    return reject(ErrorReason::BadRequest);
  }

  if (!fresh_nonce1(payload.id, payload.nonce1)) return reject(ErrorReason::BadRequest);

  protocol::AkResponsePayload response{rng_.key(), payload.nonce1, rng_.nonce()};
  journal(payload.id, po, event::kAkPending, response.ak);
  ak_sessions_[payload.id] = AkSession{flow, payload.nonce1, response.nonce2, response.ak};
  ++stats_.ak_issued;

  auto mac = protocol::ak_binding_mac(response);
  return protocol::seal_frame(MsgType::AkResponse, Bytes(mac.begin(), mac.end()), channel_key, response.encode(),
                              rng_);
}

Frame Agent::finalize_ak_locked(const Frame& confirm) {
  auto id = fixed_header<12>(confirm);
  if (!id) return reject(ErrorReason::BadRequest);
  auto it = ak_sessions_.find(*id);
  if (it == ak_sessions_.end()) return reject(ErrorReason::NoSession);
  AkSession session = it->second;

  protocol::AkConfirmPayload payload;
  try {
    payload = protocol::AkConfirmPayload::decode(protocol::open_frame(confirm, session.new_ak));
  } catch (const Error&) {
    // The session is void, but the pending key stays acceptable: the device
    // may already have stored it.
    ak_sessions_.erase(it);
    return reject(ErrorReason::BadRequest);
  }
  if (payload.nonce2 != session.nonce2 || payload.marker != protocol::kSuccessTx) {
    ak_sessions_.erase(it);
    return reject(ErrorReason::BadRequest);
  }
  const auto* entry = registry_.find(*id);
  if (!entry || entry->status == EntryStatus::Revoked) {
    ak_sessions_.erase(it);
    return reject(ErrorReason::Revoked);
  }

  journal(*id, entry->po, event::kAkActive, session.new_ak);
  ak_sessions_.erase(it);
  ++stats_.ak_finalized;
  return protocol::seal_frame(MsgType::AkAck, {}, session.new_ak, protocol::AckPayload{payload.nonce3}.encode(),
                              rng_);
}

Frame Agent::serve_ck_locked(const Frame& request) {
  auto id = fixed_header<12>(request);
  if (!id) return reject(ErrorReason::BadRequest);
  const auto* entry = registry_.find(*id);
  if (!entry || entry->status == EntryStatus::Unseen) return reject(ErrorReason::BadRequest);
  if (entry->status == EntryStatus::Revoked) return reject(ErrorReason::Revoked);
  ProductOrder po = entry->po;

  auto opened = open_with_agent_key(*entry, request);
  if (!opened) return reject(ErrorReason::BadRequest);
  protocol::CkRequestPayload payload;
  try {
    payload = protocol::CkRequestPayload::decode(opened->second);
  } catch (const Error&) {
    return reject(ErrorReason::BadRequest);
  }
  if (payload.marker != protocol::kRequestTx) return reject(ErrorReason::BadRequest);
  if (!fresh_nonce1(*id, payload.nonce1)) return reject(ErrorReason::BadRequest);

  cloud::CloudCredentials creds;
  try {
    creds = cloud_.issue_key(*id);
  } catch (const std::exception&) {
    return reject(ErrorReason::CloudUnavailable);
  }
  journal(*id, po, event::kCkRegistered);

  protocol::CkResponsePayload response{creds.key, creds.connection_info, payload.nonce1, rng_.nonce()};
  ck_sessions_[*id] = CkSession{payload.nonce1, response.nonce2, opened->first};
  ++stats_.ck_issued;
  return protocol::seal_frame(MsgType::CkResponse, {}, opened->first, response.encode(), rng_);
}

Frame Agent::finalize_ck_locked(const Frame& confirm) {
  auto id = fixed_header<12>(confirm);
  if (!id) return reject(ErrorReason::BadRequest);
  auto it = ck_sessions_.find(*id);
  if (it == ck_sessions_.end()) return reject(ErrorReason::NoSession);
  CkSession session = it->second;

  protocol::CkConfirmPayload payload;
  try {
    payload = protocol::CkConfirmPayload::decode(protocol::open_frame(confirm, session.agent_key));
  } catch (const Error&) {
    ck_sessions_.erase(it);
    return reject(ErrorReason::BadRequest);
  }
  if (payload.nonce2 != session.nonce2 || payload.marker != protocol::kSuccessTx) {
    ck_sessions_.erase(it);
    return reject(ErrorReason::BadRequest);
  }
  const auto* entry = registry_.find(*id);
  if (!entry || entry->status == EntryStatus::Revoked) {
    ck_sessions_.erase(it);
    return reject(ErrorReason::Revoked);
  }

  journal(*id, entry->po, event::kCkActivated);
  ck_sessions_.erase(it);
  try {
    cloud_.activate_new_disable_old(*id);
  } catch (const std::exception&) {
    // The device's first login under the new key activates it instead.
  }
  ++stats_.ck_finalized;
  return protocol::seal_frame(MsgType::CkAck, {}, session.agent_key, protocol::AckPayload{payload.nonce3}.encode(),
                              rng_);
}

bool Agent::accepts_device_key(const DeviceId& id, const ProductOrder& po, const crypto::SymmetricKey& key) const {
  std::lock_guard lock(mu_);
  const auto* entry = registry_.find(id);
  if (entry) {
    if (entry->status == EntryStatus::Revoked) return false;
    if (entry->ak == key || entry->pending_ak == key) return true;
    if (entry->status == EntryStatus::Active) return false;
  }
  const auto* order = registry_.find_po(po);
  return order && !order->revoked && order->pk == key;
}

std::size_t Agent::revoke_device(const DeviceId& id) {
  std::lock_guard lock(mu_);
  const auto* entry = registry_.find(id);
  if (!entry || entry->status == EntryStatus::Revoked) return 0;
  journal(id, entry->po, event::kRevoked);
  ak_sessions_.erase(id);
  ck_sessions_.erase(id);
  try {
    cloud_.disable(id);
  } catch (const std::exception&) {
  }
  return 1;
}

std::size_t Agent::revoke_po(const ProductOrder& po) {
  std::vector<DeviceId> targets;
  {
    std::lock_guard lock(mu_);
    registry_.commit(JournalRecord{clock_(), "", to_hex(po), event::kPoRevoked, std::nullopt});
    for (const auto& [id, entry] : registry_.entries()) {
      if (entry.po == po && entry.status != EntryStatus::Revoked) targets.push_back(id);
    }
  }
  std::size_t n = 0;
  for (const auto& id : targets) n += revoke_device(id);
  return n;
}

AnomalyReport Agent::anomaly_scan(const ProductOrder& po) const {
  std::lock_guard lock(mu_);
  AnomalyReport report;
  report.po = po;
  const auto* order = registry_.find_po(po);
  if (order) report.expected_count = order->expected_count;
  for (const auto& [id, entry] : registry_.entries()) {
    if (entry.po != po || entry.status != EntryStatus::Active) continue;
    ++report.observed_activations;
    if (order && entry.activated_at &&
        (*entry.activated_at < order->window_start || *entry.activated_at > order->window_end)) {
      ++report.out_of_window;
    }
  }
  report.verdict = report.observed_activations > report.expected_count || report.out_of_window > 0
                       ? AnomalyVerdict::SuspectedPkLeak
                       : AnomalyVerdict::Normal;
  return report;
}

void Agent::reset_device(const DeviceId& id) {
  std::lock_guard lock(mu_);
  const auto* entry = registry_.find(id);
  ProductOrder po = entry ? entry->po : ProductOrder{};
  journal(id, po, event::kReset);
  ak_sessions_.erase(id);
  ck_sessions_.erase(id);
}

std::size_t Agent::open_sessions() const {
  std::lock_guard lock(mu_);
  return ak_sessions_.size() + ck_sessions_.size();
}

AgentStats Agent::stats() const {
  std::lock_guard lock(mu_);
  return stats_;
}

}  // namespace otakey::agent
