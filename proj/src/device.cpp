#include "otakey/device.hpp"

#include <fstream>

#include <nlohmann/json.hpp>

#include "otakey/error.hpp"

namespace otakey::device {

using flash::KeyKind;
using protocol::ErrorReason;
using protocol::MsgType;

std::string_view to_string(Phase phase) {
  switch (phase) {
    case Phase::Burned: return "Burned";
    case Phase::AkIssued: return "AkIssued";
    case Phase::CloudProvisioned: return "CloudProvisioned";
    case Phase::Updating: return "Updating";
  }
  return "?";
}

Phase DeviceState::phase() const {
  if (updating) return Phase::Updating;
  auto scan = flash::boot_scan(flash);
  if (!scan.agent) return Phase::Burned;
  return scan.cloud ? Phase::CloudProvisioned : Phase::AkIssued;
}

DeviceState burn_device(DeviceIdentity identity, const crypto::SymmetricKey& pk, ByteView firmware, crypto::Rng rng,
                        std::size_t flash_size) {
  return DeviceState(identity, flash::first_stage_burn(flash::FlashImage(flash_size), pk, firmware), std::move(rng));
}

void device_boot(DeviceState& state) {
  state.flash.power_on();
  state.updating.reset();
  auto scan = flash::scan_slots(state.flash);
  if (scan.agent && scan.product) flash::erase_product_key(state.flash);
}

namespace {

[[noreturn]] void raise_agent_error(const Frame& reply) {
  auto reason = protocol::error_reason(reply);
  if (!reason) throw Error(ErrorCode::Malformed, "unexpected reply " + std::string(protocol::to_string(reply.type)));
  switch (*reason) {
    case ErrorReason::UnknownPO: throw Error(ErrorCode::UnknownPO);
    case ErrorReason::AlreadyProvisioned: throw Error(ErrorCode::AlreadyProvisioned);
    case ErrorReason::Revoked: throw Error(ErrorCode::Revoked);
    case ErrorReason::CloudUnavailable: throw Error(ErrorCode::CloudUnavailable);
    case ErrorReason::Busy: throw Error(ErrorCode::Busy);
    case ErrorReason::NoSession: throw Error(ErrorCode::NoSession);
    case ErrorReason::BadRequest: break;
  }
  throw Error(ErrorCode::TagMismatch, "agent rejected the request");
}

// Sends a freshly built request up to retry.max_attempts times; each
// attempt gets new nonces via `build`.
template <typename Build>
std::pair<Frame, crypto::Nonce> exchange_with_retry(DeviceState& state, Transport& transport,
                                                    const RetryPolicy& retry, Build build) {
  for (int attempt = 0; attempt < retry.max_attempts; ++attempt) {
    auto nonce1 = state.rng.nonce();
    auto reply = transport.exchange(build(nonce1));
    if (reply) return {std::move(*reply), nonce1};
    if (attempt + 1 < retry.max_attempts) {
      std::size_t i = std::min<std::size_t>(attempt, retry.backoff_seconds.size() - 1);
      retry.sleep(retry.backoff_seconds.empty() ? 0.0 : retry.backoff_seconds[i]);
    }
  }
  throw Error(ErrorCode::Timeout, "no reply after " + std::to_string(retry.max_attempts) + " attempts");
}

Bytes id_header(const DeviceState& state) { return Bytes(state.identity.id.begin(), state.identity.id.end()); }

struct UpdatingGuard {
  DeviceState& state;
  UpdatingGuard(DeviceState& s, KeyKind kind) : state(s) { state.updating = kind; }
  ~UpdatingGuard() { state.updating.reset(); }
};

void run_ak_flow(DeviceState& state, Transport& transport, const RetryPolicy& retry, bool rotate) {
  auto scan = flash::boot_scan(state.flash);
  crypto::SymmetricKey channel_key;
  Bytes header;
  if (rotate) {
    if (!scan.agent) throw Error(ErrorCode::OrderingViolation, "rotation requires an agent key");
    channel_key = scan.agent->record.key;
    header = id_header(state);
  } else {
    if (scan.agent || !scan.product) throw Error(ErrorCode::OrderingViolation, "device is not in the Burned phase");
    channel_key = scan.product->record.key;
    header.assign(state.identity.po.begin(), state.identity.po.end());
  }

  UpdatingGuard guard(state, KeyKind::AgentKey);
  auto [reply, nonce1] = exchange_with_retry(state, transport, retry, [&](const crypto::Nonce& n1) {
    protocol::AkRequestPayload req{state.identity.id, n1};
    return protocol::seal_frame(MsgType::AkRequest, header, channel_key, req.encode(), state.rng);
  });
  if (reply.type != MsgType::AkResponse) raise_agent_error(reply);

  auto response = protocol::AkResponsePayload::decode(protocol::open_frame(reply, channel_key));
  state.check_trace.push_back(Check::Nonce1);
  if (response.nonce1 != nonce1) throw Error(ErrorCode::Nonce1Mismatch);
  state.check_trace.push_back(Check::Nonce2);
  if (!state.seen_nonce2.insert(response.nonce2).second) throw Error(ErrorCode::ReplayedNonce2);
  state.check_trace.push_back(Check::Mac);
  auto mac = protocol::ak_binding_mac(response);
  if (!crypto::constant_time_equal(mac, reply.header)) throw Error(ErrorCode::TagMismatch, "agent key MAC");

  flash::erase_stale_slot(state.flash, KeyKind::AgentKey);
  auto pending = flash::begin_key_write(state.flash, KeyKind::AgentKey, response.ak, {});

  protocol::AkConfirmPayload confirm{response.nonce2, state.rng.nonce(), protocol::kSuccessTx};
  auto ack = transport.exchange(
      protocol::seal_frame(MsgType::AkConfirm, id_header(state), response.ak, confirm.encode(), state.rng));

  flash::commit_key(state.flash, pending);
  if (!rotate) flash::erase_product_key(state.flash);

  bool acked = false;
  if (ack && ack->type == MsgType::AkAck) {
    try {
      acked = protocol::AckPayload::decode(protocol::open_frame(*ack, response.ak)).nonce3 == confirm.nonce3;
    } catch (const Error&) {
    }
  }
  if (!acked) ++state.acks_missing;
}

}  // namespace

void device_request_ak(DeviceState& state, Transport& transport, const RetryPolicy& retry) {
  run_ak_flow(state, transport, retry, false);
}

void device_rotate_ak(DeviceState& state, Transport& transport, const RetryPolicy& retry) {
  run_ak_flow(state, transport, retry, true);
}

void device_update_cloud_key(DeviceState& state, Transport& transport, const RetryPolicy& retry) {
  auto scan = flash::boot_scan(state.flash);
  if (!scan.agent) throw Error(ErrorCode::OrderingViolation, "cloud provisioning requires an agent key");
  auto agent_key = scan.agent->record.key;

  UpdatingGuard guard(state, KeyKind::CloudKey);
  auto [reply, nonce1] = exchange_with_retry(state, transport, retry, [&](const crypto::Nonce& n1) {
    protocol::CkRequestPayload req{protocol::kRequestTx, n1};
    return protocol::seal_frame(MsgType::CkRequest, id_header(state), agent_key, req.encode(), state.rng);
  });
  if (reply.type != MsgType::CkResponse) raise_agent_error(reply);

  auto response = protocol::CkResponsePayload::decode(protocol::open_frame(reply, agent_key));
  state.check_trace.push_back(Check::Nonce1);
  if (response.nonce1 != nonce1) throw Error(ErrorCode::Nonce1Mismatch);
  state.check_trace.push_back(Check::Nonce2);
  if (!state.seen_nonce2.insert(response.nonce2).second) throw Error(ErrorCode::ReplayedNonce2);

  flash::erase_stale_slot(state.flash, KeyKind::CloudKey);
  auto pending = flash::begin_key_write(state.flash, KeyKind::CloudKey, response.cloud_key, response.connection_info);

  protocol::CkConfirmPayload confirm{protocol::kSuccessTx, response.nonce2, state.rng.nonce()};
  auto ack = transport.exchange(
      protocol::seal_frame(MsgType::CkConfirm, id_header(state), agent_key, confirm.encode(), state.rng));

  flash::commit_key(state.flash, pending);

  bool acked = false;
  if (ack && ack->type == MsgType::CkAck) {
    try {
      acked = protocol::AckPayload::decode(protocol::open_frame(*ack, agent_key)).nonce3 == confirm.nonce3;
    } catch (const Error&) {
    }
  }
  if (!acked) ++state.acks_missing;
}

void save_device(const DeviceState& state, const std::filesystem::path& path) {
  state.flash.save(path);
  nlohmann::json j{{"id_hex", to_hex(state.identity.id)}, {"po_hex", to_hex(state.identity.po)}};
  auto side = path;
  side += ".json";
  std::ofstream out(side);
  out << j.dump(2) << "\n";
  if (!out) throw Error(ErrorCode::Io, "cannot write " + side.string());
}

DeviceState load_device(const std::filesystem::path& path) {
  auto side = path;
  side += ".json";
  std::ifstream in(side);
  if (!in) throw Error(ErrorCode::Io, "cannot read " + side.string());
  DeviceIdentity identity;
  try {
    auto j = nlohmann::json::parse(in);
    identity.id = array_from_hex<12>(j.at("id_hex").get<std::string>());
    identity.po = array_from_hex<8>(j.at("po_hex").get<std::string>());
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::Config, side.string() + ": " + e.what());
  }
  return DeviceState(identity, flash::FlashImage::load(path));
}

bool device_cloud_login(DeviceState& state, cloud::CloudApi& cloud) {
  auto scan = flash::scan_slots(state.flash);
  if (!scan.cloud) return false;
  auto challenge = cloud.challenge(state.identity.id);
  auto proof = protocol::cloud_auth_proof(scan.cloud->record.key, state.identity.id, challenge);
  return cloud.authenticate(state.identity.id, challenge, proof);
}

}  // namespace otakey::device
