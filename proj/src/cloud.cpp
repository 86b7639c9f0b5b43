#include "otakey/cloud.hpp"

#include <nlohmann/json.hpp>

#include "otakey/error.hpp"

namespace otakey::cloud {

using protocol::Frame;
using protocol::MsgType;

CloudService::CloudService(CloudConfig config, crypto::Rng rng) : config_(std::move(config)), rng_(std::move(rng)) {}

void CloudService::register_new_key(const DeviceId& id, const crypto::SymmetricKey& key, ByteView connection_info) {
  std::lock_guard lock(mu_);
  auto& rec = records_[id];
  if (rec.new_key && rec.new_enabled && !rec.old_key) {
    // First key never activated: it is still the only key the device may hold.
    rec.old_key = rec.new_key;
    rec.old_enabled = true;
  }
  // A registered-but-unactivated key is superseded; the old key stays.
  rec.new_key = key;
  rec.new_enabled = true;
  rec.disabled = false;
  rec.connection_info.assign(connection_info.begin(), connection_info.end());
}

CloudCredentials CloudService::issue_key(const DeviceId& id) {
  CloudCredentials creds;
  {
    std::lock_guard lock(mu_);
    creds.key = rng_.key();
  }
  creds.connection_info = to_bytes(config_.endpoint_prefix + to_hex(id));
  register_new_key(id, creds.key, creds.connection_info);
  return creds;
}

bool CloudService::activate_new_disable_old(const DeviceId& id) {
  std::lock_guard lock(mu_);
  auto it = records_.find(id);
  if (it == records_.end() || !it->second.new_key || !it->second.new_enabled) return false;
  auto& rec = it->second;
  if (!rec.old_key && rec.activations > 0) return false;
  rec.old_key.reset();
  rec.old_enabled = false;
  ++rec.activations;
  return true;
}

void CloudService::disable(const DeviceId& id) {
  std::lock_guard lock(mu_);
  auto& rec = records_[id];
  rec.disabled = true;
  rec.old_enabled = false;
  rec.new_enabled = false;
}

crypto::Nonce CloudService::challenge(const DeviceId& id) {
  std::lock_guard lock(mu_);
  auto n = rng_.nonce();
  challenges_[id] = n;
  return n;
}

bool CloudService::authenticate(const DeviceId& id, const crypto::Nonce& challenge, const crypto::Tag& proof) {
  std::lock_guard lock(mu_);
  auto ch = challenges_.find(id);
  if (ch == challenges_.end() || ch->second != challenge) return false;
  challenges_.erase(ch);
  auto it = records_.find(id);
  if (it == records_.end() || it->second.disabled) return false;
  auto& rec = it->second;
  auto matches = [&](const std::optional<crypto::SymmetricKey>& key, bool enabled) {
    return key && enabled && crypto::constant_time_equal(protocol::cloud_auth_proof(*key, id, challenge), proof);
  };
  if (matches(rec.new_key, rec.new_enabled)) {
    if (rec.old_key && rec.old_enabled && config_.auto_activate_on_new_key_login) {
      rec.old_key.reset();
      rec.old_enabled = false;
      ++rec.activations;
    }
    ++logins_;
    return true;
  }
  if (matches(rec.old_key, rec.old_enabled)) {
    ++logins_;
    return true;
  }
  return false;
}

bool CloudService::accepts(const DeviceId& id, const crypto::SymmetricKey& key) const {
  std::lock_guard lock(mu_);
  auto it = records_.find(id);
  if (it == records_.end() || it->second.disabled) return false;
  const auto& rec = it->second;
  return (rec.new_key == key && rec.new_enabled) || (rec.old_key == key && rec.old_enabled);
}

std::optional<CloudDeviceRecord> CloudService::record(const DeviceId& id) const {
  std::lock_guard lock(mu_);
  auto it = records_.find(id);
  if (it == records_.end()) return std::nullopt;
  return it->second;
}

std::size_t CloudService::device_count() const {
  std::lock_guard lock(mu_);
  return records_.size();
}

std::uint64_t CloudService::successful_logins() const {
  std::lock_guard lock(mu_);
  return logins_;
}

std::string CloudService::dump_json() const {
  std::lock_guard lock(mu_);
  nlohmann::json devices = nlohmann::json::array();
  for (const auto& [id, rec] : records_) {
    nlohmann::json j{{"id_hex", to_hex(id)},
                     {"old_enabled", rec.old_enabled},
                     {"new_enabled", rec.new_enabled},
                     {"disabled", rec.disabled},
                     {"activations", rec.activations},
                     {"connection_info", std::string(rec.connection_info.begin(), rec.connection_info.end())}};
    if (rec.old_key) j["old_key_hex"] = rec.old_key->hex();
    if (rec.new_key) j["new_key_hex"] = rec.new_key->hex();
    devices.push_back(std::move(j));
  }
  return nlohmann::json{{"devices", devices}, {"successful_logins", logins_}}.dump(2);
}

Frame CloudService::handle(const Frame& request) {
  try {
    if (request.header.size() != 12) return protocol::error_frame(protocol::ErrorReason::BadRequest);
    DeviceId id{};
    std::copy(request.header.begin(), request.header.end(), id.begin());
    switch (request.type) {
      case MsgType::CloudRegister: {
        auto creds = issue_key(id);
        return Frame{MsgType::CloudRegistered, {}, ByteWriter().raw(creds.key.bytes).raw(creds.connection_info).bytes()};
      }
      case MsgType::CloudActivate:
        return Frame{MsgType::CloudOk, {}, Bytes{static_cast<std::uint8_t>(activate_new_disable_old(id))}};
      case MsgType::CloudDisable:
        disable(id);
        return Frame{MsgType::CloudOk, {}, Bytes{1}};
      case MsgType::CloudChallenge: {
        auto n = challenge(id);
        return Frame{MsgType::CloudChallengeIssued, {}, Bytes(n.begin(), n.end())};
      }
      case MsgType::CloudAuth: {
        ByteReader r(request.body);
        auto ch = r.fixed<crypto::kNonceSize>();
        auto proof = r.fixed<crypto::kTagSize>();
        r.expect_done();
        return Frame{MsgType::CloudAuthResult, {}, Bytes{static_cast<std::uint8_t>(authenticate(id, ch, proof))}};
      }
      default:
        return protocol::error_frame(protocol::ErrorReason::BadRequest);
    }
  } catch (const Error&) {
    return protocol::error_frame(protocol::ErrorReason::BadRequest);
  }
}

}  // namespace otakey::cloud
