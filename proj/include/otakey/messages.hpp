#pragma once

// Wire grammar shared by the device, the agent and the cloud stub.
//
// Frame payload (after the 4-byte big-endian length prefix):
//   msg_type(1) || header_len(1) || header || body
// Device<->agent bodies are SealedMessage encodings; the first plaintext byte
// of every sealed payload repeats msg_type.

#include <array>
#include <cstdint>
#include <optional>
#include <string>

#include "otakey/bytes.hpp"
#include "otakey/crypto.hpp"

namespace otakey::protocol {

using DeviceId = std::array<std::uint8_t, 12>;
using ProductOrder = std::array<std::uint8_t, 8>;

struct DeviceIdentity {
  DeviceId id{};
  ProductOrder po{};
  bool operator==(const DeviceIdentity&) const = default;
};

enum class MsgType : std::uint8_t {
  AkRequest = 0x01,
  AkResponse = 0x02,
  AkConfirm = 0x03,
  AkAck = 0x04,
  CkRequest = 0x05,
  CkResponse = 0x06,
  CkConfirm = 0x07,
  CkAck = 0x08,
  Error = 0x0F,
  // agent/device <-> cloud stub
  CloudRegister = 0x20,
  CloudRegistered = 0x21,
  CloudActivate = 0x22,
  CloudDisable = 0x23,
  CloudChallenge = 0x24,
  CloudChallengeIssued = 0x25,
  CloudAuth = 0x26,
  CloudAuthResult = 0x27,
  CloudOk = 0x28,
};
std::string_view to_string(MsgType type);

inline constexpr std::uint8_t kSuccessTx = 0x01;
inline constexpr std::uint8_t kRequestTx = 0x02;
inline constexpr std::size_t kMaxConnectionInfo = 512;
inline constexpr std::size_t kMaxFrame = 1 << 20;

enum class ErrorReason : std::uint8_t {
  UnknownPO = 1,
  AlreadyProvisioned = 2,
  Revoked = 3,
  CloudUnavailable = 4,
  Busy = 5,
  BadRequest = 6,
  NoSession = 7,
};
std::string_view to_string(ErrorReason reason);

struct Frame {
  MsgType type{};
  Bytes header;
  Bytes body;

  Bytes encode() const;
  static Frame decode(ByteView payload);
  bool operator==(const Frame&) const = default;
};

Frame error_frame(ErrorReason reason);
std::optional<ErrorReason> error_reason(const Frame& frame);

// Seals `type || plaintext_fields` under key.
Frame seal_frame(MsgType type, Bytes header, const crypto::SymmetricKey& key, ByteView fields,
                 crypto::Rng& rng);
// Opens the body and strips the leading type byte after checking it.
// Throws Error(TagMismatch) or Error(Malformed).
Bytes open_frame(const Frame& frame, const crypto::SymmetricKey& key);

struct AkRequestPayload {
  DeviceId id{};
  crypto::Nonce nonce1{};
  Bytes encode() const;
  static AkRequestPayload decode(ByteView fields);
};

struct AkResponsePayload {
  crypto::SymmetricKey ak;
  crypto::Nonce nonce1{};
  crypto::Nonce nonce2{};
  Bytes encode() const;
  static AkResponsePayload decode(ByteView fields);
};

// HMAC(AK, ak || nonce1 || nonce2), carried in the AkResponse header.
crypto::Tag ak_binding_mac(const AkResponsePayload& payload);

struct AkConfirmPayload {
  crypto::Nonce nonce2{};
  crypto::Nonce nonce3{};
  std::uint8_t marker = kSuccessTx;
  Bytes encode() const;
  static AkConfirmPayload decode(ByteView fields);
};

// AkAck and CkAck both echo nonce3.
struct AckPayload {
  crypto::Nonce nonce3{};
  Bytes encode() const;
  static AckPayload decode(ByteView fields);
};

struct CkRequestPayload {
  std::uint8_t marker = kRequestTx;
  crypto::Nonce nonce1{};
  Bytes encode() const;
  static CkRequestPayload decode(ByteView fields);
};

struct CkResponsePayload {
  crypto::SymmetricKey cloud_key;
  Bytes connection_info;  // u16be length prefix on the wire
  crypto::Nonce nonce1{};
  crypto::Nonce nonce2{};
  Bytes encode() const;
  static CkResponsePayload decode(ByteView fields);
};

struct CkConfirmPayload {
  std::uint8_t marker = kSuccessTx;
  crypto::Nonce nonce2{};
  crypto::Nonce nonce3{};
  Bytes encode() const;
  static CkConfirmPayload decode(ByteView fields);
};

// Proof a device presents to the cloud: HMAC(cloud_key, id || challenge).
crypto::Tag cloud_auth_proof(const crypto::SymmetricKey& cloud_key, const DeviceId& id,
                             const crypto::Nonce& challenge);

}  // namespace otakey::protocol
