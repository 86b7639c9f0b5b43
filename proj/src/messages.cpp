#include "otakey/messages.hpp"

#include "otakey/error.hpp"

namespace otakey::protocol {

std::string_view to_string(MsgType type) {
  switch (type) {
    case MsgType::AkRequest: return "AkRequest";
    case MsgType::AkResponse: return "AkResponse";
    case MsgType::AkConfirm: return "AkConfirm";
    case MsgType::AkAck: return "AkAck";
    case MsgType::CkRequest: return "CkRequest";
    case MsgType::CkResponse: return "CkResponse";
    case MsgType::CkConfirm: return "CkConfirm";
    case MsgType::CkAck: return "CkAck";
    case MsgType::Error: return "Error";
    case MsgType::CloudRegister: return "CloudRegister";
    case MsgType::CloudRegistered: return "CloudRegistered";
    case MsgType::CloudActivate: return "CloudActivate";
    case MsgType::CloudDisable: return "CloudDisable";
    case MsgType::CloudChallenge: return "CloudChallenge";
    case MsgType::CloudChallengeIssued: return "CloudChallengeIssued";
    case MsgType::CloudAuth: return "CloudAuth";
    case MsgType::CloudAuthResult: return "CloudAuthResult";
    case MsgType::CloudOk: return "CloudOk";
  }
  return "Unknown";
}

std::string_view to_string(ErrorReason reason) {
  switch (reason) {
    case ErrorReason::UnknownPO: return "UnknownPO";
    case ErrorReason::AlreadyProvisioned: return "AlreadyProvisioned";
    case ErrorReason::Revoked: return "Revoked";
    case ErrorReason::CloudUnavailable: return "CloudUnavailable";
    case ErrorReason::Busy: return "Busy";
    case ErrorReason::BadRequest: return "BadRequest";
    case ErrorReason::NoSession: return "NoSession";
  }
  return "Unknown";
}

Bytes Frame::encode() const {
  if (header.size() > 255) throw Error(ErrorCode::SizeError, "frame header exceeds 255 bytes");
  ByteWriter w;
  w.u8(static_cast<std::uint8_t>(type)).u8(static_cast<std::uint8_t>(header.size())).raw(header).raw(body);
  return std::move(w).bytes();
}

Frame Frame::decode(ByteView payload) {
  if (payload.size() > kMaxFrame) throw Error(ErrorCode::SizeError, "frame too large");
  ByteReader r(payload);
  Frame f;
  f.type = static_cast<MsgType>(r.u8());
  auto hlen = r.u8();
  auto header = r.take(hlen);
  f.header.assign(header.begin(), header.end());
  auto body = r.rest();
  f.body.assign(body.begin(), body.end());
  return f;
}

Frame error_frame(ErrorReason reason) {
  return Frame{MsgType::Error, Bytes{static_cast<std::uint8_t>(reason)}, {}};
}

std::optional<ErrorReason> error_reason(const Frame& frame) {
  if (frame.type != MsgType::Error || frame.header.size() != 1) return std::nullopt;
  return static_cast<ErrorReason>(frame.header[0]);
}

Frame seal_frame(MsgType type, Bytes header, const crypto::SymmetricKey& key, ByteView fields,
                 crypto::Rng& rng) {
  Bytes plaintext;
  plaintext.reserve(fields.size() + 1);
  plaintext.push_back(static_cast<std::uint8_t>(type));
  plaintext.insert(plaintext.end(), fields.begin(), fields.end());
  return Frame{type, std::move(header), crypto::seal(key, plaintext, rng).encode()};
}

Bytes open_frame(const Frame& frame, const crypto::SymmetricKey& key) {
  crypto::SealedMessage sealed;
  try {
    sealed = crypto::SealedMessage::decode(frame.body);
  } catch (const Error&) {
    throw Error(ErrorCode::TagMismatch, "undecodable envelope");
  }
  auto plaintext = crypto::open(key, sealed);
  if (plaintext.empty() || plaintext[0] != static_cast<std::uint8_t>(frame.type)) {
    throw Error(ErrorCode::Malformed, "payload type does not match envelope type");
  }
  plaintext.erase(plaintext.begin());
  return plaintext;
}

Bytes AkRequestPayload::encode() const { return ByteWriter().raw(id).raw(nonce1).bytes(); }

AkRequestPayload AkRequestPayload::decode(ByteView fields) {
  ByteReader r(fields);
  AkRequestPayload p;
  p.id = r.fixed<12>();
  p.nonce1 = r.fixed<crypto::kNonceSize>();
  r.expect_done();
  return p;
}

Bytes AkResponsePayload::encode() const { return ByteWriter().raw(ak.bytes).raw(nonce1).raw(nonce2).bytes(); }

AkResponsePayload AkResponsePayload::decode(ByteView fields) {
  ByteReader r(fields);
  AkResponsePayload p;
  p.ak.bytes = r.fixed<crypto::kKeySize>();
  p.nonce1 = r.fixed<crypto::kNonceSize>();
  p.nonce2 = r.fixed<crypto::kNonceSize>();
  r.expect_done();
  return p;
}

crypto::Tag ak_binding_mac(const AkResponsePayload& payload) {
  return crypto::hmac_sha256(payload.ak.view(), payload.encode());
}

Bytes AkConfirmPayload::encode() const { return ByteWriter().raw(nonce2).raw(nonce3).u8(marker).bytes(); }

AkConfirmPayload AkConfirmPayload::decode(ByteView fields) {
  ByteReader r(fields);
  AkConfirmPayload p;
  p.nonce2 = r.fixed<crypto::kNonceSize>();
  p.nonce3 = r.fixed<crypto::kNonceSize>();
  p.marker = r.u8();
  r.expect_done();
  return p;
}

Bytes AckPayload::encode() const { return ByteWriter().raw(nonce3).bytes(); }

AckPayload AckPayload::decode(ByteView fields) {
  ByteReader r(fields);
  AckPayload p;
  p.nonce3 = r.fixed<crypto::kNonceSize>();
  r.expect_done();
  return p;
}

Bytes CkRequestPayload::encode() const { return ByteWriter().u8(marker).raw(nonce1).bytes(); }

CkRequestPayload CkRequestPayload::decode(ByteView fields) {
  ByteReader r(fields);
  CkRequestPayload p;
  p.marker = r.u8();
  p.nonce1 = r.fixed<crypto::kNonceSize>();
  r.expect_done();
  return p;
}

Bytes CkResponsePayload::encode() const {
  if (connection_info.size() > kMaxConnectionInfo) {
    throw Error(ErrorCode::SizeError, "connection info exceeds 512 bytes");
  }
  return ByteWriter()
      .raw(cloud_key.bytes)
      .u16be(static_cast<std::uint16_t>(connection_info.size()))
      .raw(connection_info)
      .raw(nonce1)
      .raw(nonce2)
      .bytes();
}

CkResponsePayload CkResponsePayload::decode(ByteView fields) {
  ByteReader r(fields);
  CkResponsePayload p;
  p.cloud_key.bytes = r.fixed<crypto::kKeySize>();
  auto len = r.u16be();
  if (len > kMaxConnectionInfo) throw Error(ErrorCode::Malformed, "connection info too long");
  auto info = r.take(len);
  p.connection_info.assign(info.begin(), info.end());
  p.nonce1 = r.fixed<crypto::kNonceSize>();
  p.nonce2 = r.fixed<crypto::kNonceSize>();
  r.expect_done();
  return p;
}

Bytes CkConfirmPayload::encode() const { return ByteWriter().u8(marker).raw(nonce2).raw(nonce3).bytes(); }

CkConfirmPayload CkConfirmPayload::decode(ByteView fields) {
  ByteReader r(fields);
  CkConfirmPayload p;
  p.marker = r.u8();
  p.nonce2 = r.fixed<crypto::kNonceSize>();
  p.nonce3 = r.fixed<crypto::kNonceSize>();
  r.expect_done();
  return p;
}

crypto::Tag cloud_auth_proof(const crypto::SymmetricKey& cloud_key, const DeviceId& id,
                             const crypto::Nonce& challenge) {
  return crypto::hmac_sha256(cloud_key.view(), ByteWriter().raw(id).raw(challenge).bytes());
}

}  // namespace otakey::protocol
