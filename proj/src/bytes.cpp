#include "otakey/bytes.hpp"

#include <algorithm>

#include "otakey/error.hpp"

namespace otakey {

std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::SizeError: return "SizeError";
    case ErrorCode::TagMismatch: return "TagMismatch";
    case ErrorCode::Malformed: return "Malformed";
    case ErrorCode::WriteToNonErased: return "WriteToNonErased";
    case ErrorCode::OutOfRange: return "OutOfRange";
    case ErrorCode::StaleSlotOccupied: return "StaleSlotOccupied";
    case ErrorCode::CommitRefused: return "CommitRefused";
    case ErrorCode::Unprovisioned: return "Unprovisioned";
    case ErrorCode::OrderingViolation: return "OrderingViolation";
    case ErrorCode::Nonce1Mismatch: return "Nonce1Mismatch";
    case ErrorCode::ReplayedNonce2: return "ReplayedNonce2";
    case ErrorCode::UnknownPO: return "UnknownPO";
    case ErrorCode::AlreadyProvisioned: return "AlreadyProvisioned";
    case ErrorCode::Revoked: return "Revoked";
    case ErrorCode::NoSession: return "NoSession";
    case ErrorCode::CloudUnavailable: return "CloudUnavailable";
    case ErrorCode::Busy: return "Busy";
    case ErrorCode::Timeout: return "Timeout";
    case ErrorCode::Io: return "Io";
    case ErrorCode::Config: return "Config";
    case ErrorCode::CorruptRegistry: return "CorruptRegistry";
  }
  return "Unknown";
}

std::string to_hex(ByteView data) {
  static constexpr char kDigits[] = "0123456789abcdef";
  std::string out;
  out.reserve(data.size() * 2);
  for (auto b : data) {
    out.push_back(kDigits[b >> 4]);
    out.push_back(kDigits[b & 0x0f]);
  }
  return out;
}

namespace {
int nibble(char c) {
  if (c >= '0' && c <= '9') return c - '0';
  if (c >= 'a' && c <= 'f') return c - 'a' + 10;
  if (c >= 'A' && c <= 'F') return c - 'A' + 10;
  return -1;
}
}  // namespace

Bytes from_hex(std::string_view hex) {
  if (hex.size() % 2 != 0) throw Error(ErrorCode::Malformed, "odd-length hex string");
  Bytes out;
  out.reserve(hex.size() / 2);
  for (std::size_t i = 0; i < hex.size(); i += 2) {
    int hi = nibble(hex[i]);
    int lo = nibble(hex[i + 1]);
    if (hi < 0 || lo < 0) throw Error(ErrorCode::Malformed, "invalid hex digit");
    out.push_back(static_cast<std::uint8_t>((hi << 4) | lo));
  }
  return out;
}

template <std::size_t N>
std::array<std::uint8_t, N> array_from_hex(std::string_view hex) {
  auto raw = from_hex(hex);
  if (raw.size() != N) {
    throw Error(ErrorCode::Malformed,
                "expected " + std::to_string(N) + " bytes of hex, got " + std::to_string(raw.size()));
  }
  std::array<std::uint8_t, N> out{};
  std::copy(raw.begin(), raw.end(), out.begin());
  return out;
}

template std::array<std::uint8_t, 8> array_from_hex<8>(std::string_view);
template std::array<std::uint8_t, 12> array_from_hex<12>(std::string_view);
template std::array<std::uint8_t, 16> array_from_hex<16>(std::string_view);

ByteWriter& ByteWriter::u16be(std::uint16_t v) {
  out_.push_back(static_cast<std::uint8_t>(v >> 8));
  out_.push_back(static_cast<std::uint8_t>(v));
  return *this;
}

ByteWriter& ByteWriter::u32be(std::uint32_t v) {
  for (int shift = 24; shift >= 0; shift -= 8) out_.push_back(static_cast<std::uint8_t>(v >> shift));
  return *this;
}

ByteWriter& ByteWriter::u16le(std::uint16_t v) {
  out_.push_back(static_cast<std::uint8_t>(v));
  out_.push_back(static_cast<std::uint8_t>(v >> 8));
  return *this;
}

ByteWriter& ByteWriter::u32le(std::uint32_t v) {
  for (int shift = 0; shift <= 24; shift += 8) out_.push_back(static_cast<std::uint8_t>(v >> shift));
  return *this;
}

std::uint8_t ByteReader::u8() { return take(1)[0]; }

std::uint16_t ByteReader::u16be() {
  auto v = take(2);
  return static_cast<std::uint16_t>((v[0] << 8) | v[1]);
}

std::uint32_t ByteReader::u32be() {
  auto v = take(4);
  return (std::uint32_t{v[0]} << 24) | (std::uint32_t{v[1]} << 16) | (std::uint32_t{v[2]} << 8) | v[3];
}

std::uint16_t ByteReader::u16le() {
  auto v = take(2);
  return static_cast<std::uint16_t>(v[0] | (v[1] << 8));
}

std::uint32_t ByteReader::u32le() {
  auto v = take(4);
  return (std::uint32_t{v[3]} << 24) | (std::uint32_t{v[2]} << 16) | (std::uint32_t{v[1]} << 8) | v[0];
}

ByteView ByteReader::take(std::size_t n) {
  if (n > remaining()) throw Error(ErrorCode::Malformed, "truncated field");
  auto v = data_.subspan(pos_, n);
  pos_ += n;
  return v;
}

void ByteReader::expect_done() const {
  if (!done()) throw Error(ErrorCode::Malformed, "trailing bytes");
}

}  // namespace otakey
