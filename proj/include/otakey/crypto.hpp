#pragma once

// Symmetric envelope used for every protocol payload: AES-128-CBC with
// PKCS#7 padding, then HMAC-SHA256 over iv || ciphertext (encrypt-then-MAC).

#include <array>
#include <cstdint>
#include <optional>
#include <random>

#include "otakey/bytes.hpp"

namespace otakey::crypto {

inline constexpr std::size_t kKeySize = 16;
inline constexpr std::size_t kNonceSize = 16;
inline constexpr std::size_t kIvSize = 16;
inline constexpr std::size_t kTagSize = 32;
inline constexpr std::size_t kBlockSize = 16;
inline constexpr std::size_t kMaxPlaintext = (std::size_t{1} << 24) - 1;

struct SymmetricKey {
  std::array<std::uint8_t, kKeySize> bytes{};

  ByteView view() const { return bytes; }
  bool operator==(const SymmetricKey&) const = default;
  auto operator<=>(const SymmetricKey&) const = default;

  static SymmetricKey from_hex(std::string_view hex);
  static SymmetricKey from_bytes(ByteView raw);
  std::string hex() const { return to_hex(bytes); }
};

using Nonce = std::array<std::uint8_t, kNonceSize>;
using Tag = std::array<std::uint8_t, kTagSize>;

// Randomness source. Default-constructed handles draw from the OS CSPRNG;
// seeded handles replay a fixed mt19937_64 stream for reproducible runs.
class Rng {
 public:
  Rng() = default;
  explicit Rng(std::uint64_t seed) : engine_(std::in_place, seed) {}

  void fill(std::span<std::uint8_t> out);
  Nonce nonce();
  SymmetricKey key();
  std::uint64_t next_u64();
  bool seeded() const { return engine_.has_value(); }

 private:
  std::optional<std::mt19937_64> engine_;
};

SymmetricKey generate_key(std::optional<std::uint64_t> rng_seed = std::nullopt);

struct SealedMessage {
  std::array<std::uint8_t, kIvSize> iv{};
  Tag tag{};
  Bytes ciphertext;

  // iv(16) || tag(32) || ciphertext
  Bytes encode() const;
  static SealedMessage decode(ByteView wire);
  bool operator==(const SealedMessage&) const = default;
};

SealedMessage seal(const SymmetricKey& key, ByteView plaintext, Rng& rng);

// Throws Error(TagMismatch) on authentication failure, wrong key, or bad
// padding; the three cases are deliberately indistinguishable.
Bytes open(const SymmetricKey& key, const SealedMessage& msg);

Tag hmac_sha256(ByteView key, ByteView data);
bool constant_time_equal(ByteView a, ByteView b);

namespace detail {
// Raw primitives exposed for known-answer testing.
Bytes aes128_cbc_encrypt(const SymmetricKey& key, ByteView iv, ByteView plaintext, bool pad);
Bytes aes128_cbc_decrypt(const SymmetricKey& key, ByteView iv, ByteView ciphertext, bool pad);
}  // namespace detail

}  // namespace otakey::crypto
