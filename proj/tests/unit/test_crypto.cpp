#include <gtest/gtest.h>

#include <set>

#include "otakey/crypto.hpp"
#include "otakey/error.hpp"

using namespace otakey;
using namespace otakey::crypto;

namespace {

void expect_tag_mismatch(const SymmetricKey& k, const SealedMessage& m) {
  try {
    open(k, m);
    FAIL() << "open succeeded";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::TagMismatch);
  }
}

}  // namespace

// NIST SP 800-38A, F.2.1 / F.2.2 (CBC-AES128).
TEST(CryptoKat, AesCbc128) {
  auto key = SymmetricKey::from_hex("2b7e151628aed2a6abf7158809cf4f3c");
  auto iv = from_hex("000102030405060708090a0b0c0d0e0f");
  auto plain = from_hex(
      "6bc1bee22e409f96e93d7e117393172a"
      "ae2d8a571e03ac9c9eb76fac45af8e51"
      "30c81c46a35ce411e5fbc1191a0a52ef"
      "f69f2445df4f9b17ad2b417be66c3710");
  auto cipher = from_hex(
      "7649abac8119b246cee98e9b12e9197d"
      "5086cb9b507219ee95db113a917678b2"
      "73bed6b8e3c1743b7116e69e22229516"
      "3ff1caa1681fac09120eca307586e1a7");
  EXPECT_EQ(detail::aes128_cbc_encrypt(key, iv, plain, false), cipher);
  EXPECT_EQ(detail::aes128_cbc_decrypt(key, iv, cipher, false), plain);
}

// RFC 4231 test cases 1 and 2.
TEST(CryptoKat, HmacSha256) {
  Bytes key1(20, 0x0b);
  auto t1 = hmac_sha256(key1, to_bytes("Hi There"));
  EXPECT_EQ(to_hex(t1), "b0344c61d8db38535ca8afceaf0bf12b881dc200c9833da726e9376c2e32cff7");
  auto t2 = hmac_sha256(to_bytes("Jefe"), to_bytes("what do ya want for nothing?"));
  EXPECT_EQ(to_hex(t2), "5bdcc146bf60754e6a042426089575c75a003f089d2739839dec58b964ec3843");
}

TEST(CryptoKeys, SeededGenerationIsReproducible) {
  EXPECT_EQ(generate_key(7), generate_key(7));
  EXPECT_NE(generate_key(7), generate_key(8));
}

TEST(CryptoKeys, UnseededDrawsAreDistinct) {
  std::set<SymmetricKey> seen;
  for (int i = 0; i < 10000; ++i) seen.insert(generate_key());
  EXPECT_EQ(seen.size(), 10000u);
}

TEST(CryptoEnvelope, RoundTrip) {
  Rng rng(1);
  auto k = rng.key();
  Bytes kib(1024);
  rng.fill(kib);
  for (const Bytes& m : {Bytes{}, kib}) {
    auto sealed = seal(k, m, rng);
    EXPECT_EQ(sealed.ciphertext.size() % kBlockSize, 0u);
    EXPECT_EQ(open(k, sealed), m);
    EXPECT_EQ(open(k, SealedMessage::decode(sealed.encode())), m);
  }
}

TEST(CryptoEnvelope, FreshIvPerSeal) {
  Rng rng(2);
  auto k = rng.key();
  auto m = to_bytes("same message");
  auto a = seal(k, m, rng);
  auto b = seal(k, m, rng);
  EXPECT_NE(a.iv, b.iv);
  EXPECT_NE(a.ciphertext, b.ciphertext);
}

TEST(CryptoEnvelope, EveryBitFlipIsRejected) {
  Rng rng(3);
  auto k = rng.key();
  auto wire = seal(k, to_bytes("confirm nonce2 nonce3"), rng).encode();
  for (std::size_t bit = 0; bit < wire.size() * 8; ++bit) {
    auto copy = wire;
    copy[bit / 8] ^= static_cast<std::uint8_t>(1u << (bit % 8));
    expect_tag_mismatch(k, SealedMessage::decode(copy));
  }
}

TEST(CryptoEnvelope, WrongKeyIsRejected) {
  Rng rng(4);
  auto sealed = seal(rng.key(), to_bytes("x"), rng);
  expect_tag_mismatch(rng.key(), sealed);
}

TEST(CryptoEnvelope, TruncatedTagIsRejected) {
  Rng rng(5);
  auto k = rng.key();
  auto wire = seal(k, to_bytes("payload"), rng).encode();
  // Dropping the tag's last byte shifts every later byte by one.
  wire.erase(wire.begin() + kIvSize + kTagSize - 1);
  EXPECT_THROW(open(k, SealedMessage::decode(wire)), Error);
}

TEST(CryptoEnvelope, OversizedPlaintextIsRejected) {
  Rng rng(6);
  Bytes big(kMaxPlaintext + 1);
  try {
    seal(rng.key(), big, rng);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::SizeError);
  }
}

TEST(CryptoEnvelope, ConstantTimeEqual) {
  Bytes a{1, 2, 3}, b{1, 2, 3}, c{1, 2, 4};
  EXPECT_TRUE(constant_time_equal(a, b));
  EXPECT_FALSE(constant_time_equal(a, c));
  EXPECT_FALSE(constant_time_equal(a, Bytes{1, 2}));
}
