#include "otakey/crypto.hpp"

#include <openssl/crypto.h>
#include <openssl/evp.h>
#include <openssl/hmac.h>
#include <openssl/rand.h>

#include <memory>

#include "otakey/error.hpp"

namespace otakey::crypto {

namespace {

struct CipherCtxDeleter {
  void operator()(EVP_CIPHER_CTX* ctx) const { EVP_CIPHER_CTX_free(ctx); }
};
using CipherCtx = std::unique_ptr<EVP_CIPHER_CTX, CipherCtxDeleter>;

struct PaddingError {};

Bytes run_cipher(bool encrypt, const SymmetricKey& key, ByteView iv, ByteView input, bool pad) {
  if (iv.size() != kIvSize) throw Error(ErrorCode::Malformed, "iv must be 16 bytes");
  CipherCtx ctx(EVP_CIPHER_CTX_new());
  if (!ctx) throw std::bad_alloc();
  if (EVP_CipherInit_ex(ctx.get(), EVP_aes_128_cbc(), nullptr, key.bytes.data(), iv.data(),
                        encrypt ? 1 : 0) != 1) {
    throw std::runtime_error("EVP_CipherInit_ex failed");
  }
  EVP_CIPHER_CTX_set_padding(ctx.get(), pad ? 1 : 0);

  Bytes out(input.size() + kBlockSize);
  int produced = 0;
  if (EVP_CipherUpdate(ctx.get(), out.data(), &produced, input.data(),
                       static_cast<int>(input.size())) != 1) {
    throw std::runtime_error("EVP_CipherUpdate failed");
  }
  int tail = 0;
  if (EVP_CipherFinal_ex(ctx.get(), out.data() + produced, &tail) != 1) {
    if (!encrypt) throw PaddingError{};
    throw std::runtime_error("EVP_CipherFinal_ex failed");
  }
  out.resize(static_cast<std::size_t>(produced + tail));
  return out;
}

Tag envelope_tag(const SymmetricKey& key, ByteView iv, ByteView ciphertext) {
  Bytes mac_input;
  mac_input.reserve(iv.size() + ciphertext.size());
  mac_input.insert(mac_input.end(), iv.begin(), iv.end());
  mac_input.insert(mac_input.end(), ciphertext.begin(), ciphertext.end());
  return hmac_sha256(key.view(), mac_input);
}

}  // namespace

SymmetricKey SymmetricKey::from_hex(std::string_view hex) {
  return SymmetricKey{array_from_hex<kKeySize>(hex)};
}

SymmetricKey SymmetricKey::from_bytes(ByteView raw) {
  if (raw.size() != kKeySize) throw Error(ErrorCode::Malformed, "key must be 16 bytes");
  SymmetricKey k;
  std::copy(raw.begin(), raw.end(), k.bytes.begin());
  return k;
}

void Rng::fill(std::span<std::uint8_t> out) {
  if (!engine_) {
    if (RAND_bytes(out.data(), static_cast<int>(out.size())) != 1) {
      throw std::runtime_error("RAND_bytes failed");
    }
    return;
  }
  std::size_t i = 0;
  while (i < out.size()) {
    std::uint64_t word = (*engine_)();
    for (int b = 0; b < 8 && i < out.size(); ++b, ++i) {
      out[i] = static_cast<std::uint8_t>(word >> (8 * b));
    }
  }
}

Nonce Rng::nonce() {
  Nonce n{};
  fill(n);
  return n;
}

SymmetricKey Rng::key() {
  SymmetricKey k;
  fill(k.bytes);
  return k;
}

std::uint64_t Rng::next_u64() {
  if (engine_) return (*engine_)();
  std::array<std::uint8_t, 8> raw{};
  fill(raw);
  std::uint64_t v = 0;
  for (auto b : raw) v = (v << 8) | b;
  return v;
}

SymmetricKey generate_key(std::optional<std::uint64_t> rng_seed) {
  Rng rng = rng_seed ? Rng(*rng_seed) : Rng();
  return rng.key();
}

Bytes SealedMessage::encode() const {
  ByteWriter w;
  w.raw(iv).raw(tag).raw(ciphertext);
  return std::move(w).bytes();
}

SealedMessage SealedMessage::decode(ByteView wire) {
  ByteReader r(wire);
  SealedMessage m;
  m.iv = r.fixed<kIvSize>();
  m.tag = r.fixed<kTagSize>();
  auto ct = r.rest();
  if (ct.size() < kBlockSize || ct.size() % kBlockSize != 0) {
    throw Error(ErrorCode::Malformed, "ciphertext length must be a positive multiple of 16");
  }
  m.ciphertext.assign(ct.begin(), ct.end());
  return m;
}

SealedMessage seal(const SymmetricKey& key, ByteView plaintext, Rng& rng) {
  if (plaintext.size() > kMaxPlaintext) throw Error(ErrorCode::SizeError, "plaintext exceeds 2^24-1 bytes");
  SealedMessage m;
  rng.fill(m.iv);
  m.ciphertext = run_cipher(true, key, m.iv, plaintext, true);
  m.tag = envelope_tag(key, m.iv, m.ciphertext);
  return m;
}

Bytes open(const SymmetricKey& key, const SealedMessage& msg) {
  if (msg.ciphertext.size() < kBlockSize || msg.ciphertext.size() % kBlockSize != 0) {
    throw Error(ErrorCode::TagMismatch);
  }
  auto expected = envelope_tag(key, msg.iv, msg.ciphertext);
  if (!constant_time_equal(expected, msg.tag)) throw Error(ErrorCode::TagMismatch);
  try {
    return run_cipher(false, key, msg.iv, msg.ciphertext, true);
  } catch (const PaddingError&) {
    throw Error(ErrorCode::TagMismatch);
  }
}

Tag hmac_sha256(ByteView key, ByteView data) {
  Tag out{};
  unsigned int len = 0;
  if (HMAC(EVP_sha256(), key.data(), static_cast<int>(key.size()), data.data(), data.size(), out.data(),
           &len) == nullptr ||
      len != kTagSize) {
    throw std::runtime_error("HMAC-SHA256 failed");
  }
  return out;
}

bool constant_time_equal(ByteView a, ByteView b) {
  if (a.size() != b.size()) return false;
  return CRYPTO_memcmp(a.data(), b.data(), a.size()) == 0;
}

namespace detail {

Bytes aes128_cbc_encrypt(const SymmetricKey& key, ByteView iv, ByteView plaintext, bool pad) {
  return run_cipher(true, key, iv, plaintext, pad);
}

Bytes aes128_cbc_decrypt(const SymmetricKey& key, ByteView iv, ByteView ciphertext, bool pad) {
  try {
    return run_cipher(false, key, iv, ciphertext, pad);
  } catch (const PaddingError&) {
    throw Error(ErrorCode::TagMismatch, "bad padding");
  }
}

}  // namespace detail

}  // namespace otakey::crypto
