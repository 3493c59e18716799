#pragma once

// Thin wrappers over libsodium primitives plus an in-tree HKDF-SHA256.
// Everything protocol-level (handshake, key schedule, layering) lives in
// handshake.hpp; this file is the only place that names concrete primitives,
// so they can be swapped without touching protocol logic.

#include <sodium.h>

#include <mutex>

#include "tomen/common.hpp"

namespace tomen::crypto {

inline void init() {
  static std::once_flag once;
  std::call_once(once, [] {
    if (sodium_init() < 0) throw Error(Errc::protocol, "sodium_init failed");
  });
}

constexpr size_t kHashSize = 32;
constexpr size_t kKeySize = 32;
constexpr size_t kPointSize = 32;
constexpr size_t kSignatureSize = 64;

using Hash = std::array<uint8_t, kHashSize>;
using Key = std::array<uint8_t, kKeySize>;

inline Hash sha256(ByteView data) {
  init();
  Hash out;
  crypto_hash_sha256(out.data(), data.data(), data.size());
  return out;
}

// Incremental SHA-256 with copyable state; the running relay digests rely on
// snapshotting mid-stream.
class Sha256State {
 public:
  Sha256State() {
    init();
    crypto_hash_sha256_init(&state_);
  }

  void update(ByteView data) { crypto_hash_sha256_update(&state_, data.data(), data.size()); }

  Hash peek() const {
    auto copy = state_;
    Hash out;
    crypto_hash_sha256_final(&copy, out.data());
    return out;
  }

  bool operator==(const Sha256State& other) const {
    return std::memcmp(&state_, &other.state_, sizeof(state_)) == 0;
  }

 private:
  crypto_hash_sha256_state state_;
};

inline Hash hmac_sha256(ByteView key, ByteView data) {
  init();
  crypto_auth_hmacsha256_state st;
  crypto_auth_hmacsha256_init(&st, key.data(), key.size());
  crypto_auth_hmacsha256_update(&st, data.data(), data.size());
  Hash out;
  crypto_auth_hmacsha256_final(&st, out.data());
  return out;
}

// RFC 5869 extract-then-expand over HMAC-SHA256.
inline Bytes hkdf_sha256(ByteView ikm, ByteView salt, ByteView info, size_t length) {
  Bytes ikm_copy(ikm.begin(), ikm.end());
  Hash prk = hmac_sha256(salt, ikm_copy);
  Bytes out;
  Bytes t;
  uint8_t block = 1;
  while (out.size() < length) {
    Bytes input = t;
    input.insert(input.end(), info.begin(), info.end());
    input.push_back(block++);
    Hash h = hmac_sha256(ByteView(prk.data(), prk.size()), input);
    t.assign(h.begin(), h.end());
    out.insert(out.end(), t.begin(), t.end());
  }
  out.resize(length);
  return out;
}

// X25519 Diffie-Hellman.
inline Key x25519_public(const Key& secret) {
  init();
  Key pk;
  crypto_scalarmult_base(pk.data(), secret.data());
  return pk;
}

inline Key x25519_shared(const Key& secret, const Key& peer_public) {
  init();
  Key shared;
  if (crypto_scalarmult(shared.data(), secret.data(), peer_public.data()) != 0) {
    throw Error(Errc::handshake_malformed, "low-order group element");
  }
  return shared;
}

// Ed25519 signatures for relay identities.
struct SignKeyPair {
  std::array<uint8_t, 32> seed;
  std::array<uint8_t, 64> secret;
  std::array<uint8_t, 32> public_key;
};

inline SignKeyPair ed25519_from_seed(const std::array<uint8_t, 32>& seed) {
  init();
  SignKeyPair kp;
  kp.seed = seed;
  crypto_sign_seed_keypair(kp.public_key.data(), kp.secret.data(), seed.data());
  return kp;
}

inline std::array<uint8_t, kSignatureSize> ed25519_sign(const SignKeyPair& kp, ByteView msg) {
  std::array<uint8_t, kSignatureSize> sig;
  crypto_sign_detached(sig.data(), nullptr, msg.data(), msg.size(), kp.secret.data());
  return sig;
}

inline bool ed25519_verify(const std::array<uint8_t, 32>& public_key, ByteView msg,
                           ByteView sig) {
  init();
  if (sig.size() != kSignatureSize) return false;
  return crypto_sign_verify_detached(sig.data(), msg.data(), msg.size(), public_key.data()) == 0;
}

// ChaCha20 keystream XOR starting at the given 64-byte block index.
inline void chacha20_xor(uint8_t* data, size_t len, const std::array<uint8_t, 8>& nonce,
                         uint64_t block, const Key& key) {
  init();
  crypto_stream_chacha20_xor_ic(data, data, len, nonce.data(), block, key.data());
}

}  // namespace tomen::crypto
