#pragma once

// Per-hop key agreement and the layered stream cipher.
//
// Handshake: ephemeral-ephemeral X25519, authenticated by an Ed25519
// signature from the relay's directory-published identity key over the two
// ephemeral elements. The CREATED payload is
//
//   Y(32) || confirm_tag(32) || signature(64)
//
// with confirm_tag = SHA-256("tomen-confirm:" || shared). Directional keys
// and digest seeds come from HKDF-SHA256 under fixed labels. The layer
// cipher is ChaCha20 keyed per hop with a per-cell big-endian counter nonce;
// XOR keystream makes add-layer and peel-layer the same operation.

#include <optional>

#include "tomen/cellwire.hpp"
#include "tomen/crypto.hpp"
#include "tomen/rng.hpp"

namespace tomen {

constexpr size_t kCreatePayloadSize = 32;
constexpr size_t kCreatedPayloadSize = 32 + 32 + 64;

inline constexpr std::string_view kHkdfSalt = "tomen-v1 hop keys";
inline constexpr std::string_view kConfirmLabel = "tomen-confirm:";

struct KeyPair {
  crypto::Key private_scalar{};
  crypto::Key public_element{};

  bool operator==(const KeyPair&) const = default;
};

struct IdentityKeyPair {
  crypto::SignKeyPair inner;

  const std::array<uint8_t, 32>& public_key() const { return inner.public_key; }
};

inline KeyPair gen_keypair(Rng& rng) {
  KeyPair kp;
  kp.private_scalar = rng.array<32>();
  kp.public_element = crypto::x25519_public(kp.private_scalar);
  return kp;
}

inline IdentityKeyPair gen_identity_keypair(Rng& rng) {
  return IdentityKeyPair{crypto::ed25519_from_seed(rng.array<32>())};
}

// Directory fingerprint of an identity key: lowercase hex SHA-256.
inline std::string fingerprint(const std::array<uint8_t, 32>& identity_public) {
  auto h = crypto::sha256(identity_public);
  return hex_encode(h);
}

// Running integrity digest for the recognized-cell check. Client and the
// recognizing hop keep mirrored copies seeded from the hop's digest key; both
// absorb every sealed payload (digest field zeroed) in order, so the 4-byte
// truncation stays synchronized and order-sensitive.
class RunningDigest {
 public:
  RunningDigest() = default;

  explicit RunningDigest(const crypto::Key& seed) { state_.update(seed); }

  std::array<uint8_t, 4> absorb(const PayloadBuf& zeroed_payload) {
    state_.update(zeroed_payload);
    auto h = state_.peek();
    return {h[0], h[1], h[2], h[3]};
  }

  // Recompute on a copy; commit only if the seal matches.
  bool try_absorb(const PayloadBuf& zeroed_payload, const std::array<uint8_t, 4>& expect) {
    auto trial = state_;
    trial.update(zeroed_payload);
    auto h = trial.peek();
    if (std::memcmp(h.data(), expect.data(), 4) != 0) return false;
    state_ = trial;
    return true;
  }

  bool operator==(const RunningDigest&) const = default;

 private:
  crypto::Sha256State state_;
};

struct HopKeys {
  crypto::Key forward_key{};
  crypto::Key backward_key{};
  crypto::Key forward_digest_seed{};
  crypto::Key backward_digest_seed{};

  bool operator==(const HopKeys&) const = default;
};

inline HopKeys derive_hop_keys(ByteView shared_secret) {
  if (shared_secret.empty()) throw Error(Errc::handshake_malformed, "empty shared secret");
  auto expand = [&](std::string_view label) {
    Bytes out = crypto::hkdf_sha256(shared_secret, to_bytes(kHkdfSalt), to_bytes(label), 32);
    crypto::Key key;
    std::copy(out.begin(), out.end(), key.begin());
    return key;
  };
  HopKeys keys;
  keys.forward_key = expand("fwd-key");
  keys.backward_key = expand("bwd-key");
  keys.forward_digest_seed = expand("fwd-dig");
  keys.backward_digest_seed = expand("bwd-dig");
  return keys;
}

inline crypto::Hash confirm_tag(const crypto::Key& shared) {
  Bytes material = to_bytes(kConfirmLabel);
  material.insert(material.end(), shared.begin(), shared.end());
  return crypto::sha256(material);
}

inline Bytes client_create_payload(const KeyPair& client_eph) {
  return Bytes(client_eph.public_element.begin(), client_eph.public_element.end());
}

struct RelayResponse {
  Bytes created_payload;
  HopKeys hop_keys;
};

inline RelayResponse relay_respond(ByteView create_payload, const IdentityKeyPair& relay_identity,
                                   Rng& rng) {
  if (create_payload.size() != kCreatePayloadSize) {
    throw Error(Errc::handshake_malformed, "CREATE payload must be 32 bytes");
  }
  crypto::Key client_public;
  std::copy(create_payload.begin(), create_payload.end(), client_public.begin());

  KeyPair eph = gen_keypair(rng);
  crypto::Key shared = crypto::x25519_shared(eph.private_scalar, client_public);

  Bytes transcript(client_public.begin(), client_public.end());
  transcript.insert(transcript.end(), eph.public_element.begin(), eph.public_element.end());
  auto sig = crypto::ed25519_sign(relay_identity.inner, transcript);
  auto tag = confirm_tag(shared);

  RelayResponse resp;
  resp.created_payload.assign(eph.public_element.begin(), eph.public_element.end());
  resp.created_payload.insert(resp.created_payload.end(), tag.begin(), tag.end());
  resp.created_payload.insert(resp.created_payload.end(), sig.begin(), sig.end());
  resp.hop_keys = derive_hop_keys(shared);
  return resp;
}

inline HopKeys client_finish(const KeyPair& client_eph, ByteView created_payload,
                             const std::array<uint8_t, 32>& expected_identity) {
  if (created_payload.size() != kCreatedPayloadSize) {
    throw Error(Errc::handshake_malformed, "CREATED payload must be 128 bytes");
  }
  crypto::Key relay_public;
  std::copy(created_payload.begin(), created_payload.begin() + 32, relay_public.begin());
  ByteView tag = created_payload.subspan(32, 32);
  ByteView sig = created_payload.subspan(64, 64);

  Bytes transcript(client_eph.public_element.begin(), client_eph.public_element.end());
  transcript.insert(transcript.end(), relay_public.begin(), relay_public.end());
  if (!crypto::ed25519_verify(expected_identity, transcript, sig)) {
    throw Error(Errc::identity_mismatch, "handshake signature does not match directory identity");
  }

  crypto::Key shared = crypto::x25519_shared(client_eph.private_scalar, relay_public);
  auto expect_tag = confirm_tag(shared);
  if (std::memcmp(expect_tag.data(), tag.data(), tag.size()) != 0) {
    throw Error(Errc::key_mismatch, "key confirmation tag mismatch");
  }
  return derive_hop_keys(shared);
}

// One direction of one hop's layer cipher. The counter is the per-cell
// nonce; it must never repeat for the same key, which the circuit teardown
// on exhaustion guarantees.
class LayerCipherState {
 public:
  LayerCipherState() = default;
  explicit LayerCipherState(const crypto::Key& key, uint64_t counter = 0)
      : key_(key), counter_(counter) {}

  PayloadBuf apply(const PayloadBuf& payload) {
    if (counter_ == UINT64_MAX) {
      throw Error(Errc::counter_exhausted, "layer cipher counter exhausted");
    }
    PayloadBuf out = payload;
    std::array<uint8_t, 8> nonce;
    put_u64(nonce.data(), counter_);
    crypto::chacha20_xor(out.data(), out.size(), nonce, 0, key_);
    ++counter_;
    return out;
  }

  uint64_t counter() const { return counter_; }
  void set_counter(uint64_t c) { counter_ = c; }
  const crypto::Key& key() const { return key_; }

  bool operator==(const LayerCipherState&) const = default;

 private:
  crypto::Key key_{};
  uint64_t counter_ = 0;
};

// Full per-direction cipher/digest state a hop (or the client's mirror of a
// hop) keeps for one circuit.
struct HopCryptoState {
  LayerCipherState forward;
  LayerCipherState backward;
  RunningDigest forward_digest;
  RunningDigest backward_digest;

  explicit HopCryptoState(const HopKeys& keys)
      : forward(keys.forward_key),
        backward(keys.backward_key),
        forward_digest(keys.forward_digest_seed),
        backward_digest(keys.backward_digest_seed) {}
};

// Seal: zero the digest field, absorb into the running state, then write the
// 4-byte truncation into the payload.
inline RelayPayload update_and_seal_digest(RunningDigest& state, RelayPayload rp) {
  rp.digest = {0, 0, 0, 0};
  rp.digest = state.absorb(encode_relay_payload(rp));
  return rp;
}

// Verify a sealed payload against a synchronized digest state; advances the
// state only on success. Operates on the received wire bytes, so every one
// of the 505 bytes (padding included) is covered.
inline bool verify_digest(RunningDigest& state, const PayloadBuf& wire) {
  PayloadBuf zeroed = wire;
  std::array<uint8_t, 4> expect;
  std::copy(wire.begin() + 4, wire.begin() + 8, expect.begin());
  std::fill(zeroed.begin() + 4, zeroed.begin() + 8, 0);
  return state.try_absorb(zeroed, expect);
}

inline bool verify_digest(RunningDigest& state, const RelayPayload& rp) {
  return verify_digest(state, encode_relay_payload(rp));
}

}  // namespace tomen
