#pragma once

// Seedable deterministic randomness source. Every piece of protocol
// randomness flows through one of these so runs are reproducible; live-mode
// entry points seed from the OS instead.
//
// Stream definition (mirrored by scripts/gen_goldens.py): the 32-byte stream
// key is SHA-256("tomen-rng-v1" || LE64(seed)); output is the ChaCha20
// keystream under that key with an all-zero 8-byte nonce, consumed
// sequentially from block 0. fork(label) derives an independent child stream
// keyed by SHA-256(key || "/" || label), unaffected by the parent's
// consumption so far.

#include <limits>
#include <random>

#include "tomen/common.hpp"
#include "tomen/crypto.hpp"

namespace tomen {

class Rng {
 public:
  explicit Rng(uint64_t seed) {
    Bytes material = to_bytes("tomen-rng-v1");
    material.resize(material.size() + 8);
    for (int i = 0; i < 8; ++i) material[material.size() - 8 + i] = static_cast<uint8_t>(seed >> (8 * i));
    key_ = crypto::sha256(material);
  }

  static Rng from_key(const crypto::Hash& key) {
    Rng r;
    r.key_ = key;
    return r;
  }

  static Rng from_os_entropy() {
    crypto::init();
    crypto::Hash key;
    randombytes_buf(key.data(), key.size());
    return from_key(key);
  }

  void fill(uint8_t* out, size_t n) {
    uint64_t first_block = offset_ / 64;
    size_t skip = offset_ % 64;
    Bytes buf(skip + n, 0);
    std::array<uint8_t, 8> nonce{};
    crypto::chacha20_xor(buf.data(), buf.size(), nonce, first_block, key_);
    std::memcpy(out, buf.data() + skip, n);
    offset_ += n;
  }

  Bytes bytes(size_t n) {
    Bytes out(n);
    fill(out.data(), n);
    return out;
  }

  template <size_t N>
  std::array<uint8_t, N> array() {
    std::array<uint8_t, N> out;
    fill(out.data(), N);
    return out;
  }

  uint64_t next_u64() {
    uint8_t b[8];
    fill(b, 8);
    uint64_t v = 0;
    for (int i = 7; i >= 0; --i) v = v << 8 | b[i];  // little-endian
    return v;
  }

  // Unbiased integer in [0, n) via rejection sampling.
  uint64_t uniform(uint64_t n) {
    if (n == 0) throw Error(Errc::protocol, "uniform(0)");
    uint64_t max = std::numeric_limits<uint64_t>::max();
    uint64_t rem = ((max % n) + 1) % n;  // 2^64 mod n
    uint64_t threshold = max - rem;
    for (;;) {
      uint64_t x = next_u64();
      if (x <= threshold) return x % n;
    }
  }

  Rng fork(std::string_view label) const {
    Bytes material(key_.begin(), key_.end());
    material.push_back('/');
    material.insert(material.end(), label.begin(), label.end());
    return from_key(crypto::sha256(material));
  }

 private:
  Rng() = default;

  crypto::Hash key_{};
  uint64_t offset_ = 0;
};

}  // namespace tomen
