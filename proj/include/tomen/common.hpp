#pragma once

#include <array>
#include <cstdint>
#include <cstring>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace tomen {

using Bytes = std::vector<uint8_t>;
using ByteView = std::span<const uint8_t>;

enum class Errc {
  encode_length,
  decode_size,
  decode_command,
  decode_length,
  handshake_malformed,
  identity_mismatch,
  key_mismatch,
  counter_exhausted,
  fingerprint_mismatch,
  not_found,
  insufficient_relays,
  no_eligible_exit,
  circuit_closed,
  stream_refused,
  unreachable,
  malformed_transaction,
  config,
  network,
  protocol,
  verdict_failed,
};

inline const char* errc_name(Errc e) {
  switch (e) {
    case Errc::encode_length: return "encode_length";
    case Errc::decode_size: return "decode_size";
    case Errc::decode_command: return "decode_command";
    case Errc::decode_length: return "decode_length";
    case Errc::handshake_malformed: return "handshake_malformed";
    case Errc::identity_mismatch: return "identity_mismatch";
    case Errc::key_mismatch: return "key_mismatch";
    case Errc::counter_exhausted: return "counter_exhausted";
    case Errc::fingerprint_mismatch: return "fingerprint_mismatch";
    case Errc::not_found: return "not_found";
    case Errc::insufficient_relays: return "insufficient_relays";
    case Errc::no_eligible_exit: return "no_eligible_exit";
    case Errc::circuit_closed: return "circuit_closed";
    case Errc::stream_refused: return "stream_refused";
    case Errc::unreachable: return "unreachable";
    case Errc::malformed_transaction: return "malformed_transaction";
    case Errc::config: return "config";
    case Errc::network: return "network";
    case Errc::protocol: return "protocol";
    case Errc::verdict_failed: return "verdict_failed";
  }
  return "unknown";
}

class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& what)
      : std::runtime_error(std::string(errc_name(code)) + ": " + what), code_(code) {}

  Errc code() const { return code_; }

 private:
  Errc code_;
};

inline Bytes to_bytes(std::string_view s) {
  return Bytes(s.begin(), s.end());
}

inline std::string to_string(ByteView b) {
  return std::string(b.begin(), b.end());
}

inline std::string hex_encode(ByteView data) {
  static const char* digits = "0123456789abcdef";
  std::string out;
  out.reserve(data.size() * 2);
  for (uint8_t b : data) {
    out.push_back(digits[b >> 4]);
    out.push_back(digits[b & 0x0f]);
  }
  return out;
}

inline Bytes hex_decode(std::string_view hex) {
  auto nibble = [](char c) -> int {
    if (c >= '0' && c <= '9') return c - '0';
    if (c >= 'a' && c <= 'f') return c - 'a' + 10;
    if (c >= 'A' && c <= 'F') return c - 'A' + 10;
    return -1;
  };
  if (hex.size() % 2 != 0) throw Error(Errc::decode_size, "odd hex length");
  Bytes out(hex.size() / 2);
  for (size_t i = 0; i < out.size(); ++i) {
    int hi = nibble(hex[2 * i]);
    int lo = nibble(hex[2 * i + 1]);
    if (hi < 0 || lo < 0) throw Error(Errc::decode_size, "bad hex digit");
    out[i] = static_cast<uint8_t>(hi << 4 | lo);
  }
  return out;
}

// Big-endian integer helpers for the wire formats.
inline void put_u16(uint8_t* p, uint16_t v) {
  p[0] = static_cast<uint8_t>(v >> 8);
  p[1] = static_cast<uint8_t>(v);
}

inline void put_u32(uint8_t* p, uint32_t v) {
  p[0] = static_cast<uint8_t>(v >> 24);
  p[1] = static_cast<uint8_t>(v >> 16);
  p[2] = static_cast<uint8_t>(v >> 8);
  p[3] = static_cast<uint8_t>(v);
}

inline void put_u64(uint8_t* p, uint64_t v) {
  put_u32(p, static_cast<uint32_t>(v >> 32));
  put_u32(p + 4, static_cast<uint32_t>(v));
}

inline uint16_t get_u16(const uint8_t* p) {
  return static_cast<uint16_t>(p[0] << 8 | p[1]);
}

inline uint32_t get_u32(const uint8_t* p) {
  return static_cast<uint32_t>(p[0]) << 24 | static_cast<uint32_t>(p[1]) << 16 |
         static_cast<uint32_t>(p[2]) << 8 | static_cast<uint32_t>(p[3]);
}

inline uint64_t get_u64(const uint8_t* p) {
  return static_cast<uint64_t>(get_u32(p)) << 32 | get_u32(p + 4);
}

}  // namespace tomen
