#pragma once

// Fixed 512-byte link cells and the 505-byte relay payload framing that the
// layered encryption operates on. The byte layouts here are the bit-exact
// link wire format; golden vectors live in tests/golden/cells.golden.
//
//   cell:  circuit_id u32 | command u8 | length u16 | payload[505]
//   relay: recognized[2] | stream_id u16 | digest[4] | data_length u16 |
//          relay_command u8 | data[494]
//
// All integers big-endian; payload and data zero-padded on encode, padding
// ignored on decode.

#include <algorithm>

#include "tomen/common.hpp"

namespace tomen {

constexpr size_t kCellSize = 512;
constexpr size_t kCellPayloadSize = 505;
constexpr size_t kRelayHeaderSize = 11;
constexpr size_t kRelayDataMax = kCellPayloadSize - kRelayHeaderSize;  // 494

enum class CellCommand : uint8_t {
  kCreate = 1,
  kCreated = 2,
  kDestroy = 3,
  kRelay = 4,
};

enum class RelayCommand : uint8_t {
  kExtend = 1,
  kExtended = 2,
  kBegin = 3,
  kConnected = 4,
  kData = 5,
  kEnd = 6,
};

inline const char* cell_command_name(CellCommand c) {
  switch (c) {
    case CellCommand::kCreate: return "CREATE";
    case CellCommand::kCreated: return "CREATED";
    case CellCommand::kDestroy: return "DESTROY";
    case CellCommand::kRelay: return "RELAY";
  }
  return "?";
}

struct Cell {
  uint32_t circuit_id = 0;
  CellCommand command = CellCommand::kCreate;
  Bytes payload;  // meaningful bytes only; encode zero-pads to 505

  bool operator==(const Cell&) const = default;
};

struct RelayPayload {
  std::array<uint8_t, 2> recognized{};  // all-zero when peeled at the right hop
  uint16_t stream_id = 0;               // 0 = circuit-level control
  std::array<uint8_t, 4> digest{};      // truncated running integrity digest
  RelayCommand relay_command = RelayCommand::kData;
  Bytes data;

  bool operator==(const RelayPayload&) const = default;
};

using CellBuf = std::array<uint8_t, kCellSize>;
using PayloadBuf = std::array<uint8_t, kCellPayloadSize>;

inline CellBuf encode_cell(const Cell& cell) {
  if (cell.payload.size() > kCellPayloadSize) {
    throw Error(Errc::encode_length, "cell payload exceeds 505 bytes");
  }
  CellBuf buf{};
  put_u32(buf.data(), cell.circuit_id);
  buf[4] = static_cast<uint8_t>(cell.command);
  put_u16(buf.data() + 5, static_cast<uint16_t>(cell.payload.size()));
  std::copy(cell.payload.begin(), cell.payload.end(), buf.begin() + 7);
  return buf;
}

inline Cell decode_cell(ByteView buf) {
  if (buf.size() != kCellSize) {
    throw Error(Errc::decode_size, "cell must be exactly 512 bytes");
  }
  Cell cell;
  cell.circuit_id = get_u32(buf.data());
  uint8_t cmd = buf[4];
  if (cmd < 1 || cmd > 4) {
    throw Error(Errc::decode_command, "unknown cell command " + std::to_string(cmd));
  }
  cell.command = static_cast<CellCommand>(cmd);
  uint16_t length = get_u16(buf.data() + 5);
  if (length > kCellPayloadSize) {
    throw Error(Errc::decode_length, "cell length field exceeds 505");
  }
  cell.payload.assign(buf.begin() + 7, buf.begin() + 7 + length);
  return cell;
}

inline PayloadBuf encode_relay_payload(const RelayPayload& rp) {
  if (rp.data.size() > kRelayDataMax) {
    throw Error(Errc::encode_length, "relay data exceeds 494 bytes");
  }
  PayloadBuf buf{};
  buf[0] = rp.recognized[0];
  buf[1] = rp.recognized[1];
  put_u16(buf.data() + 2, rp.stream_id);
  std::copy(rp.digest.begin(), rp.digest.end(), buf.begin() + 4);
  put_u16(buf.data() + 8, static_cast<uint16_t>(rp.data.size()));
  buf[10] = static_cast<uint8_t>(rp.relay_command);
  std::copy(rp.data.begin(), rp.data.end(), buf.begin() + kRelayHeaderSize);
  return buf;
}

inline RelayPayload decode_relay_payload(ByteView buf) {
  if (buf.size() != kCellPayloadSize) {
    throw Error(Errc::decode_size, "relay payload must be exactly 505 bytes");
  }
  RelayPayload rp;
  rp.recognized = {buf[0], buf[1]};
  rp.stream_id = get_u16(buf.data() + 2);
  std::copy(buf.begin() + 4, buf.begin() + 8, rp.digest.begin());
  uint16_t data_length = get_u16(buf.data() + 8);
  if (data_length > kRelayDataMax) {
    throw Error(Errc::decode_length, "relay data_length exceeds 494");
  }
  uint8_t cmd = buf[10];
  if (cmd < 1 || cmd > 6) {
    throw Error(Errc::decode_command, "unknown relay command " + std::to_string(cmd));
  }
  rp.relay_command = static_cast<RelayCommand>(cmd);
  rp.data.assign(buf.begin() + kRelayHeaderSize, buf.begin() + kRelayHeaderSize + data_length);
  return rp;
}

// Quick structural check used by relays before attempting full recognition:
// a peeled payload addressed to this hop starts with a zero sentinel.
inline bool looks_recognized(const PayloadBuf& buf) {
  return buf[0] == 0 && buf[1] == 0;
}

}  // namespace tomen
