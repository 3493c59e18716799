#pragma once

// Bitcoin-like transaction overlay: opaque payloads with a content-hash id,
// flooded with dedup over a fixed peer list. The submit port accepts one
// serialized transaction per stream and answers a JSON ack line; peer gossip
// reuses the same transaction framing.

#include <map>
#include <optional>
#include <set>

#include <nlohmann/json.hpp>

#include "tomen/crypto.hpp"

namespace tomen {

using json = nlohmann::json;

constexpr size_t kTxPayloadMax = 400;
constexpr size_t kTxidSize = 32;

struct Transaction {
  std::array<uint8_t, kTxidSize> txid{};
  Bytes payload;

  bool operator==(const Transaction&) const = default;
};

inline Transaction make_transaction(Bytes payload) {
  if (payload.empty() || payload.size() > kTxPayloadMax) {
    throw Error(Errc::malformed_transaction, "payload must be 1..=400 bytes");
  }
  Transaction tx;
  tx.txid = crypto::sha256(payload);
  tx.payload = std::move(payload);
  return tx;
}

inline Bytes serialize_tx(const Transaction& tx) {
  Bytes out(2 + tx.payload.size() + kTxidSize);
  put_u16(out.data(), static_cast<uint16_t>(tx.payload.size()));
  std::copy(tx.payload.begin(), tx.payload.end(), out.begin() + 2);
  std::copy(tx.txid.begin(), tx.txid.end(), out.begin() + 2 + tx.payload.size());
  return out;
}

inline Transaction parse_tx(ByteView bytes) {
  if (bytes.size() < 2 + 1 + kTxidSize) {
    throw Error(Errc::malformed_transaction, "transaction too short");
  }
  uint16_t len = get_u16(bytes.data());
  if (len == 0 || len > kTxPayloadMax || bytes.size() != 2u + len + kTxidSize) {
    throw Error(Errc::malformed_transaction, "bad payload length");
  }
  Transaction tx;
  tx.payload.assign(bytes.begin() + 2, bytes.begin() + 2 + len);
  std::copy(bytes.begin() + 2 + len, bytes.end(), tx.txid.begin());
  if (tx.txid != crypto::sha256(tx.payload)) {
    throw Error(Errc::malformed_transaction, "txid does not match payload hash");
  }
  return tx;
}

// How many bytes the frame starting at `bytes` needs in total, once the
// length prefix is readable. Used to reassemble one-tx-per-stream input.
inline std::optional<size_t> tx_frame_size(ByteView bytes) {
  if (bytes.size() < 2) return std::nullopt;
  return 2u + get_u16(bytes.data()) + kTxidSize;
}

struct GossipEnv {
  virtual ~GossipEnv() = default;
  // Ack/reject bytes back on the submitting connection.
  virtual void reply(uint64_t conn, ByteView data) = 0;
  // One-shot transaction frame to a peer's gossip port.
  virtual void gossip_send(const std::string& peer_address, ByteView data) = 0;
};

struct GossipMetrics {
  uint64_t submits = 0;
  uint64_t duplicate_submits = 0;
  uint64_t malformed_submits = 0;
  uint64_t peer_received = 0;
  uint64_t peer_duplicates = 0;
  uint64_t malformed_gossip = 0;
};

class GossipCore {
 public:
  GossipCore(std::string node_id, std::vector<std::string> peers, GossipEnv& env)
      : node_id_(std::move(node_id)), peers_(std::move(peers)), env_(env) {}

  const std::string& node_id() const { return node_id_; }
  const std::vector<std::string>& peers() const { return peers_; }
  const std::map<std::string, Transaction>& mempool() const { return mempool_; }
  const GossipMetrics& metrics() const { return metrics_; }

  // Transmissions per (txid hex, peer address); the flooding-efficiency
  // property asserts every count is <= 1.
  const std::map<std::pair<std::string, std::string>, uint64_t>& transmissions() const {
    return transmissions_;
  }

  bool knows(const std::string& txid_hex) const { return mempool_.count(txid_hex) > 0; }

  void on_submit(uint64_t conn, ByteView bytes) {
    metrics_.submits++;
    Transaction tx;
    try {
      tx = parse_tx(bytes);
    } catch (const Error& e) {
      metrics_.malformed_submits++;
      json reject{{"status", "reject"}, {"reason", e.what()}};
      send_line(conn, reject);
      return;
    }
    std::string txid_hex = hex_encode(tx.txid);
    bool known = mempool_.count(txid_hex) > 0;
    if (!known) {
      mempool_.emplace(txid_hex, tx);
      flood(tx, std::nullopt);
    } else {
      metrics_.duplicate_submits++;
    }
    json ack{{"status", "ok"}, {"txid", txid_hex}, {"known", known}};
    send_line(conn, ack);
  }

  void on_peer_gossip(const std::optional<std::string>& sender_peer_address, ByteView bytes) {
    metrics_.peer_received++;
    Transaction tx;
    try {
      tx = parse_tx(bytes);
    } catch (const Error&) {
      metrics_.malformed_gossip++;
      return;
    }
    std::string txid_hex = hex_encode(tx.txid);
    if (sender_peer_address) {
      // The sender evidently has it; never echo back on that link.
      transmissions_suppressed_.insert({txid_hex, *sender_peer_address});
    }
    if (mempool_.count(txid_hex)) {
      metrics_.peer_duplicates++;
      return;
    }
    mempool_.emplace(txid_hex, tx);
    flood(tx, sender_peer_address);
  }

 private:
  void flood(const Transaction& tx, const std::optional<std::string>& except) {
    std::string txid_hex = hex_encode(tx.txid);
    Bytes frame = serialize_tx(tx);
    for (const auto& peer : peers_) {
      if (except && peer == *except) continue;
      if (transmissions_suppressed_.count({txid_hex, peer})) continue;
      auto& count = transmissions_[{txid_hex, peer}];
      if (count > 0) continue;
      count++;
      env_.gossip_send(peer, frame);
    }
  }

  void send_line(uint64_t conn, const json& j) {
    std::string line = j.dump() + "\n";
    env_.reply(conn, to_bytes(line));
  }

  std::string node_id_;
  std::vector<std::string> peers_;
  GossipEnv& env_;
  GossipMetrics metrics_;
  std::map<std::string, Transaction> mempool_;
  std::map<std::pair<std::string, std::string>, uint64_t> transmissions_;
  std::set<std::pair<std::string, std::string>> transmissions_suppressed_;
};

}  // namespace tomen
