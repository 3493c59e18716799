#pragma once

// Relay node state machine. Answers CREATE handshakes, peels exactly one
// layer per forward cell (adding one per backward cell), extends circuits on
// request, and as the terminal hop bridges recognized streams to external
// connections under its egress policy.
//
// The core is transport-agnostic: the environment supplies link/connection
// handles and executes the side effects, so the same state machine runs
// under the deterministic harness and the live TCP runtime.

#include <map>
#include <optional>

#include "tomen/directory.hpp"
#include "tomen/handshake.hpp"

namespace tomen {

using LinkId = uint64_t;
using ConnId = uint64_t;

struct RelayEnv {
  virtual ~RelayEnv() = default;
  virtual void send_cell(LinkId link, const Cell& cell) = 0;
  // Opens a link to the next relay; nullopt when unreachable.
  virtual std::optional<LinkId> open_link(const std::string& address) = 0;
  // Exit-side external connection.
  virtual std::optional<ConnId> open_external(const std::string& address) = 0;
  virtual void send_external(ConnId conn, ByteView data) = 0;
  virtual void close_external(ConnId conn) = 0;
};

struct RelayMetrics {
  uint64_t cells_forward = 0;
  uint64_t cells_backward = 0;
  uint64_t layer_ops_forward = 0;
  uint64_t layer_ops_backward = 0;
  uint64_t recognized = 0;
  uint64_t dispatched_extend = 0;
  uint64_t dispatched_begin = 0;
  uint64_t dispatched_data = 0;
  uint64_t dispatched_end = 0;
  uint64_t dropped_unknown_circuit = 0;
  uint64_t dropped_unknown_stream = 0;
  uint64_t destroys_sent = 0;
};

struct RelayConfig {
  uint64_t identity_seed = 0;  // 0 = seed from OS entropy (live mode)
  std::string address;
  std::string directory_address;
  EgressPolicy egress_policy;
  uint64_t heartbeat_interval = 30;
  uint64_t bandwidth = 1000;
};

class RelayCore {
 public:
  RelayCore(IdentityKeyPair identity, EgressPolicy policy, Rng rng, RelayEnv& env)
      : identity_(std::move(identity)), policy_(std::move(policy)), rng_(std::move(rng)), env_(env) {}

  const std::array<uint8_t, 32>& identity_public() const { return identity_.public_key(); }
  std::string relay_id() const { return fingerprint(identity_.public_key()); }
  const RelayMetrics& metrics() const { return metrics_; }
  size_t circuit_count() const { return entries_.size(); }
  bool has_circuit(LinkId link, uint32_t cid) const { return inbound_.count({link, cid}) > 0; }

  void on_cell(LinkId link, const Cell& cell) {
    if (cell.command == CellCommand::kCreate) {
      handle_create(link, cell);
      return;
    }
    auto in_it = inbound_.find({link, cell.circuit_id});
    if (in_it != inbound_.end()) {
      auto& entry = entries_.at(in_it->second);
      switch (cell.command) {
        case CellCommand::kRelay:
          handle_relay_forward(entry, cell);
          return;
        case CellCommand::kDestroy:
          teardown(entry.id, /*notify_inbound=*/false, /*notify_outbound=*/true);
          return;
        default:
          // CREATED arriving on the client side of a circuit
          teardown(entry.id, true, true);
          return;
      }
    }
    auto out_it = outbound_.find({link, cell.circuit_id});
    if (out_it != outbound_.end()) {
      auto& entry = entries_.at(out_it->second);
      switch (cell.command) {
        case CellCommand::kCreated:
          handle_created(entry, cell);
          return;
        case CellCommand::kRelay:
          handle_backward(entry, cell);
          return;
        case CellCommand::kDestroy:
          teardown(entry.id, /*notify_inbound=*/true, /*notify_outbound=*/false);
          return;
        default:
          teardown(entry.id, true, true);
          return;
      }
    }
    // Teardown signals for circuits we no longer know are routine; anything
    // else on an unknown circuit is counted and dropped.
    if (cell.command != CellCommand::kDestroy) metrics_.dropped_unknown_circuit++;
  }

  void on_external_data(ConnId conn, ByteView data) {
    auto it = conn_index_.find(conn);
    if (it == conn_index_.end()) return;
    auto [entry_id, stream_id] = it->second;
    auto& entry = entries_.at(entry_id);
    size_t offset = 0;
    while (offset < data.size()) {
      size_t n = std::min(data.size() - offset, kRelayDataMax);
      RelayPayload rp;
      rp.relay_command = RelayCommand::kData;
      rp.stream_id = stream_id;
      rp.data.assign(data.begin() + offset, data.begin() + offset + n);
      send_backward_origin(entry, std::move(rp));
      offset += n;
    }
  }

  void on_external_closed(ConnId conn) {
    auto it = conn_index_.find(conn);
    if (it == conn_index_.end()) return;
    auto [entry_id, stream_id] = it->second;
    conn_index_.erase(it);
    auto& entry = entries_.at(entry_id);
    entry.exit_streams.erase(stream_id);
    RelayPayload rp;
    rp.relay_command = RelayCommand::kEnd;
    rp.stream_id = stream_id;
    rp.data = to_bytes("closed");
    send_backward_origin(entry, std::move(rp));
  }

  void on_link_closed(LinkId link) {
    std::vector<uint64_t> hit;
    for (const auto& [id, e] : entries_) {
      if (e.in_link == link || (e.outbound && e.outbound->first == link)) hit.push_back(id);
    }
    for (uint64_t id : hit) {
      const auto& e = entries_.at(id);
      bool inbound_side = e.in_link == link;
      teardown(id, /*notify_inbound=*/!inbound_side, /*notify_outbound=*/inbound_side);
    }
  }

 private:
  struct CircuitEntry {
    uint64_t id = 0;
    LinkId in_link = 0;
    uint32_t in_cid = 0;
    HopCryptoState crypto;
    std::optional<std::pair<LinkId, uint32_t>> outbound;
    bool awaiting_created = false;
    std::map<uint16_t, ConnId> exit_streams;

    explicit CircuitEntry(const HopKeys& keys) : crypto(keys) {}
  };

  void handle_create(LinkId link, const Cell& cell) {
    if (inbound_.count({link, cell.circuit_id})) {
      send_destroy(link, cell.circuit_id);
      return;
    }
    RelayResponse resp;
    try {
      resp = relay_respond(cell.payload, identity_, rng_);
    } catch (const Error&) {
      send_destroy(link, cell.circuit_id);
      return;
    }
    CircuitEntry entry(resp.hop_keys);
    entry.id = next_entry_id_++;
    entry.in_link = link;
    entry.in_cid = cell.circuit_id;
    inbound_[{link, cell.circuit_id}] = entry.id;
    entries_.emplace(entry.id, std::move(entry));
    env_.send_cell(link, Cell{cell.circuit_id, CellCommand::kCreated, resp.created_payload});
  }

  void handle_relay_forward(CircuitEntry& entry, const Cell& cell) {
    metrics_.cells_forward++;
    if (cell.payload.size() != kCellPayloadSize) {
      teardown(entry.id, true, true);
      return;
    }
    PayloadBuf buf;
    std::copy(cell.payload.begin(), cell.payload.end(), buf.begin());
    buf = entry.crypto.forward.apply(buf);
    metrics_.layer_ops_forward++;

    if (looks_recognized(buf) && verify_digest(entry.crypto.forward_digest, buf)) {
      metrics_.recognized++;
      RelayPayload rp;
      try {
        rp = decode_relay_payload(buf);
      } catch (const Error&) {
        // Digest-valid but structurally bad can only come from a broken peer.
        teardown(entry.id, true, true);
        return;
      }
      dispatch(entry, rp);
      return;
    }
    if (entry.outbound) {
      env_.send_cell(entry.outbound->first,
                     Cell{entry.outbound->second, CellCommand::kRelay, Bytes(buf.begin(), buf.end())});
    } else {
      // Fell off the end of the circuit: either corruption at the terminal
      // hop or a mis-layered cell. Tear the circuit down.
      teardown(entry.id, true, true);
    }
  }

  void dispatch(CircuitEntry& entry, const RelayPayload& rp) {
    switch (rp.relay_command) {
      case RelayCommand::kExtend:
        metrics_.dispatched_extend++;
        handle_extend(entry, rp);
        return;
      case RelayCommand::kBegin:
        metrics_.dispatched_begin++;
        handle_begin(entry, rp);
        return;
      case RelayCommand::kData:
        metrics_.dispatched_data++;
        handle_data(entry, rp);
        return;
      case RelayCommand::kEnd:
        metrics_.dispatched_end++;
        handle_end(entry, rp);
        return;
      default:
        teardown(entry.id, true, true);
        return;
    }
  }

  void handle_extend(CircuitEntry& entry, const RelayPayload& rp) {
    if (entry.outbound || entry.awaiting_created || !entry.exit_streams.empty()) {
      teardown(entry.id, true, true);
      return;
    }
    if (rp.data.size() < 2) {
      teardown(entry.id, true, true);
      return;
    }
    uint16_t addr_len = get_u16(rp.data.data());
    if (rp.data.size() != 2u + addr_len + kCreatePayloadSize) {
      teardown(entry.id, true, true);
      return;
    }
    std::string address(rp.data.begin() + 2, rp.data.begin() + 2 + addr_len);
    Bytes create_payload(rp.data.begin() + 2 + addr_len, rp.data.end());

    auto link = env_.open_link(address);
    if (!link) {
      teardown(entry.id, true, false);
      return;
    }
    // The inbound circuit id passes through to the new link; the link is
    // dedicated to this circuit so it is fresh there.
    entry.outbound = {*link, entry.in_cid};
    entry.awaiting_created = true;
    outbound_[*entry.outbound] = entry.id;
    env_.send_cell(*link, Cell{entry.in_cid, CellCommand::kCreate, create_payload});
  }

  void handle_created(CircuitEntry& entry, const Cell& cell) {
    if (!entry.awaiting_created) {
      metrics_.dropped_unknown_circuit++;
      return;
    }
    entry.awaiting_created = false;
    RelayPayload rp;
    rp.relay_command = RelayCommand::kExtended;
    rp.stream_id = 0;
    rp.data = cell.payload;
    send_backward_origin(entry, std::move(rp));
  }

  void handle_backward(CircuitEntry& entry, const Cell& cell) {
    metrics_.cells_backward++;
    if (cell.payload.size() != kCellPayloadSize) {
      teardown(entry.id, true, true);
      return;
    }
    PayloadBuf buf;
    std::copy(cell.payload.begin(), cell.payload.end(), buf.begin());
    buf = entry.crypto.backward.apply(buf);
    metrics_.layer_ops_backward++;
    env_.send_cell(entry.in_link,
                   Cell{entry.in_cid, CellCommand::kRelay, Bytes(buf.begin(), buf.end())});
  }

  void handle_begin(CircuitEntry& entry, const RelayPayload& rp) {
    if (entry.outbound || entry.awaiting_created) {
      teardown(entry.id, true, true);
      return;
    }
    std::string target = to_string(rp.data);
    auto colon = target.rfind(':');
    uint16_t port = 0;
    bool ok = colon != std::string::npos && colon + 1 < target.size();
    if (ok) {
      try {
        unsigned long v = std::stoul(target.substr(colon + 1));
        ok = v >= 1 && v <= 65535;
        port = static_cast<uint16_t>(v);
      } catch (const std::exception&) {
        ok = false;
      }
    }
    if (!ok) {
      send_end(entry, rp.stream_id, "malformed target");
      return;
    }
    if (!policy_.allows(port)) {
      send_end(entry, rp.stream_id, "exit policy refused");
      return;
    }
    auto conn = env_.open_external(target);
    if (!conn) {
      send_end(entry, rp.stream_id, "unreachable");
      return;
    }
    entry.exit_streams[rp.stream_id] = *conn;
    conn_index_[*conn] = {entry.id, rp.stream_id};
    RelayPayload connected;
    connected.relay_command = RelayCommand::kConnected;
    connected.stream_id = rp.stream_id;
    send_backward_origin(entry, std::move(connected));
  }

  void handle_data(CircuitEntry& entry, const RelayPayload& rp) {
    auto it = entry.exit_streams.find(rp.stream_id);
    if (it == entry.exit_streams.end()) {
      metrics_.dropped_unknown_stream++;
      return;
    }
    env_.send_external(it->second, rp.data);
  }

  void handle_end(CircuitEntry& entry, const RelayPayload& rp) {
    auto it = entry.exit_streams.find(rp.stream_id);
    if (it == entry.exit_streams.end()) return;
    conn_index_.erase(it->second);
    env_.close_external(it->second);
    entry.exit_streams.erase(it);
  }

  void send_end(CircuitEntry& entry, uint16_t stream_id, std::string_view reason) {
    RelayPayload rp;
    rp.relay_command = RelayCommand::kEnd;
    rp.stream_id = stream_id;
    rp.data = to_bytes(reason);
    send_backward_origin(entry, std::move(rp));
  }

  // Cells this hop originates toward the client: sealed with the backward
  // digest, then one backward layer.
  void send_backward_origin(CircuitEntry& entry, RelayPayload rp) {
    rp = update_and_seal_digest(entry.crypto.backward_digest, std::move(rp));
    auto buf = encode_relay_payload(rp);
    buf = entry.crypto.backward.apply(buf);
    metrics_.layer_ops_backward++;
    env_.send_cell(entry.in_link,
                   Cell{entry.in_cid, CellCommand::kRelay, Bytes(buf.begin(), buf.end())});
  }

  void send_destroy(LinkId link, uint32_t cid) {
    metrics_.destroys_sent++;
    env_.send_cell(link, Cell{cid, CellCommand::kDestroy, {}});
  }

  void teardown(uint64_t entry_id, bool notify_inbound, bool notify_outbound) {
    auto it = entries_.find(entry_id);
    if (it == entries_.end()) return;
    CircuitEntry& entry = it->second;
    for (const auto& [stream_id, conn] : entry.exit_streams) {
      conn_index_.erase(conn);
      env_.close_external(conn);
    }
    if (notify_outbound && entry.outbound) {
      send_destroy(entry.outbound->first, entry.outbound->second);
    }
    if (notify_inbound) {
      send_destroy(entry.in_link, entry.in_cid);
    }
    inbound_.erase({entry.in_link, entry.in_cid});
    if (entry.outbound) outbound_.erase(*entry.outbound);
    entries_.erase(it);
  }

  IdentityKeyPair identity_;
  EgressPolicy policy_;
  Rng rng_;
  RelayEnv& env_;
  RelayMetrics metrics_;

  uint64_t next_entry_id_ = 1;
  std::map<uint64_t, CircuitEntry> entries_;
  std::map<std::pair<LinkId, uint32_t>, uint64_t> inbound_;
  std::map<std::pair<LinkId, uint32_t>, uint64_t> outbound_;
  std::map<ConnId, std::pair<uint64_t, uint16_t>> conn_index_;
};

inline RelayDescriptor build_descriptor(const IdentityKeyPair& identity, const std::string& address,
                                        const EgressPolicy& policy, uint64_t bandwidth) {
  RelayDescriptor d;
  d.identity_pubkey = identity.public_key();
  d.relay_id = fingerprint(d.identity_pubkey);
  d.address = address;
  d.egress_policy = policy;
  d.bandwidth = bandwidth;
  return d;
}

}  // namespace tomen
