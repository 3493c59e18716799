#pragma once

// The Onion Proxy. Builds 3-hop circuits hop by hop (CREATE to the guard,
// then EXTEND relayed through the established prefix), keeps per-hop cipher
// and digest mirrors, triple-encrypts outbound relay payloads and peels
// inbound ones, and multiplexes streams over circuits. Event-driven:: the
// environment feeds inbound cells and the client reports completions through
// callbacks, so the same engine runs under the harness scheduler and the
// live socket pump.

#include <functional>

#include <nlohmann/json.hpp>

#include "tomen/directory.hpp"
#include "tomen/relay.hpp"

namespace tomen {

constexpr uint64_t kCircuitLifetimeSecs = 600;

enum class CircuitState { kBuilding, kOpen, kClosing, kClosed };

struct BuildResult {
  bool ok = false;
  uint64_t handle = 0;
  int failed_hop = -1;
  std::string error;
};

struct StreamResult {
  bool ok = false;
  uint16_t stream_id = 0;
  std::string error;
};

struct ClientEnv {
  virtual ~ClientEnv() = default;
  virtual std::optional<LinkId> open_link(const std::string& address) = 0;
  virtual void send_cell(LinkId link, const Cell& cell) = 0;
  virtual void close_link(LinkId link) = 0;
  virtual uint64_t now() const = 0;
};

class OnionClient {
 public:
  using BuildCallback = std::function<void(const BuildResult&)>;
  using StreamCallback = std::function<void(const StreamResult&)>;
  using DataCallback = std::function<void(uint16_t stream_id, ByteView data)>;
  using EndCallback = std::function<void(uint16_t stream_id, const std::string& reason)>;
  using EventSink = std::function<void(const json&)>;

  OnionClient(ClientEnv& env, Rng rng, std::function<Consensus()> fetch_consensus)
      : env_(env), rng_(std::move(rng)), fetch_consensus_(std::move(fetch_consensus)) {}

  void set_event_sink(EventSink sink) { event_sink_ = std::move(sink); }
  void set_data_callback(DataCallback cb) { on_data_ = std::move(cb); }
  void set_end_callback(EndCallback cb) { on_end_ = std::move(cb); }

  // -- circuit management ----------------------------------------------

  uint64_t build_circuit(const PathConstraints& constraints, BuildCallback done,
                         PathSelection mode = PathSelection::kUniform) {
    uint64_t handle = next_handle_++;
    Circuit circuit;
    circuit.handle = handle;
    circuit.on_built = std::move(done);

    Consensus consensus;
    try {
      consensus = fetch_consensus_();
      circuit.path = select_path(consensus, constraints, rng_, mode);
    } catch (const Error& e) {
      finish_build(circuit, -1, e.what());
      return handle;
    }

    circuit.circuit_id = fresh_circuit_id();
    auto link = env_.open_link(circuit.path.guard.address);
    if (!link) {
      finish_build(circuit, 0, "guard unreachable");
      return handle;
    }
    circuit.link = *link;
    circuit.state = CircuitState::kBuilding;
    circuit.pending_hop = 0;
    circuit.pending_eph = gen_keypair(rng_);
    circuits_.emplace(handle, std::move(circuit));
    link_index_[*link] = handle;

    env_.send_cell(*link, Cell{circuits_.at(handle).circuit_id, CellCommand::kCreate,
                               client_create_payload(circuits_.at(handle).pending_eph)});
    return handle;
  }

  void destroy_circuit(uint64_t handle, const std::string& reason = "destroyed") {
    auto it = circuits_.find(handle);
    if (it == circuits_.end() || it->second.state == CircuitState::kClosed) return;
    Circuit& c = it->second;
    env_.send_cell(c.link, Cell{c.circuit_id, CellCommand::kDestroy, {}});
    close_circuit(c, reason);
  }

  // Marks circuits at or past the lifetime as rotated out; they stay open to
  // drain in-flight streams and are torn down once the last stream closes.
  void rotation_check() {
    for (auto& [handle, c] : circuits_) {
      if (c.state == CircuitState::kOpen && !c.rotated_out &&
          env_.now() - c.created_at >= kCircuitLifetimeSecs) {
        c.rotated_out = true;
        emit({{"event", "rotated"}, {"circuit", handle}, {"age", env_.now() - c.created_at}});
        if (c.streams.empty()) destroy_circuit(handle, "rotated");
      }
    }
  }

  // An open circuit younger than the rotation lifetime, if any.
  std::optional<uint64_t> eligible_circuit() {
    rotation_check();
    for (auto& [handle, c] : circuits_) {
      if (c.state == CircuitState::kOpen && !c.rotated_out) return handle;
    }
    return std::nullopt;
  }

  // -- streams -----------------------------------------------------------

  uint16_t open_stream(uint64_t handle, const std::string& target, StreamCallback done) {
    Circuit& c = checked_open(handle);
    uint16_t stream_id = c.next_stream_id++;
    Stream s;
    s.target = target;
    s.on_open = std::move(done);
    c.streams.emplace(stream_id, std::move(s));

    RelayPayload rp;
    rp.relay_command = RelayCommand::kBegin;
    rp.stream_id = stream_id;
    rp.data = to_bytes(target);
    send_on_circuit(c, std::move(rp));
    return stream_id;
  }

  void send(uint64_t handle, uint16_t stream_id, ByteView data) {
    Circuit& c = checked_open(handle);
    auto it = c.streams.find(stream_id);
    if (it == c.streams.end() || it->second.state != Stream::kOpen) {
      throw Error(Errc::stream_refused, "stream not open");
    }
    size_t offset = 0;
    while (offset < data.size()) {
      size_t n = std::min(data.size() - offset, kRelayDataMax);
      RelayPayload rp;
      rp.relay_command = RelayCommand::kData;
      rp.stream_id = stream_id;
      rp.data.assign(data.begin() + offset, data.begin() + offset + n);
      send_on_circuit(c, std::move(rp));
      offset += n;
    }
  }

  // Drains up to max_bytes of in-order received bytes.
  Bytes recv(uint64_t handle, uint16_t stream_id, size_t max_bytes) {
    Circuit& c = circuit_ref(handle);
    auto it = c.streams.find(stream_id);
    if (it == c.streams.end()) throw Error(Errc::not_found, "unknown stream");
    Stream& s = it->second;
    size_t n = std::min(max_bytes, s.recv_buffer.size());
    Bytes out(s.recv_buffer.begin(), s.recv_buffer.begin() + n);
    s.recv_buffer.erase(s.recv_buffer.begin(), s.recv_buffer.begin() + n);
    return out;
  }

  void close_stream(uint64_t handle, uint16_t stream_id) {
    Circuit& c = circuit_ref(handle);
    auto it = c.streams.find(stream_id);
    if (it == c.streams.end()) return;
    if (c.state == CircuitState::kOpen) {
      RelayPayload rp;
      rp.relay_command = RelayCommand::kEnd;
      rp.stream_id = stream_id;
      rp.data = to_bytes("closed");
      send_on_circuit(c, std::move(rp));
    }
    c.streams.erase(it);
    drain_check(c);
  }

  // -- layered encryption (exposed for tests and the pipeline) -----------

  // Seal with the terminal hop's forward digest, then apply layers from the
  // terminal hop outward so the guard's layer ends up outermost.
  Cell encrypt_outbound(uint64_t handle, RelayPayload rp) {
    Circuit& c = checked_open(handle);
    return layer_toward(c, static_cast<int>(c.hops.size()) - 1, std::move(rp));
  }

  // Peels backward layers hop by hop; returns the recognizing hop index.
  std::pair<int, RelayPayload> decrypt_inbound(uint64_t handle, const Cell& cell) {
    Circuit& c = circuit_ref(handle);
    return peel_inbound(c, cell);
  }

  // -- environment events -------------------------------------------------

  void on_cell(LinkId link, const Cell& cell) {
    auto idx = link_index_.find(link);
    if (idx == link_index_.end()) return;
    Circuit& c = circuits_.at(idx->second);
    if (cell.circuit_id != c.circuit_id) return;

    switch (cell.command) {
      case CellCommand::kCreated:
        handle_created(c, cell);
        return;
      case CellCommand::kRelay:
        handle_relay(c, cell);
        return;
      case CellCommand::kDestroy:
        handle_remote_destroy(c);
        return;
      default:
        // CREATE addressed at a client is nonsense; drop it.
        return;
    }
  }

  void on_link_closed(LinkId link) {
    auto idx = link_index_.find(link);
    if (idx == link_index_.end()) return;
    Circuit& c = circuits_.at(idx->second);
    handle_remote_destroy(c);
  }

  // -- inspection -----------------------------------------------------------

  struct CircuitInfo {
    uint64_t handle;
    uint32_t circuit_id;
    LinkId link;
    CircuitState state;
    bool rotated_out;
    uint64_t created_at;
    std::vector<std::string> hop_relay_ids;
    std::vector<std::string> hop_addresses;
    size_t open_streams;
  };

  CircuitInfo circuit_info(uint64_t handle) const {
    const Circuit& c = circuits_.at(handle);
    CircuitInfo info{c.handle, c.circuit_id, c.link,  c.state, c.rotated_out,
                     c.created_at, {}, {}, c.streams.size()};
    for (const auto& hop : c.hops) info.hop_relay_ids.push_back(hop.relay_id);
    const RelayDescriptor* descs[3] = {&c.path.guard, &c.path.middle, &c.path.exit};
    for (size_t i = 0; i < c.hops.size() && i < 3; ++i) info.hop_addresses.push_back(descs[i]->address);
    return info;
  }

  uint64_t metric(const std::string& name) const {
    auto it = metrics_.find(name);
    return it == metrics_.end() ? 0 : it->second;
  }

 private:
  struct Stream {
    enum State { kOpening, kOpen, kEnded };
    State state = kOpening;
    std::string target;
    Bytes recv_buffer;
    std::string end_reason;
    StreamCallback on_open;
  };

  struct ClientHop {
    std::string relay_id;
    HopCryptoState crypto;

    ClientHop(std::string id, const HopKeys& keys) : relay_id(std::move(id)), crypto(keys) {}
  };

  struct Circuit {
    uint64_t handle = 0;
    uint32_t circuit_id = 0;
    LinkId link = 0;
    CircuitState state = CircuitState::kBuilding;
    bool rotated_out = false;
    uint64_t created_at = 0;
    Path path;
    std::vector<ClientHop> hops;
    int pending_hop = -1;
    KeyPair pending_eph;
    BuildCallback on_built;
    std::map<uint16_t, Stream> streams;
    uint16_t next_stream_id = 1;
  };

  uint32_t fresh_circuit_id() {
    for (;;) {
      auto id = static_cast<uint32_t>(rng_.next_u64());
      if (id != 0) return id;
    }
  }

  Circuit& circuit_ref(uint64_t handle) {
    auto it = circuits_.find(handle);
    if (it == circuits_.end()) throw Error(Errc::not_found, "unknown circuit handle");
    return it->second;
  }

  Circuit& checked_open(uint64_t handle) {
    Circuit& c = circuit_ref(handle);
    if (c.state != CircuitState::kOpen) throw Error(Errc::circuit_closed, "circuit not open");
    return c;
  }

  const RelayDescriptor& hop_descriptor(const Circuit& c, int hop) const {
    switch (hop) {
      case 0: return c.path.guard;
      case 1: return c.path.middle;
      default: return c.path.exit;
    }
  }

  Cell layer_toward(Circuit& c, int addressed_hop, RelayPayload rp) {
    rp = update_and_seal_digest(c.hops[addressed_hop].crypto.forward_digest, std::move(rp));
    PayloadBuf buf = encode_relay_payload(rp);
    for (int j = addressed_hop; j >= 0; --j) {
      buf = c.hops[j].crypto.forward.apply(buf);
    }
    return Cell{c.circuit_id, CellCommand::kRelay, Bytes(buf.begin(), buf.end())};
  }

  std::pair<int, RelayPayload> peel_inbound(Circuit& c, const Cell& cell) {
    if (cell.payload.size() != kCellPayloadSize) {
      throw Error(Errc::protocol, "inbound relay cell must carry a full payload");
    }
    PayloadBuf buf;
    std::copy(cell.payload.begin(), cell.payload.end(), buf.begin());
    for (size_t j = 0; j < c.hops.size(); ++j) {
      buf = c.hops[j].crypto.backward.apply(buf);
      if (!looks_recognized(buf)) continue;
      if (!verify_digest(c.hops[j].crypto.backward_digest, buf)) continue;
      return {static_cast<int>(j), decode_relay_payload(buf)};
    }
    throw Error(Errc::key_mismatch, "no hop recognized the inbound cell");
  }

  void send_on_circuit(Circuit& c, RelayPayload rp) {
    env_.send_cell(c.link, layer_toward(c, static_cast<int>(c.hops.size()) - 1, std::move(rp)));
  }

  void handle_created(Circuit& c, const Cell& cell) {
    if (c.state != CircuitState::kBuilding || c.pending_hop != 0) {
      handle_remote_destroy(c);
      return;
    }
    complete_hop(c, cell.payload);
  }

  void handle_relay(Circuit& c, const Cell& cell) {
    std::pair<int, RelayPayload> peeled;
    try {
      peeled = peel_inbound(c, cell);
    } catch (const Error&) {
      // Possible tampering: tear the circuit down.
      metrics_["digest_failures"]++;
      emit({{"event", "error"}, {"circuit", c.handle}, {"error", "inbound digest failure"}});
      destroy_circuit(c.handle, "digest failure");
      return;
    }
    auto [hop, rp] = peeled;
    int last = static_cast<int>(c.hops.size()) - 1;
    if (hop != last) {
      destroy_circuit(c.handle, "cell recognized at unexpected hop");
      return;
    }

    if (c.state == CircuitState::kBuilding) {
      if (rp.relay_command == RelayCommand::kExtended &&
          c.pending_hop == static_cast<int>(c.hops.size())) {
        complete_hop(c, rp.data);
      } else {
        fail_build(c, c.pending_hop, "unexpected relay command during build");
      }
      return;
    }

    switch (rp.relay_command) {
      case RelayCommand::kConnected:
        handle_connected(c, rp);
        return;
      case RelayCommand::kData:
        handle_stream_data(c, rp);
        return;
      case RelayCommand::kEnd:
        handle_stream_end(c, rp);
        return;
      default:
        destroy_circuit(c.handle, "unexpected relay command");
        return;
    }
  }

  void complete_hop(Circuit& c, const Bytes& created_payload) {
    int hop = c.pending_hop;
    HopKeys keys;
    try {
      keys = client_finish(c.pending_eph, created_payload,
                           hop_descriptor(c, hop).identity_pubkey);
    } catch (const Error& e) {
      destroy_circuit(c.handle, e.what());
      fail_build(c, hop, e.what());
      return;
    }
    c.hops.emplace_back(hop_descriptor(c, hop).relay_id, keys);

    if (c.hops.size() == 3) {
      c.state = CircuitState::kOpen;
      c.created_at = env_.now();
      c.pending_hop = -1;
      emit({{"event", "circuit_built"},
            {"circuit", c.handle},
            {"guard", c.path.guard.relay_id},
            {"middle", c.path.middle.relay_id},
            {"exit", c.path.exit.relay_id}});
      if (c.on_built) {
        auto cb = std::move(c.on_built);
        c.on_built = nullptr;
        cb(BuildResult{true, c.handle, -1, ""});
      }
      return;
    }

    // Extend to the next hop through the established prefix.
    c.pending_hop = static_cast<int>(c.hops.size());
    c.pending_eph = gen_keypair(rng_);
    const auto& next = hop_descriptor(c, c.pending_hop);

    RelayPayload rp;
    rp.relay_command = RelayCommand::kExtend;
    rp.stream_id = 0;
    rp.data.resize(2);
    put_u16(rp.data.data(), static_cast<uint16_t>(next.address.size()));
    rp.data.insert(rp.data.end(), next.address.begin(), next.address.end());
    auto create = client_create_payload(c.pending_eph);
    rp.data.insert(rp.data.end(), create.begin(), create.end());
    send_on_circuit(c, std::move(rp));
  }

  void handle_connected(Circuit& c, const RelayPayload& rp) {
    auto it = c.streams.find(rp.stream_id);
    if (it == c.streams.end() || it->second.state != Stream::kOpening) return;
    it->second.state = Stream::kOpen;
    emit({{"event", "stream_opened"},
          {"circuit", c.handle},
          {"stream", rp.stream_id},
          {"target", it->second.target}});
    if (it->second.on_open) {
      auto cb = std::move(it->second.on_open);
      it->second.on_open = nullptr;
      cb(StreamResult{true, rp.stream_id, ""});
    }
  }

  void handle_stream_data(Circuit& c, const RelayPayload& rp) {
    auto it = c.streams.find(rp.stream_id);
    if (it == c.streams.end()) return;
    it->second.recv_buffer.insert(it->second.recv_buffer.end(), rp.data.begin(), rp.data.end());
    if (on_data_) on_data_(rp.stream_id, rp.data);
  }

  void handle_stream_end(Circuit& c, const RelayPayload& rp) {
    auto it = c.streams.find(rp.stream_id);
    if (it == c.streams.end()) return;
    Stream& s = it->second;
    std::string reason = to_string(rp.data);
    s.end_reason = reason;
    if (s.state == Stream::kOpening && s.on_open) {
      auto cb = std::move(s.on_open);
      s.on_open = nullptr;
      s.state = Stream::kEnded;
      cb(StreamResult{false, rp.stream_id, reason});
    } else {
      s.state = Stream::kEnded;
    }
    if (on_end_) on_end_(rp.stream_id, reason);
    drain_check(c);
  }

  void handle_remote_destroy(Circuit& c) {
    if (c.state == CircuitState::kBuilding) {
      fail_build(c, c.pending_hop, "circuit torn down during build");
    }
    close_circuit(c, "remote destroy");
  }

  void fail_build(Circuit& c, int hop, const std::string& error) {
    // The circuit may not be registered yet (synchronous failure paths).
    if (c.on_built) {
      auto cb = std::move(c.on_built);
      c.on_built = nullptr;
      emit({{"event", "error"}, {"circuit", c.handle}, {"failed_hop", hop}, {"error", error}});
      cb(BuildResult{false, c.handle, hop, error});
    }
    if (circuits_.count(c.handle)) close_circuit(circuits_.at(c.handle), error);
  }

  void finish_build(Circuit& c, int hop, const std::string& error) {
    emit({{"event", "error"}, {"circuit", c.handle}, {"failed_hop", hop}, {"error", error}});
    if (c.on_built) c.on_built(BuildResult{false, c.handle, hop, error});
  }

  void close_circuit(Circuit& c, const std::string& reason) {
    if (c.state == CircuitState::kClosed) return;
    c.state = CircuitState::kClosed;
    for (auto& [stream_id, s] : c.streams) {
      if (s.state == Stream::kOpening && s.on_open) {
        auto cb = std::move(s.on_open);
        s.on_open = nullptr;
        cb(StreamResult{false, stream_id, "circuit closed: " + reason});
      }
      if (s.state != Stream::kEnded && on_end_) on_end_(stream_id, "circuit closed");
    }
    c.streams.clear();
    link_index_.erase(c.link);
    env_.close_link(c.link);
  }

  // Rotated-out circuits are destroyed once their last stream is gone.
  void drain_check(Circuit& c) {
    bool drained = true;
    for (const auto& [id, s] : c.streams) {
      if (s.state != Stream::kEnded) drained = false;
    }
    if (c.rotated_out && drained && c.state == CircuitState::kOpen) {
      destroy_circuit(c.handle, "rotated and drained");
    }
  }

  void emit(const json& event) {
    if (event_sink_) event_sink_(event);
  }

  ClientEnv& env_;
  Rng rng_;
  std::function<Consensus()> fetch_consensus_;
  EventSink event_sink_;
  DataCallback on_data_;
  EndCallback on_end_;

  uint64_t next_handle_ = 1;
  std::map<uint64_t, Circuit> circuits_;
  std::map<LinkId, uint64_t> link_index_;
  std::map<std::string, uint64_t> metrics_;
};

}  // namespace tomen
