#pragma once

// Deterministic harness fabric. Entities (relays, gossip nodes, clients,
// echo services) exchange messages through per-entity FIFO queues; a seeded
// scheduler picks which entity processes next, one message per logical tick.
// Every delivery is recorded from every vantage point that can see it: the
// link tap always, plus the sending and receiving entity when they are
// observers (relays and gossip nodes).
//
// Flow attribution: an observer's records carry an observer-local flow tag.
// A tag is minted when the observer first sees a (connection, circuit)
// pair and inherited by whatever connections the observer itself opens or
// writes while processing that flow - exactly the correlation the node could
// perform from its own circuit table, and nothing more.

#include <deque>
#include <functional>
#include <memory>

#include "tomen/client.hpp"
#include "tomen/transcript.hpp"

namespace tomen::sim {

class SimNet;

class SimEntity {
 public:
  SimEntity(std::string id, std::string kind, std::string address)
      : id_(std::move(id)), kind_(std::move(kind)), address_(std::move(address)) {}
  virtual ~SimEntity() = default;

  const std::string& id() const { return id_; }
  const std::string& kind() const { return kind_; }
  const std::string& address() const { return address_; }
  bool is_observer() const { return kind_ == "relay" || kind_ == "gossip"; }
  // Gossip nodes answer with their peer-port address so receivers can
  // attribute inbound floods; everyone else has none.
  virtual std::string peer_gossip_address() const { return ""; }

  struct Message {
    enum Kind { kCell, kStreamOpen, kStreamData, kStreamClose, kLinkClosed } kind;
    uint64_t conn = 0;
    Cell cell;
    Bytes data;
    std::string dialed;       // the local address the opener dialed
    std::string peer_addr;    // the sender's address as seen on the wire
    std::string sender_peer;  // sender's gossip peer-port address, if any
  };

  virtual void on_message(const Message& m) = 0;

 private:
  std::string id_;
  std::string kind_;
  std::string address_;
};

class SimNet {
 public:
  explicit SimNet(Rng rng, uint64_t start_seconds = 1000)
      : rng_(std::move(rng)), clock_(start_seconds), directory_(clock_) {}

  LogicalClock& clock() { return clock_; }
  DirectoryService& directory() { return directory_; }
  uint64_t tick() const { return tick_; }
  std::vector<VantageRecord>& records() { return records_; }

  void listen(const std::string& address, SimEntity* entity) {
    if (!listeners_.emplace(address, entity).second) {
      throw Error(Errc::config, "address already in use: " + address);
    }
  }

  // Drops a listener (simulates a killed node; established conns survive).
  void unlisten(const std::string& address) { listeners_.erase(address); }

  void register_heartbeat(const std::string& relay_id) { heartbeat_ids_.push_back(relay_id); }

  // Advancing logical seconds keeps published relays fresh, mirroring their
  // sub-window heartbeat timers.
  void advance_seconds(uint64_t seconds) {
    clock_.advance(seconds);
    for (const auto& id : heartbeat_ids_) directory_.heartbeat(id);
  }

  // -- connections -------------------------------------------------------

  std::optional<uint64_t> open_conn(SimEntity* from, const std::string& to_addr, bool is_cell) {
    auto it = listeners_.find(to_addr);
    if (it == listeners_.end()) return std::nullopt;
    uint64_t id = next_conn_++;
    conns_.emplace(id, Conn{id, is_cell, true, from, it->second, to_addr});
    // An observer opening a connection mid-processing ties it to the flow it
    // was processing (a relay extending or exiting knows that correlation).
    if (!is_cell) note_sender_flow(from, id, 0);
    if (!is_cell) enqueue(it->second, {SimEntity::Message::kStreamOpen, id, {}, {}});
    return id;
  }

  void send_cell(uint64_t conn, SimEntity* from, const Cell& cell) {
    auto& c = conn_ref(conn);
    if (!c.open) return;
    enqueue(other_end(c, from), {SimEntity::Message::kCell, conn, cell, {}});
    note_sender_flow(from, conn, cell.circuit_id);
  }

  void stream_send(uint64_t conn, SimEntity* from, ByteView data) {
    auto& c = conn_ref(conn);
    if (!c.open) return;
    enqueue(other_end(c, from), {SimEntity::Message::kStreamData, conn, {}, Bytes(data.begin(), data.end())});
    note_sender_flow(from, conn, 0);
  }

  void close_conn(uint64_t conn, SimEntity* from) {
    auto it = conns_.find(conn);
    if (it == conns_.end() || !it->second.open) return;
    it->second.open = false;
    auto kind = it->second.is_cell ? SimEntity::Message::kLinkClosed : SimEntity::Message::kStreamClose;
    enqueue(other_end(it->second, from), {kind, conn, {}, {}});
  }

  // -- scheduler -----------------------------------------------------------

  bool step() {
    std::vector<std::string> ready;
    for (const auto& [id, q] : queues_) {
      if (!q.empty()) ready.push_back(id);
    }
    if (ready.empty()) return false;
    const std::string& picked = ready[rng_.uniform(ready.size())];
    auto& q = queues_.at(picked);
    Pending p = std::move(q.front());
    q.pop_front();

    ++tick_;
    record_delivery(p);

    delivering_ = p.to;
    current_flow_ = p.to->is_observer() ? flow_lookup_or_create(p.to, p.msg.conn, msg_cid(p.msg))
                                        : std::string();
    p.to->on_message(p.msg);
    delivering_ = nullptr;
    current_flow_.clear();
    return true;
  }

  void run_until_quiescent(size_t max_steps = 2'000'000) {
    size_t steps = 0;
    while (step()) {
      if (++steps > max_steps) throw Error(Errc::protocol, "scheduler exceeded step budget");
    }
  }

 private:
  struct Conn {
    uint64_t id;
    bool is_cell;
    bool open;
    SimEntity* a;  // opener
    SimEntity* b;  // listener
    std::string to_addr;  // the address dialed (listener may own several)
  };

  struct Pending {
    SimEntity* from;
    SimEntity* to;
    SimEntity::Message msg;
  };

  Conn& conn_ref(uint64_t id) {
    auto it = conns_.find(id);
    if (it == conns_.end()) throw Error(Errc::protocol, "unknown conn " + std::to_string(id));
    return it->second;
  }

  SimEntity* other_end(const Conn& c, SimEntity* from) { return from == c.a ? c.b : c.a; }

  static uint32_t msg_cid(const SimEntity::Message& m) {
    return m.kind == SimEntity::Message::kCell ? m.cell.circuit_id : 0;
  }

  void enqueue(SimEntity* to, SimEntity::Message msg) {
    const Conn& c = conn_ref(msg.conn);
    SimEntity* from = other_end(c, to);
    msg.dialed = c.to_addr;
    msg.peer_addr = addr_on_conn(c, from);
    msg.sender_peer = from->peer_gossip_address();
    queues_[to->id()].push_back(Pending{from, to, std::move(msg)});
  }

  // Flow bookkeeping ------------------------------------------------------

  std::string flow_lookup_or_create(SimEntity* e, uint64_t conn, uint32_t cid) {
    auto key = std::make_pair(conn, cid);
    auto& table = flows_[e->id()];
    auto it = table.find(key);
    if (it != table.end()) return it->second;
    std::string label = !current_flow_.empty() && delivering_ == e
                            ? current_flow_
                            : e->id() + "/f" + std::to_string(++flow_serial_[e->id()]);
    table.emplace(key, label);
    return label;
  }

  // Called on every send: if the sender is an observer processing a flow,
  // the sent-on connection inherits that flow label.
  void note_sender_flow(SimEntity* from, uint64_t conn, uint32_t cid) {
    if (!from->is_observer()) return;
    flow_lookup_or_create(from, conn, cid);
  }

  std::string addr_on_conn(const Conn& c, SimEntity* e) const {
    return e == c.a ? e->address() : c.to_addr;
  }

  void record_delivery(const Pending& p) {
    const Conn& c = conns_.at(p.msg.conn);
    std::string kind;
    uint64_t n_bytes = 0;
    std::optional<std::string> digest;
    switch (p.msg.kind) {
      case SimEntity::Message::kCell:
        kind = "cell";
        n_bytes = kCellSize;
        break;
      case SimEntity::Message::kStreamData:
        kind = "stream";
        n_bytes = p.msg.data.size();
        digest = hex_encode(crypto::sha256(p.msg.data));
        break;
      case SimEntity::Message::kStreamOpen:
        kind = "stream";
        break;
      default:
        return;  // closes carry no observable content
    }

    std::string conn_name = "conn#" + std::to_string(c.id);
    VantageRecord base;
    base.time = tick_;
    base.src_addr = addr_on_conn(c, p.from);
    base.dst_addr = addr_on_conn(c, p.to);
    base.n_bytes = n_bytes;
    base.conn = conn_name;
    base.circuit_id = msg_cid(p.msg);
    base.kind = kind;
    // Link taps between onion hops see only uniform cells; plaintext wires
    // expose their content to the tap as well.
    bool plaintext_wire = kind == "stream";

    auto push = [&](const std::string& observer, const std::string& flow, bool sees_plaintext) {
      VantageRecord r = base;
      r.id = ++record_serial_;
      r.observer = observer;
      r.flow = flow;
      r.visible_plaintext_digest = sees_plaintext ? digest : std::nullopt;
      records_.push_back(std::move(r));
    };

    push("tap:" + conn_name, conn_name, plaintext_wire);
    if (p.from->is_observer()) {
      push(p.from->id(), flow_lookup_or_create(p.from, c.id, base.circuit_id), plaintext_wire);
    }
    if (p.to->is_observer()) {
      push(p.to->id(), flow_lookup_or_create(p.to, c.id, base.circuit_id), plaintext_wire);
    }
  }

  Rng rng_;
  LogicalClock clock_;
  DirectoryService directory_;

  uint64_t tick_ = 0;
  uint64_t next_conn_ = 1;
  uint64_t record_serial_ = 0;
  std::map<uint64_t, Conn> conns_;
  std::map<std::string, std::deque<Pending>> queues_;
  std::map<std::string, SimEntity*> listeners_;
  std::vector<std::string> heartbeat_ids_;
  std::vector<VantageRecord> records_;

  std::map<std::string, std::map<std::pair<uint64_t, uint32_t>, std::string>> flows_;
  std::map<std::string, uint64_t> flow_serial_;
  SimEntity* delivering_ = nullptr;
  std::string current_flow_;
};

// -- entities ---------------------------------------------------------------

class SimRelay : public SimEntity, private RelayEnv {
 public:
  SimRelay(SimNet& net, std::string id, std::string address, IdentityKeyPair identity,
           EgressPolicy policy, Rng rng)
      : SimEntity(std::move(id), "relay", std::move(address)),
        net_(net),
        core_(std::move(identity), std::move(policy), std::move(rng), *this) {
    net_.listen(this->address(), this);
  }

  RelayCore& core() { return core_; }

  void on_message(const Message& m) override {
    switch (m.kind) {
      case Message::kCell:
        core_.on_cell(m.conn, m.cell);
        break;
      case Message::kStreamData:
        core_.on_external_data(m.conn, m.data);
        break;
      case Message::kStreamClose:
        core_.on_external_closed(m.conn);
        break;
      case Message::kLinkClosed:
        core_.on_link_closed(m.conn);
        break;
      case Message::kStreamOpen:
        break;  // relays only originate external connections
    }
  }

 private:
  void send_cell(LinkId link, const Cell& cell) override { net_.send_cell(link, this, cell); }
  std::optional<LinkId> open_link(const std::string& address) override {
    return net_.open_conn(this, address, true);
  }
  std::optional<ConnId> open_external(const std::string& address) override {
    return net_.open_conn(this, address, false);
  }
  void send_external(ConnId conn, ByteView data) override { net_.stream_send(conn, this, data); }
  void close_external(ConnId conn) override { net_.close_conn(conn, this); }

  SimNet& net_;
  RelayCore core_;
};

class SimGossip : public SimEntity, private GossipEnv {
 public:
  SimGossip(SimNet& net, std::string id, std::string submit_address, std::string peer_address,
            std::vector<std::string> peers)
      : SimEntity(std::move(id), "gossip", submit_address),
        net_(net),
        peer_address_(std::move(peer_address)),
        core_(this->id(), std::move(peers), *this) {
    net_.listen(address(), this);
    net_.listen(peer_address_, this);
  }

  GossipCore& core() { return core_; }
  std::string peer_gossip_address() const override { return peer_address_; }

  void on_message(const Message& m) override {
    switch (m.kind) {
      case Message::kStreamOpen:
        buffers_[m.conn] = {Bytes{}, m.dialed == address(), m.sender_peer};
        break;
      case Message::kStreamData:
        handle_data(m);
        break;
      case Message::kStreamClose:
        buffers_.erase(m.conn);
        break;
      default:
        break;
    }
  }

 private:
  struct ConnBuffer {
    Bytes data;
    bool is_submit = false;
    std::string sender_peer;
  };

  void handle_data(const Message& m) {
    auto it = buffers_.find(m.conn);
    if (it == buffers_.end()) return;
    auto& buf = it->second;
    buf.data.insert(buf.data.end(), m.data.begin(), m.data.end());
    auto need = tx_frame_size(buf.data);
    if (!need || buf.data.size() < *need) return;
    Bytes frame(buf.data.begin(), buf.data.begin() + *need);
    buf.data.erase(buf.data.begin(), buf.data.begin() + *need);
    if (buf.is_submit) {
      core_.on_submit(m.conn, frame);
    } else {
      core_.on_peer_gossip(
          buf.sender_peer.empty() ? std::nullopt : std::make_optional(buf.sender_peer), frame);
    }
  }

  void reply(uint64_t conn, ByteView data) override { net_.stream_send(conn, this, data); }

  void gossip_send(const std::string& peer_address, ByteView data) override {
    auto conn = net_.open_conn(this, peer_address, false);
    if (!conn) return;
    net_.stream_send(*conn, this, data);
    net_.close_conn(*conn, this);
  }

  SimNet& net_;
  std::string peer_address_;
  GossipCore core_;
  std::map<uint64_t, ConnBuffer> buffers_;
};

// Replies to any connection with the peer address it observed, then closes.
class SimEchoAddr : public SimEntity {
 public:
  SimEchoAddr(SimNet& net, std::string id, std::string address)
      : SimEntity(std::move(id), "echo", std::move(address)), net_(net) {
    net_.listen(this->address(), this);
  }

  void on_message(const Message& m) override {
    if (m.kind != Message::kStreamOpen) return;
    net_.stream_send(m.conn, this, to_bytes(m.peer_addr + "\n"));
    net_.close_conn(m.conn, this);
  }

 private:
  SimNet& net_;
};

// Byte echo for stream-level tests: sends every received chunk back.
class SimEchoBytes : public SimEntity {
 public:
  SimEchoBytes(SimNet& net, std::string id, std::string address)
      : SimEntity(std::move(id), "service", std::move(address)), net_(net) {
    net_.listen(this->address(), this);
  }

  void on_message(const Message& m) override {
    if (m.kind == Message::kStreamData) net_.stream_send(m.conn, this, m.data);
  }

 private:
  SimNet& net_;
};

class SimClient : public SimEntity, private ClientEnv {
 public:
  SimClient(SimNet& net, std::string id, std::string address, Rng rng)
      : SimEntity(std::move(id), "client", std::move(address)),
        net_(net),
        onion_(*this, std::move(rng), [this] { return net_.directory().fetch_consensus(); }) {}

  OnionClient& onion() { return onion_; }

  // Direct (non-onion) byte connections, used for baseline submissions and
  // the direct half of the echo demo.
  std::optional<uint64_t> direct_open(const std::string& address,
                                      std::function<void(ByteView)> on_data) {
    auto conn = net_.open_conn(this, address, false);
    if (conn) direct_handlers_[*conn] = std::move(on_data);
    return conn;
  }

  void direct_send(uint64_t conn, ByteView data) { net_.stream_send(conn, this, data); }
  void direct_close(uint64_t conn) {
    direct_handlers_.erase(conn);
    net_.close_conn(conn, this);
  }

  // Test hook: push a raw cell onto one of this client's links, bypassing
  // the onion engine (adversarial and corruption cases).
  void raw_send_cell(uint64_t conn, const Cell& cell) { net_.send_cell(conn, this, cell); }

  void on_message(const Message& m) override {
    switch (m.kind) {
      case Message::kCell:
        onion_.on_cell(m.conn, m.cell);
        break;
      case Message::kLinkClosed:
        onion_.on_link_closed(m.conn);
        break;
      case Message::kStreamData: {
        auto it = direct_handlers_.find(m.conn);
        if (it != direct_handlers_.end()) it->second(m.data);
        break;
      }
      default:
        break;
    }
  }

 private:
  std::optional<LinkId> open_link(const std::string& address) override {
    return net_.open_conn(this, address, true);
  }
  void send_cell(LinkId link, const Cell& cell) override { net_.send_cell(link, this, cell); }
  void close_link(LinkId link) override { net_.close_conn(link, this); }
  uint64_t now() const override { return net_.clock().now(); }

  SimNet& net_;
  OnionClient onion_;
  std::map<uint64_t, std::function<void(ByteView)>> direct_handlers_;
};

}  // namespace tomen::sim
