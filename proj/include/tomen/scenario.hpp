#pragma once

// Scenario execution: instantiate directory + relays + gossip overlay +
// clients per a declarative scenario, script every client's transaction
// submissions, run the deterministic scheduler to quiescence, and assemble
// the replayable transcript.

#include "tomen/config.hpp"
#include "tomen/sim.hpp"

namespace tomen::sim {

constexpr uint16_t kGossipSubmitPort = 8333;
constexpr uint16_t kGossipPeerPort = 8334;
constexpr uint16_t kEchoPort = 7;
constexpr uint16_t kByteEchoPort = 7070;

struct Scenario {
  uint64_t seed = 1;
  int n_relays = 3;
  int n_gossip = 1;
  std::string topology = "line";  // line | ring | complete | star | random
  std::string edges;              // explicit "0-1,1-2" list; overrides topology
  int n_clients = 1;
  int tx_per_client = 1;
  std::string mode = "onion";  // onion | direct
  bool rotation_test = false;
};

inline json scenario_to_json(const Scenario& s) {
  return json{{"seed", s.seed},
              {"n_relays", s.n_relays},
              {"n_gossip", s.n_gossip},
              {"topology", s.topology},
              {"edges", s.edges},
              {"n_clients", s.n_clients},
              {"tx_per_client", s.tx_per_client},
              {"mode", s.mode},
              {"rotation_test", s.rotation_test}};
}

inline Scenario scenario_from_json(const json& j) {
  Scenario s;
  s.seed = j.at("seed").get<uint64_t>();
  s.n_relays = j.at("n_relays").get<int>();
  s.n_gossip = j.at("n_gossip").get<int>();
  s.topology = j.at("topology").get<std::string>();
  s.edges = j.value("edges", "");
  s.n_clients = j.at("n_clients").get<int>();
  s.tx_per_client = j.at("tx_per_client").get<int>();
  s.mode = j.at("mode").get<std::string>();
  s.rotation_test = j.value("rotation_test", false);
  return s;
}

inline Scenario scenario_from_config(const ConfigFile& cfg) {
  cfg.require_known({"seed", "n_relays", "n_gossip", "topology", "topology.edges", "n_clients",
                     "tx_per_client", "mode", "rotation_test"});
  Scenario s;
  s.seed = cfg.get_u64("seed", 1);
  s.n_relays = static_cast<int>(cfg.get_u64("n_relays", 3));
  s.n_gossip = static_cast<int>(cfg.get_u64("n_gossip", 1));
  s.topology = cfg.get("topology", "line");
  s.edges = cfg.get("topology.edges", "");
  s.n_clients = static_cast<int>(cfg.get_u64("n_clients", 1));
  s.tx_per_client = static_cast<int>(cfg.get_u64("tx_per_client", 1));
  s.mode = cfg.get("mode", "onion");
  s.rotation_test = cfg.get_bool("rotation_test", false);
  return s;
}

// Gossip peer graph for the scenario; connected by construction (random mode
// draws a spanning tree first).
inline std::vector<std::pair<int, int>> build_topology(const Scenario& s, Rng rng) {
  std::vector<std::pair<int, int>> edges;
  int n = s.n_gossip;
  if (n <= 1) return edges;

  if (!s.edges.empty()) {
    std::istringstream in(s.edges);
    std::string item;
    while (std::getline(in, item, ',')) {
      auto dash = item.find('-');
      if (dash == std::string::npos) throw Error(Errc::config, "bad edge '" + item + "'");
      int a = std::stoi(item.substr(0, dash));
      int b = std::stoi(item.substr(dash + 1));
      if (a < 0 || b < 0 || a >= n || b >= n || a == b) {
        throw Error(Errc::config, "edge '" + item + "' out of range");
      }
      edges.emplace_back(a, b);
    }
  } else if (s.topology == "line") {
    for (int i = 0; i + 1 < n; ++i) edges.emplace_back(i, i + 1);
  } else if (s.topology == "ring") {
    for (int i = 0; i + 1 < n; ++i) edges.emplace_back(i, i + 1);
    if (n > 2) edges.emplace_back(n - 1, 0);
  } else if (s.topology == "complete") {
    for (int i = 0; i < n; ++i)
      for (int j = i + 1; j < n; ++j) edges.emplace_back(i, j);
  } else if (s.topology == "star") {
    for (int i = 1; i < n; ++i) edges.emplace_back(0, i);
  } else if (s.topology == "random") {
    // Random spanning tree plus a few extra edges.
    for (int i = 1; i < n; ++i) edges.emplace_back(static_cast<int>(rng.uniform(i)), i);
    int extra = static_cast<int>(rng.uniform(n));
    for (int e = 0; e < extra; ++e) {
      int a = static_cast<int>(rng.uniform(n));
      int b = static_cast<int>(rng.uniform(n));
      if (a == b) continue;
      auto edge = std::minmax(a, b);
      if (std::find(edges.begin(), edges.end(), std::make_pair(edge.first, edge.second)) ==
          edges.end()) {
        edges.emplace_back(edge.first, edge.second);
      }
    }
  } else {
    throw Error(Errc::config, "unknown topology '" + s.topology + "'");
  }
  return edges;
}

inline bool topology_connected(int n, const std::vector<std::pair<int, int>>& edges) {
  if (n <= 1) return true;
  std::vector<std::vector<int>> adj(n);
  for (auto [a, b] : edges) {
    adj[a].push_back(b);
    adj[b].push_back(a);
  }
  std::vector<bool> seen(n, false);
  std::vector<int> queue{0};
  seen[0] = true;
  size_t visited = 1;
  while (!queue.empty()) {
    int cur = queue.back();
    queue.pop_back();
    for (int next : adj[cur]) {
      if (!seen[next]) {
        seen[next] = true;
        ++visited;
        queue.push_back(next);
      }
    }
  }
  return visited == static_cast<size_t>(n);
}

inline void validate_scenario(const Scenario& s) {
  if (s.mode != "onion" && s.mode != "direct") {
    throw Error(Errc::config, "mode must be onion or direct");
  }
  if (s.mode == "onion" && s.n_relays < 3) {
    throw Error(Errc::config, "onion mode requires n_relays >= 3");
  }
  if (s.n_gossip < 1) throw Error(Errc::config, "n_gossip must be >= 1");
  if (s.n_clients < 1) throw Error(Errc::config, "n_clients must be >= 1");
  if (s.tx_per_client < 1) throw Error(Errc::config, "tx_per_client must be >= 1");
  auto edges = build_topology(s, Rng(s.seed).fork("topology"));
  if (!topology_connected(s.n_gossip, edges)) {
    throw Error(Errc::config, "gossip topology must be connected");
  }
}

inline std::string relay_address(int i) {
  return "10.7.1." + std::to_string(i + 1) + ":9001";
}
inline std::string gossip_submit_address(int j) {
  return "10.7.2." + std::to_string(j + 1) + ":" + std::to_string(kGossipSubmitPort);
}
inline std::string gossip_peer_address(int j) {
  return "10.7.2." + std::to_string(j + 1) + ":" + std::to_string(kGossipPeerPort);
}
inline std::string client_address(int k) {
  return "10.7.3." + std::to_string(k + 1) + ":40000";
}

class ScenarioRunner {
 public:
  explicit ScenarioRunner(const Scenario& scenario)
      : scenario_(scenario), root_(scenario.seed), net_(root_.fork("scheduler")) {
    validate_scenario(scenario_);
    build_network();
  }

  SimNet& net() { return net_; }
  std::vector<std::unique_ptr<SimRelay>>& relays() { return relays_; }
  std::vector<std::unique_ptr<SimGossip>>& gossip() { return gossip_; }

  Transcript run() {
    size_t first_phase = scenario_.rotation_test ? 1 : SIZE_MAX;
    for (size_t k = 0; k < scripts_.size(); ++k) {
      scripts_[k].stop_after = first_phase;
      submit_next(k);
    }
    net_.run_until_quiescent();

    if (scenario_.rotation_test) {
      net_.advance_seconds(kCircuitLifetimeSecs);
      for (size_t k = 0; k < scripts_.size(); ++k) {
        scripts_[k].stop_after = SIZE_MAX;
        submit_next(k);
      }
      net_.run_until_quiescent();
    }

    check_completion();
    return assemble();
  }

 private:
  struct ClientScript {
    std::unique_ptr<SimClient> client;
    std::vector<Transaction> txs;
    size_t next_tx = 0;
    size_t stop_after = SIZE_MAX;
    std::string submit_addr;
    uint64_t circuit = 0;
    uint64_t direct_conn = 0;
    Bytes direct_buf;
    std::map<uint16_t, Bytes> ack_buffers;
    std::map<uint16_t, std::string> stream_txid;
    std::vector<std::string> failures;
  };

  void build_network() {
    for (int i = 0; i < scenario_.n_relays; ++i) {
      Rng id_rng = root_.fork("relay-identity-" + std::to_string(i));
      auto identity = gen_identity_keypair(id_rng);
      EgressPolicy policy = EgressPolicy::allow({kGossipSubmitPort, kEchoPort, kByteEchoPort});
      auto descriptor = build_descriptor(identity, relay_address(i), policy, 1000);
      auto relay = std::make_unique<SimRelay>(net_, "relay-" + std::to_string(i), relay_address(i),
                                              std::move(identity), policy,
                                              root_.fork("relay-rng-" + std::to_string(i)));
      net_.directory().publish(descriptor);
      net_.register_heartbeat(descriptor.relay_id);
      roster_.push_back({relay->id(), "relay", relay->address(), descriptor.relay_id, ""});
      relays_.push_back(std::move(relay));
    }

    auto edges = build_topology(scenario_, Rng(scenario_.seed).fork("topology"));
    std::vector<std::vector<std::string>> peers(scenario_.n_gossip);
    for (auto [a, b] : edges) {
      peers[a].push_back(gossip_peer_address(b));
      peers[b].push_back(gossip_peer_address(a));
    }
    for (int j = 0; j < scenario_.n_gossip; ++j) {
      auto node = std::make_unique<SimGossip>(net_, "gossip-" + std::to_string(j),
                                              gossip_submit_address(j), gossip_peer_address(j),
                                              peers[j]);
      roster_.push_back({node->id(), "gossip", node->address(), "", gossip_peer_address(j)});
      gossip_.push_back(std::move(node));
    }

    scripts_.resize(scenario_.n_clients);
    for (int k = 0; k < scenario_.n_clients; ++k) {
      auto& s = scripts_[k];
      s.client = std::make_unique<SimClient>(net_, "client-" + std::to_string(k),
                                             client_address(k),
                                             root_.fork("client-rng-" + std::to_string(k)));
      int target = static_cast<int>(
          Rng(root_.fork("target-" + std::to_string(k))).uniform(scenario_.n_gossip));
      s.submit_addr = gossip_submit_address(target);
      for (int t = 0; t < scenario_.tx_per_client; ++t) {
        Rng tx_rng = root_.fork("tx-" + std::to_string(k) + "-" + std::to_string(t));
        s.txs.push_back(make_transaction(tx_rng.bytes(8 + tx_rng.uniform(25))));
      }
      roster_.push_back({s.client->id(), "client", s.client->address(), "", ""});

      size_t idx = static_cast<size_t>(k);
      s.client->onion().set_event_sink([this, idx](const json& ev) { log_client(idx, ev); });
      s.client->onion().set_data_callback(
          [this, idx](uint16_t stream, ByteView data) { on_onion_data(idx, stream, data); });
      s.client->onion().set_end_callback([this, idx](uint16_t stream, const std::string& reason) {
        on_onion_end(idx, stream, reason);
      });
    }
  }

  void log_client(size_t k, const json& event) {
    client_logs_.push_back({net_.tick(), scripts_[k].client->id(), event});
  }

  void submit_next(size_t k) {
    auto& s = scripts_[k];
    if (s.next_tx >= s.txs.size() || s.next_tx >= s.stop_after) return;
    if (scenario_.mode == "onion") {
      onion_submit(k);
    } else {
      direct_submit(k);
    }
  }

  void ensure_circuit(size_t k, std::function<void(uint64_t)> cont) {
    auto& s = scripts_[k];
    if (auto handle = s.client->onion().eligible_circuit()) {
      cont(*handle);
      return;
    }
    PathConstraints constraints{.target_port = kGossipSubmitPort};
    s.client->onion().build_circuit(constraints, [this, k, cont](const BuildResult& r) {
      if (!r.ok) {
        scripts_[k].failures.push_back("circuit build failed at hop " +
                                       std::to_string(r.failed_hop) + ": " + r.error);
        return;
      }
      cont(r.handle);
    });
  }

  void onion_submit(size_t k) {
    ensure_circuit(k, [this, k](uint64_t handle) {
      auto& s = scripts_[k];
      s.circuit = handle;
      const Transaction& tx = s.txs[s.next_tx];
      std::string txid = hex_encode(tx.txid);
      log_client(k, {{"event", "tx_submitted"}, {"txid", txid}, {"mode", "onion"}});
      uint16_t stream = s.client->onion().open_stream(
          handle, s.submit_addr, [this, k](const StreamResult& r) {
            auto& s = scripts_[k];
            if (!r.ok) {
              s.failures.push_back("stream open failed: " + r.error);
              return;
            }
            s.client->onion().send(s.circuit, r.stream_id,
                                   serialize_tx(s.txs[s.next_tx]));
          });
      s.stream_txid[stream] = txid;
    });
  }

  void on_onion_data(size_t k, uint16_t stream, ByteView data) {
    auto& s = scripts_[k];
    if (!s.stream_txid.count(stream)) return;
    auto& buf = s.ack_buffers[stream];
    buf.insert(buf.end(), data.begin(), data.end());
    auto nl = std::find(buf.begin(), buf.end(), '\n');
    if (nl == buf.end()) return;
    std::string line(buf.begin(), nl);
    s.ack_buffers.erase(stream);
    handle_ack(k, stream, line, "onion");
  }

  void on_onion_end(size_t k, uint16_t stream, const std::string& reason) {
    auto& s = scripts_[k];
    // An END before the ack line means the submission failed.
    if (s.stream_txid.count(stream) && s.ack_buffers.count(stream)) {
      s.failures.push_back("stream ended before ack: " + reason);
    }
  }

  void handle_ack(size_t k, uint16_t stream, const std::string& line, const std::string& mode) {
    auto& s = scripts_[k];
    json ack = json::parse(line, nullptr, false);
    if (ack.is_discarded() || ack.value("status", "") != "ok") {
      s.failures.push_back("bad ack: " + line);
      return;
    }
    log_client(k, {{"event", "tx_acked"},
                   {"txid", ack.value("txid", "")},
                   {"known", ack.value("known", false)},
                   {"mode", mode}});
    if (mode == "onion") {
      s.stream_txid.erase(stream);
      s.client->onion().close_stream(s.circuit, stream);
    } else {
      s.client->direct_close(s.direct_conn);
      s.direct_conn = 0;
    }
    s.next_tx++;
    submit_next(k);
  }

  void direct_submit(size_t k) {
    auto& s = scripts_[k];
    const Transaction& tx = s.txs[s.next_tx];
    std::string txid = hex_encode(tx.txid);
    log_client(k, {{"event", "tx_submitted"}, {"txid", txid}, {"mode", "direct"}});
    s.direct_buf.clear();
    auto conn = s.client->direct_open(s.submit_addr, [this, k](ByteView data) {
      auto& s = scripts_[k];
      s.direct_buf.insert(s.direct_buf.end(), data.begin(), data.end());
      auto nl = std::find(s.direct_buf.begin(), s.direct_buf.end(), '\n');
      if (nl == s.direct_buf.end()) return;
      std::string line(s.direct_buf.begin(), nl);
      handle_ack(k, 0, line, "direct");
    });
    if (!conn) {
      s.failures.push_back("gossip node unreachable: " + s.submit_addr);
      return;
    }
    s.direct_conn = *conn;
    s.client->direct_send(*conn, serialize_tx(tx));
  }

  void check_completion() {
    for (auto& s : scripts_) {
      if (!s.failures.empty()) {
        throw Error(Errc::protocol, s.client->id() + ": " + s.failures.front());
      }
      if (s.next_tx != s.txs.size()) {
        throw Error(Errc::protocol, s.client->id() + " finished only " +
                                        std::to_string(s.next_tx) + "/" +
                                        std::to_string(s.txs.size()) + " transactions");
      }
    }
    for (const auto& node : gossip_) {
      for (const auto& s : scripts_) {
        for (const auto& tx : s.txs) {
          if (!node->core().knows(hex_encode(tx.txid))) {
            throw Error(Errc::protocol,
                        node->id() + " is missing " + hex_encode(tx.txid) + " after quiescence");
          }
        }
      }
    }
  }

  Transcript assemble() {
    Transcript t;
    t.scenario = scenario_to_json(scenario_);
    t.roster = roster_;
    t.records = std::move(net_.records());
    for (const auto& node : gossip_) {
      MempoolSnapshot snap;
      snap.node = node->id();
      for (const auto& [txid, tx] : node->core().mempool()) snap.txs.push_back(tx);
      t.mempools.push_back(std::move(snap));
    }
    t.client_logs = std::move(client_logs_);
    t.metrics = compute_metrics(t);
    t.metrics["total_ticks"] = net_.tick();
    return t;
  }

  Scenario scenario_;
  Rng root_;
  SimNet net_;
  std::vector<std::unique_ptr<SimRelay>> relays_;
  std::vector<std::unique_ptr<SimGossip>> gossip_;
  std::vector<ClientScript> scripts_;
  std::vector<EntityInfo> roster_;
  std::vector<ClientLogEntry> client_logs_;
};

inline Transcript run_scenario(const Scenario& scenario) {
  ScenarioRunner runner(scenario);
  return runner.run();
}

// -- echo-ip demo ------------------------------------------------------------
//
// Stands up a directory, relays and an address-echo service, then queries the
// echo twice: once directly and once through a fresh 3-hop circuit. The
// verdict holds when the direct query exposes the client's address while the
// onion query exposes the exit's.

struct EchoDemoReport {
  std::string client_address;
  std::string direct_echoed;
  std::string onion_echoed;
  std::string exit_address;
  std::string exit_relay_id;
  // Second onion query after forcing rotation, when requested.
  std::string rotated_onion_echoed;
  std::string rotated_exit_address;
  bool verdict_ok = false;
  std::string verdict;
};

inline std::string echo_address() { return "10.7.4.1:" + std::to_string(kEchoPort); }

inline EchoDemoReport run_echo_demo(uint64_t seed, int n_relays = 3, bool rotate_second = false) {
  if (n_relays < 3) throw Error(Errc::config, "echo demo needs at least 3 relays");
  Rng root(seed);
  SimNet net(root.fork("scheduler"));

  std::vector<std::unique_ptr<SimRelay>> relays;
  for (int i = 0; i < n_relays; ++i) {
    Rng id_rng = root.fork("relay-identity-" + std::to_string(i));
    auto identity = gen_identity_keypair(id_rng);
    EgressPolicy policy = EgressPolicy::allow({kEchoPort});
    auto descriptor = build_descriptor(identity, relay_address(i), policy, 1000);
    relays.push_back(std::make_unique<SimRelay>(net, "relay-" + std::to_string(i),
                                                relay_address(i), std::move(identity), policy,
                                                root.fork("relay-rng-" + std::to_string(i))));
    net.directory().publish(descriptor);
    net.register_heartbeat(descriptor.relay_id);
  }
  SimEchoAddr echo(net, "echo-0", echo_address());
  SimClient client(net, "client-0", client_address(0), root.fork("client-rng"));

  EchoDemoReport report;
  report.client_address = client.address();

  auto read_line = [](const Bytes& buf) -> std::optional<std::string> {
    auto nl = std::find(buf.begin(), buf.end(), '\n');
    if (nl == buf.end()) return std::nullopt;
    return std::string(buf.begin(), nl);
  };

  // Direct query.
  {
    Bytes buf;
    std::string echoed;
    auto conn = client.direct_open(echo_address(), [&](ByteView data) {
      buf.insert(buf.end(), data.begin(), data.end());
      if (auto line = read_line(buf)) echoed = *line;
    });
    if (!conn) throw Error(Errc::unreachable, "echo service not reachable");
    net.run_until_quiescent();
    client.direct_close(*conn);
    report.direct_echoed = echoed;
  }

  // Onion query; optionally twice with a forced rotation in between.
  auto onion_query = [&](std::string& echoed_out, std::string& exit_addr_out) {
    uint64_t handle = 0;
    std::string build_error;
    auto pending = client.onion().eligible_circuit();
    if (pending) {
      handle = *pending;
    } else {
      client.onion().build_circuit({.target_port = kEchoPort}, [&](const BuildResult& r) {
        if (!r.ok) build_error = r.error;
        handle = r.handle;
      });
      net.run_until_quiescent();
      if (!build_error.empty()) throw Error(Errc::protocol, "demo build failed: " + build_error);
    }
    auto info = client.onion().circuit_info(handle);
    exit_addr_out = info.hop_addresses.at(2);
    report.exit_relay_id = info.hop_relay_ids.at(2);

    Bytes buf;
    client.onion().set_data_callback([&](uint16_t, ByteView data) {
      buf.insert(buf.end(), data.begin(), data.end());
    });
    std::string open_error;
    uint16_t stream = client.onion().open_stream(handle, echo_address(),
                                                 [&](const StreamResult& r) {
                                                   if (!r.ok) open_error = r.error;
                                                 });
    net.run_until_quiescent();
    if (!open_error.empty()) throw Error(Errc::protocol, "demo stream failed: " + open_error);
    auto line = read_line(buf);
    if (!line) throw Error(Errc::protocol, "echo reply missing");
    echoed_out = *line;
    client.onion().close_stream(handle, stream);
    net.run_until_quiescent();
  };

  onion_query(report.onion_echoed, report.exit_address);

  bool ok = report.direct_echoed == report.client_address &&
            report.onion_echoed == report.exit_address &&
            report.onion_echoed != report.client_address;

  if (rotate_second) {
    net.advance_seconds(kCircuitLifetimeSecs);
    onion_query(report.rotated_onion_echoed, report.rotated_exit_address);
    ok = ok && report.rotated_onion_echoed == report.rotated_exit_address &&
         report.rotated_onion_echoed != report.client_address;
  }

  report.verdict_ok = ok;
  report.verdict = ok ? "address hidden behind exit relay" : "verdict failed";
  return report;
}

struct ReplayReport {
  std::vector<std::string> violations;
  bool rerun_matches = false;
  json metrics;
};

// Re-validates all structural invariants, then re-runs the embedded
// scenario and compares byte for byte.
inline ReplayReport replay_transcript(const Transcript& t) {
  ReplayReport report;
  report.violations = validate_transcript(t);
  report.metrics = compute_metrics(t);
  if (report.violations.empty()) {
    Transcript rerun = run_scenario(scenario_from_json(t.scenario));
    report.rerun_matches = transcript_to_ndjson(rerun) == transcript_to_ndjson(t);
    if (!report.rerun_matches) {
      report.violations.push_back("replay mismatch: transcript does not reproduce from its seed");
    }
  }
  return report;
}

}  // namespace tomen::sim
