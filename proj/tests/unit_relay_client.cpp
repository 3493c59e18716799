#include <catch2/catch_amalgamated.hpp>

#include "tomen/scenario.hpp"

using namespace tomen;
using namespace tomen::sim;

namespace {

// Captures relay actions without any network.
struct FakeRelayEnv : RelayEnv {
  std::vector<std::pair<LinkId, Cell>> sent;
  uint64_t next_id = 100;
  bool links_reachable = true;

  void send_cell(LinkId link, const Cell& cell) override { sent.emplace_back(link, cell); }
  std::optional<LinkId> open_link(const std::string&) override {
    if (!links_reachable) return std::nullopt;
    return next_id++;
  }
  std::optional<ConnId> open_external(const std::string&) override { return next_id++; }
  void send_external(ConnId, ByteView) override {}
  void close_external(ConnId) override {}

  const Cell& last_on(LinkId link) const {
    for (auto it = sent.rbegin(); it != sent.rend(); ++it) {
      if (it->first == link) return it->second;
    }
    throw std::runtime_error("no cell sent on link");
  }
};

RelayCore make_core(FakeRelayEnv& env, IdentityKeyPair& identity_out) {
  Rng id_rng(501);
  identity_out = gen_identity_keypair(id_rng);
  return RelayCore(identity_out, EgressPolicy::allow({7070}), Rng(502), env);
}

// Serves a fixed blob to every connection, for exit chunking tests.
class SimBlob : public SimEntity {
 public:
  SimBlob(SimNet& net, std::string address, size_t size)
      : SimEntity("blob-0", "service", std::move(address)), net_(net), size_(size) {
    net_.listen(this->address(), this);
  }

  void on_message(const Message& m) override {
    if (m.kind == Message::kStreamOpen) {
      Bytes blob(size_);
      for (size_t i = 0; i < size_; ++i) blob[i] = static_cast<uint8_t>(i * 13 + 5);
      net_.stream_send(m.conn, this, blob);
    }
  }

 private:
  SimNet& net_;
  size_t size_;
};

// Byte echo that counts closed connections (teardown visibility).
class CountingEcho : public SimEntity {
 public:
  CountingEcho(SimNet& net, std::string address)
      : SimEntity("echo-bytes", "service", std::move(address)), net_(net) {
    net_.listen(this->address(), this);
  }

  void on_message(const Message& m) override {
    if (m.kind == Message::kStreamData) net_.stream_send(m.conn, this, m.data);
    if (m.kind == Message::kStreamClose) closes_++;
  }

  int closes() const { return closes_; }

 private:
  SimNet& net_;
  int closes_ = 0;
};

// A small live network: relays + byte echo + one client, with helpers that
// run the scheduler to completion after each blocking-style step.
struct TestNet {
  Rng root;
  SimNet net;
  std::vector<std::unique_ptr<SimRelay>> relays;
  std::vector<RelayDescriptor> descriptors;
  CountingEcho echo;
  SimBlob blob;
  SimClient client;

  explicit TestNet(uint64_t seed, int n_relays = 3)
      : root(seed),
        net(root.fork("scheduler")),
        echo(net, "10.7.4.2:7070"),
        blob(net, "10.7.4.3:7071", 2000),
        client(net, "client-0", client_address(0), root.fork("client")) {
    for (int i = 0; i < n_relays; ++i) {
      Rng id_rng = root.fork("relay-identity-" + std::to_string(i));
      auto identity = gen_identity_keypair(id_rng);
      EgressPolicy policy = EgressPolicy::allow({7070, 7071});
      descriptors.push_back(build_descriptor(identity, relay_address(i), policy, 1000));
      relays.push_back(std::make_unique<SimRelay>(net, "relay-" + std::to_string(i),
                                                  relay_address(i), std::move(identity), policy,
                                                  root.fork("relay-rng-" + std::to_string(i))));
      net.directory().publish(descriptors.back());
      net.register_heartbeat(descriptors.back().relay_id);
    }
  }

  uint64_t build_circuit() {
    BuildResult result;
    client.onion().build_circuit({.target_port = 7070},
                                 [&](const BuildResult& r) { result = r; });
    net.run_until_quiescent();
    if (!result.ok) {
      throw Error(Errc::protocol, "build failed at hop " + std::to_string(result.failed_hop) +
                                      ": " + result.error);
    }
    return result.handle;
  }

  std::pair<bool, std::string> try_build(int& failed_hop) {
    BuildResult result;
    client.onion().build_circuit({.target_port = 7070},
                                 [&](const BuildResult& r) { result = r; });
    net.run_until_quiescent();
    failed_hop = result.failed_hop;
    return {result.ok, result.error};
  }

  std::pair<uint16_t, std::string> open_stream(uint64_t handle, const std::string& target) {
    StreamResult result;
    uint16_t id = client.onion().open_stream(handle, target,
                                             [&](const StreamResult& r) { result = r; });
    net.run_until_quiescent();
    return {id, result.ok ? "" : result.error};
  }

  SimRelay* relay_by_id(const std::string& fingerprint) {
    for (size_t i = 0; i < descriptors.size(); ++i) {
      if (descriptors[i].relay_id == fingerprint) return relays[i].get();
    }
    return nullptr;
  }
};

}  // namespace

TEST_CASE("fresh CREATE answers with a CREATED that client_finish accepts") {
  FakeRelayEnv env;
  IdentityKeyPair identity;
  RelayCore core = make_core(env, identity);

  Rng client_rng(7);
  auto eph = gen_keypair(client_rng);
  core.on_cell(1, Cell{42, CellCommand::kCreate, client_create_payload(eph)});

  REQUIRE(env.sent.size() == 1);
  const Cell& created = env.sent[0].second;
  CHECK(created.command == CellCommand::kCreated);
  CHECK(created.circuit_id == 42);
  auto keys = client_finish(eph, created.payload, identity.public_key());
  CHECK(core.circuit_count() == 1);
  CHECK(keys.forward_key != crypto::Key{});
}

TEST_CASE("CREATE reusing a live circuit id is answered with DESTROY") {
  FakeRelayEnv env;
  IdentityKeyPair identity;
  RelayCore core = make_core(env, identity);

  Rng client_rng(7);
  core.on_cell(1, Cell{42, CellCommand::kCreate, client_create_payload(gen_keypair(client_rng))});
  core.on_cell(1, Cell{42, CellCommand::kCreate, client_create_payload(gen_keypair(client_rng))});

  REQUIRE(env.sent.size() == 2);
  CHECK(env.sent[1].second.command == CellCommand::kDestroy);
  CHECK(core.circuit_count() == 1);
}

TEST_CASE("two CREATEs on different circuit ids make two independent entries") {
  FakeRelayEnv env;
  IdentityKeyPair identity;
  RelayCore core = make_core(env, identity);

  Rng client_rng(7);
  core.on_cell(1, Cell{42, CellCommand::kCreate, client_create_payload(gen_keypair(client_rng))});
  core.on_cell(1, Cell{43, CellCommand::kCreate, client_create_payload(gen_keypair(client_rng))});
  CHECK(core.circuit_count() == 2);
  CHECK(core.has_circuit(1, 42));
  CHECK(core.has_circuit(1, 43));
}

TEST_CASE("malformed CREATE handshake is answered with DESTROY") {
  FakeRelayEnv env;
  IdentityKeyPair identity;
  RelayCore core = make_core(env, identity);
  core.on_cell(1, Cell{9, CellCommand::kCreate, Bytes(5, 0xab)});
  REQUIRE(env.sent.size() == 1);
  CHECK(env.sent[0].second.command == CellCommand::kDestroy);
  CHECK(core.circuit_count() == 0);
}

TEST_CASE("DESTROY for an unknown circuit is ignored; unknown RELAY counted") {
  FakeRelayEnv env;
  IdentityKeyPair identity;
  RelayCore core = make_core(env, identity);

  core.on_cell(3, Cell{77, CellCommand::kDestroy, {}});
  CHECK(env.sent.empty());

  core.on_cell(3, Cell{77, CellCommand::kRelay, Bytes(kCellPayloadSize, 1)});
  CHECK(core.metrics().dropped_unknown_circuit == 1);
  CHECK(env.sent.empty());
}

TEST_CASE("second EXTEND on an already-extended entry destroys the circuit") {
  FakeRelayEnv env;
  IdentityKeyPair identity;
  RelayCore core = make_core(env, identity);

  // Handshake as the client so we can address sealed EXTENDs to this hop.
  Rng client_rng(8);
  auto eph = gen_keypair(client_rng);
  core.on_cell(1, Cell{5, CellCommand::kCreate, client_create_payload(eph)});
  auto keys = client_finish(eph, env.sent[0].second.payload, identity.public_key());
  HopCryptoState mirror(keys);

  auto sealed_extend = [&]() {
    RelayPayload rp;
    rp.relay_command = RelayCommand::kExtend;
    rp.data.resize(2);
    std::string addr = "10.0.0.9:9001";
    put_u16(rp.data.data(), static_cast<uint16_t>(addr.size()));
    rp.data.insert(rp.data.end(), addr.begin(), addr.end());
    auto next_eph = client_create_payload(gen_keypair(client_rng));
    rp.data.insert(rp.data.end(), next_eph.begin(), next_eph.end());
    rp = update_and_seal_digest(mirror.forward_digest, rp);
    auto buf = mirror.forward.apply(encode_relay_payload(rp));
    return Cell{5, CellCommand::kRelay, Bytes(buf.begin(), buf.end())};
  };

  core.on_cell(1, sealed_extend());
  REQUIRE(env.sent.size() == 2);  // CREATED + CREATE toward next hop
  CHECK(env.sent[1].second.command == CellCommand::kCreate);

  core.on_cell(1, sealed_extend());
  CHECK(env.sent.back().second.command == CellCommand::kDestroy);
  CHECK(core.circuit_count() == 0);
}

TEST_CASE("3-relay network builds an open circuit with 3 distinct hops") {
  TestNet net(1);
  auto handle = net.build_circuit();
  auto info = net.client.onion().circuit_info(handle);
  CHECK(info.state == CircuitState::kOpen);
  REQUIRE(info.hop_relay_ids.size() == 3);
  std::set<std::string> distinct(info.hop_relay_ids.begin(), info.hop_relay_ids.end());
  CHECK(distinct.size() == 3);
}

TEST_CASE("middle relay killed before EXTEND fails the build at hop index 1") {
  TestNet net(2);
  // Predict the path for this seed, then kill the middle's listener.
  Rng preview = net.root.fork("client");
  auto path = select_path(net.net.directory().fetch_consensus(), {.target_port = 7070}, preview);
  net.net.unlisten(path.middle.address);

  int failed_hop = -1;
  auto [ok, error] = net.try_build(failed_hop);
  CHECK_FALSE(ok);
  CHECK(failed_hop == 1);
}

TEST_CASE("guard unreachable fails the build at hop index 0") {
  TestNet net(3);
  Rng preview = net.root.fork("client");
  auto path = select_path(net.net.directory().fetch_consensus(), {.target_port = 7070}, preview);
  net.net.unlisten(path.guard.address);

  int failed_hop = -1;
  auto [ok, error] = net.try_build(failed_hop);
  CHECK_FALSE(ok);
  CHECK(failed_hop == 0);
}

TEST_CASE("middle hop forwards the exit-bound EXTEND without dispatching it") {
  TestNet net(4);
  auto handle = net.build_circuit();
  auto info = net.client.onion().circuit_info(handle);

  auto* guard = net.relay_by_id(info.hop_relay_ids[0]);
  auto* middle = net.relay_by_id(info.hop_relay_ids[1]);
  auto* exit = net.relay_by_id(info.hop_relay_ids[2]);
  REQUIRE(guard != nullptr);
  REQUIRE(middle != nullptr);
  REQUIRE(exit != nullptr);

  // Each of guard and middle dispatched exactly its own EXTEND; the exit
  // dispatched none and parsed nothing during the build.
  CHECK(guard->core().metrics().dispatched_extend == 1);
  CHECK(middle->core().metrics().dispatched_extend == 1);
  CHECK(exit->core().metrics().dispatched_extend == 0);
  CHECK(exit->core().metrics().recognized == 0);
}

TEST_CASE("echo stream: send ping, receive ping") {
  TestNet net(5);
  auto handle = net.build_circuit();
  auto [stream, err] = net.open_stream(handle, "10.7.4.2:7070");
  REQUIRE(err.empty());

  net.client.onion().send(handle, stream, to_bytes("ping"));
  net.net.run_until_quiescent();
  auto got = net.client.onion().recv(handle, stream, 64);
  CHECK(to_string(got) == "ping");
}

TEST_CASE("10 KiB of random bytes roundtrip in order") {
  TestNet net(6);
  auto handle = net.build_circuit();
  auto [stream, err] = net.open_stream(handle, "10.7.4.2:7070");
  REQUIRE(err.empty());

  Rng rng(99);
  Bytes blob = rng.bytes(10 * 1024);
  net.client.onion().send(handle, stream, blob);
  net.net.run_until_quiescent();
  auto got = net.client.onion().recv(handle, stream, blob.size() + 1);
  CHECK(got == blob);
}

TEST_CASE("exit chunks a 2000-byte response into multiple ordered DATA cells") {
  TestNet net(7);
  auto handle = net.build_circuit();

  int data_cells = 0;
  net.client.onion().set_data_callback([&](uint16_t, ByteView) { data_cells++; });
  auto [stream, err] = net.open_stream(handle, "10.7.4.3:7071");
  REQUIRE(err.empty());
  net.net.run_until_quiescent();

  auto got = net.client.onion().recv(handle, stream, 4096);
  REQUIRE(got.size() == 2000);
  CHECK(data_cells >= 5);
  for (size_t i = 0; i < got.size(); ++i) {
    REQUIRE(got[i] == static_cast<uint8_t>(i * 13 + 5));
  }
}

TEST_CASE("exit policy refuses a port the circuit was not built for") {
  TestNet net(8);
  auto handle = net.build_circuit();
  auto [stream, err] = net.open_stream(handle, "10.7.4.2:9999");
  CHECK(err == "exit policy refused");
}

TEST_CASE("allowed port with no listener ends with unreachable") {
  TestNet net(9);
  auto handle = net.build_circuit();
  auto [stream, err] = net.open_stream(handle, "10.7.9.9:7070");
  CHECK(err == "unreachable");
}

TEST_CASE("client DESTROY tears down every relay's entry") {
  TestNet net(10);
  auto handle = net.build_circuit();
  for (const auto& relay : net.relays) CHECK(relay->core().circuit_count() == 1);

  net.client.onion().destroy_circuit(handle);
  net.net.run_until_quiescent();
  for (const auto& relay : net.relays) CHECK(relay->core().circuit_count() == 0);
}

TEST_CASE("teardown mid-stream closes the external connection") {
  TestNet net(11);
  auto handle = net.build_circuit();
  auto [stream, err] = net.open_stream(handle, "10.7.4.2:7070");
  REQUIRE(err.empty());
  net.client.onion().send(handle, stream, to_bytes("hello"));
  net.net.run_until_quiescent();

  net.client.onion().destroy_circuit(handle);
  net.net.run_until_quiescent();
  CHECK(net.echo.closes() >= 1);
}

TEST_CASE("single peel: one layer operation per traversing cell per direction") {
  TestNet net(12);
  auto handle = net.build_circuit();
  auto [stream, err] = net.open_stream(handle, "10.7.4.2:7070");
  REQUIRE(err.empty());
  net.client.onion().send(handle, stream, to_bytes("abc"));
  net.net.run_until_quiescent();

  auto info = net.client.onion().circuit_info(handle);
  for (int hop = 0; hop < 3; ++hop) {
    const auto& m = net.relay_by_id(info.hop_relay_ids[hop])->core().metrics();
    // Forward: every cell in gets exactly one peel.
    CHECK(m.layer_ops_forward == m.cells_forward);
    // Backward: one add per forwarded cell plus one per cell this hop
    // originated (EXTENDED during the build; CONNECTED/DATA at the exit).
    uint64_t originated = m.layer_ops_backward - m.cells_backward;
    if (hop < 2) {
      CHECK(originated == m.dispatched_extend);
    } else {
      CHECK(m.cells_backward == 0);
      CHECK(originated >= 2);  // CONNECTED + echoed DATA
    }
  }
}

TEST_CASE("tampered ciphertext is forwarded by guard and middle, then kills the circuit") {
  TestNet net(13);
  auto handle = net.build_circuit();
  auto info = net.client.onion().circuit_info(handle);
  auto* guard = net.relay_by_id(info.hop_relay_ids[0]);
  auto* exit = net.relay_by_id(info.hop_relay_ids[2]);
  uint64_t guard_recognized_before = guard->core().metrics().recognized;
  uint64_t guard_forwarded_before = guard->core().metrics().cells_forward;

  RelayPayload rp;
  rp.relay_command = RelayCommand::kData;
  rp.stream_id = 1;
  rp.data = to_bytes("tamper-me");
  Cell cell = net.client.onion().encrypt_outbound(handle, rp);
  cell.payload[100] ^= 0x01;
  net.client.raw_send_cell(info.link, cell);
  net.net.run_until_quiescent();

  // Guard and middle forwarded without recognizing; the exit failed the
  // digest check and destroyed the circuit.
  CHECK(guard->core().metrics().recognized == guard_recognized_before);
  CHECK(guard->core().metrics().cells_forward == guard_forwarded_before + 1);
  CHECK(net.client.onion().circuit_info(handle).state == CircuitState::kClosed);
  CHECK(exit->core().circuit_count() == 0);
}

TEST_CASE("backward injection at the middle fails the client's digest check") {
  TestNet net(14);
  auto handle = net.build_circuit();
  auto info = net.client.onion().circuit_info(handle);
  auto* middle = net.relay_by_id(info.hop_relay_ids[1]);

  // Find the guard-middle conn from the middle's vantage records.
  std::string guard_addr = info.hop_addresses[0];
  uint64_t conn_id = 0;
  for (const auto& r : net.net.records()) {
    if (r.observer == middle->id() && r.kind == "cell" && r.dst_addr == guard_addr) {
      conn_id = std::stoull(r.conn.substr(5));
    }
  }
  REQUIRE(conn_id != 0);

  Rng junk(1234);
  Cell forged{info.circuit_id, CellCommand::kRelay, junk.bytes(kCellPayloadSize)};
  net.net.send_cell(conn_id, middle, forged);
  net.net.run_until_quiescent();

  CHECK(net.client.onion().circuit_info(handle).state == CircuitState::kClosed);
  CHECK(net.client.onion().metric("digest_failures") == 1);
}

TEST_CASE("backward cell on a torn-down circuit is dropped and counted") {
  TestNet net(15);
  auto handle = net.build_circuit();
  auto info = net.client.onion().circuit_info(handle);
  auto* guard = net.relay_by_id(info.hop_relay_ids[0]);

  std::string middle_addr = info.hop_addresses[1];
  uint64_t conn_id = 0;
  for (const auto& r : net.net.records()) {
    if (r.observer == guard->id() && r.kind == "cell" && r.src_addr == guard->address() &&
        r.dst_addr == middle_addr) {
      conn_id = std::stoull(r.conn.substr(5));
    }
  }
  REQUIRE(conn_id != 0);

  net.client.onion().destroy_circuit(handle);
  net.net.run_until_quiescent();
  uint64_t dropped_before = guard->core().metrics().dropped_unknown_circuit;

  auto* middle = net.relay_by_id(info.hop_relay_ids[1]);
  Rng junk(4321);
  net.net.send_cell(conn_id, middle,
                    Cell{info.circuit_id, CellCommand::kRelay, junk.bytes(kCellPayloadSize)});
  net.net.run_until_quiescent();
  CHECK(guard->core().metrics().dropped_unknown_circuit == dropped_before + 1);
}

TEST_CASE("fixed seed reproduces the same path and wire transcript") {
  auto run = [](uint64_t seed) {
    TestNet net(seed);
    auto handle = net.build_circuit();
    auto info = net.client.onion().circuit_info(handle);
    return std::make_pair(info.hop_relay_ids, net.net.records().size());
  };
  auto [path_a, cells_a] = run(77);
  auto [path_b, cells_b] = run(77);
  CHECK(path_a == path_b);
  CHECK(cells_a == cells_b);
  auto [path_c, cells_c] = run(78);
  CHECK(path_a != path_c);
}

TEST_CASE("every open circuit has exactly 3 pairwise-distinct hops across seeds") {
  for (uint64_t seed = 100; seed < 130; ++seed) {
    TestNet net(seed, 6);
    auto handle = net.build_circuit();
    auto info = net.client.onion().circuit_info(handle);
    REQUIRE(info.hop_relay_ids.size() == 3);
    std::set<std::string> distinct(info.hop_relay_ids.begin(), info.hop_relay_ids.end());
    REQUIRE(distinct.size() == 3);
  }
}

TEST_CASE("rotation: 599 s eligible, 600 s rotated out") {
  TestNet net(16);
  auto handle = net.build_circuit();

  net.net.advance_seconds(599);
  auto eligible = net.client.onion().eligible_circuit();
  REQUIRE(eligible.has_value());
  CHECK(*eligible == handle);

  net.net.advance_seconds(1);
  CHECK_FALSE(net.client.onion().eligible_circuit().has_value());
  // No streams were open, so the rotated circuit tears down immediately.
  net.net.run_until_quiescent();
  CHECK(net.client.onion().circuit_info(handle).state == CircuitState::kClosed);
}

TEST_CASE("in-flight stream drains on the rotated circuit; new streams go elsewhere") {
  TestNet net(17, 6);
  auto handle = net.build_circuit();

  net.net.advance_seconds(590);
  auto [stream, err] = net.open_stream(handle, "10.7.4.2:7070");
  REQUIRE(err.empty());

  net.net.advance_seconds(10);
  CHECK_FALSE(net.client.onion().eligible_circuit().has_value());

  // The old circuit still carries its stream.
  auto info = net.client.onion().circuit_info(handle);
  CHECK(info.state == CircuitState::kOpen);
  CHECK(info.rotated_out);
  net.client.onion().send(handle, stream, to_bytes("still-here"));
  net.net.run_until_quiescent();
  CHECK(to_string(net.client.onion().recv(handle, stream, 64)) == "still-here");

  // A new circuit serves new traffic, on its own id.
  auto second = net.build_circuit();
  CHECK(net.client.onion().circuit_info(second).circuit_id != info.circuit_id);

  // Closing the drained stream tears the old circuit down.
  net.client.onion().close_stream(handle, stream);
  net.net.run_until_quiescent();
  CHECK(net.client.onion().circuit_info(handle).state == CircuitState::kClosed);
  CHECK(net.client.onion().circuit_info(second).state == CircuitState::kOpen);
}

TEST_CASE("echo demo: direct exposes the client, onion exposes the exit") {
  auto report = run_echo_demo(31, 5);
  CHECK(report.verdict_ok);
  CHECK(report.direct_echoed == report.client_address);
  CHECK(report.onion_echoed == report.exit_address);
  CHECK(report.onion_echoed != report.client_address);
}

TEST_CASE("echo demo with forced rotation can pick a different exit") {
  bool saw_different_exit = false;
  for (uint64_t seed = 1; seed <= 20 && !saw_different_exit; ++seed) {
    auto report = run_echo_demo(seed, 5, /*rotate_second=*/true);
    REQUIRE(report.verdict_ok);
    if (report.rotated_exit_address != report.exit_address) saw_different_exit = true;
  }
  CHECK(saw_different_exit);
}
