#include <catch2/catch_amalgamated.hpp>

#include "tomen/live.hpp"

using namespace tomen;
using namespace tomen::live;

namespace {

struct LiveNet {
  SystemClock clock;
  LiveDirectory dir;
  std::vector<std::unique_ptr<LiveRelay>> relays;

  explicit LiveNet(int n_relays, std::set<uint16_t> exit_ports)
      : dir("127.0.0.1:0", clock) {
    dir.start();
    for (int i = 0; i < n_relays; ++i) {
      RelayConfig cfg;
      cfg.identity_seed = 9100 + static_cast<uint64_t>(i);
      cfg.address = "127.0.0.1:0";
      cfg.directory_address = dir.address();
      cfg.egress_policy = EgressPolicy::allow(exit_ports);
      cfg.heartbeat_interval = 5;
      relays.push_back(std::make_unique<LiveRelay>(cfg, Rng(9200 + i)));
    }
  }

  void start_relays() {
    for (auto& r : relays) r->start();
  }

  ~LiveNet() {
    for (auto& r : relays) r->stop();
    dir.stop();
  }
};

uint16_t port_of(const std::string& addr) { return net::split_address(addr).port; }

}  // namespace

TEST_CASE("directory serves the length-prefixed JSON protocol over TCP") {
  SystemClock clock;
  LiveDirectory dir("127.0.0.1:0", clock);
  dir.start();

  Rng id_rng(4001);
  auto identity = gen_identity_keypair(id_rng);
  auto descriptor =
      build_descriptor(identity, "127.0.0.1:12345", EgressPolicy::allow({80}), 512);

  publish_tcp(dir.address(), descriptor);
  heartbeat_tcp(dir.address(), descriptor.relay_id);
  auto consensus = fetch_consensus_tcp(dir.address());
  REQUIRE(consensus.descriptors.size() == 1);
  CHECK(consensus.descriptors[0].relay_id == descriptor.relay_id);
  CHECK(consensus.descriptors[0].bandwidth == 512);

  auto bad = descriptor;
  bad.relay_id = std::string(64, 'a');
  CHECK_THROWS_AS(publish_tcp(dir.address(), bad), Error);

  dir.stop();
}

TEST_CASE("relay start fails fast when the directory is unreachable") {
  RelayConfig cfg;
  cfg.identity_seed = 4100;
  cfg.address = "127.0.0.1:0";
  cfg.directory_address = "127.0.0.1:1";  // nothing listens there
  cfg.egress_policy = EgressPolicy::no_exit();
  LiveRelay relay(cfg, Rng(4101));
  try {
    relay.start();
    FAIL("expected network error");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::network);
  }
}

TEST_CASE("live loopback: circuit build, tx submission, gossip propagation") {
  LiveGossip gossip_a("ga", "127.0.0.1:0", "127.0.0.1:0", {});
  // Wire b's peer list to a's peer port, then start both.
  LiveGossip gossip_b("gb", "127.0.0.1:0", "127.0.0.1:0", {gossip_a.peer_address()});
  LiveGossip gossip_a2("ga2", "127.0.0.1:0", "127.0.0.1:0", {gossip_b.peer_address()});
  gossip_b.start();
  gossip_a2.start();

  uint16_t submit_port = port_of(gossip_a2.submit_address());
  LiveNet net(3, {submit_port});
  net.start_relays();

  SystemClock clock;
  LiveClient client(net.dir.address(), Rng(5001), clock);

  auto build = client.build_circuit({.target_port = submit_port});
  REQUIRE(build.ok);
  auto info = client.circuit_info(build.handle);
  REQUIRE(info.hop_relay_ids.size() == 3);
  CHECK(std::set<std::string>(info.hop_relay_ids.begin(), info.hop_relay_ids.end()).size() == 3);

  auto open = client.open_stream(build.handle, gossip_a2.submit_address());
  REQUIRE(open.ok);

  auto tx = make_transaction(to_bytes("live-coffee"));
  client.send(build.handle, open.stream_id, serialize_tx(tx));
  auto ack_line = client.recv_line(build.handle, open.stream_id);
  REQUIRE(ack_line.has_value());
  auto ack = json::parse(*ack_line);
  CHECK(ack.at("status") == "ok");
  CHECK(ack.at("txid") == hex_encode(tx.txid));

  // Flooding reaches the peer node.
  std::string txid_hex = hex_encode(tx.txid);
  bool propagated = false;
  for (int i = 0; i < 100 && !propagated; ++i) {
    std::this_thread::sleep_for(std::chrono::milliseconds(20));
    std::lock_guard lock(gossip_b.mutex());
    propagated = gossip_b.core().knows(txid_hex);
  }
  CHECK(propagated);

  client.close_stream(build.handle, open.stream_id);
  client.destroy_circuit(build.handle);
  client.stop();
  gossip_a2.stop();
  gossip_b.stop();
}

TEST_CASE("live echo demo: onion query exposes the exit, not the client") {
  LiveEchoAddr echo("127.0.0.1:0");
  echo.start();
  uint16_t echo_port = port_of(echo.address());

  LiveNet net(3, {echo_port});
  net.start_relays();

  SystemClock clock;
  LiveClient client(net.dir.address(), Rng(6001), clock);

  // Direct query: the echo sees the client's own source address.
  std::string direct_echoed, direct_local;
  {
    auto stream = TcpStream::connect(echo.address());
    REQUIRE(stream.has_value());
    direct_local = stream->local_address();
    Bytes buf(64);
    ssize_t got = stream->read_some(buf.data(), buf.size());
    REQUIRE(got > 0);
    direct_echoed = std::string(buf.begin(), buf.begin() + got - 1);  // strip \n
  }
  CHECK(direct_echoed == direct_local);

  // Onion query: the echo sees one of the exit relay's external sources.
  auto build = client.build_circuit({.target_port = echo_port});
  REQUIRE(build.ok);
  auto open = client.open_stream(build.handle, echo.address());
  REQUIRE(open.ok);
  auto line = client.recv_line(build.handle, open.stream_id);
  REQUIRE(line.has_value());

  auto info = client.circuit_info(build.handle);
  LiveRelay* exit_relay = nullptr;
  for (auto& r : net.relays) {
    if (r->relay_id() == info.hop_relay_ids.at(2)) exit_relay = r.get();
  }
  REQUIRE(exit_relay != nullptr);
  auto sources = exit_relay->external_source_addresses();
  CHECK(std::find(sources.begin(), sources.end(), *line) != sources.end());
  CHECK(*line != direct_local);

  client.stop();
  echo.stop();
}
