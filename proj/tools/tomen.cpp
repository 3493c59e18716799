// tomen: one binary exposing every service and the demos as subcommands.
//
// Exit codes: 0 success, 1 usage, 2 config, 3 network, 4 protocol,
// 5 verdict-failed.

#include <CLI11.hpp>
#include <csignal>
#include <iostream>

#include "tomen/linker.hpp"
#include "tomen/live.hpp"
#include "tomen/scenario.hpp"

using namespace tomen;

namespace {

std::atomic<bool> g_stop{false};

void handle_signal(int) { g_stop = true; }

void install_signal_handlers() {
  std::signal(SIGINT, handle_signal);
  std::signal(SIGTERM, handle_signal);
}

void wait_for_stop() {
  while (!g_stop) std::this_thread::sleep_for(std::chrono::milliseconds(100));
}

int exit_code_for(Errc code) {
  switch (code) {
    case Errc::config:
      return 2;
    case Errc::network:
    case Errc::unreachable:
      return 3;
    case Errc::verdict_failed:
      return 5;
    default:
      return 4;
  }
}

struct Output {
  bool json = false;

  void event(const nlohmann::json& j) const {
    if (json) {
      std::cout << j.dump() << "\n" << std::flush;
    } else {
      std::string line = j.value("event", "event");
      for (const auto& [key, value] : j.items()) {
        if (key == "event") continue;
        line += "  " + key + "=" + (value.is_string() ? value.get<std::string>() : value.dump());
      }
      std::cout << line << "\n" << std::flush;
    }
  }
};

uint64_t seed_or_random(uint64_t seed, bool deterministic) {
  if (seed != 0 || deterministic) return seed;
  std::random_device rd;
  return (static_cast<uint64_t>(rd()) << 32) ^ rd();
}

EgressPolicy parse_egress_policy(const std::string& text) {
  if (text.empty() || text == "none") return EgressPolicy::no_exit();
  std::set<uint16_t> ports;
  std::istringstream in(text);
  std::string item;
  while (std::getline(in, item, ',')) {
    unsigned long port = std::stoul(item);
    if (port < 1 || port > 65535) throw Error(Errc::config, "egress port out of range: " + item);
    ports.insert(static_cast<uint16_t>(port));
  }
  return EgressPolicy::allow(std::move(ports));
}

// -- service commands -------------------------------------------------------

int cmd_dir(const std::string& listen, const std::string& config_path, const Output& out) {
  std::string address = listen;
  if (!config_path.empty()) {
    auto cfg = ConfigFile::load(config_path);
    cfg.require_known({"directory.listen"});
    if (address.empty()) address = cfg.get("directory.listen");
  }
  if (address.empty()) address = "127.0.0.1:7000";

  SystemClock clock;
  live::LiveDirectory dir(address, clock);
  dir.start();
  out.event({{"event", "listening"}, {"service", "directory"}, {"address", dir.address()}});
  wait_for_stop();
  dir.stop();
  return 0;
}

int cmd_relay(const std::string& config_path, const Output& out) {
  auto cfg = ConfigFile::load(config_path);
  cfg.require_known({"relay.address", "relay.directory", "relay.identity_seed",
                     "relay.egress_policy", "relay.heartbeat_interval", "relay.bandwidth"});
  RelayConfig rc;
  rc.address = cfg.get("relay.address", "127.0.0.1:0");
  rc.directory_address = cfg.get("relay.directory");
  if (rc.directory_address.empty()) throw Error(Errc::config, "relay.directory is required");
  rc.identity_seed = cfg.get_u64("relay.identity_seed", 0);
  rc.egress_policy = parse_egress_policy(cfg.get("relay.egress_policy", "none"));
  rc.heartbeat_interval = cfg.get_u64("relay.heartbeat_interval", 30);
  rc.bandwidth = cfg.get_u64("relay.bandwidth", 1000);

  live::LiveRelay relay(rc, rc.identity_seed ? Rng(rc.identity_seed + 1) : Rng::from_os_entropy());
  relay.start();
  out.event({{"event", "listening"},
             {"service", "relay"},
             {"address", relay.address()},
             {"relay_id", relay.relay_id()}});
  wait_for_stop();
  relay.stop();
  return 0;
}

int cmd_gossip(const std::string& config_path, const Output& out) {
  auto cfg = ConfigFile::load(config_path);
  cfg.require_known(
      {"gossip.node_id", "gossip.submit_address", "gossip.peer_address", "gossip.peers"});
  live::LiveGossip node(cfg.get("gossip.node_id", "gossip"),
                        cfg.get("gossip.submit_address", "127.0.0.1:0"),
                        cfg.get("gossip.peer_address", "127.0.0.1:0"),
                        cfg.get_list("gossip.peers"));
  node.start();
  out.event({{"event", "listening"},
             {"service", "gossip"},
             {"submit_address", node.submit_address()},
             {"peer_address", node.peer_address()}});
  wait_for_stop();
  node.stop();
  return 0;
}

int cmd_echo(const std::string& listen, const Output& out) {
  live::LiveEchoAddr echo(listen);
  echo.start();
  out.event({{"event", "listening"}, {"service", "echo"}, {"address", echo.address()}});
  wait_for_stop();
  echo.stop();
  return 0;
}

// -- client ------------------------------------------------------------------

int cmd_client_consensus(const std::string& dir_address, const Output& out) {
  auto consensus = live::fetch_consensus_tcp(dir_address);
  out.event({{"event", "consensus"},
             {"issued_at", consensus.issued_at},
             {"relays", consensus.descriptors.size()}});
  if (out.json) {
    std::cout << consensus_to_json(consensus).dump() << "\n";
  } else {
    for (const auto& d : consensus.descriptors) {
      std::cout << "  " << d.relay_id.substr(0, 16) << "  " << d.address << "\n";
    }
  }
  return 0;
}

int cmd_client_send_tx(const std::string& dir_address, const std::string& gossip_address,
                       const std::string& payload_hex, uint64_t seed, bool deterministic,
                       const Output& out) {
  auto payload = hex_decode(payload_hex);
  auto tx = make_transaction(payload);

  SystemClock clock;
  live::LiveClient client(dir_address, Rng(seed_or_random(seed, deterministic)), clock);
  uint16_t port = net::split_address(gossip_address).port;

  auto build = client.build_circuit({.target_port = port});
  if (!build.ok) {
    throw Error(Errc::protocol,
                "circuit build failed at hop " + std::to_string(build.failed_hop) + ": " +
                    build.error);
  }
  auto info = client.circuit_info(build.handle);
  out.event({{"event", "circuit_built"},
             {"guard", info.hop_relay_ids[0]},
             {"middle", info.hop_relay_ids[1]},
             {"exit", info.hop_relay_ids[2]}});

  auto open = client.open_stream(build.handle, gossip_address);
  if (!open.ok) throw Error(Errc::protocol, "stream failed: " + open.error);
  out.event({{"event", "stream_opened"}, {"target", gossip_address}});

  client.send(build.handle, open.stream_id, serialize_tx(tx));
  auto ack_line = client.recv_line(build.handle, open.stream_id);
  if (!ack_line) throw Error(Errc::protocol, "no ack from gossip node");
  auto ack = json::parse(*ack_line, nullptr, false);
  if (ack.is_discarded() || ack.value("status", "") != "ok") {
    throw Error(Errc::protocol, "submission rejected: " + *ack_line);
  }
  out.event({{"event", "ack"},
             {"txid", ack.value("txid", "")},
             {"known", ack.value("known", false)}});

  client.close_stream(build.handle, open.stream_id);
  client.destroy_circuit(build.handle);
  client.stop();
  return 0;
}

// -- demo ----------------------------------------------------------------------

int cmd_demo_echo_ip_sim(uint64_t seed, int relays, bool rotate, const Output& out) {
  auto report = sim::run_echo_demo(seed, relays, rotate);
  out.event({{"event", "echo_demo"},
             {"mode", "sim"},
             {"client_address", report.client_address},
             {"direct_echoed", report.direct_echoed},
             {"onion_echoed", report.onion_echoed},
             {"exit_address", report.exit_address},
             {"exit_relay_id", report.exit_relay_id}});
  if (rotate) {
    out.event({{"event", "echo_demo_rotated"},
               {"onion_echoed", report.rotated_onion_echoed},
               {"exit_address", report.rotated_exit_address}});
  }
  out.event({{"event", "verdict"}, {"ok", report.verdict_ok}, {"detail", report.verdict}});
  if (!report.verdict_ok) throw Error(Errc::verdict_failed, report.verdict);
  return 0;
}

int cmd_demo_echo_ip_live(uint64_t seed, int n_relays, const Output& out) {
  SystemClock clock;
  live::LiveDirectory dir("127.0.0.1:0", clock);
  dir.start();
  live::LiveEchoAddr echo("127.0.0.1:0");
  echo.start();
  uint16_t echo_port = net::split_address(echo.address()).port;

  std::vector<std::unique_ptr<live::LiveRelay>> relays;
  for (int i = 0; i < n_relays; ++i) {
    RelayConfig rc;
    rc.identity_seed = seed * 100 + static_cast<uint64_t>(i) + 1;
    rc.address = "127.0.0.1:0";
    rc.directory_address = dir.address();
    rc.egress_policy = EgressPolicy::allow({echo_port});
    rc.heartbeat_interval = 5;
    relays.push_back(std::make_unique<live::LiveRelay>(rc, Rng(seed * 100 + i + 50)));
    relays.back()->start();
  }

  // Direct query.
  std::string direct_echoed, direct_local;
  {
    auto stream = net::TcpStream::connect(echo.address());
    if (!stream) throw Error(Errc::network, "echo service unreachable");
    direct_local = stream->local_address();
    Bytes buf(64);
    ssize_t got = stream->read_some(buf.data(), buf.size());
    if (got <= 1) throw Error(Errc::protocol, "echo reply missing");
    direct_echoed.assign(buf.begin(), buf.begin() + got - 1);
  }

  // Onion query.
  live::LiveClient client(dir.address(), Rng(seed ? seed : 1), clock);
  auto build = client.build_circuit({.target_port = echo_port});
  if (!build.ok) throw Error(Errc::protocol, "circuit build failed: " + build.error);
  auto open = client.open_stream(build.handle, echo.address());
  if (!open.ok) throw Error(Errc::protocol, "stream failed: " + open.error);
  auto onion_echoed = client.recv_line(build.handle, open.stream_id);
  if (!onion_echoed) throw Error(Errc::protocol, "echo reply missing via circuit");

  auto info = client.circuit_info(build.handle);
  std::vector<std::string> exit_sources;
  for (auto& r : relays) {
    if (r->relay_id() == info.hop_relay_ids.at(2)) exit_sources = r->external_source_addresses();
  }

  // On loopback every endpoint shares the host, so the verdict compares the
  // echoed address against the exit's actual external source and the
  // client's own direct source (port-granular).
  bool ok = direct_echoed == direct_local && *onion_echoed != direct_local &&
            std::find(exit_sources.begin(), exit_sources.end(), *onion_echoed) !=
                exit_sources.end();

  out.event({{"event", "echo_demo"},
             {"mode", "live"},
             {"client_address", direct_local},
             {"direct_echoed", direct_echoed},
             {"onion_echoed", *onion_echoed},
             {"exit_relay_id", info.hop_relay_ids.at(2)}});
  out.event({{"event", "verdict"},
             {"ok", ok},
             {"detail", ok ? "address hidden behind exit relay" : "verdict failed"}});

  client.stop();
  for (auto& r : relays) r->stop();
  echo.stop();
  dir.stop();
  if (!ok) throw Error(Errc::verdict_failed, "echo demo verdict failed");
  return 0;
}

// -- sim ------------------------------------------------------------------------

void write_file(const std::string& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw Error(Errc::config, "cannot write " + path);
  f << text;
}

std::string read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error(Errc::config, "cannot read " + path);
  std::ostringstream buf;
  buf << f.rdbuf();
  return buf.str();
}

struct LinkSummary {
  size_t single_observer_links = 0;
  size_t txs_linked_by_singles = 0;
  size_t tx_count = 0;
};

LinkSummary summarize_links(const Transcript& t) {
  LinkSummary s;
  std::set<std::string> all_txids;
  for (const auto& m : t.mempools) {
    for (const auto& tx : m.txs) all_txids.insert(hex_encode(tx.txid));
  }
  s.tx_count = all_txids.size();
  std::set<std::string> linked_txids;
  for (const auto& observer : all_observers(t)) {
    auto pairs = adversary_link(t, {observer});
    s.single_observer_links += pairs.size();
    for (const auto& [addr, txid] : pairs) linked_txids.insert(txid);
  }
  s.txs_linked_by_singles = linked_txids.size();
  return s;
}

int cmd_sim_run(const std::string& scenario_path, uint64_t seed_override,
                const std::string& out_path, const Output& out) {
  auto scenario = sim::scenario_from_config(ConfigFile::load(scenario_path));
  if (seed_override != 0) scenario.seed = seed_override;
  sim::validate_scenario(scenario);

  auto transcript = sim::run_scenario(scenario);
  if (!out_path.empty()) write_file(out_path, transcript_to_ndjson(transcript));

  auto violations = validate_transcript(transcript);
  auto links = summarize_links(transcript);
  bool onion = scenario.mode == "onion";
  bool expectation_met = onion ? links.single_observer_links == 0
                               : links.txs_linked_by_singles == links.tx_count;

  out.event({{"event", "sim_run"},
             {"mode", scenario.mode},
             {"seed", scenario.seed},
             {"ticks", transcript.metrics.value("total_ticks", 0ull)},
             {"cells", transcript.metrics.value("cells_delivered", 0ull)},
             {"records", transcript.records.size()},
             {"single_observer_links", links.single_observer_links},
             {"txs", links.tx_count},
             {"violations", violations.size()},
             {"expectation_met", expectation_met}});
  for (const auto& v : violations) out.event({{"event", "violation"}, {"detail", v}});

  if (!violations.empty() || !expectation_met) {
    throw Error(Errc::protocol, onion ? "single-observer linkage in onion mode"
                                      : "direct-mode baseline not linkable");
  }
  return 0;
}

int cmd_sim_replay(const std::string& in_path, const Output& out) {
  auto transcript = transcript_from_ndjson(read_file(in_path));
  auto report = sim::replay_transcript(transcript);
  out.event({{"event", "sim_replay"},
             {"violations", report.violations.size()},
             {"reproducible", report.rerun_matches},
             {"metrics", report.metrics}});
  for (const auto& v : report.violations) out.event({{"event", "violation"}, {"detail", v}});
  if (!report.violations.empty()) {
    throw Error(Errc::protocol, "transcript validation failed: " + report.violations.front());
  }
  return 0;
}

int cmd_sim_link(const std::string& in_path, const std::string& coalition_spec,
                 const Output& out) {
  auto transcript = transcript_from_ndjson(read_file(in_path));
  auto coalition = resolve_coalition(transcript, coalition_spec);
  auto linked = adversary_link(transcript, coalition);

  json members = json::array();
  for (const auto& m : coalition) members.push_back(m);
  json pairs = json::array();
  for (const auto& [addr, txid] : linked) {
    pairs.push_back({{"client", addr}, {"txid", txid}});
  }
  out.event({{"event", "sim_link"},
             {"coalition", members},
             {"linked", pairs},
             {"count", linked.size()}});
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"tomen: desk-scale onion routing with a transaction-gossip overlay"};
  app.require_subcommand(1);
  bool json_out = false;
  app.add_flag("--json", json_out, "line-delimited JSON events on stdout");

  // dir
  auto* dir_cmd = app.add_subcommand("dir", "run the directory server");
  std::string dir_listen, dir_config;
  dir_cmd->add_option("--listen", dir_listen, "listen address (host:port)");
  dir_cmd->add_option("--config", dir_config, "config file");

  // relay
  auto* relay_cmd = app.add_subcommand("relay", "run a relay node");
  std::string relay_config;
  relay_cmd->add_option("--config", relay_config, "config file")->required();

  // gossip
  auto* gossip_cmd = app.add_subcommand("gossip", "run a transaction gossip node");
  std::string gossip_config;
  gossip_cmd->add_option("--config", gossip_config, "config file")->required();

  // echo
  auto* echo_cmd = app.add_subcommand("echo", "run the bundled address-echo service");
  std::string echo_listen = "127.0.0.1:0";
  echo_cmd->add_option("--listen", echo_listen, "listen address");

  // client
  auto* client_cmd = app.add_subcommand("client", "onion-proxy client operations");
  std::string client_dir;
  uint64_t client_seed = 0;
  bool client_deterministic = false;
  client_cmd->add_option("--dir", client_dir, "directory address")->required();
  client_cmd->add_option("--seed", client_seed, "rng seed");
  client_cmd->add_flag("--deterministic", client_deterministic, "derive all randomness from --seed");
  client_cmd->require_subcommand(1);

  auto* send_tx_cmd = client_cmd->add_subcommand("send-tx", "submit a transaction via a circuit");
  std::string gossip_addr, payload_hex;
  send_tx_cmd->add_option("--gossip", gossip_addr, "gossip submit address")->required();
  send_tx_cmd->add_option("--payload-hex", payload_hex, "transaction payload (hex)")->required();

  auto* consensus_cmd = client_cmd->add_subcommand("consensus", "fetch and print the consensus");

  // demo
  auto* demo_cmd = app.add_subcommand("demo", "paper demos");
  demo_cmd->require_subcommand(1);
  auto* echo_ip_cmd = demo_cmd->add_subcommand(
      "echo-ip", "query an address-echo service directly and through a circuit");
  uint64_t demo_seed = 1;
  int demo_relays = 3;
  bool demo_live = false, demo_rotate = false;
  echo_ip_cmd->add_option("--seed", demo_seed, "seed for path selection");
  echo_ip_cmd->add_option("--relays", demo_relays, "number of relays")->check(CLI::Range(3, 64));
  echo_ip_cmd->add_flag("--live", demo_live, "real loopback sockets instead of the harness");
  echo_ip_cmd->add_flag("--rotate", demo_rotate,
                        "force rotation and query again (harness mode only)");

  // sim
  auto* sim_cmd = app.add_subcommand("sim", "deterministic scenario harness");
  sim_cmd->require_subcommand(1);
  auto* sim_run_cmd = sim_cmd->add_subcommand("run", "run a scenario");
  std::string scenario_path, sim_out, sim_in, coalition_spec = "guard,exit";
  uint64_t sim_seed = 0;
  sim_run_cmd->add_option("--scenario", scenario_path, "scenario file")->required();
  sim_run_cmd->add_option("--seed", sim_seed, "override the scenario seed");
  sim_run_cmd->add_option("--out", sim_out, "write the transcript here");
  auto* sim_replay_cmd = sim_cmd->add_subcommand("replay", "validate and reproduce a transcript");
  sim_replay_cmd->add_option("--in", sim_in, "transcript file")->required();
  auto* sim_link_cmd = sim_cmd->add_subcommand("link", "run the adversary linker on a transcript");
  sim_link_cmd->add_option("--in", sim_in, "transcript file")->required();
  sim_link_cmd->add_option("--coalition", coalition_spec,
                           "comma list: guard,middle,exit,gossip,relays,taps or entity ids");

  CLI11_PARSE(app, argc, argv);

  Output out{json_out};
  install_signal_handlers();

  try {
    if (*dir_cmd) return cmd_dir(dir_listen, dir_config, out);
    if (*relay_cmd) return cmd_relay(relay_config, out);
    if (*gossip_cmd) return cmd_gossip(gossip_config, out);
    if (*echo_cmd) return cmd_echo(echo_listen, out);
    if (*client_cmd) {
      if (*consensus_cmd) return cmd_client_consensus(client_dir, out);
      if (*send_tx_cmd) {
        return cmd_client_send_tx(client_dir, gossip_addr, payload_hex, client_seed,
                                  client_deterministic, out);
      }
    }
    if (*demo_cmd && *echo_ip_cmd) {
      return demo_live ? cmd_demo_echo_ip_live(demo_seed, demo_relays, out)
                       : cmd_demo_echo_ip_sim(demo_seed, demo_relays, demo_rotate, out);
    }
    if (*sim_cmd) {
      if (*sim_run_cmd) return cmd_sim_run(scenario_path, sim_seed, sim_out, out);
      if (*sim_replay_cmd) return cmd_sim_replay(sim_in, out);
      if (*sim_link_cmd) return cmd_sim_link(sim_in, coalition_spec, out);
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code_for(e.code());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 4;
  }
  return 1;
}
