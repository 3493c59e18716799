#pragma once

// Directory service: relays publish descriptors and heartbeats, clients
// fetch a live-relay consensus and pick 3-hop paths from it.
//
// Wire protocol (served over a stream transport): 4-byte big-endian length
// prefix + UTF-8 JSON object. Requests carry "verb" in {publish, heartbeat,
// fetch}; responses mirror with "status" in {ok, error}.

#include <map>
#include <optional>
#include <set>

#include <nlohmann/json.hpp>

#include "tomen/clock.hpp"
#include "tomen/handshake.hpp"

namespace tomen {

using json = nlohmann::json;

// Relays silent for longer than this (logical seconds) drop out of the
// consensus.
constexpr uint64_t kLivenessWindowSecs = 120;

// Either exit-disallowed or an allow-list of destination ports.
struct EgressPolicy {
  std::optional<std::set<uint16_t>> allowed_ports;  // nullopt = no exit

  static EgressPolicy no_exit() { return {}; }
  static EgressPolicy allow(std::set<uint16_t> ports) { return {std::move(ports)}; }

  bool allows(uint16_t port) const {
    return allowed_ports.has_value() && allowed_ports->count(port) > 0;
  }

  bool operator==(const EgressPolicy&) const = default;
};

struct RelayDescriptor {
  std::string relay_id;  // hex fingerprint of identity_pubkey
  std::string address;   // host:port
  std::array<uint8_t, 32> identity_pubkey{};
  EgressPolicy egress_policy;
  uint64_t bandwidth = 0;  // advertised bytes/second
  uint64_t first_seen = 0;
  uint64_t last_heartbeat = 0;

  bool operator==(const RelayDescriptor&) const = default;
};

struct Consensus {
  uint64_t issued_at = 0;
  std::vector<RelayDescriptor> descriptors;
};

struct PathConstraints {
  uint16_t target_port = 0;
  bool require_distinct = true;  // always true; kept for the record
};

enum class PathSelection { kUniform, kBandwidthWeighted };

inline json egress_policy_to_json(const EgressPolicy& policy) {
  if (!policy.allowed_ports) return nullptr;
  json ports = json::array();
  for (uint16_t p : *policy.allowed_ports) ports.push_back(p);
  return ports;
}

inline EgressPolicy egress_policy_from_json(const json& j) {
  if (j.is_null()) return EgressPolicy::no_exit();
  std::set<uint16_t> ports;
  for (const auto& p : j) ports.insert(p.get<uint16_t>());
  return EgressPolicy::allow(std::move(ports));
}

inline json descriptor_to_json(const RelayDescriptor& d) {
  return json{{"relay_id", d.relay_id},
              {"address", d.address},
              {"identity_pubkey", hex_encode(d.identity_pubkey)},
              {"egress_policy", egress_policy_to_json(d.egress_policy)},
              {"bandwidth", d.bandwidth},
              {"first_seen", d.first_seen},
              {"last_heartbeat", d.last_heartbeat}};
}

inline RelayDescriptor descriptor_from_json(const json& j) {
  RelayDescriptor d;
  d.relay_id = j.at("relay_id").get<std::string>();
  d.address = j.at("address").get<std::string>();
  auto pk = hex_decode(j.at("identity_pubkey").get<std::string>());
  if (pk.size() != 32) throw Error(Errc::protocol, "identity_pubkey must be 32 bytes");
  std::copy(pk.begin(), pk.end(), d.identity_pubkey.begin());
  d.egress_policy = egress_policy_from_json(j.at("egress_policy"));
  d.bandwidth = j.at("bandwidth").get<uint64_t>();
  d.first_seen = j.value("first_seen", uint64_t{0});
  d.last_heartbeat = j.value("last_heartbeat", uint64_t{0});
  return d;
}

inline json consensus_to_json(const Consensus& c) {
  json descriptors = json::array();
  for (const auto& d : c.descriptors) descriptors.push_back(descriptor_to_json(d));
  return json{{"issued_at", c.issued_at}, {"descriptors", descriptors}};
}

inline Consensus consensus_from_json(const json& j) {
  Consensus c;
  c.issued_at = j.at("issued_at").get<uint64_t>();
  for (const auto& dj : j.at("descriptors")) c.descriptors.push_back(descriptor_from_json(dj));
  return c;
}

// The directory authority. Publishes and fetches must be externally
// serialized (the live server wraps calls in a mutex; the harness is
// single-threaded).
class DirectoryService {
 public:
  explicit DirectoryService(const Clock& clock) : clock_(clock) {}

  void publish(const RelayDescriptor& descriptor) {
    if (fingerprint(descriptor.identity_pubkey) != descriptor.relay_id) {
      throw Error(Errc::fingerprint_mismatch,
                  "relay_id does not match identity public key fingerprint");
    }
    uint64_t now = clock_.now();
    RelayDescriptor stored = descriptor;
    stored.last_heartbeat = now;
    auto it = table_.find(descriptor.relay_id);
    stored.first_seen = it == table_.end() ? now : it->second.first_seen;
    table_[descriptor.relay_id] = std::move(stored);
  }

  void heartbeat(const std::string& relay_id) {
    auto it = table_.find(relay_id);
    if (it == table_.end()) throw Error(Errc::not_found, "unknown relay_id " + relay_id);
    it->second.last_heartbeat = clock_.now();
  }

  Consensus fetch_consensus() const {
    Consensus c;
    c.issued_at = clock_.now();
    for (const auto& [id, d] : table_) {
      if (c.issued_at - d.last_heartbeat <= kLivenessWindowSecs) c.descriptors.push_back(d);
    }
    return c;
  }

  size_t table_size() const { return table_.size(); }

  // Length-prefixed JSON request dispatcher shared by the live TCP server
  // and tests.
  json handle_request(const json& request) {
    try {
      std::string verb = request.at("verb").get<std::string>();
      if (verb == "publish") {
        publish(descriptor_from_json(request.at("descriptor")));
        return json{{"status", "ok"}};
      }
      if (verb == "heartbeat") {
        heartbeat(request.at("relay_id").get<std::string>());
        return json{{"status", "ok"}};
      }
      if (verb == "fetch") {
        return json{{"status", "ok"}, {"consensus", consensus_to_json(fetch_consensus())}};
      }
      return json{{"status", "error"}, {"error", "protocol"}, {"message", "unknown verb " + verb}};
    } catch (const Error& e) {
      return json{{"status", "error"}, {"error", errc_name(e.code())}, {"message", e.what()}};
    } catch (const json::exception& e) {
      return json{{"status", "error"}, {"error", "protocol"}, {"message", e.what()}};
    }
  }

 private:
  const Clock& clock_;
  std::map<std::string, RelayDescriptor> table_;
};

namespace detail {

inline const RelayDescriptor& pick_weighted(const std::vector<const RelayDescriptor*>& pool,
                                            PathSelection mode, Rng& rng) {
  if (mode == PathSelection::kUniform) {
    return *pool[rng.uniform(pool.size())];
  }
  uint64_t total = 0;
  for (const auto* d : pool) total += std::max<uint64_t>(d->bandwidth, 1);
  uint64_t ticket = rng.uniform(total);
  for (const auto* d : pool) {
    uint64_t w = std::max<uint64_t>(d->bandwidth, 1);
    if (ticket < w) return *d;
    ticket -= w;
  }
  return *pool.back();
}

}  // namespace detail

struct Path {
  RelayDescriptor guard;
  RelayDescriptor middle;
  RelayDescriptor exit;
};

// Picks exit first among port-eligible relays, then guard and middle among
// the rest; with uniform mode every eligible ordered (guard, middle, exit)
// assignment is equally likely.
inline Path select_path(const Consensus& consensus, const PathConstraints& constraints,
                        Rng& rng, PathSelection mode = PathSelection::kUniform) {
  if (consensus.descriptors.size() < 3) {
    throw Error(Errc::insufficient_relays,
                "need at least 3 live relays, have " +
                    std::to_string(consensus.descriptors.size()));
  }
  std::vector<const RelayDescriptor*> exits;
  for (const auto& d : consensus.descriptors) {
    if (d.egress_policy.allows(constraints.target_port)) exits.push_back(&d);
  }
  if (exits.empty()) {
    throw Error(Errc::no_eligible_exit,
                "no relay allows exit to port " + std::to_string(constraints.target_port));
  }

  Path path;
  path.exit = detail::pick_weighted(exits, mode, rng);

  std::vector<const RelayDescriptor*> rest;
  for (const auto& d : consensus.descriptors) {
    if (d.relay_id != path.exit.relay_id) rest.push_back(&d);
  }
  path.guard = detail::pick_weighted(rest, mode, rng);

  std::vector<const RelayDescriptor*> rest2;
  for (const auto* d : rest) {
    if (d->relay_id != path.guard.relay_id) rest2.push_back(d);
  }
  path.middle = detail::pick_weighted(rest2, mode, rng);
  return path;
}

// 4-byte big-endian length prefix framing for the JSON protocol.
inline Bytes frame_json(const json& j) {
  std::string body = j.dump();
  Bytes out(4 + body.size());
  put_u32(out.data(), static_cast<uint32_t>(body.size()));
  std::copy(body.begin(), body.end(), out.begin() + 4);
  return out;
}

}  // namespace tomen
