#pragma once

// Rule-based adversary: joins a coalition's vantage records on exactly the
// identifiers those observers share - their own flow tags, common connection
// ids, circuit-id values visible in cell headers, and plaintext digests -
// and reports every (client address, txid) pair connected by such joins.
// Deliberately categorical: no timing or volume correlation.

#include <numeric>

#include "tomen/scenario.hpp"

namespace tomen {

class DisjointSet {
 public:
  explicit DisjointSet(size_t n) : parent_(n) {
    std::iota(parent_.begin(), parent_.end(), 0);
  }

  size_t find(size_t x) {
    while (parent_[x] != x) {
      parent_[x] = parent_[parent_[x]];
      x = parent_[x];
    }
    return x;
  }

  void unite(size_t a, size_t b) { parent_[find(a)] = find(b); }

 private:
  std::vector<size_t> parent_;
};

using LinkedPair = std::pair<std::string, std::string>;  // (client address, txid hex)

inline std::set<LinkedPair> adversary_link(const Transcript& t,
                                           const std::set<std::string>& coalition) {
  std::vector<const VantageRecord*> records;
  for (const auto& r : t.records) {
    if (coalition.count(r.observer)) records.push_back(&r);
  }

  // Digests of the submit frames identify transactions.
  std::map<std::string, std::string> digest_to_txid;
  for (const auto& m : t.mempools) {
    for (const auto& tx : m.txs) {
      digest_to_txid[hex_encode(crypto::sha256(serialize_tx(tx)))] = hex_encode(tx.txid);
    }
  }

  std::set<std::string> client_addrs;
  for (const auto& e : t.roster) {
    if (e.kind == "client") client_addrs.insert(e.address);
  }

  DisjointSet dsu(records.size());
  std::map<std::string, size_t> first_with_key;
  auto join = [&](size_t idx, const std::string& key) {
    auto [it, inserted] = first_with_key.try_emplace(key, idx);
    if (!inserted) dsu.unite(idx, it->second);
  };
  for (size_t i = 0; i < records.size(); ++i) {
    const auto& r = *records[i];
    join(i, "flow:" + r.observer + "/" + r.flow);
    join(i, "conn:" + r.conn);
    if (r.circuit_id != 0) join(i, "cid:" + std::to_string(r.circuit_id));
    if (r.visible_plaintext_digest) join(i, "dig:" + *r.visible_plaintext_digest);
  }

  std::map<size_t, std::pair<std::set<std::string>, std::set<std::string>>> components;
  for (size_t i = 0; i < records.size(); ++i) {
    const auto& r = *records[i];
    auto& [addrs, txids] = components[dsu.find(i)];
    if (client_addrs.count(r.src_addr)) addrs.insert(r.src_addr);
    if (client_addrs.count(r.dst_addr)) addrs.insert(r.dst_addr);
    if (r.visible_plaintext_digest) {
      auto it = digest_to_txid.find(*r.visible_plaintext_digest);
      if (it != digest_to_txid.end()) txids.insert(it->second);
    }
  }

  std::set<LinkedPair> linked;
  for (const auto& [root, evidence] : components) {
    for (const auto& addr : evidence.first) {
      for (const auto& txid : evidence.second) linked.insert({addr, txid});
    }
  }
  return linked;
}

// Every observer id that appears in the transcript.
inline std::set<std::string> all_observers(const Transcript& t) {
  std::set<std::string> out;
  for (const auto& r : t.records) out.insert(r.observer);
  return out;
}

// Resolves a comma-separated coalition spec into observer ids. Role names
// (guard/middle/exit) resolve against the circuits the clients actually
// built; "gossip" and "relays" and "taps" select whole classes; anything
// else must be a literal observer id from the transcript.
inline std::set<std::string> resolve_coalition(const Transcript& t, const std::string& spec) {
  std::map<std::string, std::string> fingerprint_to_entity;
  for (const auto& e : t.roster) {
    if (e.kind == "relay") fingerprint_to_entity[e.relay_id] = e.id;
  }
  std::set<std::string> guards, middles, exits;
  for (const auto& log : t.client_logs) {
    if (log.event.value("event", "") != "circuit_built") continue;
    auto resolve = [&](const std::string& role) -> std::optional<std::string> {
      auto it = fingerprint_to_entity.find(log.event.value(role, ""));
      if (it == fingerprint_to_entity.end()) return std::nullopt;
      return it->second;
    };
    if (auto g = resolve("guard")) guards.insert(*g);
    if (auto m = resolve("middle")) middles.insert(*m);
    if (auto x = resolve("exit")) exits.insert(*x);
  }

  std::set<std::string> observers = all_observers(t);
  std::set<std::string> out;
  std::istringstream in(spec);
  std::string item;
  while (std::getline(in, item, ',')) {
    if (item.empty()) continue;
    if (item == "guard") {
      out.insert(guards.begin(), guards.end());
    } else if (item == "middle") {
      out.insert(middles.begin(), middles.end());
    } else if (item == "exit") {
      out.insert(exits.begin(), exits.end());
    } else if (item == "gossip" || item == "relays" || item == "taps") {
      std::string prefix = item == "gossip" ? "gossip-" : item == "relays" ? "relay-" : "tap:";
      for (const auto& o : observers) {
        if (o.rfind(prefix, 0) == 0) out.insert(o);
      }
    } else if (observers.count(item)) {
      out.insert(item);
    } else {
      throw Error(Errc::config, "unknown coalition member '" + item + "'");
    }
  }
  return out;
}

}  // namespace tomen
