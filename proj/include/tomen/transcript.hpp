#pragma once

// Vantage records and transcripts. A transcript is the complete, replayable
// observation log of one harness run: one JSON object per line so standard
// text tools can slice it.
//
// Beyond the spec'd observation fields, records carry the identifiers the
// rule-based linker joins on: `conn` (shared by both endpoints of a
// connection and its tap), `circuit_id` (link-visible cell header), and
// `flow` (observer-local tag tying records the observer itself can relate,
// e.g. both links of a relayed circuit).

#include <optional>
#include <sstream>

#include "tomen/gossip.hpp"

namespace tomen {

struct VantageRecord {
  uint64_t id = 0;    // total-order tiebreak
  uint64_t time = 0;  // scheduler tick of the delivery
  std::string observer;
  std::string src_addr;
  std::string dst_addr;
  uint64_t n_bytes = 0;
  std::string conn;
  uint32_t circuit_id = 0;  // 0 = not a cell
  std::string flow;
  std::string kind;  // "cell" | "stream"
  std::optional<std::string> visible_plaintext_digest;

  bool operator==(const VantageRecord&) const = default;
};

struct EntityInfo {
  std::string id;
  std::string kind;  // relay | gossip | client | echo | service
  std::string address;
  std::string relay_id;        // relays only
  std::string extra_address;   // gossip peer port
};

struct MempoolSnapshot {
  std::string node;
  std::vector<Transaction> txs;  // sorted by txid
};

struct ClientLogEntry {
  uint64_t time = 0;
  std::string client;
  json event;
};

struct Transcript {
  json scenario;
  std::vector<EntityInfo> roster;
  std::vector<VantageRecord> records;
  std::vector<MempoolSnapshot> mempools;
  std::vector<ClientLogEntry> client_logs;
  json metrics;
};

inline json record_to_json(const VantageRecord& r) {
  json j{{"type", "record"},   {"id", r.id},
         {"time", r.time},     {"observer", r.observer},
         {"src", r.src_addr},  {"dst", r.dst_addr},
         {"n_bytes", r.n_bytes}, {"conn", r.conn},
         {"circuit_id", r.circuit_id}, {"flow", r.flow},
         {"kind", r.kind}};
  j["plaintext_digest"] = r.visible_plaintext_digest ? json(*r.visible_plaintext_digest) : json();
  return j;
}

inline VantageRecord record_from_json(const json& j) {
  VantageRecord r;
  r.id = j.at("id").get<uint64_t>();
  r.time = j.at("time").get<uint64_t>();
  r.observer = j.at("observer").get<std::string>();
  r.src_addr = j.at("src").get<std::string>();
  r.dst_addr = j.at("dst").get<std::string>();
  r.n_bytes = j.at("n_bytes").get<uint64_t>();
  r.conn = j.at("conn").get<std::string>();
  r.circuit_id = j.at("circuit_id").get<uint32_t>();
  r.flow = j.at("flow").get<std::string>();
  r.kind = j.at("kind").get<std::string>();
  if (!j.at("plaintext_digest").is_null()) {
    r.visible_plaintext_digest = j.at("plaintext_digest").get<std::string>();
  }
  return r;
}

inline std::string transcript_to_ndjson(const Transcript& t) {
  std::ostringstream out;
  json scenario_line = t.scenario;
  scenario_line["type"] = "scenario";
  out << scenario_line.dump() << "\n";
  for (const auto& e : t.roster) {
    out << json{{"type", "entity"}, {"id", e.id},         {"kind", e.kind},
                {"address", e.address}, {"relay_id", e.relay_id}, {"extra_address", e.extra_address}}
               .dump()
        << "\n";
  }
  for (const auto& r : t.records) out << record_to_json(r).dump() << "\n";
  for (const auto& m : t.mempools) {
    json txs = json::array();
    for (const auto& tx : m.txs) {
      txs.push_back({{"txid", hex_encode(tx.txid)}, {"payload", hex_encode(tx.payload)}});
    }
    out << json{{"type", "mempool"}, {"node", m.node}, {"txs", txs}}.dump() << "\n";
  }
  for (const auto& log : t.client_logs) {
    out << json{{"type", "client_log"}, {"time", log.time}, {"client", log.client}, {"event", log.event}}
               .dump()
        << "\n";
  }
  json metrics_line = t.metrics;
  metrics_line["type"] = "metrics";
  out << metrics_line.dump() << "\n";
  return out.str();
}

inline Transcript transcript_from_ndjson(const std::string& text) {
  Transcript t;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    json j = json::parse(line);
    std::string type = j.at("type").get<std::string>();
    if (type == "scenario") {
      j.erase("type");
      t.scenario = j;
    } else if (type == "entity") {
      EntityInfo e;
      e.id = j.at("id").get<std::string>();
      e.kind = j.at("kind").get<std::string>();
      e.address = j.at("address").get<std::string>();
      e.relay_id = j.value("relay_id", "");
      e.extra_address = j.value("extra_address", "");
      t.roster.push_back(std::move(e));
    } else if (type == "record") {
      t.records.push_back(record_from_json(j));
    } else if (type == "mempool") {
      MempoolSnapshot m;
      m.node = j.at("node").get<std::string>();
      for (const auto& txj : j.at("txs")) {
        Transaction tx;
        auto txid = hex_decode(txj.at("txid").get<std::string>());
        if (txid.size() != kTxidSize) throw Error(Errc::protocol, "bad txid length");
        std::copy(txid.begin(), txid.end(), tx.txid.begin());
        tx.payload = hex_decode(txj.at("payload").get<std::string>());
        m.txs.push_back(std::move(tx));
      }
      t.mempools.push_back(std::move(m));
    } else if (type == "client_log") {
      ClientLogEntry e;
      e.time = j.at("time").get<uint64_t>();
      e.client = j.at("client").get<std::string>();
      e.event = j.at("event");
      t.client_logs.push_back(std::move(e));
    } else if (type == "metrics") {
      j.erase("type");
      t.metrics = j;
    } else {
      throw Error(Errc::protocol, "unknown transcript line type " + type);
    }
  }
  return t;
}

// Structural invariants. Returns every violation, most fundamental first;
// an empty result means the transcript is internally consistent.
inline std::vector<std::string> validate_transcript(const Transcript& t) {
  std::vector<std::string> violations;

  for (size_t i = 1; i < t.records.size(); ++i) {
    const auto& prev = t.records[i - 1];
    const auto& cur = t.records[i];
    if (cur.time < prev.time || (cur.time == prev.time && cur.id <= prev.id)) {
      violations.push_back("records out of order at id " + std::to_string(cur.id));
      break;
    }
  }

  for (const auto& r : t.records) {
    if (r.visible_plaintext_digest && r.kind != "stream") {
      violations.push_back("plaintext at non-exit observer (record " + std::to_string(r.id) +
                           " at " + r.observer + ")");
      break;
    }
  }

  for (const auto& m : t.mempools) {
    for (const auto& tx : m.txs) {
      if (tx.txid != crypto::sha256(tx.payload)) {
        violations.push_back("mempool txid mismatch at node " + m.node);
        break;
      }
    }
  }
  return violations;
}

// Roll-up counters: total cells, per-relay observed bytes, per-transaction
// latency in scheduler ticks (submit to ack, from the client logs).
inline json compute_metrics(const Transcript& t) {
  uint64_t cells = 0;
  uint64_t stream_events = 0;
  std::map<std::string, uint64_t> per_relay_bytes;
  for (const auto& r : t.records) {
    if (r.kind == "cell") cells++;
    if (r.kind == "stream") stream_events++;
    if (r.observer.rfind("relay-", 0) == 0) per_relay_bytes[r.observer] += r.n_bytes;
  }
  // `cells` counts every observation of a cell delivery (tap + endpoints);
  // each scheduler tick delivers one message, so distinct ticks with cell
  // records = cells actually carried.
  std::set<uint64_t> cell_ticks;
  for (const auto& r : t.records) {
    if (r.kind == "cell") cell_ticks.insert(r.time);
  }

  std::map<std::string, uint64_t> submit_tick;
  std::map<std::string, uint64_t> latency;
  for (const auto& log : t.client_logs) {
    if (!log.event.contains("event")) continue;
    std::string ev = log.event.at("event").get<std::string>();
    if (ev == "tx_submitted") submit_tick[log.event.at("txid").get<std::string>()] = log.time;
    if (ev == "tx_acked") {
      std::string txid = log.event.at("txid").get<std::string>();
      auto it = submit_tick.find(txid);
      if (it != submit_tick.end()) latency[txid] = log.time - it->second;
    }
  }

  json per_relay = json::object();
  for (const auto& [k, v] : per_relay_bytes) per_relay[k] = v;
  json lat = json::object();
  for (const auto& [k, v] : latency) lat[k] = v;
  return json{{"cell_observations", cells},
              {"cells_delivered", cell_ticks.size()},
              {"stream_observations", stream_events},
              {"per_relay_bytes", per_relay},
              {"tx_latency_ticks", lat}};
}

}  // namespace tomen
