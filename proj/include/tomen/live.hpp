#pragma once

// Live-mode runtime: the same protocol cores as the harness, driven by real
// loopback TCP. Each service owns an accept loop plus per-connection reader
// threads; core state machines are serialized behind one mutex per service.

#include <condition_variable>
#include <thread>

#include "tomen/client.hpp"
#include "tomen/gossip.hpp"
#include "tomen/net.hpp"
#include "tomen/relay.hpp"

namespace tomen::live {

using net::TcpListener;
using net::TcpStream;

// -- directory ----------------------------------------------------------------

inline json dir_request(const std::string& dir_address, const json& request) {
  auto stream = TcpStream::connect(dir_address);
  if (!stream) throw Error(Errc::network, "directory unreachable at " + dir_address);
  if (!net::write_json_frame(*stream, request)) {
    throw Error(Errc::network, "directory write failed");
  }
  auto response = net::read_json_frame(*stream);
  if (!response) throw Error(Errc::network, "directory read failed");
  return *response;
}

inline Consensus fetch_consensus_tcp(const std::string& dir_address) {
  auto response = dir_request(dir_address, {{"verb", "fetch"}});
  if (response.value("status", "") != "ok") {
    throw Error(Errc::protocol, "directory fetch failed: " + response.dump());
  }
  return consensus_from_json(response.at("consensus"));
}

inline void publish_tcp(const std::string& dir_address, const RelayDescriptor& descriptor) {
  auto response =
      dir_request(dir_address, {{"verb", "publish"}, {"descriptor", descriptor_to_json(descriptor)}});
  if (response.value("status", "") != "ok") {
    throw Error(Errc::protocol, "publish rejected: " + response.dump());
  }
}

inline void heartbeat_tcp(const std::string& dir_address, const std::string& relay_id) {
  auto response = dir_request(dir_address, {{"verb", "heartbeat"}, {"relay_id", relay_id}});
  if (response.value("status", "") != "ok") {
    throw Error(Errc::protocol, "heartbeat rejected: " + response.dump());
  }
}

class LiveDirectory {
 public:
  explicit LiveDirectory(const std::string& listen_address, const Clock& clock)
      : service_(clock), listener_(TcpListener::bind(listen_address)) {}

  ~LiveDirectory() { stop(); }

  std::string address() const { return listener_.local_address(); }
  DirectoryService& service() { return service_; }
  std::mutex& mutex() { return mutex_; }

  void start() {
    accept_thread_ = std::thread([this] {
      while (running_) {
        auto conn = listener_.accept();
        if (!conn) continue;
        workers_.emplace_back([this, stream = std::move(*conn)]() mutable {
          while (auto request = net::read_json_frame(stream)) {
            json response;
            {
              std::lock_guard lock(mutex_);
              response = service_.handle_request(*request);
            }
            if (!net::write_json_frame(stream, response)) break;
          }
        });
      }
    });
  }

  void stop() {
    if (!running_.exchange(false)) return;
    listener_.close();
    if (accept_thread_.joinable()) accept_thread_.join();
    for (auto& t : workers_) {
      if (t.joinable()) t.join();
    }
  }

 private:
  DirectoryService service_;
  std::mutex mutex_;
  TcpListener listener_;
  std::atomic<bool> running_ = true;
  std::thread accept_thread_;
  std::vector<std::thread> workers_;
};

// -- relay ---------------------------------------------------------------------

class LiveRelay : private RelayEnv {
 public:
  LiveRelay(const RelayConfig& config, Rng rng)
      : config_(config),
        identity_(gen_identity_keypair(*init_identity_rng(config))),
        listener_(TcpListener::bind(config.address)),
        core_(identity_, config.egress_policy, std::move(rng), *this) {
    if (config_.heartbeat_interval >= kLivenessWindowSecs) {
      throw Error(Errc::config, "heartbeat interval must be below the liveness window");
    }
  }

  ~LiveRelay() { stop(); }

  std::string address() const { return listener_.local_address(); }
  std::string relay_id() const { return fingerprint(identity_.public_key()); }

  RelayDescriptor descriptor() const {
    return build_descriptor(identity_, address(), config_.egress_policy, config_.bandwidth);
  }

  // Publishes to the directory (throws Errc::network when unreachable), then
  // serves links.
  void start() {
    publish_tcp(config_.directory_address, descriptor());
    accept_thread_ = std::thread([this] { accept_loop(); });
    heartbeat_thread_ = std::thread([this] { heartbeat_loop(); });
  }

  void stop() {
    if (!running_.exchange(false)) return;
    listener_.close();
    heartbeat_cv_.notify_all();
    {
      std::lock_guard lock(mutex_);
      for (auto& [id, stream] : sockets_) stream->shutdown_both();
    }
    if (accept_thread_.joinable()) accept_thread_.join();
    if (heartbeat_thread_.joinable()) heartbeat_thread_.join();
    std::vector<std::thread> readers;
    {
      std::lock_guard lock(threads_mutex_);
      readers.swap(readers_);
    }
    for (auto& t : readers) {
      if (t.joinable()) t.join();
    }
  }

  // External source addresses this relay has used for exit connections;
  // ground truth for the live echo demo's verdict.
  std::vector<std::string> external_source_addresses() {
    std::lock_guard lock(mutex_);
    return external_sources_;
  }

 private:
  static std::unique_ptr<Rng> init_identity_rng(const RelayConfig& config) {
    if (config.identity_seed != 0) return std::make_unique<Rng>(config.identity_seed);
    return std::make_unique<Rng>(Rng::from_os_entropy());
  }

  void accept_loop() {
    while (running_) {
      auto conn = listener_.accept();
      if (!conn) continue;
      std::shared_ptr<TcpStream> shared;
      uint64_t link = register_socket(std::move(*conn), &shared);
      spawn_cell_reader(link, shared);
    }
  }

  void heartbeat_loop() {
    std::unique_lock lock(heartbeat_mutex_);
    while (running_) {
      heartbeat_cv_.wait_for(lock, std::chrono::seconds(config_.heartbeat_interval),
                             [this] { return !running_; });
      if (!running_) break;
      try {
        heartbeat_tcp(config_.directory_address, relay_id());
      } catch (const Error&) {
        // Directory hiccups are survivable; the next beat retries.
      }
    }
  }

  uint64_t register_socket(TcpStream stream, std::shared_ptr<TcpStream>* out = nullptr) {
    std::lock_guard lock(mutex_);
    uint64_t id = next_id_++;
    auto shared = std::make_shared<TcpStream>(std::move(stream));
    sockets_.emplace(id, shared);
    if (out) *out = shared;
    return id;
  }

  void add_reader(std::thread t) {
    std::lock_guard lock(threads_mutex_);
    readers_.push_back(std::move(t));
  }

  void spawn_cell_reader(uint64_t link, std::shared_ptr<TcpStream> stream) {
    add_reader(std::thread([this, link, stream] {
      CellBuf buf;
      while (running_ && stream->read_exact(buf.data(), buf.size())) {
        Cell cell;
        try {
          cell = decode_cell(buf);
        } catch (const Error&) {
          break;  // garbage on a cell link: drop the link
        }
        std::lock_guard lock(mutex_);
        core_.on_cell(link, cell);
      }
      std::lock_guard lock(mutex_);
      core_.on_link_closed(link);
      sockets_.erase(link);
    }));
  }

  void spawn_external_reader(uint64_t conn, std::shared_ptr<TcpStream> stream) {
    add_reader(std::thread([this, conn, stream] {
      uint8_t buf[4096];
      for (;;) {
        ssize_t got = stream->read_some(buf, sizeof(buf));
        if (got <= 0 || !running_) break;
        std::lock_guard lock(mutex_);
        core_.on_external_data(conn, ByteView(buf, static_cast<size_t>(got)));
      }
      std::lock_guard lock(mutex_);
      core_.on_external_closed(conn);
      sockets_.erase(conn);
    }));
  }

  // RelayEnv (called with mutex_ held by the reader that drove the core)
  void send_cell(LinkId link, const Cell& cell) override {
    auto it = sockets_.find(link);
    if (it == sockets_.end()) return;
    it->second->write_all(encode_cell(cell));
  }

  // RelayEnv open_* are invoked while a reader already holds mutex_.
  std::optional<LinkId> open_link(const std::string& address) override {
    auto stream = TcpStream::connect(address);
    if (!stream) return std::nullopt;
    uint64_t id = next_id_++;
    auto shared = std::make_shared<TcpStream>(std::move(*stream));
    sockets_.emplace(id, shared);
    spawn_cell_reader(id, shared);
    return id;
  }

  std::optional<ConnId> open_external(const std::string& address) override {
    auto stream = TcpStream::connect(address);
    if (!stream) return std::nullopt;
    external_sources_.push_back(stream->local_address());
    uint64_t id = next_id_++;
    auto shared = std::make_shared<TcpStream>(std::move(*stream));
    sockets_.emplace(id, shared);
    spawn_external_reader(id, shared);
    return id;
  }

  void send_external(ConnId conn, ByteView data) override {
    auto it = sockets_.find(conn);
    if (it != sockets_.end()) it->second->write_all(data);
  }

  void close_external(ConnId conn) override {
    auto it = sockets_.find(conn);
    if (it != sockets_.end()) it->second->shutdown_both();
  }

  RelayConfig config_;
  IdentityKeyPair identity_;
  TcpListener listener_;
  RelayCore core_;

  std::mutex mutex_;
  std::atomic<bool> running_ = true;
  uint64_t next_id_ = 1;
  std::map<uint64_t, std::shared_ptr<TcpStream>> sockets_;
  std::vector<std::string> external_sources_;
  std::mutex threads_mutex_;
  std::vector<std::thread> readers_;
  std::thread accept_thread_;
  std::thread heartbeat_thread_;
  std::mutex heartbeat_mutex_;
  std::condition_variable heartbeat_cv_;
};

// -- gossip ---------------------------------------------------------------------

class LiveGossip : private GossipEnv {
 public:
  LiveGossip(std::string node_id, const std::string& submit_address,
             const std::string& peer_address, std::vector<std::string> peers)
      : submit_listener_(TcpListener::bind(submit_address)),
        peer_listener_(TcpListener::bind(peer_address)),
        core_(std::move(node_id), std::move(peers), *this) {}

  ~LiveGossip() { stop(); }

  std::string submit_address() const { return submit_listener_.local_address(); }
  std::string peer_address() const { return peer_listener_.local_address(); }
  GossipCore& core() { return core_; }
  std::mutex& mutex() { return mutex_; }

  void start() {
    accept_threads_.emplace_back([this] { accept_loop(submit_listener_, true); });
    accept_threads_.emplace_back([this] { accept_loop(peer_listener_, false); });
  }

  void stop() {
    if (!running_.exchange(false)) return;
    submit_listener_.close();
    peer_listener_.close();
    for (auto& t : accept_threads_) {
      if (t.joinable()) t.join();
    }
    std::vector<std::thread> workers;
    {
      std::lock_guard lock(workers_mutex_);
      workers.swap(workers_);
    }
    for (auto& t : workers) {
      if (t.joinable()) t.join();
    }
  }

 private:
  void accept_loop(TcpListener& listener, bool is_submit) {
    while (running_) {
      auto conn = listener.accept();
      if (!conn) continue;
      std::thread worker([this, is_submit, stream = std::move(*conn)]() mutable {
        serve(stream, is_submit);
      });
      std::lock_guard lock(workers_mutex_);
      workers_.push_back(std::move(worker));
    }
  }

  void serve(TcpStream& stream, bool is_submit) {
    Bytes buf;
    uint8_t chunk[4096];
    uint64_t conn_id;
    {
      std::lock_guard lock(mutex_);
      conn_id = next_conn_++;
      reply_sockets_[conn_id] = &stream;
    }
    for (;;) {
      ssize_t got = stream.read_some(chunk, sizeof(chunk));
      if (got <= 0 || !running_) break;
      buf.insert(buf.end(), chunk, chunk + got);
      auto need = tx_frame_size(buf);
      while (need && buf.size() >= *need) {
        Bytes frame(buf.begin(), buf.begin() + *need);
        buf.erase(buf.begin(), buf.begin() + *need);
        std::lock_guard lock(mutex_);
        if (is_submit) {
          core_.on_submit(conn_id, frame);
        } else {
          // Loopback peers cannot be identified from the connection (all
          // ephemeral ports); receiver-side dedup handles the echo.
          core_.on_peer_gossip(std::nullopt, frame);
        }
        need = tx_frame_size(buf);
      }
    }
    std::lock_guard lock(mutex_);
    reply_sockets_.erase(conn_id);
  }

  void reply(uint64_t conn, ByteView data) override {
    auto it = reply_sockets_.find(conn);
    if (it != reply_sockets_.end()) it->second->write_all(data);
  }

  void gossip_send(const std::string& peer_address, ByteView data) override {
    auto stream = TcpStream::connect(peer_address);
    if (!stream) return;
    stream->write_all(data);
  }

  TcpListener submit_listener_;
  TcpListener peer_listener_;
  GossipCore core_;
  std::mutex mutex_;
  std::atomic<bool> running_ = true;
  uint64_t next_conn_ = 1;
  std::map<uint64_t, TcpStream*> reply_sockets_;
  std::vector<std::thread> accept_threads_;
  std::mutex workers_mutex_;
  std::vector<std::thread> workers_;
};

// -- echo ---------------------------------------------------------------------

// Replies to every connection with the peer address it observed, then closes.
class LiveEchoAddr {
 public:
  explicit LiveEchoAddr(const std::string& listen_address)
      : listener_(TcpListener::bind(listen_address)) {}

  ~LiveEchoAddr() { stop(); }

  std::string address() const { return listener_.local_address(); }

  void start() {
    thread_ = std::thread([this] {
      while (running_) {
        auto conn = listener_.accept();
        if (!conn) continue;
        conn->write_all(to_bytes(conn->peer_address() + "\n"));
      }
    });
  }

  void stop() {
    if (!running_.exchange(false)) return;
    listener_.close();
    if (thread_.joinable()) thread_.join();
  }

 private:
  TcpListener listener_;
  std::atomic<bool> running_ = true;
  std::thread thread_;
};

// -- client --------------------------------------------------------------------

// Blocking facade around the event-driven onion engine: reader threads feed
// inbound cells under a lock, API calls wait on a condition variable.
class LiveClient : private ClientEnv {
 public:
  LiveClient(std::string dir_address, Rng rng, const Clock& clock)
      : dir_address_(std::move(dir_address)),
        clock_(clock),
        onion_(*this, std::move(rng),
               [this] { return fetch_consensus_tcp(dir_address_); }) {}

  ~LiveClient() { stop(); }

  OnionClient& onion() { return onion_; }
  std::mutex& mutex() { return mutex_; }

  BuildResult build_circuit(const PathConstraints& constraints, int timeout_ms = 8000) {
    std::optional<BuildResult> result;
    {
      std::lock_guard lock(mutex_);
      onion_.build_circuit(constraints, [&](const BuildResult& r) {
        result = r;
        cv_.notify_all();
      });
    }
    wait_for(timeout_ms, [&] { return result.has_value(); });
    if (!result) return BuildResult{false, 0, -1, "build timed out"};
    return *result;
  }

  StreamResult open_stream(uint64_t handle, const std::string& target, int timeout_ms = 5000) {
    std::optional<StreamResult> result;
    {
      std::lock_guard lock(mutex_);
      onion_.open_stream(handle, target, [&](const StreamResult& r) {
        result = r;
        cv_.notify_all();
      });
    }
    wait_for(timeout_ms, [&] { return result.has_value(); });
    if (!result) return StreamResult{false, 0, "stream open timed out"};
    return *result;
  }

  void send(uint64_t handle, uint16_t stream, ByteView data) {
    std::lock_guard lock(mutex_);
    onion_.send(handle, stream, data);
  }

  // Blocks until a full line arrives on the stream (or the stream ends).
  std::optional<std::string> recv_line(uint64_t handle, uint16_t stream, int timeout_ms = 5000) {
    Bytes buf;
    bool ended = false;
    {
      std::lock_guard lock(mutex_);
      onion_.set_data_callback([&, stream](uint16_t sid, ByteView) {
        if (sid == stream) cv_.notify_all();
      });
      onion_.set_end_callback([&, stream](uint16_t sid, const std::string&) {
        if (sid == stream) {
          ended = true;
          cv_.notify_all();
        }
      });
    }
    auto has_line = [&] {
      auto chunk = onion_.recv(handle, stream, 65536);
      buf.insert(buf.end(), chunk.begin(), chunk.end());
      return std::find(buf.begin(), buf.end(), '\n') != buf.end() || ended;
    };
    wait_for(timeout_ms, has_line);
    std::lock_guard lock(mutex_);
    onion_.set_data_callback(nullptr);
    onion_.set_end_callback(nullptr);
    auto nl = std::find(buf.begin(), buf.end(), '\n');
    if (nl == buf.end()) return std::nullopt;
    return std::string(buf.begin(), nl);
  }

  void close_stream(uint64_t handle, uint16_t stream) {
    std::lock_guard lock(mutex_);
    onion_.close_stream(handle, stream);
  }

  void destroy_circuit(uint64_t handle) {
    std::lock_guard lock(mutex_);
    onion_.destroy_circuit(handle);
  }

  OnionClient::CircuitInfo circuit_info(uint64_t handle) {
    std::lock_guard lock(mutex_);
    return onion_.circuit_info(handle);
  }

  void stop() {
    if (!running_.exchange(false)) return;
    {
      std::lock_guard lock(mutex_);
      for (auto& [id, stream] : sockets_) stream->shutdown_both();
    }
    for (auto& t : readers_) {
      if (t.joinable()) t.join();
    }
  }

 private:
  template <typename Pred>
  bool wait_for(int timeout_ms, Pred done) {
    std::unique_lock lock(mutex_);
    return cv_.wait_for(lock, std::chrono::milliseconds(timeout_ms), [&] { return done(); });
  }

  std::optional<LinkId> open_link(const std::string& address) override {
    auto stream = TcpStream::connect(address);
    if (!stream) return std::nullopt;
    uint64_t id = next_id_++;
    auto sock = std::make_shared<TcpStream>(std::move(*stream));
    sockets_.emplace(id, sock);
    readers_.emplace_back([this, id, sock] {
      CellBuf buf;
      while (running_ && sock->read_exact(buf.data(), buf.size())) {
        Cell cell;
        try {
          cell = decode_cell(buf);
        } catch (const Error&) {
          break;
        }
        std::lock_guard lock(mutex_);
        onion_.on_cell(id, cell);
        cv_.notify_all();
      }
      std::lock_guard lock(mutex_);
      onion_.on_link_closed(id);
      cv_.notify_all();
    });
    return id;
  }

  void send_cell(LinkId link, const Cell& cell) override {
    auto it = sockets_.find(link);
    if (it != sockets_.end()) it->second->write_all(encode_cell(cell));
  }

  void close_link(LinkId link) override {
    auto it = sockets_.find(link);
    if (it != sockets_.end()) it->second->shutdown_both();
  }

  uint64_t now() const override { return clock_.now(); }

  std::string dir_address_;
  const Clock& clock_;
  OnionClient onion_;

  std::mutex mutex_;
  std::condition_variable cv_;
  std::atomic<bool> running_ = true;
  uint64_t next_id_ = 1;
  std::map<uint64_t, std::shared_ptr<TcpStream>> sockets_;
  std::vector<std::thread> readers_;
};

}  // namespace tomen::live
