#pragma once

// Minimal POSIX TCP wrappers for the live (loopback) runtime.

#include <arpa/inet.h>
#include <fcntl.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <optional>

#include <nlohmann/json.hpp>

#include "tomen/common.hpp"

namespace tomen::net {

struct SplitAddress {
  std::string host;
  uint16_t port;
};

inline SplitAddress split_address(const std::string& addr) {
  auto colon = addr.rfind(':');
  if (colon == std::string::npos || colon + 1 >= addr.size()) {
    throw Error(Errc::config, "address must be host:port, got '" + addr + "'");
  }
  unsigned long port = std::stoul(addr.substr(colon + 1));
  if (port > 65535) throw Error(Errc::config, "port out of range in '" + addr + "'");
  return {addr.substr(0, colon), static_cast<uint16_t>(port)};
}

inline sockaddr_in to_sockaddr(const SplitAddress& split) {
  sockaddr_in sa{};
  sa.sin_family = AF_INET;
  sa.sin_port = htons(split.port);
  if (inet_pton(AF_INET, split.host.c_str(), &sa.sin_addr) != 1) {
    throw Error(Errc::config, "not an IPv4 address: " + split.host);
  }
  return sa;
}

inline std::string from_sockaddr(const sockaddr_in& sa) {
  char buf[INET_ADDRSTRLEN];
  inet_ntop(AF_INET, &sa.sin_addr, buf, sizeof(buf));
  return std::string(buf) + ":" + std::to_string(ntohs(sa.sin_port));
}

class TcpStream {
 public:
  TcpStream() = default;
  explicit TcpStream(int fd) : fd_(fd) {}
  TcpStream(TcpStream&& other) noexcept : fd_(other.fd_) { other.fd_ = -1; }
  TcpStream& operator=(TcpStream&& other) noexcept {
    if (this != &other) {
      close();
      fd_ = other.fd_;
      other.fd_ = -1;
    }
    return *this;
  }
  TcpStream(const TcpStream&) = delete;
  TcpStream& operator=(const TcpStream&) = delete;
  ~TcpStream() { close(); }

  static std::optional<TcpStream> connect(const std::string& address, int timeout_ms = 2000) {
    auto sa = to_sockaddr(split_address(address));
    int fd = ::socket(AF_INET, SOCK_STREAM | SOCK_NONBLOCK, 0);
    if (fd < 0) return std::nullopt;
    int rc = ::connect(fd, reinterpret_cast<sockaddr*>(&sa), sizeof(sa));
    if (rc != 0 && errno == EINPROGRESS) {
      pollfd pfd{fd, POLLOUT, 0};
      if (::poll(&pfd, 1, timeout_ms) <= 0) {
        ::close(fd);
        return std::nullopt;
      }
      int err = 0;
      socklen_t len = sizeof(err);
      getsockopt(fd, SOL_SOCKET, SO_ERROR, &err, &len);
      if (err != 0) {
        ::close(fd);
        return std::nullopt;
      }
    } else if (rc != 0) {
      ::close(fd);
      return std::nullopt;
    }
    int flags = fcntl(fd, F_GETFL, 0);
    fcntl(fd, F_SETFL, flags & ~O_NONBLOCK);
    int one = 1;
    setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
    return TcpStream(fd);
  }

  bool valid() const { return fd_ >= 0; }
  int fd() const { return fd_; }

  // Returns bytes read; 0 on orderly EOF, -1 on error.
  ssize_t read_some(uint8_t* buf, size_t n) {
    if (fd_ < 0) return -1;
    ssize_t got = ::recv(fd_, buf, n, 0);
    return got;
  }

  bool read_exact(uint8_t* buf, size_t n) {
    size_t off = 0;
    while (off < n) {
      ssize_t got = read_some(buf + off, n - off);
      if (got <= 0) return false;
      off += static_cast<size_t>(got);
    }
    return true;
  }

  bool write_all(ByteView data) {
    size_t off = 0;
    while (off < data.size()) {
      ssize_t sent = ::send(fd_, data.data() + off, data.size() - off, MSG_NOSIGNAL);
      if (sent <= 0) return false;
      off += static_cast<size_t>(sent);
    }
    return true;
  }

  std::string peer_address() const {
    sockaddr_in sa{};
    socklen_t len = sizeof(sa);
    if (getpeername(fd_, reinterpret_cast<sockaddr*>(&sa), &len) != 0) return "";
    return from_sockaddr(sa);
  }

  std::string local_address() const {
    sockaddr_in sa{};
    socklen_t len = sizeof(sa);
    if (getsockname(fd_, reinterpret_cast<sockaddr*>(&sa), &len) != 0) return "";
    return from_sockaddr(sa);
  }

  void shutdown_both() {
    if (fd_ >= 0) ::shutdown(fd_, SHUT_RDWR);
  }

  void close() {
    if (fd_ >= 0) {
      ::close(fd_);
      fd_ = -1;
    }
  }

 private:
  int fd_ = -1;
};

class TcpListener {
 public:
  TcpListener() = default;
  TcpListener(TcpListener&& other) noexcept : fd_(other.fd_) { other.fd_ = -1; }
  TcpListener& operator=(TcpListener&& other) noexcept {
    if (this != &other) {
      close();
      fd_ = other.fd_;
      other.fd_ = -1;
    }
    return *this;
  }
  TcpListener(const TcpListener&) = delete;
  TcpListener& operator=(const TcpListener&) = delete;
  ~TcpListener() { close(); }

  // Port 0 binds an ephemeral port; local_address() reports the real one.
  static TcpListener bind(const std::string& address) {
    auto sa = to_sockaddr(split_address(address));
    int fd = ::socket(AF_INET, SOCK_STREAM, 0);
    if (fd < 0) throw Error(Errc::network, "socket() failed");
    int one = 1;
    setsockopt(fd, SOL_SOCKET, SO_REUSEADDR, &one, sizeof(one));
    if (::bind(fd, reinterpret_cast<sockaddr*>(&sa), sizeof(sa)) != 0) {
      ::close(fd);
      throw Error(Errc::config, "cannot bind " + address + " (port in use?)");
    }
    if (::listen(fd, 64) != 0) {
      ::close(fd);
      throw Error(Errc::network, "listen() failed on " + address);
    }
    TcpListener l;
    l.fd_ = fd;
    return l;
  }

  std::string local_address() const {
    sockaddr_in sa{};
    socklen_t len = sizeof(sa);
    if (getsockname(fd_, reinterpret_cast<sockaddr*>(&sa), &len) != 0) return "";
    return from_sockaddr(sa);
  }

  // nullopt on timeout or when the listener has been closed.
  std::optional<TcpStream> accept(int timeout_ms = 200) {
    if (fd_ < 0) return std::nullopt;
    pollfd pfd{fd_, POLLIN, 0};
    int rc = ::poll(&pfd, 1, timeout_ms);
    if (rc <= 0) return std::nullopt;
    int conn = ::accept(fd_, nullptr, nullptr);
    if (conn < 0) return std::nullopt;
    int one = 1;
    setsockopt(conn, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
    return TcpStream(conn);
  }

  bool valid() const { return fd_ >= 0; }

  void close() {
    if (fd_ >= 0) {
      ::close(fd_);
      fd_ = -1;
    }
  }

 private:
  int fd_ = -1;
};

// 4-byte big-endian length-prefixed JSON frames (the directory protocol).
inline bool write_json_frame(TcpStream& stream, const nlohmann::json& j) {
  std::string body = j.dump();
  Bytes frame(4 + body.size());
  put_u32(frame.data(), static_cast<uint32_t>(body.size()));
  std::copy(body.begin(), body.end(), frame.begin() + 4);
  return stream.write_all(frame);
}

inline std::optional<nlohmann::json> read_json_frame(TcpStream& stream,
                                                     size_t max_size = 1 << 20) {
  uint8_t head[4];
  if (!stream.read_exact(head, 4)) return std::nullopt;
  uint32_t len = get_u32(head);
  if (len > max_size) return std::nullopt;
  Bytes body(len);
  if (!stream.read_exact(body.data(), len)) return std::nullopt;
  auto parsed = nlohmann::json::parse(body.begin(), body.end(), nullptr, false);
  if (parsed.is_discarded()) return std::nullopt;
  return parsed;
}

}  // namespace tomen::net
