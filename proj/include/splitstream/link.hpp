#pragma once

#include <array>
#include <chrono>
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "splitstream/wire.hpp"

namespace splitstream {

/// Framed bytes moved by one side of a link, headers included.
struct ByteCounters {
  std::uint64_t tx = 0;
  std::uint64_t rx = 0;
  // Indexed by msg_type (1..4); slot 0 unused.
  std::array<std::uint64_t, 5> tx_by_type{};
  std::array<std::uint64_t, 5> rx_by_type{};

  std::uint64_t tx_of(wire::MsgType t) const { return tx_by_type[static_cast<std::size_t>(t)]; }
  std::uint64_t rx_of(wire::MsgType t) const { return rx_by_type[static_cast<std::size_t>(t)]; }
  bool operator==(const ByteCounters&) const = default;
};

inline constexpr std::chrono::milliseconds kDefaultLinkTimeout{60000};

/// Reliable, ordered, bidirectional frame stream owned by one session.
class Link {
 public:
  virtual ~Link() = default;

  /// Sends one complete frame. The header is checked before anything is written.
  void send(std::span<const std::uint8_t> frame);
  /// Blocks until a whole frame arrives. TimeoutError after the idle timeout,
  /// SessionError when the peer is gone, ProtocolError on a bad header.
  std::vector<std::uint8_t> recv();

  const ByteCounters& counters() const { return counters_; }
  void set_timeout(std::chrono::milliseconds t) { timeout_ = t; }
  std::chrono::milliseconds timeout() const { return timeout_; }
  virtual void close() = 0;

 protected:
  virtual void send_bytes(std::span<const std::uint8_t> frame) = 0;
  virtual std::vector<std::uint8_t> recv_frame() = 0;

  std::chrono::milliseconds timeout_ = kDefaultLinkTimeout;

 private:
  ByteCounters counters_;
};

/// In-process queue pair with the same blocking and counting semantics as TCP.
std::pair<std::unique_ptr<Link>, std::unique_ptr<Link>> loopback_link();

struct Endpoint {
  std::string host;
  std::uint16_t port = 0;
};

/// "host:port"; ValidationError when malformed.
Endpoint parse_endpoint(const std::string& text);

/// SessionError when the connection is refused or the host does not resolve.
std::unique_ptr<Link> link_connect(const Endpoint& ep, std::chrono::milliseconds timeout = kDefaultLinkTimeout);

class Listener {
 public:
  explicit Listener(const Endpoint& ep);
  ~Listener();
  Listener(const Listener&) = delete;
  Listener& operator=(const Listener&) = delete;

  /// Port actually bound (useful with port 0).
  std::uint16_t port() const { return port_; }
  /// Waits for one peer; TimeoutError after `timeout`.
  std::unique_ptr<Link> accept(std::chrono::milliseconds timeout = kDefaultLinkTimeout);

 private:
  int fd_ = -1;
  std::uint16_t port_ = 0;
};

/// Accepts exactly one connection on `ep`.
std::unique_ptr<Link> link_listen(const Endpoint& ep, std::chrono::milliseconds timeout = kDefaultLinkTimeout);

}  // namespace splitstream
