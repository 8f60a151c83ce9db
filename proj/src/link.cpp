#include "splitstream/link.hpp"

#include <arpa/inet.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <cerrno>
#include <condition_variable>
#include <cstring>
#include <deque>
#include <mutex>

#include "splitstream/errors.hpp"

namespace splitstream {

void Link::send(std::span<const std::uint8_t> frame) {
  const auto h = wire::decode_header(frame);
  if (h.payload_length + wire::kHeaderSize != frame.size()) {
    throw FramingError("refusing to send a frame whose length field disagrees with its size");
  }
  send_bytes(frame);
  counters_.tx += frame.size();
  counters_.tx_by_type[static_cast<std::size_t>(h.type)] += frame.size();
}

std::vector<std::uint8_t> Link::recv() {
  auto frame = recv_frame();
  const auto h = wire::decode_header(frame);
  counters_.rx += frame.size();
  counters_.rx_by_type[static_cast<std::size_t>(h.type)] += frame.size();
  return frame;
}

namespace {

// ---- loopback ----

struct Channel {
  std::mutex mu;
  std::condition_variable cv;
  std::deque<std::vector<std::uint8_t>> frames;
  bool closed = false;
};

class LoopbackLink final : public Link {
 public:
  LoopbackLink(std::shared_ptr<Channel> in, std::shared_ptr<Channel> out) : in_(std::move(in)), out_(std::move(out)) {}
  ~LoopbackLink() override { close(); }

  void close() override {
    for (auto* c : {in_.get(), out_.get()}) {
      std::lock_guard lock(c->mu);
      c->closed = true;
      c->cv.notify_all();
    }
  }

 protected:
  void send_bytes(std::span<const std::uint8_t> frame) override {
    std::lock_guard lock(out_->mu);
    if (out_->closed) throw SessionError("loopback peer closed");
    out_->frames.emplace_back(frame.begin(), frame.end());
    out_->cv.notify_one();
  }

  std::vector<std::uint8_t> recv_frame() override {
    std::unique_lock lock(in_->mu);
    const bool ready = in_->cv.wait_for(lock, timeout_, [&] { return !in_->frames.empty() || in_->closed; });
    if (!ready) throw TimeoutError("no frame within " + std::to_string(timeout_.count()) + " ms");
    if (in_->frames.empty()) throw SessionError("loopback peer closed");
    auto f = std::move(in_->frames.front());
    in_->frames.pop_front();
    return f;
  }

 private:
  std::shared_ptr<Channel> in_, out_;
};

// ---- tcp ----

std::string errno_text() { return std::strerror(errno); }

class TcpLink final : public Link {
 public:
  TcpLink(int fd, std::chrono::milliseconds timeout) : fd_(fd) {
    timeout_ = timeout;
    int one = 1;
    ::setsockopt(fd_, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
  }
  ~TcpLink() override { close(); }

  void close() override {
    if (fd_ >= 0) {
      ::shutdown(fd_, SHUT_RDWR);
      ::close(fd_);
      fd_ = -1;
    }
  }

 protected:
  void send_bytes(std::span<const std::uint8_t> frame) override {
    std::size_t sent = 0;
    while (sent < frame.size()) {
      wait_for(POLLOUT);
      const auto n = ::send(fd_, frame.data() + sent, frame.size() - sent, MSG_NOSIGNAL);
      if (n < 0) {
        if (errno == EINTR || errno == EAGAIN) continue;
        throw SessionError("send failed: " + errno_text());
      }
      sent += static_cast<std::size_t>(n);
    }
  }

  std::vector<std::uint8_t> recv_frame() override {
    std::vector<std::uint8_t> frame(wire::kHeaderSize);
    read_exact(frame.data(), wire::kHeaderSize);
    const auto h = wire::decode_header(frame);
    frame.resize(wire::kHeaderSize + h.payload_length);
    read_exact(frame.data() + wire::kHeaderSize, h.payload_length);
    return frame;
  }

 private:
  void wait_for(short events) {
    if (fd_ < 0) throw SessionError("link closed");
    pollfd p{fd_, events, 0};
    for (;;) {
      const int rc = ::poll(&p, 1, static_cast<int>(timeout_.count()));
      if (rc > 0) return;
      if (rc == 0) throw TimeoutError("link idle for " + std::to_string(timeout_.count()) + " ms");
      if (errno != EINTR) throw SessionError("poll failed: " + errno_text());
    }
  }

  void read_exact(std::uint8_t* dst, std::size_t n) {
    std::size_t got = 0;
    while (got < n) {
      wait_for(POLLIN);
      const auto r = ::recv(fd_, dst + got, n - got, 0);
      if (r == 0) throw SessionError("connection closed by peer");
      if (r < 0) {
        if (errno == EINTR || errno == EAGAIN) continue;
        throw SessionError("recv failed: " + errno_text());
      }
      got += static_cast<std::size_t>(r);
    }
  }

  int fd_;
};

addrinfo* resolve(const Endpoint& ep, bool passive) {
  addrinfo hints{};
  hints.ai_family = AF_INET;
  hints.ai_socktype = SOCK_STREAM;
  if (passive) hints.ai_flags = AI_PASSIVE;
  addrinfo* res = nullptr;
  const auto port = std::to_string(ep.port);
  const int rc = ::getaddrinfo(ep.host.empty() ? nullptr : ep.host.c_str(), port.c_str(), &hints, &res);
  if (rc != 0) throw SessionError("cannot resolve " + ep.host + ": " + ::gai_strerror(rc));
  return res;
}

}  // namespace

std::pair<std::unique_ptr<Link>, std::unique_ptr<Link>> loopback_link() {
  auto a = std::make_shared<Channel>();
  auto b = std::make_shared<Channel>();
  return {std::make_unique<LoopbackLink>(a, b), std::make_unique<LoopbackLink>(b, a)};
}

Endpoint parse_endpoint(const std::string& text) {
  const auto colon = text.rfind(':');
  if (colon == std::string::npos || colon == 0 || colon + 1 == text.size()) {
    throw ValidationError("endpoint must look like host:port, got '" + text + "'");
  }
  const auto port_text = text.substr(colon + 1);
  if (port_text.find_first_not_of("0123456789") != std::string::npos || port_text.size() > 5) {
    throw ValidationError("bad port in endpoint '" + text + "'");
  }
  const auto port = std::stoul(port_text);
  if (port > 65535) throw ValidationError("port out of range in '" + text + "'");
  return {text.substr(0, colon), static_cast<std::uint16_t>(port)};
}

std::unique_ptr<Link> link_connect(const Endpoint& ep, std::chrono::milliseconds timeout) {
  addrinfo* res = resolve(ep, false);
  int fd = -1;
  std::string last = "no address";
  for (auto* ai = res; ai; ai = ai->ai_next) {
    fd = ::socket(ai->ai_family, ai->ai_socktype, ai->ai_protocol);
    if (fd < 0) continue;
    if (::connect(fd, ai->ai_addr, ai->ai_addrlen) == 0) break;
    last = errno_text();
    ::close(fd);
    fd = -1;
  }
  ::freeaddrinfo(res);
  if (fd < 0) throw SessionError("cannot connect to " + ep.host + ":" + std::to_string(ep.port) + ": " + last);
  return std::make_unique<TcpLink>(fd, timeout);
}

Listener::Listener(const Endpoint& ep) {
  addrinfo* res = resolve(ep, true);
  fd_ = ::socket(res->ai_family, res->ai_socktype, res->ai_protocol);
  if (fd_ < 0) {
    ::freeaddrinfo(res);
    throw SessionError("socket: " + errno_text());
  }
  int one = 1;
  ::setsockopt(fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
  if (::bind(fd_, res->ai_addr, res->ai_addrlen) != 0 || ::listen(fd_, 1) != 0) {
    const auto msg = errno_text();
    ::freeaddrinfo(res);
    ::close(fd_);
    throw SessionError("cannot listen on " + ep.host + ":" + std::to_string(ep.port) + ": " + msg);
  }
  ::freeaddrinfo(res);
  sockaddr_in addr{};
  socklen_t len = sizeof addr;
  ::getsockname(fd_, reinterpret_cast<sockaddr*>(&addr), &len);
  port_ = ntohs(addr.sin_port);
}

Listener::~Listener() {
  if (fd_ >= 0) ::close(fd_);
}

std::unique_ptr<Link> Listener::accept(std::chrono::milliseconds timeout) {
  pollfd p{fd_, POLLIN, 0};
  int rc;
  do {
    rc = ::poll(&p, 1, static_cast<int>(timeout.count()));
  } while (rc < 0 && errno == EINTR);
  if (rc == 0) throw TimeoutError("no peer connected within " + std::to_string(timeout.count()) + " ms");
  if (rc < 0) throw SessionError("poll: " + errno_text());
  const int fd = ::accept(fd_, nullptr, nullptr);
  if (fd < 0) throw SessionError("accept: " + errno_text());
  return std::make_unique<TcpLink>(fd, timeout);
}

std::unique_ptr<Link> link_listen(const Endpoint& ep, std::chrono::milliseconds timeout) {
  Listener l(ep);
  return l.accept(timeout);
}

}  // namespace splitstream
