#pragma once

// Length-prefixed frame transport over TCP: 4-byte big-endian length, then
// the frame payload. One handler thread per accepted connection.

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <functional>
#include <list>
#include <mutex>
#include <optional>
#include <string>
#include <thread>

#include "otakey/bytes.hpp"
#include "otakey/cloud.hpp"
#include "otakey/device.hpp"
#include "otakey/messages.hpp"

namespace otakey::net {

struct Endpoint {
  std::string host = "127.0.0.1";
  std::uint16_t port = 0;

  static Endpoint parse(std::string_view text);  // "host:port"
  std::string str() const { return host + ":" + std::to_string(port); }
};

class Socket {
 public:
  Socket() = default;
  explicit Socket(int fd) : fd_(fd) {}
  Socket(Socket&& other) noexcept : fd_(std::exchange(other.fd_, -1)) {}
  Socket& operator=(Socket&& other) noexcept;
  Socket(const Socket&) = delete;
  Socket& operator=(const Socket&) = delete;
  ~Socket();

  int fd() const { return fd_; }
  bool valid() const { return fd_ >= 0; }
  void shutdown();
  void set_timeout(std::chrono::milliseconds timeout);

 private:
  int fd_ = -1;
};

Socket connect_tcp(const Endpoint& ep, std::chrono::milliseconds timeout = std::chrono::seconds(5));

void write_frame(Socket& sock, ByteView payload);
// nullopt on orderly close or timeout; throws Error(SizeError) on an
// oversized length prefix.
std::optional<Bytes> read_frame(Socket& sock);

class FrameServer {
 public:
  using Handler = std::function<protocol::Frame(const protocol::Frame&)>;

  FrameServer(Endpoint listen, Handler handler);
  ~FrameServer();
  FrameServer(const FrameServer&) = delete;
  FrameServer& operator=(const FrameServer&) = delete;

  std::uint16_t port() const { return port_; }
  Endpoint endpoint() const { return Endpoint{host_, port_}; }
  void stop();

 private:
  void accept_loop();
  void serve_connection(Socket sock);

  std::string host_;
  std::uint16_t port_ = 0;
  Handler handler_;
  Socket listener_;
  std::atomic<bool> stopping_{false};
  std::thread acceptor_;
  std::mutex mu_;
  std::condition_variable idle_;
  std::size_t active_ = 0;
  std::list<int> open_fds_;
};

// Device-side transport that keeps one connection to the agent and
// reconnects on failure.
class SocketTransport final : public device::Transport {
 public:
  explicit SocketTransport(Endpoint agent, std::chrono::milliseconds timeout = std::chrono::seconds(5));
  std::optional<protocol::Frame> exchange(const protocol::Frame& request) override;

 private:
  Endpoint agent_;
  std::chrono::milliseconds timeout_;
  Socket sock_;
};

// CloudApi over the frame protocol.
class RemoteCloud final : public cloud::CloudApi {
 public:
  explicit RemoteCloud(Endpoint cloud, std::chrono::milliseconds timeout = std::chrono::seconds(5));

  cloud::CloudCredentials issue_key(const protocol::DeviceId& id) override;
  bool activate_new_disable_old(const protocol::DeviceId& id) override;
  void disable(const protocol::DeviceId& id) override;
  crypto::Nonce challenge(const protocol::DeviceId& id) override;
  bool authenticate(const protocol::DeviceId& id, const crypto::Nonce& challenge, const crypto::Tag& proof) override;

 private:
  protocol::Frame call(protocol::MsgType type, const protocol::DeviceId& id, Bytes body,
                       protocol::MsgType expect);

  Endpoint cloud_;
  std::chrono::milliseconds timeout_;
  std::mutex mu_;
  Socket sock_;
};

}  // namespace otakey::net
