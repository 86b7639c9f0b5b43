#include "otakey/net.hpp"

#include <arpa/inet.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <cerrno>
#include <cstring>

#include "otakey/error.hpp"

namespace otakey::net {

using protocol::Frame;
using protocol::MsgType;

Endpoint Endpoint::parse(std::string_view text) {
  auto colon = text.rfind(':');
  if (colon == std::string_view::npos) throw Error(ErrorCode::Config, "endpoint must be host:port");
  Endpoint ep;
  ep.host = std::string(text.substr(0, colon));
  if (ep.host.empty()) ep.host = "127.0.0.1";
  try {
    int port = std::stoi(std::string(text.substr(colon + 1)));
    if (port < 0 || port > 65535) throw std::out_of_range("port");
    ep.port = static_cast<std::uint16_t>(port);
  } catch (const std::exception&) {
    throw Error(ErrorCode::Config, "bad port in endpoint " + std::string(text));
  }
  return ep;
}

Socket& Socket::operator=(Socket&& other) noexcept {
  if (this != &other) {
    if (fd_ >= 0) ::close(fd_);
    fd_ = std::exchange(other.fd_, -1);
  }
  return *this;
}

Socket::~Socket() {
  if (fd_ >= 0) ::close(fd_);
}

void Socket::shutdown() {
  if (fd_ >= 0) ::shutdown(fd_, SHUT_RDWR);
}

void Socket::set_timeout(std::chrono::milliseconds timeout) {
  timeval tv{};
  tv.tv_sec = static_cast<time_t>(timeout.count() / 1000);
  tv.tv_usec = static_cast<suseconds_t>((timeout.count() % 1000) * 1000);
  ::setsockopt(fd_, SOL_SOCKET, SO_RCVTIMEO, &tv, sizeof tv);
  ::setsockopt(fd_, SOL_SOCKET, SO_SNDTIMEO, &tv, sizeof tv);
}

namespace {

sockaddr_in resolve(const Endpoint& ep) {
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_port = htons(ep.port);
  if (::inet_pton(AF_INET, ep.host.c_str(), &addr.sin_addr) == 1) return addr;
  addrinfo hints{};
  hints.ai_family = AF_INET;
  addrinfo* res = nullptr;
  if (::getaddrinfo(ep.host.c_str(), nullptr, &hints, &res) != 0 || !res) {
    throw Error(ErrorCode::Io, "cannot resolve " + ep.host);
  }
  addr.sin_addr = reinterpret_cast<sockaddr_in*>(res->ai_addr)->sin_addr;
  ::freeaddrinfo(res);
  return addr;
}

bool write_all(int fd, const std::uint8_t* data, std::size_t len) {
  while (len > 0) {
    ssize_t n = ::send(fd, data, len, MSG_NOSIGNAL);
    if (n < 0 && errno == EINTR) continue;
    if (n <= 0) return false;
    data += n;
    len -= static_cast<std::size_t>(n);
  }
  return true;
}

bool read_all(int fd, std::uint8_t* data, std::size_t len) {
  while (len > 0) {
    ssize_t n = ::recv(fd, data, len, 0);
    if (n < 0 && errno == EINTR) continue;
    if (n <= 0) return false;
    data += n;
    len -= static_cast<std::size_t>(n);
  }
  return true;
}

}  // namespace

Socket connect_tcp(const Endpoint& ep, std::chrono::milliseconds timeout) {
  auto addr = resolve(ep);
  Socket sock(::socket(AF_INET, SOCK_STREAM, 0));
  if (!sock.valid()) throw Error(ErrorCode::Io, std::string("socket: ") + std::strerror(errno));
  sock.set_timeout(timeout);
  if (::connect(sock.fd(), reinterpret_cast<sockaddr*>(&addr), sizeof addr) != 0) {
    throw Error(ErrorCode::Io, "connect " + ep.str() + ": " + std::strerror(errno));
  }
  int one = 1;
  ::setsockopt(sock.fd(), IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
  return sock;
}

void write_frame(Socket& sock, ByteView payload) {
  if (payload.size() > protocol::kMaxFrame) throw Error(ErrorCode::SizeError, "frame too large");
  Bytes wire = ByteWriter().u32be(static_cast<std::uint32_t>(payload.size())).raw(payload).bytes();
  if (!write_all(sock.fd(), wire.data(), wire.size())) throw Error(ErrorCode::Io, "send failed");
}

std::optional<Bytes> read_frame(Socket& sock) {
  std::array<std::uint8_t, 4> prefix{};
  if (!read_all(sock.fd(), prefix.data(), prefix.size())) return std::nullopt;
  std::uint32_t len = ByteReader(prefix).u32be();
  if (len > protocol::kMaxFrame) throw Error(ErrorCode::SizeError, "oversized frame length prefix");
  Bytes payload(len);
  if (!read_all(sock.fd(), payload.data(), len)) return std::nullopt;
  return payload;
}

FrameServer::FrameServer(Endpoint listen, Handler handler) : host_(listen.host), handler_(std::move(handler)) {
  auto addr = resolve(listen);
  listener_ = Socket(::socket(AF_INET, SOCK_STREAM, 0));
  if (!listener_.valid()) throw Error(ErrorCode::Io, std::string("socket: ") + std::strerror(errno));
  int one = 1;
  ::setsockopt(listener_.fd(), SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
  if (::bind(listener_.fd(), reinterpret_cast<sockaddr*>(&addr), sizeof addr) != 0) {
    throw Error(ErrorCode::Io, "bind " + listen.str() + ": " + std::strerror(errno));
  }
  if (::listen(listener_.fd(), 128) != 0) throw Error(ErrorCode::Io, std::string("listen: ") + std::strerror(errno));
  sockaddr_in bound{};
  socklen_t blen = sizeof bound;
  ::getsockname(listener_.fd(), reinterpret_cast<sockaddr*>(&bound), &blen);
  port_ = ntohs(bound.sin_port);
  acceptor_ = std::thread([this] { accept_loop(); });
}

FrameServer::~FrameServer() { stop(); }

void FrameServer::stop() {
  if (stopping_.exchange(true)) return;
  listener_.shutdown();
  if (acceptor_.joinable()) acceptor_.join();
  std::unique_lock lock(mu_);
  for (int fd : open_fds_) ::shutdown(fd, SHUT_RDWR);
  idle_.wait(lock, [this] { return active_ == 0; });
}

void FrameServer::accept_loop() {
  while (!stopping_) {
    pollfd pfd{listener_.fd(), POLLIN, 0};
    int rc = ::poll(&pfd, 1, 100);
    if (rc <= 0) continue;
    int fd = ::accept(listener_.fd(), nullptr, nullptr);
    if (fd < 0) continue;
    int one = 1;
    ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
    std::lock_guard lock(mu_);
    if (stopping_) {
      ::close(fd);
      break;
    }
    open_fds_.push_back(fd);
    ++active_;
    std::thread([this, fd] { serve_connection(Socket(fd)); }).detach();
  }
}

void FrameServer::serve_connection(Socket sock) {
  try {
    while (!stopping_) {
      auto payload = read_frame(sock);
      if (!payload) break;
      Frame reply;
      try {
        reply = handler_(Frame::decode(*payload));
      } catch (const Error&) {
        reply = protocol::error_frame(protocol::ErrorReason::BadRequest);
      }
      write_frame(sock, reply.encode());
    }
  } catch (const std::exception&) {
  }
  std::lock_guard lock(mu_);
  open_fds_.remove(sock.fd());
  sock = Socket();
  --active_;
  idle_.notify_all();
}

SocketTransport::SocketTransport(Endpoint agent, std::chrono::milliseconds timeout)
    : agent_(std::move(agent)), timeout_(timeout) {}

std::optional<Frame> SocketTransport::exchange(const Frame& request) {
  for (int attempt = 0; attempt < 2; ++attempt) {
    try {
      if (!sock_.valid()) sock_ = connect_tcp(agent_, timeout_);
      write_frame(sock_, request.encode());
      auto reply = read_frame(sock_);
      if (reply) return Frame::decode(*reply);
    } catch (const Error&) {
    }
    sock_ = Socket();
  }
  return std::nullopt;
}

RemoteCloud::RemoteCloud(Endpoint cloud, std::chrono::milliseconds timeout)
    : cloud_(std::move(cloud)), timeout_(timeout) {}

Frame RemoteCloud::call(MsgType type, const protocol::DeviceId& id, Bytes body, MsgType expect) {
  std::lock_guard lock(mu_);
  Frame request{type, Bytes(id.begin(), id.end()), std::move(body)};
  for (int attempt = 0; attempt < 2; ++attempt) {
    try {
      if (!sock_.valid()) sock_ = connect_tcp(cloud_, timeout_);
      write_frame(sock_, request.encode());
      if (auto reply = read_frame(sock_)) {
        auto frame = Frame::decode(*reply);
        if (frame.type != expect) throw Error(ErrorCode::CloudUnavailable, "unexpected cloud reply");
        return frame;
      }
    } catch (const Error& e) {
      if (e.code() == ErrorCode::CloudUnavailable) throw;
    }
    sock_ = Socket();
  }
  throw Error(ErrorCode::CloudUnavailable, "cloud at " + cloud_.str() + " unreachable");
}

cloud::CloudCredentials RemoteCloud::issue_key(const protocol::DeviceId& id) {
  auto reply = call(MsgType::CloudRegister, id, {}, MsgType::CloudRegistered);
  ByteReader r(reply.body);
  cloud::CloudCredentials creds;
  creds.key.bytes = r.fixed<crypto::kKeySize>();
  auto info = r.rest();
  creds.connection_info.assign(info.begin(), info.end());
  return creds;
}

bool RemoteCloud::activate_new_disable_old(const protocol::DeviceId& id) {
  auto reply = call(MsgType::CloudActivate, id, {}, MsgType::CloudOk);
  return !reply.body.empty() && reply.body[0] == 1;
}

void RemoteCloud::disable(const protocol::DeviceId& id) { call(MsgType::CloudDisable, id, {}, MsgType::CloudOk); }

crypto::Nonce RemoteCloud::challenge(const protocol::DeviceId& id) {
  auto reply = call(MsgType::CloudChallenge, id, {}, MsgType::CloudChallengeIssued);
  ByteReader r(reply.body);
  return r.fixed<crypto::kNonceSize>();
}

bool RemoteCloud::authenticate(const protocol::DeviceId& id, const crypto::Nonce& challenge,
                               const crypto::Tag& proof) {
  auto reply =
      call(MsgType::CloudAuth, id, ByteWriter().raw(challenge).raw(proof).bytes(), MsgType::CloudAuthResult);
  return !reply.body.empty() && reply.body[0] == 1;
}

}  // namespace otakey::net
