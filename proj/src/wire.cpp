#include "discourse/wire.hpp"

#include <algorithm>
#include <array>
#include <cerrno>
#include <cstring>

#include <arpa/inet.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <sys/socket.h>
#include <unistd.h>

#include <fmt/format.h>

namespace discourse {

using nlohmann::json;

namespace event {

bool is_client_type(std::string_view type) noexcept {
  return type == kCreateRoom || type == kJoinRoom || type == kPostMessage || type == kRequestHint ||
         type == kLeave;
}

bool is_server_type(std::string_view type) noexcept {
  static constexpr std::array<std::string_view, 9> kTypes = {
      kRoomCreated,      kJoined,           kRoomFull,           kSessionStarted, kChatBroadcast,
      kModeratorMessage, kQuestionRevealed, kFeedbackDelivered, kError};
  return std::find(kTypes.begin(), kTypes.end(), type) != kTypes.end();
}

}  // namespace event

// ---------------------------------------------------------------------------
// Envelope

std::string Envelope::to_json() const {
  json j = {{"type", type}, {"room_id", room_id}, {"sender", sender}, {"payload", payload}, {"ts", ts}};
  if (seq) j["seq"] = *seq;
  return j.dump();
}

Envelope Envelope::parse(std::string_view text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ProtocolError(fmt::format("malformed frame: {}", e.what()));
  }
  if (!j.is_object()) throw ProtocolError("envelope must be a JSON object");

  auto string_field = [&](const char* name, bool required) -> std::string {
    auto it = j.find(name);
    if (it == j.end() || it->is_null()) {
      if (required) throw ProtocolError(fmt::format("envelope lacks '{}'", name));
      return {};
    }
    if (!it->is_string()) throw ProtocolError(fmt::format("envelope field '{}' must be a string", name));
    return it->get<std::string>();
  };

  Envelope env;
  env.type = string_field("type", true);
  env.room_id = string_field("room_id", false);
  env.sender = string_field("sender", false);
  if (auto it = j.find("payload"); it != j.end() && !it->is_null()) {
    if (!it->is_object()) throw ProtocolError("envelope payload must be an object");
    env.payload = *it;
  }
  if (auto it = j.find("seq"); it != j.end() && !it->is_null()) {
    if (!it->is_number_unsigned() && !it->is_number_integer()) throw ProtocolError("seq must be an integer");
    env.seq = it->get<std::uint64_t>();
  }
  if (auto it = j.find("ts"); it != j.end() && it->is_number()) env.ts = it->get<std::int64_t>();
  return env;
}

Envelope make_error(std::string_view code, std::string_view detail, std::string_view room_id) {
  Envelope env;
  env.type = std::string(event::kError);
  env.room_id = std::string(room_id);
  env.sender = "server";
  env.payload = {{"code", code}, {"detail", detail}};
  return env;
}

// ---------------------------------------------------------------------------
// Framing and sockets

std::string encode_frame(std::string_view payload) {
  const auto n = static_cast<std::uint32_t>(payload.size());
  std::string out;
  out.reserve(4 + payload.size());
  out += static_cast<char>((n >> 24) & 0xFF);
  out += static_cast<char>((n >> 16) & 0xFF);
  out += static_cast<char>((n >> 8) & 0xFF);
  out += static_cast<char>(n & 0xFF);
  out += payload;
  return out;
}

Socket& Socket::operator=(Socket&& other) noexcept {
  if (this != &other) {
    if (fd_ >= 0) ::close(fd_);
    fd_ = other.release();
  }
  return *this;
}

Socket::~Socket() {
  if (fd_ >= 0) ::close(fd_);
}

int Socket::release() noexcept {
  int fd = fd_;
  fd_ = -1;
  return fd;
}

void Socket::shutdown() noexcept {
  if (fd_ >= 0) ::shutdown(fd_, SHUT_RDWR);
}

bool Socket::write_all(std::string_view bytes) noexcept {
  while (!bytes.empty()) {
    auto n = ::send(fd_, bytes.data(), bytes.size(), MSG_NOSIGNAL);
    if (n < 0 && errno == EINTR) continue;
    if (n <= 0) return false;
    bytes.remove_prefix(static_cast<std::size_t>(n));
  }
  return true;
}

bool Socket::read_exact(char* dst, std::size_t n) noexcept {
  while (n > 0) {
    auto got = ::recv(fd_, dst, n, 0);
    if (got < 0 && errno == EINTR) continue;
    if (got <= 0) return false;
    dst += got;
    n -= static_cast<std::size_t>(got);
  }
  return true;
}

std::optional<std::string> Socket::read_frame(std::size_t max_bytes) {
  unsigned char head[4];
  if (!read_exact(reinterpret_cast<char*>(head), 4)) return std::nullopt;
  const std::size_t n = (std::size_t{head[0]} << 24) | (std::size_t{head[1]} << 16) |
                        (std::size_t{head[2]} << 8) | std::size_t{head[3]};
  if (n > max_bytes) throw ProtocolError(fmt::format("frame of {} bytes exceeds limit {}", n, max_bytes));
  std::string body(n, '\0');
  if (n > 0 && !read_exact(body.data(), n)) return std::nullopt;
  return body;
}

namespace {

addrinfo* resolve(const std::string& host, std::uint16_t port, bool passive) {
  addrinfo hints{};
  hints.ai_family = AF_INET;
  hints.ai_socktype = SOCK_STREAM;
  if (passive) hints.ai_flags = AI_PASSIVE;
  addrinfo* res = nullptr;
  const auto service = std::to_string(port);
  int rc = ::getaddrinfo(host.empty() ? nullptr : host.c_str(), service.c_str(), &hints, &res);
  if (rc != 0) throw NetworkError(fmt::format("cannot resolve {}: {}", host, ::gai_strerror(rc)));
  return res;
}

}  // namespace

Socket connect_tcp(const std::string& host, std::uint16_t port) {
  addrinfo* res = resolve(host, port, false);
  std::string last_error = "no address";
  for (auto* ai = res; ai; ai = ai->ai_next) {
    Socket s(::socket(ai->ai_family, ai->ai_socktype, ai->ai_protocol));
    if (!s.valid()) continue;
    if (::connect(s.fd(), ai->ai_addr, ai->ai_addrlen) == 0) {
      int one = 1;
      ::setsockopt(s.fd(), IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
      ::freeaddrinfo(res);
      return s;
    }
    last_error = std::strerror(errno);
  }
  ::freeaddrinfo(res);
  throw NetworkError(fmt::format("cannot connect to {}:{}: {}", host, port, last_error));
}

Socket listen_tcp(const std::string& host, std::uint16_t port, int backlog) {
  addrinfo* res = resolve(host, port, true);
  std::string last_error = "no address";
  for (auto* ai = res; ai; ai = ai->ai_next) {
    Socket s(::socket(ai->ai_family, ai->ai_socktype, ai->ai_protocol));
    if (!s.valid()) continue;
    int one = 1;
    ::setsockopt(s.fd(), SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
    if (::bind(s.fd(), ai->ai_addr, ai->ai_addrlen) == 0 && ::listen(s.fd(), backlog) == 0) {
      ::freeaddrinfo(res);
      return s;
    }
    last_error = std::strerror(errno);
  }
  ::freeaddrinfo(res);
  throw NetworkError(fmt::format("cannot listen on {}:{}: {}", host, port, last_error));
}

std::uint16_t local_port(const Socket& socket) {
  sockaddr_in addr{};
  socklen_t len = sizeof addr;
  if (::getsockname(socket.fd(), reinterpret_cast<sockaddr*>(&addr), &len) != 0)
    throw NetworkError(std::string("getsockname: ") + std::strerror(errno));
  return ntohs(addr.sin_port);
}

// ---------------------------------------------------------------------------
// GatewayClient

GatewayClient::GatewayClient(const std::string& host, std::uint16_t port) : GatewayClient(host, port, Options{}) {}

GatewayClient::GatewayClient(const std::string& host, std::uint16_t port, Options options)
    : socket_(connect_tcp(host, port)), options_(options) {
  reader_ = std::thread([this] { read_loop(); });
}

GatewayClient::~GatewayClient() {
  close();
  if (reader_.joinable()) reader_.join();
}

void GatewayClient::read_loop() {
  for (;;) {
    std::optional<std::string> frame;
    try {
      frame = socket_.read_frame();
    } catch (const ProtocolError&) {
      frame.reset();
    }
    if (!frame) break;
    if (frame->empty()) {
      ++heartbeats_;
      if (options_.answer_heartbeats) {
        std::lock_guard lock(write_mu_);
        socket_.write_all(encode_frame({}));
      }
      continue;
    }
    Envelope env;
    try {
      env = Envelope::parse(*frame);
    } catch (const ProtocolError&) {
      continue;
    }
    std::lock_guard lock(mu_);
    log_.push_back(env);
    queue_.push_back(std::move(env));
    cv_.notify_all();
  }
  std::lock_guard lock(mu_);
  connected_ = false;
  cv_.notify_all();
}

bool GatewayClient::send(const Envelope& envelope) { return send_raw(encode_frame(envelope.to_json())); }

bool GatewayClient::send(std::string_view type, json payload) {
  Envelope env;
  env.type = std::string(type);
  env.payload = std::move(payload);
  return send(env);
}

bool GatewayClient::send_raw(std::string_view bytes) {
  if (!connected_) return false;
  std::lock_guard lock(write_mu_);
  return socket_.write_all(bytes);
}

std::optional<Envelope> GatewayClient::receive(std::chrono::milliseconds timeout) {
  std::unique_lock lock(mu_);
  cv_.wait_for(lock, timeout, [&] { return !queue_.empty() || !connected_; });
  if (queue_.empty()) return std::nullopt;
  auto env = std::move(queue_.front());
  queue_.pop_front();
  return env;
}

std::optional<Envelope> GatewayClient::receive_type(std::string_view type, std::chrono::milliseconds timeout) {
  const auto deadline = std::chrono::steady_clock::now() + timeout;
  for (;;) {
    auto left = std::chrono::duration_cast<std::chrono::milliseconds>(deadline - std::chrono::steady_clock::now());
    if (left.count() <= 0) return std::nullopt;
    auto env = receive(left);
    if (!env) return std::nullopt;
    if (env->type == type) return env;
  }
}

std::vector<Envelope> GatewayClient::log() const {
  std::lock_guard lock(mu_);
  return log_;
}

bool GatewayClient::wait_closed(std::chrono::milliseconds timeout) {
  std::unique_lock lock(mu_);
  return cv_.wait_for(lock, timeout, [&] { return !connected_.load(); });
}

void GatewayClient::close() { socket_.shutdown(); }

}  // namespace discourse
