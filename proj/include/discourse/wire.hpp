#pragma once

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <memory>
#include <mutex>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

namespace discourse {

// Closed event vocabulary.
namespace event {
// client -> server
inline constexpr std::string_view kCreateRoom = "create_room";
inline constexpr std::string_view kJoinRoom = "join_room";
inline constexpr std::string_view kPostMessage = "post_message";
inline constexpr std::string_view kRequestHint = "request_hint";
inline constexpr std::string_view kLeave = "leave";
// server -> client
inline constexpr std::string_view kRoomCreated = "room_created";
inline constexpr std::string_view kJoined = "joined";
inline constexpr std::string_view kRoomFull = "room_full";
inline constexpr std::string_view kSessionStarted = "session_started";
inline constexpr std::string_view kChatBroadcast = "chat_broadcast";
inline constexpr std::string_view kModeratorMessage = "moderator_message";
inline constexpr std::string_view kQuestionRevealed = "question_revealed";
inline constexpr std::string_view kFeedbackDelivered = "feedback_delivered";
inline constexpr std::string_view kError = "error";

bool is_client_type(std::string_view type) noexcept;
bool is_server_type(std::string_view type) noexcept;
}  // namespace event

class ProtocolError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// JSON object {"type", "room_id", "sender", "payload", "seq", "ts"}; seq is
// present only on room broadcasts. Unknown fields are ignored when parsing.
struct Envelope {
  std::string type;
  std::string room_id;
  std::string sender;
  nlohmann::json payload = nlohmann::json::object();
  std::optional<std::uint64_t> seq;
  std::int64_t ts = 0;

  std::string to_json() const;
  // Throws ProtocolError on malformed JSON or a missing/ill-typed field.
  static Envelope parse(std::string_view text);

  bool operator==(const Envelope&) const = default;
};

Envelope make_error(std::string_view code, std::string_view detail, std::string_view room_id = {});

// ---------------------------------------------------------------------------
// Framing: 4-byte big-endian length followed by that many bytes of UTF-8
// JSON. A zero-length frame is a heartbeat (ping from the server, pong from
// the client).

inline constexpr std::size_t kMaxFrameBytes = 1 << 20;

std::string encode_frame(std::string_view payload);

class Socket {
 public:
  Socket() = default;
  explicit Socket(int fd) noexcept : fd_(fd) {}
  Socket(const Socket&) = delete;
  Socket& operator=(const Socket&) = delete;
  Socket(Socket&& other) noexcept : fd_(other.release()) {}
  Socket& operator=(Socket&& other) noexcept;
  ~Socket();

  int fd() const noexcept { return fd_; }
  bool valid() const noexcept { return fd_ >= 0; }
  int release() noexcept;
  // Wakes blocked readers and writers without releasing the descriptor.
  void shutdown() noexcept;

  // Blocking exact write of all bytes; false on failure.
  bool write_all(std::string_view bytes) noexcept;
  // Reads one frame; std::nullopt on orderly close or I/O error. Throws
  // ProtocolError when the announced length exceeds `max_bytes`.
  std::optional<std::string> read_frame(std::size_t max_bytes = kMaxFrameBytes);

 private:
  bool read_exact(char* dst, std::size_t n) noexcept;
  int fd_ = -1;
};

class NetworkError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

Socket connect_tcp(const std::string& host, std::uint16_t port);
// Binds and listens; port 0 picks an ephemeral port.
Socket listen_tcp(const std::string& host, std::uint16_t port, int backlog = 128);
std::uint16_t local_port(const Socket& socket);

// Client side of the wire protocol: one background reader that answers
// heartbeats and queues every envelope received.
class GatewayClient {
 public:
  struct Options {
    bool answer_heartbeats = true;
  };

  GatewayClient(const std::string& host, std::uint16_t port);
  GatewayClient(const std::string& host, std::uint16_t port, Options options);
  GatewayClient(const GatewayClient&) = delete;
  GatewayClient& operator=(const GatewayClient&) = delete;
  ~GatewayClient();

  // False once the connection is gone.
  bool send(const Envelope& envelope);
  bool send(std::string_view type, nlohmann::json payload = nlohmann::json::object());
  // Raw bytes, for protocol-violation tests.
  bool send_raw(std::string_view bytes);

  // Next queued envelope, waiting up to `timeout`.
  std::optional<Envelope> receive(std::chrono::milliseconds timeout);
  // Waits for the first envelope whose type matches; earlier ones are consumed.
  std::optional<Envelope> receive_type(std::string_view type, std::chrono::milliseconds timeout);

  // Every envelope received so far, in arrival order.
  std::vector<Envelope> log() const;
  std::size_t heartbeats_seen() const noexcept { return heartbeats_.load(); }
  bool connected() const noexcept { return connected_.load(); }
  // Waits until the server closes the connection.
  bool wait_closed(std::chrono::milliseconds timeout);
  void close();

 private:
  void read_loop();

  Socket socket_;
  Options options_;
  std::mutex write_mu_;
  mutable std::mutex mu_;
  std::condition_variable cv_;
  std::deque<Envelope> queue_;
  std::vector<Envelope> log_;
  std::atomic<bool> connected_{true};
  std::atomic<std::size_t> heartbeats_{0};
  std::thread reader_;
};

}  // namespace discourse
