#pragma once

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "discourse/dataset_store.hpp"
#include "discourse/llm_provider.hpp"
#include "discourse/moderator_engine.hpp"
#include "discourse/session_core.hpp"
#include "discourse/wire.hpp"

namespace discourse {

using ConnId = std::uint64_t;

struct HubOptions {
  RoomConfig room;
  std::size_t max_tokens = ConversationHistory::kDefaultBudget;
  std::size_t min_qa_pairs = 1;
  std::uint64_t seed = 0;
  // Quiet period after which the moderator prompts a silent student.
  std::chrono::milliseconds idle_prompt{20000};
  // Wait before retrying a moderator turn whose provider call failed.
  std::chrono::milliseconds retry_backoff{1000};
  // Timestamps become sequence numbers, so identical sessions produce
  // byte-identical envelopes and transcripts.
  bool logical_clock = false;
  // 0 runs provider calls on the thread that triggered them.
  std::size_t worker_threads = 8;
  // Transcript archives of finished sessions are written here when set.
  std::optional<std::filesystem::path> archive_dir;
};

struct LatencySample {
  std::size_t interaction_index = 0;
  double seconds = 0.0;
  std::string action;  // ModeratorAction key, or "feedback:<name>"
};

// Transport-independent session server: routes client events to rooms,
// applies them under each room's lock, runs provider calls off that lock and
// stamps every room broadcast with the next room sequence number.
class RoomHub {
 public:
  // Hands one envelope to one connection; false marks the member disconnected.
  using Deliver = std::function<bool(ConnId, const Envelope&)>;
  using Clock = std::function<TimePoint()>;

  RoomHub(HubOptions options, std::shared_ptr<const Dataset> dataset, ProviderPtr moderator, Deliver deliver);
  RoomHub(const RoomHub&) = delete;
  RoomHub& operator=(const RoomHub&) = delete;
  ~RoomHub();

  void handle_client_event(ConnId conn, const Envelope& envelope);
  void handle_disconnect(ConnId conn);
  // Fires idle prompts and provider retries that are due.
  void tick();
  // Broadcasts error{code: shutting_down} to every live room and stops
  // scheduling moderator turns.
  void shutdown();

  // Replaces the steady clock (tests drive idle windows explicitly).
  void set_clock(Clock clock);
  // Blocks until no provider call is queued or running.
  bool wait_quiescent(std::chrono::milliseconds timeout);

  std::size_t room_count() const;
  std::vector<RoomId> room_ids() const;
  std::vector<Envelope> room_log(const RoomId& id) const;
  std::optional<Transcript> room_archive(const RoomId& id) const;
  std::optional<SessionPhase> room_phase(const RoomId& id) const;
  std::vector<std::string> room_roster(const RoomId& id) const;
  std::vector<LatencySample> room_latency(const RoomId& id) const;
  std::optional<RoomId> room_of(ConnId conn) const;

  const HubOptions& options() const noexcept { return options_; }

 private:
  struct Slot;
  struct Member {
    RoomId room;
    std::string participant_id;
  };
  using Job = std::function<void()>;
  using Jobs = std::vector<Job>;

  void on_create(ConnId conn, const Envelope& env, Jobs& jobs);
  void on_join(ConnId conn, const Envelope& env, Jobs& jobs);
  void on_post(ConnId conn, const Envelope& env, Jobs& jobs);
  void on_hint(ConnId conn, Jobs& jobs);
  void on_leave(ConnId conn, bool disconnected, Jobs& jobs);

  void reply(ConnId conn, const Envelope& env);
  void broadcast(Slot& slot, Envelope env);
  void send_backfill(Slot& slot, ConnId conn, std::uint64_t from_seq);
  void start_session(Slot& slot, Jobs& jobs);
  void pump(const std::shared_ptr<Slot>& slot, Jobs& jobs);
  void start_render(const std::shared_ptr<Slot>& slot, const ModeratorAction& action, Jobs& jobs);
  void finish_render(const std::shared_ptr<Slot>& slot, const ModeratorAction& action,
                     std::optional<ProviderResponse> response, std::string error, Jobs& jobs);
  void start_feedback(const std::shared_ptr<Slot>& slot, Jobs& jobs);
  void finish_feedback(const std::shared_ptr<Slot>& slot, FeedbackReport report, std::vector<double> latencies);
  void write_archive(const Slot& slot) const;

  std::optional<Member> member_of(ConnId conn) const;
  std::shared_ptr<Slot> slot_of(const RoomId& id) const;
  std::int64_t stamp(std::uint64_t logical) const;
  TimePoint now() const;
  void dispatch(Jobs& jobs);

  HubOptions options_;
  std::shared_ptr<const Dataset> dataset_;
  ProviderPtr moderator_;
  Deliver deliver_;
  TimePoint epoch_;
  Clock clock_;
  std::atomic<std::uint64_t> passage_draws_{0};

  std::unique_ptr<RoomDirectory<Slot>> rooms_;
  mutable std::mutex members_mu_;
  std::map<ConnId, Member> members_;
  std::atomic<bool> shutting_down_{false};

  // Provider work queue.
  std::mutex work_mu_;
  std::condition_variable work_cv_;
  std::condition_variable idle_cv_;
  std::vector<Job> work_;
  std::size_t busy_ = 0;
  bool stop_workers_ = false;
  std::vector<std::thread> workers_;
};

struct ServerOptions {
  std::string host = "127.0.0.1";
  std::uint16_t port = 0;
  std::chrono::milliseconds heartbeat{15000};
  std::chrono::milliseconds tick{20};
  std::size_t max_frame_bytes = kMaxFrameBytes;
};

// TCP front end for RoomHub: one reader and one writer thread per
// connection, an accept thread, and a ticker for idle prompts and heartbeats.
// A frame that is not a valid envelope gets an error envelope and the
// connection is closed.
class GatewayServer {
 public:
  GatewayServer(ServerOptions options, HubOptions hub_options, std::shared_ptr<const Dataset> dataset,
                ProviderPtr moderator);
  GatewayServer(const GatewayServer&) = delete;
  GatewayServer& operator=(const GatewayServer&) = delete;
  ~GatewayServer();

  // Binds and starts serving; throws NetworkError when the bind fails.
  void start();
  // Tells every room the server is going away, then closes all connections.
  void stop();

  std::uint16_t port() const noexcept { return port_; }
  RoomHub& hub() noexcept { return *hub_; }
  std::size_t connection_count() const;

 private:
  struct Connection;

  void accept_loop();
  void tick_loop();
  void serve(const std::shared_ptr<Connection>& conn);
  bool deliver(ConnId id, const Envelope& env);
  void reap_closed();

  ServerOptions options_;
  std::unique_ptr<RoomHub> hub_;
  Socket listener_;
  std::uint16_t port_ = 0;
  std::atomic<bool> running_{false};
  std::atomic<ConnId> next_conn_{1};

  mutable std::mutex conns_mu_;
  std::map<ConnId, std::shared_ptr<Connection>> conns_;
  std::vector<std::shared_ptr<Connection>> closed_;

  std::mutex tick_mu_;
  std::condition_variable tick_cv_;
  std::thread acceptor_;
  std::thread ticker_;
};

}  // namespace discourse
