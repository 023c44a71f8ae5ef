#include "discourse/gateway.hpp"

#include <algorithm>
#include <deque>
#include <fstream>

#include <sys/socket.h>

#include <fmt/format.h>

namespace discourse {

using nlohmann::json;

struct RoomHub::Slot {
  explicit Slot(Room r) : room(std::move(r)) {}
  const RoomId& room_id() const { return room.id(); }

  std::mutex mu;
  Room room;
  std::optional<ConversationHistory> history;
  Transcript archive;
  TurnPolicy policy;
  std::vector<Envelope> log;
  std::map<std::string, ConnId> conns;  // participant_id -> connection
  bool in_flight = false;
  std::optional<TimePoint> retry_at;
  TimePoint last_activity{};
  bool feedback_started = false;
  std::vector<LatencySample> latency;
};

namespace {

std::string trimmed(std::string_view s) {
  auto ws = [](char c) { return c == ' ' || c == '\t' || c == '\r' || c == '\n'; };
  auto b = std::find_if_not(s.begin(), s.end(), ws);
  auto e = std::find_if_not(s.rbegin(), s.rend(), ws).base();
  return b < e ? std::string(b, e) : std::string();
}

std::string joined_lines(const std::vector<std::string>& names) {
  std::string out;
  for (const auto& n : names) {
    if (!out.empty()) out += '\n';
    out += n;
  }
  return out;
}

Envelope server_envelope(std::string_view type, json payload, std::string sender = "server") {
  Envelope env;
  env.type = std::string(type);
  env.sender = std::move(sender);
  env.payload = std::move(payload);
  return env;
}

json stats_json(const StudentStats& s) {
  return {{"message_count", s.message_count},
          {"mean_message_tokens", s.mean_message_tokens},
          {"prompted_count", s.prompted_count}};
}

}  // namespace

// ---------------------------------------------------------------------------

RoomHub::RoomHub(HubOptions options, std::shared_ptr<const Dataset> dataset, ProviderPtr moderator, Deliver deliver)
    : options_(std::move(options)),
      dataset_(std::move(dataset)),
      moderator_(std::move(moderator)),
      deliver_(std::move(deliver)),
      epoch_(SteadyClock::now()),
      rooms_(std::make_unique<RoomDirectory<Slot>>(options_.seed)) {
  if (!dataset_) throw std::invalid_argument("hub needs a dataset");
  if (!moderator_) throw std::invalid_argument("hub needs a moderator provider");
  for (std::size_t i = 0; i < options_.worker_threads; ++i) {
    workers_.emplace_back([this] {
      for (;;) {
        Job job;
        {
          std::unique_lock lock(work_mu_);
          work_cv_.wait(lock, [&] { return stop_workers_ || !work_.empty(); });
          if (work_.empty()) return;
          job = std::move(work_.front());
          work_.erase(work_.begin());
          ++busy_;
        }
        job();
        std::lock_guard lock(work_mu_);
        --busy_;
        idle_cv_.notify_all();
      }
    });
  }
}

RoomHub::~RoomHub() {
  {
    std::lock_guard lock(work_mu_);
    stop_workers_ = true;
  }
  work_cv_.notify_all();
  for (auto& t : workers_) t.join();
}

void RoomHub::set_clock(Clock clock) { clock_ = std::move(clock); }

TimePoint RoomHub::now() const { return clock_ ? clock_() : SteadyClock::now(); }

std::int64_t RoomHub::stamp(std::uint64_t logical) const {
  if (options_.logical_clock) return static_cast<std::int64_t>(logical);
  return std::chrono::duration_cast<std::chrono::milliseconds>(SteadyClock::now() - epoch_).count();
}

void RoomHub::dispatch(Jobs& jobs) {
  if (jobs.empty()) return;
  if (options_.worker_threads == 0) {
    Jobs local;
    local.swap(jobs);
    for (auto& job : local) job();
    return;
  }
  {
    std::lock_guard lock(work_mu_);
    for (auto& job : jobs) work_.push_back(std::move(job));
  }
  jobs.clear();
  work_cv_.notify_all();
}

bool RoomHub::wait_quiescent(std::chrono::milliseconds timeout) {
  std::unique_lock lock(work_mu_);
  return idle_cv_.wait_for(lock, timeout, [&] { return work_.empty() && busy_ == 0; });
}

std::optional<RoomHub::Member> RoomHub::member_of(ConnId conn) const {
  std::lock_guard lock(members_mu_);
  auto it = members_.find(conn);
  if (it == members_.end()) return std::nullopt;
  return it->second;
}

std::shared_ptr<RoomHub::Slot> RoomHub::slot_of(const RoomId& id) const { return rooms_->find(id); }

void RoomHub::reply(ConnId conn, const Envelope& env) {
  Envelope out = env;
  out.ts = stamp(0);
  deliver_(conn, out);
}

void RoomHub::broadcast(Slot& slot, Envelope env) {
  const auto seq = static_cast<std::uint64_t>(slot.log.size());
  env.room_id = slot.room.id().str();
  env.seq = seq;
  env.ts = stamp(seq);
  slot.log.push_back(env);

  std::vector<std::string> failed;
  for (const auto& [pid, conn] : slot.conns)
    if (!deliver_(conn, env)) failed.push_back(pid);
  for (const auto& pid : failed) {
    slot.conns.erase(pid);
    if (slot.room.phase() != SessionPhase::Lobby && slot.room.find(pid)) slot.room.leave(pid);
  }
}

void RoomHub::send_backfill(Slot& slot, ConnId conn, std::uint64_t from_seq) {
  for (auto i = from_seq; i < slot.log.size(); ++i) deliver_(conn, slot.log[i]);
}

// ---------------------------------------------------------------------------
// Client events

void RoomHub::handle_client_event(ConnId conn, const Envelope& env) {
  if (shutting_down_) {
    reply(conn, make_error("shutting_down", "server is shutting down"));
    return;
  }
  Jobs jobs;
  try {
    if (env.type == event::kCreateRoom) {
      on_create(conn, env, jobs);
    } else if (env.type == event::kJoinRoom) {
      on_join(conn, env, jobs);
    } else if (env.type == event::kPostMessage) {
      on_post(conn, env, jobs);
    } else if (env.type == event::kRequestHint) {
      on_hint(conn, jobs);
    } else if (env.type == event::kLeave) {
      on_leave(conn, false, jobs);
    } else {
      reply(conn, make_error("unknown_type", fmt::format("unknown event type '{}'", env.type), env.room_id));
    }
  } catch (const SessionError& e) {
    reply(conn, make_error(to_string(e.code()), e.what(), env.room_id));
  } catch (const json::exception& e) {
    reply(conn, make_error("invalid_message", e.what(), env.room_id));
  }
  dispatch(jobs);
}

void RoomHub::handle_disconnect(ConnId conn) {
  Jobs jobs;
  on_leave(conn, true, jobs);
  dispatch(jobs);
}

void RoomHub::on_create(ConnId conn, const Envelope& env, Jobs& jobs) {
  if (member_of(conn)) {
    reply(conn, make_error("already_in_room", "connection already belongs to a room"));
    return;
  }
  const auto name = env.payload.value("display_name", std::string());

  std::unique_lock<std::mutex> lock;
  Participant creator;
  bool auto_started = false;
  auto picker = [this] {
    const auto draw = passage_draws_.fetch_add(1);
    return select_passage(*dataset_, options_.min_qa_pairs, options_.seed + 0x9E3779B97F4A7C15ULL * (draw + 1));
  };
  auto [id, slot] = rooms_->emplace([&](RoomIdGenerator& ids, const auto& taken) {
    auto created = create_room(name, options_.room, ids, taken, picker, now());
    creator = created.creator;
    auto_started = created.auto_started;
    auto s = std::make_shared<Slot>(std::move(created.room));
    lock = std::unique_lock(s->mu);
    return s;
  });

  {
    std::lock_guard mlock(members_mu_);
    members_[conn] = Member{id, creator.participant_id};
  }
  slot->conns[creator.participant_id] = conn;
  broadcast(*slot, server_envelope(event::kRoomCreated, {{"room_id", id.str()}}));
  broadcast(*slot, server_envelope(event::kJoined, {{"roster", slot->room.active_roster()},
                                                    {"name", creator.display_name}}));
  if (auto_started) start_session(*slot, jobs);
  pump(slot, jobs);
}

void RoomHub::on_join(ConnId conn, const Envelope& env, Jobs& jobs) {
  const auto room_text = env.payload.value("room_id", env.room_id);
  const auto name = env.payload.value("display_name", std::string());
  auto id = RoomId::parse(room_text);
  auto slot = id ? slot_of(*id) : nullptr;
  if (!slot) {
    reply(conn, make_error("unknown_room", fmt::format("no room '{}'", room_text), room_text));
    return;
  }
  if (member_of(conn)) {
    reply(conn, make_error("already_in_room", "connection already belongs to a room", room_text));
    return;
  }

  std::lock_guard lock(slot->mu);
  auto outcome = slot->room.join(name, now());
  if (auto* joined = std::get_if<Joined>(&outcome)) {
    const auto& p = joined->participant;
    std::uint64_t from = 0;
    if (joined->rejoined) from = env.payload.value("since_seq", std::uint64_t{0});
    send_backfill(*slot, conn, from);
    slot->conns[p.participant_id] = conn;
    {
      std::lock_guard mlock(members_mu_);
      members_[conn] = Member{*id, p.participant_id};
    }
    broadcast(*slot, server_envelope(event::kJoined, {{"roster", slot->room.active_roster()},
                                                      {"name", p.display_name}}));
    if (joined->auto_started) start_session(*slot, jobs);
    pump(slot, jobs);
  } else if (std::holds_alternative<RoomFull>(outcome)) {
    Envelope full = server_envelope(event::kRoomFull, json::object());
    full.room_id = id->str();
    reply(conn, full);
  } else {
    reply(conn, make_error("already_started", "the session has already started", id->str()));
  }
}

void RoomHub::on_post(ConnId conn, const Envelope& env, Jobs& jobs) {
  auto member = member_of(conn);
  if (!member) {
    reply(conn, make_error("not_a_member", "join a room before posting", env.room_id));
    return;
  }
  auto slot = slot_of(member->room);
  if (!slot) return;
  const auto text = trimmed(env.payload.value("text", std::string()));

  std::lock_guard lock(slot->mu);
  auto& room = slot->room;
  if (room.phase() != SessionPhase::Discussion) {
    reply(conn, make_error("wrong_phase", fmt::format("messages are accepted during discussion, room is in {}",
                                                      to_string(room.phase())),
                           room.id().str()));
    return;
  }
  if (text.empty()) {
    reply(conn, make_error("invalid_message", "message text is empty", room.id().str()));
    return;
  }
  const auto* p = room.find(member->participant_id);
  if (!p) return;
  const auto name = p->display_name;
  room.record_student_message(member->participant_id);
  slot->history->append_and_trim(Role::Student, name, text, stamp(slot->history->next_seq()));
  slot->archive.push_back(slot->history->last());
  broadcast(*slot, server_envelope(event::kChatBroadcast, {{"name", name}, {"text", text}}, name));
  slot->last_activity = now();
  pump(slot, jobs);
}

void RoomHub::on_hint(ConnId conn, Jobs& jobs) {
  auto member = member_of(conn);
  if (!member) {
    reply(conn, make_error("not_a_member", "join a room before asking for a hint"));
    return;
  }
  auto slot = slot_of(member->room);
  if (!slot) return;
  std::lock_guard lock(slot->mu);
  if (slot->room.phase() != SessionPhase::Discussion) {
    reply(conn, make_error("wrong_phase", "hints are available during discussion", member->room.str()));
    return;
  }
  const auto* p = slot->room.find(member->participant_id);
  if (!p) return;
  slot->policy.request_hint(p->display_name);
  pump(slot, jobs);
}

void RoomHub::on_leave(ConnId conn, bool disconnected, Jobs& jobs) {
  std::optional<Member> member;
  {
    std::lock_guard mlock(members_mu_);
    auto it = members_.find(conn);
    if (it != members_.end()) {
      member = it->second;
      members_.erase(it);
    }
  }
  if (!member) {
    if (!disconnected) reply(conn, make_error("not_a_member", "not in a room"));
    return;
  }
  auto slot = slot_of(member->room);
  if (!slot) return;

  bool erase_room = false;
  {
    std::lock_guard lock(slot->mu);
    auto& room = slot->room;
    auto it = slot->conns.find(member->participant_id);
    if (it != slot->conns.end() && it->second == conn) slot->conns.erase(it);
    if (const auto* p = room.find(member->participant_id); p && (p->active || room.phase() == SessionPhase::Lobby))
      room.leave(member->participant_id);

    if (room.phase() == SessionPhase::Lobby && room.participants().empty()) {
      erase_room = true;
    } else if (room.phase() == SessionPhase::Closed && slot->conns.empty()) {
      erase_room = true;
    } else if (room.phase() != SessionPhase::Closed) {
      broadcast(*slot, server_envelope(event::kJoined, {{"roster", room.active_roster()}}));
      pump(slot, jobs);
    }
  }
  if (erase_room) rooms_->erase(member->room);
}

// ---------------------------------------------------------------------------
// Moderator turns

void RoomHub::start_session(Slot& slot, Jobs&) {
  auto& room = slot.room;
  const auto names = room.roster();
  slot.history.emplace(build_system_prompt(names, *room.passage(), session_questions(room)), options_.max_tokens,
                       stamp(0));
  slot.archive = {slot.history->system_entry()};
  slot.history->append_and_trim(Role::System, "system", joined_lines(names), stamp(slot.history->next_seq()),
                                "roster");
  slot.archive.push_back(slot.history->last());
  broadcast(slot, server_envelope(event::kSessionStarted, {{"passage_title", room.passage()->title},
                                                           {"roster", names},
                                                           {"question_count", room.question_count()}}));
  slot.last_activity = now();
}

void RoomHub::pump(const std::shared_ptr<Slot>& slot, Jobs& jobs) {
  if (slot->in_flight || slot->retry_at || shutting_down_) return;
  const auto phase = slot->room.phase();
  if (phase != SessionPhase::Discussion && phase != SessionPhase::Feedback) return;
  if (phase == SessionPhase::Feedback && slot->policy.wrapped_up()) {
    if (!slot->feedback_started) start_feedback(slot, jobs);
    return;
  }
  if (auto action = slot->policy.next_action(slot->room)) start_render(slot, *action, jobs);
}

void RoomHub::start_render(const std::shared_ptr<Slot>& slot, const ModeratorAction& action, Jobs& jobs) {
  slot->in_flight = true;
  auto request = build_moderator_request(action, slot->room, *slot->history);
  jobs.push_back([this, slot, action, request = std::move(request)] {
    std::optional<ProviderResponse> response;
    std::string error;
    try {
      response = moderator_->generate(request);
    } catch (const std::exception& e) {
      error = e.what();
    }
    Jobs more;
    {
      std::lock_guard lock(slot->mu);
      finish_render(slot, action, std::move(response), std::move(error), more);
    }
    dispatch(more);
  });
}

void RoomHub::finish_render(const std::shared_ptr<Slot>& slot, const ModeratorAction& action,
                            std::optional<ProviderResponse> response, std::string error, Jobs& jobs) {
  slot->in_flight = false;
  if (shutting_down_) return;
  auto& room = slot->room;
  if (!response) {
    broadcast(*slot, make_error("provider_failure", error));
    slot->retry_at = now() + options_.retry_backoff;
    return;
  }

  std::optional<QAPair> revealed;
  if (action.kind == ActionKind::RevealAnswer) {
    revealed = room.current_question();
    // A student who rejoined while the reveal was being written gets no say.
    for (const auto& p : room.participants())
      if (p.active && !p.responded_current_question && !p.prompt_round_complete)
        room.mark_prompt_round_complete(p.participant_id);
  }

  apply_moderator_message(*slot->history, &slot->archive, action, response->text,
                          stamp(slot->history->next_seq()));
  slot->latency.push_back({slot->latency.size(), response->latency_seconds, action.key()});

  json payload = {{"text_markdown", response->text},
                  {"action", action.key()},
                  {"kind", to_string(action.kind)},
                  {"latency_seconds", response->latency_seconds}};
  if (action.kind == ActionKind::PromptStudent || action.kind == ActionKind::GiveHint)
    payload["target"] = action.student;
  if (action.kind == ActionKind::AskQuestion || action.kind == ActionKind::RevealAnswer)
    payload["index"] = action.question_index;
  broadcast(*slot, server_envelope(event::kModeratorMessage, std::move(payload), "Moderator"));
  if (revealed)
    broadcast(*slot, server_envelope(event::kQuestionRevealed,
                                     {{"index", action.question_index}, {"answer", revealed->answer}}));

  slot->policy.applied(action, room);
  slot->last_activity = now();
  pump(slot, jobs);
}

void RoomHub::start_feedback(const std::shared_ptr<Slot>& slot, Jobs& jobs) {
  slot->feedback_started = true;
  slot->in_flight = true;
  jobs.push_back([this, slot, roster = slot->room.roster(), transcript = slot->archive] {
    auto report = generate_feedback(roster, transcript, *moderator_);
    std::lock_guard lock(slot->mu);
    finish_feedback(slot, std::move(report), {});
  });
}

void RoomHub::finish_feedback(const std::shared_ptr<Slot>& slot, FeedbackReport report, std::vector<double>) {
  slot->in_flight = false;
  if (shutting_down_) return;
  for (const auto& name : slot->room.roster()) {
    const auto& entry = report.per_student[name];
    json payload = {{"name", name}, {"feedback_text", entry.feedback_text}, {"stats", stats_json(entry.stats)}};
    if (entry.error) payload["error"] = *entry.error;
    broadcast(*slot, server_envelope(event::kFeedbackDelivered, std::move(payload)));
  }
  slot->room.close();
  write_archive(*slot);
}

void RoomHub::write_archive(const Slot& slot) const {
  if (!options_.archive_dir) return;
  std::filesystem::create_directories(*options_.archive_dir);
  std::ofstream out(*options_.archive_dir / (slot.room.id().str() + ".transcript"));
  write_transcript(out, slot.archive);
}

void RoomHub::tick() {
  for (const auto& slot : rooms_->snapshot()) {
    Jobs jobs;
    {
      std::lock_guard lock(slot->mu);
      if (slot->in_flight || shutting_down_ || !slot->history) continue;
      const auto t = now();
      if (slot->retry_at) {
        if (t >= *slot->retry_at) {
          slot->retry_at.reset();
          pump(slot, jobs);
        }
      } else if (slot->policy.awaiting_students(slot->room) && t - slot->last_activity >= options_.idle_prompt) {
        slot->last_activity = t;
        if (auto action = slot->policy.on_idle(slot->room)) start_render(slot, *action, jobs);
      }
    }
    dispatch(jobs);
  }
}

void RoomHub::shutdown() {
  shutting_down_ = true;
  for (const auto& slot : rooms_->snapshot()) {
    std::lock_guard lock(slot->mu);
    if (slot->room.phase() != SessionPhase::Closed)
      broadcast(*slot, make_error("shutting_down", "server is shutting down"));
  }
}

// ---------------------------------------------------------------------------
// Introspection

std::size_t RoomHub::room_count() const { return rooms_->size(); }

std::vector<RoomId> RoomHub::room_ids() const {
  std::vector<RoomId> ids;
  for (const auto& slot : rooms_->snapshot()) ids.push_back(slot->room_id());
  return ids;
}

std::vector<Envelope> RoomHub::room_log(const RoomId& id) const {
  auto slot = slot_of(id);
  if (!slot) return {};
  std::lock_guard lock(slot->mu);
  return slot->log;
}

std::optional<Transcript> RoomHub::room_archive(const RoomId& id) const {
  auto slot = slot_of(id);
  if (!slot) return std::nullopt;
  std::lock_guard lock(slot->mu);
  return slot->archive;
}

std::optional<SessionPhase> RoomHub::room_phase(const RoomId& id) const {
  auto slot = slot_of(id);
  if (!slot) return std::nullopt;
  std::lock_guard lock(slot->mu);
  return slot->room.phase();
}

std::vector<std::string> RoomHub::room_roster(const RoomId& id) const {
  auto slot = slot_of(id);
  if (!slot) return {};
  std::lock_guard lock(slot->mu);
  return slot->room.roster();
}

std::vector<LatencySample> RoomHub::room_latency(const RoomId& id) const {
  auto slot = slot_of(id);
  if (!slot) return {};
  std::lock_guard lock(slot->mu);
  return slot->latency;
}

std::optional<RoomId> RoomHub::room_of(ConnId conn) const {
  auto m = member_of(conn);
  if (!m) return std::nullopt;
  return m->room;
}

// ---------------------------------------------------------------------------
// GatewayServer

struct GatewayServer::Connection {
  ConnId id = 0;
  Socket socket;
  std::mutex mu;
  std::condition_variable cv;
  std::deque<std::string> outbox;
  bool closing = false;
  bool flush_then_close = false;
  std::atomic<int> missed_pongs{0};
  std::atomic<bool> finished{false};
  std::thread reader;
  std::thread writer;

  bool enqueue(std::string frame) {
    std::lock_guard lock(mu);
    if (closing) return false;
    outbox.push_back(std::move(frame));
    cv.notify_all();
    return true;
  }

  void close(bool flush) {
    {
      std::lock_guard lock(mu);
      closing = true;
      flush_then_close = flush_then_close || flush;
      cv.notify_all();
    }
    if (!flush) socket.shutdown();
  }

  void write_loop() {
    for (;;) {
      std::string frame;
      {
        std::unique_lock lock(mu);
        cv.wait(lock, [&] { return closing || !outbox.empty(); });
        if (outbox.empty() || (closing && !flush_then_close)) break;
        frame = std::move(outbox.front());
        outbox.pop_front();
      }
      if (!socket.write_all(frame)) {
        std::lock_guard lock(mu);
        closing = true;
        break;
      }
    }
    socket.shutdown();
  }
};

GatewayServer::GatewayServer(ServerOptions options, HubOptions hub_options, std::shared_ptr<const Dataset> dataset,
                             ProviderPtr moderator)
    : options_(std::move(options)) {
  hub_ = std::make_unique<RoomHub>(std::move(hub_options), std::move(dataset), std::move(moderator),
                                   [this](ConnId id, const Envelope& env) { return deliver(id, env); });
}

GatewayServer::~GatewayServer() {
  stop();
  hub_.reset();
}

void GatewayServer::start() {
  listener_ = listen_tcp(options_.host, options_.port);
  port_ = local_port(listener_);
  running_ = true;
  acceptor_ = std::thread([this] { accept_loop(); });
  ticker_ = std::thread([this] { tick_loop(); });
}

void GatewayServer::stop() {
  if (!running_.exchange(false)) return;
  hub_->shutdown();
  ::shutdown(listener_.fd(), SHUT_RDWR);
  tick_cv_.notify_all();
  if (acceptor_.joinable()) acceptor_.join();
  if (ticker_.joinable()) ticker_.join();

  std::vector<std::shared_ptr<Connection>> all;
  {
    std::lock_guard lock(conns_mu_);
    for (auto& [id, c] : conns_) all.push_back(c);
    for (auto& c : closed_) all.push_back(c);
    closed_.clear();
  }
  for (auto& c : all) c->close(true);
  for (auto& c : all) {
    if (c->writer.joinable()) c->writer.join();
    if (c->reader.joinable()) c->reader.join();
  }
  std::lock_guard lock(conns_mu_);
  conns_.clear();
}

std::size_t GatewayServer::connection_count() const {
  std::lock_guard lock(conns_mu_);
  return conns_.size();
}

void GatewayServer::accept_loop() {
  while (running_) {
    int fd = ::accept(listener_.fd(), nullptr, nullptr);
    if (fd < 0) {
      if (!running_) break;
      continue;
    }
    auto conn = std::make_shared<Connection>();
    conn->id = next_conn_++;
    conn->socket = Socket(fd);
    {
      std::lock_guard lock(conns_mu_);
      if (!running_) break;
      conns_[conn->id] = conn;
    }
    conn->writer = std::thread([conn] { conn->write_loop(); });
    conn->reader = std::thread([this, conn] { serve(conn); });
  }
}

void GatewayServer::serve(const std::shared_ptr<Connection>& conn) {
  auto send_error = [&](std::string_view code, const std::string& detail) {
    auto env = make_error(code, detail);
    conn->enqueue(encode_frame(env.to_json()));
  };
  bool flushing = false;
  for (;;) {
    std::optional<std::string> frame;
    try {
      frame = conn->socket.read_frame(options_.max_frame_bytes);
    } catch (const ProtocolError& e) {
      send_error("protocol_error", e.what());
      conn->close(true);
      flushing = true;
      break;
    }
    if (!frame) break;
    if (frame->empty()) {
      conn->missed_pongs = 0;
      continue;
    }
    Envelope env;
    try {
      env = Envelope::parse(*frame);
    } catch (const ProtocolError& e) {
      send_error("protocol_error", e.what());
      conn->close(true);
      flushing = true;
      break;
    }
    if (!event::is_client_type(env.type)) {
      send_error("unknown_type", fmt::format("unknown event type '{}'", env.type));
      continue;
    }
    hub_->handle_client_event(conn->id, env);
  }
  hub_->handle_disconnect(conn->id);
  if (!flushing) conn->close(false);
  std::lock_guard lock(conns_mu_);
  if (conns_.erase(conn->id)) closed_.push_back(conn);
  conn->finished = true;
}

bool GatewayServer::deliver(ConnId id, const Envelope& env) {
  std::shared_ptr<Connection> conn;
  {
    std::lock_guard lock(conns_mu_);
    auto it = conns_.find(id);
    if (it == conns_.end()) return false;
    conn = it->second;
  }
  return conn->enqueue(encode_frame(env.to_json()));
}

void GatewayServer::reap_closed() {
  std::vector<std::shared_ptr<Connection>> done;
  {
    std::lock_guard lock(conns_mu_);
    auto split = std::stable_partition(closed_.begin(), closed_.end(),
                                       [](const auto& c) { return !c->finished.load(); });
    done.assign(split, closed_.end());
    closed_.erase(split, closed_.end());
  }
  for (auto& c : done) {
    c->close(false);
    if (c->writer.joinable()) c->writer.join();
    if (c->reader.joinable()) c->reader.join();
  }
}

void GatewayServer::tick_loop() {
  auto next_heartbeat = SteadyClock::now() + options_.heartbeat;
  std::unique_lock lock(tick_mu_);
  while (running_) {
    tick_cv_.wait_for(lock, options_.tick, [&] { return !running_.load(); });
    if (!running_) break;
    lock.unlock();
    hub_->tick();
    if (SteadyClock::now() >= next_heartbeat) {
      next_heartbeat = SteadyClock::now() + options_.heartbeat;
      std::vector<std::shared_ptr<Connection>> live;
      {
        std::lock_guard clock(conns_mu_);
        for (auto& [id, c] : conns_) live.push_back(c);
      }
      for (auto& c : live) {
        if (c->missed_pongs >= 2) {
          c->close(false);
        } else {
          ++c->missed_pongs;
          c->enqueue(encode_frame({}));
        }
      }
    }
    reap_closed();
    lock.lock();
  }
}

}  // namespace discourse
