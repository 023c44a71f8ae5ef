#pragma once

#include <chrono>
#include <compare>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "discourse/dataset_store.hpp"

namespace discourse {

using SteadyClock = std::chrono::steady_clock;
using TimePoint = SteadyClock::time_point;

enum class SessionErrc {
  NameInvalid,
  IdSpaceExhausted,
  WrongPhase,
  UnknownParticipant,
  NotAllResponded,
};

std::string_view to_string(SessionErrc code);

class SessionError : public std::runtime_error {
 public:
  SessionError(SessionErrc code, const std::string& detail);
  SessionErrc code() const noexcept { return code_; }

 private:
  SessionErrc code_;
};

// Meeting ID: 8 characters drawn from an uppercase alphabet without 0/O/1/I.
class RoomId {
 public:
  static constexpr std::size_t kLength = 8;
  static constexpr std::string_view kAlphabet = "23456789ABCDEFGHJKLMNPQRSTUVWXYZ";

  RoomId() = default;
  // Throws std::invalid_argument when the text is not a well-formed id.
  explicit RoomId(std::string value);

  static bool is_valid(std::string_view text) noexcept;
  static std::optional<RoomId> parse(std::string_view text);

  const std::string& str() const noexcept { return value_; }
  bool empty() const noexcept { return value_.empty(); }

  auto operator<=>(const RoomId&) const = default;

 private:
  std::string value_;
};

class RoomIdGenerator {
 public:
  explicit RoomIdGenerator(std::uint64_t seed) : rng_(seed) {}
  RoomId next();

 private:
  std::mt19937_64 rng_;
};

enum class SessionPhase { Lobby, Discussion, Feedback, Closed };

std::string_view to_string(SessionPhase phase);

struct Participant {
  std::string participant_id;
  std::string display_name;
  TimePoint joined_at{};
  std::uint64_t join_order = 0;
  std::size_t message_count = 0;
  bool responded_current_question = false;
  // Set once the participant's single prompt for the current question has
  // gone unanswered long enough; counts as having had a chance to respond.
  bool prompt_round_complete = false;
  bool active = true;
};

struct RoomConfig {
  std::size_t capacity = 4;
  std::size_t max_questions = 3;
};

using PassagePicker = std::function<Passage()>;

struct Joined {
  Participant participant;
  bool auto_started = false;
  bool rejoined = false;
};
struct RoomFull {};
struct AlreadyStarted {};
struct NotFound {};

using JoinOutcome = std::variant<Joined, RoomFull, AlreadyStarted, NotFound>;

struct NextQuestion {
  std::size_t index = 0;
};
struct DiscussionComplete {};

using AdvanceOutcome = std::variant<NextQuestion, DiscussionComplete>;

class Room {
 public:
  Room(RoomId id, RoomConfig config, PassagePicker pick_passage, TimePoint created_at);

  const RoomId& id() const noexcept { return id_; }
  std::size_t capacity() const noexcept { return config_.capacity; }
  const RoomConfig& config() const noexcept { return config_; }
  SessionPhase phase() const noexcept { return phase_; }
  const std::vector<Participant>& participants() const noexcept { return participants_; }
  const std::optional<Passage>& passage() const noexcept { return passage_; }
  std::size_t question_index() const noexcept { return question_index_; }
  // min(max_questions, |qa_pairs|) once a passage is set, else 0.
  std::size_t question_count() const noexcept;
  const QAPair& current_question() const;
  TimePoint created_at() const noexcept { return created_at_; }

  const Participant* find(std::string_view participant_id) const noexcept;
  const Participant* find_by_name(std::string_view display_name) const noexcept;
  std::vector<std::string> roster() const;
  std::vector<std::string> active_roster() const;

  // Adds a participant. Reaching capacity picks the passage and moves the
  // room to Discussion exactly once. A name that matches an inactive member
  // of a started room reactivates that member.
  JoinOutcome join(std::string_view display_name, TimePoint now);

  // Lobby: the participant is removed. Later phases: marked inactive.
  void leave(std::string_view participant_id);

  void record_student_message(std::string_view participant_id);

  bool all_responded() const;
  // all_responded, except that a participant whose prompt round completed
  // without an answer no longer blocks.
  bool all_had_chance() const;

  const Participant& least_active_participant() const;
  // Same ordering restricted to active participants accepted by `filter`.
  const Participant* least_active_participant(
      const std::function<bool(const Participant&)>& filter) const;

  void mark_prompt_round_complete(std::string_view participant_id);

  AdvanceOutcome advance_question();

  void close();

 private:
  Participant* find_mut(std::string_view participant_id) noexcept;
  void require_phase(SessionPhase expected, std::string_view op) const;
  std::string unique_display_name(std::string_view base) const;
  void start_discussion();

  RoomId id_;
  RoomConfig config_;
  PassagePicker pick_passage_;
  TimePoint created_at_;
  SessionPhase phase_ = SessionPhase::Lobby;
  std::vector<Participant> participants_;
  std::optional<Passage> passage_;
  std::size_t question_index_ = 0;
  std::uint64_t next_join_order_ = 0;
};

struct CreatedRoom {
  RoomId id;
  Room room;
  Participant creator;
  bool auto_started = false;
};

// Validates and trims a display name; throws NameInvalid.
std::string normalize_display_name(std::string_view display_name);

// Creates a room whose id is unique according to `is_taken`, retrying up to
// 100 times before failing with IdSpaceExhausted.
CreatedRoom create_room(std::string_view display_name, const RoomConfig& config,
                        RoomIdGenerator& ids,
                        const std::function<bool(const RoomId&)>& is_taken,
                        PassagePicker pick_passage, TimePoint now);

// Thread-safe id → slot map for live rooms. Each slot carries its own lock;
// the directory lock only guards membership of the map.
template <class Slot>
class RoomDirectory {
 public:
  explicit RoomDirectory(std::uint64_t seed) : ids_(seed) {}

  // `make` receives the freshly reserved id and builds the slot.
  template <class Make>
  std::pair<RoomId, std::shared_ptr<Slot>> emplace(const Make& make) {
    std::lock_guard lock(mu_);
    auto taken = [this](const RoomId& id) { return rooms_.count(id) != 0; };
    auto slot = make(ids_, taken);
    RoomId id = slot->room_id();
    rooms_.emplace(id, slot);
    return {id, slot};
  }

  std::shared_ptr<Slot> find(const RoomId& id) const {
    std::lock_guard lock(mu_);
    auto it = rooms_.find(id);
    return it == rooms_.end() ? nullptr : it->second;
  }

  void erase(const RoomId& id) {
    std::lock_guard lock(mu_);
    rooms_.erase(id);
  }

  std::vector<std::shared_ptr<Slot>> snapshot() const {
    std::lock_guard lock(mu_);
    std::vector<std::shared_ptr<Slot>> out;
    out.reserve(rooms_.size());
    for (const auto& [id, slot] : rooms_) out.push_back(slot);
    return out;
  }

  std::size_t size() const {
    std::lock_guard lock(mu_);
    return rooms_.size();
  }

 private:
  mutable std::mutex mu_;
  RoomIdGenerator ids_;
  std::map<RoomId, std::shared_ptr<Slot>> rooms_;
};

}  // namespace discourse
