#include "discourse/session_core.hpp"

#include <algorithm>
#include <tuple>

#include <fmt/format.h>

namespace discourse {

std::string_view to_string(SessionErrc code) {
  switch (code) {
    case SessionErrc::NameInvalid: return "name_invalid";
    case SessionErrc::IdSpaceExhausted: return "id_space_exhausted";
    case SessionErrc::WrongPhase: return "wrong_phase";
    case SessionErrc::UnknownParticipant: return "unknown_participant";
    case SessionErrc::NotAllResponded: return "not_all_responded";
  }
  return "unknown";
}

SessionError::SessionError(SessionErrc code, const std::string& detail)
    : std::runtime_error(fmt::format("{}: {}", to_string(code), detail)), code_(code) {}

std::string_view to_string(SessionPhase phase) {
  switch (phase) {
    case SessionPhase::Lobby: return "lobby";
    case SessionPhase::Discussion: return "discussion";
    case SessionPhase::Feedback: return "feedback";
    case SessionPhase::Closed: return "closed";
  }
  return "unknown";
}

// ---------------------------------------------------------------------------
// RoomId

RoomId::RoomId(std::string value) : value_(std::move(value)) {
  if (!is_valid(value_)) throw std::invalid_argument("malformed room id: " + value_);
}

bool RoomId::is_valid(std::string_view text) noexcept {
  if (text.size() != kLength) return false;
  return std::all_of(text.begin(), text.end(),
                     [](char c) { return kAlphabet.find(c) != std::string_view::npos; });
}

std::optional<RoomId> RoomId::parse(std::string_view text) {
  if (!is_valid(text)) return std::nullopt;
  return RoomId(std::string(text));
}

RoomId RoomIdGenerator::next() {
  std::uniform_int_distribution<std::size_t> pick(0, RoomId::kAlphabet.size() - 1);
  std::string out(RoomId::kLength, ' ');
  for (auto& c : out) c = RoomId::kAlphabet[pick(rng_)];
  return RoomId(std::move(out));
}

// ---------------------------------------------------------------------------
// Room

namespace {

bool is_space(char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v'; }

bool ordered_before(const Participant& a, const Participant& b) {
  return std::tie(a.message_count, a.joined_at, a.join_order) <
         std::tie(b.message_count, b.joined_at, b.join_order);
}

}  // namespace

std::string normalize_display_name(std::string_view display_name) {
  auto first = std::find_if_not(display_name.begin(), display_name.end(), is_space);
  auto last = std::find_if_not(display_name.rbegin(), display_name.rend(), is_space).base();
  if (first >= last) throw SessionError(SessionErrc::NameInvalid, "display name is empty");
  return std::string(first, last);
}

Room::Room(RoomId id, RoomConfig config, PassagePicker pick_passage, TimePoint created_at)
    : id_(std::move(id)), config_(config), pick_passage_(std::move(pick_passage)), created_at_(created_at) {
  if (config_.capacity == 0) throw std::invalid_argument("room capacity must be positive");
  if (config_.max_questions == 0) throw std::invalid_argument("max_questions must be positive");
}

std::size_t Room::question_count() const noexcept {
  if (!passage_) return 0;
  return std::min(config_.max_questions, passage_->qa_pairs.size());
}

const QAPair& Room::current_question() const {
  require_phase(SessionPhase::Discussion, "current_question");
  return passage_->qa_pairs.at(question_index_);
}

const Participant* Room::find(std::string_view participant_id) const noexcept {
  for (const auto& p : participants_)
    if (p.participant_id == participant_id) return &p;
  return nullptr;
}

Participant* Room::find_mut(std::string_view participant_id) noexcept {
  return const_cast<Participant*>(std::as_const(*this).find(participant_id));
}

const Participant* Room::find_by_name(std::string_view display_name) const noexcept {
  for (const auto& p : participants_)
    if (p.display_name == display_name) return &p;
  return nullptr;
}

std::vector<std::string> Room::roster() const {
  std::vector<std::string> names;
  for (const auto& p : participants_) names.push_back(p.display_name);
  return names;
}

std::vector<std::string> Room::active_roster() const {
  std::vector<std::string> names;
  for (const auto& p : participants_)
    if (p.active) names.push_back(p.display_name);
  return names;
}

void Room::require_phase(SessionPhase expected, std::string_view op) const {
  if (phase_ != expected)
    throw SessionError(SessionErrc::WrongPhase,
                       fmt::format("{} requires phase {}, room {} is in {}", op, to_string(expected),
                                   id_.str(), to_string(phase_)));
}

std::string Room::unique_display_name(std::string_view base) const {
  if (!find_by_name(base)) return std::string(base);
  for (std::size_t n = 2;; ++n) {
    auto candidate = fmt::format("{}-{}", base, n);
    if (!find_by_name(candidate)) return candidate;
  }
}

void Room::start_discussion() {
  passage_ = pick_passage_();
  if (passage_->qa_pairs.empty())
    throw std::logic_error("selected passage has no QA pairs: " + passage_->passage_id);
  question_index_ = 0;
  phase_ = SessionPhase::Discussion;
}

JoinOutcome Room::join(std::string_view display_name, TimePoint now) {
  auto name = normalize_display_name(display_name);

  if (phase_ != SessionPhase::Lobby) {
    auto* existing = const_cast<Participant*>(find_by_name(name));
    if (existing && !existing->active && phase_ != SessionPhase::Closed) {
      existing->active = true;
      return Joined{*existing, false, true};
    }
    if (phase_ == SessionPhase::Discussion && participants_.size() >= config_.capacity) return RoomFull{};
    return AlreadyStarted{};
  }
  if (participants_.size() >= config_.capacity) return RoomFull{};

  Participant p;
  p.join_order = next_join_order_++;
  p.participant_id = fmt::format("{}-p{}", id_.str(), p.join_order);
  p.display_name = unique_display_name(name);
  p.joined_at = now;
  participants_.push_back(p);

  bool auto_started = false;
  if (participants_.size() == config_.capacity) {
    start_discussion();
    auto_started = true;
  }
  return Joined{p, auto_started, false};
}

void Room::leave(std::string_view participant_id) {
  if (phase_ == SessionPhase::Lobby) {
    auto it = std::find_if(participants_.begin(), participants_.end(),
                           [&](const Participant& p) { return p.participant_id == participant_id; });
    if (it == participants_.end())
      throw SessionError(SessionErrc::UnknownParticipant, std::string(participant_id));
    participants_.erase(it);
    return;
  }
  auto* p = find_mut(participant_id);
  if (!p) throw SessionError(SessionErrc::UnknownParticipant, std::string(participant_id));
  p->active = false;
}

void Room::record_student_message(std::string_view participant_id) {
  require_phase(SessionPhase::Discussion, "record_student_message");
  auto* p = find_mut(participant_id);
  if (!p) throw SessionError(SessionErrc::UnknownParticipant, std::string(participant_id));
  ++p->message_count;
  p->responded_current_question = true;
}

bool Room::all_responded() const {
  require_phase(SessionPhase::Discussion, "all_responded");
  return std::all_of(participants_.begin(), participants_.end(),
                     [](const Participant& p) { return !p.active || p.responded_current_question; });
}

bool Room::all_had_chance() const {
  require_phase(SessionPhase::Discussion, "all_had_chance");
  return std::all_of(participants_.begin(), participants_.end(), [](const Participant& p) {
    return !p.active || p.responded_current_question || p.prompt_round_complete;
  });
}

const Participant& Room::least_active_participant() const {
  require_phase(SessionPhase::Discussion, "least_active_participant");
  const auto* best = least_active_participant([](const Participant&) { return true; });
  if (!best) throw SessionError(SessionErrc::UnknownParticipant, "no active participants");
  return *best;
}

const Participant* Room::least_active_participant(
    const std::function<bool(const Participant&)>& filter) const {
  const Participant* best = nullptr;
  for (const auto& p : participants_) {
    if (!p.active || !filter(p)) continue;
    if (!best || ordered_before(p, *best)) best = &p;
  }
  return best;
}

void Room::mark_prompt_round_complete(std::string_view participant_id) {
  require_phase(SessionPhase::Discussion, "mark_prompt_round_complete");
  auto* p = find_mut(participant_id);
  if (!p) throw SessionError(SessionErrc::UnknownParticipant, std::string(participant_id));
  p->prompt_round_complete = true;
}

AdvanceOutcome Room::advance_question() {
  require_phase(SessionPhase::Discussion, "advance_question");
  if (!all_had_chance())
    throw SessionError(SessionErrc::NotAllResponded,
                       fmt::format("question {} still awaits responses", question_index_));
  for (auto& p : participants_) {
    p.responded_current_question = false;
    p.prompt_round_complete = false;
  }
  if (question_index_ + 1 >= question_count()) {
    phase_ = SessionPhase::Feedback;
    return DiscussionComplete{};
  }
  ++question_index_;
  return NextQuestion{question_index_};
}

void Room::close() {
  require_phase(SessionPhase::Feedback, "close");
  phase_ = SessionPhase::Closed;
}

// ---------------------------------------------------------------------------

CreatedRoom create_room(std::string_view display_name, const RoomConfig& config, RoomIdGenerator& ids,
                        const std::function<bool(const RoomId&)>& is_taken, PassagePicker pick_passage,
                        TimePoint now) {
  auto name = normalize_display_name(display_name);
  constexpr int kMaxAttempts = 100;
  for (int attempt = 0; attempt < kMaxAttempts; ++attempt) {
    RoomId id = ids.next();
    if (is_taken(id)) continue;
    Room room(id, config, std::move(pick_passage), now);
    auto joined = std::get<Joined>(room.join(name, now));
    return CreatedRoom{id, std::move(room), joined.participant, joined.auto_started};
  }
  throw SessionError(SessionErrc::IdSpaceExhausted,
                     fmt::format("no free room id after {} attempts", kMaxAttempts));
}

}  // namespace discourse
