#pragma once

#include <cstddef>
#include <cstdint>
#include <deque>
#include <iosfwd>
#include <map>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "discourse/dataset_store.hpp"
#include "discourse/llm_provider.hpp"
#include "discourse/session_core.hpp"

namespace discourse {

// Token approximation used for every budget in the system:
// ceil(code_points / 4), never less than 1.
std::size_t count_tokens(std::string_view text);

enum class Role { Moderator, Student, System };

std::string_view to_string(Role role);
std::optional<Role> parse_role(std::string_view token);

struct HistoryEntry {
  Role role = Role::System;
  std::string name;
  std::string text;
  std::size_t token_len = 1;
  std::uint64_t seq = 0;
  std::int64_t ts = 0;
  // Directive key of the moderator action that produced the entry ("ask:0",
  // "prompt:Ethan", ...), "system_prompt"/"roster" for system entries, empty
  // for student messages.
  std::string action;
};

struct AppendResult {
  std::size_t removed = 0;
  // The newest entry plus the system prompt alone exceed the budget.
  bool over_budget = false;
};

// Provider context window: a pinned system entry followed by the most recent
// entries whose combined token count fits the budget.
class ConversationHistory {
 public:
  static constexpr std::size_t kDefaultBudget = 5000;

  ConversationHistory(std::string system_prompt, std::size_t budget = kDefaultBudget, std::int64_t ts = 0);

  // Appends a new entry (seq and token_len assigned here), then drops whole
  // oldest entries until the total fits. The appended entry is never dropped.
  AppendResult append_and_trim(Role role, std::string name, std::string text, std::int64_t ts,
                               std::string action = {});

  const HistoryEntry& system_entry() const noexcept { return system_; }
  const std::deque<HistoryEntry>& entries() const noexcept { return entries_; }
  std::size_t token_total() const noexcept { return token_total_; }
  std::size_t budget() const noexcept { return budget_; }
  std::uint64_t next_seq() const noexcept { return next_seq_; }
  const HistoryEntry& last() const;

  std::vector<ProviderMessage> project() const;

 private:
  HistoryEntry system_;
  std::deque<HistoryEntry> entries_;
  std::size_t token_total_ = 0;
  std::size_t budget_;
  std::uint64_t next_seq_ = 1;
};

// Untrimmed, seq-ordered session record. Entry 0 is the system prompt.
using Transcript = std::vector<HistoryEntry>;

class TranscriptError : public std::runtime_error {
 public:
  TranscriptError(std::size_t line, const std::string& detail);
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

// Archive format: first line "#discourse-transcript<TAB>1", then one entry per
// line with tab-separated columns
//   seq  ts  role  name  token_len  action  text
// role is moderator|student|system; name, action and text escape backslash,
// tab, CR and LF as \\ \t \r \n. An empty action is written as "-".
void write_transcript(std::ostream& out, const Transcript& transcript);
std::string transcript_to_string(const Transcript& transcript);
Transcript read_transcript(std::istream& in);

// Roster recorded in the transcript's "roster" system entry, or the student
// names in order of first message when that entry is missing.
std::vector<std::string> roster_from_transcript(const Transcript& transcript);

// ---------------------------------------------------------------------------

enum class EngineErrc { EmptyRoster, EmptyQuiz, WrongPhase };

class EngineError : public std::runtime_error {
 public:
  EngineError(EngineErrc code, const std::string& detail);
  EngineErrc code() const noexcept { return code_; }

 private:
  EngineErrc code_;
};

std::string build_system_prompt(const std::vector<std::string>& names, const Passage& passage,
                                const std::vector<QAPair>& qa_subset);

// The room's passage restricted to the questions the session will use.
std::vector<QAPair> session_questions(const Room& room);

enum class ActionKind { OpenDiscussion, PresentPassage, AskQuestion, PromptStudent, GiveHint, RevealAnswer, WrapUp };

std::string_view to_string(ActionKind kind);

struct ModeratorAction {
  ActionKind kind = ActionKind::OpenDiscussion;
  std::size_t question_index = 0;  // AskQuestion, RevealAnswer
  std::string student;             // PromptStudent target, GiveHint requester

  // "open", "present", "ask:<i>", "prompt:<name>", "hint:<name>", "reveal:<i>", "wrapup"
  std::string key() const;
  static std::optional<ModeratorAction> from_key(std::string_view key);

  bool operator==(const ModeratorAction&) const = default;
};

// Deterministic moderation policy:
//   OpenDiscussion -> PresentPassage -> AskQuestion(i) -> wait for students.
// Students answer on their own; once the room has been quiet for the idle
// window (on_idle), the least active silent student is prompted by name, one
// prompt per student per question. A prompted student who stays silent
// through the next idle window has had a chance to respond. RevealAnswer(i)
// is only produced once every active student responded or had that chance.
// After the last reveal the room is in Feedback and WrapUp follows.
class TurnPolicy {
 public:
  // Throws EngineError(WrongPhase) in Lobby and Closed.
  std::optional<ModeratorAction> next_action(const Room& room) const;

  // Called when the room has been idle for the configured window.
  std::optional<ModeratorAction> on_idle(Room& room);

  void request_hint(std::string requester);

  // Records that `action` was delivered. For RevealAnswer this advances the
  // room to the next question (or to Feedback) and returns the outcome.
  std::optional<AdvanceOutcome> applied(const ModeratorAction& action, Room& room);

  bool wrapped_up() const noexcept { return wrapped_; }
  bool awaiting_students(const Room& room) const;

 private:
  bool opened_ = false;
  bool presented_ = false;
  std::optional<std::size_t> asked_;
  std::set<std::string> prompted_;  // display names, current question
  std::deque<std::string> hint_requests_;
  bool wrapped_ = false;
};

ProviderRequest build_moderator_request(const ModeratorAction& action, const Room& room,
                                        const ConversationHistory& history);

// Appends the rendered text as a Moderator entry to the context history and,
// when given, the archive.
AppendResult apply_moderator_message(ConversationHistory& history, Transcript* archive,
                                     const ModeratorAction& action, std::string text, std::int64_t ts);

struct RenderResult {
  std::string text;
  double latency_seconds = 0.0;
  AppendResult append;
};

// Synchronous render: provider call, then append. A ProviderError leaves
// `history` and `archive` untouched.
RenderResult render_moderator_message(const ModeratorAction& action, const Room& room,
                                      ConversationHistory& history, Provider& provider,
                                      Transcript* archive = nullptr, std::int64_t ts = 0);

struct StudentStats {
  std::size_t message_count = 0;
  double mean_message_tokens = 0.0;
  std::size_t prompted_count = 0;
};

struct StudentFeedback {
  std::string feedback_text;
  StudentStats stats;
  std::optional<std::string> error;  // provider failure for this student
};

struct FeedbackReport {
  std::map<std::string, StudentFeedback> per_student;
};

std::map<std::string, StudentStats> participation_stats(const std::vector<std::string>& roster,
                                                         const Transcript& transcript);

ProviderRequest build_feedback_request(const std::string& student, const Transcript& transcript);

// One provider call per student over the full transcript.
FeedbackReport generate_feedback(const std::vector<std::string>& roster, const Transcript& transcript,
                                 Provider& provider);
// Requires the room to be in Feedback.
FeedbackReport generate_feedback(const Room& room, const Transcript& transcript, Provider& provider);

}  // namespace discourse
