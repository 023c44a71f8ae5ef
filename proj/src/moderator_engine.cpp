#include "discourse/moderator_engine.hpp"

#include <algorithm>
#include <charconv>
#include <istream>
#include <ostream>
#include <sstream>

#include <fmt/format.h>

namespace discourse {

std::size_t count_tokens(std::string_view text) {
  std::size_t code_points = 0;
  for (unsigned char c : text)
    if ((c & 0xC0) != 0x80) ++code_points;
  return std::max<std::size_t>(1, (code_points + 3) / 4);
}

std::string_view to_string(Role role) {
  switch (role) {
    case Role::Moderator: return "moderator";
    case Role::Student: return "student";
    case Role::System: return "system";
  }
  return "system";
}

std::optional<Role> parse_role(std::string_view token) {
  if (token == "moderator") return Role::Moderator;
  if (token == "student") return Role::Student;
  if (token == "system") return Role::System;
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// ConversationHistory

ConversationHistory::ConversationHistory(std::string system_prompt, std::size_t budget, std::int64_t ts)
    : budget_(budget) {
  if (budget_ == 0) throw std::invalid_argument("history budget must be positive");
  system_.role = Role::System;
  system_.name = "moderator";
  system_.token_len = count_tokens(system_prompt);
  system_.text = std::move(system_prompt);
  system_.seq = 0;
  system_.ts = ts;
  system_.action = "system_prompt";
  token_total_ = system_.token_len;
}

AppendResult ConversationHistory::append_and_trim(Role role, std::string name, std::string text,
                                                  std::int64_t ts, std::string action) {
  HistoryEntry entry;
  entry.role = role;
  entry.name = std::move(name);
  entry.token_len = count_tokens(text);
  entry.text = std::move(text);
  entry.seq = next_seq_++;
  entry.ts = ts;
  entry.action = std::move(action);

  token_total_ += entry.token_len;
  entries_.push_back(std::move(entry));

  AppendResult result;
  while (token_total_ > budget_ && entries_.size() > 1) {
    token_total_ -= entries_.front().token_len;
    entries_.pop_front();
    ++result.removed;
  }
  result.over_budget = token_total_ > budget_;
  return result;
}

const HistoryEntry& ConversationHistory::last() const {
  return entries_.empty() ? system_ : entries_.back();
}

std::vector<ProviderMessage> ConversationHistory::project() const {
  std::vector<ProviderMessage> out;
  out.reserve(entries_.size());
  for (const auto& e : entries_) out.push_back({std::string(to_string(e.role)), e.name, e.text});
  return out;
}

// ---------------------------------------------------------------------------
// Transcript archive

TranscriptError::TranscriptError(std::size_t line, const std::string& detail)
    : std::runtime_error(fmt::format("line {}: {}", line, detail)), line_(line) {}

namespace {

constexpr std::string_view kTranscriptHeader = "#discourse-transcript\t1";

std::string escape_field(std::string_view s) {
  std::string out;
  out.reserve(s.size());
  for (char c : s) {
    switch (c) {
      case '\\': out += "\\\\"; break;
      case '\t': out += "\\t"; break;
      case '\n': out += "\\n"; break;
      case '\r': out += "\\r"; break;
      default: out += c;
    }
  }
  return out;
}

std::string unescape_field(std::string_view s, std::size_t line) {
  std::string out;
  out.reserve(s.size());
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s[i] != '\\') {
      out += s[i];
      continue;
    }
    if (++i == s.size()) throw TranscriptError(line, "dangling escape");
    switch (s[i]) {
      case '\\': out += '\\'; break;
      case 't': out += '\t'; break;
      case 'n': out += '\n'; break;
      case 'r': out += '\r'; break;
      default: throw TranscriptError(line, fmt::format("unknown escape '\\{}'", s[i]));
    }
  }
  return out;
}

template <class Int>
Int parse_int(std::string_view s, std::size_t line, std::string_view column) {
  Int value{};
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), value);
  if (ec != std::errc() || ptr != s.data() + s.size())
    throw TranscriptError(line, fmt::format("bad {} '{}'", column, s));
  return value;
}

std::vector<std::string_view> split_tabs(std::string_view line) {
  std::vector<std::string_view> cols;
  std::size_t start = 0;
  for (;;) {
    auto tab = line.find('\t', start);
    cols.push_back(line.substr(start, tab == std::string_view::npos ? std::string_view::npos : tab - start));
    if (tab == std::string_view::npos) break;
    start = tab + 1;
  }
  return cols;
}

}  // namespace

void write_transcript(std::ostream& out, const Transcript& transcript) {
  out << kTranscriptHeader << '\n';
  for (const auto& e : transcript) {
    out << e.seq << '\t' << e.ts << '\t' << to_string(e.role) << '\t' << escape_field(e.name) << '\t'
        << e.token_len << '\t' << (e.action.empty() ? std::string("-") : escape_field(e.action)) << '\t'
        << escape_field(e.text) << '\n';
  }
}

std::string transcript_to_string(const Transcript& transcript) {
  std::ostringstream out;
  write_transcript(out, transcript);
  return out.str();
}

Transcript read_transcript(std::istream& in) {
  Transcript out;
  std::string line;
  std::size_t line_no = 0;
  bool header = false;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!header) {
      if (line != kTranscriptHeader) throw TranscriptError(line_no, "missing transcript header");
      header = true;
      continue;
    }
    if (line.empty()) continue;
    auto cols = split_tabs(line);
    if (cols.size() != 7) throw TranscriptError(line_no, fmt::format("expected 7 columns, found {}", cols.size()));

    HistoryEntry e;
    e.seq = parse_int<std::uint64_t>(cols[0], line_no, "seq");
    e.ts = parse_int<std::int64_t>(cols[1], line_no, "ts");
    auto role = parse_role(cols[2]);
    if (!role) throw TranscriptError(line_no, fmt::format("unknown role '{}'", cols[2]));
    e.role = *role;
    e.name = unescape_field(cols[3], line_no);
    e.token_len = parse_int<std::size_t>(cols[4], line_no, "token_len");
    e.action = cols[5] == "-" ? std::string() : unescape_field(cols[5], line_no);
    e.text = unescape_field(cols[6], line_no);
    if (e.token_len != count_tokens(e.text))
      throw TranscriptError(line_no, fmt::format("token_len {} does not match text ({} tokens)", e.token_len,
                                                 count_tokens(e.text)));
    if (!out.empty() && e.seq <= out.back().seq)
      throw TranscriptError(line_no, "seq must be strictly increasing");
    out.push_back(std::move(e));
  }
  if (!header) throw TranscriptError(line_no == 0 ? 1 : line_no, "empty transcript");
  return out;
}

std::vector<std::string> roster_from_transcript(const Transcript& transcript) {
  for (const auto& e : transcript) {
    if (e.role == Role::System && e.action == "roster") {
      std::vector<std::string> names;
      std::istringstream in(e.text);
      for (std::string name; std::getline(in, name);)
        if (!name.empty()) names.push_back(name);
      return names;
    }
  }
  std::vector<std::string> names;
  for (const auto& e : transcript)
    if (e.role == Role::Student && std::find(names.begin(), names.end(), e.name) == names.end())
      names.push_back(e.name);
  return names;
}

// ---------------------------------------------------------------------------
// System prompt

EngineError::EngineError(EngineErrc code, const std::string& detail) : std::runtime_error(detail), code_(code) {}

namespace {

constexpr std::string_view kPromptHead =
    "**Role: Moderator for a School Discussion**\n"
    "\n"
    "You are moderating a group chat for primary and lower secondary school students. Your main goal is to "
    "create a welcoming and inclusive environment where every student feels encouraged to participate and "
    "share their ideas.\n"
    "\n"
    "**Name of Students in the Discussion:**\n"
    "\n";

constexpr std::string_view kPromptBody =
    "\n"
    "**Your Responsibilities:**\n"
    "\n"
    "1. **Start the Discussion:**\n"
    "\n"
    "   - Introduce yourself as Moderator and explain the purpose of the discussion.\n"
    "\n"
    "   - Emphasize that everyone's input is important and will be treated with respect.\n"
    "\n"
    "2. **Present the Topic:**\n"
    "\n"
    "   - You will receive a passage and a related question.\n"
    "\n"
    "   - Read the passage for the students, ensuring they understand it.\n"
    "\n"
    "   - Present a question to the group and invite responses.\n"
    "\n"
    "3. **Encourage Participation:**\n"
    "\n"
    "   - Ensure every student has a chance to respond before revealing the correct answer.\n"
    "\n"
    "   - Encourage quieter students with supportive prompts like, “What do you think, [name]?”\n"
    "\n"
    "   - Maintain a respectful atmosphere where all ideas are valued.\n"
    "\n"
    "4. **Provide Feedback:**\n"
    "\n"
    "   - **Important:** Do not provide answers until all students have had a chance to respond.\n"
    "\n"
    "   - For incorrect answers, give constructive, age-appropriate feedback. Highlight positive aspects of "
    "their response and guide them gently toward the correct idea.\n"
    "\n"
    "   - Celebrate correct answers with encouragement after all students have responded.\n"
    "\n"
    "5. **Ensure Equal Engagement:**\n"
    "\n"
    "   - Balance the discussion by involving students who haven’t spoken and managing those who dominate "
    "the conversation.\n"
    "\n"
    "**Special Note:**\n"
    "\n"
    "- Base your response on the chat history.\n"
    "\n"
    "- Respond in properly formatted Markdown.\n"
    "\n"
    "**Quiz Passage and Questions:**\n";

}  // namespace

std::string build_system_prompt(const std::vector<std::string>& names, const Passage& passage,
                                const std::vector<QAPair>& qa_subset) {
  if (names.empty()) throw EngineError(EngineErrc::EmptyRoster, "system prompt needs at least one student");
  if (qa_subset.empty()) throw EngineError(EngineErrc::EmptyQuiz, "system prompt needs at least one question");

  std::string out(kPromptHead);
  for (const auto& n : names) out += fmt::format("- {}\n", n);
  out += kPromptBody;
  out += fmt::format("Passage: {}\n\n{}\n\nQuestions:\n", passage.title, passage.body);
  for (std::size_t i = 0; i < qa_subset.size(); ++i) {
    const auto& qa = qa_subset[i];
    out += fmt::format("{}. {}\n   Answer: {}\n", i + 1, qa.question, qa.answer);
  }
  return out;
}

std::vector<QAPair> session_questions(const Room& room) {
  if (!room.passage()) return {};
  const auto& pairs = room.passage()->qa_pairs;
  return {pairs.begin(), pairs.begin() + static_cast<std::ptrdiff_t>(room.question_count())};
}

// ---------------------------------------------------------------------------
// Actions and policy

std::string_view to_string(ActionKind kind) {
  switch (kind) {
    case ActionKind::OpenDiscussion: return "open_discussion";
    case ActionKind::PresentPassage: return "present_passage";
    case ActionKind::AskQuestion: return "ask_question";
    case ActionKind::PromptStudent: return "prompt_student";
    case ActionKind::GiveHint: return "give_hint";
    case ActionKind::RevealAnswer: return "reveal_answer";
    case ActionKind::WrapUp: return "wrap_up";
  }
  return "unknown";
}

std::string ModeratorAction::key() const {
  switch (kind) {
    case ActionKind::OpenDiscussion: return "open";
    case ActionKind::PresentPassage: return "present";
    case ActionKind::AskQuestion: return fmt::format("ask:{}", question_index);
    case ActionKind::PromptStudent: return "prompt:" + student;
    case ActionKind::GiveHint: return "hint:" + student;
    case ActionKind::RevealAnswer: return fmt::format("reveal:{}", question_index);
    case ActionKind::WrapUp: return "wrapup";
  }
  return {};
}

std::optional<ModeratorAction> ModeratorAction::from_key(std::string_view key) {
  if (key == "open") return ModeratorAction{ActionKind::OpenDiscussion};
  if (key == "present") return ModeratorAction{ActionKind::PresentPassage};
  if (key == "wrapup") return ModeratorAction{ActionKind::WrapUp};
  auto colon = key.find(':');
  if (colon == std::string_view::npos) return std::nullopt;
  auto head = key.substr(0, colon);
  auto tail = key.substr(colon + 1);
  auto index = [&]() -> std::optional<std::size_t> {
    std::size_t v = 0;
    auto [ptr, ec] = std::from_chars(tail.data(), tail.data() + tail.size(), v);
    if (ec != std::errc() || ptr != tail.data() + tail.size()) return std::nullopt;
    return v;
  };
  if (head == "ask" || head == "reveal") {
    auto i = index();
    if (!i) return std::nullopt;
    return ModeratorAction{head == "ask" ? ActionKind::AskQuestion : ActionKind::RevealAnswer, *i};
  }
  if ((head == "prompt" || head == "hint") && !tail.empty())
    return ModeratorAction{head == "prompt" ? ActionKind::PromptStudent : ActionKind::GiveHint, 0,
                           std::string(tail)};
  return std::nullopt;
}

std::optional<ModeratorAction> TurnPolicy::next_action(const Room& room) const {
  switch (room.phase()) {
    case SessionPhase::Lobby:
    case SessionPhase::Closed:
      throw EngineError(EngineErrc::WrongPhase,
                        fmt::format("no moderator action in phase {}", to_string(room.phase())));
    case SessionPhase::Feedback:
      if (wrapped_) return std::nullopt;
      return ModeratorAction{ActionKind::WrapUp};
    case SessionPhase::Discussion:
      break;
  }
  if (!opened_) return ModeratorAction{ActionKind::OpenDiscussion};
  if (!presented_) return ModeratorAction{ActionKind::PresentPassage};
  const auto index = room.question_index();
  if (asked_ != index) return ModeratorAction{ActionKind::AskQuestion, index};
  if (!hint_requests_.empty()) return ModeratorAction{ActionKind::GiveHint, index, hint_requests_.front()};
  if (room.all_had_chance()) return ModeratorAction{ActionKind::RevealAnswer, index};
  return std::nullopt;
}

bool TurnPolicy::awaiting_students(const Room& room) const {
  return room.phase() == SessionPhase::Discussion && opened_ && presented_ && asked_ == room.question_index() &&
         hint_requests_.empty() && !room.all_had_chance();
}

std::optional<ModeratorAction> TurnPolicy::on_idle(Room& room) {
  if (!awaiting_students(room)) return std::nullopt;
  const auto* target = room.least_active_participant([this](const Participant& p) {
    return !p.responded_current_question && !p.prompt_round_complete && prompted_.count(p.display_name) == 0;
  });
  if (target) return ModeratorAction{ActionKind::PromptStudent, room.question_index(), target->display_name};

  // Everyone still silent has been prompted once and let the window pass.
  for (const auto& p : room.participants())
    if (p.active && !p.responded_current_question && prompted_.count(p.display_name) != 0)
      room.mark_prompt_round_complete(p.participant_id);
  return next_action(room);
}

void TurnPolicy::request_hint(std::string requester) { hint_requests_.push_back(std::move(requester)); }

std::optional<AdvanceOutcome> TurnPolicy::applied(const ModeratorAction& action, Room& room) {
  switch (action.kind) {
    case ActionKind::OpenDiscussion: opened_ = true; break;
    case ActionKind::PresentPassage: presented_ = true; break;
    case ActionKind::AskQuestion:
      asked_ = action.question_index;
      prompted_.clear();
      break;
    case ActionKind::PromptStudent: prompted_.insert(action.student); break;
    case ActionKind::GiveHint:
      if (!hint_requests_.empty()) hint_requests_.pop_front();
      break;
    case ActionKind::RevealAnswer: return room.advance_question();
    case ActionKind::WrapUp: wrapped_ = true; break;
  }
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// Rendering

namespace {

std::string join_names(const std::vector<std::string>& names) {
  std::string out;
  for (std::size_t i = 0; i < names.size(); ++i) {
    if (i) out += i + 1 == names.size() ? " and " : ", ";
    out += names[i];
  }
  return out;
}

}  // namespace

ProviderRequest build_moderator_request(const ModeratorAction& action, const Room& room,
                                        const ConversationHistory& history) {
  ProviderRequest req;
  req.system_prompt = history.system_entry().text;
  req.messages = history.project();
  req.directive_key = action.key();

  const auto questions = session_questions(room);
  auto question_text = [&](std::size_t i) { return i < questions.size() ? questions[i].question : std::string(); };

  switch (action.kind) {
    case ActionKind::OpenDiscussion:
      req.directive = fmt::format(
          "Start the discussion. Introduce yourself as Moderator, explain the purpose of the discussion and "
          "welcome {}. Emphasize that everyone's input is important.",
          join_names(room.active_roster()));
      break;
    case ActionKind::PresentPassage:
      req.directive = fmt::format(
          "Present the passage \"{}\" to the students. Read it for them and check that they understand it. "
          "Do not ask a question yet.",
          room.passage() ? room.passage()->title : std::string());
      break;
    case ActionKind::AskQuestion:
      req.directive = fmt::format("Present question {} of {} to the group and invite responses: {}",
                                  action.question_index + 1, questions.size(), question_text(action.question_index));
      break;
    case ActionKind::PromptStudent:
      req.directive = fmt::format(
          "{0} has not responded to the current question yet. Encourage {0} with a supportive prompt such as "
          "\"What do you think, {0}?\" Do not reveal the answer.",
          action.student);
      break;
    case ActionKind::GiveHint:
      req.directive = fmt::format(
          "{} asked for a hint on the current question: {} Give a helpful hint without revealing the answer.",
          action.student, question_text(room.question_index()));
      break;
    case ActionKind::RevealAnswer:
      req.directive = fmt::format(
          "Every student has had a chance to respond to question {}. Reveal the correct answer ({}), celebrate "
          "correct ideas and give gentle, constructive feedback on the others.",
          action.question_index + 1,
          action.question_index < questions.size() ? questions[action.question_index].answer : std::string());
      break;
    case ActionKind::WrapUp:
      req.directive =
          "The discussion is complete. Thank the students, summarise the key ideas and tell them their "
          "personal feedback is on its way.";
      break;
  }
  return req;
}

AppendResult apply_moderator_message(ConversationHistory& history, Transcript* archive,
                                     const ModeratorAction& action, std::string text, std::int64_t ts) {
  auto result = history.append_and_trim(Role::Moderator, "Moderator", std::move(text), ts, action.key());
  if (archive) archive->push_back(history.last());
  return result;
}

RenderResult render_moderator_message(const ModeratorAction& action, const Room& room, ConversationHistory& history,
                                      Provider& provider, Transcript* archive, std::int64_t ts) {
  auto request = build_moderator_request(action, room, history);
  auto response = provider.generate(request);  // may throw; nothing mutated yet
  RenderResult out;
  out.text = response.text;
  out.latency_seconds = response.latency_seconds;
  out.append = apply_moderator_message(history, archive, action, std::move(response.text), ts);
  return out;
}

// ---------------------------------------------------------------------------
// Feedback

std::map<std::string, StudentStats> participation_stats(const std::vector<std::string>& roster,
                                                         const Transcript& transcript) {
  std::map<std::string, StudentStats> stats;
  std::map<std::string, std::size_t> token_sums;
  for (const auto& name : roster) stats[name];
  for (const auto& e : transcript) {
    if (e.role == Role::Student) {
      auto it = stats.find(e.name);
      if (it == stats.end()) continue;
      ++it->second.message_count;
      token_sums[e.name] += e.token_len;
    } else if (e.role == Role::Moderator) {
      auto action = ModeratorAction::from_key(e.action);
      if (action && action->kind == ActionKind::PromptStudent) {
        if (auto it = stats.find(action->student); it != stats.end()) ++it->second.prompted_count;
      }
    }
  }
  for (auto& [name, s] : stats)
    if (s.message_count > 0)
      s.mean_message_tokens = static_cast<double>(token_sums[name]) / static_cast<double>(s.message_count);
  return stats;
}

namespace {

constexpr std::string_view kFeedbackPrompt =
    "You are the Moderator of a group discussion for primary and lower secondary school students that has "
    "just ended. Using the entire conversation history, write personalised, constructive and age-appropriate "
    "feedback for one student. Highlight their strengths and areas for improvement, and suggest one concrete "
    "thing to try next time. Respond in properly formatted Markdown.";

}  // namespace

ProviderRequest build_feedback_request(const std::string& student, const Transcript& transcript) {
  ProviderRequest req;
  req.system_prompt = std::string(kFeedbackPrompt);
  for (const auto& e : transcript) {
    if (e.role == Role::System && e.action == "system_prompt") continue;
    req.messages.push_back({std::string(to_string(e.role)), e.name, e.text});
  }
  req.directive = fmt::format("Write the personal feedback for {}.", student);
  req.directive_key = "feedback:" + student;
  return req;
}

FeedbackReport generate_feedback(const std::vector<std::string>& roster, const Transcript& transcript,
                                 Provider& provider) {
  FeedbackReport report;
  auto stats = participation_stats(roster, transcript);
  for (const auto& name : roster) {
    auto& entry = report.per_student[name];
    entry.stats = stats[name];
    try {
      entry.feedback_text = provider.generate(build_feedback_request(name, transcript)).text;
    } catch (const ProviderError& e) {
      entry.error = e.what();
    }
  }
  return report;
}

FeedbackReport generate_feedback(const Room& room, const Transcript& transcript, Provider& provider) {
  if (room.phase() != SessionPhase::Feedback)
    throw EngineError(EngineErrc::WrongPhase, "feedback is generated in the Feedback phase");
  return generate_feedback(room.roster(), transcript, provider);
}

}  // namespace discourse
