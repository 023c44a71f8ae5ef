#include "discourse/persona_sim.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <fstream>
#include <set>
#include <sstream>

#include <fmt/format.h>

namespace discourse {

using nlohmann::json;
using namespace std::chrono_literals;

std::string_view to_string(Archetype archetype) {
  switch (archetype) {
    case Archetype::Passive: return "passive";
    case Archetype::Toxic: return "toxic";
    case Archetype::OffTopic: return "off_topic";
    case Archetype::Constructive: return "constructive";
  }
  return "unknown";
}

std::optional<Archetype> parse_archetype(std::string_view text) {
  std::string t;
  for (char c : text)
    if (c != '_' && c != '-' && c != ' ') t += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  if (t == "passive") return Archetype::Passive;
  if (t == "toxic") return Archetype::Toxic;
  if (t == "offtopic") return Archetype::OffTopic;
  if (t == "constructive") return Archetype::Constructive;
  return std::nullopt;
}

std::string_view to_string(SimErrc code) {
  switch (code) {
    case SimErrc::ServerUnreachable: return "ServerUnreachable";
    case SimErrc::ScriptExhausted: return "ScriptExhausted";
    case SimErrc::SessionStalled: return "SessionStalled";
    case SimErrc::ProviderFailure: return "ProviderFailure";
    case SimErrc::Config: return "ConfigError";
    case SimErrc::EmptyRecords: return "EmptyRecords";
  }
  return "unknown";
}

SimError::SimError(SimErrc code, const std::string& detail)
    : std::runtime_error(fmt::format("{}: {}", to_string(code), detail)), code_(code) {}

// ---------------------------------------------------------------------------
// Personas

PersonaAgent::PersonaAgent(PersonaSpec spec) : spec_(std::move(spec)) {}

ProviderRequest PersonaAgent::backend_request(const std::vector<ProviderMessage>& visible_history,
                                              const std::string& directive) const {
  ProviderRequest req;
  req.system_prompt = fmt::format("{}\n\n{}\n\n{}", spec_.identity_directives, spec_.context_rule,
                                  spec_.response_constraints);
  req.messages = visible_history;
  req.directive = fmt::format("{}\n\nReply as {} with a single chat message.", directive, spec_.name);
  req.directive_key = "persona:" + spec_.name;
  req.max_output_tokens = 160;
  return req;
}

std::string PersonaAgent::respond(const std::vector<ProviderMessage>& visible_history, const std::string& directive) {
  if (spec_.backend) {
    try {
      return spec_.backend->generate(backend_request(visible_history, directive)).text;
    } catch (const ProviderError& e) {
      if (e.code() == ProviderErrc::ScriptExhausted) throw SimError(SimErrc::ScriptExhausted, e.what());
      throw SimError(SimErrc::ProviderFailure, fmt::format("{}: {}", spec_.name, e.what()));
    }
  }
  if (cursor_ < spec_.script.size()) return spec_.script[cursor_++];
  if (spec_.archetype == Archetype::Passive) return std::string(kPassiveDefault);
  throw SimError(SimErrc::ScriptExhausted,
                 fmt::format("persona '{}' ran out of script after {} lines", spec_.name, spec_.script.size()));
}

// ---------------------------------------------------------------------------
// Latency

LatencyStats compute_latency_stats(const std::vector<double>& seconds) {
  if (seconds.empty()) throw SimError(SimErrc::EmptyRecords, "no latency records");
  const double n = static_cast<double>(seconds.size());
  double sum = 0.0;
  for (double s : seconds) sum += s;
  const double mean = sum / n;
  double sq = 0.0;
  for (double s : seconds) sq += (s - mean) * (s - mean);
  return {mean, std::sqrt(sq / n)};
}

LatencyStats compute_latency_stats(const std::vector<LatencyRecord>& records) {
  std::vector<double> seconds;
  seconds.reserve(records.size());
  for (const auto& r : records) seconds.push_back(r.seconds);
  return compute_latency_stats(seconds);
}

// ---------------------------------------------------------------------------
// Session driver

void validate_sim_config(const SimConfig& config) {
  if (config.roster.empty()) throw SimError(SimErrc::Config, "roster: at least one persona is required");
  std::set<std::string> names;
  for (const auto& p : config.roster) {
    if (p.name.empty()) throw SimError(SimErrc::Config, "roster: persona name is empty");
    if (!names.insert(p.name).second) throw SimError(SimErrc::Config, fmt::format("roster: duplicate name '{}'", p.name));
    if (!p.backend) continue;
    if (p.identity_directives.empty() || p.context_rule.empty() || p.response_constraints.empty())
      throw SimError(SimErrc::Config,
                     fmt::format("roster.{}: a backend persona needs identity, context and constraints", p.name));
    if (p.archetype == Archetype::Toxic && !config.allow_unsafe_persona)
      throw SimError(SimErrc::Config,
                     fmt::format("roster.{}: backend-driven toxic persona requires --allow-unsafe-persona", p.name));
  }
  if (!config.host) {
    if (!config.dataset) throw SimError(SimErrc::Config, "dataset: required for an embedded server");
    if (!config.moderator) throw SimError(SimErrc::Config, "moderator: required for an embedded server");
  } else if (!config.injected_delays.empty()) {
    throw SimError(SimErrc::Config, "injected_delays: only applies to an embedded server");
  }
}

namespace {

class Session {
 public:
  Session(const SimConfig& config, const std::string& host, std::uint16_t port) : config_(config) {
    for (const auto& spec : config.roster) {
      agents_.emplace_back(spec);
      try {
        clients_.push_back(std::make_unique<GatewayClient>(host, port));
      } catch (const NetworkError& e) {
        throw SimError(SimErrc::ServerUnreachable, e.what());
      }
    }
  }

  SimReport run() {
    join_all();
    while (!done_) {
      auto env = next(*clients_[0], "session progress");
      handle(env);
      take_turn();
    }
    return finish();
  }

 private:
  Envelope next(GatewayClient& client, std::string_view waiting_for) {
    const auto deadline = SteadyClock::now() + config_.stall_timeout;
    for (;;) {
      if (auto env = client.receive(20ms)) return *env;
      drain_side_channels();
      if (!client.connected()) throw SimError(SimErrc::ServerUnreachable, "server closed the connection");
      if (SteadyClock::now() >= deadline)
        throw SimError(SimErrc::SessionStalled,
                       fmt::format("no progress for {} ms while waiting for {}", config_.stall_timeout.count(),
                                   waiting_for));
    }
  }

  // Persona connections see the same broadcasts as the master stream; only
  // their private errors matter here.
  void drain_side_channels() {
    for (std::size_t i = 1; i < clients_.size(); ++i) {
      if (!joined_[i]) continue;
      while (auto env = clients_[i]->receive(0ms)) {
        if (env->type == event::kError && !env->seq && outstanding_ == i) outstanding_.reset();
      }
    }
  }

  void join_all() {
    joined_.assign(clients_.size(), false);
    clients_[0]->send(event::kCreateRoom, {{"display_name", agents_[0].name()}});
    for (;;) {
      auto env = next(*clients_[0], "room_created");
      if (env.type == event::kError) throw SimError(SimErrc::Config, env.payload.value("detail", "create failed"));
      if (env.type == event::kRoomCreated) {
        room_id_ = env.payload.value("room_id", env.room_id);
        handle(env);
        break;
      }
    }
    joined_[0] = true;
    for (std::size_t i = 1; i < clients_.size(); ++i) {
      clients_[i]->send(event::kJoinRoom, {{"room_id", room_id_}, {"display_name", agents_[i].name()}});
      for (;;) {
        auto env = next(*clients_[i], "joined");
        if (env.type == event::kRoomFull) throw SimError(SimErrc::Config, "room is full");
        if (env.type == event::kError && !env.seq)
          throw SimError(SimErrc::Config, env.payload.value("detail", "join failed"));
        if (env.type == event::kJoined && env.payload.value("name", "") == agents_[i].name()) break;
      }
      joined_[i] = true;
    }
  }

  void handle(const Envelope& env) {
    if (env.type == event::kSessionStarted) {
      roster_ = env.payload.value("roster", std::vector<std::string>{});
      passage_title_ = env.payload.value("passage_title", "");
      std::string names;
      for (const auto& n : roster_) names += (names.empty() ? "" : "\n") + n;
      push(Role::System, "system", names, env.ts, "roster");
    } else if (env.type == event::kChatBroadcast) {
      const auto name = env.payload.value("name", env.sender);
      const auto text = env.payload.value("text", "");
      push(Role::Student, name, text, env.ts, "");
      visible_.push_back({"student", name, text});
      if (outstanding_ && agents_[*outstanding_].name() == name) outstanding_.reset();
    } else if (env.type == event::kModeratorMessage) {
      const auto text = env.payload.value("text_markdown", "");
      const auto key = env.payload.value("action", "");
      push(Role::Moderator, "Moderator", text, env.ts, key);
      visible_.push_back({"moderator", "Moderator", text});
      directive_ = text;
      latency_.push_back({latency_.size(), env.payload.value("latency_seconds", 0.0), env.payload.value("kind", ""),
                          key});
      on_moderator(ModeratorAction::from_key(key));
    } else if (env.type == event::kFeedbackDelivered) {
      StudentFeedback fb;
      fb.feedback_text = env.payload.value("feedback_text", "");
      const auto stats = env.payload.value("stats", json::object());
      fb.stats.message_count = stats.value("message_count", std::size_t{0});
      fb.stats.mean_message_tokens = stats.value("mean_message_tokens", 0.0);
      fb.stats.prompted_count = stats.value("prompted_count", std::size_t{0});
      if (env.payload.contains("error")) fb.error = env.payload["error"].get<std::string>();
      feedback_.per_student[env.payload.value("name", "")] = std::move(fb);
      if (!roster_.empty() && feedback_.per_student.size() >= roster_.size()) done_ = true;
    } else if (env.type == event::kError) {
      if (!env.seq && outstanding_ == 0u) outstanding_.reset();
      if (env.payload.value("code", "") == "shutting_down")
        throw SimError(SimErrc::ServerUnreachable, "server is shutting down");
    }
  }

  void on_moderator(const std::optional<ModeratorAction>& action) {
    if (!action) return;
    switch (action->kind) {
      case ActionKind::AskQuestion:
        for (std::size_t i = 0; i < agents_.size(); ++i)
          if (agents_[i].spec().volunteers_answers()) enqueue(i);
        break;
      case ActionKind::PromptStudent:
        for (std::size_t i = 0; i < agents_.size(); ++i)
          if (agents_[i].name() == action->student) enqueue(i);
        break;
      case ActionKind::RevealAnswer:
      case ActionKind::WrapUp:
        queue_.clear();
        outstanding_.reset();
        break;
      default:
        break;
    }
  }

  void enqueue(std::size_t i) {
    if (outstanding_ == i || std::find(queue_.begin(), queue_.end(), i) != queue_.end()) return;
    queue_.push_back(i);
  }

  // One persona speaks at a time; the next waits for the previous echo.
  void take_turn() {
    if (outstanding_ || queue_.empty() || done_) return;
    const auto i = queue_.front();
    queue_.pop_front();
    auto text = agents_[i].respond(visible_, directive_);
    outstanding_ = i;
    if (!clients_[i]->send(event::kPostMessage, {{"text", text}}))
      throw SimError(SimErrc::ServerUnreachable, fmt::format("{} lost its connection", agents_[i].name()));
  }

  void push(Role role, std::string name, std::string text, std::int64_t ts, std::string action) {
    HistoryEntry e;
    e.role = role;
    e.name = std::move(name);
    e.token_len = count_tokens(text);
    e.text = std::move(text);
    e.seq = transcript_.size();
    e.ts = ts;
    e.action = std::move(action);
    transcript_.push_back(std::move(e));
  }

  SimReport finish() {
    for (auto& c : clients_) c->send(event::kLeave);
    SimReport r;
    r.room_id = room_id_;
    r.passage_title = passage_title_;
    r.roster = roster_;
    r.transcript = std::move(transcript_);
    r.latency = std::move(latency_);
    const auto stats = compute_latency_stats(r.latency);
    r.mean_latency = stats.mean;
    r.std_latency = stats.std;
    r.feedback = std::move(feedback_);
    for (const auto& n : r.roster) r.participation[n] = 0;
    for (const auto& e : r.transcript)
      if (e.role == Role::Student) ++r.participation[e.name];
    r.reached_feedback = done_;
    return r;
  }

  const SimConfig& config_;
  std::vector<PersonaAgent> agents_;
  std::vector<std::unique_ptr<GatewayClient>> clients_;
  std::vector<bool> joined_;
  std::string room_id_;
  std::string passage_title_;
  std::vector<std::string> roster_;
  Transcript transcript_;
  std::vector<ProviderMessage> visible_;
  std::string directive_;
  std::vector<LatencyRecord> latency_;
  FeedbackReport feedback_;
  std::deque<std::size_t> queue_;
  std::optional<std::size_t> outstanding_;
  bool done_ = false;
};

}  // namespace

SimReport run_simulation(const SimConfig& config) {
  validate_sim_config(config);
  std::unique_ptr<GatewayServer> server;
  std::string host;
  std::uint16_t port = config.port;
  if (config.host) {
    host = *config.host;
  } else {
    auto moderator = config.injected_delays.empty() ? config.moderator
                                                    : with_injected_latency(config.moderator, config.injected_delays);
    ServerOptions so;
    so.port = 0;
    so.heartbeat = config.heartbeat;
    so.tick = 10ms;
    server = std::make_unique<GatewayServer>(so, config.hub, config.dataset, moderator);
    server->start();
    host = so.host;
    port = server->port();
  }
  auto report = Session(config, host, port).run();
  if (server) server->stop();
  if (config.output_dir) write_report(report, *config.output_dir);
  return report;
}

// ---------------------------------------------------------------------------
// Config file

namespace {

std::vector<std::string> read_lines(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw SimError(SimErrc::Config, fmt::format("cannot read script file {}", path.string()));
  std::vector<std::string> lines;
  for (std::string line; std::getline(in, line);) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!line.empty()) lines.push_back(line);
  }
  return lines;
}

ProviderPtr provider_from(const json& spec, const std::filesystem::path& base, std::string_view field) {
  try {
    return make_provider(spec, base, provider_key_from_env());
  } catch (const ProviderError& e) {
    throw SimError(SimErrc::Config, fmt::format("{}: {}", field, e.what()));
  }
}

}  // namespace

SimConfig load_sim_config(const std::filesystem::path& path, const json& overrides) {
  std::ifstream in(path);
  if (!in) throw SimError(SimErrc::Config, fmt::format("cannot read {}", path.string()));
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw SimError(SimErrc::Config, fmt::format("{}: {}", path.string(), e.what()));
  }
  j.merge_patch(overrides);
  const auto base = path.parent_path();
  auto resolve = [&](const std::string& p) {
    std::filesystem::path fp(p);
    return fp.is_absolute() ? fp : base / fp;
  };

  SimConfig c;
  try {
    if (j.contains("host") && !j["host"].is_null()) {
      c.host = j["host"].get<std::string>();
      c.port = j.value("port", std::uint16_t{0});
    }
    if (j.contains("dataset")) {
      const auto& d = j["dataset"];
      auto format = parse_dataset_format(d.value("format", "canonical"));
      c.dataset = std::make_shared<Dataset>(load_dataset(resolve(d.at("path").get<std::string>()), format));
    }
    if (j.contains("moderator")) c.moderator = provider_from(j["moderator"], base, "moderator");

    c.hub.room.capacity = j.value("max_students", std::size_t{4});
    c.hub.room.max_questions = j.value("max_questions", std::size_t{3});
    c.hub.min_qa_pairs = j.value("min_qa_pairs", std::size_t{1});
    c.hub.max_tokens = j.value("max_tokens", ConversationHistory::kDefaultBudget);
    c.hub.seed = j.value("seed", std::uint64_t{0});
    c.hub.idle_prompt = std::chrono::milliseconds(j.value("idle_prompt_ms", 300));
    c.hub.retry_backoff = std::chrono::milliseconds(j.value("retry_backoff_ms", 200));
    c.hub.logical_clock = j.value("logical_clock", true);
    c.stall_timeout = std::chrono::milliseconds(j.value("stall_timeout_ms", 60000));
    c.injected_delays = j.value("injected_delays", std::vector<double>{});
    c.allow_unsafe_persona = j.value("allow_unsafe_persona", false);
    if (j.contains("output") && !j["output"].is_null()) c.output_dir = resolve(j["output"].get<std::string>());

    std::map<std::string, ProviderPtr> backends;
    for (const auto& [name, spec] : j.value("providers", json::object()).items())
      backends[name] = provider_from(spec, base, "providers." + name);

    for (const auto& pj : j.at("roster")) {
      PersonaSpec p;
      p.name = pj.at("name").get<std::string>();
      auto archetype = parse_archetype(pj.value("archetype", "constructive"));
      if (!archetype) throw SimError(SimErrc::Config, fmt::format("roster.{}.archetype: unknown value", p.name));
      p.archetype = *archetype;
      p.identity_directives = pj.value("identity", "");
      p.context_rule = pj.value("context", "");
      p.response_constraints = pj.value("constraints", "");
      if (pj.contains("volunteers")) p.volunteers = pj["volunteers"].get<bool>();
      if (pj.contains("script")) p.script = pj["script"].get<std::vector<std::string>>();
      if (pj.contains("script_file")) p.script = read_lines(resolve(pj["script_file"].get<std::string>()));
      if (pj.contains("backend")) {
        const auto& b = pj["backend"];
        if (b.is_string()) {
          auto it = backends.find(b.get<std::string>());
          if (it == backends.end())
            throw SimError(SimErrc::Config, fmt::format("roster.{}.backend: no provider named '{}'", p.name,
                                                        b.get<std::string>()));
          p.backend = it->second;
        } else {
          p.backend = provider_from(b, base, "roster." + p.name + ".backend");
        }
      }
      c.roster.push_back(std::move(p));
    }
  } catch (const json::exception& e) {
    throw SimError(SimErrc::Config, fmt::format("{}: {}", path.string(), e.what()));
  } catch (const DatasetError& e) {
    throw SimError(SimErrc::Config, fmt::format("dataset: {}", e.what()));
  }
  return c;
}

// ---------------------------------------------------------------------------
// Report output

json report_to_json(const SimReport& report) {
  json records = json::array();
  for (const auto& r : report.latency)
    records.push_back({{"interaction_index", r.interaction_index},
                       {"seconds", r.seconds},
                       {"action_kind", r.action_kind},
                       {"action", r.action}});
  json feedback = json::object();
  for (const auto& [name, fb] : report.feedback.per_student) {
    json entry = {{"feedback_text", fb.feedback_text},
                  {"stats",
                   {{"message_count", fb.stats.message_count},
                    {"mean_message_tokens", fb.stats.mean_message_tokens},
                    {"prompted_count", fb.stats.prompted_count}}}};
    if (fb.error) entry["error"] = *fb.error;
    feedback[name] = std::move(entry);
  }
  return {{"room_id", report.room_id},
          {"passage_title", report.passage_title},
          {"roster", report.roster},
          {"reached_feedback", report.reached_feedback},
          {"latency",
           {{"records", records},
            {"count", report.latency.size()},
            {"mean", report.mean_latency},
            {"std", report.std_latency},
            {"std_formula", kStdFormula}}},
          {"participation", report.participation},
          {"feedback", feedback},
          {"transcript_file", "session.transcript"}};
}

std::string report_markdown(const SimReport& report) {
  std::ostringstream md;
  md << "# Simulated session " << report.room_id << "\n\n";
  md << "Passage: " << report.passage_title << "\n\n";
  md << "Reached feedback: " << (report.reached_feedback ? "yes" : "no") << "\n\n";
  md << "## Moderator latency\n\n| # | action | seconds |\n|---|---|---|\n";
  for (const auto& r : report.latency) md << fmt::format("| {} | {} | {:.3f} |\n", r.interaction_index + 1, r.action, r.seconds);
  md << fmt::format("\nMean {:.3f} s, std {:.3f} s over {} calls (std is the {} formula).\n\n", report.mean_latency,
                    report.std_latency, report.latency.size(), kStdFormula);
  md << "## Participation\n\n| student | messages | prompted | feedback |\n|---|---|---|---|\n";
  for (const auto& name : report.roster) {
    auto it = report.feedback.per_student.find(name);
    std::string text = "-";
    std::size_t prompted = 0;
    if (it != report.feedback.per_student.end()) {
      text = it->second.error ? "error: " + *it->second.error : it->second.feedback_text;
      prompted = it->second.stats.prompted_count;
    }
    std::replace(text.begin(), text.end(), '\n', ' ');
    std::replace(text.begin(), text.end(), '|', '/');
    auto count = report.participation.count(name) ? report.participation.at(name) : 0;
    md << fmt::format("| {} | {} | {} | {} |\n", name, count, prompted, text);
  }
  return md.str();
}

void write_report(const SimReport& report, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  {
    std::ofstream out(dir / "report.json");
    out << report_to_json(report).dump(2) << '\n';
  }
  {
    std::ofstream out(dir / "summary.md");
    out << report_markdown(report);
  }
  std::ofstream out(dir / "session.transcript");
  write_transcript(out, report.transcript);
}

}  // namespace discourse
