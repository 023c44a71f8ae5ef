#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "discourse/dataset_store.hpp"
#include "discourse/gateway.hpp"
#include "discourse/llm_provider.hpp"
#include "discourse/moderator_engine.hpp"

namespace discourse {

enum class Archetype { Passive, Toxic, OffTopic, Constructive };

std::string_view to_string(Archetype archetype);
std::optional<Archetype> parse_archetype(std::string_view text);

enum class SimErrc { ServerUnreachable, ScriptExhausted, SessionStalled, ProviderFailure, Config, EmptyRecords };

std::string_view to_string(SimErrc code);

class SimError : public std::runtime_error {
 public:
  SimError(SimErrc code, const std::string& detail);
  SimErrc code() const noexcept { return code_; }

 private:
  SimErrc code_;
};

inline constexpr std::string_view kPassiveDefault = "I don't know";

struct PersonaSpec {
  std::string name;
  Archetype archetype = Archetype::Constructive;
  std::string identity_directives;
  std::string context_rule;
  std::string response_constraints;
  // Scripted source: lines consumed in order. Ignored when `backend` is set.
  std::vector<std::string> script;
  // Backend source.
  ProviderPtr backend;
  // Whether the persona answers a question without being prompted by name.
  // Defaults to every archetype except Passive.
  std::optional<bool> volunteers;

  bool volunteers_answers() const { return volunteers.value_or(archetype != Archetype::Passive); }
};

// Stateful responder for one persona.
class PersonaAgent {
 public:
  explicit PersonaAgent(PersonaSpec spec);

  const PersonaSpec& spec() const noexcept { return spec_; }
  const std::string& name() const noexcept { return spec_.name; }

  // Scripted: next script line; a Passive persona falls back to "I don't
  // know" once its script is used up, others throw ScriptExhausted.
  // Backend: one provider call with the three prompt parts as system prompt.
  std::string respond(const std::vector<ProviderMessage>& visible_history, const std::string& directive);

  // Request sent to the backend for this turn.
  ProviderRequest backend_request(const std::vector<ProviderMessage>& visible_history,
                                  const std::string& directive) const;

 private:
  PersonaSpec spec_;
  std::size_t cursor_ = 0;
};

struct LatencyRecord {
  std::size_t interaction_index = 0;
  double seconds = 0.0;
  std::string action_kind;  // e.g. "ask_question"
  std::string action;       // e.g. "ask:1"
};

struct LatencyStats {
  double mean = 0.0;
  double std = 0.0;
};

inline constexpr std::string_view kStdFormula = "population (divisor n)";

// Arithmetic mean and population standard deviation. Throws EmptyRecords.
LatencyStats compute_latency_stats(const std::vector<double>& seconds);
LatencyStats compute_latency_stats(const std::vector<LatencyRecord>& records);

struct SimConfig {
  std::vector<PersonaSpec> roster;

  // External server; when unset an embedded server is started for the run.
  std::optional<std::string> host;
  std::uint16_t port = 0;

  // Embedded server.
  std::shared_ptr<const Dataset> dataset;
  ProviderPtr moderator;
  HubOptions hub;
  std::chrono::milliseconds heartbeat{15000};
  // Slept before the i-th moderator provider call.
  std::vector<double> injected_delays;

  std::chrono::milliseconds stall_timeout{60000};
  bool allow_unsafe_persona = false;
  std::optional<std::filesystem::path> output_dir;
};

struct SimReport {
  std::string room_id;
  std::string passage_title;
  std::vector<std::string> roster;
  Transcript transcript;
  std::vector<LatencyRecord> latency;
  double mean_latency = 0.0;
  double std_latency = 0.0;
  FeedbackReport feedback;
  std::map<std::string, std::size_t> participation;
  bool reached_feedback = false;
};

// Runs one session through the wire protocol: the first persona creates the
// room, the rest join in roster order, and persona turns are taken one at a
// time. Throws SimError.
SimReport run_simulation(const SimConfig& config);

// Checks roster shape and persona safety rules; throws SimError(Config).
void validate_sim_config(const SimConfig& config);

// Reads a simulation config file (JSON). Relative paths resolve against the
// file's directory. `overrides` may replace "seed", "injected_delays",
// "output", "host", "port".
SimConfig load_sim_config(const std::filesystem::path& path, const nlohmann::json& overrides = nlohmann::json::object());

nlohmann::json report_to_json(const SimReport& report);
std::string report_markdown(const SimReport& report);
// Writes report.json, summary.md and session.transcript into `dir`.
void write_report(const SimReport& report, const std::filesystem::path& dir);

}  // namespace discourse
