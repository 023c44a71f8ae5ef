// discourse: serve, simulate, validate-dataset, feedback.

#include <csignal>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "discourse/dataset_store.hpp"
#include "discourse/gateway.hpp"
#include "discourse/moderator_engine.hpp"
#include "discourse/persona_sim.hpp"
#include "discourse/service_config.hpp"

using namespace discourse;
using nlohmann::json;

namespace {

constexpr int kExitFailure = 1;
constexpr int kExitUsage = 2;

struct ServeFlags {
  std::string config_path;
  std::map<std::string, std::string> values;
};

void add_config_flags(CLI::App* cmd, ServeFlags& flags) {
  cmd->add_option("--config", flags.config_path, "JSON config file with any of the keys below");
  static const std::map<std::string, std::string> help = {
      {"max_students", "students per room; the session starts when a room fills (default 4)"},
      {"max_tokens", "conversation history token budget (default 5000)"},
      {"min_qa_pairs", "minimum question/answer pairs a passage needs (default 1)"},
      {"max_questions", "questions discussed per session (default 3)"},
      {"dataset_path", "dataset file or directory"},
      {"dataset_format", "canonical | fairytaleqa (default canonical)"},
      {"provider", "provider JSON, inline or a file path"},
      {"host", "listen address (default 127.0.0.1)"},
      {"port", "listen port, 0 for any (default 8765)"},
      {"seed", "seed for room ids and passage draws"},
      {"idle_prompt_ms", "quiet period before a silent student is prompted (default 20000)"},
      {"heartbeat_ms", "heartbeat interval (default 15000)"},
      {"archive_dir", "write finished session transcripts here"},
      {"logical_clock", "stamp envelopes with sequence numbers instead of wall time"},
  };
  for (const auto& key : server_config_keys()) {
    std::string flag = "--" + key;
    std::replace(flag.begin(), flag.end(), '_', '-');
    cmd->add_option_function<std::string>(
        flag, [&flags, key](const std::string& v) { flags.values[key] = v; },
        fmt::format("{} [env {}]", help.at(key), env_var_for(key)));
  }
}

ServerConfig resolve(const ServeFlags& flags) {
  ConfigSources sources;
  if (!flags.config_path.empty()) {
    sources.file = load_config_file(flags.config_path);
    sources.file_dir = std::filesystem::path(flags.config_path).parent_path();
  }
  sources.env = config_env([](const char* name) { return std::getenv(name); });
  sources.flags = flags.values;
  return resolve_server_config(sources);
}

int cmd_serve(const ServeFlags& flags) {
  // Threads started below inherit the blocked mask; sigwait picks the signal up.
  sigset_t signals;
  sigemptyset(&signals);
  sigaddset(&signals, SIGINT);
  sigaddset(&signals, SIGTERM);
  pthread_sigmask(SIG_BLOCK, &signals, nullptr);

  try {
    auto config = resolve(flags);
    auto provider = build_provider(config, provider_key_from_env());
    auto dataset = load_configured_dataset(config);
    GatewayServer server(server_options(config), hub_options(config), dataset, provider);
    server.start();
    std::cout << fmt::format("ready: listening on {}:{} dataset={} passages={} provider={}", config.host,
                             server.port(), dataset->name, dataset->passages.size(), provider->tag())
              << std::endl;
    int sig = 0;
    sigwait(&signals, &sig);
    std::cout << "shutting down" << std::endl;
    server.stop();
    return 0;
  } catch (const ConfigError& e) {
    std::cerr << "ConfigError: " << e.what() << '\n';
    return kExitUsage;
  } catch (const NetworkError& e) {
    std::cerr << "BindError: " << e.what() << '\n';
    return kExitFailure;
  }
}

std::vector<double> parse_delays(const std::string& text) {
  std::vector<double> out;
  std::stringstream ss(text);
  for (std::string item; std::getline(ss, item, ',');) {
    if (item.empty()) continue;
    std::size_t used = 0;
    double v = std::stod(item, &used);
    if (used != item.size() || v < 0) throw std::invalid_argument(item);
    out.push_back(v);
  }
  return out;
}

struct SimulateFlags {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string inject_delays;
  std::string output;
  std::string host;
  std::optional<std::uint16_t> port;
  std::optional<std::uint64_t> stall_timeout_ms;
  bool allow_unsafe = false;
};

int cmd_simulate(const SimulateFlags& flags) {
  json overrides = json::object();
  if (flags.seed) overrides["seed"] = *flags.seed;
  if (!flags.output.empty()) overrides["output"] = std::filesystem::absolute(flags.output).string();
  if (!flags.host.empty()) overrides["host"] = flags.host;
  if (flags.port) overrides["port"] = *flags.port;
  if (flags.stall_timeout_ms) overrides["stall_timeout_ms"] = *flags.stall_timeout_ms;
  if (flags.allow_unsafe) overrides["allow_unsafe_persona"] = true;
  try {
    if (!flags.inject_delays.empty()) overrides["injected_delays"] = parse_delays(flags.inject_delays);
  } catch (const std::exception&) {
    std::cerr << "ConfigError: --inject-delays expects comma-separated non-negative seconds\n";
    return kExitUsage;
  }
  try {
    auto config = load_sim_config(flags.config_path, overrides);
    auto report = run_simulation(config);
    std::cout << report_markdown(report);
    if (config.output_dir) std::cout << "\nreport written to " << config.output_dir->string() << '\n';
    return report.reached_feedback ? 0 : kExitFailure;
  } catch (const SimError& e) {
    std::cerr << e.what() << '\n';
    return e.code() == SimErrc::Config ? kExitUsage : kExitFailure;
  } catch (const NetworkError& e) {
    std::cerr << "ServerUnreachable: " << e.what() << '\n';
    return kExitFailure;
  }
}

int cmd_validate(const std::string& path, const std::string& format) {
  try {
    auto ds = load_dataset(path, parse_dataset_format(format));
    std::cout << format_report(validate_dataset(ds));
    return 0;
  } catch (const DatasetError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitFailure;
  }
}

int cmd_feedback(const std::string& transcript_path, const std::string& provider_spec, const std::string& out) {
  Transcript transcript;
  {
    std::ifstream in(transcript_path);
    if (!in) {
      std::cerr << "error: cannot read " << transcript_path << '\n';
      return kExitFailure;
    }
    try {
      transcript = read_transcript(in);
    } catch (const TranscriptError& e) {
      std::cerr << "ParseError: " << transcript_path << ": " << e.what() << '\n';
      return kExitFailure;
    }
  }
  ProviderPtr provider;
  try {
    ConfigSources sources;
    sources.flags["provider"] = provider_spec;
    provider = build_provider(resolve_server_config(sources), provider_key_from_env());
  } catch (const ConfigError& e) {
    std::cerr << "ConfigError: " << e.what() << '\n';
    return kExitUsage;
  }

  auto roster = roster_from_transcript(transcript);
  auto report = generate_feedback(roster, transcript, *provider);
  json j = json::object();
  bool failed = false;
  for (const auto& name : roster) {
    const auto& fb = report.per_student[name];
    json entry = {{"feedback_text", fb.feedback_text},
                  {"stats",
                   {{"message_count", fb.stats.message_count},
                    {"mean_message_tokens", fb.stats.mean_message_tokens},
                    {"prompted_count", fb.stats.prompted_count}}}};
    if (fb.error) {
      entry["error"] = *fb.error;
      failed = true;
      std::cerr << "ProviderFailure: " << name << ": " << *fb.error << '\n';
    }
    j[name] = std::move(entry);
  }
  if (out.empty()) {
    std::cout << j.dump(2) << '\n';
  } else {
    std::ofstream o(out);
    o << j.dump(2) << '\n';
  }
  return failed ? kExitFailure : 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Moderated small-group reading discussions over a framed JSON protocol."};
  app.require_subcommand(1);

  ServeFlags serve_flags;
  auto* serve = app.add_subcommand("serve", "run the session server");
  add_config_flags(serve, serve_flags);

  SimulateFlags sim;
  auto* simulate = app.add_subcommand("simulate", "run one session with simulated students");
  simulate->add_option("config", sim.config_path, "simulation config (JSON)")->required()->check(CLI::ExistingFile);
  simulate->add_option("--seed", sim.seed, "override the config seed");
  simulate->add_option("--inject-delays", sim.inject_delays, "comma-separated seconds slept before moderator calls");
  simulate->add_option("--output", sim.output, "directory for report.json, summary.md, session.transcript");
  simulate->add_option("--host", sim.host, "use a running server instead of an embedded one");
  simulate->add_option("--port", sim.port, "port of the running server");
  simulate->add_option("--stall-timeout-ms", sim.stall_timeout_ms, "give up after this long without progress");
  simulate->add_flag("--allow-unsafe-persona", sim.allow_unsafe, "permit backend-driven toxic personas");

  std::string ds_path, ds_format = "canonical";
  auto* validate = app.add_subcommand("validate-dataset", "load a dataset and print a validation report");
  validate->add_option("path", ds_path, "dataset file or directory")->required();
  validate->add_option("--format", ds_format, "canonical | fairytaleqa")->capture_default_str();

  std::string transcript_path, provider_spec, feedback_out;
  auto* feedback = app.add_subcommand("feedback", "regenerate student feedback from an archived transcript");
  feedback->add_option("transcript", transcript_path, "transcript archive")->required();
  feedback->add_option("--provider", provider_spec, "provider JSON, inline or a file path")->required();
  feedback->add_option("--out", feedback_out, "write the report here instead of stdout");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*serve) return cmd_serve(serve_flags);
    if (*simulate) return cmd_simulate(sim);
    if (*validate) return cmd_validate(ds_path, ds_format);
    if (*feedback) return cmd_feedback(transcript_path, provider_spec, feedback_out);
  } catch (const ConfigError& e) {
    std::cerr << "ConfigError: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitFailure;
  }
  return kExitUsage;
}
