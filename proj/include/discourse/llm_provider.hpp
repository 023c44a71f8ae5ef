#pragma once

#include <chrono>
#include <cstddef>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

namespace discourse {

struct ProviderMessage {
  std::string role;  // "moderator" | "student" | "system"
  std::string name;
  std::string text;
};

struct ProviderRequest {
  std::string system_prompt;
  std::vector<ProviderMessage> messages;
  // Natural-language instruction for this turn.
  std::string directive;
  // Short machine key for the same instruction, e.g. "ask:0", "prompt:Ethan",
  // "feedback:Sophia", "persona:Jordan". Scripted and replay backends match on it.
  std::string directive_key;
  std::size_t max_output_tokens = 512;
};

struct ProviderResponse {
  std::string text;
  double latency_seconds = 0.0;
  std::string provider_tag;
};

enum class ProviderErrc { Timeout, RemoteError, ScriptExhausted, Transport, Config };

std::string_view to_string(ProviderErrc code);

class ProviderError : public std::runtime_error {
 public:
  ProviderError(ProviderErrc code, const std::string& detail, int status = 0, int attempts = 1);
  ProviderErrc code() const noexcept { return code_; }
  int status() const noexcept { return status_; }
  // Number of attempts made before giving up.
  int attempts() const noexcept { return attempts_; }

 private:
  ProviderErrc code_;
  int status_;
  int attempts_;
};

class Provider {
 public:
  virtual ~Provider() = default;
  // Thread-safe. Fills latency_seconds with the wall time of the call.
  virtual ProviderResponse generate(const ProviderRequest& request) = 0;
  virtual std::string tag() const = 0;
};

using ProviderPtr = std::shared_ptr<Provider>;

// Table lookup on directive_key. Keys missing from the table fall back to
// `fallback` when set, with "{key}" replaced by the directive key; otherwise
// the call fails with ScriptExhausted.
class ScriptedProvider final : public Provider {
 public:
  explicit ScriptedProvider(std::map<std::string, std::string> table,
                            std::optional<std::string> fallback = std::nullopt, std::string tag = "scripted");

  ProviderResponse generate(const ProviderRequest& request) override;
  std::string tag() const override { return tag_; }

 private:
  std::map<std::string, std::string> table_;
  std::optional<std::string> fallback_;
  std::string tag_;
};

// Replay script, one JSON object per line. The first line is the header
//   {"format": "discourse-replay", "version": 1}
// and every following line a record
//   {"match": "<pattern>", "response": "<text>"}
// Patterns: an exact directive key, a prefix ending in '*', "*" for anything,
// or "role:<role>" which matches when the last request message has that role.
// Each call consumes the first unconsumed record at or after the cursor that
// matches; records skipped over stay behind the cursor for good.
struct ReplayRecord {
  std::string match;
  std::string response;
};

class ReplayProvider final : public Provider {
 public:
  static constexpr int kFormatVersion = 1;

  explicit ReplayProvider(std::vector<ReplayRecord> records, std::string tag = "replay");
  static std::shared_ptr<ReplayProvider> from_file(const std::filesystem::path& path);

  ProviderResponse generate(const ProviderRequest& request) override;
  std::string tag() const override { return tag_; }
  std::size_t remaining() const;

 private:
  std::vector<ReplayRecord> records_;
  std::string tag_;
  mutable std::mutex mu_;
  std::size_t cursor_ = 0;
};

struct RemoteConfig {
  std::string base_url;     // e.g. "https://api.openai.com/v1"
  std::string model_name;
  double deadline_seconds = 30.0;
  int retry_count = 1;      // extra attempts after a timeout
  std::string api_key;      // normally read from DISCOURSE_PROVIDER_KEY
};

// Chat-completions style client: POST <base_url>/chat/completions with a
// messages array and a bearer credential.
class RemoteProvider final : public Provider {
 public:
  explicit RemoteProvider(RemoteConfig config);

  ProviderResponse generate(const ProviderRequest& request) override;
  std::string tag() const override;

  // The JSON body sent for `request`; exposed for wire-shape tests.
  std::string request_body(const ProviderRequest& request) const;

 private:
  RemoteConfig config_;
  std::string scheme_host_port_;
  std::string path_prefix_;
};

// Sleeps delays[i] before the i-th response (no delay once the vector is used up).
class InjectedLatencyProvider final : public Provider {
 public:
  InjectedLatencyProvider(ProviderPtr inner, std::vector<double> delays);

  ProviderResponse generate(const ProviderRequest& request) override;
  std::string tag() const override { return inner_->tag(); }
  std::size_t calls() const;

 private:
  ProviderPtr inner_;
  std::vector<double> delays_;
  mutable std::mutex mu_;
  std::size_t calls_ = 0;
};

ProviderPtr with_injected_latency(ProviderPtr backend, std::vector<double> delays);

// Builds a provider from a JSON description:
//   {"type": "scripted", "table": {...}, "fallback": "..."}
//   {"type": "replay", "path": "script.jsonl"}
//   {"type": "remote", "base_url": "...", "model_name": "...",
//    "deadline_seconds": 30, "retry_count": 1}
// Relative paths resolve against `base_dir`. A remote provider takes its key
// from `env_key` (DISCOURSE_PROVIDER_KEY) and fails with Config when absent.
ProviderPtr make_provider(const nlohmann::json& spec, const std::filesystem::path& base_dir,
                          const std::optional<std::string>& env_key);

// Reads DISCOURSE_PROVIDER_KEY from the process environment.
std::optional<std::string> provider_key_from_env();

}  // namespace discourse
