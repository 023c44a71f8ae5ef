#include "discourse/llm_provider.hpp"

#include <cstdlib>
#include <fstream>
#include <thread>

#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include <httplib.h>

namespace discourse {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

std::string replace_all(std::string text, std::string_view from, std::string_view to) {
  for (std::size_t pos = 0; (pos = text.find(from, pos)) != std::string::npos; pos += to.size())
    text.replace(pos, from.size(), to);
  return text;
}

}  // namespace

std::string_view to_string(ProviderErrc code) {
  switch (code) {
    case ProviderErrc::Timeout: return "timeout";
    case ProviderErrc::RemoteError: return "remote_error";
    case ProviderErrc::ScriptExhausted: return "script_exhausted";
    case ProviderErrc::Transport: return "transport";
    case ProviderErrc::Config: return "config";
  }
  return "unknown";
}

ProviderError::ProviderError(ProviderErrc code, const std::string& detail, int status, int attempts)
    : std::runtime_error(fmt::format("{}: {}", to_string(code), detail)),
      code_(code),
      status_(status),
      attempts_(attempts) {}

// ---------------------------------------------------------------------------
// Scripted

ScriptedProvider::ScriptedProvider(std::map<std::string, std::string> table, std::optional<std::string> fallback,
                                   std::string tag)
    : table_(std::move(table)), fallback_(std::move(fallback)), tag_(std::move(tag)) {}

ProviderResponse ScriptedProvider::generate(const ProviderRequest& request) {
  const auto start = Clock::now();
  std::string text;
  if (auto it = table_.find(request.directive_key); it != table_.end()) {
    text = it->second;
  } else if (fallback_) {
    text = replace_all(*fallback_, "{key}", request.directive_key);
  } else {
    throw ProviderError(ProviderErrc::ScriptExhausted,
                        fmt::format("no scripted response for '{}'", request.directive_key));
  }
  return {std::move(text), seconds_since(start), tag_};
}

// ---------------------------------------------------------------------------
// Replay

ReplayProvider::ReplayProvider(std::vector<ReplayRecord> records, std::string tag)
    : records_(std::move(records)), tag_(std::move(tag)) {}

std::shared_ptr<ReplayProvider> ReplayProvider::from_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ProviderError(ProviderErrc::Config, "cannot open replay script " + path.string());
  std::vector<ReplayRecord> records;
  std::string line;
  std::size_t line_no = 0;
  bool header_seen = false;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error& e) {
      throw ProviderError(ProviderErrc::Config,
                          fmt::format("{}: line {}: invalid JSON ({})", path.string(), line_no, e.what()));
    }
    if (!header_seen) {
      if (j.value("format", "") != "discourse-replay" || j.value("version", 0) != kFormatVersion)
        throw ProviderError(ProviderErrc::Config,
                            fmt::format("{}: line {}: expected header {{\"format\":\"discourse-replay\","
                                        "\"version\":{}}}",
                                        path.string(), line_no, kFormatVersion));
      header_seen = true;
      continue;
    }
    if (!j.contains("match") || !j.contains("response") || !j["match"].is_string() || !j["response"].is_string())
      throw ProviderError(ProviderErrc::Config,
                          fmt::format("{}: line {}: record needs string 'match' and 'response'", path.string(),
                                      line_no));
    records.push_back({j["match"].get<std::string>(), j["response"].get<std::string>()});
  }
  if (!header_seen) throw ProviderError(ProviderErrc::Config, path.string() + ": empty replay script");
  return std::make_shared<ReplayProvider>(std::move(records), "replay:" + path.filename().string());
}

namespace {

bool replay_matches(const std::string& pattern, const ProviderRequest& request) {
  if (pattern == "*") return true;
  if (pattern.rfind("role:", 0) == 0)
    return !request.messages.empty() && request.messages.back().role == pattern.substr(5);
  if (!pattern.empty() && pattern.back() == '*')
    return request.directive_key.rfind(pattern.substr(0, pattern.size() - 1), 0) == 0;
  return request.directive_key == pattern;
}

}  // namespace

ProviderResponse ReplayProvider::generate(const ProviderRequest& request) {
  const auto start = Clock::now();
  std::lock_guard lock(mu_);
  for (std::size_t i = cursor_; i < records_.size(); ++i) {
    if (!replay_matches(records_[i].match, request)) continue;
    cursor_ = i + 1;
    return {records_[i].response, seconds_since(start), tag_};
  }
  throw ProviderError(ProviderErrc::ScriptExhausted,
                      fmt::format("replay script has no record for '{}' after position {}",
                                  request.directive_key, cursor_));
}

std::size_t ReplayProvider::remaining() const {
  std::lock_guard lock(mu_);
  return records_.size() - cursor_;
}

// ---------------------------------------------------------------------------
// Remote

RemoteProvider::RemoteProvider(RemoteConfig config) : config_(std::move(config)) {
  const auto& url = config_.base_url;
  auto scheme_end = url.find("://");
  if (scheme_end == std::string::npos)
    throw ProviderError(ProviderErrc::Config, "base_url must include a scheme: " + url);
  auto path_start = url.find('/', scheme_end + 3);
  scheme_host_port_ = url.substr(0, path_start);
  path_prefix_ = path_start == std::string::npos ? "" : url.substr(path_start);
  while (!path_prefix_.empty() && path_prefix_.back() == '/') path_prefix_.pop_back();
  if (config_.deadline_seconds <= 0) throw ProviderError(ProviderErrc::Config, "deadline_seconds must be positive");
}

std::string RemoteProvider::tag() const { return "remote:" + config_.model_name; }

std::string RemoteProvider::request_body(const ProviderRequest& request) const {
  json messages = json::array();
  messages.push_back({{"role", "system"}, {"content", request.system_prompt}});
  for (const auto& m : request.messages) {
    if (m.role == "moderator") {
      messages.push_back({{"role", "assistant"}, {"content", m.text}});
    } else if (m.role == "student") {
      messages.push_back({{"role", "user"}, {"content", m.name + ": " + m.text}});
    } else {
      messages.push_back({{"role", "system"}, {"content", m.text}});
    }
  }
  messages.push_back({{"role", "system"}, {"content", request.directive}});
  json body = {{"model", config_.model_name},
               {"messages", std::move(messages)},
               {"max_tokens", request.max_output_tokens}};
  return body.dump();
}

ProviderResponse RemoteProvider::generate(const ProviderRequest& request) {
  const auto start = Clock::now();
  const auto body = request_body(request);
  const auto path = path_prefix_ + "/chat/completions";

  const int attempts_allowed = 1 + std::max(0, config_.retry_count);
  for (int attempt = 1;; ++attempt) {
    httplib::Client client(scheme_host_port_);
    const auto deadline = std::chrono::duration<double>(config_.deadline_seconds);
    const auto secs = std::chrono::duration_cast<std::chrono::seconds>(deadline);
    const auto usecs = std::chrono::duration_cast<std::chrono::microseconds>(deadline - secs);
    client.set_connection_timeout(secs.count(), usecs.count());
    client.set_read_timeout(secs.count(), usecs.count());
    client.set_write_timeout(secs.count(), usecs.count());
    if (!config_.api_key.empty()) client.set_bearer_token_auth(config_.api_key);

    auto res = client.Post(path, body, "application/json");
    if (!res) {
      const auto err = res.error();
      const bool timed_out = err == httplib::Error::Read || err == httplib::Error::Write ||
                             err == httplib::Error::ConnectionTimeout;
      if (timed_out && attempt < attempts_allowed) continue;
      throw ProviderError(timed_out ? ProviderErrc::Timeout : ProviderErrc::Transport,
                          fmt::format("{} {} failed: {}", scheme_host_port_, path, httplib::to_string(err)), 0,
                          attempt);
    }
    if (res->status != 200) {
      throw ProviderError(ProviderErrc::RemoteError,
                          fmt::format("HTTP {}: {}", res->status, res->body.substr(0, 200)), res->status, attempt);
    }
    try {
      auto j = json::parse(res->body);
      auto text = j.at("choices").at(0).at("message").at("content").get<std::string>();
      if (text.empty()) throw ProviderError(ProviderErrc::RemoteError, "empty completion", res->status, attempt);
      return {std::move(text), seconds_since(start), tag()};
    } catch (const json::exception& e) {
      throw ProviderError(ProviderErrc::RemoteError,
                          fmt::format("unexpected response body ({}): {}", e.what(), res->body.substr(0, 200)),
                          res->status, attempt);
    }
  }
}

// ---------------------------------------------------------------------------
// Injected latency

InjectedLatencyProvider::InjectedLatencyProvider(ProviderPtr inner, std::vector<double> delays)
    : inner_(std::move(inner)), delays_(std::move(delays)) {
  if (!inner_) throw std::invalid_argument("injected latency needs a backend");
  if (delays_.empty()) throw std::invalid_argument("injected latency needs at least one delay");
  for (double d : delays_)
    if (d < 0) throw std::invalid_argument("injected delays must be non-negative");
}

ProviderResponse InjectedLatencyProvider::generate(const ProviderRequest& request) {
  const auto start = Clock::now();
  double delay = 0.0;
  {
    std::lock_guard lock(mu_);
    if (calls_ < delays_.size()) delay = delays_[calls_];
    ++calls_;
  }
  if (delay > 0) std::this_thread::sleep_for(std::chrono::duration<double>(delay));
  auto response = inner_->generate(request);
  response.latency_seconds = seconds_since(start);
  return response;
}

std::size_t InjectedLatencyProvider::calls() const {
  std::lock_guard lock(mu_);
  return calls_;
}

ProviderPtr with_injected_latency(ProviderPtr backend, std::vector<double> delays) {
  return std::make_shared<InjectedLatencyProvider>(std::move(backend), std::move(delays));
}

// ---------------------------------------------------------------------------

std::optional<std::string> provider_key_from_env() {
  if (const char* key = std::getenv("DISCOURSE_PROVIDER_KEY"); key && *key) return std::string(key);
  return std::nullopt;
}

ProviderPtr make_provider(const json& spec, const fs::path& base_dir, const std::optional<std::string>& env_key) {
  if (!spec.is_object()) throw ProviderError(ProviderErrc::Config, "provider spec must be an object");
  const auto type = spec.value("type", std::string());
  if (type == "scripted") {
    std::map<std::string, std::string> table;
    if (spec.contains("table")) table = spec.at("table").get<std::map<std::string, std::string>>();
    std::optional<std::string> fallback;
    if (spec.contains("fallback")) fallback = spec.at("fallback").get<std::string>();
    return std::make_shared<ScriptedProvider>(std::move(table), std::move(fallback),
                                              spec.value("tag", std::string("scripted")));
  }
  if (type == "replay") {
    fs::path path = spec.at("path").get<std::string>();
    if (path.is_relative()) path = base_dir / path;
    return ReplayProvider::from_file(path);
  }
  if (type == "remote") {
    RemoteConfig rc;
    rc.base_url = spec.value("base_url", std::string());
    rc.model_name = spec.value("model_name", std::string());
    rc.deadline_seconds = spec.value("deadline_seconds", 30.0);
    rc.retry_count = spec.value("retry_count", 1);
    if (rc.base_url.empty()) throw ProviderError(ProviderErrc::Config, "provider.base_url is required");
    if (rc.model_name.empty()) throw ProviderError(ProviderErrc::Config, "provider.model_name is required");
    if (!env_key) throw ProviderError(ProviderErrc::Config, "DISCOURSE_PROVIDER_KEY is not set");
    rc.api_key = *env_key;
    return std::make_shared<RemoteProvider>(std::move(rc));
  }
  throw ProviderError(ProviderErrc::Config, fmt::format("unknown provider type '{}'", type));
}

}  // namespace discourse
