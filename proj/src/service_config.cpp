#include "discourse/service_config.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <random>

#include <fmt/format.h>

namespace discourse {

using nlohmann::json;

ConfigError::ConfigError(std::string field, const std::string& detail)
    : std::runtime_error(fmt::format("{}: {}", field, detail)), field_(std::move(field)) {}

const std::vector<std::string>& server_config_keys() {
  static const std::vector<std::string> keys = {
      "max_students", "max_tokens", "min_qa_pairs", "max_questions", "dataset_path", "dataset_format",
      "provider",     "host",       "port",         "seed",          "idle_prompt_ms", "heartbeat_ms",
      "archive_dir",  "logical_clock"};
  return keys;
}

std::string env_var_for(const std::string& key) {
  std::string out = "DISCOURSE_";
  for (char c : key) out += static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
  return out;
}

std::map<std::string, std::string> config_env(const std::function<const char*(const char*)>& getenv) {
  std::map<std::string, std::string> env;
  for (const auto& key : server_config_keys())
    if (const char* v = getenv(env_var_for(key).c_str())) env[key] = v;
  return env;
}

json load_config_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config", fmt::format("cannot read {}", path.string()));
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError("config", fmt::format("{}: {}", path.string(), e.what()));
  }
  if (!j.is_object()) throw ConfigError("config", "top level must be an object");
  const auto& keys = server_config_keys();
  for (const auto& [k, v] : j.items())
    if (std::find(keys.begin(), keys.end(), k) == keys.end()) throw ConfigError(k, "unknown configuration key");
  return j;
}

namespace {

// A setting from one layer, either raw text (flag/env) or typed JSON (file).
struct Raw {
  std::optional<std::string> text;
  const json* value = nullptr;
  bool from_file = false;
};

std::uint64_t parse_unsigned(const std::string& field, const std::string& text) {
  std::uint64_t v = 0;
  auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (ec != std::errc() || ptr != text.data() + text.size() || text.empty())
    throw ConfigError(field, fmt::format("expected a non-negative integer, got '{}'", text));
  return v;
}

class Resolver {
 public:
  explicit Resolver(const ConfigSources& s) : s_(s) {}

  std::optional<Raw> raw(const std::string& key) const {
    if (auto it = s_.flags.find(key); it != s_.flags.end()) return Raw{it->second, nullptr, false};
    if (auto it = s_.env.find(key); it != s_.env.end()) return Raw{it->second, nullptr, false};
    if (auto it = s_.file.find(key); it != s_.file.end() && !it->is_null()) return Raw{std::nullopt, &*it, true};
    return std::nullopt;
  }

  std::optional<std::uint64_t> unsigned_value(const std::string& key) const {
    auto r = raw(key);
    if (!r) return std::nullopt;
    if (r->text) return parse_unsigned(key, *r->text);
    if (r->value->is_number_unsigned()) return r->value->get<std::uint64_t>();
    if (r->value->is_number_integer()) {
      auto v = r->value->get<std::int64_t>();
      if (v < 0) throw ConfigError(key, fmt::format("expected a non-negative integer, got {}", v));
      return static_cast<std::uint64_t>(v);
    }
    throw ConfigError(key, "expected an integer");
  }

  std::size_t positive(const std::string& key, std::size_t fallback) const {
    auto v = unsigned_value(key).value_or(fallback);
    if (v < 1) throw ConfigError(key, "must be at least 1");
    return static_cast<std::size_t>(v);
  }

  std::optional<std::string> string_value(const std::string& key) const {
    auto r = raw(key);
    if (!r) return std::nullopt;
    if (r->text) return *r->text;
    if (!r->value->is_string()) throw ConfigError(key, "expected a string");
    return r->value->get<std::string>();
  }

  std::optional<bool> bool_value(const std::string& key) const {
    auto r = raw(key);
    if (!r) return std::nullopt;
    if (!r->text) {
      if (!r->value->is_boolean()) throw ConfigError(key, "expected true or false");
      return r->value->get<bool>();
    }
    std::string t = *r->text;
    std::transform(t.begin(), t.end(), t.begin(), [](unsigned char c) { return std::tolower(c); });
    if (t == "1" || t == "true" || t == "yes" || t == "on") return true;
    if (t == "0" || t == "false" || t == "no" || t == "off") return false;
    throw ConfigError(key, fmt::format("expected true or false, got '{}'", *r->text));
  }

  // Paths from the file resolve against the file's directory.
  std::optional<std::filesystem::path> path_value(const std::string& key) const {
    auto r = raw(key);
    auto s = string_value(key);
    if (!s) return std::nullopt;
    std::filesystem::path p(*s);
    if (r->from_file && p.is_relative() && !s_.file_dir.empty()) p = s_.file_dir / p;
    return p;
  }

  const ConfigSources& sources() const { return s_; }

 private:
  const ConfigSources& s_;
};

}  // namespace

ServerConfig resolve_server_config(const ConfigSources& sources) {
  Resolver r(sources);
  ServerConfig c;
  c.max_students = r.positive("max_students", c.max_students);
  c.max_tokens = r.positive("max_tokens", c.max_tokens);
  c.min_qa_pairs = r.positive("min_qa_pairs", c.min_qa_pairs);
  c.max_questions = r.positive("max_questions", c.max_questions);
  c.idle_prompt_ms = r.positive("idle_prompt_ms", c.idle_prompt_ms);
  c.heartbeat_ms = r.positive("heartbeat_ms", c.heartbeat_ms);

  if (auto p = r.path_value("dataset_path")) c.dataset_path = *p;
  if (auto f = r.string_value("dataset_format")) {
    try {
      c.dataset_format = parse_dataset_format(*f);
    } catch (const DatasetError& e) {
      throw ConfigError("dataset_format", e.what());
    }
  }

  if (auto raw = r.raw("provider")) {
    if (raw->text) {
      // Inline JSON, or a path to a JSON file.
      const auto& t = *raw->text;
      if (!t.empty() && t.front() == '{') {
        try {
          c.provider = json::parse(t);
        } catch (const json::exception& e) {
          throw ConfigError("provider", e.what());
        }
        c.provider_base = std::filesystem::current_path();
      } else {
        std::ifstream in(t);
        if (!in) throw ConfigError("provider", fmt::format("cannot read {}", t));
        try {
          c.provider = json::parse(in);
        } catch (const json::exception& e) {
          throw ConfigError("provider", fmt::format("{}: {}", t, e.what()));
        }
        c.provider_base = std::filesystem::path(t).parent_path();
      }
    } else {
      c.provider = *raw->value;
      c.provider_base = sources.file_dir;
    }
    if (!c.provider.is_object() || !c.provider.contains("type"))
      throw ConfigError("provider", "expected an object with a \"type\" field");
  }

  if (auto h = r.string_value("host")) {
    if (h->empty()) throw ConfigError("host", "must not be empty");
    c.host = *h;
  }
  if (auto p = r.unsigned_value("port")) {
    if (*p > 65535) throw ConfigError("port", fmt::format("{} is not a valid port", *p));
    c.port = static_cast<std::uint16_t>(*p);
  }
  c.seed = r.unsigned_value("seed");
  c.archive_dir = r.path_value("archive_dir");
  c.logical_clock = r.bool_value("logical_clock").value_or(c.logical_clock);
  return c;
}

ProviderPtr build_provider(const ServerConfig& config, const std::optional<std::string>& key) {
  try {
    return make_provider(config.provider, config.provider_base, key);
  } catch (const ProviderError& e) {
    throw ConfigError("provider", e.what());
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("provider", e.what());
  }
}

std::shared_ptr<const Dataset> load_configured_dataset(const ServerConfig& config) {
  if (config.dataset_path.empty()) throw ConfigError("dataset_path", "required");
  try {
    auto ds = std::make_shared<Dataset>(load_dataset(config.dataset_path, config.dataset_format));
    // Fails early when no passage can ever be drawn.
    select_passage(*ds, config.min_qa_pairs, 0);
    return ds;
  } catch (const DatasetError& e) {
    throw ConfigError("dataset_path", e.what());
  }
}

HubOptions hub_options(const ServerConfig& config) {
  HubOptions h;
  h.room.capacity = config.max_students;
  h.room.max_questions = config.max_questions;
  h.max_tokens = config.max_tokens;
  h.min_qa_pairs = config.min_qa_pairs;
  h.seed = config.seed.value_or(std::random_device{}());
  h.idle_prompt = std::chrono::milliseconds(config.idle_prompt_ms);
  h.logical_clock = config.logical_clock;
  h.archive_dir = config.archive_dir;
  return h;
}

ServerOptions server_options(const ServerConfig& config) {
  ServerOptions s;
  s.host = config.host;
  s.port = config.port;
  s.heartbeat = std::chrono::milliseconds(config.heartbeat_ms);
  return s;
}

}  // namespace discourse
