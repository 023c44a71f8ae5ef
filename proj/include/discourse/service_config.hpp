#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "discourse/dataset_store.hpp"
#include "discourse/gateway.hpp"
#include "discourse/llm_provider.hpp"

namespace discourse {

class ConfigError : public std::runtime_error {
 public:
  ConfigError(std::string field, const std::string& detail);
  const std::string& field() const noexcept { return field_; }

 private:
  std::string field_;
};

struct ServerConfig {
  std::size_t max_students = 4;
  std::size_t max_tokens = 5000;
  std::size_t min_qa_pairs = 1;
  std::size_t max_questions = 3;
  std::filesystem::path dataset_path;
  DatasetFormat dataset_format = DatasetFormat::Canonical;
  // Provider description as accepted by make_provider.
  nlohmann::json provider = {{"type", "scripted"}, {"fallback", "({key})"}};
  std::filesystem::path provider_base;  // resolves relative paths inside `provider`
  std::string host = "127.0.0.1";
  std::uint16_t port = 8765;  // 0 picks an ephemeral port
  std::optional<std::uint64_t> seed;
  std::size_t idle_prompt_ms = 20000;
  std::size_t heartbeat_ms = 15000;
  std::optional<std::filesystem::path> archive_dir;
  bool logical_clock = false;
};

// Every configurable key, in --help order.
const std::vector<std::string>& server_config_keys();

// Key -> environment variable, e.g. max_students -> DISCOURSE_MAX_STUDENTS.
std::string env_var_for(const std::string& key);

// Raw settings per layer. Flag and environment values are strings; file
// values keep their JSON type.
struct ConfigSources {
  nlohmann::json file = nlohmann::json::object();
  std::filesystem::path file_dir;
  std::map<std::string, std::string> env;
  std::map<std::string, std::string> flags;
};

// Collects DISCOURSE_* variables through `getenv`.
std::map<std::string, std::string> config_env(const std::function<const char*(const char*)>& getenv);
// Reads a JSON config file; unknown keys are a ConfigError.
nlohmann::json load_config_file(const std::filesystem::path& path);

// flag > environment > file > default. Throws ConfigError naming the field.
ServerConfig resolve_server_config(const ConfigSources& sources);

// Fails with ConfigError("provider") when the provider cannot be built, e.g.
// a remote backend with no key.
ProviderPtr build_provider(const ServerConfig& config, const std::optional<std::string>& key);
// Loads and checks the dataset; ConfigError("dataset_path") on failure.
std::shared_ptr<const Dataset> load_configured_dataset(const ServerConfig& config);

HubOptions hub_options(const ServerConfig& config);
ServerOptions server_options(const ServerConfig& config);

}  // namespace discourse
