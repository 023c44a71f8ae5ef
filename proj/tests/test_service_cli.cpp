#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <csignal>
#include <fstream>
#include <regex>

#include <poll.h>

#include "discourse/moderator_engine.hpp"
#include "discourse/persona_sim.hpp"
#include "discourse/service_config.hpp"
#include "support.hpp"

using namespace discourse;
using nlohmann::json;
using testing::quoted;

namespace {

const std::string kCli = DISCOURSE_CLI;

ConfigError config_error(const ConfigSources& s) {
  try {
    resolve_server_config(s);
  } catch (const ConfigError& e) {
    return e;
  }
  FAIL("expected ConfigError");
  throw;
}

// Child process with stdout on a pipe.
struct Child {
  pid_t pid = -1;
  int out = -1;

  explicit Child(std::vector<std::string> args, std::vector<std::string> env = {}) {
    int fds[2];
    REQUIRE(::pipe(fds) == 0);
    pid = ::fork();
    if (pid == 0) {
      ::dup2(fds[1], 1);
      ::close(fds[0]);
      ::close(fds[1]);
      for (const auto& kv : env) ::putenv(const_cast<char*>(kv.c_str()));
      std::vector<char*> argv;
      for (auto& a : args) argv.push_back(a.data());
      argv.push_back(nullptr);
      ::execv(argv[0], argv.data());
      ::_exit(127);
    }
    ::close(fds[1]);
    out = fds[0];
  }
  ~Child() {
    if (pid > 0) {
      ::kill(pid, SIGKILL);
      ::waitpid(pid, nullptr, 0);
    }
    if (out >= 0) ::close(out);
  }

  // First stdout line, or empty after `timeout_ms`.
  std::string read_line(int timeout_ms) {
    std::string line;
    char c;
    while (true) {
      pollfd p{out, POLLIN, 0};
      if (::poll(&p, 1, timeout_ms) <= 0) return line;
      if (::read(out, &c, 1) != 1 || c == '\n') return line;
      line += c;
    }
  }

  int stop(int sig) {
    ::kill(pid, sig);
    int status = 0;
    ::waitpid(pid, &status, 0);
    pid = -1;
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  }
};

}  // namespace

TEST_CASE("settings resolve flag over environment over file over default") {
  ConfigSources s;
  CHECK(resolve_server_config(s).max_students == 4);
  CHECK(resolve_server_config(s).max_tokens == 5000);

  s.file = {{"max_students", 6}, {"max_tokens", 900}, {"host", "0.0.0.0"}};
  auto c = resolve_server_config(s);
  CHECK(c.max_students == 6);
  CHECK(c.max_tokens == 900);
  CHECK(c.host == "0.0.0.0");

  s.env = {{"max_students", "5"}, {"max_tokens", "800"}};
  c = resolve_server_config(s);
  CHECK(c.max_students == 5);
  CHECK(c.max_tokens == 800);
  CHECK(c.host == "0.0.0.0");

  s.flags = {{"max_students", "3"}};
  c = resolve_server_config(s);
  CHECK(c.max_students == 3);
  CHECK(c.max_tokens == 800);
  CHECK(c.min_qa_pairs == 1);
  CHECK(c.max_questions == 3);
}

TEST_CASE("environment variable names") {
  CHECK(env_var_for("max_students") == "DISCOURSE_MAX_STUDENTS");
  std::map<std::string, std::string> fake = {{"DISCOURSE_PORT", "9000"}, {"UNRELATED", "1"}};
  auto env = config_env([&](const char* name) -> const char* {
    auto it = fake.find(name);
    return it == fake.end() ? nullptr : it->second.c_str();
  });
  CHECK(env == std::map<std::string, std::string>{{"port", "9000"}});
}

TEST_CASE("bad settings name the field") {
  ConfigSources s;
  SUBCASE("zero students") {
    s.flags = {{"max_students", "0"}};
    CHECK(config_error(s).field() == "max_students");
  }
  SUBCASE("not a number") {
    s.env = {{"max_tokens", "lots"}};
    CHECK(config_error(s).field() == "max_tokens");
  }
  SUBCASE("negative in the file") {
    s.file = {{"min_qa_pairs", -2}};
    CHECK(config_error(s).field() == "min_qa_pairs");
  }
  SUBCASE("port out of range") {
    s.flags = {{"port", "70000"}};
    CHECK(config_error(s).field() == "port");
  }
  SUBCASE("bad boolean") {
    s.flags = {{"logical_clock", "maybe"}};
    CHECK(config_error(s).field() == "logical_clock");
  }
  SUBCASE("bad dataset format") {
    s.flags = {{"dataset_format", "xml"}};
    CHECK(config_error(s).field() == "dataset_format");
  }
  SUBCASE("unknown key in a config file") {
    testing::TempDir tmp;
    std::ofstream(tmp / "c.json") << R"({"max_students": 4, "max_studnets": 5})";
    try {
      load_config_file(tmp / "c.json");
      FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
      CHECK(e.field() == "max_studnets");
    }
  }
  SUBCASE("remote provider without a key") {
    s.flags = {{"provider", R"({"type":"remote","base_url":"https://x.invalid/v1","model_name":"m"})"}};
    auto c = resolve_server_config(s);
    try {
      build_provider(c, std::nullopt);
      FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
      CHECK(e.field() == "provider");
    }
  }
  SUBCASE("dataset with nothing eligible") {
    s.flags = {{"dataset_path", testing::fixture("canonical.jsonl").string()}, {"min_qa_pairs", "9"}};
    try {
      load_configured_dataset(resolve_server_config(s));
      FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
      CHECK(e.field() == "dataset_path");
    }
  }
}

TEST_CASE("file paths resolve against the config file") {
  ConfigSources s;
  s.file = {{"dataset_path", "canonical.jsonl"}, {"provider", {{"type", "replay"}, {"path", "session.replay.jsonl"}}}};
  s.file_dir = FIXTURE_DIR;
  auto c = resolve_server_config(s);
  CHECK(load_configured_dataset(c)->passages.size() == 3);
  CHECK(build_provider(c, std::nullopt)->tag() == "replay:session.replay.jsonl");
}

TEST_CASE("validate-dataset") {
  SUBCASE("canonical") {
    auto r = testing::run_command(kCli + " validate-dataset " + quoted(testing::fixture("canonical.jsonl")));
    CHECK(r.exit_code == 0);
    CHECK(r.out.find("passages: 3") != std::string::npos);
    CHECK(r.out.find("questions: 8") != std::string::npos);
    CHECK(r.out.find("digest: sha256:") != std::string::npos);
  }
  SUBCASE("malformed") {
    auto r = testing::run_command(kCli + " validate-dataset " + quoted(testing::fixture("malformed.jsonl")));
    CHECK(r.exit_code == 1);
    CHECK(r.err.find("line 2") != std::string::npos);
  }
  SUBCASE("FairytaleQA excerpt") {
    auto r = testing::run_command(kCli + " validate-dataset --format fairytaleqa " +
                                  quoted(testing::fixture("fairytaleqa_excerpt")));
    CHECK(r.exit_code == 0);
    CHECK(r.out.find("questions: 19") != std::string::npos);
    CHECK(r.out.find("explicit: 11") != std::string::npos);
    CHECK(r.out.find("implicit: 8") != std::string::npos);
  }
}

TEST_CASE("simulate and feedback") {
  testing::TempDir tmp;
  auto r = testing::run_command(kCli + " simulate " + quoted(testing::config_file("table3_scripted.json")) +
                                " --output " + quoted(tmp / "run"));
  REQUIRE(r.exit_code == 0);
  CHECK(r.out.find("Reached feedback: yes") != std::string::npos);
  auto report = json::parse(testing::slurp(tmp / "run" / "report.json"));
  REQUIRE(report["feedback"].size() == 4);

  SUBCASE("feedback regenerated from the transcript matches the run") {
    const auto provider = R"({"type":"scripted","fallback":"fb {key}"})";
    auto fb = testing::run_command(kCli + " feedback " + quoted(tmp / "run" / "session.transcript") +
                                   " --provider '" + provider + "' --out " + quoted(tmp / "fb.json"));
    REQUIRE(fb.exit_code == 0);
    auto j = json::parse(testing::slurp(tmp / "fb.json"));
    REQUIRE(j.size() == 4);
    for (const auto& [name, entry] : j.items()) {
      CAPTURE(name);
      CHECK(entry["feedback_text"] == "fb feedback:" + name);
      CHECK(entry["stats"] == report["feedback"][name]["stats"]);
    }
  }
  SUBCASE("a transcript with an unknown role is a parse error with a line number") {
    auto text = testing::slurp(tmp / "run" / "session.transcript");
    const auto pos = text.find("\tstudent\t");
    REQUIRE(pos != std::string::npos);
    const auto line = 1 + std::count(text.begin(), text.begin() + static_cast<std::ptrdiff_t>(pos), '\n');
    text.replace(pos, 9, "\tteacher\t");
    std::ofstream(tmp / "bad.transcript") << text;
    auto fb = testing::run_command(kCli + " feedback " + quoted(tmp / "bad.transcript") +
                                   R"( --provider '{"type":"scripted","fallback":"x"}')");
    CHECK(fb.exit_code == 1);
    CHECK(fb.err.find("ParseError") != std::string::npos);
    CHECK(fb.err.find("line " + std::to_string(line)) != std::string::npos);
  }
}

TEST_CASE("simulate with no server reports it") {
  std::uint16_t port;
  {
    auto s = listen_tcp("127.0.0.1", 0);
    port = local_port(s);
  }
  auto r = testing::run_command(kCli + " simulate " + quoted(testing::config_file("all_constructive.json")) +
                                " --host 127.0.0.1 --port " + std::to_string(port));
  CHECK(r.exit_code != 0);
  CHECK(r.err.find("ServerUnreachable") != std::string::npos);
}

TEST_CASE("serve") {
  SUBCASE("prints a readiness line and exits cleanly on SIGINT") {
    Child child({kCli, "serve", "--port", "0", "--dataset-path", testing::fixture("canonical.jsonl").string()});
    const auto line = child.read_line(5000);
    std::smatch m;
    REQUIRE(std::regex_search(line, m, std::regex(R"(^ready: listening on 127\.0\.0\.1:(\d+) dataset=canonical )")));
    const auto port = static_cast<std::uint16_t>(std::stoi(m[1]));
    CHECK(port != 0);
    {
      GatewayClient c("127.0.0.1", port);
      c.send("create_room", {{"display_name", "Ethan"}});
      CHECK(c.receive_type("room_created", std::chrono::milliseconds(3000)).has_value());
    }
    CHECK(child.stop(SIGINT) == 0);
  }
  SUBCASE("zero capacity is refused before binding") {
    auto r = testing::run_command(kCli + " serve --port 0 --max-students 0 --dataset-path " +
                                  quoted(testing::fixture("canonical.jsonl")));
    CHECK(r.exit_code == 2);
    CHECK(r.err.find("ConfigError: max_students") != std::string::npos);
  }
  SUBCASE("environment settings apply") {
    auto r = testing::run_command("DISCOURSE_MAX_TOKENS=0 " + kCli + " serve --port 0 --dataset-path " +
                                  quoted(testing::fixture("canonical.jsonl")));
    CHECK(r.exit_code == 2);
    CHECK(r.err.find("max_tokens") != std::string::npos);
  }
  SUBCASE("remote provider without a key") {
    auto r = testing::run_command(
        "env -u DISCOURSE_PROVIDER_KEY " + kCli + " serve --port 0 --dataset-path " +
        quoted(testing::fixture("canonical.jsonl")) +
        R"( --provider '{"type":"remote","base_url":"https://x.invalid/v1","model_name":"m"}')");
    CHECK(r.exit_code == 2);
    CHECK(r.err.find("ConfigError: provider") != std::string::npos);
    CHECK(r.out.find("ready") == std::string::npos);
  }
}
