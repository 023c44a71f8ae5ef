#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <atomic>
#include <thread>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "discourse/llm_provider.hpp"
#include "support.hpp"

using namespace discourse;
using nlohmann::json;

namespace {

ProviderRequest request(const std::string& key, std::vector<ProviderMessage> messages = {}) {
  ProviderRequest r;
  r.system_prompt = "You moderate.";
  r.messages = std::move(messages);
  r.directive = "Do the thing.";
  r.directive_key = key;
  return r;
}

ProviderError error_of(Provider& p, const ProviderRequest& r) {
  try {
    p.generate(r);
  } catch (const ProviderError& e) {
    return e;
  }
  FAIL("expected ProviderError");
  throw;
}

// Minimal chat-completions endpoint on an ephemeral port.
class StubServer {
 public:
  StubServer() {
    server_.Post("/v1/chat/completions", [this](const httplib::Request& req, httplib::Response& res) {
      ++hits_;
      {
        std::lock_guard lock(mu_);
        last_body_ = req.body;
        last_auth_ = req.get_header_value("Authorization");
      }
      const int mode = mode_.load();
      if (mode == 1) {
        res.status = 500;
        res.set_content("internal", "text/plain");
        return;
      }
      if (mode == 2 && hits_ == 1) std::this_thread::sleep_for(std::chrono::milliseconds(600));
      json reply = {{"choices", {{{"message", {{"role", "assistant"}, {"content", "stub reply"}}}}}}};
      res.set_content(reply.dump(), "application/json");
    });
    port_ = server_.bind_to_any_port("127.0.0.1");
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
  }
  ~StubServer() {
    server_.stop();
    thread_.join();
  }
  std::string base_url() const { return "http://127.0.0.1:" + std::to_string(port_) + "/v1"; }
  void set_mode(int m) { mode_ = m; }  // 0 ok, 1 HTTP 500, 2 first call slow
  int hits() const { return hits_; }
  std::string last_body() {
    std::lock_guard lock(mu_);
    return last_body_;
  }
  std::string last_auth() {
    std::lock_guard lock(mu_);
    return last_auth_;
  }

 private:
  httplib::Server server_;
  std::thread thread_;
  int port_ = 0;
  std::atomic<int> mode_{0};
  std::atomic<int> hits_{0};
  std::mutex mu_;
  std::string last_body_, last_auth_;
};

}  // namespace

TEST_CASE("scripted provider") {
  ScriptedProvider p(std::map<std::string, std::string>{{"open", "Welcome!"}});
  auto r = p.generate(request("open"));
  CHECK(r.text == "Welcome!");
  CHECK(r.provider_tag == "scripted");
  CHECK(r.latency_seconds >= 0.0);
  CHECK(error_of(p, request("ask:0")).code() == ProviderErrc::ScriptExhausted);

  ScriptedProvider with_fallback({}, "Let's keep going. ({key})", "table");
  CHECK(with_fallback.generate(request("reveal:2")).text == "Let's keep going. (reveal:2)");
  CHECK(with_fallback.tag() == "table");
}

TEST_CASE("replay provider") {
  auto p = ReplayProvider::from_file(testing::fixture("session.replay.jsonl"));
  CHECK(p->remaining() == 6);

  SUBCASE("fixture lines come back verbatim") {
    CHECK(p->generate(request("open")).text == "Hello everyone, I'm your Moderator today.");
    CHECK(p->generate(request("persona:Jordan")).text ==
          "Honestly, who cares? It's not like it's some groundbreaking plot twist");
  }
  SUBCASE("prefix and role patterns") {
    CHECK(p->generate(request("prompt:Ethan")).text == "What do you think? Even a small guess helps.");
    CHECK(p->generate(request("ask:0", {{"student", "Daniel", "hm"}})).text == "Thanks for sharing that.");
    CHECK(p->generate(request("reveal:0")).text == "Let's keep going.");
  }
  SUBCASE("records behind the cursor are not reused") {
    CHECK(p->generate(request("anything")).text == "Let's keep going.");
    CHECK(p->remaining() == 0);
    CHECK(error_of(*p, request("open")).code() == ProviderErrc::ScriptExhausted);
  }

  testing::TempDir tmp;
  SUBCASE("header is required") {
    std::ofstream(tmp / "bad.jsonl") << R"({"match": "*", "response": "x"})" << '\n';
    try {
      ReplayProvider::from_file(tmp / "bad.jsonl");
      FAIL("expected Config");
    } catch (const ProviderError& e) {
      CHECK(e.code() == ProviderErrc::Config);
      CHECK(std::string(e.what()).find("line 1") != std::string::npos);
    }
  }
  SUBCASE("version mismatch") {
    std::ofstream(tmp / "v2.jsonl") << R"({"format": "discourse-replay", "version": 2})" << '\n';
    CHECK_THROWS_AS(ReplayProvider::from_file(tmp / "v2.jsonl"), ProviderError);
  }
}

TEST_CASE("remote provider against a local stub") {
  StubServer stub;
  RemoteConfig cfg;
  cfg.base_url = stub.base_url();
  cfg.model_name = "test-model";
  cfg.api_key = "sk-test";
  cfg.deadline_seconds = 0.3;

  SUBCASE("success") {
    RemoteProvider p(cfg);
    auto r = p.generate(request("open", {{"student", "Sophia", "hi"}, {"moderator", "Moderator", "hello"}}));
    CHECK(r.text == "stub reply");
    CHECK(r.provider_tag == "remote:test-model");
    CHECK(stub.last_auth() == "Bearer sk-test");
    auto body = json::parse(stub.last_body());
    CHECK(body["model"] == "test-model");
    const auto& msgs = body["messages"];
    REQUIRE(msgs.size() == 4);
    CHECK(msgs[0]["role"] == "system");
    CHECK(msgs[0]["content"] == "You moderate.");
    CHECK(msgs[1]["role"] == "user");
    CHECK(msgs[1]["content"] == "Sophia: hi");
    CHECK(msgs[2]["role"] == "assistant");
    CHECK(msgs[3]["content"] == "Do the thing.");
    CHECK(stub.last_body() == p.request_body(request("open", {{"student", "Sophia", "hi"},
                                                              {"moderator", "Moderator", "hello"}})));
  }
  SUBCASE("HTTP 500") {
    stub.set_mode(1);
    RemoteProvider p(cfg);
    auto e = error_of(p, request("open"));
    CHECK(e.code() == ProviderErrc::RemoteError);
    CHECK(e.status() == 500);
    CHECK(stub.hits() == 1);
  }
  SUBCASE("a timed-out attempt is retried once") {
    stub.set_mode(2);
    RemoteProvider p(cfg);
    auto r = p.generate(request("open"));
    CHECK(r.text == "stub reply");
    CHECK(stub.hits() == 2);
  }
  SUBCASE("timeout with no retries left") {
    stub.set_mode(2);
    cfg.retry_count = 0;
    RemoteProvider p(cfg);
    auto e = error_of(p, request("open"));
    CHECK(e.code() == ProviderErrc::Timeout);
    CHECK(e.attempts() == 1);
  }
}

TEST_CASE("unreachable remote is a transport error") {
  RemoteConfig cfg;
  cfg.base_url = "http://127.0.0.1:1/v1";
  cfg.model_name = "m";
  cfg.deadline_seconds = 1;
  cfg.retry_count = 0;
  RemoteProvider p(cfg);
  auto e = error_of(p, request("open"));
  CHECK((e.code() == ProviderErrc::Transport || e.code() == ProviderErrc::Timeout));
}

TEST_CASE("make_provider") {
  SUBCASE("remote without a key fails before any request") {
    json spec = {{"type", "remote"}, {"base_url", "https://example.invalid/v1"}, {"model_name", "m"}};
    try {
      make_provider(spec, ".", std::nullopt);
      FAIL("expected Config");
    } catch (const ProviderError& e) {
      CHECK(e.code() == ProviderErrc::Config);
      CHECK(std::string(e.what()).find("DISCOURSE_PROVIDER_KEY") != std::string::npos);
    }
    CHECK(make_provider(spec, ".", std::string("k"))->tag() == "remote:m");
  }
  SUBCASE("replay path resolves against the base directory") {
    auto p = make_provider({{"type", "replay"}, {"path", "session.replay.jsonl"}}, FIXTURE_DIR, std::nullopt);
    CHECK(p->generate(request("open")).text == "Hello everyone, I'm your Moderator today.");
  }
  SUBCASE("scripted") {
    auto p = make_provider({{"type", "scripted"}, {"table", {{"open", "hi"}}}}, ".", std::nullopt);
    CHECK(p->generate(request("open")).text == "hi");
  }
  SUBCASE("unknown type") { CHECK_THROWS_AS(make_provider({{"type", "oracle"}}, ".", std::nullopt), ProviderError); }
}

TEST_CASE("injected latency") {
  auto inner = testing::echo_provider();
  SUBCASE("zero delay") {
    auto p = with_injected_latency(inner, {0.0});
    auto r = p->generate(request("open"));
    CHECK(r.text == "<open>");
    CHECK(r.latency_seconds >= 0.0);
    CHECK(r.latency_seconds < 0.05);
  }
  SUBCASE("each call sleeps its own delay, then none") {
    auto p = std::make_shared<InjectedLatencyProvider>(inner, std::vector<double>{0.1, 0.2});
    auto a = p->generate(request("a"));
    auto b = p->generate(request("b"));
    auto c = p->generate(request("c"));
    CHECK(a.latency_seconds >= 0.1);
    CHECK(a.latency_seconds < 0.15);
    CHECK(b.latency_seconds >= 0.2);
    CHECK(b.latency_seconds < 0.25);
    CHECK(c.latency_seconds < 0.05);
    CHECK(p->calls() == 3);
  }
  SUBCASE("bad vectors") {
    CHECK_THROWS_AS(with_injected_latency(inner, {}), std::invalid_argument);
    CHECK_THROWS_AS(with_injected_latency(inner, {-1.0}), std::invalid_argument);
  }
}

TEST_CASE("provider calls do not touch their inputs") {
  auto req = request("open", {{"student", "Ethan", "hi"}});
  const auto copy = req;
  ScriptedProvider p({}, "x");
  p.generate(req);
  CHECK(req.messages.size() == copy.messages.size());
  CHECK(req.system_prompt == copy.system_prompt);
  CHECK(req.directive_key == copy.directive_key);
}
