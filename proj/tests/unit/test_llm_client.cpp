// Copyright 2026 The kaft-dialog Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include <atomic>
#include <chrono>
#include <cstdlib>
#include <thread>

#include "doctest.h"
#include "kaft/archive.hpp"
#include "kaft/error.hpp"
#include "kaft/llm_client.hpp"
#include "support.hpp"
// Last: resolv.h, pulled in by httplib, defines a macro that clashes with Eigen.
#include "httplib.h"

using namespace kaft;
using nlohmann::json;

namespace {

// Scripted transport: throws the queued errors first, then echoes.
class ScriptedTransport : public Transport {
 public:
  std::vector<ErrorCode> failures;
  std::atomic<int> calls{0};
  std::atomic<int> in_flight{0};
  std::atomic<int> max_in_flight{0};
  int sleep_ms = 0;

  std::string complete(const LLMRequest& req, std::chrono::milliseconds) override {
    const int n = calls++;
    const int now = ++in_flight;
    int seen = max_in_flight.load();
    while (now > seen && !max_in_flight.compare_exchange_weak(seen, now)) {
    }
    if (sleep_ms > 0) std::this_thread::sleep_for(std::chrono::milliseconds(sleep_ms));
    --in_flight;
    if (n < static_cast<int>(failures.size())) fail(failures[static_cast<std::size_t>(n)], "scripted failure");
    return "echo: " + req.prompt;
  }
  std::string describe() const override { return "scripted"; }
};

LLMClientConfig fast_config(CacheMode mode, const std::filesystem::path& cache) {
  LLMClientConfig c;
  c.mode = mode;
  c.cache_dir = cache.string();
  c.backoff_ms = 1;
  c.max_retries = 2;
  return c;
}

// Local chat-completions stub on a free port.
class StubServer {
 public:
  explicit StubServer(std::function<void(const httplib::Request&, httplib::Response&)> handler) {
    server_.Post("/v1/chat/completions", std::move(handler));
    port_ = server_.bind_to_any_port("127.0.0.1");
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
  }
  ~StubServer() {
    server_.stop();
    thread_.join();
  }
  std::string endpoint() const { return "http://127.0.0.1:" + std::to_string(port_) + "/v1/chat/completions"; }

 private:
  httplib::Server server_;
  int port_ = 0;
  std::thread thread_;
};

json fixture() { return json::parse(read_text_file(std::string(KAFT_TEST_FIXTURES) + "/llm/chat_completion.json")); }

}  // namespace

TEST_CASE("cache keys cover the request") {
  LLMRequest a{"m", "hello", 0.0, 64};
  LLMRequest b = a;
  CHECK(a.cache_key() == b.cache_key());
  b.prompt = "hello!";
  CHECK(a.cache_key() != b.cache_key());
  b = a;
  b.model = "other";
  CHECK(a.cache_key() != b.cache_key());
  b = a;
  b.temperature = 0.5;
  CHECK(a.cache_key() != b.cache_key());
  CHECK(a.cache_key().size() == 64);
}

TEST_CASE("cache modes") {
  const auto dir = kaft::testing::temp_dir("cache");
  auto t = std::make_shared<ScriptedTransport>();

  SUBCASE("record serves hits without calling the transport") {
    RemoteLLMClient c(fast_config(CacheMode::kRecord, dir), t);
    CHECK(c.complete("p1") == "echo: p1");
    CHECK(c.complete("p1") == "echo: p1");
    CHECK(t->calls == 1);
    CHECK(c.cache_hits() == 1);
    RemoteLLMClient replay(fast_config(CacheMode::kReplayOnly, dir), nullptr);
    CHECK(replay.complete("p1") == "echo: p1");
    CHECK(replay.transport_calls() == 0);
  }
  SUBCASE("replay-only miss") {
    RemoteLLMClient c(fast_config(CacheMode::kReplayOnly, dir), t);
    try {
      c.complete("never seen");
      FAIL("expected a cache miss");
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::kCacheMiss);
    }
    CHECK(t->calls == 0);
  }
  SUBCASE("live always calls and refreshes") {
    ReplayCache cache(dir);
    RemoteLLMClient c(fast_config(CacheMode::kLive, dir), t);
    const LLMRequest req{c.config().model, "p2", c.config().temperature, c.config().max_tokens};
    cache.put(req, "stale");
    CHECK(c.complete("p2") == "echo: p2");
    CHECK(c.complete("p2") == "echo: p2");
    CHECK(t->calls == 2);
    CHECK(cache.get(req) == std::optional<std::string>("echo: p2"));
  }
}

TEST_CASE("retry policy") {
  const auto dir = kaft::testing::temp_dir("retry");
  SUBCASE("transient failures are retried") {
    auto t = std::make_shared<ScriptedTransport>();
    t->failures = {ErrorCode::kTimeout, ErrorCode::kRateLimited};
    RemoteLLMClient c(fast_config(CacheMode::kLive, dir), t);
    CHECK(c.complete("x") == "echo: x");
    CHECK(t->calls == 3);
  }
  SUBCASE("exhausted retries surface the last error") {
    auto t = std::make_shared<ScriptedTransport>();
    t->failures = {ErrorCode::kTransport, ErrorCode::kTransport, ErrorCode::kTransport};
    RemoteLLMClient c(fast_config(CacheMode::kLive, dir), t);
    try {
      c.complete("x");
      FAIL("expected a transport error");
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::kTransport);
      CHECK(std::string(e.what()).find("scripted") != std::string::npos);
    }
    CHECK(t->calls == 3);
  }
  SUBCASE("malformed replies are not retried") {
    auto t = std::make_shared<ScriptedTransport>();
    t->failures = {ErrorCode::kMalformedReply};
    RemoteLLMClient c(fast_config(CacheMode::kLive, dir), t);
    CHECK_THROWS_AS(c.complete("x"), Error);
    CHECK(t->calls == 1);
  }
}

TEST_CASE("concurrency is capped") {
  auto t = std::make_shared<ScriptedTransport>();
  t->sleep_ms = 20;
  LLMClientConfig cfg = fast_config(CacheMode::kLive, kaft::testing::temp_dir("conc"));
  cfg.max_concurrency = 2;
  RemoteLLMClient c(cfg, t);
  std::vector<std::thread> threads;
  for (int i = 0; i < 6; ++i) threads.emplace_back([&, i] { c.complete("p" + std::to_string(i)); });
  for (auto& th : threads) th.join();
  CHECK(t->calls == 6);
  CHECK(t->max_in_flight <= 2);
}

TEST_CASE("http transport replays the recorded fixture") {
  const json fx = fixture();
  std::string seen_auth;
  json seen_body;
  StubServer server([&](const httplib::Request& req, httplib::Response& res) {
    seen_auth = req.get_header_value("Authorization");
    seen_body = json::parse(req.body);
    res.status = fx.at("http_status").get<int>();
    res.set_content(fx.at("response_body").dump(), "application/json");
  });
  ::setenv("KAFT_TEST_KEY", "sk-test", 1);
  LLMClientConfig cfg = fast_config(CacheMode::kRecord, kaft::testing::temp_dir("fixture"));
  cfg.endpoint = server.endpoint();
  cfg.api_key_env = "KAFT_TEST_KEY";
  cfg.model = fx.at("request").at("model");
  RemoteLLMClient c(cfg, make_transport(cfg));
  const std::string prompt = fx.at("request").at("prompt");
  CHECK(c.complete(prompt) == fx.at("completion").get<std::string>());
  CHECK(seen_auth == "Bearer sk-test");
  CHECK(seen_body.at("messages").at(0).at("content") == prompt);
  CHECK(seen_body.at("model") == cfg.model);
  CHECK(c.complete(prompt) == fx.at("completion").get<std::string>());
  CHECK(c.transport_calls() == 1);
}

TEST_CASE("http transport error mapping") {
  int status = 200;
  std::string body;
  StubServer server([&](const httplib::Request&, httplib::Response& res) {
    res.status = status;
    res.set_content(body, "application/json");
  });
  HttpTransport t(server.endpoint());
  const LLMRequest req{"m", "p", 0.0, 8};
  auto code_of = [&] {
    try {
      t.complete(req, std::chrono::milliseconds(2000));
    } catch (const Error& e) {
      return e.code();
    }
    return ErrorCode::kOk;
  };
  status = 429;
  CHECK(code_of() == ErrorCode::kRateLimited);
  status = 500;
  CHECK(code_of() == ErrorCode::kTransport);
  status = 200;
  body = "{\"choices\": []}";
  CHECK(code_of() == ErrorCode::kMalformedReply);
  try {
    t.complete(req, std::chrono::milliseconds(2000));
  } catch (const Error& e) {
    CHECK(std::string(e.what()).find("{\"choices\": []}") != std::string::npos);
  }
}

TEST_CASE("unreachable endpoint names the endpoint") {
  int port = 0;
  {
    httplib::Server probe;
    port = probe.bind_to_any_port("127.0.0.1");
  }
  LLMClientConfig cfg = fast_config(CacheMode::kLive, kaft::testing::temp_dir("down"));
  cfg.endpoint = "http://127.0.0.1:" + std::to_string(port) + "/v1/chat/completions";
  cfg.timeout_ms = 500;
  RemoteLLMClient c(cfg, make_transport(cfg));
  try {
    c.complete("x");
    FAIL("expected a failure");
  } catch (const Error& e) {
    CHECK((e.code() == ErrorCode::kTransport || e.code() == ErrorCode::kTimeout));
    CHECK(std::string(e.what()).find(cfg.endpoint) != std::string::npos);
  }
  CHECK(c.transport_calls() == 3);
}

TEST_CASE("missing api key variable is rejected") {
  LLMClientConfig cfg;
  cfg.endpoint = "http://127.0.0.1:9/v1/chat/completions";
  cfg.api_key_env = "KAFT_TEST_KEY_THAT_IS_NOT_SET";
  ::unsetenv("KAFT_TEST_KEY_THAT_IS_NOT_SET");
  CHECK_THROWS_AS(make_transport(cfg), Error);
}

TEST_CASE("stand-in is deterministic and config round-trips") {
  StandInTransport s;
  const LLMRequest req{"stand-in", "Knowledge: <k1> t: b\n[USER] hi\nResponse:", 0.0, 64};
  CHECK(s.complete(req, std::chrono::milliseconds(1)) == s.complete(req, std::chrono::milliseconds(1)));
  LLMClientConfig cfg;
  cfg.endpoint = "https://example.invalid/v1";
  cfg.mode = CacheMode::kRecord;
  CHECK(LLMClientConfig::from_json(cfg.to_json()).to_json() == cfg.to_json());
  for (CacheMode m : {CacheMode::kLive, CacheMode::kRecord, CacheMode::kReplayOnly}) {
    CHECK(parse_cache_mode(cache_mode_name(m)) == m);
  }
}

TEST_CASE("completion cleanup") {
  CHECK(clean_completion("[SYSTEM] your bill is 50yuan.") == "your bill is 50yuan.");
  CHECK(clean_completion("Response: [SYSTEM] ok\n\n") == "ok");
  CHECK(clean_completion("  plain  ") == "plain");
}
