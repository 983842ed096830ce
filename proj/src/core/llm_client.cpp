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

#include "kaft/llm_client.hpp"

#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>
#include <thread>

#include "httplib.h"
#include "kaft/error.hpp"
#include "kaft/text.hpp"

namespace kaft {

using nlohmann::json;

json LLMRequest::to_json() const {
  return {{"model", model}, {"prompt", prompt}, {"temperature", temperature}, {"max_tokens", max_tokens}};
}

std::string LLMRequest::cache_key() const { return sha256_hex(to_json().dump()); }

// --- HTTP -------------------------------------------------------------------------

HttpTransport::HttpTransport(std::string endpoint, std::map<std::string, std::string> headers)
    : endpoint_(std::move(endpoint)), headers_(std::move(headers)) {
  const auto scheme = endpoint_.find("://");
  if (scheme == std::string::npos) {
    fail(ErrorCode::kInvalidArgument, "endpoint must look like http(s)://host[:port]/path: " + endpoint_);
  }
  const auto slash = endpoint_.find('/', scheme + 3);
  base_ = slash == std::string::npos ? endpoint_ : endpoint_.substr(0, slash);
  path_ = slash == std::string::npos ? "/" : endpoint_.substr(slash);
}

std::string HttpTransport::complete(const LLMRequest& req, std::chrono::milliseconds timeout) {
  httplib::Client cli(base_);
  const auto secs = static_cast<time_t>(timeout.count() / 1000);
  const auto usecs = static_cast<time_t>((timeout.count() % 1000) * 1000);
  cli.set_connection_timeout(secs, usecs);
  cli.set_read_timeout(secs, usecs);
  cli.set_write_timeout(secs, usecs);
  httplib::Headers headers;
  for (const auto& [k, v] : headers_) headers.emplace(k, v);
  const json body{{"model", req.model},
                  {"messages", json::array({{{"role", "user"}, {"content", req.prompt}}})},
                  {"temperature", req.temperature},
                  {"max_tokens", req.max_tokens}};
  auto res = cli.Post(path_, headers, body.dump(), "application/json");
  if (!res) {
    const auto err = res.error();
    const std::string what = "request to " + endpoint_ + " failed: " + httplib::to_string(err);
    if (err == httplib::Error::ConnectionTimeout || err == httplib::Error::Read) {
      fail(ErrorCode::kTimeout, what);
    }
    fail(ErrorCode::kTransport, what);
  }
  if (res->status == 429) fail(ErrorCode::kRateLimited, endpoint_ + " returned 429");
  if (res->status != 200) {
    fail(ErrorCode::kTransport, endpoint_ + " returned HTTP " + std::to_string(res->status));
  }
  try {
    const json j = json::parse(res->body);
    return j.at("choices").at(0).at("message").at("content").get<std::string>();
  } catch (const std::exception&) {
    fail(ErrorCode::kMalformedReply, "malformed reply from " + endpoint_ + ": " + res->body);
  }
}

// --- stand-in ---------------------------------------------------------------------

namespace {

std::string last_line(const std::string& block) {
  const std::string t = trim(block);
  const auto nl = t.rfind('\n');
  return nl == std::string::npos ? t : t.substr(nl + 1);
}

// Text between the last `open` marker and the following `close` marker.
std::string last_section(const std::string& s, const std::string& open, const std::string& close,
                         std::size_t from = 0) {
  const auto a = s.rfind(open);
  if (a == std::string::npos || a < from) return "";
  const auto start = a + open.size();
  const auto b = s.find(close, start);
  return s.substr(start, b == std::string::npos ? std::string::npos : b - start);
}

std::set<std::string> word_set(const std::string& s) {
  std::set<std::string> out;
  for (const auto& t : metric_tokens(to_lower(s))) out.insert(t);
  return out;
}

double jaccard(const std::set<std::string>& a, const std::set<std::string>& b) {
  if (a.empty() && b.empty()) return 0.0;
  std::size_t inter = 0;
  for (const auto& x : a) inter += b.count(x);
  return static_cast<double>(inter) / static_cast<double>(a.size() + b.size() - inter);
}

std::string stand_in_decision(const std::string& prompt) {
  const std::string ctx = last_section(prompt, "Context:\n", "\nDecision:");
  const std::string user = " " + to_lower(last_line(ctx)) + " ";
  if (contains(user, " my ")) return "Search Personal";
  if (contains(user, " plan")) return "Search Product";
  if (contains(user, "how can i")) return "Search FAQ";
  return "No Search";
}

std::string stand_in_response(const std::string& prompt) {
  // Live block: the last Context/Knowledge pair before the trailing "Response:".
  const std::string knowledge = last_section(prompt, "Knowledge:\n", "\nResponse:");
  const std::string live_ctx = last_section(prompt, "Context:\n", "\nKnowledge:");
  // Examples, if any, are between "Example i:" headers.
  std::string best_answer;
  double best = -1.0;
  const auto live_words = word_set(last_line(live_ctx));
  for (std::size_t pos = prompt.find("Example "); pos != std::string::npos;
       pos = prompt.find("Example ", pos + 1)) {
    const auto c0 = prompt.find("Context:\n", pos);
    const auto k0 = prompt.find("\nKnowledge:\n", c0);
    const auto r0 = prompt.find("\nResponse: ", k0);
    if (c0 == std::string::npos || k0 == std::string::npos || r0 == std::string::npos) break;
    const auto r1 = prompt.find('\n', r0 + 11);
    const std::string ctx = prompt.substr(c0 + 9, k0 - c0 - 9);
    const std::string answer = prompt.substr(r0 + 11, r1 == std::string::npos ? std::string::npos : r1 - r0 - 11);
    const double sim = jaccard(live_words, word_set(last_line(ctx)));
    if (sim > best) {
      best = sim;
      best_answer = answer;
    }
  }
  if (best >= 0.0) return best_answer;
  const std::string first = trim(knowledge.substr(0, knowledge.find('\n')));
  const auto colon = first.find(": ");
  const auto tag = first.find("> ");
  if (first.empty() || first == "[no knowledge]" || colon == std::string::npos || tag == std::string::npos) {
    return "thank you for contacting us, how can I help you?";
  }
  return "thank you for your question about the " + first.substr(tag + 2, colon - tag - 2) +
         ", please check the details in our app.";
}

}  // namespace

std::string StandInTransport::complete(const LLMRequest& req, std::chrono::milliseconds) {
  const std::string p = trim(req.prompt);
  if (p.size() >= 9 && p.compare(p.size() - 9, 9, "Decision:") == 0) return stand_in_decision(p);
  if (p.size() >= 9 && p.compare(p.size() - 9, 9, "Response:") == 0) return stand_in_response(p);
  return "sorry, I do not understand the request.";
}

// --- cache ------------------------------------------------------------------------

ReplayCache::ReplayCache(std::filesystem::path dir) : dir_(std::move(dir)) {
  std::filesystem::create_directories(dir_);
}

std::optional<std::string> ReplayCache::get(const LLMRequest& req) const {
  const auto path = dir_ / (req.cache_key() + ".json");
  std::ifstream in(path);
  if (!in) return std::nullopt;
  try {
    const json j = json::parse(in);
    if (j.at("request") != req.to_json()) return std::nullopt;
    return j.at("response").get<std::string>();
  } catch (const std::exception& e) {
    fail(ErrorCode::kParse, "corrupt cache entry " + path.string() + ": " + e.what());
  }
}

void ReplayCache::put(const LLMRequest& req, const std::string& response) const {
  const std::string key = req.cache_key();
  const auto path = dir_ / (key + ".json");
  std::ostringstream tid;
  tid << std::this_thread::get_id();
  const auto tmp = dir_ / (key + ".tmp." + tid.str());
  {
    std::ofstream out(tmp);
    if (!out) fail(ErrorCode::kIo, "cannot write " + tmp.string());
    out << json{{"key", key}, {"request", req.to_json()}, {"response", response}}.dump(2) << "\n";
  }
  std::filesystem::rename(tmp, path);
}

CacheMode parse_cache_mode(const std::string& s) {
  if (s == "live") return CacheMode::kLive;
  if (s == "record") return CacheMode::kRecord;
  if (s == "replay" || s == "replay-only") return CacheMode::kReplayOnly;
  fail(ErrorCode::kInvalidArgument, "unknown cache mode '" + s + "' (live, record, replay)");
}

const char* cache_mode_name(CacheMode m) {
  switch (m) {
    case CacheMode::kLive: return "live";
    case CacheMode::kRecord: return "record";
    case CacheMode::kReplayOnly: return "replay";
  }
  return "replay";
}

json LLMClientConfig::to_json() const {
  return {{"endpoint", endpoint},     {"api_key_env", api_key_env},
          {"model", model},           {"temperature", temperature},
          {"max_tokens", max_tokens}, {"timeout_ms", timeout_ms},
          {"max_retries", max_retries}, {"backoff_ms", backoff_ms},
          {"max_concurrency", max_concurrency}, {"mode", cache_mode_name(mode)},
          {"cache_dir", cache_dir}};
}

LLMClientConfig LLMClientConfig::from_json(const json& j) {
  LLMClientConfig c;
  c.endpoint = j.value("endpoint", c.endpoint);
  c.api_key_env = j.value("api_key_env", c.api_key_env);
  c.model = j.value("model", c.model);
  c.temperature = j.value("temperature", c.temperature);
  c.max_tokens = j.value("max_tokens", c.max_tokens);
  c.timeout_ms = j.value("timeout_ms", c.timeout_ms);
  c.max_retries = j.value("max_retries", c.max_retries);
  c.backoff_ms = j.value("backoff_ms", c.backoff_ms);
  c.max_concurrency = j.value("max_concurrency", c.max_concurrency);
  if (j.contains("mode")) c.mode = parse_cache_mode(j.at("mode").get<std::string>());
  c.cache_dir = j.value("cache_dir", c.cache_dir);
  return c;
}

std::shared_ptr<Transport> make_transport(const LLMClientConfig& cfg) {
  if (cfg.endpoint.empty()) return std::make_shared<StandInTransport>();
  std::map<std::string, std::string> headers;
  if (!cfg.api_key_env.empty()) {
    const char* key = std::getenv(cfg.api_key_env.c_str());
    if (!key) fail(ErrorCode::kInvalidArgument, "environment variable " + cfg.api_key_env + " is not set");
    headers["Authorization"] = std::string("Bearer ") + key;
  }
  return std::make_shared<HttpTransport>(cfg.endpoint, std::move(headers));
}

// --- client -----------------------------------------------------------------------

RemoteLLMClient::RemoteLLMClient(LLMClientConfig cfg, std::shared_ptr<Transport> transport)
    : cfg_(std::move(cfg)), transport_(std::move(transport)) {
  if (cfg_.max_concurrency < 1) fail(ErrorCode::kInvalidArgument, "max_concurrency must be >= 1");
  if (cfg_.max_retries < 0) fail(ErrorCode::kInvalidArgument, "max_retries must be >= 0");
  if (!cfg_.cache_dir.empty()) cache_.emplace(cfg_.cache_dir);
  if (!transport_ && cfg_.mode != CacheMode::kReplayOnly) {
    fail(ErrorCode::kInvalidArgument, "a transport is required unless the client is replay-only");
  }
}

LLMRequest RemoteLLMClient::request(const std::string& prompt) const {
  return {cfg_.model, prompt, cfg_.temperature, cfg_.max_tokens};
}

std::string RemoteLLMClient::call_with_retries(const LLMRequest& req) {
  {
    std::unique_lock<std::mutex> lock(slots_mu_);
    slots_cv_.wait(lock, [&] { return in_flight_ < cfg_.max_concurrency; });
    ++in_flight_;
  }
  struct Release {
    RemoteLLMClient* c;
    ~Release() {
      {
        std::lock_guard<std::mutex> lock(c->slots_mu_);
        --c->in_flight_;
      }
      c->slots_cv_.notify_one();
    }
  } release{this};

  for (int attempt = 0;; ++attempt) {
    try {
      ++transport_calls_;
      return transport_->complete(req, std::chrono::milliseconds(cfg_.timeout_ms));
    } catch (const Error& e) {
      const bool retryable = e.code() == ErrorCode::kTransport || e.code() == ErrorCode::kTimeout ||
                             e.code() == ErrorCode::kRateLimited;
      if (!retryable) throw;
      if (attempt >= cfg_.max_retries) {
        fail(e.code(), "giving up on " + transport_->describe() + " after " +
                           std::to_string(attempt + 1) + " attempts: " + e.what());
      }
      std::this_thread::sleep_for(std::chrono::milliseconds(cfg_.backoff_ms << attempt));
    }
  }
}

std::string RemoteLLMClient::complete(const std::string& prompt) {
  const LLMRequest req = request(prompt);
  if (cache_ && cfg_.mode != CacheMode::kLive) {
    if (auto hit = cache_->get(req)) {
      ++cache_hits_;
      return *hit;
    }
  }
  if (cfg_.mode == CacheMode::kReplayOnly) {
    fail(ErrorCode::kCacheMiss, "no cached completion for key " + req.cache_key() + " (model " +
                                    cfg_.model + ") in replay-only mode");
  }
  std::string text = call_with_retries(req);
  if (cache_) cache_->put(req, text);
  return text;
}

std::string clean_completion(const std::string& raw, const RoleMarkers& markers) {
  const std::string labels[] = {trim(markers.system), trim(markers.user), "Response:", "Decision:"};
  std::string out;
  std::istringstream in(raw);
  std::string line;
  while (std::getline(in, line)) {
    std::string t = trim(line);
    for (bool again = true; again;) {
      again = false;
      for (const auto& l : labels) {
        if (!l.empty() && t.compare(0, l.size(), l) == 0) {
          t = trim(t.substr(l.size()));
          again = true;
        }
      }
    }
    if (t.empty()) continue;
    if (!out.empty()) out += '\n';
    out += t;
  }
  return out;
}

std::string prompted_generate(RemoteLLMClient& client, const std::string& prompt,
                              const RoleMarkers& markers) {
  return clean_completion(client.complete(prompt), markers);
}

}  // namespace kaft
