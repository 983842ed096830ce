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

// Client for a chat-completion style LLM service, with a content-addressed
// replay cache so that prompted runs can be repeated offline.

#pragma once

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>

#include "json.hpp"
#include "kaft/corpus.hpp"

namespace kaft {

struct LLMRequest {
  std::string model;
  std::string prompt;
  double temperature = 0.0;
  int max_tokens = 64;

  nlohmann::json to_json() const;
  // SHA-256 over the canonical JSON of (model, prompt, decoding options).
  std::string cache_key() const;
};

// Throws Error with kTransport, kTimeout, kRateLimited or kMalformedReply.
class Transport {
 public:
  virtual ~Transport() = default;
  virtual std::string complete(const LLMRequest& req, std::chrono::milliseconds timeout) = 0;
  virtual std::string describe() const = 0;
};

// POST {endpoint} with {"model", "messages": [{"role": "user", ...}],
// "temperature", "max_tokens"}; reads choices[0].message.content.
class HttpTransport : public Transport {
 public:
  // endpoint like "https://api.example.com/v1/chat/completions".
  explicit HttpTransport(std::string endpoint, std::map<std::string, std::string> headers = {});
  std::string complete(const LLMRequest& req, std::chrono::milliseconds timeout) override;
  std::string describe() const override { return endpoint_; }

 private:
  std::string endpoint_;
  std::string base_;
  std::string path_;
  std::map<std::string, std::string> headers_;
};

// Deterministic local stand-in for a remote model, deliberately weak: it
// answers response prompts with a generic reply naming the first knowledge
// title (0-shot) or by echoing the answer of the lexically closest example
// (n-shot), and decision prompts with a keyword rule.
class StandInTransport : public Transport {
 public:
  std::string complete(const LLMRequest& req, std::chrono::milliseconds timeout) override;
  std::string describe() const override { return "stand-in"; }
};

// Directory of <key>.json files holding {"request", "response"}.
class ReplayCache {
 public:
  explicit ReplayCache(std::filesystem::path dir);
  std::optional<std::string> get(const LLMRequest& req) const;
  // Atomic per entry (write to a temp file, then rename); last writer wins.
  void put(const LLMRequest& req, const std::string& response) const;
  const std::filesystem::path& dir() const { return dir_; }

 private:
  std::filesystem::path dir_;
};

enum class CacheMode {
  kLive,        // always call the transport, refresh the cache
  kRecord,      // serve hits from the cache, record misses
  kReplayOnly,  // cache only; a miss is kCacheMiss
};

CacheMode parse_cache_mode(const std::string& s);
const char* cache_mode_name(CacheMode m);

struct LLMClientConfig {
  std::string endpoint;     // empty selects the local stand-in
  std::string api_key_env;  // env var holding a bearer token, if any
  std::string model = "stand-in";
  double temperature = 0.0;
  int max_tokens = 64;
  int timeout_ms = 30000;
  int max_retries = 2;
  int backoff_ms = 200;
  int max_concurrency = 4;
  CacheMode mode = CacheMode::kReplayOnly;
  std::string cache_dir;  // empty disables caching (kReplayOnly then always misses)

  nlohmann::json to_json() const;
  static LLMClientConfig from_json(const nlohmann::json& j);
};

class RemoteLLMClient {
 public:
  RemoteLLMClient(LLMClientConfig cfg, std::shared_ptr<Transport> transport);

  // Raw completion for a prompt, honoring the cache mode and retry policy.
  std::string complete(const std::string& prompt);

  const LLMClientConfig& config() const { return cfg_; }
  std::size_t transport_calls() const { return transport_calls_; }
  std::size_t cache_hits() const { return cache_hits_; }

 private:
  LLMRequest request(const std::string& prompt) const;
  std::string call_with_retries(const LLMRequest& req);

  LLMClientConfig cfg_;
  std::shared_ptr<Transport> transport_;
  std::optional<ReplayCache> cache_;
  std::atomic<std::size_t> transport_calls_{0};
  std::atomic<std::size_t> cache_hits_{0};
  std::mutex slots_mu_;
  std::condition_variable slots_cv_;
  int in_flight_ = 0;
};

// Completion with echoed answer labels and role markers removed.
std::string clean_completion(const std::string& raw, const RoleMarkers& markers = {});

// HttpTransport for cfg.endpoint, or the stand-in when it is empty.
std::shared_ptr<Transport> make_transport(const LLMClientConfig& cfg);

std::string prompted_generate(RemoteLLMClient& client, const std::string& prompt,
                              const RoleMarkers& markers = {});

}  // namespace kaft
