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

// Chat sessions over bundle checkpoints, exposed as JSON endpoints:
//
//   POST /sessions                {"system", "regime", "kb_dialog"?} -> {"session_id", ...}
//   POST /sessions/{id}/messages  {"text", "overrides"?: {"decision"?, "piece_ids"?}}
//                                 -> {"response", "trace"}
//   GET  /sessions/{id}           full history with traces
//   GET  /systems                 systems the bundle can serve
//   GET  /health
//
// Errors are {"error": {"code", "message", "schema"?}} with 400 for a bad
// body, 404 for an unknown session or route, 502 for LLM failures.

#pragma once

#include <atomic>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "kaft/corpus.hpp"
#include "kaft/experiment.hpp"
#include "kaft/llm_client.hpp"
#include "kaft/pipeline.hpp"

namespace kaft {

struct ServiceConfig {
  std::string bundle_dir;
  std::string corpus_path;
  std::optional<LLMClientConfig> llm;  // defaults to the bundle's
  std::string event_log;               // append-only JSONL; empty disables
  std::string host = "127.0.0.1";
  int port = 8080;

  nlohmann::json to_json() const;
  static ServiceConfig from_json(const nlohmann::json& j);
};

struct ServiceReply {
  int status = 200;
  nlohmann::json body;
};

class ChatService {
 public:
  // Loads the bundle and corpus and replays the event log if one exists.
  explicit ChatService(ServiceConfig cfg);
  ~ChatService();

  ChatService(const ChatService&) = delete;
  ChatService& operator=(const ChatService&) = delete;

  // Routes one request. Never throws.
  ServiceReply handle(const std::string& method, const std::string& path, const std::string& body);

  ServiceReply create_session(const nlohmann::json& body);
  ServiceReply post_message(const std::string& id, const nlohmann::json& body);
  ServiceReply get_session(const std::string& id) const;
  ServiceReply systems() const;
  ServiceReply health() const;

  const ServiceConfig& config() const { return cfg_; }
  std::size_t session_count() const;

 private:
  struct Session;

  std::shared_ptr<DialogSystem> system_for(const SystemSpec& spec);
  std::shared_ptr<Session> find(const std::string& id) const;
  std::shared_ptr<Session> make_session(const std::string& id, const SystemSpec& spec, const std::string& kb_dialog);
  void log_event(const nlohmann::json& event);
  void replay_log();

  ServiceConfig cfg_;
  Bundle bundle_;
  CorpusSplits corpus_;
  std::shared_ptr<RemoteLLMClient> client_;

  mutable std::mutex systems_mu_;
  std::map<std::string, std::shared_ptr<DialogSystem>> systems_;

  mutable std::mutex sessions_mu_;
  std::map<std::string, std::shared_ptr<Session>> sessions_;
  std::size_t next_session_ = 1;

  std::mutex log_mu_;
  std::ofstream log_;
};

// HTTP front end for a ChatService.
class HttpChatServer {
 public:
  explicit HttpChatServer(std::shared_ptr<ChatService> service);
  ~HttpChatServer();

  // Binds host:port (port 0 picks a free one) and returns the bound port.
  int bind(const std::string& host, int port);
  // Serves until stop(); call after bind().
  void run();
  // run() on a background thread.
  void start();
  void stop();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace kaft
