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

#include "kaft/service.hpp"

#include <algorithm>
#include <cstdio>
#include <regex>
#include <sstream>
#include <thread>

#include "httplib.h"
#include "kaft/archive.hpp"
#include "kaft/error.hpp"

namespace kaft {

using nlohmann::json;

namespace {

constexpr const char* kCreateSchema =
    R"({"system": "direct|rag|agent", "regime": "kaft|prompt-0shot|prompt-nshot", "kb_dialog"?: "<corpus dialog id>"})";
constexpr const char* kMessageSchema =
    R"({"text": "<user utterance>", "overrides"?: {"decision"?: "NO_SEARCH|SEARCH_PRODUCT|SEARCH_FAQ|SEARCH_PERSONAL", "piece_ids"?: ["<piece id>"]}})";

ServiceReply error_reply(int status, ErrorCode code, const std::string& message, const char* schema = nullptr) {
  json e{{"code", error_code_name(code)}, {"message", message}};
  if (schema) e["schema"] = schema;
  return {status, {{"error", e}}};
}

int status_for(ErrorCode code) {
  switch (code) {
    case ErrorCode::kInvalidArgument:
    case ErrorCode::kParse:
      return 400;
    case ErrorCode::kNotFound:
      return 404;
    case ErrorCode::kTransport:
    case ErrorCode::kTimeout:
    case ErrorCode::kRateLimited:
    case ErrorCode::kMalformedReply:
    case ErrorCode::kCacheMiss:
      return 502;
    default:
      return 500;
  }
}

void check_keys(const json& body, const std::vector<std::string>& allowed) {
  if (!body.is_object()) fail(ErrorCode::kParse, "request body must be a JSON object");
  for (const auto& [key, _] : body.items()) {
    if (std::find(allowed.begin(), allowed.end(), key) == allowed.end()) {
      fail(ErrorCode::kParse, "unknown field '" + key + "'");
    }
  }
}

std::string string_field(const json& body, const std::string& key, bool required) {
  if (!body.contains(key)) {
    if (required) fail(ErrorCode::kParse, "missing field '" + key + "'");
    return "";
  }
  if (!body.at(key).is_string()) fail(ErrorCode::kParse, "field '" + key + "' must be a string");
  return body.at(key).get<std::string>();
}

json history_json(const Dialog& d) {
  json h = json::array();
  for (const auto& t : d.turns) {
    h.push_back({{"role", "USER"}, {"text", t.user}});
    h.push_back({{"role", "SYSTEM"}, {"text", t.response}});
  }
  return h;
}

}  // namespace

// --- config -------------------------------------------------------------------------

json ServiceConfig::to_json() const {
  json j{{"bundle_dir", bundle_dir}, {"corpus_path", corpus_path}, {"event_log", event_log},
         {"host", host},             {"port", port}};
  if (llm) j["llm"] = llm->to_json();
  return j;
}

ServiceConfig ServiceConfig::from_json(const json& j) {
  ServiceConfig c;
  try {
    c.bundle_dir = j.value("bundle_dir", c.bundle_dir);
    c.corpus_path = j.value("corpus_path", c.corpus_path);
    if (j.contains("llm") && !j.at("llm").is_null()) c.llm = LLMClientConfig::from_json(j.at("llm"));
    c.event_log = j.value("event_log", c.event_log);
    c.host = j.value("host", c.host);
    c.port = j.value("port", c.port);
  } catch (const json::exception& e) {
    fail(ErrorCode::kParse, std::string("malformed service config: ") + e.what());
  }
  if (c.bundle_dir.empty()) fail(ErrorCode::kInvalidArgument, "service config needs bundle_dir");
  if (c.corpus_path.empty()) fail(ErrorCode::kInvalidArgument, "service config needs corpus_path");
  return c;
}

// --- sessions -----------------------------------------------------------------------

struct ChatService::Session {
  std::string id;
  SystemSpec spec;
  std::string kb_dialog;
  std::shared_ptr<DialogSystem> system;
  Dialog dialog;
  std::vector<TurnTrace> traces;
  std::mutex mu;  // serializes turns within the session
};

ChatService::ChatService(ServiceConfig cfg)
    : cfg_(std::move(cfg)), bundle_(Bundle::open(cfg_.bundle_dir)), corpus_(load_corpus(cfg_.corpus_path)) {
  client_ = make_llm_client(cfg_.llm ? *cfg_.llm : bundle_.config().llm);
  if (!cfg_.event_log.empty()) {
    replay_log();
    log_.open(cfg_.event_log, std::ios::app);
    if (!log_) fail(ErrorCode::kIo, "cannot open event log " + cfg_.event_log);
  }
}

ChatService::~ChatService() = default;

std::size_t ChatService::session_count() const {
  std::lock_guard<std::mutex> lock(sessions_mu_);
  return sessions_.size();
}

std::shared_ptr<DialogSystem> ChatService::system_for(const SystemSpec& spec) {
  std::lock_guard<std::mutex> lock(systems_mu_);
  auto& slot = systems_[spec.label()];
  if (!slot) slot = build_system(bundle_, corpus_, spec, client_);
  return slot;
}

std::shared_ptr<ChatService::Session> ChatService::find(const std::string& id) const {
  std::lock_guard<std::mutex> lock(sessions_mu_);
  const auto it = sessions_.find(id);
  return it == sessions_.end() ? nullptr : it->second;
}

std::shared_ptr<ChatService::Session> ChatService::make_session(const std::string& id, const SystemSpec& spec,
                                                                const std::string& kb_dialog) {
  const Dialog* source = corpus_.find_dialog(kb_dialog);
  if (!source) fail(ErrorCode::kInvalidArgument, "kb_dialog '" + kb_dialog + "' is not in the corpus");
  auto s = std::make_shared<Session>();
  s->id = id;
  s->spec = spec;
  s->kb_dialog = kb_dialog;
  s->system = system_for(spec);
  s->dialog.id = id;
  s->dialog.kb = source->kb;
  return s;
}

void ChatService::log_event(const json& event) {
  std::lock_guard<std::mutex> lock(log_mu_);
  if (!log_.is_open()) return;
  log_ << event.dump() << '\n';
  log_.flush();
}

void ChatService::replay_log() {
  if (!std::filesystem::exists(cfg_.event_log)) return;
  const std::string text = read_text_file(cfg_.event_log);
  std::size_t pos = 0;
  std::size_t line_no = 0;
  while (pos < text.size()) {
    const std::size_t nl = text.find('\n', pos);
    if (nl == std::string::npos) {
      // A torn final line from a crash mid-write is cut off so that new
      // events start on a fresh line.
      std::filesystem::resize_file(cfg_.event_log, pos);
      break;
    }
    const std::string line = text.substr(pos, nl - pos);
    pos = nl + 1;
    ++line_no;
    if (line.empty()) continue;
    json e;
    try {
      e = json::parse(line);
    } catch (const json::exception&) {
      fail(ErrorCode::kParse, cfg_.event_log + ":" + std::to_string(line_no) + ": malformed event");
    }
    const std::string type = e.value("type", "");
    const std::string id = e.value("session_id", "");
    if (type == "session") {
      auto s = make_session(id, SystemSpec::from_json(e.at("spec")), e.at("kb_dialog").get<std::string>());
      sessions_[id] = s;
      const auto n = id.size() > 5 ? std::strtoull(id.c_str() + 5, nullptr, 10) : 0;
      next_session_ = std::max<std::size_t>(next_session_, n + 1);
    } else if (type == "turn") {
      auto it = sessions_.find(id);
      if (it == sessions_.end()) {
        fail(ErrorCode::kParse, cfg_.event_log + ":" + std::to_string(line_no) + ": turn for unknown session " + id);
      }
      Turn t;
      t.index = static_cast<int>(it->second->dialog.turns.size()) + 1;
      t.user = e.at("text").get<std::string>();
      t.response = e.at("response").get<std::string>();
      it->second->dialog.turns.push_back(std::move(t));
      it->second->traces.push_back(TurnTrace::from_json(e.at("trace")));
    } else {
      fail(ErrorCode::kParse, cfg_.event_log + ":" + std::to_string(line_no) + ": unknown event type");
    }
  }
}

// --- endpoints ----------------------------------------------------------------------

ServiceReply ChatService::create_session(const json& body) {
  try {
    check_keys(body, {"system", "regime", "kb_dialog", "test_knowledge"});
    SystemSpec spec;
    spec.system = string_field(body, "system", true);
    spec.regime = string_field(body, "regime", true);
    if (body.contains("test_knowledge")) spec.test_knowledge = string_field(body, "test_knowledge", true);
    spec.resolve();
    std::string kb_dialog = string_field(body, "kb_dialog", false);

    std::string id;
    {
      std::lock_guard<std::mutex> lock(sessions_mu_);
      char buf[32];
      std::snprintf(buf, sizeof(buf), "sess-%06zu", next_session_);
      id = buf;
      if (kb_dialog.empty()) {
        const auto& pool = corpus_.test.empty() ? corpus_.train : corpus_.test;
        if (pool.empty()) fail(ErrorCode::kInvalidArgument, "corpus has no dialogs to borrow a KB from");
        kb_dialog = pool[(next_session_ - 1) % pool.size()].id;
      }
      ++next_session_;
    }
    auto s = make_session(id, spec, kb_dialog);
    {
      std::lock_guard<std::mutex> lock(sessions_mu_);
      sessions_[id] = s;
    }
    log_event({{"type", "session"}, {"session_id", id}, {"spec", spec.to_json()}, {"kb_dialog", kb_dialog}});
    return {201, {{"session_id", id},
                  {"system", spec.system},
                  {"regime", spec.regime},
                  {"label", spec.label()},
                  {"kb_dialog", kb_dialog},
                  {"history", json::array()}}};
  } catch (const Error& e) {
    const int status = status_for(e.code()) == 404 ? 400 : status_for(e.code());
    return error_reply(status, e.code(), e.what(), status == 400 ? kCreateSchema : nullptr);
  } catch (const std::exception& e) {
    return error_reply(500, ErrorCode::kInternal, e.what());
  }
}

ServiceReply ChatService::post_message(const std::string& id, const json& body) {
  auto s = find(id);
  if (!s) return error_reply(404, ErrorCode::kNotFound, "unknown session '" + id + "'");
  TurnOverrides ov;
  std::string text;
  try {
    check_keys(body, {"text", "overrides"});
    text = trim(string_field(body, "text", true));
    if (text.empty()) fail(ErrorCode::kParse, "field 'text' must not be empty");
    if (body.contains("overrides")) ov = TurnOverrides::from_json(body.at("overrides"));
  } catch (const Error& e) {
    return error_reply(400, e.code(), e.what(), kMessageSchema);
  }

  std::lock_guard<std::mutex> lock(s->mu);
  Turn t;
  t.index = static_cast<int>(s->dialog.turns.size()) + 1;
  t.user = text;
  s->dialog.turns.push_back(t);
  try {
    TurnResult r = s->system->respond(s->dialog, t.index, ov);
    s->dialog.turns.back().response = r.response;
    json trace = r.trace.to_json();
    log_event({{"type", "turn"},
               {"session_id", id},
               {"text", text},
               {"overrides", body.value("overrides", json(nullptr))},
               {"response", r.response},
               {"trace", trace}});
    s->traces.push_back(std::move(r.trace));
    return {200, {{"response", r.response}, {"trace", trace}}};
  } catch (const Error& e) {
    s->dialog.turns.pop_back();
    if (e.code() == ErrorCode::kNotFound) return error_reply(400, e.code(), e.what(), kMessageSchema);
    return error_reply(status_for(e.code()), e.code(), e.what());
  } catch (const std::exception& e) {
    s->dialog.turns.pop_back();
    return error_reply(500, ErrorCode::kInternal, e.what());
  }
}

ServiceReply ChatService::get_session(const std::string& id) const {
  auto s = find(id);
  if (!s) return error_reply(404, ErrorCode::kNotFound, "unknown session '" + id + "'");
  std::lock_guard<std::mutex> lock(s->mu);
  json turns = json::array();
  for (std::size_t i = 0; i < s->dialog.turns.size(); ++i) {
    turns.push_back({{"user", s->dialog.turns[i].user},
                     {"response", s->dialog.turns[i].response},
                     {"trace", s->traces[i].to_json()}});
  }
  json kb = json::array();
  for (const auto* p : s->dialog.kb.all()) kb.push_back(piece_to_json(*p));
  return {200, {{"session_id", s->id},
                {"system", s->spec.system},
                {"regime", s->spec.regime},
                {"label", s->spec.label()},
                {"kb_dialog", s->kb_dialog},
                {"history", history_json(s->dialog)},
                {"turns", turns},
                {"knowledge_base", kb}}};
}

ServiceReply ChatService::systems() const {
  json out = json::array();
  for (const std::string system : {"direct", "rag", "agent"}) {
    for (const std::string regime : {"kaft", "prompt-0shot", "prompt-nshot"}) {
      SystemSpec spec;
      spec.system = system;
      spec.regime = regime;
      spec.resolve();
      std::vector<std::string> need;
      if (regime == "kaft") need.push_back(bundle_.generator_path(spec.train_knowledge).filename().string());
      if (system == "rag") need.push_back(bundle_.retriever_path(RetrieverRole::kAll).filename().string());
      if (system == "agent") {
        need.push_back(bundle_.retriever_path(RetrieverRole::kProduct).filename().string());
        need.push_back(bundle_.retriever_path(RetrieverRole::kFaq).filename().string());
        if (regime == "kaft") need.push_back(bundle_.decision_path().filename().string());
      }
      json missing = json::array();
      for (const auto& f : need) {
        if (!std::filesystem::exists(bundle_.dir() / f)) missing.push_back(f);
      }
      out.push_back({{"system", system},
                     {"regime", regime},
                     {"label", spec.label()},
                     {"available", missing.empty()},
                     {"checkpoints", need},
                     {"missing", missing}});
    }
  }
  return {200, {{"bundle", bundle_.dir().string()}, {"systems", out}}};
}

ServiceReply ChatService::health() const {
  return {200, {{"status", "ok"}, {"sessions", session_count()}, {"bundle", bundle_.dir().string()}}};
}

ServiceReply ChatService::handle(const std::string& method, const std::string& path, const std::string& body) {
  static const std::regex kMessages("^/sessions/([^/]+)/messages/?$");
  static const std::regex kSession("^/sessions/([^/]+)/?$");
  try {
    auto parse_body = [&](const char* schema, json& out) -> std::optional<ServiceReply> {
      try {
        out = body.empty() ? json::object() : json::parse(body);
      } catch (const json::exception& e) {
        return error_reply(400, ErrorCode::kParse, std::string("body is not valid JSON: ") + e.what(), schema);
      }
      return std::nullopt;
    };
    std::smatch m;
    if (method == "GET" && (path == "/health" || path == "/health/")) return health();
    if (method == "GET" && (path == "/systems" || path == "/systems/")) return systems();
    if (method == "POST" && (path == "/sessions" || path == "/sessions/")) {
      json j;
      if (auto err = parse_body(kCreateSchema, j)) return *err;
      return create_session(j);
    }
    if (method == "POST" && std::regex_match(path, m, kMessages)) {
      json j;
      if (auto err = parse_body(kMessageSchema, j)) return *err;
      return post_message(m[1].str(), j);
    }
    if (method == "GET" && std::regex_match(path, m, kSession)) return get_session(m[1].str());
    return error_reply(404, ErrorCode::kNotFound, "no route for " + method + " " + path);
  } catch (const std::exception& e) {
    return error_reply(500, ErrorCode::kInternal, e.what());
  }
}

// --- HTTP ---------------------------------------------------------------------------

struct HttpChatServer::Impl {
  std::shared_ptr<ChatService> service;
  httplib::Server server;
  std::thread thread;
};

HttpChatServer::HttpChatServer(std::shared_ptr<ChatService> service) : impl_(std::make_unique<Impl>()) {
  impl_->service = std::move(service);
  auto forward = [svc = impl_->service](const httplib::Request& req, httplib::Response& res) {
    const ServiceReply r = svc->handle(req.method, req.path, req.body);
    res.status = r.status;
    res.set_content(r.body.dump(), "application/json");
  };
  impl_->server.Get(".*", forward);
  impl_->server.Post(".*", forward);
}

HttpChatServer::~HttpChatServer() { stop(); }

int HttpChatServer::bind(const std::string& host, int port) {
  const int bound = port == 0 ? impl_->server.bind_to_any_port(host) : (impl_->server.bind_to_port(host, port) ? port : -1);
  if (bound < 0) fail(ErrorCode::kIo, "cannot bind " + host + ":" + std::to_string(port));
  return bound;
}

void HttpChatServer::run() { impl_->server.listen_after_bind(); }

void HttpChatServer::start() {
  impl_->thread = std::thread([this] { run(); });
  impl_->server.wait_until_ready();
}

void HttpChatServer::stop() {
  impl_->server.stop();
  if (impl_->thread.joinable()) impl_->thread.join();
}

}  // namespace kaft
