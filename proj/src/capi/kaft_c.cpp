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

#include "kaft/kaft.h"

#include <cstdlib>
#include <cstring>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>

#include "kaft/archive.hpp"
#include "kaft/error.hpp"
#include "kaft/evaluation.hpp"
#include "kaft/experiment.hpp"
#include "kaft/service.hpp"

using nlohmann::json;

struct kaft_corpus {
  kaft::CorpusSplits corpus;
};

struct kaft_service {
  std::shared_ptr<kaft::ChatService> service;
  std::unique_ptr<kaft::HttpChatServer> server;
  std::mutex mu;
};

namespace {

thread_local std::string g_last_error;

char* dup(const std::string& s) {
  char* out = static_cast<char*>(std::malloc(s.size() + 1));
  if (!out) throw std::bad_alloc();
  std::memcpy(out, s.c_str(), s.size() + 1);
  return out;
}

json parse_json(const char* text, const char* what) {
  if (!text || !*text) return json::object();
  try {
    return json::parse(text);
  } catch (const json::exception& e) {
    kaft::fail(kaft::ErrorCode::kParse, std::string(what) + " is not valid JSON: " + e.what());
  }
}

void require(const void* p, const char* name) {
  if (!p) kaft::fail(kaft::ErrorCode::kInvalidArgument, std::string(name) + " must not be NULL");
}

// Runs fn, mapping exceptions to a status and the thread's last error.
template <typename Fn>
kaft_status guarded(Fn&& fn) {
  try {
    g_last_error.clear();
    fn();
    return KAFT_OK;
  } catch (const kaft::Error& e) {
    g_last_error = e.what();
    return static_cast<kaft_status>(e.code());
  } catch (const std::exception& e) {
    g_last_error = e.what();
    return KAFT_INTERNAL;
  }
}

kaft::Bundle open_bundle(const char* dir) {
  require(dir, "bundle_dir");
  return kaft::Bundle::open(dir);
}

}  // namespace

extern "C" {

const char* kaft_version(void) { return "0.1.0"; }

const char* kaft_status_name(kaft_status status) {
  return kaft::error_code_name(static_cast<kaft::ErrorCode>(status));
}

const char* kaft_last_error(void) { return g_last_error.c_str(); }

void kaft_string_free(char* s) { std::free(s); }

kaft_status kaft_corpus_synth(const char* spec_json, uint64_t seed, kaft_corpus** out) {
  return guarded([&] {
    require(out, "out");
    const json j = parse_json(spec_json, "spec");
    json base = kaft::SynthSpec{}.to_json();
    base.merge_patch(j);
    auto c = std::make_unique<kaft_corpus>();
    c->corpus = kaft::synth_corpus(kaft::SynthSpec::from_json(base), seed);
    *out = c.release();
  });
}

kaft_status kaft_corpus_load(const char* path, kaft_corpus** out) {
  return guarded([&] {
    require(path, "path");
    require(out, "out");
    auto c = std::make_unique<kaft_corpus>();
    c->corpus = kaft::load_corpus(path);
    *out = c.release();
  });
}

kaft_status kaft_corpus_save(const kaft_corpus* corpus, const char* dir) {
  return guarded([&] {
    require(corpus, "corpus");
    require(dir, "dir");
    kaft::save_corpus(corpus->corpus, dir);
  });
}

kaft_status kaft_corpus_stats(const kaft_corpus* corpus, char** stats_json) {
  return guarded([&] {
    require(corpus, "corpus");
    require(stats_json, "stats_json");
    const kaft::CorpusSplits& c = corpus->corpus;
    json splits = json::object();
    std::map<std::string, std::size_t> decisions;
    std::size_t turns = 0, kb_total = 0, dialogs = 0;
    for (const char* name : {"train", "dev", "test"}) {
      const auto& ds = c.split(name);
      std::size_t split_turns = 0;
      for (const auto& d : ds) {
        split_turns += d.turns.size();
        kb_total += d.kb.size();
        for (const auto& t : d.turns) ++decisions[kaft::decision_name(t.decision)];
      }
      splits[name] = {{"dialogs", ds.size()}, {"turns", split_turns}};
      turns += split_turns;
      dialogs += ds.size();
    }
    json mix = json::object();
    for (const auto& [k, n] : decisions) mix[k] = turns ? static_cast<double>(n) / static_cast<double>(turns) : 0.0;
    *stats_json = dup(json{{"splits", splits},
                           {"dialogs", dialogs},
                           {"turns", turns},
                           {"faq_pieces", c.global ? c.global->faq.size() : 0},
                           {"product_pieces", c.global ? c.global->product.size() : 0},
                           {"mean_kb_size", dialogs ? static_cast<double>(kb_total) / static_cast<double>(dialogs) : 0.0},
                           {"decision_mix", mix}}
                          .dump(2));
  });
}

void kaft_corpus_free(kaft_corpus* corpus) { delete corpus; }

kaft_status kaft_bundle_init(const char* bundle_dir, const char* config_json, char** resolved_json) {
  return guarded([&] {
    require(bundle_dir, "bundle_dir");
    std::optional<kaft::Bundle> b;
    if (config_json) {
      b.emplace(kaft::Bundle::create(bundle_dir, kaft::BundleConfig::from_json(parse_json(config_json, "config"))));
    } else {
      b.emplace(kaft::Bundle::open(bundle_dir));
    }
    if (resolved_json) *resolved_json = dup(b->config().to_json().dump(2));
  });
}

kaft_status kaft_train_retriever(const kaft_corpus* corpus, const char* bundle_dir, const char* role,
                                 char** result_json) {
  return guarded([&] {
    require(corpus, "corpus");
    require(role, "role");
    const kaft::Bundle b = open_bundle(bundle_dir);
    const auto r = kaft::train_retriever_step(b, corpus->corpus, kaft::parse_retriever_role(role));
    if (result_json) *result_json = dup(r.to_json().dump(2));
  });
}

kaft_status kaft_train_generator(const kaft_corpus* corpus, const char* bundle_dir, const char* knowledge,
                                 char** result_json) {
  return guarded([&] {
    require(corpus, "corpus");
    require(knowledge, "knowledge");
    const kaft::Bundle b = open_bundle(bundle_dir);
    const auto r = kaft::train_generator_step(b, corpus->corpus, knowledge);
    if (result_json) *result_json = dup(r.to_json().dump(2));
  });
}

kaft_status kaft_train_decision(const kaft_corpus* corpus, const char* bundle_dir, char** result_json) {
  return guarded([&] {
    require(corpus, "corpus");
    const kaft::Bundle b = open_bundle(bundle_dir);
    const auto r = kaft::train_decision_step(b, corpus->corpus);
    if (result_json) *result_json = dup(r.to_json().dump(2));
  });
}

kaft_status kaft_evaluate(const kaft_corpus* corpus, const char* bundle_dir, const char* eval_json,
                          const char* traces_path, char** report_json) {
  return guarded([&] {
    require(corpus, "corpus");
    require(report_json, "report_json");
    const kaft::Bundle b = open_bundle(bundle_dir);
    const json j = parse_json(eval_json, "eval config");
    json spec_j = json::object();
    for (const char* key : {"system", "regime", "train_knowledge", "test_knowledge"}) {
      if (j.contains(key)) spec_j[key] = j.at(key);
    }
    const kaft::SystemSpec spec = kaft::SystemSpec::from_json(spec_j);
    kaft::LLMClientConfig llm = b.config().llm;
    if (j.contains("llm")) {
      json base = llm.to_json();
      base.merge_patch(j.at("llm"));
      llm = kaft::LLMClientConfig::from_json(base);
    }
    if (llm.cache_dir.empty()) llm.cache_dir = (b.dir() / "llm-cache").string();
    auto system = kaft::build_system(b, corpus->corpus, spec, kaft::make_llm_client(llm));
    const std::string split = j.value("split", "test");
    kaft::EncoderEmbedder embedder(b.retriever(kaft::RetrieverRole::kAll));
    kaft::EvalOptions opts;
    opts.split = split;
    opts.setting = spec.label();
    opts.config = {{"arm", spec.to_json()}, {"bundle", b.config().to_json()}};
    opts.seeds = {b.config().seed};
    kaft::EvalRun run = kaft::evaluate_system(*system, corpus->corpus.split(split), embedder, opts);
    if (spec.system == "rag") {
      auto model = b.retriever(kaft::RetrieverRole::kAll);
      kaft::IndexBuilder indexes(*model, kaft::kAllSources);
      run.report.recall = kaft::recall_at_k(*model, indexes, corpus->corpus.split(split), {1, 3, 5}).recall;
    }
    if (traces_path) {
      std::string lines;
      for (const auto& t : run.traces) lines += t.to_json(false).dump() + "\n";
      kaft::write_text_file(traces_path, lines);
    }
    *report_json = dup(run.report.to_json().dump(2));
  });
}

kaft_status kaft_run_experiment(const char* manifest_json, const char* out_root, kaft_progress_fn progress,
                                void* user, char** result_json) {
  return guarded([&] {
    require(manifest_json, "manifest_json");
    require(out_root, "out_root");
    const auto cfg = kaft::ExperimentConfig::from_json(parse_json(manifest_json, "manifest"));
    kaft::ProgressFn fn;
    if (progress) fn = [progress, user](const std::string& line) { progress(line.c_str(), user); };
    const kaft::ExperimentResult r = kaft::run_experiment(cfg, out_root, fn);
    json j = r.to_json();
    j["table"] = r.table;
    if (result_json) *result_json = dup(j.dump(2));
  });
}

kaft_status kaft_service_create(const char* config_json, kaft_service** out) {
  return guarded([&] {
    require(out, "out");
    const auto cfg = kaft::ServiceConfig::from_json(parse_json(config_json, "service config"));
    auto s = std::make_unique<kaft_service>();
    s->service = std::make_shared<kaft::ChatService>(cfg);
    *out = s.release();
  });
}

kaft_status kaft_service_request(kaft_service* service, const char* method, const char* path, const char* body,
                                 int* http_status, char** response_json) {
  return guarded([&] {
    require(service, "service");
    require(method, "method");
    require(path, "path");
    require(http_status, "http_status");
    require(response_json, "response_json");
    const kaft::ServiceReply r = service->service->handle(method, path, body ? body : "");
    *http_status = r.status;
    *response_json = dup(r.body.dump());
  });
}

kaft_status kaft_service_serve(kaft_service* service, const char* host, int port, void (*on_ready)(int, void*),
                               void* user) {
  return guarded([&] {
    require(service, "service");
    kaft::HttpChatServer* server = nullptr;
    {
      std::lock_guard<std::mutex> lock(service->mu);
      service->server = std::make_unique<kaft::HttpChatServer>(service->service);
      server = service->server.get();
    }
    const int bound = server->bind(host ? host : "127.0.0.1", port);
    if (on_ready) on_ready(bound, user);
    server->run();
  });
}

void kaft_service_stop(kaft_service* service) {
  if (!service) return;
  std::lock_guard<std::mutex> lock(service->mu);
  if (service->server) service->server->stop();
}

void kaft_service_free(kaft_service* service) { delete service; }

}  // extern "C"
