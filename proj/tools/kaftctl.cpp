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

// kaftctl: command-line front end over the C API.
//
//   kaftctl synth --out corpus/ [--seed 7] [--spec spec.json]
//   kaftctl stats --corpus corpus/
//   kaftctl init --bundle b/ [--config bundle.json]
//   kaftctl train-retriever --corpus corpus/ --bundle b/ [--role all|product|faq]
//   kaftctl train-decision --corpus corpus/ --bundle b/
//   kaftctl train-generator --corpus corpus/ --bundle b/ --knowledge retrieved
//   kaftctl eval --corpus corpus/ --bundle b/ --system rag [--regime kaft] [--out report.json]
//   kaftctl experiment --manifest exp.json [--out runs/]
//   kaftctl serve --corpus corpus/ --bundle b/ [--port 8080]
//   kaftctl chat --corpus corpus/ --bundle b/ [--system agent]

#include <csignal>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>

#include "CLI11.hpp"
#include "json.hpp"
#include "kaft/kaft.h"

using nlohmann::json;

namespace {

struct CFailure {
  kaft_status status;
};

void check(kaft_status s) {
  if (s != KAFT_OK) {
    std::cerr << "kaftctl: " << kaft_status_name(s) << ": " << kaft_last_error() << "\n";
    throw CFailure{s};
  }
}

// Takes ownership of a string returned by the library.
std::string take(char* s) {
  std::string out = s ? s : "";
  kaft_string_free(s);
  return out;
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    std::cerr << "kaftctl: cannot read " << path << "\n";
    throw CFailure{KAFT_IO};
  }
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  out << text;
  if (!out) {
    std::cerr << "kaftctl: cannot write " << path << "\n";
    throw CFailure{KAFT_IO};
  }
}

class Corpus {
 public:
  explicit Corpus(const std::string& path) { check(kaft_corpus_load(path.c_str(), &c_)); }
  ~Corpus() { kaft_corpus_free(c_); }
  Corpus(const Corpus&) = delete;
  Corpus& operator=(const Corpus&) = delete;
  const kaft_corpus* get() const { return c_; }

 private:
  kaft_corpus* c_ = nullptr;
};

kaft_service* g_serving = nullptr;

void on_signal(int) {
  if (g_serving) kaft_service_stop(g_serving);
}

json service_config(const std::string& bundle, const std::string& corpus, const std::string& event_log) {
  json cfg = {{"bundle_dir", bundle}, {"corpus_path", corpus}};
  if (!event_log.empty()) cfg["event_log"] = event_log;
  return cfg;
}

json request(kaft_service* svc, const char* method, const std::string& path, const json& body, int* status) {
  char* out = nullptr;
  check(kaft_service_request(svc, method, path.c_str(), body.is_null() ? "" : body.dump().c_str(), status, &out));
  return json::parse(take(out));
}

int run_chat(kaft_service* svc, const json& create) {
  int status = 0;
  json s = request(svc, "POST", "/sessions", create, &status);
  if (status != 201) {
    std::cerr << s.dump(2) << "\n";
    return 1;
  }
  const std::string id = s.at("session_id");
  std::cout << "session " << id << " (" << s.value("system", "") << "/" << s.value("regime", "")
            << "); empty line quits\n";
  std::string line;
  while (std::cout << "> " << std::flush, std::getline(std::cin, line)) {
    if (line.empty()) break;
    json r = request(svc, "POST", "/sessions/" + id + "/messages", {{"text", line}}, &status);
    if (status != 200) {
      std::cout << r.dump(2) << "\n";
      continue;
    }
    const json& trace = r.at("trace");
    if (trace.contains("decision") && !trace.at("decision").is_null()) {
      std::cout << "  [" << trace.at("decision").get<std::string>() << "]\n";
    }
    std::cout << r.at("response").get<std::string>() << "\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"kaft dialog toolkit"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(kaft_version()));

  std::string corpus, bundle, out, spec_file, config_file, role = "all", knowledge, manifest;
  std::string system = "rag", regime = "kaft", train_knowledge, test_knowledge, split = "test", traces;
  std::string host = "127.0.0.1", event_log, kb_dialog, llm_mode;
  std::uint64_t seed = 7;
  int port = 8080;

  auto* synth = app.add_subcommand("synth", "Generate a synthetic corpus");
  synth->add_option("--out", out, "Output directory")->required();
  synth->add_option("--seed", seed, "Corpus seed");
  synth->add_option("--spec", spec_file, "Synthesis spec JSON (merged over defaults)");

  auto* stats = app.add_subcommand("stats", "Print corpus statistics");
  stats->add_option("--corpus", corpus)->required();

  auto* init = app.add_subcommand("init", "Create or check a checkpoint bundle");
  init->add_option("--bundle", bundle)->required();
  init->add_option("--config", config_file, "Bundle config JSON (merged over defaults)");

  auto* tret = app.add_subcommand("train-retriever", "Train a retriever into the bundle");
  tret->add_option("--corpus", corpus)->required();
  tret->add_option("--bundle", bundle)->required();
  tret->add_option("--role", role)->check(CLI::IsMember({"all", "product", "faq"}));

  auto* tdec = app.add_subcommand("train-decision", "Finetune the decision maker");
  tdec->add_option("--corpus", corpus)->required();
  tdec->add_option("--bundle", bundle)->required();

  auto* tgen = app.add_subcommand("train-generator", "Finetune a generator");
  tgen->add_option("--corpus", corpus)->required();
  tgen->add_option("--bundle", bundle)->required();
  tgen->add_option("--knowledge", knowledge)
      ->required()
      ->check(CLI::IsMember({"none", "retrieved", "oracle", "agent", "agent-gold"}));

  auto* eval = app.add_subcommand("eval", "Evaluate a system on a split");
  eval->add_option("--corpus", corpus)->required();
  eval->add_option("--bundle", bundle)->required();
  eval->add_option("--system", system)->check(CLI::IsMember({"direct", "rag", "agent"}));
  eval->add_option("--regime", regime, "kaft, prompt-0shot or prompt-nshot");
  eval->add_option("--train-knowledge", train_knowledge);
  eval->add_option("--test-knowledge", test_knowledge);
  eval->add_option("--split", split)->check(CLI::IsMember({"train", "dev", "test"}));
  eval->add_option("--llm-mode", llm_mode, "LLM cache mode override");
  eval->add_option("--traces", traces, "Write per-turn traces (JSONL)");
  eval->add_option("--out", out, "Write the report here instead of stdout");

  auto* exp = app.add_subcommand("experiment", "Run an experiment manifest");
  exp->add_option("--manifest", manifest)->required();
  exp->add_option("--out", out, "Output root")->default_val("runs");

  auto* serve = app.add_subcommand("serve", "Serve the chat HTTP endpoints");
  serve->add_option("--corpus", corpus)->required();
  serve->add_option("--bundle", bundle)->required();
  serve->add_option("--host", host);
  serve->add_option("--port", port);
  serve->add_option("--event-log", event_log, "Append-only session log; replayed on start");

  auto* chat = app.add_subcommand("chat", "Chat with a system in the terminal");
  chat->add_option("--corpus", corpus)->required();
  chat->add_option("--bundle", bundle)->required();
  chat->add_option("--system", system)->check(CLI::IsMember({"direct", "rag", "agent"}));
  chat->add_option("--regime", regime);
  chat->add_option("--kb-dialog", kb_dialog, "Borrow this dialog's knowledge base");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*synth) {
      const std::string spec = spec_file.empty() ? "{}" : read_file(spec_file);
      kaft_corpus* c = nullptr;
      check(kaft_corpus_synth(spec.c_str(), seed, &c));
      const kaft_status s = kaft_corpus_save(c, out.c_str());
      char* st = nullptr;
      if (s == KAFT_OK) check(kaft_corpus_stats(c, &st));
      kaft_corpus_free(c);
      check(s);
      std::cout << take(st) << "\n";
    } else if (*stats) {
      Corpus c(corpus);
      char* st = nullptr;
      check(kaft_corpus_stats(c.get(), &st));
      std::cout << take(st) << "\n";
    } else if (*init) {
      const std::string cfg = config_file.empty() ? "{}" : read_file(config_file);
      char* resolved = nullptr;
      check(kaft_bundle_init(bundle.c_str(), cfg.c_str(), &resolved));
      std::cout << take(resolved) << "\n";
    } else if (*tret || *tdec || *tgen) {
      Corpus c(corpus);
      char* result = nullptr;
      if (*tret) check(kaft_train_retriever(c.get(), bundle.c_str(), role.c_str(), &result));
      if (*tdec) check(kaft_train_decision(c.get(), bundle.c_str(), &result));
      if (*tgen) check(kaft_train_generator(c.get(), bundle.c_str(), knowledge.c_str(), &result));
      json r = json::parse(take(result));
      r.erase("curve");
      std::cout << r.dump(2) << "\n";
    } else if (*eval) {
      Corpus c(corpus);
      json ej = {{"system", system}, {"regime", regime}, {"split", split}};
      if (!train_knowledge.empty()) ej["train_knowledge"] = train_knowledge;
      if (!test_knowledge.empty()) ej["test_knowledge"] = test_knowledge;
      if (!llm_mode.empty()) ej["llm"] = {{"mode", llm_mode}};
      char* report = nullptr;
      check(kaft_evaluate(c.get(), bundle.c_str(), ej.dump().c_str(), traces.empty() ? nullptr : traces.c_str(),
                          &report));
      json r = json::parse(take(report));
      if (!out.empty()) write_file(out, r.dump(2) + "\n");
      r.erase("per_dialog");
      r.erase("config");
      std::cout << r.dump(2) << "\n";
    } else if (*exp) {
      const std::string m = read_file(manifest);
      char* result = nullptr;
      check(kaft_run_experiment(
          m.c_str(), out.c_str(), [](const char* line, void*) { std::cerr << line << "\n"; }, nullptr, &result));
      const json r = json::parse(take(result));
      std::cout << r.at("table").get<std::string>() << "results in " << r.value("dir", "") << "\n";
    } else if (*serve) {
      json cfg = service_config(bundle, corpus, event_log);
      kaft_service* svc = nullptr;
      check(kaft_service_create(cfg.dump().c_str(), &svc));
      g_serving = svc;
      std::signal(SIGINT, on_signal);
      std::signal(SIGTERM, on_signal);
      const kaft_status s = kaft_service_serve(
          svc, host.c_str(), port,
          [](int bound, void*) { std::cerr << "listening on port " << bound << "\n"; }, nullptr);
      g_serving = nullptr;
      kaft_service_free(svc);
      check(s);
    } else if (*chat) {
      kaft_service* svc = nullptr;
      check(kaft_service_create(service_config(bundle, corpus, "").dump().c_str(), &svc));
      json create = {{"system", system}, {"regime", regime}};
      if (!kb_dialog.empty()) create["kb_dialog"] = kb_dialog;
      int rc = 1;
      try {
        rc = run_chat(svc, create);
      } catch (...) {
        kaft_service_free(svc);
        throw;
      }
      kaft_service_free(svc);
      return rc;
    }
  } catch (const CFailure& f) {
    return static_cast<int>(f.status) + 1;
  }
  return 0;
}
