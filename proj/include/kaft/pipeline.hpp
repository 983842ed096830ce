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

// Turn-level dialog systems: generator backends, per-turn traces and the
// retrieve-then-generate system.

#pragma once

#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "kaft/corpus.hpp"
#include "kaft/generation.hpp"
#include "kaft/llm_client.hpp"
#include "kaft/prompt.hpp"
#include "kaft/retriever.hpp"

namespace kaft {

// --- generator backends -----------------------------------------------------------

struct GeneratorOutput {
  std::string response;
  std::string prompt;  // prompted backends only
  bool truncated = false;
};

class GeneratorBackend {
 public:
  virtual ~GeneratorBackend() = default;
  virtual std::string regime() const = 0;  // "kaft", "prompt-0shot", "prompt-5shot", ...
  virtual GeneratorOutput generate(const Context& c, const KnowledgeText& h) const = 0;
};

class KaftGenerator : public GeneratorBackend {
 public:
  KaftGenerator(std::shared_ptr<const LocalCausalLM> lm, GeneratorConfig cfg, DecodeConfig decode = {});
  std::string regime() const override { return "kaft"; }
  GeneratorOutput generate(const Context& c, const KnowledgeText& h) const override;
  const LocalCausalLM& lm() const { return *lm_; }

 private:
  std::shared_ptr<const LocalCausalLM> lm_;
  GeneratorConfig cfg_;
  DecodeConfig decode_;
};

class PromptedGenerator : public GeneratorBackend {
 public:
  PromptedGenerator(std::shared_ptr<RemoteLLMClient> client, PromptTemplate tpl, RoleMarkers markers = {});
  std::string regime() const override;
  GeneratorOutput generate(const Context& c, const KnowledgeText& h) const override;

 private:
  std::shared_ptr<RemoteLLMClient> client_;
  PromptTemplate tpl_;
  RoleMarkers markers_;
};

// --- traces -----------------------------------------------------------------------

struct RankedPiece {
  std::string id;
  Source source = Source::kUser;
  double probability = 0.0;
  double score = 0.0;
};

struct TurnTrace {
  static constexpr int kSchemaVersion = 1;

  std::string system;  // "direct", "rag" or "agent"
  std::string regime;
  std::string dialog_id;
  int turn = 0;
  Context context;
  std::vector<RankedPiece> ranking;  // full ranking of the queried index
  std::vector<KnowledgePiece> knowledge;
  std::string knowledge_text;
  std::string knowledge_source;  // "retrieved", "oracle", "override", "api", "none"
  std::optional<Decision> decision;
  std::string decision_source;                   // "model", "override", "gold"
  nlohmann::json decision_detail = nlohmann::json::object();
  std::string api;                               // agent: "none", "product", "faq", "personal"
  std::string prompt;
  std::string response;
  bool truncated = false;
  std::vector<std::string> warnings;
  nlohmann::json timings_ms = nlohmann::json::object();

  nlohmann::json to_json(bool with_timings = true) const;
  static TurnTrace from_json(const nlohmann::json& j);
};

// Equality ignores timings.
bool same_trace(const TurnTrace& a, const TurnTrace& b);

// Regenerates the response from the trace's context and knowledge.
std::string replay_trace(const GeneratorBackend& generator, const TurnTrace& trace);

// --- systems ----------------------------------------------------------------------

// Per-turn steering from an operator; applies to one turn only.
struct TurnOverrides {
  std::optional<Decision> decision;
  std::optional<std::vector<std::string>> piece_ids;

  bool empty() const { return !decision && !piece_ids; }
  static TurnOverrides from_json(const nlohmann::json& j);  // throws kParse
};

struct TurnResult {
  std::string response;
  TurnTrace trace;
};

class DialogSystem {
 public:
  virtual ~DialogSystem() = default;
  virtual std::string system_name() const = 0;
  virtual std::string regime() const = 0;
  // Responds to user utterance t of `dialog` given turns 1..t-1 as history.
  virtual TurnResult respond(const Dialog& dialog, int t, const TurnOverrides& ov = {}) const = 0;
  // Drops cached per-dialog state (indexes) for a dialog id.
  virtual void forget(const std::string& dialog_id) const { (void)dialog_id; }
};

// Pieces named by id from the dialog's KB_X; kNotFound on an unknown id.
std::vector<KnowledgePiece> resolve_pieces(const Dialog& dialog, const std::vector<std::string>& ids);

struct RagConfig {
  int k = 3;
  bool use_knowledge = true;     // false gives the direct-respond system
  bool oracle_knowledge = false; // Z+ instead of retrieval

  nlohmann::json to_json() const;
};

class RagSystem : public DialogSystem {
 public:
  RagSystem(std::shared_ptr<const RetrievalModel> retriever, std::shared_ptr<const GeneratorBackend> generator,
            RagConfig cfg);

  std::string system_name() const override { return cfg_.use_knowledge ? "rag" : "direct"; }
  std::string regime() const override { return generator_->regime(); }
  TurnResult respond(const Dialog& dialog, int t, const TurnOverrides& ov = {}) const override;
  void forget(const std::string& dialog_id) const override;
  const RagConfig& config() const { return cfg_; }

 private:
  std::shared_ptr<const RetrievalModel> retriever_;
  std::shared_ptr<const GeneratorBackend> generator_;
  RagConfig cfg_;
  std::shared_ptr<IndexBuilder> indexes_;
};

}  // namespace kaft
