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

// Decide-search-respond agent: a decision maker picks one of four search
// decisions, the matching API supplies knowledge, then the generator replies.

#pragma once

#include <array>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "kaft/generation.hpp"
#include "kaft/llm_client.hpp"
#include "kaft/pipeline.hpp"
#include "kaft/prompt.hpp"
#include "kaft/retriever.hpp"

namespace kaft {

// Label strings scored by the finetuned decision maker.
const char* decision_lm_label(Decision d);  // "no search", "search product", ...

struct DecisionResult {
  Decision decision = Decision::kNoSearch;
  std::array<double, 4> scores{};  // label log-probabilities (finetuned mode)
  std::string raw;                 // completion (prompted mode)
  bool fallback = false;           // completion matched no label

  nlohmann::json to_json() const;
};

// Argmax over kAllDecisions order; ties go to the earlier decision.
Decision argmax_decision(const std::array<double, 4>& scores);

// Exact label match (case-insensitive, trimmed), else the earliest label
// occurring as a substring, else NO_SEARCH with fallback set.
DecisionResult parse_decision_completion(const std::string& completion);

// [BOS] [CTX] c [DEC], dropping the oldest segments beyond the budget.
std::vector<int> decision_prefix(const Tokenizer& tok, const Context& c, int context_budget);

class DecisionMaker {
 public:
  static DecisionMaker finetuned(std::shared_ptr<const LocalCausalLM> lm, int context_budget);
  static DecisionMaker prompted(std::shared_ptr<RemoteLLMClient> client, PromptTemplate tpl);

  bool is_finetuned() const { return lm_ != nullptr; }
  std::string regime() const;
  DecisionResult predict(const Context& c) const;
  const LocalCausalLM* lm() const { return lm_.get(); }

 private:
  DecisionMaker() = default;

  std::shared_ptr<const LocalCausalLM> lm_;
  int context_budget_ = 48;
  std::shared_ptr<RemoteLLMClient> client_;
  PromptTemplate tpl_;
};

std::vector<LMExample> decision_examples(const LocalCausalLM& lm, const std::vector<Dialog>& dialogs,
                                         int context_budget);

TrainCurve train_decision_maker(LocalCausalLM& lm, const CorpusSplits& corpus, int context_budget,
                                const LMTrainConfig& cfg);

struct DecisionAccuracy {
  // "personal", "product", "faq", "no_search", "overall"; a class without gold
  // examples is absent.
  std::map<std::string, double> accuracy;
  std::map<std::string, std::size_t> support;
  nlohmann::json to_json() const;
};

DecisionAccuracy decision_accuracy(const std::vector<Decision>& predicted, const std::vector<Decision>& gold);

struct AgentConfig {
  bool gold_decision = false;  // use the annotated decision instead of the decision maker

  nlohmann::json to_json() const;
};

struct ApiResult {
  std::vector<KnowledgePiece> pieces;
  std::vector<RankedPiece> ranking;
  std::string api;  // "none", "product", "faq", "personal"
  std::vector<std::string> warnings;
};

// The three search APIs. Product and FAQ are scoped retrievers; Personal
// returns every user piece of the dialog and ignores k.
class SearchApis {
 public:
  SearchApis(std::shared_ptr<const RetrievalModel> product_api, std::shared_ptr<const RetrievalModel> faq_api,
             int k);

  ApiResult call(Decision decision, const Dialog& dialog, const Context& c) const;
  void forget(const std::string& dialog_id) const;
  int k() const { return k_; }

 private:
  ApiResult scoped(const RetrievalModel& model, IndexBuilder& indexes, const char* api, const Dialog& dialog,
                   const Context& c) const;

  std::shared_ptr<const RetrievalModel> product_api_;
  std::shared_ptr<const RetrievalModel> faq_api_;
  int k_;
  std::shared_ptr<IndexBuilder> product_indexes_;
  std::shared_ptr<IndexBuilder> faq_indexes_;
};

class AgentSystem : public DialogSystem {
 public:
  AgentSystem(std::shared_ptr<const DecisionMaker> decider, std::shared_ptr<const SearchApis> apis,
              std::shared_ptr<const GeneratorBackend> generator, AgentConfig cfg);

  std::string system_name() const override { return "agent"; }
  std::string regime() const override { return generator_->regime(); }
  TurnResult respond(const Dialog& dialog, int t, const TurnOverrides& ov = {}) const override;
  void forget(const std::string& dialog_id) const override;

  const DecisionMaker& decider() const { return *decider_; }
  const SearchApis& apis() const { return *apis_; }

 private:
  std::shared_ptr<const DecisionMaker> decider_;
  std::shared_ptr<const SearchApis> apis_;
  std::shared_ptr<const GeneratorBackend> generator_;
  AgentConfig cfg_;
};

// Training knowledge for the agent's generator: API results for the decision
// the decision maker predicts, or for the annotated decision when decider is
// null.
KnowledgeProvider agent_knowledge(std::shared_ptr<const DecisionMaker> decider,
                                  std::shared_ptr<const SearchApis> apis);

}  // namespace kaft
