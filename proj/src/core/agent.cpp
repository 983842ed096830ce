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

#include "kaft/agent.hpp"

#include <algorithm>
#include <chrono>

#include "kaft/error.hpp"

namespace kaft {

using nlohmann::json;

namespace {

double ms_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
}

const char* class_key(Decision d) {
  switch (d) {
    case Decision::kNoSearch: return "no_search";
    case Decision::kSearchProduct: return "product";
    case Decision::kSearchFaq: return "faq";
    case Decision::kSearchPersonal: return "personal";
  }
  return "?";
}

std::vector<int> label_ids(const Tokenizer& tok, Decision d) {
  std::vector<int> ids = tok.encode(decision_lm_label(d));
  ids.push_back(Tokenizer::kEnd);
  return ids;
}

}  // namespace

const char* decision_lm_label(Decision d) {
  switch (d) {
    case Decision::kNoSearch: return "no search";
    case Decision::kSearchProduct: return "search product";
    case Decision::kSearchFaq: return "search faq";
    case Decision::kSearchPersonal: return "search personal";
  }
  return "no search";
}

json DecisionResult::to_json() const {
  json j{{"decision", decision_name(decision)}, {"fallback", fallback}};
  if (!raw.empty()) j["raw"] = raw;
  json s = json::object();
  for (Decision d : kAllDecisions) s[decision_name(d)] = scores[static_cast<std::size_t>(d)];
  j["scores"] = s;
  return j;
}

Decision argmax_decision(const std::array<double, 4>& scores) {
  Decision best = kAllDecisions[0];
  for (Decision d : kAllDecisions) {
    if (scores[static_cast<std::size_t>(d)] > scores[static_cast<std::size_t>(best)]) best = d;
  }
  return best;
}

DecisionResult parse_decision_completion(const std::string& completion) {
  DecisionResult r;
  r.raw = completion;
  const std::string text = to_lower(trim(completion));
  // Prompt labels ("Search FAQ") first, then the enum names ("SEARCH_FAQ").
  for (Decision d : kAllDecisions) {
    if (text == to_lower(decision_prompt_label(d)) || text == to_lower(decision_name(d))) {
      r.decision = d;
      return r;
    }
  }
  std::size_t best_pos = std::string::npos;
  for (Decision d : kAllDecisions) {
    for (const std::string& label : {to_lower(decision_prompt_label(d)), to_lower(decision_name(d))}) {
      const std::size_t pos = text.find(label);
      if (pos != std::string::npos && (best_pos == std::string::npos || pos < best_pos)) {
        best_pos = pos;
        r.decision = d;
      }
    }
  }
  if (best_pos == std::string::npos) {
    r.decision = Decision::kNoSearch;
    r.fallback = true;
  }
  return r;
}

std::vector<int> decision_prefix(const Tokenizer& tok, const Context& c, int context_budget) {
  const auto& segs = c.segments();
  if (segs.empty()) fail(ErrorCode::kInvalidArgument, "empty dialog context");
  std::vector<int> ctx;
  for (std::size_t first = 0;; ++first) {
    Context kept(std::vector<Segment>(segs.begin() + static_cast<std::ptrdiff_t>(first), segs.end()),
                 c.markers());
    ctx = tok.encode(kept.rendered());
    if (static_cast<int>(ctx.size()) <= context_budget || first + 1 == segs.size()) break;
  }
  std::vector<int> ids{Tokenizer::kBos, Tokenizer::kContext};
  ids.insert(ids.end(), ctx.begin(), ctx.end());
  ids.push_back(Tokenizer::kDecision);
  return ids;
}

// --- decision maker ---------------------------------------------------------------

DecisionMaker DecisionMaker::finetuned(std::shared_ptr<const LocalCausalLM> lm, int context_budget) {
  if (!lm) fail(ErrorCode::kInvalidArgument, "finetuned decision maker needs a model");
  DecisionMaker dm;
  dm.lm_ = std::move(lm);
  dm.context_budget_ = context_budget;
  return dm;
}

DecisionMaker DecisionMaker::prompted(std::shared_ptr<RemoteLLMClient> client, PromptTemplate tpl) {
  if (!client) fail(ErrorCode::kInvalidArgument, "prompted decision maker needs a client");
  if (tpl.kind != PromptKind::kDecision) fail(ErrorCode::kInvalidArgument, "expected a decision template");
  DecisionMaker dm;
  dm.client_ = std::move(client);
  dm.tpl_ = std::move(tpl);
  return dm;
}

std::string DecisionMaker::regime() const {
  if (lm_) return "kaft";
  return "prompt-" + std::to_string(tpl_.examples.size()) + "shot";
}

DecisionResult DecisionMaker::predict(const Context& c) const {
  if (!lm_) return parse_decision_completion(clean_completion(client_->complete(build_decision_prompt(tpl_, c))));

  const Tokenizer& tok = lm_->tokenizer();
  std::vector<int> prefix = decision_prefix(tok, c, context_budget_);
  int longest = 0;
  for (Decision d : kAllDecisions) longest = std::max(longest, static_cast<int>(label_ids(tok, d).size()));
  if (static_cast<int>(prefix.size()) + longest > lm_->max_len()) {
    // Keep [BOS] [CTX] and the tail of the context.
    const std::size_t keep = static_cast<std::size_t>(lm_->max_len() - longest);
    std::vector<int> clipped{prefix[0], prefix[1]};
    clipped.insert(clipped.end(), prefix.end() - static_cast<std::ptrdiff_t>(keep - 2), prefix.end());
    prefix = std::move(clipped);
  }
  nn::KvCache cache;
  const nn::RowVector next = lm_->step(cache, prefix);
  DecisionResult r;
  for (Decision d : kAllDecisions) {
    r.scores[static_cast<std::size_t>(d)] = lm_->continuation_logprob(cache, next, label_ids(tok, d));
  }
  r.decision = argmax_decision(r.scores);
  return r;
}

std::vector<LMExample> decision_examples(const LocalCausalLM& lm, const std::vector<Dialog>& dialogs,
                                         int context_budget) {
  const Tokenizer& tok = lm.tokenizer();
  std::vector<LMExample> out;
  for (const auto& d : dialogs) {
    for (const auto& t : d.turns) {
      const std::vector<int> prefix = decision_prefix(tok, build_context(d, t.index), context_budget);
      const std::vector<int> label = tok.encode(decision_lm_label(t.decision));
      if (static_cast<int>(prefix.size() + label.size() + 1) > lm.max_len()) {
        fail(ErrorCode::kTraining, "dialog " + d.id + " turn " + std::to_string(t.index) +
                                       " does not fit the decision model's max_len");
      }
      out.push_back(make_lm_example(prefix, label));
    }
  }
  return out;
}

TrainCurve train_decision_maker(LocalCausalLM& lm, const CorpusSplits& corpus, int context_budget,
                                const LMTrainConfig& cfg) {
  const auto examples = decision_examples(lm, corpus.train, context_budget);
  if (examples.empty()) fail(ErrorCode::kTraining, "no training turns for the decision maker");
  return finetune_lm(lm, examples, cfg, "decision maker");
}

json DecisionAccuracy::to_json() const { return {{"accuracy", accuracy}, {"support", support}}; }

DecisionAccuracy decision_accuracy(const std::vector<Decision>& predicted, const std::vector<Decision>& gold) {
  if (predicted.size() != gold.size()) {
    fail(ErrorCode::kInvalidArgument, "decision_accuracy: " + std::to_string(predicted.size()) +
                                          " predictions for " + std::to_string(gold.size()) + " gold labels");
  }
  std::map<std::string, std::size_t> correct;
  DecisionAccuracy out;
  for (std::size_t i = 0; i < gold.size(); ++i) {
    const std::string key = class_key(gold[i]);
    ++out.support[key];
    if (predicted[i] == gold[i]) ++correct[key];
  }
  std::size_t total_correct = 0;
  for (const auto& [key, n] : out.support) {
    out.accuracy[key] = static_cast<double>(correct[key]) / static_cast<double>(n);
    total_correct += correct[key];
  }
  if (!gold.empty()) {
    out.support["overall"] = gold.size();
    out.accuracy["overall"] = static_cast<double>(total_correct) / static_cast<double>(gold.size());
  }
  return out;
}

// --- APIs -------------------------------------------------------------------------

json AgentConfig::to_json() const { return {{"gold_decision", gold_decision}}; }

SearchApis::SearchApis(std::shared_ptr<const RetrievalModel> product_api,
                       std::shared_ptr<const RetrievalModel> faq_api, int k)
    : product_api_(std::move(product_api)), faq_api_(std::move(faq_api)), k_(k) {
  if (!product_api_ || !faq_api_) fail(ErrorCode::kInvalidArgument, "agent needs both Product and FAQ APIs");
  if (k_ < 1) fail(ErrorCode::kInvalidArgument, "agent API k must be >= 1");
  product_indexes_ = std::make_shared<IndexBuilder>(*product_api_, std::set<Source>{Source::kProduct});
  faq_indexes_ = std::make_shared<IndexBuilder>(*faq_api_, std::set<Source>{Source::kFaq});
}

void SearchApis::forget(const std::string& dialog_id) const {
  product_indexes_->forget(dialog_id);
  faq_indexes_->forget(dialog_id);
}

ApiResult SearchApis::scoped(const RetrievalModel& model, IndexBuilder& indexes, const char* api,
                             const Dialog& dialog, const Context& c) const {
  ApiResult r;
  r.api = api;
  auto index = indexes.for_dialog(dialog);
  if (index->empty()) {
    r.warnings.push_back(std::string(api) + " API has no pieces for dialog " + dialog.id +
                         "; responding without knowledge");
    return r;
  }
  const auto ranked = rank_pieces(*index, model.encode_context(c));
  for (const auto& sp : ranked) {
    r.ranking.push_back({sp.id, index->sources()[static_cast<std::size_t>(index->row_of(sp.id))],
                         sp.probability, sp.score});
  }
  for (std::size_t i = 0; i < ranked.size() && i < static_cast<std::size_t>(k_); ++i) {
    r.pieces.push_back(*dialog.kb.find(ranked[i].id));
  }
  return r;
}

ApiResult SearchApis::call(Decision decision, const Dialog& dialog, const Context& c) const {
  switch (decision) {
    case Decision::kNoSearch: {
      ApiResult r;
      r.api = "none";
      return r;
    }
    case Decision::kSearchPersonal: {
      ApiResult r;
      r.api = "personal";
      r.pieces = dialog.kb.user_pieces;
      if (r.pieces.empty()) r.warnings.push_back("dialog " + dialog.id + " has no personal information");
      return r;
    }
    case Decision::kSearchProduct:
      return scoped(*product_api_, *product_indexes_, "product", dialog, c);
    case Decision::kSearchFaq:
      return scoped(*faq_api_, *faq_indexes_, "faq", dialog, c);
  }
  fail(ErrorCode::kInvalidArgument, "unknown decision");
}

// --- agent ------------------------------------------------------------------------

AgentSystem::AgentSystem(std::shared_ptr<const DecisionMaker> decider, std::shared_ptr<const SearchApis> apis,
                         std::shared_ptr<const GeneratorBackend> generator, AgentConfig cfg)
    : decider_(std::move(decider)), apis_(std::move(apis)), generator_(std::move(generator)), cfg_(cfg) {
  if (!apis_ || !generator_) fail(ErrorCode::kInvalidArgument, "agent needs APIs and a generator");
  if (!decider_ && !cfg_.gold_decision) {
    fail(ErrorCode::kInvalidArgument, "agent needs a decision maker unless gold decisions are used");
  }
}

void AgentSystem::forget(const std::string& dialog_id) const { apis_->forget(dialog_id); }

TurnResult AgentSystem::respond(const Dialog& dialog, int t, const TurnOverrides& ov) const {
  TurnTrace tr;
  tr.system = system_name();
  tr.regime = regime();
  tr.dialog_id = dialog.id;
  tr.turn = t;
  tr.context = build_context(dialog, t);

  const auto t0 = std::chrono::steady_clock::now();
  Decision decision = Decision::kNoSearch;
  if (ov.decision) {
    decision = *ov.decision;
    tr.decision_source = "override";
  } else if (cfg_.gold_decision) {
    decision = dialog.turns.at(static_cast<std::size_t>(t - 1)).decision;
    tr.decision_source = "gold";
  } else {
    DecisionResult dr = decider_->predict(tr.context);
    decision = dr.decision;
    tr.decision_source = "model";
    tr.decision_detail = dr.to_json();
    if (dr.fallback) tr.warnings.push_back("decision completion matched no label; fell back to NO_SEARCH");
  }
  tr.decision = decision;
  tr.timings_ms["decision"] = ms_since(t0);

  const auto t1 = std::chrono::steady_clock::now();
  if (ov.piece_ids) {
    tr.knowledge = resolve_pieces(dialog, *ov.piece_ids);
    tr.knowledge_source = "override";
    tr.api = "override";
  } else {
    ApiResult r = apis_->call(decision, dialog, tr.context);
    tr.knowledge = std::move(r.pieces);
    tr.ranking = std::move(r.ranking);
    tr.api = r.api;
    tr.knowledge_source = r.api == "none" ? "none" : "api";
    tr.warnings.insert(tr.warnings.end(), r.warnings.begin(), r.warnings.end());
  }
  tr.timings_ms["api"] = ms_since(t1);

  const KnowledgeText h = format_knowledge(tr.knowledge);
  tr.knowledge_text = h.rendered;
  const auto t2 = std::chrono::steady_clock::now();
  GeneratorOutput out = generator_->generate(tr.context, h);
  tr.timings_ms["generation"] = ms_since(t2);
  tr.prompt = std::move(out.prompt);
  tr.response = out.response;
  tr.truncated = out.truncated;
  return {std::move(out.response), std::move(tr)};
}

KnowledgeProvider agent_knowledge(std::shared_ptr<const DecisionMaker> decider,
                                  std::shared_ptr<const SearchApis> apis) {
  return [decider, apis](const Dialog& d, const Turn& t) {
    const Context c = build_context(d, t.index);
    const Decision decision = decider ? decider->predict(c).decision : t.decision;
    return apis->call(decision, d, c).pieces;
  };
}

}  // namespace kaft
