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

#include "kaft/pipeline.hpp"

#include <chrono>

#include "kaft/error.hpp"

namespace kaft {

using nlohmann::json;

namespace {

double ms_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
}

json context_to_json(const Context& c) {
  json segs = json::array();
  for (const auto& s : c.segments()) {
    segs.push_back({{"role", s.role == Role::kUser ? "USER" : "SYSTEM"}, {"text", s.text}});
  }
  return {{"segments", segs},
          {"rendered", c.rendered()},
          {"markers", {{"user", c.markers().user}, {"system", c.markers().system}}}};
}

Context context_from_json(const json& j) {
  RoleMarkers m;
  if (j.contains("markers")) {
    m.user = j.at("markers").value("user", m.user);
    m.system = j.at("markers").value("system", m.system);
  }
  std::vector<Segment> segs;
  for (const auto& s : j.at("segments")) {
    const std::string role = s.at("role").get<std::string>();
    if (role != "USER" && role != "SYSTEM") fail(ErrorCode::kParse, "unknown segment role " + role);
    segs.push_back({role == "USER" ? Role::kUser : Role::kSystem, s.at("text").get<std::string>()});
  }
  return Context(std::move(segs), m);
}

}  // namespace

// --- backends ---------------------------------------------------------------------

KaftGenerator::KaftGenerator(std::shared_ptr<const LocalCausalLM> lm, GeneratorConfig cfg,
                             DecodeConfig decode)
    : lm_(std::move(lm)), cfg_(std::move(cfg)), decode_(decode) {}

GeneratorOutput KaftGenerator::generate(const Context& c, const KnowledgeText& h) const {
  GenerationResult r = generate_response(*lm_, cfg_, c, h, decode_);
  return {std::move(r.text), "", r.truncated};
}

PromptedGenerator::PromptedGenerator(std::shared_ptr<RemoteLLMClient> client, PromptTemplate tpl,
                                     RoleMarkers markers)
    : client_(std::move(client)), tpl_(std::move(tpl)), markers_(std::move(markers)) {}

std::string PromptedGenerator::regime() const {
  return "prompt-" + std::to_string(tpl_.examples.size()) + "shot";
}

GeneratorOutput PromptedGenerator::generate(const Context& c, const KnowledgeText& h) const {
  GeneratorOutput out;
  out.prompt = build_prompt(tpl_, c, h);
  out.response = prompted_generate(*client_, out.prompt, markers_);
  return out;
}

// --- traces -----------------------------------------------------------------------

json TurnTrace::to_json(bool with_timings) const {
  json ranked = json::array();
  for (const auto& r : ranking) {
    ranked.push_back({{"id", r.id}, {"source", source_name(r.source)}, {"probability", r.probability},
                      {"score", r.score}});
  }
  json know = json::array();
  for (const auto& p : knowledge) know.push_back(piece_to_json(p));
  json j{{"schema_version", kSchemaVersion},
         {"system", system},
         {"regime", regime},
         {"dialog_id", dialog_id},
         {"turn", turn},
         {"context", context_to_json(context)},
         {"ranking", ranked},
         {"knowledge", know},
         {"knowledge_text", knowledge_text},
         {"knowledge_source", knowledge_source},
         {"decision", decision ? json(decision_name(*decision)) : json(nullptr)},
         {"decision_source", decision_source},
         {"decision_detail", decision_detail},
         {"api", api},
         {"prompt", prompt},
         {"response", response},
         {"truncated", truncated},
         {"warnings", warnings}};
  if (with_timings) j["timings_ms"] = timings_ms;
  return j;
}

TurnTrace TurnTrace::from_json(const json& j) {
  try {
    const int version = j.at("schema_version").get<int>();
    if (version != kSchemaVersion) {
      fail(ErrorCode::kParse, "unsupported trace schema_version " + std::to_string(version));
    }
    TurnTrace t;
    t.system = j.at("system").get<std::string>();
    t.regime = j.at("regime").get<std::string>();
    t.dialog_id = j.at("dialog_id").get<std::string>();
    t.turn = j.at("turn").get<int>();
    t.context = context_from_json(j.at("context"));
    for (const auto& r : j.at("ranking")) {
      t.ranking.push_back({r.at("id").get<std::string>(), parse_source(r.at("source").get<std::string>()),
                           r.at("probability").get<double>(), r.at("score").get<double>()});
    }
    for (const auto& p : j.at("knowledge")) t.knowledge.push_back(piece_from_json(p));
    t.knowledge_text = j.at("knowledge_text").get<std::string>();
    t.knowledge_source = j.value("knowledge_source", "");
    if (!j.at("decision").is_null()) t.decision = parse_decision(j.at("decision").get<std::string>());
    t.decision_source = j.value("decision_source", "");
    t.decision_detail = j.value("decision_detail", json::object());
    t.api = j.value("api", "");
    t.prompt = j.value("prompt", "");
    t.response = j.at("response").get<std::string>();
    t.truncated = j.value("truncated", false);
    t.warnings = j.value("warnings", std::vector<std::string>{});
    t.timings_ms = j.value("timings_ms", json::object());
    return t;
  } catch (const Error&) {
    throw;
  } catch (const std::exception& e) {
    fail(ErrorCode::kParse, std::string("malformed trace: ") + e.what());
  }
}

bool same_trace(const TurnTrace& a, const TurnTrace& b) { return a.to_json(false) == b.to_json(false); }

std::string replay_trace(const GeneratorBackend& generator, const TurnTrace& trace) {
  KnowledgeText h = format_knowledge(trace.knowledge);
  if (h.rendered != trace.knowledge_text) {
    fail(ErrorCode::kInvalidArgument, "trace knowledge text does not match its pieces");
  }
  return generator.generate(trace.context, h).response;
}

// --- overrides ----------------------------------------------------------------------

TurnOverrides TurnOverrides::from_json(const json& j) {
  TurnOverrides ov;
  if (j.is_null()) return ov;
  if (!j.is_object()) fail(ErrorCode::kParse, "overrides must be an object");
  for (const auto& [key, _] : j.items()) {
    if (key != "decision" && key != "piece_ids") {
      fail(ErrorCode::kParse, "unknown override '" + key + "' (expected decision, piece_ids)");
    }
  }
  if (j.contains("decision") && !j.at("decision").is_null()) {
    if (!j.at("decision").is_string()) fail(ErrorCode::kParse, "overrides.decision must be a string");
    ov.decision = parse_decision(j.at("decision").get<std::string>());
  }
  if (j.contains("piece_ids") && !j.at("piece_ids").is_null()) {
    const auto& ids = j.at("piece_ids");
    if (!ids.is_array()) fail(ErrorCode::kParse, "overrides.piece_ids must be an array of strings");
    std::vector<std::string> out;
    for (const auto& id : ids) {
      if (!id.is_string()) fail(ErrorCode::kParse, "overrides.piece_ids must be an array of strings");
      out.push_back(id.get<std::string>());
    }
    ov.piece_ids = std::move(out);
  }
  return ov;
}

std::vector<KnowledgePiece> resolve_pieces(const Dialog& dialog, const std::vector<std::string>& ids) {
  std::vector<KnowledgePiece> out;
  for (const auto& id : ids) {
    const KnowledgePiece* p = dialog.kb.find(id);
    if (!p) fail(ErrorCode::kNotFound, "piece '" + id + "' is not in the knowledge base of dialog " + dialog.id);
    out.push_back(*p);
  }
  return out;
}

// --- RAG ----------------------------------------------------------------------------

json RagConfig::to_json() const {
  return {{"k", k}, {"use_knowledge", use_knowledge}, {"oracle_knowledge", oracle_knowledge}};
}

RagSystem::RagSystem(std::shared_ptr<const RetrievalModel> retriever,
                     std::shared_ptr<const GeneratorBackend> generator, RagConfig cfg)
    : retriever_(std::move(retriever)), generator_(std::move(generator)), cfg_(cfg) {
  if (!generator_) fail(ErrorCode::kInvalidArgument, "RAG system needs a generator");
  if (cfg_.k < 1) fail(ErrorCode::kInvalidArgument, "RAG system needs k >= 1");
  if (cfg_.use_knowledge && !cfg_.oracle_knowledge && !retriever_) {
    fail(ErrorCode::kInvalidArgument, "retrieval mode needs a retriever");
  }
  if (retriever_) indexes_ = std::make_shared<IndexBuilder>(*retriever_, kAllSources);
}

void RagSystem::forget(const std::string& dialog_id) const {
  if (indexes_) indexes_->forget(dialog_id);
}

TurnResult RagSystem::respond(const Dialog& dialog, int t, const TurnOverrides& ov) const {
  TurnTrace tr;
  tr.system = system_name();
  tr.regime = regime();
  tr.dialog_id = dialog.id;
  tr.turn = t;
  tr.context = build_context(dialog, t);
  if (ov.decision) tr.warnings.push_back("decision override ignored by the " + tr.system + " system");

  const auto t0 = std::chrono::steady_clock::now();
  if (ov.piece_ids) {
    tr.knowledge = resolve_pieces(dialog, *ov.piece_ids);
    tr.knowledge_source = "override";
  } else if (!cfg_.use_knowledge) {
    tr.knowledge_source = "none";
  } else if (cfg_.oracle_knowledge) {
    for (const auto* p : dialog.gold_pieces(dialog.turns.at(static_cast<std::size_t>(t - 1)))) {
      tr.knowledge.push_back(*p);
    }
    tr.knowledge_source = "oracle";
  } else {
    auto index = indexes_->for_dialog(dialog);
    const auto ranked = rank_pieces(*index, retriever_->encode_context(tr.context));
    for (const auto& sp : ranked) {
      tr.ranking.push_back({sp.id, index->sources()[static_cast<std::size_t>(index->row_of(sp.id))],
                            sp.probability, sp.score});
    }
    for (std::size_t i = 0; i < ranked.size() && i < static_cast<std::size_t>(cfg_.k); ++i) {
      tr.knowledge.push_back(*dialog.kb.find(ranked[i].id));
    }
    tr.knowledge_source = "retrieved";
  }
  tr.timings_ms["retrieval"] = ms_since(t0);

  const KnowledgeText h = format_knowledge(tr.knowledge);
  tr.knowledge_text = h.rendered;
  const auto t1 = std::chrono::steady_clock::now();
  GeneratorOutput out = generator_->generate(tr.context, h);
  tr.timings_ms["generation"] = ms_since(t1);
  tr.prompt = std::move(out.prompt);
  tr.response = out.response;
  tr.truncated = out.truncated;
  return {std::move(out.response), std::move(tr)};
}

}  // namespace kaft
