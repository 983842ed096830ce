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

#include "kaft/prompt.hpp"

#include "kaft/error.hpp"
#include "kaft/rng.hpp"

namespace kaft {

using nlohmann::json;

std::string default_response_instruction() {
  return "You are a customer service agent of a mobile operator. Read the dialog context and the "
         "knowledge, then write the next reply of the agent. Use the knowledge when it is relevant "
         "and answer in one sentence.";
}

std::string default_decision_instruction() {
  return "You are a customer service agent of a mobile operator. Before replying you may search "
         "one knowledge source. The options are: No Search, Search Product, Search FAQ, Search "
         "Personal. Read the dialog context and answer with exactly one option on one line.";
}

const char* decision_prompt_label(Decision d) {
  switch (d) {
    case Decision::kNoSearch: return "No Search";
    case Decision::kSearchProduct: return "Search Product";
    case Decision::kSearchFaq: return "Search FAQ";
    case Decision::kSearchPersonal: return "Search Personal";
  }
  return "No Search";
}

json PromptTemplate::to_json() const {
  json ex = json::array();
  for (const auto& e : examples) {
    ex.push_back({{"context", e.context}, {"knowledge", e.knowledge}, {"answer", e.answer}});
  }
  return {{"kind", kind == PromptKind::kResponse ? "response" : "decision"},
          {"version", version},
          {"instruction", instruction},
          {"examples", ex}};
}

PromptTemplate PromptTemplate::from_json(const json& j) {
  PromptTemplate t;
  const std::string kind = j.value("kind", "response");
  if (kind != "response" && kind != "decision") fail(ErrorCode::kParse, "unknown prompt kind " + kind);
  t.kind = kind == "response" ? PromptKind::kResponse : PromptKind::kDecision;
  t.version = j.value("version", t.version);
  t.instruction = j.value("instruction", std::string());
  for (const auto& e : j.value("examples", json::array())) {
    t.examples.push_back({e.value("context", ""), e.value("knowledge", ""), e.value("answer", "")});
  }
  return t;
}

PromptTemplate make_prompt_template(PromptKind kind, const std::vector<Dialog>& train, int n_shot,
                                    std::uint64_t seed, const KnowledgeProvider& provider) {
  if (n_shot < 0) fail(ErrorCode::kInvalidArgument, "n_shot must be >= 0");
  std::vector<std::pair<const Dialog*, const Turn*>> turns;
  for (const auto& d : train) {
    for (const auto& t : d.turns) turns.emplace_back(&d, &t);
  }
  if (static_cast<std::size_t>(n_shot) > turns.size()) {
    fail(ErrorCode::kInvalidArgument, "n_shot " + std::to_string(n_shot) + " exceeds the " +
                                          std::to_string(turns.size()) + " available examples");
  }
  PromptTemplate tpl;
  tpl.kind = kind;
  tpl.instruction =
      kind == PromptKind::kResponse ? default_response_instruction() : default_decision_instruction();
  Rng rng(seed);
  // Partial Fisher-Yates: the first n_shot entries are the draw.
  for (int i = 0; i < n_shot; ++i) {
    const std::size_t j = static_cast<std::size_t>(i) + rng.uniform(turns.size() - static_cast<std::size_t>(i));
    std::swap(turns[static_cast<std::size_t>(i)], turns[j]);
    const auto [d, t] = turns[static_cast<std::size_t>(i)];
    PromptExample ex;
    ex.context = build_context(*d, t->index).rendered();
    if (kind == PromptKind::kResponse) {
      ex.knowledge = format_knowledge(provider(*d, *t)).rendered;
      ex.answer = t->response;
    } else {
      ex.answer = decision_prompt_label(t->decision);
    }
    tpl.examples.push_back(std::move(ex));
  }
  return tpl;
}

namespace {

void append_block(std::string& out, const PromptTemplate& tpl, const std::string& context,
                  const std::string& knowledge, const std::string& answer, bool live) {
  out += "Context:\n" + context + "\n";
  if (tpl.kind == PromptKind::kResponse) {
    out += "Knowledge:\n" + knowledge + "\n";
    out += live ? "Response:" : "Response: " + answer + "\n\n";
  } else {
    out += live ? "Decision:" : "Decision: " + answer + "\n\n";
  }
}

std::string render(const PromptTemplate& tpl, const std::string& context, const std::string& knowledge) {
  std::string out = tpl.instruction + "\n\n";
  for (std::size_t i = 0; i < tpl.examples.size(); ++i) {
    out += "Example " + std::to_string(i + 1) + ":\n";
    const auto& e = tpl.examples[i];
    append_block(out, tpl, e.context, e.knowledge, e.answer, false);
  }
  append_block(out, tpl, context, knowledge, "", true);
  return out;
}

}  // namespace

std::string build_prompt(const PromptTemplate& tpl, const Context& c, const KnowledgeText& h) {
  if (tpl.kind != PromptKind::kResponse) {
    fail(ErrorCode::kInvalidArgument, "build_prompt needs a response template");
  }
  return render(tpl, c.rendered(), h.rendered);
}

std::string build_decision_prompt(const PromptTemplate& tpl, const Context& c) {
  if (tpl.kind != PromptKind::kDecision) {
    fail(ErrorCode::kInvalidArgument, "build_decision_prompt needs a decision template");
  }
  return render(tpl, c.rendered(), "");
}

}  // namespace kaft
