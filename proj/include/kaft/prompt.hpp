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

// In-context-learning prompts for a remote LLM.

#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "kaft/corpus.hpp"
#include "kaft/generation.hpp"

namespace kaft {

struct PromptExample {
  std::string context;    // rendered dialog context
  std::string knowledge;  // rendered knowledge text (response prompts only)
  std::string answer;     // gold response or decision label
};

enum class PromptKind { kResponse, kDecision };

// Slot order: instruction, examples, then the live context (and knowledge)
// followed by an empty answer slot.
struct PromptTemplate {
  PromptKind kind = PromptKind::kResponse;
  std::string version = "v1";
  std::string instruction;
  std::vector<PromptExample> examples;

  nlohmann::json to_json() const;
  static PromptTemplate from_json(const nlohmann::json& j);
};

std::string default_response_instruction();
std::string default_decision_instruction();

// Label text the prompted decision maker is asked to produce.
const char* decision_prompt_label(Decision d);  // "No Search", "Search Product", ...

// Draws n_shot training turns with a seeded generator. Response examples carry
// the provider's knowledge for that turn. Fails with kInvalidArgument when
// fewer than n_shot turns are available.
PromptTemplate make_prompt_template(PromptKind kind, const std::vector<Dialog>& train, int n_shot,
                                    std::uint64_t seed,
                                    const KnowledgeProvider& provider = oracle_knowledge());

std::string build_prompt(const PromptTemplate& tpl, const Context& c, const KnowledgeText& h);
std::string build_decision_prompt(const PromptTemplate& tpl, const Context& c);

}  // namespace kaft
