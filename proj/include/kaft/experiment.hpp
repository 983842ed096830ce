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

// Checkpoint bundles, system assembly and the experiment runner.
//
// A bundle is a directory of checkpoints trained from one corpus and one
// seed:
//
//   bundle.json          resolved BundleConfig
//   retriever.kaft       all-source retriever (RAG)
//   product_api.kaft     Product API retriever (agent)
//   faq_api.kaft         FAQ API retriever (agent)
//   generator-<k>.kaft   generator trained with knowledge provider <k>
//   decision.kaft        finetuned decision maker

#pragma once

#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "kaft/agent.hpp"
#include "kaft/corpus.hpp"
#include "kaft/evaluation.hpp"
#include "kaft/generation.hpp"
#include "kaft/llm_client.hpp"
#include "kaft/pipeline.hpp"
#include "kaft/retriever.hpp"

namespace kaft {

struct BundleConfig {
  std::uint64_t seed = 1;
  RetrieverConfig retriever;
  RetrieverTrainConfig retriever_train;
  GeneratorConfig generator;
  LMTrainConfig generator_train;
  nn::TransformerConfig decision{.vocab = 0, .dim = 64, .heads = 4, .ff = 128, .layers = 2, .max_len = 64,
                                 .position = "alibi"};
  int decision_context_budget = 48;
  LMTrainConfig decision_train;
  int k = 3;
  int n_shot = 5;
  LLMClientConfig llm;
  DecodeConfig decode;

  BundleConfig();
  nlohmann::json to_json() const;
  static BundleConfig from_json(const nlohmann::json& j);
};

// Retriever flavours stored in a bundle.
enum class RetrieverRole { kAll, kProduct, kFaq };
RetrieverRole parse_retriever_role(const std::string& s);  // "all" | "product" | "faq"
const char* retriever_role_name(RetrieverRole r);

// Knowledge providers a bundle's generators can be trained with.
// "none" | "retrieved" | "oracle" | "agent" (predicted decisions) | "agent-gold"
bool valid_generator_knowledge(const std::string& k);

class Bundle {
 public:
  // Creates the directory and writes bundle.json, or checks that an existing
  // bundle.json matches `cfg` (kConflict otherwise).
  static Bundle create(const std::filesystem::path& dir, const BundleConfig& cfg);
  static Bundle open(const std::filesystem::path& dir);

  const std::filesystem::path& dir() const { return dir_; }
  const BundleConfig& config() const { return cfg_; }

  std::filesystem::path retriever_path(RetrieverRole role) const;
  std::filesystem::path generator_path(const std::string& knowledge) const;
  std::filesystem::path decision_path() const;

  bool has_retriever(RetrieverRole role) const;
  bool has_generator(const std::string& knowledge) const;
  bool has_decision() const;

  // Loaded once and shared.
  std::shared_ptr<const RetrievalModel> retriever(RetrieverRole role) const;
  std::shared_ptr<const LocalCausalLM> generator(const std::string& knowledge) const;
  std::shared_ptr<const LocalCausalLM> decision_lm() const;

 private:
  Bundle(std::filesystem::path dir, BundleConfig cfg);

  std::filesystem::path dir_;
  BundleConfig cfg_;
  struct Cache {
    std::mutex mu;
    std::map<std::string, std::shared_ptr<const RetrievalModel>> retrievers;
    std::map<std::string, std::shared_ptr<const LocalCausalLM>> lms;
  };
  std::shared_ptr<Cache> cache_;
};

// Vocabulary shared by every model of a bundle.
std::shared_ptr<const Tokenizer> bundle_tokenizer(const CorpusSplits& corpus);

struct StepResult {
  TrainCurve curve;
  nlohmann::json metrics = nlohmann::json::object();  // recall, decision accuracy
  double seconds = 0.0;
  nlohmann::json to_json() const;
};

StepResult train_retriever_step(const Bundle& bundle, const CorpusSplits& corpus, RetrieverRole role,
                                const std::vector<int>& recall_ks = {1, 3, 5});
// "retrieved" and "agent*" need the matching retrievers (and the decision
// maker for "agent") in the bundle already.
StepResult train_generator_step(const Bundle& bundle, const CorpusSplits& corpus, const std::string& knowledge);
StepResult train_decision_step(const Bundle& bundle, const CorpusSplits& corpus);

// What a system is assembled from.
struct SystemSpec {
  std::string system = "rag";            // "direct" | "rag" | "agent"
  std::string regime = "kaft";           // "kaft" | "prompt-0shot" | "prompt-nshot"
  std::string train_knowledge;           // generator checkpoint; defaults per system
  std::string test_knowledge = "model";  // rag: "retrieved" | "oracle"; agent: "model" | "gold"

  void resolve();  // fills defaults and validates
  std::string label() const;
  nlohmann::json to_json() const;
  static SystemSpec from_json(const nlohmann::json& j);
};

// Builds a dialog system from bundle checkpoints. Prompted regimes use
// `client` and draw their in-context examples from `corpus.train`.
std::shared_ptr<DialogSystem> build_system(const Bundle& bundle, const CorpusSplits& corpus, SystemSpec spec,
                                           std::shared_ptr<RemoteLLMClient> client);

std::shared_ptr<RemoteLLMClient> make_llm_client(const LLMClientConfig& cfg);

// --- experiments ------------------------------------------------------------------

struct ExperimentConfig {
  SynthSpec synth;
  std::uint64_t corpus_seed = 7;
  std::string corpus_path;  // load this corpus instead of synthesizing one
  BundleConfig bundle;      // bundle.seed is replaced by each run seed
  std::vector<SystemSpec> arms;
  std::vector<std::uint64_t> seeds{1, 2, 3};
  std::string split = "test";
  std::vector<int> recall_ks{1, 3, 5};

  nlohmann::json to_json() const;
  static ExperimentConfig from_json(const nlohmann::json& j);
  // sha256 of to_json(); names the output directory.
  std::string hash() const;
};

struct ArmResult {
  SystemSpec spec;
  std::uint64_t seed = 0;
  std::optional<EvalReport> report;
  std::string error;
};

struct ExperimentResult {
  std::filesystem::path dir;
  std::vector<ArmResult> arms;
  std::map<std::uint64_t, nlohmann::json> steps;  // training summaries per seed
  std::string table;

  nlohmann::json to_json() const;
  // Report of an arm label for one seed, or nullptr when absent or failed.
  const EvalReport* find(const std::string& label, std::uint64_t seed) const;
};

using ProgressFn = std::function<void(const std::string&)>;

// Runs every arm for every seed under <root>/exp-<hash prefix>. An existing
// directory with a different manifest, or a differing prior report, is a
// kConflict. A failing arm is recorded and the remaining arms still run.
ExperimentResult run_experiment(const ExperimentConfig& cfg, const std::filesystem::path& root,
                                const ProgressFn& progress = {});

std::string render_experiment_table(const std::vector<ArmResult>& arms);

}  // namespace kaft
