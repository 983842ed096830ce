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

// Local knowledge-augmented generator.
//
// Training sequences are laid out as
//
//   [BOS] [KNOW] h [CTX] c [RESP] r [END]
//
// and the loss covers only the positions that predict r and [END].

#pragma once

#include <filesystem>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "json.hpp"
#include "kaft/corpus.hpp"
#include "kaft/nn.hpp"
#include "kaft/retriever.hpp"
#include "kaft/text.hpp"
#include "kaft/transformer.hpp"

namespace kaft {

struct KnowledgeText {
  std::vector<KnowledgePiece> pieces;
  std::string rendered;
};

inline constexpr const char* kNoKnowledge = "[no knowledge]";

// "<k1> title: body" lines joined by '\n'; "[no knowledge]" when empty.
KnowledgeText format_knowledge(std::vector<KnowledgePiece> pieces);
KnowledgeText format_knowledge(const std::vector<const KnowledgePiece*>& pieces);

// Words the local models need beyond the corpus text (knowledge markers,
// decision labels).
std::vector<std::string> model_vocab_extras();

// Decoder-only LM with the output head tied to the token embeddings.
class LocalCausalLM {
 public:
  LocalCausalLM(std::shared_ptr<const Tokenizer> tokenizer, nn::TransformerConfig cfg,
                std::uint64_t seed);

  const nn::TransformerConfig& config() const { return stack_.config(); }
  const Tokenizer& tokenizer() const { return *tokenizer_; }
  std::shared_ptr<const Tokenizer> tokenizer_ptr() const { return tokenizer_; }
  nn::ParameterSet& params() { return params_; }
  const nn::ParameterSet& params() const { return params_; }
  int max_len() const { return stack_.config().max_len; }

  nn::Var logits(nn::Tape& tape, const std::vector<int>& ids,
                 const nn::Dropout& drop = {}) const;  // T×vocab
  nn::Matrix infer_logits(const std::vector<int>& ids) const;

  // Feeds `ids` through the cache and returns next-token log-probabilities
  // after the last of them.
  nn::RowVector step(nn::KvCache& cache, const std::vector<int>& ids) const;

  // Σ log p(continuation | prefix), with the cache already holding the prefix.
  // The cache is copied, not modified.
  double continuation_logprob(const nn::KvCache& prefix_cache, const nn::RowVector& next_logp,
                              const std::vector<int>& continuation) const;

  void save(const std::filesystem::path& path, const std::string& kind) const;
  static LocalCausalLM load(const std::filesystem::path& path, const std::string& kind);

 private:
  std::shared_ptr<const Tokenizer> tokenizer_;
  nn::ParameterSet params_;
  nn::TransformerStack stack_;
  std::size_t head_b_ = 0;
};

// One teacher-forced example: inputs[i] predicts targets[i].
struct LMExample {
  std::vector<int> inputs;
  std::vector<int> targets;
  std::vector<std::uint8_t> mask;
};

// prefix + continuation + [END]; mask covers continuation and [END].
LMExample make_lm_example(const std::vector<int>& prefix, const std::vector<int>& continuation);

nn::Var lm_example_loss(nn::Tape& tape, const LocalCausalLM& lm, const LMExample& ex,
                        const nn::Dropout& drop = {});

struct GeneratorConfig {
  nn::TransformerConfig body{.vocab = 0, .dim = 64, .heads = 4, .ff = 128, .layers = 2,
                            .max_len = 192, .position = "alibi"};
  // Tokenizer tokens of dialog context kept before the oldest segments are dropped.
  int context_budget = 48;
  // Chance that a training turn with two or more pieces keeps only a random
  // nonempty proper prefix of them, so the generator also sees short h.
  double knowledge_subset_prob = 0.5;

  nlohmann::json to_json() const;
  static GeneratorConfig from_json(const nlohmann::json& j);
};

// [BOS] [KNOW] h [CTX] c [RESP]. Oldest context segments go first; the
// knowledge and the final user utterance are never dropped. Fails with
// kInvalidArgument when even that does not fit in `max_tokens`.
std::vector<int> generator_prefix(const Tokenizer& tok, const Context& c, const KnowledgeText& h,
                                  int context_budget, int max_tokens, bool* truncated = nullptr);

// Knowledge for a training or evaluation turn.
using KnowledgeProvider =
    std::function<std::vector<KnowledgePiece>(const Dialog& dialog, const Turn& turn)>;

KnowledgeProvider oracle_knowledge();
KnowledgeProvider no_knowledge();
// Top-k of a trained retriever over the dialog's KB_X.
KnowledgeProvider retrieved_knowledge(std::shared_ptr<const RetrievalModel> model,
                                      std::shared_ptr<IndexBuilder> indexes, int k);

struct LMTrainConfig {
  int epochs = 20;
  int batch_size = 16;
  nn::OptimizerConfig optimizer{"adam", 3e-3, 0.9, 0.9, 0.999, 1e-8, 1.0};
  double dropout = 0.0;
  std::uint64_t seed = 1;
  bool verbose = false;

  nlohmann::json to_json() const;
  static LMTrainConfig from_json(const nlohmann::json& j);
};

// Mean masked NLL per example, before and after each epoch.
TrainCurve finetune_lm(LocalCausalLM& lm, const std::vector<LMExample>& examples,
                       const LMTrainConfig& cfg, const std::string& what = "generator");

double mean_lm_loss(const LocalCausalLM& lm, const std::vector<LMExample>& examples);

// Builds one example per training turn. The provider is called exactly once
// per turn, before any update. `seed` drives the knowledge subsetting.
std::vector<LMExample> generator_examples(const LocalCausalLM& lm, const GeneratorConfig& gcfg,
                                          const std::vector<Dialog>& dialogs,
                                          const KnowledgeProvider& provider, std::uint64_t seed = 1);

TrainCurve finetune_generator(LocalCausalLM& lm, const GeneratorConfig& gcfg,
                              const CorpusSplits& corpus, const KnowledgeProvider& provider,
                              const LMTrainConfig& cfg);

struct DecodeConfig {
  int max_new_tokens = 64;
};

struct GenerationResult {
  std::string text;
  bool truncated = false;  // context segments were dropped to fit
};

GenerationResult generate_response(const LocalCausalLM& lm, const GeneratorConfig& gcfg,
                                   const Context& c, const KnowledgeText& h,
                                   const DecodeConfig& decode = {});

}  // namespace kaft
