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

// Dual-encoder knowledge retrieval.
//
// p(z_i | c) ∝ exp(piece(z_i)ᵀ context(c)), normalized over the pieces of an
// index. Only the context encoder is trained; the piece encoder stays frozen
// so piece embeddings can be computed once and reused.

#pragma once

#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

#include "json.hpp"
#include "kaft/corpus.hpp"
#include "kaft/nn.hpp"
#include "kaft/text.hpp"
#include "kaft/transformer.hpp"

namespace kaft {

struct EncoderConfig {
  nn::TransformerConfig body;  // vocab is filled from the tokenizer
  int out_dim = 64;

  nlohmann::json to_json() const;
  static EncoderConfig from_json(const nlohmann::json& j);
};

// Bidirectional transformer, mean-pooled, followed by a linear projection.
// Input sequences are "[BOS] tokens..." clipped to max_len.
class TextEncoder {
 public:
  TextEncoder(std::shared_ptr<const Tokenizer> tokenizer, EncoderConfig cfg, std::uint64_t seed);
  TextEncoder(const TextEncoder& other);
  TextEncoder& operator=(const TextEncoder& other);

  const EncoderConfig& config() const { return cfg_; }
  const Tokenizer& tokenizer() const { return *tokenizer_; }
  std::shared_ptr<const Tokenizer> tokenizer_ptr() const { return tokenizer_; }
  nn::ParameterSet& params() { return params_; }
  const nn::ParameterSet& params() const { return params_; }
  std::size_t projection_slot() const { return proj_; }

  // keep_tail keeps the most recent tokens when clipping (contexts); pieces
  // keep their head.
  std::vector<int> ids(const std::string& text, bool keep_tail) const;

  nn::Var forward(nn::Tape& tape, const std::vector<int>& ids) const;  // 1×out_dim
  nn::RowVector encode(const std::string& text, bool keep_tail = false) const;
  // Contextual token vectors (final-layer states, [BOS] dropped), T×dim.
  nn::Matrix token_embeddings(const std::string& text) const;

 private:
  std::shared_ptr<const Tokenizer> tokenizer_;
  EncoderConfig cfg_;
  nn::ParameterSet params_;
  nn::TransformerStack stack_;
  std::size_t proj_ = 0;
  std::size_t proj_b_ = 0;
};

struct RetrieverConfig {
  EncoderConfig encoder;
  std::size_t context_budget = 512;  // metric tokens of dialog context fed to the encoder

  nlohmann::json to_json() const;
  static RetrieverConfig from_json(const nlohmann::json& j);
};

class RetrievalModel {
 public:
  // Both encoders start from the same random initialization.
  RetrievalModel(std::shared_ptr<const Tokenizer> tokenizer, RetrieverConfig cfg,
                 std::uint64_t seed);

  const RetrieverConfig& config() const { return cfg_; }
  TextEncoder& context_encoder() { return context_; }
  const TextEncoder& context_encoder() const { return context_; }
  const TextEncoder& piece_encoder() const { return piece_; }
  const Tokenizer& tokenizer() const { return context_.tokenizer(); }

  nn::RowVector encode_context(const Context& c) const;
  nn::RowVector encode_piece(const KnowledgePiece& p) const;

  void save(const std::filesystem::path& path) const;
  static RetrievalModel load(const std::filesystem::path& path);

 private:
  RetrievalModel(RetrieverConfig cfg, TextEncoder context, TextEncoder piece);

  RetrieverConfig cfg_;
  TextEncoder context_;
  TextEncoder piece_;
};

// Immutable piece-embedding matrix; row i belongs to piece_ids()[i].
class RetrievalIndex {
 public:
  RetrievalIndex(std::vector<std::string> ids, std::vector<Source> sources,
                 nn::Matrix embeddings, std::set<Source> scope);

  static RetrievalIndex build(const RetrievalModel& model,
                              const std::vector<const KnowledgePiece*>& pieces,
                              std::set<Source> scope);

  const std::vector<std::string>& piece_ids() const { return ids_; }
  const std::vector<Source>& sources() const { return sources_; }
  const nn::Matrix& embeddings() const { return emb_; }
  const std::set<Source>& scope() const { return scope_; }
  std::size_t size() const { return ids_.size(); }
  bool empty() const { return ids_.empty(); }
  // Row of a piece id, or -1.
  int row_of(const std::string& id) const;

  // ids + float32 matrix.
  void save(const std::filesystem::path& path) const;
  static RetrievalIndex load(const std::filesystem::path& path);

 private:
  std::vector<std::string> ids_;
  std::vector<Source> sources_;
  nn::Matrix emb_;
  std::set<Source> scope_;
  std::unordered_map<std::string, int> rows_;
};

inline const std::set<Source> kAllSources = {Source::kUser, Source::kFaq, Source::kProduct};

// Builds per-dialog indexes over KB_X (restricted to a scope). Global FAQ and
// product embeddings are computed once; user pieces per dialog. Thread-safe.
class IndexBuilder {
 public:
  IndexBuilder(const RetrievalModel& model, std::set<Source> scope);

  std::shared_ptr<const RetrievalIndex> for_dialog(const Dialog& dialog);
  void forget(const std::string& dialog_id);
  const std::set<Source>& scope() const { return scope_; }

 private:
  const RetrievalModel& model_;
  std::set<Source> scope_;
  std::mutex mu_;
  std::unordered_map<std::string, nn::RowVector> global_rows_;
  std::unordered_map<std::string, std::shared_ptr<const RetrievalIndex>> per_dialog_;
};

struct ScoredPiece {
  std::string id;
  double probability = 0.0;
  double score = 0.0;
};

// Softmax of scores; throws kInvalidArgument on an empty index.
std::vector<double> retrieval_distribution(const RetrievalModel& model,
                                           const RetrievalIndex& index, const Context& c);
std::vector<double> softmax(const std::vector<double>& scores);
std::vector<double> index_scores(const RetrievalIndex& index, const nn::RowVector& query);

// Ranked by probability (equivalently raw score), ties to the smaller id.
std::vector<ScoredPiece> rank_pieces(const RetrievalIndex& index, const nn::RowVector& query);
std::vector<ScoredPiece> retrieve_topk(const RetrievalModel& model, const RetrievalIndex& index,
                                       const Context& c, int k);

struct RetrieverTrainConfig {
  int epochs = 30;
  int batch_size = 16;
  nn::OptimizerConfig optimizer{"sgd", 0.05, 0.9};
  std::uint64_t seed = 1;
  // Softmax normalization set and training-turn filter. An API retriever
  // uses scope {PRODUCT} and decision SEARCH_PRODUCT, for example.
  std::set<Source> scope = kAllSources;
  std::optional<Decision> decision_filter;
  bool verbose = false;

  nlohmann::json to_json() const;
  static RetrieverTrainConfig from_json(const nlohmann::json& j);
};

struct TrainCurve {
  double initial_loss = 0.0;          // mean loss over the train set before any update
  std::vector<double> epoch_loss;     // running mean loss of each epoch
  double final_loss = 0.0;            // mean loss over the train set after training
  std::size_t examples = 0;
  nlohmann::json to_json() const;
};

TrainCurve train_retriever(RetrievalModel& model, const CorpusSplits& corpus,
                           const RetrieverTrainConfig& cfg);

// Mean L_ret over the corpus turns that match the config; used for the
// loss curve and by tests.
double retriever_loss(const RetrievalModel& model, const std::vector<Dialog>& dialogs,
                      const RetrieverTrainConfig& cfg);

// Loss of one example through the tape; exposed for gradient checks.
nn::Var retriever_example_loss(nn::Tape& tape, const RetrievalModel& model,
                               const Context& c, const nn::Matrix& piece_embeddings,
                               const std::vector<int>& positive_rows);

struct RecallReport {
  std::map<int, double> recall;
  std::size_t evaluated = 0;
  std::size_t excluded = 0;  // turns with empty Z+ (or outside the decision filter)
  nlohmann::json to_json() const;
};

// best_rank[i] is the 1-based rank of the best-ranked gold piece of query i
// (0 when no gold piece is in the index).
RecallReport recall_from_ranks(const std::vector<int>& best_rank, const std::vector<int>& ks);

RecallReport recall_at_k(const RetrievalModel& model, IndexBuilder& indexes,
                         const std::vector<Dialog>& dialogs, const std::vector<int>& ks,
                         std::optional<Decision> decision_filter = std::nullopt);

}  // namespace kaft
