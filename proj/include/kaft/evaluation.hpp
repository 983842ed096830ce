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

// Response metrics (BLEU, embedding similarity, inform rate, combined score)
// and teacher-forced evaluation of dialog systems.

#pragma once

#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "kaft/agent.hpp"
#include "kaft/corpus.hpp"
#include "kaft/nn.hpp"
#include "kaft/pipeline.hpp"
#include "kaft/retriever.hpp"

namespace kaft {

// Corpus-level 4-gram BLEU in [0, 100] over metric_tokens(). Uniform weights,
// brevity penalty, add-one smoothing for n >= 2, zero when no unigram matches.
double corpus_bleu(const std::vector<std::string>& references, const std::vector<std::string>& hypotheses);

// Per-token vectors for a text (one row per metric token, or any tokenization
// the embedder chooses).
class TokenEmbedder {
 public:
  virtual ~TokenEmbedder() = default;
  virtual nn::Matrix embed(const std::string& text) const = 0;
};

// Contextual states of a retriever's piece encoder.
class EncoderEmbedder : public TokenEmbedder {
 public:
  explicit EncoderEmbedder(std::shared_ptr<const RetrievalModel> model) : model_(std::move(model)) {}
  nn::Matrix embed(const std::string& text) const override;

 private:
  std::shared_ptr<const RetrievalModel> model_;
};

// Greedy-matching F1 of one pair; 0 when either side has no tokens.
double similarity_f1(const nn::Matrix& reference, const nn::Matrix& hypothesis);

// Mean pair F1 in [-1, 1].
double semantic_similarity(const std::vector<std::string>& references, const std::vector<std::string>& hypotheses,
                           const TokenEmbedder& embedder);

// True iff the normalized value occurs in the normalized text on token
// boundaries.
bool contains_value(const std::string& text, const std::string& value);

struct InformTurn {
  std::string gold_response;
  std::string generated;
  std::vector<std::string> gold_values;  // values of the turn's Z+ pieces
};

struct InformResult {
  double rate = 0.0;  // 0 when no turn is eligible
  std::size_t eligible = 0;
  std::size_t informed = 0;
};

// Turn-level: a turn is eligible when some gold value occurs in the gold
// response, and informed when all such values occur in the generated one.
std::optional<bool> turn_informed(const InformTurn& turn);
InformResult inform_rate(const std::vector<InformTurn>& turns);

// 0.5 * (bleu / 100 + sem) + inform; rejects components out of range.
double combined_score(double bleu, double sem, double inform);

struct EvalReport {
  static constexpr int kSchemaVersion = 1;

  std::string system;
  std::string regime;
  std::string setting;  // free-form arm label, e.g. "train=retrieved test=oracle"
  std::string split;
  double bleu = 0.0;
  double sem_score = 0.0;
  double inform = 0.0;
  double combined = 0.0;
  std::string inform_level = "turn";
  std::size_t inform_eligible = 0;
  std::map<int, double> recall;
  nlohmann::json decision_accuracy = nlohmann::json::object();
  std::size_t n_dialogs = 0;
  std::size_t n_turns = 0;
  nlohmann::json config = nlohmann::json::object();
  std::vector<std::uint64_t> seeds;
  std::string fingerprint;  // sha256 of config and seeds
  nlohmann::json per_dialog = nlohmann::json::array();

  nlohmann::json to_json() const;
  static EvalReport from_json(const nlohmann::json& j);
  void save(const std::filesystem::path& path) const;
  static EvalReport load(const std::filesystem::path& path);
};

std::string report_fingerprint(const nlohmann::json& config, const std::vector<std::uint64_t>& seeds);

struct EvalOptions {
  std::string split = "test";
  std::string setting;
  nlohmann::json config = nlohmann::json::object();
  std::vector<std::uint64_t> seeds;
  // When set, a failed evaluation writes the turns finished so far and the
  // error here before rethrowing.
  std::optional<std::filesystem::path> failure_manifest;
};

struct EvalRun {
  EvalReport report;
  std::vector<TurnTrace> traces;
};

// Generates every turn of every dialog from the gold history and scores it.
EvalRun evaluate_system(const DialogSystem& system, const std::vector<Dialog>& dialogs,
                        const TokenEmbedder& embedder, const EvalOptions& opts = {});

// Metrics of given responses against the gold ones, with no system involved.
EvalReport evaluate_responses(const std::vector<Dialog>& dialogs, const std::vector<std::string>& generated,
                              const TokenEmbedder& embedder);

// Method / Setting / BLEU / Sem / Inform / Score table. Rows with a non-empty
// error render as failed.
struct TableRow {
  std::string method;
  std::string setting;
  std::optional<EvalReport> report;
  std::string error;
};

std::string render_table(const std::vector<TableRow>& rows);

}  // namespace kaft
