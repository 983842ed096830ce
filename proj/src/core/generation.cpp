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

#include "kaft/generation.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <sstream>

#include "kaft/archive.hpp"
#include "kaft/error.hpp"
#include "kaft/rng.hpp"

namespace kaft {

using nlohmann::json;

// --- knowledge text -------------------------------------------------------------

KnowledgeText format_knowledge(std::vector<KnowledgePiece> pieces) {
  KnowledgeText h;
  h.pieces = std::move(pieces);
  if (h.pieces.empty()) {
    h.rendered = kNoKnowledge;
    return h;
  }
  for (std::size_t i = 0; i < h.pieces.size(); ++i) {
    if (i) h.rendered += '\n';
    h.rendered += "<k" + std::to_string(i + 1) + "> " + h.pieces[i].title + ": " + h.pieces[i].body;
  }
  return h;
}

KnowledgeText format_knowledge(const std::vector<const KnowledgePiece*>& pieces) {
  std::vector<KnowledgePiece> copy;
  copy.reserve(pieces.size());
  for (const auto* p : pieces) copy.push_back(*p);
  return format_knowledge(std::move(copy));
}

std::vector<std::string> model_vocab_extras() {
  std::vector<std::string> out{kNoKnowledge};
  std::string markers;
  for (int i = 1; i <= 12; ++i) markers += "<k" + std::to_string(i) + "> ";
  out.push_back(markers);
  out.push_back("no search search product search faq search personal");
  return out;
}

// --- LM ---------------------------------------------------------------------------

LocalCausalLM::LocalCausalLM(std::shared_ptr<const Tokenizer> tokenizer, nn::TransformerConfig cfg,
                             std::uint64_t seed)
    : tokenizer_(std::move(tokenizer)) {
  cfg.vocab = tokenizer_->size();
  Rng rng(seed);
  stack_ = nn::TransformerStack(cfg, params_, "lm", rng);
  head_b_ = params_.add("lm.head_b", nn::constant_matrix(1, cfg.vocab, 0.0));
}

nn::Var LocalCausalLM::logits(nn::Tape& tape, const std::vector<int>& ids,
                              const nn::Dropout& drop) const {
  nn::Var h = stack_.forward(tape, params_, ids, /*causal=*/true, drop);
  nn::Var e = tape.param(params_, stack_.token_embedding_slot());
  return tape.add_row(tape.matmul_bt(h, e), tape.param(params_, head_b_));
}

nn::Matrix LocalCausalLM::infer_logits(const std::vector<int>& ids) const {
  nn::Matrix h = stack_.infer(params_, ids, /*causal=*/true);
  nn::Matrix out = h * params_[stack_.token_embedding_slot()].value.transpose();
  out.rowwise() += params_[head_b_].value.row(0);
  return out;
}

namespace {

nn::RowVector log_softmax(const nn::RowVector& z) {
  const double mx = z.maxCoeff();
  const double lse = mx + std::log((z.array() - mx).exp().sum());
  return z.array() - lse;
}

}  // namespace

nn::RowVector LocalCausalLM::step(nn::KvCache& cache, const std::vector<int>& ids) const {
  nn::Matrix h = stack_.infer_incremental(params_, cache, ids);
  nn::RowVector z = h.row(h.rows() - 1) * params_[stack_.token_embedding_slot()].value.transpose() +
                    params_[head_b_].value.row(0);
  return log_softmax(z);
}

double LocalCausalLM::continuation_logprob(const nn::KvCache& prefix_cache,
                                           const nn::RowVector& next_logp,
                                           const std::vector<int>& continuation) const {
  nn::KvCache cache = prefix_cache;
  nn::RowVector logp = next_logp;
  double total = 0.0;
  for (std::size_t i = 0; i < continuation.size(); ++i) {
    total += logp(continuation[i]);
    if (i + 1 < continuation.size()) logp = step(cache, {continuation[i]});
  }
  return total;
}

void LocalCausalLM::save(const std::filesystem::path& path, const std::string& kind) const {
  json header{{"kind", kind}, {"config", config().to_json()}, {"vocab", tokenizer_->tokens()}};
  write_archive(path, header, {&params_});
}

LocalCausalLM LocalCausalLM::load(const std::filesystem::path& path, const std::string& kind) {
  ArchiveReader r = read_archive(path);
  if (r.header.value("kind", "") != kind) {
    fail(ErrorCode::kParse, path.string() + " holds a '" + r.header.value("kind", "") +
                                "' archive, expected '" + kind + "'");
  }
  if (r.sections.size() != 1) fail(ErrorCode::kParse, path.string() + ": expected 1 section");
  auto tok = std::make_shared<const Tokenizer>(
      Tokenizer::from_tokens(r.header.at("vocab").get<std::vector<std::string>>()));
  LocalCausalLM lm(tok, nn::TransformerConfig::from_json(r.header.at("config")), 0);
  std::istringstream in(r.sections[0], std::ios::binary);
  lm.params_.read(in);
  return lm;
}

// --- examples ----------------------------------------------------------------------

LMExample make_lm_example(const std::vector<int>& prefix, const std::vector<int>& continuation) {
  if (prefix.empty()) fail(ErrorCode::kInvalidArgument, "LM example needs a nonempty prefix");
  std::vector<int> seq = prefix;
  seq.insert(seq.end(), continuation.begin(), continuation.end());
  seq.push_back(Tokenizer::kEnd);
  LMExample ex;
  ex.inputs.assign(seq.begin(), seq.end() - 1);
  ex.targets.assign(seq.begin() + 1, seq.end());
  ex.mask.resize(ex.inputs.size());
  for (std::size_t i = 0; i < ex.mask.size(); ++i) ex.mask[i] = (i + 1 >= prefix.size()) ? 1 : 0;
  return ex;
}

nn::Var lm_example_loss(nn::Tape& tape, const LocalCausalLM& lm, const LMExample& ex,
                        const nn::Dropout& drop) {
  return tape.masked_cross_entropy(lm.logits(tape, ex.inputs, drop), ex.targets, ex.mask);
}

json GeneratorConfig::to_json() const {
  return {{"body", body.to_json()},
          {"context_budget", context_budget},
          {"knowledge_subset_prob", knowledge_subset_prob}};
}

GeneratorConfig GeneratorConfig::from_json(const json& j) {
  GeneratorConfig c;
  if (j.contains("body")) c.body = nn::TransformerConfig::from_json(j.at("body"));
  c.context_budget = j.value("context_budget", c.context_budget);
  c.knowledge_subset_prob = j.value("knowledge_subset_prob", c.knowledge_subset_prob);
  if (c.knowledge_subset_prob < 0.0 || c.knowledge_subset_prob > 1.0) {
    fail(ErrorCode::kInvalidArgument, "knowledge_subset_prob must be in [0, 1]");
  }
  return c;
}

std::vector<int> generator_prefix(const Tokenizer& tok, const Context& c, const KnowledgeText& h,
                                  int context_budget, int max_tokens, bool* truncated) {
  const std::vector<int> know = tok.encode(h.rendered);
  const auto& segs = c.segments();
  if (segs.empty()) fail(ErrorCode::kInvalidArgument, "empty dialog context");
  // Drop whole segments from the front while over budget; the last one stays.
  std::size_t first = 0;
  std::vector<int> ctx;
  for (;; ++first) {
    Context kept(std::vector<Segment>(segs.begin() + static_cast<std::ptrdiff_t>(first), segs.end()),
                 c.markers());
    ctx = tok.encode(kept.rendered());
    const bool over_budget = static_cast<int>(ctx.size()) > context_budget;
    const bool over_total = static_cast<int>(know.size() + ctx.size() + 4) > max_tokens;
    if ((!over_budget && !over_total) || first + 1 == segs.size()) break;
  }
  if (truncated) *truncated = first > 0;
  std::vector<int> ids{Tokenizer::kBos, Tokenizer::kKnowledge};
  ids.insert(ids.end(), know.begin(), know.end());
  ids.push_back(Tokenizer::kContext);
  ids.insert(ids.end(), ctx.begin(), ctx.end());
  ids.push_back(Tokenizer::kResponse);
  if (static_cast<int>(ids.size()) > max_tokens) {
    fail(ErrorCode::kInvalidArgument,
         "knowledge plus final user utterance need " + std::to_string(ids.size()) +
             " tokens, more than the " + std::to_string(max_tokens) + " available");
  }
  return ids;
}

KnowledgeProvider oracle_knowledge() {
  return [](const Dialog& d, const Turn& t) {
    std::vector<KnowledgePiece> out;
    for (const auto* p : d.gold_pieces(t)) out.push_back(*p);
    return out;
  };
}

KnowledgeProvider no_knowledge() {
  return [](const Dialog&, const Turn&) { return std::vector<KnowledgePiece>{}; };
}

KnowledgeProvider retrieved_knowledge(std::shared_ptr<const RetrievalModel> model,
                                      std::shared_ptr<IndexBuilder> indexes, int k) {
  return [model, indexes, k](const Dialog& d, const Turn& t) {
    auto index = indexes->for_dialog(d);
    std::vector<KnowledgePiece> out;
    for (const auto& sp : retrieve_topk(*model, *index, build_context(d, t.index), k)) {
      out.push_back(*d.kb.find(sp.id));
    }
    return out;
  };
}

// --- training ----------------------------------------------------------------------

json LMTrainConfig::to_json() const {
  return {{"epochs", epochs},
          {"batch_size", batch_size},
          {"optimizer", optimizer.to_json()},
          {"dropout", dropout},
          {"seed", seed}};
}

LMTrainConfig LMTrainConfig::from_json(const json& j) {
  LMTrainConfig c;
  c.epochs = j.value("epochs", c.epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  if (j.contains("optimizer")) c.optimizer = nn::OptimizerConfig::from_json(j.at("optimizer"), c.optimizer);
  c.dropout = j.value("dropout", c.dropout);
  if (c.dropout < 0.0 || c.dropout >= 1.0) fail(ErrorCode::kInvalidArgument, "dropout must be in [0, 1)");
  c.seed = j.value("seed", c.seed);
  c.verbose = j.value("verbose", c.verbose);
  return c;
}

double mean_lm_loss(const LocalCausalLM& lm, const std::vector<LMExample>& examples) {
  if (examples.empty()) return 0.0;
  double total = 0.0;
  for (const auto& ex : examples) {
    const nn::Matrix z = lm.infer_logits(ex.inputs);
    double sum = 0.0;
    int n = 0;
    for (std::size_t i = 0; i < ex.targets.size(); ++i) {
      if (!ex.mask[i]) continue;
      sum -= log_softmax(z.row(static_cast<Eigen::Index>(i)))(ex.targets[i]);
      ++n;
    }
    total += n ? sum / n : 0.0;
  }
  return total / static_cast<double>(examples.size());
}

TrainCurve finetune_lm(LocalCausalLM& lm, const std::vector<LMExample>& examples,
                       const LMTrainConfig& cfg, const std::string& what) {
  if (cfg.epochs < 0 || cfg.batch_size < 1) {
    fail(ErrorCode::kInvalidArgument, what + " training needs epochs >= 0 and batch_size >= 1");
  }
  if (examples.empty()) fail(ErrorCode::kTraining, what + " training has no examples");
  for (const auto& ex : examples) {
    if (static_cast<int>(ex.inputs.size()) > lm.max_len()) {
      fail(ErrorCode::kTraining, what + " example of " + std::to_string(ex.inputs.size()) +
                                     " tokens exceeds max_len " + std::to_string(lm.max_len()));
    }
  }
  TrainCurve curve;
  curve.examples = examples.size();
  curve.initial_loss = mean_lm_loss(lm, examples);

  nn::ParameterSet& params = lm.params();
  nn::Optimizer opt(params, cfg.optimizer);
  nn::Gradients grads(params);
  Rng rng(cfg.seed);
  Rng drop_rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);
  const nn::Dropout drop{cfg.dropout, &drop_rng};
  std::vector<std::size_t> order(examples.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  const auto batch = static_cast<std::size_t>(cfg.batch_size);

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    rng.shuffle(order);
    double epoch_total = 0.0;
    for (std::size_t start = 0; start < order.size(); start += batch) {
      const std::size_t end = std::min(order.size(), start + batch);
      grads.zero();
      for (std::size_t i = start; i < end; ++i) {
        nn::Tape tape(&grads);
        nn::Var loss = lm_example_loss(tape, lm, examples[order[i]], drop);
        const double value = tape.scalar(loss);
        if (!std::isfinite(value)) {
          fail(ErrorCode::kTraining, "non-finite " + what + " loss at epoch " +
                                         std::to_string(epoch + 1) + ", example " +
                                         std::to_string(order[i]));
        }
        epoch_total += value;
        tape.backward(loss);
      }
      grads.scale(1.0 / static_cast<double>(end - start));
      if (!grads.all_finite()) {
        fail(ErrorCode::kTraining, "non-finite " + what + " gradient at epoch " + std::to_string(epoch + 1));
      }
      opt.step(params, grads, {});
    }
    curve.epoch_loss.push_back(epoch_total / static_cast<double>(examples.size()));
    if (cfg.verbose) {
      std::cerr << what << " epoch " << epoch + 1 << " loss " << curve.epoch_loss.back() << "\n";
    }
  }
  curve.final_loss = mean_lm_loss(lm, examples);
  return curve;
}

std::vector<LMExample> generator_examples(const LocalCausalLM& lm, const GeneratorConfig& gcfg,
                                          const std::vector<Dialog>& dialogs,
                                          const KnowledgeProvider& provider, std::uint64_t seed) {
  std::vector<LMExample> out;
  const Tokenizer& tok = lm.tokenizer();
  Rng rng(seed * 7919 + 17);
  for (const auto& d : dialogs) {
    for (const auto& t : d.turns) {
      std::vector<KnowledgePiece> pieces = provider(d, t);
      if (pieces.size() >= 2 && rng.uniform01() < gcfg.knowledge_subset_prob) {
        pieces.resize(1 + rng.uniform(pieces.size() - 1));
      }
      const KnowledgeText h = format_knowledge(pieces);
      const std::vector<int> response = tok.encode(t.response);
      const int room = lm.max_len() - static_cast<int>(response.size());
      std::vector<int> prefix;
      try {
        prefix = generator_prefix(tok, build_context(d, t.index), h, gcfg.context_budget, room);
      } catch (const Error& e) {
        fail(ErrorCode::kTraining, "dialog " + d.id + " turn " + std::to_string(t.index) +
                                       " does not fit max_len: " + e.what());
      }
      out.push_back(make_lm_example(prefix, response));
    }
  }
  return out;
}

TrainCurve finetune_generator(LocalCausalLM& lm, const GeneratorConfig& gcfg,
                              const CorpusSplits& corpus, const KnowledgeProvider& provider,
                              const LMTrainConfig& cfg) {
  return finetune_lm(lm, generator_examples(lm, gcfg, corpus.train, provider, cfg.seed), cfg, "generator");
}

// --- decoding ----------------------------------------------------------------------

GenerationResult generate_response(const LocalCausalLM& lm, const GeneratorConfig& gcfg,
                                   const Context& c, const KnowledgeText& h,
                                   const DecodeConfig& decode) {
  GenerationResult result;
  if (decode.max_new_tokens <= 0) return result;
  const std::vector<int> prefix =
      generator_prefix(lm.tokenizer(), c, h, gcfg.context_budget, lm.max_len() - 1, &result.truncated);
  const int budget = std::min(decode.max_new_tokens, lm.max_len() - static_cast<int>(prefix.size()));
  nn::KvCache cache;
  nn::RowVector logp = lm.step(cache, prefix);
  std::vector<int> out;
  for (int i = 0; i < budget; ++i) {
    Eigen::Index best = 0;
    logp.maxCoeff(&best);
    const int tok = static_cast<int>(best);
    if (tok == Tokenizer::kEnd) break;
    out.push_back(tok);
    if (i + 1 < budget) logp = lm.step(cache, {tok});
  }
  result.text = lm.tokenizer().decode(out);
  return result;
}

}  // namespace kaft
