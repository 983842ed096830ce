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

#include "kaft/retriever.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iostream>
#include <sstream>

#include "kaft/archive.hpp"
#include "kaft/error.hpp"
#include "kaft/rng.hpp"

namespace kaft {

using nlohmann::json;

// --- configs --------------------------------------------------------------------

json EncoderConfig::to_json() const {
  json j = body.to_json();
  j["out_dim"] = out_dim;
  return j;
}

EncoderConfig EncoderConfig::from_json(const json& j) {
  EncoderConfig c;
  c.body = nn::TransformerConfig::from_json(j);
  c.out_dim = j.value("out_dim", c.out_dim);
  return c;
}

json RetrieverConfig::to_json() const {
  return {{"encoder", encoder.to_json()}, {"context_budget", context_budget}};
}

RetrieverConfig RetrieverConfig::from_json(const json& j) {
  RetrieverConfig c;
  if (j.contains("encoder")) c.encoder = EncoderConfig::from_json(j.at("encoder"));
  c.context_budget = j.value("context_budget", c.context_budget);
  return c;
}

namespace {

json sources_to_json(const std::set<Source>& s) {
  json a = json::array();
  for (auto src : s) a.push_back(source_name(src));
  return a;
}

std::set<Source> sources_from_json(const json& j) {
  std::set<Source> out;
  for (const auto& s : j) out.insert(parse_source(s.get<std::string>()));
  return out;
}

}  // namespace

json RetrieverTrainConfig::to_json() const {
  json j{{"epochs", epochs},
         {"batch_size", batch_size},
         {"optimizer", optimizer.to_json()},
         {"seed", seed},
         {"scope", sources_to_json(scope)}};
  if (decision_filter) j["decision_filter"] = decision_name(*decision_filter);
  return j;
}

RetrieverTrainConfig RetrieverTrainConfig::from_json(const json& j) {
  RetrieverTrainConfig c;
  c.epochs = j.value("epochs", c.epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  if (j.contains("optimizer")) c.optimizer = nn::OptimizerConfig::from_json(j.at("optimizer"), c.optimizer);
  c.seed = j.value("seed", c.seed);
  if (j.contains("scope")) c.scope = sources_from_json(j.at("scope"));
  if (j.contains("decision_filter")) {
    c.decision_filter = parse_decision(j.at("decision_filter").get<std::string>());
  }
  c.verbose = j.value("verbose", c.verbose);
  return c;
}

json TrainCurve::to_json() const {
  return {{"initial_loss", initial_loss},
          {"epoch_loss", epoch_loss},
          {"final_loss", final_loss},
          {"examples", examples}};
}

json RecallReport::to_json() const {
  json r = json::object();
  for (const auto& [k, v] : recall) r["recall@" + std::to_string(k)] = v;
  return {{"recall", r}, {"evaluated", evaluated}, {"excluded", excluded}};
}

// --- encoder ------------------------------------------------------------------

TextEncoder::TextEncoder(std::shared_ptr<const Tokenizer> tokenizer, EncoderConfig cfg,
                         std::uint64_t seed)
    : tokenizer_(std::move(tokenizer)), cfg_(std::move(cfg)) {
  cfg_.body.vocab = tokenizer_->size();
  Rng rng(seed);
  stack_ = nn::TransformerStack(cfg_.body, params_, "enc", rng);
  proj_ = params_.add("enc.proj",
                      nn::normal_matrix(cfg_.body.dim, cfg_.out_dim,
                                        1.0 / static_cast<double>(cfg_.body.dim), rng));
  proj_b_ = params_.add("enc.proj_b", nn::constant_matrix(1, cfg_.out_dim, 0.0));
}

TextEncoder::TextEncoder(const TextEncoder& other) = default;
TextEncoder& TextEncoder::operator=(const TextEncoder& other) = default;

std::vector<int> TextEncoder::ids(const std::string& text, bool keep_tail) const {
  std::vector<int> toks = tokenizer_->encode(text);
  const std::size_t room = static_cast<std::size_t>(cfg_.body.max_len - 1);
  if (toks.size() > room) {
    if (keep_tail) {
      toks.erase(toks.begin(), toks.end() - static_cast<std::ptrdiff_t>(room));
    } else {
      toks.resize(room);
    }
  }
  toks.insert(toks.begin(), Tokenizer::kBos);
  return toks;
}

nn::Var TextEncoder::forward(nn::Tape& tape, const std::vector<int>& ids) const {
  nn::Var h = stack_.forward(tape, params_, ids, /*causal=*/false);
  nn::Var pooled = tape.mean_rows(h);
  return tape.add_row(tape.matmul(pooled, tape.param(params_, proj_)), tape.param(params_, proj_b_));
}

nn::RowVector TextEncoder::encode(const std::string& text, bool keep_tail) const {
  nn::Matrix h = stack_.infer(params_, ids(text, keep_tail), /*causal=*/false);
  nn::RowVector pooled = h.colwise().mean();
  return pooled * params_[proj_].value + params_[proj_b_].value.row(0);
}

nn::Matrix TextEncoder::token_embeddings(const std::string& text) const {
  nn::Matrix h = stack_.infer(params_, ids(text, false), /*causal=*/false);
  return h.bottomRows(h.rows() - 1);
}

// --- model ---------------------------------------------------------------------

RetrievalModel::RetrievalModel(std::shared_ptr<const Tokenizer> tokenizer, RetrieverConfig cfg,
                               std::uint64_t seed)
    : cfg_(std::move(cfg)),
      context_(tokenizer, cfg_.encoder, seed),
      piece_(context_) {
  cfg_.encoder = context_.config();
}

RetrievalModel::RetrievalModel(RetrieverConfig cfg, TextEncoder context, TextEncoder piece)
    : cfg_(std::move(cfg)), context_(std::move(context)), piece_(std::move(piece)) {}

nn::RowVector RetrievalModel::encode_context(const Context& c) const {
  return context_.encode(c.truncated(cfg_.context_budget).rendered(), /*keep_tail=*/true);
}

nn::RowVector RetrievalModel::encode_piece(const KnowledgePiece& p) const {
  return piece_.encode(p.encoder_text(), /*keep_tail=*/false);
}

void RetrievalModel::save(const std::filesystem::path& path) const {
  json header{{"kind", "retriever"},
              {"config", cfg_.to_json()},
              {"vocab", tokenizer().tokens()}};
  write_archive(path, header, {&context_.params(), &piece_.params()});
}

RetrievalModel RetrievalModel::load(const std::filesystem::path& path) {
  ArchiveReader r = read_archive(path);
  if (r.header.value("kind", "") != "retriever") {
    fail(ErrorCode::kParse, path.string() + " is not a retriever archive");
  }
  if (r.sections.size() != 2) fail(ErrorCode::kParse, path.string() + ": expected 2 sections");
  auto tok = std::make_shared<const Tokenizer>(
      Tokenizer::from_tokens(r.header.at("vocab").get<std::vector<std::string>>()));
  RetrieverConfig cfg = RetrieverConfig::from_json(r.header.at("config"));
  TextEncoder ctx(tok, cfg.encoder, 0);
  TextEncoder piece(tok, cfg.encoder, 0);
  std::istringstream a(r.sections[0], std::ios::binary);
  ctx.params().read(a);
  std::istringstream b(r.sections[1], std::ios::binary);
  piece.params().read(b);
  cfg.encoder = ctx.config();
  return RetrievalModel(std::move(cfg), std::move(ctx), std::move(piece));
}

// --- index ---------------------------------------------------------------------

RetrievalIndex::RetrievalIndex(std::vector<std::string> ids, std::vector<Source> sources,
                               nn::Matrix embeddings, std::set<Source> scope)
    : ids_(std::move(ids)), sources_(std::move(sources)), emb_(std::move(embeddings)),
      scope_(std::move(scope)) {
  if (static_cast<Eigen::Index>(ids_.size()) != emb_.rows() || sources_.size() != ids_.size()) {
    fail(ErrorCode::kInvalidArgument, "index ids/sources/embedding rows disagree");
  }
  for (std::size_t i = 0; i < ids_.size(); ++i) {
    if (!rows_.emplace(ids_[i], static_cast<int>(i)).second) {
      fail(ErrorCode::kInvalidArgument, "duplicate piece id in index: " + ids_[i]);
    }
  }
}

RetrievalIndex RetrievalIndex::build(const RetrievalModel& model,
                                     const std::vector<const KnowledgePiece*>& pieces,
                                     std::set<Source> scope) {
  std::vector<std::string> ids;
  std::vector<Source> sources;
  std::vector<nn::RowVector> rows;
  for (const auto* p : pieces) {
    if (!scope.count(p->source)) continue;
    ids.push_back(p->id);
    sources.push_back(p->source);
    rows.push_back(model.encode_piece(*p));
  }
  nn::Matrix emb(static_cast<Eigen::Index>(rows.size()), model.config().encoder.out_dim);
  for (std::size_t i = 0; i < rows.size(); ++i) emb.row(static_cast<Eigen::Index>(i)) = rows[i];
  return RetrievalIndex(std::move(ids), std::move(sources), std::move(emb), std::move(scope));
}

int RetrievalIndex::row_of(const std::string& id) const {
  auto it = rows_.find(id);
  return it == rows_.end() ? -1 : it->second;
}

void RetrievalIndex::save(const std::filesystem::path& path) const {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorCode::kIo, "cannot write " + path.string());
  json srcs = json::array();
  for (auto s : sources_) srcs.push_back(source_name(s));
  const std::string header = json{{"ids", ids_},
                                  {"sources", srcs},
                                  {"scope", sources_to_json(scope_)},
                                  {"rows", emb_.rows()},
                                  {"cols", emb_.cols()}}
                                 .dump();
  out.write("KAFTIDX1", 8);
  const std::uint64_t len = header.size();
  out.write(reinterpret_cast<const char*>(&len), sizeof len);
  out.write(header.data(), static_cast<std::streamsize>(len));
  std::vector<float> data(static_cast<std::size_t>(emb_.size()));
  for (Eigen::Index i = 0; i < emb_.size(); ++i) data[static_cast<std::size_t>(i)] = static_cast<float>(emb_.data()[i]);
  out.write(reinterpret_cast<const char*>(data.data()),
            static_cast<std::streamsize>(data.size() * sizeof(float)));
}

RetrievalIndex RetrievalIndex::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::kIo, "cannot open " + path.string());
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, "KAFTIDX1", 8) != 0) {
    fail(ErrorCode::kParse, path.string() + " is not an index file");
  }
  std::uint64_t len = 0;
  in.read(reinterpret_cast<char*>(&len), sizeof len);
  std::string header(len, '\0');
  in.read(header.data(), static_cast<std::streamsize>(len));
  const json h = json::parse(header);
  const auto rows = h.at("rows").get<Eigen::Index>();
  const auto cols = h.at("cols").get<Eigen::Index>();
  std::vector<float> data(static_cast<std::size_t>(rows * cols));
  in.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(data.size() * sizeof(float)));
  if (!in) fail(ErrorCode::kParse, path.string() + ": truncated index");
  nn::Matrix emb(rows, cols);
  for (Eigen::Index i = 0; i < emb.size(); ++i) emb.data()[i] = data[static_cast<std::size_t>(i)];
  std::vector<Source> sources;
  for (const auto& s : h.at("sources")) sources.push_back(parse_source(s.get<std::string>()));
  return RetrievalIndex(h.at("ids").get<std::vector<std::string>>(), std::move(sources),
                        std::move(emb), sources_from_json(h.at("scope")));
}

IndexBuilder::IndexBuilder(const RetrievalModel& model, std::set<Source> scope)
    : model_(model), scope_(std::move(scope)) {}

std::shared_ptr<const RetrievalIndex> IndexBuilder::for_dialog(const Dialog& dialog) {
  std::lock_guard<std::mutex> lock(mu_);
  if (auto it = per_dialog_.find(dialog.id); it != per_dialog_.end()) return it->second;
  std::vector<std::string> ids;
  std::vector<Source> sources;
  std::vector<nn::RowVector> rows;
  for (const auto* p : dialog.kb.all()) {
    if (!scope_.count(p->source)) continue;
    ids.push_back(p->id);
    sources.push_back(p->source);
    if (p->source == Source::kUser) {
      rows.push_back(model_.encode_piece(*p));
    } else {
      auto it = global_rows_.find(p->id);
      if (it == global_rows_.end()) it = global_rows_.emplace(p->id, model_.encode_piece(*p)).first;
      rows.push_back(it->second);
    }
  }
  nn::Matrix emb(static_cast<Eigen::Index>(rows.size()), model_.config().encoder.out_dim);
  for (std::size_t i = 0; i < rows.size(); ++i) emb.row(static_cast<Eigen::Index>(i)) = rows[i];
  auto index = std::make_shared<const RetrievalIndex>(std::move(ids), std::move(sources),
                                                      std::move(emb), scope_);
  per_dialog_.emplace(dialog.id, index);
  return index;
}

void IndexBuilder::forget(const std::string& dialog_id) {
  std::lock_guard<std::mutex> lock(mu_);
  per_dialog_.erase(dialog_id);
}

// --- scoring -------------------------------------------------------------------

std::vector<double> softmax(const std::vector<double>& scores) {
  std::vector<double> p(scores.size());
  if (scores.empty()) return p;
  const double mx = *std::max_element(scores.begin(), scores.end());
  double z = 0.0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    p[i] = std::exp(scores[i] - mx);
    z += p[i];
  }
  for (double& v : p) v /= z;
  return p;
}

std::vector<double> index_scores(const RetrievalIndex& index, const nn::RowVector& query) {
  if (index.empty()) fail(ErrorCode::kInvalidArgument, "retrieval over an empty index");
  Eigen::VectorXd s = index.embeddings() * query.transpose();
  return std::vector<double>(s.data(), s.data() + s.size());
}

std::vector<double> retrieval_distribution(const RetrievalModel& model,
                                           const RetrievalIndex& index, const Context& c) {
  if (index.empty()) fail(ErrorCode::kInvalidArgument, "retrieval over an empty index");
  return softmax(index_scores(index, model.encode_context(c)));
}

std::vector<ScoredPiece> rank_pieces(const RetrievalIndex& index, const nn::RowVector& query) {
  const std::vector<double> scores = index_scores(index, query);
  const std::vector<double> probs = softmax(scores);
  std::vector<ScoredPiece> out(scores.size());
  for (std::size_t i = 0; i < scores.size(); ++i) {
    out[i] = {index.piece_ids()[i], probs[i], scores[i]};
  }
  std::sort(out.begin(), out.end(), [](const ScoredPiece& a, const ScoredPiece& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.id < b.id;
  });
  return out;
}

std::vector<ScoredPiece> retrieve_topk(const RetrievalModel& model, const RetrievalIndex& index,
                                       const Context& c, int k) {
  if (k < 1) fail(ErrorCode::kInvalidArgument, "retrieve_topk needs k >= 1");
  if (index.empty()) fail(ErrorCode::kInvalidArgument, "retrieval over an empty index");
  auto ranked = rank_pieces(index, model.encode_context(c));
  if (ranked.size() > static_cast<std::size_t>(k)) ranked.resize(static_cast<std::size_t>(k));
  return ranked;
}

// --- training -------------------------------------------------------------------

nn::Var retriever_example_loss(nn::Tape& tape, const RetrievalModel& model, const Context& c,
                               const nn::Matrix& piece_embeddings,
                               const std::vector<int>& positive_rows) {
  const auto& enc = model.context_encoder();
  nn::Var q = enc.forward(tape, enc.ids(c.truncated(model.config().context_budget).rendered(), true));
  nn::Var scores = tape.matmul_bt(q, tape.constant(piece_embeddings));
  return tape.multi_positive_nll(scores, positive_rows);
}

namespace {

struct RetrievalExample {
  Context context;
  std::shared_ptr<const RetrievalIndex> index;
  std::vector<int> positives;
};

std::vector<RetrievalExample> collect_examples(const RetrievalModel& model,
                                               const std::vector<Dialog>& dialogs,
                                               const RetrieverTrainConfig& cfg) {
  IndexBuilder builder(model, cfg.scope);
  std::vector<RetrievalExample> out;
  for (const auto& d : dialogs) {
    std::shared_ptr<const RetrievalIndex> index;
    for (const auto& t : d.turns) {
      if (t.gold_ids.empty()) continue;
      if (cfg.decision_filter && t.decision != *cfg.decision_filter) continue;
      if (!index) index = builder.for_dialog(d);
      std::vector<int> pos;
      for (const auto& id : t.gold_ids) {
        const int row = index->row_of(id);
        if (row >= 0) pos.push_back(row);
      }
      if (pos.empty()) continue;
      out.push_back({build_context(d, t.index), index, std::move(pos)});
    }
  }
  return out;
}

double mean_loss(const RetrievalModel& model, const std::vector<RetrievalExample>& examples) {
  if (examples.empty()) return 0.0;
  double total = 0.0;
  for (const auto& ex : examples) {
    auto probs = softmax(index_scores(*ex.index, model.encode_context(ex.context)));
    double l = 0.0;
    for (int r : ex.positives) l -= std::log(std::max(probs[static_cast<std::size_t>(r)], 1e-300));
    total += l / static_cast<double>(ex.positives.size());
  }
  return total / static_cast<double>(examples.size());
}

}  // namespace

double retriever_loss(const RetrievalModel& model, const std::vector<Dialog>& dialogs,
                      const RetrieverTrainConfig& cfg) {
  return mean_loss(model, collect_examples(model, dialogs, cfg));
}

TrainCurve train_retriever(RetrievalModel& model, const CorpusSplits& corpus,
                           const RetrieverTrainConfig& cfg) {
  if (cfg.epochs < 0 || cfg.batch_size < 1) {
    fail(ErrorCode::kInvalidArgument, "retriever training needs epochs >= 0 and batch_size >= 1");
  }
  const auto examples = collect_examples(model, corpus.train, cfg);
  if (examples.empty()) {
    fail(ErrorCode::kTraining, "no training turns with positive knowledge annotations");
  }
  TrainCurve curve;
  curve.examples = examples.size();
  curve.initial_loss = mean_loss(model, examples);

  nn::ParameterSet& params = model.context_encoder().params();
  nn::Optimizer opt(params, cfg.optimizer);
  nn::Gradients grads(params);
  Rng rng(cfg.seed);
  std::vector<std::size_t> order(examples.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    rng.shuffle(order);
    double epoch_total = 0.0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      grads.zero();
      for (std::size_t i = start; i < end; ++i) {
        const auto& ex = examples[order[i]];
        nn::Tape tape(&grads);
        nn::Var loss = retriever_example_loss(tape, model, ex.context, ex.index->embeddings(), ex.positives);
        const double value = tape.scalar(loss);
        if (!std::isfinite(value)) {
          fail(ErrorCode::kTraining, "non-finite retriever loss at epoch " + std::to_string(epoch + 1) +
                                         " on context: " + ex.context.last_user_utterance());
        }
        epoch_total += value;
        tape.backward(loss);
      }
      grads.scale(1.0 / static_cast<double>(end - start));
      if (!grads.all_finite()) {
        fail(ErrorCode::kTraining, "non-finite retriever gradient at epoch " + std::to_string(epoch + 1));
      }
      opt.step(params, grads, {});
    }
    curve.epoch_loss.push_back(epoch_total / static_cast<double>(examples.size()));
    if (cfg.verbose) {
      std::cerr << "retriever epoch " << epoch + 1 << " loss " << curve.epoch_loss.back() << "\n";
    }
  }
  curve.final_loss = mean_loss(model, examples);
  return curve;
}

// --- recall ---------------------------------------------------------------------

RecallReport recall_from_ranks(const std::vector<int>& best_rank, const std::vector<int>& ks) {
  RecallReport r;
  r.evaluated = best_rank.size();
  for (int k : ks) {
    std::size_t hits = 0;
    for (int rank : best_rank) {
      if (rank >= 1 && rank <= k) ++hits;
    }
    r.recall[k] = best_rank.empty() ? 0.0 : static_cast<double>(hits) / static_cast<double>(best_rank.size());
  }
  return r;
}

RecallReport recall_at_k(const RetrievalModel& model, IndexBuilder& indexes,
                         const std::vector<Dialog>& dialogs, const std::vector<int>& ks,
                         std::optional<Decision> decision_filter) {
  std::vector<int> ranks;
  std::size_t excluded = 0;
  for (const auto& d : dialogs) {
    for (const auto& t : d.turns) {
      if (t.gold_ids.empty() || (decision_filter && t.decision != *decision_filter)) {
        ++excluded;
        continue;
      }
      auto index = indexes.for_dialog(d);
      const auto ranked = rank_pieces(*index, model.encode_context(build_context(d, t.index)));
      int best = 0;
      for (std::size_t i = 0; i < ranked.size() && best == 0; ++i) {
        if (std::find(t.gold_ids.begin(), t.gold_ids.end(), ranked[i].id) != t.gold_ids.end()) {
          best = static_cast<int>(i) + 1;
        }
      }
      ranks.push_back(best);
    }
  }
  RecallReport r = recall_from_ranks(ranks, ks);
  r.excluded = excluded;
  return r;
}

}  // namespace kaft
