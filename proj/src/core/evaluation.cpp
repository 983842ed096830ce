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

#include "kaft/evaluation.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <sstream>

#include "kaft/archive.hpp"
#include "kaft/error.hpp"
#include "kaft/text.hpp"

namespace kaft {

using nlohmann::json;

namespace {

using NgramCounts = std::map<std::vector<std::string>, int>;

NgramCounts ngrams(const std::vector<std::string>& toks, std::size_t n) {
  NgramCounts out;
  for (std::size_t i = 0; i + n <= toks.size(); ++i) {
    ++out[std::vector<std::string>(toks.begin() + static_cast<std::ptrdiff_t>(i),
                                   toks.begin() + static_cast<std::ptrdiff_t>(i + n))];
  }
  return out;
}

// Only ASCII letters and digits form word boundaries; CJK values match anywhere.
bool is_word_char(unsigned char c) { return c < 0x80 && std::isalnum(c) != 0; }

std::vector<std::string> gold_values(const Dialog& d, const Turn& t) {
  std::vector<std::string> out;
  for (const auto* p : d.gold_pieces(t)) out.insert(out.end(), p->values.begin(), p->values.end());
  return out;
}

// Fills the metric fields of a report from aligned gold turns and outputs.
void score_into(EvalReport& r, const std::vector<const Dialog*>& dialogs,
                const std::vector<std::vector<std::string>>& generated, const TokenEmbedder& embedder) {
  std::vector<std::string> refs, hyps;
  std::vector<InformTurn> inform_turns;
  r.per_dialog = json::array();
  for (std::size_t i = 0; i < dialogs.size(); ++i) {
    const Dialog& d = *dialogs[i];
    std::vector<std::string> drefs, dhyps;
    std::vector<InformTurn> dinform;
    for (std::size_t t = 0; t < generated[i].size(); ++t) {
      const Turn& turn = d.turns[t];
      drefs.push_back(turn.response);
      dhyps.push_back(generated[i][t]);
      dinform.push_back({turn.response, generated[i][t], gold_values(d, turn)});
    }
    if (drefs.empty()) continue;
    const InformResult di = inform_rate(dinform);
    r.per_dialog.push_back({{"dialog_id", d.id},
                            {"turns", drefs.size()},
                            {"bleu", corpus_bleu(drefs, dhyps)},
                            {"inform_eligible", di.eligible},
                            {"informed", di.informed}});
    refs.insert(refs.end(), drefs.begin(), drefs.end());
    hyps.insert(hyps.end(), dhyps.begin(), dhyps.end());
    inform_turns.insert(inform_turns.end(), dinform.begin(), dinform.end());
    ++r.n_dialogs;
  }
  if (refs.empty()) fail(ErrorCode::kInvalidArgument, "nothing to evaluate");
  r.n_turns = refs.size();
  r.bleu = corpus_bleu(refs, hyps);
  r.sem_score = semantic_similarity(refs, hyps, embedder);
  const InformResult ir = inform_rate(inform_turns);
  r.inform = ir.rate;
  r.inform_eligible = ir.eligible;
  r.combined = combined_score(r.bleu, r.sem_score, r.inform);
}

std::string fmt(double v, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*f", digits, v);
  return buf;
}

}  // namespace

// --- BLEU ---------------------------------------------------------------------------

double corpus_bleu(const std::vector<std::string>& references, const std::vector<std::string>& hypotheses) {
  if (references.size() != hypotheses.size()) {
    fail(ErrorCode::kInvalidArgument, "corpus_bleu: " + std::to_string(references.size()) + " references for " +
                                          std::to_string(hypotheses.size()) + " hypotheses");
  }
  if (references.empty()) fail(ErrorCode::kInvalidArgument, "corpus_bleu: empty input");
  std::array<double, 4> matches{}, totals{};
  double hyp_len = 0.0, ref_len = 0.0;
  for (std::size_t i = 0; i < references.size(); ++i) {
    const auto ref = metric_tokens(references[i]);
    const auto hyp = metric_tokens(hypotheses[i]);
    ref_len += static_cast<double>(ref.size());
    hyp_len += static_cast<double>(hyp.size());
    for (std::size_t n = 1; n <= 4; ++n) {
      const NgramCounts rc = ngrams(ref, n);
      for (const auto& [g, c] : ngrams(hyp, n)) {
        const auto it = rc.find(g);
        matches[n - 1] += it == rc.end() ? 0 : std::min(c, it->second);
        totals[n - 1] += c;
      }
    }
  }
  if (matches[0] == 0.0) return 0.0;
  double log_p = std::log(matches[0] / totals[0]);
  for (std::size_t n = 1; n < 4; ++n) log_p += std::log((matches[n] + 1.0) / (totals[n] + 1.0));
  const double bp = hyp_len > ref_len ? 1.0 : std::exp(1.0 - ref_len / hyp_len);
  return 100.0 * bp * std::exp(log_p / 4.0);
}

// --- similarity ---------------------------------------------------------------------

nn::Matrix EncoderEmbedder::embed(const std::string& text) const {
  return model_->piece_encoder().token_embeddings(text);
}

double similarity_f1(const nn::Matrix& reference, const nn::Matrix& hypothesis) {
  if (reference.rows() == 0 || hypothesis.rows() == 0) return 0.0;
  if (reference.cols() != hypothesis.cols()) {
    fail(ErrorCode::kInvalidArgument, "similarity_f1: embedding widths differ");
  }
  auto unit = [](const nn::Matrix& m) {
    nn::Matrix u = m;
    for (Eigen::Index i = 0; i < u.rows(); ++i) {
      const double n = u.row(i).norm();
      if (n > 0.0) u.row(i) /= n;
    }
    return u;
  };
  const nn::Matrix cos = (unit(hypothesis) * unit(reference).transpose()).cwiseMax(-1.0).cwiseMin(1.0);
  const double precision = cos.rowwise().maxCoeff().mean();
  const double recall = cos.colwise().maxCoeff().mean();
  // The harmonic mean is only bounded for nonnegative inputs; below that the
  // smaller side is used, which meets it continuously at zero.
  if (precision <= 0.0 || recall <= 0.0) return std::min(precision, recall);
  return 2.0 * precision * recall / (precision + recall);
}

double semantic_similarity(const std::vector<std::string>& references, const std::vector<std::string>& hypotheses,
                           const TokenEmbedder& embedder) {
  if (references.size() != hypotheses.size()) {
    fail(ErrorCode::kInvalidArgument, "semantic_similarity: length mismatch");
  }
  if (references.empty()) fail(ErrorCode::kInvalidArgument, "semantic_similarity: empty input");
  double total = 0.0;
  for (std::size_t i = 0; i < references.size(); ++i) {
    total += similarity_f1(embedder.embed(references[i]), embedder.embed(hypotheses[i]));
  }
  return total / static_cast<double>(references.size());
}

// --- inform -------------------------------------------------------------------------

bool contains_value(const std::string& text, const std::string& value) {
  const std::string hay = normalize_value(text);
  const std::string needle = normalize_value(value);
  if (needle.empty()) return false;
  for (std::size_t pos = hay.find(needle); pos != std::string::npos; pos = hay.find(needle, pos + 1)) {
    const bool left = pos == 0 || !is_word_char(static_cast<unsigned char>(hay[pos - 1])) ||
                      !is_word_char(static_cast<unsigned char>(needle.front()));
    const std::size_t end = pos + needle.size();
    const bool right = end == hay.size() || !is_word_char(static_cast<unsigned char>(hay[end])) ||
                       !is_word_char(static_cast<unsigned char>(needle.back()));
    if (left && right) return true;
  }
  return false;
}

std::optional<bool> turn_informed(const InformTurn& turn) {
  bool eligible = false;
  for (const auto& v : turn.gold_values) {
    if (!contains_value(turn.gold_response, v)) continue;
    eligible = true;
    if (!contains_value(turn.generated, v)) return false;
  }
  if (!eligible) return std::nullopt;
  return true;
}

InformResult inform_rate(const std::vector<InformTurn>& turns) {
  InformResult r;
  for (const auto& t : turns) {
    const auto informed = turn_informed(t);
    if (!informed) continue;
    ++r.eligible;
    if (*informed) ++r.informed;
  }
  if (r.eligible > 0) r.rate = static_cast<double>(r.informed) / static_cast<double>(r.eligible);
  return r;
}

double combined_score(double bleu, double sem, double inform) {
  if (!(bleu >= 0.0 && bleu <= 100.0)) fail(ErrorCode::kInvalidArgument, "BLEU must be in [0, 100]");
  if (!(sem >= -1.0 && sem <= 1.0)) fail(ErrorCode::kInvalidArgument, "semantic score must be in [-1, 1]");
  if (!(inform >= 0.0 && inform <= 1.0)) fail(ErrorCode::kInvalidArgument, "inform must be in [0, 1]");
  return 0.5 * (bleu / 100.0 + sem) + inform;
}

// --- reports ------------------------------------------------------------------------

std::string report_fingerprint(const json& config, const std::vector<std::uint64_t>& seeds) {
  return sha256_hex(json{{"config", config}, {"seeds", seeds}}.dump());
}

json EvalReport::to_json() const {
  json rec = json::object();
  for (const auto& [k, v] : recall) rec[std::to_string(k)] = v;
  return {{"schema_version", kSchemaVersion},
          {"system", system},
          {"regime", regime},
          {"setting", setting},
          {"split", split},
          {"bleu", bleu},
          {"sem_score", sem_score},
          {"inform", inform},
          {"combined", combined},
          {"inform_level", inform_level},
          {"inform_eligible", inform_eligible},
          {"recall", rec},
          {"decision_accuracy", decision_accuracy},
          {"n_dialogs", n_dialogs},
          {"n_turns", n_turns},
          {"config", config},
          {"seeds", seeds},
          {"fingerprint", fingerprint},
          {"per_dialog", per_dialog}};
}

EvalReport EvalReport::from_json(const json& j) {
  try {
    if (j.at("schema_version").get<int>() != kSchemaVersion) fail(ErrorCode::kParse, "unsupported report version");
    EvalReport r;
    r.system = j.at("system").get<std::string>();
    r.regime = j.at("regime").get<std::string>();
    r.setting = j.value("setting", "");
    r.split = j.value("split", "");
    r.bleu = j.at("bleu").get<double>();
    r.sem_score = j.at("sem_score").get<double>();
    r.inform = j.at("inform").get<double>();
    r.combined = j.at("combined").get<double>();
    r.inform_level = j.value("inform_level", "turn");
    r.inform_eligible = j.value("inform_eligible", std::size_t{0});
    const json recall = j.value("recall", json::object());
    for (const auto& [k, v] : recall.items()) r.recall[std::stoi(k)] = v.get<double>();
    r.decision_accuracy = j.value("decision_accuracy", json::object());
    r.n_dialogs = j.at("n_dialogs").get<std::size_t>();
    r.n_turns = j.at("n_turns").get<std::size_t>();
    r.config = j.value("config", json::object());
    r.seeds = j.value("seeds", std::vector<std::uint64_t>{});
    r.fingerprint = j.value("fingerprint", "");
    r.per_dialog = j.value("per_dialog", json::array());
    return r;
  } catch (const Error&) {
    throw;
  } catch (const std::exception& e) {
    fail(ErrorCode::kParse, std::string("malformed report: ") + e.what());
  }
}

void EvalReport::save(const std::filesystem::path& path) const { write_text_file(path, to_json().dump(2) + "\n"); }

EvalReport EvalReport::load(const std::filesystem::path& path) {
  json j;
  try {
    j = json::parse(read_text_file(path));
  } catch (const json::exception& e) {
    fail(ErrorCode::kParse, path.string() + ": " + e.what());
  }
  return from_json(j);
}

// --- evaluation ---------------------------------------------------------------------

EvalRun evaluate_system(const DialogSystem& system, const std::vector<Dialog>& dialogs,
                        const TokenEmbedder& embedder, const EvalOptions& opts) {
  EvalRun run;
  EvalReport& r = run.report;
  r.system = system.system_name();
  r.regime = system.regime();
  r.setting = opts.setting;
  r.split = opts.split;
  r.config = opts.config;
  r.seeds = opts.seeds;
  r.fingerprint = report_fingerprint(opts.config, opts.seeds);

  std::vector<const Dialog*> done;
  std::vector<std::vector<std::string>> generated;
  std::vector<Decision> predicted, gold;
  try {
    for (const auto& d : dialogs) {
      std::vector<std::string> outs;
      for (const auto& turn : d.turns) {
        TurnResult tr = system.respond(d, turn.index);
        if (tr.trace.decision && tr.trace.decision_source == "model") {
          predicted.push_back(*tr.trace.decision);
          gold.push_back(turn.decision);
        }
        outs.push_back(std::move(tr.response));
        run.traces.push_back(std::move(tr.trace));
      }
      system.forget(d.id);
      done.push_back(&d);
      generated.push_back(std::move(outs));
    }
  } catch (const std::exception& e) {
    if (opts.failure_manifest) {
      json partial = json::array();
      for (std::size_t i = 0; i < done.size(); ++i) {
        partial.push_back({{"dialog_id", done[i]->id}, {"responses", generated[i]}});
      }
      write_text_file(*opts.failure_manifest, json{{"status", "failed"},
                                                   {"system", r.system},
                                                   {"regime", r.regime},
                                                   {"setting", r.setting},
                                                   {"error", e.what()},
                                                   {"completed", partial}}
                                                  .dump(2) +
                                                  "\n");
    }
    throw;
  }
  score_into(r, done, generated, embedder);
  if (!gold.empty()) r.decision_accuracy = decision_accuracy(predicted, gold).to_json();
  return run;
}

EvalReport evaluate_responses(const std::vector<Dialog>& dialogs, const std::vector<std::string>& generated,
                              const TokenEmbedder& embedder) {
  std::vector<const Dialog*> ds;
  std::vector<std::vector<std::string>> per;
  std::size_t next = 0;
  for (const auto& d : dialogs) {
    if (next + d.turns.size() > generated.size()) {
      fail(ErrorCode::kInvalidArgument, "evaluate_responses: fewer responses than turns");
    }
    ds.push_back(&d);
    per.emplace_back(generated.begin() + static_cast<std::ptrdiff_t>(next),
                     generated.begin() + static_cast<std::ptrdiff_t>(next + d.turns.size()));
    next += d.turns.size();
  }
  if (next != generated.size()) fail(ErrorCode::kInvalidArgument, "evaluate_responses: more responses than turns");
  EvalReport r;
  r.system = "reference";
  r.regime = "gold";
  score_into(r, ds, per, embedder);
  return r;
}

std::string render_table(const std::vector<TableRow>& rows) {
  const std::vector<std::string> head{"Method", "Setting", "BLEU", "Sem", "Inform", "Score"};
  std::vector<std::vector<std::string>> cells{head};
  for (const auto& row : rows) {
    if (row.report && row.error.empty()) {
      const EvalReport& r = *row.report;
      cells.push_back({row.method, row.setting, fmt(r.bleu, 2), fmt(r.sem_score, 3), fmt(r.inform, 3),
                       fmt(r.combined, 3)});
    } else {
      cells.push_back({row.method, row.setting, "failed", "-", "-", row.error.empty() ? "-" : row.error});
    }
  }
  std::vector<std::size_t> width(head.size(), 0);
  for (const auto& c : cells) {
    for (std::size_t i = 0; i < c.size(); ++i) width[i] = std::max(width[i], c[i].size());
  }
  std::ostringstream out;
  for (std::size_t r = 0; r < cells.size(); ++r) {
    for (std::size_t i = 0; i < cells[r].size(); ++i) {
      out << (i ? " | " : "") << cells[r][i] << std::string(width[i] - cells[r][i].size(), ' ');
    }
    out << '\n';
    if (r == 0) {
      for (std::size_t i = 0; i < width.size(); ++i) out << (i ? "-+-" : "") << std::string(width[i], '-');
      out << '\n';
    }
  }
  out << "Inform is turn-level.\n";
  return out.str();
}

}  // namespace kaft
