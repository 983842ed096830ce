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

// Dialog and knowledge data model, the JSONL corpus format, dialog context
// construction and the synthetic corpus generator.

#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "json.hpp"
#include "kaft/text.hpp"

namespace kaft {

enum class Source { kUser, kFaq, kProduct };

enum class Decision { kNoSearch = 0, kSearchProduct = 1, kSearchFaq = 2, kSearchPersonal = 3 };

inline constexpr std::array<Decision, 4> kAllDecisions = {
    Decision::kNoSearch, Decision::kSearchProduct, Decision::kSearchFaq,
    Decision::kSearchPersonal};

const char* source_name(Source s);          // "USER" | "FAQ" | "PRODUCT"
const char* decision_name(Decision d);      // "NO_SEARCH" | "SEARCH_PRODUCT" | ...
Source parse_source(const std::string& s);  // throws kParse
Decision parse_decision(const std::string& s);
std::optional<Source> source_for(Decision d);  // nullopt for NO_SEARCH

struct KnowledgePiece {
  std::string id;
  Source source = Source::kFaq;
  std::string title;
  std::string body;
  std::vector<std::string> values;

  // Text seen by the piece encoder.
  std::string encoder_text() const { return title + " " + body; }

  bool operator==(const KnowledgePiece&) const = default;
};

// FAQ and product lists shared by every dialog of a corpus.
struct GlobalKnowledge {
  std::vector<KnowledgePiece> faq;
  std::vector<KnowledgePiece> product;

  const KnowledgePiece* find(const std::string& id) const;
  void reindex();

 private:
  // id -> position; FAQ pieces first, then product pieces.
  std::unordered_map<std::string, std::size_t> index_;
};

// KB_X = KB_user ∪ KB_FAQ ∪ KB_product for one dialog.
struct KnowledgeBase {
  std::vector<KnowledgePiece> user_pieces;
  std::shared_ptr<const GlobalKnowledge> global;

  const std::vector<KnowledgePiece>& faq_pieces() const;
  const std::vector<KnowledgePiece>& product_pieces() const;
  std::size_t size() const;  // K
  const KnowledgePiece* find(const std::string& id) const;
  // All pieces in canonical order: user, FAQ, product.
  std::vector<const KnowledgePiece*> all() const;
  std::vector<const KnowledgePiece*> by_source(Source s) const;
};

struct Turn {
  int index = 1;  // 1-based
  std::string user;
  std::string response;
  std::vector<std::string> gold_ids;
  Decision decision = Decision::kNoSearch;

  bool operator==(const Turn&) const = default;
};

struct Dialog {
  std::string id;
  std::vector<Turn> turns;
  KnowledgeBase kb;

  std::vector<const KnowledgePiece*> gold_pieces(const Turn& turn) const;
};

struct CorpusSplits {
  std::vector<Dialog> train;
  std::vector<Dialog> dev;
  std::vector<Dialog> test;
  std::shared_ptr<const GlobalKnowledge> global;

  const std::vector<Dialog>& split(const std::string& name) const;
  const Dialog* find_dialog(const std::string& id) const;
  std::size_t dialog_count() const { return train.size() + dev.size() + test.size(); }
};

// Field-for-field equality, including the global lists.
bool same_corpus(const CorpusSplits& a, const CorpusSplits& b);

enum class Role { kUser, kSystem };

struct RoleMarkers {
  std::string user = "[USER] ";
  std::string system = "[SYSTEM] ";
};

struct Segment {
  Role role = Role::kUser;
  std::string text;
  bool operator==(const Segment&) const = default;
};

// c_t = u_1 ⊕ r_1 ⊕ ... ⊕ u_t. Segments are joined by '\n', each prefixed
// with its role marker.
class Context {
 public:
  Context() = default;
  Context(std::vector<Segment> segments, RoleMarkers markers);

  const std::vector<Segment>& segments() const { return segments_; }
  const std::string& rendered() const { return rendered_; }
  const RoleMarkers& markers() const { return markers_; }
  const std::string& last_user_utterance() const;

  // Keeps the most recent complete segments whose metric-token count fits
  // the budget. The final user utterance is always kept.
  Context truncated(std::size_t token_budget) const;

  bool operator==(const Context& o) const { return segments_ == o.segments_ && rendered_ == o.rendered_; }

 private:
  std::vector<Segment> segments_;
  RoleMarkers markers_;
  std::string rendered_;
};

Context build_context(const Dialog& dialog, int t, const RoleMarkers& markers = {});

// --- on-disk format -------------------------------------------------------

nlohmann::json piece_to_json(const KnowledgePiece& p);
KnowledgePiece piece_from_json(const nlohmann::json& j);

// `path` is either a corpus directory holding dialogs.jsonl, faq.jsonl and
// product.jsonl, or the dialogs file itself with the global files next to it.
CorpusSplits load_corpus(const std::filesystem::path& path);
void save_corpus(const CorpusSplits& corpus, const std::filesystem::path& dir);

// Vocabulary over the train dialogs, every knowledge piece of every split,
// the role markers and `extra` (prompt and label words).
Tokenizer corpus_tokenizer(const CorpusSplits& corpus, const std::vector<std::string>& extra = {});

// Throws kParse describing the first violated invariant.
void validate_dialog(const Dialog& d);

// --- synthetic corpus -----------------------------------------------------

struct SynthSpec {
  int n_dialogs = 200;
  int n_faq = 18;
  int n_product = 18;
  int min_turns = 3;
  int max_turns = 5;
  // Target decision mixture, in kAllDecisions order.
  std::array<double, 4> decision_mix = {0.34, 0.22, 0.22, 0.22};
  double train_ratio = 0.70;
  double dev_ratio = 0.15;
  // Probability that a product turn compares two plans (|Z+| = 2).
  double compare_prob = 0.15;
  std::vector<std::string> product_families = {"Youth", "Family", "Business", "Global",
                                               "Lite",  "Max",    "Campus",   "Senior"};
  std::vector<int> product_tiers = {18, 38, 58, 88, 128, 158};
  std::vector<std::string> faq_services = {"roaming",   "voicemail", "caller tune",
                                           "data pack", "call forwarding", "sms bundle",
                                           "cloud storage", "video pack"};
  std::vector<std::string> faq_actions = {"activate", "cancel", "pause"};
  RoleMarkers markers;

  static SynthSpec from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;
};

CorpusSplits synth_corpus(const SynthSpec& spec, std::uint64_t seed);

}  // namespace kaft
