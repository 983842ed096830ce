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

#include "kaft/corpus.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

#include "kaft/error.hpp"
#include "kaft/rng.hpp"
#include "kaft/text.hpp"

namespace kaft {

using nlohmann::json;
namespace fs = std::filesystem;

const char* source_name(Source s) {
  switch (s) {
    case Source::kUser: return "USER";
    case Source::kFaq: return "FAQ";
    case Source::kProduct: return "PRODUCT";
  }
  return "?";
}

const char* decision_name(Decision d) {
  switch (d) {
    case Decision::kNoSearch: return "NO_SEARCH";
    case Decision::kSearchProduct: return "SEARCH_PRODUCT";
    case Decision::kSearchFaq: return "SEARCH_FAQ";
    case Decision::kSearchPersonal: return "SEARCH_PERSONAL";
  }
  return "?";
}

Source parse_source(const std::string& s) {
  if (s == "USER") return Source::kUser;
  if (s == "FAQ") return Source::kFaq;
  if (s == "PRODUCT") return Source::kProduct;
  fail(ErrorCode::kParse, "unknown knowledge source \"" + s + "\"");
}

Decision parse_decision(const std::string& s) {
  if (s.empty() || s == "NO_SEARCH") return Decision::kNoSearch;
  if (s == "SEARCH_PRODUCT") return Decision::kSearchProduct;
  if (s == "SEARCH_FAQ") return Decision::kSearchFaq;
  if (s == "SEARCH_PERSONAL") return Decision::kSearchPersonal;
  fail(ErrorCode::kParse, "unknown search decision \"" + s + "\"");
}

std::optional<Source> source_for(Decision d) {
  switch (d) {
    case Decision::kSearchProduct: return Source::kProduct;
    case Decision::kSearchFaq: return Source::kFaq;
    case Decision::kSearchPersonal: return Source::kUser;
    case Decision::kNoSearch: break;
  }
  return std::nullopt;
}

// --- knowledge ----------------------------------------------------------------

void GlobalKnowledge::reindex() {
  index_.clear();
  for (std::size_t i = 0; i < faq.size(); ++i) index_.emplace(faq[i].id, i);
  for (std::size_t i = 0; i < product.size(); ++i) index_.emplace(product[i].id, faq.size() + i);
}

const KnowledgePiece* GlobalKnowledge::find(const std::string& id) const {
  auto it = index_.find(id);
  if (it == index_.end()) return nullptr;
  return it->second < faq.size() ? &faq[it->second] : &product[it->second - faq.size()];
}

namespace {
const std::vector<KnowledgePiece> kNoPieces;
}

const std::vector<KnowledgePiece>& KnowledgeBase::faq_pieces() const {
  return global ? global->faq : kNoPieces;
}

const std::vector<KnowledgePiece>& KnowledgeBase::product_pieces() const {
  return global ? global->product : kNoPieces;
}

std::size_t KnowledgeBase::size() const {
  return user_pieces.size() + faq_pieces().size() + product_pieces().size();
}

const KnowledgePiece* KnowledgeBase::find(const std::string& id) const {
  for (const auto& p : user_pieces) {
    if (p.id == id) return &p;
  }
  return global ? global->find(id) : nullptr;
}

std::vector<const KnowledgePiece*> KnowledgeBase::all() const {
  std::vector<const KnowledgePiece*> out;
  out.reserve(size());
  for (const auto& p : user_pieces) out.push_back(&p);
  for (const auto& p : faq_pieces()) out.push_back(&p);
  for (const auto& p : product_pieces()) out.push_back(&p);
  return out;
}

std::vector<const KnowledgePiece*> KnowledgeBase::by_source(Source s) const {
  const auto& list = s == Source::kUser ? user_pieces
                     : s == Source::kFaq ? faq_pieces()
                                         : product_pieces();
  std::vector<const KnowledgePiece*> out;
  out.reserve(list.size());
  for (const auto& p : list) out.push_back(&p);
  return out;
}

std::vector<const KnowledgePiece*> Dialog::gold_pieces(const Turn& turn) const {
  std::vector<const KnowledgePiece*> out;
  for (const auto& id : turn.gold_ids) {
    if (const auto* p = kb.find(id)) out.push_back(p);
  }
  return out;
}

const std::vector<Dialog>& CorpusSplits::split(const std::string& name) const {
  if (name == "train") return train;
  if (name == "dev") return dev;
  if (name == "test") return test;
  fail(ErrorCode::kInvalidArgument, "unknown split \"" + name + "\"");
}

const Dialog* CorpusSplits::find_dialog(const std::string& id) const {
  for (const auto* list : {&train, &dev, &test}) {
    for (const auto& d : *list) {
      if (d.id == id) return &d;
    }
  }
  return nullptr;
}

bool same_corpus(const CorpusSplits& a, const CorpusSplits& b) {
  auto same_dialogs = [](const std::vector<Dialog>& x, const std::vector<Dialog>& y) {
    if (x.size() != y.size()) return false;
    for (std::size_t i = 0; i < x.size(); ++i) {
      if (x[i].id != y[i].id || x[i].turns != y[i].turns ||
          x[i].kb.user_pieces != y[i].kb.user_pieces) {
        return false;
      }
    }
    return true;
  };
  if (!a.global || !b.global) return a.global == b.global;
  return a.global->faq == b.global->faq && a.global->product == b.global->product &&
         same_dialogs(a.train, b.train) && same_dialogs(a.dev, b.dev) &&
         same_dialogs(a.test, b.test);
}

// --- context --------------------------------------------------------------------

Context::Context(std::vector<Segment> segments, RoleMarkers markers)
    : segments_(std::move(segments)), markers_(std::move(markers)) {
  for (std::size_t i = 0; i < segments_.size(); ++i) {
    if (i > 0) rendered_.push_back('\n');
    rendered_ += segments_[i].role == Role::kUser ? markers_.user : markers_.system;
    rendered_ += segments_[i].text;
  }
}

const std::string& Context::last_user_utterance() const {
  static const std::string kEmpty;
  for (auto it = segments_.rbegin(); it != segments_.rend(); ++it) {
    if (it->role == Role::kUser) return it->text;
  }
  return kEmpty;
}

Context Context::truncated(std::size_t token_budget) const {
  if (segments_.empty()) return *this;
  auto cost = [&](const Segment& s) {
    return count_tokens(s.role == Role::kUser ? markers_.user : markers_.system) +
           count_tokens(s.text);
  };
  std::size_t used = cost(segments_.back());
  std::size_t first = segments_.size() - 1;
  while (first > 0) {
    const std::size_t c = cost(segments_[first - 1]);
    if (used + c > token_budget) break;
    used += c;
    --first;
  }
  if (first == 0) return *this;
  return Context(std::vector<Segment>(segments_.begin() + static_cast<std::ptrdiff_t>(first),
                                      segments_.end()),
                 markers_);
}

Context build_context(const Dialog& dialog, int t, const RoleMarkers& markers) {
  if (t < 1 || t > static_cast<int>(dialog.turns.size())) {
    fail(ErrorCode::kInvalidArgument, "turn index " + std::to_string(t) + " out of range [1, " +
                                          std::to_string(dialog.turns.size()) + "] for dialog " +
                                          dialog.id);
  }
  std::vector<Segment> segs;
  segs.reserve(static_cast<std::size_t>(2 * t - 1));
  for (int i = 0; i < t; ++i) {
    const Turn& turn = dialog.turns[static_cast<std::size_t>(i)];
    segs.push_back({Role::kUser, turn.user});
    if (i + 1 < t) segs.push_back({Role::kSystem, turn.response});
  }
  return Context(std::move(segs), markers);
}

// --- serialization --------------------------------------------------------------

json piece_to_json(const KnowledgePiece& p) {
  return json{{"id", p.id},
              {"source", source_name(p.source)},
              {"title", p.title},
              {"body", p.body},
              {"values", p.values}};
}

KnowledgePiece piece_from_json(const json& j) {
  KnowledgePiece p;
  p.id = j.at("id").get<std::string>();
  p.source = parse_source(j.at("source").get<std::string>());
  p.title = j.value("title", "");
  p.body = j.value("body", "");
  if (j.contains("values")) p.values = j.at("values").get<std::vector<std::string>>();
  return p;
}

namespace {

void validate_piece(const KnowledgePiece& p) {
  if (p.id.empty()) fail(ErrorCode::kParse, "knowledge piece with empty id");
  const std::string text = p.title + " " + p.body;
  for (const auto& v : p.values) {
    if (!contains(text, v)) {
      fail(ErrorCode::kParse, "value \"" + v + "\" of piece " + p.id +
                                  " is not a substring of its title/body");
    }
  }
}

std::vector<KnowledgePiece> load_pieces(const fs::path& file, Source expected) {
  std::ifstream in(file);
  if (!in) fail(ErrorCode::kIo, "cannot open " + file.string());
  std::vector<KnowledgePiece> out;
  std::set<std::string> seen;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    KnowledgePiece p;
    try {
      p = piece_from_json(json::parse(line));
      validate_piece(p);
    } catch (const std::exception& e) {
      fail(ErrorCode::kParse, file.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
    if (p.source != expected) {
      fail(ErrorCode::kParse, file.string() + ":" + std::to_string(lineno) + ": piece " + p.id +
                                  " has source " + source_name(p.source) + ", expected " +
                                  source_name(expected));
    }
    if (!seen.insert(p.id).second) {
      fail(ErrorCode::kParse,
           file.string() + ":" + std::to_string(lineno) + ": duplicate piece id " + p.id);
    }
    out.push_back(std::move(p));
  }
  return out;
}

}  // namespace

Tokenizer corpus_tokenizer(const CorpusSplits& corpus, const std::vector<std::string>& extra) {
  std::vector<std::string> texts(extra);
  RoleMarkers markers;
  texts.push_back(markers.user + markers.system);
  for (const auto& d : corpus.train) {
    for (const auto& t : d.turns) {
      texts.push_back(t.user);
      texts.push_back(t.response);
    }
  }
  for (const auto* split : {&corpus.train, &corpus.dev, &corpus.test}) {
    for (const auto& d : *split) {
      for (const auto& p : d.kb.user_pieces) texts.push_back(p.encoder_text());
    }
  }
  if (corpus.global) {
    for (const auto& p : corpus.global->faq) texts.push_back(p.encoder_text());
    for (const auto& p : corpus.global->product) texts.push_back(p.encoder_text());
  }
  return Tokenizer::build(texts);
}

void validate_dialog(const Dialog& d) {
  if (d.turns.empty()) fail(ErrorCode::kParse, "dialog " + d.id + " has no turns");
  std::set<std::string> ids;
  for (const auto& p : d.kb.user_pieces) {
    validate_piece(p);
    if (p.source != Source::kUser) {
      fail(ErrorCode::kParse, "dialog " + d.id + ": kb_user piece " + p.id + " has source " +
                                  source_name(p.source));
    }
    if (!ids.insert(p.id).second || (d.kb.global && d.kb.global->find(p.id))) {
      fail(ErrorCode::kParse, "dialog " + d.id + ": duplicate knowledge id " + p.id);
    }
  }
  for (std::size_t i = 0; i < d.turns.size(); ++i) {
    const Turn& t = d.turns[i];
    if (t.index != static_cast<int>(i) + 1) {
      fail(ErrorCode::kParse, "dialog " + d.id + ": turn indices must be consecutive from 1, got " +
                                  std::to_string(t.index) + " at position " + std::to_string(i + 1));
    }
    const auto want = source_for(t.decision);
    for (const auto& id : t.gold_ids) {
      const KnowledgePiece* p = d.kb.find(id);
      if (p == nullptr) {
        fail(ErrorCode::kNotFound, "dialog " + d.id + " turn " + std::to_string(t.index) +
                                       ": unknown knowledge id \"" + id + "\"");
      }
      if (want && p->source != *want) {
        fail(ErrorCode::kParse, "dialog " + d.id + " turn " + std::to_string(t.index) +
                                    ": decision " + decision_name(t.decision) +
                                    " but gold piece " + id + " has source " +
                                    source_name(p->source));
      }
    }
  }
}

CorpusSplits load_corpus(const fs::path& path) {
  fs::path dir = path;
  fs::path dialogs_file = path / "dialogs.jsonl";
  if (fs::is_regular_file(path)) {
    dir = path.parent_path();
    dialogs_file = path;
  }
  auto global = std::make_shared<GlobalKnowledge>();
  global->faq = load_pieces(dir / "faq.jsonl", Source::kFaq);
  global->product = load_pieces(dir / "product.jsonl", Source::kProduct);
  global->reindex();
  for (const auto& p : global->product) {
    if (std::any_of(global->faq.begin(), global->faq.end(),
                    [&](const KnowledgePiece& f) { return f.id == p.id; })) {
      fail(ErrorCode::kParse, "piece id " + p.id + " appears in both faq and product lists");
    }
  }

  std::ifstream in(dialogs_file);
  if (!in) fail(ErrorCode::kIo, "cannot open " + dialogs_file.string());
  CorpusSplits out;
  out.global = global;
  std::set<std::string> dialog_ids;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    const std::string where = dialogs_file.string() + ":" + std::to_string(lineno) + ": ";
    Dialog d;
    std::string split;
    try {
      const json j = json::parse(line);
      d.id = j.at("id").get<std::string>();
      split = j.value("split", "train");
      d.kb.global = global;
      if (j.contains("kb_user")) {
        for (const auto& pj : j.at("kb_user")) d.kb.user_pieces.push_back(piece_from_json(pj));
      }
      for (const auto& tj : j.at("turns")) {
        Turn t;
        t.index = tj.at("t").get<int>();
        t.user = tj.at("user").get<std::string>();
        t.response = tj.at("response").get<std::string>();
        if (tj.contains("decision") && !tj.at("decision").is_null()) {
          t.decision = parse_decision(tj.at("decision").get<std::string>());
        }
        if (tj.contains("gold_ids") && !tj.at("gold_ids").is_null()) {
          t.gold_ids = tj.at("gold_ids").get<std::vector<std::string>>();
        }
        d.turns.push_back(std::move(t));
      }
    } catch (const Error& e) {
      fail(e.code() == ErrorCode::kNotFound ? e.code() : ErrorCode::kParse, where + e.what());
    } catch (const std::exception& e) {
      fail(ErrorCode::kParse, where + "malformed record: " + e.what());
    }
    try {
      validate_dialog(d);
    } catch (const Error& e) {
      fail(e.code(), where + e.what());
    }
    if (!dialog_ids.insert(d.id).second) fail(ErrorCode::kParse, where + "duplicate dialog id " + d.id);
    if (split == "train") {
      out.train.push_back(std::move(d));
    } else if (split == "dev") {
      out.dev.push_back(std::move(d));
    } else if (split == "test") {
      out.test.push_back(std::move(d));
    } else {
      fail(ErrorCode::kParse, where + "unknown split \"" + split + "\"");
    }
  }
  return out;
}

void save_corpus(const CorpusSplits& corpus, const fs::path& dir) {
  fs::create_directories(dir);
  auto write_pieces = [&](const fs::path& file, const std::vector<KnowledgePiece>& pieces) {
    std::ofstream out(file, std::ios::binary);
    if (!out) fail(ErrorCode::kIo, "cannot write " + file.string());
    for (const auto& p : pieces) out << piece_to_json(p).dump() << '\n';
  };
  write_pieces(dir / "faq.jsonl", corpus.global ? corpus.global->faq : kNoPieces);
  write_pieces(dir / "product.jsonl", corpus.global ? corpus.global->product : kNoPieces);

  std::ofstream out(dir / "dialogs.jsonl", std::ios::binary);
  if (!out) fail(ErrorCode::kIo, "cannot write " + (dir / "dialogs.jsonl").string());
  auto write_split = [&](const std::vector<Dialog>& dialogs, const char* name) {
    for (const auto& d : dialogs) {
      json turns = json::array();
      for (const auto& t : d.turns) {
        turns.push_back({{"t", t.index},
                         {"user", t.user},
                         {"response", t.response},
                         {"decision", decision_name(t.decision)},
                         {"gold_ids", t.gold_ids}});
      }
      json kb = json::array();
      for (const auto& p : d.kb.user_pieces) kb.push_back(piece_to_json(p));
      out << json{{"id", d.id}, {"split", name}, {"turns", turns}, {"kb_user", kb}}.dump()
          << '\n';
    }
  };
  write_split(corpus.train, "train");
  write_split(corpus.dev, "dev");
  write_split(corpus.test, "test");
}

// --- synthetic corpus ---------------------------------------------------------

SynthSpec SynthSpec::from_json(const json& j) {
  SynthSpec s;
  s.n_dialogs = j.value("n_dialogs", s.n_dialogs);
  s.n_faq = j.value("n_faq", s.n_faq);
  s.n_product = j.value("n_product", s.n_product);
  s.min_turns = j.value("min_turns", s.min_turns);
  s.max_turns = j.value("max_turns", s.max_turns);
  if (j.contains("decision_mix")) {
    const auto& m = j.at("decision_mix");
    for (std::size_t i = 0; i < kAllDecisions.size(); ++i) {
      s.decision_mix[i] = m.value(decision_name(kAllDecisions[i]), s.decision_mix[i]);
    }
  }
  s.train_ratio = j.value("train_ratio", s.train_ratio);
  s.dev_ratio = j.value("dev_ratio", s.dev_ratio);
  s.compare_prob = j.value("compare_prob", s.compare_prob);
  s.product_families = j.value("product_families", s.product_families);
  s.product_tiers = j.value("product_tiers", s.product_tiers);
  s.faq_services = j.value("faq_services", s.faq_services);
  s.faq_actions = j.value("faq_actions", s.faq_actions);
  if (j.contains("markers")) {
    s.markers.user = j.at("markers").value("user", s.markers.user);
    s.markers.system = j.at("markers").value("system", s.markers.system);
  }
  return s;
}

json SynthSpec::to_json() const {
  json mix;
  for (std::size_t i = 0; i < kAllDecisions.size(); ++i) {
    mix[decision_name(kAllDecisions[i])] = decision_mix[i];
  }
  return json{{"n_dialogs", n_dialogs},
              {"n_faq", n_faq},
              {"n_product", n_product},
              {"min_turns", min_turns},
              {"max_turns", max_turns},
              {"decision_mix", mix},
              {"train_ratio", train_ratio},
              {"dev_ratio", dev_ratio},
              {"compare_prob", compare_prob},
              {"product_families", product_families},
              {"product_tiers", product_tiers},
              {"faq_services", faq_services},
              {"faq_actions", faq_actions},
              {"markers", {{"user", markers.user}, {"system", markers.system}}}};
}

namespace {

struct ProductFacts {
  std::string family;
  int tier = 0;
  int data_gb = 0;
  int minutes = 0;
  std::string title() const { return family + " " + std::to_string(tier) + " plan"; }
  std::string price() const { return std::to_string(tier) + "yuan"; }
  std::string data() const { return std::to_string(data_gb) + "GB"; }
  std::string mins() const { return std::to_string(minutes) + "min"; }
};

struct FaqFacts {
  std::string service;
  std::string action;
  std::string code;
};

std::string slug(std::string s) {
  for (char& c : s) {
    if (c == ' ') c = '_';
    if (c >= 'A' && c <= 'Z') c = static_cast<char>(c - 'A' + 'a');
  }
  return s;
}

template <typename T>
const T& pick(Rng& rng, const std::vector<T>& v) {
  return v[rng.uniform(v.size())];
}

// Fills "{a}" style slots.
std::string fill(std::string tpl, const std::vector<std::pair<std::string, std::string>>& slots) {
  for (const auto& [key, value] : slots) {
    const std::string pat = "{" + key + "}";
    for (std::size_t pos = tpl.find(pat); pos != std::string::npos; pos = tpl.find(pat, pos)) {
      tpl.replace(pos, pat.size(), value);
      pos += value.size();
    }
  }
  return tpl;
}

struct Utterance {
  std::string user;
  std::string response;
};

const std::vector<Utterance> kProductTemplates = {
    {"how much is the {title}?", "the {title} costs {price} per month."},
    {"how much data does the {title} include?", "the {title} includes {data} of data per month."},
    {"tell me about the {title}.",
     "the {title} costs {price} per month and includes {data} data and {mins} of calls."},
    {"how many call minutes come with the {title}?", "the {title} comes with {mins} of calls."},
    {"what is the monthly fee of the {title}?", "the monthly fee of the {title} is {price}."},
};

const std::vector<Utterance> kCompareTemplates = {
    {"what is the difference between the {a} and the {b}?",
     "the {a} costs {pa} with {da} data, while the {b} costs {pb} with {db} data."},
    {"should I choose the {a} or the {b}?",
     "the {a} is {pa} for {da} data, and the {b} is {pb} for {db} data."},
};

const std::vector<Utterance> kFaqTemplates = {
    {"how can I {action} {service}?", "please send {code} to 10086 to {action} {service}."},
    {"I want to {action} my {service}, what should I do?",
     "you can send {code} to 10086 to {action} {service}."},
    {"is there a code to {action} {service}?", "yes, send {code} to 10086 to {action} {service}."},
};

struct UserSlot {
  std::string title;
  std::string body;  // contains {v}
  std::vector<Utterance> templates;
};

const std::vector<UserSlot> kUserSlots = {
    {"data balance",
     "remaining data this month is {v}.",
     {{"how much data do I have left?", "your remaining data this month is {v}."},
      {"what is my remaining data balance?", "you still have {v} of data left this month."},
      {"can you check my data balance?", "sure, your remaining data this month is {v}."}}},
    {"monthly bill",
     "the bill for this month is {v}.",
     {{"how much is my bill this month?", "your bill for this month is {v}."},
      {"what do I owe this month?", "you owe {v} for this month."},
      {"can you check my monthly bill?", "sure, your bill for this month is {v}."}}},
    {"current plan",
     "the user is subscribed to the {v}.",
     {{"which plan am I on?", "you are currently on the {v}."},
      {"what is my current plan?", "your current plan is the {v}."}}},
    {"reward points",
     "the reward points balance is {v}.",
     {{"how many reward points do I have?", "you have {v} of reward points available."},
      {"what is my points balance?", "your points balance is {v}."}}},
};

const std::vector<Utterance> kGreetings = {
    {"hello.", "hello, how can I help you today?"},
    {"hi, I need some help.", "hi, what can I do for you?"},
    {"good morning.", "good morning, how may I help you?"},
};

const std::vector<Utterance> kClosings = {
    {"thanks.", "you are welcome, anything else I can help with?"},
    {"ok, got it.", "glad to help, is there anything else?"},
    {"thank you, that is all.", "thank you for calling, have a nice day."},
    {"can you say that again?", "of course, please let me know which part is unclear."},
};

std::string random_code(Rng& rng) {
  std::string code;
  for (int i = 0; i < 4; ++i) code.push_back(static_cast<char>('A' + rng.uniform(26)));
  return code;
}

}  // namespace

CorpusSplits synth_corpus(const SynthSpec& spec, std::uint64_t seed) {
  if (spec.n_dialogs <= 0) fail(ErrorCode::kInvalidArgument, "synth spec needs n_dialogs > 0");
  if (spec.min_turns < 1 || spec.max_turns < spec.min_turns) {
    fail(ErrorCode::kInvalidArgument, "synth spec has an invalid turn range");
  }
  const double w_product = spec.decision_mix[1];
  const double w_faq = spec.decision_mix[2];
  if (w_product > 0 && spec.n_product <= 0) {
    fail(ErrorCode::kInvalidArgument, "synth spec requests product turns but has zero product pieces");
  }
  if (w_faq > 0 && spec.n_faq <= 0) {
    fail(ErrorCode::kInvalidArgument, "synth spec requests FAQ turns but has zero FAQ pieces");
  }
  if (spec.n_product > 0 && spec.product_families.empty()) {
    fail(ErrorCode::kInvalidArgument, "synth spec has no product families");
  }
  const std::size_t product_combos = spec.product_families.size() * spec.product_tiers.size();
  const std::size_t faq_combos = spec.faq_services.size() * spec.faq_actions.size();
  if (static_cast<std::size_t>(spec.n_product) > product_combos ||
      static_cast<std::size_t>(spec.n_faq) > faq_combos) {
    fail(ErrorCode::kInvalidArgument, "synth spec asks for more pieces than its vocabulary allows");
  }

  Rng rng(seed);
  auto global = std::make_shared<GlobalKnowledge>();

  // Products.
  std::vector<ProductFacts> products;
  {
    std::vector<std::pair<std::size_t, std::size_t>> combos;
    for (std::size_t f = 0; f < spec.product_families.size(); ++f) {
      for (std::size_t t = 0; t < spec.product_tiers.size(); ++t) combos.emplace_back(f, t);
    }
    rng.shuffle(combos);
    const std::vector<int> data_options = {5, 10, 15, 20, 30, 40, 50, 60, 80, 100};
    const std::vector<int> minute_options = {100, 200, 300, 500, 800, 1000};
    for (int i = 0; i < spec.n_product; ++i) {
      ProductFacts pf;
      pf.family = spec.product_families[combos[static_cast<std::size_t>(i)].first];
      pf.tier = spec.product_tiers[combos[static_cast<std::size_t>(i)].second];
      pf.data_gb = pick(rng, data_options);
      pf.minutes = pick(rng, minute_options);
      products.push_back(pf);
      KnowledgePiece p;
      p.id = "prod_" + slug(pf.family) + "_" + std::to_string(pf.tier);
      p.source = Source::kProduct;
      p.title = pf.title();
      p.body = "monthly fee " + pf.price() + ", includes " + pf.data() + " data and " + pf.mins() +
               " of calls.";
      p.values = {pf.price(), pf.data(), pf.mins()};
      global->product.push_back(std::move(p));
    }
  }

  // FAQ entries.
  std::vector<FaqFacts> faqs;
  {
    std::vector<std::pair<std::size_t, std::size_t>> combos;
    for (std::size_t s = 0; s < spec.faq_services.size(); ++s) {
      for (std::size_t a = 0; a < spec.faq_actions.size(); ++a) combos.emplace_back(s, a);
    }
    rng.shuffle(combos);
    std::set<std::string> codes;
    for (int i = 0; i < spec.n_faq; ++i) {
      FaqFacts ff;
      ff.service = spec.faq_services[combos[static_cast<std::size_t>(i)].first];
      ff.action = spec.faq_actions[combos[static_cast<std::size_t>(i)].second];
      do {
        ff.code = random_code(rng);
      } while (!codes.insert(ff.code).second);
      faqs.push_back(ff);
      KnowledgePiece p;
      p.id = "faq_" + slug(ff.service) + "_" + ff.action;
      p.source = Source::kFaq;
      p.title = "how to " + ff.action + " " + ff.service;
      p.body = "send " + ff.code + " to 10086 to " + ff.action + " " + ff.service + ".";
      p.values = {ff.code};
      global->faq.push_back(std::move(p));
    }
  }
  global->reindex();

  CorpusSplits out;
  out.global = global;
  const int n_train = static_cast<int>(spec.n_dialogs * spec.train_ratio + 0.5);
  const int n_dev = static_cast<int>(spec.n_dialogs * spec.dev_ratio + 0.5);
  const std::vector<double> mix(spec.decision_mix.begin(), spec.decision_mix.end());

  char idbuf[32];
  for (int n = 0; n < spec.n_dialogs; ++n) {
    std::snprintf(idbuf, sizeof idbuf, "d%04d", n + 1);
    Dialog d;
    d.id = idbuf;
    d.kb.global = global;

    // Per-dialog user facts.
    std::vector<std::string> user_values(kUserSlots.size());
    user_values[0] = std::to_string(rng.range(1, 40)) + "GB";
    user_values[1] = std::to_string(5 * rng.range(6, 40)) + "yuan";
    user_values[2] = products.empty()
                         ? std::string("Basic 8 plan")
                         : products[rng.uniform(products.size())].title();
    user_values[3] = std::to_string(100 * rng.range(1, 30)) + "pts";
    for (std::size_t s = 0; s < kUserSlots.size(); ++s) {
      KnowledgePiece p;
      p.id = d.id + "_" + slug(kUserSlots[s].title);
      p.source = Source::kUser;
      p.title = kUserSlots[s].title;
      p.body = fill(kUserSlots[s].body, {{"v", user_values[s]}});
      p.values = {user_values[s]};
      d.kb.user_pieces.push_back(std::move(p));
    }

    const int n_turns = static_cast<int>(rng.range(spec.min_turns, spec.max_turns));
    for (int t = 1; t <= n_turns; ++t) {
      Turn turn;
      turn.index = t;
      turn.decision = kAllDecisions[rng.categorical(mix)];
      switch (turn.decision) {
        case Decision::kNoSearch: {
          const auto& u = t == 1 ? pick(rng, kGreetings) : pick(rng, kClosings);
          turn.user = u.user;
          turn.response = u.response;
          break;
        }
        case Decision::kSearchProduct: {
          const std::size_t a = rng.uniform(products.size());
          if (products.size() > 1 && rng.uniform01() < spec.compare_prob) {
            std::size_t b = rng.uniform(products.size() - 1);
            if (b >= a) ++b;
            const auto& pa = products[a];
            const auto& pb = products[b];
            const auto& u = pick(rng, kCompareTemplates);
            const std::vector<std::pair<std::string, std::string>> slots = {
                {"a", pa.title()}, {"b", pb.title()}, {"pa", pa.price()},
                {"pb", pb.price()}, {"da", pa.data()}, {"db", pb.data()}};
            turn.user = fill(u.user, slots);
            turn.response = fill(u.response, slots);
            turn.gold_ids = {global->product[a].id, global->product[b].id};
          } else {
            const auto& pf = products[a];
            const auto& u = pick(rng, kProductTemplates);
            const std::vector<std::pair<std::string, std::string>> slots = {
                {"title", pf.title()}, {"price", pf.price()}, {"data", pf.data()},
                {"mins", pf.mins()}};
            turn.user = fill(u.user, slots);
            turn.response = fill(u.response, slots);
            turn.gold_ids = {global->product[a].id};
          }
          break;
        }
        case Decision::kSearchFaq: {
          const std::size_t i = rng.uniform(faqs.size());
          const auto& u = pick(rng, kFaqTemplates);
          const std::vector<std::pair<std::string, std::string>> slots = {
              {"action", faqs[i].action}, {"service", faqs[i].service}, {"code", faqs[i].code}};
          turn.user = fill(u.user, slots);
          turn.response = fill(u.response, slots);
          turn.gold_ids = {global->faq[i].id};
          break;
        }
        case Decision::kSearchPersonal: {
          const std::size_t s = rng.uniform(kUserSlots.size());
          const auto& u = pick(rng, kUserSlots[s].templates);
          turn.user = u.user;
          turn.response = fill(u.response, {{"v", user_values[s]}});
          turn.gold_ids = {d.kb.user_pieces[s].id};
          break;
        }
      }
      d.turns.push_back(std::move(turn));
    }
    validate_dialog(d);
    if (n < n_train) {
      out.train.push_back(std::move(d));
    } else if (n < n_train + n_dev) {
      out.dev.push_back(std::move(d));
    } else {
      out.test.push_back(std::move(d));
    }
  }
  return out;
}

}  // namespace kaft
