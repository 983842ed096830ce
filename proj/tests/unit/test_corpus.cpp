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

#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "doctest.h"
#include "kaft/archive.hpp"
#include "kaft/corpus.hpp"
#include "kaft/error.hpp"
#include "support.hpp"

using namespace kaft;
using kaft::testing::make_piece;

namespace {

Dialog two_turn_dialog() {
  Dialog d;
  d.id = "x1";
  d.kb.user_pieces = {make_piece("x1_bill", Source::kUser, "monthly bill", "the bill is 50yuan.", {"50yuan"})};
  d.turns = {Turn{1, "hi", "hello, how can I help?", {}, Decision::kNoSearch},
             Turn{2, "what is my bill?", "your bill is 50yuan.", {"x1_bill"}, Decision::kSearchPersonal}};
  return d;
}

}  // namespace

TEST_CASE("context segments follow the dialog history") {
  const Dialog d = two_turn_dialog();
  const Context c1 = build_context(d, 1);
  REQUIRE(c1.segments().size() == 1);
  CHECK(c1.segments()[0] == Segment{Role::kUser, "hi"});
  const Context c2 = build_context(d, 2);
  const std::vector<Segment> want = {{Role::kUser, "hi"}, {Role::kSystem, "hello, how can I help?"},
                                     {Role::kUser, "what is my bill?"}};
  CHECK(c2.segments() == want);
  CHECK(c2.rendered() == "[USER] hi\n[SYSTEM] hello, how can I help?\n[USER] what is my bill?");
  CHECK(c2.last_user_utterance() == "what is my bill?");
}

TEST_CASE("context at turn t has 2t-1 segments") {
  const CorpusSplits c = kaft::testing::small_corpus(20);
  for (const auto& d : c.train) {
    for (const auto& t : d.turns) {
      CHECK(build_context(d, t.index).segments().size() == static_cast<std::size_t>(2 * t.index - 1));
    }
  }
}

TEST_CASE("context truncation keeps the newest whole segments") {
  const Dialog d = two_turn_dialog();
  const Context c = build_context(d, 2);
  const Context small = c.truncated(1);
  REQUIRE(small.segments().size() == 1);
  CHECK(small.segments()[0].text == "what is my bill?");
  const Context mid = c.truncated(count_tokens("[SYSTEM] hello, how can I help?") + count_tokens("[USER] what is my bill?"));
  CHECK(mid.segments().size() == 2);
  CHECK(c.truncated(1000) == c);
}

TEST_CASE("synthetic corpus is deterministic") {
  const CorpusSplits a = kaft::testing::small_corpus(30, 7);
  const CorpusSplits b = kaft::testing::small_corpus(30, 7);
  CHECK(same_corpus(a, b));
  const CorpusSplits other = kaft::testing::small_corpus(30, 8);
  CHECK_FALSE(same_corpus(a, other));
}

TEST_CASE("synthetic corpus invariants") {
  const CorpusSplits c = synth_corpus(SynthSpec{}, 7);
  CHECK(c.dialog_count() == 200);
  std::set<std::string> user_ids;
  std::map<Decision, int> counts;
  int turns = 0;
  for (const char* split : {"train", "dev", "test"}) {
    for (const auto& d : c.split(split)) {
      CHECK_NOTHROW(validate_dialog(d));
      for (const auto& p : d.kb.user_pieces) CHECK(user_ids.insert(p.id).second);
      for (const auto& t : d.turns) {
        ++counts[t.decision];
        ++turns;
        for (const auto* p : d.gold_pieces(t)) {
          REQUIRE(p != nullptr);
          CHECK(source_for(t.decision) == p->source);
        }
      }
    }
  }
  const SynthSpec spec;
  for (std::size_t i = 0; i < kAllDecisions.size(); ++i) {
    const double frac = static_cast<double>(counts[kAllDecisions[i]]) / turns;
    CHECK(std::abs(frac - spec.decision_mix[i]) <= 0.05);
  }
}

TEST_CASE("corpus round-trips through the on-disk format") {
  const CorpusSplits c = synth_corpus(SynthSpec{}, 7);
  const auto dir = kaft::testing::temp_dir("roundtrip");
  save_corpus(c, dir);
  const CorpusSplits back = load_corpus(dir);
  CHECK(same_corpus(c, back));
  CHECK(same_corpus(c, load_corpus(dir / "dialogs.jsonl")));
}

TEST_CASE("loading a small corpus file") {
  CorpusSplits c = kaft::testing::small_corpus(3);
  const auto dir = kaft::testing::temp_dir("three");
  save_corpus(c, dir);
  CHECK(load_corpus(dir).dialog_count() == 3);
}

TEST_CASE("unknown gold id is reported with its line") {
  const CorpusSplits c = kaft::testing::small_corpus(5);
  const auto dir = kaft::testing::temp_dir("badref");
  save_corpus(c, dir);
  std::string text = read_text_file(dir / "dialogs.jsonl");
  std::istringstream in(text);
  std::string line, out;
  int n = 0;
  while (std::getline(in, line)) {
    if (++n == 2) {
      auto j = nlohmann::json::parse(line);
      j["turns"][0]["gold_ids"] = {"p99"};
      j["turns"][0]["decision"] = "SEARCH_FAQ";
      line = j.dump();
    }
    out += line + "\n";
  }
  write_text_file(dir / "dialogs.jsonl", out);
  try {
    load_corpus(dir);
    FAIL("expected a parse error");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::kNotFound);
    const std::string msg = e.what();
    CHECK(msg.find("p99") != std::string::npos);
    CHECK(msg.find(":2") != std::string::npos);
  }
}

TEST_CASE("missing corpus is an io error") {
  CHECK_THROWS_AS(load_corpus("/nonexistent/kaft/corpus"), Error);
}

TEST_CASE("decision and source names") {
  for (Decision d : kAllDecisions) CHECK(parse_decision(decision_name(d)) == d);
  CHECK(std::string(decision_name(Decision::kSearchFaq)) == "SEARCH_FAQ");
  CHECK_FALSE(source_for(Decision::kNoSearch).has_value());
  CHECK(source_for(Decision::kSearchPersonal) == Source::kUser);
  CHECK_THROWS_AS(parse_source("BOGUS"), Error);
}

TEST_CASE("knowledge base lookup covers all sources") {
  const CorpusSplits c = kaft::testing::small_corpus(5);
  const Dialog& d = c.train.at(0);
  CHECK(d.kb.size() == d.kb.user_pieces.size() + c.global->faq.size() + c.global->product.size());
  const auto all = d.kb.all();
  REQUIRE(all.size() == d.kb.size());
  CHECK(all.front()->source == Source::kUser);
  CHECK(all.back()->source == Source::kProduct);
  for (const auto* p : all) CHECK(d.kb.find(p->id) == p);
  CHECK(d.kb.find("nope") == nullptr);
}
