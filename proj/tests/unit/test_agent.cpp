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

#include <algorithm>
#include <set>
#include <tuple>

#include "doctest.h"
#include "kaft/agent.hpp"
#include "kaft/error.hpp"
#include "kaft/experiment.hpp"
#include "support.hpp"

using namespace kaft;

namespace {

struct Loaded {
  CorpusSplits corpus;
  Bundle bundle;
  std::shared_ptr<const SearchApis> apis;
};

const Loaded& loaded() {
  static const Loaded l = [] {
    const auto& tb = kaft::testing::tiny_bundle();
    CorpusSplits c = load_corpus(tb.corpus_dir);
    Bundle b = Bundle::open(tb.bundle_dir);
    auto apis = std::make_shared<const SearchApis>(b.retriever(RetrieverRole::kProduct),
                                                   b.retriever(RetrieverRole::kFaq), 5);
    return Loaded{std::move(c), std::move(b), std::move(apis)};
  }();
  return l;
}

}  // namespace

TEST_CASE("decision completions") {
  auto parsed = [](const std::string& s) { return parse_decision_completion(s); };
  CHECK(parsed("I think: Search FAQ.").decision == Decision::kSearchFaq);
  CHECK_FALSE(parsed("I think: Search FAQ.").fallback);
  CHECK(parsed("  search product ").decision == Decision::kSearchProduct);
  CHECK(parsed("SEARCH_PERSONAL").decision == Decision::kSearchPersonal);
  CHECK(parsed("No search").decision == Decision::kNoSearch);
  const DecisionResult banana = parsed("banana");
  CHECK(banana.decision == Decision::kNoSearch);
  CHECK(banana.fallback);
  CHECK(banana.raw == "banana");
  CHECK(parsed("").fallback);
}

TEST_CASE("constrained scoring") {
  const std::array<double, 4> s{-3.0, -1.0, -2.0, -1.5};
  CHECK(argmax_decision(s) == Decision::kSearchProduct);
  CHECK(argmax_decision({-1.0, -1.0, -1.0, -1.0}) == Decision::kNoSearch);
  CHECK(argmax_decision({-5.0, -2.0, -2.0, -9.0}) == Decision::kSearchProduct);
  // Scaling every label probability by the same factor shifts the log scores
  // uniformly and leaves the argmax alone.
  for (double shift : {-7.5, -0.1, 0.0, 3.0, 40.0}) {
    std::array<double, 4> t = s;
    for (double& v : t) v += shift;
    CHECK(argmax_decision(t) == argmax_decision(s));
  }
}

TEST_CASE("per-class decision accuracy") {
  using D = Decision;
  const DecisionAccuracy acc =
      decision_accuracy({D::kSearchPersonal, D::kSearchFaq, D::kSearchFaq},
                        {D::kSearchPersonal, D::kSearchPersonal, D::kSearchFaq});
  CHECK(acc.accuracy.at("personal") == doctest::Approx(0.5));
  CHECK(acc.accuracy.at("faq") == doctest::Approx(1.0));
  CHECK(acc.accuracy.at("overall") == doctest::Approx(2.0 / 3.0));
  CHECK(acc.support.at("personal") == 2);
  CHECK(acc.accuracy.count("product") == 0);
  CHECK_THROWS_AS(decision_accuracy({D::kNoSearch}, {}), Error);
}

TEST_CASE("decision prefix keeps the last utterance") {
  const CorpusSplits c = kaft::testing::small_corpus(4);
  const auto tok = bundle_tokenizer(c);
  const Dialog& d = c.train.front();
  const Context ctx = build_context(d, static_cast<int>(d.turns.size()));
  const std::vector<int> full = decision_prefix(*tok, ctx, 10000);
  const std::vector<int> cut = decision_prefix(*tok, ctx, 4);
  CHECK(cut.size() <= full.size());
  const std::vector<int> last = tok->encode(d.turns.back().user);
  REQUIRE(cut.size() > last.size());
  CHECK(std::search(cut.begin(), cut.end(), last.begin(), last.end()) != cut.end());
}

TEST_CASE("search APIs") {
  const Loaded& l = loaded();
  const Dialog& d = l.corpus.test.front();
  const Context c = build_context(d, 1);

  SUBCASE("FAQ and product match a scoped top-k") {
    for (auto [decision, role, source] :
         {std::tuple{Decision::kSearchFaq, RetrieverRole::kFaq, Source::kFaq},
          std::tuple{Decision::kSearchProduct, RetrieverRole::kProduct, Source::kProduct}}) {
      const ApiResult r = l.apis->call(decision, d, c);
      auto model = l.bundle.retriever(role);
      IndexBuilder indexes(*model, {source});
      const auto top = retrieve_topk(*model, *indexes.for_dialog(d), c, 5);
      REQUIRE(r.pieces.size() == top.size());
      for (std::size_t i = 0; i < top.size(); ++i) {
        CHECK(r.pieces[i].id == top[i].id);
        CHECK(r.pieces[i].source == source);
      }
    }
  }
  SUBCASE("personal returns every user piece") {
    const ApiResult r = l.apis->call(Decision::kSearchPersonal, d, c);
    CHECK(r.api == "personal");
    REQUIRE(r.pieces.size() == d.kb.user_pieces.size());
    for (std::size_t i = 0; i < r.pieces.size(); ++i) CHECK(r.pieces[i].id == d.kb.user_pieces[i].id);
  }
  SUBCASE("no search gives no knowledge") {
    const ApiResult r = l.apis->call(Decision::kNoSearch, d, c);
    CHECK(r.pieces.empty());
    CHECK(format_knowledge(r.pieces).rendered == kNoKnowledge);
  }
}

TEST_CASE("gold decisions draw knowledge from the gold source") {
  const Loaded& l = loaded();
  SystemSpec spec;
  spec.system = "agent";
  spec.test_knowledge = "gold";
  auto sys = build_system(l.bundle, l.corpus, spec, nullptr);
  int searched = 0;
  for (const Dialog& d : l.corpus.test) {
    for (const Turn& t : d.turns) {
      const TurnResult r = sys->respond(d, t.index);
      CHECK(r.trace.decision_source == "gold");
      REQUIRE(r.trace.decision.has_value());
      CHECK(*r.trace.decision == t.decision);
      const auto want = source_for(t.decision);
      if (!want) {
        CHECK(r.trace.knowledge.empty());
        continue;
      }
      ++searched;
      std::set<Source> gold_sources;
      for (const auto& id : t.gold_ids) gold_sources.insert(d.kb.find(id)->source);
      CHECK(gold_sources == std::set<Source>{*want});
      for (const auto& p : r.trace.knowledge) CHECK(p.source == *want);
    }
  }
  CHECK(searched > 0);
}

TEST_CASE("agent turns always carry one of the four decisions") {
  const Loaded& l = loaded();
  SystemSpec spec;
  spec.system = "agent";
  auto sys = build_system(l.bundle, l.corpus, spec, nullptr);
  const std::set<Decision> all(kAllDecisions.begin(), kAllDecisions.end());
  for (const Dialog& d : l.corpus.test) {
    const TurnResult r = sys->respond(d, 1);
    CHECK(r.trace.decision_source == "model");
    REQUIRE(r.trace.decision.has_value());
    CHECK(all.count(*r.trace.decision) == 1);
    CHECK(r.trace.decision_detail.contains("scores"));
  }
}

TEST_CASE("decision maker overfits a tiny corpus") {
  const CorpusSplits c = kaft::testing::small_corpus(8);
  nn::TransformerConfig body{.vocab = 0, .dim = 32, .heads = 2, .ff = 64, .layers = 1, .max_len = 128,
                             .position = "alibi"};
  const auto tok = bundle_tokenizer(c);
  body.vocab = tok->size();
  auto lm = std::make_shared<LocalCausalLM>(tok, body, 5);
  LMTrainConfig cfg;
  cfg.epochs = 60;
  cfg.batch_size = 8;
  train_decision_maker(*lm, c, 48, cfg);
  const DecisionMaker dm = DecisionMaker::finetuned(lm, 48);
  CHECK(dm.is_finetuned());
  std::vector<Decision> pred, gold;
  for (const Dialog& d : c.train) {
    for (const Turn& t : d.turns) {
      pred.push_back(dm.predict(build_context(d, t.index)).decision);
      gold.push_back(t.decision);
    }
  }
  CHECK(decision_accuracy(pred, gold).accuracy.at("overall") >= 0.95);
}
