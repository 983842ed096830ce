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

#include "doctest.h"
#include "kaft/error.hpp"
#include "kaft/generation.hpp"
#include "kaft/prompt.hpp"
#include "support.hpp"

using namespace kaft;
using kaft::testing::make_piece;

namespace {

const KnowledgePiece kA = make_piece("a", Source::kFaq, "titleA", "bodyA");
const KnowledgePiece kB = make_piece("b", Source::kProduct, "titleB", "bodyB");

GeneratorConfig small_generator() {
  GeneratorConfig g;
  g.body.dim = 32;
  g.body.heads = 2;
  g.body.ff = 64;
  g.body.layers = 1;
  g.body.max_len = 96;
  return g;
}

CorpusSplits one_turn_corpus() {
  Dialog d;
  d.id = "toy";
  d.kb.user_pieces = {make_piece("toy_bill", Source::kUser, "monthly bill", "the bill is 50yuan.", {"50yuan"})};
  d.turns = {Turn{1, "how much is my bill?", "your bill this month is 50yuan.", {"toy_bill"},
                  Decision::kSearchPersonal}};
  return kaft::testing::corpus_of({d}, {}, {});
}

std::shared_ptr<const Tokenizer> tokenizer_for(const CorpusSplits& c) {
  return std::make_shared<const Tokenizer>(corpus_tokenizer(c, model_vocab_extras()));
}

}  // namespace

TEST_CASE("knowledge formatting") {
  CHECK(format_knowledge(std::vector<KnowledgePiece>{}).rendered == "[no knowledge]");
  CHECK(format_knowledge(std::vector<KnowledgePiece>{kA}).rendered == "<k1> titleA: bodyA");
  const auto ab = format_knowledge(std::vector<KnowledgePiece>{kA, kB});
  const auto ba = format_knowledge(std::vector<KnowledgePiece>{kB, kA});
  CHECK(ab.rendered == "<k1> titleA: bodyA\n<k2> titleB: bodyB");
  CHECK(ab.rendered != ba.rendered);
  CHECK(ab.pieces.size() == 2);
}

TEST_CASE("lm examples mask everything but the continuation") {
  const LMExample ex = make_lm_example({2, 3, 9}, {11, 12});
  CHECK(ex.inputs == std::vector<int>{2, 3, 9, 11, 12});
  CHECK(ex.targets == std::vector<int>{3, 9, 11, 12, Tokenizer::kEnd});
  CHECK(ex.mask == std::vector<std::uint8_t>{0, 0, 1, 1, 1});
  CHECK_THROWS_AS(make_lm_example({}, {1}), Error);
}

TEST_CASE("labels outside the response do not change the loss") {
  const CorpusSplits c = one_turn_corpus();
  auto tok = tokenizer_for(c);
  const GeneratorConfig g = small_generator();
  const LocalCausalLM lm(tok, g.body, 4);
  const Dialog& d = c.train[0];
  const auto prefix = generator_prefix(*tok, build_context(d, 1), format_knowledge(d.gold_pieces(d.turns[0])),
                                       g.context_budget, lm.max_len());
  const LMExample ex = make_lm_example(prefix, tok->encode(d.turns[0].response));
  auto loss_of = [&](const LMExample& e) {
    nn::Tape t;
    return t.scalar(lm_example_loss(t, lm, e));
  };
  const double base = loss_of(ex);
  LMExample perturbed = ex;
  int changed = 0;
  for (std::size_t i = 0; i < perturbed.targets.size(); ++i) {
    if (perturbed.mask[i] == 0) {
      perturbed.targets[i] = (perturbed.targets[i] + 7) % tok->size();
      ++changed;
    }
  }
  REQUIRE(changed > 0);
  CHECK(loss_of(perturbed) == base);
  LMExample inside = ex;
  inside.targets.back() = Tokenizer::kUnk;
  CHECK(loss_of(inside) != base);
}

TEST_CASE("gradient check on a toy language model") {
  const CorpusSplits c = one_turn_corpus();
  auto tok = tokenizer_for(c);
  nn::TransformerConfig body{.vocab = 0, .dim = 8, .heads = 2, .ff = 16, .layers = 1, .max_len = 40,
                             .position = "alibi"};
  LocalCausalLM lm(tok, body, 6);
  const LMExample ex = make_lm_example(tok->encode("how much is my bill?"), tok->encode("50yuan."));
  for (std::size_t slot = 0; slot < lm.params().size(); ++slot) {
    CAPTURE(lm.params()[slot].name);
    CHECK(kaft::testing::grad_relative_error(lm.params(), slot, [&](nn::Tape& t) { return lm_example_loss(t, lm, ex); },
                                             1e-5, 48) <= 1e-4);
  }
}

TEST_CASE("single-example finetune reproduces the gold response") {
  const CorpusSplits c = one_turn_corpus();
  auto tok = tokenizer_for(c);
  const GeneratorConfig g = small_generator();
  LocalCausalLM lm(tok, g.body, 4);
  LMTrainConfig cfg;
  cfg.epochs = 200;
  cfg.batch_size = 1;
  const TrainCurve curve = finetune_generator(lm, g, c, oracle_knowledge(), cfg);
  CHECK(curve.final_loss < curve.initial_loss);
  const Dialog& d = c.train[0];
  const Context ctx = build_context(d, 1);
  const KnowledgeText h = format_knowledge(d.gold_pieces(d.turns[0]));
  const auto out = generate_response(lm, g, ctx, h);
  CHECK(out.text == d.turns[0].response);
  CHECK(generate_response(lm, g, ctx, h).text == out.text);
  CHECK(generate_response(lm, g, ctx, h, DecodeConfig{0}).text.empty());

  SUBCASE("archive round trip keeps the outputs") {
    const auto dir = kaft::testing::temp_dir("lm");
    lm.save(dir / "g.kaft", "generator");
    const LocalCausalLM back = LocalCausalLM::load(dir / "g.kaft", "generator");
    CHECK(back.params().fingerprint() == lm.params().fingerprint());
    CHECK(generate_response(back, g, ctx, h).text == out.text);
    CHECK_THROWS_AS(LocalCausalLM::load(dir / "g.kaft", "decision"), Error);
  }
}

TEST_CASE("zero learning rate leaves the generator unchanged") {
  const CorpusSplits c = one_turn_corpus();
  auto tok = tokenizer_for(c);
  const GeneratorConfig g = small_generator();
  LocalCausalLM lm(tok, g.body, 4);
  const std::uint64_t before = lm.params().fingerprint();
  LMTrainConfig cfg;
  cfg.epochs = 2;
  cfg.optimizer.lr = 0.0;
  finetune_generator(lm, g, c, oracle_knowledge(), cfg);
  CHECK(lm.params().fingerprint() == before);
}

TEST_CASE("different knowledge providers train different parameters") {
  const CorpusSplits c = kaft::testing::small_corpus(12);
  auto tok = tokenizer_for(c);
  const GeneratorConfig g = small_generator();
  LMTrainConfig cfg;
  cfg.epochs = 1;
  LocalCausalLM a(tok, g.body, 4), b(tok, g.body, 4);
  CHECK(a.params().fingerprint() == b.params().fingerprint());
  finetune_generator(a, g, c, oracle_knowledge(), cfg);
  finetune_generator(b, g, c, no_knowledge(), cfg);
  CHECK(a.params().fingerprint() != b.params().fingerprint());
}

TEST_CASE("continuation log-probability matches stepwise decoding") {
  const CorpusSplits c = one_turn_corpus();
  auto tok = tokenizer_for(c);
  const LocalCausalLM lm(tok, small_generator().body, 2);
  const std::vector<int> prefix = tok->encode("how much is");
  const std::vector<int> cont = tok->encode("my bill");
  nn::KvCache cache;
  const nn::RowVector first = lm.step(cache, prefix);
  const double total = lm.continuation_logprob(cache, first, cont);
  nn::KvCache walk;
  nn::RowVector logp = lm.step(walk, prefix);
  double manual = 0.0;
  for (int id : cont) {
    manual += logp(id);
    logp = lm.step(walk, {id});
  }
  CHECK(total == doctest::Approx(manual).epsilon(1e-9));
  CHECK(cache.length == static_cast<int>(prefix.size()));
}

TEST_CASE("generator prefix keeps knowledge and the last utterance") {
  const CorpusSplits c = kaft::testing::small_corpus(10);
  auto tok = tokenizer_for(c);
  const Dialog& d = c.train[0];
  const int t = static_cast<int>(d.turns.size());
  const Context ctx = build_context(d, t);
  const KnowledgeText h = format_knowledge(std::vector<KnowledgePiece>{kA});
  bool truncated = false;
  const auto ids = generator_prefix(*tok, ctx, h, 4, 512, &truncated);
  CHECK(truncated);
  CHECK(ids.front() == Tokenizer::kBos);
  CHECK(ids[1] == Tokenizer::kKnowledge);
  CHECK(ids.back() == Tokenizer::kResponse);
  const std::string text = tok->decode(ids);
  CHECK(text.find(ctx.last_user_utterance().substr(0, 5)) != std::string::npos);
  CHECK_THROWS_AS(generator_prefix(*tok, ctx, h, 4, 3), Error);
}

TEST_CASE("prompt templates") {
  const CorpusSplits c = kaft::testing::small_corpus(20);
  const Dialog& d = c.test[0];
  const Context ctx = build_context(d, 1);
  const KnowledgeText h = format_knowledge(std::vector<KnowledgePiece>{kA});

  SUBCASE("prompt grows with the number of shots") {
    std::size_t prev = 0;
    for (int n : {0, 1, 2, 3, 5, 8}) {
      const auto tpl = make_prompt_template(PromptKind::kResponse, c.train, n, 3);
      CHECK(tpl.examples.size() == static_cast<std::size_t>(n));
      const std::size_t len = build_prompt(tpl, ctx, h).size();
      CHECK(len > prev);
      prev = len;
    }
  }
  SUBCASE("zero-shot holds the instruction and the live slot only") {
    const auto tpl = make_prompt_template(PromptKind::kResponse, c.train, 0, 3);
    const std::string p = build_prompt(tpl, ctx, h);
    CHECK(p.find(tpl.instruction) == 0);
    CHECK(p.find(ctx.rendered()) != std::string::npos);
    CHECK(p.find(h.rendered) != std::string::npos);
  }
  SUBCASE("knowledge precedes the response slot and examples precede the live context") {
    const auto tpl = make_prompt_template(PromptKind::kResponse, c.train, 2, 3);
    const std::string p = build_prompt(tpl, ctx, h);
    const auto live_h = p.rfind(h.rendered);
    const auto first_example = p.find(tpl.examples[0].answer);
    CHECK(first_example < live_h);
    CHECK(p.size() > live_h + h.rendered.size());
    CHECK(p.find(tpl.examples[1].answer) < p.rfind(ctx.rendered()));
  }
  SUBCASE("seeded draws are repeatable") {
    const auto a = make_prompt_template(PromptKind::kResponse, c.train, 5, 9);
    const auto b = make_prompt_template(PromptKind::kResponse, c.train, 5, 9);
    CHECK(build_prompt(a, ctx, h) == build_prompt(b, ctx, h));
    CHECK(a.to_json() == PromptTemplate::from_json(a.to_json()).to_json());
  }
  SUBCASE("too many shots is an error") {
    CHECK_THROWS_AS(make_prompt_template(PromptKind::kResponse, c.train, 100000, 1), Error);
  }
  SUBCASE("decision prompts enumerate the four options") {
    const auto tpl = make_prompt_template(PromptKind::kDecision, c.train, 2, 3);
    const std::string p = build_decision_prompt(tpl, ctx);
    for (Decision dec : kAllDecisions) CHECK(p.find(decision_prompt_label(dec)) != std::string::npos);
  }
}

TEST_CASE("knowledge subsetting keeps a nonempty proper prefix") {
  const CorpusSplits c = kaft::testing::small_corpus(6);
  auto tok = tokenizer_for(c);
  GeneratorConfig g = small_generator();
  g.body.max_len = 192;
  LocalCausalLM lm(tok, g.body, 4);
  const KnowledgePiece kC = make_piece("c", Source::kFaq, "titleC", "bodyC");
  int calls = 0;
  const KnowledgeProvider three = [&](const Dialog&, const Turn&) {
    ++calls;
    return std::vector<KnowledgePiece>{kA, kB, kC};
  };
  const KnowledgeProvider one = [](const Dialog&, const Turn&) { return std::vector<KnowledgePiece>{kA}; };
  std::size_t turns = 0;
  for (const auto& d : c.train) turns += d.turns.size();
  const int one_len = static_cast<int>(tok->encode(format_knowledge({kA}).rendered).size());
  const int full_len = static_cast<int>(tok->encode(format_knowledge({kA, kB, kC}).rendered).size());

  g.knowledge_subset_prob = 0.0;
  const auto full = generator_examples(lm, g, c.train, three, 3);
  const auto single = generator_examples(lm, g, c.train, one, 3);
  CHECK(calls == static_cast<int>(turns));
  g.knowledge_subset_prob = 1.0;
  const auto cut = generator_examples(lm, g, c.train, three, 3);
  const auto cut_again = generator_examples(lm, g, c.train, three, 3);
  CHECK(calls == static_cast<int>(3 * turns));
  // A lone piece is never dropped.
  const auto single_cut = generator_examples(lm, g, c.train, one, 3);
  REQUIRE(full.size() == turns);
  REQUIRE(cut.size() == turns);
  for (std::size_t i = 0; i < turns; ++i) {
    const int delta = static_cast<int>(full[i].inputs.size()) - static_cast<int>(cut[i].inputs.size());
    CHECK(delta > 0);
    CHECK(delta <= full_len - one_len);
    CHECK(cut[i].inputs == cut_again[i].inputs);
    CHECK(single_cut[i].inputs == single[i].inputs);
  }
  CHECK_THROWS_AS(GeneratorConfig::from_json({{"knowledge_subset_prob", 1.5}}), Error);
}
