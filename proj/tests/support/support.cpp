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

#include "support.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <mutex>
#include <unistd.h>

namespace kaft::testing {

namespace fs = std::filesystem;

namespace {

// Per-process scratch root, removed at exit.
struct ScratchRoot {
  fs::path path = fs::temp_directory_path() / ("kaft-test-" + std::to_string(::getpid()));
  ~ScratchRoot() {
    std::error_code ec;
    fs::remove_all(path, ec);
  }
};

}  // namespace

fs::path temp_dir(const std::string& tag) {
  static ScratchRoot root;
  static std::atomic<int> counter{0};
  const fs::path dir = root.path / (std::to_string(counter++) + "-" + tag);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

CorpusSplits small_corpus(int n_dialogs, std::uint64_t seed) {
  SynthSpec spec;
  spec.n_dialogs = n_dialogs;
  return synth_corpus(spec, seed);
}

KnowledgePiece make_piece(const std::string& id, Source source, const std::string& title, const std::string& body,
                          std::vector<std::string> values) {
  KnowledgePiece p;
  p.id = id;
  p.source = source;
  p.title = title;
  p.body = body;
  p.values = std::move(values);
  return p;
}

CorpusSplits corpus_of(std::vector<Dialog> dialogs, std::vector<KnowledgePiece> faq,
                       std::vector<KnowledgePiece> product) {
  auto global = std::make_shared<GlobalKnowledge>();
  global->faq = std::move(faq);
  global->product = std::move(product);
  global->reindex();
  CorpusSplits c;
  c.global = global;
  for (auto& d : dialogs) d.kb.global = global;
  c.train = dialogs;
  c.dev = dialogs;
  c.test = dialogs;
  return c;
}

BundleConfig tiny_bundle_config(std::uint64_t seed) {
  BundleConfig c;
  c.seed = seed;
  c.retriever.encoder.body.dim = 32;
  c.retriever.encoder.body.heads = 2;
  c.retriever.encoder.body.ff = 64;
  c.retriever.encoder.body.layers = 1;
  c.retriever.encoder.out_dim = 32;
  c.retriever_train.epochs = 3;
  c.generator.body.dim = 32;
  c.generator.body.heads = 2;
  c.generator.body.ff = 64;
  c.generator.body.layers = 1;
  c.generator_train.epochs = 2;
  c.decision.dim = 32;
  c.decision.heads = 2;
  c.decision.ff = 64;
  c.decision.layers = 1;
  c.decision_train.epochs = 2;
  c.decode.max_new_tokens = 24;
  return c;
}

const TinyBundle& tiny_bundle() {
  static std::once_flag once;
  static TinyBundle tb;
  std::call_once(once, [] {
    const fs::path root = temp_dir("tiny-bundle");
    tb.corpus_dir = root / "corpus";
    tb.bundle_dir = root / "bundle";
    const CorpusSplits corpus = small_corpus(40, 7);
    save_corpus(corpus, tb.corpus_dir);
    BundleConfig cfg = tiny_bundle_config();
    cfg.llm.cache_dir = (root / "llm-cache").string();
    const Bundle b = Bundle::create(tb.bundle_dir, cfg);
    train_retriever_step(b, corpus, RetrieverRole::kAll);
    train_retriever_step(b, corpus, RetrieverRole::kProduct);
    train_retriever_step(b, corpus, RetrieverRole::kFaq);
    train_decision_step(b, corpus);
    for (const char* k : {"none", "retrieved", "oracle", "agent"}) train_generator_step(b, corpus, k);
  });
  return tb;
}

double grad_relative_error(nn::ParameterSet& params, std::size_t slot,
                           const std::function<nn::Var(nn::Tape&)>& loss, double eps, int max_entries,
                           double* analytic_norm) {
  nn::Gradients grads(params);
  {
    nn::Tape tape(&grads);
    tape.backward(loss(tape));
  }
  nn::Matrix& w = params[slot].value;
  const Eigen::Index n = w.size();
  const Eigen::Index stride = std::max<Eigen::Index>(1, n / max_entries);
  double diff = 0.0, a_norm = 0.0, n_norm = 0.0;
  for (Eigen::Index i = 0; i < n; i += stride) {
    double& x = w.data()[i];
    const double orig = x;
    x = orig + eps;
    double up = 0.0, down = 0.0;
    {
      nn::Tape tape;
      up = tape.scalar(loss(tape));
    }
    x = orig - eps;
    {
      nn::Tape tape;
      down = tape.scalar(loss(tape));
    }
    x = orig;
    const double numeric = (up - down) / (2.0 * eps);
    const double analytic = grads.slots[slot].data()[i];
    diff += (analytic - numeric) * (analytic - numeric);
    a_norm += analytic * analytic;
    n_norm += numeric * numeric;
  }
  const double denom = std::sqrt(a_norm) + std::sqrt(n_norm);
  if (analytic_norm) *analytic_norm = std::sqrt(a_norm);
  // Slots whose true gradient is zero (key biases under softmax) would
  // otherwise compare rounding noise.
  return std::sqrt(diff) / std::max(denom, 1e-6);
}

}  // namespace kaft::testing
