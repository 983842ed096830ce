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

#include "kaft/experiment.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <set>
#include <sstream>

#include "kaft/archive.hpp"
#include "kaft/error.hpp"
#include "kaft/prompt.hpp"
#include "kaft/text.hpp"

namespace kaft {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

// Parses `j` over the serialized defaults so that partial configs work.
template <typename T>
T merged(const T& defaults, const json& j) {
  json base = defaults.to_json();
  base.merge_patch(j);
  return T::from_json(base);
}

nn::TransformerConfig merged_body(const nn::TransformerConfig& defaults, const json& j) {
  json base = defaults.to_json();
  base.merge_patch(j);
  return nn::TransformerConfig::from_json(base);
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(double v, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*f", digits, v);
  return buf;
}

std::string file_label(const std::string& label) {
  std::string out;
  for (char c : label) out.push_back(c == '/' ? '.' : (c == '=' ? '-' : c));
  return out;
}

json read_json_file(const fs::path& p) {
  try {
    return json::parse(read_text_file(p));
  } catch (const json::exception& e) {
    fail(ErrorCode::kParse, p.string() + ": " + e.what());
  }
}

RetrieverTrainConfig role_train_config(const BundleConfig& cfg, RetrieverRole role) {
  RetrieverTrainConfig t = cfg.retriever_train;
  t.seed = cfg.seed;
  switch (role) {
    case RetrieverRole::kAll:
      t.scope = kAllSources;
      t.decision_filter.reset();
      break;
    case RetrieverRole::kProduct:
      t.scope = {Source::kProduct};
      t.decision_filter = Decision::kSearchProduct;
      break;
    case RetrieverRole::kFaq:
      t.scope = {Source::kFaq};
      t.decision_filter = Decision::kSearchFaq;
      break;
  }
  return t;
}

std::shared_ptr<const SearchApis> bundle_apis(const Bundle& b) {
  return std::make_shared<SearchApis>(b.retriever(RetrieverRole::kProduct), b.retriever(RetrieverRole::kFaq),
                                      b.config().k);
}

std::shared_ptr<const DecisionMaker> bundle_decider(const Bundle& b) {
  return std::make_shared<DecisionMaker>(DecisionMaker::finetuned(b.decision_lm(), b.config().decision_context_budget));
}

}  // namespace

// --- bundle config --------------------------------------------------------------------

BundleConfig::BundleConfig() {
  generator_train.epochs = 12;
  generator_train.batch_size = 8;
  decision_train.epochs = 6;
  decision_train.batch_size = 16;
  llm.mode = CacheMode::kRecord;
}

json BundleConfig::to_json() const {
  return {{"seed", seed},
          {"retriever", retriever.to_json()},
          {"retriever_train", retriever_train.to_json()},
          {"generator", generator.to_json()},
          {"generator_train", generator_train.to_json()},
          {"decision", decision.to_json()},
          {"decision_context_budget", decision_context_budget},
          {"decision_train", decision_train.to_json()},
          {"k", k},
          {"n_shot", n_shot},
          {"llm", llm.to_json()},
          {"decode", {{"max_new_tokens", decode.max_new_tokens}}}};
}

BundleConfig BundleConfig::from_json(const json& j) {
  BundleConfig c;
  c.seed = j.value("seed", c.seed);
  if (j.contains("retriever")) c.retriever = merged(c.retriever, j.at("retriever"));
  if (j.contains("retriever_train")) c.retriever_train = merged(c.retriever_train, j.at("retriever_train"));
  if (j.contains("generator")) c.generator = merged(c.generator, j.at("generator"));
  if (j.contains("generator_train")) c.generator_train = merged(c.generator_train, j.at("generator_train"));
  if (j.contains("decision")) c.decision = merged_body(c.decision, j.at("decision"));
  c.decision_context_budget = j.value("decision_context_budget", c.decision_context_budget);
  if (j.contains("decision_train")) c.decision_train = merged(c.decision_train, j.at("decision_train"));
  c.k = j.value("k", c.k);
  c.n_shot = j.value("n_shot", c.n_shot);
  if (j.contains("llm")) c.llm = merged(c.llm, j.at("llm"));
  if (j.contains("decode")) c.decode.max_new_tokens = j.at("decode").value("max_new_tokens", c.decode.max_new_tokens);
  if (c.k < 1) fail(ErrorCode::kInvalidArgument, "k must be >= 1");
  if (c.n_shot < 0) fail(ErrorCode::kInvalidArgument, "n_shot must be >= 0");
  return c;
}

RetrieverRole parse_retriever_role(const std::string& s) {
  if (s == "all") return RetrieverRole::kAll;
  if (s == "product") return RetrieverRole::kProduct;
  if (s == "faq") return RetrieverRole::kFaq;
  fail(ErrorCode::kInvalidArgument, "unknown retriever role '" + s + "' (expected all, product, faq)");
}

const char* retriever_role_name(RetrieverRole r) {
  switch (r) {
    case RetrieverRole::kAll: return "all";
    case RetrieverRole::kProduct: return "product";
    case RetrieverRole::kFaq: return "faq";
  }
  return "?";
}

bool valid_generator_knowledge(const std::string& k) {
  return k == "none" || k == "retrieved" || k == "oracle" || k == "agent" || k == "agent-gold";
}

// --- bundle ---------------------------------------------------------------------------

Bundle::Bundle(fs::path dir, BundleConfig cfg)
    : dir_(std::move(dir)), cfg_(std::move(cfg)), cache_(std::make_shared<Cache>()) {}

Bundle Bundle::create(const fs::path& dir, const BundleConfig& cfg) {
  const fs::path manifest = dir / "bundle.json";
  if (fs::exists(manifest)) {
    const json prior = read_json_file(manifest);
    if (prior != cfg.to_json()) {
      fail(ErrorCode::kConflict, dir.string() + " already holds a bundle with a different configuration");
    }
  } else {
    write_text_file(manifest, cfg.to_json().dump(2) + "\n");
  }
  return Bundle(dir, cfg);
}

Bundle Bundle::open(const fs::path& dir) {
  const fs::path manifest = dir / "bundle.json";
  if (!fs::exists(manifest)) fail(ErrorCode::kNotFound, "no bundle.json in " + dir.string());
  return Bundle(dir, BundleConfig::from_json(read_json_file(manifest)));
}

fs::path Bundle::retriever_path(RetrieverRole role) const {
  switch (role) {
    case RetrieverRole::kAll: return dir_ / "retriever.kaft";
    case RetrieverRole::kProduct: return dir_ / "product_api.kaft";
    case RetrieverRole::kFaq: return dir_ / "faq_api.kaft";
  }
  return {};
}

fs::path Bundle::generator_path(const std::string& knowledge) const {
  if (!valid_generator_knowledge(knowledge)) {
    fail(ErrorCode::kInvalidArgument, "unknown generator knowledge '" + knowledge + "'");
  }
  return dir_ / ("generator-" + knowledge + ".kaft");
}

fs::path Bundle::decision_path() const { return dir_ / "decision.kaft"; }

bool Bundle::has_retriever(RetrieverRole role) const { return fs::exists(retriever_path(role)); }
bool Bundle::has_generator(const std::string& knowledge) const { return fs::exists(generator_path(knowledge)); }
bool Bundle::has_decision() const { return fs::exists(decision_path()); }

std::shared_ptr<const RetrievalModel> Bundle::retriever(RetrieverRole role) const {
  std::lock_guard<std::mutex> lock(cache_->mu);
  auto& slot = cache_->retrievers[retriever_role_name(role)];
  if (!slot) {
    if (!has_retriever(role)) {
      fail(ErrorCode::kNotFound, std::string("bundle has no ") + retriever_role_name(role) + " retriever; run train-retriever");
    }
    slot = std::make_shared<const RetrievalModel>(RetrievalModel::load(retriever_path(role)));
  }
  return slot;
}

std::shared_ptr<const LocalCausalLM> Bundle::generator(const std::string& knowledge) const {
  const fs::path p = generator_path(knowledge);
  std::lock_guard<std::mutex> lock(cache_->mu);
  auto& slot = cache_->lms["generator-" + knowledge];
  if (!slot) {
    if (!fs::exists(p)) fail(ErrorCode::kNotFound, "bundle has no '" + knowledge + "' generator; run train-generator");
    slot = std::make_shared<const LocalCausalLM>(LocalCausalLM::load(p, "generator"));
  }
  return slot;
}

std::shared_ptr<const LocalCausalLM> Bundle::decision_lm() const {
  std::lock_guard<std::mutex> lock(cache_->mu);
  auto& slot = cache_->lms["decision"];
  if (!slot) {
    if (!has_decision()) fail(ErrorCode::kNotFound, "bundle has no decision maker; run train-decision");
    slot = std::make_shared<const LocalCausalLM>(LocalCausalLM::load(decision_path(), "decision"));
  }
  return slot;
}

std::shared_ptr<const Tokenizer> bundle_tokenizer(const CorpusSplits& corpus) {
  return std::make_shared<const Tokenizer>(corpus_tokenizer(corpus, model_vocab_extras()));
}

// --- training steps -----------------------------------------------------------------

json StepResult::to_json() const { return {{"curve", curve.to_json()}, {"metrics", metrics}, {"seconds", seconds}}; }

StepResult train_retriever_step(const Bundle& bundle, const CorpusSplits& corpus, RetrieverRole role,
                                const std::vector<int>& recall_ks) {
  const auto t0 = std::chrono::steady_clock::now();
  const BundleConfig& cfg = bundle.config();
  const RetrieverTrainConfig tcfg = role_train_config(cfg, role);
  RetrievalModel model(bundle_tokenizer(corpus), cfg.retriever, cfg.seed * 3 + static_cast<std::uint64_t>(role));
  StepResult r;
  r.curve = train_retriever(model, corpus, tcfg);
  IndexBuilder indexes(model, tcfg.scope);
  r.metrics["dev_recall"] = recall_at_k(model, indexes, corpus.dev, recall_ks, tcfg.decision_filter).to_json();
  model.save(bundle.retriever_path(role));
  r.seconds = seconds_since(t0);
  return r;
}

StepResult train_generator_step(const Bundle& bundle, const CorpusSplits& corpus, const std::string& knowledge) {
  const auto t0 = std::chrono::steady_clock::now();
  const BundleConfig& cfg = bundle.config();
  KnowledgeProvider provider;
  if (knowledge == "none") {
    provider = no_knowledge();
  } else if (knowledge == "oracle") {
    provider = oracle_knowledge();
  } else if (knowledge == "retrieved") {
    auto model = bundle.retriever(RetrieverRole::kAll);
    provider = retrieved_knowledge(model, std::make_shared<IndexBuilder>(*model, kAllSources), cfg.k);
  } else if (knowledge == "agent") {
    provider = agent_knowledge(bundle_decider(bundle), bundle_apis(bundle));
  } else if (knowledge == "agent-gold") {
    provider = agent_knowledge(nullptr, bundle_apis(bundle));
  } else {
    fail(ErrorCode::kInvalidArgument, "unknown generator knowledge '" + knowledge + "'");
  }
  nn::TransformerConfig body = cfg.generator.body;
  auto tok = bundle_tokenizer(corpus);
  body.vocab = tok->size();
  LocalCausalLM lm(tok, body, cfg.seed);
  LMTrainConfig tcfg = cfg.generator_train;
  tcfg.seed = cfg.seed;
  StepResult r;
  r.curve = finetune_generator(lm, cfg.generator, corpus, provider, tcfg);
  lm.save(bundle.generator_path(knowledge), "generator");
  r.seconds = seconds_since(t0);
  return r;
}

StepResult train_decision_step(const Bundle& bundle, const CorpusSplits& corpus) {
  const auto t0 = std::chrono::steady_clock::now();
  const BundleConfig& cfg = bundle.config();
  nn::TransformerConfig body = cfg.decision;
  auto tok = bundle_tokenizer(corpus);
  body.vocab = tok->size();
  auto lm = std::make_shared<LocalCausalLM>(tok, body, cfg.seed + 1000);
  LMTrainConfig tcfg = cfg.decision_train;
  tcfg.seed = cfg.seed;
  StepResult r;
  r.curve = train_decision_maker(*lm, corpus, cfg.decision_context_budget, tcfg);
  const DecisionMaker dm = DecisionMaker::finetuned(lm, cfg.decision_context_budget);
  std::vector<Decision> pred, gold;
  for (const auto& d : corpus.dev) {
    for (const auto& t : d.turns) {
      pred.push_back(dm.predict(build_context(d, t.index)).decision);
      gold.push_back(t.decision);
    }
  }
  r.metrics["dev_decision_accuracy"] = decision_accuracy(pred, gold).to_json();
  lm->save(bundle.decision_path(), "decision");
  r.seconds = seconds_since(t0);
  return r;
}

// --- systems --------------------------------------------------------------------------

void SystemSpec::resolve() {
  if (system != "direct" && system != "rag" && system != "agent") {
    fail(ErrorCode::kInvalidArgument, "unknown system '" + system + "' (expected direct, rag, agent)");
  }
  if (regime != "kaft" && regime != "prompt-0shot" && regime != "prompt-nshot") {
    fail(ErrorCode::kInvalidArgument, "unknown regime '" + regime + "' (expected kaft, prompt-0shot, prompt-nshot)");
  }
  if (system == "direct") {
    if (train_knowledge.empty()) train_knowledge = "none";
    if (test_knowledge == "model") test_knowledge = "none";
    if (test_knowledge != "none") fail(ErrorCode::kInvalidArgument, "direct system tests without knowledge");
  } else if (system == "rag") {
    if (train_knowledge.empty()) train_knowledge = "retrieved";
    if (test_knowledge == "model") test_knowledge = "retrieved";
    if (test_knowledge != "retrieved" && test_knowledge != "oracle") {
      fail(ErrorCode::kInvalidArgument, "rag test knowledge must be retrieved or oracle");
    }
  } else {
    if (train_knowledge.empty()) train_knowledge = "agent";
    if (test_knowledge != "model" && test_knowledge != "gold") {
      fail(ErrorCode::kInvalidArgument, "agent test decisions must be model or gold");
    }
  }
  if (regime != "kaft") train_knowledge = "-";
  if (regime == "kaft" && !valid_generator_knowledge(train_knowledge)) {
    fail(ErrorCode::kInvalidArgument, "unknown train knowledge '" + train_knowledge + "'");
  }
}

std::string SystemSpec::label() const {
  std::string s = system + "/" + regime;
  if (regime == "kaft") s += "/train=" + train_knowledge;
  return s + "/test=" + test_knowledge;
}

json SystemSpec::to_json() const {
  return {{"system", system}, {"regime", regime}, {"train_knowledge", train_knowledge}, {"test_knowledge", test_knowledge}};
}

SystemSpec SystemSpec::from_json(const json& j) {
  SystemSpec s;
  s.system = j.value("system", s.system);
  s.regime = j.value("regime", s.regime);
  s.train_knowledge = j.value("train_knowledge", s.train_knowledge);
  if (s.train_knowledge == "-") s.train_knowledge.clear();
  s.test_knowledge = j.value("test_knowledge", s.test_knowledge);
  s.resolve();
  return s;
}

std::shared_ptr<RemoteLLMClient> make_llm_client(const LLMClientConfig& cfg) {
  std::shared_ptr<Transport> transport;
  if (cfg.mode != CacheMode::kReplayOnly) transport = make_transport(cfg);
  return std::make_shared<RemoteLLMClient>(cfg, std::move(transport));
}

std::shared_ptr<DialogSystem> build_system(const Bundle& bundle, const CorpusSplits& corpus, SystemSpec spec,
                                           std::shared_ptr<RemoteLLMClient> client) {
  spec.resolve();
  const BundleConfig& cfg = bundle.config();
  const bool prompted = spec.regime != "kaft";
  const int n_shot = spec.regime == "prompt-nshot" ? cfg.n_shot : 0;
  if (prompted && !client) fail(ErrorCode::kInvalidArgument, "prompted regimes need an LLM client");

  std::shared_ptr<const GeneratorBackend> generator;
  if (prompted) {
    const KnowledgeProvider examples = spec.system == "direct" ? no_knowledge() : oracle_knowledge();
    generator = std::make_shared<PromptedGenerator>(
        client, make_prompt_template(PromptKind::kResponse, corpus.train, n_shot, cfg.seed, examples));
  } else {
    generator = std::make_shared<KaftGenerator>(bundle.generator(spec.train_knowledge), cfg.generator, cfg.decode);
  }

  if (spec.system == "direct") {
    return std::make_shared<RagSystem>(nullptr, generator, RagConfig{cfg.k, false, false});
  }
  if (spec.system == "rag") {
    return std::make_shared<RagSystem>(bundle.retriever(RetrieverRole::kAll), generator,
                                       RagConfig{cfg.k, true, spec.test_knowledge == "oracle"});
  }
  std::shared_ptr<const DecisionMaker> decider;
  if (prompted) {
    decider = std::make_shared<DecisionMaker>(DecisionMaker::prompted(
        client, make_prompt_template(PromptKind::kDecision, corpus.train, n_shot, cfg.seed)));
  } else if (spec.test_knowledge != "gold") {
    decider = bundle_decider(bundle);
  }
  return std::make_shared<AgentSystem>(decider, bundle_apis(bundle), generator,
                                       AgentConfig{spec.test_knowledge == "gold"});
}

// --- experiments ----------------------------------------------------------------------

json ExperimentConfig::to_json() const {
  json arms_j = json::array();
  for (const auto& a : arms) arms_j.push_back(a.to_json());
  return {{"synth", synth.to_json()},   {"corpus_seed", corpus_seed}, {"corpus_path", corpus_path},
          {"bundle", bundle.to_json()}, {"arms", arms_j},             {"seeds", seeds},
          {"split", split},             {"recall_ks", recall_ks}};
}

ExperimentConfig ExperimentConfig::from_json(const json& j) {
  ExperimentConfig c;
  try {
    if (j.contains("synth")) c.synth = merged(c.synth, j.at("synth"));
    c.corpus_seed = j.value("corpus_seed", c.corpus_seed);
    c.corpus_path = j.value("corpus_path", c.corpus_path);
    if (j.contains("bundle")) c.bundle = BundleConfig::from_json(j.at("bundle"));
    if (j.contains("arms")) {
      for (const auto& a : j.at("arms")) c.arms.push_back(SystemSpec::from_json(a));
    }
    c.seeds = j.value("seeds", c.seeds);
    c.split = j.value("split", c.split);
    c.recall_ks = j.value("recall_ks", c.recall_ks);
  } catch (const json::exception& e) {
    fail(ErrorCode::kParse, std::string("malformed experiment config: ") + e.what());
  }
  if (c.arms.empty()) fail(ErrorCode::kInvalidArgument, "experiment needs at least one arm");
  if (c.seeds.empty()) fail(ErrorCode::kInvalidArgument, "experiment needs at least one seed");
  return c;
}

// Arms are resolved first so that spelled-out defaults hash the same.
std::string ExperimentConfig::hash() const {
  ExperimentConfig c = *this;
  for (auto& a : c.arms) a.resolve();
  return sha256_hex(c.to_json().dump());
}

json ExperimentResult::to_json() const {
  json arms_j = json::array();
  for (const auto& a : arms) {
    json e{{"arm", a.spec.label()}, {"spec", a.spec.to_json()}, {"seed", a.seed}};
    if (a.report) e["report"] = a.report->to_json();
    if (!a.error.empty()) e["error"] = a.error;
    arms_j.push_back(e);
  }
  json steps_j = json::object();
  for (const auto& [seed, s] : steps) steps_j[std::to_string(seed)] = s;
  return {{"dir", dir.string()}, {"arms", arms_j}, {"steps", steps_j}};
}

const EvalReport* ExperimentResult::find(const std::string& label, std::uint64_t seed) const {
  for (const auto& a : arms) {
    if (a.seed == seed && a.spec.label() == label && a.report) return &*a.report;
  }
  return nullptr;
}

std::string render_experiment_table(const std::vector<ArmResult>& arms) {
  std::vector<std::string> labels;
  std::map<std::string, std::vector<const ArmResult*>> by_label;
  for (const auto& a : arms) {
    const std::string l = a.spec.label();
    if (!by_label.count(l)) labels.push_back(l);
    by_label[l].push_back(&a);
  }
  auto mean_std = [](const std::vector<double>& v) {
    double m = 0.0;
    for (double x : v) m += x;
    m /= static_cast<double>(v.size());
    double s = 0.0;
    for (double x : v) s += (x - m) * (x - m);
    s = v.size() > 1 ? std::sqrt(s / static_cast<double>(v.size() - 1)) : 0.0;
    return std::make_pair(m, s);
  };
  std::vector<std::vector<std::string>> cells{{"Arm", "Seeds", "BLEU", "Sem", "Inform", "Score", "Score per seed"}};
  for (const auto& l : labels) {
    std::vector<double> bleu, sem, inform, score;
    std::string per_seed;
    std::size_t failed = 0;
    for (const auto* a : by_label[l]) {
      per_seed += (per_seed.empty() ? "" : " ") + std::to_string(a->seed) + ":";
      if (!a->report) {
        ++failed;
        per_seed += "failed";
        continue;
      }
      bleu.push_back(a->report->bleu);
      sem.push_back(a->report->sem_score);
      inform.push_back(a->report->inform);
      score.push_back(a->report->combined);
      per_seed += fmt(a->report->combined, 3);
    }
    if (bleu.empty()) {
      cells.push_back({l, "0", "failed", "-", "-", "-", per_seed});
      continue;
    }
    auto ms = [&](const std::vector<double>& v, int d) {
      const auto [m, s] = mean_std(v);
      return fmt(m, d) + " +- " + fmt(s, d);
    };
    std::string seeds = std::to_string(bleu.size());
    if (failed) seeds += " (" + std::to_string(failed) + " failed)";
    cells.push_back({l, seeds, ms(bleu, 2), ms(sem, 3), ms(inform, 3), ms(score, 3), per_seed});
  }
  std::vector<std::size_t> width(cells[0].size(), 0);
  for (const auto& row : cells) {
    for (std::size_t i = 0; i < row.size(); ++i) width[i] = std::max(width[i], row[i].size());
  }
  std::ostringstream out;
  for (std::size_t r = 0; r < cells.size(); ++r) {
    for (std::size_t i = 0; i < cells[r].size(); ++i) {
      out << (i ? " | " : "") << cells[r][i];
      if (i + 1 < cells[r].size()) out << std::string(width[i] - cells[r][i].size(), ' ');
    }
    out << '\n';
    if (r == 0) {
      for (std::size_t i = 0; i < width.size(); ++i) out << (i ? "-+-" : "") << std::string(width[i], '-');
      out << '\n';
    }
  }
  out << "Mean +- sample std over seeds. Inform is turn-level.\n";
  return out.str();
}

ExperimentResult run_experiment(const ExperimentConfig& config, const fs::path& root, const ProgressFn& progress) {
  ExperimentConfig cfg = config;
  for (auto& a : cfg.arms) a.resolve();
  auto note = [&](const std::string& s) {
    if (progress) progress(s);
  };
  const std::string hash = cfg.hash();
  ExperimentResult result;
  // Absolute, so the cache path stored in each bundle does not depend on the caller's cwd.
  result.dir = fs::absolute(root).lexically_normal() / ("exp-" + hash.substr(0, 12));
  const fs::path manifest = result.dir / "manifest.json";
  const json manifest_j{{"hash", hash}, {"config", cfg.to_json()}};
  if (fs::exists(manifest)) {
    if (read_json_file(manifest) != manifest_j) {
      fail(ErrorCode::kConflict, result.dir.string() + " holds a different manifest");
    }
  } else {
    write_text_file(manifest, manifest_j.dump(2) + "\n");
  }

  CorpusSplits corpus = cfg.corpus_path.empty() ? synth_corpus(cfg.synth, cfg.corpus_seed) : load_corpus(cfg.corpus_path);
  if (!fs::exists(result.dir / "corpus")) save_corpus(corpus, result.dir / "corpus");
  const std::vector<Dialog>& eval_split = corpus.split(cfg.split);

  // What the arms need trained.
  std::set<std::string> generators;
  bool need_apis = false, need_decision = false;
  for (const auto& a : cfg.arms) {
    if (a.regime == "kaft") generators.insert(a.train_knowledge);
    if (a.system == "agent") need_apis = true;
    if (a.system == "agent" && a.regime == "kaft" && a.test_knowledge == "model") need_decision = true;
  }
  if (generators.count("agent")) need_decision = true;
  if (generators.count("agent") || generators.count("agent-gold")) need_apis = true;

  for (const std::uint64_t seed : cfg.seeds) {
    BundleConfig bcfg = cfg.bundle;
    bcfg.seed = seed;
    if (bcfg.llm.cache_dir.empty()) bcfg.llm.cache_dir = (result.dir / "llm-cache").string();
    const Bundle bundle = Bundle::create(result.dir / ("seed-" + std::to_string(seed)), bcfg);
    json& steps = result.steps[seed];
    steps = json::object();
    std::map<std::string, std::string> step_errors;

    auto step = [&](const std::string& name, bool present, const std::function<StepResult()>& fn) {
      if (present) {
        steps[name] = "cached";
        return;
      }
      note("seed " + std::to_string(seed) + ": training " + name);
      try {
        steps[name] = fn().to_json();
      } catch (const std::exception& e) {
        step_errors[name] = e.what();
        steps[name] = {{"error", e.what()}};
      }
    };
    step("retriever", bundle.has_retriever(RetrieverRole::kAll),
         [&] { return train_retriever_step(bundle, corpus, RetrieverRole::kAll, cfg.recall_ks); });
    if (need_apis) {
      step("product_api", bundle.has_retriever(RetrieverRole::kProduct),
           [&] { return train_retriever_step(bundle, corpus, RetrieverRole::kProduct, cfg.recall_ks); });
      step("faq_api", bundle.has_retriever(RetrieverRole::kFaq),
           [&] { return train_retriever_step(bundle, corpus, RetrieverRole::kFaq, cfg.recall_ks); });
    }
    if (need_decision) {
      step("decision", bundle.has_decision(), [&] { return train_decision_step(bundle, corpus); });
    }
    for (const auto& g : generators) {
      step("generator-" + g, bundle.has_generator(g), [&] { return train_generator_step(bundle, corpus, g); });
    }

    std::shared_ptr<RemoteLLMClient> client = make_llm_client(bcfg.llm);
    std::unique_ptr<EncoderEmbedder> embedder;
    if (bundle.has_retriever(RetrieverRole::kAll)) {
      embedder = std::make_unique<EncoderEmbedder>(bundle.retriever(RetrieverRole::kAll));
    }

    for (const auto& arm : cfg.arms) {
      ArmResult ar;
      ar.spec = arm;
      ar.seed = seed;
      const std::string name = file_label(arm.label()) + ".seed-" + std::to_string(seed);
      note("seed " + std::to_string(seed) + ": evaluating " + arm.label());
      try {
        if (!embedder) fail(ErrorCode::kTraining, "retriever step failed: " + step_errors["retriever"]);
        auto system = build_system(bundle, corpus, arm, client);
        EvalOptions opts;
        opts.split = cfg.split;
        opts.setting = arm.label();
        opts.config = {{"experiment", hash}, {"arm", arm.to_json()}, {"bundle", bcfg.to_json()}};
        opts.seeds = {seed, cfg.corpus_seed};
        opts.failure_manifest = result.dir / "reports" / (name + ".failed.json");
        EvalRun run = evaluate_system(*system, eval_split, *embedder, opts);
        if (arm.system == "rag") {
          auto model = bundle.retriever(RetrieverRole::kAll);
          IndexBuilder indexes(*model, kAllSources);
          run.report.recall = recall_at_k(*model, indexes, eval_split, cfg.recall_ks).recall;
        }
        const fs::path report_path = result.dir / "reports" / (name + ".json");
        if (fs::exists(report_path) && EvalReport::load(report_path).to_json() != run.report.to_json()) {
          fail(ErrorCode::kConflict, report_path.string() + " holds a different prior result");
        }
        run.report.save(report_path);
        std::string lines;
        for (const auto& t : run.traces) lines += t.to_json(false).dump() + "\n";
        write_text_file(result.dir / "traces" / (name + ".jsonl"), lines);
        ar.report = std::move(run.report);
      } catch (const std::exception& e) {
        ar.error = e.what();
        note("seed " + std::to_string(seed) + ": " + arm.label() + " failed: " + ar.error);
      }
      result.arms.push_back(std::move(ar));
    }
  }
  result.table = render_experiment_table(result.arms);
  write_text_file(result.dir / "table.txt", result.table);
  write_text_file(result.dir / "results.json", result.to_json().dump(2) + "\n");
  return result;
}

}  // namespace kaft
