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

#pragma once

#include <string>
#include <vector>

#include "json.hpp"
#include "kaft/nn.hpp"

namespace kaft {
class Rng;
}

namespace kaft::nn {

struct TransformerConfig {
  int vocab = 0;
  int dim = 64;
  int heads = 4;
  int ff = 128;
  int layers = 2;
  int max_len = 128;
  // "learned": absolute position embeddings. "alibi": no position
  // embeddings; attention scores get a per-head linear distance penalty.
  std::string position = "learned";

  nlohmann::json to_json() const;
  static TransformerConfig from_json(const nlohmann::json& j);
  bool operator==(const TransformerConfig&) const = default;
};

// Per-layer key/value cache for incremental causal decoding.
struct KvCache {
  std::vector<Matrix> keys;
  std::vector<Matrix> values;
  int length = 0;
};

// Training-time dropout on the embeddings and on each residual branch.
struct Dropout {
  double p = 0.0;
  Rng* rng = nullptr;
  bool active() const { return p > 0.0 && rng != nullptr; }
};

// Pre-LayerNorm transformer: token (+ position) embeddings, `layers`
// blocks of multi-head self-attention and a GELU MLP, final LayerNorm.
// Parameters live in a caller-owned ParameterSet under `prefix`.
class TransformerStack {
 public:
  TransformerStack() = default;
  TransformerStack(const TransformerConfig& cfg, ParameterSet& params, const std::string& prefix,
                   Rng& rng);
  // Binds to parameters already declared under `prefix`.
  TransformerStack(const TransformerConfig& cfg, const ParameterSet& params,
                   const std::string& prefix);

  const TransformerConfig& config() const { return cfg_; }
  std::size_t token_embedding_slot() const { return tok_emb_; }
  // Slots of every parameter owned by this stack.
  std::vector<std::size_t> slots() const;

  // Final hidden states, T×dim.
  Var forward(Tape& tape, const ParameterSet& params, const std::vector<int>& ids,
              bool causal, const Dropout& drop = {}) const;

  // Same computation without a tape.
  Matrix infer(const ParameterSet& params, const std::vector<int>& ids, bool causal) const;

  // Causal only: appends `ids` to the cache and returns their hidden states.
  Matrix infer_incremental(const ParameterSet& params, KvCache& cache,
                           const std::vector<int>& ids) const;

 private:
  struct Layer {
    std::size_t ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo, ln2_g, ln2_b, w1, b1, w2, b2;
  };

  void bind(const ParameterSet& params, const std::string& prefix);
  bool alibi() const { return cfg_.position == "alibi"; }
  // Distance penalty for head h, query positions [q0, q0+rows), keys [0, cols).
  Matrix alibi_bias(int h, int q0, int rows, int cols, bool causal) const;

  TransformerConfig cfg_;
  std::size_t tok_emb_ = 0;
  std::size_t pos_emb_ = static_cast<std::size_t>(-1);  // unused with alibi
  std::size_t lnf_g_ = 0;
  std::size_t lnf_b_ = 0;
  std::vector<Layer> layers_;
};

}  // namespace kaft::nn
