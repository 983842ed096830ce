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

#include "kaft/transformer.hpp"

#include <cmath>

#include "kaft/error.hpp"
#include "kaft/rng.hpp"

namespace kaft::nn {

nlohmann::json TransformerConfig::to_json() const {
  return {{"vocab", vocab}, {"dim", dim},       {"heads", heads},
          {"ff", ff},       {"layers", layers}, {"max_len", max_len},
          {"position", position}};
}

TransformerConfig TransformerConfig::from_json(const nlohmann::json& j) {
  TransformerConfig c;
  c.vocab = j.value("vocab", c.vocab);
  c.dim = j.value("dim", c.dim);
  c.heads = j.value("heads", c.heads);
  c.ff = j.value("ff", c.ff);
  c.layers = j.value("layers", c.layers);
  c.max_len = j.value("max_len", c.max_len);
  c.position = j.value("position", c.position);
  return c;
}

namespace {

void check_config(const TransformerConfig& c) {
  if (c.vocab <= 0 || c.dim <= 0 || c.heads <= 0 || c.ff <= 0 || c.layers < 0 || c.max_len <= 0) {
    fail(ErrorCode::kInvalidArgument, "transformer config has a non-positive size");
  }
  if (c.dim % c.heads != 0) {
    fail(ErrorCode::kInvalidArgument, "transformer dim must be divisible by heads");
  }
  if (c.position != "learned" && c.position != "alibi") {
    fail(ErrorCode::kInvalidArgument, "unknown position scheme '" + c.position + "'");
  }
}

std::string layer_name(const std::string& prefix, int l, const char* what) {
  return prefix + ".layer" + std::to_string(l) + "." + what;
}

Matrix layer_norm_rows(const Matrix& x, const Matrix& g, const Matrix& b) {
  Matrix y(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const double mu = x.row(r).mean();
    const double var = (x.row(r).array() - mu).square().mean();
    const double inv = 1.0 / std::sqrt(var + 1e-5);
    y.row(r) = ((x.row(r).array() - mu) * inv * g.row(0).array() + b.row(0).array()).matrix();
  }
  return y;
}

Matrix gelu(const Matrix& x) {
  Matrix y(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const double z = x.data()[i];
    y.data()[i] = 0.5 * z * (1.0 + std::tanh(0.7978845608028654 * (z + 0.044715 * z * z * z)));
  }
  return y;
}

// Row-wise softmax where row r may attend to columns [0, limit(r)).
template <typename Limit>
void softmax_inplace(Matrix& s, Limit limit) {
  for (Eigen::Index r = 0; r < s.rows(); ++r) {
    const Eigen::Index n = limit(r);
    const double mx = s.row(r).head(n).maxCoeff();
    double z = 0.0;
    for (Eigen::Index c = 0; c < n; ++c) {
      s(r, c) = std::exp(s(r, c) - mx);
      z += s(r, c);
    }
    s.row(r).head(n) /= z;
    if (n < s.cols()) s.row(r).tail(s.cols() - n).setZero();
  }
}

}  // namespace

TransformerStack::TransformerStack(const TransformerConfig& cfg, ParameterSet& params,
                                   const std::string& prefix, Rng& rng)
    : cfg_(cfg) {
  check_config(cfg);
  const int d = cfg.dim;
  const double w_std = 1.0 / std::sqrt(static_cast<double>(d));
  const double out_std = w_std / std::sqrt(2.0 * std::max(1, cfg.layers));
  params.add(prefix + ".tok_emb", normal_matrix(cfg.vocab, d, 0.1, rng));
  if (cfg.position == "learned") params.add(prefix + ".pos_emb", normal_matrix(cfg.max_len, d, 0.1, rng));
  for (int l = 0; l < cfg.layers; ++l) {
    params.add(layer_name(prefix, l, "ln1_g"), constant_matrix(1, d, 1.0));
    params.add(layer_name(prefix, l, "ln1_b"), constant_matrix(1, d, 0.0));
    params.add(layer_name(prefix, l, "wq"), normal_matrix(d, d, w_std, rng));
    params.add(layer_name(prefix, l, "bq"), constant_matrix(1, d, 0.0));
    params.add(layer_name(prefix, l, "wk"), normal_matrix(d, d, w_std, rng));
    params.add(layer_name(prefix, l, "bk"), constant_matrix(1, d, 0.0));
    params.add(layer_name(prefix, l, "wv"), normal_matrix(d, d, w_std, rng));
    params.add(layer_name(prefix, l, "bv"), constant_matrix(1, d, 0.0));
    params.add(layer_name(prefix, l, "wo"), normal_matrix(d, d, out_std, rng));
    params.add(layer_name(prefix, l, "bo"), constant_matrix(1, d, 0.0));
    params.add(layer_name(prefix, l, "ln2_g"), constant_matrix(1, d, 1.0));
    params.add(layer_name(prefix, l, "ln2_b"), constant_matrix(1, d, 0.0));
    params.add(layer_name(prefix, l, "w1"), normal_matrix(d, cfg.ff, w_std, rng));
    params.add(layer_name(prefix, l, "b1"), constant_matrix(1, cfg.ff, 0.0));
    params.add(layer_name(prefix, l, "w2"),
               normal_matrix(cfg.ff, d, out_std * std::sqrt(static_cast<double>(d) / cfg.ff), rng));
    params.add(layer_name(prefix, l, "b2"), constant_matrix(1, d, 0.0));
  }
  params.add(prefix + ".lnf_g", constant_matrix(1, d, 1.0));
  params.add(prefix + ".lnf_b", constant_matrix(1, d, 0.0));
  bind(params, prefix);
}

TransformerStack::TransformerStack(const TransformerConfig& cfg, const ParameterSet& params,
                                   const std::string& prefix)
    : cfg_(cfg) {
  check_config(cfg);
  bind(params, prefix);
}

void TransformerStack::bind(const ParameterSet& params, const std::string& prefix) {
  tok_emb_ = params.find(prefix + ".tok_emb");
  if (!alibi()) pos_emb_ = params.find(prefix + ".pos_emb");
  layers_.clear();
  for (int l = 0; l < cfg_.layers; ++l) {
    Layer L{};
    L.ln1_g = params.find(layer_name(prefix, l, "ln1_g"));
    L.ln1_b = params.find(layer_name(prefix, l, "ln1_b"));
    L.wq = params.find(layer_name(prefix, l, "wq"));
    L.bq = params.find(layer_name(prefix, l, "bq"));
    L.wk = params.find(layer_name(prefix, l, "wk"));
    L.bk = params.find(layer_name(prefix, l, "bk"));
    L.wv = params.find(layer_name(prefix, l, "wv"));
    L.bv = params.find(layer_name(prefix, l, "bv"));
    L.wo = params.find(layer_name(prefix, l, "wo"));
    L.bo = params.find(layer_name(prefix, l, "bo"));
    L.ln2_g = params.find(layer_name(prefix, l, "ln2_g"));
    L.ln2_b = params.find(layer_name(prefix, l, "ln2_b"));
    L.w1 = params.find(layer_name(prefix, l, "w1"));
    L.b1 = params.find(layer_name(prefix, l, "b1"));
    L.w2 = params.find(layer_name(prefix, l, "w2"));
    L.b2 = params.find(layer_name(prefix, l, "b2"));
    layers_.push_back(L);
  }
  lnf_g_ = params.find(prefix + ".lnf_g");
  lnf_b_ = params.find(prefix + ".lnf_b");
  const auto& emb = params[tok_emb_].value;
  if (emb.rows() != cfg_.vocab || emb.cols() != cfg_.dim ||
      (!alibi() && params[pos_emb_].value.rows() != cfg_.max_len)) {
    fail(ErrorCode::kInvalidArgument, "parameters under " + prefix + " do not match the config");
  }
}

Matrix TransformerStack::alibi_bias(int h, int q0, int rows, int cols, bool causal) const {
  const double slope = std::pow(2.0, -8.0 * (h + 1) / cfg_.heads);
  Matrix b(rows, cols);
  for (int r = 0; r < rows; ++r) {
    for (int c = 0; c < cols; ++c) {
      const int dist = q0 + r - c;
      b(r, c) = (causal || dist >= 0) ? -slope * dist : slope * dist;
    }
  }
  return b;
}

std::vector<std::size_t> TransformerStack::slots() const {
  std::vector<std::size_t> out = {tok_emb_};
  if (!alibi()) out.push_back(pos_emb_);
  for (const auto& L : layers_) {
    for (auto s : {L.ln1_g, L.ln1_b, L.wq, L.bq, L.wk, L.bk, L.wv, L.bv, L.wo, L.bo, L.ln2_g,
                   L.ln2_b, L.w1, L.b1, L.w2, L.b2}) {
      out.push_back(s);
    }
  }
  out.push_back(lnf_g_);
  out.push_back(lnf_b_);
  return out;
}

Var TransformerStack::forward(Tape& tape, const ParameterSet& params, const std::vector<int>& ids,
                              bool causal, const Dropout& drop) const {
  const int T = static_cast<int>(ids.size());
  if (T == 0 || T > cfg_.max_len) {
    fail(ErrorCode::kInvalidArgument, "sequence length " + std::to_string(T) +
                                          " outside [1, " + std::to_string(cfg_.max_len) + "]");
  }
  auto P = [&](std::size_t slot) { return tape.param(params, slot); };
  Var x = tape.gather_rows(P(tok_emb_), ids);
  if (!alibi()) x = tape.add(x, tape.slice_rows(P(pos_emb_), 0, T));
  auto D = [&](Var v) { return drop.active() ? tape.dropout(v, drop.p, *drop.rng) : v; };
  x = D(x);
  std::vector<Var> bias;
  if (alibi()) {
    for (int h = 0; h < cfg_.heads; ++h) bias.push_back(tape.constant(alibi_bias(h, 0, T, T, causal)));
  }
  const int hd = cfg_.dim / cfg_.heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hd));
  for (const auto& L : layers_) {
    Var a = tape.layer_norm(x, P(L.ln1_g), P(L.ln1_b));
    Var q = tape.add_row(tape.matmul(a, P(L.wq)), P(L.bq));
    Var k = tape.add_row(tape.matmul(a, P(L.wk)), P(L.bk));
    Var v = tape.add_row(tape.matmul(a, P(L.wv)), P(L.bv));
    std::vector<Var> heads;
    heads.reserve(static_cast<std::size_t>(cfg_.heads));
    for (int h = 0; h < cfg_.heads; ++h) {
      Var qh = tape.slice_cols(q, h * hd, hd);
      Var kh = tape.slice_cols(k, h * hd, hd);
      Var vh = tape.slice_cols(v, h * hd, hd);
      Var s = tape.scale(tape.matmul_bt(qh, kh), inv_sqrt);
      if (alibi()) s = tape.add(s, bias[static_cast<std::size_t>(h)]);
      s = tape.softmax_rows(s, causal);
      heads.push_back(tape.matmul(s, vh));
    }
    Var attn = tape.add_row(tape.matmul(tape.concat_cols(heads), P(L.wo)), P(L.bo));
    x = tape.add(x, D(attn));
    Var m = tape.layer_norm(x, P(L.ln2_g), P(L.ln2_b));
    m = tape.gelu(tape.add_row(tape.matmul(m, P(L.w1)), P(L.b1)));
    m = tape.add_row(tape.matmul(m, P(L.w2)), P(L.b2));
    x = tape.add(x, D(m));
  }
  return tape.layer_norm(x, P(lnf_g_), P(lnf_b_));
}

Matrix TransformerStack::infer(const ParameterSet& params, const std::vector<int>& ids,
                               bool causal) const {
  if (causal) {
    KvCache cache;
    return infer_incremental(params, cache, ids);
  }
  const int T = static_cast<int>(ids.size());
  if (T == 0 || T > cfg_.max_len) {
    fail(ErrorCode::kInvalidArgument, "sequence length " + std::to_string(T) +
                                          " outside [1, " + std::to_string(cfg_.max_len) + "]");
  }
  auto V = [&](std::size_t slot) -> const Matrix& { return params[slot].value; };
  const Matrix& emb = V(tok_emb_);
  Matrix x(T, cfg_.dim);
  for (int i = 0; i < T; ++i) {
    if (ids[i] < 0 || ids[i] >= cfg_.vocab) fail(ErrorCode::kInvalidArgument, "token id out of range");
    x.row(i) = emb.row(ids[i]);
    if (!alibi()) x.row(i) += V(pos_emb_).row(i);
  }
  const int hd = cfg_.dim / cfg_.heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hd));
  for (const auto& L : layers_) {
    Matrix a = layer_norm_rows(x, V(L.ln1_g), V(L.ln1_b));
    Matrix q = a * V(L.wq);
    q.rowwise() += V(L.bq).row(0);
    Matrix k = a * V(L.wk);
    k.rowwise() += V(L.bk).row(0);
    Matrix v = a * V(L.wv);
    v.rowwise() += V(L.bv).row(0);
    Matrix cat(T, cfg_.dim);
    for (int h = 0; h < cfg_.heads; ++h) {
      Matrix s = q.middleCols(h * hd, hd) * k.middleCols(h * hd, hd).transpose() * inv_sqrt;
      if (alibi()) s += alibi_bias(h, 0, T, T, false);
      softmax_inplace(s, [&](Eigen::Index) { return s.cols(); });
      cat.middleCols(h * hd, hd) = s * v.middleCols(h * hd, hd);
    }
    Matrix attn = cat * V(L.wo);
    attn.rowwise() += V(L.bo).row(0);
    x += attn;
    Matrix m = layer_norm_rows(x, V(L.ln2_g), V(L.ln2_b)) * V(L.w1);
    m.rowwise() += V(L.b1).row(0);
    m = gelu(m) * V(L.w2);
    m.rowwise() += V(L.b2).row(0);
    x += m;
  }
  return layer_norm_rows(x, V(lnf_g_), V(lnf_b_));
}

Matrix TransformerStack::infer_incremental(const ParameterSet& params, KvCache& cache,
                                           const std::vector<int>& ids) const {
  const int n = static_cast<int>(ids.size());
  const int start = cache.length;
  if (n == 0) return Matrix(0, cfg_.dim);
  if (start + n > cfg_.max_len) {
    fail(ErrorCode::kInvalidArgument, "sequence length " + std::to_string(start + n) +
                                          " exceeds max_len " + std::to_string(cfg_.max_len));
  }
  if (cache.keys.empty()) {
    cache.keys.assign(layers_.size(), Matrix(0, cfg_.dim));
    cache.values.assign(layers_.size(), Matrix(0, cfg_.dim));
  }
  auto V = [&](std::size_t slot) -> const Matrix& { return params[slot].value; };
  const Matrix& emb = V(tok_emb_);
  Matrix x(n, cfg_.dim);
  for (int i = 0; i < n; ++i) {
    if (ids[i] < 0 || ids[i] >= cfg_.vocab) fail(ErrorCode::kInvalidArgument, "token id out of range");
    x.row(i) = emb.row(ids[i]);
    if (!alibi()) x.row(i) += V(pos_emb_).row(start + i);
  }
  const int hd = cfg_.dim / cfg_.heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hd));
  const int total = start + n;
  for (std::size_t li = 0; li < layers_.size(); ++li) {
    const Layer& L = layers_[li];
    Matrix a = layer_norm_rows(x, V(L.ln1_g), V(L.ln1_b));
    Matrix q = a * V(L.wq);
    q.rowwise() += V(L.bq).row(0);
    Matrix k = a * V(L.wk);
    k.rowwise() += V(L.bk).row(0);
    Matrix v = a * V(L.wv);
    v.rowwise() += V(L.bv).row(0);
    Matrix& K = cache.keys[li];
    Matrix& Vc = cache.values[li];
    K.conservativeResize(total, Eigen::NoChange);
    Vc.conservativeResize(total, Eigen::NoChange);
    K.bottomRows(n) = k;
    Vc.bottomRows(n) = v;
    Matrix cat(n, cfg_.dim);
    for (int h = 0; h < cfg_.heads; ++h) {
      Matrix s = q.middleCols(h * hd, hd) * K.middleCols(h * hd, hd).transpose() * inv_sqrt;
      if (alibi()) s += alibi_bias(h, start, n, total, true);
      softmax_inplace(s, [&](Eigen::Index r) { return static_cast<Eigen::Index>(start + r + 1); });
      cat.middleCols(h * hd, hd) = s * Vc.middleCols(h * hd, hd);
    }
    Matrix attn = cat * V(L.wo);
    attn.rowwise() += V(L.bo).row(0);
    x += attn;
    Matrix m = layer_norm_rows(x, V(L.ln2_g), V(L.ln2_b)) * V(L.w1);
    m.rowwise() += V(L.b1).row(0);
    m = gelu(m) * V(L.w2);
    m.rowwise() += V(L.b2).row(0);
    x += m;
  }
  cache.length = total;
  return layer_norm_rows(x, V(lnf_g_), V(lnf_b_));
}

}  // namespace kaft::nn
