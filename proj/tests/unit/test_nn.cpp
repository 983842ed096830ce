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

#include <cmath>
#include <sstream>

#include "doctest.h"
#include "kaft/nn.hpp"
#include "kaft/rng.hpp"
#include "kaft/transformer.hpp"
#include "support.hpp"

using namespace kaft;
using kaft::testing::grad_relative_error;

namespace {

struct Fixture {
  nn::ParameterSet params;
  std::size_t a, b, g, bias;
  Fixture() {
    Rng rng(3);
    a = params.add("a", nn::normal_matrix(4, 5, 1.0, rng));
    b = params.add("b", nn::normal_matrix(5, 3, 1.0, rng));
    g = params.add("g", nn::normal_matrix(1, 5, 1.0, rng));
    bias = params.add("bias", nn::normal_matrix(1, 5, 1.0, rng));
  }
};

}  // namespace

TEST_CASE("tape gradients of the primitive ops") {
  Fixture f;
  auto loss = [&](nn::Tape& t) {
    nn::Var a = t.param(f.params, f.a);
    nn::Var h = t.layer_norm(a, t.param(f.params, f.g), t.param(f.params, f.bias));
    h = t.gelu(t.add_row(h, t.param(f.params, f.bias)));
    nn::Var att = t.softmax_rows(t.matmul_bt(h, h), true);
    nn::Var mixed = t.matmul(att, h);
    nn::Var logits = t.matmul(t.concat_cols({t.slice_cols(mixed, 0, 3), t.slice_cols(mixed, 3, 2)}),
                              t.param(f.params, f.b));
    return t.masked_cross_entropy(t.scale(logits, 0.7), {0, 2, 1, 2}, {1, 0, 1, 1});
  };
  for (std::size_t slot : {f.a, f.b, f.g, f.bias}) {
    CHECK(grad_relative_error(f.params, slot, loss) <= 1e-6);
  }
}

TEST_CASE("multi-positive nll gradient and value") {
  nn::ParameterSet params;
  nn::Matrix s(1, 3);
  s << 1.0, 0.0, -1.0;
  const std::size_t slot = params.add("s", s);
  nn::Tape t;
  const double v = t.scalar(t.multi_positive_nll(t.param(params, slot), {0, 1}));
  const double z = std::log(std::exp(1.0) + 1.0 + std::exp(-1.0));
  CHECK(v == doctest::Approx(0.5 * ((z - 1.0) + z)).epsilon(1e-12));
  auto loss = [&](nn::Tape& tp) { return tp.multi_positive_nll(tp.param(params, slot), {0, 1}); };
  CHECK(grad_relative_error(params, slot, loss) <= 1e-6);
}

TEST_CASE("transformer gradients for both position schemes") {
  for (const std::string position : {"learned", "alibi"}) {
    CAPTURE(position);
    nn::TransformerConfig cfg{.vocab = 12, .dim = 8, .heads = 2, .ff = 16, .layers = 2, .max_len = 10,
                              .position = position};
    nn::ParameterSet params;
    Rng rng(5);
    nn::TransformerStack stack(cfg, params, "lm", rng);
    const std::vector<int> ids = {2, 5, 7, 3, 9, 11};
    auto loss = [&](nn::Tape& t) {
      nn::Var h = stack.forward(t, params, ids, true);
      nn::Var logits = t.matmul_bt(h, t.param(params, stack.token_embedding_slot()));
      return t.masked_cross_entropy(logits, {5, 7, 3, 9, 11, 1}, {1, 1, 1, 1, 1, 1});
    };
    for (std::size_t slot : stack.slots()) {
      CAPTURE(params[slot].name);
      CHECK(grad_relative_error(params, slot, loss, 1e-5, 64) <= 1e-4);
    }
  }
}

TEST_CASE("incremental decoding matches the full forward pass") {
  for (const char* position : {"learned", "alibi"}) {
    nn::TransformerConfig cfg{.vocab = 12, .dim = 8, .heads = 2, .ff = 16, .layers = 2, .max_len = 10,
                              .position = position};
    nn::ParameterSet params;
    Rng rng(9);
    nn::TransformerStack stack(cfg, params, "lm", rng);
    const std::vector<int> ids = {2, 5, 7, 3, 9};
    const nn::Matrix full = stack.infer(params, ids, true);
    nn::KvCache cache;
    const nn::Matrix head = stack.infer_incremental(params, cache, {2, 5, 7});
    const nn::Matrix tail = stack.infer_incremental(params, cache, {3, 9});
    CHECK((head - full.topRows(3)).cwiseAbs().maxCoeff() < 1e-10);
    CHECK((tail - full.bottomRows(2)).cwiseAbs().maxCoeff() < 1e-10);
    nn::Tape t;
    CHECK((t.value(stack.forward(t, params, ids, true)) - full).cwiseAbs().maxCoeff() < 1e-10);
  }
}

TEST_CASE("causal attention ignores later tokens") {
  nn::TransformerConfig cfg{.vocab = 12, .dim = 8, .heads = 2, .ff = 16, .layers = 1, .max_len = 10};
  nn::ParameterSet params;
  Rng rng(1);
  nn::TransformerStack stack(cfg, params, "lm", rng);
  const nn::Matrix a = stack.infer(params, {2, 5, 7}, true);
  const nn::Matrix b = stack.infer(params, {2, 5, 8}, true);
  CHECK((a.topRows(2) - b.topRows(2)).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("optimizers with zero learning rate leave parameters unchanged") {
  for (const char* kind : {"sgd", "adam"}) {
    Fixture f;
    const std::uint64_t before = f.params.fingerprint();
    nn::OptimizerConfig oc;
    oc.kind = kind;
    oc.lr = 0.0;
    nn::Optimizer opt(f.params, oc);
    nn::Gradients grads(f.params);
    nn::Tape t(&grads);
    t.backward(t.masked_cross_entropy(t.matmul(t.param(f.params, f.a), t.param(f.params, f.b)), {0, 1, 2, 0},
                                      {1, 1, 1, 1}));
    opt.step(f.params, grads, {});
    CHECK(f.params.fingerprint() == before);
  }
}

TEST_CASE("optimizer updates only trainable slots") {
  Fixture f;
  const nn::Matrix b0 = f.params[f.b].value;
  const nn::Matrix a0 = f.params[f.a].value;
  nn::Optimizer opt(f.params, nn::OptimizerConfig{});
  nn::Gradients grads(f.params);
  nn::Tape t(&grads);
  t.backward(t.masked_cross_entropy(t.matmul(t.param(f.params, f.a), t.param(f.params, f.b)), {0, 1, 2, 0},
                                    {1, 1, 1, 1}));
  opt.step(f.params, grads, {f.a});
  CHECK(f.params[f.b].value == b0);
  CHECK(f.params[f.a].value != a0);
}

TEST_CASE("parameter sets serialize exactly") {
  Fixture f;
  std::stringstream ss;
  f.params.write(ss);
  Fixture g;
  g.params[g.a].value.setZero();
  g.params.read(ss);
  CHECK(g.params.fingerprint() == f.params.fingerprint());
  g.params[g.a].value(0, 0) += 1e-9;
  CHECK(g.params.fingerprint() != f.params.fingerprint());
}

TEST_CASE("dropout is inverted and seeded") {
  nn::ParameterSet params;
  const std::size_t s = params.add("x", nn::constant_matrix(50, 40, 1.0));
  Rng r1(4), r2(4);
  nn::Tape t;
  const nn::Matrix a = t.value(t.dropout(t.param(params, s), 0.25, r1));
  const nn::Matrix b = t.value(t.dropout(t.param(params, s), 0.25, r2));
  CHECK(a == b);
  for (Eigen::Index i = 0; i < a.size(); ++i) {
    const double v = a.data()[i];
    CHECK((v == 0.0 || std::abs(v - 1.0 / 0.75) < 1e-12));
  }
  CHECK(a.mean() == doctest::Approx(1.0).epsilon(0.1));
}
