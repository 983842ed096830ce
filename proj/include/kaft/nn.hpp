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

// Minimal reverse-mode automatic differentiation over dense row-major
// matrices, parameter storage and first-order optimizers.
//
// A Tape records one forward computation. Parameters enter as leaves bound to
// a slot of a Gradients buffer; Tape::backward() accumulates into that buffer,
// so several tapes (one per example) can share a buffer across a mini-batch.

#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <memory>
#include <string>
#include <vector>

#include "json.hpp"

namespace kaft {
class Rng;
}

namespace kaft::nn {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowVector = Eigen::Matrix<double, 1, Eigen::Dynamic>;

struct Parameter {
  std::string name;
  Matrix value;
};

class ParameterSet {
 public:
  ParameterSet() = default;
  ParameterSet(const ParameterSet& other);
  ParameterSet& operator=(const ParameterSet& other);
  ParameterSet(ParameterSet&&) noexcept = default;
  ParameterSet& operator=(ParameterSet&&) noexcept = default;

  // Returns the slot index of the new parameter.
  std::size_t add(std::string name, Matrix init);

  std::size_t size() const { return params_.size(); }
  Parameter& operator[](std::size_t i) { return *params_[i]; }
  const Parameter& operator[](std::size_t i) const { return *params_[i]; }
  std::size_t find(const std::string& name) const;  // throws kNotFound
  std::size_t scalar_count() const;

  // FNV-1a over names, shapes and raw bytes of every value.
  std::uint64_t fingerprint() const;

  void write(std::ostream& out) const;
  // Reads values into already-declared parameters; names and shapes must match.
  void read(std::istream& in);

 private:
  std::vector<std::unique_ptr<Parameter>> params_;
};

// Gradient buffers parallel to a ParameterSet.
struct Gradients {
  std::vector<Matrix> slots;

  explicit Gradients(const ParameterSet& params);
  void zero();
  void scale(double s);
  double norm() const;
  bool all_finite() const;
};

struct Var {
  int id = -1;
};

class Tape {
 public:
  explicit Tape(Gradients* sink = nullptr) : sink_(sink) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var param(const ParameterSet& params, std::size_t slot);
  Var constant(Matrix m);

  Var matmul(Var a, Var b);     // a · b
  Var matmul_bt(Var a, Var b);  // a · bᵀ
  Var add(Var a, Var b);
  Var add_row(Var x, Var row);  // broadcast a 1×n row over every row of x
  Var scale(Var x, double s);
  Var gelu(Var x);
  // Inverted dropout: zeroes each entry with probability p, scales the rest by 1/(1-p).
  Var dropout(Var x, double p, Rng& rng);
  Var layer_norm(Var x, Var gain, Var bias, double eps = 1e-5);
  Var softmax_rows(Var x, bool causal);
  Var slice_cols(Var x, int start, int width);
  Var slice_rows(Var x, int start, int count);
  Var concat_cols(const std::vector<Var>& parts);
  Var gather_rows(Var table, const std::vector<int>& ids);
  Var mean_rows(Var x);

  // Mean over rows with mask[i] != 0 of -log softmax(logits.row(i))[target[i]].
  // Returns a 1×1 value; rows with mask 0 contribute nothing, whatever their target.
  Var masked_cross_entropy(Var logits, const std::vector<int>& targets,
                           const std::vector<std::uint8_t>& mask);

  // -(1/|targets|) Σ_j log softmax(scores)[targets[j]] for a 1×K row of scores.
  Var multi_positive_nll(Var scores, const std::vector<int>& targets);

  const Matrix& value(Var v) const;
  double scalar(Var v) const { return value(v)(0, 0); }

  // Seeds d(loss)/d(loss) = 1 and propagates; parameter gradients are added to
  // the sink passed at construction.
  void backward(Var loss);

 private:
  struct Node {
    Matrix own;
    const Matrix* ref = nullptr;
    Matrix grad;
    bool needs_grad = false;
    long param_slot = -1;
    std::function<void(Tape&)> back;
    const Matrix& value() const { return ref ? *ref : own; }
  };

  Var push(Matrix value, bool needs_grad, std::function<void(Tape&)> back);
  Node& node(Var v) { return *nodes_[static_cast<std::size_t>(v.id)]; }
  const Node& node(Var v) const { return *nodes_[static_cast<std::size_t>(v.id)]; }
  Matrix& grad(Var v);  // lazily sized zero gradient

  std::vector<std::unique_ptr<Node>> nodes_;
  Gradients* sink_;
};

// Initializers.
Matrix normal_matrix(int rows, int cols, double stddev, Rng& rng);
Matrix constant_matrix(int rows, int cols, double v);

struct OptimizerConfig {
  std::string kind = "sgd";  // "sgd" (with momentum) or "adam"
  double lr = 0.05;
  double momentum = 0.9;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double clip_norm = 0.0;  // 0 disables global-norm clipping

  nlohmann::json to_json() const;
  // Missing keys keep the values of `defaults`.
  static OptimizerConfig from_json(const nlohmann::json& j, const OptimizerConfig& defaults);
};

class Optimizer {
 public:
  Optimizer(const ParameterSet& params, OptimizerConfig cfg);

  // Applies one update to every slot in `trainable` (all slots when empty).
  void step(ParameterSet& params, Gradients& grads, const std::vector<std::size_t>& trainable);

 private:
  OptimizerConfig cfg_;
  std::vector<Matrix> m_;
  std::vector<Matrix> v_;
  long t_ = 0;
};

}  // namespace kaft::nn
