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

#include "kaft/nn.hpp"

#include <cmath>
#include <istream>
#include <limits>
#include <ostream>

#include "kaft/error.hpp"
#include "kaft/rng.hpp"

namespace kaft::nn {

// --- parameters -------------------------------------------------------------------

ParameterSet::ParameterSet(const ParameterSet& other) {
  params_.reserve(other.params_.size());
  for (const auto& p : other.params_) params_.push_back(std::make_unique<Parameter>(*p));
}

ParameterSet& ParameterSet::operator=(const ParameterSet& other) {
  if (this != &other) {
    ParameterSet tmp(other);
    *this = std::move(tmp);
  }
  return *this;
}

std::size_t ParameterSet::add(std::string name, Matrix init) {
  params_.push_back(std::make_unique<Parameter>(Parameter{std::move(name), std::move(init)}));
  return params_.size() - 1;
}

std::size_t ParameterSet::find(const std::string& name) const {
  for (std::size_t i = 0; i < params_.size(); ++i) {
    if (params_[i]->name == name) return i;
  }
  fail(ErrorCode::kNotFound, "no parameter named " + name);
}

std::size_t ParameterSet::scalar_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += static_cast<std::size_t>(p->value.size());
  return n;
}

std::uint64_t ParameterSet::fingerprint() const {
  std::uint64_t h = 1469598103934665603ULL;
  auto mix = [&](const void* data, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 1099511628211ULL;
    }
  };
  for (const auto& p : params_) {
    mix(p->name.data(), p->name.size());
    const long shape[2] = {static_cast<long>(p->value.rows()), static_cast<long>(p->value.cols())};
    mix(shape, sizeof shape);
    mix(p->value.data(), sizeof(double) * static_cast<std::size_t>(p->value.size()));
  }
  return h;
}

namespace {

template <typename T>
void put(std::ostream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& in) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) fail(ErrorCode::kParse, "truncated parameter stream");
  return v;
}

}  // namespace

void ParameterSet::write(std::ostream& out) const {
  put<std::uint64_t>(out, params_.size());
  for (const auto& p : params_) {
    put<std::uint64_t>(out, p->name.size());
    out.write(p->name.data(), static_cast<std::streamsize>(p->name.size()));
    put<std::int64_t>(out, p->value.rows());
    put<std::int64_t>(out, p->value.cols());
    out.write(reinterpret_cast<const char*>(p->value.data()),
              static_cast<std::streamsize>(sizeof(double) * p->value.size()));
  }
}

void ParameterSet::read(std::istream& in) {
  const auto n = get<std::uint64_t>(in);
  if (n != params_.size()) {
    fail(ErrorCode::kParse, "parameter count mismatch: stream has " + std::to_string(n) +
                                ", model declares " + std::to_string(params_.size()));
  }
  for (auto& p : params_) {
    const auto len = get<std::uint64_t>(in);
    if (len > 4096) fail(ErrorCode::kParse, "implausible parameter name length");
    std::string name(len, '\0');
    in.read(name.data(), static_cast<std::streamsize>(len));
    const auto rows = get<std::int64_t>(in);
    const auto cols = get<std::int64_t>(in);
    if (name != p->name || rows != p->value.rows() || cols != p->value.cols()) {
      fail(ErrorCode::kParse, "parameter mismatch at " + p->name + " (stream has " + name + ")");
    }
    in.read(reinterpret_cast<char*>(p->value.data()),
            static_cast<std::streamsize>(sizeof(double) * p->value.size()));
    if (!in) fail(ErrorCode::kParse, "truncated parameter stream at " + name);
  }
}

Gradients::Gradients(const ParameterSet& params) {
  slots.reserve(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    slots.push_back(Matrix::Zero(params[i].value.rows(), params[i].value.cols()));
  }
}

void Gradients::zero() {
  for (auto& g : slots) g.setZero();
}

void Gradients::scale(double s) {
  for (auto& g : slots) g *= s;
}

double Gradients::norm() const {
  double sq = 0.0;
  for (const auto& g : slots) sq += g.squaredNorm();
  return std::sqrt(sq);
}

bool Gradients::all_finite() const {
  for (const auto& g : slots) {
    if (!g.allFinite()) return false;
  }
  return true;
}

// --- tape -------------------------------------------------------------------------

Var Tape::push(Matrix value, bool needs_grad, std::function<void(Tape&)> back) {
  auto n = std::make_unique<Node>();
  n->own = std::move(value);
  n->needs_grad = needs_grad;
  if (needs_grad) n->back = std::move(back);
  nodes_.push_back(std::move(n));
  return Var{static_cast<int>(nodes_.size()) - 1};
}

Matrix& Tape::grad(Var v) {
  Node& n = node(v);
  if (n.grad.size() == 0) n.grad = Matrix::Zero(n.value().rows(), n.value().cols());
  return n.grad;
}

const Matrix& Tape::value(Var v) const { return node(v).value(); }

Var Tape::param(const ParameterSet& params, std::size_t slot) {
  auto n = std::make_unique<Node>();
  n->ref = &params[slot].value;
  n->needs_grad = sink_ != nullptr;
  n->param_slot = static_cast<long>(slot);
  nodes_.push_back(std::move(n));
  return Var{static_cast<int>(nodes_.size()) - 1};
}

Var Tape::constant(Matrix m) { return push(std::move(m), false, nullptr); }

Var Tape::matmul(Var a, Var b) {
  const int out = static_cast<int>(nodes_.size());
  Matrix v = value(a) * value(b);
  const bool ng = node(a).needs_grad || node(b).needs_grad;
  return push(std::move(v), ng, [a, b, out](Tape& t) {
    const Matrix& g = t.node(Var{out}).grad;
    if (t.node(a).needs_grad) t.grad(a).noalias() += g * t.value(b).transpose();
    if (t.node(b).needs_grad) t.grad(b).noalias() += t.value(a).transpose() * g;
  });
}

Var Tape::matmul_bt(Var a, Var b) {
  const int out = static_cast<int>(nodes_.size());
  Matrix v = value(a) * value(b).transpose();
  const bool ng = node(a).needs_grad || node(b).needs_grad;
  return push(std::move(v), ng, [a, b, out](Tape& t) {
    const Matrix& g = t.node(Var{out}).grad;
    if (t.node(a).needs_grad) t.grad(a).noalias() += g * t.value(b);
    if (t.node(b).needs_grad) t.grad(b).noalias() += g.transpose() * t.value(a);
  });
}

Var Tape::add(Var a, Var b) {
  const int out = static_cast<int>(nodes_.size());
  Matrix v = value(a) + value(b);
  const bool ng = node(a).needs_grad || node(b).needs_grad;
  return push(std::move(v), ng, [a, b, out](Tape& t) {
    const Matrix& g = t.node(Var{out}).grad;
    if (t.node(a).needs_grad) t.grad(a) += g;
    if (t.node(b).needs_grad) t.grad(b) += g;
  });
}

Var Tape::add_row(Var x, Var row) {
  const int out = static_cast<int>(nodes_.size());
  Matrix v = value(x);
  v.rowwise() += value(row).row(0);
  const bool ng = node(x).needs_grad || node(row).needs_grad;
  return push(std::move(v), ng, [x, row, out](Tape& t) {
    const Matrix& g = t.node(Var{out}).grad;
    if (t.node(x).needs_grad) t.grad(x) += g;
    if (t.node(row).needs_grad) t.grad(row) += g.colwise().sum();
  });
}

Var Tape::scale(Var x, double s) {
  const int out = static_cast<int>(nodes_.size());
  Matrix v = value(x) * s;
  return push(std::move(v), node(x).needs_grad, [x, s, out](Tape& t) {
    t.grad(x) += s * t.node(Var{out}).grad;
  });
}

namespace {
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;
}  // namespace

Var Tape::dropout(Var x, double p, Rng& rng) {
  if (p <= 0.0) return x;
  const int out = static_cast<int>(nodes_.size());
  const Matrix& xv = value(x);
  Matrix keep(xv.rows(), xv.cols());
  const double scale = 1.0 / (1.0 - p);
  for (Eigen::Index i = 0; i < keep.size(); ++i) keep.data()[i] = rng.uniform01() < p ? 0.0 : scale;
  Matrix v = xv.cwiseProduct(keep);
  return push(std::move(v), node(x).needs_grad, [x, out, keep = std::move(keep)](Tape& t) {
    t.grad(x).noalias() += t.node(Var{out}).grad.cwiseProduct(keep);
  });
}

Var Tape::gelu(Var x) {
  const int out = static_cast<int>(nodes_.size());
  const Matrix& xv = value(x);
  Matrix v(xv.rows(), xv.cols());
  for (Eigen::Index i = 0; i < xv.size(); ++i) {
    const double z = xv.data()[i];
    v.data()[i] = 0.5 * z * (1.0 + std::tanh(kGeluC * (z + kGeluA * z * z * z)));
  }
  return push(std::move(v), node(x).needs_grad, [x, out](Tape& t) {
    const Matrix& g = t.node(Var{out}).grad;
    const Matrix& xv = t.value(x);
    Matrix& gx = t.grad(x);
    for (Eigen::Index i = 0; i < xv.size(); ++i) {
      const double z = xv.data()[i];
      const double th = std::tanh(kGeluC * (z + kGeluA * z * z * z));
      const double d = 0.5 * (1.0 + th) +
                       0.5 * z * (1.0 - th * th) * kGeluC * (1.0 + 3.0 * kGeluA * z * z);
      gx.data()[i] += g.data()[i] * d;
    }
  });
}

Var Tape::layer_norm(Var x, Var gain, Var bias, double eps) {
  const int out = static_cast<int>(nodes_.size());
  const Matrix& xv = value(x);
  const Eigen::Index rows = xv.rows();
  const Eigen::Index cols = xv.cols();
  Matrix xhat(rows, cols);
  Eigen::VectorXd inv_std(rows);
  for (Eigen::Index r = 0; r < rows; ++r) {
    const double mu = xv.row(r).mean();
    const double var = (xv.row(r).array() - mu).square().mean();
    inv_std(r) = 1.0 / std::sqrt(var + eps);
    xhat.row(r) = (xv.row(r).array() - mu) * inv_std(r);
  }
  Matrix v = xhat.array().rowwise() * value(gain).row(0).array();
  v.rowwise() += value(bias).row(0);
  const bool ng = node(x).needs_grad || node(gain).needs_grad || node(bias).needs_grad;
  return push(std::move(v), ng,
              [x, gain, bias, out, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape& t) {
                const Matrix& g = t.node(Var{out}).grad;
                if (t.node(gain).needs_grad) {
                  t.grad(gain) += (g.array() * xhat.array()).colwise().sum().matrix();
                }
                if (t.node(bias).needs_grad) t.grad(bias) += g.colwise().sum();
                if (t.node(x).needs_grad) {
                  Matrix dxhat = g.array().rowwise() * t.value(gain).row(0).array();
                  Matrix& gx = t.grad(x);
                  const double n = static_cast<double>(xhat.cols());
                  for (Eigen::Index r = 0; r < xhat.rows(); ++r) {
                    const double m1 = dxhat.row(r).sum() / n;
                    const double m2 = dxhat.row(r).dot(xhat.row(r)) / n;
                    gx.row(r).array() +=
                        inv_std(r) * (dxhat.row(r).array() - m1 - xhat.row(r).array() * m2);
                  }
                }
              });
}

Var Tape::softmax_rows(Var x, bool causal) {
  const int out = static_cast<int>(nodes_.size());
  const Matrix& xv = value(x);
  Matrix v = Matrix::Zero(xv.rows(), xv.cols());
  for (Eigen::Index r = 0; r < xv.rows(); ++r) {
    const Eigen::Index n = causal ? std::min<Eigen::Index>(r + 1, xv.cols()) : xv.cols();
    const double mx = xv.row(r).head(n).maxCoeff();
    double z = 0.0;
    for (Eigen::Index c = 0; c < n; ++c) {
      v(r, c) = std::exp(xv(r, c) - mx);
      z += v(r, c);
    }
    v.row(r).head(n) /= z;
  }
  return push(std::move(v), node(x).needs_grad, [x, out](Tape& t) {
    const Node& o = t.node(Var{out});
    const Matrix& y = o.own;
    const Matrix& g = o.grad;
    Matrix& gx = t.grad(x);
    for (Eigen::Index r = 0; r < y.rows(); ++r) {
      const double dot = g.row(r).dot(y.row(r));
      gx.row(r).array() += y.row(r).array() * (g.row(r).array() - dot);
    }
  });
}

Var Tape::slice_cols(Var x, int start, int width) {
  const int out = static_cast<int>(nodes_.size());
  Matrix v = value(x).middleCols(start, width);
  return push(std::move(v), node(x).needs_grad, [x, start, width, out](Tape& t) {
    t.grad(x).middleCols(start, width) += t.node(Var{out}).grad;
  });
}

Var Tape::slice_rows(Var x, int start, int count) {
  const int out = static_cast<int>(nodes_.size());
  Matrix v = value(x).middleRows(start, count);
  return push(std::move(v), node(x).needs_grad, [x, start, count, out](Tape& t) {
    t.grad(x).middleRows(start, count) += t.node(Var{out}).grad;
  });
}

Var Tape::concat_cols(const std::vector<Var>& parts) {
  const int out = static_cast<int>(nodes_.size());
  Eigen::Index rows = value(parts.front()).rows();
  Eigen::Index cols = 0;
  bool ng = false;
  for (Var p : parts) {
    cols += value(p).cols();
    ng = ng || node(p).needs_grad;
  }
  Matrix v(rows, cols);
  Eigen::Index at = 0;
  for (Var p : parts) {
    v.middleCols(at, value(p).cols()) = value(p);
    at += value(p).cols();
  }
  return push(std::move(v), ng, [parts, out](Tape& t) {
    const Matrix& g = t.node(Var{out}).grad;
    Eigen::Index at = 0;
    for (Var p : parts) {
      const Eigen::Index w = t.value(p).cols();
      if (t.node(p).needs_grad) t.grad(p) += g.middleCols(at, w);
      at += w;
    }
  });
}

Var Tape::gather_rows(Var table, const std::vector<int>& ids) {
  const int out = static_cast<int>(nodes_.size());
  const Matrix& tv = value(table);
  Matrix v(static_cast<Eigen::Index>(ids.size()), tv.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= tv.rows()) {
      fail(ErrorCode::kInvalidArgument, "row id " + std::to_string(ids[i]) + " out of range");
    }
    v.row(static_cast<Eigen::Index>(i)) = tv.row(ids[i]);
  }
  return push(std::move(v), node(table).needs_grad, [table, ids, out](Tape& t) {
    const Matrix& g = t.node(Var{out}).grad;
    Matrix& gt = t.grad(table);
    for (std::size_t i = 0; i < ids.size(); ++i) gt.row(ids[i]) += g.row(static_cast<Eigen::Index>(i));
  });
}

Var Tape::mean_rows(Var x) {
  const int out = static_cast<int>(nodes_.size());
  Matrix v = value(x).colwise().mean();
  return push(std::move(v), node(x).needs_grad, [x, out](Tape& t) {
    const Matrix& g = t.node(Var{out}).grad;
    Matrix& gx = t.grad(x);
    gx.rowwise() += g.row(0) / static_cast<double>(gx.rows());
  });
}

Var Tape::masked_cross_entropy(Var logits, const std::vector<int>& targets,
                               const std::vector<std::uint8_t>& mask) {
  const int out = static_cast<int>(nodes_.size());
  const Matrix& lv = value(logits);
  if (targets.size() != static_cast<std::size_t>(lv.rows()) || mask.size() != targets.size()) {
    fail(ErrorCode::kInvalidArgument, "cross entropy: targets/mask length mismatch");
  }
  std::size_t count = 0;
  for (auto m : mask) count += m ? 1 : 0;
  double loss = 0.0;
  Matrix probs;  // only rows that contribute
  if (count > 0) probs = Matrix::Zero(lv.rows(), lv.cols());
  for (Eigen::Index r = 0; r < lv.rows(); ++r) {
    if (!mask[static_cast<std::size_t>(r)]) continue;
    const int tgt = targets[static_cast<std::size_t>(r)];
    if (tgt < 0 || tgt >= lv.cols()) fail(ErrorCode::kInvalidArgument, "cross entropy: bad target");
    const double mx = lv.row(r).maxCoeff();
    probs.row(r) = (lv.row(r).array() - mx).exp();
    const double z = probs.row(r).sum();
    probs.row(r) /= z;
    loss += (std::log(z) + mx) - lv(r, tgt);
  }
  const double denom = count > 0 ? static_cast<double>(count) : 1.0;
  Matrix v(1, 1);
  v(0, 0) = loss / denom;
  return push(std::move(v), node(logits).needs_grad && count > 0,
              [logits, targets, mask, denom, out, probs = std::move(probs)](Tape& t) {
                const double g = t.node(Var{out}).grad(0, 0) / denom;
                Matrix& gl = t.grad(logits);
                for (Eigen::Index r = 0; r < probs.rows(); ++r) {
                  if (!mask[static_cast<std::size_t>(r)]) continue;
                  gl.row(r) += g * probs.row(r);
                  gl(r, targets[static_cast<std::size_t>(r)]) -= g;
                }
              });
}

Var Tape::multi_positive_nll(Var scores, const std::vector<int>& targets) {
  const int out = static_cast<int>(nodes_.size());
  const Matrix& sv = value(scores);
  if (sv.rows() != 1) fail(ErrorCode::kInvalidArgument, "multi_positive_nll expects a 1xK row");
  if (targets.empty()) fail(ErrorCode::kInvalidArgument, "multi_positive_nll needs a target");
  const double mx = sv.maxCoeff();
  Matrix p = (sv.array() - mx).exp();
  const double z = p.sum();
  p /= z;
  const double lse = std::log(z) + mx;
  double loss = 0.0;
  for (int tgt : targets) {
    if (tgt < 0 || tgt >= sv.cols()) fail(ErrorCode::kInvalidArgument, "multi_positive_nll: bad target");
    loss += lse - sv(0, tgt);
  }
  const double m = static_cast<double>(targets.size());
  Matrix v(1, 1);
  v(0, 0) = loss / m;
  return push(std::move(v), node(scores).needs_grad,
              [scores, targets, m, out, p = std::move(p)](Tape& t) {
                const double g = t.node(Var{out}).grad(0, 0);
                Matrix& gs = t.grad(scores);
                gs += g * p;
                for (int tgt : targets) gs(0, tgt) -= g / m;
              });
}

void Tape::backward(Var loss) {
  grad(loss).setConstant(1.0);
  for (int i = loss.id; i >= 0; --i) {
    Node& n = *nodes_[static_cast<std::size_t>(i)];
    if (!n.needs_grad || n.grad.size() == 0) continue;
    if (n.back) n.back(*this);
    if (n.param_slot >= 0 && sink_ != nullptr) {
      sink_->slots[static_cast<std::size_t>(n.param_slot)] += n.grad;
    }
  }
}

// --- init / optimizers ------------------------------------------------------------

Matrix normal_matrix(int rows, int cols, double stddev, Rng& rng) {
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = stddev * rng.normal();
  return m;
}

Matrix constant_matrix(int rows, int cols, double v) { return Matrix::Constant(rows, cols, v); }

Optimizer::Optimizer(const ParameterSet& params, OptimizerConfig cfg) : cfg_(std::move(cfg)) {
  if (cfg_.kind != "sgd" && cfg_.kind != "adam") {
    fail(ErrorCode::kInvalidArgument, "unknown optimizer \"" + cfg_.kind + "\"");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    m_.push_back(Matrix::Zero(params[i].value.rows(), params[i].value.cols()));
    if (cfg_.kind == "adam") v_.push_back(Matrix::Zero(params[i].value.rows(), params[i].value.cols()));
  }
}

void Optimizer::step(ParameterSet& params, Gradients& grads,
                     const std::vector<std::size_t>& trainable) {
  std::vector<std::size_t> slots = trainable;
  if (slots.empty()) {
    for (std::size_t i = 0; i < params.size(); ++i) slots.push_back(i);
  }
  if (cfg_.clip_norm > 0.0) {
    double sq = 0.0;
    for (auto s : slots) sq += grads.slots[s].squaredNorm();
    const double norm = std::sqrt(sq);
    if (norm > cfg_.clip_norm) {
      for (auto s : slots) grads.slots[s] *= cfg_.clip_norm / norm;
    }
  }
  ++t_;
  if (cfg_.kind == "sgd") {
    for (auto s : slots) {
      m_[s] = cfg_.momentum * m_[s] + grads.slots[s];
      params[s].value -= cfg_.lr * m_[s];
    }
    return;
  }
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (auto s : slots) {
    const Matrix& g = grads.slots[s];
    m_[s] = cfg_.beta1 * m_[s] + (1.0 - cfg_.beta1) * g;
    v_[s] = cfg_.beta2 * v_[s] + (1.0 - cfg_.beta2) * g.cwiseProduct(g);
    params[s].value.array() -=
        cfg_.lr * (m_[s].array() / bc1) / ((v_[s].array() / bc2).sqrt() + cfg_.eps);
  }
}

nlohmann::json OptimizerConfig::to_json() const {
  return {{"kind", kind}, {"lr", lr},       {"momentum", momentum}, {"beta1", beta1},
          {"beta2", beta2}, {"eps", eps}, {"clip_norm", clip_norm}};
}

OptimizerConfig OptimizerConfig::from_json(const nlohmann::json& j, const OptimizerConfig& defaults) {
  OptimizerConfig c = defaults;
  c.kind = j.value("kind", c.kind);
  c.lr = j.value("lr", c.lr);
  c.momentum = j.value("momentum", c.momentum);
  c.beta1 = j.value("beta1", c.beta1);
  c.beta2 = j.value("beta2", c.beta2);
  c.eps = j.value("eps", c.eps);
  c.clip_norm = j.value("clip_norm", c.clip_norm);
  if (c.kind != "sgd" && c.kind != "adam") fail(ErrorCode::kInvalidArgument, "unknown optimizer " + c.kind);
  return c;
}

}  // namespace kaft::nn
