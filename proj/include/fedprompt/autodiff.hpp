//
// Copyright 2026 The FedPrompt Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.
//

#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <limits>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "fedprompt/errors.hpp"
#include "fedprompt/tensor.hpp"

namespace fedprompt {

class Tape;

// Handle to a node recorded on a Tape. Cheap to copy; valid while the tape
// lives.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape() const { return tape_; }
  std::size_t id() const { return id_; }
  const Tensor& value() const;

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

// Single-use reverse-mode tape. Every op records its output value and a
// closure that maps the output gradient to input gradients. Nodes that do not
// depend on any gradient-requiring leaf store no closure and no gradient.
class Tape {
 public:
  // Receives the output gradient and accumulates into the inputs through
  // Tape::grad_of.
  using Backward = std::function<void(Tape&, std::span<const double>)>;

  Tape() { nodes_.reserve(256); }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Owned constant; never receives gradient.
  Var constant(Tensor value) {
    Node n;
    n.owned = std::move(value);
    return push(std::move(n));
  }

  // Borrowed constant; `value` must outlive the tape.
  Var constant_ref(const Tensor& value) {
    Node n;
    n.external = &value;
    return push(std::move(n));
  }

  // Leaf bound to a trainable tensor. When the tensor requires grad, backward
  // adds the leaf gradient into its grad slot; otherwise it is a constant.
  Var parameter(Tensor& value) {
    Node n;
    n.external = &value;
    if (value.requires_grad()) {
      n.sink = &value;
      n.needs_grad = true;
    }
    return push(std::move(n));
  }

  Var record(Tensor value, std::initializer_list<Var> inputs, Backward fn) {
    return record(std::move(value), std::span<const Var>(inputs.begin(), inputs.size()),
                  std::move(fn));
  }

  Var record(Tensor value, std::span<const Var> inputs, Backward fn) {
    Node n;
    n.owned = std::move(value);
    for (const Var& v : inputs) {
      check_owner(v);
      n.needs_grad = n.needs_grad || nodes_[v.id()].needs_grad;
    }
    if (n.needs_grad) n.backward = std::move(fn);
    return push(std::move(n));
  }

  const Tensor& value(Var v) const { return nodes_[v.id()].value(); }
  bool needs_grad(Var v) const { return nodes_[v.id()].needs_grad; }

  // Gradient buffer of `v`, allocated on first use. Empty when `v` does not
  // need a gradient.
  std::span<double> grad_of(Var v) {
    Node& n = nodes_[v.id()];
    if (!n.needs_grad) return {};
    if (n.grad.empty()) n.grad.assign(n.value().size(), 0.0);
    return n.grad;
  }

  // Seeds d(loss)/d(loss) = 1, replays closures in reverse recording order,
  // then flushes leaf gradients into the bound tensors.
  void backward(Var loss) {
    check_owner(loss);
    if (value(loss).size() != 1) {
      throw DimensionError("backward() requires a scalar loss, got shape " +
                           shape_string(value(loss).shape()));
    }
    if (backward_done_) throw Error("tape already replayed");
    backward_done_ = true;
    if (!nodes_[loss.id()].needs_grad) return;
    grad_of(loss)[0] = 1.0;
    for (std::size_t i = loss.id() + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.backward || n.grad.empty()) continue;
      n.backward(*this, n.grad);
    }
    for (Node& n : nodes_) {
      if (n.sink == nullptr || n.grad.empty()) continue;
      std::span<double> dst = n.sink->grad();
      for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += n.grad[j];
    }
  }

  std::size_t size() const { return nodes_.size(); }

  // Test-only fault injection: scales the left-operand gradient of every
  // matmul by `factor`. 1.0 means no fault.
  void set_matmul_fault(double factor) { matmul_fault_ = factor; }
  double matmul_fault() const { return matmul_fault_; }

 private:
  struct Node {
    Tensor owned;
    const Tensor* external = nullptr;
    Tensor* sink = nullptr;
    bool needs_grad = false;
    std::vector<double> grad;
    Backward backward;

    const Tensor& value() const { return external ? *external : owned; }
  };

  Var push(Node n) {
    nodes_.push_back(std::move(n));
    return Var(this, nodes_.size() - 1);
  }

  void check_owner(Var v) const {
    if (v.tape() != this || v.id() >= nodes_.size()) {
      throw Error("variable does not belong to this tape");
    }
  }

  std::vector<Node> nodes_;
  bool backward_done_ = false;
  double matmul_fault_ = 1.0;
};

inline const Tensor& Var::value() const { return tape_->value(*this); }

// ---------------------------------------------------------------------------
// Primitives. All operate on rank-2 values (row vectors are 1xn).

namespace detail {

inline void require_rank2(const Tensor& t, const char* op) {
  if (t.rank() != 2) {
    throw DimensionError(std::string(op) + " expects a rank-2 tensor, got " +
                         shape_string(t.shape()));
  }
}

// out(m x n) += a(m x k) * b(k x n)
inline void gemm_acc(const double* a, const double* b, double* out,
                     std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* orow = out + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a[i * k + p];
      const double* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
}

}  // namespace detail

inline Var matmul(Var a, Var b) {
  Tape& tape = *a.tape();
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  detail::require_rank2(av, "matmul");
  detail::require_rank2(bv, "matmul");
  const std::size_t m = av.rows(), k = av.cols(), n = bv.cols();
  if (bv.rows() != k) {
    throw DimensionError("matmul inner extents differ: " + shape_string(av.shape()) +
                         " * " + shape_string(bv.shape()));
  }
  Tensor out({m, n});
  detail::gemm_acc(av.data().data(), bv.data().data(), out.data().data(), m, k, n);
  return tape.record(std::move(out), {a, b},
                     [a, b, m, k, n](Tape& t, std::span<const double> g) {
                       const double* adata = t.value(a).data().data();
                       const double* bdata = t.value(b).data().data();
                       if (auto ga = t.grad_of(a); !ga.empty()) {
                         // ga += g * b^T
                         const double fault = t.matmul_fault();
                         for (std::size_t i = 0; i < m; ++i) {
                           for (std::size_t p = 0; p < k; ++p) {
                             double acc = 0.0;
                             for (std::size_t j = 0; j < n; ++j) {
                               acc += g[i * n + j] * bdata[p * n + j];
                             }
                             ga[i * k + p] += fault * acc;
                           }
                         }
                       }
                       if (auto gb = t.grad_of(b); !gb.empty()) {
                         // gb += a^T * g
                         for (std::size_t i = 0; i < m; ++i) {
                           for (std::size_t p = 0; p < k; ++p) {
                             const double av = adata[i * k + p];
                             if (av == 0.0) continue;
                             for (std::size_t j = 0; j < n; ++j) {
                               gb[p * n + j] += av * g[i * n + j];
                             }
                           }
                         }
                       }
                     });
}

inline Var transpose(Var a) {
  const Tensor& av = a.value();
  detail::require_rank2(av, "transpose");
  const std::size_t r = av.rows(), c = av.cols();
  Tensor out({c, r});
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = 0; j < c; ++j) out.at(j, i) = av.at(i, j);
  }
  return a.tape()->record(std::move(out), {a},
                          [a, r, c](Tape& t, std::span<const double> g) {
                            auto ga = t.grad_of(a);
                            for (std::size_t i = 0; i < r; ++i) {
                              for (std::size_t j = 0; j < c; ++j) {
                                ga[i * c + j] += g[j * r + i];
                              }
                            }
                          });
}

inline Var add(Var a, Var b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.shape() != bv.shape()) {
    throw DimensionError("add shape mismatch: " + shape_string(av.shape()) + " vs " +
                         shape_string(bv.shape()));
  }
  Tensor out = Tensor(av.shape(), av.values());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  return a.tape()->record(std::move(out), {a, b},
                          [a, b](Tape& t, std::span<const double> g) {
                            for (Var v : {a, b}) {
                              auto gv = t.grad_of(v);
                              for (std::size_t i = 0; i < gv.size(); ++i) gv[i] += g[i];
                            }
                          });
}

// Adds a 1xn row to every row of an mxn matrix.
inline Var add_row(Var a, Var row) {
  const Tensor& av = a.value();
  const Tensor& rv = row.value();
  detail::require_rank2(av, "add_row");
  if (rv.size() != av.cols()) {
    throw DimensionError("add_row width mismatch: " + shape_string(av.shape()) +
                         " + " + shape_string(rv.shape()));
  }
  const std::size_t m = av.rows(), n = av.cols();
  Tensor out = Tensor(av.shape(), av.values());
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] += rv[j];
  }
  return a.tape()->record(std::move(out), {a, row},
                          [a, row, m, n](Tape& t, std::span<const double> g) {
                            if (auto ga = t.grad_of(a); !ga.empty()) {
                              for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i];
                            }
                            if (auto gr = t.grad_of(row); !gr.empty()) {
                              for (std::size_t i = 0; i < m; ++i) {
                                for (std::size_t j = 0; j < n; ++j) gr[j] += g[i * n + j];
                              }
                            }
                          });
}

inline Var scale(Var a, double factor) {
  Tensor out = Tensor(a.value().shape(), a.value().values());
  for (double& v : out.data()) v *= factor;
  return a.tape()->record(std::move(out), {a},
                          [a, factor](Tape& t, std::span<const double> g) {
                            auto ga = t.grad_of(a);
                            for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += factor * g[i];
                          });
}

inline Var sum(Var a) {
  double s = 0.0;
  for (double v : a.value().data()) s += v;
  return a.tape()->record(Tensor({1, 1}, {s}), {a},
                          [a](Tape& t, std::span<const double> g) {
                            auto ga = t.grad_of(a);
                            for (double& v : ga) v += g[0];
                          });
}

// tanh approximation of GELU.
inline Var gelu(Var a) {
  constexpr double kC = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double kA = 0.044715;
  const Tensor& av = a.value();
  Tensor out(av.shape());
  for (std::size_t i = 0; i < av.size(); ++i) {
    const double x = av[i];
    out[i] = 0.5 * x * (1.0 + std::tanh(kC * (x + kA * x * x * x)));
  }
  return a.tape()->record(std::move(out), {a}, [a](Tape& t, std::span<const double> g) {
    const Tensor& av = t.value(a);
    auto ga = t.grad_of(a);
    for (std::size_t i = 0; i < ga.size(); ++i) {
      const double x = av[i];
      const double th = std::tanh(kC * (x + kA * x * x * x));
      const double d = 0.5 * (1.0 + th) +
                       0.5 * x * (1.0 - th * th) * kC * (1.0 + 3.0 * kA * x * x);
      ga[i] += d * g[i];
    }
  });
}

// Row-wise softmax with max subtraction.
inline Var softmax_rows(Var a) {
  const Tensor& av = a.value();
  detail::require_rank2(av, "softmax_rows");
  const std::size_t m = av.rows(), n = av.cols();
  Tensor out(av.shape());
  for (std::size_t i = 0; i < m; ++i) {
    auto x = av.row_span(i);
    auto y = out.row_span(i);
    const double mx = *std::max_element(x.begin(), x.end());
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) z += (y[j] = std::exp(x[j] - mx));
    for (std::size_t j = 0; j < n; ++j) y[j] /= z;
  }
  std::vector<double> y = out.values();
  return a.tape()->record(std::move(out), {a},
                          [a, y = std::move(y), m, n](Tape& t, std::span<const double> g) {
                            auto ga = t.grad_of(a);
                            for (std::size_t i = 0; i < m; ++i) {
                              double dot = 0.0;
                              for (std::size_t j = 0; j < n; ++j) dot += g[i * n + j] * y[i * n + j];
                              for (std::size_t j = 0; j < n; ++j) {
                                ga[i * n + j] += y[i * n + j] * (g[i * n + j] - dot);
                              }
                            }
                          });
}

inline constexpr double kLayerNormEps = 1e-5;

// Per-row normalization to zero mean / unit variance (biased variance, eps
// inside the square root) followed by gain and bias.
inline Var layer_norm(Var x, Var gain, Var bias) {
  const Tensor& xv = x.value();
  detail::require_rank2(xv, "layer_norm");
  const std::size_t m = xv.rows(), n = xv.cols();
  if (gain.value().size() != n || bias.value().size() != n) {
    throw DimensionError("layer_norm gain/bias must match last extent " +
                         std::to_string(n));
  }
  Tensor xhat(xv.shape());
  std::vector<double> inv_std(m);
  for (std::size_t i = 0; i < m; ++i) {
    auto row = xv.row_span(i);
    double mean = 0.0;
    for (double v : row) mean += v;
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (double v : row) var += (v - mean) * (v - mean);
    var /= static_cast<double>(n);
    inv_std[i] = 1.0 / std::sqrt(var + kLayerNormEps);
    for (std::size_t j = 0; j < n; ++j) xhat[i * n + j] = (row[j] - mean) * inv_std[i];
  }
  const Tensor& gv = gain.value();
  const Tensor& bv = bias.value();
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = gv[j] * xhat[i * n + j] + bv[j];
  }
  return x.tape()->record(
      std::move(out), {x, gain, bias},
      [x, gain, bias, m, n, xhat = std::move(xhat), inv_std = std::move(inv_std)](
          Tape& t, std::span<const double> g) {
        if (auto gg = t.grad_of(gain); !gg.empty()) {
          for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t j = 0; j < n; ++j) gg[j] += g[i * n + j] * xhat[i * n + j];
          }
        }
        if (auto gb = t.grad_of(bias); !gb.empty()) {
          for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t j = 0; j < n; ++j) gb[j] += g[i * n + j];
          }
        }
        if (auto gx = t.grad_of(x); !gx.empty()) {
          const Tensor& gv = t.value(gain);
          const double inv_n = 1.0 / static_cast<double>(n);
          for (std::size_t i = 0; i < m; ++i) {
            double mean_gh = 0.0, mean_ghx = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
              const double gh = g[i * n + j] * gv[j];
              mean_gh += gh;
              mean_ghx += gh * xhat[i * n + j];
            }
            mean_gh *= inv_n;
            mean_ghx *= inv_n;
            for (std::size_t j = 0; j < n; ++j) {
              const double gh = g[i * n + j] * gv[j];
              gx[i * n + j] += inv_std[i] * (gh - mean_gh - xhat[i * n + j] * mean_ghx);
            }
          }
        }
      });
}

// -log softmax(logits)[label] computed through log-sum-exp. Returns 1x1.
inline Var cross_entropy(Var logits, std::size_t label) {
  const Tensor& lv = logits.value();
  const std::size_t n = lv.size();
  if (label >= n) {
    throw IndexError("label " + std::to_string(label) + " out of range for " +
                     std::to_string(n) + " classes");
  }
  const auto x = lv.data();
  const double mx = *std::max_element(x.begin(), x.end());
  double z = 0.0;
  for (double v : x) z += std::exp(v - mx);
  const double lse = mx + std::log(z);
  return logits.tape()->record(
      Tensor({1, 1}, {lse - x[label]}), {logits},
      [logits, label, lse](Tape& t, std::span<const double> g) {
        const auto x = t.value(logits).data();
        auto gl = t.grad_of(logits);
        for (std::size_t j = 0; j < gl.size(); ++j) {
          const double p = std::exp(x[j] - lse);
          gl[j] += g[0] * (p - (j == label ? 1.0 : 0.0));
        }
      });
}

inline Var slice_rows(Var a, std::size_t begin, std::size_t count) {
  const Tensor& av = a.value();
  detail::require_rank2(av, "slice_rows");
  if (count == 0 || begin + count > av.rows()) {
    throw IndexError("slice_rows [" + std::to_string(begin) + ", " +
                     std::to_string(begin + count) + ") outside " +
                     shape_string(av.shape()));
  }
  const std::size_t n = av.cols();
  const auto src = av.data().subspan(begin * n, count * n);
  Tensor out({count, n}, std::vector<double>(src.begin(), src.end()));
  return a.tape()->record(std::move(out), {a},
                          [a, begin, n](Tape& t, std::span<const double> g) {
                            auto ga = t.grad_of(a);
                            for (std::size_t i = 0; i < g.size(); ++i) ga[begin * n + i] += g[i];
                          });
}

inline Var slice_cols(Var a, std::size_t begin, std::size_t count) {
  const Tensor& av = a.value();
  detail::require_rank2(av, "slice_cols");
  if (count == 0 || begin + count > av.cols()) {
    throw IndexError("slice_cols [" + std::to_string(begin) + ", " +
                     std::to_string(begin + count) + ") outside " +
                     shape_string(av.shape()));
  }
  const std::size_t m = av.rows(), n = av.cols();
  Tensor out({m, count});
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < count; ++j) out[i * count + j] = av[i * n + begin + j];
  }
  return a.tape()->record(std::move(out), {a},
                          [a, begin, count, m, n](Tape& t, std::span<const double> g) {
                            auto ga = t.grad_of(a);
                            for (std::size_t i = 0; i < m; ++i) {
                              for (std::size_t j = 0; j < count; ++j) {
                                ga[i * n + begin + j] += g[i * count + j];
                              }
                            }
                          });
}

inline Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw DimensionError("concat_rows of nothing");
  Tape& tape = *parts.front().tape();
  const std::size_t n = parts.front().value().cols();
  std::size_t rows = 0;
  for (const Var& p : parts) {
    detail::require_rank2(p.value(), "concat_rows");
    if (p.value().cols() != n) throw DimensionError("concat_rows width mismatch");
    rows += p.value().rows();
  }
  std::vector<double> data;
  data.reserve(rows * n);
  for (const Var& p : parts) {
    const auto d = p.value().data();
    data.insert(data.end(), d.begin(), d.end());
  }
  std::vector<Var> inputs(parts.begin(), parts.end());
  return tape.record(Tensor({rows, n}, std::move(data)), parts,
                     [inputs](Tape& t, std::span<const double> g) {
                       std::size_t offset = 0;
                       for (const Var& p : inputs) {
                         const std::size_t len = t.value(p).size();
                         if (auto gp = t.grad_of(p); !gp.empty()) {
                           for (std::size_t i = 0; i < len; ++i) gp[i] += g[offset + i];
                         }
                         offset += len;
                       }
                     });
}

inline Var concat_rows(std::initializer_list<Var> parts) {
  return concat_rows(std::span<const Var>(parts.begin(), parts.size()));
}

inline Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw DimensionError("concat_cols of nothing");
  Tape& tape = *parts.front().tape();
  const std::size_t m = parts.front().value().rows();
  std::size_t cols = 0;
  for (const Var& p : parts) {
    detail::require_rank2(p.value(), "concat_cols");
    if (p.value().rows() != m) throw DimensionError("concat_cols height mismatch");
    cols += p.value().cols();
  }
  Tensor out({m, cols});
  std::size_t offset = 0;
  for (const Var& p : parts) {
    const Tensor& pv = p.value();
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < pv.cols(); ++j) out[i * cols + offset + j] = pv.at(i, j);
    }
    offset += pv.cols();
  }
  std::vector<Var> inputs(parts.begin(), parts.end());
  return tape.record(std::move(out), parts,
                     [inputs, m, cols](Tape& t, std::span<const double> g) {
                       std::size_t offset = 0;
                       for (const Var& p : inputs) {
                         const std::size_t c = t.value(p).cols();
                         if (auto gp = t.grad_of(p); !gp.empty()) {
                           for (std::size_t i = 0; i < m; ++i) {
                             for (std::size_t j = 0; j < c; ++j) {
                               gp[i * c + j] += g[i * cols + offset + j];
                             }
                           }
                         }
                         offset += c;
                       }
                     });
}

// Copies the value into a fresh constant, cutting the gradient path.
inline Var detach(Var a) {
  const Tensor& av = a.value();
  return a.tape()->constant(Tensor(av.shape(), av.values()));
}

}  // namespace fedprompt
