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

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "fedprompt/autodiff.hpp"
#include "fedprompt/ccmp.hpp"
#include "fedprompt/errors.hpp"
#include "fedprompt/random.hpp"
#include "fedprompt/tensor.hpp"

namespace fedprompt {

struct BackboneConfig {
  std::size_t dim = 32;
  std::size_t depth = 8;
  std::size_t heads = 2;
  std::size_t image_size = 16;
  std::size_t patch_size = 8;
  std::size_t mlp_ratio = 4;
  double init_scale = 0.02;
  std::uint64_t seed = 0;

  std::size_t num_patches() const {
    const std::size_t per_side = image_size / patch_size;
    return per_side * per_side;
  }
  std::size_t patch_dim() const { return patch_size * patch_size; }
  std::size_t head_dim() const { return dim / heads; }
};

struct LayerWeights {
  Tensor ln1_gain, ln1_bias;
  Tensor wq, wk, wv, wo;  // d x d
  Tensor ln2_gain, ln2_bias;
  Tensor w1, b1;  // d x hidden, 1 x hidden
  Tensor w2, b2;  // hidden x d, 1 x d
};

// Frozen transformer weights. Nothing here is ever registered as a trainable
// leaf.
struct BackboneWeights {
  BackboneConfig config;
  Tensor patch_embed;  // patch_dim x d
  Tensor pos_embed;    // num_patches x d
  Tensor cls_embed;    // 1 x d
  std::vector<LayerWeights> layers;
  Tensor norm_gain, norm_bias;  // final norm applied to cls_M before the head

  std::uint64_t fingerprint() const {
    std::uint64_t h = checksum(patch_embed.data());
    h = checksum(pos_embed.data(), h);
    h = checksum(cls_embed.data(), h);
    h = checksum(norm_gain.data(), h);
    h = checksum(norm_bias.data(), h);
    for (const auto& L : layers) {
      for (const Tensor* t : {&L.ln1_gain, &L.ln1_bias, &L.wq, &L.wk, &L.wv, &L.wo,
                              &L.ln2_gain, &L.ln2_bias, &L.w1, &L.b1, &L.w2, &L.b2}) {
        h = checksum(t->data(), h);
      }
    }
    return h;
  }
};

inline void validate(const BackboneConfig& cfg) {
  if (cfg.dim == 0 || cfg.depth == 0 || cfg.heads == 0) {
    throw ConfigError("backbone dim, depth and heads must be positive");
  }
  if (cfg.dim % cfg.heads != 0) {
    throw ConfigError("dim " + std::to_string(cfg.dim) + " not divisible by heads " +
                      std::to_string(cfg.heads));
  }
  if (cfg.patch_size == 0 || cfg.image_size == 0 || cfg.image_size % cfg.patch_size != 0) {
    throw ConfigError("image size must be a positive multiple of the patch size");
  }
  if (cfg.mlp_ratio == 0) throw ConfigError("mlp_ratio must be positive");
  if (!(cfg.init_scale > 0.0)) throw ConfigError("init_scale must be positive");
}

namespace detail {

inline Tensor normal_tensor(Shape shape, double scale, Rng& rng) {
  std::normal_distribution<double> dist(0.0, scale);
  Tensor t(std::move(shape));
  for (double& v : t.data()) v = dist(rng);
  return t;
}

}  // namespace detail

inline BackboneWeights init_backbone(const BackboneConfig& cfg) {
  validate(cfg);
  Rng rng(derive_seed(cfg.seed, SeedPurpose::kBackbone));
  const std::size_t d = cfg.dim;
  const std::size_t hidden = cfg.mlp_ratio * d;
  const double s = cfg.init_scale;
  BackboneWeights w;
  w.config = cfg;
  w.patch_embed = detail::normal_tensor({cfg.patch_dim(), d}, s, rng);
  w.pos_embed = detail::normal_tensor({cfg.num_patches(), d}, s, rng);
  w.cls_embed = detail::normal_tensor({1, d}, s, rng);
  w.layers.resize(cfg.depth);
  for (auto& L : w.layers) {
    L.ln1_gain = Tensor({1, d}, 1.0);
    L.ln1_bias = Tensor({1, d}, 0.0);
    L.wq = detail::normal_tensor({d, d}, s, rng);
    L.wk = detail::normal_tensor({d, d}, s, rng);
    L.wv = detail::normal_tensor({d, d}, s, rng);
    L.wo = detail::normal_tensor({d, d}, s, rng);
    L.ln2_gain = Tensor({1, d}, 1.0);
    L.ln2_bias = Tensor({1, d}, 0.0);
    L.w1 = detail::normal_tensor({d, hidden}, s, rng);
    L.b1 = Tensor({1, hidden}, 0.0);
    L.w2 = detail::normal_tensor({hidden, d}, s, rng);
    L.b2 = Tensor({1, d}, 0.0);
  }
  w.norm_gain = Tensor({1, d}, 1.0);
  w.norm_bias = Tensor({1, d}, 0.0);
  return w;
}

// The trainable blocks: shared prompts (d x |S|, absent when |S| = 0), class
// prompts (d x |C|, one set for every CCMP layer) and the head (|C| x d).
struct PromptParams {
  Tensor shared;
  Tensor class_prompts;
  Tensor head;

  bool has_shared() const { return !shared.empty(); }

  static PromptParams init(std::size_t dim, std::size_t num_shared, std::size_t num_classes,
                           Rng& rng, double scale = 0.02) {
    if (dim == 0 || num_classes == 0) throw ConfigError("empty prompt geometry");
    PromptParams p;
    if (num_shared > 0) p.shared = detail::normal_tensor({dim, num_shared}, scale, rng);
    p.class_prompts = detail::normal_tensor({dim, num_classes}, scale, rng);
    p.head = detail::normal_tensor({num_classes, dim}, scale, rng);
    return p;
  }

  std::vector<Tensor*> blocks() {
    std::vector<Tensor*> out;
    if (has_shared()) out.push_back(&shared);
    out.push_back(&class_prompts);
    out.push_back(&head);
    return out;
  }
  std::vector<const Tensor*> blocks() const {
    std::vector<const Tensor*> out;
    if (has_shared()) out.push_back(&shared);
    out.push_back(&class_prompts);
    out.push_back(&head);
    return out;
  }

  void set_requires_grad(bool on) {
    for (Tensor* t : blocks()) t->set_requires_grad(on);
  }
  void zero_grad() {
    for (Tensor* t : blocks()) t->zero_grad();
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const Tensor* t : blocks()) n += t->size();
    return n;
  }

  friend bool operator==(const PromptParams& a, const PromptParams& b) {
    return a.shared == b.shared && a.class_prompts == b.class_prompts && a.head == b.head;
  }
};

// How prompts enter the forward pass.
struct ForwardConfig {
  // 1-based layer indices receiving the mixed prompt at their input. Empty
  // means plain shared-prompt tuning.
  std::vector<std::size_t> ccmp_layers;
  double tau = 0.05;
  // Cut the gradient path from the scores back into the cls token.
  bool detach_scores = false;
  // Recompute and replace the mixed token at every CCMP layer after the
  // first; when false the first mixture propagates unchanged.
  bool refresh = true;
};

struct ForwardTrace {
  // cls token at the input of layer l, stored at index l - 1.
  std::vector<std::vector<double>> cls_in;
  // Score vector per CCMP layer.
  std::map<std::size_t, std::vector<double>> scores;
  std::vector<double> logits;
};

// Patch tokens plus position embeddings for a single image (rank-2,
// image_size x image_size). Constant with respect to every trainable block.
inline Tensor embed_patches(const BackboneWeights& w, const Tensor& image) {
  const auto& cfg = w.config;
  if (image.rank() != 2 || image.rows() != cfg.image_size || image.cols() != cfg.image_size) {
    throw DimensionError("image shape " + shape_string(image.shape()) + " does not match " +
                         std::to_string(cfg.image_size) + "x" +
                         std::to_string(cfg.image_size));
  }
  const std::size_t p = cfg.patch_size, per_side = cfg.image_size / p, d = cfg.dim;
  Tensor patches({cfg.num_patches(), cfg.patch_dim()});
  for (std::size_t pr = 0; pr < per_side; ++pr) {
    for (std::size_t pc = 0; pc < per_side; ++pc) {
      auto row = patches.row_span(pr * per_side + pc);
      for (std::size_t i = 0; i < p; ++i) {
        for (std::size_t j = 0; j < p; ++j) row[i * p + j] = image.at(pr * p + i, pc * p + j);
      }
    }
  }
  Tensor out(w.pos_embed.shape(), w.pos_embed.values());
  detail::gemm_acc(patches.data().data(), w.patch_embed.data().data(), out.data().data(),
                   cfg.num_patches(), cfg.patch_dim(), d);
  return out;
}

struct PromptVars {
  std::optional<Var> shared;
  Var class_prompts;
  Var head;
};

inline PromptVars bind_trainable(Tape& tape, PromptParams& p) {
  PromptVars v;
  if (p.has_shared()) v.shared = tape.parameter(p.shared);
  v.class_prompts = tape.parameter(p.class_prompts);
  v.head = tape.parameter(p.head);
  return v;
}

inline PromptVars bind_constant(Tape& tape, const PromptParams& p) {
  PromptVars v;
  if (p.has_shared()) v.shared = tape.constant_ref(p.shared);
  v.class_prompts = tape.constant_ref(p.class_prompts);
  v.head = tape.constant_ref(p.head);
  return v;
}

namespace detail {

inline Var transformer_layer(Tape& tape, const BackboneWeights& w, const LayerWeights& L,
                             Var x) {
  const std::size_t heads = w.config.heads, dh = w.config.head_dim();
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  Var h = layer_norm(x, tape.constant_ref(L.ln1_gain), tape.constant_ref(L.ln1_bias));
  Var q = matmul(h, tape.constant_ref(L.wq));
  Var k = matmul(h, tape.constant_ref(L.wk));
  Var v = matmul(h, tape.constant_ref(L.wv));
  std::vector<Var> head_out;
  head_out.reserve(heads);
  for (std::size_t i = 0; i < heads; ++i) {
    Var qh = slice_cols(q, i * dh, dh);
    Var kh = slice_cols(k, i * dh, dh);
    Var vh = slice_cols(v, i * dh, dh);
    Var att = softmax_rows(scale(matmul(qh, transpose(kh)), inv_sqrt));
    head_out.push_back(matmul(att, vh));
  }
  Var attn = matmul(heads == 1 ? head_out.front() : concat_cols(head_out),
                    tape.constant_ref(L.wo));
  x = add(x, attn);
  Var h2 = layer_norm(x, tape.constant_ref(L.ln2_gain), tape.constant_ref(L.ln2_bias));
  Var mid = gelu(add_row(matmul(h2, tape.constant_ref(L.w1)), tape.constant_ref(L.b1)));
  Var mlp = add_row(matmul(mid, tape.constant_ref(L.w2)), tape.constant_ref(L.b2));
  return add(x, mlp);
}

// Score node: forward through ccmp::soft_scores, backward through its
// analytic vector-Jacobian product. Prototypes are constants.
inline Var score_node(Tape& tape, Var cls, const Tensor& prototypes,
                      const ccmp::ClassPriors& priors, const ForwardConfig& cfg,
                      std::vector<double>& scores_out) {
  const auto cls_vals = cls.value().data();
  scores_out = ccmp::soft_scores(cls_vals, prototypes, priors, cfg.tau);
  Tensor value = Tensor::row(scores_out);
  if (cfg.detach_scores) return tape.constant(std::move(value));
  const double tau = cfg.tau;
  std::vector<double> cls_copy(cls_vals.begin(), cls_vals.end());
  std::vector<double> s = scores_out;
  return tape.record(std::move(value), {cls},
                     [cls, &prototypes, tau, cls_copy = std::move(cls_copy),
                      s = std::move(s)](Tape& t, std::span<const double> g) {
                       auto gc = t.grad_of(cls);
                       auto v = ccmp::soft_scores_backward(cls_copy, prototypes, s, g, tau);
                       for (std::size_t i = 0; i < gc.size(); ++i) gc[i] += v[i];
                     });
}

}  // namespace detail

struct TapeForward {
  Var logits;  // 1 x |C|
  ForwardTrace trace;
};

// Builds the prompted forward pass on `tape`. Token order is
// [cls, (mixed), shared..., patches...]. At each configured CCMP layer the
// incoming cls token is scored against that layer's prototypes and the mixed
// prompt P_C * s is inserted (first CCMP layer) or written over the mixed slot
// (later layers, when refresh is on). Logits are H applied to the final-norm
// output of cls_M.
inline TapeForward forward_on_tape(Tape& tape, const BackboneWeights& w,
                                   const PromptVars& prompts, const Tensor& patch_tokens,
                                   const ccmp::PrototypeBank* bank,
                                   const ccmp::ClassPriors* priors,
                                   const ForwardConfig& cfg) {
  const std::size_t depth = w.config.depth;
  std::vector<std::size_t> ccmp_layers = cfg.ccmp_layers;
  std::sort(ccmp_layers.begin(), ccmp_layers.end());
  if (!ccmp_layers.empty()) {
    if (bank == nullptr) throw ConfigError("CCMP layers configured without a prototype bank");
    if (priors == nullptr) throw ConfigError("CCMP layers configured without class priors");
    double total = 0.0;
    for (double p : priors->values) total += p;
    if (std::abs(total - 1.0) > 1e-9) throw DataError("class priors do not sum to 1");
    for (std::size_t l : ccmp_layers) {
      if (l == 0 || l > depth) {
        throw ConfigError("CCMP layer " + std::to_string(l) + " outside 1.." +
                          std::to_string(depth));
      }
      if (!bank->has_layer(l)) {
        throw ConfigError("prototype bank missing CCMP layer " + std::to_string(l));
      }
    }
  }

  TapeForward out;
  out.trace.cls_in.resize(depth);

  std::vector<Var> parts{tape.constant_ref(w.cls_embed)};
  if (prompts.shared) parts.push_back(transpose(*prompts.shared));
  parts.push_back(tape.constant_ref(patch_tokens));
  Var x = parts.size() == 1 ? parts.front() : concat_rows(parts);

  bool inserted = false;
  for (std::size_t l = 1; l <= depth; ++l) {
    const auto cls_vals = x.value().row_span(0);
    out.trace.cls_in[l - 1].assign(cls_vals.begin(), cls_vals.end());
    const bool is_ccmp = std::binary_search(ccmp_layers.begin(), ccmp_layers.end(), l);
    if (is_ccmp && (!inserted || cfg.refresh)) {
      Var cls = slice_rows(x, 0, 1);
      Var s = detail::score_node(tape, cls, bank->layer(l), *priors, cfg,
                                 out.trace.scores[l]);
      Var mixed = transpose(matmul(prompts.class_prompts, transpose(s)));
      const std::size_t rows = x.value().rows();
      if (!inserted) {
        x = concat_rows({cls, mixed, slice_rows(x, 1, rows - 1)});
        inserted = true;
      } else if (rows > 2) {
        x = concat_rows({cls, mixed, slice_rows(x, 2, rows - 2)});
      } else {
        x = concat_rows({cls, mixed});
      }
    }
    x = detail::transformer_layer(tape, w, w.layers[l - 1], x);
  }
  Var cls_out = layer_norm(slice_rows(x, 0, 1), tape.constant_ref(w.norm_gain),
                           tape.constant_ref(w.norm_bias));
  out.logits = matmul(cls_out, transpose(prompts.head));
  const auto lv = out.logits.value().data();
  out.trace.logits.assign(lv.begin(), lv.end());
  return out;
}

// Inference-only forward. Returns logits and the trace.
inline ForwardTrace forward_with_prompts(const BackboneWeights& w, const PromptParams& prompts,
                                         const Tensor& patch_tokens,
                                         const ccmp::PrototypeBank* bank,
                                         const ccmp::ClassPriors* priors,
                                         const ForwardConfig& cfg) {
  Tape tape;
  PromptVars vars = bind_constant(tape, prompts);
  return forward_on_tape(tape, w, vars, patch_tokens, bank, priors, cfg).trace;
}

// Argmax with ties going to the lowest index.
inline std::size_t predict(std::span<const double> logits) {
  if (logits.empty()) throw DimensionError("predict on empty logits");
  std::size_t best = 0;
  for (std::size_t i = 1; i < logits.size(); ++i) {
    if (logits[i] > logits[best]) best = i;
  }
  return best;
}

}  // namespace fedprompt
