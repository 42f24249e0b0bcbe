#pragma once

#include <cmath>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "erlab/autodiff.hpp"
#include "erlab/rng.hpp"
#include "erlab/tensor.hpp"

namespace erlab::model {

// token 0 terminates a sampled response
constexpr int kEosToken = 0;

struct TransformerConfig {
  int vocab_size = 64;
  int d_model = 64;
  int n_layers = 2;
  int n_heads = 4;
  int max_seq_len = 64;
  int ffn_mult = 4;

  int head_dim() const { return d_model / n_heads; }
  int ffn_dim() const { return d_model * ffn_mult; }

  void validate() const {
    if (vocab_size < 1 || d_model < 1 || n_layers < 1 || n_heads < 1 || max_seq_len < 1 ||
        ffn_mult < 1)
      throw std::invalid_argument("transformer config: all fields must be >= 1");
    if (d_model % n_heads != 0)
      throw std::invalid_argument("transformer config: d_model " + std::to_string(d_model) +
                                  " not divisible by n_heads " + std::to_string(n_heads));
  }

  bool operator==(const TransformerConfig&) const = default;
};

using TensorVisitor = std::function<void(const std::string&, Tensor&)>;

struct LayerWeights {
  Tensor ln1_g, ln1_b;
  Tensor wq, wk, wv, wo;
  Tensor ln2_g, ln2_b;
  Tensor w1, w2;
};

// Decoder-only transformer: learned positional embeddings, pre-norm blocks,
// GELU feed-forward, no biases on the projections.
struct Backbone {
  TransformerConfig config;
  Tensor tok_emb;  // [vocab, d_model]; also the tied LM head
  Tensor pos_emb;  // [max_seq_len, d_model]
  std::vector<LayerWeights> layers;
  Tensor lnf_g, lnf_b;

  static Backbone init(const TransformerConfig& cfg, uint64_t seed) {
    cfg.validate();
    Rng rng = substream(seed, {streams::backbone});
    const int d = cfg.d_model;
    const float wstd = 1.f / std::sqrt(float(d));
    Backbone bb;
    bb.config = cfg;
    bb.tok_emb = Tensor::randn({cfg.vocab_size, d}, rng, 0.08f, true);
    bb.pos_emb = Tensor::randn({cfg.max_seq_len, d}, rng, 0.08f, true);
    bb.layers.resize(size_t(cfg.n_layers));
    for (auto& l : bb.layers) {
      l.ln1_g = Tensor::full({d}, 1.f).set_requires_grad(true);
      l.ln1_b = Tensor::zeros({d}, true);
      l.wq = Tensor::randn({d, d}, rng, wstd, true);
      l.wk = Tensor::randn({d, d}, rng, wstd, true);
      l.wv = Tensor::randn({d, d}, rng, wstd, true);
      l.wo = Tensor::randn({d, d}, rng, wstd, true);
      l.ln2_g = Tensor::full({d}, 1.f).set_requires_grad(true);
      l.ln2_b = Tensor::zeros({d}, true);
      l.w1 = Tensor::randn({d, cfg.ffn_dim()}, rng, wstd, true);
      l.w2 = Tensor::randn({cfg.ffn_dim(), d}, rng, 1.f / std::sqrt(float(cfg.ffn_dim())), true);
    }
    bb.lnf_g = Tensor::full({d}, 1.f).set_requires_grad(true);
    bb.lnf_b = Tensor::zeros({d}, true);
    return bb;
  }

  void visit(const TensorVisitor& fn) {
    fn("tok_emb", tok_emb);
    fn("pos_emb", pos_emb);
    for (size_t i = 0; i < layers.size(); ++i) {
      const std::string p = "layers." + std::to_string(i) + ".";
      auto& l = layers[i];
      fn(p + "ln1.g", l.ln1_g);
      fn(p + "ln1.b", l.ln1_b);
      fn(p + "wq", l.wq);
      fn(p + "wk", l.wk);
      fn(p + "wv", l.wv);
      fn(p + "wo", l.wo);
      fn(p + "ln2.g", l.ln2_g);
      fn(p + "ln2.b", l.ln2_b);
      fn(p + "w1", l.w1);
      fn(p + "w2", l.w2);
    }
    fn("lnf.g", lnf_g);
    fn("lnf.b", lnf_b);
  }
  void visit(const TensorVisitor& fn) const { const_cast<Backbone*>(this)->visit(fn); }

  Backbone clone() const {
    Backbone out;
    out.config = config;
    out.tok_emb = tok_emb.clone();
    out.pos_emb = pos_emb.clone();
    out.layers.clear();
    for (const auto& l : layers)
      out.layers.push_back({l.ln1_g.clone(), l.ln1_b.clone(), l.wq.clone(), l.wk.clone(),
                            l.wv.clone(), l.wo.clone(), l.ln2_g.clone(), l.ln2_b.clone(),
                            l.w1.clone(), l.w2.clone()});
    out.lnf_g = lnf_g.clone();
    out.lnf_b = lnf_b.clone();
    return out;
  }
};

// d_model -> 1 with bias
struct RewardHead {
  Tensor weight;  // [d_model, 1]
  Tensor bias;    // [1]

  static RewardHead init(int d_model, uint64_t seed) {
    Rng rng = substream(seed, {streams::head});
    RewardHead h;
    h.weight = Tensor::randn({d_model, 1}, rng, 1.f / std::sqrt(float(d_model)), true);
    h.bias = Tensor::zeros({1}, true);
    return h;
  }

  void visit(const TensorVisitor& fn) {
    fn("head.weight", weight);
    fn("head.bias", bias);
  }
  void visit(const TensorVisitor& fn) const { const_cast<RewardHead*>(this)->visit(fn); }

  RewardHead clone() const { return {weight.clone(), bias.clone()}; }
};

using ValueHead = RewardHead;

// Low-rank additive delta for one projection matrix: W' = W + (alpha/r) a1 a2.
struct LoraAdapter {
  std::string target;  // e.g. "layers.0.wq"
  Tensor a1;           // [d1, r]
  Tensor a2;           // [r, d2]
  int rank = 4;
  float alpha = 8.f;
};

struct LoraSet {
  std::vector<LoraAdapter> adapters;

  // Adapters on every attention projection of every layer; a1 small-Gaussian,
  // a2 zero so the adapted model starts exactly at the base function.
  static LoraSet init(const TransformerConfig& cfg, int rank, float alpha, uint64_t seed) {
    const int d = cfg.d_model;
    if (rank < 1 || rank >= d)
      throw std::invalid_argument("lora: rank " + std::to_string(rank) +
                                  " must be in [1, d_model) with d_model " + std::to_string(d));
    Rng rng = substream(seed, {streams::lora});
    LoraSet set;
    for (int l = 0; l < cfg.n_layers; ++l)
      for (const char* name : {"wq", "wk", "wv", "wo"}) {
        LoraAdapter a;
        a.target = "layers." + std::to_string(l) + "." + name;
        a.rank = rank;
        a.alpha = alpha;
        a.a1 = Tensor::randn({d, rank}, rng, 1.f / std::sqrt(float(d)), true);
        a.a2 = Tensor::zeros({rank, d}, true);
        set.adapters.push_back(std::move(a));
      }
    return set;
  }

  const LoraAdapter* find(const std::string& target) const {
    for (const auto& a : adapters)
      if (a.target == target) return &a;
    return nullptr;
  }

  void visit(const TensorVisitor& fn) {
    for (auto& a : adapters) {
      fn("adapter." + a.target + ".a1", a.a1);
      fn("adapter." + a.target + ".a2", a.a2);
    }
  }
  void visit(const TensorVisitor& fn) const { const_cast<LoraSet*>(this)->visit(fn); }

  LoraSet clone() const {
    LoraSet out;
    for (const auto& a : adapters)
      out.adapters.push_back({a.target, a.a1.clone(), a.a2.clone(), a.rank, a.alpha});
    return out;
  }
};

namespace detail {

inline Tensor project(ad::Tape* tape, const Tensor& x, const Tensor& w, const LoraSet* lora,
                      const std::string& target) {
  Tensor y = ad::matmul(tape, x, w);
  if (lora != nullptr) {
    if (const LoraAdapter* a = lora->find(target)) {
      if (a->a1.dim(0) != w.dim(0) || a->a2.dim(1) != w.dim(1))
        throw std::invalid_argument("lora: adapter for " + target + " has delta shape [" +
                                    std::to_string(a->a1.dim(0)) + ", " +
                                    std::to_string(a->a2.dim(1)) + "] but the target is " +
                                    shape_str(w.shape()));
      Tensor delta = ad::matmul(tape, ad::matmul(tape, x, a->a1), a->a2);
      y = ad::add(tape, y, ad::scale(tape, delta, a->alpha / float(a->rank)));
    }
  }
  return y;
}

}  // namespace detail

// Hidden states [T, d_model] after the final layernorm.
inline Tensor backbone_forward(ad::Tape* tape, const Backbone& bb, std::span<const int> tokens,
                               const LoraSet* lora = nullptr) {
  const auto& cfg = bb.config;
  const int t = int(tokens.size());
  if (t == 0) throw std::invalid_argument("forward: empty token sequence");
  if (t > cfg.max_seq_len)
    throw std::invalid_argument("forward: sequence length " + std::to_string(t) +
                                " exceeds max_seq_len " + std::to_string(cfg.max_seq_len));
  std::vector<int> positions(size_t(t), 0);
  for (int i = 0; i < t; ++i) positions[size_t(i)] = i;

  Tensor h = ad::add(tape, ad::embedding(tape, bb.tok_emb, tokens),
                     ad::gather_rows(tape, bb.pos_emb, positions));
  const int hd = cfg.head_dim();
  const float inv_sqrt_hd = 1.f / std::sqrt(float(hd));
  for (size_t li = 0; li < bb.layers.size(); ++li) {
    const auto& l = bb.layers[li];
    const std::string p = "layers." + std::to_string(li) + ".";
    Tensor x = ad::layernorm(tape, h, l.ln1_g, l.ln1_b);
    Tensor q = detail::project(tape, x, l.wq, lora, p + "wq");
    Tensor k = detail::project(tape, x, l.wk, lora, p + "wk");
    Tensor v = detail::project(tape, x, l.wv, lora, p + "wv");
    std::vector<Tensor> heads;
    heads.reserve(size_t(cfg.n_heads));
    for (int hi = 0; hi < cfg.n_heads; ++hi) {
      const int c0 = hi * hd, c1 = c0 + hd;
      Tensor qh = ad::slice_cols(tape, q, c0, c1);
      Tensor kh = ad::slice_cols(tape, k, c0, c1);
      Tensor vh = ad::slice_cols(tape, v, c0, c1);
      Tensor att = ad::causal_softmax(tape, ad::scale(tape, ad::matmul_nt(tape, qh, kh), inv_sqrt_hd));
      heads.push_back(ad::matmul(tape, att, vh));
    }
    Tensor att_out = detail::project(tape, ad::concat_cols(tape, heads), l.wo, lora, p + "wo");
    h = ad::add(tape, h, att_out);
    Tensor x2 = ad::layernorm(tape, h, l.ln2_g, l.ln2_b);
    Tensor ffn = ad::matmul(tape, ad::gelu(tape, ad::matmul(tape, x2, l.w1)), l.w2);
    h = ad::add(tape, h, ffn);
  }
  return ad::layernorm(tape, h, bb.lnf_g, bb.lnf_b);
}

// r(x, y): the head applied to the last token's hidden state; scalar tensor.
inline Tensor reward_forward(ad::Tape* tape, const Backbone& bb, const RewardHead& head,
                             std::span<const int> tokens, const LoraSet* lora = nullptr) {
  Tensor h = backbone_forward(tape, bb, tokens, lora);
  const int last[1] = {int(tokens.size()) - 1};
  Tensor pooled = ad::gather_rows(tape, h, last);
  return ad::add(tape, ad::matmul(tape, pooled, head.weight), head.bias);
}

// Log-probabilities over the vocabulary for every position, [T, vocab];
// the LM head is the embedding table, transposed.
inline Tensor policy_forward(ad::Tape* tape, const Backbone& bb, std::span<const int> tokens,
                             const LoraSet* lora = nullptr) {
  Tensor h = backbone_forward(tape, bb, tokens, lora);
  return ad::log_softmax_rows(tape, ad::matmul_nt(tape, h, bb.tok_emb));
}

// Raw next-token logits (last position only); the cheap path for sampling.
inline std::vector<float> next_token_logits(const Backbone& bb, std::span<const int> tokens) {
  Tensor h = backbone_forward(nullptr, bb, tokens);
  const int last[1] = {int(tokens.size()) - 1};
  Tensor logits = ad::matmul_nt(nullptr, ad::gather_rows(nullptr, h, last), bb.tok_emb);
  return {logits.data().begin(), logits.data().end()};
}

template <class Part>
int64_t param_count(const Part& part) {
  int64_t n = 0;
  part.visit([&n](const std::string&, Tensor& t) { n += t.numel(); });
  return n;
}

template <class Part>
int64_t trainable_param_count(const Part& part) {
  int64_t n = 0;
  part.visit([&n](const std::string&, Tensor& t) {
    if (t.requires_grad()) n += t.numel();
  });
  return n;
}

template <class Part>
void set_trainable(Part& part, bool trainable) {
  part.visit([trainable](const std::string&, Tensor& t) { t.set_requires_grad(trainable); });
}

template <class Part>
std::vector<std::pair<std::string, Tensor>> named_tensors(const Part& part,
                                                          const std::string& prefix = "") {
  std::vector<std::pair<std::string, Tensor>> out;
  part.visit([&](const std::string& name, Tensor& t) { out.emplace_back(prefix + name, t); });
  return out;
}

// Single reward model: backbone plus scalar head.
struct RewardModel {
  Backbone backbone;
  RewardHead head;

  static RewardModel init(const TransformerConfig& cfg, uint64_t seed) {
    return {Backbone::init(cfg, seed), RewardHead::init(cfg.d_model, seed)};
  }

  void visit(const TensorVisitor& fn) {
    backbone.visit(fn);
    head.visit(fn);
  }
  void visit(const TensorVisitor& fn) const { const_cast<RewardModel*>(this)->visit(fn); }

  Tensor forward(ad::Tape* tape, std::span<const int> tokens) const {
    return reward_forward(tape, backbone, head, tokens);
  }

  RewardModel clone() const { return {backbone.clone(), head.clone()}; }
};

}  // namespace erlab::model
