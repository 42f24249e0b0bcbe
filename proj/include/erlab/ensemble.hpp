#pragma once

#include <cmath>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "erlab/model.hpp"

namespace erlab::ensemble {

using model::Backbone;
using model::LoraSet;
using model::RewardHead;
using model::TransformerConfig;

enum class Architecture { IndependentModels, LinearLayerEnsemble, LoraEnsemble };
enum class Aggregation { Mean, Lcb };

inline const char* to_string(Architecture a) {
  switch (a) {
    case Architecture::IndependentModels: return "independent";
    case Architecture::LinearLayerEnsemble: return "linear";
    case Architecture::LoraEnsemble: return "lora";
  }
  return "?";
}

inline const char* to_string(Aggregation a) {
  return a == Aggregation::Mean ? "mean" : "lcb";
}

struct EnsembleSpec {
  Architecture architecture = Architecture::LinearLayerEnsemble;
  int k = 3;
  Aggregation aggregation = Aggregation::Mean;
  float beta = 0.5f;  // LCB only
  int lora_rank = 4;
  float lora_alpha = 8.f;

  void validate() const {
    if (k < 1) throw std::invalid_argument("ensemble: k must be >= 1, got " + std::to_string(k));
    if (beta < 0.f)
      throw std::invalid_argument("ensemble: beta must be >= 0, got " + std::to_string(beta));
    if (lora_rank < 1) throw std::invalid_argument("ensemble: lora rank must be >= 1");
  }

  bool operator==(const EnsembleSpec&) const = default;
};

// per-member rewards for one (prompt, response)
using RewardSet = std::vector<float>;

// Mean or mean - beta * population std.
inline float aggregate(std::span<const float> rewards, Aggregation rule, float beta) {
  if (rewards.empty()) throw std::invalid_argument("aggregate: empty reward set");
  double mean = 0.0;
  for (float r : rewards) mean += double(r);
  mean /= double(rewards.size());
  if (rule == Aggregation::Mean) return float(mean);
  double var = 0.0;
  for (float r : rewards) var += (double(r) - mean) * (double(r) - mean);
  var /= double(rewards.size());
  return float(mean - double(beta) * std::sqrt(var));
}

// One of the three ensemble layouts. `member_backbones` is used by the
// independent architecture, `shared_backbone` by the other two, and
// `member_adapters` only by the LoRA one.
struct Ensemble {
  EnsembleSpec spec;
  TransformerConfig config;
  std::optional<Backbone> shared_backbone;
  std::vector<Backbone> member_backbones;
  std::vector<RewardHead> heads;
  std::vector<LoraSet> member_adapters;

  int k() const { return spec.k; }

  const Backbone& backbone_of(int member) const {
    return spec.architecture == Architecture::IndependentModels ? member_backbones[size_t(member)]
                                                                : *shared_backbone;
  }

  const LoraSet* adapters_of(int member) const {
    return spec.architecture == Architecture::LoraEnsemble ? &member_adapters[size_t(member)]
                                                           : nullptr;
  }

  Tensor member_forward(ad::Tape* tape, int member, std::span<const int> tokens) const {
    return model::reward_forward(tape, backbone_of(member), heads[size_t(member)], tokens,
                                 adapters_of(member));
  }

  Ensemble clone() const {
    Ensemble out;
    out.spec = spec;
    out.config = config;
    if (shared_backbone) out.shared_backbone = shared_backbone->clone();
    for (const auto& b : member_backbones) out.member_backbones.push_back(b.clone());
    for (const auto& h : heads) out.heads.push_back(h.clone());
    for (const auto& a : member_adapters) out.member_adapters.push_back(a.clone());
    return out;
  }
};

// Fresh ensemble for the independent or linear-layer architectures. Member i
// draws its parameters from stream seed ^ i, so member 0 of any k equals the
// single model built from the same seed.
inline Ensemble build_ensemble(const EnsembleSpec& spec, const TransformerConfig& cfg,
                               uint64_t seed) {
  spec.validate();
  cfg.validate();
  if (spec.architecture == Architecture::LoraEnsemble)
    throw std::invalid_argument(
        "build_ensemble: the lora architecture needs a reward-pretrained backbone; train one "
        "with the linear-layer phase first and use build_lora_ensemble");
  Ensemble e;
  e.spec = spec;
  e.config = cfg;
  if (spec.architecture == Architecture::IndependentModels) {
    for (int i = 0; i < spec.k; ++i)
      e.member_backbones.push_back(Backbone::init(cfg, seed ^ uint64_t(i)));
  } else {
    e.shared_backbone = Backbone::init(cfg, seed);
  }
  for (int i = 0; i < spec.k; ++i)
    e.heads.push_back(RewardHead::init(cfg.d_model, seed ^ uint64_t(i)));
  return e;
}

// LoRA ensemble around an already reward-pretrained backbone and its heads.
// The backbone freezes; adapters start at the identity (a2 = 0).
inline Ensemble build_lora_ensemble(const EnsembleSpec& spec, Backbone pretrained,
                                    std::vector<RewardHead> pretrained_heads, uint64_t seed) {
  spec.validate();
  if (spec.architecture != Architecture::LoraEnsemble)
    throw std::invalid_argument("build_lora_ensemble: spec architecture is not lora");
  if (int(pretrained_heads.size()) != spec.k)
    throw std::invalid_argument("build_lora_ensemble: got " +
                                std::to_string(pretrained_heads.size()) + " heads for k = " +
                                std::to_string(spec.k));
  Ensemble e;
  e.spec = spec;
  e.config = pretrained.config;
  model::set_trainable(pretrained, false);
  e.shared_backbone = std::move(pretrained);
  e.heads = std::move(pretrained_heads);
  for (int i = 0; i < spec.k; ++i)
    e.member_adapters.push_back(
        LoraSet::init(e.config, spec.lora_rank, spec.lora_alpha, seed ^ uint64_t(i)));
  return e;
}

inline RewardSet predict_members(const Ensemble& e, std::span<const int> prompt,
                                 std::span<const int> response) {
  std::vector<int> tokens(prompt.begin(), prompt.end());
  tokens.insert(tokens.end(), response.begin(), response.end());
  RewardSet out(size_t(e.k()));
  for (int i = 0; i < e.k(); ++i) out[size_t(i)] = e.member_forward(nullptr, i, tokens).item();
  return out;
}

inline float predict(const Ensemble& e, std::span<const int> prompt,
                     std::span<const int> response) {
  return aggregate(predict_members(e, prompt, response), e.spec.aggregation, e.spec.beta);
}

// Parameters that ever train under this architecture: k(|M|+|L|) for
// independent, |M|+k|L| for linear, |M|+k|L|+k|A| for lora.
inline int64_t total_param_count(const Ensemble& e) {
  int64_t n = 0;
  if (e.shared_backbone) n += model::param_count(*e.shared_backbone);
  for (const auto& b : e.member_backbones) n += model::param_count(b);
  for (const auto& h : e.heads) n += model::param_count(h);
  for (const auto& a : e.member_adapters) n += model::param_count(a);
  return n;
}

// Parameters trainable right now (for lora: heads + adapters only).
inline int64_t trainable_param_count(const Ensemble& e) {
  int64_t n = 0;
  if (e.shared_backbone) n += model::trainable_param_count(*e.shared_backbone);
  for (const auto& b : e.member_backbones) n += model::trainable_param_count(b);
  for (const auto& h : e.heads) n += model::trainable_param_count(h);
  for (const auto& a : e.member_adapters) n += model::trainable_param_count(a);
  return n;
}

}  // namespace erlab::ensemble
