#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "erlab/ensemble.hpp"

using namespace erlab;
using namespace erlab::ensemble;

namespace {

TransformerConfig tiny_config() {
  TransformerConfig cfg;
  cfg.vocab_size = 16;
  cfg.d_model = 16;
  cfg.n_layers = 1;
  cfg.n_heads = 2;
  cfg.max_seq_len = 16;
  cfg.ffn_mult = 2;
  return cfg;
}

EnsembleSpec spec_of(Architecture arch, int k) {
  EnsembleSpec s;
  s.architecture = arch;
  s.k = k;
  s.lora_rank = 2;
  return s;
}

std::vector<int> toks(std::initializer_list<int> v) { return {v}; }

}  // namespace

TEST_CASE("aggregation rules") {
  SECTION("examples") {
    const std::vector<float> equal{1.f, 1.f, 1.f};
    CHECK(aggregate(equal, Aggregation::Lcb, 2.f) == 1.0f);
    const std::vector<float> pair{0.f, 2.f};
    // mean 1, population std 1
    CHECK(aggregate(pair, Aggregation::Lcb, 1.f) == 0.0f);
    CHECK(aggregate(pair, Aggregation::Mean, 0.f) == 1.0f);
  }

  SECTION("empty set rejected") {
    CHECK_THROWS_AS(aggregate(std::vector<float>{}, Aggregation::Mean, 0.f),
                    std::invalid_argument);
  }

  SECTION("lcb at beta 0 equals mean, lcb never exceeds mean, monotone in beta") {
    Rng rng(17);
    for (int trial = 0; trial < 300; ++trial) {
      std::vector<float> rs(size_t(1 + rng.uniform_int(6)));
      for (float& r : rs) r = rng.normal_float(0.f, 2.f);
      const float mean = aggregate(rs, Aggregation::Mean, 0.f);
      CHECK(aggregate(rs, Aggregation::Lcb, 0.f) == mean);
      float prev = mean;
      bool disagree = false;
      for (float r : rs) disagree = disagree || r != rs[0];
      for (float beta : {0.25f, 1.f, 2.f}) {
        const float lcb = aggregate(rs, Aggregation::Lcb, beta);
        CHECK(lcb <= mean);
        CHECK(lcb <= prev);
        if (disagree) CHECK(lcb < mean);
        prev = lcb;
      }
    }
  }
}

TEST_CASE("ensemble construction and parameter totals") {
  const auto cfg = tiny_config();
  const int64_t m = model::param_count(Backbone::init(cfg, 1));
  const int64_t l = model::param_count(RewardHead::init(cfg.d_model, 1));
  const int64_t a = model::param_count(LoraSet::init(cfg, 2, 8.f, 1));
  const int k = 3;

  SECTION("independent: k(|M| + |L|)") {
    Ensemble e = build_ensemble(spec_of(Architecture::IndependentModels, k), cfg, 42);
    CHECK(total_param_count(e) == k * (m + l));
    CHECK(trainable_param_count(e) == k * (m + l));
  }

  SECTION("linear-layer: |M| + k|L|") {
    Ensemble e = build_ensemble(spec_of(Architecture::LinearLayerEnsemble, k), cfg, 42);
    CHECK(total_param_count(e) == m + k * l);
    CHECK(trainable_param_count(e) == m + k * l);
  }

  SECTION("lora: |M| + k|L| + k|A| total, k(|L| + |A|) trainable") {
    Backbone pretrained = Backbone::init(cfg, 42);
    std::vector<RewardHead> heads;
    for (int i = 0; i < k; ++i) heads.push_back(RewardHead::init(cfg.d_model, 42 ^ uint64_t(i)));
    Ensemble e = build_lora_ensemble(spec_of(Architecture::LoraEnsemble, k), std::move(pretrained),
                                     std::move(heads), 42);
    CHECK(total_param_count(e) == m + k * (l + a));
    CHECK(trainable_param_count(e) == k * (l + a));
  }

  SECTION("lora without a pretrained backbone is rejected") {
    CHECK_THROWS_AS(build_ensemble(spec_of(Architecture::LoraEnsemble, k), cfg, 42),
                    std::invalid_argument);
  }

  SECTION("invalid specs are rejected") {
    EnsembleSpec s = spec_of(Architecture::LinearLayerEnsemble, 0);
    CHECK_THROWS_AS(build_ensemble(s, cfg, 1), std::invalid_argument);
    s = spec_of(Architecture::LinearLayerEnsemble, 2);
    s.beta = -0.5f;
    CHECK_THROWS_AS(build_ensemble(s, cfg, 1), std::invalid_argument);
  }
}

TEST_CASE("member predictions") {
  const auto cfg = tiny_config();
  const auto prompt = toks({1, 2, 3});
  const auto response = toks({4, 5});

  SECTION("k=1 equals the plain single model, for every architecture") {
    model::RewardModel single = model::RewardModel::init(cfg, 42);
    std::vector<int> full = prompt;
    full.insert(full.end(), response.begin(), response.end());
    const float expected = single.forward(nullptr, full).item();

    Ensemble ind = build_ensemble(spec_of(Architecture::IndependentModels, 1), cfg, 42);
    Ensemble lin = build_ensemble(spec_of(Architecture::LinearLayerEnsemble, 1), cfg, 42);
    Ensemble lora = build_lora_ensemble(spec_of(Architecture::LoraEnsemble, 1),
                                        single.backbone.clone(), {single.head.clone()}, 42);
    for (const Ensemble* e : {&ind, &lin, &lora}) {
      const auto rs = predict_members(*e, prompt, response);
      REQUIRE(rs.size() == 1);
      CHECK(rs[0] == expected);
      CHECK(predict(*e, prompt, response) == expected);
    }
  }

  SECTION("identical heads give identical member rewards") {
    Ensemble e = build_ensemble(spec_of(Architecture::LinearLayerEnsemble, 3), cfg, 42);
    for (int i = 1; i < 3; ++i) {
      std::copy(e.heads[0].weight.data().begin(), e.heads[0].weight.data().end(),
                e.heads[size_t(i)].weight.data().begin());
      std::copy(e.heads[0].bias.data().begin(), e.heads[0].bias.data().end(),
                e.heads[size_t(i)].bias.data().begin());
    }
    const auto rs = predict_members(e, prompt, response);
    CHECK(rs[0] == rs[1]);
    CHECK(rs[1] == rs[2]);
  }

  SECTION("default build gives distinct finite member rewards") {
    for (auto arch : {Architecture::IndependentModels, Architecture::LinearLayerEnsemble}) {
      Ensemble e = build_ensemble(spec_of(arch, 3), cfg, 42);
      const auto rs = predict_members(e, prompt, response);
      REQUIRE(rs.size() == 3);
      for (float r : rs) CHECK(std::isfinite(r));
      CHECK(rs[0] != rs[1]);
      CHECK(rs[0] != rs[2]);
      CHECK(rs[1] != rs[2]);
    }
  }

  SECTION("member 0 of a k-ensemble matches the k=1 build") {
    Ensemble e3 = build_ensemble(spec_of(Architecture::IndependentModels, 3), cfg, 42);
    Ensemble e1 = build_ensemble(spec_of(Architecture::IndependentModels, 1), cfg, 42);
    CHECK(predict_members(e3, prompt, response)[0] == predict_members(e1, prompt, response)[0]);
  }
}
