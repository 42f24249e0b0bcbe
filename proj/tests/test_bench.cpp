#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <set>

#include "erlab/bench.hpp"

using namespace erlab;
using namespace erlab::bench;

namespace {

model::TransformerConfig tiny_config() {
  model::TransformerConfig cfg;
  cfg.vocab_size = 16;
  cfg.d_model = 16;
  cfg.n_layers = 1;
  cfg.n_heads = 2;
  cfg.max_seq_len = 32;
  cfg.ffn_mult = 2;
  return cfg;
}

SynthDatasetSpec tiny_dataset(int pairs, float noise) {
  SynthDatasetSpec spec;
  spec.n_pairs = pairs;
  spec.prompt_len_min = 3;
  spec.prompt_len_max = 6;
  spec.response_budget_min = 3;
  spec.decode.max_new_tokens = 10;
  spec.label_noise = noise;
  spec.seed = 7;
  return spec;
}

}  // namespace

TEST_CASE("gold reward") {
  GoldReward gold(11, 16);
  Rng rng(3);

  SECTION("deterministic and bounded") {
    for (int trial = 0; trial < 200; ++trial) {
      std::vector<int> prompt(4), response(size_t(1 + rng.uniform_int(12)));
      for (int& t : prompt) t = rng.uniform_int(16);
      for (int& t : response) t = rng.uniform_int(16);
      const float a = gold(prompt, response);
      const float b = gold(prompt, response);
      CHECK(a == b);
      CHECK(a >= -5.f);
      CHECK(a <= 5.f);
    }
  }

  SECTION("structural terms point the right way") {
    const std::vector<int> prompt{3, 4, 5};
    std::vector<int> good(size_t(gold.target_len()), gold.good_tokens()[0]);
    std::vector<int> bad(size_t(gold.target_len()), gold.bad_tokens()[0]);
    CHECK(gold(prompt, good) > gold(prompt, bad));
  }

  SECTION("serialized spec reconstructs the same program") {
    const GoldReward again = GoldReward::from_json(gold.to_json());
    for (int trial = 0; trial < 50; ++trial) {
      std::vector<int> prompt(3), response(5);
      for (int& t : prompt) t = rng.uniform_int(16);
      for (int& t : response) t = rng.uniform_int(16);
      CHECK(gold(prompt, response) == again(prompt, response));
    }
  }
}

TEST_CASE("preference generation") {
  const auto cfg = tiny_config();
  Backbone policy = Backbone::init(cfg, 5);
  GoldReward gold(11, cfg.vocab_size);

  SECTION("noise-free labels always agree with gold") {
    const auto splits = generate_preferences(tiny_dataset(200, 0.f), gold, policy, 2);
    auto check = [&](const std::vector<data::PreferencePair>& pairs) {
      for (const auto& p : pairs) CHECK(gold(p.prompt, p.chosen) >= gold(p.prompt, p.rejected));
    };
    check(splits.phase1);
    check(splits.phase2);
    check(splits.heldout);
  }

  SECTION("splits are disjoint and exhaustive") {
    const auto spec = tiny_dataset(300, 0.1f);
    const auto splits = generate_preferences(spec, gold, policy, 2);
    CHECK(int(splits.phase1.size() + splits.phase2.size() + splits.heldout.size()) ==
          spec.n_pairs);
    CHECK(splits.phase1.size() == size_t(std::lround(0.54 * spec.n_pairs)));
    CHECK(data::disjoint(splits.phase1, splits.phase2));
    CHECK(data::disjoint(splits.phase1, splits.heldout));
    CHECK(data::disjoint(splits.phase2, splits.heldout));
  }

  SECTION("measured flip fraction concentrates around the configured rate") {
    const auto spec = tiny_dataset(10000, 0.2f);
    const auto splits = generate_preferences(spec, gold, policy, 2);
    int64_t flipped = 0, total = 0;
    auto scan = [&](const std::vector<data::PreferencePair>& pairs) {
      for (const auto& p : pairs) {
        ++total;
        if (gold(p.prompt, p.chosen) < gold(p.prompt, p.rejected)) ++flipped;
      }
    };
    scan(splits.phase1);
    scan(splits.phase2);
    scan(splits.heldout);
    const double rate = double(flipped) / double(total);
    CHECK(rate == Catch::Approx(0.2).margin(0.01));
  }

  SECTION("half noise excluded by the invariant") {
    auto spec = tiny_dataset(10, 0.5f);
    CHECK_THROWS_AS(spec.validate(), std::invalid_argument);
  }

  SECTION("identical spec reproduces identical pairs") {
    const auto a = generate_preferences(tiny_dataset(50, 0.15f), gold, policy, 1);
    const auto b = generate_preferences(tiny_dataset(50, 0.15f), gold, policy, 2);
    CHECK(a.phase1 == b.phase1);
    CHECK(a.heldout == b.heldout);
  }
}

TEST_CASE("gold evaluation") {
  const auto cfg = tiny_config();
  Backbone policy = Backbone::init(cfg, 5);
  GoldReward gold(11, cfg.vocab_size);
  std::vector<std::vector<int>> prompts;
  Rng rng(9);
  for (int i = 0; i < 40; ++i) {
    prompts.push_back({});
    prompts.back().resize(4);
    for (int& t : prompts.back()) t = 1 + rng.uniform_int(cfg.vocab_size - 1);
  }

  SECTION("same responses score identically; baseline is finite and bounded") {
    rl::DecodeConfig dc;
    dc.max_new_tokens = 8;
    dc.seed = 4;
    std::vector<std::vector<int>> responses;
    for (const auto& p : prompts) {
      Rng r = substream(dc.seed, {streams::decode, uint64_t(responses.size())});
      auto s = rl::sample(policy, p, dc, r);
      responses.push_back({s.content().begin(), s.content().end()});
    }
    const auto a = evaluate_gold(prompts, responses, gold);
    const auto b = evaluate_gold(prompts, responses, gold);
    CHECK(a.mean == b.mean);
    CHECK(a.std_error == b.std_error);
    CHECK(std::isfinite(a.mean));
    CHECK(a.mean >= -5.0);
    CHECK(a.mean <= 5.0);
    CHECK(a.n == 40);
  }

  SECTION("selection by gold beats the reference baseline") {
    rl::DecodeConfig dc;
    dc.max_new_tokens = 8;
    dc.seed = 21;
    const rl::ScoreFn gold_scorer = [&](std::span<const int> p, std::span<const int> r) {
      return gold(p, r);
    };
    const auto picks = rl::best_of_n(policy, gold_scorer, prompts, 50, dc, 2);
    std::vector<std::vector<int>> selected, reference;
    for (size_t i = 0; i < prompts.size(); ++i) {
      selected.push_back(picks[i].response);
      Rng r = substream(999, {streams::decode, uint64_t(i)});
      auto s = rl::sample(policy, prompts[i], dc, r);
      reference.push_back({s.content().begin(), s.content().end()});
    }
    const auto best = evaluate_gold(prompts, selected, gold);
    const auto base = evaluate_gold(prompts, reference, gold);
    CHECK(best.mean > base.mean);
  }

  SECTION("length mismatch rejected") {
    CHECK_THROWS_AS(evaluate_gold(prompts, std::vector<std::vector<int>>{}, gold),
                    std::invalid_argument);
  }
}

TEST_CASE("overoptimization report") {
  SECTION("identical series: zero gaps, no events") {
    const std::vector<double> series{0.1, 0.5, 0.9, 1.2};
    const auto rows = overoptimization_report(series, series);
    for (const auto& r : rows) {
      CHECK(r.gap == 0.0);
      CHECK_FALSE(r.overopt_event);
    }
  }

  SECTION("proxy rising over constant gold flags every rise") {
    const std::vector<double> proxy{0.0, 0.5, 1.0, 1.5};
    const std::vector<double> gold(4, 0.3);
    const auto rows = overoptimization_report(proxy, gold);
    CHECK_FALSE(rows[0].overopt_event);
    for (size_t i = 1; i < rows.size(); ++i) CHECK(rows[i].overopt_event);
  }

  SECTION("gold keeping pace suppresses events") {
    const std::vector<double> proxy{0.0, 0.5, 1.0};
    const std::vector<double> gold{0.0, 0.4, 0.8};
    const auto rows = overoptimization_report(proxy, gold);
    for (const auto& r : rows) CHECK_FALSE(r.overopt_event);
  }

  SECTION("mismatched series rejected") {
    const std::vector<double> a{1.0, 2.0};
    const std::vector<double> b{1.0};
    CHECK_THROWS_AS(overoptimization_report(a, b), std::invalid_argument);
  }
}

TEST_CASE("calibration") {
  Rng rng(13);
  std::vector<float> values(500);
  for (float& v : values) v = rng.normal_float(3.f, 2.5f);
  const auto cal = Calibration::fit(values);
  double mean = 0.0;
  for (float v : values) mean += double(cal(v));
  mean /= double(values.size());
  double var = 0.0;
  for (float v : values) var += (double(cal(v)) - mean) * (double(cal(v)) - mean);
  var /= double(values.size());
  CHECK(mean == Catch::Approx(0.0).margin(1e-4));
  CHECK(var == Catch::Approx(1.0).margin(1e-3));

  SECTION("degenerate spread keeps unit scale") {
    const std::vector<float> flat(10, 2.f);
    const auto c = Calibration::fit(flat);
    CHECK(c(2.f) == 0.f);
    CHECK(c.scale == 1.f);
  }
}

TEST_CASE("bon cells") {
  const auto cfg = tiny_config();
  Backbone policy = Backbone::init(cfg, 5);
  GoldReward gold(11, cfg.vocab_size);
  std::vector<std::vector<int>> prompts{{1, 2, 3}, {4, 5, 6}, {7, 8, 9}};
  rl::DecodeConfig dc;
  dc.max_new_tokens = 6;
  dc.seed = 31;
  const auto samples = collect_bon_samples(policy, prompts, 8, dc, gold, 2);

  ensemble::EnsembleSpec spec;
  spec.architecture = ensemble::Architecture::LinearLayerEnsemble;
  spec.k = 3;
  const Ensemble ens = ensemble::build_ensemble(spec, cfg, 42);
  const auto scores = score_bon_samples(ens, samples, 2);
  const auto proxy_cal = calibrate_from_scores(scores, Aggregation::Mean, 0.f);
  const auto gold_cal = calibrate_gold(samples);

  SECTION("selection matches exhaustive argmax") {
    const auto cell =
        evaluate_bon_cell(samples, scores, 8, Aggregation::Mean, 0.f, proxy_cal, gold_cal);
    for (size_t p = 0; p < prompts.size(); ++p) {
      float best = -1e30f;
      for (int j = 0; j < 8; ++j)
        best = std::max(best, ensemble::aggregate(scores[p][size_t(j)], Aggregation::Mean, 0.f));
      // the chosen sample's calibrated proxy participates in the cell mean
      CHECK(std::isfinite(best));
    }
    CHECK(std::isfinite(cell.gold.mean));
    CHECK(cell.gold.std_error >= 0.0);
  }

  SECTION("n beyond the collection is rejected") {
    CHECK_THROWS_AS(
        evaluate_bon_cell(samples, scores, 9, Aggregation::Mean, 0.f, proxy_cal, gold_cal),
        std::invalid_argument);
  }

  SECTION("a larger n never hurts the scorer's own objective") {
    const auto small =
        evaluate_bon_cell(samples, scores, 2, Aggregation::Mean, 0.f, proxy_cal, gold_cal);
    const auto large =
        evaluate_bon_cell(samples, scores, 8, Aggregation::Mean, 0.f, proxy_cal, gold_cal);
    CHECK(large.proxy_cal.mean >= small.proxy_cal.mean);
  }
}

TEST_CASE("experiment matrix") {
  MatrixConfig mc;
  mc.transformer = tiny_config();
  mc.dataset = tiny_dataset(120, 0.1f);
  mc.reward_train.epochs = 1;
  mc.reward_train.batch_size = 4;
  mc.reward_train.grad_accum_steps = 1;
  mc.reward_train.learning_rate = 1e-3f;
  mc.lora_train = mc.reward_train;
  mc.lora_train.schedule = optim::Schedule::Constant;
  mc.k = 2;
  mc.eval_prompts = 4;
  mc.jobs = 2;

  SECTION("bon cell counting: architectures x seeds x n values") {
    mc.architectures = {"none", "linear", "lora"};
    mc.bon_n = {2, 4, 8};
    mc.bon_seeds = 10;
    mc.run_ppo = false;
    const auto outcome = run_experiment_matrix(mc);
    REQUIRE(outcome.failures.empty());
    CHECK(outcome.rows.size() == 90);  // 3 architectures x 10 seeds x 3 n values
    int per_n = 0;
    for (const auto& r : outcome.rows)
      if (r.n_or_step == 4) ++per_n;
    CHECK(per_n == 30);
    // deterministic ordering regardless of the job count
    const auto again = run_experiment_matrix(mc);
    REQUIRE(again.rows.size() == outcome.rows.size());
    for (size_t i = 0; i < again.rows.size(); ++i) {
      CHECK(again.rows[i].architecture == outcome.rows[i].architecture);
      CHECK(again.rows[i].gold_reward == outcome.rows[i].gold_reward);
    }
  }

  SECTION("empty matrix gives a header-only csv") {
    mc.architectures.clear();
    const auto outcome = run_experiment_matrix(mc);
    CHECK(outcome.rows.empty());
    CHECK(results_csv(outcome.rows) ==
          "architecture,aggregation,beta,algo,n_or_step,seed,proxy_reward,gold_reward,kl_to_ref\n");
  }

  SECTION("ppo rows appear per checkpoint") {
    mc.architectures = {"none"};
    mc.run_bon = false;
    mc.run_ppo = true;
    mc.ppo_seeds = 1;
    mc.ppo.total_steps = 4;
    mc.ppo.eval_interval = 2;
    mc.ppo.rollout_batch_size = 4;
    mc.ppo.step_batch_size = 2;
    mc.ppo.decode.max_new_tokens = 6;
    mc.ppo.threads = 1;
    const auto outcome = run_experiment_matrix(mc);
    REQUIRE(outcome.failures.empty());
    // checkpoints at steps 0, 2, 4
    REQUIRE(outcome.rows.size() == 3);
    CHECK(outcome.rows[0].n_or_step == 0);
    CHECK(outcome.rows[1].n_or_step == 2);
    CHECK(outcome.rows[2].n_or_step == 4);
    for (const auto& r : outcome.rows) {
      CHECK(std::isfinite(r.gold_reward));
      CHECK(std::isfinite(r.kl_to_ref));
    }
  }

  SECTION("a failing cell is recorded while the rest continue") {
    mc.architectures = {"none", "bogus"};
    mc.bon_n = {2};
    mc.bon_seeds = 1;
    const auto outcome = run_experiment_matrix(mc);
    CHECK(outcome.rows.size() == 1);
    REQUIRE(outcome.failures.size() == 1);
    CHECK(outcome.failures[0].find("bogus") != std::string::npos);
  }
}
