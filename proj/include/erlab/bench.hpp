#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <mutex>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "erlab/data.hpp"
#include "erlab/ensemble.hpp"
#include "erlab/preftrain.hpp"
#include "erlab/rl.hpp"
#include "erlab/threading.hpp"

namespace erlab::bench {

using data::PreferencePair;
using data::PreferenceSplits;
using ensemble::Aggregation;
using ensemble::Architecture;
using ensemble::Ensemble;
using ensemble::EnsembleSpec;
using model::Backbone;
using model::TransformerConfig;

// Deterministic programmatic stand-in for human judgment. Mixes structural
// terms a policy can exploit (favored/penalized tokens, a preferred length)
// with a frozen random network over token histograms, clipped to [-5, 5].
class GoldReward {
 public:
  static constexpr int kHidden = 16;

  explicit GoldReward(uint64_t seed, int vocab_size = 64) : seed_(seed), vocab_(vocab_size) {
    Rng rng = substream(seed, {0x601dull});
    auto draw_distinct = [&](int count, std::vector<int>& out, const std::vector<int>& avoid) {
      while (int(out.size()) < count) {
        const int tok = 1 + rng.uniform_int(vocab_ - 1);
        bool taken = std::find(out.begin(), out.end(), tok) != out.end() ||
                     std::find(avoid.begin(), avoid.end(), tok) != avoid.end();
        if (!taken) out.push_back(tok);
      }
    };
    draw_distinct(4, good_tokens_, {});
    draw_distinct(4, bad_tokens_, good_tokens_);
    target_len_ = 10 + rng.uniform_int(5);  // [10, 14]
    w1_.resize(size_t(2 * vocab_) * kHidden);
    for (float& v : w1_) v = rng.normal_float(0.f, 2.f);
    b1_.resize(kHidden);
    for (float& v : b1_) v = rng.normal_float(0.f, 0.5f);
    w2_.resize(kHidden);
    for (float& v : w2_) v = rng.normal_float(0.f, 0.5f);
  }

  float operator()(std::span<const int> prompt, std::span<const int> response) const {
    const float rlen = float(std::max<size_t>(1, response.size()));
    float good = 0.f, bad = 0.f;
    for (int t : response) {
      if (std::find(good_tokens_.begin(), good_tokens_.end(), t) != good_tokens_.end()) good += 1.f;
      if (std::find(bad_tokens_.begin(), bad_tokens_.end(), t) != bad_tokens_.end()) bad += 1.f;
    }
    const float good_frac = good / rlen;
    const float bad_frac = bad / rlen;
    const float len_term =
        1.f - std::abs(float(response.size()) - float(target_len_)) / float(target_len_);

    // frozen tiny network over response and (damped) prompt histograms
    std::vector<float> x(size_t(2 * vocab_), 0.f);
    for (int t : response)
      if (t >= 0 && t < vocab_) x[size_t(t)] += 1.f / rlen;
    const float plen = float(std::max<size_t>(1, prompt.size()));
    for (int t : prompt)
      if (t >= 0 && t < vocab_) x[size_t(vocab_ + t)] += 0.25f / plen;
    float net = 0.f;
    for (int h = 0; h < kHidden; ++h) {
      float u = b1_[size_t(h)];
      for (int i = 0; i < 2 * vocab_; ++i)
        u += x[size_t(i)] * w1_[size_t(i) * kHidden + size_t(h)];
      net += std::tanh(u) * w2_[size_t(h)];
    }
    net = std::tanh(net);

    const float raw = kGoodWeight * good_frac - kBadWeight * bad_frac + kLenWeight * len_term +
                      kNetWeight * net;
    return std::min(5.f, std::max(-5.f, raw));
  }

  uint64_t seed() const { return seed_; }
  int vocab_size() const { return vocab_; }
  int target_len() const { return target_len_; }
  const std::vector<int>& good_tokens() const { return good_tokens_; }
  const std::vector<int>& bad_tokens() const { return bad_tokens_; }

  nlohmann::json to_json() const {
    return {{"seed", seed_},
            {"vocab_size", vocab_},
            {"target_len", target_len_},
            {"good_tokens", good_tokens_},
            {"bad_tokens", bad_tokens_},
            {"weights", {kGoodWeight, kBadWeight, kLenWeight, kNetWeight}}};
  }

  static GoldReward from_json(const nlohmann::json& j) {
    return GoldReward(j.at("seed").get<uint64_t>(), j.at("vocab_size").get<int>());
  }

 private:
  static constexpr float kGoodWeight = 4.f;
  static constexpr float kBadWeight = 4.f;
  static constexpr float kLenWeight = 1.5f;
  static constexpr float kNetWeight = 0.35f;

  uint64_t seed_;
  int vocab_;
  std::vector<int> good_tokens_, bad_tokens_;
  int target_len_;
  std::vector<float> w1_, b1_, w2_;
};

struct SynthDatasetSpec {
  int n_pairs = 8000;
  int prompt_len_min = 6;
  int prompt_len_max = 12;
  int response_budget_min = 4;  // per-pair token budget drawn up to decode.max_new_tokens
  rl::DecodeConfig decode{1.f, 0.9f, 16, 0, false};
  float label_noise = 0.15f;   // probability of flipping a gold label
  float phase1_frac = 0.54f;   // with phase2 below: a 60/40 phase split, 10% held out
  float phase2_frac = 0.36f;
  uint64_t seed = 42;

  void validate() const {
    if (n_pairs < 1) throw std::invalid_argument("dataset spec: n_pairs must be >= 1");
    if (prompt_len_min < 1 || prompt_len_max < prompt_len_min)
      throw std::invalid_argument("dataset spec: bad prompt length range");
    if (label_noise < 0.f || label_noise >= 0.5f)
      throw std::invalid_argument("dataset spec: label noise must be in [0, 0.5)");
    if (phase1_frac <= 0.f || phase2_frac <= 0.f || phase1_frac + phase2_frac > 1.f)
      throw std::invalid_argument("dataset spec: phase fractions must be positive and sum to <= 1");
    if (response_budget_min < 1 || response_budget_min > decode.max_new_tokens)
      throw std::invalid_argument("dataset spec: bad response budget");
    decode.validate();
  }

  bool operator==(const SynthDatasetSpec&) const = default;
};

inline std::vector<int> sample_prompt(const SynthDatasetSpec& spec, int vocab, Rng& rng) {
  const int len = spec.prompt_len_min + rng.uniform_int(spec.prompt_len_max - spec.prompt_len_min + 1);
  std::vector<int> prompt(size_t(len), 0);
  for (int& t : prompt) t = 1 + rng.uniform_int(vocab - 1);
  return prompt;
}

// Two responses per prompt from the reference policy, winner labeled by gold
// reward, label flipped with probability label_noise. Split by index, so the
// splits are disjoint and exhaustive by construction.
inline PreferenceSplits generate_preferences(const SynthDatasetSpec& spec, const GoldReward& gold,
                                             const Backbone& policy, int threads = 1) {
  spec.validate();
  const int vocab = policy.config.vocab_size;
  std::vector<PreferencePair> pairs(size_t(spec.n_pairs));
  run_parallel(threads, spec.n_pairs, [&](int i) {
    Rng rng = substream(spec.seed, {streams::data, uint64_t(i)});
    PreferencePair p;
    p.prompt = sample_prompt(spec, vocab, rng);
    rl::DecodeConfig dc = spec.decode;
    const int span = spec.decode.max_new_tokens - spec.response_budget_min + 1;
    for (int attempt = 0; attempt < 100; ++attempt) {
      dc.max_new_tokens = spec.response_budget_min + rng.uniform_int(span);
      auto a = rl::sample(policy, p.prompt, dc, rng);
      dc.max_new_tokens = spec.response_budget_min + rng.uniform_int(span);
      auto b = rl::sample(policy, p.prompt, dc, rng);
      p.chosen.assign(a.content().begin(), a.content().end());
      p.rejected.assign(b.content().begin(), b.content().end());
      if (p.chosen != p.rejected) break;
    }
    if (gold(p.prompt, p.chosen) < gold(p.prompt, p.rejected)) std::swap(p.chosen, p.rejected);
    if (rng.uniform() < double(spec.label_noise)) std::swap(p.chosen, p.rejected);
    p.validate();
    pairs[size_t(i)] = std::move(p);
  });

  PreferenceSplits splits;
  const int n1 = int(std::lround(double(spec.phase1_frac) * spec.n_pairs));
  const int n2 = int(std::lround(double(spec.phase2_frac) * spec.n_pairs));
  for (int i = 0; i < spec.n_pairs; ++i) {
    if (i < n1)
      splits.phase1.push_back(std::move(pairs[size_t(i)]));
    else if (i < n1 + n2)
      splits.phase2.push_back(std::move(pairs[size_t(i)]));
    else
      splits.heldout.push_back(std::move(pairs[size_t(i)]));
  }
  return splits;
}

struct GoldStats {
  double mean = 0.0;
  double std_error = 0.0;
  int n = 0;
};

inline GoldStats gold_stats(std::span<const double> values) {
  GoldStats s;
  s.n = int(values.size());
  if (s.n == 0) return s;
  for (double v : values) s.mean += v;
  s.mean /= s.n;
  if (s.n > 1) {
    double var = 0.0;
    for (double v : values) var += (v - s.mean) * (v - s.mean);
    var /= double(s.n - 1);
    s.std_error = std::sqrt(var / double(s.n));
  }
  return s;
}

inline GoldStats evaluate_gold(std::span<const std::vector<int>> prompts,
                               std::span<const std::vector<int>> responses,
                               const GoldReward& gold) {
  if (prompts.size() != responses.size())
    throw std::invalid_argument("evaluate_gold: " + std::to_string(prompts.size()) +
                                " prompts vs " + std::to_string(responses.size()) + " responses");
  std::vector<double> values(prompts.size());
  for (size_t i = 0; i < prompts.size(); ++i)
    values[i] = double(gold(prompts[i], responses[i]));
  return gold_stats(values);
}

struct OveroptRow {
  int index = 0;
  double proxy = 0.0;
  double gold = 0.0;
  double gap = 0.0;
  bool overopt_event = false;  // proxy rose while gold failed to rise
};

// Gap per checkpoint plus event flags. Both series must be on a shared scale
// (see calibrate below) for the gap to mean anything.
inline std::vector<OveroptRow> overoptimization_report(std::span<const double> proxy,
                                                       std::span<const double> gold) {
  if (proxy.size() != gold.size())
    throw std::invalid_argument("overoptimization_report: series lengths differ, " +
                                std::to_string(proxy.size()) + " vs " +
                                std::to_string(gold.size()));
  std::vector<OveroptRow> rows(proxy.size());
  for (size_t i = 0; i < proxy.size(); ++i) {
    rows[i].index = int(i);
    rows[i].proxy = proxy[i];
    rows[i].gold = gold[i];
    rows[i].gap = proxy[i] - gold[i];
    rows[i].overopt_event = i > 0 && proxy[i] > proxy[i - 1] && gold[i] <= gold[i - 1];
  }
  return rows;
}

// Shift/scale that map a score distribution to zero mean, unit deviation on
// reference-policy samples; keeps proxies from different reward models (and
// gold) on one scale.
struct Calibration {
  float shift = 0.f;
  float scale = 1.f;

  float operator()(float raw) const { return (raw - shift) * scale; }

  static Calibration fit(std::span<const float> values) {
    Calibration c;
    if (values.empty()) return c;
    double mean = 0.0;
    for (float v : values) mean += double(v);
    mean /= double(values.size());
    double var = 0.0;
    for (float v : values) var += (double(v) - mean) * (double(v) - mean);
    var /= double(values.size());
    c.shift = float(mean);
    c.scale = var > 1e-12 ? float(1.0 / std::sqrt(var)) : 1.f;
    return c;
  }
};

// ---- Best-of-n collection: samples drawn once, scored per ensemble, then
// ---- reusable across n values and aggregation rules.

struct BonSamples {
  std::vector<std::vector<int>> prompts;
  std::vector<std::vector<std::vector<int>>> responses;  // [prompt][sample]
  std::vector<std::vector<float>> gold;                  // [prompt][sample]
  int n = 0;
};

inline BonSamples collect_bon_samples(const Backbone& policy,
                                      std::span<const std::vector<int>> prompts, int n,
                                      const rl::DecodeConfig& decode, const GoldReward& gold,
                                      int threads = 1) {
  BonSamples out;
  out.prompts.assign(prompts.begin(), prompts.end());
  out.n = n;
  out.responses.resize(prompts.size());
  out.gold.resize(prompts.size());
  run_parallel(threads, int(prompts.size()), [&](int p) {
    auto& resp = out.responses[size_t(p)];
    auto& gvals = out.gold[size_t(p)];
    resp.resize(size_t(n));
    gvals.resize(size_t(n));
    for (int j = 0; j < n; ++j) {
      Rng rng = substream(decode.seed, {streams::decode, uint64_t(p), uint64_t(j)});
      auto s = rl::sample(policy, prompts[size_t(p)], decode, rng);
      resp[size_t(j)].assign(s.content().begin(), s.content().end());
      gvals[size_t(j)] = gold(prompts[size_t(p)], resp[size_t(j)]);
    }
  });
  return out;
}

// member scores per [prompt][sample][member]
using MemberScores = std::vector<std::vector<std::vector<float>>>;

inline MemberScores score_bon_samples(const Ensemble& ens, const BonSamples& samples,
                                      int threads = 1) {
  MemberScores scores(samples.prompts.size());
  run_parallel(threads, int(samples.prompts.size()), [&](int p) {
    auto& per_prompt = scores[size_t(p)];
    per_prompt.resize(size_t(samples.n));
    for (int j = 0; j < samples.n; ++j)
      per_prompt[size_t(j)] =
          ensemble::predict_members(ens, samples.prompts[size_t(p)],
                                    samples.responses[size_t(p)][size_t(j)]);
  });
  return scores;
}

inline Calibration calibrate_from_scores(const MemberScores& scores, Aggregation rule,
                                         float beta) {
  std::vector<float> values;
  for (const auto& per_prompt : scores)
    for (const auto& members : per_prompt)
      values.push_back(ensemble::aggregate(members, rule, beta));
  return Calibration::fit(values);
}

inline Calibration calibrate_gold(const BonSamples& samples) {
  std::vector<float> values;
  for (const auto& per_prompt : samples.gold)
    values.insert(values.end(), per_prompt.begin(), per_prompt.end());
  return Calibration::fit(values);
}

struct BonCellResult {
  GoldStats gold;           // raw gold of the selected responses
  GoldStats gold_cal;       // same, on the calibrated scale
  GoldStats proxy_cal;      // calibrated proxy of the selected responses
};

// Selection over the first n_use samples per prompt under (rule, beta);
// ties keep the lowest sample index.
inline BonCellResult evaluate_bon_cell(const BonSamples& samples, const MemberScores& scores,
                                       int n_use, Aggregation rule, float beta,
                                       const Calibration& proxy_cal,
                                       const Calibration& gold_cal) {
  if (n_use < 1 || n_use > samples.n)
    throw std::invalid_argument("evaluate_bon_cell: n " + std::to_string(n_use) +
                                " outside the collected range " + std::to_string(samples.n));
  std::vector<double> gold_raw(samples.prompts.size());
  std::vector<double> gold_c(samples.prompts.size());
  std::vector<double> proxy_c(samples.prompts.size());
  for (size_t p = 0; p < samples.prompts.size(); ++p) {
    int best = 0;
    float best_score = ensemble::aggregate(scores[p][0], rule, beta);
    for (int j = 1; j < n_use; ++j) {
      const float s = ensemble::aggregate(scores[p][size_t(j)], rule, beta);
      if (s > best_score) {
        best = j;
        best_score = s;
      }
    }
    gold_raw[p] = double(samples.gold[p][size_t(best)]);
    gold_c[p] = double(gold_cal(samples.gold[p][size_t(best)]));
    proxy_c[p] = double(proxy_cal(best_score));
  }
  return {gold_stats(gold_raw), gold_stats(gold_c), gold_stats(proxy_c)};
}

// ---- Experiment matrix ----

struct AggregationChoice {
  Aggregation rule = Aggregation::Mean;
  float beta = 0.f;

  bool operator==(const AggregationChoice&) const = default;
};

struct MatrixConfig {
  TransformerConfig transformer;
  SynthDatasetSpec dataset;
  preftrain::TrainConfig reward_train;  // single / independent / linear / lora phase 1
  preftrain::TrainConfig lora_train;    // lora phase 2
  rl::PpoConfig ppo;
  rl::DecodeConfig bon_decode{1.f, 0.9f, 16, 0, false};
  std::vector<std::string> architectures{"none", "independent", "linear", "lora"};
  std::vector<AggregationChoice> aggregations{{Aggregation::Mean, 0.f}};
  std::vector<int> bon_n{50, 100, 200};
  bool run_bon = true;
  bool run_ppo = false;
  int bon_seeds = 10;
  int ppo_seeds = 5;
  int k = 3;
  int eval_prompts = 100;
  uint64_t base_seed = 42;
  int jobs = 1;

  MatrixConfig() {
    lora_train.schedule = optim::Schedule::Constant;
    lora_train.learning_rate = 1e-3f;
  }
};

struct ResultRow {
  std::string architecture;
  std::string aggregation;
  float beta = 0.f;
  std::string algo;  // "bon" or "ppo"
  int n_or_step = 0;
  uint64_t seed = 0;
  double proxy_reward = 0.0;  // calibrated scale
  double gold_reward = 0.0;   // raw gold scale
  double kl_to_ref = 0.0;     // nan for bon rows
};

struct MatrixOutcome {
  std::vector<ResultRow> rows;
  std::vector<std::string> failures;
};

inline std::string results_csv(std::span<const ResultRow> rows) {
  std::ostringstream os;
  os << "architecture,aggregation,beta,algo,n_or_step,seed,proxy_reward,gold_reward,kl_to_ref\n";
  for (const auto& r : rows) {
    os << r.architecture << ',' << r.aggregation << ',' << r.beta << ',' << r.algo << ','
       << r.n_or_step << ',' << r.seed << ',' << r.proxy_reward << ',' << r.gold_reward << ',';
    if (!std::isnan(r.kl_to_ref)) os << r.kl_to_ref;
    os << '\n';
  }
  return os.str();
}

// The fixed per-run environment: gold program, reference policy, preference
// data and evaluation prompts. Seeds vary training and sampling, not this.
struct LabEnv {
  TransformerConfig transformer;
  SynthDatasetSpec dataset;
  GoldReward gold;
  Backbone policy;  // reference / SFT stand-in
  PreferenceSplits splits;
  std::vector<PreferencePair> full_train;  // phase1 + phase2
  std::vector<std::vector<int>> eval_prompts;

  static LabEnv make(const TransformerConfig& transformer, const SynthDatasetSpec& dataset,
                     int eval_prompt_count, int threads = 1) {
    LabEnv env{transformer, dataset, GoldReward(dataset.seed, transformer.vocab_size),
               Backbone::init(transformer, hash_combine(dataset.seed, streams::policy)),
               {}, {}, {}};
    env.splits = generate_preferences(dataset, env.gold, env.policy, threads);
    env.full_train = env.splits.phase1;
    env.full_train.insert(env.full_train.end(), env.splits.phase2.begin(),
                          env.splits.phase2.end());
    Rng rng = substream(dataset.seed, {streams::prompts});
    env.eval_prompts.resize(size_t(eval_prompt_count));
    for (auto& p : env.eval_prompts) p = sample_prompt(dataset, transformer.vocab_size, rng);
    return env;
  }

  rl::PromptSampler prompt_sampler() const {
    const SynthDatasetSpec spec = dataset;
    const int vocab = transformer.vocab_size;
    return [spec, vocab](Rng& rng) { return sample_prompt(spec, vocab, rng); };
  }
};

inline Architecture parse_architecture(const std::string& name) {
  if (name == "independent") return Architecture::IndependentModels;
  if (name == "linear") return Architecture::LinearLayerEnsemble;
  if (name == "lora") return Architecture::LoraEnsemble;
  throw std::invalid_argument("unknown ensemble architecture: " + name);
}

// Trains the reward function named by `arch` ("none" is a single model, i.e.
// an independent ensemble of one). Full-finetune variants train on
// phase1+phase2; lora trains per the two-phase schedule.
inline Ensemble train_architecture(const LabEnv& env, const std::string& arch, int k,
                                   const preftrain::TrainConfig& base_cfg,
                                   const preftrain::TrainConfig& lora_cfg, uint64_t seed,
                                   preftrain::TrainReport* report = nullptr) {
  preftrain::TrainConfig cfg = base_cfg;
  cfg.seed = seed;
  preftrain::TrainReport local;
  Ensemble e;
  if (arch == "none" || arch == "independent" || arch == "linear") {
    EnsembleSpec spec;
    spec.architecture =
        arch == "linear" ? Architecture::LinearLayerEnsemble : Architecture::IndependentModels;
    spec.k = arch == "none" ? 1 : k;
    e = ensemble::build_ensemble(spec, env.transformer, seed);
    local = preftrain::train_reward_model(e, env.full_train, env.splits.heldout, cfg);
  } else if (arch == "lora") {
    EnsembleSpec spec;
    spec.architecture = Architecture::LoraEnsemble;
    spec.k = k;
    preftrain::TrainConfig phase2 = lora_cfg;
    phase2.seed = seed;
    e = preftrain::train_lora_ensemble(env.transformer, spec, env.splits.phase1,
                                       env.splits.phase2, env.splits.heldout, cfg, phase2,
                                       &local);
  } else {
    throw std::invalid_argument("unknown ensemble architecture: " + arch);
  }
  if (report != nullptr) *report = std::move(local);
  return e;
}

struct PpoCellRow {
  int step = 0;
  double proxy_cal = 0.0;
  double gold = 0.0;
  double gold_cal = 0.0;
  double kl = 0.0;
};

// PPO against `ens` with checkpoint-time evaluation on the env's fixed
// prompt set. Shaping and reporting use the calibrated proxy.
inline std::vector<PpoCellRow> run_ppo_cell(const LabEnv& env, const Ensemble& ens,
                                            rl::PpoConfig cfg, uint64_t seed,
                                            Aggregation rule, float beta) {
  cfg.seed = seed;
  // calibration samples from the reference policy on the eval prompts
  rl::DecodeConfig calib_decode = cfg.decode;
  calib_decode.seed = hash_combine(seed, 0xca11b8ull);
  BonSamples calib =
      collect_bon_samples(env.policy, env.eval_prompts, 2, calib_decode, env.gold, cfg.threads);
  MemberScores calib_scores = score_bon_samples(ens, calib, cfg.threads);
  const Calibration proxy_cal = calibrate_from_scores(calib_scores, rule, beta);
  const Calibration gold_cal = calibrate_gold(calib);

  const rl::ScoreFn proxy = [&ens, rule, beta, proxy_cal](std::span<const int> prompt,
                                                          std::span<const int> response) {
    return proxy_cal(ensemble::aggregate(ensemble::predict_members(ens, prompt, response), rule,
                                         beta));
  };
  const rl::ScoreFn gold_fn = [&env](std::span<const int> prompt,
                                     std::span<const int> response) {
    return env.gold(prompt, response);
  };

  Backbone policy = env.policy.clone();
  std::vector<PpoCellRow> rows;
  const rl::CheckpointHook hook = [&](int step, const Backbone& current) {
    rl::DecodeConfig eval_decode = cfg.decode;
    eval_decode.seed = hash_combine(hash_combine(seed, 0xe7a1ull), uint64_t(step));
    std::vector<double> proxy_vals(env.eval_prompts.size());
    std::vector<double> gold_vals(env.eval_prompts.size());
    std::vector<double> gold_cal_vals(env.eval_prompts.size());
    std::vector<double> kls(env.eval_prompts.size());
    run_parallel(cfg.threads, int(env.eval_prompts.size()), [&](int p) {
      Rng rng = substream(eval_decode.seed, {streams::decode, uint64_t(p)});
      auto s = rl::sample(current, env.eval_prompts[size_t(p)], eval_decode, rng);
      const auto content = s.content();
      proxy_vals[size_t(p)] = double(proxy(env.eval_prompts[size_t(p)], content));
      const float g = env.gold(env.eval_prompts[size_t(p)], content);
      gold_vals[size_t(p)] = double(g);
      gold_cal_vals[size_t(p)] = double(gold_cal(g));
      std::vector<int> seq = env.eval_prompts[size_t(p)];
      seq.insert(seq.end(), s.actions.begin(), s.actions.end());
      const auto ref_lp = rl::detail::action_logprobs(nullptr, env.policy, seq,
                                                      int(env.eval_prompts[size_t(p)].size()),
                                                      int(s.actions.size()));
      double kl = 0.0;
      for (size_t t = 0; t < s.actions.size(); ++t)
        kl += double(s.logprobs[t]) - double(ref_lp[t]);
      kls[size_t(p)] = kl;
    });
    PpoCellRow row;
    row.step = step;
    row.proxy_cal = gold_stats(proxy_vals).mean;
    row.gold = gold_stats(gold_vals).mean;
    row.gold_cal = gold_stats(gold_cal_vals).mean;
    row.kl = gold_stats(kls).mean;
    rows.push_back(row);
  };

  rl::ppo_train(policy, env.policy, proxy, &gold_fn, env.prompt_sampler(), cfg, hook);
  return rows;
}

// Every (architecture x aggregation x algorithm x seed) cell. Work is
// parallel across seeds; within a seed the sample collection is shared by
// all architectures and training is shared across aggregations and n
// values. A failure in one cell is recorded and the rest of the matrix
// continues. Rows come back sorted, so the output is independent of the
// job count.
inline MatrixOutcome run_experiment_matrix(const MatrixConfig& cfg) {
  MatrixOutcome outcome;
  if (cfg.architectures.empty() || cfg.aggregations.empty() ||
      (!cfg.run_bon && !cfg.run_ppo)) {
    return outcome;
  }
  const LabEnv env = LabEnv::make(cfg.transformer, cfg.dataset, cfg.eval_prompts, cfg.jobs);

  const int seeds = std::max(cfg.run_bon ? cfg.bon_seeds : 0, cfg.run_ppo ? cfg.ppo_seeds : 0);
  std::mutex mu;
  run_parallel(cfg.jobs, seeds, [&](int s) {
    // seeds spaced so member substreams (seed ^ i) never collide across runs
    const uint64_t seed = cfg.base_seed + 10 * uint64_t(s);
    const bool want_bon = cfg.run_bon && s < cfg.bon_seeds;
    const bool want_ppo = cfg.run_ppo && s < cfg.ppo_seeds;

    std::optional<BonSamples> samples;
    std::optional<Calibration> gold_cal;
    if (want_bon) {
      const int n_max = *std::max_element(cfg.bon_n.begin(), cfg.bon_n.end());
      rl::DecodeConfig decode = cfg.bon_decode;
      decode.seed = hash_combine(seed, 0xb0ull);
      samples = collect_bon_samples(env.policy, env.eval_prompts, n_max, decode, env.gold, 1);
      gold_cal = calibrate_gold(*samples);
    }

    for (const auto& arch : cfg.architectures) {
      try {
        Ensemble ens =
            train_architecture(env, arch, cfg.k, cfg.reward_train, cfg.lora_train, seed);
        std::vector<ResultRow> local;
        if (want_bon) {
          MemberScores scores = score_bon_samples(ens, *samples, 1);
          for (const auto& agg : cfg.aggregations) {
            const Calibration proxy_cal = calibrate_from_scores(scores, agg.rule, agg.beta);
            for (int n : cfg.bon_n) {
              const auto r = evaluate_bon_cell(*samples, scores, n, agg.rule, agg.beta,
                                               proxy_cal, *gold_cal);
              local.push_back({arch, ensemble::to_string(agg.rule), agg.beta, "bon", n, seed,
                               r.proxy_cal.mean, r.gold.mean, std::nan("")});
            }
          }
        }
        if (want_ppo) {
          for (const auto& agg : cfg.aggregations) {
            rl::PpoConfig pc = cfg.ppo;
            const auto rows = run_ppo_cell(env, ens, pc, seed, agg.rule, agg.beta);
            for (const auto& r : rows)
              local.push_back({arch, ensemble::to_string(agg.rule), agg.beta, "ppo", r.step,
                               seed, r.proxy_cal, r.gold, r.kl});
          }
        }
        std::lock_guard<std::mutex> lock(mu);
        outcome.rows.insert(outcome.rows.end(), local.begin(), local.end());
      } catch (const std::exception& e) {
        std::lock_guard<std::mutex> lock(mu);
        outcome.failures.push_back(arch + "/seed-" + std::to_string(seed) + ": " + e.what());
      }
    }
  });

  std::sort(outcome.rows.begin(), outcome.rows.end(), [](const ResultRow& a, const ResultRow& b) {
    return std::tie(a.architecture, a.aggregation, a.beta, a.algo, a.n_or_step, a.seed) <
           std::tie(b.architecture, b.aggregation, b.beta, b.algo, b.n_or_step, b.seed);
  });
  return outcome;
}

// The beta sweep mirrored by the appendix comparison: lcb at each beta
// against the mean rule.
inline std::vector<AggregationChoice> beta_sweep_aggregations() {
  return {{Aggregation::Mean, 0.f}, {Aggregation::Lcb, 0.f},  {Aggregation::Lcb, 0.25f},
          {Aggregation::Lcb, 0.5f}, {Aggregation::Lcb, 1.f},  {Aggregation::Lcb, 2.f}};
}

}  // namespace erlab::bench
