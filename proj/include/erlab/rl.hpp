#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "erlab/ensemble.hpp"
#include "erlab/model.hpp"
#include "erlab/optim.hpp"
#include "erlab/threading.hpp"

namespace erlab::rl {

using ensemble::Ensemble;
using model::Backbone;
using model::kEosToken;

struct DecodeConfig {
  float temperature = 1.f;
  float top_p = 0.9f;
  int max_new_tokens = 20;
  uint64_t seed = 0;
  bool greedy = false;  // the temperature -> 0 limit

  void validate() const {
    if (temperature <= 0.f) throw std::invalid_argument("decode: temperature must be > 0");
    if (top_p <= 0.f || top_p > 1.f) throw std::invalid_argument("decode: top_p must be in (0, 1]");
    if (max_new_tokens < 1) throw std::invalid_argument("decode: max_new_tokens must be >= 1");
  }

  bool operator==(const DecodeConfig&) const = default;
};

// Smallest prefix of the probability-sorted vocabulary whose mass reaches
// top_p; ties in probability break toward the lower token id.
inline std::vector<int> top_p_support(std::span<const float> probs, float top_p) {
  std::vector<int> order(probs.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return probs[size_t(a)] > probs[size_t(b)]; });
  std::vector<int> support;
  double cum = 0.0;
  for (int id : order) {
    support.push_back(id);
    cum += double(probs[size_t(id)]);
    if (cum >= double(top_p)) break;
  }
  return support;
}

struct SampleResult {
  std::vector<int> actions;        // every sampled token, including a trailing eos
  std::vector<float> logprobs;     // raw (temperature-free) log-probability per action
  bool hit_eos = false;

  std::span<const int> content() const {
    return std::span<const int>(actions).first(actions.size() - (hit_eos ? 1 : 0));
  }
};

// Ancestral sampling with temperature scaling then nucleus truncation.
// The first generated token never ends the response, so responses are
// nonempty by construction. Recorded logprobs are the policy's raw values,
// independent of the decoding temperature.
inline SampleResult sample(const Backbone& policy, std::span<const int> prompt,
                           const DecodeConfig& cfg, Rng& rng) {
  cfg.validate();
  if (prompt.empty()) throw std::invalid_argument("sample: empty prompt");
  const int vocab = policy.config.vocab_size;
  std::vector<int> tokens(prompt.begin(), prompt.end());
  SampleResult out;
  std::vector<float> probs(size_t(vocab), 0.f);
  for (int step = 0; step < cfg.max_new_tokens; ++step) {
    if (int(tokens.size()) >= policy.config.max_seq_len) break;
    const std::vector<float> logits = model::next_token_logits(policy, tokens);
    // raw logprobs for bookkeeping
    float raw_max = logits[0];
    for (float v : logits) raw_max = std::max(raw_max, v);
    double raw_sum = 0.0;
    for (float v : logits) raw_sum += std::exp(double(v) - double(raw_max));
    const double raw_lse = double(raw_max) + std::log(raw_sum);

    int choice;
    if (cfg.greedy) {
      choice = 0;
      for (int v = 1; v < vocab; ++v)
        if (logits[size_t(v)] > logits[size_t(choice)] &&
            !(step == 0 && v == kEosToken))
          choice = v;
      if (step == 0 && choice == kEosToken) {
        // eos had the argmax; take the best non-eos token instead
        choice = kEosToken == 0 ? 1 : 0;
        for (int v = 0; v < vocab; ++v)
          if (v != kEosToken && logits[size_t(v)] > logits[size_t(choice)]) choice = v;
      }
    } else {
      float mx = -std::numeric_limits<float>::infinity();
      for (int v = 0; v < vocab; ++v)
        if (!(step == 0 && v == kEosToken)) mx = std::max(mx, logits[size_t(v)]);
      double sum = 0.0;
      for (int v = 0; v < vocab; ++v) {
        if (step == 0 && v == kEosToken) {
          probs[size_t(v)] = 0.f;
          continue;
        }
        probs[size_t(v)] = std::exp((logits[size_t(v)] - mx) / cfg.temperature);
        sum += double(probs[size_t(v)]);
      }
      for (int v = 0; v < vocab; ++v) probs[size_t(v)] = float(double(probs[size_t(v)]) / sum);
      const std::vector<int> support = top_p_support(probs, cfg.top_p);
      double mass = 0.0;
      for (int id : support) mass += double(probs[size_t(id)]);
      const double u = rng.uniform() * mass;
      double cum = 0.0;
      choice = support.back();
      for (int id : support) {
        cum += double(probs[size_t(id)]);
        if (u < cum) {
          choice = id;
          break;
        }
      }
    }
    out.actions.push_back(choice);
    out.logprobs.push_back(float(double(logits[size_t(choice)]) - raw_lse));
    tokens.push_back(choice);
    if (choice == kEosToken) {
      out.hit_eos = true;
      break;
    }
  }
  return out;
}

// Scores (prompt, response) pairs; shift/scale calibrate the raw aggregate
// so different reward models report on a comparable scale.
struct RewardScorer {
  const Ensemble* ens = nullptr;
  float shift = 0.f;
  float scale = 1.f;

  float operator()(std::span<const int> prompt, std::span<const int> response) const {
    return (ensemble::predict(*ens, prompt, response) - shift) * scale;
  }
};

using ScoreFn = std::function<float(std::span<const int>, std::span<const int>)>;

struct BonSelection {
  std::vector<int> response;
  float score = 0.f;
  int sample_index = 0;
};

// Per prompt: n independent samples, scored, argmax returned; ties keep the
// lowest sample index.
inline std::vector<BonSelection> best_of_n(const Backbone& policy, const ScoreFn& scorer,
                                           std::span<const std::vector<int>> prompts, int n,
                                           const DecodeConfig& decode, int threads = 1) {
  if (n < 1) throw std::invalid_argument("best_of_n: n must be >= 1");
  std::vector<BonSelection> out(prompts.size());
  run_parallel(threads, int(prompts.size()), [&](int p) {
    BonSelection best;
    for (int j = 0; j < n; ++j) {
      Rng rng = substream(decode.seed, {streams::decode, uint64_t(p), uint64_t(j)});
      SampleResult s = sample(policy, prompts[size_t(p)], decode, rng);
      const float score = scorer(prompts[size_t(p)], s.content());
      if (j == 0 || score > best.score) {
        best.response.assign(s.content().begin(), s.content().end());
        best.score = score;
        best.sample_index = j;
      }
    }
    out[size_t(p)] = std::move(best);
  });
  return out;
}

struct PpoConfig {
  int rollout_batch_size = 64;
  int step_batch_size = 32;
  float learning_rate = 1e-4f;  // desk-scale default; reference scale is 1e-5
  int warmup_steps = 5;
  int epochs_per_batch = 2;
  float kl_coef = 0.02f;
  float value_coef = 0.1f;
  float clip_ratio = 0.2f;
  int total_steps = 300;
  int eval_interval = 100;  // checkpoint cadence, in PPO steps
  float kl_ceiling = 40.f;  // per-sequence nats to reference; beyond it, stop early
  uint64_t seed = 42;
  int threads = 1;
  DecodeConfig decode{0.7f, 0.9f, 16, 0, false};

  void validate() const {
    if (kl_coef < 0.f) throw std::invalid_argument("ppo: kl coefficient must be >= 0");
    if (clip_ratio <= 0.f || clip_ratio >= 1.f)
      throw std::invalid_argument("ppo: clip ratio must be in (0, 1)");
    if (rollout_batch_size < 1 || step_batch_size < 1 || epochs_per_batch < 1 || total_steps < 1)
      throw std::invalid_argument("ppo: batch sizes, epochs and total steps must be >= 1");
    decode.validate();
  }

  bool operator==(const PpoConfig&) const = default;
};

struct PpoMetricsRow {
  int step = 0;
  double proxy_reward = 0.0;
  double gold_reward = 0.0;  // nan when no gold scorer is attached
  double kl_to_ref = 0.0;
  double value_loss = 0.0;
  double policy_loss = 0.0;
  bool kl_stop = false;
};

struct PpoResult {
  std::vector<PpoMetricsRow> rows;
  bool early_stopped = false;
  int steps_run = 0;
};

using PromptSampler = std::function<std::vector<int>(Rng&)>;
using CheckpointHook = std::function<void(int step, const Backbone& policy)>;

namespace detail {

struct Rollout {
  std::vector<int> prompt;
  std::vector<int> actions;        // includes trailing eos when emitted
  std::vector<float> behavior_lp;  // per action
  std::vector<float> ref_lp;       // per action
  float proxy = 0.f;
  float gold = 0.f;
  float kl = 0.f;         // sum over actions of behavior - reference
  float shaped_return = 0.f;
  float advantage = 0.f;
};

inline std::vector<float> action_logprobs(ad::Tape* tape, const Backbone& bb,
                                          const std::vector<int>& seq, int prompt_len,
                                          int n_actions) {
  Tensor lp = model::policy_forward(tape, bb, seq);
  std::vector<float> out(size_t(n_actions), 0.f);
  for (int i = 0; i < n_actions; ++i)
    out[size_t(i)] = lp.data()[size_t(prompt_len - 1 + i) * size_t(bb.config.vocab_size) +
                               size_t(seq[size_t(prompt_len + i)])];
  return out;
}

}  // namespace detail

// Clipped-surrogate PPO with a per-token KL penalty folded into a
// sequence-level shaped return, batch-mean advantage baseline, and an
// auxiliary value head trained on the shaped return. The reference policy
// and the reward scorer are read-only throughout.
inline PpoResult ppo_train(Backbone& policy, const Backbone& reference, const ScoreFn& proxy,
                           const ScoreFn* gold, const PromptSampler& next_prompt,
                           const PpoConfig& cfg, const CheckpointHook& on_checkpoint = {}) {
  cfg.validate();
  model::ValueHead value_head = model::ValueHead::init(policy.config.d_model,
                                                       hash_combine(cfg.seed, streams::head));
  std::vector<Tensor> trainable;
  policy.visit([&](const std::string&, Tensor& t) { trainable.push_back(t); });
  value_head.visit([&](const std::string&, Tensor& t) { trainable.push_back(t); });
  optim::AdamW opt(trainable);
  opt.zero_grad();

  PpoResult result;
  const int b = cfg.rollout_batch_size;
  if (on_checkpoint) on_checkpoint(0, policy);

  for (int step = 0; step < cfg.total_steps; ++step) {
    // rollouts against the frozen step-start policy
    std::vector<detail::Rollout> batch(static_cast<size_t>(b));
    run_parallel(cfg.threads, b, [&](int i) {
      Rng prompt_rng = substream(cfg.seed, {streams::prompts, uint64_t(step), uint64_t(i)});
      Rng decode_rng = substream(cfg.seed, {streams::rollout, uint64_t(step), uint64_t(i)});
      detail::Rollout r;
      r.prompt = next_prompt(prompt_rng);
      SampleResult s = sample(policy, r.prompt, cfg.decode, decode_rng);
      r.actions = std::move(s.actions);
      r.behavior_lp = std::move(s.logprobs);
      std::vector<int> seq = r.prompt;
      seq.insert(seq.end(), r.actions.begin(), r.actions.end());
      r.ref_lp = detail::action_logprobs(nullptr, reference, seq, int(r.prompt.size()),
                                         int(r.actions.size()));
      const auto content = std::span<const int>(r.actions).first(
          r.actions.size() - (r.actions.back() == kEosToken ? 1 : 0));
      r.proxy = proxy(r.prompt, content);
      r.gold = gold != nullptr ? (*gold)(r.prompt, content) : 0.f;
      for (size_t t = 0; t < r.actions.size(); ++t) r.kl += r.behavior_lp[t] - r.ref_lp[t];
      r.shaped_return = r.proxy - cfg.kl_coef * r.kl;
      batch[size_t(i)] = std::move(r);
    });

    double return_mean = 0.0, proxy_mean = 0.0, gold_mean = 0.0, kl_mean = 0.0;
    for (const auto& r : batch) {
      return_mean += double(r.shaped_return);
      proxy_mean += double(r.proxy);
      gold_mean += double(r.gold);
      kl_mean += double(r.kl);
    }
    return_mean /= b;
    proxy_mean /= b;
    gold_mean /= b;
    kl_mean /= b;
    for (auto& r : batch) r.advantage = r.shaped_return - float(return_mean);

    // clipped-surrogate updates, epochs_per_batch passes in minibatches
    double value_loss_sum = 0.0, policy_loss_sum = 0.0;
    int minibatches = 0;
    const float lr = optim::lr_at(cfg.learning_rate, optim::Schedule::Constant, step,
                                  cfg.total_steps, cfg.warmup_steps);
    std::vector<size_t> order(batch.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    for (int epoch = 0; epoch < cfg.epochs_per_batch; ++epoch) {
      Rng mb_rng = substream(cfg.seed, {streams::minibatch, uint64_t(step), uint64_t(epoch)});
      mb_rng.shuffle(order);
      for (size_t mb0 = 0; mb0 < order.size(); mb0 += size_t(cfg.step_batch_size)) {
        const size_t mb1 = std::min(order.size(), mb0 + size_t(cfg.step_batch_size));
        int total_actions = 0;
        for (size_t oi = mb0; oi < mb1; ++oi)
          total_actions += int(batch[order[oi]].actions.size());
        if (total_actions == 0) continue;
        ad::Tape tape;
        Tensor loss;
        double mb_value_loss = 0.0, mb_policy_loss = 0.0;
        for (size_t oi = mb0; oi < mb1; ++oi) {
          const auto& r = batch[order[oi]];
          const int p_len = int(r.prompt.size());
          const int n_act = int(r.actions.size());
          std::vector<int> seq = r.prompt;
          seq.insert(seq.end(), r.actions.begin(), r.actions.end());
          Tensor h = model::backbone_forward(&tape, policy, seq);
          Tensor logits = ad::matmul_nt(&tape, h, policy.tok_emb);
          Tensor lp_all = ad::log_softmax_rows(&tape, logits);
          std::vector<int> rows(size_t(n_act), 0), cols(size_t(n_act), 0);
          for (int t = 0; t < n_act; ++t) {
            rows[size_t(t)] = p_len - 1 + t;
            cols[size_t(t)] = r.actions[size_t(t)];
          }
          Tensor lp_now =
              ad::gather_elems(&tape, ad::gather_rows(&tape, lp_all, rows), cols);
          Tensor behavior = Tensor::from({n_act}, {r.behavior_lp.begin(), r.behavior_lp.end()});
          Tensor ratio = ad::exp_op(&tape, ad::sub(&tape, lp_now, behavior));
          Tensor surr = ad::scale(&tape, ratio, r.advantage);
          Tensor clipped = ad::scale(
              &tape, ad::clamp(&tape, ratio, 1.f - cfg.clip_ratio, 1.f + cfg.clip_ratio),
              r.advantage);
          Tensor per_token = ad::minimum(&tape, surr, clipped);
          Tensor policy_term =
              ad::scale(&tape, ad::sum_all(&tape, per_token), -1.f / float(total_actions));
          mb_policy_loss += double(policy_term.item());

          const int vrow[1] = {p_len - 1};
          Tensor v = ad::add(&tape, ad::matmul(&tape, ad::gather_rows(&tape, h, vrow),
                                               value_head.weight),
                             value_head.bias);
          Tensor v_err = ad::sub(&tape, v, Tensor::scalar(r.shaped_return));
          Tensor v_sq = ad::mul(&tape, v_err, v_err);
          mb_value_loss += double(v_sq.item()) / double(mb1 - mb0);
          Tensor value_term =
              ad::scale(&tape, v_sq, cfg.value_coef / float(mb1 - mb0));

          Tensor contrib = ad::add(&tape, policy_term, value_term);
          loss = loss.defined() ? ad::add(&tape, loss, contrib) : contrib;
        }
        const float loss_value = loss.item();
        if (!std::isfinite(loss_value))
          throw optim::TrainingDiverged(step, lr, opt.grad_norm());
        tape.backward(loss);
        opt.step(lr);
        opt.zero_grad();
        value_loss_sum += mb_value_loss;
        policy_loss_sum += mb_policy_loss;
        ++minibatches;
      }
    }

    PpoMetricsRow row;
    row.step = step + 1;
    row.proxy_reward = proxy_mean;
    row.gold_reward = gold != nullptr ? gold_mean : std::nan("");
    row.kl_to_ref = kl_mean;
    row.value_loss = minibatches > 0 ? value_loss_sum / minibatches : 0.0;
    row.policy_loss = minibatches > 0 ? policy_loss_sum / minibatches : 0.0;
    row.kl_stop = kl_mean > double(cfg.kl_ceiling);
    result.rows.push_back(row);
    result.steps_run = step + 1;
    if (on_checkpoint && ((step + 1) % cfg.eval_interval == 0 || step + 1 == cfg.total_steps))
      on_checkpoint(step + 1, policy);
    if (row.kl_stop) {
      result.early_stopped = true;
      break;
    }
  }
  return result;
}

// Per-run metrics as CSV: step, proxy_reward, gold_reward, kl_to_ref, value_loss.
inline std::string ppo_metrics_csv(const PpoResult& result) {
  std::ostringstream os;
  os << "step,proxy_reward,gold_reward,kl_to_ref,value_loss\n";
  for (const auto& r : result.rows)
    os << r.step << ',' << r.proxy_reward << ',' << r.gold_reward << ',' << r.kl_to_ref << ','
       << r.value_loss << '\n';
  return os.str();
}

}  // namespace erlab::rl
