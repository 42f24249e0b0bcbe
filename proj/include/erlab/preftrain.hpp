#pragma once

#include <cmath>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "erlab/data.hpp"
#include "erlab/ensemble.hpp"
#include "erlab/model.hpp"
#include "erlab/optim.hpp"
#include "erlab/threading.hpp"

namespace erlab::preftrain {

using data::PreferencePair;
using ensemble::Architecture;
using ensemble::Ensemble;
using model::Backbone;
using model::LoraSet;
using model::RewardHead;
using model::TransformerConfig;

struct TrainConfig {
  int epochs = 1;
  int batch_size = 8;
  float learning_rate = 1e-3f;  // desk-scale default; the reference-scale 3e-6 stays reachable
  float weight_decay = 0.f;
  float warmup_ratio = 0.03f;
  optim::Schedule schedule = optim::Schedule::Cosine;
  int grad_accum_steps = 2;
  uint64_t seed = 42;
  int eval_interval = 100;  // optimizer steps between held-out evaluations
  int threads = 1;

  void validate() const {
    if (learning_rate <= 0.f) throw std::invalid_argument("train config: learning rate must be > 0");
    if (warmup_ratio < 0.f || warmup_ratio >= 1.f)
      throw std::invalid_argument("train config: warmup ratio must be in [0, 1)");
    if (epochs < 1 || batch_size < 1 || grad_accum_steps < 1 || threads < 1)
      throw std::invalid_argument("train config: epochs, batch size, accumulation and threads must be >= 1");
  }

  bool operator==(const TrainConfig&) const = default;
};

// -log sigmoid(r_w - r_l), computed as softplus(-(r_w - r_l))
inline Tensor bt_loss(ad::Tape* tape, const Tensor& r_w, const Tensor& r_l) {
  return ad::softplus(tape, ad::neg(tape, ad::sub(tape, r_w, r_l)));
}

inline double bt_loss_value(double r_w, double r_l) {
  const double z = r_w - r_l;
  return z > 0.0 ? std::log1p(std::exp(-z)) : -z + std::log1p(std::exp(z));
}

using optim::TrainingDiverged;

struct MetricsRow {
  int step = 0;
  double loss = 0.0;                // mean train loss since the previous row
  std::vector<double> member_acc;   // held-out pairwise accuracy per member
};

struct TrainReport {
  std::vector<MetricsRow> rows;
  std::vector<double> final_accuracy;  // per member

  double mean_final_accuracy() const {
    double s = 0.0;
    for (double a : final_accuracy) s += a;
    return final_accuracy.empty() ? 0.0 : s / double(final_accuracy.size());
  }
};

namespace detail {

inline std::vector<int> full_sequence(const std::vector<int>& prompt,
                                      const std::vector<int>& response) {
  std::vector<int> seq(prompt.begin(), prompt.end());
  seq.insert(seq.end(), response.begin(), response.end());
  return seq;
}

// One trainable reward function: a backbone view, one head, optional adapters.
struct MemberView {
  const Backbone* backbone = nullptr;
  const RewardHead* head = nullptr;
  const LoraSet* adapters = nullptr;

  Tensor forward(ad::Tape* tape, std::span<const int> tokens) const {
    return model::reward_forward(tape, *backbone, *head, tokens, adapters);
  }
};

inline double pairwise_accuracy(const MemberView& member,
                                std::span<const PreferencePair> pairs) {
  if (pairs.empty()) return 0.0;
  int64_t correct = 0;
  for (const auto& p : pairs) {
    const float rw = member.forward(nullptr, full_sequence(p.prompt, p.chosen)).item();
    const float rl = member.forward(nullptr, full_sequence(p.prompt, p.rejected)).item();
    if (rw > rl) ++correct;
  }
  return double(correct) / double(pairs.size());
}

// Joint loop: every member scores every pair; heads receive their own loss
// gradients while `mean_scaled` tensors (the shared backbone) are rescaled to
// the member mean before each step.
inline TrainReport train_joint(std::span<const MemberView> members,
                               std::vector<Tensor> trainable,
                               std::vector<Tensor> mean_scaled,
                               std::span<const PreferencePair> train_pairs,
                               std::span<const PreferencePair> heldout,
                               const TrainConfig& cfg) {
  if (train_pairs.empty()) throw std::invalid_argument("train: empty preference stream");
  const int k = int(members.size());
  const int effective_batch = cfg.batch_size * cfg.grad_accum_steps;
  const int64_t steps_per_epoch =
      (int64_t(train_pairs.size()) + effective_batch - 1) / effective_batch;
  const int total_steps = int(steps_per_epoch * cfg.epochs);
  const int warmup = int(std::lround(cfg.warmup_ratio * double(total_steps)));
  const float member_scale = 1.f / float(k);
  const float pair_scale = 1.f / float(effective_batch);

  optim::AdamW opt(trainable, {.weight_decay = cfg.weight_decay});
  opt.zero_grad();

  TrainReport report;
  std::vector<size_t> order(train_pairs.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;

  auto eval_members = [&] {
    std::vector<double> accs(size_t(k), 0.0);
    for (int i = 0; i < k; ++i) accs[size_t(i)] = pairwise_accuracy(members[size_t(i)], heldout);
    return accs;
  };

  int step = 0;
  double loss_accum = 0.0;
  int64_t loss_count = 0;
  int in_batch = 0;
  bool pending = false;

  auto maybe_step = [&](bool flush) {
    if (in_batch == 0 || (!flush && in_batch < effective_batch)) return;
    const float lr = optim::lr_at(cfg.learning_rate, cfg.schedule, step, total_steps, warmup);
    for (auto& t : mean_scaled)
      if (t.has_grad())
        for (float& g : t.grad()) g *= member_scale;
    opt.step(lr);
    opt.zero_grad();
    ++step;
    in_batch = 0;
    pending = false;
    if (!heldout.empty() && (step % cfg.eval_interval == 0 || step == total_steps)) {
      MetricsRow row;
      row.step = step;
      row.loss = loss_count > 0 ? loss_accum / double(loss_count) : 0.0;
      row.member_acc = eval_members();
      report.rows.push_back(std::move(row));
      loss_accum = 0.0;
      loss_count = 0;
    }
  };

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng shuffle_rng = substream(cfg.seed, {streams::shuffle, uint64_t(epoch)});
    shuffle_rng.shuffle(order);
    for (size_t idx : order) {
      const auto& p = train_pairs[idx];
      const auto win = full_sequence(p.prompt, p.chosen);
      const auto lose = full_sequence(p.prompt, p.rejected);
      ad::Tape tape;
      Tensor total;
      double pair_loss = 0.0;
      for (int i = 0; i < k; ++i) {
        Tensor rw = members[size_t(i)].forward(&tape, win);
        Tensor rl = members[size_t(i)].forward(&tape, lose);
        Tensor loss = bt_loss(&tape, rw, rl);
        pair_loss += double(loss.item());
        total = total.defined() ? ad::add(&tape, total, loss) : loss;
      }
      pair_loss /= double(k);
      if (!std::isfinite(pair_loss)) {
        const float lr = optim::lr_at(cfg.learning_rate, cfg.schedule, step, total_steps, warmup);
        throw TrainingDiverged(step, lr, opt.grad_norm());
      }
      loss_accum += pair_loss;
      ++loss_count;
      tape.backward(ad::scale(&tape, total, pair_scale));
      ++in_batch;
      pending = true;
      maybe_step(false);
    }
  }
  maybe_step(pending);

  report.final_accuracy = heldout.empty() ? std::vector<double>(size_t(k), 0.0) : eval_members();
  if (report.rows.empty() && !heldout.empty()) {
    MetricsRow row;
    row.step = step;
    row.loss = loss_count > 0 ? loss_accum / double(loss_count) : 0.0;
    row.member_acc = report.final_accuracy;
    report.rows.push_back(std::move(row));
  }
  return report;
}

inline TrainReport merge_member_reports(std::vector<TrainReport> member_reports) {
  TrainReport merged;
  if (member_reports.empty()) return merged;
  const size_t rows = member_reports[0].rows.size();
  for (size_t r = 0; r < rows; ++r) {
    MetricsRow row;
    row.step = member_reports[0].rows[r].step;
    double loss = 0.0;
    for (auto& mr : member_reports) {
      loss += mr.rows[r].loss;
      row.member_acc.push_back(mr.rows[r].member_acc.at(0));
    }
    row.loss = loss / double(member_reports.size());
    merged.rows.push_back(std::move(row));
  }
  for (auto& mr : member_reports) merged.final_accuracy.push_back(mr.final_accuracy.at(0));
  return merged;
}

}  // namespace detail

// Single reward model on the Bradley-Terry objective.
inline TrainReport train_reward_model(model::RewardModel& rm,
                                      std::span<const PreferencePair> train_pairs,
                                      std::span<const PreferencePair> heldout,
                                      const TrainConfig& cfg) {
  detail::MemberView view{&rm.backbone, &rm.head, nullptr};
  std::vector<Tensor> trainable;
  rm.visit([&](const std::string&, Tensor& t) { trainable.push_back(t); });
  return detail::train_joint({&view, 1}, std::move(trainable), {}, train_pairs, heldout, cfg);
}

// LoRA phase 2: adapters and heads only; the shared backbone must already be
// frozen. Members see the same pairs under member-specific shuffles.
inline TrainReport train_lora_members(Ensemble& e, std::span<const PreferencePair> phase2,
                                      std::span<const PreferencePair> heldout,
                                      const TrainConfig& cfg) {
  if (e.spec.architecture != Architecture::LoraEnsemble)
    throw std::invalid_argument("train_lora_members: ensemble is not lora-based");
  if (model::trainable_param_count(*e.shared_backbone) != 0)
    throw std::invalid_argument("train_lora_members: the shared backbone must be frozen");
  std::vector<TrainReport> member_reports(size_t(e.k()));
  run_parallel(cfg.threads, e.k(), [&](int i) {
    detail::MemberView view{&*e.shared_backbone, &e.heads[size_t(i)],
                            &e.member_adapters[size_t(i)]};
    std::vector<Tensor> trainable;
    e.heads[size_t(i)].visit([&](const std::string&, Tensor& t) { trainable.push_back(t); });
    e.member_adapters[size_t(i)].visit(
        [&](const std::string&, Tensor& t) { trainable.push_back(t); });
    TrainConfig member_cfg = cfg;
    member_cfg.seed = cfg.seed ^ uint64_t(i);
    member_cfg.threads = 1;
    member_reports[size_t(i)] =
        detail::train_joint({&view, 1}, std::move(trainable), {}, phase2, heldout, member_cfg);
  });
  return detail::merge_member_reports(std::move(member_reports));
}

// Dispatch on the ensemble architecture. Independent members train separately
// under seed ^ i; the linear-layer ensemble trains jointly with the backbone
// receiving the mean of the member losses; lora delegates to phase 2.
inline TrainReport train_reward_model(Ensemble& e, std::span<const PreferencePair> train_pairs,
                                      std::span<const PreferencePair> heldout,
                                      const TrainConfig& cfg) {
  switch (e.spec.architecture) {
    case Architecture::IndependentModels: {
      std::vector<TrainReport> member_reports(size_t(e.k()));
      run_parallel(cfg.threads, e.k(), [&](int i) {
        detail::MemberView view{&e.member_backbones[size_t(i)], &e.heads[size_t(i)], nullptr};
        std::vector<Tensor> trainable;
        e.member_backbones[size_t(i)].visit(
            [&](const std::string&, Tensor& t) { trainable.push_back(t); });
        e.heads[size_t(i)].visit([&](const std::string&, Tensor& t) { trainable.push_back(t); });
        TrainConfig member_cfg = cfg;
        member_cfg.seed = cfg.seed ^ uint64_t(i);
        member_cfg.threads = 1;
        member_reports[size_t(i)] = detail::train_joint({&view, 1}, std::move(trainable), {},
                                                        train_pairs, heldout, member_cfg);
      });
      return detail::merge_member_reports(std::move(member_reports));
    }
    case Architecture::LinearLayerEnsemble: {
      std::vector<detail::MemberView> views;
      for (int i = 0; i < e.k(); ++i)
        views.push_back({&*e.shared_backbone, &e.heads[size_t(i)], nullptr});
      std::vector<Tensor> trainable;
      std::vector<Tensor> backbone_tensors;
      e.shared_backbone->visit([&](const std::string&, Tensor& t) {
        trainable.push_back(t);
        backbone_tensors.push_back(t);
      });
      for (auto& h : e.heads)
        h.visit([&](const std::string&, Tensor& t) { trainable.push_back(t); });
      return detail::train_joint(views, std::move(trainable), std::move(backbone_tensors),
                                 train_pairs, heldout, cfg);
    }
    case Architecture::LoraEnsemble:
      return train_lora_members(e, train_pairs, heldout, cfg);
  }
  throw std::logic_error("train_reward_model: unknown architecture");
}

// LoRA phase 1: full backbone with k heads on the phase-1 subset, trained as
// a linear-layer ensemble. The result feeds build_lora_ensemble.
inline std::pair<Backbone, std::vector<RewardHead>> pretrain_backbone(
    const TransformerConfig& model_cfg, std::span<const PreferencePair> phase1, int k,
    const TrainConfig& cfg, std::span<const PreferencePair> heldout = {}) {
  if (phase1.empty()) throw std::invalid_argument("pretrain_backbone: empty phase-1 subset");
  if (k < 1) throw std::invalid_argument("pretrain_backbone: k must be >= 1");
  ensemble::EnsembleSpec spec;
  spec.architecture = Architecture::LinearLayerEnsemble;
  spec.k = k;
  Ensemble stage = ensemble::build_ensemble(spec, model_cfg, cfg.seed);
  train_reward_model(stage, phase1, heldout, cfg);
  return {std::move(*stage.shared_backbone), std::move(stage.heads)};
}

// Full two-phase LoRA pipeline; rejects overlapping phase splits.
inline Ensemble train_lora_ensemble(const TransformerConfig& model_cfg,
                                    const ensemble::EnsembleSpec& spec,
                                    std::span<const PreferencePair> phase1,
                                    std::span<const PreferencePair> phase2,
                                    std::span<const PreferencePair> heldout,
                                    const TrainConfig& phase1_cfg, const TrainConfig& phase2_cfg,
                                    TrainReport* phase2_report = nullptr) {
  if (!data::disjoint(phase1, phase2))
    throw std::invalid_argument("lora pipeline: phase-1 and phase-2 splits overlap");
  auto [backbone, heads] = pretrain_backbone(model_cfg, phase1, spec.k, phase1_cfg, heldout);
  Ensemble e = ensemble::build_lora_ensemble(spec, std::move(backbone), std::move(heads),
                                             phase2_cfg.seed);
  TrainReport report = train_lora_members(e, phase2, heldout, phase2_cfg);
  if (phase2_report != nullptr) *phase2_report = std::move(report);
  return e;
}

// Metrics rows as CSV: step, loss, then one accuracy column per member.
inline std::string metrics_csv(const TrainReport& report) {
  std::ostringstream os;
  const size_t k = report.final_accuracy.size();
  os << "step,loss";
  for (size_t i = 0; i < k; ++i) os << ",acc_member_" << i;
  os << '\n';
  for (const auto& row : report.rows) {
    os << row.step << ',' << row.loss;
    for (double a : row.member_acc) os << ',' << a;
    os << '\n';
  }
  return os.str();
}

}  // namespace erlab::preftrain
