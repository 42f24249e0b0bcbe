#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>

#include "erlab/checkpoint.hpp"
#include "erlab/model.hpp"
#include "erlab/optim.hpp"

using namespace erlab;
using namespace erlab::model;

namespace {

TransformerConfig tiny_config() {
  TransformerConfig cfg;
  cfg.vocab_size = 16;
  cfg.d_model = 16;
  cfg.n_layers = 2;
  cfg.n_heads = 2;
  cfg.max_seq_len = 16;
  cfg.ffn_mult = 2;
  return cfg;
}

std::vector<int> random_tokens(int len, int vocab, Rng& rng) {
  std::vector<int> t(size_t(len), 0);
  for (int& v : t) v = rng.uniform_int(vocab);
  return t;
}

// independent shape-summation: the closed-form parameter counts
int64_t backbone_formula(const TransformerConfig& c) {
  const int64_t d = c.d_model;
  const int64_t per_layer = 4 * d * d + 2 * d * (d * c.ffn_mult) + 4 * d;
  return c.vocab_size * d + c.max_seq_len * d + c.n_layers * per_layer + 2 * d;
}

std::vector<float> snapshot(const Backbone& bb) {
  std::vector<float> out;
  bb.visit([&](const std::string&, Tensor& t) { out.insert(out.end(), t.data().begin(), t.data().end()); });
  return out;
}

}  // namespace

TEST_CASE("reward forward basics") {
  const auto cfg = tiny_config();
  Backbone bb = Backbone::init(cfg, 42);
  RewardHead head = RewardHead::init(cfg.d_model, 42);
  Rng rng(5);
  const auto tokens = random_tokens(10, cfg.vocab_size, rng);

  SECTION("deterministic across repeated calls") {
    const float a = reward_forward(nullptr, bb, head, tokens).item();
    const float b = reward_forward(nullptr, bb, head, tokens).item();
    CHECK(a == b);
  }

  SECTION("finite output on random inputs") {
    for (int trial = 0; trial < 20; ++trial) {
      const auto t = random_tokens(1 + rng.uniform_int(cfg.max_seq_len), cfg.vocab_size, rng);
      CHECK(std::isfinite(reward_forward(nullptr, bb, head, t).item()));
    }
  }

  SECTION("over-length and empty sequences rejected") {
    const auto long_seq = random_tokens(cfg.max_seq_len + 1, cfg.vocab_size, rng);
    CHECK_THROWS_AS(reward_forward(nullptr, bb, head, long_seq), std::invalid_argument);
    CHECK_THROWS_AS(reward_forward(nullptr, bb, head, std::vector<int>{}), std::invalid_argument);
  }

  SECTION("gradients through the whole model match finite differences") {
    ad::Tape probe;
    Tensor r = reward_forward(&probe, bb, head, tokens);
    CHECK(r.requires_grad());
    // Finite-difference the 8 best-conditioned coordinates of each parameter;
    // a wiring bug would corrupt those along with everything else, while the
    // near-zero coordinates only measure f32 noise.
    auto check_param = [&](Tensor param) {
      param.zero_grad();
      ad::Tape tape;
      tape.backward(reward_forward(&tape, bb, head, tokens));
      std::vector<std::pair<float, size_t>> mag;
      for (size_t i = 0; i < param.grad().size(); ++i)
        mag.emplace_back(-std::abs(param.grad()[i]), i);
      std::sort(mag.begin(), mag.end());
      const float h = 3e-2f;
      double worst = 0.0;
      for (size_t pick = 0; pick < std::min<size_t>(8, mag.size()); ++pick) {
        const size_t i = mag[pick].second;
        const float analytic = param.grad()[i];
        const float saved = param.data()[i];
        const float xp = saved + h, xm = saved - h;
        param.data()[i] = xp;
        const double fp = reward_forward(nullptr, bb, head, tokens).item();
        param.data()[i] = xm;
        const double fm = reward_forward(nullptr, bb, head, tokens).item();
        param.data()[i] = saved;
        const double numeric = (fp - fm) / (double(xp) - double(xm));
        worst = std::max(worst, std::abs(double(analytic) - numeric) /
                                    (std::abs(double(analytic)) + std::abs(numeric) + 1e-8));
      }
      return worst;
    };
    CHECK(check_param(bb.tok_emb) < 1e-2);
    CHECK(check_param(bb.pos_emb) < 1e-2);
    CHECK(check_param(bb.layers[0].wq) < 1e-2);
    CHECK(check_param(bb.layers[0].wv) < 1e-2);
    CHECK(check_param(bb.layers[1].w1) < 1e-2);
    CHECK(check_param(bb.layers[1].w2) < 1e-2);
    CHECK(check_param(bb.layers[1].ln1_g) < 1e-2);
    CHECK(check_param(bb.lnf_g) < 1e-2);
    CHECK(check_param(head.weight) < 1e-2);
  }
}

TEST_CASE("policy forward basics") {
  const auto cfg = tiny_config();
  Backbone bb = Backbone::init(cfg, 7);
  Rng rng(9);
  const auto tokens = random_tokens(8, cfg.vocab_size, rng);

  SECTION("rows are normalized log-probabilities") {
    Tensor lp = policy_forward(nullptr, bb, tokens);
    REQUIRE(lp.shape() == Shape{8, cfg.vocab_size});
    for (int i = 0; i < 8; ++i) {
      double sum = 0.0;
      for (int j = 0; j < cfg.vocab_size; ++j)
        sum += std::exp(double(lp.data()[size_t(i) * cfg.vocab_size + size_t(j)]));
      CHECK(sum == Catch::Approx(1.0).margin(1e-4));
    }
  }

  SECTION("causal masking: future tokens cannot affect earlier logits") {
    auto mutated = tokens;
    mutated[6] = (mutated[6] + 3) % cfg.vocab_size;
    Tensor a = policy_forward(nullptr, bb, tokens);
    Tensor b = policy_forward(nullptr, bb, mutated);
    for (int i = 0; i < 6; ++i)
      for (int j = 0; j < cfg.vocab_size; ++j) {
        const size_t idx = size_t(i) * cfg.vocab_size + size_t(j);
        CHECK(a.data()[idx] == b.data()[idx]);
      }
  }
}

TEST_CASE("parameter counting") {
  const auto cfg = tiny_config();

  SECTION("reward head is d_model weights plus one bias") {
    TransformerConfig c64 = cfg;
    c64.d_model = 64;
    c64.n_heads = 4;
    RewardHead head = RewardHead::init(64, 1);
    CHECK(param_count(head) == 65);
  }

  SECTION("lora adapter on one matrix counts r * (d1 + d2)") {
    TransformerConfig c;
    c.d_model = 64;
    c.n_layers = 1;
    LoraSet set = LoraSet::init(c, 4, 8.f, 1);
    // 4 attention projections per layer
    CHECK(param_count(set) == 4 * 4 * (64 + 64));
    int64_t one = set.adapters[0].a1.numel() + set.adapters[0].a2.numel();
    CHECK(one == 4 * (64 + 64));
  }

  SECTION("backbone count equals the shape-summation formula") {
    Backbone bb = Backbone::init(cfg, 3);
    CHECK(param_count(bb) == backbone_formula(cfg));
    TransformerConfig desk;  // the library defaults
    Backbone desk_bb = Backbone::init(desk, 3);
    CHECK(param_count(desk_bb) == backbone_formula(desk));
  }

  SECTION("counting is additive across parts") {
    RewardModel rm = RewardModel::init(cfg, 11);
    CHECK(param_count(rm) == param_count(rm.backbone) + param_count(rm.head));
  }
}

TEST_CASE("set_trainable freezes parts") {
  const auto cfg = tiny_config();
  RewardModel rm = RewardModel::init(cfg, 13);
  set_trainable(rm.backbone, false);
  CHECK(trainable_param_count(rm.backbone) == 0);
  CHECK(trainable_param_count(rm) == param_count(rm.head));
  set_trainable(rm.backbone, true);
  CHECK(trainable_param_count(rm) == param_count(rm));
}

TEST_CASE("lora adapters") {
  const auto cfg = tiny_config();
  Backbone bb = Backbone::init(cfg, 21);
  RewardHead head = RewardHead::init(cfg.d_model, 21);
  Rng rng(33);

  SECTION("rank must stay below the model width") {
    CHECK_THROWS_AS(LoraSet::init(cfg, cfg.d_model, 8.f, 1), std::invalid_argument);
  }

  SECTION("zero-initialized a2 leaves the forward bitwise unchanged") {
    LoraSet set = LoraSet::init(cfg, 2, 4.f, 77);
    for (int trial = 0; trial < 10; ++trial) {
      const auto tokens = random_tokens(1 + rng.uniform_int(cfg.max_seq_len), cfg.vocab_size, rng);
      const float with = reward_forward(nullptr, bb, head, tokens, &set).item();
      const float without = reward_forward(nullptr, bb, head, tokens).item();
      CHECK(with == without);
    }
  }

  SECTION("merged weights match the adapter forward within 1e-5") {
    LoraSet set = LoraSet::init(cfg, 2, 4.f, 78);
    for (auto& a : set.adapters)
      for (float& v : a.a2.data()) v = rng.normal_float(0.f, 0.1f);
    Backbone merged = bb.clone();
    for (size_t li = 0; li < merged.layers.size(); ++li) {
      auto& l = merged.layers[li];
      const std::string p = "layers." + std::to_string(li) + ".";
      for (auto [name, w] : {std::pair{"wq", &l.wq}, {"wk", &l.wk}, {"wv", &l.wv}, {"wo", &l.wo}}) {
        const LoraAdapter* a = set.find(p + name);
        REQUIRE(a != nullptr);
        Tensor delta = ad::matmul(nullptr, a->a1, a->a2);
        const float s = a->alpha / float(a->rank);
        for (int64_t i = 0; i < w->numel(); ++i) w->data()[size_t(i)] += s * delta.data()[size_t(i)];
      }
    }
    for (int trial = 0; trial < 10; ++trial) {
      const auto tokens = random_tokens(1 + rng.uniform_int(cfg.max_seq_len), cfg.vocab_size, rng);
      const float adapter = reward_forward(nullptr, bb, head, tokens, &set).item();
      const float direct = reward_forward(nullptr, merged, head, tokens, nullptr).item();
      CHECK(adapter == Catch::Approx(direct).margin(1e-5));
    }
  }

  SECTION("adapter shape mismatch rejected") {
    TransformerConfig other = cfg;
    other.d_model = 8;
    other.n_heads = 2;
    LoraSet wrong = LoraSet::init(other, 2, 4.f, 5);
    const auto tokens = random_tokens(4, cfg.vocab_size, rng);
    CHECK_THROWS_AS(reward_forward(nullptr, bb, head, tokens, &wrong), std::invalid_argument);
  }

  SECTION("frozen backbone stays bitwise identical through adapter training") {
    set_trainable(bb, false);
    LoraSet set = LoraSet::init(cfg, 2, 4.f, 79);
    const auto before = snapshot(bb);
    std::vector<Tensor> trainable;
    set.visit([&](const std::string&, Tensor& t) { trainable.push_back(t); });
    head.visit([&](const std::string&, Tensor& t) { trainable.push_back(t); });
    optim::AdamW opt(trainable);
    for (int step = 0; step < 20; ++step) {
      const auto tokens = random_tokens(6, cfg.vocab_size, rng);
      ad::Tape tape;
      Tensor r = reward_forward(&tape, bb, head, tokens, &set);
      tape.backward(ad::mul(&tape, r, r));
      opt.step(1e-2f);
      opt.zero_grad();
    }
    const auto after = snapshot(bb);
    REQUIRE(before.size() == after.size());
    bool identical = true;
    for (size_t i = 0; i < before.size(); ++i) identical = identical && before[i] == after[i];
    CHECK(identical);
    // and the adapters did move
    float moved = 0.f;
    for (const auto& a : set.adapters)
      for (float v : a.a2.data()) moved += std::abs(v);
    CHECK(moved > 0.f);
  }
}

TEST_CASE("checkpoint round trip is bit exact") {
  const auto cfg = tiny_config();
  RewardModel rm = RewardModel::init(cfg, 55);
  const auto path = std::filesystem::temp_directory_path() / "erlab_test_model.bin";
  checkpoint::save_tensors(path.string(), named_tensors(rm));

  RewardModel loaded = RewardModel::init(cfg, 99);
  checkpoint::restore_into(checkpoint::load_tensors(path.string()), named_tensors(loaded),
                           "test");
  const auto a = named_tensors(rm);
  const auto b = named_tensors(loaded);
  REQUIRE(a.size() == b.size());
  bool identical = true;
  for (size_t i = 0; i < a.size(); ++i) {
    REQUIRE(a[i].first == b[i].first);
    for (int64_t j = 0; j < a[i].second.numel(); ++j)
      identical = identical && a[i].second.data()[size_t(j)] == b[i].second.data()[size_t(j)];
  }
  CHECK(identical);

  SECTION("missing file and bad magic are rejected with the path named") {
    try {
      checkpoint::load_tensors("/nonexistent/erlab.bin");
      FAIL("expected load to throw");
    } catch (const std::runtime_error& e) {
      CHECK(std::string(e.what()).find("/nonexistent/erlab.bin") != std::string::npos);
    }
  }
  std::filesystem::remove(path);
}
