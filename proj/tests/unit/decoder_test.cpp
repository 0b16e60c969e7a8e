// Tests for the adapted decoder: tokenizer round-trips, low-rank adapter
// algebra against a direct W + (alpha/r)*B*A oracle, a straight-line
// single-head attention oracle, causality, capacity limits, and greedy
// decoding rules.

#include <gtest/gtest.h>

#include <cmath>
#include <string>
#include <vector>

#include "fuselm/common.hpp"
#include "fuselm/decoder.hpp"

namespace fuselm {
namespace {

TEST(Tokenizer, RoundTripsArbitraryByteStrings) {
  std::string all;
  for (int c = 0; c < 256; ++c) all.push_back(static_cast<char>(c));
  EXPECT_EQ(ByteTokenizer::decode(ByteTokenizer::encode(all)), all);

  Rng rng(17);
  for (int trial = 0; trial < 50; ++trial) {
    std::string s;
    int64_t len = rng.uniform_int(0, 64);
    for (int64_t i = 0; i < len; ++i) s.push_back(static_cast<char>(rng.uniform_int(0, 256)));
    EXPECT_EQ(ByteTokenizer::decode(ByteTokenizer::encode(s)), s);
  }
}

TEST(Tokenizer, SpecialTokensNeverCollideWithBytes) {
  for (int id : {ByteTokenizer::kPad, ByteTokenizer::kBos, ByteTokenizer::kEos, ByteTokenizer::kAudioBegin,
                 ByteTokenizer::kAudioEnd, ByteTokenizer::kInstBegin, ByteTokenizer::kInstEnd}) {
    EXPECT_GE(id, 256);
    EXPECT_LT(id, ByteTokenizer::kVocabSize);
    EXPECT_TRUE(ByteTokenizer::is_special(id));
  }
  EXPECT_FALSE(ByteTokenizer::is_special(255));
  // Specials vanish on decode.
  EXPECT_EQ(ByteTokenizer::decode({ByteTokenizer::kBos, 'h', 'i', ByteTokenizer::kEos}), "hi");
}

TEST(Lora, FreshAdapterIsBitExactNoOp) {
  Rng rng(1);
  Tensor w = Tensor::randn({6, 4}, rng, 0.5);
  LoraAdapter adapter = LoraAdapter::init(4, 6, 2, 16.0, rng);
  Tensor x = Tensor::randn({3, 4}, rng);
  GradTape tape(false);
  Tensor with = lora_linear(tape, x, w, adapter);
  Tensor without = matmul_nt(tape, x, w);
  EXPECT_EQ(with.data(), without.data());
}

TEST(Lora, ZeroAlphaKillsTheDelta) {
  Rng rng(2);
  Tensor w = Tensor::randn({6, 4}, rng, 0.5);
  LoraAdapter adapter = LoraAdapter::init(4, 6, 2, 0.0, rng);
  for (double& v : adapter.b.data()) v = rng.normal();  // nonzero B
  Tensor x = Tensor::randn({3, 4}, rng);
  GradTape tape(false);
  Tensor with = lora_linear(tape, x, w, adapter);
  Tensor without = matmul_nt(tape, x, w);
  for (int64_t i = 0; i < with.numel(); ++i) EXPECT_EQ(with.at(i), without.at(i));
}

TEST(Lora, MatchesEffectiveWeightOracle) {
  for (uint64_t seed = 0; seed < 5; ++seed) {
    Rng rng(seed);
    int64_t d_in = 5, d_out = 7, r = 3;
    Tensor w = Tensor::randn({d_out, d_in}, rng, 0.4);
    LoraAdapter adapter = LoraAdapter::init(d_in, d_out, r, 16.0, rng);
    for (double& v : adapter.b.data()) v = rng.normal() * 0.3;
    Tensor x = Tensor::randn({4, d_in}, rng);
    GradTape tape(false);
    Tensor got = lora_linear(tape, x, w, adapter);
    // Direct evaluation of x * (W + (alpha/r) B A)^T in extended precision.
    for (int64_t i = 0; i < 4; ++i)
      for (int64_t o = 0; o < d_out; ++o) {
        long double acc = 0.0L;
        for (int64_t j = 0; j < d_in; ++j) {
          long double ba = 0.0L;
          for (int64_t k = 0; k < r; ++k) ba += static_cast<long double>(adapter.b.at(o, k)) * adapter.a.at(k, j);
          long double w_eff = static_cast<long double>(w.at(o, j)) + (16.0L / r) * ba;
          acc += static_cast<long double>(x.at(i, j)) * w_eff;
        }
        ASSERT_LE(std::abs(got.at(i, o) - static_cast<double>(acc)), 1e-12) << "seed " << seed;
      }
  }
}

TEST(Lora, GradientsReachOnlyTheAdapterFactors) {
  Rng rng(3);
  Tensor w = Tensor::randn({4, 3}, rng, 0.5);
  LoraAdapter adapter = LoraAdapter::init(3, 4, 2, 16.0, rng);
  for (double& v : adapter.b.data()) v = rng.normal() * 0.1;
  adapter.a.set_requires_grad(true);
  adapter.b.set_requires_grad(true);
  Tensor x = Tensor::randn({2, 3}, rng);
  GradTape tape;
  Tensor loss = sum(tape, lora_linear(tape, x, w, adapter));
  tape.backward(loss);
  EXPECT_FALSE(w.has_grad());
  bool a_nonzero = false, b_nonzero = false;
  for (double g : adapter.a.grad()) a_nonzero = a_nonzero || g != 0.0;
  for (double g : adapter.b.grad()) b_nonzero = b_nonzero || g != 0.0;
  EXPECT_TRUE(a_nonzero);
  EXPECT_TRUE(b_nonzero);
}

TEST(Lora, TrainableFrozenWeightIsContractError) {
  Rng rng(4);
  Tensor w = Tensor::randn({4, 3}, rng);
  w.set_requires_grad(true);
  LoraAdapter adapter = LoraAdapter::init(3, 4, 2, 16.0, rng);
  GradTape tape;
  try {
    lora_linear(tape, Tensor::zeros({2, 3}), w, adapter);
    FAIL() << "expected a contract error";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::contract);
  }
}

TEST(Lora, ParameterCountIsRankTimesWidthSum) {
  Rng rng(5);
  LoraAdapter adapter = LoraAdapter::init(10, 6, 4, 16.0, rng);
  EXPECT_EQ(adapter.parameter_count(), 4 * (10 + 6));
}

DecoderConfig desk_config(int64_t layers = 1, int64_t heads = 1) {
  return DecoderConfig{.vocab_size = 11,
                       .gamma = 4,
                       .n_layers = layers,
                       .n_heads = heads,
                       .max_seq = 16,
                       .lora_rank = 2,
                       .lora_alpha = 16.0,
                       .head_init_std = 0.02};
}

TEST(Decoder, LogitsShapeIsSequenceByVocab) {
  DecoderConfig cfg = desk_config(2, 2);
  Rng rng(6);
  DecoderParams p = DecoderParams::init(cfg, rng, 0.2);
  GradTape tape(false);
  Rng drng(7);
  Tensor logits = decode_step(tape, Tensor::randn({5, 4}, drng), cfg, p);
  EXPECT_EQ(logits.shape(), (Shape{5, 11}));
}

TEST(Decoder, SequenceBeyondMaxSeqIsCapacityError) {
  DecoderConfig cfg = desk_config();
  Rng rng(8);
  DecoderParams p = DecoderParams::init(cfg, rng);
  GradTape tape(false);
  try {
    decode_step(tape, Tensor::zeros({17, 4}), cfg, p);
    FAIL() << "expected a capacity error";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::capacity);
  }
}

TEST(Decoder, PerturbingPositionNeverChangesEarlierLogits) {
  for (int64_t layers : {int64_t{1}, int64_t{3}}) {
    DecoderConfig cfg = desk_config(layers, 2);
    Rng rng(9);
    DecoderParams p = DecoderParams::init(cfg, rng, 0.2);
    Rng drng(10);
    Tensor x = Tensor::randn({6, 4}, drng);
    GradTape tape(false);
    Tensor base = decode_step(tape, x, cfg, p);
    for (int64_t poke = 0; poke < 6; ++poke) {
      Tensor moved = Tensor::from(x.shape(), x.data());
      for (int64_t c = 0; c < 4; ++c) moved.at(poke, c) += 1.0;
      Tensor out = decode_step(tape, moved, cfg, p);
      for (int64_t t = 0; t < poke; ++t)
        for (int64_t v = 0; v < 11; ++v)
          ASSERT_EQ(out.at(t, v), base.at(t, v)) << "layers " << layers << " poke " << poke << " row " << t;
      bool last_changed = false;
      for (int64_t v = 0; v < 11; ++v) last_changed = last_changed || out.at(poke, v) != base.at(poke, v);
      ASSERT_TRUE(last_changed) << "poke " << poke;
    }
  }
}

// Straight-line single-head causal attention evaluated in long double,
// written from the formula q k^T / sqrt(d) -> masked softmax -> weights v
// -> output projection.
std::vector<long double> attention_oracle(const Tensor& x, const Tensor& wq, const Tensor& bq,
                                          const Tensor& wk, const Tensor& bk, const Tensor& wv,
                                          const Tensor& bv, const Tensor& wo, const Tensor& bo) {
  int64_t t_len = x.rows(), d = x.cols();
  auto project = [&](const Tensor& w, const Tensor& b) {
    std::vector<long double> out(static_cast<size_t>(t_len * d));
    for (int64_t i = 0; i < t_len; ++i)
      for (int64_t o = 0; o < d; ++o) {
        long double acc = b.at(o);
        for (int64_t j = 0; j < d; ++j) acc += static_cast<long double>(x.at(i, j)) * w.at(o, j);
        out[i * d + o] = acc;
      }
    return out;
  };
  auto q = project(wq, bq), k = project(wk, bk), v = project(wv, bv);
  std::vector<long double> ctx(static_cast<size_t>(t_len * d), 0.0L);
  for (int64_t i = 0; i < t_len; ++i) {
    std::vector<long double> scores(static_cast<size_t>(i + 1));
    long double mx = -1e30L;
    for (int64_t j = 0; j <= i; ++j) {
      long double s = 0.0L;
      for (int64_t c = 0; c < d; ++c) s += q[i * d + c] * k[j * d + c];
      scores[j] = s / sqrtl(static_cast<long double>(d));
      mx = std::max(mx, scores[j]);
    }
    long double denom = 0.0L;
    for (int64_t j = 0; j <= i; ++j) denom += expl(scores[j] - mx);
    for (int64_t j = 0; j <= i; ++j) {
      long double w = expl(scores[j] - mx) / denom;
      for (int64_t c = 0; c < d; ++c) ctx[i * d + c] += w * v[j * d + c];
    }
  }
  std::vector<long double> out(static_cast<size_t>(t_len * d));
  for (int64_t i = 0; i < t_len; ++i)
    for (int64_t o = 0; o < d; ++o) {
      long double acc = bo.at(o);
      for (int64_t j = 0; j < d; ++j) acc += ctx[i * d + j] * wo.at(o, j);
      out[i * d + o] = acc;
    }
  return out;
}

TEST(Decoder, SingleHeadAttentionMatchesStraightLineOracle) {
  for (uint64_t seed = 0; seed < 5; ++seed) {
    Rng rng(40 + seed);
    int64_t t_len = 5, d = 4;
    Tensor x = Tensor::randn({t_len, d}, rng);
    Tensor wq = Tensor::randn({d, d}, rng, 0.4), bq = Tensor::randn({d}, rng, 0.1);
    Tensor wk = Tensor::randn({d, d}, rng, 0.4), bk = Tensor::randn({d}, rng, 0.1);
    Tensor wv = Tensor::randn({d, d}, rng, 0.4), bv = Tensor::randn({d}, rng, 0.1);
    Tensor wo = Tensor::randn({d, d}, rng, 0.4), bo = Tensor::randn({d}, rng, 0.1);
    GradTape tape(false);
    Tensor got = multi_head_self_attention(tape, x, wq, bq, wk, bk, wv, bv, wo, bo, 1, /*causal=*/true);
    std::vector<long double> want = attention_oracle(x, wq, bq, wk, bk, wv, bv, wo, bo);
    for (int64_t i = 0; i < got.numel(); ++i)
      ASSERT_LE(std::abs(got.at(i) - static_cast<double>(want[static_cast<size_t>(i)])), 1e-10)
          << "seed " << seed;
  }
}

TEST(Decoder, LoraFactorsPassGradCheckThroughFullStack) {
  DecoderConfig cfg = desk_config(1, 2);
  Rng rng(50);
  DecoderParams p = DecoderParams::init(cfg, rng, 0.2);
  // Give B nonzero values so its gradient path multiplies a live A.
  for (double& v : p.blocks[0].fc1_lora.b.data()) v = rng.normal() * 0.1;
  for (double& v : p.blocks[0].fc2_lora.b.data()) v = rng.normal() * 0.1;
  Rng drng(51);
  Tensor x = Tensor::randn({4, 4}, drng);
  std::vector<int> targets = {1, 4, 0, 2};
  for (auto& [name, param] : p.lora_parameters()) {
    double err = grad_check(
        [&](GradTape& t, const Tensor& v) {
          *param = v;
          return softmax_cross_entropy(t, decode_step(t, x, cfg, p), targets, Reduction::token_mean);
        },
        *param);
    EXPECT_LT(err, 1e-4) << name;
  }
}

TEST(Greedy, MaxNewOneAppendsExactlyOneToken) {
  DecoderConfig cfg = desk_config(1, 1);
  Rng rng(60);
  DecoderParams p = DecoderParams::init(cfg, rng, 0.2);
  Rng drng(61);
  std::vector<int> out = generate_greedy(Tensor::randn({3, 4}, drng), cfg, p, 1, /*eos_id=*/10);
  EXPECT_EQ(out.size(), 1u);
}

TEST(Greedy, AllZeroParametersTieBreakToLowestId) {
  DecoderConfig cfg = desk_config(1, 1);
  Rng rng(62);
  DecoderParams p = DecoderParams::init(cfg, rng, 0.2);
  p.head_w = Tensor::zeros(p.head_w.shape());  // every logit row identical
  Rng drng(63);
  std::vector<int> out = generate_greedy(Tensor::randn({2, 4}, drng), cfg, p, 4, /*eos_id=*/10);
  ASSERT_EQ(out.size(), 4u);
  for (int id : out) EXPECT_EQ(id, 0);
}

TEST(Greedy, StopsAtEos) {
  DecoderConfig cfg = desk_config(1, 1);
  Rng rng(64);
  DecoderParams p = DecoderParams::init(cfg, rng, 0.2);
  // Rig the head so the eos row dominates every other logit regardless of
  // the (unit-norm) final hidden state.
  int eos_id = 7;
  p.head_w = Tensor::zeros(p.head_w.shape());
  GradTape tape(false);
  Rng drng(65);
  Tensor prefix = Tensor::randn({2, 4}, drng);
  // Reconstruct the final hidden state and point the eos row at it: its
  // logit becomes |h|^2 > 0 while every other logit stays 0.
  Tensor x = add(tape, prefix, slice_rows(tape, p.pos_emb, 0, 2));
  for (auto& block : p.blocks) x = decoder_block(tape, x, block, cfg.n_heads);
  x = layer_norm(tape, x, p.ln_f_g, p.ln_f_b);
  for (int64_t c = 0; c < 4; ++c) p.head_w.at(eos_id, c) = x.at(1, c);
  std::vector<int> out = generate_greedy(prefix, cfg, p, 5, eos_id);
  ASSERT_EQ(out.size(), 1u);
  EXPECT_EQ(out[0], eos_id);
}

TEST(Decoder, FrozenBaseTensorsUntouchedByForwardBackward) {
  DecoderConfig cfg = desk_config(2, 2);
  Rng rng(70);
  DecoderParams p = DecoderParams::init(cfg, rng, 0.2);
  std::vector<std::vector<double>> frozen_snapshot;
  for (auto& [name, param] : p.named_parameters()) frozen_snapshot.push_back(param->data());
  for (auto& [name, param] : p.lora_parameters()) param->set_requires_grad(true);
  Rng drng(71);
  Tensor x = Tensor::randn({4, 4}, drng);
  GradTape tape;
  Tensor loss = softmax_cross_entropy(tape, decode_step(tape, x, cfg, p), {1, 2, 3, 4}, Reduction::sum);
  tape.backward(loss);
  size_t i = 0;
  for (auto& [name, param] : p.named_parameters()) {
    EXPECT_EQ(param->data(), frozen_snapshot[i]) << name;
    ++i;
  }
}

}  // namespace
}  // namespace fuselm
