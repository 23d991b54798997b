#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>

#include "rsf/netcore/checkpoint.hpp"
#include "rsf/netcore/model.hpp"
#include "test_support.hpp"

namespace rsf::netcore {
namespace {

using rsf::testing::random_tokens;
using rsf::testing::tiny_config;

TEST(BuildModel, SameSeedSameDigest) {
  const auto cfg = tiny_config();
  EXPECT_EQ(build_model(cfg, 1).digest(), build_model(cfg, 1).digest());
}

TEST(BuildModel, DifferentSeedsDiffer) {
  const auto cfg = tiny_config();
  EXPECT_NE(build_model(cfg, 1).digest(), build_model(cfg, 2).digest());
}

TEST(BuildModel, HeadsMustDivideEmbedding) {
  auto cfg = tiny_config();
  cfg.heads = 3;
  EXPECT_THROW(build_model(cfg, 1), HeadsMismatch);
}

TEST(BuildModel, InitRanges) {
  const auto cfg = tiny_config();
  const Model m = build_model(cfg, 5);
  for (const Tensor& t : m.parameters()) {
    if (t.name.ends_with(".gamma")) {
      EXPECT_TRUE(std::all_of(t.values.begin(), t.values.end(), [](double v) { return v == 1.0; }));
    } else if (t.shape.size() == 1) {
      EXPECT_TRUE(std::all_of(t.values.begin(), t.values.end(), [](double v) { return v == 0.0; }));
    } else {
      const double a = std::sqrt(6.0 / static_cast<double>(t.shape[0] + t.shape[1]));
      for (double v : t.values) EXPECT_LE(std::abs(v), a) << t.name;
    }
  }
}

class ForwardTest : public ::testing::Test {
 protected:
  ModelConfig cfg_ = tiny_config();
  Model model_ = build_model(cfg_, 11);
  Rng rng_{3};
  TokenSeq tokens_ = random_tokens(rng_, 10, cfg_.vocab_size);
};

TEST_F(ForwardTest, EmptyInterventionMatchesCleanRun) {
  const ForwardRecord clean = forward(model_, tokens_);
  Intervention none;
  const ForwardRecord again = forward(model_, tokens_, &none);
  EXPECT_EQ(clean.hidden, again.hidden);
  EXPECT_EQ(clean.probs, again.probs);
}

TEST_F(ForwardTest, ShapesAndNormalization) {
  const ForwardRecord rec = forward(model_, tokens_);
  ASSERT_EQ(rec.hidden.size(), cfg_.num_layers());
  for (const auto& h : rec.hidden) {
    EXPECT_EQ(h.rows(), tokens_.size());
    EXPECT_EQ(h.cols(), cfg_.embed_dim);
  }
  ASSERT_EQ(rec.attn.size(), cfg_.blocks);
  EXPECT_EQ(rec.attn[0].size(), cfg_.heads);
  EXPECT_NEAR(rec.probs[0] + rec.probs[1], 1.0, 1e-6);
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    const auto& a = rec.attn[1][0];
    double row = 0.0;
    for (std::size_t j = 0; j < tokens_.size(); ++j) row += a.at(i, j);
    EXPECT_NEAR(row, 1.0, 1e-12);
  }
}

TEST_F(ForwardTest, ProbabilitiesSumToOneOnRandomInputs) {
  for (int trial = 0; trial < 50; ++trial) {
    const Model m = build_model(cfg_, 100 + trial);
    const auto t = random_tokens(rng_, 1 + rng_.below(cfg_.max_seq), cfg_.vocab_size);
    Intervention iv{{{0, t.size()}}, 5.0, static_cast<std::uint64_t>(trial), {}};
    const ForwardRecord rec = forward(m, t, &iv);
    EXPECT_NEAR(rec.probs[0] + rec.probs[1], 1.0, 1e-6);
    EXPECT_GE(rec.probs[0], 0.0);
    EXPECT_GE(rec.probs[1], 0.0);
  }
}

TEST_F(ForwardTest, NoiseIsSeedDeterministic) {
  Intervention iv{{{2, 5}}, 1.0, 42, {}};
  const ForwardRecord a = forward(model_, tokens_, &iv);
  const ForwardRecord b = forward(model_, tokens_, &iv);
  EXPECT_EQ(a.hidden, b.hidden);
  EXPECT_EQ(a.probs, b.probs);
  iv.noise_seed = 43;
  EXPECT_NE(forward(model_, tokens_, &iv).probs, a.probs);
}

TEST_F(ForwardTest, NoiseOnlyTouchesSpanPositions) {
  const ForwardRecord clean = forward(model_, tokens_);
  Intervention iv{{{2, 5}}, 1.0, 7, {}};
  const ForwardRecord corr = forward(model_, tokens_, &iv);
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    const bool inside = i >= 2 && i < 5;
    const bool same = std::equal(clean.hidden[0].row(i).begin(), clean.hidden[0].row(i).end(),
                                 corr.hidden[0].row(i).begin());
    EXPECT_EQ(same, !inside) << i;
  }
}

TEST_F(ForwardTest, FullLayerOnePatchRestoresCleanRun) {
  const ForwardRecord clean = forward(model_, tokens_);
  Intervention iv{{{0, tokens_.size()}}, 3.0, 9, {}};
  for (std::size_t i = 0; i < tokens_.size(); ++i) iv.patches.push_back({1, i});
  const ForwardRecord rec = forward(model_, tokens_, &iv, &clean);
  EXPECT_NEAR(rec.probs[1], clean.probs[1], 1e-12);
  EXPECT_NEAR(rec.probs[0], clean.probs[0], 1e-12);
}

TEST_F(ForwardTest, FullPatchOfAnyLayerRestoresLayersAbove) {
  const ForwardRecord clean = forward(model_, tokens_);
  for (std::size_t layer = 1; layer <= cfg_.num_layers(); ++layer) {
    Intervention iv{{{1, 4}}, 2.0, 5, {}};
    for (std::size_t i = 0; i < tokens_.size(); ++i) iv.patches.push_back({layer, i});
    const ForwardRecord rec = forward(model_, tokens_, &iv, &clean);
    for (std::size_t l = layer; l <= cfg_.num_layers(); ++l) {
      const auto& a = rec.hidden[l - 1].data();
      const auto& b = clean.hidden[l - 1].data();
      for (std::size_t k = 0; k < a.size(); ++k) ASSERT_NEAR(a[k], b[k], 1e-12);
    }
    EXPECT_NEAR(rec.p_ad(), clean.p_ad(), 1e-12);
  }
}

TEST_F(ForwardTest, Errors) {
  const TokenSeq too_long(cfg_.max_seq + 1, 2);
  EXPECT_THROW(forward(model_, too_long), SeqTooLong);
  Intervention iv;
  iv.patches.push_back({2, 0});
  EXPECT_THROW(forward(model_, tokens_, &iv), PatchWithoutReference);
  const ForwardRecord clean = forward(model_, tokens_);
  iv.patches = {{cfg_.num_layers() + 1, 0}};
  EXPECT_THROW(forward(model_, tokens_, &iv, &clean), InvalidIntervention);
  Intervention bad_span{{{3, 30}}, 1.0, 0, {}};
  EXPECT_THROW(forward(model_, tokens_, &bad_span), InvalidIntervention);
}

TEST_F(ForwardTest, PadPositionsAreIgnored) {
  TokenSeq padded = tokens_;
  padded.push_back(kPadId);
  padded.push_back(kPadId);
  // Without positional coupling through pads the pooled output is unchanged.
  const ForwardRecord a = forward(model_, tokens_);
  const ForwardRecord b = forward(model_, padded);
  EXPECT_NEAR(a.p_ad(), b.p_ad(), 1e-12);
}

TEST(MlpPerToken, PermutingPositionsPermutesStates) {
  auto cfg = tiny_config();
  cfg.arch = Arch::kMlpPerToken;
  const Model m = build_model(cfg, 4);
  Rng rng(8);
  const TokenSeq t = random_tokens(rng, 9, cfg.vocab_size);
  std::vector<std::size_t> perm(t.size());
  std::iota(perm.begin(), perm.end(), 0);
  rng.shuffle(std::span(perm));
  TokenSeq permuted(t.size());
  for (std::size_t i = 0; i < t.size(); ++i) permuted[i] = t[perm[i]];
  const ForwardRecord a = forward(m, t);
  const ForwardRecord b = forward(m, permuted);
  EXPECT_TRUE(a.attn.empty());
  for (std::size_t l = 0; l < a.hidden.size(); ++l) {
    for (std::size_t i = 0; i < t.size(); ++i) {
      for (std::size_t e = 0; e < cfg.embed_dim; ++e) {
        EXPECT_EQ(b.hidden[l].at(i, e), a.hidden[l].at(perm[i], e));
      }
    }
  }
  EXPECT_NEAR(a.p_ad(), b.p_ad(), 1e-12);
}

TEST(LossAndGrads, ZeroHeadGivesLogTwo) {
  const auto cfg = tiny_config();
  Model m = build_model(cfg, 2);
  for (double& v : m.parameter("head.w").values) v = 0.0;
  Rng rng(1);
  const TokenSeq a = random_tokens(rng, 5, cfg.vocab_size);
  const TokenSeq b = random_tokens(rng, 7, cfg.vocab_size);
  const std::vector<LabeledSequence> batch = {{a, Label::kAD}, {b, Label::kNC}};
  EXPECT_DOUBLE_EQ(loss_and_grads(m, batch).loss, std::log(2.0));
}

TEST(LossAndGrads, EmptyBatchThrows) {
  const Model m = build_model(tiny_config(), 2);
  EXPECT_THROW(loss_and_grads(m, {}), EmptyBatch);
}

TEST(LossAndGrads, UnusedEmbeddingRowsHaveZeroGradient) {
  const auto cfg = tiny_config();
  const Model m = build_model(cfg, 3);
  const TokenSeq a = {2, 3, 4, 2};
  const TokenSeq b = {5, 3};
  const std::vector<LabeledSequence> batch = {{a, Label::kAD}, {b, Label::kNC}};
  const GradRecord g = loss_and_grads(m, batch);
  const Tensor& emb = g.grads[0];
  ASSERT_EQ(emb.name, "tok_embed");
  for (std::size_t row = 0; row < cfg.vocab_size; ++row) {
    const bool used = row >= 2 && row <= 5;
    double mag = 0.0;
    for (std::size_t e = 0; e < cfg.embed_dim; ++e) mag += std::abs(emb.values[row * cfg.embed_dim + e]);
    if (used) {
      EXPECT_GT(mag, 0.0) << row;
    } else {
      EXPECT_EQ(mag, 0.0) << row;
    }
  }
}

// Central finite differences against the analytic gradient.
double gradcheck_max_rel_error(const ModelConfig& cfg, std::uint64_t seed, int samples) {
  Model m = build_model(cfg, seed);
  // Nonzero head so every path carries gradient.
  Rng rng(seed + 1);
  const TokenSeq a = random_tokens(rng, 7, cfg.vocab_size);
  const TokenSeq b = random_tokens(rng, 5, cfg.vocab_size);
  const std::vector<LabeledSequence> batch = {{a, Label::kAD}, {b, Label::kNC}};
  const GradRecord g = loss_and_grads(m, batch);
  const double h = 1e-4;
  double worst = 0.0;
  for (int s = 0; s < samples; ++s) {
    const std::size_t ti = rng.below(m.parameters().size());
    Tensor& t = m.mutable_parameters()[ti];
    const std::size_t k = rng.below(t.size());
    const double orig = t.values[k];
    t.values[k] = orig + h;
    const double up = loss(m, batch);
    t.values[k] = orig - h;
    const double down = loss(m, batch);
    t.values[k] = orig;
    const double numeric = (up - down) / (2.0 * h);
    const double analytic = g.grads[ti].values[k];
    const double denom = std::max({std::abs(numeric), std::abs(analytic), 1e-8});
    worst = std::max(worst, std::abs(numeric - analytic) / denom);
  }
  return worst;
}

TEST(LossAndGrads, MatchesFiniteDifferences) {
  EXPECT_LE(gradcheck_max_rel_error(tiny_config(8, 2), 21, 100), 1e-3);
}

TEST(LossAndGrads, MatchesFiniteDifferencesMlp) {
  auto cfg = tiny_config(8, 2);
  cfg.arch = Arch::kMlpPerToken;
  EXPECT_LE(gradcheck_max_rel_error(cfg, 22, 100), 1e-3);
}

TEST(InputGradient, MatchesFiniteDifferences) {
  const auto cfg = tiny_config();
  const Model m = build_model(cfg, 31);
  Rng rng(2);
  const TokenSeq t = random_tokens(rng, 6, cfg.vocab_size);
  StateMatrix x = embed(m, t);
  const StateMatrix g = input_gradient(m, t, x, 1);
  const double h = 1e-5;
  for (int s = 0; s < 20; ++s) {
    const std::size_t k = rng.below(x.data().size());
    const double orig = x.data()[k];
    x.data()[k] = orig + h;
    const double up = forward_embedded(m, t, x).p_ad();
    x.data()[k] = orig - h;
    const double down = forward_embedded(m, t, x).p_ad();
    x.data()[k] = orig;
    EXPECT_NEAR(g.data()[k], (up - down) / (2 * h), 1e-7);
  }
}

TEST(Adam, ZeroGradsWithoutDecayLeaveParametersUnchanged) {
  const auto cfg = tiny_config();
  Model m = build_model(cfg, 1);
  const auto before = m.digest();
  GradRecord g;
  for (const Tensor& t : m.parameters()) g.grads.push_back({t.name, t.shape, std::vector<double>(t.size(), 0.0)});
  AdamHyper hyper;
  hyper.weight_decay = 0.0;
  OptimizerState st = OptimizerState::for_model(m, hyper);
  apply_adam(m, g, st);
  EXPECT_EQ(m.digest(), before);
  EXPECT_EQ(st.step, 1u);
}

TEST(Adam, FirstStepMovesByLearningRate) {
  AdamHyper hyper;
  hyper.lr = 1e-3;
  hyper.weight_decay = 0.0;
  for (double grad : {0.37, -5.0, 1e-3}) {
    std::vector<double> w = {0.5}, m = {0.0}, v = {0.0};
    const std::vector<double> g = {grad};
    adam_update(w, g, m, v, 1, hyper);
    EXPECT_NEAR(std::abs(w[0] - 0.5), hyper.lr, 1e-6 * hyper.lr / std::abs(grad) + 1e-12);
    EXPECT_LT((w[0] - 0.5) * grad, 0.0);
  }
}

TEST(Adam, TwoStepsDecreaseQuadratic) {
  AdamHyper hyper;
  hyper.lr = 0.1;
  std::vector<double> w = {1.0}, m = {0.0}, v = {0.0};
  double f = w[0] * w[0];
  for (std::size_t step = 1; step <= 2; ++step) {
    const std::vector<double> g = {2.0 * w[0]};
    adam_update(w, g, m, v, step, hyper);
    const double next = w[0] * w[0];
    EXPECT_LT(next, f);
    f = next;
  }
}

TEST(Adam, ShapeMismatchThrows) {
  Model m = build_model(tiny_config(), 1);
  GradRecord g;
  OptimizerState st = OptimizerState::for_model(m, {});
  EXPECT_THROW(apply_adam(m, g, st), ShapeMismatch);
}

TEST(Training, FewStepsReduceLoss) {
  const auto cfg = tiny_config();
  Model m = build_model(cfg, 9);
  const TokenSeq a = {2, 3, 4, 5}, b = {6, 7, 8, 9};
  const std::vector<LabeledSequence> batch = {{a, Label::kAD}, {b, Label::kNC}};
  AdamHyper hyper;
  hyper.lr = 1e-2;
  OptimizerState st = OptimizerState::for_model(m, hyper);
  const double start = loss(m, batch);
  for (int i = 0; i < 20; ++i) apply_adam(m, loss_and_grads(m, batch), st);
  EXPECT_LT(loss(m, batch), start * 0.5);
}

class CheckpointTest : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = std::filesystem::temp_directory_path() / ("rsf_ckpt_" + std::to_string(::getpid()));
    std::filesystem::create_directories(dir_);
  }
  void TearDown() override { std::filesystem::remove_all(dir_); }
  std::filesystem::path dir_;
};

TEST_F(CheckpointTest, RoundTripIsBitIdentical) {
  Model m = build_model(tiny_config(), 77);
  m.metadata = R"({"vocab":["<pad>","<unk>"]})";
  const auto path = dir_ / "m.ckpt";
  save_checkpoint(m, path);
  const Model back = load_checkpoint(path);
  EXPECT_EQ(back.digest(), m.digest());
  EXPECT_EQ(back.metadata, m.metadata);
  EXPECT_EQ(back.config(), m.config());
  for (std::size_t i = 0; i < m.parameters().size(); ++i) {
    EXPECT_EQ(back.parameters()[i].values, m.parameters()[i].values);
  }
  EXPECT_EQ(encode_checkpoint(back), encode_checkpoint(m));
}

TEST_F(CheckpointTest, Errors) {
  const Model m = build_model(tiny_config(), 77);
  auto bytes = encode_checkpoint(m);

  auto bad = bytes;
  bad[0] = 'X';
  EXPECT_THROW(decode_checkpoint(bad), BadMagic);

  auto version = bytes;
  version[8] = 9;
  EXPECT_THROW(decode_checkpoint(version), VersionMismatch);

  const std::vector<std::uint8_t> truncated(bytes.begin(), bytes.begin() + bytes.size() / 2);
  EXPECT_THROW(decode_checkpoint(truncated), TruncatedFile);

  auto flipped = bytes;
  flipped[bytes.size() - 10] ^= 0x01;
  EXPECT_THROW(decode_checkpoint(flipped), ChecksumMismatch);

  EXPECT_THROW(load_checkpoint(dir_ / "missing.ckpt"), IoError);
}

TEST_F(CheckpointTest, HeaderLayout) {
  const Model m = build_model(tiny_config(), 1);
  const auto bytes = encode_checkpoint(m);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 8), "RSFCKPT1");
  EXPECT_EQ(bytes[8] | (bytes[9] << 8), kCheckpointVersion);
}

}  // namespace
}  // namespace rsf::netcore
