#include <gtest/gtest.h>

#include "rover/backbone/sequence.hpp"
#include "rover/verify/checks.hpp"

using namespace rover;
using backbone::PositionKind;

namespace {

struct Micro : ::testing::Test {
  Vocabulary vocab;
  grounding::GroundingGrammar grammar = grounding::GroundingGrammar::from_vocabulary(vocab);
};

}  // namespace

TEST_F(Micro, InputLayoutCountsEveryPosition) {
  Rng rng(1);
  const std::vector<scene::ImageFeatures> imgs{verify::random_image(rng, 1, {64, 64, 16}, 8)};
  const auto prompt = vocab.tokenize("what color is the ball");
  ASSERT_EQ(prompt.size(), 5u);
  const auto s = backbone::embed_inputs(imgs, prompt);
  EXPECT_EQ(s.size(), 23u);
  EXPECT_EQ(s.input_length, 23u);
  EXPECT_EQ(s.positions[0].token, Vocabulary::kBos);
  EXPECT_EQ(s.positions[1].token, Vocabulary::kImageSep);
  for (std::size_t i = 2; i < 18; ++i) {
    EXPECT_EQ(s.positions[i].kind, PositionKind::Patch);
    EXPECT_EQ(s.positions[i].patch, i - 2);
  }
  EXPECT_TRUE(s.supervised_positions().empty());
}

TEST_F(Micro, TwoImagesAreSeparated) {
  Rng rng(2);
  const std::vector<scene::ImageFeatures> imgs{verify::random_image(rng, 1, {32, 32, 16}, 8),
                                               verify::random_image(rng, 2, {48, 32, 16}, 8)};
  const auto s = backbone::embed_inputs(imgs, vocab.tokenize("answer"));
  EXPECT_EQ(s.size(), 1u + (1 + 4) + (1 + 6) + 1);
  EXPECT_EQ(s.positions[6].token, Vocabulary::kImageSep);
  EXPECT_EQ(s.positions[7].image, 2);
}

TEST_F(Micro, EmptyInputsRejected) {
  Rng rng(3);
  const std::vector<scene::ImageFeatures> imgs{verify::random_image(rng, 1, {32, 32, 16}, 8)};
  EXPECT_THROW(backbone::embed_inputs({}, vocab.tokenize("answer")), ContractError);
  EXPECT_THROW(backbone::embed_inputs(imgs, {}), ContractError);
}

TEST_F(Micro, ConfigValidation) {
  backbone::ModelConfig c;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c.vocab_size = vocab.size();
  EXPECT_NO_THROW(c.validate());
  c.heads = 3;
  EXPECT_THROW(c.validate(), std::invalid_argument);
}

TEST_F(Micro, ThreePositionsPerEventAnyArea) {
  auto r = verify::check_constant_overhead(200, 4);
  EXPECT_TRUE(r.pass) << r.detail;
}

TEST_F(Micro, BudgetTruncatesAndFlags) {
  auto model = verify::micro_model(vocab, 16, router::Variant::LSW, 5);
  Rng rng(5);
  const std::vector<scene::ImageFeatures> imgs{verify::random_image(rng, 1, {32, 32, 16}, 16)};
  const auto prompt = vocab.tokenize("answer");
  std::vector<TokenId> tokens(40, vocab.id("the"));
  const auto tr = backbone::replay(model, grammar, imgs, prompt, tokens, 20);
  EXPECT_TRUE(tr.truncated);
  EXPECT_EQ(tr.state.size(), 20u);
}

TEST_F(Micro, BudgetCutsTripletShort) {
  auto model = verify::micro_model(vocab, 16, router::Variant::LSW, 6);
  Rng rng(6);
  const std::vector<scene::ImageFeatures> imgs{verify::random_image(rng, 1, {32, 32, 16}, 16)};
  const auto prompt = vocab.tokenize("answer");
  const auto pat = verify::pattern_tokens(vocab, {"ball"}, {0, 0, 16, 16});
  const std::size_t fit = 1 + 1 + 4 + 1 + pat.size() + 1;  // one injected slot left
  const auto tr = backbone::replay(model, grammar, imgs, prompt, pat, fit);
  EXPECT_EQ(tr.state.size(), fit);
  EXPECT_EQ(tr.state.injected_count(), 1u);
  EXPECT_TRUE(tr.truncated);
}

TEST_F(Micro, EosStopsDecoding) {
  auto model = verify::micro_model(vocab, 16, router::Variant::LSW, 7);
  Rng rng(7);
  const std::vector<scene::ImageFeatures> imgs{verify::random_image(rng, 1, {32, 32, 16}, 16)};
  const std::vector<TokenId> tokens{vocab.id("the"), Vocabulary::kEos, vocab.id("ball")};
  const auto tr = backbone::replay(model, grammar, imgs, vocab.tokenize("answer"), tokens, 100);
  EXPECT_EQ(tr.tokens.size(), 2u);
  EXPECT_FALSE(tr.truncated);
}

TEST_F(Micro, TeacherForcingMatchesDecodeLoop) {
  auto r = verify::check_teacher_force_replay(20, 8);
  EXPECT_TRUE(r.pass) << r.detail;
}

TEST_F(Micro, LaterTokensNeverReachEarlierLogits) {
  auto r = verify::check_causality(20, 9);
  EXPECT_TRUE(r.pass) << r.detail;
}

TEST_F(Micro, GreedyDecodeIsReproducible) {
  auto model = verify::micro_model(vocab, 16, router::Variant::LSW, 10);
  verify::perturb_router(model, 10);
  Rng rng(10);
  const std::vector<scene::ImageFeatures> imgs{verify::random_image(rng, 1, {32, 32, 16}, 16)};
  backbone::SamplingConfig sc{false, 1.0, 77};
  const auto a = backbone::decode(model, grammar, imgs, vocab.tokenize("answer"), sc, 80);
  const auto b = backbone::decode(model, grammar, imgs, vocab.tokenize("answer"), sc, 80);
  EXPECT_EQ(a.tokens, b.tokens);
  EXPECT_TRUE(verify::same_bits(a.logprobs, b.logprobs));
}

TEST_F(Micro, LogprobsAreNormalised) {
  auto model = verify::micro_model(vocab, 16, router::Variant::Off, 11);
  Rng rng(11);
  const std::vector<scene::ImageFeatures> imgs{verify::random_image(rng, 1, {32, 32, 16}, 16)};
  std::vector<std::vector<double>> rows;
  backbone::SamplingConfig sc{true, 1.0, 0};
  const auto tr = backbone::decode(model, grammar, imgs, vocab.tokenize("answer"), sc, 30, false,
                                   [&](std::size_t, std::span<const double> l) { rows.emplace_back(l.begin(), l.end()); });
  ASSERT_EQ(rows.size(), tr.tokens.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    long double z = 0.0L;
    const double mx = *std::max_element(rows[i].begin(), rows[i].end());
    for (double v : rows[i]) z += std::exp(static_cast<long double>(v - mx));
    const double want = rows[i][static_cast<std::size_t>(tr.tokens[i])] - mx - static_cast<double>(std::log(z));
    EXPECT_NEAR(tr.logprobs[i], want, 1e-12);
  }
}

TEST_F(Micro, RouterPassesPooledQueryThroughAtInit) {
  auto model = verify::micro_model(vocab, 16, router::Variant::LSW, 12);
  Rng rng(12);
  const auto img = verify::random_image(rng, 1, {32, 32, 16}, 16);
  Tape t(false);
  router::RoutingSession<const router::Router> s(model.router, t);
  const auto out = s.route(img, {0, 0, 16, 16});
  const std::vector<std::size_t> roi{0};
  const Var q = router::pool_query(t, img, roi);
  ASSERT_EQ(out.size(), 3u);
  for (double v : out[0].value.value().data()) EXPECT_EQ(v, 0.0);
  EXPECT_TRUE(verify::same_bits(out[1].value.value().data(), q.value().data()));
  EXPECT_TRUE(verify::same_bits(out[2].value.value().data(), q.value().data()));
}
