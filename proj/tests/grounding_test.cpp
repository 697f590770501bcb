#include <gtest/gtest.h>

#include "rover/grounding/parser.hpp"
#include "rover/verify/checks.hpp"

using namespace rover;
using grounding::BoundingBox;
using grounding::ImageExtent;

namespace {

struct ParserFixture : ::testing::Test {
  Vocabulary vocab;
  grounding::GroundingGrammar g = grounding::GroundingGrammar::from_vocabulary(vocab);

  std::vector<oracle::Event> events(const std::string& text, std::vector<ImageExtent> ext = {{256, 256}}) {
    return verify::stream_events(vocab.tokenize(text), g, ext);
  }

  std::optional<BoundingBox> box(const std::string& payload, ImageExtent ext) {
    const auto ids = vocab.tokenize(payload);
    return grounding::parse_box(ids, g, ext);
  }

  int index_of(const std::string& phrase, int m, std::size_t* defaults = nullptr) {
    const auto ids = vocab.tokenize(phrase);
    return grounding::extract_image_index(ids, m, g, defaults);
  }
};

}  // namespace

TEST_F(ParserFixture, EventOnClosingTokenOfPattern) {
  const std::string s = "<obj> the ball in image 1 </obj> <box> [ 1 0 , 2 0 , 1 1 0 , 2 2 0 ] </box>";
  const auto ids = vocab.tokenize(s);
  grounding::StreamingParser p(g, {{256, 256}});
  for (std::size_t i = 0; i + 1 < ids.size(); ++i) EXPECT_FALSE(p.feed(ids[i]).has_value()) << "token " << i;
  const auto ev = p.feed(ids.back());
  ASSERT_TRUE(ev.has_value());
  EXPECT_EQ(vocab.render(ev->phrase), "the ball in image 1");
  EXPECT_EQ(ev->image_index, 1);
  EXPECT_EQ(ev->box, (BoundingBox{10, 20, 110, 220}));
  EXPECT_EQ(ev->trigger_position, ids.size() - 1);
}

TEST_F(ParserFixture, MissingBoxYieldsNothing) {
  EXPECT_TRUE(events("<obj> ball </obj>").empty());
  EXPECT_TRUE(events("<obj> ball </obj> the red cube <box> [ 0 , 0 , 8 , 8 ] </box>").empty());
}

TEST_F(ParserFixture, OneSeparatorTokenIsAllowed) {
  EXPECT_EQ(events("<obj> ball </obj> . <box> [ 0 , 0 , 8 , 8 ] </box>").size(), 1u);
  EXPECT_TRUE(events("<obj> ball </obj> . . <box> [ 0 , 0 , 8 , 8 ] </box>").empty());
}

TEST_F(ParserFixture, FullImageBox) {
  EXPECT_EQ(box("[ 0 , 0 , 6 4 , 6 4 ]", {64, 64}), (BoundingBox{0, 0, 64, 64}));
}

TEST_F(ParserFixture, WrongArityIsMalformed) {
  EXPECT_FALSE(box("[ 1 0 , 2 0 ]", {64, 64}));
  EXPECT_FALSE(box("[ 1 , 2 , 3 ]", {64, 64}));
  EXPECT_FALSE(box("[ 1 , 2 , 3 , 4 , 5 ]", {64, 64}));
}

TEST_F(ParserFixture, ClampsToImage) {
  EXPECT_EQ(box("[ - 5 , 0 , 2 0 0 , 7 0 ]", {64, 64}), (BoundingBox{0, 0, 64, 64}));
  // Clamp oracle: min/max against the image extent.
  Rng rng(3);
  for (int i = 0; i < 200; ++i) {
    int v[4];
    for (int& x : v) x = static_cast<int>(rng.below(200)) - 50;
    std::string s = "[";
    for (int k = 0; k < 4; ++k) {
      s += k ? " ," : "";
      if (v[k] < 0) s += " -";
      for (char c : std::to_string(std::abs(v[k]))) s += std::string(" ") + c;
    }
    s += " ]";
    const auto got = box(s, {64, 48});
    const BoundingBox want{std::clamp(v[0], 0, 64), std::clamp(v[1], 0, 48), std::clamp(v[2], 0, 64),
                           std::clamp(v[3], 0, 48)};
    if (v[0] < v[2] && v[1] < v[3] && want.valid()) {
      ASSERT_TRUE(got) << s;
      EXPECT_EQ(*got, want) << s;
    } else {
      EXPECT_FALSE(got) << s;
    }
  }
}

TEST_F(ParserFixture, InvertedOrEmptyBoxRejected) {
  EXPECT_FALSE(box("[ 2 0 , 0 , 1 0 , 8 ]", {64, 64}));
  EXPECT_FALSE(box("[ 0 , 8 , 1 0 , 8 ]", {64, 64}));
  // Valid before clamping, empty after.
  EXPECT_FALSE(box("[ 7 0 , 0 , 8 0 , 8 ]", {64, 64}));
}

TEST_F(ParserFixture, ImageIndexFromTerminalBigram) {
  EXPECT_EQ(index_of("the ball in image 2", 4), 2);
  EXPECT_EQ(index_of("a red cube", 1), 1);
  std::size_t defaults = 0;
  EXPECT_EQ(index_of("image 3 star", 4, &defaults), 1);
  EXPECT_EQ(defaults, 1u);
  defaults = 0;
  EXPECT_EQ(index_of("the ball in image 7", 4, &defaults), 1);
  EXPECT_EQ(defaults, 1u);
}

TEST_F(ParserFixture, PatternMayReferenceLaterImage) {
  const auto ev = events("<obj> the cube in image 3 </obj> <box> [ 0 , 0 , 1 6 , 1 6 ] </box>",
                         {{32, 32}, {32, 32}, {64, 64}});
  ASSERT_EQ(ev.size(), 1u);
  EXPECT_EQ(ev[0].image, 3);
}

TEST_F(ParserFixture, MalformedPatternRecovers) {
  // An unclosed pattern is abandoned; the next <obj> starts afresh.
  const auto ev = events("<obj> ball <obj> cube </obj> <box> [ 0 , 0 , 8 , 8 ] </box>");
  ASSERT_EQ(ev.size(), 1u);
  EXPECT_EQ(vocab.render(ev[0].phrase), "cube");
}

TEST_F(ParserFixture, PrefixMonotonicity) {
  Rng rng(5);
  for (int trial = 0; trial < 300; ++trial) {
    const auto s = verify::random_grounding_string(rng, vocab, 2);
    const std::vector<ImageExtent> ext{{48, 48}, {32, 64}};
    const auto full = verify::stream_events(s, g, ext);
    const std::size_t cut = rng.below(s.size() + 1);
    const auto pre = verify::stream_events(std::vector<TokenId>(s.begin(), s.begin() + static_cast<long>(cut)), g, ext);
    ASSERT_LE(pre.size(), full.size());
    for (std::size_t i = 0; i < pre.size(); ++i) EXPECT_EQ(pre[i], full[i]);
  }
}

TEST_F(ParserFixture, StreamingMatchesOfflineOracle) {
  auto r = verify::check_parser_conformance(2000, 0, 7);
  EXPECT_TRUE(r.pass) << r.detail;
}

TEST_F(ParserFixture, AdversarialNearMissesNeverTrigger) {
  Rng rng(8);
  for (std::size_t kind = 0; kind < 220; ++kind) {
    const auto s = verify::adversarial_grounding_string(rng, vocab, kind);
    EXPECT_TRUE(verify::stream_events(s, g, {{32, 32}}).empty()) << vocab.render(s);
  }
}
