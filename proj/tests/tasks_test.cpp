#include <gtest/gtest.h>

#include <set>
#include <sstream>

#include "rover/tasks/tasks.hpp"
#include "rover/verify/checks.hpp"

using namespace rover;
using tasks::Family;

namespace {

const Family kFamilies[] = {Family::Attribute, Family::Comparison, Family::Counting, Family::Judgement};

// Pearson chi-square of observed counts against a uniform expectation.
double chi_square(const std::vector<double>& counts) {
  double n = 0.0;
  for (double c : counts) n += c;
  const double e = n / static_cast<double>(counts.size());
  double x = 0.0;
  for (double c : counts) x += (c - e) * (c - e) / e;
  return x;
}

}  // namespace

TEST(Family, NamesRoundTrip) {
  for (Family f : kFamilies) EXPECT_EQ(tasks::parse_family(tasks::to_string(f)), f);
  EXPECT_THROW(tasks::parse_family("ranking"), std::invalid_argument);
}

TEST(FamilyConfig, RejectsImpossibleSetups) {
  auto c = tasks::FamilyConfig::defaults(Family::Comparison);
  c.images = 1;
  EXPECT_THROW(c.validate(), tasks::GenerationError);
  c = tasks::FamilyConfig::defaults(Family::Counting);
  c.spec = {32, 32, 16};
  EXPECT_THROW(c.validate(), tasks::GenerationError);
  c = tasks::FamilyConfig::defaults(Family::Attribute);
  c.distractors = 4;
  EXPECT_THROW(c.validate(), tasks::GenerationError);
  for (Family f : kFamilies) EXPECT_NO_THROW(tasks::FamilyConfig::defaults(f).validate());
}

TEST(Generator, SameSeedSameInstance) {
  for (Family f : kFamilies) {
    const auto c = tasks::FamilyConfig::defaults(f);
    EXPECT_EQ(tasks::generate_instance(c, 42), tasks::generate_instance(c, 42));
    EXPECT_NE(tasks::generate_instance(c, 42), tasks::generate_instance(c, 43));
  }
}

TEST(Generator, InstancesAreWellFormed) {
  Vocabulary vocab;
  for (Family f : kFamilies) {
    const auto c = tasks::FamilyConfig::defaults(f);
    for (const auto& inst : tasks::generate_corpus({c}, 100, 5)) {
      ASSERT_EQ(inst.scenes.size(), static_cast<std::size_t>(c.images));
      for (const auto& s : inst.scenes) EXPECT_NO_THROW(scene::validate_scene(s, inst.spec));
      EXPECT_EQ(inst.options.size(), 4u);
      EXPECT_EQ(std::set<std::string>(inst.options.begin(), inst.options.end()).size(), 4u);
      EXPECT_LT(inst.answer_slot(), 4u);
      EXPECT_FALSE(inst.references.empty());
      for (const auto& w : inst.prompt()) EXPECT_TRUE(vocab.find(w)) << w;
      for (const auto& w : inst.transcript) EXPECT_TRUE(vocab.find(w)) << w;
      EXPECT_EQ(inst.transcript.back(), "<eos>");
    }
  }
}

TEST(Generator, CrossImageFamiliesReferenceTwoImages) {
  for (Family f : {Family::Comparison, Family::Counting}) {
    for (const auto& inst : tasks::generate_corpus({tasks::FamilyConfig::defaults(f)}, 50, 6)) {
      std::set<int> imgs;
      for (const auto& r : inst.references) imgs.insert(r.image);
      // A count of zero has nothing to point at in the second image.
      const std::size_t want = inst.answer == words::kNumbers[0] ? 1u : 2u;
      EXPECT_EQ(imgs.size(), want) << tasks::to_string(f) << " seed " << inst.seed;
    }
  }
}

TEST(Generator, AnswerSlotIsBalanced) {
  // chi-square, 3 degrees of freedom; 16.27 is the 0.001 upper quantile.
  for (Family f : kFamilies) {
    std::vector<double> counts(4, 0.0);
    for (const auto& inst : tasks::generate_corpus({tasks::FamilyConfig::defaults(f)}, 2000, 7))
      counts[inst.answer_slot()] += 1.0;
    EXPECT_LT(chi_square(counts), 16.27) << tasks::to_string(f);
  }
}

TEST(Generator, NoSingleImageRevealsCrossImageAnswers) {
  // A reasoner restricted to one image should sit at chance: accuracy within
  // four binomial standard errors of 1/4.
  const double n = 2000.0, se = std::sqrt(0.25 * 0.75 / n);
  for (Family f : {Family::Comparison, Family::Counting}) {
    const auto c = tasks::FamilyConfig::defaults(f);
    const auto insts = tasks::generate_corpus({c}, 2000, 8);
    for (int m = 1; m <= c.images; ++m) {
      double hits = 0.0;
      for (const auto& inst : insts) hits += oracle::single_image_answer(inst, m) == inst.answer;
      EXPECT_NEAR(hits / n, 0.25, 4.0 * se) << tasks::to_string(f) << " image " << m;
    }
  }
}

TEST(Generator, TranscriptParsesToReferences) {
  auto r = verify::check_generator_parser(100, 9);
  EXPECT_TRUE(r.pass) << r.detail;
}

TEST(BoxWords, OneDigitPerToken) {
  EXPECT_EQ(tasks::box_words({0, 16, 32, 8}),
            (tasks::Words{"[", "0", ",", "1", "6", ",", "3", "2", ",", "8", "]"}));
}

TEST(BoxWords, LargestAnchorBoxWins) {
  const std::vector<grounding::BoundingBox> boxes{{0, 0, 4, 4}, {0, 0, 8, 4}, {0, 0, 2, 9}};
  EXPECT_EQ(tasks::largest_box_anchor(boxes), (grounding::BoundingBox{0, 0, 8, 4}));
}

TEST(Reward, BinaryRules) {
  auto r = verify::check_reward_rules(10);
  EXPECT_TRUE(r.pass) << r.detail;
}

TEST(Reward, TrailingTokensAfterEosFail) {
  Vocabulary vocab;
  const auto g = grounding::GroundingGrammar::from_vocabulary(vocab);
  const auto inst = tasks::generate_instance(tasks::FamilyConfig::defaults(Family::Attribute), 11);
  auto toks = vocab.encode(inst.transcript);
  toks.push_back(vocab.id("the"));
  EXPECT_EQ(tasks::reward(vocab, g, inst, toks, false), 0);
}

TEST(Corpus, RoundTripsByteForByte) {
  auto r = verify::check_corpus_roundtrip(12);
  EXPECT_TRUE(r.pass) << r.detail;
}

TEST(Corpus, RejectsUnknownVersion) {
  const auto insts = tasks::generate_corpus({tasks::FamilyConfig::defaults(Family::Attribute)}, 2, 13);
  std::stringstream s;
  tasks::write_corpus(insts, s);
  std::string text = s.str();
  const std::string key = "\"version\":" + std::to_string(tasks::kCorpusVersion);
  const auto at = text.find(key);
  ASSERT_NE(at, std::string::npos);
  text.replace(at, key.size(), "\"version\":99");
  std::stringstream bad(text);
  EXPECT_THROW(tasks::read_corpus(bad), tasks::CorpusError);
}
