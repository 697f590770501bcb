#include <gtest/gtest.h>

#include "rover/router/router.hpp"
#include "rover/verify/checks.hpp"

using namespace rover;
using router::InjectedKind;
using router::Variant;

namespace {

router::SiftEncoder random_encoder(Rng& rng, std::size_t d) {
  router::SiftEncoder enc(d, rng);
  for (auto* p : enc.parameters())
    for (double& v : p->value.data()) v = rng.normal() / std::sqrt(static_cast<double>(d));
  return enc;
}

Tensor random_rows(Rng& rng, std::size_t r, std::size_t c) {
  Tensor t({r, c});
  for (double& v : t.data()) v = rng.normal();
  return t;
}

std::vector<InjectedKind> kinds(const std::vector<router::InjectedVector>& v) {
  std::vector<InjectedKind> k;
  for (const auto& x : v) k.push_back(x.kind);
  return k;
}

}  // namespace

TEST(Variant, NamesRoundTrip) {
  for (Variant v : {Variant::LSW, Variant::SW, Variant::SiftD, Variant::SiftS, Variant::Off})
    EXPECT_EQ(router::parse_variant(router::to_string(v)), v);
  EXPECT_THROW(router::parse_variant("lsw"), std::invalid_argument);
}

TEST(Variant, InjectedCounts) {
  EXPECT_EQ(router::injected_kinds(Variant::LSW).size(), 3u);
  EXPECT_EQ(router::injected_kinds(Variant::SW).size(), 2u);
  EXPECT_EQ(router::injected_kinds(Variant::SiftD).size(), 1u);
  EXPECT_EQ(router::injected_kinds(Variant::SiftS).size(), 1u);
  EXPECT_TRUE(router::injected_kinds(Variant::Off).empty());
}

TEST(SiftEncoder, LambdaStartsAtPointTwo) {
  Rng rng(1);
  router::SiftEncoder enc(8, rng);
  EXPECT_EQ(enc.lambda.value[0], 0.2);
  EXPECT_THROW(router::SiftEncoder(7, rng), DimensionError);
}

TEST(DiffAttn, ZeroLambdaIsPlainSoftmax) {
  Rng rng(2);
  auto enc = random_encoder(rng, 8);
  enc.lambda.value[0] = 0.0;
  const Tensor q = random_rows(rng, 2, 8), k = random_rows(rng, 5, 8);
  Tape t(false);
  router::DiffAttnMaps maps;
  router::diff_attn(t, t.constant(q), t.constant(k), t.constant(k), enc, &maps);
  EXPECT_TRUE(verify::same_bits(maps.diff.data(), maps.positive.data()));
}

TEST(DiffAttn, SingleKeyMapIsOneMinusLambda) {
  Rng rng(3);
  auto enc = random_encoder(rng, 6);
  enc.lambda.value[0] = 0.35;
  Tape t(false);
  router::DiffAttnMaps maps;
  router::diff_attn(t, t.constant(random_rows(rng, 3, 6)), t.constant(random_rows(rng, 1, 6)),
                    t.constant(random_rows(rng, 1, 6)), enc, &maps);
  for (double v : maps.diff.data()) EXPECT_NEAR(v, 0.65, 1e-15);
}

TEST(DiffAttn, MatchesStraightLineOracle) {
  auto r = verify::check_diff_attn_oracle(100, 4);
  EXPECT_TRUE(r.pass) << r.detail;
}

TEST(DiffAttn, RowSumsAreOneMinusLambda) {
  Rng rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    auto enc = random_encoder(rng, 8);
    enc.lambda.value[0] = 2.0 * rng.uniform() - 0.5;
    Tape t(false);
    router::DiffAttnMaps maps;
    const std::size_t n = 1 + rng.below(20);
    router::diff_attn(t, t.constant(random_rows(rng, 3, 8)), t.constant(random_rows(rng, n, 8)),
                      t.constant(random_rows(rng, n, 8)), enc, &maps);
    for (std::size_t i = 0; i < 3; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < n; ++j) s += maps.diff.at(i, j);
      EXPECT_NEAR(s, 1.0 - enc.lambda.value[0], 1e-12);
    }
  }
}

TEST(DiffAttn, EmptyContextIsAContractError) {
  Rng rng(6);
  auto enc = random_encoder(rng, 4);
  Tape t(false);
  EXPECT_THROW(router::diff_attn(t, t.constant(random_rows(rng, 1, 4)), t.constant(Tensor({0, 4})),
                                 t.constant(Tensor({0, 4})), enc),
               ContractError);
}

TEST(Sift, FullImageBoxFallsBackToPooledQuery) {
  auto r = verify::check_fallback(7);
  EXPECT_TRUE(r.pass) << r.detail;
}

TEST(PoolQuery, IsTheMeanOfRoiPatches) {
  Rng rng(8);
  const scene::ImageSpec spec{48, 48, 16};
  const auto img = verify::random_image(rng, 1, spec, 6);
  const std::vector<std::size_t> inside{0, 1, 3, 4};
  Tape t(false);
  Var q = router::pool_query(t, img, inside);
  ASSERT_EQ(q.value().shape(), (Shape{1, 6}));
  for (std::size_t j = 0; j < 6; ++j) {
    double s = 0.0;
    for (auto i : inside) s += img.patches.at(i, j);
    EXPECT_NEAR(q.value()[j], s / 4.0, 1e-15);
  }
}

TEST(RoutingSession, TripletOrderPerVariant) {
  Vocabulary vocab;
  Rng rng(9);
  const scene::ImageSpec spec{32, 32, 16};
  const auto img = verify::random_image(rng, 1, spec, 16);
  const std::pair<Variant, std::vector<InjectedKind>> cases[] = {
      {Variant::LSW, {InjectedKind::Link, InjectedKind::Sift, InjectedKind::Weave}},
      {Variant::SW, {InjectedKind::Sift, InjectedKind::Weave}},
      {Variant::SiftD, {InjectedKind::Sift}},
      {Variant::SiftS, {InjectedKind::Sift}},
      {Variant::Off, {}},
  };
  for (const auto& [variant, want] : cases) {
    auto model = verify::micro_model(vocab, 16, variant, 9);
    Tape t(false);
    router::RoutingSession<const router::Router> s(model.router, t);
    const auto out = s.route(img, {0, 0, 16, 16});
    EXPECT_EQ(kinds(out), want) << router::to_string(variant);
    for (const auto& v : out) EXPECT_EQ(v.value.value().shape(), (Shape{1, 16}));
    EXPECT_EQ(s.working_space().size(), (variant == Variant::LSW || variant == Variant::SW) ? 1u : 0u);
  }
}

TEST(RoutingSession, WorkingSpaceIsAppendOnlyAcrossImages) {
  Vocabulary vocab;
  Rng rng(10);
  auto model = verify::micro_model(vocab, 16, Variant::LSW, 10);
  verify::perturb_router(model, 10);
  const scene::ImageSpec spec{32, 32, 16};
  const auto a = verify::random_image(rng, 1, spec, 16), b = verify::random_image(rng, 2, spec, 16);
  Tape t(false);
  router::RoutingSession<const router::Router> s(model.router, t);
  const auto first = s.route(a, {0, 0, 16, 16});
  s.route(b, {16, 0, 32, 32});
  s.route(a, {0, 16, 32, 32});
  EXPECT_EQ(s.working_space().source_images(), (std::vector<int>{1, 2, 1}));
  EXPECT_TRUE(verify::same_bits(s.working_space().entries()[0].value().data(), first[1].value.value().data()));
  EXPECT_EQ(s.events(), 3u);
}

TEST(RoutingSession, EarlierEventsIgnoreLaterOnes) {
  auto r = verify::check_vws_causality(50, 11);
  EXPECT_TRUE(r.pass) << r.detail;
}

TEST(RoutingSession, LinkIsSharedAcrossEvents) {
  Vocabulary vocab;
  Rng rng(12);
  auto model = verify::micro_model(vocab, 16, Variant::LSW, 12);
  verify::perturb_router(model, 12);
  const auto img = verify::random_image(rng, 1, {32, 32, 16}, 16);
  Tape t(false);
  router::RoutingSession<const router::Router> s(model.router, t);
  const auto e1 = s.route(img, {0, 0, 16, 16}), e2 = s.route(img, {16, 16, 32, 32});
  EXPECT_TRUE(verify::same_bits(e1[0].value.value().data(), e2[0].value.value().data()));
  EXPECT_TRUE(verify::same_bits(e1[0].value.value().data(), model.router.link().value.data()));
}

TEST(Router, TrainableSetFollowsVariant) {
  Vocabulary vocab;
  auto names = [&](Variant v) {
    auto m = verify::micro_model(vocab, 8, v, 1);
    std::set<std::string> s;
    for (auto* p : m.router.parameters()) s.insert(p->name);
    return s;
  };
  EXPECT_TRUE(names(Variant::Off).empty());
  EXPECT_TRUE(names(Variant::LSW).count("router.link"));
  EXPECT_FALSE(names(Variant::SW).count("router.link"));
  EXPECT_TRUE(names(Variant::SiftD).count("router.sift.lambda"));
  EXPECT_FALSE(names(Variant::SiftS).count("router.sift.lambda"));
  for (const auto& n : names(Variant::SiftD)) EXPECT_EQ(n.rfind("router.weave", 0), std::string::npos) << n;
}
