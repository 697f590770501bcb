#include <gtest/gtest.h>

#include <algorithm>

#include "rover/scene/scene.hpp"
#include "rover/verify/checks.hpp"

using namespace rover;
using scene::ImageSpec;
using grounding::BoundingBox;

using Idx = std::vector<std::size_t>;

TEST(RoiPartition, BoxStraddlingFourPatches) {
  const ImageSpec spec{64, 64, 16};
  const auto part = scene::roi_partition(spec, {8, 8, 24, 24});
  EXPECT_EQ(part.inside, (Idx{0, 1, 4, 5}));
  EXPECT_EQ(part.outside.size(), 12u);
}

TEST(RoiPartition, AlignedBoxCoversExactlyItsCells) {
  const ImageSpec spec{64, 64, 16};
  EXPECT_EQ(scene::roi_partition(spec, {16, 16, 32, 32}).inside, (Idx{5}));
  EXPECT_EQ(scene::roi_partition(spec, {16, 16, 33, 32}).inside, (Idx{5, 6}));
}

TEST(RoiPartition, FullImageLeavesNoContext) {
  const ImageSpec spec{32, 48, 16};
  const auto part = scene::roi_partition(spec, {0, 0, 32, 48});
  EXPECT_EQ(part.inside.size(), spec.patch_count());
  EXPECT_TRUE(part.outside.empty());
}

TEST(RoiPartition, OnePixelBoxHitsOnePatch) {
  const ImageSpec spec{48, 48, 16};
  for (int y = 0; y < 48; y += 7)
    for (int x = 0; x < 48; x += 5) {
      const auto part = scene::roi_partition(spec, {x, y, x + 1, y + 1});
      ASSERT_EQ(part.inside.size(), 1u);
      EXPECT_EQ(part.inside[0], static_cast<std::size_t>((y / 16) * 3 + x / 16));
    }
}

TEST(RoiPartition, RejectsBoxOutsideImage) {
  const ImageSpec spec{32, 32, 16};
  EXPECT_THROW(scene::roi_partition(spec, {0, 0, 40, 8}), ContractError);
  EXPECT_THROW(scene::roi_partition(spec, {4, 4, 4, 8}), ContractError);
}

TEST(RoiPartition, DisjointCoverAndMonotone) {
  auto r = verify::check_roi_partition(2000, 21);
  EXPECT_TRUE(r.pass) << r.detail;
}

TEST(RoiPartition, PatchAlignedTranslationShiftsIndices) {
  const ImageSpec spec{64, 64, 16};
  Rng rng(22);
  for (int trial = 0; trial < 200; ++trial) {
    const int x0 = static_cast<int>(rng.below(30)), y0 = static_cast<int>(rng.below(30));
    const BoundingBox b{x0, y0, x0 + 1 + static_cast<int>(rng.below(18)), y0 + 1 + static_cast<int>(rng.below(18))};
    const BoundingBox moved{b.x_min + 16, b.y_min + 16, b.x_max + 16, b.y_max + 16};
    const auto a = scene::roi_partition(spec, b).inside, m = scene::roi_partition(spec, moved).inside;
    ASSERT_EQ(a.size(), m.size());
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(m[i], a[i] + 5);
  }
}

TEST(ImageSpec, PatchMustDivideSides) {
  EXPECT_THROW((ImageSpec{40, 32, 16}.validate()), scene::SceneError);
  EXPECT_NO_THROW((ImageSpec{48, 32, 16}.validate()));
}

TEST(Scene, OverlappingObjectsRejected) {
  const ImageSpec spec{32, 32, 16};
  scene::Scene s{{0, 0, {0, 0, 10, 10}, false}, {1, 1, {9, 9, 20, 20}, false}};
  EXPECT_THROW(scene::validate_scene(s, spec), scene::SceneError);
  s[1].box = {10, 10, 20, 20};
  EXPECT_NO_THROW(scene::validate_scene(s, spec));
}

TEST(Featurize, DeterministicAndSeedSensitive) {
  auto r = verify::check_featurize(23);
  EXPECT_TRUE(r.pass) << r.detail;
}

TEST(Featurize, EmptyCellsCarryOnlyPositionAndImageCode) {
  const ImageSpec spec{32, 32, 16};
  const scene::FeatureBank bank(5, 8);
  const scene::Scene s{{2, 3, {0, 0, 8, 8}, false}};
  const auto f = scene::featurize(s, spec, 2, bank);
  const auto code = bank.image_code(2), cls = bank.class_embedding(2, 3);
  for (std::size_t p = 0; p < 4; ++p) {
    const auto base = bank.base(static_cast<int>(p) / 2, static_cast<int>(p) % 2);
    for (std::size_t j = 0; j < 8; ++j) {
      const double want = base[j] + code[j] + (p == 0 ? cls[j] : 0.0);
      EXPECT_DOUBLE_EQ(f.patches.at(p, j), want);
    }
  }
}

TEST(Featurize, ImageSlotChangesEveryPatch) {
  const ImageSpec spec{32, 32, 16};
  const scene::FeatureBank bank(6, 8);
  const auto a = scene::featurize({}, spec, 1, bank), b = scene::featurize({}, spec, 2, bank);
  for (std::size_t p = 0; p < 4; ++p) EXPECT_FALSE(verify::same_bits(a.patches.row(p), b.patches.row(p)));
}
