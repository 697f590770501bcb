#pragma once

// Synthetic frozen "vision encoder": scenes of coloured shapes rendered to a
// patch-token grid, plus the RoI geometry Ω(b) / Ω̄(b) over that grid.
// Grid layout is row-major: patch index = row * grid_cols + col.

#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "rover/backbone/vocab.hpp"
#include "rover/grounding/parser.hpp"
#include "rover/numerics/tensor.hpp"
#include "rover/util/random.hpp"

namespace rover::scene {

using grounding::BoundingBox;

class SceneError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct ImageSpec {
  int width = 32;
  int height = 32;
  int patch = 16;

  int grid_cols() const { return width / patch; }
  int grid_rows() const { return height / patch; }
  std::size_t patch_count() const { return static_cast<std::size_t>(grid_cols() * grid_rows()); }
  grounding::ImageExtent extent() const { return {width, height}; }

  void validate() const {
    if (patch <= 0 || width <= 0 || height <= 0)
      throw SceneError("image spec: dimensions must be positive");
    if (width % patch != 0 || height % patch != 0)
      throw SceneError("image spec: patch size " + std::to_string(patch) + " must divide " + std::to_string(width) +
                       "x" + std::to_string(height));
  }

  BoundingBox patch_box(std::size_t p) const {
    const int r = static_cast<int>(p) / grid_cols();
    const int c = static_cast<int>(p) % grid_cols();
    return {c * patch, r * patch, (c + 1) * patch, (r + 1) * patch};
  }

  friend bool operator==(const ImageSpec&, const ImageSpec&) = default;
};

struct SceneObject {
  int shape = 0;  // index into words::kShapes
  int color = 0;  // index into words::kColors
  BoundingBox box;
  bool distractor = false;

  friend bool operator==(const SceneObject&, const SceneObject&) = default;
};

using Scene = std::vector<SceneObject>;

struct ImageFeatures {
  int image_index = 1;
  ImageSpec spec;
  Tensor patches;  // N_m x d, frozen
};

inline bool boxes_overlap(const BoundingBox& a, const BoundingBox& b) {
  return a.x_min < b.x_max && b.x_min < a.x_max && a.y_min < b.y_max && b.y_min < a.y_max;
}

inline bool box_within(const BoundingBox& b, const ImageSpec& spec) {
  return b.valid() && b.x_min >= 0 && b.y_min >= 0 && b.x_max <= spec.width && b.y_max <= spec.height;
}

inline void validate_scene(const Scene& scene, const ImageSpec& spec) {
  for (std::size_t i = 0; i < scene.size(); ++i) {
    const auto& o = scene[i];
    if (!box_within(o.box, spec)) throw SceneError("scene: object " + std::to_string(i) + " box outside image");
    if (o.shape < 0 || o.shape >= static_cast<int>(words::kShapes.size()) || o.color < 0 ||
        o.color >= static_cast<int>(words::kColors.size()))
      throw SceneError("scene: object " + std::to_string(i) + " has an unknown class");
    for (std::size_t j = 0; j < i; ++j)
      if (boxes_overlap(o.box, scene[j].box))
        throw SceneError("scene: objects " + std::to_string(j) + " and " + std::to_string(i) + " overlap");
  }
}

struct RoiPartition {
  std::vector<std::size_t> inside;   // Ω(b)
  std::vector<std::size_t> outside;  // Ω̄(b)
};

// A patch belongs to Ω(b) iff its half-open pixel square meets the half-open
// box with positive area.
inline RoiPartition roi_partition(const ImageSpec& spec, const BoundingBox& box) {
  if (!box_within(box, spec)) throw ContractError("roi_partition: box must have positive area inside the image");
  RoiPartition part;
  const int P = spec.patch;
  for (int r = 0; r < spec.grid_rows(); ++r)
    for (int c = 0; c < spec.grid_cols(); ++c) {
      const bool hit = c * P < box.x_max && (c + 1) * P > box.x_min && r * P < box.y_max && (r + 1) * P > box.y_min;
      (hit ? part.inside : part.outside).push_back(static_cast<std::size_t>(r * spec.grid_cols() + c));
    }
  return part;
}

// Deterministic embedding tables behind the featurizer.
class FeatureBank {
 public:
  static constexpr double kBaseScale = 0.5;
  static constexpr double kImageScale = 1.0;
  static constexpr double kClassScale = 2.0;

  FeatureBank(std::uint64_t seed, std::size_t dim) : seed_(seed), dim_(dim) {
    Rng rng(mix_seed(seed, 0xC1A55));
    shape_.resize(words::kShapes.size());
    color_.resize(words::kColors.size());
    for (auto& v : shape_) v = gaussian(rng, kClassScale);
    for (auto& v : color_) v = gaussian(rng, kClassScale);
  }

  std::size_t dim() const { return dim_; }

  // Position code of a grid cell: a random row code plus a random column code.
  std::vector<double> base(int row, int col) const {
    Rng rr(mix_seed(seed_, 0xB0A00000ULL + static_cast<std::uint64_t>(row)));
    Rng rc(mix_seed(seed_, 0xC0100000ULL + static_cast<std::uint64_t>(col)));
    auto out = gaussian(rr, kBaseScale);
    const auto c = gaussian(rc, kBaseScale);
    for (std::size_t j = 0; j < dim_; ++j) out[j] += c[j];
    return out;
  }

  // Code identifying the image slot (1-based) within a multi-image input.
  std::vector<double> image_code(int image_index) const {
    Rng rng(mix_seed(seed_, 0x1A6E0000ULL + static_cast<std::uint64_t>(image_index)));
    return gaussian(rng, kImageScale);
  }

  std::vector<double> class_embedding(int shape, int color) const {
    std::vector<double> out(dim_);
    for (std::size_t j = 0; j < dim_; ++j)
      out[j] = shape_[static_cast<std::size_t>(shape)][j] + color_[static_cast<std::size_t>(color)][j];
    return out;
  }

 private:
  std::vector<double> gaussian(Rng& rng, double scale) const {
    std::vector<double> v(dim_);
    for (auto& x : v) x = scale * rng.normal();
    return v;
  }

  std::uint64_t seed_;
  std::size_t dim_;
  std::vector<std::vector<double>> shape_;
  std::vector<std::vector<double>> color_;
};

// Patch features: base embedding of the patch position plus the image code,
// plus the class embedding of every object overlapping that patch.
inline ImageFeatures featurize(const Scene& scene, const ImageSpec& spec, int image_index, const FeatureBank& bank) {
  spec.validate();
  validate_scene(scene, spec);
  const std::size_t n = spec.patch_count(), d = bank.dim();
  ImageFeatures f{image_index, spec, Tensor({n, d})};
  const auto code = bank.image_code(image_index);
  for (std::size_t p = 0; p < n; ++p) {
    auto row = f.patches.row(p);
    const auto base = bank.base(static_cast<int>(p) / spec.grid_cols(), static_cast<int>(p) % spec.grid_cols());
    for (std::size_t j = 0; j < d; ++j) row[j] = base[j] + code[j];
    const BoundingBox cell = spec.patch_box(p);
    for (const auto& o : scene)
      if (boxes_overlap(cell, o.box)) {
        const auto cls = bank.class_embedding(o.shape, o.color);
        for (std::size_t j = 0; j < d; ++j) row[j] += cls[j];
      }
  }
  return f;
}

inline ImageFeatures featurize(const Scene& scene, const ImageSpec& spec, int image_index, std::uint64_t seed,
                               std::size_t dim) {
  return featurize(scene, spec, image_index, FeatureBank(seed, dim));
}

}  // namespace rover::scene
