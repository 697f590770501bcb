#pragma once

// Object-level evidence routing. On every routing event the router pools an
// RoI query from the grounded image, distils the non-RoI context with
// differential cross-attention (Sift), appends the result to the Visual
// Working Space, attends over that space (Weave), and hands back the
// Link / Sift / Weave vectors to inject into the decoder.

#include <cmath>
#include <cstddef>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "rover/numerics/ops.hpp"
#include "rover/numerics/tape.hpp"
#include "rover/scene/scene.hpp"
#include "rover/util/random.hpp"

namespace rover::router {

// Ablation ladder: full triplet, no Link, Sift only (differential or
// standard attention), or routing disabled.
enum class Variant { LSW, SW, SiftD, SiftS, Off };

inline std::string to_string(Variant v) {
  switch (v) {
    case Variant::LSW: return "LSW";
    case Variant::SW: return "SW";
    case Variant::SiftD: return "Sift_d";
    case Variant::SiftS: return "Sift_s";
    case Variant::Off: return "off";
  }
  return "?";
}

inline Variant parse_variant(const std::string& s) {
  if (s == "LSW") return Variant::LSW;
  if (s == "SW") return Variant::SW;
  if (s == "Sift_d") return Variant::SiftD;
  if (s == "Sift_s") return Variant::SiftS;
  if (s == "off") return Variant::Off;
  throw std::invalid_argument("unknown router variant '" + s + "'");
}

enum class InjectedKind { Link, Sift, Weave };

inline const char* to_string(InjectedKind k) {
  switch (k) {
    case InjectedKind::Link: return "link";
    case InjectedKind::Sift: return "sift";
    case InjectedKind::Weave: return "weave";
  }
  return "?";
}

inline std::vector<InjectedKind> injected_kinds(Variant v) {
  switch (v) {
    case Variant::LSW: return {InjectedKind::Link, InjectedKind::Sift, InjectedKind::Weave};
    case Variant::SW: return {InjectedKind::Sift, InjectedKind::Weave};
    case Variant::SiftD:
    case Variant::SiftS: return {InjectedKind::Sift};
    case Variant::Off: return {};
  }
  return {};
}

// Single-layer pre-norm cross-attention block parameters.
struct EncoderBlock {
  Parameter w_q, w_k, w_v, w_out;
  Parameter norm_attn_gain, norm_attn_bias;
  Parameter norm_ffn_gain, norm_ffn_bias;
  Parameter ffn_in, ffn_in_bias, ffn_out, ffn_out_bias;

  EncoderBlock() = default;

  EncoderBlock(const std::string& prefix, std::size_t d, Rng& rng) {
    const double s = 1.0 / std::sqrt(static_cast<double>(d));
    auto gauss = [&](std::size_t r, std::size_t c, double scale) {
      Tensor t({r, c});
      for (double& v : t.data()) v = scale * rng.normal();
      return t;
    };
    w_q = Parameter(prefix + ".w_q", gauss(d, d, s));
    w_k = Parameter(prefix + ".w_k", gauss(d, d, s));
    w_v = Parameter(prefix + ".w_v", gauss(d, d, s));
    // Output projections start at zero so the block is an identity at init.
    w_out = Parameter(prefix + ".w_out", Tensor({d, d}));
    norm_attn_gain = Parameter(prefix + ".norm_attn.gain", Tensor({d}, 1.0));
    norm_attn_bias = Parameter(prefix + ".norm_attn.bias", Tensor({d}));
    norm_ffn_gain = Parameter(prefix + ".norm_ffn.gain", Tensor({d}, 1.0));
    norm_ffn_bias = Parameter(prefix + ".norm_ffn.bias", Tensor({d}));
    ffn_in = Parameter(prefix + ".ffn.w_in", gauss(d, 4 * d, s));
    ffn_in_bias = Parameter(prefix + ".ffn.b_in", Tensor({4 * d}));
    ffn_out = Parameter(prefix + ".ffn.w_out", Tensor({4 * d, d}));
    ffn_out_bias = Parameter(prefix + ".ffn.b_out", Tensor({d}));
  }

  std::vector<Parameter*> parameters() {
    return {&w_q, &w_k, &w_v, &w_out, &norm_attn_gain, &norm_attn_bias, &norm_ffn_gain, &norm_ffn_bias,
            &ffn_in, &ffn_in_bias, &ffn_out, &ffn_out_bias};
  }
};

struct SiftEncoder {
  EncoderBlock block;
  Parameter lambda;
  bool differential = true;

  static constexpr double kLambdaInit = 0.2;

  SiftEncoder() = default;
  SiftEncoder(std::size_t d, Rng& rng, bool diff = true)
      : block("router.sift", d, rng), lambda("router.sift.lambda", Tensor({1}, kLambdaInit)), differential(diff) {
    if (d % 2 != 0) throw DimensionError("sift encoder: width must be even, got " + std::to_string(d));
  }

  std::vector<Parameter*> parameters() {
    auto p = block.parameters();
    p.push_back(&lambda);
    return p;
  }
};

struct WeaveEncoder {
  EncoderBlock block;

  WeaveEncoder() = default;
  WeaveEncoder(std::size_t d, Rng& rng) : block("router.weave", d, rng) {}

  std::vector<Parameter*> parameters() { return block.parameters(); }
};

// Attention maps captured for offline inspection.
struct DiffAttnMaps {
  Tensor positive;  // q x n
  Tensor negative;  // q x n
  Tensor diff;      // positive - lambda * negative
};

namespace detail {

template <typename P>
Var leaf(Tape& t, P& p) {
  return t.parameter(p);
}

template <typename Block>
Var feed_forward(Tape& t, Block& b, const Var& x) {
  Var h = ops::layer_norm(x, leaf(t, b.norm_ffn_gain), leaf(t, b.norm_ffn_bias));
  h = ops::gelu(ops::add_row(ops::matmul(h, leaf(t, b.ffn_in)), leaf(t, b.ffn_in_bias)));
  h = ops::add_row(ops::matmul(h, leaf(t, b.ffn_out)), leaf(t, b.ffn_out_bias));
  return ops::add(x, h);
}

}  // namespace detail

// (softmax(Q1 K1^T / sqrt(d_h)) - lambda * softmax(Q2 K2^T / sqrt(d_h))) (K W_V) W_out
// with [Q1;Q2] = Q W_Q and [K1;K2] = K W_K split into two d/2 sub-heads.
// In standard mode (differential == false) a single full-width softmax map is
// used instead.
template <typename Enc>
Var diff_attn(Tape& t, const Var& queries, const Var& keys, const Var& values, Enc& enc,
              DiffAttnMaps* maps = nullptr) {
  if (keys.rows() == 0) throw ContractError("diff_attn: empty context");
  const std::size_t d = queries.cols();
  auto& b = enc.block;
  Var q = ops::matmul(queries, detail::leaf(t, b.w_q));
  Var k = ops::matmul(keys, detail::leaf(t, b.w_k));
  Var v = ops::matmul(values, detail::leaf(t, b.w_v));
  Var map;
  if (enc.differential) {
    const std::size_t dh = d / 2;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    Var pos = ops::row_softmax(ops::scale(ops::matmul_nt(ops::slice_cols(q, 0, dh), ops::slice_cols(k, 0, dh)), scale));
    Var neg = ops::row_softmax(ops::scale(ops::matmul_nt(ops::slice_cols(q, dh, d), ops::slice_cols(k, dh, d)), scale));
    map = ops::sub(pos, ops::scale_by(neg, detail::leaf(t, enc.lambda)));
    if (maps) *maps = {pos.value(), neg.value(), map.value()};
  } else {
    const double scale = 1.0 / std::sqrt(static_cast<double>(d));
    map = ops::row_softmax(ops::scale(ops::matmul_nt(q, k), scale));
    if (maps) *maps = {map.value(), Tensor(map.value().shape()), map.value()};
  }
  return ops::matmul(ops::matmul(map, v), detail::leaf(t, b.w_out));
}

// Standard single-head cross-attention; returns the output and optionally
// the attention weights.
template <typename Enc>
Var standard_attn(Tape& t, const Var& queries, const Var& source, Enc& enc, Tensor* weights = nullptr) {
  if (source.rows() == 0) throw ContractError("standard_attn: empty source");
  auto& b = enc.block;
  const double scale = 1.0 / std::sqrt(static_cast<double>(queries.cols()));
  Var q = ops::matmul(queries, detail::leaf(t, b.w_q));
  Var k = ops::matmul(source, detail::leaf(t, b.w_k));
  Var v = ops::matmul(source, detail::leaf(t, b.w_v));
  Var w = ops::row_softmax(ops::scale(ops::matmul_nt(q, k), scale));
  if (weights) *weights = w.value();
  return ops::matmul(ops::matmul(w, v), detail::leaf(t, b.w_out));
}

// Pooled RoI query q_k = mean of V_m[Ω], as a 1 x d constant.
inline Var pool_query(Tape& t, const scene::ImageFeatures& f, const std::vector<std::size_t>& inside) {
  if (inside.empty()) throw ContractError("pool_query: empty RoI index set");
  Var patches = t.constant(f.patches);
  return ops::reshape(ops::avg_pool_rows(patches, inside), {1, f.patches.cols()});
}

// Sift: q + DiffAttn(norm(q); context) followed by a residual FFN. An empty
// context returns q unchanged and touches no parameter.
template <typename Enc>
Var sift(Tape& t, const Var& query, const Var* context, Enc& enc, DiffAttnMaps* maps = nullptr) {
  if (context == nullptr || context->rows() == 0) return query;
  auto& b = enc.block;
  Var h = ops::layer_norm(query, detail::leaf(t, b.norm_attn_gain), detail::leaf(t, b.norm_attn_bias));
  Var x = ops::add(query, diff_attn(t, h, *context, *context, enc, maps));
  return detail::feed_forward(t, b, x);
}

// Append-only, cross-image history of Sift outputs.
class VisualWorkingSpace {
 public:
  void append(const Var& t_sift, int source_image) {
    entries_.push_back(t_sift);
    sources_.push_back(source_image);
  }
  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  const std::vector<Var>& entries() const { return entries_; }
  const std::vector<int>& source_images() const { return sources_; }

 private:
  std::vector<Var> entries_;
  std::vector<int> sources_;
};

// Weave: t_sift attends to every entry of the working space (all are in the
// past, so the autoregressive mask admits the whole list).
template <typename Enc>
Var weave(Tape& t, const Var& t_sift, const VisualWorkingSpace& vws, Enc& enc, Tensor* weights = nullptr) {
  if (vws.empty()) throw ContractError("weave: empty working space");
  auto& b = enc.block;
  Var source = vws.size() == 1 ? vws.entries().front() : ops::concat_rows(vws.entries());
  Var h = ops::layer_norm(t_sift, detail::leaf(t, b.norm_attn_gain), detail::leaf(t, b.norm_attn_bias));
  Var x = ops::add(t_sift, standard_attn(t, h, source, enc, weights));
  return detail::feed_forward(t, b, x);
}

struct TripletBlock {
  std::size_t event_index = 0;  // 1-based k
  Var link;
  Var sift;
  Var weave;
};

inline TripletBlock assemble_triplet(std::size_t k, const Var& t_sift, const Var& t_weave, const Var& link) {
  if (t_sift.cols() != link.cols() || (t_weave.valid() && t_weave.cols() != link.cols()))
    throw DimensionError("assemble_triplet: vector widths differ");
  return {k, link, t_sift, t_weave};
}

class Router {
 public:
  Router() = default;
  Router(std::size_t d, Variant variant, Rng& rng)
      : variant_(variant),
        sift_(d, rng, variant != Variant::SiftS),
        weave_(d, rng),
        link_("router.link", Tensor({1, d})) {}

  Variant variant() const { return variant_; }
  std::size_t width() const { return link_.value.cols(); }
  std::size_t vectors_per_event() const { return injected_kinds(variant_).size(); }

  SiftEncoder& sift_encoder() { return sift_; }
  const SiftEncoder& sift_encoder() const { return sift_; }
  WeaveEncoder& weave_encoder() { return weave_; }
  const WeaveEncoder& weave_encoder() const { return weave_; }
  Parameter& link() { return link_; }
  const Parameter& link() const { return link_; }

  // Parameters that participate in training for this variant.
  std::vector<Parameter*> parameters() {
    std::vector<Parameter*> p;
    if (variant_ == Variant::Off) return p;
    for (auto* x : sift_.parameters()) {
      if (x == &sift_.lambda && !sift_.differential) continue;
      p.push_back(x);
    }
    if (variant_ == Variant::LSW || variant_ == Variant::SW)
      for (auto* x : weave_.parameters()) p.push_back(x);
    if (variant_ == Variant::LSW) p.push_back(&link_);
    return p;
  }

  // Every tensor, for checkpoints.
  std::vector<Parameter*> all_tensors() {
    auto p = sift_.parameters();
    for (auto* x : weave_.parameters()) p.push_back(x);
    p.push_back(&link_);
    return p;
  }

 private:
  Variant variant_ = Variant::LSW;
  SiftEncoder sift_;
  WeaveEncoder weave_;
  Parameter link_;
};

// Everything recorded about one routing event, for attention dumps.
struct RoutingTrace {
  std::size_t event_index = 0;
  int image_index = 0;
  grounding::BoundingBox box;
  std::size_t roi_size = 0;
  std::size_t context_size = 0;
  std::vector<std::size_t> context_patches;
  std::optional<DiffAttnMaps> sift_maps;
  Tensor weave_weights;
};

struct InjectedVector {
  InjectedKind kind;
  Var value;  // 1 x d
};

// Per-trajectory routing state: owns the working space. `RouterRef` is
// `Router` on gradient tapes and `const Router` on inference tapes.
template <typename RouterRef>
class RoutingSession {
 public:
  RoutingSession(RouterRef& router, Tape& tape) : router_(router), tape_(tape) {}

  // Runs one routing event and returns the vectors to inject, in order.
  std::vector<InjectedVector> route(const scene::ImageFeatures& image, const grounding::BoundingBox& box,
                                    RoutingTrace* trace = nullptr) {
    const Variant variant = router_.variant();
    if (variant == Variant::Off) return {};
    ++events_;
    const auto part = scene::roi_partition(image.spec, box);
    Var q = pool_query(tape_, image, part.inside);
    std::optional<Var> context;
    if (!part.outside.empty()) context = ops::gather_rows(tape_.constant(image.patches), part.outside);
    DiffAttnMaps maps;
    Var t_sift = sift(tape_, q, context ? &*context : nullptr, router_.sift_encoder(), trace ? &maps : nullptr);
    if (trace) {
      trace->event_index = events_;
      trace->image_index = image.image_index;
      trace->box = box;
      trace->roi_size = part.inside.size();
      trace->context_size = part.outside.size();
      trace->context_patches = part.outside;
      if (context) trace->sift_maps = maps;
    }
    std::vector<InjectedVector> out;
    if (variant == Variant::SiftD || variant == Variant::SiftS) {
      out.push_back({InjectedKind::Sift, t_sift});
      return out;
    }
    vws_.append(t_sift, image.image_index);
    Var t_weave = weave(tape_, t_sift, vws_, router_.weave_encoder(), trace ? &trace->weave_weights : nullptr);
    if (variant == Variant::LSW) {
      TripletBlock block = assemble_triplet(events_, t_sift, t_weave, tape_.parameter(router_.link()));
      out.push_back({InjectedKind::Link, block.link});
      out.push_back({InjectedKind::Sift, block.sift});
      out.push_back({InjectedKind::Weave, block.weave});
    } else {
      out.push_back({InjectedKind::Sift, t_sift});
      out.push_back({InjectedKind::Weave, t_weave});
    }
    return out;
  }

  const VisualWorkingSpace& working_space() const { return vws_; }
  std::size_t events() const { return events_; }

 private:
  RouterRef& router_;
  Tape& tape_;
  VisualWorkingSpace vws_;
  std::size_t events_ = 0;
};

}  // namespace rover::router
