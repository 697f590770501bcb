#pragma once

// Small causal decoder over a mixed sequence of text tokens, projected image
// patches and injected routing vectors.

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

#include "rover/backbone/vocab.hpp"
#include "rover/numerics/kernels.hpp"
#include "rover/numerics/ops.hpp"
#include "rover/router/router.hpp"
#include "rover/scene/scene.hpp"
#include "rover/util/random.hpp"

namespace rover::backbone {

struct ModelConfig {
  std::size_t vocab_size = 0;
  std::size_t d = 32;
  std::size_t layers = 2;
  std::size_t heads = 4;
  std::size_t max_len = 256;
  router::Variant variant = router::Variant::LSW;
  std::uint64_t seed = 1;

  void validate() const {
    if (vocab_size == 0) throw std::invalid_argument("model config: vocab_size must be positive");
    if (d == 0 || d % 2 != 0) throw std::invalid_argument("model config: d must be positive and even");
    if (heads == 0 || d % heads != 0) throw std::invalid_argument("model config: heads must divide d");
    if (layers == 0) throw std::invalid_argument("model config: layers must be positive");
    if (max_len < 8) throw std::invalid_argument("model config: max_len too small");
  }
};

struct DecoderLayer {
  Parameter norm_attn_gain, norm_attn_bias;
  Parameter w_q, w_k, w_v, w_o;
  Parameter norm_ffn_gain, norm_ffn_bias;
  Parameter ffn_in, ffn_in_bias, ffn_out, ffn_out_bias;

  std::vector<Parameter*> parameters() {
    return {&norm_attn_gain, &norm_attn_bias, &w_q, &w_k, &w_v, &w_o, &norm_ffn_gain, &norm_ffn_bias,
            &ffn_in, &ffn_in_bias, &ffn_out, &ffn_out_bias};
  }
};

class ToyDecoder {
 public:
  ToyDecoder() = default;

  ToyDecoder(const ModelConfig& cfg, std::size_t feature_dim, Rng& rng) : cfg_(cfg) {
    const std::size_t d = cfg.d, V = cfg.vocab_size;
    auto gauss = [&](std::string name, std::size_t r, std::size_t c, double s) {
      Tensor t({r, c});
      for (double& v : t.data()) v = s * rng.normal();
      return Parameter(std::move(name), std::move(t));
    };
    const double in_scale = 1.0 / std::sqrt(static_cast<double>(d));
    const double out_scale = in_scale / std::sqrt(2.0 * static_cast<double>(cfg.layers));
    token_embedding_ = gauss("decoder.token_embedding", V, d, 0.5);
    position_embedding_ = Parameter("decoder.position_embedding", sinusoid(cfg.max_len, d, 0.5));
    patch_proj_ = gauss("decoder.patch_proj", feature_dim, d, 1.0 / std::sqrt(static_cast<double>(feature_dim)));
    patch_bias_ = Parameter("decoder.patch_bias", Tensor({d}));
    for (std::size_t l = 0; l < cfg.layers; ++l) {
      const std::string p = "decoder.layer" + std::to_string(l);
      DecoderLayer L;
      L.norm_attn_gain = Parameter(p + ".norm_attn.gain", Tensor({d}, 1.0));
      L.norm_attn_bias = Parameter(p + ".norm_attn.bias", Tensor({d}));
      L.w_q = gauss(p + ".w_q", d, d, in_scale);
      L.w_k = gauss(p + ".w_k", d, d, in_scale);
      L.w_v = gauss(p + ".w_v", d, d, in_scale);
      L.w_o = gauss(p + ".w_o", d, d, out_scale);
      L.norm_ffn_gain = Parameter(p + ".norm_ffn.gain", Tensor({d}, 1.0));
      L.norm_ffn_bias = Parameter(p + ".norm_ffn.bias", Tensor({d}));
      L.ffn_in = gauss(p + ".ffn.w_in", d, 4 * d, in_scale);
      L.ffn_in_bias = Parameter(p + ".ffn.b_in", Tensor({4 * d}));
      L.ffn_out = gauss(p + ".ffn.w_out", 4 * d, d, out_scale / 2.0);
      L.ffn_out_bias = Parameter(p + ".ffn.b_out", Tensor({d}));
      layers_.push_back(std::move(L));
    }
    final_gain_ = Parameter("decoder.norm_final.gain", Tensor({d}, 1.0));
    final_bias_ = Parameter("decoder.norm_final.bias", Tensor({d}));
    head_ = gauss("decoder.head", d, V, in_scale);
  }

  // Learned table, started from a sinusoidal pattern so that attention by
  // relative offset is available from the first step.
  static Tensor sinusoid(std::size_t rows, std::size_t d, double amplitude) {
    Tensor t({rows, d});
    for (std::size_t pos = 0; pos < rows; ++pos)
      for (std::size_t i = 0; i < d / 2; ++i) {
        const double angle =
            static_cast<double>(pos) / std::pow(10000.0, 2.0 * static_cast<double>(i) / static_cast<double>(d));
        t.at(pos, 2 * i) = amplitude * std::sin(angle);
        t.at(pos, 2 * i + 1) = amplitude * std::cos(angle);
      }
    return t;
  }

  const ModelConfig& config() const { return cfg_; }

  std::vector<Parameter*> parameters() {
    std::vector<Parameter*> p{&token_embedding_, &position_embedding_, &patch_proj_, &patch_bias_};
    for (auto& L : layers_)
      for (auto* x : L.parameters()) p.push_back(x);
    p.push_back(&final_gain_);
    p.push_back(&final_bias_);
    p.push_back(&head_);
    return p;
  }

  const Parameter& token_embedding() const { return token_embedding_; }
  const Parameter& position_embedding() const { return position_embedding_; }
  const Parameter& patch_proj() const { return patch_proj_; }
  const Parameter& patch_bias() const { return patch_bias_; }
  const std::vector<DecoderLayer>& layers() const { return layers_; }
  const Parameter& final_gain() const { return final_gain_; }
  const Parameter& final_bias() const { return final_bias_; }
  const Parameter& head() const { return head_; }

  Parameter& token_embedding() { return token_embedding_; }
  Parameter& position_embedding() { return position_embedding_; }
  Parameter& patch_proj() { return patch_proj_; }
  Parameter& patch_bias() { return patch_bias_; }
  std::vector<DecoderLayer>& layers() { return layers_; }
  Parameter& final_gain() { return final_gain_; }
  Parameter& final_bias() { return final_bias_; }
  Parameter& head() { return head_; }

 private:
  ModelConfig cfg_;
  Parameter token_embedding_, position_embedding_, patch_proj_, patch_bias_;
  std::vector<DecoderLayer> layers_;
  Parameter final_gain_, final_bias_, head_;
};

// Decoder plus router: the whole trainable policy.
struct RoverModel {
  ModelConfig config;
  ToyDecoder decoder;
  router::Router router;

  RoverModel() = default;

  explicit RoverModel(const ModelConfig& cfg) : config(cfg) {
    cfg.validate();
    Rng rng(mix_seed(cfg.seed, 0xD3C0DE));
    decoder = ToyDecoder(cfg, cfg.d, rng);
    router = router::Router(cfg.d, cfg.variant, rng);
  }

  std::vector<Parameter*> parameters() {
    auto p = decoder.parameters();
    for (auto* x : router.parameters()) p.push_back(x);
    return p;
  }

  // Every tensor including unused router parts, for checkpoints.
  std::vector<Parameter*> all_tensors() {
    auto p = decoder.parameters();
    for (auto* x : router.all_tensors()) p.push_back(x);
    return p;
  }

  std::vector<const Parameter*> all_tensors() const {
    auto p = const_cast<RoverModel&>(*this).all_tensors();
    return {p.begin(), p.end()};
  }
};

// Decoder parameters as tape leaves. `Model` is RoverModel or const RoverModel.
template <typename Dec>
struct DecoderLeaves {
  Var token_embedding, position_embedding, patch_proj, patch_bias, final_gain, final_bias, head;
  struct Layer {
    Var na_g, na_b, w_q, w_k, w_v, w_o, nf_g, nf_b, f_in, f_in_b, f_out, f_out_b;
  };
  std::vector<Layer> layers;

  DecoderLeaves(Tape& t, Dec& dec) {
    token_embedding = t.parameter(dec.token_embedding());
    position_embedding = t.parameter(dec.position_embedding());
    patch_proj = t.parameter(dec.patch_proj());
    patch_bias = t.parameter(dec.patch_bias());
    for (auto& L : dec.layers())
      layers.push_back({t.parameter(L.norm_attn_gain), t.parameter(L.norm_attn_bias), t.parameter(L.w_q),
                        t.parameter(L.w_k), t.parameter(L.w_v), t.parameter(L.w_o), t.parameter(L.norm_ffn_gain),
                        t.parameter(L.norm_ffn_bias), t.parameter(L.ffn_in), t.parameter(L.ffn_in_bias),
                        t.parameter(L.ffn_out), t.parameter(L.ffn_out_bias)});
    final_gain = t.parameter(dec.final_gain());
    final_bias = t.parameter(dec.final_bias());
    head = t.parameter(dec.head());
  }
};

// Runs the transformer stack over input rows (T x d, positions 0..T-1) and
// returns the final normalized hidden states (T x d).
template <typename Dec>
Var decoder_hidden(Tape&, const DecoderLeaves<Dec>& leaves, const Var& inputs, std::size_t heads) {
  const std::size_t T = inputs.rows();
  if (T > leaves.position_embedding.rows())
    throw ContractError("decoder: sequence length " + std::to_string(T) + " exceeds max_len");
  std::vector<std::size_t> pos(T);
  for (std::size_t i = 0; i < T; ++i) pos[i] = i;
  Var x = ops::add(inputs, ops::gather_rows(leaves.position_embedding, pos));
  for (const auto& L : leaves.layers) {
    Var h = ops::layer_norm(x, L.na_g, L.na_b);
    Var a = ops::causal_attention(ops::matmul(h, L.w_q), ops::matmul(h, L.w_k), ops::matmul(h, L.w_v), heads);
    x = ops::add(x, ops::matmul(a, L.w_o));
    Var f = ops::layer_norm(x, L.nf_g, L.nf_b);
    f = ops::gelu(ops::add_row(ops::matmul(f, L.f_in), L.f_in_b));
    f = ops::add_row(ops::matmul(f, L.f_out), L.f_out_b);
    x = ops::add(x, f);
  }
  return ops::layer_norm(x, leaves.final_gain, leaves.final_bias);
}

// Incremental inference with append-only key/value caches. Each pushed row
// goes through exactly the kernels the tape path uses, so the results are
// bit-identical to a full recomputation.
class DecoderSession {
 public:
  explicit DecoderSession(const ToyDecoder& dec) : dec_(dec) {
    const auto& cfg = dec.config();
    d_ = cfg.d;
    caches_.resize(cfg.layers);
  }

  std::size_t length() const { return length_; }

  // Row of the token embedding table.
  std::vector<double> token_row(TokenId id) const {
    auto r = dec_.token_embedding().value.row(static_cast<std::size_t>(id));
    return {r.begin(), r.end()};
  }

  // patch_proj applied to a feature row, plus bias.
  std::vector<double> patch_row(std::span<const double> feature) const {
    std::vector<double> out(d_);
    kernels::vec_mat(feature, dec_.patch_proj().value.data().data(), d_, out);
    const auto b = dec_.patch_bias().value.data();
    for (std::size_t j = 0; j < d_; ++j) out[j] += b[j];
    return out;
  }

  // Appends one input row and returns the logits at that position.
  std::vector<double> push(std::span<const double> input) {
    const auto& cfg = dec_.config();
    if (length_ >= cfg.max_len) throw ContractError("decoder session: max_len exceeded");
    const std::size_t d = d_, heads = cfg.heads, w = d / heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(w));
    std::vector<double> x(d), h(d), q(d), k(d), v(d), a(d), proj(d), f1(4 * d), f2(d);
    const auto pos = dec_.position_embedding().value.row(length_);
    for (std::size_t j = 0; j < d; ++j) x[j] = input[j] + 1.0 * pos[j];
    for (std::size_t l = 0; l < dec_.layers().size(); ++l) {
      const auto& L = dec_.layers()[l];
      auto& cache = caches_[l];
      kernels::layer_norm_row(x, L.norm_attn_gain.value.data(), L.norm_attn_bias.value.data(), h);
      kernels::vec_mat(h, L.w_q.value.data().data(), d, q);
      kernels::vec_mat(h, L.w_k.value.data().data(), d, k);
      kernels::vec_mat(h, L.w_v.value.data().data(), d, v);
      cache.keys.insert(cache.keys.end(), k.begin(), k.end());
      cache.values.insert(cache.values.end(), v.begin(), v.end());
      const std::size_t count = length_ + 1;
      weights_.resize(count);
      for (std::size_t hd = 0; hd < heads; ++hd)
        kernels::attend_row({q.data() + hd * w, w}, cache.keys.data(), cache.values.data(), d, hd * w, w, count,
                            scale, weights_, {a.data() + hd * w, w});
      kernels::vec_mat(a, L.w_o.value.data().data(), d, proj);
      for (std::size_t j = 0; j < d; ++j) x[j] = x[j] + 1.0 * proj[j];
      kernels::layer_norm_row(x, L.norm_ffn_gain.value.data(), L.norm_ffn_bias.value.data(), h);
      kernels::vec_mat(h, L.ffn_in.value.data().data(), 4 * d, f1);
      const auto b1 = L.ffn_in_bias.value.data();
      for (std::size_t j = 0; j < 4 * d; ++j) f1[j] = kernels::gelu(f1[j] + b1[j]);
      kernels::vec_mat(f1, L.ffn_out.value.data().data(), d, f2);
      const auto b2 = L.ffn_out_bias.value.data();
      for (std::size_t j = 0; j < d; ++j) f2[j] += b2[j];
      for (std::size_t j = 0; j < d; ++j) x[j] = x[j] + 1.0 * f2[j];
    }
    kernels::layer_norm_row(x, dec_.final_gain().value.data(), dec_.final_bias().value.data(), h);
    const std::size_t V = cfg.vocab_size;
    std::vector<double> logits(V);
    kernels::vec_mat(h, dec_.head().value.data().data(), V, logits);
    ++length_;
    return logits;
  }

 private:
  struct Cache {
    std::vector<double> keys, values;
  };
  const ToyDecoder& dec_;
  std::size_t d_ = 0;
  std::size_t length_ = 0;
  std::vector<Cache> caches_;
  std::vector<double> weights_;
};

}  // namespace rover::backbone
