#pragma once

// Mixed-sequence construction, teacher forcing and the interleaved decoding
// loop: sample a token, feed the grounding parser, and on every routing event
// inject the router's vectors before continuing.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include "rover/backbone/decoder.hpp"
#include "rover/backbone/vocab.hpp"
#include "rover/grounding/parser.hpp"
#include "rover/router/router.hpp"
#include "rover/scene/scene.hpp"
#include "rover/util/random.hpp"

namespace rover::backbone {

enum class PositionKind { Token, Patch, Injected };

struct Position {
  PositionKind kind = PositionKind::Token;
  TokenId token = -1;
  int image = 0;  // 1-based, patch positions
  std::size_t patch = 0;
  router::InjectedKind injected = router::InjectedKind::Link;
  std::size_t event = 0;  // 1-based, injected positions
  bool supervised = false;  // m_t
};

struct SequenceState {
  std::vector<Position> positions;
  std::size_t input_length = 0;  // BOS, images and prompt
  std::vector<grounding::RoutingEvent> events;

  std::size_t size() const { return positions.size(); }

  std::size_t injected_count() const {
    std::size_t n = 0;
    for (const auto& p : positions) n += p.kind == PositionKind::Injected;
    return n;
  }

  std::size_t target_count() const {
    std::size_t n = 0;
    for (std::size_t i = input_length; i < positions.size(); ++i) n += positions[i].kind == PositionKind::Token;
    return n;
  }

  std::vector<TokenId> target_tokens() const {
    std::vector<TokenId> out;
    for (std::size_t i = input_length; i < positions.size(); ++i)
      if (positions[i].kind == PositionKind::Token) out.push_back(positions[i].token);
    return out;
  }

  // Positions t with m_t = 1.
  std::vector<std::size_t> supervised_positions() const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < positions.size(); ++i)
      if (positions[i].supervised) out.push_back(i);
    return out;
  }
};

inline std::vector<grounding::ImageExtent> extents(const std::vector<scene::ImageFeatures>& images) {
  std::vector<grounding::ImageExtent> out;
  for (const auto& f : images) out.push_back(f.spec.extent());
  return out;
}

// BOS, then per image <image_sep> and its patches, then the prompt; m_t = 0
// everywhere.
inline SequenceState embed_inputs(const std::vector<scene::ImageFeatures>& images, std::span<const TokenId> prompt) {
  if (images.empty()) throw ContractError("embed_inputs: at least one image required");
  if (prompt.empty()) throw ContractError("embed_inputs: empty prompt");
  SequenceState s;
  s.positions.push_back({PositionKind::Token, Vocabulary::kBos});
  for (const auto& img : images) {
    s.positions.push_back({PositionKind::Token, Vocabulary::kImageSep});
    for (std::size_t p = 0; p < img.patches.rows(); ++p) {
      Position pos;
      pos.kind = PositionKind::Patch;
      pos.image = img.image_index;
      pos.patch = p;
      s.positions.push_back(pos);
    }
  }
  for (TokenId t : prompt) s.positions.push_back({PositionKind::Token, t});
  s.input_length = s.positions.size();
  return s;
}

inline void append_target(SequenceState& s, TokenId t) {
  Position p;
  p.kind = PositionKind::Token;
  p.token = t;
  p.supervised = true;
  s.positions.push_back(p);
}

inline void append_injected(SequenceState& s, router::InjectedKind kind, std::size_t event) {
  Position p;
  p.kind = PositionKind::Injected;
  p.injected = kind;
  p.event = event;
  s.positions.push_back(p);
}

inline const scene::ImageFeatures& image_by_index(const std::vector<scene::ImageFeatures>& images, int index) {
  for (const auto& f : images)
    if (f.image_index == index) return f;
  throw ContractError("no image with index " + std::to_string(index));
}

// Result of a teacher-forced (or re-scored) pass on a tape.
struct ScoredSequence {
  SequenceState state;
  Var hidden;                                 // T x d final hidden states
  std::vector<std::size_t> predictor_rows;    // row t-1 for every supervised t
  std::vector<std::size_t> targets;           // y_t for every supervised t
  std::vector<router::RoutingTrace> traces;   // when requested
  std::vector<std::vector<double>> injected;  // injected vector values, in order
};

// Builds the full sequence from targets, inserting router vectors at every
// valid grounding pattern exactly as decoding does, and runs the decoder on
// the tape. `Model` is RoverModel (gradients) or const RoverModel.
template <typename Model>
ScoredSequence teacher_force(Tape& tape, Model& model, const grounding::GroundingGrammar& grammar,
                             const std::vector<scene::ImageFeatures>& images, std::span<const TokenId> prompt,
                             std::span<const TokenId> targets, bool trace = false) {
  ScoredSequence out;
  out.state = embed_inputs(images, prompt);
  grounding::StreamingParser parser(grammar, extents(images));
  router::RoutingSession<std::remove_reference_t<decltype((model.router))>> routing(model.router, tape);
  std::vector<Var> injected;
  for (TokenId t : targets) {
    append_target(out.state, t);
    if (auto ev = parser.feed(t)) {
      const auto& img = image_by_index(images, ev->image_index);
      router::RoutingTrace tr;
      auto vecs = routing.route(img, ev->box, trace ? &tr : nullptr);
      if (trace && !vecs.empty()) out.traces.push_back(std::move(tr));
      for (auto& v : vecs) {
        append_injected(out.state, v.kind, routing.events());
        injected.push_back(v.value);
        out.injected.emplace_back(v.value.value().data().begin(), v.value.value().data().end());
      }
      out.state.events.push_back(std::move(*ev));
    }
  }

  // Input rows in sequence order.
  DecoderLeaves<std::remove_reference_t<decltype((model.decoder))>> leaves(tape, model.decoder);
  std::vector<TokenId> token_ids;
  std::vector<std::size_t> token_slot(out.state.size()), patch_slot(out.state.size());
  std::vector<std::size_t> image_offset;
  Tensor all_patches;
  {
    std::size_t n = 0, d = images.front().patches.cols();
    for (const auto& img : images) n += img.patches.rows();
    all_patches = Tensor({n, d});
    std::size_t r = 0;
    for (const auto& img : images) {
      image_offset.push_back(r);
      std::copy(img.patches.data().begin(), img.patches.data().end(), all_patches.data().begin() + r * d);
      r += img.patches.rows();
    }
  }
  std::size_t inj = 0;
  std::vector<ops::RowRef> rows_spec;
  for (std::size_t i = 0; i < out.state.size(); ++i)
    if (out.state.positions[i].kind == PositionKind::Token) {
      token_slot[i] = token_ids.size();
      token_ids.push_back(out.state.positions[i].token);
    }
  std::vector<std::size_t> tok_idx(token_ids.begin(), token_ids.end());
  Var tok_rows = ops::gather_rows(leaves.token_embedding, tok_idx);
  Var patch_rows = ops::add_row(ops::matmul(tape.constant(all_patches), leaves.patch_proj), leaves.patch_bias);
  for (std::size_t i = 0; i < out.state.size(); ++i) {
    const auto& p = out.state.positions[i];
    switch (p.kind) {
      case PositionKind::Token: rows_spec.push_back({tok_rows, token_slot[i]}); break;
      case PositionKind::Patch: {
        std::size_t m = 0;
        while (images[m].image_index != p.image) ++m;
        rows_spec.push_back({patch_rows, image_offset[m] + p.patch});
        break;
      }
      case PositionKind::Injected: rows_spec.push_back({injected[inj++], 0}); break;
    }
  }
  Var inputs = ops::stack_rows(rows_spec);
  out.hidden = decoder_hidden(tape, leaves, inputs, model.config.heads);
  for (std::size_t t = 1; t < out.state.size(); ++t)
    if (out.state.positions[t].supervised) {
      out.predictor_rows.push_back(t - 1);
      out.targets.push_back(static_cast<std::size_t>(out.state.positions[t].token));
    }
  return out;
}

// Logits at every position (T x |vocab|).
template <typename Model>
Var forward_logits(Tape& tape, Model& model, const ScoredSequence& seq) {
  return ops::matmul(seq.hidden, tape.parameter(model.decoder.head()));
}

// Per-position labels: y_t at target positions, -1 everywhere else.
inline std::vector<TokenId> position_labels(const SequenceState& s) {
  std::vector<TokenId> out(s.size(), -1);
  for (std::size_t t = 0; t < s.size(); ++t)
    if (s.positions[t].kind == PositionKind::Token && t >= s.input_length) out[t] = s.positions[t].token;
  return out;
}

// log p(labels[t] | positions < t) for every t with m_t = 1, as a rank-1 Var.
// Labels at m_t = 0 positions are never read.
template <typename Model>
Var masked_logprobs(Tape& tape, Model& model, const ScoredSequence& seq, std::span<const TokenId> labels) {
  if (seq.predictor_rows.empty()) throw ContractError("masked_logprobs: no supervised positions");
  if (labels.size() != seq.state.size()) throw ContractError("masked_logprobs: one label per position required");
  std::vector<std::size_t> picks;
  picks.reserve(seq.predictor_rows.size());
  for (std::size_t r : seq.predictor_rows) {
    const TokenId y = labels[r + 1];
    if (y < 0 || static_cast<std::size_t>(y) >= model.config.vocab_size)
      throw ContractError("masked_logprobs: supervised position without a valid label");
    picks.push_back(static_cast<std::size_t>(y));
  }
  Var h = ops::gather_rows(seq.hidden, seq.predictor_rows);
  Var logits = ops::matmul(h, tape.parameter(model.decoder.head()));
  return ops::log_softmax_pick(logits, picks);
}

template <typename Model>
Var target_logprobs(Tape& tape, Model& model, const ScoredSequence& seq) {
  return masked_logprobs(tape, model, seq, position_labels(seq.state));
}

struct SamplingConfig {
  bool greedy = true;
  double temperature = 1.0;
  std::uint64_t seed = 0;
};

struct InjectionRecord {
  std::size_t position = 0;
  std::size_t event = 0;
  router::InjectedKind kind = router::InjectedKind::Link;
};

struct Trajectory {
  SequenceState state;
  std::vector<TokenId> tokens;    // sampled tokens, EOS included when produced
  std::vector<double> logprobs;   // log p(y_t) under the sampling model, per sampled token
  std::vector<InjectionRecord> injections;
  std::vector<router::RoutingTrace> traces;
  bool truncated = false;
  double reward = 0.0;
  std::size_t malformed_patterns = 0;
};

// Observer for each sampled position: (position, logits row).
using LogitsObserver = std::function<void(std::size_t, std::span<const double>)>;

inline TokenId sample_token(std::span<const double> logits, const SamplingConfig& cfg, Rng& rng) {
  if (cfg.greedy) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < logits.size(); ++i)
      if (logits[i] > logits[best]) best = i;
    return static_cast<TokenId>(best);
  }
  std::vector<double> scaled(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) scaled[i] = logits[i] / cfg.temperature;
  std::vector<double> p(logits.size());
  kernels::softmax_row(scaled, p);
  double u = rng.uniform();
  for (std::size_t i = 0; i < p.size(); ++i) {
    u -= p[i];
    if (u < 0.0) return static_cast<TokenId>(i);
  }
  return static_cast<TokenId>(p.size() - 1);
}

// Chooses the next token from the logits at the last position.
using TokenChooser = std::function<TokenId(std::span<const double>)>;

namespace detail {

inline Trajectory run_decode_loop(const RoverModel& model, const grounding::GroundingGrammar& grammar,
                                  const std::vector<scene::ImageFeatures>& images, std::span<const TokenId> prompt,
                                  const TokenChooser& choose, std::size_t max_len, bool trace,
                                  const LogitsObserver& observer) {
  Trajectory traj;
  traj.state = embed_inputs(images, prompt);
  if (max_len < traj.state.size()) throw ContractError("decode: max_len shorter than the prompt");
  max_len = std::min(max_len, model.config.max_len);
  DecoderSession session(model.decoder);
  std::vector<double> logits;
  for (const auto& p : traj.state.positions) {
    if (p.kind == PositionKind::Token) logits = session.push(session.token_row(p.token));
    else logits = session.push(session.patch_row(image_by_index(images, p.image).patches.row(p.patch)));
  }
  grounding::StreamingParser parser(grammar, extents(images));
  Tape tape(false);
  router::RoutingSession<const router::Router> routing(model.router, tape);
  for (;;) {
    if (traj.state.size() >= max_len) {
      traj.truncated = true;
      break;
    }
    if (observer) observer(traj.state.size() - 1, logits);
    const TokenId y = choose(logits);
    if (y < 0) break;
    traj.tokens.push_back(y);
    traj.logprobs.push_back(kernels::log_softmax_at(logits, static_cast<std::size_t>(y)));
    append_target(traj.state, y);
    if (y == Vocabulary::kEos) break;
    if (traj.state.size() >= max_len) {
      traj.truncated = true;
      break;
    }
    logits = session.push(session.token_row(y));
    if (auto ev = parser.feed(y)) {
      const auto& img = image_by_index(images, ev->image_index);
      router::RoutingTrace tr;
      auto vecs = routing.route(img, ev->box, trace ? &tr : nullptr);
      if (trace && !vecs.empty()) traj.traces.push_back(std::move(tr));
      for (auto& v : vecs) {
        if (traj.state.size() >= max_len) break;
        traj.injections.push_back({traj.state.size(), routing.events(), v.kind});
        append_injected(traj.state, v.kind, routing.events());
        logits = session.push(v.value.value().data());
      }
      traj.state.events.push_back(std::move(*ev));
    }
  }
  traj.malformed_patterns = parser.diagnostics().malformed_patterns;
  return traj;
}

}  // namespace detail

// Interleaved decoding. Terminates on EOS or when the sequence reaches
// max_len positions (flagged truncated).
inline Trajectory decode(const RoverModel& model, const grounding::GroundingGrammar& grammar,
                         const std::vector<scene::ImageFeatures>& images, std::span<const TokenId> prompt,
                         const SamplingConfig& sampling, std::size_t max_len, bool trace = false,
                         const LogitsObserver& observer = {}) {
  Rng rng(sampling.seed);
  return detail::run_decode_loop(
      model, grammar, images, prompt, [&](std::span<const double> l) { return sample_token(l, sampling, rng); },
      max_len, trace, observer);
}

// Feeds a fixed token string through the incremental decoding loop, recording
// log-probabilities and injections exactly as decode would.
inline Trajectory replay(const RoverModel& model, const grounding::GroundingGrammar& grammar,
                         const std::vector<scene::ImageFeatures>& images, std::span<const TokenId> prompt,
                         std::span<const TokenId> tokens, std::size_t max_len, bool trace = false) {
  std::size_t next = 0;
  return detail::run_decode_loop(
      model, grammar, images, prompt,
      [&](std::span<const double>) { return next < tokens.size() ? tokens[next++] : TokenId{-1}; }, max_len, trace,
      {});
}

}  // namespace rover::backbone
