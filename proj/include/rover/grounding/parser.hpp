#pragma once

// Streaming detection of grounding patterns
//   <obj> phrase </obj> [sep] <box> [ x_min , y_min , x_max , y_max ] </box>
// in a token stream, emitting one RoutingEvent per valid closed pattern.

#include <algorithm>
#include <array>
#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "rover/backbone/vocab.hpp"

namespace rover::grounding {

struct BoundingBox {
  int x_min = 0;
  int y_min = 0;
  int x_max = 0;
  int y_max = 0;

  int width() const { return x_max - x_min; }
  int height() const { return y_max - y_min; }
  long area() const { return static_cast<long>(width()) * height(); }
  bool valid() const { return x_min < x_max && y_min < y_max; }

  friend bool operator==(const BoundingBox&, const BoundingBox&) = default;
};

struct ImageExtent {
  int width = 0;
  int height = 0;
};

struct RoutingEvent {
  std::vector<TokenId> phrase;
  int image_index = 1;  // 1-based
  BoundingBox box;
  std::size_t trigger_position = 0;  // stream index of the closing </box>

  friend bool operator==(const RoutingEvent&, const RoutingEvent&) = default;
};

// Token ids of the pattern markers, taken from a Vocabulary.
struct GroundingGrammar {
  TokenId obj_open = 0, obj_close = 0, box_open = 0, box_close = 0;
  TokenId lbracket = 0, rbracket = 0, comma = 0, minus = 0;
  TokenId image_word = 0;
  std::array<TokenId, 10> digits{};
  std::size_t max_separator_tokens = 1;
  std::size_t max_phrase_tokens = 32;
  std::size_t max_payload_tokens = 32;

  static GroundingGrammar from_vocabulary(const Vocabulary& v) {
    GroundingGrammar g;
    g.obj_open = v.id("<obj>");
    g.obj_close = v.id("</obj>");
    g.box_open = v.id("<box>");
    g.box_close = v.id("</box>");
    g.lbracket = v.id("[");
    g.rbracket = v.id("]");
    g.comma = v.id(",");
    g.minus = v.id("-");
    g.image_word = v.id("image");
    for (int d = 0; d < 10; ++d) g.digits[static_cast<std::size_t>(d)] = v.id(std::string(1, static_cast<char>('0' + d)));
    return g;
  }

  bool is_tag(TokenId t) const { return t == obj_open || t == obj_close || t == box_open || t == box_close; }

  int digit_value(TokenId t) const {
    for (int d = 0; d < 10; ++d)
      if (digits[static_cast<std::size_t>(d)] == t) return d;
    return -1;
  }
};

struct ParserDiagnostics {
  std::size_t malformed_patterns = 0;
  std::size_t image_index_defaults = 0;
};

// Parses the payload between <box> and </box>, then clamps to the image.
// Returns nullopt for wrong arity, non-integers, inverted or zero-area boxes.
inline std::optional<BoundingBox> parse_box(std::span<const TokenId> payload, const GroundingGrammar& g,
                                            ImageExtent image) {
  constexpr std::size_t kMaxDigits = 6;
  std::size_t i = 0;
  auto at_end = [&] { return i >= payload.size(); };
  if (at_end() || payload[i] != g.lbracket) return std::nullopt;
  ++i;
  int fields[4];
  for (int f = 0; f < 4; ++f) {
    if (f > 0) {
      if (at_end() || payload[i] != g.comma) return std::nullopt;
      ++i;
    }
    bool negative = false;
    if (!at_end() && payload[i] == g.minus) {
      negative = true;
      ++i;
    }
    std::size_t ndigits = 0;
    long value = 0;
    while (!at_end() && g.digit_value(payload[i]) >= 0) {
      if (++ndigits > kMaxDigits) return std::nullopt;
      value = value * 10 + g.digit_value(payload[i]);
      ++i;
    }
    if (ndigits == 0) return std::nullopt;
    fields[f] = static_cast<int>(negative ? -value : value);
  }
  if (at_end() || payload[i] != g.rbracket) return std::nullopt;
  ++i;
  if (!at_end()) return std::nullopt;
  if (fields[0] >= fields[2] || fields[1] >= fields[3]) return std::nullopt;
  BoundingBox b{std::clamp(fields[0], 0, image.width), std::clamp(fields[1], 0, image.height),
                std::clamp(fields[2], 0, image.width), std::clamp(fields[3], 0, image.height)};
  if (!b.valid()) return std::nullopt;
  return b;
}

// Image index from a terminal "image N" bigram; 1 otherwise. Increments
// `defaults` when an "image N" bigram is present but unusable.
inline int extract_image_index(std::span<const TokenId> phrase, int image_count, const GroundingGrammar& g,
                               std::size_t* defaults = nullptr) {
  auto note = [&] {
    if (defaults) ++*defaults;
  };
  const std::size_t n = phrase.size();
  if (n >= 2 && phrase[n - 2] == g.image_word) {
    const int v = g.digit_value(phrase[n - 1]);
    if (v >= 1 && v <= image_count) return v;
    if (v >= 0) note();
    return 1;
  }
  for (std::size_t i = 0; i + 1 < n; ++i)
    if (phrase[i] == g.image_word && g.digit_value(phrase[i + 1]) >= 0) {
      note();
      break;
    }
  return 1;
}

// Incremental parser; one instance per trajectory.
class StreamingParser {
 public:
  StreamingParser(GroundingGrammar grammar, std::vector<ImageExtent> images)
      : g_(std::move(grammar)), images_(std::move(images)) {}

  // Feeds one token; returns an event exactly when it closes a valid pattern.
  std::optional<RoutingEvent> feed(TokenId t) {
    const std::size_t pos = position_++;
    return step(t, pos);
  }

  std::size_t tokens_seen() const { return position_; }
  const ParserDiagnostics& diagnostics() const { return diag_; }
  const GroundingGrammar& grammar() const { return g_; }
  const std::vector<ImageExtent>& images() const { return images_; }

  // True while a pattern is open (between <obj> and </box>).
  bool in_pattern() const { return state_ != State::Idle; }

 private:
  enum class State { Idle, Phrase, AfterObj, Box };

  std::optional<RoutingEvent> step(TokenId t, std::size_t pos) {
    switch (state_) {
      case State::Idle:
        if (t == g_.obj_open) begin_phrase();
        return std::nullopt;

      case State::Phrase:
        if (t == g_.obj_close) {
          if (phrase_.empty()) return malformed(t, pos);
          state_ = State::AfterObj;
          separators_ = 0;
          return std::nullopt;
        }
        if (g_.is_tag(t) || phrase_.size() >= g_.max_phrase_tokens) return malformed(t, pos);
        phrase_.push_back(t);
        return std::nullopt;

      case State::AfterObj:
        if (t == g_.box_open) {
          state_ = State::Box;
          payload_.clear();
          return std::nullopt;
        }
        if (g_.is_tag(t) || ++separators_ > g_.max_separator_tokens) return malformed(t, pos);
        return std::nullopt;

      case State::Box:
        if (t == g_.box_close) return close(pos);
        if (g_.is_tag(t) || payload_.size() >= g_.max_payload_tokens) return malformed(t, pos);
        payload_.push_back(t);
        return std::nullopt;
    }
    return std::nullopt;
  }

  void begin_phrase() {
    state_ = State::Phrase;
    phrase_.clear();
  }

  // Abandon the open pattern and let the offending token start afresh.
  std::optional<RoutingEvent> malformed(TokenId t, std::size_t pos) {
    ++diag_.malformed_patterns;
    state_ = State::Idle;
    return step(t, pos);
  }

  std::optional<RoutingEvent> close(std::size_t pos) {
    state_ = State::Idle;
    const int m = extract_image_index(phrase_, static_cast<int>(images_.size()), g_, &diag_.image_index_defaults);
    if (images_.empty()) {
      ++diag_.malformed_patterns;
      return std::nullopt;
    }
    auto box = parse_box(payload_, g_, images_[static_cast<std::size_t>(m - 1)]);
    if (!box) {
      ++diag_.malformed_patterns;
      return std::nullopt;
    }
    return RoutingEvent{phrase_, m, *box, pos};
  }

  GroundingGrammar g_;
  std::vector<ImageExtent> images_;
  State state_ = State::Idle;
  std::vector<TokenId> phrase_;
  std::vector<TokenId> payload_;
  std::size_t separators_ = 0;
  std::size_t position_ = 0;
  ParserDiagnostics diag_;
};

}  // namespace rover::grounding
