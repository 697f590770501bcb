#pragma once

// Independent reference implementations used as test oracles. None of these
// call into the tape, the kernels or the streaming parser.

#include <cmath>
#include <cstddef>
#include <algorithm>
#include <optional>
#include <regex>
#include <string>
#include <vector>

#include "rover/backbone/vocab.hpp"
#include "rover/grounding/parser.hpp"
#include "rover/tasks/tasks.hpp"

namespace oracle {

using Matrix = std::vector<std::vector<double>>;

inline Matrix mat(const rover::Tensor& t) {
  Matrix m(t.rows(), std::vector<double>(t.cols()));
  for (std::size_t i = 0; i < t.rows(); ++i)
    for (std::size_t j = 0; j < t.cols(); ++j) m[i][j] = t.at(i, j);
  return m;
}

inline Matrix mul(const Matrix& a, const Matrix& b) {
  Matrix c(a.size(), std::vector<double>(b.front().size(), 0.0));
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < b.front().size(); ++j) {
      long double s = 0.0L;
      for (std::size_t p = 0; p < b.size(); ++p) s += static_cast<long double>(a[i][p]) * b[p][j];
      c[i][j] = static_cast<double>(s);
    }
  return c;
}

inline Matrix softmax_rows(const Matrix& x) {
  Matrix out = x;
  for (auto& row : out) {
    double mx = row[0];
    for (double v : row) mx = v > mx ? v : mx;
    long double z = 0.0L;
    for (double& v : row) {
      v = std::exp(v - mx);
      z += v;
    }
    for (double& v : row) v = static_cast<double>(v / z);
  }
  return out;
}

struct DiffAttnResult {
  Matrix diff;    // q x n map
  Matrix output;  // q x d
};

// (softmax(Q1 K1^T/sqrt(h)) - lambda softmax(Q2 K2^T/sqrt(h))) (K Wv) Wout, straight-line.
inline DiffAttnResult diff_attn(const Matrix& queries, const Matrix& keys, const Matrix& wq, const Matrix& wk,
                                const Matrix& wv, const Matrix& wout, double lambda) {
  const Matrix q = mul(queries, wq), k = mul(keys, wk), v = mul(keys, wv);
  const std::size_t d = q.front().size(), h = d / 2;
  auto scores = [&](std::size_t c0) {
    Matrix s(q.size(), std::vector<double>(k.size()));
    for (std::size_t i = 0; i < q.size(); ++i)
      for (std::size_t j = 0; j < k.size(); ++j) {
        long double acc = 0.0L;
        for (std::size_t c = 0; c < h; ++c) acc += static_cast<long double>(q[i][c0 + c]) * k[j][c0 + c];
        s[i][j] = static_cast<double>(acc) / std::sqrt(static_cast<double>(h));
      }
    return softmax_rows(s);
  };
  const Matrix a1 = scores(0), a2 = scores(h);
  DiffAttnResult r;
  r.diff = a1;
  for (std::size_t i = 0; i < a1.size(); ++i)
    for (std::size_t j = 0; j < a1[i].size(); ++j) r.diff[i][j] = a1[i][j] - lambda * a2[i][j];
  r.output = mul(mul(r.diff, v), wout);
  return r;
}

// ---- grounding --------------------------------------------------------------

struct Event {
  std::vector<rover::TokenId> phrase;
  int image = 1;
  rover::grounding::BoundingBox box;
  std::size_t position = 0;
  bool operator==(const Event&) const = default;
};

// Offline scan: tokens become characters, closed patterns are found with a
// regular expression (leftmost, non-overlapping), and each match is
// validated on its own.
inline std::vector<Event> parse_offline(const std::vector<rover::TokenId>& tokens, const rover::Vocabulary& vocab,
                                        const std::vector<std::pair<int, int>>& extents) {
  std::string s;
  for (auto t : tokens) {
    const std::string& w = vocab.token(t);
    s += w == "<obj>" ? 'O' : w == "</obj>" ? 'C' : w == "<box>" ? 'B' : w == "</box>" ? 'E' : 'x';
  }
  static const std::regex pattern("O([^OCBE]{1,32})C[^OCBE]?B([^OCBE]{0,32})E");
  std::vector<Event> out;
  for (auto it = std::sregex_iterator(s.begin(), s.end(), pattern); it != std::sregex_iterator(); ++it) {
    const auto& m = *it;
    const auto p0 = static_cast<std::size_t>(m.position(1)), pn = static_cast<std::size_t>(m.length(1));
    const auto b0 = static_cast<std::size_t>(m.position(2)), bn = static_cast<std::size_t>(m.length(2));
    std::vector<rover::TokenId> phrase(tokens.begin() + p0, tokens.begin() + p0 + pn);
    int image = 1;
    if (pn >= 2 && vocab.token(phrase[pn - 2]) == "image") {
      const std::string& w = vocab.token(phrase[pn - 1]);
      if (w.size() == 1 && w[0] >= '1' && w[0] <= '9' && w[0] - '0' <= static_cast<int>(extents.size()))
        image = w[0] - '0';
    }
    std::string payload;
    for (std::size_t i = b0; i < b0 + bn; ++i) {
      const std::string& w = vocab.token(tokens[i]);
      payload += (w.size() == 1 && std::string("0123456789[],-").find(w[0]) != std::string::npos) ? w : "?";
    }
    static const std::regex box("\\[(-?[0-9]{1,6}),(-?[0-9]{1,6}),(-?[0-9]{1,6}),(-?[0-9]{1,6})\\]");
    std::smatch bm;
    if (!std::regex_match(payload, bm, box)) continue;
    int v[4];
    for (int i = 0; i < 4; ++i) v[i] = std::stoi(bm[static_cast<std::size_t>(i + 1)].str());
    if (!(v[0] < v[2] && v[1] < v[3])) continue;
    const auto [W, H] = extents[static_cast<std::size_t>(image - 1)];
    auto clampi = [](int x, int hi) { return x < 0 ? 0 : x > hi ? hi : x; };
    rover::grounding::BoundingBox b{clampi(v[0], W), clampi(v[1], H), clampi(v[2], W), clampi(v[3], H)};
    if (!(b.x_min < b.x_max && b.y_min < b.y_max)) continue;
    out.push_back({phrase, image, b, static_cast<std::size_t>(m.position(0) + m.length(0) - 1)});
  }
  return out;
}

// ---- training ---------------------------------------------------------------

inline double exact_kl(const std::vector<double>& logits_p, const std::vector<double>& logits_q) {
  auto probs = [](const std::vector<double>& l) {
    Matrix m{l};
    return softmax_rows(m)[0];
  };
  const auto p = probs(logits_p), q = probs(logits_q);
  double kl = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i)
    if (p[i] > 0.0) kl += p[i] * (std::log(p[i]) - std::log(q[i]));
  return kl;
}

// ---- tasks ------------------------------------------------------------------

// Best-effort reasoner that sees the question and image m (1-based) only.
// It recovers the anchor colour when the anchor image is visible and
// otherwise guesses the most frequent colour in view; it then answers from
// the objects it can see, falling back to the alphabetically first option.
inline std::string single_image_answer(const rover::tasks::TaskInstance& inst, int m) {
  using rover::words::kColors;
  using rover::words::kShapes;
  const auto& q = inst.question;
  const int anchor = inst.references.front().image;
  int anchor_shape = -1;
  for (const auto& w : q)
    for (std::size_t s = 0; s < kShapes.size(); ++s)
      if (w == kShapes[s]) anchor_shape = static_cast<int>(s);
  const auto& sc = inst.scenes[static_cast<std::size_t>(m - 1)];
  int color = -1;
  std::size_t anchor_slot = sc.size();
  if (m == anchor)
    for (std::size_t i = 0; i < sc.size(); ++i)
      if (sc[i].shape == anchor_shape) {
        color = sc[i].color;
        anchor_slot = i;
      }
  if (color < 0) {
    std::vector<int> freq(kColors.size(), 0);
    for (const auto& o : sc) ++freq[static_cast<std::size_t>(o.color)];
    std::vector<int> order(kColors.size());
    for (std::size_t c = 0; c < order.size(); ++c) order[c] = static_cast<int>(c);
    std::sort(order.begin(), order.end(), [&](int a, int b) {
      if (freq[a] != freq[b]) return freq[a] > freq[b];
      return kColors[a] < kColors[b];
    });
    color = order.front();
  }
  auto is_option = [&](const std::string& w) {
    return std::find(inst.options.begin(), inst.options.end(), w) != inst.options.end();
  };
  std::vector<std::string> sorted = inst.options;
  std::sort(sorted.begin(), sorted.end());
  if (inst.family == rover::tasks::Family::Comparison) {
    for (std::size_t i = 0; i < sc.size(); ++i)
      if (i != anchor_slot && sc[i].color == color && is_option(kShapes[static_cast<std::size_t>(sc[i].shape)]))
        return kShapes[static_cast<std::size_t>(sc[i].shape)];
  } else if (inst.family == rover::tasks::Family::Counting) {
    int n = 0;
    for (std::size_t i = 0; i < sc.size(); ++i) n += i != anchor_slot && sc[i].color == color;
    if (n < static_cast<int>(rover::words::kNumbers.size()) && is_option(rover::words::kNumbers[n]))
      return rover::words::kNumbers[n];
  }
  return sorted.front();
}

}  // namespace oracle
