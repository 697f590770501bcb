#pragma once

// Synthetic multi-image grounded question answering: instance generator,
// binary reward, and line-delimited corpus I/O.

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "rover/backbone/vocab.hpp"
#include "rover/grounding/parser.hpp"
#include "rover/scene/scene.hpp"
#include "rover/util/random.hpp"

namespace rover::tasks {

using grounding::BoundingBox;
using Words = std::vector<std::string>;

class GenerationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class CorpusError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Family { Attribute, Comparison, Counting, Judgement };

inline const char* to_string(Family f) {
  switch (f) {
    case Family::Attribute: return "attribute";
    case Family::Comparison: return "comparison";
    case Family::Counting: return "counting";
    case Family::Judgement: return "judgement";
  }
  return "?";
}

inline Family parse_family(const std::string& s) {
  for (Family f : {Family::Attribute, Family::Comparison, Family::Counting, Family::Judgement})
    if (s == to_string(f)) return f;
  throw std::invalid_argument("unknown task family '" + s + "'");
}

inline bool cross_image(Family f) { return f == Family::Comparison || f == Family::Counting; }

struct FamilyConfig {
  Family family = Family::Comparison;
  int images = 4;
  scene::ImageSpec spec;
  int distractors = 1;  // per referenced image

  static FamilyConfig defaults(Family f) {
    FamilyConfig c;
    c.family = f;
    switch (f) {
      case Family::Attribute: c.images = 1; break;
      case Family::Comparison: c.images = 4; break;
      case Family::Counting:
        c.images = 2;
        c.spec = {48, 48, 16};
        break;
      case Family::Judgement: c.images = 2; break;
    }
    return c;
  }

  void validate() const {
    spec.validate();
    if (images < 1 || images > 4) throw GenerationError("family config: images must be in [1, 4]");
    if (distractors < 0) throw GenerationError("family config: negative distractor count");
    const int cells = static_cast<int>(spec.patch_count());
    if (family != Family::Attribute && images < 2)
      throw GenerationError(std::string("family config: ") + to_string(family) + " needs at least 2 images");
    if (1 + distractors > cells) throw GenerationError("family config: too many distractors for the grid");
    if (family == Family::Comparison && cells < 4) throw GenerationError("family config: comparison needs 4 cells");
    if (family == Family::Counting && cells < 6) throw GenerationError("family config: counting needs 6 cells");
  }
};

struct Reference {
  Words phrase;
  int image = 1;
  BoundingBox box;

  friend bool operator==(const Reference&, const Reference&) = default;
};

struct TaskInstance {
  Family family = Family::Comparison;
  std::uint64_t seed = 0;
  int template_id = 0;
  scene::ImageSpec spec;
  std::vector<scene::Scene> scenes;
  Words question;
  Words options;
  std::string answer;
  Words transcript;
  std::vector<Reference> references;

  // Question followed by the option list.
  Words prompt() const {
    Words p = question;
    p.push_back("options");
    p.push_back(":");
    p.insert(p.end(), options.begin(), options.end());
    return p;
  }

  std::size_t answer_slot() const {
    return static_cast<std::size_t>(std::find(options.begin(), options.end(), answer) - options.begin());
  }

  friend bool operator==(const TaskInstance&, const TaskInstance&) = default;
};

// Box tokens with multi-digit coordinates spelled one digit per token.
inline Words box_words(const BoundingBox& b) {
  Words w{"["};
  auto num = [&](int v) {
    if (v < 0) {
      w.push_back("-");
      v = -v;
    }
    for (char c : std::to_string(v)) w.emplace_back(1, c);
  };
  const int f[4] = {b.x_min, b.y_min, b.x_max, b.y_max};
  for (int i = 0; i < 4; ++i) {
    if (i) w.push_back(",");
    num(f[i]);
  }
  w.push_back("]");
  return w;
}

// Keeps the largest of several boxes annotating one object; ties keep the first.
inline BoundingBox largest_box_anchor(const std::vector<BoundingBox>& boxes) {
  if (boxes.empty()) throw GenerationError("largest_box_anchor: no boxes");
  BoundingBox best = boxes.front();
  for (const auto& b : boxes)
    if (b.area() > best.area()) best = b;
  return best;
}

namespace detail {

inline std::string num_word(int n) { return words::kNumbers.at(static_cast<std::size_t>(n)); }
inline const std::string& color_word(int c) { return words::kColors.at(static_cast<std::size_t>(c)); }
inline const std::string& shape_word(int s) { return words::kShapes.at(static_cast<std::size_t>(s)); }

inline Words split(const std::string& s) {
  Words out;
  std::istringstream in(s);
  for (std::string w; in >> w;) out.push_back(w);
  return out;
}

inline std::string join(const Words& w) {
  std::string out;
  for (std::size_t i = 0; i < w.size(); ++i) {
    if (i) out += ' ';
    out += w[i];
  }
  return out;
}

// Fills template placeholders {A} {B} {S} {S2}.
inline Words fill(const std::string& tpl, int a, int b, const std::string& s, const std::string& s2 = "") {
  std::string out = tpl;
  auto rep = [&](const std::string& key, const std::string& val) {
    for (std::size_t p; (p = out.find(key)) != std::string::npos;) out.replace(p, key.size(), val);
  };
  rep("{A}", std::to_string(a));
  rep("{B}", std::to_string(b));
  rep("{S2}", s2);
  rep("{S}", s);
  return split(out);
}

template <typename T>
std::vector<T> pick_distinct(Rng& rng, std::vector<T> pool, std::size_t n) {
  rng.shuffle(pool);
  pool.resize(n);
  return pool;
}

inline std::vector<int> iota(int n) {
  std::vector<int> v(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) v[static_cast<std::size_t>(i)] = i;
  return v;
}

struct Builder {
  const FamilyConfig& cfg;
  Rng& rng;
  std::vector<scene::Scene> scenes;
  std::vector<std::vector<int>> free_cells;
  Words transcript;
  std::vector<Reference> refs;

  Builder(const FamilyConfig& c, Rng& r) : cfg(c), rng(r) {
    scenes.resize(static_cast<std::size_t>(c.images));
    for (int m = 0; m < c.images; ++m) {
      auto cells = iota(static_cast<int>(c.spec.patch_count()));
      rng.shuffle(cells);
      free_cells.push_back(cells);
    }
  }

  // Places an object in a free cell of image m (1-based); returns its slot.
  std::size_t place(int m, int shape, int color, bool distractor) {
    auto& cells = free_cells[static_cast<std::size_t>(m - 1)];
    if (cells.empty()) throw GenerationError("generator: image " + std::to_string(m) + " has no free cell");
    const int cell = cells.back();
    cells.pop_back();
    auto& sc = scenes[static_cast<std::size_t>(m - 1)];
    sc.push_back({shape, color, cfg.spec.patch_box(static_cast<std::size_t>(cell)), distractor});
    return sc.size() - 1;
  }

  // Distractor sharing exactly one attribute with (shape, color). The
  // same-shape kind is only allowed when `shape_ok` (it would otherwise make
  // "the <shape> in image m" ambiguous).
  void distractor(int m, int shape, int color, bool shape_ok) {
    const int ns = static_cast<int>(words::kShapes.size()), nc = static_cast<int>(words::kColors.size());
    if (shape_ok && rng.coin(0.5)) {
      int c = static_cast<int>(rng.below(static_cast<std::uint64_t>(nc - 1)));
      if (c >= color) ++c;
      place(m, shape, c, true);
    } else {
      int s = static_cast<int>(rng.below(static_cast<std::uint64_t>(ns - 1)));
      if (s >= shape) ++s;
      place(m, s, color, true);
    }
  }

  // Evidence step: grounding pattern for object `slot` of image m, then the
  // observed attribute word and a period. Annotations sometimes carry a
  // partial box next to the full one; the largest is kept as the anchor.
  void ground(const Words& phrase, int m, std::size_t slot, const std::string& observed) {
    const auto& obj = scenes[static_cast<std::size_t>(m - 1)][slot];
    std::vector<BoundingBox> boxes{obj.box};
    if (rng.coin(0.25)) {
      BoundingBox part = obj.box;
      part.x_max = part.x_min + std::max(1, obj.box.width() / 2);
      boxes.insert(boxes.begin(), part);
    }
    const BoundingBox anchor = largest_box_anchor(boxes);
    transcript.push_back("<obj>");
    transcript.insert(transcript.end(), phrase.begin(), phrase.end());
    transcript.push_back("</obj>");
    transcript.push_back("<box>");
    const Words bw = box_words(anchor);
    transcript.insert(transcript.end(), bw.begin(), bw.end());
    transcript.push_back("</box>");
    transcript.push_back(observed);
    transcript.push_back(".");
    refs.push_back({phrase, m, anchor});
  }

  void finish(const std::string& answer) {
    transcript.push_back("answer");
    transcript.push_back(answer);
    transcript.push_back("<eos>");
  }
};

inline Words the_in(const std::string& what, int m) { return split("the " + what + " in image " + std::to_string(m)); }

inline const std::vector<std::string>& templates(Family f) {
  static const std::vector<std::string> attribute = {
      "what color is the {S} in image {A} ?", "tell me the color of the {S} in image {A} .",
      "which color does the {S} in image {A} have ?", "look at the {S} in image {A} . what color is it ?"};
  static const std::vector<std::string> comparison = {
      "which object in image {B} has the same color as the {S} in image {A} ?",
      "find the object in image {B} that has the same color as the {S} in image {A} .",
      "look at the {S} in image {A} . which object in image {B} matches its color ?",
      "tell me which object in image {B} is the same color as the {S} in image {A} ."};
  static const std::vector<std::string> counting = {
      "how many objects in image {B} have the same color as the {S} in image {A} ?",
      "count the objects in image {B} that match the color of the {S} in image {A} .",
      "look at the {S} in image {A} . how many objects in image {B} have its color ?",
      "tell me how many objects in image {B} are the same color as the {S} in image {A} ."};
  static const std::vector<std::string> judgement = {
      "is the {S} in image {A} the same color as the {S2} in image {B} ?",
      "does the {S} in image {A} have the same color as the {S2} in image {B} ?",
      "do the {S} in image {A} and the {S2} in image {B} have the same color ?",
      "is the color of the {S} in image {A} the same as the {S2} in image {B} ?"};
  switch (f) {
    case Family::Attribute: return attribute;
    case Family::Comparison: return comparison;
    case Family::Counting: return counting;
    case Family::Judgement: return judgement;
  }
  return attribute;
}

// Objects in the images that are neither A nor B.
inline void fill_others(Builder& b, int a, int bb, int shape, int color) {
  for (int m = 1; m <= b.cfg.images; ++m)
    if (m != a && m != bb)
      for (int i = 0; i <= b.cfg.distractors; ++i) b.distractor(m, shape, color, true);
}

}  // namespace detail

// Deterministic per (config, seed).
inline TaskInstance generate_instance(const FamilyConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(mix_seed(seed, 0x7A5C0000ULL + static_cast<std::uint64_t>(cfg.family)));
  using namespace detail;
  TaskInstance inst;
  inst.family = cfg.family;
  inst.seed = seed;
  inst.spec = cfg.spec;
  inst.template_id = static_cast<int>(rng.below(4));
  const std::string& tpl = templates(cfg.family)[static_cast<std::size_t>(inst.template_id)];
  const int ns = static_cast<int>(words::kShapes.size()), nc = static_cast<int>(words::kColors.size());
  Builder b(cfg, rng);

  const int a = static_cast<int>(rng.range(1, cfg.images));
  int bb = a;
  if (cfg.images > 1) {
    bb = static_cast<int>(rng.range(1, cfg.images - 1));
    if (bb >= a) ++bb;
  }

  switch (cfg.family) {
    case Family::Attribute: {
      const int shape = static_cast<int>(rng.below(ns)), color = static_cast<int>(rng.below(nc));
      const std::size_t slot = b.place(a, shape, color, false);
      for (int i = 0; i < cfg.distractors; ++i) b.distractor(a, shape, color, false);
      fill_others(b, a, a, shape, color);
      inst.question = fill(tpl, a, bb, shape_word(shape));
      b.ground(the_in(shape_word(shape), a), a, slot, color_word(color));
      auto opts = pick_distinct(rng, iota(nc), 4);
      if (std::find(opts.begin(), opts.end(), color) == opts.end()) opts[rng.below(4)] = color;
      for (int c : opts) inst.options.push_back(color_word(c));
      inst.answer = color_word(color);
      break;
    }
    case Family::Comparison: {
      const auto shapes = pick_distinct(rng, iota(ns), 4);
      const auto colors = pick_distinct(rng, iota(nc), 4);
      std::vector<std::size_t> slots;
      for (int i = 0; i < 4; ++i) slots.push_back(b.place(bb, shapes[i], colors[i], false));
      const int target = static_cast<int>(rng.below(4));
      const int color = colors[static_cast<std::size_t>(target)];
      const int shape = static_cast<int>(rng.below(ns));
      const std::size_t anchor = b.place(a, shape, color, false);
      for (int i = 0; i < cfg.distractors; ++i) b.distractor(a, shape, color, false);
      fill_others(b, a, bb, shape, color);
      inst.question = fill(tpl, a, bb, shape_word(shape));
      b.ground(the_in(shape_word(shape), a), a, anchor, color_word(color));
      b.ground(the_in(color_word(color) + " object", bb), bb, slots[static_cast<std::size_t>(target)],
               shape_word(shapes[static_cast<std::size_t>(target)]));
      auto opts = shapes;
      rng.shuffle(opts);
      for (int s : opts) inst.options.push_back(shape_word(s));
      inst.answer = shape_word(shapes[static_cast<std::size_t>(target)]);
      break;
    }
    case Family::Counting: {
      // Four colors appear 0, 1, 2 and 3 times in image B, so image B alone
      // leaves every count equally likely.
      const auto colors = pick_distinct(rng, iota(nc), 4);
      auto counts = iota(4);
      rng.shuffle(counts);
      std::vector<std::vector<std::size_t>> by_color(4);
      for (int i = 0; i < 4; ++i)
        for (int k = 0; k < counts[static_cast<std::size_t>(i)]; ++k)
          by_color[static_cast<std::size_t>(i)].push_back(
              b.place(bb, static_cast<int>(rng.below(ns)), colors[static_cast<std::size_t>(i)], false));
      const int pick = static_cast<int>(rng.below(4));
      const int color = colors[static_cast<std::size_t>(pick)];
      const int shape = static_cast<int>(rng.below(ns));
      const std::size_t anchor = b.place(a, shape, color, false);
      for (int i = 0; i < cfg.distractors; ++i) b.distractor(a, shape, color, false);
      fill_others(b, a, bb, shape, color);
      inst.question = fill(tpl, a, bb, shape_word(shape));
      b.ground(the_in(shape_word(shape), a), a, anchor, color_word(color));
      auto hits = by_color[static_cast<std::size_t>(pick)];
      std::sort(hits.begin(), hits.end(), [&](std::size_t x, std::size_t y) {
        const auto& sc = b.scenes[static_cast<std::size_t>(bb - 1)];
        return std::pair(sc[x].box.y_min, sc[x].box.x_min) < std::pair(sc[y].box.y_min, sc[y].box.x_min);
      });
      for (std::size_t s : hits)
        b.ground(the_in(color_word(color) + " object", bb), bb, s,
                 shape_word(b.scenes[static_cast<std::size_t>(bb - 1)][s].shape));
      auto opts = iota(4);
      rng.shuffle(opts);
      for (int n : opts) inst.options.push_back(num_word(n));
      inst.answer = num_word(counts[static_cast<std::size_t>(pick)]);
      break;
    }
    case Family::Judgement: {
      const int s1 = static_cast<int>(rng.below(ns));
      int s2 = static_cast<int>(rng.below(ns - 1));
      if (s2 >= s1) ++s2;
      const int c1 = static_cast<int>(rng.below(nc));
      const bool same = rng.coin(0.5);
      int c2 = c1;
      if (!same) {
        c2 = static_cast<int>(rng.below(nc - 1));
        if (c2 >= c1) ++c2;
      }
      const std::size_t x1 = b.place(a, s1, c1, false);
      for (int i = 0; i < cfg.distractors; ++i) b.distractor(a, s1, c1, false);
      const std::size_t x2 = b.place(bb, s2, c2, false);
      for (int i = 0; i < cfg.distractors; ++i) b.distractor(bb, s2, c2, false);
      fill_others(b, a, bb, s1, c1);
      inst.question = fill(tpl, a, bb, shape_word(s1), shape_word(s2));
      b.ground(the_in(shape_word(s1), a), a, x1, color_word(c1));
      b.ground(the_in(shape_word(s2), bb), bb, x2, color_word(c2));
      Words opts{"yes", "no", "both", "none"};
      rng.shuffle(opts);
      inst.options = opts;
      inst.answer = same ? "yes" : "no";
      break;
    }
  }
  b.finish(inst.answer);
  inst.scenes = std::move(b.scenes);
  inst.transcript = std::move(b.transcript);
  inst.references = std::move(b.refs);
  for (const auto& sc : inst.scenes) scene::validate_scene(sc, cfg.spec);
  return inst;
}

inline std::vector<TaskInstance> generate_corpus(const std::vector<FamilyConfig>& mix, std::size_t count,
                                                 std::uint64_t seed) {
  if (mix.empty() && count > 0) throw GenerationError("generate_corpus: empty family mix");
  std::vector<TaskInstance> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i)
    out.push_back(generate_instance(mix[i % mix.size()], mix_seed(seed, i)));
  return out;
}

// ---- reward ------------------------------------------------------------------

struct AnswerParse {
  bool parsable = false;
  std::string answer;
  std::size_t events = 0;
};

// Structure: evidence with at least one valid grounding pattern and no
// malformed one, then "answer <option> <eos>" and nothing else.
inline AnswerParse parse_answer(const Vocabulary& vocab, const grounding::GroundingGrammar& grammar,
                                const TaskInstance& inst, std::span<const TokenId> tokens, bool truncated) {
  AnswerParse r;
  const std::size_t n = tokens.size();
  if (truncated || n < 3 || tokens[n - 1] != Vocabulary::kEos) return r;
  const TokenId answer_tok = vocab.id("answer");
  if (std::count(tokens.begin(), tokens.end(), answer_tok) != 1 || tokens[n - 3] != answer_tok) return r;
  if (std::count(tokens.begin(), tokens.end(), Vocabulary::kEos) != 1) return r;
  const std::string word = vocab.token(tokens[n - 2]);
  if (std::find(inst.options.begin(), inst.options.end(), word) == inst.options.end()) return r;
  std::vector<grounding::ImageExtent> ext(inst.scenes.size(), inst.spec.extent());
  grounding::StreamingParser parser(grammar, ext);
  for (std::size_t i = 0; i < n - 3; ++i)
    if (parser.feed(tokens[i])) ++r.events;
  if (r.events == 0 || parser.diagnostics().malformed_patterns != 0 || parser.in_pattern()) return r;
  r.parsable = true;
  r.answer = word;
  return r;
}

inline int reward(const Vocabulary& vocab, const grounding::GroundingGrammar& grammar, const TaskInstance& inst,
                  std::span<const TokenId> tokens, bool truncated) {
  const auto p = parse_answer(vocab, grammar, inst, tokens, truncated);
  return p.parsable && p.answer == inst.answer ? 1 : 0;
}

// ---- corpus I/O --------------------------------------------------------------

inline constexpr int kCorpusVersion = 1;

namespace detail {

inline nlohmann::json box_json(const BoundingBox& b) { return {b.x_min, b.y_min, b.x_max, b.y_max}; }

inline BoundingBox box_from(const nlohmann::json& j) {
  if (!j.is_array() || j.size() != 4) throw std::invalid_argument("box must be an array of 4 integers");
  return {j.at(0).get<int>(), j.at(1).get<int>(), j.at(2).get<int>(), j.at(3).get<int>()};
}

inline int index_of(const std::vector<std::string>& list, const std::string& w) {
  auto it = std::find(list.begin(), list.end(), w);
  if (it == list.end()) throw std::invalid_argument("unknown word '" + w + "'");
  return static_cast<int>(it - list.begin());
}

}  // namespace detail

inline nlohmann::json to_json(const TaskInstance& t) {
  using detail::join;
  nlohmann::json scenes = nlohmann::json::array();
  for (const auto& sc : t.scenes) {
    nlohmann::json objs = nlohmann::json::array();
    for (const auto& o : sc)
      objs.push_back({{"shape", detail::shape_word(o.shape)},
                      {"color", detail::color_word(o.color)},
                      {"box", detail::box_json(o.box)},
                      {"distractor", o.distractor}});
    scenes.push_back(objs);
  }
  nlohmann::json refs = nlohmann::json::array();
  for (const auto& r : t.references)
    refs.push_back({{"phrase", join(r.phrase)}, {"image", r.image}, {"box", detail::box_json(r.box)}});
  return {{"family", to_string(t.family)},
          {"seed", t.seed},
          {"template", t.template_id},
          {"spec", {t.spec.width, t.spec.height, t.spec.patch}},
          {"scenes", scenes},
          {"question", join(t.question)},
          {"options", t.options},
          {"answer", t.answer},
          {"transcript", join(t.transcript)},
          {"references", refs}};
}

inline TaskInstance from_json(const nlohmann::json& j) {
  TaskInstance t;
  t.family = parse_family(j.at("family").get<std::string>());
  t.seed = j.at("seed").get<std::uint64_t>();
  t.template_id = j.at("template").get<int>();
  const auto& s = j.at("spec");
  t.spec = {s.at(0).get<int>(), s.at(1).get<int>(), s.at(2).get<int>()};
  for (const auto& sc : j.at("scenes")) {
    scene::Scene objs;
    for (const auto& o : sc)
      objs.push_back({detail::index_of(words::kShapes, o.at("shape").get<std::string>()),
                      detail::index_of(words::kColors, o.at("color").get<std::string>()),
                      detail::box_from(o.at("box")), o.at("distractor").get<bool>()});
    t.scenes.push_back(std::move(objs));
  }
  t.question = detail::split(j.at("question").get<std::string>());
  t.options = j.at("options").get<Words>();
  t.answer = j.at("answer").get<std::string>();
  t.transcript = detail::split(j.at("transcript").get<std::string>());
  for (const auto& r : j.at("references"))
    t.references.push_back({detail::split(r.at("phrase").get<std::string>()), r.at("image").get<int>(),
                            detail::box_from(r.at("box"))});
  if (t.options.size() != 4) throw std::invalid_argument("expected 4 options");
  if (std::find(t.options.begin(), t.options.end(), t.answer) == t.options.end())
    throw std::invalid_argument("answer is not among the options");
  return t;
}

inline void write_corpus(const std::vector<TaskInstance>& instances, std::ostream& out) {
  out << nlohmann::json{{"format", "rover-corpus"}, {"version", kCorpusVersion}, {"count", instances.size()}}.dump()
      << '\n';
  for (const auto& t : instances) out << to_json(t).dump() << '\n';
}

inline std::vector<TaskInstance> read_corpus(std::istream& in) {
  std::vector<TaskInstance> out;
  std::string line;
  std::size_t lineno = 0, expected = 0;
  auto fail = [&](const std::string& why) -> CorpusError {
    return CorpusError("corpus line " + std::to_string(lineno) + ": " + why);
  };
  while (std::getline(in, line)) {
    ++lineno;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw fail(std::string("malformed record (") + e.what() + ")");
    }
    if (lineno == 1) {
      if (j.value("format", "") != "rover-corpus") throw fail("missing corpus header");
      if (j.value("version", 0) != kCorpusVersion) throw fail("unsupported corpus version");
      expected = j.at("count").get<std::size_t>();
      continue;
    }
    try {
      out.push_back(from_json(j));
    } catch (const std::exception& e) {
      throw fail(std::string("invalid record (") + e.what() + ")");
    }
  }
  if (lineno == 0) throw CorpusError("corpus line 1: missing corpus header");
  if (out.size() != expected)
    throw CorpusError("corpus line " + std::to_string(lineno) + ": header declares " + std::to_string(expected) +
                      " records, found " + std::to_string(out.size()));
  return out;
}

inline void save_corpus(const std::vector<TaskInstance>& instances, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::ios_base::failure("cannot open '" + path + "' for writing");
  write_corpus(instances, out);
  if (!out) throw std::ios_base::failure("write to '" + path + "' failed");
}

inline std::vector<TaskInstance> load_corpus(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::ios_base::failure("cannot open '" + path + "'");
  return read_corpus(in);
}

}  // namespace rover::tasks
