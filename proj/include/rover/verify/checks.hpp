#pragma once

// Property and oracle checks shared by the verify subcommand, the acceptance
// binary and the unit tests. Each returns a pass flag and a short detail line.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "rover/backbone/sequence.hpp"
#include "rover/numerics/checkpoint.hpp"
#include "rover/numerics/gradcheck.hpp"
#include "rover/tasks/tasks.hpp"
#include "rover/training/training.hpp"
#include "rover/verify/oracles.hpp"

namespace rover::verify {

struct CheckResult {
  bool pass = true;
  std::string detail;

  void fail(const std::string& why) {
    if (pass) detail = why;
    pass = false;
  }
};

inline bool same_bits(double a, double b) { return std::memcmp(&a, &b, sizeof a) == 0; }

inline bool same_bits(std::span<const double> a, std::span<const double> b) {
  return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
}

// Adds gaussian noise to every tensor of the router; its output projections
// start at zero, which would make several properties hold vacuously.
inline void perturb_router(backbone::RoverModel& model, std::uint64_t seed, double scale = 0.3) {
  Rng rng(mix_seed(seed, 0x9E27));
  for (Parameter* p : model.router.all_tensors())
    for (double& v : p->value.data()) v += scale * rng.normal();
}

// Gives the router's zero-initialized tensors (output projections, Link) a
// standard 1/sqrt(fan_in) draw so every router gradient path is live, and
// leaves everything else at its initial value.
inline void activate_router(backbone::RoverModel& model, std::uint64_t seed) {
  Rng rng(mix_seed(seed, 0xAC7));
  for (Parameter* p : model.router.all_tensors()) {
    const bool zero = std::all_of(p->value.data().begin(), p->value.data().end(), [](double v) { return v == 0.0; });
    const bool is_bias = p->value.rank() == 1 || p->name.find("bias") != std::string::npos ||
                         p->name.find(".b_") != std::string::npos;
    if (!zero || is_bias) continue;
    const double scale = 1.0 / std::sqrt(static_cast<double>(p->value.rank() == 2 ? p->value.rows() : 1));
    for (double& v : p->value.data()) v = scale * rng.normal();
  }
}

inline backbone::RoverModel micro_model(const Vocabulary& vocab, std::size_t d, router::Variant variant,
                                        std::uint64_t seed, std::size_t max_len = 256) {
  backbone::ModelConfig cfg;
  cfg.vocab_size = vocab.size();
  cfg.d = d;
  cfg.variant = variant;
  cfg.seed = seed;
  cfg.max_len = max_len;
  return backbone::RoverModel(cfg);
}

inline scene::ImageFeatures random_image(Rng& rng, int index, const scene::ImageSpec& spec, std::size_t d) {
  scene::ImageFeatures f{index, spec, Tensor({spec.patch_count(), d})};
  for (double& v : f.patches.data()) v = rng.normal();
  return f;
}

// Pixel box covering the patch rectangle [r0, r1] x [c0, c1].
inline grounding::BoundingBox patch_rect_box(const scene::ImageSpec& spec, int r0, int c0, int r1, int c1) {
  return {c0 * spec.patch, r0 * spec.patch, (c1 + 1) * spec.patch, (r1 + 1) * spec.patch};
}

inline grounding::BoundingBox random_patch_box(Rng& rng, const scene::ImageSpec& spec) {
  const int R = spec.grid_rows(), C = spec.grid_cols();
  int r0 = static_cast<int>(rng.below(static_cast<std::uint64_t>(R)));
  int r1 = static_cast<int>(rng.below(static_cast<std::uint64_t>(R)));
  int c0 = static_cast<int>(rng.below(static_cast<std::uint64_t>(C)));
  int c1 = static_cast<int>(rng.below(static_cast<std::uint64_t>(C)));
  if (r0 > r1) std::swap(r0, r1);
  if (c0 > c1) std::swap(c0, c1);
  return patch_rect_box(spec, r0, c0, r1, c1);
}

inline std::vector<TokenId> pattern_tokens(const Vocabulary& vocab, const std::vector<std::string>& phrase,
                                           const grounding::BoundingBox& b) {
  std::vector<std::string> w{"<obj>"};
  w.insert(w.end(), phrase.begin(), phrase.end());
  w.push_back("</obj>");
  w.push_back("<box>");
  const auto bw = tasks::box_words(b);
  w.insert(w.end(), bw.begin(), bw.end());
  w.push_back("</box>");
  return vocab.encode(w);
}

// ---- routing overhead ------------------------------------------------------------

// Replays random token strings through the decode loop and checks that each
// valid pattern adds exactly three injected positions, whatever its box area.
inline CheckResult check_constant_overhead(std::size_t decodes, std::uint64_t seed) {
  CheckResult res;
  Vocabulary vocab;
  const auto grammar = grounding::GroundingGrammar::from_vocabulary(vocab);
  auto model = micro_model(vocab, 32, router::Variant::LSW, seed, 512);
  perturb_router(model, seed);
  Rng rng(mix_seed(seed, 0xC0));
  const std::vector<scene::ImageSpec> specs{{32, 32, 16}, {48, 48, 16}, {64, 64, 16}, {32, 32, 8}};
  const std::vector<std::string> filler{"the", "red", "ball", "is", "in", "image", ".", "1", "2", ",", "[", "answer"};
  std::size_t total_events = 0;
  std::map<std::size_t, std::size_t> area_hist;  // RoI patch count -> events
  for (std::size_t n = 0; n < decodes && res.pass; ++n) {
    const int m = 1 + static_cast<int>(rng.below(4));
    std::vector<scene::ImageFeatures> images;
    for (int i = 1; i <= m; ++i) images.push_back(random_image(rng, i, specs[rng.below(specs.size())], 32));
    std::vector<TokenId> tokens;
    const std::size_t patterns = rng.below(5);
    for (std::size_t k = 0; k < patterns; ++k) {
      for (std::size_t f = rng.below(4); f-- > 0;) tokens.push_back(vocab.id(filler[rng.below(filler.size())]));
      const int img = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(m)));
      const auto& spec = images[static_cast<std::size_t>(img - 1)].spec;
      auto box = random_patch_box(rng, spec);
      if (rng.coin(0.15)) box.x_max = box.x_min;  // degenerate: not an event
      auto p = pattern_tokens(vocab, {"the", "ball", "in", "image", std::to_string(img)}, box);
      tokens.insert(tokens.end(), p.begin(), p.end());
      if (box.valid()) ++area_hist[scene::roi_partition(spec, box).inside.size()];
    }
    tokens.push_back(Vocabulary::kEos);
    const auto prompt = vocab.tokenize("find the ball");
    auto tr = backbone::replay(model, grammar, images, prompt, tokens, 512);
    const std::size_t K = tr.state.events.size();
    std::vector<std::pair<int, int>> ext;
    for (const auto& f : images) ext.push_back({f.spec.width, f.spec.height});
    const std::size_t expected_k = oracle::parse_offline(tokens, vocab, ext).size();
    total_events += K;
    std::vector<std::size_t> per_event(K + 1, 0);
    for (const auto& inj : tr.injections) ++per_event.at(inj.event);
    if (tr.truncated) res.fail("decode " + std::to_string(n) + " truncated");
    else if (K != expected_k)
      res.fail("decode " + std::to_string(n) + ": " + std::to_string(K) + " events, oracle " +
               std::to_string(expected_k));
    else if (tr.state.injected_count() != 3 * K)
      res.fail("decode " + std::to_string(n) + ": " + std::to_string(tr.state.injected_count()) +
               " injected positions for K=" + std::to_string(K));
    else if (tr.state.size() != tr.state.input_length + tr.tokens.size() + 3 * K)
      res.fail("decode " + std::to_string(n) + ": token budget violated");
    for (std::size_t k = 1; k <= K && res.pass; ++k)
      if (per_event[k] != 3) res.fail("event " + std::to_string(k) + " injected " + std::to_string(per_event[k]));
  }
  if (res.pass) {
    res.detail = std::to_string(decodes) + " decodes, " + std::to_string(total_events) + " events";
    if (!area_hist.empty())
      res.detail += ", RoI sizes " + std::to_string(area_hist.begin()->first) + ".." +
                    std::to_string(area_hist.rbegin()->first) + " patches, 3 positions each";
  }
  return res;
}

// ---- fallback -------------------------------------------------------------------------

inline CheckResult check_fallback(std::uint64_t seed) {
  CheckResult res;
  Vocabulary vocab;
  auto model = micro_model(vocab, 32, router::Variant::LSW, seed);
  perturb_router(model, seed);
  Rng rng(mix_seed(seed, 0xFA));
  for (const scene::ImageSpec spec : {scene::ImageSpec{32, 32, 16}, scene::ImageSpec{48, 32, 16}}) {
    const auto img = random_image(rng, 1, spec, 32);
    for (Parameter* p : model.router.all_tensors()) p->zero_grad();
    Tape tape(true);
    router::RoutingSession<router::Router> session(model.router, tape);
    auto vecs = session.route(img, {0, 0, spec.width, spec.height});
    std::vector<std::size_t> all(spec.patch_count());
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
    Var q = router::pool_query(tape, img, all);
    const Var* t_sift = nullptr;
    for (const auto& v : vecs)
      if (v.kind == router::InjectedKind::Sift) t_sift = &v.value;
    if (!t_sift) {
      res.fail("no Sift vector injected");
      return res;
    }
    if (!same_bits(t_sift->value().data(), q.value().data())) res.fail("t_Sift differs from q_k for a full-image box");
    Var total = ops::sum(vecs.front().value);
    for (std::size_t i = 1; i < vecs.size(); ++i) total = ops::add(total, ops::sum(vecs[i].value));
    tape.backward(total);
    for (Parameter* p : model.router.sift_encoder().parameters())
      for (double g : p->grad.data())
        if (g != 0.0) {
          res.fail("non-zero gradient in " + p->name);
          break;
        }
  }
  if (res.pass) res.detail = "t_Sift == q_k bitwise; Sift encoder gradients all zero";
  return res;
}

// ---- differential attention ---------------------------------------------------------

inline CheckResult check_diff_attn_oracle(std::size_t cases, std::uint64_t seed) {
  CheckResult res;
  Rng rng(mix_seed(seed, 0xD1FF));
  double worst = 0.0, worst_sum = 0.0;
  for (std::size_t c = 0; c < cases; ++c) {
    const std::size_t nq = 1 + rng.below(4), n = 1 + rng.below(16), d = 2 * (1 + rng.below(16));
    router::SiftEncoder enc(d, rng);
    for (auto* p : enc.parameters())
      for (double& v : p->value.data()) v = rng.normal() / std::sqrt(static_cast<double>(d));
    enc.lambda.value[0] = rng.uniform();
    Tensor q({nq, d}), k({n, d});
    for (double& v : q.data()) v = rng.normal();
    for (double& v : k.data()) v = rng.normal();
    Tape tape(false);
    router::DiffAttnMaps maps;
    Var out = router::diff_attn(tape, tape.constant(q), tape.constant(k), tape.constant(k), enc, &maps);
    auto ref = oracle::diff_attn(oracle::mat(q), oracle::mat(k), oracle::mat(enc.block.w_q.value),
                                 oracle::mat(enc.block.w_k.value), oracle::mat(enc.block.w_v.value),
                                 oracle::mat(enc.block.w_out.value), enc.lambda.value[0]);
    for (std::size_t i = 0; i < nq; ++i) {
      double row = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        worst = std::max(worst, std::abs(maps.diff.at(i, j) - ref.diff[i][j]));
        row += maps.diff.at(i, j);
      }
      worst_sum = std::max(worst_sum, std::abs(row - (1.0 - enc.lambda.value[0])));
      for (std::size_t j = 0; j < d; ++j) worst = std::max(worst, std::abs(out.value().at(i, j) - ref.output[i][j]));
    }
  }
  std::ostringstream os;
  os << cases << " cases, max abs diff " << worst << ", max |row sum - (1-lambda)| " << worst_sum;
  res.detail = os.str();
  if (!(worst <= 1e-12)) res.fail("oracle mismatch: " + res.detail);
  if (!(worst_sum <= 1e-10)) res.fail("row sums: " + res.detail);
  return res;
}

// ---- working-space causality ----------------------------------------------------------

inline CheckResult check_vws_causality(std::size_t trajectories, std::uint64_t seed) {
  CheckResult res;
  Vocabulary vocab;
  auto model = micro_model(vocab, 32, router::Variant::LSW, seed);
  perturb_router(model, seed);
  const router::Router& r = model.router;
  Rng rng(mix_seed(seed, 0xCA05));
  const scene::ImageSpec spec{32, 32, 8};
  struct Ev {
    int image;
    grounding::BoundingBox box;
  };
  auto run = [&](const std::vector<scene::ImageFeatures>& imgs, const std::vector<Ev>& evs) {
    Tape tape(false);
    router::RoutingSession<const router::Router> s(r, tape);
    std::vector<std::vector<double>> weave;
    for (const auto& e : evs)
      for (const auto& v : s.route(imgs[static_cast<std::size_t>(e.image - 1)], e.box))
        if (v.kind == router::InjectedKind::Weave) weave.emplace_back(v.value.value().data().begin(), v.value.value().data().end());
    return weave;
  };
  for (std::size_t t = 0; t < trajectories && res.pass; ++t) {
    std::vector<scene::ImageFeatures> imgs;
    for (int i = 1; i <= 3; ++i) imgs.push_back(random_image(rng, i, spec, 32));
    auto draw = [&] { return Ev{1 + static_cast<int>(rng.below(3)), random_patch_box(rng, spec)}; };
    std::vector<Ev> evs{draw(), draw(), draw(), draw()};
    const auto full = run(imgs, evs);
    for (std::size_t k = 1; k <= 4 && res.pass; ++k) {
      const auto prefix = run(imgs, std::vector<Ev>(evs.begin(), evs.begin() + static_cast<long>(k)));
      if (!same_bits(prefix[k - 1], full[k - 1])) res.fail("trajectory " + std::to_string(t) + ": event " +
                                                           std::to_string(k) + " differs from truncated recomputation");
      auto other = evs;
      for (std::size_t j = k; j < 4; ++j) other[j] = draw();
      const auto alt = run(imgs, other);
      for (std::size_t j = 0; j < k && res.pass; ++j)
        if (!same_bits(alt[j], full[j]))
          res.fail("trajectory " + std::to_string(t) + ": event " + std::to_string(j + 1) + " depends on later events");
    }
  }
  if (res.pass) res.detail = std::to_string(trajectories) + " four-event trajectories, bitwise";
  return res;
}

// ---- gradients ---------------------------------------------------------------------------

struct MicroTrajectory {
  Vocabulary vocab;
  grounding::GroundingGrammar grammar = grounding::GroundingGrammar::from_vocabulary(vocab);
  std::vector<scene::ImageFeatures> images;
  std::vector<TokenId> prompt, target;
};

// Two images, two grounding patterns with partial boxes, d-wide features.
inline MicroTrajectory micro_trajectory(std::size_t d, std::uint64_t seed) {
  MicroTrajectory m;
  const scene::ImageSpec spec{32, 32, 16};
  scene::FeatureBank bank(seed, d);
  m.images.push_back(scene::featurize({{4, 0, {0, 0, 16, 16}, false}, {1, 2, {16, 16, 32, 32}, false}}, spec, 1, bank));
  m.images.push_back(scene::featurize({{0, 0, {16, 0, 32, 16}, false}, {2, 3, {0, 16, 16, 32}, false}}, spec, 2, bank));
  m.prompt = m.vocab.tokenize("which object in image 2 matches the star in image 1 ?");
  m.target = m.vocab.tokenize(
      "<obj> the star in image 1 </obj> <box> [ 0 , 0 , 1 6 , 1 6 ] </box> red . "
      "<obj> the red object in image 2 </obj> <box> [ 1 6 , 0 , 3 2 , 1 6 ] </box> ball . answer ball <eos>");
  return m;
}

struct GradientCheck {
  CheckResult result;
  GradCheckReport report;
  std::vector<std::string> nonfinite;
};

// Finite-difference noise floor for a loss of magnitude |L|: two rounded
// evaluations differ by up to one ulp each, divided by 2h.
inline double fd_noise_floor(double loss, double h) {
  const double ulp = std::nextafter(std::abs(loss), INFINITY) - std::abs(loss);
  return 2.0 * ulp / (2.0 * h);
}

// Central differences against reverse mode for every trainable tensor of a
// d-wide model on the two-event micro-trajectory, evaluated at the initial
// model with its zero-initialized router tensors drawn (activate_router).
// `lambda_override` injects a value into the Sift lambda before checking
// (fault injection).
inline GradientCheck check_gradients(std::size_t d, double h, double tol, std::uint64_t seed,
                                     std::optional<double> lambda_override = std::nullopt) {
  GradientCheck out;
  auto m = micro_trajectory(d, seed);
  auto model = micro_model(m.vocab, d, router::Variant::LSW, seed, 96);
  activate_router(model, seed);
  if (lambda_override) model.router.sift_encoder().lambda.value[0] = *lambda_override;
  auto params = model.parameters();
  for (const Parameter* p : params)
    for (double v : p->value.data())
      if (!std::isfinite(v)) {
        out.nonfinite.push_back(p->name);
        break;
      }
  if (!out.nonfinite.empty()) {
    std::string names;
    for (const auto& n : out.nonfinite) names += (names.empty() ? "" : ", ") + n;
    out.result.fail("non-finite parameter values in " + names);
    return out;
  }
  training::Example ex{m.images, m.prompt, m.target, nullptr};
  std::vector<const training::Example*> batch{&ex};
  auto loss = [&](Tape& tape) { return training::sft_loss(tape, model, m.grammar, batch).loss; };
  out.report = finite_diff_check(loss, params, h, tol);
  double worst = 0.0;
  std::string worst_name;
  std::vector<std::string> failing;
  std::size_t scalars = 0, mismatches = 0, above_floor = 0;
  double largest_failing = 0.0;
  const double floor = fd_noise_floor(out.report.loss, h);
  for (const auto& p : out.report.params) {
    scalars += p.count;
    if (!p.pass) failing.push_back(p.name);
    if (!(p.max_rel_error <= worst)) {
      worst = p.max_rel_error;
      worst_name = p.name;
    }
    for (const auto& mm : p.mismatches) {
      ++mismatches;
      const double g = std::max(std::abs(mm.analytic), std::abs(mm.numeric));
      largest_failing = std::max(largest_failing, g);
      // Beyond what rounding can explain: |g_ad - g_fd| above the floor.
      if (!(std::abs(mm.analytic - mm.numeric) <= floor)) ++above_floor;
    }
  }
  std::ostringstream os;
  os << out.report.params.size() << " tensors, " << scalars << " scalars, worst rel err " << worst << " ("
     << worst_name << ")";
  if (mismatches)
    os << "; " << mismatches << " scalars over tolerance, largest |g| among them " << largest_failing
       << ", fd noise floor " << floor << ", " << above_floor << " differ by more than the floor";
  out.result.detail = os.str();
  if (!failing.empty()) {
    std::string names;
    for (std::size_t i = 0; i < failing.size() && i < 4; ++i) names += (i ? ", " : "") + failing[i];
    if (failing.size() > 4) names += " and " + std::to_string(failing.size() - 4) + " more";
    out.result.fail("gradient mismatch in " + names + "; " + os.str());
  }
  return out;
}

// ---- mask discipline ---------------------------------------------------------------------

inline std::vector<training::Example> sample_examples(const Vocabulary& vocab, std::size_t d, tasks::Family family,
                                                      std::size_t count, std::uint64_t seed,
                                                      std::vector<tasks::TaskInstance>& storage,
                                                      std::uint64_t feature_seed = 11) {
  storage = tasks::generate_corpus({tasks::FamilyConfig::defaults(family)}, count, seed);
  return training::encode_all(storage, vocab, scene::FeatureBank(feature_seed, d));
}

inline CheckResult check_mask_discipline(std::uint64_t seed) {
  CheckResult res;
  Vocabulary vocab;
  const auto grammar = grounding::GroundingGrammar::from_vocabulary(vocab);
  auto model = micro_model(vocab, 32, router::Variant::LSW, seed);
  perturb_router(model, seed);
  std::vector<tasks::TaskInstance> insts;
  auto exs = sample_examples(vocab, 32, tasks::Family::Comparison, 3, seed, insts);
  std::vector<const training::Example*> batch;
  for (const auto& e : exs) batch.push_back(&e);
  Rng rng(mix_seed(seed, 0x3A5C));
  std::size_t perturbed = 0;
  const training::LabelHook scramble = [&](const backbone::SequenceState& s, std::vector<TokenId>& labels) {
    for (std::size_t t = 0; t < s.size(); ++t)
      if (!s.positions[t].supervised) {
        labels[t] = static_cast<TokenId>(rng.below(vocab.size()));
        ++perturbed;
      }
  };
  // SFT.
  for (Parameter* p : model.parameters()) p->zero_grad();
  double clean = 0.0;
  {
    Tape tape(true);
    auto l = training::sft_loss(tape, model, grammar, batch);
    clean = l.loss.value()[0];
    tape.backward(l.loss);
  }
  double link_norm = 0.0;
  for (double g : model.router.link().grad.data()) link_norm += g * g;
  Tape tape(false);
  const double noisy = training::sft_loss(tape, model, grammar, batch, scramble).loss.value()[0];
  if (!same_bits(clean, noisy)) res.fail("sft_loss changed when m_t=0 labels were perturbed");
  if (!(link_norm > 0.0)) res.fail("Link embedding received no SFT gradient");
  // GRPO.
  training::RLConfig rl;
  std::vector<training::GroupSample> groups;
  std::vector<training::ScoredGroup> scored;
  groups.reserve(exs.size());
  for (std::size_t i = 0; i < exs.size(); ++i) groups.push_back(training::sample_group(model, vocab, grammar, exs[i], i, rl, seed + i));
  for (std::size_t i = 0; i < exs.size(); ++i) {
    training::ScoredGroup sg{&groups[i], &exs[i], {}};
    for (const auto& tr : groups[i].trajectories)
      sg.ref_logprobs.push_back(training::score_tokens(model, grammar, exs[i], tr.tokens));
    scored.push_back(std::move(sg));
  }
  Tape t1(false), t2(false);
  const double g_clean = training::grpo_loss(t1, model, grammar, scored, rl.beta).loss.value()[0];
  const double g_noisy = training::grpo_loss(t2, model, grammar, scored, rl.beta, scramble).loss.value()[0];
  if (!same_bits(g_clean, g_noisy)) res.fail("grpo_loss changed when m_t=0 labels were perturbed");
  if (res.pass) {
    std::ostringstream os;
    os << perturbed << " m_t=0 labels perturbed, losses bit-identical; |grad Link| = " << std::sqrt(link_norm);
    res.detail = os.str();
  }
  return res;
}

// ---- GRPO algebra ---------------------------------------------------------------------------

inline CheckResult check_grpo_algebra(std::uint64_t seed) {
  CheckResult res;
  for (double r : {0.0, 1.0}) {
    const std::vector<double> same(4, r);
    for (double a : training::normalize_advantages(same, 1e-8))
      if (a != 0.0) res.fail("equal rewards gave a non-zero advantage");
  }
  const std::vector<double> mixed{1, 0, 0, 1};
  const auto adv = training::normalize_advantages(mixed, 1e-8);
  const double want[4] = {1, -1, -1, 1};
  double worst = 0.0;
  for (int i = 0; i < 4; ++i) worst = std::max(worst, std::abs(adv[static_cast<std::size_t>(i)] - want[i]));
  if (!(worst <= 1e-6)) res.fail("advantages for [1,0,0,1] off by " + std::to_string(worst));

  Vocabulary vocab;
  const auto grammar = grounding::GroundingGrammar::from_vocabulary(vocab);
  auto model = micro_model(vocab, 32, router::Variant::LSW, seed);
  perturb_router(model, seed);
  std::vector<tasks::TaskInstance> insts;
  auto exs = sample_examples(vocab, 32, tasks::Family::Comparison, 2, seed, insts);
  std::size_t tokens = 0;
  training::RLConfig rl;
  for (std::size_t i = 0; i < exs.size(); ++i) {
    auto g = training::sample_group(model, vocab, grammar, exs[i], i, rl, seed + i);
    for (const auto& tr : g.trajectories) {
      const auto a = training::score_tokens(model, grammar, exs[i], tr.tokens);
      const auto b = training::score_tokens(model, grammar, exs[i], tr.tokens);
      for (double k : training::kl_divergence(a, b)) {
        ++tokens;
        if (k != 0.0) res.fail("KL non-zero with theta = ref");
      }
    }
  }
  if (res.pass) {
    std::ostringstream os;
    os << "equal-reward advantages zero; [1,0,0,1] max err " << worst << "; KL zero on " << tokens << " tokens";
    res.detail = os.str();
  }
  return res;
}

// ---- parser conformance ------------------------------------------------------------------------

// Random token strings built from pattern fragments, whole patterns (valid
// and near-valid) and filler.
inline std::vector<TokenId> random_grounding_string(Rng& rng, const Vocabulary& vocab, int images) {
  const std::vector<std::string> filler{"the", "red", "ball", "in", "image", "object", ".", "?", "answer", "1",
                                        "2",   "3",   "0",    "7",  "[",     "]",      ",", "-", "yes"};
  const std::vector<std::string> tags{"<obj>", "</obj>", "<box>", "</box>"};
  std::vector<TokenId> s;
  auto word = [&](const std::vector<std::string>& pool) { s.push_back(vocab.id(pool[rng.below(pool.size())])); };
  auto number = [&](int v) {
    if (v < 0) s.push_back(vocab.id("-"));
    for (char c : std::to_string(std::abs(v))) s.push_back(vocab.id(std::string(1, c)));
  };
  const std::size_t chunks = 1 + rng.below(6);
  for (std::size_t c = 0; c < chunks; ++c) {
    switch (rng.below(4)) {
      case 0:
        for (std::size_t i = rng.below(6); i-- > 0;) word(filler);
        break;
      case 1:
        for (std::size_t i = 1 + rng.below(4); i-- > 0;) word(rng.coin(0.5) ? tags : filler);
        break;
      default: {
        s.push_back(vocab.id("<obj>"));
        const std::size_t plen = rng.coin(0.05) ? 30 + rng.below(5) : rng.below(5);
        for (std::size_t i = 0; i < plen; ++i) word(filler);
        if (rng.coin(0.7)) {
          s.push_back(vocab.id("image"));
          s.push_back(vocab.id(std::to_string(rng.below(static_cast<std::uint64_t>(images + 2)))));
        }
        s.push_back(vocab.id("</obj>"));
        for (std::size_t i = rng.coin(0.8) ? 0 : 1 + rng.below(2); i-- > 0;) word(filler);
        s.push_back(vocab.id("<box>"));
        if (rng.coin(0.1)) {
          for (std::size_t i = rng.below(36); i-- > 0;) word(filler);
        } else {
          s.push_back(vocab.id("["));
          const int fields = rng.coin(0.9) ? 4 : 3 + 2 * static_cast<int>(rng.below(2));
          for (int f = 0; f < fields; ++f) {
            if (f) s.push_back(vocab.id(","));
            const int v = rng.coin(0.05) ? static_cast<int>(rng.below(2000000)) - 1000000
                                         : static_cast<int>(rng.below(80)) - 8;
            number(v);
          }
          if (rng.coin(0.95)) s.push_back(vocab.id("]"));
        }
        if (rng.coin(0.93)) s.push_back(vocab.id("</box>"));
      }
    }
  }
  return s;
}

// Strings with exactly one defect each; none may produce an event.
inline std::vector<TokenId> adversarial_grounding_string(Rng& rng, const Vocabulary& vocab, std::size_t kind) {
  auto t = [&](const std::string& text) { return vocab.tokenize(text); };
  std::vector<std::string> variants{
      "<obj> the ball </obj> <box> [ 1 , 2 , 3 , 4 ]",                  // never closed
      "<obj> the ball </obj> . . <box> [ 1 , 2 , 3 , 4 ] </box>",        // two separators
      "<obj> </obj> <box> [ 1 , 2 , 3 , 4 ] </box>",                     // empty phrase
      "<obj> the ball </obj> <box> [ 1 , 2 , 3 ] </box>",                // three fields
      "<obj> the ball </obj> <box> [ 1 , 2 , 3 , 4 , 5 ] </box>",        // five fields
      "<obj> the ball </obj> <box> [ 9 , 2 , 3 , 4 ] </box>",            // inverted x
      "<obj> the ball </obj> <box> [ 1 , 8 , 3 , 4 ] </box>",            // inverted y
      "<obj> the ball </obj> <box> [ 4 0 , 2 , 5 0 , 4 ] </box>",        // clamps to zero width
      "<obj> the ball </obj> <box> [ 1 , 2 , 3 , 4 </box>",              // missing ]
      "<obj> the ball </obj> <box> 1 , 2 , 3 , 4 ] </box>",              // missing [
      "<obj> the ball </obj> <box> [ 1 , red , 3 , 4 ] </box>",          // non-digit
      "<obj> the ball </obj> <box> [ 1 2 3 4 5 6 7 , 2 , 3 , 4 ] </box>",  // seven digits
      "<obj> the ball </obj> <box> [ 1 , , 3 , 4 ] </box>",              // empty field
      "<obj> the ball </obj> <box> [ 1 , 2 , 3 , 4 ] ] </box>",          // trailing token
      "<obj> the ball <box> [ 1 , 2 , 3 , 4 ] </box>",                   // missing </obj>
      "the ball </obj> <box> [ 1 , 2 , 3 , 4 ] </box>",                  // missing <obj>
      "<obj> the ball </obj> <box> [ 1 , 2 , <obj> 3 , 4 ] </box>",      // tag inside payload
      "<obj> the ball </obj> </obj> <box> [ 1 , 2 , 3 , 4 ] </box>",     // doubled close
      "<obj> the ball </obj> <box> [ - , 2 , 3 , 4 ] </box>",            // bare minus
      "<obj> the ball </obj> <box> [ 1 , 2 , 3 , - 4 ] </box>",          // negative max
      "<obj> the ball </obj> <box> </box>",                              // empty payload
  };
  std::vector<TokenId> s;
  for (std::size_t i = rng.below(4); i-- > 0;) s.push_back(vocab.id(rng.coin(0.5) ? "the" : "."));
  const auto core = t(variants[kind % variants.size()]);
  s.insert(s.end(), core.begin(), core.end());
  if (kind % variants.size() == 0) return s;
  // Overlong phrase and payload variants.
  if (rng.coin(0.1)) {
    std::vector<TokenId> long_phrase{vocab.id("<obj>")};
    for (int i = 0; i < 33; ++i) long_phrase.push_back(vocab.id("the"));
    auto rest = t("</obj> <box> [ 1 , 2 , 3 , 4 ] </box>");
    long_phrase.insert(long_phrase.end(), rest.begin(), rest.end());
    return long_phrase;
  }
  for (std::size_t i = rng.below(3); i-- > 0;) s.push_back(vocab.id(rng.coin(0.5) ? "answer" : "?"));
  return s;
}

inline std::vector<oracle::Event> stream_events(const std::vector<TokenId>& s, const grounding::GroundingGrammar& g,
                                                const std::vector<grounding::ImageExtent>& ext) {
  grounding::StreamingParser p(g, ext);
  std::vector<oracle::Event> out;
  for (TokenId t : s)
    if (auto ev = p.feed(t)) out.push_back({ev->phrase, ev->image_index, ev->box, ev->trigger_position});
  return out;
}

inline CheckResult check_parser_conformance(std::size_t corpus, std::size_t adversarial, std::uint64_t seed) {
  CheckResult res;
  Vocabulary vocab;
  const auto g = grounding::GroundingGrammar::from_vocabulary(vocab);
  Rng rng(mix_seed(seed, 0x9A55));
  std::size_t events = 0;
  for (std::size_t i = 0; i < corpus && res.pass; ++i) {
    const int m = 1 + static_cast<int>(rng.below(4));
    std::vector<grounding::ImageExtent> ext;
    std::vector<std::pair<int, int>> ext2;
    for (int k = 0; k < m; ++k) {
      const int w = 16 * (1 + static_cast<int>(rng.below(4))), h = 16 * (1 + static_cast<int>(rng.below(4)));
      ext.push_back({w, h});
      ext2.push_back({w, h});
    }
    const auto s = random_grounding_string(rng, vocab, m);
    const auto got = stream_events(s, g, ext);
    const auto want = oracle::parse_offline(s, vocab, ext2);
    events += want.size();
    if (got != want) res.fail("string " + std::to_string(i) + " disagrees: " + vocab.render(s));
  }
  std::size_t adv_events = 0;
  for (std::size_t i = 0; i < adversarial; ++i) {
    const auto s = adversarial_grounding_string(rng, vocab, i);
    const std::vector<grounding::ImageExtent> ext{{32, 32}};
    const auto got = stream_events(s, g, ext);
    adv_events += got.size();
    if (!got.empty() && res.pass) res.fail("adversarial string yielded an event: " + vocab.render(s));
  }
  if (res.pass)
    res.detail = std::to_string(corpus) + " strings (" + std::to_string(events) + " events) match the oracle; " +
                 std::to_string(adversarial) + " adversarial strings, 0 events";
  return res;
}

// ---- teacher forcing vs decoding ----------------------------------------------------------------

inline CheckResult check_teacher_force_replay(std::size_t trials, std::uint64_t seed) {
  CheckResult res;
  Vocabulary vocab;
  const auto grammar = grounding::GroundingGrammar::from_vocabulary(vocab);
  auto model = micro_model(vocab, 32, router::Variant::LSW, seed);
  perturb_router(model, seed);
  const backbone::RoverModel& cm = model;
  std::vector<tasks::TaskInstance> insts;
  auto exs = sample_examples(vocab, 32, tasks::Family::Comparison, trials, seed, insts);
  for (std::size_t i = 0; i < exs.size() && res.pass; ++i) {
    auto tr = backbone::replay(cm, grammar, exs[i].images, exs[i].prompt, exs[i].target, 256);
    Tape tape(false);
    auto seq = backbone::teacher_force(tape, cm, grammar, exs[i].images, exs[i].prompt, exs[i].target);
    auto lp = backbone::target_logprobs(tape, cm, seq);
    std::vector<std::size_t> tf_inj, dec_inj;
    for (std::size_t t = 0; t < seq.state.size(); ++t)
      if (seq.state.positions[t].kind == backbone::PositionKind::Injected) tf_inj.push_back(t);
    for (const auto& r : tr.injections) dec_inj.push_back(r.position);
    if (tf_inj != dec_inj) res.fail("injection positions differ on example " + std::to_string(i));
    else if (!same_bits(lp.value().data(), tr.logprobs)) res.fail("log-probs differ on example " + std::to_string(i));
  }
  if (res.pass) res.detail = std::to_string(trials) + " transcripts: same injection positions, bitwise log-probs";
  return res;
}

// ---- causality ---------------------------------------------------------------------------------------

inline CheckResult check_causality(std::size_t trials, std::uint64_t seed) {
  CheckResult res;
  Vocabulary vocab;
  const auto grammar = grounding::GroundingGrammar::from_vocabulary(vocab);
  auto model = micro_model(vocab, 32, router::Variant::LSW, seed);
  perturb_router(model, seed);
  const backbone::RoverModel& cm = model;
  std::vector<tasks::TaskInstance> insts;
  auto exs = sample_examples(vocab, 32, tasks::Family::Comparison, trials, seed, insts);
  Rng rng(mix_seed(seed, 0xCA));
  for (std::size_t i = 0; i < exs.size() && res.pass; ++i) {
    auto logits_of = [&](const std::vector<TokenId>& target) {
      Tape tape(false);
      auto seq = backbone::teacher_force(tape, cm, grammar, exs[i].images, exs[i].prompt, target);
      return std::pair{backbone::forward_logits(tape, cm, seq).value(), seq.state.input_length};
    };
    const auto& target = exs[i].target;
    const std::size_t cut = rng.below(target.size());
    auto mutated = target;
    for (std::size_t j = cut + 1; j < mutated.size(); ++j) mutated[j] = static_cast<TokenId>(rng.below(vocab.size()));
    const auto [a, L] = logits_of(target);
    const auto [b, L2] = logits_of(mutated);
    // Target token `cut` sits at or after position L + cut; compare everything
    // up to the position that consumed it, which cannot see any mutation.
    std::size_t upto = L + cut;
    {
      Tape tape(false);
      auto seq = backbone::teacher_force(tape, cm, grammar, exs[i].images, exs[i].prompt, target);
      std::size_t seen = 0;
      for (std::size_t t = seq.state.input_length; t < seq.state.size(); ++t)
        if (seq.state.positions[t].kind == backbone::PositionKind::Token && seen++ == cut) upto = t;
      // Injected vectors that follow the last unmutated token depend only on it.
      while (upto + 1 < seq.state.size() && seq.state.positions[upto + 1].kind == backbone::PositionKind::Injected)
        ++upto;
    }
    const std::size_t V = a.cols();
    if (!same_bits(std::span<const double>(a.data().data(), (upto + 1) * V),
                   std::span<const double>(b.data().data(), (upto + 1) * V)))
      res.fail("logits before a mutated suffix changed (example " + std::to_string(i) + ")");
  }
  if (res.pass) res.detail = std::to_string(trials) + " random suffix mutations, prefix logits bitwise unchanged";
  return res;
}


// ---- numerics -----------------------------------------------------------------------------------

// Finite differences through a composite that touches every differentiable op.
inline CheckResult check_op_gradients(std::uint64_t seed) {
  CheckResult res;
  Rng rng(mix_seed(seed, 0x0F5));
  auto rand = [&](std::string name, std::vector<std::size_t> shape, double scale = 0.5) {
    Tensor t(shape);
    for (double& v : t.data()) v = scale * rng.normal();
    return Parameter(std::move(name), std::move(t));
  };
  Parameter a = rand("a", {5, 8}), b = rand("b", {8, 6}), c = rand("c", {5, 6}), g = rand("gain", {6}),
            bias = rand("bias", {6}), lam = rand("lambda", {1}), k = rand("k", {7, 8});
  const std::vector<std::size_t> targets{0, 3, 5, 1, 2};
  auto f = [&](Tape& t) {
    Var A = t.parameter(a), B = t.parameter(b), C = t.parameter(c), K = t.parameter(k);
    Var h = ops::add(ops::matmul(A, B), ops::mul(C, ops::exp(ops::scale(C, 0.3))));
    h = ops::layer_norm(h, t.parameter(g), t.parameter(bias));
    h = ops::gelu(ops::add_row(h, t.parameter(bias)));
    Var att = ops::row_softmax(ops::matmul_nt(A, K));
    Var mixed = ops::sub(ops::matmul(att, K), ops::scale_by(A, t.parameter(lam)));
    const std::vector<std::size_t> pool_idx{0, 2, 4}, gather_idx{1, 3};
    Var pooled = ops::avg_pool_rows(mixed, pool_idx);
    Var rows = ops::concat_rows(
        std::vector<Var>{ops::gather_rows(h, gather_idx), ops::slice_cols(ops::reshape(pooled, {1, 8}), 0, 6)});
    Var attn = ops::causal_attention(ops::slice_cols(mixed, 0, 4), ops::slice_cols(mixed, 2, 6), ops::slice_cols(mixed, 4, 8), 2);
    Var lp = ops::log_softmax_pick(h, targets);
    Var extra = ops::log(ops::add_scalar(ops::mul(rows, rows), 1.0));
    return ops::add(ops::add(ops::mean(lp), ops::sum(extra)), ops::mean(ops::mul(attn, attn)));
  };
  std::vector<Parameter*> params{&a, &b, &c, &g, &bias, &lam, &k};
  auto rep = finite_diff_check(f, params, 1e-5, 1e-6);
  double worst = 0.0;
  for (const auto& p : rep.params) {
    worst = std::max(worst, p.max_rel_error);
    if (!p.pass) res.fail("gradient mismatch in " + p.name);
  }
  if (res.pass) res.detail = "composite over all ops, worst rel err " + std::to_string(worst);
  return res;
}

inline CheckResult check_checkpoint_roundtrip(std::uint64_t seed) {
  CheckResult res;
  Vocabulary vocab;
  auto model = micro_model(vocab, 16, router::Variant::LSW, seed, 32);
  std::vector<NamedTensor> tensors;
  for (const Parameter* p : model.all_tensors()) tensors.push_back({p->name, p->value});
  std::stringstream ss;
  write_tensors(ss, tensors);
  const std::string bytes = ss.str();
  auto back = read_tensors(ss);
  if (back.size() != tensors.size()) res.fail("tensor count changed");
  for (std::size_t i = 0; i < back.size() && res.pass; ++i)
    if (back[i].name != tensors[i].name || back[i].tensor.shape() != tensors[i].tensor.shape() ||
        !same_bits(back[i].tensor.data(), tensors[i].tensor.data()))
      res.fail("tensor '" + tensors[i].name + "' did not round-trip");
  std::stringstream again;
  write_tensors(again, back);
  if (again.str() != bytes) res.fail("re-serialization is not byte-identical");
  std::stringstream cut(bytes.substr(0, bytes.size() / 2));
  try {
    read_tensors(cut);
    res.fail("truncated checkpoint was accepted");
  } catch (const CheckpointError&) {
  }
  if (res.pass) res.detail = std::to_string(tensors.size()) + " tensors, " + std::to_string(bytes.size()) + " bytes";
  return res;
}

// ---- scene ----------------------------------------------------------------------------------------

inline CheckResult check_roi_partition(std::size_t cases, std::uint64_t seed) {
  CheckResult res;
  Rng rng(mix_seed(seed, 0x201));
  for (std::size_t c = 0; c < cases && res.pass; ++c) {
    const int P = 8 * (1 + static_cast<int>(rng.below(2)));
    const scene::ImageSpec spec{P * (1 + static_cast<int>(rng.below(4))), P * (1 + static_cast<int>(rng.below(4))), P};
    grounding::BoundingBox b;
    b.x_min = static_cast<int>(rng.below(static_cast<std::uint64_t>(spec.width)));
    b.y_min = static_cast<int>(rng.below(static_cast<std::uint64_t>(spec.height)));
    b.x_max = b.x_min + 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(spec.width - b.x_min)));
    b.y_max = b.y_min + 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(spec.height - b.y_min)));
    const auto part = scene::roi_partition(spec, b);
    // Pixel-level oracle: a patch is inside iff some pixel of it is in the box.
    std::vector<std::size_t> inside;
    for (int r = 0; r < spec.grid_rows(); ++r)
      for (int col = 0; col < spec.grid_cols(); ++col) {
        bool hit = false;
        for (int y = r * P; y < (r + 1) * P && !hit; ++y)
          for (int x = col * P; x < (col + 1) * P && !hit; ++x)
            hit = x >= b.x_min && x < b.x_max && y >= b.y_min && y < b.y_max;
        if (hit) inside.push_back(static_cast<std::size_t>(r * spec.grid_cols() + col));
      }
    if (part.inside != inside) res.fail("RoI set differs from the pixel oracle");
    if (part.inside.size() + part.outside.size() != spec.patch_count()) res.fail("partition does not cover the grid");
  }
  if (res.pass) res.detail = std::to_string(cases) + " random boxes match the pixel oracle";
  return res;
}

inline CheckResult check_featurize(std::uint64_t seed) {
  CheckResult res;
  std::vector<tasks::TaskInstance> insts = tasks::generate_corpus({tasks::FamilyConfig::defaults(tasks::Family::Comparison)}, 5, seed);
  const scene::FeatureBank bank(seed, 32);
  double worst = 0.0;
  for (const auto& inst : insts)
    for (std::size_t m = 0; m < inst.scenes.size(); ++m) {
      const int index = static_cast<int>(m + 1);
      const auto f = scene::featurize(inst.scenes[m], inst.spec, index, bank);
      const auto code = bank.image_code(index);
      for (std::size_t p = 0; p < inst.spec.patch_count(); ++p) {
        auto want = bank.base(static_cast<int>(p) / inst.spec.grid_cols(), static_cast<int>(p) % inst.spec.grid_cols());
        for (std::size_t j = 0; j < want.size(); ++j) want[j] += code[j];
        const auto cell = inst.spec.patch_box(p);
        for (const auto& o : inst.scenes[m]) {
          const bool overlap = std::max(cell.x_min, o.box.x_min) < std::min(cell.x_max, o.box.x_max) &&
                               std::max(cell.y_min, o.box.y_min) < std::min(cell.y_max, o.box.y_max);
          if (!overlap) continue;
          const auto cls = bank.class_embedding(o.shape, o.color);
          for (std::size_t j = 0; j < want.size(); ++j) want[j] += cls[j];
        }
        for (std::size_t j = 0; j < want.size(); ++j) worst = std::max(worst, std::abs(f.patches.at(p, j) - want[j]));
      }
    }
  if (!(worst == 0.0)) res.fail("feature rows differ from base + image code + class sums by " + std::to_string(worst));
  // Distinct (shape, colour) pairs give distinct embeddings.
  std::set<std::vector<double>> seen;
  for (int s = 0; s < static_cast<int>(words::kShapes.size()); ++s)
    for (int c = 0; c < static_cast<int>(words::kColors.size()); ++c) seen.insert(bank.class_embedding(s, c));
  if (seen.size() != words::kShapes.size() * words::kColors.size()) res.fail("class embedding is not injective");
  if (res.pass) res.detail = "patch rows exact; " + std::to_string(seen.size()) + " distinct class embeddings";
  return res;
}

// ---- training -------------------------------------------------------------------------------------

// Mean of the k3 estimator over samples from p_theta against exact KL.
inline CheckResult check_kl_estimator(std::size_t samples, std::uint64_t seed) {
  CheckResult res;
  Rng rng(mix_seed(seed, 0x4B1));
  std::vector<double> lt(12), lr(12);
  for (std::size_t i = 0; i < lt.size(); ++i) {
    lt[i] = rng.normal();
    lr[i] = lt[i] + 0.6 * rng.normal();
  }
  const double exact = oracle::exact_kl(lt, lr);
  std::vector<double> pt(lt.size()), logpt(lt.size()), logpr(lr.size());
  kernels::softmax_row(lt, pt);
  for (std::size_t i = 0; i < lt.size(); ++i) {
    logpt[i] = kernels::log_softmax_at(lt, i);
    logpr[i] = kernels::log_softmax_at(lr, i);
  }
  double sum = 0.0, sq = 0.0;
  for (std::size_t s = 0; s < samples; ++s) {
    double u = rng.uniform();
    std::size_t y = 0;
    while (y + 1 < pt.size() && (u -= pt[y]) >= 0.0) ++y;
    const double k = training::kl_k3(logpt[y], logpr[y]);
    sum += k;
    sq += k * k;
  }
  const double n = static_cast<double>(samples), mean = sum / n;
  const double se = std::sqrt(std::max(0.0, sq / n - mean * mean) / n);
  std::ostringstream os;
  os << "estimate " << mean << " vs exact " << exact << " (se " << se << ")";
  res.detail = os.str();
  if (!(std::abs(mean - exact) <= 3.0 * se)) res.fail("k3 mean outside 3 sigma: " + res.detail);
  return res;
}

inline CheckResult check_adamw_quadratic(std::uint64_t seed) {
  CheckResult res;
  Rng rng(mix_seed(seed, 0xADA));
  Parameter w("w", Tensor({3, 4}));
  Tensor target({3, 4});
  for (double& v : target.data()) v = rng.normal();
  training::AdamW opt;
  std::vector<Parameter*> params{&w};
  for (int step = 0; step < 2000; ++step) {
    w.zero_grad();
    Tape tape(true);
    Var d = ops::sub(tape.parameter(w), tape.constant(target));
    Var loss = ops::sum(ops::mul(d, d));
    tape.backward(loss);
    opt.step(params, training::cosine_lr(static_cast<std::size_t>(step), 2000, 0.05, 0.1));
  }
  double err = 0.0;
  for (std::size_t i = 0; i < target.size(); ++i) err = std::max(err, std::abs(w.value[i] - target[i]));
  if (!(err < 1e-3)) res.fail("AdamW did not reach the quadratic minimum (max err " + std::to_string(err) + ")");
  if (opt.steps != 2000) res.fail("step counter wrong");
  const double warm = training::cosine_lr(0, 100, 1.0, 0.1), peak = training::cosine_lr(10, 100, 1.0, 0.1),
               end = training::cosine_lr(100, 100, 1.0, 0.1);
  if (!(warm == 0.0 && peak == 1.0 && std::abs(end) < 1e-15)) res.fail("cosine schedule endpoints wrong");
  if (res.pass) res.detail = "converged to " + std::to_string(err) + "; schedule endpoints exact";
  return res;
}

// ---- tasks ----------------------------------------------------------------------------------------

// Every generated transcript parses to exactly its reference list, and the
// gold transcript earns reward 1.
inline CheckResult check_generator_parser(std::size_t per_family, std::uint64_t seed) {
  CheckResult res;
  Vocabulary vocab;
  const auto g = grounding::GroundingGrammar::from_vocabulary(vocab);
  std::size_t total = 0;
  for (auto fam : {tasks::Family::Attribute, tasks::Family::Comparison, tasks::Family::Counting, tasks::Family::Judgement}) {
    auto insts = tasks::generate_corpus({tasks::FamilyConfig::defaults(fam)}, per_family, seed);
    for (const auto& inst : insts) {
      ++total;
      const auto toks = vocab.encode(inst.transcript);
      std::vector<grounding::ImageExtent> ext(inst.scenes.size(), inst.spec.extent());
      const auto evs = stream_events(toks, g, ext);
      bool ok = evs.size() == inst.references.size();
      for (std::size_t i = 0; ok && i < evs.size(); ++i)
        ok = evs[i].image == inst.references[i].image && evs[i].box == inst.references[i].box &&
             vocab.decode(evs[i].phrase) == inst.references[i].phrase;
      if (!ok) res.fail(std::string(tasks::to_string(fam)) + " seed " + std::to_string(inst.seed) + ": parse != references");
      if (tasks::reward(vocab, g, inst, toks, false) != 1)
        res.fail(std::string(tasks::to_string(fam)) + " seed " + std::to_string(inst.seed) + ": gold transcript not rewarded");
      if (!res.pass) return res;
    }
  }
  res.detail = std::to_string(total) + " instances over 4 families";
  return res;
}

inline CheckResult check_reward_rules(std::uint64_t seed) {
  CheckResult res;
  Vocabulary vocab;
  const auto g = grounding::GroundingGrammar::from_vocabulary(vocab);
  auto inst = tasks::generate_instance(tasks::FamilyConfig::defaults(tasks::Family::Comparison), seed);
  const auto gold = vocab.encode(inst.transcript);
  auto expect = [&](const std::vector<TokenId>& t, bool truncated, int want, const char* what) {
    if (tasks::reward(vocab, g, inst, t, truncated) != want) res.fail(std::string("reward wrong for ") + what);
  };
  expect(gold, false, 1, "the gold transcript");
  expect(gold, true, 0, "a truncated transcript");
  auto wrong = gold;
  for (const auto& o : inst.options)
    if (o != inst.answer) {
      wrong[wrong.size() - 2] = vocab.id(o);
      break;
    }
  expect(wrong, false, 0, "a wrong option");
  auto no_eos = gold;
  no_eos.pop_back();
  expect(no_eos, false, 0, "a missing EOS");
  auto no_evidence = vocab.encode({"answer", inst.answer, "<eos>"});
  expect(no_evidence, false, 0, "an answer without grounding");
  auto open = gold;
  open.insert(open.end() - 3, vocab.id("<obj>"));
  expect(open, false, 0, "an unclosed pattern");
  if (res.pass) res.detail = "gold 1; truncated, wrong option, no EOS, no evidence, open pattern 0";
  return res;
}

inline CheckResult check_corpus_roundtrip(std::uint64_t seed) {
  CheckResult res;
  std::vector<tasks::FamilyConfig> mix;
  for (auto fam : {tasks::Family::Attribute, tasks::Family::Comparison, tasks::Family::Counting, tasks::Family::Judgement})
    mix.push_back(tasks::FamilyConfig::defaults(fam));
  const auto insts = tasks::generate_corpus(mix, 40, seed);
  std::stringstream a;
  tasks::write_corpus(insts, a);
  const std::string bytes = a.str();
  const auto back = tasks::read_corpus(a);
  std::stringstream b;
  tasks::write_corpus(back, b);
  if (b.str() != bytes) res.fail("corpus did not round-trip byte-identically");
  std::stringstream again;
  tasks::write_corpus(tasks::generate_corpus(mix, 40, seed), again);
  if (again.str() != bytes) res.fail("generation is not deterministic");
  // A record cut mid-line must be rejected with its line number.
  const auto last = bytes.rfind('\n', bytes.size() - 2);
  std::stringstream cut(bytes.substr(0, last + 20));
  try {
    tasks::read_corpus(cut);
    res.fail("truncated corpus was accepted");
  } catch (const tasks::CorpusError& e) {
    if (std::string(e.what()).find("line 41") == std::string::npos)
      res.fail(std::string("truncation error lacks the line number: ") + e.what());
  }
  if (res.pass) res.detail = "40 records, byte-stable; truncated record rejected at line 41";
  return res;
}

}  // namespace rover::verify
