#pragma once

// Interleaved SFT and interleaved GRPO with AdamW.

#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <numbers>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "rover/backbone/sequence.hpp"
#include "rover/numerics/checkpoint.hpp"
#include "rover/tasks/tasks.hpp"

namespace rover::training {

using backbone::RoverModel;
using backbone::Trajectory;

class TrainingAbort : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// One task instance encoded for the model.
struct Example {
  std::vector<scene::ImageFeatures> images;
  std::vector<TokenId> prompt;
  std::vector<TokenId> target;
  const tasks::TaskInstance* instance = nullptr;
};

inline Example encode(const tasks::TaskInstance& inst, const Vocabulary& vocab, const scene::FeatureBank& bank) {
  Example ex;
  for (std::size_t m = 0; m < inst.scenes.size(); ++m)
    ex.images.push_back(scene::featurize(inst.scenes[m], inst.spec, static_cast<int>(m + 1), bank));
  ex.prompt = vocab.encode(inst.prompt());
  ex.target = vocab.encode(inst.transcript);
  ex.instance = &inst;
  return ex;
}

inline std::vector<Example> encode_all(const std::vector<tasks::TaskInstance>& insts, const Vocabulary& vocab,
                                       const scene::FeatureBank& bank) {
  std::vector<Example> out;
  out.reserve(insts.size());
  for (const auto& t : insts) out.push_back(encode(t, vocab, bank));
  return out;
}

// ---- losses -------------------------------------------------------------------

struct SftLoss {
  Var loss;                   // scalar
  std::size_t supervised = 0;  // number of m_t = 1 positions
};

// Edits a sequence's per-position labels before they are scored; used to
// probe that only m_t = 1 labels matter.
using LabelHook = std::function<void(const backbone::SequenceState&, std::vector<TokenId>&)>;

inline Var hooked_logprobs(Tape& tape, RoverModel& model, const backbone::ScoredSequence& seq, const LabelHook& hook) {
  auto labels = backbone::position_labels(seq.state);
  if (hook) hook(seq.state, labels);
  return backbone::masked_logprobs(tape, model, seq, labels);
}

inline Var hooked_logprobs(Tape& tape, const RoverModel& model, const backbone::ScoredSequence& seq,
                           const LabelHook& hook) {
  auto labels = backbone::position_labels(seq.state);
  if (hook) hook(seq.state, labels);
  return backbone::masked_logprobs(tape, model, seq, labels);
}

// Mean of -log p(y_t) over every supervised position of the batch.
template <typename Model>
SftLoss sft_loss(Tape& tape, Model& model, const grounding::GroundingGrammar& grammar,
                 const std::vector<const Example*>& batch, const LabelHook& hook = {}) {
  std::optional<Var> total;
  std::size_t count = 0;
  for (const Example* ex : batch) {
    if (ex->target.empty()) continue;
    auto seq = backbone::teacher_force(tape, model, grammar, ex->images, ex->prompt, ex->target);
    if (seq.targets.empty()) continue;
    Var s = ops::sum(hooked_logprobs(tape, model, seq, hook));
    total = total ? ops::add(*total, s) : s;
    count += seq.targets.size();
  }
  if (count == 0) throw ContractError("sft_loss: batch has no supervised positions");
  return {ops::scale(*total, -1.0 / static_cast<double>(count)), count};
}

// (r - mean) / (std + eps) with the population standard deviation.
inline std::vector<double> normalize_advantages(std::span<const double> rewards, double eps) {
  if (rewards.size() < 2) throw ContractError("normalize_advantages: group size must be at least 2");
  if (!(eps > 0.0)) throw ContractError("normalize_advantages: eps must be positive");
  const double n = static_cast<double>(rewards.size());
  double mu = 0.0;
  for (double r : rewards) mu += r;
  mu /= n;
  double var = 0.0;
  for (double r : rewards) var += (r - mu) * (r - mu);
  const double sigma = std::sqrt(var / n);
  std::vector<double> out;
  out.reserve(rewards.size());
  for (double r : rewards) out.push_back((r - mu) / (sigma + eps));
  return out;
}

// k3 = rho - log(rho) - 1 with rho = p_ref / p_theta, from log-probabilities.
inline double kl_k3(double logp_theta, double logp_ref) {
  const double d = logp_ref - logp_theta;
  return std::exp(d) - d - 1.0;
}

inline std::vector<double> kl_divergence(std::span<const double> logp_theta, std::span<const double> logp_ref) {
  if (logp_theta.size() != logp_ref.size())
    throw ContractError("kl_divergence: position sets differ (" + std::to_string(logp_theta.size()) + " vs " +
                        std::to_string(logp_ref.size()) + ")");
  std::vector<double> out(logp_theta.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = kl_k3(logp_theta[i], logp_ref[i]);
  return out;
}

struct RLConfig {
  std::size_t group_size = 4;
  double beta = 0.04;
  double eps = 1e-8;
  double lr = 1e-4;
  double weight_decay = 0.0;
  double temperature = 1.0;
  std::size_t iterations = 100;
  std::size_t prompts_per_iteration = 8;
  std::size_t eval_prompts = 64;
  std::size_t collapse_patience = 20;
  std::size_t max_len = 256;
  std::uint64_t seed = 1;

  void validate() const {
    if (group_size < 2) throw std::invalid_argument("rl config: group_size must be at least 2");
    if (beta < 0.0) throw std::invalid_argument("rl config: beta must be non-negative");
    if (!(eps > 0.0)) throw std::invalid_argument("rl config: eps must be positive");
    if (!(lr > 0.0)) throw std::invalid_argument("rl config: lr must be positive");
    if (!(temperature > 0.0)) throw std::invalid_argument("rl config: temperature must be positive");
    if (prompts_per_iteration == 0) throw std::invalid_argument("rl config: prompts_per_iteration must be positive");
  }
};

struct GroupSample {
  std::size_t prompt = 0;
  std::vector<Trajectory> trajectories;
  double mean = 0.0;
  double std = 0.0;
  std::vector<double> advantages;
};

inline GroupSample sample_group(const RoverModel& old_policy, const Vocabulary& vocab,
                                const grounding::GroundingGrammar& grammar, const Example& ex, std::size_t prompt_id,
                                const RLConfig& cfg, std::uint64_t seed) {
  GroupSample g;
  g.prompt = prompt_id;
  std::vector<double> rewards;
  for (std::size_t i = 0; i < cfg.group_size; ++i) {
    backbone::SamplingConfig sc{false, cfg.temperature, mix_seed(seed, i)};
    auto traj = backbone::decode(old_policy, grammar, ex.images, ex.prompt, sc, cfg.max_len);
    traj.reward = tasks::reward(vocab, grammar, *ex.instance, traj.tokens, traj.truncated);
    rewards.push_back(traj.reward);
    g.trajectories.push_back(std::move(traj));
  }
  const double n = static_cast<double>(rewards.size());
  for (double r : rewards) g.mean += r / n;
  for (double r : rewards) g.std += (r - g.mean) * (r - g.mean) / n;
  g.std = std::sqrt(g.std);
  g.advantages = normalize_advantages(rewards, cfg.eps);
  return g;
}

// Log-probabilities of a trajectory's sampled tokens under `model`, on a
// no-gradient tape.
inline std::vector<double> score_tokens(const RoverModel& model, const grounding::GroundingGrammar& grammar,
                                        const Example& ex, std::span<const TokenId> tokens) {
  Tape tape(false);
  auto seq = backbone::teacher_force(tape, model, grammar, ex.images, ex.prompt, tokens);
  Var lp = backbone::target_logprobs(tape, model, seq);
  return {lp.value().data().begin(), lp.value().data().end()};
}

struct GrpoTerms {
  Var loss;
  std::size_t tokens = 0;
  double kl_mean = 0.0;
  double ratio_mean = 0.0, ratio_min = 0.0, ratio_max = 0.0;
};

struct ScoredGroup {
  const GroupSample* group = nullptr;
  const Example* example = nullptr;
  std::vector<std::vector<double>> ref_logprobs;  // per trajectory
};

// Flat mean over every sampled token of every trajectory of
//   -(p_theta / p_old) * A + beta * k3(p_ref / p_theta).
inline GrpoTerms grpo_loss(Tape& tape, RoverModel& model, const grounding::GroundingGrammar& grammar,
                           const std::vector<ScoredGroup>& groups, double beta, const LabelHook& hook = {}) {
  std::optional<Var> total;
  GrpoTerms out;
  out.ratio_min = std::numeric_limits<double>::infinity();
  out.ratio_max = -std::numeric_limits<double>::infinity();
  double kl_sum = 0.0, ratio_sum = 0.0;
  for (const auto& sg : groups) {
    const auto& g = *sg.group;
    for (std::size_t i = 0; i < g.trajectories.size(); ++i) {
      const auto& tr = g.trajectories[i];
      if (tr.tokens.empty()) continue;
      if (tr.logprobs.size() != tr.tokens.size()) throw ContractError("grpo_loss: trajectory lacks old log-probs");
      const auto& ref = sg.ref_logprobs.at(i);
      auto seq = backbone::teacher_force(tape, model, grammar, sg.example->images, sg.example->prompt, tr.tokens);
      Var lp = hooked_logprobs(tape, model, seq, hook);
      const std::size_t n = lp.value().size();
      if (n != tr.logprobs.size() || n != ref.size()) throw ContractError("grpo_loss: position sets differ");
      Var old = tape.constant(Tensor({n}, std::vector<double>(tr.logprobs)));
      Var refv = tape.constant(Tensor({n}, std::vector<double>(ref)));
      Var ratio = ops::exp(ops::sub(lp, old));
      Var dref = ops::sub(refv, lp);
      Var k3 = ops::add_scalar(ops::sub(ops::exp(dref), dref), -1.0);
      Var term = ops::add(ops::scale(ratio, -g.advantages[i]), ops::scale(k3, beta));
      Var s = ops::sum(term);
      total = total ? ops::add(*total, s) : s;
      out.tokens += n;
      for (std::size_t t = 0; t < n; ++t) {
        const double r = ratio.value()[t];
        ratio_sum += r;
        out.ratio_min = std::min(out.ratio_min, r);
        out.ratio_max = std::max(out.ratio_max, r);
        kl_sum += k3.value()[t];
      }
    }
  }
  if (out.tokens == 0) throw ContractError("grpo_loss: no sampled tokens");
  out.loss = ops::scale(*total, 1.0 / static_cast<double>(out.tokens));
  out.kl_mean = kl_sum / static_cast<double>(out.tokens);
  out.ratio_mean = ratio_sum / static_cast<double>(out.tokens);
  return out;
}

// ---- optimizer ------------------------------------------------------------------

struct AdamW {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
  std::uint64_t steps = 0;
  std::map<std::string, std::pair<Tensor, Tensor>> moments;  // name -> (m, v)

  // Decoupled weight decay applies to matrices only.
  void step(std::span<Parameter* const> params, double lr) {
    for (const Parameter* p : params) {
      if (p->grad.shape() != p->value.shape()) continue;
      for (double g : p->grad.data())
        if (!std::isfinite(g)) throw TrainingAbort("non-finite gradient in parameter '" + p->name + "'");
    }
    ++steps;
    const double c1 = 1.0 - std::pow(beta1, static_cast<double>(steps));
    const double c2 = 1.0 - std::pow(beta2, static_cast<double>(steps));
    for (Parameter* p : params) {
      if (p->grad.shape() != p->value.shape()) continue;
      auto [it, fresh] = moments.try_emplace(p->name);
      if (fresh || it->second.first.shape() != p->value.shape())
        it->second = {Tensor(p->value.shape()), Tensor(p->value.shape())};
      auto m = it->second.first.data(), v = it->second.second.data();
      auto w = p->value.data();
      auto g = p->grad.data();
      const double decay = p->value.rank() >= 2 && p->value.rows() > 1 ? weight_decay : 0.0;
      for (std::size_t i = 0; i < w.size(); ++i) {
        m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
        v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
        const double mh = m[i] / c1, vh = v[i] / c2;
        w[i] -= lr * decay * w[i];
        w[i] -= lr * mh / (std::sqrt(vh) + eps);
      }
    }
  }

  std::vector<NamedTensor> state() const {
    std::vector<NamedTensor> out;
    out.push_back({"optim.steps", Tensor::vector({static_cast<double>(steps)})});
    for (const auto& [name, mv] : moments) {
      out.push_back({"optim.m." + name, mv.first});
      out.push_back({"optim.v." + name, mv.second});
    }
    return out;
  }

  void load_state(const std::vector<NamedTensor>& tensors) {
    moments.clear();
    steps = 0;
    for (const auto& [name, t] : tensors) {
      if (name == "optim.steps") steps = static_cast<std::uint64_t>(t[0]);
      else if (name.rfind("optim.m.", 0) == 0) moments[name.substr(8)].first = t;
      else if (name.rfind("optim.v.", 0) == 0) moments[name.substr(8)].second = t;
    }
  }
};

inline void zero_grads(std::span<Parameter* const> params) {
  for (Parameter* p : params) p->zero_grad();
}

// ---- schedules ------------------------------------------------------------------

// Linear warmup over the first ceil(ratio * total) steps from 0, then cosine
// decay to 0 at `total`.
inline double cosine_lr(std::size_t step, std::size_t total, double peak, double warmup_ratio) {
  if (total == 0) return peak;
  const auto warm = static_cast<std::size_t>(std::ceil(warmup_ratio * static_cast<double>(total)));
  if (step < warm) return peak * static_cast<double>(step) / static_cast<double>(warm);
  if (total <= warm) return peak;
  const double progress = static_cast<double>(step - warm) / static_cast<double>(total - warm);
  return peak * 0.5 * (1.0 + std::cos(std::numbers::pi * std::min(progress, 1.0)));
}

inline double linear_lr(std::size_t step, std::size_t total, double peak) {
  if (total == 0) return peak;
  return peak * std::max(0.0, 1.0 - static_cast<double>(step) / static_cast<double>(total));
}

// ---- evaluation -------------------------------------------------------------------

struct EvalResult {
  std::size_t count = 0;
  double answer_accuracy = 0.0;  // final answer word correct
  double reward = 0.0;           // parsable and correct
  double mean_generated = 0.0;   // sampled tokens per trajectory
  double mean_events = 0.0;
};

inline std::optional<std::string> final_answer(const Vocabulary& vocab, std::span<const TokenId> tokens) {
  const TokenId a = vocab.id("answer");
  for (std::size_t i = tokens.size(); i-- > 0;)
    if (tokens[i] == a) {
      if (i + 1 < tokens.size()) return vocab.token(tokens[i + 1]);
      return std::nullopt;
    }
  return std::nullopt;
}

inline EvalResult evaluate(const RoverModel& model, const Vocabulary& vocab, const grounding::GroundingGrammar& grammar,
                           const std::vector<Example>& examples, std::size_t max_len) {
  EvalResult r;
  for (const auto& ex : examples) {
    auto tr = backbone::decode(model, grammar, ex.images, ex.prompt, {}, max_len);
    const auto ans = final_answer(vocab, tr.tokens);
    r.answer_accuracy += ans && *ans == ex.instance->answer;
    r.reward += tasks::reward(vocab, grammar, *ex.instance, tr.tokens, tr.truncated);
    r.mean_generated += static_cast<double>(tr.tokens.size());
    r.mean_events += static_cast<double>(tr.state.events.size());
    ++r.count;
  }
  if (r.count) {
    const double n = static_cast<double>(r.count);
    r.answer_accuracy /= n;
    r.reward /= n;
    r.mean_generated /= n;
    r.mean_events /= n;
  }
  return r;
}

// ---- loops -------------------------------------------------------------------------

using MetricsSink = std::function<void(const nlohmann::json&)>;

struct SftConfig {
  std::size_t epochs = 1;
  std::size_t max_steps = 20000;
  std::size_t batch = 32;
  double lr = 1e-3;
  double warmup_ratio = 0.1;
  double weight_decay = 0.0;
  std::size_t eval_every = 0;  // 0: only at the end
  std::size_t eval_limit = 200;
  std::size_t max_len = 256;
  std::uint64_t seed = 1;

  void validate() const {
    if (batch == 0) throw std::invalid_argument("sft config: batch must be positive");
    if (!(lr > 0.0)) throw std::invalid_argument("sft config: lr must be positive");
    if (warmup_ratio < 0.0 || warmup_ratio > 1.0) throw std::invalid_argument("sft config: warmup_ratio in [0, 1]");
  }
};

struct SftResult {
  std::size_t steps = 0;
  double initial_loss = 0.0;
  double final_loss = 0.0;
  EvalResult eval;
  std::vector<double> losses;
};

inline double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

inline std::vector<std::vector<double>> snapshot(std::span<Parameter* const> params) {
  std::vector<std::vector<double>> s;
  for (const Parameter* p : params) s.emplace_back(p->value.data().begin(), p->value.data().end());
  return s;
}

inline void restore(std::span<Parameter* const> params, const std::vector<std::vector<double>>& s) {
  for (std::size_t i = 0; i < params.size(); ++i) std::copy(s[i].begin(), s[i].end(), params[i]->value.data().begin());
}

// Total optimizer steps for a corpus size under `cfg`.
inline std::size_t sft_total_steps(std::size_t corpus, const SftConfig& cfg) {
  const std::size_t per_epoch = (corpus + cfg.batch - 1) / cfg.batch;
  return std::min(cfg.max_steps, per_epoch * cfg.epochs);
}

// Interleaved SFT. `optimizer.steps` continues across resumed runs; the
// schedule position is the optimizer step count. On a non-finite loss the
// parameters are rolled back to the last good step and TrainingAbort is
// thrown.
inline SftResult run_sft(RoverModel& model, AdamW& optimizer, const Vocabulary& vocab,
                         const grounding::GroundingGrammar& grammar, const std::vector<Example>& train,
                         const std::vector<Example>& held_out, const SftConfig& cfg, const MetricsSink& sink = {}) {
  cfg.validate();
  if (train.empty()) throw ContractError("run_sft: empty training corpus");
  optimizer.weight_decay = cfg.weight_decay;
  const auto t0 = std::chrono::steady_clock::now();
  const std::size_t total = sft_total_steps(train.size(), cfg);
  auto params = model.parameters();
  SftResult result;
  std::vector<std::size_t> order(train.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::size_t cursor = order.size();
  std::uint64_t epoch = 0;
  std::vector<Example> eval_set(held_out.begin(), held_out.begin() + std::min(held_out.size(), cfg.eval_limit));
  auto run_eval = [&](std::size_t step) {
    auto ev = evaluate(model, vocab, grammar, eval_set, cfg.max_len);
    if (sink)
      sink({{"phase", "sft_eval"}, {"step", step}, {"accuracy", ev.answer_accuracy}, {"reward", ev.reward},
            {"gen_tokens", ev.mean_generated}, {"events", ev.mean_events}, {"seed", cfg.seed},
            {"wall_clock", seconds_since(t0)}});
    return ev;
  };
  auto last_good = snapshot(params);
  while (optimizer.steps < total) {
    const std::size_t step = optimizer.steps;
    std::vector<const Example*> batch;
    while (batch.size() < cfg.batch) {
      if (cursor == order.size()) {
        Rng er(mix_seed(cfg.seed, epoch++));
        er.shuffle(order);
        cursor = 0;
      }
      batch.push_back(&train[order[cursor++]]);
      if (cursor == order.size() && batch.size() >= train.size()) break;
    }
    zero_grads(params);
    Tape tape(true);
    auto loss = sft_loss(tape, model, grammar, batch);
    const double value = loss.loss.value()[0];
    if (!std::isfinite(value)) {
      restore(params, last_good);
      throw TrainingAbort("sft: non-finite loss at step " + std::to_string(step));
    }
    tape.backward(loss.loss);
    const double lr = cosine_lr(step, total, cfg.lr, cfg.warmup_ratio);
    try {
      optimizer.step(params, lr);
    } catch (const TrainingAbort&) {
      restore(params, last_good);
      throw;
    }
    last_good = snapshot(params);
    if (result.losses.empty()) result.initial_loss = value;
    result.losses.push_back(value);
    result.final_loss = value;
    if (sink)
      sink({{"phase", "sft"}, {"step", step}, {"loss", value}, {"lr", lr}, {"tokens", loss.supervised},
            {"seed", cfg.seed}, {"wall_clock", seconds_since(t0)}});
    if (cfg.eval_every && (step + 1) % cfg.eval_every == 0 && optimizer.steps < total) run_eval(step + 1);
  }
  result.steps = optimizer.steps;
  result.eval = run_eval(optimizer.steps);
  return result;
}

struct GrpoIteration {
  std::size_t iteration = 0;
  double mean_reward = 0.0;
  double loss = 0.0;
  double kl_mean = 0.0;
  double ratio_mean = 0.0, ratio_min = 0.0, ratio_max = 0.0;
  double lr = 0.0;
};

struct GrpoResult {
  std::vector<GrpoIteration> iterations;
  double eval_reward_initial = 0.0;  // fixed prompts and seeds, before the first update
  double eval_reward_final = 0.0;    // same prompts and seeds, after the last update
  std::uint64_t ref_hash_before = 0, ref_hash_after = 0;
};

inline std::uint64_t parameter_hash(const RoverModel& model) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const Parameter* p : model.all_tensors()) {
    h = fnv1a64(p->name, h);
    const auto d = p->value.data();
    h = fnv1a64({reinterpret_cast<const char*>(d.data()), d.size() * sizeof(double)}, h);
  }
  return h;
}

// Mean reward of G temperature samples on each of `prompts` with fixed seeds.
inline double group_reward(const RoverModel& policy, const Vocabulary& vocab,
                           const grounding::GroundingGrammar& grammar, const std::vector<Example>& prompts,
                           const RLConfig& cfg, std::uint64_t seed) {
  double sum = 0.0;
  std::size_t n = 0;
  for (std::size_t p = 0; p < prompts.size(); ++p) {
    auto g = sample_group(policy, vocab, grammar, prompts[p], p, cfg, mix_seed(seed, p));
    sum += g.mean;
    ++n;
  }
  return n ? sum / static_cast<double>(n) : 0.0;
}

// Interleaved GRPO; the reference policy is a frozen copy of the incoming
// model, the old policy is synchronized before every sampling round.
inline GrpoResult run_grpo(RoverModel& model, AdamW& optimizer, const Vocabulary& vocab,
                           const grounding::GroundingGrammar& grammar, const std::vector<Example>& prompts,
                           const RLConfig& cfg, const MetricsSink& sink = {}) {
  cfg.validate();
  if (prompts.empty()) throw ContractError("run_grpo: no prompts");
  optimizer.weight_decay = cfg.weight_decay;
  const auto t0 = std::chrono::steady_clock::now();
  const RoverModel ref = model;
  GrpoResult result;
  result.ref_hash_before = parameter_hash(ref);
  auto params = model.parameters();
  std::vector<Example> eval_set(prompts.begin(), prompts.begin() + std::min(prompts.size(), cfg.eval_prompts));
  const std::uint64_t eval_seed = mix_seed(cfg.seed, 0xE7A1);
  result.eval_reward_initial = group_reward(model, vocab, grammar, eval_set, cfg, eval_seed);
  if (sink)
    sink({{"phase", "grpo_eval"}, {"iteration", 0}, {"reward", result.eval_reward_initial}, {"beta", cfg.beta},
          {"group_size", cfg.group_size}, {"seed", cfg.seed}, {"wall_clock", seconds_since(t0)}});
  std::size_t zero_streak = 0;
  std::size_t cursor = 0;
  for (std::size_t it = 0; it < cfg.iterations; ++it) {
    const RoverModel old = model;
    std::vector<GroupSample> groups;
    std::vector<const Example*> used;
    for (std::size_t p = 0; p < cfg.prompts_per_iteration; ++p) {
      const std::size_t idx = cursor++ % prompts.size();
      groups.push_back(sample_group(old, vocab, grammar, prompts[idx], idx, cfg, mix_seed(cfg.seed, mix_seed(it, p))));
      used.push_back(&prompts[idx]);
    }
    std::vector<ScoredGroup> scored;
    double reward = 0.0;
    for (std::size_t g = 0; g < groups.size(); ++g) {
      ScoredGroup sg{&groups[g], used[g], {}};
      for (const auto& tr : groups[g].trajectories)
        sg.ref_logprobs.push_back(tr.tokens.empty() ? std::vector<double>{} : score_tokens(ref, grammar, *used[g], tr.tokens));
      scored.push_back(std::move(sg));
      reward += groups[g].mean / static_cast<double>(groups.size());
    }
    zero_grads(params);
    Tape tape(true);
    auto terms = grpo_loss(tape, model, grammar, scored, cfg.beta);
    const double loss = terms.loss.value()[0];
    if (!std::isfinite(loss)) throw TrainingAbort("grpo: non-finite loss at iteration " + std::to_string(it));
    tape.backward(terms.loss);
    const double lr = linear_lr(it, cfg.iterations, cfg.lr);
    optimizer.step(params, lr);
    GrpoIteration rec{it, reward, loss, terms.kl_mean, terms.ratio_mean, terms.ratio_min, terms.ratio_max, lr};
    result.iterations.push_back(rec);
    if (sink)
      sink({{"phase", "grpo"}, {"step", it}, {"loss", loss}, {"reward", reward}, {"kl", terms.kl_mean},
            {"ratio_mean", terms.ratio_mean}, {"ratio_min", terms.ratio_min}, {"ratio_max", terms.ratio_max},
            {"lr", lr}, {"beta", cfg.beta}, {"group_size", cfg.group_size}, {"seed", cfg.seed},
            {"wall_clock", seconds_since(t0)}});
    zero_streak = reward == 0.0 ? zero_streak + 1 : 0;
    if (cfg.collapse_patience && zero_streak >= cfg.collapse_patience)
      throw TrainingAbort("grpo: reward collapsed to zero for " + std::to_string(zero_streak) +
                          " iterations (last iteration " + std::to_string(it) + ")");
  }
  result.eval_reward_final = group_reward(model, vocab, grammar, eval_set, cfg, eval_seed);
  result.ref_hash_after = parameter_hash(ref);
  if (sink)
    sink({{"phase", "grpo_eval"}, {"iteration", cfg.iterations}, {"reward", result.eval_reward_final},
          {"beta", cfg.beta}, {"group_size", cfg.group_size}, {"seed", cfg.seed}, {"wall_clock", seconds_since(t0)}});
  return result;
}

}  // namespace rover::training
