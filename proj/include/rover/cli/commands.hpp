#pragma once

// Subcommands behind the rover tool. Each takes a validated Config, writes its
// artifacts under an output directory and returns a JSON summary; failures are
// reported by exception and mapped to exit codes by run_command.

#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "rover/backbone/sequence.hpp"
#include "rover/cli/config.hpp"
#include "rover/tasks/tasks.hpp"
#include "rover/training/training.hpp"
#include "rover/verify/checks.hpp"

namespace rover::cli {

enum ExitCode : int {
  kOk = 0,
  kVerifyFailure = 1,
  kConfigError = 2,
  kIoError = 3,
  kTrainingAbort = 4,
  kCheckpointMismatch = 5,
};

class VerifyFailure : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace fs = std::filesystem;

namespace detail {

inline void ensure_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw std::ios_base::failure("cannot create directory '" + dir + "'");
}

inline std::ofstream open_out(const std::string& path, bool append = false) {
  std::ofstream out(path, append ? std::ios::app : std::ios::trunc);
  if (!out) throw std::ios_base::failure("cannot open '" + path + "' for writing");
  return out;
}

inline void write_json(const std::string& path, const json& j) {
  auto out = open_out(path);
  out << j.dump(2) << '\n';
  if (!out) throw std::ios_base::failure("write to '" + path + "' failed");
}

inline std::string file_hash(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::ios_base::failure("cannot open '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return hex64(fnv1a64(ss.str()));
}

inline json tensor_rows(const Tensor& t) {
  json rows = json::array();
  if (t.rank() == 1) {
    for (double v : t.data()) rows.push_back(v);
    return rows;
  }
  for (std::size_t r = 0; r < t.rows(); ++r) {
    auto row = t.row(r);
    rows.push_back(std::vector<double>(row.begin(), row.end()));
  }
  return rows;
}

inline std::vector<std::string> words_of(const Vocabulary& vocab, std::span<const TokenId> ids) {
  std::vector<std::string> w;
  w.reserve(ids.size());
  for (TokenId t : ids) w.push_back(vocab.token(t));
  return w;
}

}  // namespace detail

// Held-out instances are drawn from the same family mix under a seed derived
// from the task seed, so they never share a generator seed with the corpus.
inline std::uint64_t held_out_seed(const Config& c) { return mix_seed(c.task_seed, 0x48454C44ULL); }

inline std::vector<tasks::TaskInstance> held_out_instances(const Config& c) {
  return tasks::generate_corpus(c.families, c.held_out, held_out_seed(c));
}

inline scene::FeatureBank feature_bank(const Config& c) { return scene::FeatureBank(c.feature_seed, c.model.d); }

// ---- gen ---------------------------------------------------------------------------

inline json cmd_gen(const Config& cfg, std::size_t count, const std::string& out_path) {
  auto insts = tasks::generate_corpus(cfg.families, count, cfg.task_seed);
  tasks::save_corpus(insts, out_path);
  json fams = json::object();
  std::size_t prompt_tokens = 0, target_tokens = 0, longest = 0;
  for (const auto& t : insts) {
    fams[tasks::to_string(t.family)] = fams.value(tasks::to_string(t.family), 0) + 1;
    const std::size_t p = t.prompt().size(), q = t.transcript.size();
    prompt_tokens += p;
    target_tokens += q;
    longest = std::max(longest, p + q);
  }
  const double n = insts.empty() ? 1.0 : static_cast<double>(insts.size());
  return {{"command", "gen"},
          {"path", out_path},
          {"count", insts.size()},
          {"families", fams},
          {"mean_prompt_tokens", static_cast<double>(prompt_tokens) / n},
          {"mean_target_tokens", static_cast<double>(target_tokens) / n},
          {"max_text_tokens", longest},
          {"corpus_hash", detail::file_hash(out_path)}};
}

// ---- train-sft ---------------------------------------------------------------------

struct SftRun {
  json summary;
  training::SftResult result;
};

inline std::string sft_checkpoint(const std::string& out_dir) { return out_dir + "/sft.ckpt"; }
inline std::string grpo_checkpoint(const std::string& out_dir) { return out_dir + "/grpo.ckpt"; }

// Trains from scratch, or from `resume` (checkpoint with optimizer state) in
// which case the step count and schedule continue where it stopped. On a
// training abort the last good parameters are saved before rethrowing.
inline SftRun cmd_train_sft(const Config& cfg, const Vocabulary& vocab, const std::string& corpus_path,
                            const std::string& out_dir, const std::optional<std::string>& resume = std::nullopt) {
  const auto insts = tasks::load_corpus(corpus_path);
  const auto held = held_out_instances(cfg);
  const auto bank = feature_bank(cfg);
  const auto train = training::encode_all(insts, vocab, bank);
  const auto eval = training::encode_all(held, vocab, bank);
  const auto grammar = grounding::GroundingGrammar::from_vocabulary(vocab);
  backbone::RoverModel model(cfg.model);
  training::AdamW opt;
  if (resume) load_checkpoint(*resume, model, &opt, cfg, vocab);
  detail::ensure_dir(out_dir);
  auto metrics = detail::open_out(out_dir + "/metrics.jsonl", resume.has_value());
  auto sink = [&](const json& j) { metrics << j.dump() << '\n' << std::flush; };
  const std::string ckpt = sft_checkpoint(out_dir);
  SftRun run;
  try {
    run.result = training::run_sft(model, opt, vocab, grammar, train, eval, cfg.sft, sink);
  } catch (const training::TrainingAbort& e) {
    save_checkpoint(ckpt, model, &opt, cfg, vocab, {{"phase", "sft"}, {"steps", opt.steps}, {"aborted", e.what()}});
    throw;
  }
  save_checkpoint(ckpt, model, &opt, cfg, vocab, {{"phase", "sft"}, {"steps", opt.steps}});
  run.summary = {{"command", "train-sft"},
                 {"checkpoint", ckpt},
                 {"steps", run.result.steps},
                 {"initial_loss", run.result.initial_loss},
                 {"final_loss", run.result.final_loss},
                 {"held_out_accuracy", run.result.eval.answer_accuracy},
                 {"held_out_reward", run.result.eval.reward},
                 {"gen_tokens", run.result.eval.mean_generated},
                 {"variant", router::to_string(cfg.model.variant)}};
  return run;
}

// ---- train-grpo --------------------------------------------------------------------

struct GrpoRun {
  json summary;
  training::GrpoResult result;
};

// Starts from the SFT checkpoint; the reference policy is that checkpoint,
// frozen. Prompts come from the configured corpus.
inline GrpoRun cmd_train_grpo(const Config& cfg, const Vocabulary& vocab, const std::string& sft_ckpt,
                              const std::string& out_dir) {
  backbone::RoverModel model(cfg.model);
  load_checkpoint(sft_ckpt, model, nullptr, cfg, vocab);
  const auto insts = tasks::load_corpus(cfg.corpus_path);
  const auto prompts = training::encode_all(insts, vocab, feature_bank(cfg));
  const auto grammar = grounding::GroundingGrammar::from_vocabulary(vocab);
  detail::ensure_dir(out_dir);
  auto metrics = detail::open_out(out_dir + "/metrics.jsonl");
  auto sink = [&](const json& j) { metrics << j.dump() << '\n' << std::flush; };
  training::AdamW opt;
  GrpoRun run;
  run.result = training::run_grpo(model, opt, vocab, grammar, prompts, cfg.grpo, sink);
  const std::string ckpt = grpo_checkpoint(out_dir);
  save_checkpoint(ckpt, model, &opt, cfg, vocab,
                  {{"phase", "grpo"}, {"iterations", cfg.grpo.iterations}, {"reference", sft_ckpt}});
  run.summary = {{"command", "train-grpo"},
                 {"checkpoint", ckpt},
                 {"beta", cfg.grpo.beta},
                 {"group_size", cfg.grpo.group_size},
                 {"iterations", run.result.iterations.size()},
                 {"eval_reward_initial", run.result.eval_reward_initial},
                 {"eval_reward_final", run.result.eval_reward_final},
                 {"ref_hash_before", detail::hex64(run.result.ref_hash_before)},
                 {"ref_hash_after", detail::hex64(run.result.ref_hash_after)}};
  return run;
}

// ---- decode ------------------------------------------------------------------------

struct DecodeOptions {
  std::optional<bool> greedy;
  std::optional<double> temperature;
  bool dump_attention = false;
};

// Decodes every instance of the corpus at `input`. Writes one trajectory record
// per instance to trajectories.jsonl and, with dump_attention, one record per
// (trajectory, event) to attention.jsonl.
inline json cmd_decode(const Config& cfg, const Vocabulary& vocab, const std::string& ckpt, const std::string& input,
                       const std::string& out_dir, const DecodeOptions& opts = {}) {
  backbone::RoverModel model(cfg.model);
  load_checkpoint(ckpt, model, nullptr, cfg, vocab);
  const auto insts = tasks::load_corpus(input);
  const auto bank = feature_bank(cfg);
  const auto grammar = grounding::GroundingGrammar::from_vocabulary(vocab);
  backbone::SamplingConfig sampling{opts.greedy.value_or(cfg.decode.greedy),
                                    opts.temperature.value_or(cfg.decode.temperature), cfg.decode.seed};
  if (!(sampling.temperature > 0.0)) throw ConfigError("decode: temperature must be positive");
  detail::ensure_dir(out_dir);
  auto traj_out = detail::open_out(out_dir + "/trajectories.jsonl");
  std::optional<std::ofstream> attn_out;
  if (opts.dump_attention) attn_out = detail::open_out(out_dir + "/attention.jsonl");
  double correct = 0.0, reward = 0.0, generated = 0.0;
  std::size_t budget_violations = 0, attention_records = 0;
  for (std::size_t i = 0; i < insts.size(); ++i) {
    const auto ex = training::encode(insts[i], vocab, bank);
    backbone::SamplingConfig sc = sampling;
    sc.seed = mix_seed(sampling.seed, i);
    const auto tr = backbone::decode(model, grammar, ex.images, ex.prompt, sc, cfg.decode.max_len, opts.dump_attention);
    const auto answer = training::final_answer(vocab, tr.tokens);
    const bool ok = answer && *answer == insts[i].answer;
    const int r = tasks::reward(vocab, grammar, insts[i], tr.tokens, tr.truncated);
    const std::size_t prompt_len = tr.state.input_length;
    const std::size_t k = tr.state.events.size();
    const std::size_t total = tr.state.size();
    // Positions = inputs + sampled tokens + three per event, unless truncation
    // cut an injection short.
    const bool budget = total == prompt_len + tr.tokens.size() + 3 * k;
    if (!budget && !tr.truncated) ++budget_violations;
    json events = json::array();
    for (const auto& ev : tr.state.events)
      events.push_back({{"phrase", tasks::detail::join(detail::words_of(vocab, ev.phrase))},
                        {"image", ev.image_index},
                        {"box", {ev.box.x_min, ev.box.y_min, ev.box.x_max, ev.box.y_max}},
                        {"trigger", ev.trigger_position}});
    traj_out << json{{"index", i},
                     {"family", tasks::to_string(insts[i].family)},
                     {"seed", insts[i].seed},
                     {"prompt", tasks::detail::join(insts[i].prompt())},
                     {"output", tasks::detail::join(detail::words_of(vocab, tr.tokens))},
                     {"answer", answer ? json(*answer) : json(nullptr)},
                     {"expected", insts[i].answer},
                     {"correct", ok},
                     {"reward", r},
                     {"events", events},
                     {"input_tokens", prompt_len},
                     {"generated_tokens", tr.tokens.size()},
                     {"injected_tokens", tr.injections.size()},
                     {"total_positions", total},
                     {"budget_ok", budget},
                     {"truncated", tr.truncated}}
                    .dump()
             << '\n';
    if (attn_out)
      for (const auto& t : tr.traces) {
        json sift = nullptr;
        if (t.sift_maps)
          sift = {{"positive", detail::tensor_rows(t.sift_maps->positive)},
                  {"negative", detail::tensor_rows(t.sift_maps->negative)},
                  {"diff", detail::tensor_rows(t.sift_maps->diff)}};
        *attn_out << json{{"trajectory", i},
                          {"event", t.event_index},
                          {"image", t.image_index},
                          {"box", {t.box.x_min, t.box.y_min, t.box.x_max, t.box.y_max}},
                          {"roi_patches", t.roi_size},
                          {"context_patches", t.context_patches},
                          {"sift", sift},
                          {"weave", detail::tensor_rows(t.weave_weights)}}
                         .dump()
                  << '\n';
        ++attention_records;
      }
    correct += ok;
    reward += r;
    generated += static_cast<double>(tr.tokens.size());
  }
  if (!traj_out) throw std::ios_base::failure("write to trajectories.jsonl failed");
  const double n = insts.empty() ? 1.0 : static_cast<double>(insts.size());
  json summary = {{"command", "decode"},
                  {"count", insts.size()},
                  {"greedy", sampling.greedy},
                  {"temperature", sampling.temperature},
                  {"accuracy", correct / n},
                  {"reward", reward / n},
                  {"gen_tokens", generated / n},
                  {"budget_violations", budget_violations},
                  {"attention_records", attention_records}};
  detail::write_json(out_dir + "/decode_summary.json", summary);
  return summary;
}

// ---- verify ------------------------------------------------------------------------

struct Suite {
  std::string name;
  std::string module;
  std::function<verify::CheckResult()> run;
};

struct VerifyOptions {
  std::optional<std::string> inject_fault;  // "lambda-nan"
  std::uint64_t seed = 1;
};

inline verify::CheckResult check_config_roundtrip(const Vocabulary& vocab) {
  verify::CheckResult res;
  Config c;
  c.model.d = 16;
  c.model.variant = router::Variant::SiftD;
  c.sft.lr = 3e-4;
  c.grpo.beta = 0.02;
  c.families = {tasks::FamilyConfig::defaults(tasks::Family::Counting),
                tasks::FamilyConfig::defaults(tasks::Family::Attribute)};
  const Config back = config_from_json(to_json(c), vocab);
  if (to_json(back) != to_json(config_from_json(to_json(back), vocab)) || to_json(back)["model"] != to_json(c)["model"] ||
      to_json(back)["tasks"] != to_json(c)["tasks"])
    res.fail("config does not survive a JSON round trip");
  json bad = to_json(c);
  bad["sft"]["learning_rate"] = 1.0;
  try {
    config_from_json(bad, vocab);
    res.fail("unknown key accepted");
  } catch (const ConfigError& e) {
    if (std::string(e.what()).find("sft.learning_rate") == std::string::npos)
      res.fail(std::string("unknown-key error does not name the key: ") + e.what());
  }
  if (res.pass) res.detail = "round trip exact; unknown keys rejected by path";
  return res;
}

inline verify::CheckResult check_checkpoint_gate(const Vocabulary& vocab, std::uint64_t seed) {
  verify::CheckResult res;
  const fs::path dir = fs::temp_directory_path() / ("rover_gate_" + detail::hex64(mix_seed(seed, 0x6A7E)));
  fs::create_directories(dir);
  const std::string path = (dir / "m.ckpt").string();
  Config a;
  a.model.d = 16;
  a.model.vocab_size = vocab.size();
  backbone::RoverModel model(a.model);
  save_checkpoint(path, model, nullptr, a, vocab);
  Config b = a;
  b.model.variant = router::Variant::Off;
  backbone::RoverModel other(b.model);
  try {
    load_checkpoint(path, other, nullptr, b, vocab);
    res.fail("checkpoint loaded under a structurally different config");
  } catch (const CheckpointMismatch&) {
  }
  Config c = a;
  c.sft.lr *= 2.0;  // not structural
  backbone::RoverModel same(c.model);
  try {
    load_checkpoint(path, same, nullptr, c, vocab);
  } catch (const std::exception& e) {
    res.fail(std::string("checkpoint rejected under a schedule-only change: ") + e.what());
  }
  fs::remove_all(dir);
  if (res.pass) res.detail = "structural change rejected, schedule change accepted";
  return res;
}

// Every module has at least one suite; sizes are chosen to keep the full run
// within a few minutes on one core.
inline std::vector<Suite> suite_registry(const Vocabulary& vocab, const VerifyOptions& opts) {
  const std::uint64_t s = opts.seed;
  std::optional<double> lambda;
  if (opts.inject_fault) {
    if (*opts.inject_fault != "lambda-nan") throw ConfigError("verify: unknown fault '" + *opts.inject_fault + "'");
    lambda = std::nan("");
  }
  return {
      {"op-gradients", "numerics", [=] { return verify::check_op_gradients(s); }},
      {"checkpoint-roundtrip", "numerics", [=] { return verify::check_checkpoint_roundtrip(s); }},
      {"parser-conformance", "grounding_parser", [=] { return verify::check_parser_conformance(2000, 500, s); }},
      {"roi-partition", "scene", [=] { return verify::check_roi_partition(500, s); }},
      {"featurize", "scene", [=] { return verify::check_featurize(s); }},
      {"diff-attn-oracle", "router", [=] { return verify::check_diff_attn_oracle(100, s); }},
      {"fallback", "router", [=] { return verify::check_fallback(s); }},
      {"vws-causality", "router", [=] { return verify::check_vws_causality(50, s); }},
      {"constant-overhead", "backbone", [=] { return verify::check_constant_overhead(100, s); }},
      {"teacher-force-replay", "backbone", [=] { return verify::check_teacher_force_replay(10, s); }},
      {"causality", "backbone", [=] { return verify::check_causality(10, s); }},
      {"gradients", "training", [=] { return verify::check_gradients(16, 1e-5, 1e-4, s, lambda).result; }},
      {"mask-discipline", "training", [=] { return verify::check_mask_discipline(s); }},
      {"grpo-algebra", "training", [=] { return verify::check_grpo_algebra(s); }},
      {"kl-estimator", "training", [=] { return verify::check_kl_estimator(20000, s); }},
      {"adamw-quadratic", "training", [=] { return verify::check_adamw_quadratic(s); }},
      {"generator-parser", "tasks", [=] { return verify::check_generator_parser(50, s); }},
      {"reward-rules", "tasks", [=] { return verify::check_reward_rules(s); }},
      {"corpus-roundtrip", "tasks", [=] { return verify::check_corpus_roundtrip(s); }},
      {"config-roundtrip", "cli", [&vocab] { return check_config_roundtrip(vocab); }},
      {"checkpoint-gate", "cli", [&vocab, s] { return check_checkpoint_gate(vocab, s); }},
  };
}

inline const std::vector<std::string>& module_names() {
  static const std::vector<std::string> m{"numerics", "grounding_parser", "scene",    "router",
                                          "backbone", "training",         "tasks",    "cli"};
  return m;
}

// Runs the registry (or the suites named in `only`), prints a table to `out`
// and throws VerifyFailure naming the failing suites.
inline json cmd_verify(const Vocabulary& vocab, std::ostream& out, const VerifyOptions& opts = {},
                       const std::vector<std::string>& only = {}) {
  const auto suites = suite_registry(vocab, opts);
  json rows = json::array();
  std::vector<std::string> failed;
  out << std::left << std::setw(22) << "suite" << std::setw(18) << "module" << std::setw(6) << "result"
      << "detail\n";
  for (const auto& suite : suites) {
    if (!only.empty() && std::find(only.begin(), only.end(), suite.name) == only.end()) continue;
    const auto t0 = std::chrono::steady_clock::now();
    verify::CheckResult r;
    try {
      r = suite.run();
    } catch (const std::exception& e) {
      r.fail(std::string("threw: ") + e.what());
    }
    const double secs = training::seconds_since(t0);
    out << std::left << std::setw(22) << suite.name << std::setw(18) << suite.module << std::setw(6)
        << (r.pass ? "PASS" : "FAIL") << r.detail << " [" << std::fixed << std::setprecision(1) << secs << "s]\n"
        << std::defaultfloat << std::flush;
    rows.push_back({{"suite", suite.name}, {"module", suite.module}, {"pass", r.pass}, {"detail", r.detail}});
    if (!r.pass) failed.push_back(suite.name + " (" + r.detail + ")");
  }
  json summary = {{"command", "verify"}, {"suites", rows}, {"failed", failed.size()}};
  if (!failed.empty()) {
    std::string msg = "verification failed: ";
    for (std::size_t i = 0; i < failed.size(); ++i) msg += (i ? "; " : "") + failed[i];
    throw VerifyFailure(msg);
  }
  return summary;
}

// ---- dispatch ----------------------------------------------------------------------

// Runs `body`, prints its summary to `out` and maps exceptions to exit codes.
inline int run_command(const std::function<json()>& body, std::ostream& out, std::ostream& err) {
  try {
    const json summary = body();
    if (!summary.is_null()) out << summary.dump() << '\n';
    return kOk;
  } catch (const VerifyFailure& e) {
    err << "error: " << e.what() << '\n';
    return kVerifyFailure;
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << '\n';
    return kConfigError;
  } catch (const CheckpointMismatch& e) {
    err << "error: " << e.what() << '\n';
    return kCheckpointMismatch;
  } catch (const training::TrainingAbort& e) {
    err << "error: training aborted: " << e.what() << '\n';
    return kTrainingAbort;
  } catch (const std::ios_base::failure& e) {
    err << "error: " << e.what() << '\n';
    return kIoError;
  } catch (const tasks::CorpusError& e) {
    err << "error: " << e.what() << '\n';
    return kIoError;
  } catch (const CheckpointError& e) {
    err << "error: " << e.what() << '\n';
    return kIoError;
  }
}

}  // namespace rover::cli
