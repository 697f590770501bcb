// Acceptance run: one PASS/FAIL line per criterion. Arguments select
// criteria by number (default: all); exit status is 0 only if every selected
// criterion passes.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <string>

#include "rover/cli/commands.hpp"
#include "rover/verify/checks.hpp"

using namespace rover;
namespace fs = std::filesystem;

namespace {

// ---- pinned sizes and tolerances ------------------------------------------------------

constexpr std::uint64_t kSeed = 1;

constexpr std::size_t kOverheadDecodes = 1000;
constexpr std::size_t kDiffAttnCases = 100;
constexpr std::size_t kCausalityTrajectories = 200;
constexpr std::size_t kGradD = 16;
constexpr double kGradStep = 1e-5;
constexpr double kGradTol = 1e-4;
constexpr std::size_t kParserCorpus = 10000;
constexpr std::size_t kParserAdversarial = 1000;

// End-to-end learning. Three seeds, two variants each, one shared budget of
// 30 CPU-minutes.
const std::uint64_t kRunSeeds[] = {1, 2, 3};
constexpr std::size_t kTrainInstances = 20000;
constexpr std::size_t kHeldOut = 200;
constexpr std::size_t kSftBatch = 8;
constexpr std::size_t kSftSteps = 3000;
constexpr double kSftLr = 2e-3;
constexpr double kTargetAccuracy = 0.90;
constexpr double kBudgetSeconds = 30.0 * 60.0;

constexpr std::size_t kGrpoIterations = 40;
constexpr std::size_t kGrpoPrompts = 8;
constexpr std::size_t kGrpoEvalPrompts = 32;

constexpr std::size_t kDeterminismCount = 20;

// ---- reporting ----------------------------------------------------------------------

struct Line {
  int id;
  std::string name;
  bool pass;
  std::string detail;
  double seconds;
};

std::vector<Line> g_lines;

void report(int id, const std::string& name, const verify::CheckResult& r, double secs) {
  g_lines.push_back({id, name, r.pass, r.detail, secs});
  std::printf("%s %2d %-26s %s [%.1fs]\n", r.pass ? "PASS" : "FAIL", id, name.c_str(), r.detail.c_str(), secs);
  std::fflush(stdout);
}

template <typename F>
void run(int id, const std::string& name, double limit_seconds, F&& body) {
  const auto t0 = std::chrono::steady_clock::now();
  verify::CheckResult r;
  try {
    r = body();
  } catch (const std::exception& e) {
    r.fail(std::string("threw: ") + e.what());
  }
  const double secs = training::seconds_since(t0);
  if (secs > limit_seconds) {
    std::ostringstream os;
    os << "runtime " << secs << " s over the " << limit_seconds << " s limit";
    r.fail(r.detail.empty() ? os.str() : r.detail + "; " + os.str());
  }
  report(id, name, r, secs);
}

std::string fmt(double v, int prec = 3) {
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(prec);
  os << v;
  return os.str();
}

// ---- end-to-end learning ----------------------------------------------------------------

cli::Config learning_config(std::uint64_t seed, router::Variant variant, const Vocabulary& vocab) {
  cli::Config c = cli::config_from_json(nlohmann::json::object(), vocab);
  c.model.variant = variant;
  c.model.seed = c.task_seed = c.sft.seed = c.grpo.seed = seed;
  c.count = kTrainInstances;
  c.held_out = kHeldOut;
  c.sft.batch = kSftBatch;
  c.sft.max_steps = kSftSteps;
  c.sft.epochs = kSftSteps;  // the step cap binds
  c.sft.lr = kSftLr;
  c.sft.eval_limit = kHeldOut;
  c.grpo.iterations = kGrpoIterations;
  c.grpo.prompts_per_iteration = kGrpoPrompts;
  c.grpo.eval_prompts = kGrpoEvalPrompts;
  return c;
}

struct LearningRun {
  std::uint64_t seed;
  double lsw = 0.0, off = 0.0;
  std::optional<backbone::RoverModel> lsw_model;
  cli::Config lsw_config;
};

std::vector<LearningRun> g_runs;

verify::CheckResult criterion_sft(const Vocabulary& vocab) {
  verify::CheckResult res;
  const auto grammar = grounding::GroundingGrammar::from_vocabulary(vocab);
  std::ostringstream os;
  double sum_lsw = 0.0, sum_off = 0.0;
  bool each_lower = true, each_target = true;
  for (std::uint64_t seed : kRunSeeds) {
    LearningRun run;
    run.seed = seed;
    for (router::Variant v : {router::Variant::LSW, router::Variant::Off}) {
      const cli::Config c = learning_config(seed, v, vocab);
      const auto bank = cli::feature_bank(c);
      const auto train_insts = tasks::generate_corpus(c.families, c.count, c.task_seed);
      const auto held_insts = cli::held_out_instances(c);
      const auto train = training::encode_all(train_insts, vocab, bank);
      const auto held = training::encode_all(held_insts, vocab, bank);
      backbone::RoverModel model(c.model);
      training::AdamW opt;
      const auto r = training::run_sft(model, opt, vocab, grammar, train, held, c.sft);
      if (v == router::Variant::LSW) {
        run.lsw = r.eval.answer_accuracy;
        run.lsw_model.emplace(std::move(model));
        run.lsw_config = c;
      } else {
        run.off = r.eval.answer_accuracy;
      }
    }
    sum_lsw += run.lsw;
    sum_off += run.off;
    each_lower = each_lower && run.off < run.lsw;
    each_target = each_target && run.lsw >= kTargetAccuracy;
    os << "seed " << seed << ": LSW " << fmt(run.lsw) << " off " << fmt(run.off) << " gap " << fmt(run.lsw - run.off)
       << "; ";
    g_runs.push_back(std::move(run));
  }
  const double n = static_cast<double>(std::size(kRunSeeds));
  os << "mean LSW " << fmt(sum_lsw / n) << " off " << fmt(sum_off / n) << " gap " << fmt((sum_lsw - sum_off) / n)
     << " (chance 0.250)";
  res.detail = os.str();
  std::string why;
  if (!each_target) why += "LSW held-out accuracy below " + fmt(kTargetAccuracy, 2) + " on some seed; ";
  if (!each_lower) why += "routing-off baseline not lower on every seed; ";
  if (!why.empty()) res.fail(why + res.detail);
  return res;
}

verify::CheckResult criterion_grpo(const Vocabulary& vocab) {
  verify::CheckResult res;
  if (g_runs.empty()) {
    res.fail("needs the trained models of the SFT criterion");
    return res;
  }
  const auto grammar = grounding::GroundingGrammar::from_vocabulary(vocab);
  std::ostringstream os;
  bool all = true;
  for (auto& run : g_runs) {
    const cli::Config& c = run.lsw_config;
    const auto bank = cli::feature_bank(c);
    const auto insts = tasks::generate_corpus(c.families, c.count, c.task_seed);
    const auto prompts = training::encode_all(insts, vocab, bank);
    backbone::RoverModel model = *run.lsw_model;
    training::AdamW opt;
    const auto r = training::run_grpo(model, opt, vocab, grammar, prompts, c.grpo);
    const bool ok = r.eval_reward_final >= r.eval_reward_initial;
    all = all && ok;
    os << "seed " << run.seed << ": " << fmt(r.eval_reward_initial) << " -> " << fmt(r.eval_reward_final) << "; ";
  }
  res.detail = os.str();
  res.detail.resize(res.detail.size() - 2);
  if (!all) res.fail("final group reward below iteration 0 on some seed; " + res.detail);
  return res;
}

// ---- determinism ----------------------------------------------------------------------

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

verify::CheckResult criterion_determinism(const Vocabulary& vocab) {
  verify::CheckResult res;
  const fs::path dir = fs::temp_directory_path() / "rover_acceptance_determinism";
  fs::remove_all(dir);
  fs::create_directories(dir);
  cli::Config c = cli::config_from_json(nlohmann::json::object(), vocab);
  backbone::RoverModel model(c.model);
  verify::perturb_router(model, kSeed);
  const std::string ckpt = (dir / "m.ckpt").string();
  cli::save_checkpoint(ckpt, model, nullptr, c, vocab);
  std::string corpus[2], traj[2];
  for (int k = 0; k < 2; ++k) {
    const fs::path cp = dir / ("corpus" + std::to_string(k) + ".jsonl");
    const fs::path out = dir / ("dec" + std::to_string(k));
    cli::cmd_gen(c, kDeterminismCount, cp.string());
    cli::DecodeOptions o;
    o.greedy = true;
    cli::cmd_decode(c, vocab, ckpt, cp.string(), out.string(), o);
    corpus[k] = slurp(cp);
    traj[k] = slurp(out / "trajectories.jsonl");
  }
  if (corpus[0].empty() || corpus[0] != corpus[1]) res.fail("corpus bytes differ between runs");
  if (traj[0].empty() || traj[0] != traj[1]) res.fail("greedy trajectories differ between runs");
  if (res.pass)
    res.detail = std::to_string(kDeterminismCount) + " instances: corpus " + std::to_string(corpus[0].size()) +
                 " bytes and trajectories " + std::to_string(traj[0].size()) + " bytes identical";
  fs::remove_all(dir);
  return res;
}

}  // namespace


int main(int argc, char** argv) {
  std::set<int> want;
  for (int i = 1; i < argc; ++i) want.insert(std::stoi(argv[i]));
  auto selected = [&](int id) { return want.empty() || want.count(id); };
  const Vocabulary vocab;

  if (selected(1))
    run(1, "constant-overhead", 60.0, [] { return verify::check_constant_overhead(kOverheadDecodes, kSeed); });
  if (selected(2)) run(2, "fallback-exactness", 60.0, [] { return verify::check_fallback(kSeed); });
  if (selected(3))
    run(3, "diffattn-oracle", 60.0, [] { return verify::check_diff_attn_oracle(kDiffAttnCases, kSeed); });
  if (selected(4))
    run(4, "vws-causality", 60.0, [] { return verify::check_vws_causality(kCausalityTrajectories, kSeed); });
  if (selected(5))
    run(5, "gradient-integrity", 300.0, [] { return verify::check_gradients(kGradD, kGradStep, kGradTol, kSeed).result; });
  if (selected(6)) run(6, "mask-discipline", 60.0, [] { return verify::check_mask_discipline(kSeed); });
  if (selected(7)) run(7, "grpo-algebra", 60.0, [] { return verify::check_grpo_algebra(kSeed); });
  if (selected(8))
    run(8, "parser-conformance", 60.0,
        [] { return verify::check_parser_conformance(kParserCorpus, kParserAdversarial, kSeed); });
  if (selected(9) || selected(10)) run(9, "sft-learning", kBudgetSeconds, [&] { return criterion_sft(vocab); });
  if (selected(10)) run(10, "grpo-improvement", kBudgetSeconds, [&] { return criterion_grpo(vocab); });
  if (selected(11)) run(11, "determinism", 60.0, [&] { return criterion_determinism(vocab); });

  std::size_t failed = 0;
  for (const auto& l : g_lines) failed += !l.pass;
  std::printf("%zu/%zu criteria passed\n", g_lines.size() - failed, g_lines.size());
  return failed ? 1 : 0;
}
