// rover: corpus generation, training, decoding and verification.

#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "rover/cli/commands.hpp"

using namespace rover;
using namespace rover::cli;

namespace {

struct Overrides {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::optional<std::string> variant;
};

Config resolve(const Overrides& o, const Vocabulary& vocab) {
  Config c = o.config_path.empty() ? config_from_json(json::object(), vocab) : load_config(o.config_path, vocab);
  if (o.seed) {
    c.task_seed = c.model.seed = c.sft.seed = c.grpo.seed = c.decode.seed = *o.seed;
  }
  if (o.out) c.out_path = *o.out;
  if (o.variant) {
    try {
      c.model.variant = router::parse_variant(*o.variant);
    } catch (const std::exception& e) {
      throw ConfigError(std::string("--variant: ") + e.what());
    }
  }
  return c;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"rover: object-centric visual evidence routing on synthetic multi-image tasks"};
  app.require_subcommand(1);
  Overrides ov;
  app.add_option("--config", ov.config_path, "JSON configuration file");
  app.add_option("--seed", ov.seed, "override every seed except the feature seed");
  app.add_option("--out", ov.out, "override paths.out");
  app.add_option("--variant", ov.variant, "override router.variant (LSW, SW, Sift_d, Sift_s, off)");

  auto* gen = app.add_subcommand("gen", "generate a task corpus");
  std::optional<std::size_t> count;
  std::optional<std::string> gen_out;
  gen->add_option("--count", count, "instances (default tasks.count)");
  gen->add_option("-o,--output", gen_out, "corpus path (default paths.corpus)");

  auto* sft = app.add_subcommand("train-sft", "interleaved supervised fine-tuning");
  std::optional<std::string> corpus, resume;
  sft->add_option("--corpus", corpus, "corpus path (default paths.corpus)");
  sft->add_option("--resume", resume, "continue from a checkpoint");

  auto* grpo = app.add_subcommand("train-grpo", "interleaved GRPO from an SFT checkpoint");
  std::string sft_ckpt;
  grpo->add_option("--checkpoint", sft_ckpt, "SFT checkpoint")->required();

  auto* dec = app.add_subcommand("decode", "decode a corpus with a checkpoint");
  std::string ckpt;
  std::optional<std::string> input;
  bool greedy = false, dump_attn = false;
  std::optional<double> temp;
  dec->add_option("--checkpoint", ckpt, "model checkpoint")->required();
  dec->add_option("--input", input, "corpus to decode (default paths.corpus)");
  dec->add_flag("--greedy", greedy, "greedy decoding");
  dec->add_option("--temp", temp, "sample at this temperature");
  dec->add_flag("--dump-attn", dump_attn, "write attention maps per routing event");

  auto* ver = app.add_subcommand("verify", "run the oracle, invariant and gradient suites");
  std::optional<std::string> fault;
  std::vector<std::string> only;
  ver->add_option("--inject-fault", fault, "deliberately break the model (lambda-nan)");
  ver->add_option("--suite", only, "run only the named suites");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfigError;
  }

  const Vocabulary vocab;
  return run_command(
      [&]() -> json {
        const Config cfg = resolve(ov, vocab);
        if (*gen) return cmd_gen(cfg, count.value_or(cfg.count), gen_out.value_or(cfg.corpus_path));
        if (*sft) return cmd_train_sft(cfg, vocab, corpus.value_or(cfg.corpus_path), cfg.out_path, resume).summary;
        if (*grpo) return cmd_train_grpo(cfg, vocab, sft_ckpt, cfg.out_path).summary;
        if (*dec) {
          if (greedy && temp) throw ConfigError("decode: --greedy and --temp are exclusive");
          DecodeOptions opts;
          if (greedy) opts.greedy = true;
          if (temp) {
            opts.greedy = false;
            opts.temperature = *temp;
          }
          opts.dump_attention = dump_attn;
          return cmd_decode(cfg, vocab, ckpt, input.value_or(cfg.corpus_path), cfg.out_path, opts);
        }
        VerifyOptions vo;
        vo.inject_fault = fault;
        vo.seed = ov.seed.value_or(1);
        return cmd_verify(vocab, std::cout, vo, only);
      },
      std::cout, std::cerr);
}
