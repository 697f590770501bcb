#pragma once

// Single-file experiment configuration (JSON), its validation and hash, and
// model checkpoints with a manifest.

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "rover/backbone/decoder.hpp"
#include "rover/numerics/checkpoint.hpp"
#include "rover/tasks/tasks.hpp"
#include "rover/training/training.hpp"

namespace rover::cli {

using nlohmann::json;

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class CheckpointMismatch : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct DecodeConfig {
  std::size_t max_len = 256;
  bool greedy = true;
  double temperature = 1.0;
  std::uint64_t seed = 1;
};

struct Config {
  backbone::ModelConfig model;
  std::vector<tasks::FamilyConfig> families{tasks::FamilyConfig::defaults(tasks::Family::Comparison)};
  std::size_t count = 1000;
  std::size_t held_out = 200;
  std::uint64_t task_seed = 1;
  std::uint64_t feature_seed = 11;
  training::SftConfig sft;
  training::RLConfig grpo;
  DecodeConfig decode;
  std::string corpus_path = "corpus.jsonl";
  std::string out_path = "out";
};

namespace detail {

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

inline std::string shape_text(const std::vector<std::size_t>& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "," : "") + std::to_string(s[i]);
  return out + "]";
}

inline void only_keys(const json& j, const std::string& where, std::initializer_list<const char*> allowed) {
  if (!j.is_object()) throw ConfigError("config: '" + where + "' must be an object");
  std::set<std::string> ok(allowed.begin(), allowed.end());
  for (const auto& [k, v] : j.items())
    if (!ok.count(k)) throw ConfigError("config: unknown key '" + (where.empty() ? k : where + "." + k) + "'");
}

template <typename T>
void take(const json& j, const char* key, T& dst, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    dst = j.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError("config: '" + where + "." + key + "' has the wrong type");
  }
}

inline json spec_json(const scene::ImageSpec& s) {
  return {{"width", s.width}, {"height", s.height}, {"patch", s.patch}};
}

}  // namespace detail

inline json to_json(const Config& c) {
  json fams = json::array();
  for (const auto& f : c.families)
    fams.push_back({{"family", tasks::to_string(f.family)},
                    {"images", f.images},
                    {"distractors", f.distractors},
                    {"image", detail::spec_json(f.spec)}});
  return {
      {"model",
       {{"d", c.model.d}, {"layers", c.model.layers}, {"heads", c.model.heads}, {"max_len", c.model.max_len},
        {"seed", c.model.seed}}},
      {"router", {{"variant", router::to_string(c.model.variant)}}},
      {"tasks",
       {{"families", fams}, {"count", c.count}, {"held_out", c.held_out}, {"seed", c.task_seed},
        {"feature_seed", c.feature_seed}}},
      {"sft",
       {{"epochs", c.sft.epochs}, {"max_steps", c.sft.max_steps}, {"batch", c.sft.batch}, {"lr", c.sft.lr},
        {"warmup_ratio", c.sft.warmup_ratio}, {"weight_decay", c.sft.weight_decay}, {"eval_every", c.sft.eval_every},
        {"eval_limit", c.sft.eval_limit}, {"seed", c.sft.seed}}},
      {"grpo",
       {{"group_size", c.grpo.group_size}, {"beta", c.grpo.beta}, {"eps", c.grpo.eps}, {"lr", c.grpo.lr},
        {"weight_decay", c.grpo.weight_decay}, {"temperature", c.grpo.temperature},
        {"iterations", c.grpo.iterations}, {"prompts_per_iteration", c.grpo.prompts_per_iteration},
        {"eval_prompts", c.grpo.eval_prompts}, {"collapse_patience", c.grpo.collapse_patience},
        {"seed", c.grpo.seed}}},
      {"decode",
       {{"max_len", c.decode.max_len}, {"greedy", c.decode.greedy}, {"temperature", c.decode.temperature},
        {"seed", c.decode.seed}}},
      {"paths", {{"corpus", c.corpus_path}, {"out", c.out_path}}}};
}

// Parses and validates; every key is optional, unknown keys are errors.
inline Config config_from_json(const json& j, const Vocabulary& vocab) {
  using detail::only_keys;
  using detail::take;
  Config c;
  only_keys(j, "", {"model", "router", "tasks", "sft", "grpo", "decode", "paths"});
  if (j.contains("model")) {
    const auto& m = j["model"];
    only_keys(m, "model", {"d", "layers", "heads", "max_len", "seed"});
    take(m, "d", c.model.d, "model");
    take(m, "layers", c.model.layers, "model");
    take(m, "heads", c.model.heads, "model");
    take(m, "max_len", c.model.max_len, "model");
    take(m, "seed", c.model.seed, "model");
  }
  if (j.contains("router")) {
    const auto& r = j["router"];
    only_keys(r, "router", {"variant"});
    std::string v = router::to_string(c.model.variant);
    take(r, "variant", v, "router");
    try {
      c.model.variant = router::parse_variant(v);
    } catch (const std::exception& e) {
      throw ConfigError(std::string("config: router.variant: ") + e.what());
    }
  }
  if (j.contains("tasks")) {
    const auto& t = j["tasks"];
    only_keys(t, "tasks", {"families", "count", "held_out", "seed", "feature_seed"});
    take(t, "count", c.count, "tasks");
    take(t, "held_out", c.held_out, "tasks");
    take(t, "seed", c.task_seed, "tasks");
    take(t, "feature_seed", c.feature_seed, "tasks");
    if (t.contains("families")) {
      if (!t["families"].is_array()) throw ConfigError("config: 'tasks.families' must be an array");
      c.families.clear();
      for (const auto& f : t["families"]) {
        only_keys(f, "tasks.families[]", {"family", "images", "distractors", "image"});
        if (!f.contains("family")) throw ConfigError("config: tasks.families[] needs 'family'");
        tasks::FamilyConfig fc;
        try {
          fc = tasks::FamilyConfig::defaults(tasks::parse_family(f["family"].get<std::string>()));
        } catch (const std::exception& e) {
          throw ConfigError(std::string("config: ") + e.what());
        }
        take(f, "images", fc.images, "tasks.families[]");
        take(f, "distractors", fc.distractors, "tasks.families[]");
        if (f.contains("image")) {
          only_keys(f["image"], "tasks.families[].image", {"width", "height", "patch"});
          take(f["image"], "width", fc.spec.width, "tasks.families[].image");
          take(f["image"], "height", fc.spec.height, "tasks.families[].image");
          take(f["image"], "patch", fc.spec.patch, "tasks.families[].image");
        }
        c.families.push_back(fc);
      }
    }
  }
  if (j.contains("sft")) {
    const auto& s = j["sft"];
    only_keys(s, "sft",
              {"epochs", "max_steps", "batch", "lr", "warmup_ratio", "weight_decay", "eval_every", "eval_limit", "seed"});
    take(s, "epochs", c.sft.epochs, "sft");
    take(s, "max_steps", c.sft.max_steps, "sft");
    take(s, "batch", c.sft.batch, "sft");
    take(s, "lr", c.sft.lr, "sft");
    take(s, "warmup_ratio", c.sft.warmup_ratio, "sft");
    take(s, "weight_decay", c.sft.weight_decay, "sft");
    take(s, "eval_every", c.sft.eval_every, "sft");
    take(s, "eval_limit", c.sft.eval_limit, "sft");
    take(s, "seed", c.sft.seed, "sft");
  }
  if (j.contains("grpo")) {
    const auto& g = j["grpo"];
    only_keys(g, "grpo",
              {"group_size", "beta", "eps", "lr", "weight_decay", "temperature", "iterations", "prompts_per_iteration",
               "eval_prompts", "collapse_patience", "seed"});
    take(g, "group_size", c.grpo.group_size, "grpo");
    take(g, "beta", c.grpo.beta, "grpo");
    take(g, "eps", c.grpo.eps, "grpo");
    take(g, "lr", c.grpo.lr, "grpo");
    take(g, "weight_decay", c.grpo.weight_decay, "grpo");
    take(g, "temperature", c.grpo.temperature, "grpo");
    take(g, "iterations", c.grpo.iterations, "grpo");
    take(g, "prompts_per_iteration", c.grpo.prompts_per_iteration, "grpo");
    take(g, "eval_prompts", c.grpo.eval_prompts, "grpo");
    take(g, "collapse_patience", c.grpo.collapse_patience, "grpo");
    take(g, "seed", c.grpo.seed, "grpo");
  }
  if (j.contains("decode")) {
    const auto& d = j["decode"];
    only_keys(d, "decode", {"max_len", "greedy", "temperature", "seed"});
    take(d, "max_len", c.decode.max_len, "decode");
    take(d, "greedy", c.decode.greedy, "decode");
    take(d, "temperature", c.decode.temperature, "decode");
    take(d, "seed", c.decode.seed, "decode");
  }
  if (j.contains("paths")) {
    const auto& p = j["paths"];
    only_keys(p, "paths", {"corpus", "out"});
    take(p, "corpus", c.corpus_path, "paths");
    take(p, "out", c.out_path, "paths");
  }
  c.model.vocab_size = vocab.size();
  c.sft.max_len = c.grpo.max_len = c.decode.max_len;
  try {
    c.model.validate();
    c.sft.validate();
    c.grpo.validate();
    for (const auto& f : c.families) f.validate();
  } catch (const std::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  if (c.families.empty()) throw ConfigError("config: tasks.families must not be empty");
  if (c.decode.max_len > c.model.max_len) throw ConfigError("config: decode.max_len exceeds model.max_len");
  if (!(c.decode.temperature > 0.0)) throw ConfigError("config: decode.temperature must be positive");
  return c;
}

inline Config load_config(const std::string& path, const Vocabulary& vocab) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot read '" + path + "'");
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError("config: '" + path + "' is not valid JSON (" + e.what() + ")");
  }
  return config_from_json(j, vocab);
}

// Fields that determine tensor shapes and how the model consumes its inputs.
inline json structure(const Config& c, const Vocabulary& vocab) {
  return {{"d", c.model.d},
          {"layers", c.model.layers},
          {"heads", c.model.heads},
          {"max_len", c.model.max_len},
          {"vocab_size", c.model.vocab_size},
          {"variant", router::to_string(c.model.variant)},
          {"feature_seed", c.feature_seed},
          {"vocab_hash", detail::hex64(vocab.hash())}};
}

inline std::string config_hash(const Config& c, const Vocabulary& vocab) {
  return detail::hex64(fnv1a64(structure(c, vocab).dump()));
}

// ---- checkpoints ----------------------------------------------------------------

inline std::string manifest_path(const std::string& ckpt) { return ckpt + ".json"; }

inline void save_checkpoint(const std::string& path, backbone::RoverModel& model, const training::AdamW* optimizer,
                            const Config& cfg, const Vocabulary& vocab, json extra = json::object()) {
  std::vector<NamedTensor> tensors;
  for (const Parameter* p : model.all_tensors()) tensors.push_back({p->name, p->value});
  if (optimizer)
    for (auto& t : optimizer->state()) tensors.push_back(std::move(t));
  save_tensors(path, tensors);
  json manifest = {{"format", "rover-checkpoint"},
                   {"version", 1},
                   {"config_hash", config_hash(cfg, vocab)},
                   {"vocab_hash", detail::hex64(vocab.hash())},
                   {"structure", structure(cfg, vocab)},
                   {"config", to_json(cfg)}};
  for (auto& [k, v] : extra.items()) manifest[k] = v;
  std::ofstream out(manifest_path(path));
  if (!out) throw std::ios_base::failure("cannot write '" + manifest_path(path) + "'");
  out << manifest.dump(2) << '\n';
}

// Loads tensors into `model` (built from `cfg`) after checking the manifest.
inline json load_checkpoint(const std::string& path, backbone::RoverModel& model, training::AdamW* optimizer,
                            const Config& cfg, const Vocabulary& vocab) {
  std::ifstream min(manifest_path(path));
  if (!min) throw std::ios_base::failure("cannot read checkpoint manifest '" + manifest_path(path) + "'");
  json manifest;
  try {
    manifest = json::parse(min);
  } catch (const json::exception& e) {
    throw CheckpointMismatch("checkpoint manifest is not valid JSON: " + std::string(e.what()));
  }
  const std::string want = config_hash(cfg, vocab);
  if (manifest.value("config_hash", "") != want)
    throw CheckpointMismatch("checkpoint config hash " + manifest.value("config_hash", std::string("?")) +
                             " does not match the current config (" + want + ")");
  if (manifest.value("vocab_hash", "") != detail::hex64(vocab.hash()))
    throw CheckpointMismatch("checkpoint vocabulary hash mismatch");
  std::vector<NamedTensor> tensors;
  try {
    tensors = load_tensors(path);
  } catch (const CheckpointError& e) {
    throw std::ios_base::failure(e.what());
  }
  std::map<std::string, const Tensor*> by_name;
  for (const auto& t : tensors) by_name[t.name] = &t.tensor;
  for (Parameter* p : model.all_tensors()) {
    auto it = by_name.find(p->name);
    if (it == by_name.end()) throw CheckpointMismatch("checkpoint lacks tensor '" + p->name + "'");
    if (it->second->shape() != p->value.shape())
      throw CheckpointMismatch("checkpoint tensor '" + p->name + "' has shape " + detail::shape_text(it->second->shape()) +
                               ", expected " + detail::shape_text(p->value.shape()));
    p->value = *it->second;
  }
  if (optimizer) optimizer->load_state(tensors);
  return manifest;
}

}  // namespace rover::cli
