#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "rover/cli/commands.hpp"

using namespace rover;
using namespace rover::cli;
namespace fs = std::filesystem;

namespace {

struct Workspace : ::testing::Test {
  Vocabulary vocab;
  fs::path dir;

  void SetUp() override {
    const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
    dir = fs::temp_directory_path() / (std::string("rover_cli_") + info->name());
    fs::remove_all(dir);
    fs::create_directories(dir);
  }
  void TearDown() override { fs::remove_all(dir); }

  // A small attribute-only setup that trains in well under a second.
  Config tiny() const {
    json j = {{"model", {{"d", 16}, {"max_len", 128}}},
              {"tasks", {{"families", {{{"family", "attribute"}}}}, {"count", 8}, {"held_out", 4}}},
              {"sft", {{"batch", 4}, {"epochs", 100}, {"max_steps", 3}, {"eval_every", 0}, {"eval_limit", 4}}},
              {"grpo", {{"iterations", 2}, {"prompts_per_iteration", 1}, {"eval_prompts", 2}}},
              {"decode", {{"max_len", 128}}},
              {"paths", {{"corpus", (dir / "corpus.jsonl").string()}, {"out", (dir / "out").string()}}}};
    return config_from_json(j, vocab);
  }

  int run(const std::function<json()>& body, std::string* err = nullptr) {
    std::ostringstream o, e;
    const int code = run_command(body, o, e);
    if (err) *err = e.str();
    return code;
  }
};

std::vector<json> read_lines(const fs::path& p) {
  std::ifstream in(p);
  std::vector<json> out;
  for (std::string line; std::getline(in, line);) out.push_back(json::parse(line));
  return out;
}

}  // namespace

TEST_F(Workspace, ConfigRoundTrip) {
  auto r = check_config_roundtrip(vocab);
  EXPECT_TRUE(r.pass) << r.detail;
  const Config c = tiny();
  EXPECT_EQ(to_json(config_from_json(to_json(c), vocab)), to_json(c));
}

TEST_F(Workspace, UnknownKeysAreNamedByPath) {
  try {
    config_from_json({{"tasks", {{"families", {{{"family", "counting"}, {"colour", 1}}}}}}}, vocab);
    FAIL() << "accepted an unknown key";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("tasks.families[].colour"), std::string::npos) << e.what();
  }
  EXPECT_THROW(config_from_json({{"optimizer", {}}}, vocab), ConfigError);
}

TEST_F(Workspace, InvalidValuesAreConfigErrors) {
  EXPECT_THROW(config_from_json({{"model", {{"heads", 3}}}}, vocab), ConfigError);
  EXPECT_THROW(config_from_json({{"router", {{"variant", "lsw"}}}}, vocab), ConfigError);
  EXPECT_THROW(config_from_json({{"decode", {{"max_len", 300}}}}, vocab), ConfigError);
  EXPECT_THROW(config_from_json({{"model", {{"d", "wide"}}}}, vocab), ConfigError);
  EXPECT_THROW(config_from_json({{"tasks", {{"families", json::array()}}}}, vocab), ConfigError);
}

TEST_F(Workspace, ConfigHashTracksStructureOnly) {
  Config a = tiny(), b = a;
  b.sft.lr *= 3.0;
  b.grpo.beta = 0.5;
  EXPECT_EQ(config_hash(a, vocab), config_hash(b, vocab));
  b.model.heads = 2;
  EXPECT_NE(config_hash(a, vocab), config_hash(b, vocab));
}

TEST_F(Workspace, CheckpointGate) {
  auto r = check_checkpoint_gate(vocab, 3);
  EXPECT_TRUE(r.pass) << r.detail;
}

TEST_F(Workspace, CheckpointRestoresEveryTensor) {
  Config c = tiny();
  backbone::RoverModel a(c.model);
  verify::perturb_router(a, 4);
  const std::string path = (dir / "a.ckpt").string();
  save_checkpoint(path, a, nullptr, c, vocab);
  c.model.seed += 1;  // different init, same structure
  backbone::RoverModel b(c.model);
  load_checkpoint(path, b, nullptr, c, vocab);
  const auto ta = a.all_tensors(), tb = b.all_tensors();
  ASSERT_EQ(ta.size(), tb.size());
  for (std::size_t i = 0; i < ta.size(); ++i)
    EXPECT_TRUE(verify::same_bits(ta[i]->value.data(), tb[i]->value.data())) << ta[i]->name;
}

TEST_F(Workspace, RegistryCoversEveryModule) {
  std::set<std::string> covered, names;
  for (const auto& s : suite_registry(vocab, {})) {
    covered.insert(s.module);
    EXPECT_TRUE(names.insert(s.name).second) << "duplicate suite " << s.name;
  }
  for (const auto& m : module_names()) EXPECT_TRUE(covered.count(m)) << m;
  EXPECT_EQ(covered.size(), module_names().size());
}

TEST_F(Workspace, ExitCodesFollowErrorKinds) {
  EXPECT_EQ(run([] { return json{{"ok", true}}; }), kOk);
  EXPECT_EQ(run([]() -> json { throw VerifyFailure("x"); }), kVerifyFailure);
  EXPECT_EQ(run([]() -> json { throw ConfigError("x"); }), kConfigError);
  EXPECT_EQ(run([]() -> json { throw std::ios_base::failure("x"); }), kIoError);
  EXPECT_EQ(run([]() -> json { throw training::TrainingAbort("x"); }), kTrainingAbort);
  EXPECT_EQ(run([]() -> json { throw CheckpointMismatch("x"); }), kCheckpointMismatch);
}

TEST_F(Workspace, MissingCorpusIsAnIoError) {
  const Config c = tiny();
  std::string err;
  EXPECT_EQ(run([&] { return cmd_train_sft(c, vocab, (dir / "absent.jsonl").string(), c.out_path).summary; }, &err),
            kIoError);
  EXPECT_NE(err.find("absent.jsonl"), std::string::npos);
}

TEST_F(Workspace, MalformedConfigFileIsAConfigError) {
  const auto p = dir / "bad.json";
  std::ofstream(p) << "{ \"model\": ";
  EXPECT_EQ(run([&] { return to_json(load_config(p.string(), vocab)); }), kConfigError);
}

TEST_F(Workspace, GenTrainDecodePipeline) {
  Config c = tiny();
  ASSERT_EQ(run([&] { return cmd_gen(c, c.count, c.corpus_path); }), kOk);
  ASSERT_EQ(run([&] { return cmd_train_sft(c, vocab, c.corpus_path, c.out_path).summary; }), kOk);
  const auto ckpt = sft_checkpoint(c.out_path);
  ASSERT_TRUE(fs::exists(ckpt));
  ASSERT_TRUE(fs::exists(manifest_path(ckpt)));
  EXPECT_EQ(read_lines(fs::path(c.out_path) / "metrics.jsonl").size(), 3u + 1u);  // one per step plus the final eval

  const auto dec_dir = (dir / "dec").string();
  DecodeOptions o;
  o.dump_attention = true;
  ASSERT_EQ(run([&] { return cmd_decode(c, vocab, ckpt, c.corpus_path, dec_dir, o); }), kOk);
  const auto traj = read_lines(fs::path(dec_dir) / "trajectories.jsonl");
  ASSERT_EQ(traj.size(), c.count);
  for (const auto& t : traj) {
    EXPECT_TRUE(t["budget_ok"].get<bool>() || t["truncated"].get<bool>());
    EXPECT_EQ(t["total_positions"].get<std::size_t>(),
              t["input_tokens"].get<std::size_t>() + t["generated_tokens"].get<std::size_t>() +
                  t["injected_tokens"].get<std::size_t>());
  }
  EXPECT_TRUE(fs::exists(fs::path(dec_dir) / "attention.jsonl"));

  c.out_path = (dir / "grpo").string();
  ASSERT_EQ(run([&] { return cmd_train_grpo(c, vocab, ckpt, c.out_path).summary; }), kOk);
  EXPECT_TRUE(fs::exists(grpo_checkpoint(c.out_path)));
}

TEST_F(Workspace, DecodeRefusesMismatchedCheckpoint) {
  Config c = tiny();
  backbone::RoverModel m(c.model);
  const std::string ckpt = (dir / "m.ckpt").string();
  save_checkpoint(ckpt, m, nullptr, c, vocab);
  ASSERT_EQ(run([&] { return cmd_gen(c, 2, c.corpus_path); }), kOk);
  c.model.variant = router::Variant::SW;
  std::string err;
  EXPECT_EQ(run([&] { return cmd_decode(c, vocab, ckpt, c.corpus_path, (dir / "d").string()); }, &err),
            kCheckpointMismatch);
  EXPECT_NE(err.find("config hash"), std::string::npos) << err;
}

TEST_F(Workspace, ResumeContinuesTheStepCount) {
  Config c = tiny();
  ASSERT_EQ(run([&] { return cmd_gen(c, c.count, c.corpus_path); }), kOk);
  ASSERT_EQ(run([&] { return cmd_train_sft(c, vocab, c.corpus_path, c.out_path).summary; }), kOk);
  const auto first = (dir / "first.ckpt").string();
  fs::copy_file(sft_checkpoint(c.out_path), first);
  fs::copy_file(manifest_path(sft_checkpoint(c.out_path)), manifest_path(first));
  c.sft.max_steps = 5;
  json summary;
  ASSERT_EQ(run([&] { return summary = cmd_train_sft(c, vocab, c.corpus_path, c.out_path, first).summary; }), kOk);
  EXPECT_EQ(summary["steps"].get<std::size_t>(), 5u);
}

TEST_F(Workspace, InjectedLambdaFaultIsNamed) {
  VerifyOptions o;
  o.inject_fault = "lambda-nan";
  std::ostringstream table;
  try {
    cmd_verify(vocab, table, o, {"gradients"});
    FAIL() << "fault went unnoticed";
  } catch (const VerifyFailure& e) {
    EXPECT_NE(std::string(e.what()).find("router.sift.lambda"), std::string::npos) << e.what();
  }
  o.inject_fault = "weights-inf";
  EXPECT_THROW(cmd_verify(vocab, table, o, {"gradients"}), ConfigError);
}

TEST_F(Workspace, VerifySubsetPrintsOneRowPerSuite) {
  std::ostringstream table;
  const auto summary = cmd_verify(vocab, table, {}, {"roi-partition", "reward-rules"});
  EXPECT_EQ(summary["suites"].size(), 2u);
  EXPECT_EQ(summary["failed"], 0);
  EXPECT_NE(table.str().find("roi-partition"), std::string::npos);
}
