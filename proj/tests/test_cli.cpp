#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <sys/wait.h>
#include <unistd.h>

#include "translora/harness.hpp"

using namespace translora;
namespace fs = std::filesystem;

namespace {

ModelPreset tiny_preset(std::size_t d) {
  ModelPreset p;
  p.model.d_model = d;
  p.model.d_ff = 2 * d;
  p.model.n_layers = 1;
  p.model.max_len = 384;
  p.pretrain_steps = 20;
  return p;
}

const fs::path& work_dir() {
  static const fs::path p = [] {
    fs::path d = fs::temp_directory_path() / ("translora-test-cli-" + std::to_string(::getpid()));
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
  }();
  return p;
}

fs::path write_config(const std::string& name, const std::function<void(ExperimentConfig&)>& edit = {}) {
  ExperimentConfig c;
  c.n_train = 16;
  c.n_val = 4;
  c.n_test = 24;
  c.source = tiny_preset(8);
  c.intermediate = tiny_preset(12);
  c.target = tiny_preset(16);
  c.gap_check_size = 10;
  c.finetune.epochs = 2;
  c.discriminator.train.epochs = 2;
  c.distillation.epochs = 2;
  c.generator_max_new = 48;
  c.cache_dir = (work_dir() / "cache").string();
  if (edit) edit(c);
  const fs::path p = work_dir() / name;
  write_text(p, to_json(c).dump(2));
  return p;
}

int run(const std::string& args) {
  const std::string cmd = std::string(TRANSLORA_CLI) + " " + args + " > " + (work_dir() / "log.txt").string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST(Cli, UsageErrorsExitOne) {
  EXPECT_EQ(run(""), 1);
  EXPECT_EQ(run("frobnicate"), 1);
  EXPECT_EQ(run("transfer --bogus"), 1);
  EXPECT_EQ(run("transfer --config " + (work_dir() / "missing.json").string()), 1);
  EXPECT_EQ(run("transfer --seed notanumber"), 1);
  EXPECT_EQ(run("--help"), 0);
}

TEST(Cli, InvalidConfigExitsOne) {
  const fs::path bad = work_dir() / "bad.json";
  write_text(bad, R"({"task": "bool-expr", "unknown_key": 1})");
  EXPECT_EQ(run("transfer --config " + bad.string()), 1);
  write_text(bad, "{not json");
  EXPECT_EQ(run("transfer --config " + bad.string()), 1);
  EXPECT_EQ(run("transfer --config " + write_config("c.json").string() + " --task no-such-task"), 1);
}

TEST(Cli, TransferWritesRunDirectory) {
  const fs::path cfg = write_config("c.json");
  const fs::path out = work_dir() / "runs";
  ASSERT_EQ(run("transfer --config " + cfg.string() + " --seed 7 --out " + out.string()), 0) << slurp(work_dir() / "log.txt");
  for (const char* f : {"report.json", "curated.jsonl", "source_adapter.ckpt", "target_adapter.ckpt"}) {
    EXPECT_TRUE(fs::exists(out / f)) << f;
  }
  const RunReport r = report_from_json(json::parse(slurp(out / "report.json")));
  EXPECT_EQ(r.seed, 7u);
  EXPECT_EQ(r.task, "bool-expr");
  EXPECT_TRUE(r.completed);
  const auto a = load_checkpoint(out / "target_adapter.ckpt");
  EXPECT_EQ(adapter_digest(adapter_from_tensors(a)), r.adapter_digest);

  // Same seed into a second directory: same report minus wall time, same bytes.
  const fs::path again = work_dir() / "runs-again";
  ASSERT_EQ(run("transfer --config " + cfg.string() + " --seed 7 --out " + again.string()), 0);
  EXPECT_EQ(report_fingerprint(report_from_json(json::parse(slurp(again / "report.json")))), report_fingerprint(r));
  EXPECT_EQ(slurp(again / "target_adapter.ckpt"), slurp(out / "target_adapter.ckpt"));
}

TEST(Cli, EvalOfWrittenAdapterMatchesReport) {
  const fs::path cfg = write_config("c.json");
  const fs::path out = work_dir() / "runs-eval";
  ASSERT_EQ(run("transfer --config " + cfg.string() + " --seed 5 --out " + out.string()), 0);
  ASSERT_EQ(run("eval --config " + cfg.string() + " --seed 5 --model target --adapter " +
                (out / "target_adapter.ckpt").string() + " --out " + out.string()),
            0);
  const json e = json::parse(slurp(out / "eval.json"));
  const RunReport r = report_from_json(json::parse(slurp(out / "report.json")));
  EXPECT_DOUBLE_EQ(e.at("test_acc").get<double>(), r.transferred_acc);
  EXPECT_EQ(run("eval --config " + cfg.string() + " --adapter " + (out / "nope.ckpt").string()), 1);
}

TEST(Cli, BudgetExhaustionExitsTwo) {
  // One-character candidates never survive parsing, so synthesis runs dry.
  const fs::path cfg = write_config("dry.json", [](ExperimentConfig& c) { c.curation.max_chars = 1; });
  EXPECT_EQ(run("transfer --config " + cfg.string() + " --out " + (work_dir() / "dry").string()), 2)
      << slurp(work_dir() / "log.txt");
}

TEST(Cli, EverySubcommandRunsAndWritesItsOutput) {
  const fs::path cfg = write_config("c.json");
  const std::vector<std::pair<std::string, std::vector<std::string>>> cases = {
      {"pretrain --intermediate", {"source.ckpt", "target.ckpt", "intermediate.ckpt", "pretrain.json"}},
      {"finetune --model source --kind dora", {"source_adapter.ckpt", "finetune.json"}},
      {"ablate", {"ablation.json", "ablation.csv"}},
      {"cross-peft --source-kind lora --target-kind pt", {"cross_peft.json", "cross_peft.csv"}},
      {"continuous", {"continuous.json", "continuous.csv"}},
      {"scale", {"scaling.json", "scaling.csv"}},
      {"analyze", {"mmd.json", "pca.csv"}},
  };
  for (const auto& [args, files] : cases) {
    const fs::path out = work_dir() / ("sub-" + args.substr(0, args.find(' ')));
    ASSERT_EQ(run(args + " --config " + cfg.string() + " --out " + out.string()), 0)
        << args << "\n" << slurp(work_dir() / "log.txt");
    for (const auto& f : files) EXPECT_TRUE(fs::exists(out / f)) << args << ": " << f;
  }
  const json ablation = json::parse(slurp(work_dir() / "sub-ablate" / "ablation.json"));
  EXPECT_EQ(ablation.size(), 4u);
  EXPECT_EQ(run("cross-peft --source-kind lora --config " + cfg.string()), 1);
}
