// Command-line front end for the transfer experiments.
//
// Exit codes: 0 success, 1 validation or usage error, 2 budget exhaustion.

#include <cstdio>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include <CLI11.hpp>

#include "translora/harness.hpp"

namespace fs = std::filesystem;
using namespace translora;

namespace {

struct CommonOptions {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out = "runs";
  std::string task;
};

void add_common(CLI::App* cmd, CommonOptions& o) {
  cmd->add_option("--config", o.config_path, "JSON experiment config");
  cmd->add_option("--seed", o.seed, "run seed (overrides the config)");
  cmd->add_option("--out", o.out, "output directory")->capture_default_str();
  cmd->add_option("--task", o.task, "task name (overrides the config)");
}

ExperimentConfig resolve(const CommonOptions& o) {
  ExperimentConfig c = o.config_path.empty() ? ExperimentConfig{} : load_config(o.config_path);
  if (o.seed) c.seed = *o.seed;
  if (!o.task.empty()) c.task = o.task;
  c.validate();
  return c;
}

void log_progress(const std::string& role, std::size_t step, double loss) {
  if (step % 250 == 0) std::fprintf(stderr, "pretrain %s step %zu loss %.4f\n", role.c_str(), step, loss);
}

Bases load_bases(const ExperimentConfig& c, bool with_intermediate = false) {
  return pretrain_bases(c, with_intermediate, log_progress);
}

const Base& base_by_role(const Bases& b, const std::string& role) {
  if (role == "source") return b.source;
  if (role == "target") return b.target;
  if (role == "intermediate" && b.intermediate) return *b.intermediate;
  throw ConfigError("unknown model role '" + role + "'");
}

void write_json(const fs::path& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

std::string table_csv(const std::vector<RunReport>& rows) {
  std::ostringstream os;
  os.precision(17);
  os << "suite,source_kind,target_kind,arm,corpus_size,steps,Source Model LoRA Acc.,Target Model no LoRA Acc.,Ours\n";
  for (const auto& r : rows) {
    os << r.suite << ',' << r.source_kind << ',' << r.target_kind << ',' << r.arm << ',' << r.corpus_size << ','
       << r.distill_steps << ',' << r.source_lora_acc << ',' << r.target_base_acc << ',' << r.transferred_acc
       << '\n';
  }
  return os.str();
}

void print_row(const RunReport& r) {
  std::printf("%-18s %-5s -> %-5s %-12s source %.4f  target-base %.4f  transferred %.4f\n", r.suite.c_str(),
              r.source_kind.c_str(), r.target_kind.c_str(), r.arm.c_str(), r.source_lora_acc, r.target_base_acc,
              r.transferred_acc);
}

void write_suite(const fs::path& dir, const std::string& name, const std::vector<RunReport>& rows) {
  write_json(dir / (name + ".json"), reports_to_json(rows));
  write_text(dir / (name + ".csv"), table_csv(rows));
  for (const auto& r : rows) print_row(r);
}

int cmd_pretrain(const CommonOptions& o, bool intermediate) {
  const ExperimentConfig c = resolve(o);
  const Bases b = load_bases(c, intermediate);
  const fs::path out(o.out);
  save_checkpoint(out / "source.ckpt", model_to_tensors(b.source.cfg, b.source.params));
  save_checkpoint(out / "target.ckpt", model_to_tensors(b.target.cfg, b.target.params));
  if (b.intermediate) {
    save_checkpoint(out / "intermediate.ckpt", model_to_tensors(b.intermediate->cfg, b.intermediate->params));
  }
  write_json(out / "pretrain.json", json{{"task", c.task},
                                         {"source_zero_shot", b.source_zero_shot},
                                         {"target_zero_shot", b.target_zero_shot},
                                         {"config", to_json(c)}});
  std::printf("zero-shot on hard %s: source %.4f target %.4f\n", c.task.c_str(), b.source_zero_shot,
              b.target_zero_shot);
  return 0;
}

int cmd_finetune(const CommonOptions& o, const std::string& role, const std::string& kind_name) {
  const ExperimentConfig c = resolve(o);
  const Bases b = load_bases(c, role == "intermediate");
  const Base& base = base_by_role(b, role);
  const AdapterKind kind = adapter_kind_from_string(kind_name);
  RngState root{c.seed, 0};
  RngState data_rng = rng_fork(root, "dataset");
  const Dataset d = make_dataset(task_by_name(c.task), c.n_train, c.n_val, c.n_test, Difficulty::Hard, data_rng);
  RngState init = rng_fork(root, "teacher-init-" + to_string(kind));
  TrainHyper h = c.finetune;
  if (kind == AdapterKind::PromptTuning) h.lr = c.finetune_pt_lr;
  std::function<PairTokens(const Sample&)> enc = [](const Sample& s) { return encode_sample(s); };
  const FinetuneResult fr = finetune(base.cfg, base.params, init_adapter(c.adapter_spec(kind), base.cfg, base.params, init),
                                     d.train(), enc, h, rng_fork(root, "teacher-train-" + to_string(kind)));
  AdaptedModel m(base.cfg, base.params, &fr.adapter);
  ForwardContext plain(base.cfg, base.params);
  const double acc = eval_accuracy(m.context(), d.test());
  const double zero = eval_accuracy(plain, d.test());
  const fs::path out(o.out);
  save_checkpoint(out / (role + "_adapter.ckpt"), adapter_to_tensors(fr.adapter));
  write_json(out / "finetune.json", json{{"task", c.task},
                                         {"model", role},
                                         {"kind", to_string(kind)},
                                         {"zero_shot_acc", zero},
                                         {"finetuned_acc", acc},
                                         {"epoch_losses", fr.epoch_losses},
                                         {"config", to_json(c)}});
  std::printf("%s %s on %s: zero-shot %.4f fine-tuned %.4f\n", role.c_str(), to_string(kind).c_str(),
              c.task.c_str(), zero, acc);
  return 0;
}

int cmd_transfer(const CommonOptions& o) {
  const ExperimentConfig c = resolve(o);
  const Bases b = load_bases(c);
  const fs::path out(o.out);
  try {
    const TransferOutcome r = run_transfer(c, b);
    write_run(out, r);
    print_row(r.report);
  } catch (const RunBudgetExhausted& e) {
    write_text(out / "report.json", report_text(e.report()));
    throw;
  }
  return 0;
}

int cmd_ablate(const CommonOptions& o) {
  const ExperimentConfig c = resolve(o);
  const Bases b = load_bases(c);
  write_suite(o.out, "ablation", run_ablation_suite(c, b));
  return 0;
}

int cmd_cross_peft(const CommonOptions& o, const std::string& source_kind, const std::string& target_kind) {
  ExperimentConfig c = resolve(o);
  const Bases b = load_bases(c);
  if (source_kind.empty() != target_kind.empty()) {
    throw ConfigError("--source-kind and --target-kind go together");
  }
  if (source_kind.empty()) {
    write_suite(o.out, "cross_peft", run_cross_peft_matrix(c, b));
    return 0;
  }
  const AdapterKind s = adapter_kind_from_string(source_kind), t = adapter_kind_from_string(target_kind);
  TransferSession session(c, b, {s});
  write_suite(o.out, "cross_peft", {run_cross_peft(session, s, t)});
  return 0;
}

int cmd_continuous(const CommonOptions& o) {
  const ExperimentConfig c = resolve(o);
  const Bases b = load_bases(c, true);
  const auto [hop1, hop2] = run_continuous(c, b);
  write_suite(o.out, "continuous", {hop1, hop2});
  return 0;
}

int cmd_scale(const CommonOptions& o) {
  const ExperimentConfig c = resolve(o);
  const Bases b = load_bases(c);
  write_suite(o.out, "scaling", run_scaling(c, b));
  return 0;
}

// MMD of curated and raw candidates against the test prompts, plus a 2-D PCA
// of all three sets in the target model's embedding space.
int cmd_analyze(const CommonOptions& o) {
  const ExperimentConfig c = resolve(o);
  const Bases b = load_bases(c);
  TransferSession session(c, b, {});
  const std::size_t n = c.synth_target();
  const MmdSummary m = session.mmd(b.target, n);
  const CurationResult& cur = session.curation(b.target, n);
  std::vector<std::string> texts, labels;
  for (std::size_t i = 0; i < n && i < session.dataset().test().size(); ++i) {
    texts.push_back(session.dataset().test()[i].prompt);
    labels.push_back("original");
  }
  for (std::size_t i = 0; i < n; ++i) {
    texts.push_back(cur.curated[i].prompt_text);
    labels.push_back("filtered");
  }
  for (std::size_t i = 0; i < n; ++i) {
    texts.push_back(cur.unfiltered[i].prompt_text);
    labels.push_back("unfiltered");
  }
  ForwardContext ctx(b.target.cfg, b.target.params);
  const Pca2d pca = pca2d(embed_all(ctx, texts));
  const fs::path out(o.out);
  write_text(out / "pca.csv", pca_csv(pca, labels));
  write_json(out / "mmd.json", json{{"task", c.task},
                                    {"seed", c.seed},
                                    {"filtered", m.filtered},
                                    {"unfiltered", m.unfiltered},
                                    {"bandwidth_filtered", m.bandwidth_filtered},
                                    {"bandwidth_unfiltered", m.bandwidth_unfiltered},
                                    {"n", m.n},
                                    {"explained_variance", pca.explained_variance},
                                    {"curation", to_json(cur.stats)}});
  std::printf("MMD^2 filtered %.6f unfiltered %.6f (n=%zu)\n", m.filtered, m.unfiltered, m.n);
  return 0;
}

int cmd_eval(const CommonOptions& o, const std::string& role, const std::string& adapter_path) {
  const ExperimentConfig c = resolve(o);
  const Bases b = load_bases(c, role == "intermediate");
  const Base& base = base_by_role(b, role);
  RngState data_rng = rng_fork(RngState{c.seed, 0}, "dataset");
  const Dataset d = make_dataset(task_by_name(c.task), c.n_train, c.n_val, c.n_test, Difficulty::Hard, data_rng);
  std::optional<Adapter> ad;
  if (!adapter_path.empty()) {
    if (!fs::exists(adapter_path)) throw CheckpointError("adapter not found: " + adapter_path);
    ad = adapter_from_tensors(load_checkpoint(adapter_path));
  }
  AdaptedModel m(base.cfg, base.params, ad ? &*ad : nullptr);
  const double acc = eval_accuracy(m.context(), d.test());
  write_json(fs::path(o.out) / "eval.json",
             json{{"task", c.task}, {"model", role}, {"adapter", adapter_path}, {"test_acc", acc}});
  std::printf("%s%s on %s test: %.4f\n", role.c_str(), ad ? " + adapter" : "", c.task.c_str(), acc);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Adapter transfer experiments"};
  app.require_subcommand(1);
  CommonOptions o;
  bool intermediate = false;
  std::string role = "source", kind = "lora", source_kind, target_kind, adapter_path;

  auto* pretrain = app.add_subcommand("pretrain", "pretrain (or load cached) base models");
  add_common(pretrain, o);
  pretrain->add_flag("--intermediate", intermediate, "also pretrain the intermediate model");
  auto* finetune_cmd = app.add_subcommand("finetune", "fine-tune an adapter on the task's training split");
  add_common(finetune_cmd, o);
  finetune_cmd->add_option("--model", role, "source, intermediate or target")->capture_default_str();
  finetune_cmd->add_option("--kind", kind, "lora, dora or pt")->capture_default_str();
  auto* transfer = app.add_subcommand("transfer", "run the full transfer pipeline");
  add_common(transfer, o);
  auto* ablate = app.add_subcommand("ablate", "compare distillation corpora");
  add_common(ablate, o);
  auto* cross = app.add_subcommand("cross-peft", "transfer across adapter kinds");
  add_common(cross, o);
  cross->add_option("--source-kind", source_kind, "single pair instead of all nine");
  cross->add_option("--target-kind", target_kind, "single pair instead of all nine");
  auto* cont = app.add_subcommand("continuous", "source -> intermediate -> target");
  add_common(cont, o);
  auto* scale = app.add_subcommand("scale", "accuracy against synthetic corpus size");
  add_common(scale, o);
  auto* analyze = app.add_subcommand("analyze", "MMD and PCA of curated vs raw candidates");
  add_common(analyze, o);
  auto* eval = app.add_subcommand("eval", "evaluate a base model, optionally with an adapter");
  add_common(eval, o);
  eval->add_option("--model", role, "source, intermediate or target")->capture_default_str();
  eval->add_option("--adapter", adapter_path, "adapter checkpoint");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  try {
    if (*pretrain) return cmd_pretrain(o, intermediate);
    if (*finetune_cmd) return cmd_finetune(o, role, kind);
    if (*transfer) return cmd_transfer(o);
    if (*ablate) return cmd_ablate(o);
    if (*cross) return cmd_cross_peft(o, source_kind, target_kind);
    if (*cont) return cmd_continuous(o);
    if (*scale) return cmd_scale(o);
    if (*analyze) return cmd_analyze(o);
    if (*eval) return cmd_eval(o, role, adapter_path);
  } catch (const BudgetExhausted& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const GenerationBudgetExhausted& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 1;
}
