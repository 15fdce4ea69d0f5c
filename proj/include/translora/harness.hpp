#pragma once

// Experiment orchestration: configuration, cached base pretraining, the
// transfer pipeline and its suites, and run reports.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "translora/analysis.hpp"
#include "translora/checkpoint.hpp"
#include "translora/distill.hpp"
#include "translora/pretrain.hpp"
#include "translora/synthesis.hpp"
#include "translora/tasks.hpp"

namespace translora {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Configuration

struct ModelPreset {
  ModelConfig model;
  std::size_t pretrain_steps = 1000;
};

inline ModelPreset make_preset(std::size_t d_model, std::size_t n_layers, std::size_t steps) {
  ModelPreset p;
  p.model.d_model = d_model;
  p.model.d_ff = 4 * d_model;
  p.model.n_layers = n_layers;
  p.model.max_len = 384;
  p.pretrain_steps = steps;
  return p;
}

struct ExperimentConfig {
  std::string task = "bool-expr";
  std::uint64_t seed = 0;
  std::size_t seed_count = 5;
  std::size_t n_train = 250;
  std::size_t n_val = 50;
  std::size_t n_test = 1000;
  std::size_t synth_multiplier = 1;
  AdapterKind source_kind = AdapterKind::LoRA;
  AdapterKind target_kind = AdapterKind::LoRA;
  CorpusKind arm = CorpusKind::Curated;
  std::vector<std::size_t> scaling_multipliers{1, 2, 4};

  std::size_t lora_rank = 4;
  double lora_alpha = 8.0;
  std::string pt_init_text = kPromptTuningInitText;

  ModelPreset source = make_preset(32, 2, 600);
  ModelPreset intermediate = make_preset(48, 3, 1200);
  ModelPreset target = make_preset(64, 4, 4000);
  std::uint64_t pretrain_seed = 1;
  PretrainHyper pretrain{};
  std::size_t gap_check_size = 200;

  TrainHyper finetune{1e-2, 20, 8, 0, {}};
  double finetune_pt_lr = 3e-2;
  DiscriminatorHyper discriminator{};
  double generator_temperature = 0.8;
  std::size_t generator_max_new = 96;
  CurateConfig curation{};
  DistillConfig distillation{};
  double distill_pt_lr = 3e-2;
  std::size_t random_text_max_chars = 44;

  std::string cache_dir = ".tlra-cache";

  std::size_t synth_target() const { return synth_multiplier * n_train; }

  AdapterSpec adapter_spec(AdapterKind kind) const {
    AdapterSpec s;
    s.kind = kind;
    s.rank = lora_rank;
    s.alpha = lora_alpha;
    s.init_text = pt_init_text;
    return s;
  }

  void validate() const {
    (void)task_by_name(task);
    auto positive = [](std::size_t v, const char* what) {
      if (v < 1) throw ConfigError(std::string(what) + " must be >= 1");
    };
    positive(seed_count, "seed_count");
    positive(n_train, "n_train");
    positive(n_val, "n_val");
    positive(n_test, "n_test");
    positive(synth_multiplier, "synth_multiplier");
    positive(finetune.epochs, "finetune.epochs");
    positive(finetune.batch_size, "finetune.batch_size");
    positive(distillation.epochs, "distill.epochs");
    positive(distillation.batch_size, "distill.batch_size");
    positive(curation.batch_size, "synthesis.batch_size");
    positive(gap_check_size, "gap_check_size");
    if (seed_count > n_train) throw ConfigError("seed_count exceeds n_train");
    if (!(distillation.temperature > 0.0)) throw InvalidTemperature("distill.temperature must be > 0");
    if (!(generator_temperature >= 0.0)) throw InvalidTemperature("synthesis.temperature must be >= 0");
    if (!(discriminator.holdout_fraction >= 0.0 && discriminator.holdout_fraction < 1.0)) {
      throw ConfigError("discriminator.holdout_fraction must be in [0, 1)");
    }
    if (scaling_multipliers.empty()) throw ConfigError("scaling_multipliers is empty");
    for (std::size_t i = 0; i < scaling_multipliers.size(); ++i) {
      positive(scaling_multipliers[i], "scaling multiplier");
      if (i > 0 && scaling_multipliers[i] <= scaling_multipliers[i - 1]) {
        throw ConfigError("scaling_multipliers must be strictly ascending");
      }
    }
    for (const auto* p : {&source, &intermediate, &target}) {
      p->model.validate();
      positive(p->pretrain_steps, "pretrain_steps");
    }
  }
};

namespace detail {

// Reads keys with defaults and rejects keys nobody asked for.
class JsonReader {
 public:
  JsonReader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(path_ + " must be a JSON object");
  }

  template <typename T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const json::exception& e) {
      throw ConfigError(path_ + "." + key + ": " + e.what());
    }
  }

  const json* child(const char* key) {
    seen_.insert(key);
    return j_.contains(key) ? &j_.at(key) : nullptr;
  }

  void finish() const {
    for (const auto& [k, v] : j_.items()) {
      if (!seen_.count(k)) throw ConfigError("unknown config key '" + path_ + "." + k + "'");
    }
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

inline json preset_to_json(const ModelPreset& p) {
  return json{{"d_model", p.model.d_model},
              {"d_ff", p.model.d_ff},
              {"n_layers", p.model.n_layers},
              {"max_len", p.model.max_len},
              {"pretrain_steps", p.pretrain_steps}};
}

inline void preset_from_json(const json& j, const std::string& path, ModelPreset& p) {
  JsonReader r(j, path);
  r.get("d_model", p.model.d_model);
  r.get("d_ff", p.model.d_ff);
  r.get("n_layers", p.model.n_layers);
  r.get("max_len", p.model.max_len);
  r.get("pretrain_steps", p.pretrain_steps);
  r.finish();
}

}  // namespace detail

inline json to_json(const ExperimentConfig& c) {
  return json{
      {"task", c.task},
      {"seed", c.seed},
      {"seed_count", c.seed_count},
      {"n_train", c.n_train},
      {"n_val", c.n_val},
      {"n_test", c.n_test},
      {"synth_multiplier", c.synth_multiplier},
      {"source_kind", to_string(c.source_kind)},
      {"target_kind", to_string(c.target_kind)},
      {"arm", to_string(c.arm)},
      {"scaling_multipliers", c.scaling_multipliers},
      {"adapter", {{"rank", c.lora_rank}, {"alpha", c.lora_alpha}, {"pt_init_text", c.pt_init_text}}},
      {"models",
       {{"source", detail::preset_to_json(c.source)},
        {"intermediate", detail::preset_to_json(c.intermediate)},
        {"target", detail::preset_to_json(c.target)}}},
      {"pretrain",
       {{"seed", c.pretrain_seed},
        {"lr", c.pretrain.lr},
        {"batch_size", c.pretrain.batch_size},
        {"min_lr_fraction", c.pretrain.min_lr_fraction},
        {"gap_check_size", c.gap_check_size}}},
      {"finetune",
       {{"lr", c.finetune.lr},
        {"pt_lr", c.finetune_pt_lr},
        {"epochs", c.finetune.epochs},
        {"batch_size", c.finetune.batch_size}}},
      {"discriminator",
       {{"lr", c.discriminator.train.lr},
        {"epochs", c.discriminator.train.epochs},
        {"batch_size", c.discriminator.train.batch_size},
        {"holdout_fraction", c.discriminator.holdout_fraction}}},
      {"synthesis",
       {{"temperature", c.generator_temperature},
        {"max_new_tokens", c.generator_max_new},
        {"batch_size", c.curation.batch_size},
        {"max_attempts", c.curation.max_attempts},
        {"n_header", c.curation.n_header},
        {"max_chars", c.curation.max_chars}}},
      {"distill",
       {{"temperature", c.distillation.temperature},
        {"lr", c.distillation.lr},
        {"pt_lr", c.distill_pt_lr},
        {"epochs", c.distillation.epochs},
        {"batch_size", c.distillation.batch_size},
        {"total_steps", c.distillation.total_steps}}},
      {"random_text_max_chars", c.random_text_max_chars},
      {"cache_dir", c.cache_dir},
  };
}

inline ExperimentConfig config_from_json(const json& j) {
  ExperimentConfig c;
  detail::JsonReader r(j, "config");
  r.get("task", c.task);
  r.get("seed", c.seed);
  r.get("seed_count", c.seed_count);
  r.get("n_train", c.n_train);
  r.get("n_val", c.n_val);
  r.get("n_test", c.n_test);
  r.get("synth_multiplier", c.synth_multiplier);
  std::string s = to_string(c.source_kind), t = to_string(c.target_kind), arm = to_string(c.arm);
  r.get("source_kind", s);
  r.get("target_kind", t);
  r.get("arm", arm);
  c.source_kind = adapter_kind_from_string(s);
  c.target_kind = adapter_kind_from_string(t);
  c.arm = corpus_kind_from_string(arm);
  r.get("scaling_multipliers", c.scaling_multipliers);
  if (const json* a = r.child("adapter")) {
    detail::JsonReader ra(*a, "config.adapter");
    ra.get("rank", c.lora_rank);
    ra.get("alpha", c.lora_alpha);
    ra.get("pt_init_text", c.pt_init_text);
    ra.finish();
  }
  if (const json* m = r.child("models")) {
    detail::JsonReader rm(*m, "config.models");
    if (const json* p = rm.child("source")) detail::preset_from_json(*p, "config.models.source", c.source);
    if (const json* p = rm.child("intermediate")) {
      detail::preset_from_json(*p, "config.models.intermediate", c.intermediate);
    }
    if (const json* p = rm.child("target")) detail::preset_from_json(*p, "config.models.target", c.target);
    rm.finish();
  }
  if (const json* p = r.child("pretrain")) {
    detail::JsonReader rp(*p, "config.pretrain");
    rp.get("seed", c.pretrain_seed);
    rp.get("lr", c.pretrain.lr);
    rp.get("batch_size", c.pretrain.batch_size);
    rp.get("min_lr_fraction", c.pretrain.min_lr_fraction);
    rp.get("gap_check_size", c.gap_check_size);
    rp.finish();
  }
  if (const json* p = r.child("finetune")) {
    detail::JsonReader rf(*p, "config.finetune");
    rf.get("lr", c.finetune.lr);
    rf.get("pt_lr", c.finetune_pt_lr);
    rf.get("epochs", c.finetune.epochs);
    rf.get("batch_size", c.finetune.batch_size);
    rf.finish();
  }
  if (const json* p = r.child("discriminator")) {
    detail::JsonReader rd(*p, "config.discriminator");
    rd.get("lr", c.discriminator.train.lr);
    rd.get("epochs", c.discriminator.train.epochs);
    rd.get("batch_size", c.discriminator.train.batch_size);
    rd.get("holdout_fraction", c.discriminator.holdout_fraction);
    rd.finish();
  }
  if (const json* p = r.child("synthesis")) {
    detail::JsonReader rs(*p, "config.synthesis");
    rs.get("temperature", c.generator_temperature);
    rs.get("max_new_tokens", c.generator_max_new);
    rs.get("batch_size", c.curation.batch_size);
    rs.get("max_attempts", c.curation.max_attempts);
    rs.get("n_header", c.curation.n_header);
    rs.get("max_chars", c.curation.max_chars);
    rs.finish();
  }
  if (const json* p = r.child("distill")) {
    detail::JsonReader rd(*p, "config.distill");
    rd.get("temperature", c.distillation.temperature);
    rd.get("lr", c.distillation.lr);
    rd.get("pt_lr", c.distill_pt_lr);
    rd.get("epochs", c.distillation.epochs);
    rd.get("batch_size", c.distillation.batch_size);
    rd.get("total_steps", c.distillation.total_steps);
    rd.finish();
  }
  r.get("random_text_max_chars", c.random_text_max_chars);
  r.get("cache_dir", c.cache_dir);
  r.finish();
  c.validate();
  return c;
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw ConfigError("config file not found: " + path.string());
  try {
    return config_from_json(json::parse(read_file(path)));
  } catch (const json::parse_error& e) {
    throw ConfigError("invalid JSON in " + path.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Base models

struct Base {
  std::string role;
  ModelConfig cfg;
  ModelParams params;
};

struct Bases {
  Base source, target;
  std::optional<Base> intermediate;
  double source_zero_shot = 0.0;  // hard split of the configured task
  double target_zero_shot = 0.0;
};

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

inline std::string bytes_digest(const std::string& bytes) { return hex64(fnv1a64(bytes)); }

// Pretrains one base as a language model on the easy-difficulty corpus.
// Results are cached under cache_dir keyed by everything that affects them.
inline Base pretrain_base(const std::string& role, const ModelPreset& preset, const ExperimentConfig& config,
                          const std::function<void(std::size_t, double)>& progress = {}) {
  preset.model.validate();
  PretrainHyper hyper = config.pretrain;
  hyper.steps = preset.pretrain_steps;
  const json key{{"model", detail::preset_to_json(preset)},
                 {"seed", config.pretrain_seed},
                 {"lr", hyper.lr},
                 {"batch_size", hyper.batch_size},
                 {"min_lr_fraction", hyper.min_lr_fraction},
                 {"difficulty", to_string(hyper.difficulty)},
                 {"corpus",
                  {{"version", kCorpusVersion},
                   {"qa", hyper.mix.qa},
                   {"list", hyper.mix.list},
                   {"mixed_list", hyper.mix.mixed_list},
                   {"list_hard", hyper.mix.list_hard},
                   {"list_min", hyper.mix.list_min},
                   {"list_max", hyper.mix.list_max}}}};
  std::filesystem::path cached;
  if (!config.cache_dir.empty()) {
    cached = std::filesystem::path(config.cache_dir) / ("base-" + bytes_digest(key.dump()) + ".ckpt");
    if (std::filesystem::exists(cached)) {
      auto [cfg, params] = model_from_tensors(load_checkpoint(cached));
      if (!(cfg == preset.model)) throw CheckpointError("cached base does not match its key: " + cached.string());
      return Base{role, cfg, std::move(params)};
    }
  }
  const RngState root{config.pretrain_seed, 0};
  RngState init = rng_fork(root, "init-d" + std::to_string(preset.model.d_model));
  ModelParams params = ModelParams::init(preset.model, init);
  pretrain_model(preset.model, params, hyper, rng_fork(root, "corpus"), progress);
  if (!cached.empty()) {
    std::filesystem::create_directories(cached.parent_path());
    save_checkpoint(cached, model_to_tensors(preset.model, params));
  }
  return Base{role, preset.model, std::move(params)};
}

inline double zero_shot_hard(const Base& base, const ExperimentConfig& config) {
  RngState rng = rng_fork(RngState{config.pretrain_seed, 0}, "gap-check-" + config.task);
  const Dataset d = make_dataset(task_by_name(config.task), 1, config.gap_check_size, 1, Difficulty::Hard, rng);
  ForwardContext ctx(base.cfg, base.params);
  return eval_accuracy(ctx, d.val());
}

// Source and target (plus the intermediate model when asked). Throws
// GapNotAchieved when the target is weaker than the source zero-shot on the
// configured task's hard prompts.
inline Bases pretrain_bases(const ExperimentConfig& config, bool with_intermediate = false,
                            const std::function<void(const std::string&, std::size_t, double)>& progress = {}) {
  config.validate();
  auto hook = [&progress](const std::string& role) {
    return progress ? std::function<void(std::size_t, double)>(
                          [&progress, role](std::size_t s, double l) { progress(role, s, l); })
                    : std::function<void(std::size_t, double)>();
  };
  Bases b{pretrain_base("source", config.source, config, hook("source")),
          pretrain_base("target", config.target, config, hook("target")),
          std::nullopt};
  if (with_intermediate) b.intermediate = pretrain_base("intermediate", config.intermediate, config, hook("intermediate"));
  b.source_zero_shot = zero_shot_hard(b.source, config);
  b.target_zero_shot = zero_shot_hard(b.target, config);
  if (b.target_zero_shot < b.source_zero_shot) {
    char msg[160];
    std::snprintf(msg, sizeof msg, "target zero-shot %.4f < source zero-shot %.4f on %s", b.target_zero_shot,
                  b.source_zero_shot, config.task.c_str());
    throw GapNotAchieved(msg);
  }
  return b;
}

// ---------------------------------------------------------------------------
// Reports

struct MmdSummary {
  double filtered = 0.0;    // MMD^2(curated, original)
  double unfiltered = 0.0;  // MMD^2(first-N raw candidates, original)
  double bandwidth_filtered = 0.0;
  double bandwidth_unfiltered = 0.0;
  std::size_t n = 0;
};

struct RunReport {
  std::string suite = "transfer";
  std::string task;
  std::uint64_t seed = 0;
  std::string source_model = "source";
  std::string target_model = "target";
  std::string source_kind, target_kind, arm;
  double source_lora_acc = 0.0;
  double target_base_acc = 0.0;
  double transferred_acc = 0.0;
  double discriminator_holdout_acc = 0.0;
  std::size_t discriminator_holdout_size = 0;
  std::optional<CurationStats> curation;
  std::optional<MmdSummary> mmd;
  std::size_t corpus_size = 0;
  std::size_t distill_steps = 0;
  std::vector<double> distill_losses;
  std::string teacher_digest;        // source base + teacher adapter checkpoint bytes
  std::string adapter_digest;        // transferred adapter checkpoint bytes
  std::string discriminator_digest;  // discriminator adapter checkpoint bytes
  std::size_t train_reads_after_discriminator = 0;
  bool completed = true;
  double wall_time_s = 0.0;
  json config;
};

inline json to_json(const RunReport& r) {
  json j{{"suite", r.suite},
         {"task", r.task},
         {"seed", r.seed},
         {"source_model", r.source_model},
         {"target_model", r.target_model},
         {"source_kind", r.source_kind},
         {"target_kind", r.target_kind},
         {"arm", r.arm},
         {"columns",
          {{"Source Model LoRA Acc.", r.source_lora_acc},
           {"Target Model no LoRA Acc.", r.target_base_acc},
           {"Ours", r.transferred_acc}}},
         {"source_lora_acc", r.source_lora_acc},
         {"target_base_acc", r.target_base_acc},
         {"transferred_acc", r.transferred_acc},
         {"discriminator", {{"holdout_accuracy", r.discriminator_holdout_acc},
                            {"holdout_size", r.discriminator_holdout_size},
                            {"digest", r.discriminator_digest}}},
         {"curation", r.curation ? to_json(*r.curation) : json(nullptr)},
         {"mmd", r.mmd ? json{{"filtered", r.mmd->filtered},
                              {"unfiltered", r.mmd->unfiltered},
                              {"bandwidth_filtered", r.mmd->bandwidth_filtered},
                              {"bandwidth_unfiltered", r.mmd->bandwidth_unfiltered},
                              {"n", r.mmd->n}}
                       : json(nullptr)},
         {"distill", {{"corpus_size", r.corpus_size}, {"steps", r.distill_steps}, {"epoch_losses", r.distill_losses}}},
         {"teacher_digest", r.teacher_digest},
         {"adapter_digest", r.adapter_digest},
         {"audit", {{"train_reads_after_discriminator", r.train_reads_after_discriminator}}},
         {"completed", r.completed},
         {"wall_time_s", r.wall_time_s},
         {"config", r.config}};
  return j;
}

inline RunReport report_from_json(const json& j) {
  RunReport r;
  try {
    r.suite = j.at("suite").get<std::string>();
    r.task = j.at("task").get<std::string>();
    r.seed = j.at("seed").get<std::uint64_t>();
    r.source_model = j.at("source_model").get<std::string>();
    r.target_model = j.at("target_model").get<std::string>();
    r.source_kind = j.at("source_kind").get<std::string>();
    r.target_kind = j.at("target_kind").get<std::string>();
    r.arm = j.at("arm").get<std::string>();
    r.source_lora_acc = j.at("source_lora_acc").get<double>();
    r.target_base_acc = j.at("target_base_acc").get<double>();
    r.transferred_acc = j.at("transferred_acc").get<double>();
    const json& d = j.at("discriminator");
    r.discriminator_holdout_acc = d.at("holdout_accuracy").get<double>();
    r.discriminator_holdout_size = d.at("holdout_size").get<std::size_t>();
    r.discriminator_digest = d.at("digest").get<std::string>();
    if (const json& c = j.at("curation"); !c.is_null()) {
      CurationStats s;
      s.generated = c.at("generated").get<std::size_t>();
      s.accepted = c.at("accepted").get<std::size_t>();
      s.rejected = c.at("rejected").get<std::size_t>();
      s.parse_failures = c.at("parse_failures").get<std::size_t>();
      s.duplicates = c.at("duplicates").get<std::size_t>();
      s.raw_samples = c.at("raw_samples").get<std::size_t>();
      s.acceptance_rate = c.at("acceptance_rate").get<double>();
      r.curation = s;
    }
    if (const json& m = j.at("mmd"); !m.is_null()) {
      r.mmd = MmdSummary{m.at("filtered").get<double>(), m.at("unfiltered").get<double>(),
                         m.at("bandwidth_filtered").get<double>(), m.at("bandwidth_unfiltered").get<double>(),
                         m.at("n").get<std::size_t>()};
    }
    const json& dd = j.at("distill");
    r.corpus_size = dd.at("corpus_size").get<std::size_t>();
    r.distill_steps = dd.at("steps").get<std::size_t>();
    r.distill_losses = dd.at("epoch_losses").get<std::vector<double>>();
    r.teacher_digest = j.at("teacher_digest").get<std::string>();
    r.adapter_digest = j.at("adapter_digest").get<std::string>();
    r.train_reads_after_discriminator = j.at("audit").at("train_reads_after_discriminator").get<std::size_t>();
    r.completed = j.at("completed").get<bool>();
    r.wall_time_s = j.at("wall_time_s").get<double>();
    r.config = j.at("config");
  } catch (const json::exception& e) {
    throw ConfigError(std::string("malformed report: ") + e.what());
  }
  return r;
}

// Report JSON with the wall-time field removed, for determinism checks.
inline std::string report_fingerprint(const RunReport& r) {
  json j = to_json(r);
  j.erase("wall_time_s");
  return j.dump();
}

// ---------------------------------------------------------------------------
// Transfer session: the state shared by every suite for one (task, seed).

inline std::string adapter_digest(const Adapter& ad) { return bytes_digest(encode_checkpoint(adapter_to_tensors(ad))); }

struct Teacher {
  const Base* base = nullptr;
  Adapter adapter;
  double accuracy = 0.0;  // on the test split
  std::string digest;     // base + adapter checkpoint bytes
  std::vector<double> epoch_losses;
};

struct Student {
  std::string corpus_name;
  DistillResult result;
  double accuracy = 0.0;
  std::string digest;
};

class TransferSession {
 public:
  // Fine-tunes a teacher for each requested kind, then trains the
  // discriminator; from that point on the training split is sealed.
  TransferSession(const ExperimentConfig& config, const Bases& bases,
                  const std::vector<AdapterKind>& teacher_kinds)
      : config_(config), bases_(bases), root_{config.seed, 0} {
    config_.validate();
    const auto t0 = std::chrono::steady_clock::now();
    const Task& task = task_by_name(config_.task);
    RngState data_rng = rng_fork(root_, "dataset");
    dataset_ = make_dataset(task, config_.n_train, config_.n_val, config_.n_test, Difficulty::Hard, data_rng);
    RngState seed_rng = rng_fork(root_, "seed-set");
    seed_ = sample_seed(dataset_, config_.seed_count, seed_rng);
    for (AdapterKind kind : teacher_kinds) train_teacher(kind);

    // Negatives come from the source base prompted with the seed set.
    ForwardContext src(bases_.source.cfg, bases_.source.params);
    RngState neg_rng = rng_fork(root_, "negatives");
    const auto negatives = synthesize_candidates(
        model_generator(src, config_.generator_temperature, config_.generator_max_new), seed_,
        dataset_.train_size(), neg_rng, config_.curation.n_header, config_.curation.max_chars);
    std::vector<std::string> real;
    for (const auto& s : dataset_.train()) real.push_back(s.prompt);
    disc_ = train_discriminator(bases_.source.cfg, bases_.source.params, real, negatives, config_.task,
                                config_.discriminator, rng_fork(root_, "discriminator"));
    disc_digest_ = adapter_digest(disc_.disc.adapter);
    dataset_.audit().arm(true);
    setup_seconds_ = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  }

  const ExperimentConfig& config() const noexcept { return config_; }
  const Bases& bases() const noexcept { return bases_; }
  const Dataset& dataset() const noexcept { return dataset_; }
  const SeedSet& seed_set() const noexcept { return seed_; }
  const DiscriminatorResult& discriminator() const noexcept { return disc_; }
  const std::string& discriminator_digest() const noexcept { return disc_digest_; }
  double setup_seconds() const noexcept { return setup_seconds_; }
  std::size_t train_reads_after_discriminator() const { return dataset_.audit().violations(); }

  const Teacher& teacher(AdapterKind kind) const {
    auto it = teachers_.find(kind);
    if (it == teachers_.end()) throw ConfigError("no " + to_string(kind) + " teacher was prepared");
    return it->second;
  }

  double base_accuracy(const Base& base) {
    auto it = base_acc_.find(base.role);
    if (it != base_acc_.end()) return it->second;
    ForwardContext ctx(base.cfg, base.params);
    return base_acc_[base.role] = eval_accuracy(ctx, dataset_.test());
  }

  // Curated and raw candidates generated by `generator` (cached per model and count).
  const CurationResult& curation(const Base& generator, std::size_t target_count) {
    const auto key = std::make_pair(generator.role, target_count);
    auto it = curations_.find(key);
    if (it != curations_.end()) return it->second;
    ForwardContext ctx(generator.cfg, generator.params);
    RngState rng = rng_fork(root_, "curate-" + generator.role + "-" + std::to_string(target_count));
    CurationResult r = curate(model_generator(ctx, config_.generator_temperature, config_.generator_max_new),
                              discriminator_judge(disc_.disc), seed_, target_count, config_.curation, rng);
    return curations_.emplace(key, std::move(r)).first->second;
  }

  DistillCorpus corpus(CorpusKind kind, const Base& generator, std::size_t target_count) {
    DistillCorpus c{kind, {}};
    switch (kind) {
      case CorpusKind::Curated:
        for (const auto& x : curation(generator, target_count).curated) c.prompts.push_back(x.prompt_text);
        break;
      case CorpusKind::UnfilteredSynthetic: {
        const auto& raw = curation(generator, target_count).unfiltered;
        for (std::size_t i = 0; i < target_count && i < raw.size(); ++i) c.prompts.push_back(raw[i].prompt_text);
        break;
      }
      case CorpusKind::SeedOnly:
        for (const auto& s : seed_.samples) c.prompts.push_back(s.prompt);
        break;
      case CorpusKind::RandomText: {
        RngState rng = rng_fork(root_, "random-text-" + std::to_string(target_count));
        c = make_random_text_corpus(target_count, config_.random_text_max_chars, rng);
        break;
      }
    }
    return c;
  }

  // Distils `teacher` into a fresh `kind` adapter on `student` and evaluates it.
  Student distill_into(const ForwardContext& teacher, const Base& student, AdapterKind kind,
                       const DistillCorpus& corpus, std::size_t total_steps, const std::string& tag) {
    DistillConfig dc = config_.distillation;
    dc.total_steps = total_steps;
    if (kind == AdapterKind::PromptTuning) dc.lr = config_.distill_pt_lr;
    Student s;
    s.corpus_name = to_string(corpus.kind);
    s.result = distill(teacher, student.cfg, student.params, config_.adapter_spec(kind), corpus, dc,
                       rng_fork(root_, "distill-" + tag));
    AdaptedModel m(student.cfg, student.params, &s.result.adapter);
    s.accuracy = eval_accuracy(m.context(), dataset_.test());
    s.digest = adapter_digest(s.result.adapter);
    return s;
  }

  // Distillation steps for a corpus of n prompts under the configured epochs.
  std::size_t steps_for_corpus(std::size_t n) const {
    TrainHyper h;
    h.epochs = config_.distillation.epochs;
    h.batch_size = config_.distillation.batch_size;
    h.total_steps = config_.distillation.total_steps;
    return steps_for(n, h);
  }

  MmdSummary mmd(const Base& generator, std::size_t target_count) {
    const CurationResult& cur = curation(generator, target_count);
    ForwardContext ctx(bases_.target.cfg, bases_.target.params);
    std::vector<std::string> orig, filt, unfilt;
    const std::size_t n = std::min(target_count, dataset_.test().size());
    for (std::size_t i = 0; i < n; ++i) orig.push_back(dataset_.test()[i].prompt);
    for (std::size_t i = 0; i < n; ++i) filt.push_back(cur.curated[i].prompt_text);
    for (std::size_t i = 0; i < n; ++i) unfilt.push_back(cur.unfiltered[i].prompt_text);
    const auto eo = embed_all(ctx, orig), ef = embed_all(ctx, filt), eu = embed_all(ctx, unfilt);
    const MmdResult f = mmd2_unbiased(ef, eo), u = mmd2_unbiased(eu, eo);
    return MmdSummary{f.mmd2, u.mmd2, f.bandwidth, u.bandwidth, n};
  }

  // Fills the fields every suite shares.
  RunReport base_report(const std::string& suite) const {
    RunReport r;
    r.suite = suite;
    r.task = config_.task;
    r.seed = config_.seed;
    r.discriminator_holdout_acc = disc_.holdout_accuracy;
    r.discriminator_holdout_size = disc_.holdout_size;
    r.discriminator_digest = disc_digest_;
    r.config = to_json(config_);
    return r;
  }

 private:
  void train_teacher(AdapterKind kind) {
    if (teachers_.count(kind)) return;
    const Base& src = bases_.source;
    RngState init = rng_fork(root_, "teacher-init-" + to_string(kind));
    Adapter ad = init_adapter(config_.adapter_spec(kind), src.cfg, src.params, init);
    TrainHyper h = config_.finetune;
    if (kind == AdapterKind::PromptTuning) h.lr = config_.finetune_pt_lr;
    std::function<PairTokens(const Sample&)> enc = [](const Sample& s) { return encode_sample(s); };
    FinetuneResult fr = finetune(src.cfg, src.params, std::move(ad), dataset_.train(), enc, h,
                                 rng_fork(root_, "teacher-train-" + to_string(kind)));
    Teacher t;
    t.base = &src;
    t.adapter = std::move(fr.adapter);
    t.epoch_losses = std::move(fr.epoch_losses);
    AdaptedModel m(src.cfg, src.params, &t.adapter);
    t.accuracy = eval_accuracy(m.context(), dataset_.test());
    t.digest = bytes_digest(encode_checkpoint(model_to_tensors(src.cfg, src.params)) +
                            encode_checkpoint(adapter_to_tensors(t.adapter)));
    teachers_.emplace(kind, std::move(t));
  }

  ExperimentConfig config_;
  const Bases& bases_;
  RngState root_;
  Dataset dataset_;
  SeedSet seed_;
  std::map<AdapterKind, Teacher> teachers_;
  DiscriminatorResult disc_;
  std::string disc_digest_;
  std::map<std::string, double> base_acc_;
  std::map<std::pair<std::string, std::size_t>, CurationResult> curations_;
  double setup_seconds_ = 0.0;
};

// Artifacts of one transfer run besides the report.
struct RunArtifacts {
  std::vector<Candidate> curated;
  std::vector<Candidate> unfiltered;
  std::optional<Adapter> teacher;
  std::optional<Adapter> transferred;
  std::optional<Adapter> discriminator;
  std::vector<double> teacher_losses;
  std::vector<double> distill_losses;
};

struct TransferOutcome {
  RunReport report;
  RunArtifacts artifacts;
};

// Curation budget ran out; carries the partial-run report.
class RunBudgetExhausted : public BudgetExhausted {
 public:
  RunBudgetExhausted(const BudgetExhausted& e, RunReport report)
      : BudgetExhausted(e.partial(), e.stats()), report_(std::move(report)) {}
  const RunReport& report() const noexcept { return report_; }

 private:
  RunReport report_;
};

namespace detail {

inline double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace detail

// One arm of the pipeline on an existing session. `total_steps` 0 uses the
// configured epochs over the chosen corpus.
inline TransferOutcome run_arm(TransferSession& session, AdapterKind source_kind, AdapterKind target_kind,
                               CorpusKind arm, std::size_t target_count, std::size_t total_steps,
                               const std::string& suite) {
  const auto t0 = std::chrono::steady_clock::now();
  const Bases& bases = session.bases();
  const Teacher& teacher = session.teacher(source_kind);
  TransferOutcome out;
  RunReport& r = out.report = session.base_report(suite);
  r.source_kind = to_string(source_kind);
  r.target_kind = to_string(target_kind);
  r.arm = to_string(arm);
  r.source_lora_acc = teacher.accuracy;
  r.target_base_acc = session.base_accuracy(bases.target);
  r.teacher_digest = teacher.digest;
  out.artifacts.teacher = teacher.adapter;
  out.artifacts.teacher_losses = teacher.epoch_losses;
  out.artifacts.discriminator = session.discriminator().disc.adapter;
  try {
    if (arm == CorpusKind::Curated || arm == CorpusKind::UnfilteredSynthetic) {
      const CurationResult& cur = session.curation(bases.target, target_count);
      r.curation = cur.stats;
      out.artifacts.curated = cur.curated;
      out.artifacts.unfiltered = cur.unfiltered;
    }
  } catch (const BudgetExhausted& e) {
    r.curation = e.stats();
    r.completed = false;
    r.train_reads_after_discriminator = session.train_reads_after_discriminator();
    r.wall_time_s = session.setup_seconds() + detail::seconds_since(t0);
    throw RunBudgetExhausted(e, r);
  }
  const DistillCorpus corpus = session.corpus(arm, bases.target, target_count);
  const std::size_t steps = total_steps > 0 ? total_steps : session.steps_for_corpus(corpus.prompts.size());
  AdaptedModel tm(teacher.base->cfg, teacher.base->params, &teacher.adapter);
  // The tag leaves out the suite so equal settings reproduce across suites.
  const std::string tag = to_string(source_kind) + "-" + to_string(target_kind) + "-" + to_string(arm) + "-" +
                          std::to_string(target_count) + "-" + std::to_string(steps);
  Student s = session.distill_into(tm.context(), bases.target, target_kind, corpus, steps, tag);
  r.transferred_acc = s.accuracy;
  r.corpus_size = corpus.prompts.size();
  r.distill_steps = s.result.steps;
  r.distill_losses = s.result.epoch_losses;
  r.adapter_digest = s.digest;
  r.train_reads_after_discriminator = session.train_reads_after_discriminator();
  out.artifacts.distill_losses = s.result.epoch_losses;
  out.artifacts.transferred = std::move(s.result.adapter);
  r.wall_time_s = session.setup_seconds() + detail::seconds_since(t0);
  return out;
}

// The main pipeline for config.source_kind -> config.target_kind with the
// configured arm, plus the MMD of curated and raw candidates.
inline TransferOutcome run_transfer(TransferSession& session) {
  const ExperimentConfig& config = session.config();
  TransferOutcome out = run_arm(session, config.source_kind, config.target_kind, config.arm, config.synth_target(), 0,
                                "transfer");
  if (config.arm == CorpusKind::Curated || config.arm == CorpusKind::UnfilteredSynthetic) {
    out.report.mmd = session.mmd(session.bases().target, config.synth_target());
  }
  return out;
}

inline TransferOutcome run_transfer(const ExperimentConfig& config, const Bases& bases) {
  TransferSession session(config, bases, {config.source_kind});
  return run_transfer(session);
}

inline constexpr CorpusKind kAblationArms[] = {CorpusKind::RandomText, CorpusKind::UnfilteredSynthetic,
                                               CorpusKind::SeedOnly, CorpusKind::Curated};

// Every arm distils the same teacher for the same number of steps: the step
// count of the curated arm under the configured epochs.
inline std::vector<RunReport> run_ablation_suite(TransferSession& session) {
  const ExperimentConfig& c = session.config();
  const std::size_t steps = session.steps_for_corpus(c.synth_target());
  std::vector<RunReport> out;
  for (CorpusKind arm : kAblationArms) {
    out.push_back(run_arm(session, c.source_kind, c.target_kind, arm, c.synth_target(), steps, "ablation").report);
  }
  return out;
}

inline std::vector<RunReport> run_ablation_suite(const ExperimentConfig& config, const Bases& bases) {
  TransferSession session(config, bases, {config.source_kind});
  return run_ablation_suite(session);
}

inline constexpr AdapterKind kAllAdapterKinds[] = {AdapterKind::LoRA, AdapterKind::DoRA, AdapterKind::PromptTuning};

inline RunReport run_cross_peft(TransferSession& session, AdapterKind source_kind, AdapterKind target_kind) {
  const ExperimentConfig& c = session.config();
  return run_arm(session, source_kind, target_kind, CorpusKind::Curated, c.synth_target(), 0, "cross-peft").report;
}

// All nine (source, target) kind pairs over one curated set.
inline std::vector<RunReport> run_cross_peft_matrix(TransferSession& session) {
  std::vector<RunReport> out;
  for (AdapterKind s : kAllAdapterKinds)
    for (AdapterKind t : kAllAdapterKinds) out.push_back(run_cross_peft(session, s, t));
  return out;
}

inline std::vector<RunReport> run_cross_peft_matrix(const ExperimentConfig& config, const Bases& bases) {
  TransferSession session(config, bases, {std::begin(kAllAdapterKinds), std::end(kAllAdapterKinds)});
  return run_cross_peft_matrix(session);
}

// Source -> intermediate -> target with one discriminator. The hop-1 student
// (intermediate base + adapter) is the hop-2 teacher.
inline std::pair<RunReport, RunReport> run_continuous(TransferSession& session) {
  const ExperimentConfig& c = session.config();
  const Bases& bases = session.bases();
  if (!bases.intermediate) throw ConfigError("continuous transfer needs an intermediate model");
  const Base& mid = *bases.intermediate;
  const Teacher& teacher = session.teacher(c.source_kind);
  const std::size_t n = c.synth_target();

  const auto t0 = std::chrono::steady_clock::now();
  RunReport hop1 = session.base_report("continuous-hop1");
  hop1.target_model = "intermediate";
  hop1.source_kind = to_string(c.source_kind);
  hop1.target_kind = to_string(c.target_kind);
  hop1.arm = to_string(CorpusKind::Curated);
  hop1.source_lora_acc = teacher.accuracy;
  hop1.target_base_acc = session.base_accuracy(mid);
  hop1.teacher_digest = teacher.digest;
  hop1.curation = session.curation(mid, n).stats;
  const DistillCorpus c1 = session.corpus(CorpusKind::Curated, mid, n);
  AdaptedModel t1(bases.source.cfg, bases.source.params, &teacher.adapter);
  Student s1 = session.distill_into(t1.context(), mid, c.target_kind, c1, 0, "continuous-hop1");
  hop1.transferred_acc = s1.accuracy;
  hop1.corpus_size = c1.prompts.size();
  hop1.distill_steps = s1.result.steps;
  hop1.distill_losses = s1.result.epoch_losses;
  hop1.adapter_digest = s1.digest;
  hop1.train_reads_after_discriminator = session.train_reads_after_discriminator();
  hop1.wall_time_s = session.setup_seconds() + detail::seconds_since(t0);

  const auto t1s = std::chrono::steady_clock::now();
  RunReport hop2 = session.base_report("continuous-hop2");
  hop2.source_model = "intermediate";
  hop2.source_kind = to_string(c.target_kind);
  hop2.target_kind = to_string(c.target_kind);
  hop2.arm = to_string(CorpusKind::Curated);
  hop2.source_lora_acc = s1.accuracy;
  hop2.target_base_acc = session.base_accuracy(bases.target);
  hop2.teacher_digest = bytes_digest(encode_checkpoint(model_to_tensors(mid.cfg, mid.params)) +
                                     encode_checkpoint(adapter_to_tensors(s1.result.adapter)));
  hop2.curation = session.curation(bases.target, n).stats;
  const DistillCorpus c2 = session.corpus(CorpusKind::Curated, bases.target, n);
  AdaptedModel t2(mid.cfg, mid.params, &s1.result.adapter);
  Student s2 = session.distill_into(t2.context(), bases.target, c.target_kind, c2, 0, "continuous-hop2");
  hop2.transferred_acc = s2.accuracy;
  hop2.corpus_size = c2.prompts.size();
  hop2.distill_steps = s2.result.steps;
  hop2.distill_losses = s2.result.epoch_losses;
  hop2.adapter_digest = s2.digest;
  hop2.train_reads_after_discriminator = session.train_reads_after_discriminator();
  hop2.wall_time_s = detail::seconds_since(t1s);
  return {hop1, hop2};
}

inline std::pair<RunReport, RunReport> run_continuous(const ExperimentConfig& config, const Bases& bases) {
  TransferSession session(config, bases, {config.source_kind});
  return run_continuous(session);
}

// One curated-arm run per multiplier, all with the step count of the
// smallest corpus (multiplier 1 under the configured epochs).
inline std::vector<RunReport> run_scaling(TransferSession& session) {
  const ExperimentConfig& c = session.config();
  const std::size_t steps = session.steps_for_corpus(c.n_train);
  std::vector<RunReport> out;
  for (std::size_t m : c.scaling_multipliers) {
    out.push_back(
        run_arm(session, c.source_kind, c.target_kind, CorpusKind::Curated, m * c.n_train, steps, "scaling").report);
  }
  return out;
}

inline std::vector<RunReport> run_scaling(const ExperimentConfig& config, const Bases& bases) {
  TransferSession session(config, bases, {config.source_kind});
  return run_scaling(session);
}

// ---------------------------------------------------------------------------
// Persistence

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  write_file(path, text);
}

inline std::string report_text(const RunReport& r) { return to_json(r).dump(2) + "\n"; }

inline json reports_to_json(const std::vector<RunReport>& rs) {
  json arr = json::array();
  for (const auto& r : rs) arr.push_back(to_json(r));
  return arr;
}

// Writes report.json, curated/unfiltered JSONL, adapter checkpoints and loss curves.
inline void write_run(const std::filesystem::path& dir, const TransferOutcome& o) {
  std::filesystem::create_directories(dir);
  write_text(dir / "report.json", report_text(o.report));
  write_text(dir / "curated.jsonl", candidates_to_jsonl(o.artifacts.curated));
  write_text(dir / "unfiltered.jsonl", candidates_to_jsonl(o.artifacts.unfiltered));
  if (o.artifacts.teacher) save_checkpoint(dir / "source_adapter.ckpt", adapter_to_tensors(*o.artifacts.teacher));
  if (o.artifacts.transferred) {
    save_checkpoint(dir / "target_adapter.ckpt", adapter_to_tensors(*o.artifacts.transferred));
  }
  if (o.artifacts.discriminator) {
    save_checkpoint(dir / "discriminator.ckpt", adapter_to_tensors(*o.artifacts.discriminator));
  }
  std::ostringstream os;
  os.precision(17);
  os << "phase,epoch,mean_loss\n";
  for (std::size_t i = 0; i < o.artifacts.teacher_losses.size(); ++i) {
    os << "finetune," << i + 1 << ',' << o.artifacts.teacher_losses[i] << '\n';
  }
  for (std::size_t i = 0; i < o.artifacts.distill_losses.size(); ++i) {
    os << "distill," << i + 1 << ',' << o.artifacts.distill_losses[i] << '\n';
  }
  write_text(dir / "curves.csv", os.str());
}

}  // namespace translora
