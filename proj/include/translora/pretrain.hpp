#pragma once

// Language-model pretraining of the base models on task text. Hard prompts
// only ever appear as numbered-list items, never directly after BOS, so a
// base model has no evidence about how a bare hard prompt continues. The
// corpus mixes three document shapes:
//   answered prompts      [BOS] prompt " " answer [EOS]
//   numbered lists        [BOS] Here are N examples:\n1. p\n2. p ... [EOS]
//   provenance questions  [BOS] p \nIs the above question from NAME dataset? [YES|NO] [EOS]

#include <string>
#include <vector>

#include "translora/model.hpp"
#include "translora/parallel.hpp"
#include "translora/tasks.hpp"

namespace translora {

inline std::string disc_prompt(std::string_view x, std::string_view task_name) {
  return std::string(x) + "\nIs the above question from " + std::string(task_name) + " dataset?";
}

inline std::string numbered_list_header(std::size_t n_header) {
  return "Here are " + std::to_string(n_header) + " examples:\n";
}

// Bumped whenever document layout changes, so cached bases are not reused.
inline constexpr int kCorpusVersion = 2;

struct CorpusMix {
  double qa = 0.5;
  double list = 0.3;          // remainder goes to provenance questions
  double mixed_list = 0.25;   // fraction of lists drawing items from several tasks
  double list_hard = 0.5;     // fraction of lists drawing hard prompts
  std::size_t list_min = 4;
  std::size_t list_max = 10;
};

inline PairTokens make_pretrain_doc(const std::vector<const Task*>& tasks, Difficulty difficulty,
                                    const CorpusMix& mix, std::size_t max_len, RngState& rng) {
  const double u = rng_next_uniform(rng);
  const Task& task = *tasks[rng_below(rng, tasks.size())];
  TokenSeq body;
  const Difficulty list_difficulty = rng_next_uniform(rng) < mix.list_hard ? Difficulty::Hard : difficulty;
  if (u < mix.qa) {
    const Sample s = task.sample(difficulty, rng);
    body = tokenize(s.prompt + " " + s.completion);
  } else if (u < mix.qa + mix.list) {
    const std::size_t n = mix.list_min + rng_below(rng, mix.list_max - mix.list_min + 1);
    const bool mixed = rng_next_uniform(rng) < mix.mixed_list;
    std::string text = numbered_list_header(n);
    for (std::size_t i = 1; i <= n; ++i) {
      const Task& t = mixed ? *tasks[rng_below(rng, tasks.size())] : task;
      std::string line = std::to_string(i) + ". " + t.sample_prompt(list_difficulty, rng) + "\n";
      if (text.size() + line.size() + 3 > max_len) break;
      text += line;
    }
    body = tokenize(text);
  } else {
    const bool match = rng_next_uniform(rng) < 0.5;
    const Task* other = &task;
    if (!match) {
      while (other == &task && tasks.size() > 1) other = tasks[rng_below(rng, tasks.size())];
    }
    const std::string x = other->sample_prompt(difficulty, rng);
    body = tokenize(disc_prompt(x, task.name()));
    body.push_back(other == &task ? tok::kYes : tok::kNo);
  }
  body.push_back(tok::kEos);
  if (body.size() + 1 > max_len) body.resize(max_len - 1);
  return PairTokens{TokenSeq{tok::kBos}, std::move(body)};
}

struct PretrainHyper {
  std::size_t steps = 1000;
  std::size_t batch_size = 8;
  double lr = 3e-3;
  double min_lr_fraction = 0.1;
  Difficulty difficulty = Difficulty::Easy;
  CorpusMix mix{};
};

inline std::vector<double> flatten_params(const ModelParams& p) {
  std::vector<double> out;
  out.reserve(p.parameter_count());
  p.visit([&out](const std::string&, const Matrix& m) { out.insert(out.end(), m.values().begin(), m.values().end()); });
  return out;
}

inline void unflatten_params(ModelParams& p, const std::vector<double>& flat) {
  std::size_t off = 0;
  p.visit([&](const std::string&, Matrix& m) {
    std::copy(flat.begin() + static_cast<long>(off), flat.begin() + static_cast<long>(off + m.size()),
              m.values().begin());
    off += m.size();
  });
}

// Trains every base parameter; returns the mean loss of each block of 50 steps.
inline std::vector<double> pretrain_model(const ModelConfig& cfg, ModelParams& params,
                                          const PretrainHyper& hyper, RngState rng,
                                          const std::function<void(std::size_t, double)>& progress = {}) {
  std::vector<const Task*> tasks;
  for (const auto& t : builtin_tasks()) tasks.push_back(t.get());
  std::vector<double> flat = flatten_params(params);
  AdamState adam(flat.size());
  std::vector<double> curve;
  double block = 0.0;
  std::size_t block_n = 0;
  for (std::size_t step = 0; step < hyper.steps; ++step) {
    std::vector<PairTokens> docs;
    for (std::size_t b = 0; b < hyper.batch_size; ++b) {
      docs.push_back(make_pretrain_doc(tasks, hyper.difficulty, hyper.mix, cfg.max_len, rng));
    }
    std::vector<ModelGrads> slots(docs.size());
    std::vector<double> losses(docs.size());
    {
      ForwardContext ctx(cfg, params);
      parallel_for(docs.size(), [&](std::size_t b) {
        slots[b] = ModelGrads(cfg, 0);
        losses[b] = completion_nll(ctx, docs[b], &slots[b], kGradBase, 1.0 / static_cast<double>(docs.size()));
      });
    }
    for (std::size_t b = 1; b < slots.size(); ++b) slots[0].add(slots[b]);
    const std::vector<double> grad = flatten_params(slots[0].params);
    const double frac = hyper.min_lr_fraction +
                        (1.0 - hyper.min_lr_fraction) * linear_lr(1.0, step, hyper.steps);
    adam_step(flat, grad, adam, hyper.lr * frac);
    unflatten_params(params, flat);
    for (double l : losses) block += l;
    block_n += losses.size();
    if ((step + 1) % 50 == 0 || step + 1 == hyper.steps) {
      curve.push_back(block / static_cast<double>(block_n));
      if (progress) progress(step + 1, curve.back());
      block = 0.0;
      block_n = 0;
    }
  }
  return curve;
}

}  // namespace translora
