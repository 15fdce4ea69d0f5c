#pragma once

// Knowledge distillation of a teacher (base + adapter) into a fresh adapter on
// a student base, over a corpus of prompts labelled by the teacher.

#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "translora/adapters.hpp"
#include "translora/tasks.hpp"

namespace translora {

enum class CorpusKind { Curated, UnfilteredSynthetic, SeedOnly, RandomText };

inline std::string to_string(CorpusKind k) {
  switch (k) {
    case CorpusKind::Curated: return "curated";
    case CorpusKind::UnfilteredSynthetic: return "unfiltered";
    case CorpusKind::SeedOnly: return "seed-only";
    case CorpusKind::RandomText: return "random-text";
  }
  return "?";
}

inline CorpusKind corpus_kind_from_string(const std::string& s) {
  for (CorpusKind k : {CorpusKind::Curated, CorpusKind::UnfilteredSynthetic, CorpusKind::SeedOnly,
                       CorpusKind::RandomText}) {
    if (to_string(k) == s) return k;
  }
  throw ConfigError("unknown corpus kind '" + s + "'");
}

struct DistillCorpus {
  CorpusKind kind = CorpusKind::Curated;
  std::vector<std::string> prompts;
};

struct DistillConfig {
  double temperature = 1.0;
  std::size_t epochs = 20;
  std::size_t batch_size = 8;
  double lr = 2e-2;
  std::size_t total_steps = 0;  // 0: epochs * ceil(|corpus| / batch_size)
  std::size_t teacher_decode_max = kAnswerMaxTokens;
};

// Greedy teacher completion for each prompt. The completion keeps the raw
// decoded text (it may be empty when the teacher stops immediately).
inline std::vector<Sample> teacher_label(const ForwardContext& teacher, const std::vector<std::string>& prompts,
                                         std::size_t max_decode = kAnswerMaxTokens) {
  std::vector<Sample> out(prompts.size());
  parallel_for(prompts.size(), [&](std::size_t i) {
    out[i] = Sample{prompts[i], greedy_answer(teacher, prompts[i], max_decode)};
  });
  return out;
}

inline PairTokens encode_labelled(const Sample& s) {
  TokenSeq completion = tokenize(s.completion);
  completion.push_back(tok::kEos);
  return PairTokens{encode_prompt(s.prompt), std::move(completion)};
}

// softmax(teacher_logits / tau) at every completion position, one row each.
inline Matrix soft_targets(const ForwardContext& teacher, const PairTokens& pair, double tau) {
  if (pair.completion.empty()) throw EmptyCompletion("completion has no tokens");
  TokenSeq seq = joined(pair);
  if (seq.size() > teacher.config().max_len) throw SequenceTooLong("prompt+completion exceeds max_len");
  seq.pop_back();
  const Trace tr = forward_trace(teacher, seq, completion_logit_row(teacher, pair));
  Matrix out(tr.logit_rows(), teacher.config().vocab_size);
  for (std::size_t j = 0; j < out.rows(); ++j) {
    const auto row = tr.logits.row(j);
    const std::vector<double> p = softmax(std::vector<double>(row.begin(), row.end()), tau);
    std::copy(p.begin(), p.end(), out.row(j).begin());
  }
  return out;
}

// Mean over completion positions of soft_cross_entropy(targets_j, student
// logits_j / tau); accumulates weight * gradient when grads is non-null.
inline double kd_loss(const ForwardContext& student, const PairTokens& pair, const Matrix& targets, double tau,
                      ModelGrads* grads = nullptr, GradMask mask = 0, double weight = 1.0) {
  if (!(tau > 0.0)) throw InvalidTemperature("distillation temperature must be > 0");
  if (pair.completion.empty()) throw EmptyCompletion("completion has no tokens");
  TokenSeq seq = joined(pair);
  if (seq.size() > student.config().max_len) throw SequenceTooLong("prompt+completion exceeds max_len");
  seq.pop_back();
  const Trace tr = forward_trace(student, seq, completion_logit_row(student, pair));
  const std::size_t n = pair.completion.size();
  if (targets.rows() != n || targets.cols() != student.config().vocab_size) {
    throw ShapeMismatch("soft targets do not match completion length / vocabulary");
  }
  Matrix dlogits(n, student.config().vocab_size);
  double loss = 0.0;
  for (std::size_t j = 0; j < n; ++j) {
    std::vector<double> z(tr.logits.row(j).begin(), tr.logits.row(j).end());
    for (double& x : z) x /= tau;
    const auto t = targets.row(j);
    const double lse = log_sum_exp(z);
    double* g = dlogits.row(j).data();
    for (std::size_t c = 0; c < z.size(); ++c) {
      if (t[c] > 0.0) loss -= t[c] * (z[c] - lse);
      g[c] = (std::exp(z[c] - lse) - t[c]) * weight / (tau * static_cast<double>(n));
    }
  }
  if (grads != nullptr) backward(student, tr, dlogits, mask, *grads);
  return loss / static_cast<double>(n);
}

inline double kd_step_loss(const ForwardContext& teacher, const ForwardContext& student, const Sample& sample,
                           double tau, ModelGrads* grads = nullptr, GradMask mask = 0, double weight = 1.0) {
  const PairTokens pair = encode_labelled(sample);
  return kd_loss(student, pair, soft_targets(teacher, pair, tau), tau, grads, mask, weight);
}

struct DistillResult {
  Adapter adapter;
  std::vector<double> epoch_losses;
  std::vector<Sample> labels;
  std::size_t steps = 0;
};

// Labels the corpus with the teacher, then trains a fresh student adapter
// against the teacher's temperature-softened distributions.
inline DistillResult distill(const ForwardContext& teacher, const ModelConfig& student_cfg,
                             const ModelParams& student_base, const AdapterSpec& student_spec,
                             const DistillCorpus& corpus, const DistillConfig& config, RngState rng) {
  if (corpus.prompts.empty()) throw EmptyCorpus("distillation corpus is empty");
  if (!(config.temperature > 0.0)) throw InvalidTemperature("distillation temperature must be > 0");
  if (config.epochs == 0) throw ConfigError("distillation epochs must be >= 1");
  DistillResult res;
  res.labels = teacher_label(teacher, corpus.prompts, config.teacher_decode_max);
  std::vector<PairTokens> pairs;
  pairs.reserve(res.labels.size());
  for (const auto& s : res.labels) pairs.push_back(encode_labelled(s));
  std::vector<Matrix> targets(pairs.size());
  parallel_for(pairs.size(), [&](std::size_t i) { targets[i] = soft_targets(teacher, pairs[i], config.temperature); });

  RngState init_rng = rng_fork(rng, "student-init");
  res.adapter = init_adapter(student_spec, student_cfg, student_base, init_rng);
  TrainHyper hyper;
  hyper.lr = config.lr;
  hyper.epochs = config.epochs;
  hyper.batch_size = config.batch_size;
  hyper.total_steps = config.total_steps;
  ItemLoss loss = [&](const ForwardContext& ctx, std::size_t i, ModelGrads* g, GradMask mask, double w) {
    return kd_loss(ctx, pairs[i], targets[i], config.temperature, g, mask, w);
  };
  TrainResult tr = train_adapter(student_cfg, student_base, res.adapter, pairs.size(), loss, hyper,
                                 rng_fork(rng, "student-train"));
  res.epoch_losses = std::move(tr.epoch_losses);
  res.steps = tr.steps;
  return res;
}

// Strings of random printable words that no built-in task can parse.
inline DistillCorpus make_random_text_corpus(std::size_t n, std::size_t max_chars, RngState& rng) {
  if (max_chars < 1) throw ConfigError("random text length must be >= 1");
  DistillCorpus corpus{CorpusKind::RandomText, {}};
  while (corpus.prompts.size() < n) {
    const std::size_t target = 1 + rng_below(rng, max_chars);
    std::string text;
    while (text.size() < target) {
      const std::size_t word = 1 + rng_below(rng, 8);
      if (!text.empty()) text += ' ';
      for (std::size_t i = 0; i < word; ++i) text += static_cast<char>('!' + rng_below(rng, 94));
    }
    text = trim(text.substr(0, target));
    if (text.empty()) continue;
    bool parses = false;
    for (const auto& t : builtin_tasks()) parses = parses || t->parses(text);
    if (!parses) corpus.prompts.push_back(text);
  }
  return corpus;
}

inline std::string loss_curve_csv(const std::vector<double>& losses) {
  std::ostringstream os;
  os.precision(17);
  os << "epoch,mean_loss\n";
  for (std::size_t i = 0; i < losses.size(); ++i) os << i + 1 << ',' << losses[i] << '\n';
  return os.str();
}

}  // namespace translora
