#pragma once

// Few-shot synthesis of task inputs, the real-vs-synthetic discriminator, and
// the rejection-sampling curation loop.

#include <functional>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "translora/adapters.hpp"
#include "translora/pretrain.hpp"
#include "translora/tasks.hpp"

namespace translora {

struct Candidate {
  std::string prompt_text;
  std::string source_line;
};

// Trim and collapse internal whitespace runs to single spaces.
inline std::string normalize_candidate(std::string_view text) {
  std::string out;
  bool gap = false;
  for (char c : text) {
    if (c == ' ' || c == '\t' || c == '\n' || c == '\r') {
      gap = !out.empty();
      continue;
    }
    if (gap) out += ' ';
    gap = false;
    out += c;
  }
  return out;
}

// Drops a leading "N." list number.
inline std::string strip_numbering(std::string_view line) {
  std::size_t i = 0;
  while (i < line.size() && line[i] == ' ') ++i;
  std::size_t j = i;
  while (j < line.size() && line[j] >= '0' && line[j] <= '9') ++j;
  if (j > i && j < line.size() && line[j] == '.') return std::string(line.substr(j + 1));
  return std::string(line);
}

inline std::string build_synthesis_prompt(const SeedSet& seed, std::size_t n_header = 10) {
  if (seed.samples.empty()) throw EmptySeedSet("synthesis needs at least one seed prompt");
  std::string text = numbered_list_header(n_header);
  for (std::size_t i = 0; i < seed.samples.size(); ++i) {
    text += std::to_string(i + 1) + ". " + seed.samples[i].prompt + "\n";
  }
  return text + std::to_string(seed.samples.size() + 1) + ".";
}

// Raw continuation of a synthesis prompt.
using GenerateFn = std::function<std::string(const std::string& prompt, RngState& rng)>;

// Samples continuations from a model, stopping after `max_lines` newlines.
// The encoded prompt is fed once and its decode state reused by later calls
// with the same prompt.
inline GenerateFn model_generator(const ForwardContext& ctx, double temperature, std::size_t max_new = 96,
                                  std::size_t max_lines = 1) {
  struct Cache {
    std::string prompt;
    std::optional<DecodeState> state;
  };
  auto cache = std::make_shared<Cache>();
  return [&ctx, temperature, max_new, max_lines, cache](const std::string& prompt, RngState& rng) {
    const std::size_t max_len = ctx.config().max_len;
    if (!cache->state || cache->prompt != prompt) {
      const TokenSeq p = [&] {
        TokenSeq t{tok::kBos};
        const TokenSeq body = tokenize(prompt);
        t.insert(t.end(), body.begin(), body.end());
        return t;
      }();
      if (ctx.prefix_len() + p.size() + 1 > max_len) throw PromptTooLong("synthesis prompt exceeds max_len");
      cache->state.emplace(ctx, max_len);
      cache->state->feed(ctx, p);
      cache->prompt = prompt;
    }
    DecodeState st = *cache->state;
    const std::size_t budget = std::min(max_new, max_len - st.len());
    TokenSeq out;
    std::size_t lines = 0;
    for (std::size_t i = 0; i < budget; ++i) {
      const TokenId next = pick_token(st.last_logits(), temperature, rng);
      if (next == tok::kEos) break;
      out.push_back(next);
      if (next == tok::kNewline && ++lines >= max_lines) break;
      if (i + 1 < budget) st.feed(ctx, TokenSeq{next});
    }
    return detokenize(out);
  };
}

// Yields unique normalized candidates from repeated generations. Every line
// is inspected once; lines identical to a seed or to an earlier line are
// skipped and never offered again.
class CandidateStream {
 public:
  CandidateStream(GenerateFn gen, const SeedSet& seed, std::size_t n_header = 10, std::size_t max_chars = 0)
      : gen_(std::move(gen)), prompt_(build_synthesis_prompt(seed, n_header)), max_chars_(max_chars) {
    for (const auto& s : seed.samples) seen_.insert(normalize_candidate(s.prompt));
  }

  const std::string& prompt() const noexcept { return prompt_; }
  std::size_t raw_samples() const noexcept { return raw_samples_; }
  std::size_t parse_failures() const noexcept { return parse_failures_; }
  std::size_t duplicates() const noexcept { return duplicates_; }

  // Next fresh candidate, or nullopt once `raw_budget` generations are spent.
  std::optional<Candidate> next(RngState& rng, std::size_t raw_budget) {
    while (pending_.empty()) {
      if (raw_samples_ >= raw_budget) return std::nullopt;
      ++raw_samples_;
      split(gen_(prompt_, rng));
    }
    Candidate c = std::move(pending_.front());
    pending_.erase(pending_.begin());
    return c;
  }

 private:
  void split(const std::string& raw) {
    std::size_t start = 0;
    while (start <= raw.size()) {
      const std::size_t nl = raw.find('\n', start);
      // An unterminated final line may have been cut by the token budget.
      if (nl == std::string::npos) {
        if (start < raw.size()) consider(raw.substr(start), false);
        break;
      }
      consider(raw.substr(start, nl - start), true);
      start = nl + 1;
    }
  }

  void consider(const std::string& line, bool complete) {
    const std::string text = normalize_candidate(strip_numbering(line));
    if (text.empty() && normalize_candidate(line).empty()) return;  // blank line
    if (!complete || text.empty() || (max_chars_ > 0 && text.size() > max_chars_)) {
      ++parse_failures_;
      return;
    }
    if (!seen_.insert(text).second) {
      ++duplicates_;
      return;
    }
    pending_.push_back(Candidate{text, line});
  }

  GenerateFn gen_;
  std::string prompt_;
  std::size_t max_chars_;
  std::set<std::string> seen_;
  std::vector<Candidate> pending_;
  std::size_t raw_samples_ = 0;
  std::size_t parse_failures_ = 0;
  std::size_t duplicates_ = 0;
};

inline constexpr std::size_t kRawAttemptsPerCandidate = 50;

inline std::vector<Candidate> synthesize_candidates(const GenerateFn& gen, const SeedSet& seed, std::size_t count,
                                                    RngState& rng, std::size_t n_header = 10,
                                                    std::size_t max_chars = 0) {
  if (count < 1) throw ConfigError("candidate count must be >= 1");
  CandidateStream stream(gen, seed, n_header, max_chars);
  std::vector<Candidate> out;
  while (out.size() < count) {
    auto c = stream.next(rng, count * kRawAttemptsPerCandidate);
    if (!c) {
      throw GenerationBudgetExhausted("only " + std::to_string(out.size()) + " of " + std::to_string(count) +
                                      " candidates after " + std::to_string(stream.raw_samples()) +
                                      " generations");
    }
    out.push_back(std::move(*c));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Discriminator

struct Discriminator {
  ModelConfig cfg;
  ModelParams base;
  Adapter adapter;
  std::string task_name;
};

enum class Verdict { Real, Synthetic };

struct Classification {
  Verdict verdict = Verdict::Synthetic;
  double margin = 0.0;  // log p(YES) - log p(NO)
};

inline PairTokens disc_pair(std::string_view x, std::string_view task_name, TokenId answer) {
  TokenSeq prompt{tok::kBos};
  const TokenSeq body = tokenize(disc_prompt(x, task_name));
  prompt.insert(prompt.end(), body.begin(), body.end());
  return PairTokens{std::move(prompt), TokenSeq{answer}};
}

inline Classification classify_margin(double margin) {
  return Classification{margin > 0.0 ? Verdict::Real : Verdict::Synthetic, margin};
}

inline Classification classify(const ForwardContext& ctx, std::string_view task_name, std::string_view x) {
  const PairTokens pair = disc_pair(x, task_name, tok::kYes);
  if (ctx.prefix_len() + pair.prompt.size() + 1 > ctx.config().max_len) {
    throw PromptTooLong("discriminator template exceeds max_len");
  }
  const Trace tr = forward_trace(ctx, pair.prompt, ctx.prefix_len() + pair.prompt.size() - 1);
  const auto row = tr.logits.row(0);
  return classify_margin(row[tok::kYes] - row[tok::kNo]);
}

inline Classification classify(const Discriminator& disc, std::string_view x) {
  AdaptedModel m(disc.cfg, disc.base, &disc.adapter);
  return classify(m.context(), disc.task_name, x);
}

// Batch classification through one adapted model; verdict per input.
inline std::vector<Classification> classify_all(const Discriminator& disc, const std::vector<std::string>& xs) {
  AdaptedModel m(disc.cfg, disc.base, &disc.adapter);
  std::vector<Classification> out(xs.size());
  parallel_for(xs.size(), [&](std::size_t i) { out[i] = classify(m.context(), disc.task_name, xs[i]); });
  return out;
}

struct DiscriminatorHyper {
  TrainHyper train{1e-2, 6, 8, 0, {}};
  AdapterSpec adapter{};
  double holdout_fraction = 0.2;
};

struct DiscriminatorResult {
  Discriminator disc;
  double holdout_accuracy = 0.0;
  std::size_t holdout_size = 0;
  std::vector<double> epoch_losses;
};

// Trains the YES/NO adapter on real prompts (YES) and synthetic prompts (NO).
// Identical texts always fall on the same side of the held-out split.
inline DiscriminatorResult train_discriminator(const ModelConfig& cfg, const ModelParams& base,
                                               const std::vector<std::string>& real,
                                               const std::vector<Candidate>& synth, const std::string& task_name,
                                               const DiscriminatorHyper& hyper, RngState rng) {
  if (real.size() != synth.size()) {
    throw SizeMismatch(std::to_string(synth.size()) + " synthetic vs " + std::to_string(real.size()) +
                       " real prompts");
  }
  if (real.empty()) throw EmptyDataset("discriminator needs training prompts");
  struct Item {
    std::string text;
    bool real;
  };
  std::vector<Item> items;
  for (const auto& r : real) items.push_back({normalize_candidate(r), true});
  for (const auto& s : synth) items.push_back({s.prompt_text, false});

  std::vector<std::string> groups;
  for (const auto& it : items) groups.push_back(it.text);
  std::sort(groups.begin(), groups.end());
  groups.erase(std::unique(groups.begin(), groups.end()), groups.end());
  RngState split_rng = rng_fork(rng, "holdout");
  rng_shuffle(split_rng, groups);
  const auto n_hold = static_cast<std::size_t>(hyper.holdout_fraction * static_cast<double>(groups.size()));
  const std::set<std::string> held(groups.begin(), groups.begin() + static_cast<long>(n_hold));

  std::vector<PairTokens> train_pairs;
  std::vector<const Item*> holdout;
  for (const auto& it : items) {
    if (held.count(it.text)) {
      holdout.push_back(&it);
    } else {
      train_pairs.push_back(disc_pair(it.text, task_name, it.real ? tok::kYes : tok::kNo));
    }
  }

  DiscriminatorResult res;
  RngState init_rng = rng_fork(rng, "init");
  res.disc = Discriminator{cfg, base, init_adapter(hyper.adapter, cfg, base, init_rng), task_name};
  if (!train_pairs.empty()) {
    ItemLoss loss = [&](const ForwardContext& ctx, std::size_t i, ModelGrads* g, GradMask mask, double w) {
      return completion_nll(ctx, train_pairs[i], g, mask, w);
    };
    TrainResult tr = train_adapter(cfg, base, res.disc.adapter, train_pairs.size(), loss, hyper.train,
                                   rng_fork(rng, "train"));
    res.epoch_losses = std::move(tr.epoch_losses);
  }
  res.holdout_size = holdout.size();
  if (!holdout.empty()) {
    std::vector<std::string> xs;
    for (const Item* it : holdout) xs.push_back(it->text);
    const auto verdicts = classify_all(res.disc, xs);
    std::size_t correct = 0;
    for (std::size_t i = 0; i < holdout.size(); ++i) {
      correct += (verdicts[i].verdict == Verdict::Real) == holdout[i]->real ? 1 : 0;
    }
    res.holdout_accuracy = static_cast<double>(correct) / static_cast<double>(holdout.size());
  }
  return res;
}

// ---------------------------------------------------------------------------
// Curation

struct CurationStats {
  std::size_t generated = 0;       // distinct fresh lines inspected
  std::size_t accepted = 0;
  std::size_t rejected = 0;
  std::size_t parse_failures = 0;  // blank-after-numbering, truncated or over-long lines
  std::size_t duplicates = 0;      // repeats of seeds or earlier lines, not counted as generated
  std::size_t raw_samples = 0;     // generator calls
  double acceptance_rate = 0.0;
};

inline nlohmann::json to_json(const CurationStats& s) {
  return nlohmann::json{{"generated", s.generated},       {"accepted", s.accepted},
                        {"rejected", s.rejected},         {"parse_failures", s.parse_failures},
                        {"duplicates", s.duplicates},     {"raw_samples", s.raw_samples},
                        {"acceptance_rate", s.acceptance_rate}};
}

class BudgetExhausted : public Error {
 public:
  BudgetExhausted(std::vector<Candidate> partial, CurationStats stats)
      : Error("BudgetExhausted", "accepted " + std::to_string(stats.accepted) + " candidates after " +
                                     std::to_string(stats.generated) + " generated"),
        partial_(std::move(partial)),
        stats_(stats) {}

  const std::vector<Candidate>& partial() const noexcept { return partial_; }
  const CurationStats& stats() const noexcept { return stats_; }

 private:
  std::vector<Candidate> partial_;
  CurationStats stats_;
};

struct CurateConfig {
  std::size_t batch_size = 32;
  std::size_t max_attempts = 0;  // 0: 50 * target_count
  std::size_t n_header = 10;
  std::size_t max_chars = 0;     // 0: no limit besides the judge's own
};

// Scores a batch of candidate texts; true = accept.
using JudgeFn = std::function<std::vector<Classification>(const std::vector<std::string>&)>;

inline JudgeFn discriminator_judge(const Discriminator& disc) {
  return [&disc](const std::vector<std::string>& xs) { return classify_all(disc, xs); };
}

struct CurationResult {
  std::vector<Candidate> curated;
  std::vector<Candidate> unfiltered;  // every fresh candidate in generation order
  CurationStats stats;
};

inline CurationResult curate(const GenerateFn& gen, const JudgeFn& judge, const SeedSet& seed,
                             std::size_t target_count, const CurateConfig& cfg, RngState& rng) {
  if (target_count < 1) throw ConfigError("target_count must be >= 1");
  const std::size_t max_attempts = cfg.max_attempts == 0 ? kRawAttemptsPerCandidate * target_count : cfg.max_attempts;
  if (max_attempts < target_count) throw ConfigError("max_attempts must be >= target_count");
  CandidateStream stream(gen, seed, cfg.n_header, cfg.max_chars);
  CurationResult res;
  auto sync = [&] {
    res.stats.parse_failures = stream.parse_failures();
    res.stats.duplicates = stream.duplicates();
    res.stats.raw_samples = stream.raw_samples();
    res.stats.generated = res.stats.accepted + res.stats.rejected + res.stats.parse_failures;
    res.stats.acceptance_rate = res.stats.generated == 0 ? 0.0
                                                         : static_cast<double>(res.stats.accepted) /
                                                               static_cast<double>(res.stats.generated);
  };
  bool dry = false;
  while (res.curated.size() < target_count && !dry) {
    std::vector<Candidate> batch;
    while (batch.size() < cfg.batch_size) {
      sync();
      if (res.stats.generated + batch.size() >= max_attempts) {
        dry = true;
        break;
      }
      auto c = stream.next(rng, max_attempts);
      if (!c) {
        dry = true;
        break;
      }
      batch.push_back(std::move(*c));
    }
    if (batch.empty()) break;
    std::vector<std::string> xs;
    for (const auto& c : batch) xs.push_back(c.prompt_text);
    const auto verdicts = judge(xs);
    // Candidates past the point where the target is met stay uncounted.
    for (std::size_t i = 0; i < batch.size() && res.curated.size() < target_count; ++i) {
      res.unfiltered.push_back(batch[i]);
      if (verdicts[i].verdict == Verdict::Real) {
        res.curated.push_back(batch[i]);
        ++res.stats.accepted;
      } else {
        ++res.stats.rejected;
      }
    }
  }
  sync();
  if (res.curated.size() < target_count) throw BudgetExhausted(res.curated, res.stats);
  return res;
}

inline std::string candidates_to_jsonl(const std::vector<Candidate>& cs) {
  std::string out;
  for (const auto& c : cs) out += nlohmann::json{{"prompt", c.prompt_text}}.dump() + "\n";
  return out;
}

}  // namespace translora
