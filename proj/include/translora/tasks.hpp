#pragma once

// Programmatic tasks with exact oracles, datasets with split metadata, seed
// sets and exact-match evaluation.

#include <algorithm>
#include <cctype>
#include <functional>
#include <map>
#include <memory>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "translora/model.hpp"

namespace translora {

enum class Difficulty { Easy, Hard };

inline std::string to_string(Difficulty d) { return d == Difficulty::Easy ? "easy" : "hard"; }

inline Difficulty difficulty_from_string(const std::string& s) {
  if (s == "easy") return Difficulty::Easy;
  if (s == "hard") return Difficulty::Hard;
  throw ConfigError("unknown difficulty '" + s + "'");
}

struct Sample {
  std::string prompt;
  std::string completion;

  friend bool operator==(const Sample&, const Sample&) = default;
};

inline std::vector<std::string> split_words(std::string_view s) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (c == ' ' || c == '\n' || c == '\t') {
      if (!cur.empty()) out.push_back(std::move(cur));
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

inline std::string trim(std::string_view s) {
  std::size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return std::string(s.substr(b, e - b));
}

// ---------------------------------------------------------------------------
// Boolean expressions: literals True/False, not > and > or, parentheses.

namespace detail {

class BoolParser {
 public:
  explicit BoolParser(std::vector<std::string> words) : w_(std::move(words)) {}

  bool parse(int& depth) {
    if (w_.empty()) throw ParseError("empty expression");
    const auto [value, d] = parse_or();
    if (pos_ != w_.size()) throw ParseError("unexpected '" + w_[pos_] + "'");
    depth = d;
    return value;
  }

 private:
  using Node = std::pair<bool, int>;

  const std::string* peek() const { return pos_ < w_.size() ? &w_[pos_] : nullptr; }

  Node parse_or() {
    Node lhs = parse_and();
    while (peek() && *peek() == "or") {
      ++pos_;
      const Node rhs = parse_and();
      lhs = {lhs.first || rhs.first, std::max(lhs.second, rhs.second) + 1};
    }
    return lhs;
  }

  Node parse_and() {
    Node lhs = parse_not();
    while (peek() && *peek() == "and") {
      ++pos_;
      const Node rhs = parse_not();
      lhs = {lhs.first && rhs.first, std::max(lhs.second, rhs.second) + 1};
    }
    return lhs;
  }

  Node parse_not() {
    if (peek() && *peek() == "not") {
      ++pos_;
      const Node inner = parse_not();
      return {!inner.first, inner.second + 1};
    }
    return parse_atom();
  }

  Node parse_atom() {
    const std::string* t = peek();
    if (!t) throw ParseError("unexpected end of expression");
    if (*t == "True" || *t == "False") {
      ++pos_;
      return {*t == "True", 0};
    }
    if (*t == "(") {
      ++pos_;
      const Node inner = parse_or();
      if (!peek() || *peek() != ")") throw ParseError("missing ')'");
      ++pos_;
      return inner;
    }
    throw ParseError("unexpected '" + *t + "'");
  }

  std::vector<std::string> w_;
  std::size_t pos_ = 0;
};

inline std::vector<std::string> bool_words(std::string_view expr) {
  auto words = split_words(expr);
  if (!words.empty() && words.back() == "is") words.pop_back();
  return words;
}

}  // namespace detail

// Evaluates a boolean expression; a trailing "is" is ignored.
inline bool bool_eval(std::string_view expr) {
  int depth = 0;
  return detail::BoolParser(detail::bool_words(expr)).parse(depth);
}

inline int bool_depth(std::string_view expr) {
  int depth = 0;
  detail::BoolParser(detail::bool_words(expr)).parse(depth);
  return depth;
}

inline bool bool_parses(std::string_view expr) {
  try {
    bool_eval(expr);
    return true;
  } catch (const ParseError&) {
    return false;
  }
}

// ---------------------------------------------------------------------------
// Tasks

class Task {
 public:
  virtual ~Task() = default;
  virtual std::string name() const = 0;
  // Draws one prompt from the task's input distribution at this difficulty.
  virtual std::string sample_prompt(Difficulty difficulty, RngState& rng) const = 0;
  // Exact answer; throws ParseError for prompts outside the grammar.
  virtual std::string oracle(std::string_view prompt) const = 0;
  // Structural complexity of a prompt (expression depth / operand digits).
  virtual double complexity(std::string_view prompt) const = 0;

  bool parses(std::string_view prompt) const {
    try {
      oracle(prompt);
      return true;
    } catch (const ParseError&) {
      return false;
    }
  }

  Sample sample(Difficulty difficulty, RngState& rng) const {
    std::string p = sample_prompt(difficulty, rng);
    std::string c = oracle(p);
    return Sample{std::move(p), std::move(c)};
  }
};

class BoolExprTask final : public Task {
 public:
  std::string name() const override { return "bool-expr"; }

  std::string sample_prompt(Difficulty difficulty, RngState& rng) const override {
    const int max_depth = difficulty == Difficulty::Easy ? 2 : 4;
    const int min_depth = difficulty == Difficulty::Easy ? 1 : 2;
    const std::size_t max_chars = difficulty == Difficulty::Easy ? 30 : 44;
    // Labels are balanced: pick the answer first, then rejection-sample.
    const bool want = rng_next_uniform(rng) < 0.5;
    for (;;) {
      std::string e = render(max_depth, rng, true);
      std::string prompt = e + " is";
      if (prompt.size() > max_chars) continue;
      const int d = bool_depth(prompt);
      if (d < min_depth || d > max_depth) continue;
      if (bool_eval(prompt) != want) continue;
      return prompt;
    }
  }

  std::string oracle(std::string_view prompt) const override {
    return bool_eval(prompt) ? "True" : "False";
  }

  double complexity(std::string_view prompt) const override { return bool_depth(prompt); }

 private:
  static std::string literal(RngState& rng) {
    std::string lit = rng_next_uniform(rng) < 0.5 ? "True" : "False";
    const double u = rng_next_uniform(rng);
    if (u < 0.1) return "not not " + lit;
    if (u < 0.35) return "not " + lit;
    return lit;
  }

  // Random expression tree of depth <= budget rendered with spaces around
  // every token. Nested binary sub-expressions are parenthesized.
  static std::string render(int budget, RngState& rng, bool top) {
    if (budget <= 0 || (!top && rng_next_uniform(rng) < 0.3)) return literal(rng);
    const double u = rng_next_uniform(rng);
    if (u < 0.15 && budget >= 2) return "not ( " + render(budget - 1, rng, false) + " )";
    const std::string op = rng_next_uniform(rng) < 0.5 ? "and" : "or";
    auto child = [&](int b) {
      std::string c = render(b, rng, false);
      const bool compound = c.find(" and ") != std::string::npos || c.find(" or ") != std::string::npos;
      if (compound && c.rfind("not (", 0) != 0 && rng_next_uniform(rng) < 0.6) return "( " + c + " )";
      return c;
    };
    std::string lhs = child(budget - 1);
    std::string rhs = child(budget - 1 - static_cast<int>(rng_below(rng, 2)));
    return lhs + " " + op + " " + rhs;
  }
};

class ModArithTask final : public Task {
 public:
  std::string name() const override { return "mod-arith"; }

  std::string sample_prompt(Difficulty difficulty, RngState& rng) const override {
    static constexpr int kMods[] = {2, 5, 10};
    const int lo = difficulty == Difficulty::Easy ? 0 : 10;
    const int hi = difficulty == Difficulty::Easy ? 9 : 99;
    const int a = lo + static_cast<int>(rng_below(rng, static_cast<std::size_t>(hi - lo + 1)));
    const int b = lo + static_cast<int>(rng_below(rng, static_cast<std::size_t>(hi - lo + 1)));
    const int m = kMods[rng_below(rng, 3)];
    return "( " + std::to_string(a) + " + " + std::to_string(b) + " ) mod " + std::to_string(m) + " =";
  }

  std::string oracle(std::string_view prompt) const override {
    const auto [a, b, m] = parse(prompt);
    return std::to_string((a + b) % m);
  }

  double complexity(std::string_view prompt) const override {
    const auto [a, b, m] = parse(prompt);
    (void)m;
    return static_cast<double>(std::to_string(a).size() + std::to_string(b).size());
  }

 private:
  static long parse_number(const std::string& w) {
    if (w.empty() || w.size() > 6) throw ParseError("bad number '" + w + "'");
    for (char c : w)
      if (!std::isdigit(static_cast<unsigned char>(c))) throw ParseError("bad number '" + w + "'");
    return std::stol(w);
  }

  static std::tuple<long, long, long> parse(std::string_view prompt) {
    const auto w = split_words(prompt);
    if (w.size() != 8 || w[0] != "(" || w[2] != "+" || w[4] != ")" || w[5] != "mod" || w[7] != "=") {
      throw ParseError("not a mod-arith prompt");
    }
    const long m = parse_number(w[6]);
    if (m < 1) throw ParseError("modulus must be >= 1");
    return {parse_number(w[1]), parse_number(w[3]), m};
  }
};

class ChoiceCompareTask final : public Task {
 public:
  std::string name() const override { return "choice-compare"; }

  std::string sample_prompt(Difficulty difficulty, RngState& rng) const override {
    const int lo = difficulty == Difficulty::Easy ? 0 : 10;
    const int hi = difficulty == Difficulty::Easy ? 9 : 99;
    const auto span = static_cast<std::size_t>(hi - lo + 1);
    int a = 0, b = 0;
    do {
      a = lo + static_cast<int>(rng_below(rng, span));
      b = lo + static_cast<int>(rng_below(rng, span));
    } while (a == b);
    return "Which is larger: (A) " + std::to_string(a) + " (B) " + std::to_string(b) + " ?";
  }

  std::string oracle(std::string_view prompt) const override {
    const auto [a, b] = parse(prompt);
    return a > b ? "(A)" : "(B)";
  }

  double complexity(std::string_view prompt) const override {
    const auto [a, b] = parse(prompt);
    return static_cast<double>(std::to_string(a).size() + std::to_string(b).size());
  }

 private:
  static std::pair<long, long> parse(std::string_view prompt) {
    const auto w = split_words(prompt);
    if (w.size() != 8 || w[0] != "Which" || w[1] != "is" || w[2] != "larger:" || w[3] != "(A)" ||
        w[5] != "(B)" || w[7] != "?") {
      throw ParseError("not a choice-compare prompt");
    }
    auto num = [](const std::string& s) {
      if (s.empty() || s.size() > 6) throw ParseError("bad number");
      for (char c : s)
        if (!std::isdigit(static_cast<unsigned char>(c))) throw ParseError("bad number");
      return std::stol(s);
    };
    const long a = num(w[4]), b = num(w[6]);
    if (a == b) throw ParseError("choices must differ");
    return {a, b};
  }
};

inline const std::vector<std::shared_ptr<const Task>>& builtin_tasks() {
  static const std::vector<std::shared_ptr<const Task>> tasks{
      std::make_shared<BoolExprTask>(), std::make_shared<ModArithTask>(),
      std::make_shared<ChoiceCompareTask>()};
  return tasks;
}

inline const Task& task_by_name(std::string_view name) {
  for (const auto& t : builtin_tasks()) {
    if (t->name() == name) return *t;
  }
  throw ConfigError("unknown task '" + std::string(name) + "'");
}

// ---------------------------------------------------------------------------
// Datasets

// Counts reads of the training split while armed. In strict mode a read while
// armed throws DataAccessViolation.
class AccessAudit {
 public:
  void arm(bool strict = true) {
    armed_ = true;
    strict_ = strict;
  }
  void disarm() { armed_ = false; }
  bool armed() const noexcept { return armed_; }
  std::size_t violations() const noexcept { return violations_; }
  std::size_t total_reads() const noexcept { return total_reads_; }

  void note_train_read() const {
    ++total_reads_;
    if (!armed_) return;
    ++violations_;
    if (strict_) throw DataAccessViolation("training split read after discriminator training");
  }

 private:
  bool armed_ = false;
  bool strict_ = true;
  mutable std::size_t violations_ = 0;
  mutable std::size_t total_reads_ = 0;
};

class Dataset {
 public:
  Dataset() : audit_(std::make_shared<AccessAudit>()) {}
  Dataset(std::string task_name, std::vector<Sample> train, std::vector<Sample> val,
          std::vector<Sample> test)
      : task_name_(std::move(task_name)),
        train_(std::move(train)),
        val_(std::move(val)),
        test_(std::move(test)),
        audit_(std::make_shared<AccessAudit>()) {}

  const std::string& task_name() const noexcept { return task_name_; }
  const std::vector<Sample>& train() const {
    audit_->note_train_read();
    return train_;
  }
  const std::vector<Sample>& val() const noexcept { return val_; }
  const std::vector<Sample>& test() const noexcept { return test_; }
  std::size_t train_size() const noexcept { return train_.size(); }

  AccessAudit& audit() noexcept { return *audit_; }
  const AccessAudit& audit() const noexcept { return *audit_; }

 private:
  std::string task_name_;
  std::vector<Sample> train_, val_, test_;
  std::shared_ptr<AccessAudit> audit_;
};

inline Dataset make_dataset(const Task& task, std::size_t n_train, std::size_t n_val,
                            std::size_t n_test, Difficulty difficulty, RngState& rng) {
  if (n_train < 1 || n_val < 1 || n_test < 1) throw ConfigError("split sizes must be >= 1");
  std::set<std::string> seen;
  auto draw = [&](std::size_t n) {
    std::vector<Sample> out;
    std::size_t misses = 0;
    while (out.size() < n) {
      Sample s = task.sample(difficulty, rng);
      if (!seen.insert(s.prompt).second) {
        if (++misses > 20000) {
          throw ExhaustedSpace("could not find " + std::to_string(n) + " unique " + task.name() +
                               " prompts");
        }
        continue;
      }
      misses = 0;
      if (task.oracle(s.prompt) != s.completion) throw ParseError("sampler/oracle disagreement");
      out.push_back(std::move(s));
    }
    return out;
  };
  auto train = draw(n_train);
  auto val = draw(n_val);
  auto test = draw(n_test);
  return Dataset(task.name(), std::move(train), std::move(val), std::move(test));
}

struct SeedSet {
  std::vector<Sample> samples;
};

inline SeedSet sample_seed(const Dataset& dataset, std::size_t k, RngState& rng) {
  const auto& train = dataset.train();
  if (k < 1 || k > train.size()) {
    throw KTooLarge("seed size " + std::to_string(k) + " with " + std::to_string(train.size()) +
                    " training samples");
  }
  std::vector<std::size_t> idx(train.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  // partial Fisher-Yates
  for (std::size_t i = 0; i < k; ++i) {
    const std::size_t j = i + rng_below(rng, idx.size() - i);
    std::swap(idx[i], idx[j]);
  }
  SeedSet seed;
  for (std::size_t i = 0; i < k; ++i) seed.samples.push_back(train[idx[i]]);
  return seed;
}

// ---------------------------------------------------------------------------
// Encoding of (prompt, completion) pairs for the language model:
//   [BOS] prompt " " | completion [EOS]

inline TokenSeq encode_prompt(std::string_view prompt) {
  TokenSeq ids{tok::kBos};
  const TokenSeq body = tokenize(prompt);
  ids.insert(ids.end(), body.begin(), body.end());
  ids.push_back(tokenize(" ")[0]);
  return ids;
}

inline TokenSeq encode_completion(std::string_view completion) {
  TokenSeq ids = tokenize(completion);
  ids.push_back(tok::kEos);
  return ids;
}

inline PairTokens encode_sample(const Sample& s) {
  return PairTokens{encode_prompt(s.prompt), encode_completion(s.completion)};
}

// ---------------------------------------------------------------------------
// Evaluation

using Predictor = std::function<std::string(const std::string& prompt)>;

inline constexpr std::size_t kAnswerMaxTokens = 8;

// Greedy decode of the answer to a prompt, truncated at EOS.
inline std::string greedy_answer(const ForwardContext& ctx, const std::string& prompt,
                                 std::size_t max_new = kAnswerMaxTokens) {
  const TokenSeq p = encode_prompt(prompt);
  const std::size_t room = ctx.config().max_len - std::min(ctx.config().max_len, ctx.prefix_len() + p.size());
  if (room == 0) throw PromptTooLong("prompt leaves no room for an answer");
  RngState unused{};
  const TokenSeq out = generate(ctx, p, std::min(max_new, room), 0.0, unused);
  return detokenize(TokenSeq(out.begin() + static_cast<long>(p.size()), out.end()));
}

inline Predictor model_predictor(const ForwardContext& ctx) {
  return [&ctx](const std::string& prompt) { return greedy_answer(ctx, prompt); };
}

inline double eval_accuracy(const Predictor& predict, const std::vector<Sample>& split) {
  if (split.empty()) throw EmptySplit("cannot evaluate an empty split");
  std::size_t correct = 0;
  for (const auto& s : split) {
    if (trim(predict(s.prompt)) == trim(s.completion)) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(split.size());
}

inline double eval_accuracy(const ForwardContext& ctx, const std::vector<Sample>& split) {
  return eval_accuracy(model_predictor(ctx), split);
}

// ---------------------------------------------------------------------------
// JSON Lines

inline std::string samples_to_jsonl(const std::vector<Sample>& samples) {
  std::string out;
  for (const auto& s : samples) {
    out += nlohmann::json{{"prompt", s.prompt}, {"completion", s.completion}}.dump();
    out += '\n';
  }
  return out;
}

inline std::vector<Sample> samples_from_jsonl(const std::string& text) {
  std::vector<Sample> out;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (trim(line).empty()) continue;
    const auto j = nlohmann::json::parse(line);
    out.push_back(Sample{j.at("prompt").get<std::string>(), j.value("completion", std::string{})});
  }
  return out;
}

}  // namespace translora
