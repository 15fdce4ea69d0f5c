// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fail.
//
// Bases are pretrained once into TRANSLORA_CACHE_DIR and reused. Reports of
// every run land in TRANSLORA_ACCEPTANCE_DIR for inspection.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "grad_checks.hpp"
#include "translora/harness.hpp"

using namespace translora;
namespace fs = std::filesystem;

#ifndef TRANSLORA_CACHE_DIR
#define TRANSLORA_CACHE_DIR ".tlra-cache"
#endif
#ifndef TRANSLORA_ACCEPTANCE_DIR
#define TRANSLORA_ACCEPTANCE_DIR "acceptance"
#endif

namespace {

constexpr std::uint64_t kSeeds[] = {0, 1, 2};
const std::vector<std::string> kTransferTasks = {"bool-expr", "mod-arith"};
const std::vector<std::string> kAllTasks = {"bool-expr", "mod-arith", "choice-compare"};

struct Check {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, double a) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

ExperimentConfig config_for(const std::string& task, std::uint64_t seed) {
  ExperimentConfig c;
  c.task = task;
  c.seed = seed;
  c.cache_dir = TRANSLORA_CACHE_DIR;
  return c;
}

// Sessions and reports shared across criteria, created on first use.
class Runs {
 public:
  const Bases& bases(const std::string& task) {
    auto it = bases_.find(task);
    if (it == bases_.end()) {
      std::fprintf(stderr, "loading bases for %s\n", task.c_str());
      it = bases_.emplace(task, pretrain_bases(config_for(task, 0), true, log_progress)).first;
    }
    return it->second;
  }

  // bool-expr seed 0 carries teachers of every kind for the cross-kind runs;
  // each teacher draws from its own stream, so the LoRA teacher is unchanged.
  TransferSession& session(const std::string& task, std::uint64_t seed) {
    const auto key = std::make_pair(task, seed);
    auto it = sessions_.find(key);
    if (it == sessions_.end()) {
      std::vector<AdapterKind> kinds{AdapterKind::LoRA};
      if (task == "bool-expr" && seed == 0) kinds = {std::begin(kAllAdapterKinds), std::end(kAllAdapterKinds)};
      const auto t0 = std::chrono::steady_clock::now();
      auto s = std::make_unique<TransferSession>(config_for(task, seed), bases(task), kinds);
      std::fprintf(stderr, "session %s seed %llu ready in %.1fs (discriminator holdout %.3f)\n", task.c_str(),
                   static_cast<unsigned long long>(seed), seconds_since(t0), s->discriminator().holdout_accuracy);
      it = sessions_.emplace(key, std::move(s)).first;
    }
    return *it->second;
  }

  const TransferOutcome& transfer(const std::string& task, std::uint64_t seed) {
    const auto key = std::make_pair(task, seed);
    auto it = transfers_.find(key);
    if (it == transfers_.end()) {
      TransferOutcome o = run_transfer(session(task, seed));
      note(o.report);
      it = transfers_.emplace(key, std::move(o)).first;
    }
    return it->second;
  }

  void note(const RunReport& r) {
    reports_.push_back(r);
    std::fprintf(stderr, "  %s %s seed %llu %s->%s %s: source %.4f target-base %.4f transferred %.4f (%.0fs)\n",
                 r.suite.c_str(), r.task.c_str(), static_cast<unsigned long long>(r.seed), r.source_kind.c_str(),
                 r.target_kind.c_str(), r.arm.c_str(), r.source_lora_acc, r.target_base_acc, r.transferred_acc,
                 r.wall_time_s);
    write_text(fs::path(TRANSLORA_ACCEPTANCE_DIR) / "reports.json", reports_to_json(reports_).dump(2) + "\n");
  }

  const std::vector<RunReport>& reports() const { return reports_; }
  const std::map<std::pair<std::string, std::uint64_t>, std::unique_ptr<TransferSession>>& sessions() const {
    return sessions_;
  }

 private:
  static void log_progress(const std::string& role, std::size_t step, double loss) {
    if (step % 500 == 0) std::fprintf(stderr, "pretrain %s step %zu loss %.4f\n", role.c_str(), step, loss);
  }

  std::map<std::string, Bases> bases_;
  std::map<std::pair<std::string, std::uint64_t>, std::unique_ptr<TransferSession>> sessions_;
  std::map<std::pair<std::string, std::uint64_t>, TransferOutcome> transfers_;
  std::vector<RunReport> reports_;
};

double mean(const std::vector<double>& xs) {
  double s = 0;
  for (double x : xs) s += x;
  return xs.empty() ? 0.0 : s / static_cast<double>(xs.size());
}

// ---------------------------------------------------------------------------

Check gradient_oracle() {
  const auto t0 = std::chrono::steady_clock::now();
  std::vector<fd::Probe> probes = gradcheck::base_probes(101, 20);
  for (AdapterKind kind : kAllAdapterKinds) {
    const auto p = gradcheck::adapter_probes(kind, 102, 20);
    probes.insert(probes.end(), p.begin(), p.end());
  }
  const double secs = seconds_since(t0);
  std::map<std::string, std::size_t> per_family;
  double worst = 0;
  for (const auto& p : probes) {
    ++per_family[p.family.substr(0, p.family.find('@'))];
    worst = std::max(worst, p.rel_error());
  }
  std::size_t fewest = SIZE_MAX;
  for (const auto& [f, n] : per_family) fewest = std::min(fewest, n);
  Check v;
  v.pass = worst < 1e-4 && fewest >= 20 && secs < 30;
  v.detail = std::to_string(per_family.size()) + " families, >= " + std::to_string(fewest) +
             " coordinates each, max rel err " + fmt("%.2e", worst) + ", " + fmt("%.1fs", secs);
  return v;
}

Matrix adapted_logits(const ModelConfig& cfg, const ModelParams& base, const Adapter* ad, const TokenSeq& x) {
  AdaptedModel m(cfg, base, ad);
  return forward_trace(m.context(), x, m.context().prefix_len()).logits;
}

double max_abs_diff(const Matrix& a, const Matrix& b) {
  double mx = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) mx = std::max(mx, std::abs(a.values()[i] - b.values()[i]));
  return mx;
}

Check identity_at_init(Runs& runs) {
  struct Case {
    ModelConfig cfg;
    const ModelParams* params;
  };
  const ModelConfig tiny = gradcheck::tiny_config();
  const ModelParams tiny_params = gradcheck::random_model(tiny, 201);
  const Base& real = runs.bases("bool-expr").target;
  bool lora_ok = true, pt_ok = true;
  double dora_err = 0;
  for (const Case& c : {Case{tiny, &tiny_params}, Case{real.cfg, &real.params}}) {
    RngState rng{202, 0};
    const TokenSeq x = gradcheck::random_tokens(12, rng);
    const Matrix base_logits = forward(*c.params, c.cfg, x);
    AdapterSpec spec;
    spec.kind = AdapterKind::LoRA;
    const Adapter lora = init_adapter(spec, c.cfg, *c.params, rng);
    lora_ok = lora_ok && adapted_logits(c.cfg, *c.params, &lora, x) == base_logits;
    spec.kind = AdapterKind::DoRA;
    const Adapter dora = init_adapter(spec, c.cfg, *c.params, rng);
    dora_err = std::max(dora_err, max_abs_diff(adapted_logits(c.cfg, *c.params, &dora, x), base_logits));
    // An empty prefix is the base model; an initialised prefix equals the
    // base model reading its init text first.
    Adapter empty;
    empty.kind = AdapterKind::PromptTuning;
    pt_ok = pt_ok && adapted_logits(c.cfg, *c.params, &empty, x) == base_logits;
    spec.kind = AdapterKind::PromptTuning;
    spec.init_text = c.cfg.max_len >= 64 ? AdapterSpec{}.init_text : "Q: ";
    const Adapter pt = init_adapter(spec, c.cfg, *c.params, rng);
    TokenSeq with_text = tokenize(spec.init_text);
    const std::size_t k = with_text.size();
    with_text.insert(with_text.end(), x.begin(), x.end());
    const Matrix pre = forward(*c.params, c.cfg, with_text);
    const Matrix got = adapted_logits(c.cfg, *c.params, &pt, x);
    for (std::size_t t = 0; t < x.size(); ++t)
      for (std::size_t v = 0; v < c.cfg.vocab_size; ++v) pt_ok = pt_ok && got(t, v) == pre(t + k, v);
  }
  Check v;
  v.pass = lora_ok && pt_ok && dora_err <= 1e-12;
  v.detail = std::string("LoRA ") + (lora_ok ? "bitwise" : "DIFFERS") + ", PT " + (pt_ok ? "bitwise" : "DIFFERS") +
             ", DoRA max |diff| " + fmt("%.2e", dora_err) + " (tiny random and pretrained target)";
  return v;
}

Check discriminator_separability(Runs& runs) {
  const auto t0 = std::chrono::steady_clock::now();
  const Base& src = runs.bases("bool-expr").source;
  const Task& task = task_by_name("bool-expr");
  const ExperimentConfig c = config_for("bool-expr", 0);
  RngState rng{301, 0};
  const std::size_t n = c.n_train;
  std::vector<std::string> real, other_real;
  std::vector<Candidate> ascii, real_as_synth;
  for (std::size_t i = 0; i < n; ++i) real.push_back(task.sample_prompt(Difficulty::Hard, rng));
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t len = real[rng_below(rng, real.size())].size();
    std::string s;
    for (std::size_t j = 0; j < len; ++j) s += static_cast<char>(0x20 + rng_below(rng, 95));
    s = normalize_candidate(s);
    if (s.empty()) s = "~";
    ascii.push_back(Candidate{s, s});
  }
  for (std::size_t i = 0; i < n; ++i) {
    const std::string p = normalize_candidate(task.sample_prompt(Difficulty::Hard, rng));
    real_as_synth.push_back(Candidate{p, p});
  }
  const auto junk = train_discriminator(src.cfg, src.params, real, ascii, "bool-expr", c.discriminator, {302, 0});
  const auto same =
      train_discriminator(src.cfg, src.params, real, real_as_synth, "bool-expr", c.discriminator, {303, 0});
  const double secs = seconds_since(t0);
  Check v;
  v.pass = junk.holdout_accuracy >= 0.95 && std::abs(same.holdout_accuracy - 0.5) <= 0.1 && secs < 120;
  v.detail = "real vs random ASCII " + fmt("%.3f", junk.holdout_accuracy) + " (n=" +
             std::to_string(junk.holdout_size) + "), real vs real " + fmt("%.3f", same.holdout_accuracy) +
             " (n=" + std::to_string(same.holdout_size) + "), " + fmt("%.1fs", secs);
  return v;
}

Check curation_contract(Runs& runs) {
  TransferSession& s = runs.session("bool-expr", 0);
  const std::size_t target = s.config().synth_target();
  const CurationResult& cur = s.curation(s.bases().target, target);
  std::set<std::string> seeds, seen;
  for (const auto& x : s.seed_set().samples) seeds.insert(normalize_candidate(x.prompt));
  bool unique = true, fresh = true;
  std::vector<std::string> texts;
  for (const auto& x : cur.curated) {
    unique = unique && seen.insert(x.prompt_text).second;
    fresh = fresh && !seeds.count(x.prompt_text);
    texts.push_back(x.prompt_text);
  }
  std::size_t accepted = 0;
  for (const auto& cl : classify_all(s.discriminator().disc, texts)) accepted += cl.verdict == Verdict::Real;
  const CurationStats& st = cur.stats;
  const bool ok_success = cur.curated.size() == target && unique && fresh && accepted == texts.size() &&
                          st.accepted == target && st.generated == st.accepted + st.rejected + st.parse_failures;

  // A judge that rejects everything must run out of budget with consistent stats.
  ForwardContext ctx(s.bases().target.cfg, s.bases().target.params);
  JudgeFn reject_all = [](const std::vector<std::string>& xs) {
    return std::vector<Classification>(xs.size(), classify_margin(-1.0));
  };
  CurateConfig cc = s.config().curation;
  cc.max_attempts = 40;
  RngState rng{401, 0};
  bool ok_budget = false;
  std::string budget_detail = "no BudgetExhausted";
  try {
    curate(model_generator(ctx, s.config().generator_temperature, s.config().generator_max_new), reject_all,
           s.seed_set(), 10, cc, rng);
  } catch (const BudgetExhausted& e) {
    const CurationStats& b = e.stats();
    ok_budget = e.partial().empty() && b.accepted == 0 &&
                b.generated == b.accepted + b.rejected + b.parse_failures && b.generated <= cc.max_attempts;
    budget_detail = "exhausted after " + std::to_string(b.generated) + " = " + std::to_string(b.accepted) + "+" +
                    std::to_string(b.rejected) + "+" + std::to_string(b.parse_failures);
  }
  Check v;
  v.pass = ok_success && ok_budget;
  v.detail = std::to_string(cur.curated.size()) + "/" + std::to_string(target) + " curated, unique " +
             (unique ? "yes" : "NO") + ", non-seed " + (fresh ? "yes" : "NO") + ", re-judged accepted " +
             std::to_string(accepted) + ", generated " + std::to_string(st.generated) + " = " +
             std::to_string(st.accepted) + "+" + std::to_string(st.rejected) + "+" +
             std::to_string(st.parse_failures) + "; reject-all judge " + budget_detail;
  return v;
}

Check lossless_transfer(Runs& runs) {
  Check v{true, ""};
  for (const auto& task : kTransferTasks) {
    std::vector<double> got, base, src;
    double slowest = 0;
    for (std::uint64_t seed : kSeeds) {
      const RunReport& r = runs.transfer(task, seed).report;
      got.push_back(r.transferred_acc);
      base.push_back(r.target_base_acc);
      src.push_back(r.source_lora_acc);
      slowest = std::max(slowest, r.wall_time_s);
    }
    const double bar = std::max(mean(base), mean(src)) - 0.02;
    const bool ok = mean(got) >= bar && slowest <= 600;
    v.pass = v.pass && ok;
    v.detail += (v.detail.empty() ? "" : "; ") + task + " transferred " + fmt("%.4f", mean(got)) + " vs bar " +
                fmt("%.4f", bar) + " (source " + fmt("%.4f", mean(src)) + ", target-base " +
                fmt("%.4f", mean(base)) + "), slowest " + fmt("%.0fs", slowest);
  }
  return v;
}

Check ablation_ordering(Runs& runs) {
  std::map<std::string, std::vector<double>> acc;
  for (std::uint64_t seed : kSeeds) {
    runs.transfer("bool-expr", seed);
    for (const RunReport& r : run_ablation_suite(runs.session("bool-expr", seed))) {
      runs.note(r);
      acc[r.arm].push_back(r.transferred_acc);
    }
  }
  const double cur = mean(acc["curated"]), unf = mean(acc["unfiltered"]), rnd = mean(acc["random-text"]);
  Check v;
  v.pass = cur >= unf && unf >= rnd && cur - rnd >= 0.01;
  v.detail = "bool-expr curated " + fmt("%.4f", cur) + ", unfiltered " + fmt("%.4f", unf) + ", random-text " +
             fmt("%.4f", rnd) + ", seed-only " + fmt("%.4f", mean(acc["seed-only"]));
  return v;
}

Check mmd_direction(Runs& runs) {
  std::size_t wins = 0;
  std::string detail;
  for (const auto& task : kAllTasks) {
    std::vector<double> f, u;
    for (std::uint64_t seed : kSeeds) {
      MmdSummary m;
      if (task == "choice-compare") {
        TransferSession& s = runs.session(task, seed);
        m = s.mmd(s.bases().target, s.config().synth_target());
      } else {
        m = *runs.transfer(task, seed).report.mmd;
      }
      f.push_back(m.filtered);
      u.push_back(m.unfiltered);
    }
    wins += mean(f) < mean(u);
    detail += task + " " + fmt("%.4f", mean(f)) + (mean(f) < mean(u) ? " < " : " >= ") + fmt("%.4f", mean(u)) + "; ";
  }
  // The estimator itself against a direct double loop.
  RngState rng{701, 0};
  std::vector<Embedding> x(50, Embedding(6)), y(40, Embedding(6));
  for (auto& e : x)
    for (double& d : e) d = rng_normal(rng);
  for (auto& e : y)
    for (double& d : e) d = 0.5 + rng_normal(rng);
  const MmdResult r = mmd2_unbiased(x, y);
  const double s2 = 2 * r.bandwidth * r.bandwidth;
  double xx = 0, yy = 0, xy = 0;
  for (std::size_t i = 0; i < x.size(); ++i)
    for (std::size_t j = 0; j < x.size(); ++j)
      if (i != j) xx += std::exp(-squared_distance(x[i], x[j]) / s2);
  for (std::size_t i = 0; i < y.size(); ++i)
    for (std::size_t j = 0; j < y.size(); ++j)
      if (i != j) yy += std::exp(-squared_distance(y[i], y[j]) / s2);
  for (const auto& a : x)
    for (const auto& b : y) xy += std::exp(-squared_distance(a, b) / s2);
  const double brute = xx / (50.0 * 49) + yy / (40.0 * 39) - 2 * xy / (50.0 * 40);
  const double err = std::abs(brute - r.mmd2);
  Check v;
  v.pass = wins >= 2 && err <= 1e-12;
  v.detail = detail + "filtered closer on " + std::to_string(wins) + "/3; brute-force |diff| " + fmt("%.1e", err);
  return v;
}

Check scaling(Runs& runs) {
  std::vector<double> one, four;
  std::size_t steps1 = 0, steps4 = 0;
  bool equal_steps = true;
  for (std::uint64_t seed : kSeeds) {
    runs.transfer("bool-expr", seed);
    TransferSession& s = runs.session("bool-expr", seed);
    const ExperimentConfig& c = s.config();
    const std::size_t steps = s.steps_for_corpus(c.n_train);
    for (std::size_t m : {std::size_t{1}, std::size_t{4}}) {
      const RunReport r =
          run_arm(s, c.source_kind, c.target_kind, CorpusKind::Curated, m * c.n_train, steps, "scaling").report;
      runs.note(r);
      (m == 1 ? one : four).push_back(r.transferred_acc);
      (m == 1 ? steps1 : steps4) = r.distill_steps;
    }
    equal_steps = equal_steps && steps1 == steps4;
  }
  Check v;
  v.pass = equal_steps && mean(four) >= mean(one) - 0.01;
  v.detail = "bool-expr 1x " + fmt("%.4f", mean(one)) + ", 4x " + fmt("%.4f", mean(four)) + " (3-seed means), " +
             std::to_string(steps1) + (equal_steps ? " steps each" : " vs " + std::to_string(steps4) + " steps");
  return v;
}

Check cross_peft(Runs& runs) {
  TransferSession& s = runs.session("bool-expr", 0);
  std::size_t ran = 0;
  double to_pt = -1, to_dora = -1, base = 0;
  std::string detail;
  for (AdapterKind a : kAllAdapterKinds) {
    for (AdapterKind b : kAllAdapterKinds) {
      const RunReport r = run_cross_peft(s, a, b);
      runs.note(r);
      ran += r.completed;
      base = r.target_base_acc;
      if (a == AdapterKind::LoRA && b == AdapterKind::PromptTuning) to_pt = r.transferred_acc;
      if (a == AdapterKind::LoRA && b == AdapterKind::DoRA) to_dora = r.transferred_acc;
      detail += to_string(a) + "->" + to_string(b) + " " + fmt("%.3f", r.transferred_acc) + " ";
    }
  }
  Check v;
  v.pass = ran == 9 && to_pt > base - 0.02 && to_dora > base - 0.02;
  v.detail = std::to_string(ran) + "/9 pairs ran, target-base " + fmt("%.3f", base) + ": " + detail;
  return v;
}

Check continuous(Runs& runs) {
  TransferSession& s = runs.session("bool-expr", 0);
  const std::string disc = s.discriminator_digest();
  const auto [hop1, hop2] = run_continuous(s);
  runs.note(hop1);
  runs.note(hop2);
  Check v;
  v.pass = hop2.transferred_acc >= hop2.target_base_acc - 0.02 && s.discriminator_digest() == disc &&
           hop1.discriminator_digest == hop2.discriminator_digest;
  v.detail = "source " + fmt("%.4f", hop1.source_lora_acc) + " -> intermediate " + fmt("%.4f", hop1.transferred_acc) +
             " (base " + fmt("%.4f", hop1.target_base_acc) + ") -> target " + fmt("%.4f", hop2.transferred_acc) +
             " (base " + fmt("%.4f", hop2.target_base_acc) + "), one discriminator " +
             hop2.discriminator_digest.substr(0, 8);
  return v;
}

Check audit(Runs& runs) {
  std::size_t reads = 0, armed = 0;
  for (const auto& [key, s] : runs.sessions()) {
    reads += s->train_reads_after_discriminator();
    armed += s->dataset().audit().armed();
  }
  std::size_t reported = 0;
  for (const auto& r : runs.reports()) reported += r.train_reads_after_discriminator;
  Check v;
  v.pass = !runs.sessions().empty() && armed == runs.sessions().size() && reads == 0 && reported == 0;
  v.detail = std::to_string(runs.sessions().size()) + " sessions armed " + std::to_string(armed) + ", " +
             std::to_string(runs.reports().size()) + " reports, train reads after discriminator " +
             std::to_string(reads + reported);
  return v;
}

std::map<std::string, std::string> read_dir(const fs::path& dir) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::directory_iterator(dir)) {
    std::ifstream in(e.path(), std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    out[e.path().filename().string()] = ss.str();
  }
  return out;
}

Check determinism(Runs& runs) {
  const TransferOutcome& first = runs.transfer("bool-expr", 0);
  const TransferOutcome again = run_transfer(config_for("bool-expr", 0), runs.bases("bool-expr"));
  const fs::path a = fs::path(TRANSLORA_ACCEPTANCE_DIR) / "determinism-a";
  const fs::path b = fs::path(TRANSLORA_ACCEPTANCE_DIR) / "determinism-b";
  fs::remove_all(a);
  fs::remove_all(b);
  write_run(a, first);
  write_run(b, again);
  auto fa = read_dir(a), fb = read_dir(b);
  std::size_t ckpts = 0, equal_ckpts = 0;
  for (const auto& [name, bytes] : fa) {
    if (name.size() > 5 && name.substr(name.size() - 5) == ".ckpt") {
      ++ckpts;
      equal_ckpts += fb.count(name) && fb[name] == bytes;
    }
  }
  const bool same_report = report_fingerprint(first.report) == report_fingerprint(again.report) &&
                           report_fingerprint(report_from_json(json::parse(fa["report.json"]))) ==
                               report_fingerprint(report_from_json(json::parse(fb["report.json"])));
  const bool same_corpus = fa["curated.jsonl"] == fb["curated.jsonl"];
  Check v;
  v.pass = same_report && same_corpus && ckpts > 0 && equal_ckpts == ckpts;
  v.detail = std::string("report.json ") + (same_report ? "identical" : "DIFFERS") + " minus wall time, " +
             std::to_string(equal_ckpts) + "/" + std::to_string(ckpts) + " checkpoints byte-identical, curated.jsonl " +
             (same_corpus ? "identical" : "DIFFERS");
  return v;
}

}  // namespace

int main() {
  Runs runs;
  struct Criterion {
    int id;
    const char* name;
    std::function<Check()> run;
  };
  const std::vector<Criterion> criteria = {
      {1, "gradient oracle", [] { return gradient_oracle(); }},
      {2, "identity at init", [&] { return identity_at_init(runs); }},
      {3, "discriminator separability", [&] { return discriminator_separability(runs); }},
      {4, "curation contract", [&] { return curation_contract(runs); }},
      {5, "lossless transfer", [&] { return lossless_transfer(runs); }},
      {6, "ablation ordering", [&] { return ablation_ordering(runs); }},
      {7, "MMD direction", [&] { return mmd_direction(runs); }},
      {8, "scaling non-degradation", [&] { return scaling(runs); }},
      {9, "cross-kind transfer", [&] { return cross_peft(runs); }},
      {10, "continuous transfer", [&] { return continuous(runs); }},
      {11, "data-free audit", [&] { return audit(runs); }},
      {12, "determinism", [&] { return determinism(runs); }},
  };
  std::vector<std::string> lines;
  int failed = 0;
  for (const auto& c : criteria) {
    const auto t0 = std::chrono::steady_clock::now();
    Check v;
    try {
      v = c.run();
    } catch (const std::exception& e) {
      v = Check{false, std::string("error: ") + e.what()};
    }
    char head[96];
    std::snprintf(head, sizeof head, "%s %2d %-26s", v.pass ? "PASS" : "FAIL", c.id, c.name);
    lines.push_back(std::string(head) + " | " + v.detail + fmt(" [%.0fs]", seconds_since(t0)));
    std::printf("%s\n", lines.back().c_str());
    std::fflush(stdout);
    failed += !v.pass;
  }
  std::string summary;
  for (const auto& l : lines) summary += l + "\n";
  write_text(fs::path(TRANSLORA_ACCEPTANCE_DIR) / "summary.txt", summary);
  std::printf("%d of %zu criteria passed\n", static_cast<int>(criteria.size()) - failed, criteria.size());
  return failed == 0 ? 0 : 1;
}
