#pragma once

// Shared fixtures for gradient checks: a tiny model, random inputs, and
// probe sets comparing analytic gradients against central differences.

#include <string>
#include <vector>

#include "fd_oracle.hpp"
#include "translora/adapters.hpp"
#include "translora/distill.hpp"
#include "translora/model.hpp"

namespace gradcheck {

using namespace translora;

inline ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.d_model = 8;
  cfg.d_ff = 12;
  cfg.n_layers = 2;
  cfg.max_len = 24;
  return cfg;
}

// Random model with gains away from 1 so gain gradients are exercised.
inline ModelParams random_model(const ModelConfig& cfg, std::uint64_t seed) {
  RngState rng{seed, 0};
  ModelParams p = ModelParams::init(cfg, rng);
  p.visit([&rng](const std::string& name, Matrix& m) {
    if (name.find('g') != std::string::npos && m.rows() == 1) {
      for (double& x : m.values()) x = 1.0 + rng_normal(rng, 0.0, 0.3);
    }
  });
  for (double& x : p.out_proj.values()) x = rng_normal(rng, 0.0, 0.5);
  return p;
}

inline TokenSeq random_tokens(std::size_t n, RngState& rng) {
  TokenSeq t(n);
  for (auto& x : t) x = static_cast<TokenId>(rng_below(rng, 95));
  return t;
}

// Every base family, `per_family` coordinates each.
inline std::vector<fd::Probe> base_probes(std::uint64_t seed, std::size_t per_family = 20) {
  const ModelConfig cfg = tiny_config();
  ModelParams p = random_model(cfg, seed);
  RngState rng{seed + 1, 0};
  const PairTokens pair{random_tokens(5, rng), random_tokens(6, rng)};
  ModelGrads g(cfg, 0);
  {
    ForwardContext ctx(cfg, p);
    completion_nll(ctx, pair, &g, kGradBase);
  }
  auto loss = [&]() {
    ForwardContext ctx(cfg, p);
    return completion_nll(ctx, pair);
  };
  std::vector<std::size_t> used_rows;
  for (TokenId t : joined(pair)) used_rows.push_back(static_cast<std::size_t>(t));
  used_rows.pop_back();
  std::vector<std::size_t> used_pos;
  for (std::size_t i = 0; i + 1 < pair.prompt.size() + pair.completion.size(); ++i) used_pos.push_back(i);

  std::vector<fd::Probe> probes;
  std::vector<Matrix*> params_list, grads_list;
  std::vector<std::string> names;
  p.visit([&](const std::string& n, Matrix& m) {
    names.push_back(n);
    params_list.push_back(&m);
  });
  g.params.visit([&](const std::string&, Matrix& m) { grads_list.push_back(&m); });
  for (std::size_t i = 0; i < names.size(); ++i) {
    std::vector<std::size_t> cand;
    if (names[i] == "tok_emb") {
      cand = fd::row_indices(*params_list[i], used_rows);
    } else if (names[i] == "pos_emb") {
      cand = fd::row_indices(*params_list[i], used_pos);
    } else {
      cand = fd::all_indices(*params_list[i]);
    }
    auto got = fd::probe(names[i], *params_list[i], *grads_list[i], cand, per_family, rng, loss);
    probes.insert(probes.end(), got.begin(), got.end());
  }
  return probes;
}

// Adapter with every factor away from zero.
inline Adapter random_adapter(AdapterKind kind, const ModelConfig& cfg, const ModelParams& base, RngState& rng) {
  AdapterSpec spec;
  spec.kind = kind;
  spec.rank = 2;
  spec.alpha = 4.0;
  spec.init_text = "Go:";
  Adapter ad = init_adapter(spec, cfg, base, rng);
  ad.visit([&rng](const std::string&, Matrix& m) {
    for (double& x : m.values()) x += rng_normal(rng, 0.0, 0.3);
  });
  return ad;
}

// Splits a flat adapter gradient into per-tensor matrices in visit order.
inline std::vector<Matrix> unflatten_like(const Adapter& ad, const std::vector<double>& flat) {
  std::vector<Matrix> out;
  std::size_t off = 0;
  ad.visit([&](const std::string&, const Matrix& m) {
    Matrix g(m.rows(), m.cols());
    std::copy(flat.begin() + static_cast<long>(off), flat.begin() + static_cast<long>(off + m.size()),
              g.values().begin());
    off += m.size();
    out.push_back(std::move(g));
  });
  return out;
}

// Probes every adapter tensor family (A, B, m, prefix) through `loss_fn`,
// which evaluates a loss on an adapted context and optionally accumulates
// gradients.
using AdaptedLoss = std::function<double(const ForwardContext&, ModelGrads*, GradMask)>;

inline std::vector<fd::Probe> adapter_probes_with(AdapterKind kind, std::uint64_t seed, std::size_t per_family,
                                                  const ModelConfig& cfg, const ModelParams& base,
                                                  const AdaptedLoss& loss_fn) {
  RngState rng{seed, 7};
  Adapter ad = random_adapter(kind, cfg, base, rng);
  std::vector<double> flat;
  {
    AdaptedModel m(cfg, base, &ad);
    const std::size_t k = kind == AdapterKind::PromptTuning ? ad.prefix.rows() : 0;
    ModelGrads g(cfg, k);
    loss_fn(m.context(), &g, m.grad_mask());
    flat = m.pull_back(g);
  }
  const std::vector<Matrix> analytic = unflatten_like(ad, flat);
  auto loss = [&]() {
    AdaptedModel m(cfg, base, &ad);
    return loss_fn(m.context(), nullptr, 0);
  };
  // Group tensors by family suffix so each family gets `per_family` probes.
  std::vector<std::string> names;
  std::vector<Matrix*> mats;
  ad.visit([&](const std::string& n, Matrix& m) {
    names.push_back(n);
    mats.push_back(&m);
  });
  std::vector<std::string> families;
  for (const auto& n : names) {
    const std::string fam = n.substr(n.rfind('.') + 1);
    if (std::find(families.begin(), families.end(), fam) == families.end()) families.push_back(fam);
  }
  std::vector<fd::Probe> probes;
  for (const auto& fam : families) {
    std::vector<std::size_t> members;
    for (std::size_t i = 0; i < names.size(); ++i) {
      if (names[i].substr(names[i].rfind('.') + 1) == fam) members.push_back(i);
    }
    for (std::size_t j = 0; j < per_family; ++j) {
      const std::size_t t = members[rng_below(rng, members.size())];
      auto got = fd::probe(to_string(kind) + "." + fam + "@" + names[t], *mats[t], analytic[t],
                           fd::all_indices(*mats[t]), 1, rng, loss);
      probes.insert(probes.end(), got.begin(), got.end());
    }
  }
  return probes;
}

inline std::vector<fd::Probe> adapter_probes(AdapterKind kind, std::uint64_t seed, std::size_t per_family = 20) {
  const ModelConfig cfg = tiny_config();
  const ModelParams base = random_model(cfg, seed);
  RngState rng{seed + 3, 0};
  const PairTokens pair{random_tokens(4, rng), random_tokens(5, rng)};
  return adapter_probes_with(kind, seed, per_family, cfg, base,
                             [&pair](const ForwardContext& ctx, ModelGrads* g, GradMask mask) {
                               return completion_nll(ctx, pair, g, mask);
                             });
}

// Distillation loss against a fixed random teacher distribution.
inline std::vector<fd::Probe> kd_probes(AdapterKind kind, std::uint64_t seed, std::size_t per_family = 20,
                                        double tau = 2.0) {
  const ModelConfig cfg = tiny_config();
  const ModelParams base = random_model(cfg, seed);
  const ModelParams teacher_base = random_model(cfg, seed + 100);
  RngState rng{seed + 5, 0};
  const PairTokens pair{random_tokens(4, rng), random_tokens(5, rng)};
  ForwardContext teacher(cfg, teacher_base);
  const Matrix targets = soft_targets(teacher, pair, tau);
  return adapter_probes_with(kind, seed, per_family, cfg, base,
                             [&](const ForwardContext& ctx, ModelGrads* g, GradMask mask) {
                               return kd_loss(ctx, pair, targets, tau, g, mask);
                             });
}

}  // namespace gradcheck
