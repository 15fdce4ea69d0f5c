#pragma once

// Parameter-efficient adapters over a frozen base model.
//
//   LoRA : W' = W + (alpha/r) B A                      on Wq and Wv of every layer
//   DoRA : W'[:,j] = m_j V[:,j] / |V[:,j]|,  V = W + (alpha/r) B A
//   PT   : k learnable vectors prepended to the embedded sequence

#include <cmath>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "translora/checkpoint.hpp"
#include "translora/model.hpp"
#include "translora/parallel.hpp"

namespace translora {

enum class AdapterKind { LoRA, DoRA, PromptTuning };

inline std::string to_string(AdapterKind k) {
  switch (k) {
    case AdapterKind::LoRA: return "lora";
    case AdapterKind::DoRA: return "dora";
    case AdapterKind::PromptTuning: return "pt";
  }
  return "?";
}

inline AdapterKind adapter_kind_from_string(const std::string& s) {
  if (s == "lora" || s == "LoRA") return AdapterKind::LoRA;
  if (s == "dora" || s == "DoRA") return AdapterKind::DoRA;
  if (s == "pt" || s == "PT" || s == "prompt") return AdapterKind::PromptTuning;
  throw ConfigError("unknown adapter kind '" + s + "'");
}

inline constexpr const char* kPromptTuningInitText = "Answer the following question correctly:";

struct LowRank {
  Matrix a;  // r x d
  Matrix b;  // d x r
  Matrix m;  // 1 x d, DoRA only
};

struct AdapterLayer {
  LowRank q, v;
};

struct Adapter {
  AdapterKind kind = AdapterKind::LoRA;
  std::size_t rank = 0;
  double alpha = 0.0;
  std::vector<AdapterLayer> layers;  // LoRA / DoRA
  Matrix prefix;                     // prompt tuning, k x d

  double scale() const { return rank == 0 ? 0.0 : alpha / static_cast<double>(rank); }

  template <typename F>
  void visit(F&& f) {
    visit_impl(*this, f);
  }
  template <typename F>
  void visit(F&& f) const {
    visit_impl(*this, f);
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    visit([&n](const std::string&, const Matrix& m) { n += m.size(); });
    return n;
  }

  std::vector<double> flatten() const {
    std::vector<double> out;
    visit([&out](const std::string&, const Matrix& m) {
      out.insert(out.end(), m.values().begin(), m.values().end());
    });
    return out;
  }

  void unflatten(const std::vector<double>& flat) {
    std::size_t off = 0;
    visit([&](const std::string&, Matrix& m) {
      std::copy(flat.begin() + static_cast<long>(off), flat.begin() + static_cast<long>(off + m.size()),
                m.values().begin());
      off += m.size();
    });
    if (off != flat.size()) throw LengthMismatch("flat adapter buffer has wrong length");
  }

  friend bool operator==(const Adapter& x, const Adapter& y) {
    return x.kind == y.kind && x.rank == y.rank && x.alpha == y.alpha && x.flatten() == y.flatten() &&
           x.layers.size() == y.layers.size() && x.prefix.rows() == y.prefix.rows();
  }

 private:
  template <typename Self, typename F>
  static void visit_impl(Self& self, F& f) {
    if (self.kind == AdapterKind::PromptTuning) {
      f(std::string("pt.prefix"), self.prefix);
      return;
    }
    const std::string kind = self.kind == AdapterKind::LoRA ? "lora." : "dora.";
    for (std::size_t i = 0; i < self.layers.size(); ++i) {
      auto& l = self.layers[i];
      for (auto [tag, lr] : {std::pair{"Wq", &l.q}, std::pair{"Wv", &l.v}}) {
        const std::string p = kind + "L" + std::to_string(i) + "." + tag + ".";
        f(p + "A", lr->a);
        f(p + "B", lr->b);
        if (self.kind == AdapterKind::DoRA) f(p + "m", lr->m);
      }
    }
  }
};

struct AdapterSpec {
  AdapterKind kind = AdapterKind::LoRA;
  std::size_t rank = 4;
  double alpha = 8.0;
  std::string init_text = kPromptTuningInitText;
  double init_std = 0.02;
};

inline Matrix column_norms(const Matrix& w) {
  Matrix n(1, w.cols());
  for (std::size_t j = 0; j < w.cols(); ++j) {
    double s = 0.0;
    for (std::size_t i = 0; i < w.rows(); ++i) s += w(i, j) * w(i, j);
    n(0, j) = std::sqrt(s);
  }
  return n;
}

inline Adapter init_adapter(const AdapterSpec& spec, const ModelConfig& cfg, const ModelParams& base,
                            RngState& rng) {
  base.check(cfg);
  Adapter ad;
  ad.kind = spec.kind;
  if (spec.kind == AdapterKind::PromptTuning) {
    const TokenSeq ids = tokenize(spec.init_text);
    if (ids.size() + 2 > cfg.max_len) {
      throw InitTextTooLong(std::to_string(ids.size()) + " init tokens leave no room within max_len " +
                            std::to_string(cfg.max_len));
    }
    ad.prefix = Matrix(ids.size(), cfg.d_model);
    for (std::size_t i = 0; i < ids.size(); ++i) {
      const auto src = base.tok_emb.row(static_cast<std::size_t>(ids[i]));
      std::copy(src.begin(), src.end(), ad.prefix.row(i).begin());
    }
    return ad;
  }
  if (spec.rank < 1) throw ShapeMismatch("adapter rank must be >= 1");
  ad.rank = spec.rank;
  ad.alpha = spec.alpha;
  ad.layers.resize(cfg.n_layers);
  for (std::size_t li = 0; li < cfg.n_layers; ++li) {
    for (auto [lr, w] : {std::pair{&ad.layers[li].q, &base.layers[li].wq},
                         std::pair{&ad.layers[li].v, &base.layers[li].wv}}) {
      lr->a = Matrix(spec.rank, cfg.d_model);
      for (double& x : lr->a.values()) x = rng_normal(rng, 0.0, spec.init_std);
      lr->b = Matrix(cfg.d_model, spec.rank);
      if (spec.kind == AdapterKind::DoRA) lr->m = column_norms(*w);
    }
  }
  return ad;
}

inline void check_adapter(const Adapter& ad, const ModelConfig& cfg) {
  if (ad.kind == AdapterKind::PromptTuning) {
    if (ad.prefix.rows() > 0 && ad.prefix.cols() != cfg.d_model) throw ShapeMismatch("prefix width");
    if (ad.prefix.rows() + 2 > cfg.max_len) throw ShapeMismatch("prefix longer than max_len allows");
    return;
  }
  if (ad.layers.size() != cfg.n_layers) throw ShapeMismatch("adapter layer count differs from model");
  for (const auto& l : ad.layers) {
    for (const LowRank* lr : {&l.q, &l.v}) {
      if (lr->a.rows() != ad.rank || lr->a.cols() != cfg.d_model || lr->b.rows() != cfg.d_model ||
          lr->b.cols() != ad.rank) {
        throw ShapeMismatch("low-rank factor shapes do not match config");
      }
      if (ad.kind == AdapterKind::DoRA && (lr->m.rows() != 1 || lr->m.cols() != cfg.d_model)) {
        throw ShapeMismatch("DoRA magnitude shape");
      }
    }
  }
}

// Base model with an (optional) adapter attached. Owns the effective
// weights; the base and adapter must outlive it.
class AdaptedModel {
 public:
  AdaptedModel(const ModelConfig& cfg, const ModelParams& base, const Adapter* adapter = nullptr)
      : adapter_(adapter) {
    ctx_ = std::make_unique<ForwardContext>(cfg, base);
    if (adapter == nullptr) return;
    check_adapter(*adapter, cfg);
    if (adapter->kind == AdapterKind::PromptTuning) {
      ctx_->set_prefix(&adapter->prefix);
      return;
    }
    const std::size_t L = cfg.n_layers;
    eff_.resize(2 * L);
    combined_.resize(2 * L);
    norms_.resize(2 * L);
    for (std::size_t li = 0; li < L; ++li) {
      build(li, 0, base.layers[li].wq, adapter->layers[li].q);
      build(li, 1, base.layers[li].wv, adapter->layers[li].v);
      ctx_->override_qv(li, &eff_[2 * li], &eff_[2 * li + 1]);
    }
  }

  AdaptedModel(const AdaptedModel&) = delete;
  AdaptedModel& operator=(const AdaptedModel&) = delete;

  const ForwardContext& context() const noexcept { return *ctx_; }
  const Matrix& effective_query(std::size_t layer) const { return eff_.at(2 * layer); }
  const Matrix& effective_value(std::size_t layer) const { return eff_.at(2 * layer + 1); }

  // Gradient families the adapter needs from the base backward pass.
  GradMask grad_mask() const noexcept {
    if (adapter_ == nullptr) return 0;
    return adapter_->kind == AdapterKind::PromptTuning ? kGradPrefix : (kGradWq | kGradWv);
  }

  // Chain rule from effective-weight gradients to adapter parameters, in
  // Adapter::visit order.
  std::vector<double> pull_back(const ModelGrads& g) const {
    if (adapter_ == nullptr) return {};
    if (adapter_->kind == AdapterKind::PromptTuning) return g.prefix.values();
    std::vector<double> out;
    out.reserve(adapter_->parameter_count());
    const double s = adapter_->scale();
    for (std::size_t li = 0; li < adapter_->layers.size(); ++li) {
      for (int which = 0; which < 2; ++which) {
        const LowRank& lr = which == 0 ? adapter_->layers[li].q : adapter_->layers[li].v;
        const Matrix& G = which == 0 ? g.params.layers[li].wq : g.params.layers[li].wv;
        Matrix dV = G;
        Matrix dm;
        if (adapter_->kind == AdapterKind::DoRA) {
          const Matrix& V = combined_[2 * li + which];
          const Matrix& c = norms_[2 * li + which];
          dm = Matrix(1, V.cols());
          for (std::size_t j = 0; j < V.cols(); ++j) {
            double gu = 0.0;
            for (std::size_t i = 0; i < V.rows(); ++i) gu += G(i, j) * V(i, j);
            gu /= c(0, j);
            dm(0, j) = gu;
            const double ratio = lr.m(0, j) / c(0, j);
            for (std::size_t i = 0; i < V.rows(); ++i) dV(i, j) = ratio * (G(i, j) - V(i, j) / c(0, j) * gu);
          }
        }
        // dA = s B^T dV, dB = s dV A^T
        Matrix dA = matmul(transpose(lr.b), dV);
        Matrix dB = matmul(dV, transpose(lr.a));
        for (double& x : dA.values()) x *= s;
        for (double& x : dB.values()) x *= s;
        out.insert(out.end(), dA.values().begin(), dA.values().end());
        out.insert(out.end(), dB.values().begin(), dB.values().end());
        if (adapter_->kind == AdapterKind::DoRA) out.insert(out.end(), dm.values().begin(), dm.values().end());
      }
    }
    return out;
  }

 private:
  void build(std::size_t li, int which, const Matrix& w, const LowRank& lr) {
    const std::size_t idx = 2 * li + static_cast<std::size_t>(which);
    Matrix ba = matmul(lr.b, lr.a);
    const double s = adapter_->scale();
    Matrix v = w;
    for (std::size_t i = 0; i < v.size(); ++i) v.values()[i] += s * ba.values()[i];
    if (adapter_->kind == AdapterKind::DoRA) {
      Matrix c = column_norms(v);
      Matrix e = v;
      for (std::size_t i = 0; i < e.rows(); ++i)
        for (std::size_t j = 0; j < e.cols(); ++j) e(i, j) = lr.m(0, j) * (v(i, j) / c(0, j));
      eff_[idx] = std::move(e);
      combined_[idx] = std::move(v);
      norms_[idx] = std::move(c);
    } else {
      eff_[idx] = std::move(v);
    }
  }

  const Adapter* adapter_;
  std::vector<Matrix> eff_, combined_, norms_;
  std::unique_ptr<ForwardContext> ctx_;
};

// ---------------------------------------------------------------------------
// Training loop shared by fine-tuning, discriminator training and distillation.

struct TrainHyper {
  double lr = 1e-2;
  std::size_t epochs = 20;
  std::size_t batch_size = 8;
  std::size_t total_steps = 0;  // 0: epochs * ceil(n / batch_size)
  AdamHyper adam{};
};

struct TrainResult {
  std::vector<double> epoch_losses;
  std::size_t steps = 0;
};

// Loss of item i under ctx. When grads is non-null accumulates
// weight * d(loss) for the requested families.
using ItemLoss =
    std::function<double(const ForwardContext&, std::size_t, ModelGrads*, GradMask, double)>;

inline std::size_t steps_for(std::size_t n_items, const TrainHyper& h) {
  if (h.total_steps > 0) return h.total_steps;
  const std::size_t per_epoch = (n_items + h.batch_size - 1) / h.batch_size;
  return h.epochs * per_epoch;
}

inline TrainResult train_adapter(const ModelConfig& cfg, const ModelParams& base, Adapter& adapter,
                                 std::size_t n_items, const ItemLoss& item_loss,
                                 const TrainHyper& hyper, RngState rng) {
  if (n_items == 0) throw EmptyDataset("no training items");
  if (hyper.batch_size == 0) throw ConfigError("batch_size must be >= 1");
  check_adapter(adapter, cfg);
  const std::size_t total = steps_for(n_items, hyper);
  std::vector<double> params = adapter.flatten();
  AdamState adam(params.size());
  TrainResult result;
  std::vector<std::size_t> order(n_items);
  for (std::size_t i = 0; i < n_items; ++i) order[i] = i;
  rng_shuffle(rng, order);
  std::size_t cursor = 0;
  double epoch_sum = 0.0;
  std::size_t epoch_count = 0;
  const std::size_t prefix_len = adapter.kind == AdapterKind::PromptTuning ? adapter.prefix.rows() : 0;
  for (std::size_t step = 0; step < total; ++step) {
    const std::size_t bs = std::min(hyper.batch_size, n_items - cursor);
    std::vector<double> losses(bs);
    std::vector<ModelGrads> slots(bs);
    std::vector<double> grad;
    {
      AdaptedModel model(cfg, base, &adapter);
      const GradMask mask = model.grad_mask();
      parallel_for(bs, [&](std::size_t b) {
        slots[b] = ModelGrads(cfg, prefix_len);
        losses[b] = item_loss(model.context(), order[cursor + b], &slots[b], mask,
                              1.0 / static_cast<double>(bs));
      });
      for (std::size_t b = 1; b < bs; ++b) slots[0].add(slots[b]);
      grad = model.pull_back(slots[0]);
    }
    adam_step(params, grad, adam, linear_lr(hyper.lr, step, total), hyper.adam.beta1,
              hyper.adam.beta2, hyper.adam.eps);
    adapter.unflatten(params);
    for (double l : losses) epoch_sum += l;
    epoch_count += bs;
    cursor += bs;
    if (cursor == n_items || step + 1 == total) {
      result.epoch_losses.push_back(epoch_sum / static_cast<double>(epoch_count));
      epoch_sum = 0.0;
      epoch_count = 0;
    }
    if (cursor == n_items) {
      cursor = 0;
      rng_shuffle(rng, order);
    }
  }
  result.steps = total;
  return result;
}

struct FinetuneResult {
  Adapter adapter;
  std::vector<double> epoch_losses;
};

// Supervised fine-tuning of the adapter only; the base stays frozen.
template <typename SampleLike>
FinetuneResult finetune(const ModelConfig& cfg, const ModelParams& base, Adapter adapter,
                        const std::vector<SampleLike>& data,
                        const std::function<PairTokens(const SampleLike&)>& encode,
                        const TrainHyper& hyper, RngState rng) {
  if (data.empty()) throw EmptyDataset("fine-tuning set is empty");
  std::vector<PairTokens> encoded;
  encoded.reserve(data.size());
  for (const auto& s : data) encoded.push_back(encode(s));
  ItemLoss loss = [&encoded](const ForwardContext& ctx, std::size_t i, ModelGrads* g, GradMask mask,
                             double w) { return completion_nll(ctx, encoded[i], g, mask, w); };
  TrainResult r = train_adapter(cfg, base, adapter, encoded.size(), loss, hyper, rng);
  return FinetuneResult{std::move(adapter), std::move(r.epoch_losses)};
}

// ---------------------------------------------------------------------------
// Checkpoints: "meta.adapter.<kind>" = [rank, alpha, k] followed by tensors.

inline TensorList adapter_to_tensors(const Adapter& ad) {
  TensorList out;
  out.push_back({"meta.adapter." + to_string(ad.kind),
                 Matrix(1, 3, {static_cast<double>(ad.rank), ad.alpha, static_cast<double>(ad.prefix.rows())})});
  ad.visit([&out](const std::string& name, const Matrix& m) { out.push_back({name, m}); });
  return out;
}

inline Adapter adapter_from_tensors(const TensorList& tensors) {
  if (tensors.empty() || tensors[0].name.rfind("meta.adapter.", 0) != 0) {
    throw CheckpointError("missing meta.adapter tensor");
  }
  Adapter ad;
  ad.kind = adapter_kind_from_string(tensors[0].name.substr(13));
  const auto& meta = tensors[0].value.values();
  if (meta.size() != 3) throw CheckpointError("bad adapter metadata");
  ad.rank = static_cast<std::size_t>(meta[0]);
  ad.alpha = meta[1];
  if (ad.kind == AdapterKind::PromptTuning) {
    if (tensors.size() != 2 || tensors[1].name != "pt.prefix") throw CheckpointError("expected pt.prefix");
    ad.prefix = tensors[1].value;
    return ad;
  }
  const std::size_t per_target = ad.kind == AdapterKind::DoRA ? 3 : 2;
  const std::size_t n = tensors.size() - 1;
  if (n % (2 * per_target) != 0) throw CheckpointError("unexpected adapter tensor count");
  ad.layers.resize(n / (2 * per_target));
  std::size_t i = 1;
  ad.visit([&](const std::string& name, Matrix& m) {
    if (tensors[i].name != name) throw CheckpointError("expected tensor " + name);
    m = tensors[i].value;
    ++i;
  });
  return ad;
}

}  // namespace translora
