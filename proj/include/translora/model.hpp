#pragma once

// Tiny byte-level causal transformer: pre-norm residual blocks with
// single-head attention, RMSNorm and a ReLU MLP.
//
//   h0[t]  = E[x_t] + P[t]
//   a      = h + Wo * Attn(RMSNorm_g1(h))
//   h'     = a + W2 * relu(W1 * RMSNorm_g2(a))
//   logits = U * RMSNorm_gf(h_final)
//
// Weights are stored out x in. The forward pass is written row by row so a
// full-sequence pass and an incremental (KV-cached) decode produce identical
// bits for every position.

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "translora/numerics.hpp"
#include "translora/tokenizer.hpp"

namespace translora {

inline constexpr double kRmsEps = 1e-6;

struct ModelConfig {
  std::size_t vocab_size = tok::kVocabSize;
  std::size_t d_model = 64;
  std::size_t d_ff = 256;
  std::size_t n_layers = 2;
  std::size_t max_len = 64;

  void validate() const {
    if (vocab_size < tok::kVocabSize) throw ShapeMismatch("vocab_size must cover reserved tokens");
    if (d_model == 0 || n_layers == 0) throw ShapeMismatch("d_model and n_layers must be >= 1");
    if (d_ff < d_model) throw ShapeMismatch("d_ff must be >= d_model");
    if (max_len < 2) throw ShapeMismatch("max_len must be >= 2");
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

struct LayerParams {
  Matrix wq, wk, wv, wo;  // d x d
  Matrix w1;              // d_ff x d
  Matrix w2;              // d x d_ff
  Matrix g1, g2;          // 1 x d
};

struct ModelParams {
  Matrix tok_emb;     // vocab x d
  Matrix pos_emb;     // max_len x d
  std::vector<LayerParams> layers;
  Matrix final_gain;  // 1 x d
  Matrix out_proj;    // vocab x d

  static ModelParams zeros(const ModelConfig& cfg) {
    cfg.validate();
    ModelParams p;
    const std::size_t d = cfg.d_model;
    p.tok_emb = Matrix(cfg.vocab_size, d);
    p.pos_emb = Matrix(cfg.max_len, d);
    p.layers.resize(cfg.n_layers);
    for (auto& l : p.layers) {
      l.wq = Matrix(d, d);
      l.wk = Matrix(d, d);
      l.wv = Matrix(d, d);
      l.wo = Matrix(d, d);
      l.w1 = Matrix(cfg.d_ff, d);
      l.w2 = Matrix(d, cfg.d_ff);
      l.g1 = Matrix(1, d);
      l.g2 = Matrix(1, d);
    }
    p.final_gain = Matrix(1, d);
    p.out_proj = Matrix(cfg.vocab_size, d);
    return p;
  }

  static ModelParams init(const ModelConfig& cfg, RngState& rng) {
    ModelParams p = zeros(cfg);
    auto gauss = [&rng](Matrix& m, double sd) {
      for (double& x : m.values()) x = rng_normal(rng, 0.0, sd);
    };
    const double d = static_cast<double>(cfg.d_model);
    const double resid = 1.0 / std::sqrt(2.0 * static_cast<double>(cfg.n_layers));
    gauss(p.tok_emb, 0.2);
    gauss(p.pos_emb, 0.2);
    for (auto& l : p.layers) {
      gauss(l.wq, 1.0 / std::sqrt(d));
      gauss(l.wk, 1.0 / std::sqrt(d));
      gauss(l.wv, 1.0 / std::sqrt(d));
      gauss(l.wo, resid / std::sqrt(d));
      gauss(l.w1, 1.0 / std::sqrt(d));
      gauss(l.w2, resid / std::sqrt(static_cast<double>(cfg.d_ff)));
      l.g1.fill(1.0);
      l.g2.fill(1.0);
    }
    p.final_gain.fill(1.0);
    gauss(p.out_proj, 0.02);
    return p;
  }

  // Visits every tensor with its checkpoint name, in a fixed order.
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

  void check(const ModelConfig& cfg) const {
    const ModelParams ref = zeros(cfg);
    std::vector<std::pair<std::size_t, std::size_t>> shapes;
    ref.visit([&shapes](const std::string&, const Matrix& m) { shapes.emplace_back(m.rows(), m.cols()); });
    std::size_t i = 0;
    bool ok = layers.size() == cfg.n_layers;
    if (ok) {
      visit([&](const std::string& name, const Matrix& m) {
        if (i >= shapes.size() || shapes[i] != std::pair{m.rows(), m.cols()}) {
          ok = false;
        }
        (void)name;
        ++i;
      });
    }
    if (!ok || i != shapes.size()) throw ShapeMismatch("model parameters do not match config");
  }

  friend bool operator==(const ModelParams& a, const ModelParams& b) {
    if (a.layers.size() != b.layers.size()) return false;
    std::vector<const Matrix*> xs, ys;
    a.visit([&xs](const std::string&, const Matrix& m) { xs.push_back(&m); });
    b.visit([&ys](const std::string&, const Matrix& m) { ys.push_back(&m); });
    for (std::size_t i = 0; i < xs.size(); ++i) {
      if (!(*xs[i] == *ys[i])) return false;
    }
    return true;
  }

 private:
  template <typename Self, typename F>
  static void visit_impl(Self& self, F& f) {
    f(std::string("tok_emb"), self.tok_emb);
    f(std::string("pos_emb"), self.pos_emb);
    for (std::size_t i = 0; i < self.layers.size(); ++i) {
      auto& l = self.layers[i];
      const std::string p = "L" + std::to_string(i) + ".";
      f(p + "wq", l.wq);
      f(p + "wk", l.wk);
      f(p + "wv", l.wv);
      f(p + "wo", l.wo);
      f(p + "w1", l.w1);
      f(p + "w2", l.w2);
      f(p + "g1", l.g1);
      f(p + "g2", l.g2);
    }
    f(std::string("final_gain"), self.final_gain);
    f(std::string("out_proj"), self.out_proj);
  }
};

// Which parameter families receive gradients.
enum GradFamily : std::uint32_t {
  kGradTokEmb = 1u << 0,
  kGradPosEmb = 1u << 1,
  kGradWq = 1u << 2,
  kGradWk = 1u << 3,
  kGradWv = 1u << 4,
  kGradWo = 1u << 5,
  kGradW1 = 1u << 6,
  kGradW2 = 1u << 7,
  kGradGains = 1u << 8,
  kGradFinalGain = 1u << 9,
  kGradOutProj = 1u << 10,
  kGradPrefix = 1u << 11,
  kGradBase = (1u << 11) - 1,
};
using GradMask = std::uint32_t;

struct ModelGrads {
  ModelParams params;  // same layout as the model, zero where not requested
  Matrix prefix;       // k x d when the context carries a soft prompt

  ModelGrads() = default;
  ModelGrads(const ModelConfig& cfg, std::size_t prefix_len)
      : params(ModelParams::zeros(cfg)), prefix(prefix_len, cfg.d_model) {
    params.visit([](const std::string&, Matrix& m) { m.fill(0.0); });
  }

  void zero() {
    params.visit([](const std::string&, Matrix& m) { m.fill(0.0); });
    prefix.fill(0.0);
  }

  void add(const ModelGrads& o, double scale = 1.0) {
    std::vector<Matrix*> xs;
    std::vector<const Matrix*> ys;
    params.visit([&xs](const std::string&, Matrix& m) { xs.push_back(&m); });
    o.params.visit([&ys](const std::string&, const Matrix& m) { ys.push_back(&m); });
    for (std::size_t i = 0; i < xs.size(); ++i) {
      axpy(scale, ys[i]->data(), xs[i]->data(), xs[i]->size());
    }
    axpy(scale, o.prefix.data(), prefix.data(), prefix.size());
  }
};

// Effective weights used by the forward pass. Holds pointers to out x in
// matrices (the base model or adapter-provided replacements) plus in x out
// transposes for the row-major kernels. The referenced matrices must outlive
// the context.
class ForwardContext {
 public:
  struct Layer {
    const Matrix* wq;
    const Matrix* wk;
    const Matrix* wv;
    const Matrix* wo;
    const Matrix* w1;
    const Matrix* w2;
    const Matrix* g1;
    const Matrix* g2;
    Matrix wq_t, wk_t, wv_t, wo_t, w1_t, w2_t;
  };

  ForwardContext(const ModelConfig& cfg, const ModelParams& base) : cfg_(cfg), base_(&base) {
    cfg.validate();
    base.check(cfg);
    layers_.resize(cfg.n_layers);
    for (std::size_t i = 0; i < cfg.n_layers; ++i) {
      const auto& l = base.layers[i];
      layers_[i] = Layer{&l.wq, &l.wk, &l.wv, &l.wo, &l.w1, &l.w2, &l.g1, &l.g2, {}, {}, {}, {}, {}, {}};
    }
    out_proj_t_ = transpose(base.out_proj);
    retranspose_all();
  }

  ForwardContext(const ForwardContext&) = delete;
  ForwardContext& operator=(const ForwardContext&) = delete;

  // Replace the query / value weights of one layer (LoRA, DoRA).
  void override_qv(std::size_t layer, const Matrix* wq, const Matrix* wv) {
    auto& l = layers_.at(layer);
    if (wq != nullptr) {
      if (!wq->same_shape(*l.wq)) throw ShapeMismatch("query override shape");
      l.wq = wq;
      l.wq_t = transpose(*wq);
    }
    if (wv != nullptr) {
      if (!wv->same_shape(*l.wv)) throw ShapeMismatch("value override shape");
      l.wv = wv;
      l.wv_t = transpose(*wv);
    }
  }

  void set_prefix(const Matrix* prefix) {
    if (prefix != nullptr && prefix->rows() > 0 && prefix->cols() != cfg_.d_model) {
      throw ShapeMismatch("prefix width must equal d_model");
    }
    prefix_ = (prefix != nullptr && prefix->rows() > 0) ? prefix : nullptr;
  }

  const ModelConfig& config() const noexcept { return cfg_; }
  const ModelParams& base() const noexcept { return *base_; }
  const Layer& layer(std::size_t i) const noexcept { return layers_[i]; }
  const Matrix& out_proj_t() const noexcept { return out_proj_t_; }
  const Matrix* prefix() const noexcept { return prefix_; }
  std::size_t prefix_len() const noexcept { return prefix_ ? prefix_->rows() : 0; }

 private:
  void retranspose_all() {
    for (auto& l : layers_) {
      l.wq_t = transpose(*l.wq);
      l.wk_t = transpose(*l.wk);
      l.wv_t = transpose(*l.wv);
      l.wo_t = transpose(*l.wo);
      l.w1_t = transpose(*l.w1);
      l.w2_t = transpose(*l.w2);
    }
  }

  ModelConfig cfg_;
  const ModelParams* base_;
  std::vector<Layer> layers_;
  Matrix out_proj_t_;
  const Matrix* prefix_ = nullptr;
};

namespace detail {

// out = g * x / sqrt(mean(x^2) + eps); returns the rms denominator.
inline double rmsnorm_row(const double* x, const double* g, double* out, std::size_t d) noexcept {
  double ss = 0.0;
  for (std::size_t i = 0; i < d; ++i) ss += x[i] * x[i];
  const double r = std::sqrt(ss / static_cast<double>(d) + kRmsEps);
  for (std::size_t i = 0; i < d; ++i) out[i] = g[i] * (x[i] / r);
  return r;
}

// Given dy for y = g*x/r: accumulates dx and (optionally) dg.
inline void rmsnorm_backward_row(const double* x, const double* g, double r, const double* dy,
                                 double* dx, double* dg, std::size_t d) noexcept {
  double s = 0.0;
  for (std::size_t i = 0; i < d; ++i) s += g[i] * dy[i] * x[i];
  const double coef = s / (static_cast<double>(d) * r * r * r);
  for (std::size_t i = 0; i < d; ++i) {
    dx[i] += g[i] * dy[i] / r - x[i] * coef;
    if (dg != nullptr) dg[i] += dy[i] * x[i] / r;
  }
}

// Buffers for one block of rows [n0, n0 + m) of one layer. Activation
// pointers address the first row of the block; k/v address row 0 of the
// caches (rows < n0 already filled). att, when non-null, is m x att_stride.
struct LayerRows {
  const double* h_in;
  double* r1;
  double* n1;
  double* q;
  double* k;
  double* v;
  double* att;
  std::size_t att_stride;
  double* ctx;
  double* a;
  double* r2;
  double* n2;
  double* f;
  double* z;
  double* h_out;
};

inline void layer_forward_rows(const ForwardContext::Layer& W, std::size_t d, std::size_t dff,
                               std::size_t n0, std::size_t m, const LayerRows& b,
                               std::vector<double>& scratch) {
  const double scale = 1.0 / std::sqrt(static_cast<double>(d));
  for (std::size_t i = 0; i < m; ++i) {
    b.r1[i] = rmsnorm_row(b.h_in + i * d, W.g1->data(), b.n1 + i * d, d);
  }
  kernels::matmul(b.n1, W.wq_t.data(), b.q, m, d, d);
  kernels::matmul(b.n1, W.wk_t.data(), b.k + n0 * d, m, d, d);
  kernels::matmul(b.n1, W.wv_t.data(), b.v + n0 * d, m, d, d);
  scratch.resize(n0 + m);
  for (std::size_t i = 0; i < m; ++i) {
    const std::size_t t = n0 + i;
    double* p = b.att != nullptr ? b.att + i * b.att_stride : scratch.data();
    const double* qt = b.q + i * d;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t s = 0; s <= t; ++s) {
      p[s] = dot(qt, b.k + s * d, d) * scale;
      mx = std::max(mx, p[s]);
    }
    double sum = 0.0;
    for (std::size_t s = 0; s <= t; ++s) {
      p[s] = std::exp(p[s] - mx);
      sum += p[s];
    }
    double* c = b.ctx + i * d;
    std::fill(c, c + d, 0.0);
    for (std::size_t s = 0; s <= t; ++s) {
      p[s] /= sum;
      axpy(p[s], b.v + s * d, c, d);
    }
  }
  kernels::matmul(b.ctx, W.wo_t.data(), b.a, m, d, d);
  for (std::size_t j = 0; j < m * d; ++j) b.a[j] += b.h_in[j];
  for (std::size_t i = 0; i < m; ++i) {
    b.r2[i] = rmsnorm_row(b.a + i * d, W.g2->data(), b.n2 + i * d, d);
  }
  kernels::matmul(b.n2, W.w1_t.data(), b.f, m, d, dff);
  for (std::size_t j = 0; j < m * dff; ++j) b.z[j] = b.f[j] > 0.0 ? b.f[j] : 0.0;
  kernels::matmul(b.z, W.w2_t.data(), b.h_out, m, dff, d);
  for (std::size_t j = 0; j < m * d; ++j) b.h_out[j] += b.a[j];
}

inline void embed_rows(const ForwardContext& ctx, std::size_t n0, std::size_t count,
                       const TokenId* tokens, std::size_t prefix_len, double* out) {
  const std::size_t d = ctx.config().d_model;
  const auto& base = ctx.base();
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t pos = n0 + i;
    double* o = out + i * d;
    const double* src;
    if (pos < prefix_len) {
      src = ctx.prefix()->row(pos).data();
    } else {
      const TokenId id = tokens[pos - prefix_len];
      if (id < 0 || static_cast<std::size_t>(id) >= ctx.config().vocab_size) {
        throw ShapeMismatch("token id " + std::to_string(id) + " outside vocabulary");
      }
      src = base.tok_emb.row(static_cast<std::size_t>(id)).data();
    }
    const double* pe = base.pos_emb.row(pos).data();
    for (std::size_t j = 0; j < d; ++j) o[j] = src[j] + pe[j];
  }
}

}  // namespace detail

// Activations of a full forward pass, kept for backward.
struct Trace {
  struct LayerActs {
    Matrix h_in, n1, q, k, v, att, ctx, a, n2, f, z;
    std::vector<double> r1, r2;
  };

  std::size_t len = 0;
  std::size_t prefix_len = 0;
  TokenSeq tokens;  // ids for rows >= prefix_len
  std::vector<LayerActs> layers;
  Matrix h_final, nf;
  std::vector<double> rf;
  std::size_t logits_from = 0;
  Matrix logits;  // rows [logits_from, len)

  std::size_t logit_rows() const noexcept { return len - logits_from; }
  std::span<const double> logits_at(std::size_t pos) const { return logits.row(pos - logits_from); }
};

// Full pass over prefix + tokens. Logits are produced for rows >= logits_from.
inline Trace forward_trace(const ForwardContext& ctx, const TokenSeq& tokens,
                           std::size_t logits_from = 0) {
  const ModelConfig& cfg = ctx.config();
  const std::size_t k = ctx.prefix_len();
  const std::size_t L = k + tokens.size();
  if (tokens.empty()) throw ShapeMismatch("empty token sequence");
  if (L > cfg.max_len) {
    throw SequenceTooLong(std::to_string(L) + " positions exceed max_len " + std::to_string(cfg.max_len));
  }
  if (logits_from > L) logits_from = L;
  const std::size_t d = cfg.d_model, dff = cfg.d_ff;
  Trace tr;
  tr.len = L;
  tr.prefix_len = k;
  tr.tokens = tokens;
  tr.layers.resize(cfg.n_layers);
  Matrix x0(L, d);
  detail::embed_rows(ctx, 0, L, tokens.data(), k, x0.data());
  std::vector<double> scratch;
  const Matrix* h = &x0;
  for (std::size_t li = 0; li < cfg.n_layers; ++li) {
    auto& A = tr.layers[li];
    A.h_in = *h;
    A.n1 = Matrix(L, d);
    A.q = Matrix(L, d);
    A.k = Matrix(L, d);
    A.v = Matrix(L, d);
    A.att = Matrix(L, L);
    A.ctx = Matrix(L, d);
    A.a = Matrix(L, d);
    A.n2 = Matrix(L, d);
    A.f = Matrix(L, dff);
    A.z = Matrix(L, dff);
    A.r1.assign(L, 0.0);
    A.r2.assign(L, 0.0);
    Matrix& out = li + 1 < cfg.n_layers ? tr.layers[li + 1].h_in : tr.h_final;
    out = Matrix(L, d);
    detail::LayerRows rows{A.h_in.data(), A.r1.data(), A.n1.data(), A.q.data(), A.k.data(),
                           A.v.data(), A.att.data(), L, A.ctx.data(), A.a.data(),
                           A.r2.data(), A.n2.data(), A.f.data(), A.z.data(), out.data()};
    detail::layer_forward_rows(ctx.layer(li), d, dff, 0, L, rows, scratch);
    h = &out;
  }
  tr.nf = Matrix(L, d);
  tr.rf.assign(L, 0.0);
  for (std::size_t t = 0; t < L; ++t) {
    tr.rf[t] = detail::rmsnorm_row(tr.h_final.row(t).data(), ctx.base().final_gain.data(),
                                   tr.nf.row(t).data(), d);
  }
  tr.logits_from = logits_from;
  tr.logits = Matrix(L - logits_from, cfg.vocab_size);
  if (L > logits_from) {
    kernels::matmul(tr.nf.row(logits_from).data(), ctx.out_proj_t().data(), tr.logits.data(),
                    L - logits_from, d, cfg.vocab_size);
  }
  return tr;
}

// Accumulates gradients of sum_rows <dlogits, logits> into grads.
// dlogits rows align with trace rows [logits_from, len).
inline void backward(const ForwardContext& ctx, const Trace& tr, const Matrix& dlogits,
                     GradMask mask, ModelGrads& grads) {
  const ModelConfig& cfg = ctx.config();
  const std::size_t L = tr.len, d = cfg.d_model, dff = cfg.d_ff, V = cfg.vocab_size;
  if (dlogits.rows() != tr.logit_rows() || dlogits.cols() != V) {
    throw ShapeMismatch("dlogits shape does not match trace");
  }
  const std::size_t lf = tr.logits_from;
  const std::size_t nl = tr.logit_rows();
  const ModelParams& base = ctx.base();
  ModelParams& G = grads.params;

  // logits = nf U^T
  Matrix dnf(L, d);
  if (nl > 0) {
    kernels::matmul(dlogits.data(), base.out_proj.data(), dnf.row(lf).data(), nl, V, d);
    if (mask & kGradOutProj) {
      kernels::accumulate_tn(dlogits.data(), tr.nf.row(lf).data(), G.out_proj.data(), nl, V, d);
    }
  }
  Matrix dh(L, d);
  double* dgf = (mask & kGradFinalGain) ? G.final_gain.data() : nullptr;
  for (std::size_t t = lf; t < L; ++t) {
    detail::rmsnorm_backward_row(tr.h_final.row(t).data(), base.final_gain.data(), tr.rf[t],
                                 dnf.row(t).data(), dh.row(t).data(), dgf, d);
  }

  const double scale = 1.0 / std::sqrt(static_cast<double>(d));
  Matrix dz(L, dff), dn2(L, d), da(L, d), dctx(L, d), dq(L, d), dk(L, d), dv(L, d), dn1(L, d),
      tmp(L, d);
  std::vector<double> dp(L);
  for (std::size_t li = cfg.n_layers; li-- > 0;) {
    const auto& A = tr.layers[li];
    const auto& W = ctx.layer(li);
    auto& GL = G.layers[li];
    // h' = a + W2 relu(f)
    kernels::matmul(dh.data(), W.w2->data(), dz.data(), L, d, dff);
    if (mask & kGradW2) kernels::accumulate_tn(dh.data(), A.z.data(), GL.w2.data(), L, d, dff);
    for (std::size_t j = 0; j < L * dff; ++j) {
      if (A.f.data()[j] <= 0.0) dz.data()[j] = 0.0;
    }
    kernels::matmul(dz.data(), W.w1->data(), dn2.data(), L, dff, d);
    if (mask & kGradW1) kernels::accumulate_tn(dz.data(), A.n2.data(), GL.w1.data(), L, dff, d);
    da = dh;
    double* dg2 = (mask & kGradGains) ? GL.g2.data() : nullptr;
    for (std::size_t t = 0; t < L; ++t) {
      detail::rmsnorm_backward_row(A.a.row(t).data(), W.g2->data(), A.r2[t], dn2.row(t).data(),
                                   da.row(t).data(), dg2, d);
    }
    // a = h + Wo ctx
    kernels::matmul(da.data(), W.wo->data(), dctx.data(), L, d, d);
    if (mask & kGradWo) kernels::accumulate_tn(da.data(), A.ctx.data(), GL.wo.data(), L, d, d);
    dq.fill(0.0);
    dk.fill(0.0);
    dv.fill(0.0);
    for (std::size_t t = 0; t < L; ++t) {
      const double* p = A.att.row(t).data();
      const double* dc = dctx.row(t).data();
      double wsum = 0.0;
      for (std::size_t s = 0; s <= t; ++s) {
        dp[s] = dot(dc, A.v.row(s).data(), d);
        wsum += p[s] * dp[s];
        axpy(p[s], dc, dv.row(s).data(), d);
      }
      double* dqt = dq.row(t).data();
      const double* qt = A.q.row(t).data();
      for (std::size_t s = 0; s <= t; ++s) {
        const double ds = p[s] * (dp[s] - wsum) * scale;
        if (ds == 0.0) continue;
        axpy(ds, A.k.row(s).data(), dqt, d);
        axpy(ds, qt, dk.row(s).data(), d);
      }
    }
    kernels::matmul(dq.data(), W.wq->data(), dn1.data(), L, d, d);
    kernels::matmul(dk.data(), W.wk->data(), tmp.data(), L, d, d);
    for (std::size_t j = 0; j < L * d; ++j) dn1.data()[j] += tmp.data()[j];
    kernels::matmul(dv.data(), W.wv->data(), tmp.data(), L, d, d);
    for (std::size_t j = 0; j < L * d; ++j) dn1.data()[j] += tmp.data()[j];
    if (mask & kGradWq) kernels::accumulate_tn(dq.data(), A.n1.data(), GL.wq.data(), L, d, d);
    if (mask & kGradWk) kernels::accumulate_tn(dk.data(), A.n1.data(), GL.wk.data(), L, d, d);
    if (mask & kGradWv) kernels::accumulate_tn(dv.data(), A.n1.data(), GL.wv.data(), L, d, d);
    dh = da;
    double* dg1 = (mask & kGradGains) ? GL.g1.data() : nullptr;
    for (std::size_t t = 0; t < L; ++t) {
      detail::rmsnorm_backward_row(A.h_in.row(t).data(), W.g1->data(), A.r1[t], dn1.row(t).data(),
                                   dh.row(t).data(), dg1, d);
    }
  }
  // h0 = emb + pos
  for (std::size_t t = 0; t < L; ++t) {
    const double* g = dh.row(t).data();
    if (mask & kGradPosEmb) axpy(1.0, g, G.pos_emb.row(t).data(), d);
    if (t < tr.prefix_len) {
      if (mask & kGradPrefix) axpy(1.0, g, grads.prefix.row(t).data(), d);
    } else if (mask & kGradTokEmb) {
      axpy(1.0, g, G.tok_emb.row(static_cast<std::size_t>(tr.tokens[t - tr.prefix_len])).data(), d);
    }
  }
}

// Next-token logits for every position of `tokens` (no prefix).
inline Matrix forward(const ModelParams& params, const ModelConfig& cfg, const TokenSeq& tokens) {
  ForwardContext ctx(cfg, params);
  Trace tr = forward_trace(ctx, tokens, 0);
  return std::move(tr.logits);
}

// ---------------------------------------------------------------------------
// Completion loss

struct PairTokens {
  TokenSeq prompt;
  TokenSeq completion;
};

// Index (within the trace) of the logit row that predicts completion[0].
inline std::size_t completion_logit_row(const ForwardContext& ctx, const PairTokens& pair) {
  return ctx.prefix_len() + pair.prompt.size() - 1;
}

inline TokenSeq joined(const PairTokens& pair) {
  TokenSeq seq = pair.prompt;
  seq.insert(seq.end(), pair.completion.begin(), pair.completion.end());
  return seq;
}

// Mean NLL over completion tokens; when grads is non-null accumulates
// weight * d(loss) into it.
inline double completion_nll(const ForwardContext& ctx, const PairTokens& pair,
                             ModelGrads* grads = nullptr, GradMask mask = kGradBase,
                             double weight = 1.0) {
  if (pair.completion.empty()) throw EmptyCompletion("completion has no tokens");
  if (pair.prompt.empty()) throw ShapeMismatch("prompt must contain at least one token");
  TokenSeq seq = joined(pair);
  if (seq.size() > ctx.config().max_len) {
    throw SequenceTooLong("prompt+completion exceeds max_len");
  }
  const std::size_t first = completion_logit_row(ctx, pair);
  // The final token is never used as input to a predicted row.
  seq.pop_back();
  Trace tr = forward_trace(ctx, seq, first);
  const std::size_t n = pair.completion.size();
  double loss = 0.0;
  Matrix dlogits(tr.logit_rows(), ctx.config().vocab_size);
  for (std::size_t j = 0; j < n; ++j) {
    auto row = tr.logits.row(j);
    const double lse = log_sum_exp(row);
    const auto target = static_cast<std::size_t>(pair.completion[j]);
    loss += lse - row[target];
    if (grads != nullptr) {
      double* g = dlogits.row(j).data();
      for (std::size_t c = 0; c < row.size(); ++c) g[c] = std::exp(row[c] - lse);
      g[target] -= 1.0;
      for (std::size_t c = 0; c < row.size(); ++c) g[c] *= weight / static_cast<double>(n);
    }
  }
  if (grads != nullptr) backward(ctx, tr, dlogits, mask, *grads);
  return loss / static_cast<double>(n);
}

inline double nll_loss(const ModelParams& params, const ModelConfig& cfg, const TokenSeq& prompt,
                       const TokenSeq& completion) {
  ForwardContext ctx(cfg, params);
  return completion_nll(ctx, PairTokens{prompt, completion});
}

// ---------------------------------------------------------------------------
// Incremental decoding

// KV caches for the positions processed so far plus the logits of the most
// recent position.
class DecodeState {
 public:
  explicit DecodeState(const ForwardContext& ctx, std::size_t capacity)
      : d_(ctx.config().d_model), capacity_(capacity) {
    k_.assign(ctx.config().n_layers, std::vector<double>(capacity * d_, 0.0));
    v_ = k_;
  }

  std::size_t len() const noexcept { return len_; }
  std::size_t capacity() const noexcept { return capacity_; }
  const std::vector<double>& last_logits() const noexcept { return logits_; }
  const std::vector<double>& last_hidden() const noexcept { return hidden_; }

  // Feeds new rows (soft-prompt rows first, then tokens). `tokens` are the
  // ids for the rows following the prefix.
  void feed(const ForwardContext& ctx, const TokenSeq& tokens) {
    const ModelConfig& cfg = ctx.config();
    const std::size_t k = ctx.prefix_len();
    const std::size_t n0 = len_;
    std::size_t m = tokens.size();
    if (n0 == 0) m += k;
    if (m == 0) return;
    if (n0 + m > capacity_) throw SequenceTooLong("decode capacity exceeded");
    const std::size_t d = d_, dff = cfg.d_ff;
    history_.insert(history_.end(), tokens.begin(), tokens.end());
    std::vector<double> h(m * d), n1(m * d), q(m * d), c(m * d), a(m * d), n2(m * d), f(m * dff),
        z(m * dff), out(m * d), r1(m), r2(m);
    detail::embed_rows(ctx, n0, m, history_.data(), k, h.data());
    for (std::size_t li = 0; li < cfg.n_layers; ++li) {
      detail::LayerRows rows{h.data(),   r1.data(), n1.data(), q.data(), k_[li].data(),
                             v_[li].data(), nullptr, 0,       c.data(), a.data(),
                             r2.data(), n2.data(), f.data(), z.data(), out.data()};
      detail::layer_forward_rows(ctx.layer(li), d, dff, n0, m, rows, scratch_);
      std::swap(h, out);
    }
    hidden_.assign(d, 0.0);
    detail::rmsnorm_row(h.data() + (m - 1) * d, ctx.base().final_gain.data(), hidden_.data(), d);
    logits_.assign(cfg.vocab_size, 0.0);
    kernels::matmul(hidden_.data(), ctx.out_proj_t().data(), logits_.data(), 1, d, cfg.vocab_size);
    len_ = n0 + m;
  }

 private:
  std::size_t d_;
  std::size_t capacity_;
  std::size_t len_ = 0;
  TokenSeq history_;
  std::vector<std::vector<double>> k_, v_;
  std::vector<double> logits_, hidden_, scratch_;
};

// Arg-max with ties going to the lowest index.
inline TokenId argmax_token(std::span<const double> logits) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < logits.size(); ++i) {
    if (logits[i] > logits[best]) best = i;
  }
  return static_cast<TokenId>(best);
}

inline TokenId pick_token(std::span<const double> logits, double temperature, RngState& rng) {
  if (temperature < 0.0) throw InvalidTemperature("temperature must be >= 0");
  if (temperature == 0.0) return argmax_token(logits);
  const auto probs = softmax(logits, temperature);
  return static_cast<TokenId>(rng_categorical(rng, probs));
}

// Continues an already-fed state. Returns the new tokens (EOS excluded).
inline TokenSeq continue_decode(const ForwardContext& ctx, DecodeState& state, std::size_t max_new,
                                double temperature, RngState& rng) {
  TokenSeq out;
  for (std::size_t i = 0; i < max_new; ++i) {
    const TokenId next = pick_token(state.last_logits(), temperature, rng);
    if (next == tok::kEos) break;
    out.push_back(next);
    if (i + 1 < max_new) state.feed(ctx, TokenSeq{next});
  }
  return out;
}

// Autoregressive sampling; returns prompt followed by generated tokens.
inline TokenSeq generate(const ForwardContext& ctx, const TokenSeq& prompt, std::size_t max_new,
                         double temperature, RngState& rng) {
  const std::size_t need = ctx.prefix_len() + prompt.size() + max_new;
  if (need > ctx.config().max_len) {
    throw PromptTooLong(std::to_string(prompt.size()) + " prompt tokens + " +
                        std::to_string(max_new) + " new exceed max_len " +
                        std::to_string(ctx.config().max_len));
  }
  if (prompt.empty()) throw PromptTooLong("empty prompt");
  if (max_new == 0) return prompt;
  DecodeState state(ctx, need);
  state.feed(ctx, prompt);
  TokenSeq out = prompt;
  const TokenSeq gen = continue_decode(ctx, state, max_new, temperature, rng);
  out.insert(out.end(), gen.begin(), gen.end());
  return out;
}

inline TokenSeq generate(const ModelParams& params, const ModelConfig& cfg, const TokenSeq& prompt,
                         std::size_t max_new, double temperature, RngState& rng) {
  ForwardContext ctx(cfg, params);
  return generate(ctx, prompt, max_new, temperature, rng);
}

}  // namespace translora
