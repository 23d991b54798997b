// Forward pass, reverse-mode gradients and interventions for the classifier.
//
// Block (pre-norm):  x1 = x + Attn(LN1(x));  out = x1 + FFN(LN2(x1))
// Head:              logits = mean_valid(LNf(h^L)) . W + b
// The mlp_per_token variant drops attention and positional embeddings, so
// every position is processed independently.

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "rsf/common/random.hpp"
#include "rsf/netcore/model.hpp"

namespace rsf::netcore {
namespace {

constexpr double kLnEps = 1e-5;

template <typename P>
struct BlockWeights {
  P ln1_g{}, ln1_b{}, wq{}, bq{}, wk{}, bk{}, wv{}, bv{}, wo{}, bo{};
  P ln2_g{}, ln2_b{}, w1{}, b1{}, w2{}, b2{};
};

template <typename P>
struct Weights {
  P tok{};
  P pos{};
  std::vector<BlockWeights<P>> blocks;
  P lnf_g{}, lnf_b{}, head_w{}, head_b{};
};

// Binds pointers in parameter_layout order.
template <typename P, typename Range>
Weights<P> bind(const ModelConfig& cfg, Range&& tensors) {
  std::size_t next = 0;
  auto take = [&]() -> P { return tensors[next++].values.data(); };
  const bool attn = cfg.arch == Arch::kTransformer;
  Weights<P> w;
  w.tok = take();
  if (attn) w.pos = take();
  for (std::size_t b = 0; b < cfg.blocks; ++b) {
    BlockWeights<P> bw;
    if (attn) {
      bw.ln1_g = take();
      bw.ln1_b = take();
      bw.wq = take();
      bw.bq = take();
      bw.wk = take();
      bw.bk = take();
      bw.wv = take();
      bw.bv = take();
      bw.wo = take();
      bw.bo = take();
    }
    bw.ln2_g = take();
    bw.ln2_b = take();
    bw.w1 = take();
    bw.b1 = take();
    bw.w2 = take();
    bw.b2 = take();
    w.blocks.push_back(bw);
  }
  w.lnf_g = take();
  w.lnf_b = take();
  w.head_w = take();
  w.head_b = take();
  return w;
}

struct NormCache {
  StateMatrix xhat;
  std::vector<double> rstd;
};

struct BlockCache {
  NormCache ln1;
  StateMatrix a, q, k, v, ctx;
  std::vector<StateMatrix> probs;
  NormCache ln2;
  StateMatrix c, u, g;
};

struct ForwardCache {
  std::vector<bool> valid;
  std::size_t n_valid = 0;
  std::vector<BlockCache> blocks;
  NormCache lnf;
  std::vector<double> pooled;
};

void layer_norm(const StateMatrix& x, const double* gamma, const double* beta,
                StateMatrix& y, NormCache* cache) {
  const std::size_t n = x.rows();
  const std::size_t d = x.cols();
  y = StateMatrix(n, d);
  if (cache) {
    cache->xhat = StateMatrix(n, d);
    cache->rstd.assign(n, 0.0);
  }
  for (std::size_t t = 0; t < n; ++t) {
    auto xr = x.row(t);
    double mean = 0.0;
    for (double v : xr) mean += v;
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (double v : xr) var += (v - mean) * (v - mean);
    var /= static_cast<double>(d);
    const double rstd = 1.0 / std::sqrt(var + kLnEps);
    auto yr = y.row(t);
    for (std::size_t e = 0; e < d; ++e) {
      const double xhat = (xr[e] - mean) * rstd;
      yr[e] = xhat * gamma[e] + beta[e];
      if (cache) cache->xhat.at(t, e) = xhat;
    }
    if (cache) cache->rstd[t] = rstd;
  }
}

// Accumulates into dx.
void layer_norm_backward(const NormCache& cache, const double* gamma, const StateMatrix& dy,
                         double* dgamma, double* dbeta, StateMatrix& dx) {
  const std::size_t d = dy.cols();
  std::vector<double> dxhat(d);
  for (std::size_t t = 0; t < dy.rows(); ++t) {
    auto dyr = dy.row(t);
    auto xh = cache.xhat.row(t);
    double mean_dxhat = 0.0;
    double mean_dxhat_xhat = 0.0;
    for (std::size_t e = 0; e < d; ++e) {
      if (dgamma) dgamma[e] += dyr[e] * xh[e];
      if (dbeta) dbeta[e] += dyr[e];
      dxhat[e] = dyr[e] * gamma[e];
      mean_dxhat += dxhat[e];
      mean_dxhat_xhat += dxhat[e] * xh[e];
    }
    mean_dxhat /= static_cast<double>(d);
    mean_dxhat_xhat /= static_cast<double>(d);
    auto dxr = dx.row(t);
    for (std::size_t e = 0; e < d; ++e) {
      dxr[e] += cache.rstd[t] * (dxhat[e] - mean_dxhat - xh[e] * mean_dxhat_xhat);
    }
  }
}

// out = in . W + b with W stored [in_dim, out_dim].
void linear(const StateMatrix& in, const double* w, const double* b, std::size_t out_dim,
            StateMatrix& out) {
  const std::size_t in_dim = in.cols();
  out = StateMatrix(in.rows(), out_dim);
  for (std::size_t t = 0; t < in.rows(); ++t) {
    auto o = out.row(t);
    std::copy(b, b + out_dim, o.begin());
    auto x = in.row(t);
    for (std::size_t k = 0; k < in_dim; ++k) {
      const double xk = x[k];
      const double* wr = w + k * out_dim;
      for (std::size_t j = 0; j < out_dim; ++j) o[j] += xk * wr[j];
    }
  }
}

// Accumulates dW, db (when non-null) and din.
void linear_backward(const StateMatrix& in, const double* w, const StateMatrix& dout,
                     double* dw, double* db, StateMatrix& din) {
  const std::size_t in_dim = in.cols();
  const std::size_t out_dim = dout.cols();
  for (std::size_t t = 0; t < in.rows(); ++t) {
    auto x = in.row(t);
    auto go = dout.row(t);
    auto gi = din.row(t);
    if (db) {
      for (std::size_t j = 0; j < out_dim; ++j) db[j] += go[j];
    }
    for (std::size_t k = 0; k < in_dim; ++k) {
      const double* wr = w + k * out_dim;
      double acc = 0.0;
      for (std::size_t j = 0; j < out_dim; ++j) acc += wr[j] * go[j];
      gi[k] += acc;
      if (dw) {
        double* dwr = dw + k * out_dim;
        for (std::size_t j = 0; j < out_dim; ++j) dwr[j] += x[k] * go[j];
      }
    }
  }
}

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2 / pi)
constexpr double kGeluA = 0.044715;

double gelu(double u) {
  return 0.5 * u * (1.0 + std::tanh(kGeluC * (u + kGeluA * u * u * u)));
}

double gelu_grad(double u) {
  const double t = std::tanh(kGeluC * (u + kGeluA * u * u * u));
  return 0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * kGeluC * (1.0 + 3.0 * kGeluA * u * u);
}

void add_into(StateMatrix& dst, const StateMatrix& src) {
  auto& a = dst.data();
  const auto& b = src.data();
  for (std::size_t i = 0; i < a.size(); ++i) a[i] += b[i];
}

std::vector<double> softmax(const std::vector<double>& logits) {
  const double mx = *std::max_element(logits.begin(), logits.end());
  std::vector<double> p(logits.size());
  double z = 0.0;
  for (std::size_t c = 0; c < logits.size(); ++c) {
    p[c] = std::exp(logits[c] - mx);
    z += p[c];
  }
  for (double& v : p) v /= z;
  return p;
}

void check_tokens(const ModelConfig& cfg, std::span<const TokenId> tokens) {
  if (tokens.size() > cfg.max_seq) {
    throw SeqTooLong("sequence of " + std::to_string(tokens.size()) +
                     " tokens exceeds max_seq " + std::to_string(cfg.max_seq));
  }
  for (TokenId t : tokens) {
    if (t >= cfg.vocab_size) throw InvalidArgument("token id out of vocabulary range");
  }
}

// Patch positions indexed by 1-based layer.
using PatchPlan = std::vector<std::vector<std::size_t>>;

void apply_patches(const PatchPlan& plan, std::size_t layer, const ForwardRecord* ref,
                   StateMatrix& x) {
  if (plan.empty()) return;
  for (std::size_t pos : plan[layer]) {
    auto src = ref->hidden[layer - 1].row(pos);
    std::copy(src.begin(), src.end(), x.row(pos).begin());
  }
}

// Runs everything above layer 1. `x` holds the (possibly perturbed) layer-1
// states on entry.
ForwardRecord run_blocks(const Model& model, std::span<const TokenId> tokens, StateMatrix x,
                         const PatchPlan& plan, const ForwardRecord* ref,
                         ForwardCache* cache) {
  const ModelConfig& cfg = model.config();
  const auto w = bind<const double*>(cfg, model.parameters());
  const std::size_t n = tokens.size();
  const std::size_t d = cfg.embed_dim;
  const std::size_t heads = cfg.heads;
  const std::size_t dh = d / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  const bool attn = cfg.arch == Arch::kTransformer;

  std::vector<bool> valid(n);
  std::size_t n_valid = 0;
  for (std::size_t i = 0; i < n; ++i) {
    valid[i] = tokens[i] != kPadId;
    n_valid += valid[i] ? 1 : 0;
  }
  // An all-pad input is treated as unpadded so every reduction stays defined.
  if (n_valid == 0) {
    valid.assign(n, true);
    n_valid = n;
  }

  ForwardRecord rec;
  rec.tokens.assign(tokens.begin(), tokens.end());
  apply_patches(plan, 1, ref, x);
  rec.hidden.push_back(x);
  if (cache) {
    cache->valid = valid;
    cache->n_valid = n_valid;
    cache->blocks.assign(cfg.blocks, {});
  }

  for (std::size_t b = 0; b < cfg.blocks; ++b) {
    const auto& bw = w.blocks[b];
    BlockCache local;
    BlockCache& bc = cache ? cache->blocks[b] : local;
    StateMatrix mid = x;
    if (attn) {
      StateMatrix a;
      layer_norm(x, bw.ln1_g, bw.ln1_b, a, cache ? &bc.ln1 : nullptr);
      linear(a, bw.wq, bw.bq, d, bc.q);
      linear(a, bw.wk, bw.bk, d, bc.k);
      linear(a, bw.wv, bw.bv, d, bc.v);
      bc.ctx = StateMatrix(n, d);
      std::vector<StateMatrix> head_probs;
      for (std::size_t h = 0; h < heads; ++h) {
        StateMatrix p(n, n);
        const std::size_t off = h * dh;
        for (std::size_t i = 0; i < n; ++i) {
          double mx = -INFINITY;
          for (std::size_t j = 0; j < n; ++j) {
            if (!valid[j]) continue;
            double s = 0.0;
            for (std::size_t e = 0; e < dh; ++e) s += bc.q.at(i, off + e) * bc.k.at(j, off + e);
            s *= scale;
            p.at(i, j) = s;
            mx = std::max(mx, s);
          }
          double z = 0.0;
          for (std::size_t j = 0; j < n; ++j) {
            if (!valid[j]) continue;
            p.at(i, j) = std::exp(p.at(i, j) - mx);
            z += p.at(i, j);
          }
          for (std::size_t j = 0; j < n; ++j) p.at(i, j) = valid[j] ? p.at(i, j) / z : 0.0;
          for (std::size_t j = 0; j < n; ++j) {
            const double pij = p.at(i, j);
            if (pij == 0.0) continue;
            for (std::size_t e = 0; e < dh; ++e) bc.ctx.at(i, off + e) += pij * bc.v.at(j, off + e);
          }
        }
        head_probs.push_back(std::move(p));
      }
      StateMatrix o;
      linear(bc.ctx, bw.wo, bw.bo, d, o);
      add_into(mid, o);
      rec.attn.push_back(head_probs);
      if (cache) {
        bc.a = std::move(a);
        bc.probs = std::move(head_probs);
      }
    }
    StateMatrix c;
    layer_norm(mid, bw.ln2_g, bw.ln2_b, c, cache ? &bc.ln2 : nullptr);
    StateMatrix u;
    linear(c, bw.w1, bw.b1, cfg.ffn_dim, u);
    StateMatrix g(n, cfg.ffn_dim);
    for (std::size_t i = 0; i < u.data().size(); ++i) g.data()[i] = gelu(u.data()[i]);
    StateMatrix m;
    linear(g, bw.w2, bw.b2, d, m);
    add_into(mid, m);
    x = std::move(mid);
    apply_patches(plan, b + 2, ref, x);
    rec.hidden.push_back(x);
    if (cache) {
      bc.c = std::move(c);
      bc.u = std::move(u);
      bc.g = std::move(g);
    }
  }

  StateMatrix z;
  layer_norm(x, w.lnf_g, w.lnf_b, z, cache ? &cache->lnf : nullptr);
  std::vector<double> pooled(d, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    if (!valid[i]) continue;
    auto zr = z.row(i);
    for (std::size_t e = 0; e < d; ++e) pooled[e] += zr[e];
  }
  if (n_valid > 0) {
    for (double& v : pooled) v /= static_cast<double>(n_valid);
  }
  const std::size_t classes = cfg.num_classes;
  rec.logits.assign(w.head_b, w.head_b + classes);
  for (std::size_t e = 0; e < d; ++e) {
    for (std::size_t c = 0; c < classes; ++c) rec.logits[c] += pooled[e] * w.head_w[e * classes + c];
  }
  rec.probs = softmax(rec.logits);
  if (cache) cache->pooled = std::move(pooled);
  return rec;
}

// Reverse pass for a cached, unpatched run. Parameter gradients are
// accumulated when `gw` is non-null; the layer-1 gradient is returned.
StateMatrix run_backward(const Model& model, std::span<const TokenId> tokens,
                         const ForwardCache& cache, const std::vector<double>& dlogits,
                         Weights<double*>* gw) {
  const ModelConfig& cfg = model.config();
  const auto w = bind<const double*>(cfg, model.parameters());
  const std::size_t n = tokens.size();
  const std::size_t d = cfg.embed_dim;
  const std::size_t classes = cfg.num_classes;
  const std::size_t dh = d / cfg.heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  const bool attn = cfg.arch == Arch::kTransformer;

  std::vector<double> dpooled(d, 0.0);
  for (std::size_t e = 0; e < d; ++e) {
    for (std::size_t c = 0; c < classes; ++c) {
      dpooled[e] += w.head_w[e * classes + c] * dlogits[c];
      if (gw) gw->head_w[e * classes + c] += cache.pooled[e] * dlogits[c];
    }
  }
  if (gw) {
    for (std::size_t c = 0; c < classes; ++c) gw->head_b[c] += dlogits[c];
  }
  StateMatrix dz(n, d);
  if (cache.n_valid > 0) {
    const double inv = 1.0 / static_cast<double>(cache.n_valid);
    for (std::size_t i = 0; i < n; ++i) {
      if (!cache.valid[i]) continue;
      for (std::size_t e = 0; e < d; ++e) dz.at(i, e) = dpooled[e] * inv;
    }
  }
  StateMatrix dx(n, d);
  layer_norm_backward(cache.lnf, w.lnf_g, dz, gw ? gw->lnf_g : nullptr,
                      gw ? gw->lnf_b : nullptr, dx);

  for (std::size_t bi = cfg.blocks; bi-- > 0;) {
    const auto& bw = w.blocks[bi];
    const BlockCache& bc = cache.blocks[bi];
    BlockWeights<double*> none;
    const BlockWeights<double*>& gb = gw ? gw->blocks[bi] : none;

    // FFN branch; the residual passes dx straight through.
    StateMatrix du(n, cfg.ffn_dim);
    StateMatrix dg(n, cfg.ffn_dim);
    linear_backward(bc.g, bw.w2, dx, gb.w2, gb.b2, dg);
    for (std::size_t i = 0; i < du.data().size(); ++i) {
      du.data()[i] = dg.data()[i] * gelu_grad(bc.u.data()[i]);
    }
    StateMatrix dc(n, d);
    linear_backward(bc.c, bw.w1, du, gb.w1, gb.b1, dc);
    StateMatrix dmid = dx;
    layer_norm_backward(bc.ln2, bw.ln2_g, dc, gb.ln2_g, gb.ln2_b, dmid);

    if (!attn) {
      dx = std::move(dmid);
      continue;
    }
    StateMatrix dctx(n, d);
    linear_backward(bc.ctx, bw.wo, dmid, gb.wo, gb.bo, dctx);
    StateMatrix dq(n, d), dk(n, d), dv(n, d);
    std::vector<double> dp(n);
    for (std::size_t h = 0; h < cfg.heads; ++h) {
      const StateMatrix& p = bc.probs[h];
      const std::size_t off = h * dh;
      for (std::size_t i = 0; i < n; ++i) {
        double dot = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
          double acc = 0.0;
          for (std::size_t e = 0; e < dh; ++e) acc += dctx.at(i, off + e) * bc.v.at(j, off + e);
          dp[j] = acc;
          dot += p.at(i, j) * acc;
          const double pij = p.at(i, j);
          if (pij != 0.0) {
            for (std::size_t e = 0; e < dh; ++e) dv.at(j, off + e) += pij * dctx.at(i, off + e);
          }
        }
        for (std::size_t j = 0; j < n; ++j) {
          const double ds = p.at(i, j) * (dp[j] - dot) * scale;
          if (ds == 0.0) continue;
          for (std::size_t e = 0; e < dh; ++e) {
            dq.at(i, off + e) += ds * bc.k.at(j, off + e);
            dk.at(j, off + e) += ds * bc.q.at(i, off + e);
          }
        }
      }
    }
    StateMatrix da(n, d);
    linear_backward(bc.a, bw.wq, dq, gb.wq, gb.bq, da);
    linear_backward(bc.a, bw.wk, dk, gb.wk, gb.bk, da);
    linear_backward(bc.a, bw.wv, dv, gb.wv, gb.bv, da);
    dx = std::move(dmid);
    layer_norm_backward(bc.ln1, bw.ln1_g, da, gb.ln1_g, gb.ln1_b, dx);
  }

  if (gw) {
    for (std::size_t i = 0; i < n; ++i) {
      auto g = dx.row(i);
      double* trow = gw->tok + static_cast<std::size_t>(tokens[i]) * d;
      for (std::size_t e = 0; e < d; ++e) trow[e] += g[e];
      if (gw->pos) {
        double* prow = gw->pos + i * d;
        for (std::size_t e = 0; e < d; ++e) prow[e] += g[e];
      }
    }
  }
  return dx;
}

PatchPlan plan_patches(const ModelConfig& cfg, std::size_t n, const Intervention& iv,
                       const ForwardRecord* ref) {
  if (iv.patches.empty()) return {};
  if (ref == nullptr) throw PatchWithoutReference("patches require a reference run");
  if (ref->tokens.size() != n || ref->hidden.size() != cfg.num_layers()) {
    throw PatchWithoutReference("reference run does not match the input");
  }
  PatchPlan plan(cfg.num_layers() + 1);
  for (const StateRef& p : iv.patches) {
    if (p.layer < 1 || p.layer > cfg.num_layers() || p.position >= n) {
      throw InvalidIntervention("patch (" + std::to_string(p.layer) + ", " +
                                std::to_string(p.position) + ") is out of range");
    }
    plan[p.layer].push_back(p.position);
  }
  return plan;
}

void add_noise(const Intervention& iv, StateMatrix& x) {
  if (iv.noise_spans.empty()) return;
  if (!(iv.noise_sigma >= 0.0)) throw InvalidIntervention("noise_sigma must be >= 0");
  std::vector<bool> corrupt(x.rows(), false);
  for (const Span& s : iv.noise_spans) {
    if (s.start >= s.end || s.end > x.rows()) {
      throw InvalidIntervention("noise span [" + std::to_string(s.start) + ", " +
                                std::to_string(s.end) + ") outside the sequence");
    }
    for (std::size_t i = s.start; i < s.end; ++i) corrupt[i] = true;
  }
  Rng rng(iv.noise_seed);
  for (std::size_t i = 0; i < x.rows(); ++i) {
    if (!corrupt[i]) continue;
    for (double& v : x.row(i)) v += iv.noise_sigma * rng.normal();
  }
}

void check_states(const Model& model, std::span<const TokenId> tokens, const StateMatrix& s) {
  if (s.rows() != tokens.size() || s.cols() != model.config().embed_dim) {
    throw ShapeMismatch("layer-1 states do not match the token sequence");
  }
}

}  // namespace

StateMatrix embed(const Model& model, std::span<const TokenId> tokens) {
  const ModelConfig& cfg = model.config();
  check_tokens(cfg, tokens);
  const auto w = bind<const double*>(cfg, model.parameters());
  const std::size_t d = cfg.embed_dim;
  StateMatrix x(tokens.size(), d);
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    auto r = x.row(i);
    const double* t = w.tok + static_cast<std::size_t>(tokens[i]) * d;
    for (std::size_t e = 0; e < d; ++e) r[e] = t[e];
    if (w.pos) {
      const double* p = w.pos + i * d;
      for (std::size_t e = 0; e < d; ++e) r[e] += p[e];
    }
  }
  return x;
}

ForwardRecord forward(const Model& model, std::span<const TokenId> tokens,
                      const Intervention* iv, const ForwardRecord* ref) {
  StateMatrix x = embed(model, tokens);
  if (iv == nullptr) return run_blocks(model, tokens, std::move(x), {}, nullptr, nullptr);
  const PatchPlan plan = plan_patches(model.config(), tokens.size(), *iv, ref);
  add_noise(*iv, x);
  return run_blocks(model, tokens, std::move(x), plan, ref, nullptr);
}

ForwardRecord forward_embedded(const Model& model, std::span<const TokenId> tokens,
                               const StateMatrix& layer1) {
  check_tokens(model.config(), tokens);
  check_states(model, tokens, layer1);
  return run_blocks(model, tokens, layer1, {}, nullptr, nullptr);
}

StateMatrix input_gradient(const Model& model, std::span<const TokenId> tokens,
                           const StateMatrix& layer1, std::size_t cls) {
  check_tokens(model.config(), tokens);
  check_states(model, tokens, layer1);
  ForwardCache cache;
  const ForwardRecord rec = run_blocks(model, tokens, layer1, {}, nullptr, &cache);
  std::vector<double> dlogits(rec.probs.size());
  for (std::size_t c = 0; c < dlogits.size(); ++c) {
    dlogits[c] = rec.probs[cls] * ((c == cls ? 1.0 : 0.0) - rec.probs[c]);
  }
  return run_backward(model, tokens, cache, dlogits, nullptr);
}

GradRecord loss_and_grads(const Model& model, std::span<const LabeledSequence> batch) {
  if (batch.empty()) throw EmptyBatch("loss_and_grads needs at least one sample");
  const ModelConfig& cfg = model.config();
  GradRecord out;
  for (const Tensor& t : model.parameters()) {
    out.grads.push_back({t.name, t.shape, std::vector<double>(t.size(), 0.0)});
  }
  auto gw = bind<double*>(cfg, out.grads);
  const double inv_b = 1.0 / static_cast<double>(batch.size());
  for (const LabeledSequence& s : batch) {
    check_tokens(cfg, s.tokens);
    ForwardCache cache;
    const ForwardRecord rec = run_blocks(model, s.tokens, embed(model, s.tokens), {}, nullptr, &cache);
    const std::size_t y = static_cast<std::size_t>(class_index(s.label));
    out.loss += -std::log(rec.probs[y]) * inv_b;
    std::vector<double> dlogits(rec.probs.size());
    for (std::size_t c = 0; c < dlogits.size(); ++c) {
      dlogits[c] = (rec.probs[c] - (c == y ? 1.0 : 0.0)) * inv_b;
    }
    run_backward(model, s.tokens, cache, dlogits, &gw);
  }
  return out;
}

double loss(const Model& model, std::span<const LabeledSequence> batch) {
  if (batch.empty()) throw EmptyBatch("loss needs at least one sample");
  double total = 0.0;
  for (const LabeledSequence& s : batch) {
    const ForwardRecord rec = forward(model, s.tokens);
    total += -std::log(rec.probs[static_cast<std::size_t>(class_index(s.label))]);
  }
  return total / static_cast<double>(batch.size());
}

}  // namespace rsf::netcore
