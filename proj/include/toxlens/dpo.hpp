#ifndef TOXLENS_DPO_HPP_
#define TOXLENS_DPO_HPP_

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "toxlens/model.hpp"
#include "toxlens/numerics.hpp"
#include "toxlens/rng.hpp"
#include "toxlens/tensor.hpp"

namespace toxlens {

struct PreferenceTriplet {
  std::vector<int> prompt;
  std::vector<int> chosen;
  std::vector<int> rejected;
};

struct DpoConfig {
  double beta = 0.1;        // preference temperature
  double kl_weight = 0.05;  // lambda on the squared logit drift
  double lr = 0.05;
  int epochs = 10;
  double grad_clip_norm = 10.0;
  std::uint64_t seed = 0;
  // Keep the token tables fixed so the preference signal lands in the
  // transformer blocks the attribution analyses read.
  bool freeze_token_tables = true;

  void validate() const {
    if (!(beta > 0.0)) throw Error::validation("bad_config", "dpo beta must be positive");
    if (kl_weight < 0.0) throw Error::validation("bad_config", "kl weight must be >= 0");
    if (!(lr > 0.0)) throw Error::validation("bad_config", "lr must be positive");
    if (epochs < 0) throw Error::validation("bad_config", "epochs must be >= 0");
    if (!(grad_clip_norm > 0.0)) throw Error::validation("bad_config", "grad clip must be positive");
  }
};

// ---------------------------------------------------------------------------
// float64 parameter mirror. Training runs entirely in double so gradient
// checks are clean; the result is materialized back to the float32 bundle
// format at the end.

class DpoParams {
 public:
  explicit DpoParams(const ModelConfig& config) : config_(config) {
    config.validate();
    const std::size_t d = static_cast<std::size_t>(config.d_model);
    const std::size_t dm = static_cast<std::size_t>(config.d_mlp);
    const std::size_t v = static_cast<std::size_t>(config.vocab_size);
    const std::size_t s = static_cast<std::size_t>(config.max_seq);
    std::size_t cursor = 0;
    const auto claim = [&cursor](std::size_t count) {
      const std::size_t at = cursor;
      cursor += count;
      return at;
    };
    embedding_ = claim(v * d);
    positional_ = claim(s * d);
    layers_.resize(static_cast<std::size_t>(config.n_layers));
    for (auto& layer : layers_) {
      layer.ln1_g = claim(d);
      layer.ln1_b = claim(d);
      layer.wq = claim(d * d);
      layer.wk = claim(d * d);
      layer.wv = claim(d * d);
      layer.wo = claim(d * d);
      layer.ln2_g = claim(d);
      layer.ln2_b = claim(d);
      layer.w_key = claim(dm * d);
      layer.w_gate = config.mlp_kind == MlpKind::Gated ? claim(dm * d) : std::size_t(-1);
      layer.w_value = claim(dm * d);
    }
    final_g_ = claim(d);
    final_b_ = claim(d);
    unembedding_ = config.tied_unembedding ? embedding_ : claim(v * d);
    data_.assign(cursor, 0.0);
  }

  static DpoParams from_bundle(const ModelBundle& bundle) {
    bundle.validate();
    DpoParams params(bundle.config);
    const auto copy2 = [&](std::size_t offset, const Tensor2& t) {
      for (std::size_t i = 0; i < t.view().size(); ++i) params.data_[offset + i] = static_cast<double>(t.view()[i]);
    };
    const auto copy1 = [&](std::size_t offset, const Tensor1& t) {
      for (int i = 0; i < t.size(); ++i) params.data_[offset + static_cast<std::size_t>(i)] = static_cast<double>(t[i]);
    };
    copy2(params.embedding_, bundle.embedding);
    copy2(params.positional_, bundle.positional);
    for (int l = 0; l < bundle.config.n_layers; ++l) {
      const LayerWeights& src = bundle.layers[static_cast<std::size_t>(l)];
      const LayerSlots& dst = params.layers_[static_cast<std::size_t>(l)];
      copy1(dst.ln1_g, src.ln_attn.gamma);
      copy1(dst.ln1_b, src.ln_attn.beta);
      copy2(dst.wq, src.attn.wq);
      copy2(dst.wk, src.attn.wk);
      copy2(dst.wv, src.attn.wv);
      copy2(dst.wo, src.attn.wo);
      copy1(dst.ln2_g, src.ln_mlp.gamma);
      copy1(dst.ln2_b, src.ln_mlp.beta);
      copy2(dst.w_key, src.mlp.w_key);
      if (bundle.config.mlp_kind == MlpKind::Gated) copy2(dst.w_gate, src.mlp.w_gate);
      copy2(dst.w_value, src.mlp.w_value);
    }
    copy1(params.final_g_, bundle.final_ln.gamma);
    copy1(params.final_b_, bundle.final_ln.beta);
    if (!bundle.config.tied_unembedding) copy2(params.unembedding_, bundle.unembedding);
    return params;
  }

  ModelBundle to_bundle(const Vocab& vocab) const {
    ModelBundle bundle;
    bundle.config = config_;
    const auto take2 = [&](std::size_t offset, int rows, int cols) {
      std::vector<float> data(static_cast<std::size_t>(rows) * static_cast<std::size_t>(cols));
      for (std::size_t i = 0; i < data.size(); ++i) data[i] = static_cast<float>(data_[offset + i]);
      return Tensor2(rows, cols, std::move(data));
    };
    const auto take1 = [&](std::size_t offset, int n) {
      std::vector<float> data(static_cast<std::size_t>(n));
      for (std::size_t i = 0; i < data.size(); ++i) data[i] = static_cast<float>(data_[offset + i]);
      return Tensor1(std::move(data));
    };
    const int d = config_.d_model;
    const int dm = config_.d_mlp;
    bundle.embedding = take2(embedding_, config_.vocab_size, d);
    bundle.positional = take2(positional_, config_.max_seq, d);
    bundle.layers.resize(static_cast<std::size_t>(config_.n_layers));
    for (int l = 0; l < config_.n_layers; ++l) {
      const LayerSlots& src = layers_[static_cast<std::size_t>(l)];
      LayerWeights& dst = bundle.layers[static_cast<std::size_t>(l)];
      dst.ln_attn = {take1(src.ln1_g, d), take1(src.ln1_b, d)};
      dst.attn = {take2(src.wq, d, d), take2(src.wk, d, d), take2(src.wv, d, d), take2(src.wo, d, d)};
      dst.ln_mlp = {take1(src.ln2_g, d), take1(src.ln2_b, d)};
      dst.mlp.w_key = take2(src.w_key, dm, d);
      if (config_.mlp_kind == MlpKind::Gated) dst.mlp.w_gate = take2(src.w_gate, dm, d);
      dst.mlp.w_value = take2(src.w_value, dm, d);
    }
    bundle.final_ln = {take1(final_g_, d), take1(final_b_, d)};
    if (!config_.tied_unembedding) bundle.unembedding = take2(unembedding_, config_.vocab_size, d);
    bundle.vocab = vocab;
    bundle.validate();
    return bundle;
  }

  struct LayerSlots {
    std::size_t ln1_g, ln1_b, wq, wk, wv, wo, ln2_g, ln2_b, w_key, w_gate, w_value;
  };

  const ModelConfig& config() const { return config_; }
  const std::vector<double>& data() const { return data_; }
  std::vector<double>& data() { return data_; }
  std::size_t size() const { return data_.size(); }

  std::size_t embedding() const { return embedding_; }
  std::size_t positional() const { return positional_; }
  const LayerSlots& layer(int l) const { return layers_[static_cast<std::size_t>(l)]; }
  std::size_t final_g() const { return final_g_; }
  std::size_t final_b() const { return final_b_; }
  std::size_t unembedding() const { return unembedding_; }

 private:
  ModelConfig config_;
  std::vector<double> data_;
  std::size_t embedding_ = 0, positional_ = 0, final_g_ = 0, final_b_ = 0, unembedding_ = 0;
  std::vector<LayerSlots> layers_;
};

// ---------------------------------------------------------------------------
// cached forward pass (double precision)

namespace dpo_detail {

constexpr double kEps = 1e-5;

struct LayerCache {
  std::vector<double> resid_in;                // n x d, input to the block
  std::vector<double> ln1_out, ln1_mean, ln1_inv;
  std::vector<double> q, k, v, ctx;            // n x d
  std::vector<std::vector<double>> probs;      // [head * n + pos] -> pos+1 weights
  std::vector<double> resid_mid;               // n x d, post-attention (pre-MLP)
  std::vector<double> ln2_out, ln2_mean, ln2_inv;
  std::vector<double> pre, gate_lin, scores;   // n x d_mlp
};

struct SeqCache {
  std::vector<int> ids;
  int n = 0;
  std::vector<LayerCache> layers;
  std::vector<double> final_in;                // n x d, post last MLP
  std::vector<double> xf, lnf_mean, lnf_inv;   // normed stream feeding the unembedding
  std::vector<double> logits;                  // n x V
};

inline void layer_norm_rows(const std::vector<double>& x, int n, int d, const double* gamma,
                            const double* beta, std::vector<double>& out, std::vector<double>& means,
                            std::vector<double>& invs) {
  out.resize(x.size());
  means.resize(static_cast<std::size_t>(n));
  invs.resize(static_cast<std::size_t>(n));
  for (int p = 0; p < n; ++p) {
    const double* row = x.data() + static_cast<std::size_t>(p) * static_cast<std::size_t>(d);
    double* dst = out.data() + static_cast<std::size_t>(p) * static_cast<std::size_t>(d);
    double mean = 0.0;
    for (int c = 0; c < d; ++c) mean += row[c];
    mean /= d;
    double var = 0.0;
    for (int c = 0; c < d; ++c) {
      const double diff = row[c] - mean;
      var += diff * diff;
    }
    var /= d;
    const double inv = 1.0 / std::sqrt(var + kEps);
    means[static_cast<std::size_t>(p)] = mean;
    invs[static_cast<std::size_t>(p)] = inv;
    for (int c = 0; c < d; ++c) dst[c] = (row[c] - mean) * inv * gamma[c] + beta[c];
  }
}

// dgamma/dbeta/dx accumulation for one normalized row.
inline void layer_norm_backward_row(const double* x, double mean, double inv, const double* gamma,
                                    const double* dy, int d, double* dx, double* dgamma,
                                    double* dbeta) {
  double s1 = 0.0, s2 = 0.0;
  for (int c = 0; c < d; ++c) {
    const double xhat = (x[c] - mean) * inv;
    dgamma[c] += dy[c] * xhat;
    dbeta[c] += dy[c];
    const double dxhat = dy[c] * gamma[c];
    s1 += dxhat;
    s2 += dxhat * xhat;
  }
  for (int c = 0; c < d; ++c) {
    const double xhat = (x[c] - mean) * inv;
    const double dxhat = dy[c] * gamma[c];
    dx[c] += inv * (dxhat - s1 / d - xhat * s2 / d);
  }
}

// y[r] = sum_c W[r*cols + c] x[c]
inline void matvec_rows(const double* w, const double* x, int rows, int cols, double* y) {
  for (int r = 0; r < rows; ++r) {
    double acc = 0.0;
    const double* row = w + static_cast<std::size_t>(r) * static_cast<std::size_t>(cols);
    for (int c = 0; c < cols; ++c) acc += row[c] * x[c];
    y[r] = acc;
  }
}

inline void forward(const DpoParams& params, std::span<const int> ids, SeqCache& cache) {
  const ModelConfig& config = params.config();
  const int n = static_cast<int>(ids.size());
  const int d = config.d_model;
  const int dm = config.d_mlp;
  const int v_size = config.vocab_size;
  const int heads = config.n_heads;
  const int head_dim = d / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(head_dim));
  const std::vector<double>& w = params.data();

  if (n == 0) throw Error::validation("empty_sequence", "dpo forward needs tokens");
  if (n > config.max_seq) throw Error::validation("sequence_too_long", "sequence exceeds max_seq");
  for (int id : ids) {
    if (id < 0 || id >= v_size) throw Error::validation("token_out_of_range", "token id out of range");
  }

  cache.ids.assign(ids.begin(), ids.end());
  cache.n = n;
  cache.layers.assign(static_cast<std::size_t>(config.n_layers), {});

  std::vector<double> x(static_cast<std::size_t>(n) * static_cast<std::size_t>(d));
  for (int p = 0; p < n; ++p) {
    const double* emb = w.data() + params.embedding() + static_cast<std::size_t>(ids[static_cast<std::size_t>(p)]) * static_cast<std::size_t>(d);
    const double* pos = w.data() + params.positional() + static_cast<std::size_t>(p) * static_cast<std::size_t>(d);
    double* dst = x.data() + static_cast<std::size_t>(p) * static_cast<std::size_t>(d);
    for (int c = 0; c < d; ++c) dst[c] = emb[c] + pos[c];
  }

  for (int l = 0; l < config.n_layers; ++l) {
    LayerCache& lc = cache.layers[static_cast<std::size_t>(l)];
    const DpoParams::LayerSlots& slots = params.layer(l);
    lc.resid_in = x;

    layer_norm_rows(lc.resid_in, n, d, w.data() + slots.ln1_g, w.data() + slots.ln1_b, lc.ln1_out,
                    lc.ln1_mean, lc.ln1_inv);

    lc.q.resize(x.size());
    lc.k.resize(x.size());
    lc.v.resize(x.size());
    for (int p = 0; p < n; ++p) {
      const double* a = lc.ln1_out.data() + static_cast<std::size_t>(p) * static_cast<std::size_t>(d);
      matvec_rows(w.data() + slots.wq, a, d, d, lc.q.data() + static_cast<std::size_t>(p) * static_cast<std::size_t>(d));
      matvec_rows(w.data() + slots.wk, a, d, d, lc.k.data() + static_cast<std::size_t>(p) * static_cast<std::size_t>(d));
      matvec_rows(w.data() + slots.wv, a, d, d, lc.v.data() + static_cast<std::size_t>(p) * static_cast<std::size_t>(d));
    }

    lc.ctx.assign(x.size(), 0.0);
    lc.probs.assign(static_cast<std::size_t>(heads) * static_cast<std::size_t>(n), {});
    for (int h = 0; h < heads; ++h) {
      const int base = h * head_dim;
      for (int p = 0; p < n; ++p) {
        std::vector<double>& probs = lc.probs[static_cast<std::size_t>(h) * static_cast<std::size_t>(n) + static_cast<std::size_t>(p)];
        probs.resize(static_cast<std::size_t>(p) + 1);
        double max_s = -1e300;
        for (int j = 0; j <= p; ++j) {
          const double* qp = lc.q.data() + static_cast<std::size_t>(p) * static_cast<std::size_t>(d) + base;
          const double* kj = lc.k.data() + static_cast<std::size_t>(j) * static_cast<std::size_t>(d) + base;
          double s = 0.0;
          for (int c = 0; c < head_dim; ++c) s += qp[c] * kj[c];
          s *= scale;
          probs[static_cast<std::size_t>(j)] = s;
          max_s = std::max(max_s, s);
        }
        double sum = 0.0;
        for (double& p_j : probs) {
          p_j = std::exp(p_j - max_s);
          sum += p_j;
        }
        for (double& p_j : probs) p_j /= sum;
        double* ctx = lc.ctx.data() + static_cast<std::size_t>(p) * static_cast<std::size_t>(d) + base;
        for (int j = 0; j <= p; ++j) {
          const double* vj = lc.v.data() + static_cast<std::size_t>(j) * static_cast<std::size_t>(d) + base;
          const double pw = probs[static_cast<std::size_t>(j)];
          for (int c = 0; c < head_dim; ++c) ctx[c] += pw * vj[c];
        }
      }
    }

    lc.resid_mid.resize(x.size());
    std::vector<double> attn_out(static_cast<std::size_t>(d));
    for (int p = 0; p < n; ++p) {
      matvec_rows(w.data() + slots.wo, lc.ctx.data() + static_cast<std::size_t>(p) * static_cast<std::size_t>(d), d, d, attn_out.data());
      const double* in = lc.resid_in.data() + static_cast<std::size_t>(p) * static_cast<std::size_t>(d);
      double* mid = lc.resid_mid.data() + static_cast<std::size_t>(p) * static_cast<std::size_t>(d);
      for (int c = 0; c < d; ++c) mid[c] = in[c] + attn_out[c];
    }

    layer_norm_rows(lc.resid_mid, n, d, w.data() + slots.ln2_g, w.data() + slots.ln2_b, lc.ln2_out,
                    lc.ln2_mean, lc.ln2_inv);

    lc.pre.resize(static_cast<std::size_t>(n) * static_cast<std::size_t>(dm));
    lc.scores.resize(lc.pre.size());
    if (config.mlp_kind == MlpKind::Gated) lc.gate_lin.resize(lc.pre.size());
    for (int p = 0; p < n; ++p) {
      const double* h = lc.ln2_out.data() + static_cast<std::size_t>(p) * static_cast<std::size_t>(d);
      double* pre = lc.pre.data() + static_cast<std::size_t>(p) * static_cast<std::size_t>(dm);
      double* score = lc.scores.data() + static_cast<std::size_t>(p) * static_cast<std::size_t>(dm);
      matvec_rows(w.data() + slots.w_key, h, dm, d, pre);
      if (config.mlp_kind == MlpKind::Gated) {
        double* gate_lin = lc.gate_lin.data() + static_cast<std::size_t>(p) * static_cast<std::size_t>(dm);
        matvec_rows(w.data() + slots.w_gate, h, dm, d, gate_lin);
        for (int i = 0; i < dm; ++i) {
          score[i] = apply_activation_f64(config.activation, pre[i]) * gate_lin[i];
        }
      } else {
        for (int i = 0; i < dm; ++i) score[i] = apply_activation_f64(config.activation, pre[i]);
      }
      double* out = x.data() + static_cast<std::size_t>(p) * static_cast<std::size_t>(d);
      const double* mid = lc.resid_mid.data() + static_cast<std::size_t>(p) * static_cast<std::size_t>(d);
      for (int c = 0; c < d; ++c) out[c] = mid[c];
      for (int i = 0; i < dm; ++i) {
        const double* vrow = w.data() + slots.w_value + static_cast<std::size_t>(i) * static_cast<std::size_t>(d);
        const double m = score[i];
        for (int c = 0; c < d; ++c) out[c] += m * vrow[c];
      }
    }
  }

  cache.final_in = x;
  if (config.final_norm) {
    layer_norm_rows(cache.final_in, n, d, w.data() + params.final_g(), w.data() + params.final_b(),
                    cache.xf, cache.lnf_mean, cache.lnf_inv);
  } else {
    cache.xf = cache.final_in;
  }

  cache.logits.resize(static_cast<std::size_t>(n) * static_cast<std::size_t>(v_size));
  for (int p = 0; p < n; ++p) {
    matvec_rows(w.data() + params.unembedding(), cache.xf.data() + static_cast<std::size_t>(p) * static_cast<std::size_t>(d),
                v_size, d, cache.logits.data() + static_cast<std::size_t>(p) * static_cast<std::size_t>(v_size));
  }
}

// Gradients flow from per-position logit gradients back to every parameter.
inline void backward(const DpoParams& params, const SeqCache& cache,
                     const std::vector<double>& dlogits, std::vector<double>& grad) {
  const ModelConfig& config = params.config();
  const int n = cache.n;
  const int d = config.d_model;
  const int dm = config.d_mlp;
  const int v_size = config.vocab_size;
  const int heads = config.n_heads;
  const int head_dim = d / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(head_dim));
  const std::vector<double>& w = params.data();

  std::vector<double> dxf(static_cast<std::size_t>(n) * static_cast<std::size_t>(d), 0.0);
  for (int p = 0; p < n; ++p) {
    const double* dl = dlogits.data() + static_cast<std::size_t>(p) * static_cast<std::size_t>(v_size);
    const double* xf = cache.xf.data() + static_cast<std::size_t>(p) * static_cast<std::size_t>(d);
    double* dx = dxf.data() + static_cast<std::size_t>(p) * static_cast<std::size_t>(d);
    for (int t = 0; t < v_size; ++t) {
      const double g = dl[t];
      if (g == 0.0) continue;
      const double* urow = w.data() + params.unembedding() + static_cast<std::size_t>(t) * static_cast<std::size_t>(d);
      double* gu = grad.data() + params.unembedding() + static_cast<std::size_t>(t) * static_cast<std::size_t>(d);
      for (int c = 0; c < d; ++c) {
        dx[c] += g * urow[c];
        gu[c] += g * xf[c];
      }
    }
  }

  std::vector<double> dx(static_cast<std::size_t>(n) * static_cast<std::size_t>(d), 0.0);
  if (config.final_norm) {
    for (int p = 0; p < n; ++p) {
      layer_norm_backward_row(cache.final_in.data() + static_cast<std::size_t>(p) * static_cast<std::size_t>(d),
                              cache.lnf_mean[static_cast<std::size_t>(p)], cache.lnf_inv[static_cast<std::size_t>(p)],
                              w.data() + params.final_g(),
                              dxf.data() + static_cast<std::size_t>(p) * static_cast<std::size_t>(d), d,
                              dx.data() + static_cast<std::size_t>(p) * static_cast<std::size_t>(d),
                              grad.data() + params.final_g(), grad.data() + params.final_b());
    }
  } else {
    dx = dxf;
  }

  std::vector<double> dmid(static_cast<std::size_t>(n) * static_cast<std::size_t>(d));
  std::vector<double> dh(static_cast<std::size_t>(d));
  std::vector<double> dctx(static_cast<std::size_t>(n) * static_cast<std::size_t>(d));
  std::vector<double> dq(static_cast<std::size_t>(n) * static_cast<std::size_t>(d));
  std::vector<double> dk(static_cast<std::size_t>(n) * static_cast<std::size_t>(d));
  std::vector<double> dv(static_cast<std::size_t>(n) * static_cast<std::size_t>(d));
  std::vector<double> da(static_cast<std::size_t>(n) * static_cast<std::size_t>(d));

  for (int l = config.n_layers - 1; l >= 0; --l) {
    const LayerCache& lc = cache.layers[static_cast<std::size_t>(l)];
    const DpoParams::LayerSlots& slots = params.layer(l);

    // MLP block: x_out = resid_mid + sum_i m_i v_i
    dmid = dx;  // residual passthrough
    for (int p = 0; p < n; ++p) {
      const double* dout = dx.data() + static_cast<std::size_t>(p) * static_cast<std::size_t>(d);
      const double* score = lc.scores.data() + static_cast<std::size_t>(p) * static_cast<std::size_t>(dm);
      const double* pre = lc.pre.data() + static_cast<std::size_t>(p) * static_cast<std::size_t>(dm);
      const double* h = lc.ln2_out.data() + static_cast<std::size_t>(p) * static_cast<std::size_t>(d);
      std::fill(dh.begin(), dh.end(), 0.0);
      for (int i = 0; i < dm; ++i) {
        const double* vrow = w.data() + slots.w_value + static_cast<std::size_t>(i) * static_cast<std::size_t>(d);
        double* gv = grad.data() + slots.w_value + static_cast<std::size_t>(i) * static_cast<std::size_t>(d);
        double dm_i = 0.0;
        for (int c = 0; c < d; ++c) {
          dm_i += dout[c] * vrow[c];
          gv[c] += score[i] * dout[c];
        }
        double dpre_i;
        if (config.mlp_kind == MlpKind::Gated) {
          const double gate = apply_activation_f64(config.activation, pre[i]);
          const double lin = lc.gate_lin[static_cast<std::size_t>(p) * static_cast<std::size_t>(dm) + static_cast<std::size_t>(i)];
          dpre_i = dm_i * lin * activation_derivative_f64(config.activation, pre[i]);
          const double dlin = dm_i * gate;
          const double* grow = w.data() + slots.w_gate + static_cast<std::size_t>(i) * static_cast<std::size_t>(d);
          double* gg = grad.data() + slots.w_gate + static_cast<std::size_t>(i) * static_cast<std::size_t>(d);
          for (int c = 0; c < d; ++c) {
            gg[c] += dlin * h[c];
            dh[static_cast<std::size_t>(c)] += dlin * grow[c];
          }
        } else {
          dpre_i = dm_i * activation_derivative_f64(config.activation, pre[i]);
        }
        const double* krow = w.data() + slots.w_key + static_cast<std::size_t>(i) * static_cast<std::size_t>(d);
        double* gk = grad.data() + slots.w_key + static_cast<std::size_t>(i) * static_cast<std::size_t>(d);
        for (int c = 0; c < d; ++c) {
          gk[c] += dpre_i * h[c];
          dh[static_cast<std::size_t>(c)] += dpre_i * krow[c];
        }
      }
      layer_norm_backward_row(lc.resid_mid.data() + static_cast<std::size_t>(p) * static_cast<std::size_t>(d),
                              lc.ln2_mean[static_cast<std::size_t>(p)], lc.ln2_inv[static_cast<std::size_t>(p)],
                              w.data() + slots.ln2_g, dh.data(), d,
                              dmid.data() + static_cast<std::size_t>(p) * static_cast<std::size_t>(d),
                              grad.data() + slots.ln2_g, grad.data() + slots.ln2_b);
    }

    // attention block: resid_mid = resid_in + Wo ctx
    std::fill(dctx.begin(), dctx.end(), 0.0);
    for (int p = 0; p < n; ++p) {
      const double* dmid_p = dmid.data() + static_cast<std::size_t>(p) * static_cast<std::size_t>(d);
      const double* ctx = lc.ctx.data() + static_cast<std::size_t>(p) * static_cast<std::size_t>(d);
      double* dctx_p = dctx.data() + static_cast<std::size_t>(p) * static_cast<std::size_t>(d);
      for (int r = 0; r < d; ++r) {
        const double g = dmid_p[r];
        if (g == 0.0) continue;
        const double* wo_row = w.data() + slots.wo + static_cast<std::size_t>(r) * static_cast<std::size_t>(d);
        double* gwo = grad.data() + slots.wo + static_cast<std::size_t>(r) * static_cast<std::size_t>(d);
        for (int c = 0; c < d; ++c) {
          dctx_p[c] += g * wo_row[c];
          gwo[c] += g * ctx[c];
        }
      }
    }

    std::fill(dq.begin(), dq.end(), 0.0);
    std::fill(dk.begin(), dk.end(), 0.0);
    std::fill(dv.begin(), dv.end(), 0.0);
    std::vector<double> dprobs;
    for (int h = 0; h < heads; ++h) {
      const int base = h * head_dim;
      for (int p = 0; p < n; ++p) {
        const std::vector<double>& probs = lc.probs[static_cast<std::size_t>(h) * static_cast<std::size_t>(n) + static_cast<std::size_t>(p)];
        const double* dctx_p = dctx.data() + static_cast<std::size_t>(p) * static_cast<std::size_t>(d) + base;
        dprobs.assign(static_cast<std::size_t>(p) + 1, 0.0);
        for (int j = 0; j <= p; ++j) {
          const double* vj = lc.v.data() + static_cast<std::size_t>(j) * static_cast<std::size_t>(d) + base;
          double* dvj = dv.data() + static_cast<std::size_t>(j) * static_cast<std::size_t>(d) + base;
          const double pw = probs[static_cast<std::size_t>(j)];
          double acc = 0.0;
          for (int c = 0; c < head_dim; ++c) {
            acc += dctx_p[c] * vj[c];
            dvj[c] += pw * dctx_p[c];
          }
          dprobs[static_cast<std::size_t>(j)] = acc;
        }
        double inner = 0.0;
        for (int j = 0; j <= p; ++j) inner += dprobs[static_cast<std::size_t>(j)] * probs[static_cast<std::size_t>(j)];
        const double* qp = lc.q.data() + static_cast<std::size_t>(p) * static_cast<std::size_t>(d) + base;
        double* dqp = dq.data() + static_cast<std::size_t>(p) * static_cast<std::size_t>(d) + base;
        for (int j = 0; j <= p; ++j) {
          const double dscore = probs[static_cast<std::size_t>(j)] * (dprobs[static_cast<std::size_t>(j)] - inner) * scale;
          const double* kj = lc.k.data() + static_cast<std::size_t>(j) * static_cast<std::size_t>(d) + base;
          double* dkj = dk.data() + static_cast<std::size_t>(j) * static_cast<std::size_t>(d) + base;
          for (int c = 0; c < head_dim; ++c) {
            dqp[c] += dscore * kj[c];
            dkj[c] += dscore * qp[c];
          }
        }
      }
    }

    std::fill(da.begin(), da.end(), 0.0);
    const auto proj_backward = [&](std::size_t w_slot, const std::vector<double>& dout) {
      for (int p = 0; p < n; ++p) {
        const double* a = lc.ln1_out.data() + static_cast<std::size_t>(p) * static_cast<std::size_t>(d);
        const double* dout_p = dout.data() + static_cast<std::size_t>(p) * static_cast<std::size_t>(d);
        double* da_p = da.data() + static_cast<std::size_t>(p) * static_cast<std::size_t>(d);
        for (int r = 0; r < d; ++r) {
          const double g = dout_p[r];
          if (g == 0.0) continue;
          const double* wrow = w.data() + w_slot + static_cast<std::size_t>(r) * static_cast<std::size_t>(d);
          double* gw = grad.data() + w_slot + static_cast<std::size_t>(r) * static_cast<std::size_t>(d);
          for (int c = 0; c < d; ++c) {
            da_p[c] += g * wrow[c];
            gw[c] += g * a[c];
          }
        }
      }
    };
    proj_backward(slots.wq, dq);
    proj_backward(slots.wk, dk);
    proj_backward(slots.wv, dv);

    // dx for the next (lower) layer: residual passthrough + LN1 backward
    dx = dmid;
    for (int p = 0; p < n; ++p) {
      layer_norm_backward_row(lc.resid_in.data() + static_cast<std::size_t>(p) * static_cast<std::size_t>(d),
                              lc.ln1_mean[static_cast<std::size_t>(p)], lc.ln1_inv[static_cast<std::size_t>(p)],
                              w.data() + slots.ln1_g, da.data() + static_cast<std::size_t>(p) * static_cast<std::size_t>(d), d,
                              dx.data() + static_cast<std::size_t>(p) * static_cast<std::size_t>(d),
                              grad.data() + slots.ln1_g, grad.data() + slots.ln1_b);
    }
  }

  for (int p = 0; p < n; ++p) {
    const double* dx_p = dx.data() + static_cast<std::size_t>(p) * static_cast<std::size_t>(d);
    double* gemb = grad.data() + params.embedding() +
                   static_cast<std::size_t>(cache.ids[static_cast<std::size_t>(p)]) * static_cast<std::size_t>(d);
    double* gpos = grad.data() + params.positional() + static_cast<std::size_t>(p) * static_cast<std::size_t>(d);
    for (int c = 0; c < d; ++c) {
      gemb[c] += dx_p[c];
      gpos[c] += dx_p[c];
    }
  }
}

inline double seq_logprob_from_cache(const SeqCache& cache, int prompt_len, int v_size) {
  double total = 0.0;
  for (int j = prompt_len; j < cache.n; ++j) {
    const double* row = cache.logits.data() + static_cast<std::size_t>(j - 1) * static_cast<std::size_t>(v_size);
    double max_val = row[0];
    for (int t = 1; t < v_size; ++t) max_val = std::max(max_val, row[t]);
    double sum = 0.0;
    for (int t = 0; t < v_size; ++t) sum += std::exp(row[t] - max_val);
    total += row[cache.ids[static_cast<std::size_t>(j)]] - max_val - std::log(sum);
  }
  return total;
}

}  // namespace dpo_detail

// ---------------------------------------------------------------------------
// public operations

// log pi(y | x) on the float32 inference path: sum over continuation
// positions of the realized token's log-softmax probability.
inline double sequence_logprob(const ModelBundle& bundle, std::span<const int> prompt,
                               std::span<const int> continuation) {
  if (prompt.empty() || continuation.empty()) {
    throw Error::validation("empty_sequence", "prompt and continuation must be nonempty");
  }
  std::vector<int> seq(prompt.begin(), prompt.end());
  seq.insert(seq.end(), continuation.begin(), continuation.end());
  const ForwardTrace trace = forward_traced(bundle, seq);
  double total = 0.0;
  for (std::size_t j = prompt.size(); j < seq.size(); ++j) {
    const auto logp = log_softmax_f64(trace.logits[j - 1].view());
    total += logp[static_cast<std::size_t>(seq[j])];
  }
  return total;
}

struct TripletWork {
  std::vector<int> chosen_seq, rejected_seq;
  int prompt_len = 0;
  double ref_lp_chosen = 0.0, ref_lp_rejected = 0.0;
  std::vector<double> ref_logits_chosen;  // full logit rows of the chosen sequence
};

inline TripletWork prepare_triplet(const DpoParams& reference, const PreferenceTriplet& triplet) {
  if (triplet.prompt.empty() || triplet.chosen.empty() || triplet.rejected.empty()) {
    throw Error::validation("bad_triplet", "prompt and both continuations must be nonempty");
  }
  TripletWork work;
  work.prompt_len = static_cast<int>(triplet.prompt.size());
  work.chosen_seq = triplet.prompt;
  work.chosen_seq.insert(work.chosen_seq.end(), triplet.chosen.begin(), triplet.chosen.end());
  work.rejected_seq = triplet.prompt;
  work.rejected_seq.insert(work.rejected_seq.end(), triplet.rejected.begin(), triplet.rejected.end());

  dpo_detail::SeqCache cache;
  dpo_detail::forward(reference, work.chosen_seq, cache);
  work.ref_lp_chosen = dpo_detail::seq_logprob_from_cache(cache, work.prompt_len, reference.config().vocab_size);
  work.ref_logits_chosen = cache.logits;
  dpo_detail::forward(reference, work.rejected_seq, cache);
  work.ref_lp_rejected = dpo_detail::seq_logprob_from_cache(cache, work.prompt_len, reference.config().vocab_size);
  return work;
}

// -log sigmoid(beta ((lp_c - ref_c) - (lp_r - ref_r))) plus the lambda
// drift penalty: mean squared policy-vs-reference logit difference over the
// chosen continuation's scored positions.
inline double dpo_loss_grad(const DpoParams& policy, const TripletWork& work, double beta,
                            double lambda, std::vector<double>* grad) {
  const ModelConfig& config = policy.config();
  const int v_size = config.vocab_size;

  dpo_detail::SeqCache chosen, rejected;
  dpo_detail::forward(policy, work.chosen_seq, chosen);
  dpo_detail::forward(policy, work.rejected_seq, rejected);
  const double lp_chosen = dpo_detail::seq_logprob_from_cache(chosen, work.prompt_len, v_size);
  const double lp_rejected = dpo_detail::seq_logprob_from_cache(rejected, work.prompt_len, v_size);

  const double margin = beta * ((lp_chosen - work.ref_lp_chosen) - (lp_rejected - work.ref_lp_rejected));
  // softplus(-margin) = -log sigmoid(margin)
  double loss = margin > 0.0 ? std::log1p(std::exp(-margin)) : -margin + std::log1p(std::exp(margin));

  const int n_chosen = chosen.n;
  const int scored = n_chosen - work.prompt_len;
  const double kl_norm = lambda > 0.0 ? lambda / (static_cast<double>(scored) * static_cast<double>(v_size)) : 0.0;
  if (lambda > 0.0) {
    double drift = 0.0;
    for (int j = work.prompt_len; j < n_chosen; ++j) {
      const std::size_t row = static_cast<std::size_t>(j - 1) * static_cast<std::size_t>(v_size);
      for (int t = 0; t < v_size; ++t) {
        const double diff = chosen.logits[row + static_cast<std::size_t>(t)] -
                            work.ref_logits_chosen[row + static_cast<std::size_t>(t)];
        drift += diff * diff;
      }
    }
    loss += kl_norm * drift;
  }

  if (grad != nullptr) {
    const double dmargin = -beta * detail::sigmoid_f64(-margin);  // dL/d lp_chosen
    const auto seed_dlogits = [v_size](const dpo_detail::SeqCache& cache, int prompt_len, double coeff,
                                       std::vector<double>& dlogits) {
      for (int j = prompt_len; j < cache.n; ++j) {
        const std::size_t row = static_cast<std::size_t>(j - 1) * static_cast<std::size_t>(v_size);
        const double* logits = cache.logits.data() + row;
        double max_val = logits[0];
        for (int t = 1; t < v_size; ++t) max_val = std::max(max_val, logits[t]);
        double sum = 0.0;
        for (int t = 0; t < v_size; ++t) sum += std::exp(logits[t] - max_val);
        for (int t = 0; t < v_size; ++t) {
          const double p = std::exp(logits[t] - max_val) / sum;
          dlogits[row + static_cast<std::size_t>(t)] += coeff * ((cache.ids[static_cast<std::size_t>(j)] == t ? 1.0 : 0.0) - p);
        }
      }
    };

    std::vector<double> dlogits_chosen(chosen.logits.size(), 0.0);
    seed_dlogits(chosen, work.prompt_len, dmargin, dlogits_chosen);
    if (lambda > 0.0) {
      for (int j = work.prompt_len; j < n_chosen; ++j) {
        const std::size_t row = static_cast<std::size_t>(j - 1) * static_cast<std::size_t>(v_size);
        for (int t = 0; t < v_size; ++t) {
          const double diff = chosen.logits[row + static_cast<std::size_t>(t)] -
                              work.ref_logits_chosen[row + static_cast<std::size_t>(t)];
          dlogits_chosen[row + static_cast<std::size_t>(t)] += 2.0 * kl_norm * diff;
        }
      }
    }
    dpo_detail::backward(policy, chosen, dlogits_chosen, *grad);

    std::vector<double> dlogits_rejected(rejected.logits.size(), 0.0);
    seed_dlogits(rejected, work.prompt_len, -dmargin, dlogits_rejected);
    dpo_detail::backward(policy, rejected, dlogits_rejected, *grad);
  }
  return loss;
}

// Convenience overload on bundles (no gradient), matching the loss the
// trainer optimizes.
inline double dpo_loss(const ModelBundle& policy, const ModelBundle& reference,
                       const PreferenceTriplet& triplet, double beta, double lambda = 0.0) {
  if (policy.config != reference.config) {
    throw Error::validation("config_mismatch", "policy and reference must share a config");
  }
  const DpoParams policy_params = DpoParams::from_bundle(policy);
  const DpoParams reference_params = DpoParams::from_bundle(reference);
  const TripletWork work = prepare_triplet(reference_params, triplet);
  return dpo_loss_grad(policy_params, work, beta, lambda, nullptr);
}

struct DpoResult {
  ModelBundle post;
  std::vector<double> epoch_loss;        // mean per-step loss within each epoch
  std::vector<double> initial_losses;    // per triplet, before any update
  double final_mean_loss = 0.0;          // evaluated after training
};

inline double ensure_finite_loss(double loss, const std::string& context) {
  if (!std::isfinite(loss)) {
    throw Error::numeric("non_finite_loss", "dpo loss diverged at " + context);
  }
  return loss;
}

inline PreferenceTriplet encode_pair(const Vocab& vocab, const PreferencePair& pair) {
  PreferenceTriplet triplet;
  triplet.prompt = vocab.encode(pair.prompt);
  triplet.chosen = vocab.encode(pair.chosen);
  triplet.rejected = vocab.encode(pair.rejected);
  return triplet;
}

inline DpoResult train_dpo(const ModelBundle& pre_bundle, std::span<const PreferenceTriplet> triplets,
                           const DpoConfig& config) {
  config.validate();
  if (triplets.empty()) throw Error::validation("bad_triplet", "training needs at least one triplet");

  DpoParams policy = DpoParams::from_bundle(pre_bundle);
  const DpoParams reference = policy;  // frozen copy

  std::vector<TripletWork> work;
  work.reserve(triplets.size());
  for (const PreferenceTriplet& triplet : triplets) work.push_back(prepare_triplet(reference, triplet));

  DpoResult result;
  for (std::size_t i = 0; i < work.size(); ++i) {
    result.initial_losses.push_back(ensure_finite_loss(
        dpo_loss_grad(policy, work[i], config.beta, config.kl_weight, nullptr),
        "initial evaluation, triplet " + std::to_string(i)));
  }

  Rng rng(config.seed ^ 0x44504fULL);
  std::vector<int> order(work.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);

  const ModelConfig& mc = pre_bundle.config;
  const std::size_t d = static_cast<std::size_t>(mc.d_model);
  const auto zero_frozen = [&](std::vector<double>& grad) {
    if (!config.freeze_token_tables) return;
    const auto zero_range = [&grad](std::size_t at, std::size_t count) {
      std::fill(grad.begin() + static_cast<std::ptrdiff_t>(at),
                grad.begin() + static_cast<std::ptrdiff_t>(at + count), 0.0);
    };
    zero_range(policy.embedding(), static_cast<std::size_t>(mc.vocab_size) * d);
    zero_range(policy.positional(), static_cast<std::size_t>(mc.max_seq) * d);
    if (!mc.tied_unembedding) zero_range(policy.unembedding(), static_cast<std::size_t>(mc.vocab_size) * d);
  };

  std::vector<double> grad(policy.size(), 0.0);
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    rng.shuffle(order);
    double epoch_sum = 0.0;
    for (int index : order) {
      std::fill(grad.begin(), grad.end(), 0.0);
      const double loss = ensure_finite_loss(
          dpo_loss_grad(policy, work[static_cast<std::size_t>(index)], config.beta, config.kl_weight, &grad),
          "epoch " + std::to_string(epoch) + ", triplet " + std::to_string(index));
      epoch_sum += loss;
      zero_frozen(grad);
      double norm_sq = 0.0;
      for (double g : grad) norm_sq += g * g;
      const double norm = std::sqrt(norm_sq);
      const double step = norm > config.grad_clip_norm ? config.lr * config.grad_clip_norm / norm : config.lr;
      std::vector<double>& data = policy.data();
      for (std::size_t i = 0; i < data.size(); ++i) data[i] -= step * grad[i];
    }
    result.epoch_loss.push_back(epoch_sum / static_cast<double>(work.size()));
  }

  double final_sum = 0.0;
  for (const TripletWork& item : work) {
    final_sum += dpo_loss_grad(policy, item, config.beta, config.kl_weight, nullptr);
  }
  result.final_mean_loss = final_sum / static_cast<double>(work.size());
  result.post = policy.to_bundle(pre_bundle.vocab);
  return result;
}

}  // namespace toxlens

#endif  // TOXLENS_DPO_HPP_
