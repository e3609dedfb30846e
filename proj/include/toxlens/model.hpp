#ifndef TOXLENS_MODEL_HPP_
#define TOXLENS_MODEL_HPP_

#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "toxlens/error.hpp"
#include "toxlens/numerics.hpp"
#include "toxlens/tensor.hpp"
#include "toxlens/textio.hpp"

namespace toxlens {

// ---------------------------------------------------------------------------
// configuration

enum class MlpKind { Plain, Gated };

inline const char* to_string(MlpKind kind) { return kind == MlpKind::Plain ? "plain" : "gated"; }

inline MlpKind mlp_kind_from_string(const std::string& name) {
  if (name == "plain") return MlpKind::Plain;
  if (name == "gated") return MlpKind::Gated;
  throw Error::validation("bad_mlp_kind", "unknown mlp kind: " + name);
}

struct ModelConfig {
  int n_layers = 1;
  int d_model = 2;
  int d_mlp = 1;
  int n_heads = 1;
  int vocab_size = 2;
  int max_seq = 1;
  MlpKind mlp_kind = MlpKind::Plain;
  ActivationKind activation = ActivationKind::GeluExact;
  bool tied_unembedding = false;
  // Test bundles may bypass the final normalization so unembedding stays
  // linear in the residual stream.
  bool final_norm = true;

  void validate() const {
    if (n_layers < 1 || d_model < 2 || d_mlp < 1 || n_heads < 1 || vocab_size < 2 || max_seq < 1) {
      throw Error::validation("bad_config", "all model dimensions must be positive (d_model >= 2, vocab >= 2)");
    }
    if (d_model % n_heads != 0) {
      throw Error::validation("bad_config", "d_model must be divisible by n_heads");
    }
  }

  bool operator==(const ModelConfig&) const = default;
};

// ---------------------------------------------------------------------------
// weights

struct NormWeights {
  Tensor1 gamma;
  Tensor1 beta;
};

struct AttentionWeights {
  Tensor2 wq, wk, wv, wo;  // each d x d, rows index the output coordinate
};

struct MlpWeights {
  Tensor2 w_key;    // d_mlp x d, row i is k_i
  Tensor2 w_value;  // d_mlp x d, row i is v_i
  Tensor2 w_gate;   // d_mlp x d, row i is w_i (Gated only; empty for Plain)
};

struct LayerWeights {
  NormWeights ln_attn;
  NormWeights ln_mlp;
  AttentionWeights attn;
  MlpWeights mlp;
};

struct ModelBundle {
  ModelConfig config;
  Tensor2 embedding;   // V x d
  Tensor2 positional;  // max_seq x d
  std::vector<LayerWeights> layers;
  NormWeights final_ln;
  Tensor2 unembedding;  // V x d; unused when tied
  Vocab vocab;

  const Tensor2& unembed() const { return config.tied_unembedding ? embedding : unembedding; }

  void validate() const {
    config.validate();
    const auto expect = [](const Tensor2& t, int rows, int cols, const char* name) {
      if (t.rows() != rows || t.cols() != cols) {
        throw Error::validation("shape_mismatch", std::string(name) + " shape is inconsistent with config");
      }
    };
    const auto expect1 = [](const Tensor1& t, int n, const char* name) {
      if (t.size() != n) {
        throw Error::validation("shape_mismatch", std::string(name) + " length is inconsistent with config");
      }
    };
    expect(embedding, config.vocab_size, config.d_model, "embedding");
    expect(positional, config.max_seq, config.d_model, "positional");
    if (static_cast<int>(layers.size()) != config.n_layers) {
      throw Error::validation("shape_mismatch", "layer count does not match config");
    }
    for (const LayerWeights& layer : layers) {
      expect1(layer.ln_attn.gamma, config.d_model, "ln_attn.gamma");
      expect1(layer.ln_attn.beta, config.d_model, "ln_attn.beta");
      expect1(layer.ln_mlp.gamma, config.d_model, "ln_mlp.gamma");
      expect1(layer.ln_mlp.beta, config.d_model, "ln_mlp.beta");
      expect(layer.attn.wq, config.d_model, config.d_model, "attn.wq");
      expect(layer.attn.wk, config.d_model, config.d_model, "attn.wk");
      expect(layer.attn.wv, config.d_model, config.d_model, "attn.wv");
      expect(layer.attn.wo, config.d_model, config.d_model, "attn.wo");
      expect(layer.mlp.w_key, config.d_mlp, config.d_model, "mlp.w_key");
      expect(layer.mlp.w_value, config.d_mlp, config.d_model, "mlp.w_value");
      if (config.mlp_kind == MlpKind::Gated) {
        expect(layer.mlp.w_gate, config.d_mlp, config.d_model, "mlp.w_gate");
      } else if (!layer.mlp.w_gate.empty()) {
        throw Error::validation("shape_mismatch", "plain MLP must not carry a gate matrix");
      }
    }
    expect1(final_ln.gamma, config.d_model, "final_ln.gamma");
    expect1(final_ln.beta, config.d_model, "final_ln.beta");
    if (!config.tied_unembedding) expect(unembedding, config.vocab_size, config.d_model, "unembedding");
    if (vocab.size() != config.vocab_size) {
      throw Error::validation("shape_mismatch", "vocab size does not match config");
    }
  }
};

// ---------------------------------------------------------------------------
// MLP decomposition: one write per neuron, scores m_i scaling value rows v_i

struct MlpResult {
  Tensor1 output;  // length d
  Tensor1 scores;  // length d_mlp
};

inline Tensor1 mlp_scores(const MlpWeights& w, const Tensor1& x, MlpKind kind, ActivationKind act) {
  if (w.w_key.cols() != x.size()) throw Error::validation("shape_mismatch", "mlp input length != d");
  const int d_mlp = w.w_key.rows();
  Tensor1 scores(d_mlp);
  for (int i = 0; i < d_mlp; ++i) {
    const double pre = dot(w.w_key.row(i), x.view());
    double m = apply_activation_f64(act, pre);
    if (kind == MlpKind::Gated) m *= dot(w.w_gate.row(i), x.view());
    scores[i] = static_cast<float>(m);
  }
  return scores;
}

// Sum of per-neuron writes, accumulated in index order with doubles.
inline Tensor1 mlp_write_from_scores(const MlpWeights& w, const Tensor1& scores) {
  if (scores.size() != w.w_value.rows()) throw Error::validation("shape_mismatch", "score length != d_mlp");
  const int d = w.w_value.cols();
  std::vector<double> acc(static_cast<std::size_t>(d), 0.0);
  for (int i = 0; i < scores.size(); ++i) {
    const double m = static_cast<double>(scores[i]);
    const auto v = w.w_value.row(i);
    for (int j = 0; j < d; ++j) acc[static_cast<std::size_t>(j)] += m * static_cast<double>(v[static_cast<std::size_t>(j)]);
  }
  Tensor1 out(d);
  for (int j = 0; j < d; ++j) out[j] = static_cast<float>(acc[static_cast<std::size_t>(j)]);
  return out;
}

inline MlpResult mlp_forward_decomposed(const MlpWeights& w, const Tensor1& x, MlpKind kind,
                                        ActivationKind act) {
  MlpResult result;
  result.scores = mlp_scores(w, x, kind, act);
  result.output = mlp_write_from_scores(w, result.scores);
  return result;
}

// ---------------------------------------------------------------------------
// forward pass with tracing and intervention hooks

// Hooks mutate per-neuron activation scores between their computation and
// the value-vector write, or shift the final residual before unembedding.
struct ForwardHooks {
  // per layer, sorted lists of (neuron index, value)
  std::vector<std::vector<std::pair<int, float>>> score_multipliers;
  std::vector<std::vector<std::pair<int, float>>> score_overrides;
  std::optional<Tensor1> steer_delta;  // subtracted at every position before the final norm

  bool empty() const {
    if (steer_delta.has_value()) return false;
    for (const auto& v : score_multipliers)
      if (!v.empty()) return false;
    for (const auto& v : score_overrides)
      if (!v.empty()) return false;
    return true;
  }

  void validate_for(const ModelConfig& config) const {
    const auto check = [&](const std::vector<std::vector<std::pair<int, float>>>& table) {
      if (table.empty()) return;
      if (static_cast<int>(table.size()) != config.n_layers) {
        throw Error::validation("index_out_of_range", "hook table layer count mismatch");
      }
      for (const auto& layer : table) {
        for (const auto& [index, value] : layer) {
          (void)value;
          if (index < 0 || index >= config.d_mlp) {
            throw Error::validation("index_out_of_range", "hook neuron index out of range");
          }
        }
      }
    };
    check(score_multipliers);
    check(score_overrides);
    if (steer_delta.has_value() && steer_delta->size() != config.d_model) {
      throw Error::validation("shape_mismatch", "steer vector length != d_model");
    }
  }
};

struct ForwardTrace {
  int prompt_len = 0;
  std::vector<int> tokens;  // full sequence, prompt then generated
  // residual streams: before each layer's MLP write, and after the last
  // layer (pre final norm, pre steering)
  std::vector<std::vector<Tensor1>> resid_pre_mlp;  // [pos][layer]
  std::vector<Tensor1> final_residual;              // [pos]
  std::vector<std::vector<Tensor1>> scores;         // [pos][layer], effective (post-hook)
  std::vector<Tensor1> logits;                      // [pos]

  int n_positions() const { return static_cast<int>(tokens.size()); }
};

namespace detail {

inline void add_inplace(Tensor1& x, const Tensor1& delta) {
  for (int i = 0; i < x.size(); ++i) x[i] += delta[i];
}

inline Tensor1 norm_apply(const Tensor1& x, const NormWeights& w) {
  return layer_norm(x, w.gamma, w.beta);
}

// Multi-head causal attention over the whole (short) sequence.
inline std::vector<Tensor1> attention_block(const ModelBundle& bundle, const LayerWeights& layer,
                                            const std::vector<Tensor1>& x) {
  const int n = static_cast<int>(x.size());
  const int d = bundle.config.d_model;
  const int heads = bundle.config.n_heads;
  const int head_dim = d / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(head_dim));

  std::vector<Tensor1> q(static_cast<std::size_t>(n)), k(q), v(q);
  for (int p = 0; p < n; ++p) {
    const Tensor1 a = norm_apply(x[static_cast<std::size_t>(p)], layer.ln_attn);
    q[static_cast<std::size_t>(p)] = matvec(layer.attn.wq, a);
    k[static_cast<std::size_t>(p)] = matvec(layer.attn.wk, a);
    v[static_cast<std::size_t>(p)] = matvec(layer.attn.wv, a);
  }

  std::vector<Tensor1> out(static_cast<std::size_t>(n));
  std::vector<float> probs;
  for (int p = 0; p < n; ++p) {
    Tensor1 ctx(d);
    for (int h = 0; h < heads; ++h) {
      const int base = h * head_dim;
      probs.assign(static_cast<std::size_t>(p) + 1, 0.0f);
      for (int j = 0; j <= p; ++j) {
        double s = 0.0;
        for (int c = 0; c < head_dim; ++c) {
          s += static_cast<double>(q[static_cast<std::size_t>(p)][base + c]) *
               static_cast<double>(k[static_cast<std::size_t>(j)][base + c]);
        }
        probs[static_cast<std::size_t>(j)] = static_cast<float>(s * scale);
      }
      softmax_inplace(probs);
      for (int c = 0; c < head_dim; ++c) {
        double acc = 0.0;
        for (int j = 0; j <= p; ++j) {
          acc += static_cast<double>(probs[static_cast<std::size_t>(j)]) *
                 static_cast<double>(v[static_cast<std::size_t>(j)][base + c]);
        }
        ctx[base + c] = static_cast<float>(acc);
      }
    }
    out[static_cast<std::size_t>(p)] = matvec(layer.attn.wo, ctx);
  }
  return out;
}

}  // namespace detail

inline ForwardTrace forward_traced(const ModelBundle& bundle, std::span<const int> token_ids,
                                   const ForwardHooks* hooks = nullptr) {
  const ModelConfig& config = bundle.config;
  if (token_ids.empty()) throw Error::validation("empty_sequence", "forward needs at least one token");
  if (static_cast<int>(token_ids.size()) > config.max_seq) {
    throw Error::validation("sequence_too_long", "sequence exceeds max_seq");
  }
  for (int id : token_ids) {
    if (id < 0 || id >= config.vocab_size) {
      throw Error::validation("token_out_of_range", "token id out of range");
    }
  }
  if (hooks != nullptr) hooks->validate_for(config);

  const int n = static_cast<int>(token_ids.size());
  ForwardTrace trace;
  trace.prompt_len = n;
  trace.tokens.assign(token_ids.begin(), token_ids.end());
  trace.resid_pre_mlp.assign(static_cast<std::size_t>(n), {});
  trace.scores.assign(static_cast<std::size_t>(n), {});
  trace.final_residual.resize(static_cast<std::size_t>(n));
  trace.logits.resize(static_cast<std::size_t>(n));

  std::vector<Tensor1> x(static_cast<std::size_t>(n));
  for (int p = 0; p < n; ++p) {
    Tensor1 row = bundle.embedding.row_copy(token_ids[static_cast<std::size_t>(p)]);
    const auto pos = bundle.positional.row(p);
    for (int c = 0; c < config.d_model; ++c) row[c] += pos[static_cast<std::size_t>(c)];
    x[static_cast<std::size_t>(p)] = std::move(row);
  }

  for (int layer_idx = 0; layer_idx < config.n_layers; ++layer_idx) {
    const LayerWeights& layer = bundle.layers[static_cast<std::size_t>(layer_idx)];
    const std::vector<Tensor1> attn_out = detail::attention_block(bundle, layer, x);
    for (int p = 0; p < n; ++p) detail::add_inplace(x[static_cast<std::size_t>(p)], attn_out[static_cast<std::size_t>(p)]);

    for (int p = 0; p < n; ++p) {
      trace.resid_pre_mlp[static_cast<std::size_t>(p)].push_back(x[static_cast<std::size_t>(p)]);
      const Tensor1 h = detail::norm_apply(x[static_cast<std::size_t>(p)], layer.ln_mlp);
      Tensor1 scores = mlp_scores(layer.mlp, h, config.mlp_kind, config.activation);
      if (hooks != nullptr) {
        if (!hooks->score_multipliers.empty()) {
          for (const auto& [index, mult] : hooks->score_multipliers[static_cast<std::size_t>(layer_idx)]) {
            scores[index] *= mult;
          }
        }
        if (!hooks->score_overrides.empty()) {
          for (const auto& [index, value] : hooks->score_overrides[static_cast<std::size_t>(layer_idx)]) {
            scores[index] = value;
          }
        }
      }
      const Tensor1 write = mlp_write_from_scores(layer.mlp, scores);
      detail::add_inplace(x[static_cast<std::size_t>(p)], write);
      trace.scores[static_cast<std::size_t>(p)].push_back(std::move(scores));
    }
  }

  const Tensor2& unembed = bundle.unembed();
  for (int p = 0; p < n; ++p) {
    trace.final_residual[static_cast<std::size_t>(p)] = x[static_cast<std::size_t>(p)];
    Tensor1 stream = x[static_cast<std::size_t>(p)];
    if (hooks != nullptr && hooks->steer_delta.has_value()) {
      for (int c = 0; c < config.d_model; ++c) stream[c] -= (*hooks->steer_delta)[c];
    }
    const Tensor1 normed = config.final_norm ? detail::norm_apply(stream, bundle.final_ln) : stream;
    trace.logits[static_cast<std::size_t>(p)] = matvec(unembed, normed);
  }
  return trace;
}

// Argmax with ties broken toward the lowest token id.
inline int argmax_token(const Tensor1& logits) {
  int best = 0;
  for (int i = 1; i < logits.size(); ++i) {
    if (logits[i] > logits[best]) best = i;
  }
  return best;
}

struct GenerateResult {
  std::vector<int> generated;  // just the new tokens
  ForwardTrace trace;          // over prompt + generated
};

inline GenerateResult generate_greedy(const ModelBundle& bundle, std::span<const int> prompt_ids,
                                      int n_new, const ForwardHooks* hooks = nullptr) {
  if (n_new < 1) throw Error::validation("invalid_argument", "n_new must be >= 1");
  if (prompt_ids.empty()) throw Error::validation("empty_sequence", "prompt must be nonempty");
  if (static_cast<int>(prompt_ids.size()) + n_new > bundle.config.max_seq) {
    throw Error::validation("sequence_too_long", "prompt + n_new exceeds max_seq");
  }

  std::vector<int> seq(prompt_ids.begin(), prompt_ids.end());
  GenerateResult result;
  for (int step = 0; step < n_new; ++step) {
    const ForwardTrace trace = forward_traced(bundle, seq, hooks);
    const int next = argmax_token(trace.logits.back());
    seq.push_back(next);
    result.generated.push_back(next);
  }
  result.trace = forward_traced(bundle, seq, hooks);
  result.trace.prompt_len = static_cast<int>(prompt_ids.size());
  return result;
}

// ---------------------------------------------------------------------------
// mean activation profile over generated-token positions

struct MeanActivationProfile {
  int n_layers = 0;
  int d_mlp = 0;
  std::vector<double> mean;  // layer-major: layer * d_mlp + index
  std::uint64_t sample_count = 0;
  int n_new = 0;
  bool generated_only = true;  // prompt positions excluded

  double at(int layer, int index) const {
    return mean[static_cast<std::size_t>(layer) * static_cast<std::size_t>(d_mlp) +
                static_cast<std::size_t>(index)];
  }
};

// Positions averaged are the n_new step positions whose logits produced
// each generated token, i.e. prompt_len-1 .. prompt_len+n_new-2.
inline MeanActivationProfile mean_profile(const ModelBundle& bundle, std::span<const Prompt> prompts,
                                          int n_new = 20) {
  if (prompts.empty()) throw Error::validation("empty_prompt_set", "mean_profile needs prompts");
  const ModelConfig& config = bundle.config;
  MeanActivationProfile profile;
  profile.n_layers = config.n_layers;
  profile.d_mlp = config.d_mlp;
  profile.n_new = n_new;
  profile.mean.assign(static_cast<std::size_t>(config.n_layers) * static_cast<std::size_t>(config.d_mlp), 0.0);

  for (const Prompt& prompt : prompts) {
    const std::vector<int> ids = bundle.vocab.encode(prompt.text);
    if (ids.empty()) throw Error::validation("empty_text", "prompt encodes to zero tokens: " + prompt.id);
    const GenerateResult gen = generate_greedy(bundle, ids, n_new);
    const int first = gen.trace.prompt_len - 1;
    for (int step = 0; step < n_new; ++step) {
      const auto& per_layer = gen.trace.scores[static_cast<std::size_t>(first + step)];
      for (int layer = 0; layer < config.n_layers; ++layer) {
        const Tensor1& s = per_layer[static_cast<std::size_t>(layer)];
        double* dst = profile.mean.data() + static_cast<std::size_t>(layer) * static_cast<std::size_t>(config.d_mlp);
        for (int i = 0; i < config.d_mlp; ++i) dst[i] += static_cast<double>(s[i]);
      }
    }
    profile.sample_count += static_cast<std::uint64_t>(n_new);
  }
  for (double& v : profile.mean) v /= static_cast<double>(profile.sample_count);
  return profile;
}

}  // namespace toxlens

#endif  // TOXLENS_MODEL_HPP_
