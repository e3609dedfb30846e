// Acceptance suite: one pass/fail line per criterion, nonzero exit when any
// criterion fails. Expected values marked "pinned" were produced by this
// pipeline's first run and are frozen as regression bounds.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "test_util.hpp"
#include "toxlens/attribution.hpp"
#include "toxlens/cli.hpp"
#include "toxlens/dpo.hpp"
#include "toxlens/evalmetrics.hpp"
#include "toxlens/intervention.hpp"
#include "toxlens/model_io.hpp"
#include "toxlens/probe.hpp"
#include "toxlens/synthbench.hpp"

using namespace toxlens;

namespace {

struct Harness {
  int failures = 0;
  int criterion = 0;

  void run(const std::string& name, const std::function<bool(std::string&)>& body) {
    ++criterion;
    std::string detail;
    bool ok = false;
    const auto start = std::chrono::steady_clock::now();
    try {
      ok = body(detail);
    } catch (const std::exception& e) {
      detail = std::string("exception: ") + e.what();
      ok = false;
    }
    const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    std::printf("[%s] criterion %d: %s (%.1fs)%s%s\n", ok ? "PASS" : "FAIL", criterion, name.c_str(),
                seconds, detail.empty() ? "" : " — ", detail.c_str());
    std::fflush(stdout);
    if (!ok) ++failures;
  }
};

bool expect(bool condition, const std::string& label, std::string& detail) {
  if (!condition) {
    if (!detail.empty()) detail += "; ";
    detail += "FAILED: " + label;
  }
  return condition;
}

std::string fmt(const char* format, double a, double b = 0.0, double c = 0.0) {
  char buf[160];
  std::snprintf(buf, sizeof(buf), format, a, b, c);
  return buf;
}

// ---------------------------------------------------------------------------
// independent forward rebuild for the patch oracle: same operation order as
// the library forward, written from scratch against the weight tensors

struct OracleOverride {
  int layer;
  int index;
  float value;
};

struct OracleResult {
  std::vector<std::vector<Tensor1>> resid_pre_mlp;  // [pos][layer]
  std::vector<Tensor1> final_residual;
  std::vector<std::vector<Tensor1>> scores;
  std::vector<Tensor1> logits;
};

double oracle_act(ActivationKind kind, double x) {
  switch (kind) {
    case ActivationKind::GeluExact:
      return x * 0.5 * (1.0 + std::erf(x / 1.4142135623730951));
    case ActivationKind::GeluTanh: {
      const double inner = 0.7978845608028654 * (x + 0.044715 * x * x * x);
      return 0.5 * x * (1.0 + std::tanh(inner));
    }
    case ActivationKind::Silu:
      return x >= 0.0 ? x / (1.0 + std::exp(-x)) : x * std::exp(x) / (1.0 + std::exp(x));
    case ActivationKind::Sigmoid:
      return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
  }
  return 0.0;
}

Tensor1 oracle_layer_norm(const Tensor1& x, const Tensor1& gamma, const Tensor1& beta) {
  const int n = x.size();
  double mean = 0.0;
  for (int i = 0; i < n; ++i) mean += static_cast<double>(x[i]);
  mean /= n;
  double var = 0.0;
  for (int i = 0; i < n; ++i) {
    const double diff = static_cast<double>(x[i]) - mean;
    var += diff * diff;
  }
  var /= n;
  const double inv = 1.0 / std::sqrt(var + static_cast<double>(1e-5f));
  Tensor1 y(n);
  for (int i = 0; i < n; ++i) {
    y[i] = static_cast<float>((static_cast<double>(x[i]) - mean) * inv * static_cast<double>(gamma[i]) +
                              static_cast<double>(beta[i]));
  }
  return y;
}

Tensor1 oracle_matvec(const Tensor2& m, const Tensor1& x) {
  Tensor1 y(m.rows());
  for (int r = 0; r < m.rows(); ++r) {
    double acc = 0.0;
    for (int c = 0; c < m.cols(); ++c) acc += static_cast<double>(m.at(r, c)) * static_cast<double>(x[c]);
    y[r] = static_cast<float>(acc);
  }
  return y;
}

OracleResult oracle_forward(const ModelBundle& bundle, const std::vector<int>& ids,
                            const std::vector<OracleOverride>& overrides) {
  const ModelConfig& config = bundle.config;
  const int n = static_cast<int>(ids.size());
  const int d = config.d_model;
  const int heads = config.n_heads;
  const int head_dim = d / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(head_dim));

  OracleResult result;
  result.resid_pre_mlp.assign(static_cast<std::size_t>(n), {});
  result.scores.assign(static_cast<std::size_t>(n), {});
  result.final_residual.resize(static_cast<std::size_t>(n));
  result.logits.resize(static_cast<std::size_t>(n));

  std::vector<Tensor1> x;
  for (int p = 0; p < n; ++p) {
    Tensor1 row(d);
    for (int c = 0; c < d; ++c) row[c] = bundle.embedding.at(ids[static_cast<std::size_t>(p)], c) + bundle.positional.at(p, c);
    x.push_back(row);
  }

  for (int l = 0; l < config.n_layers; ++l) {
    const LayerWeights& layer = bundle.layers[static_cast<std::size_t>(l)];
    // attention over the normalized stream
    std::vector<Tensor1> q, k, v;
    for (int p = 0; p < n; ++p) {
      const Tensor1 a = oracle_layer_norm(x[static_cast<std::size_t>(p)], layer.ln_attn.gamma, layer.ln_attn.beta);
      q.push_back(oracle_matvec(layer.attn.wq, a));
      k.push_back(oracle_matvec(layer.attn.wk, a));
      v.push_back(oracle_matvec(layer.attn.wv, a));
    }
    std::vector<Tensor1> attn_out;
    for (int p = 0; p < n; ++p) {
      Tensor1 ctx(d);
      for (int h = 0; h < heads; ++h) {
        const int base = h * head_dim;
        std::vector<float> probs(static_cast<std::size_t>(p) + 1);
        for (int j = 0; j <= p; ++j) {
          double s = 0.0;
          for (int c = 0; c < head_dim; ++c) {
            s += static_cast<double>(q[static_cast<std::size_t>(p)][base + c]) *
                 static_cast<double>(k[static_cast<std::size_t>(j)][base + c]);
          }
          probs[static_cast<std::size_t>(j)] = static_cast<float>(s * scale);
        }
        float max_val = probs[0];
        for (float pv : probs) max_val = std::max(max_val, pv);
        double sum = 0.0;
        for (float& pv : probs) {
          const double e = std::exp(static_cast<double>(pv) - static_cast<double>(max_val));
          pv = static_cast<float>(e);
          sum += e;
        }
        for (float& pv : probs) pv = static_cast<float>(static_cast<double>(pv) / sum);
        for (int c = 0; c < head_dim; ++c) {
          double acc = 0.0;
          for (int j = 0; j <= p; ++j) {
            acc += static_cast<double>(probs[static_cast<std::size_t>(j)]) *
                   static_cast<double>(v[static_cast<std::size_t>(j)][base + c]);
          }
          ctx[base + c] = static_cast<float>(acc);
        }
      }
      attn_out.push_back(oracle_matvec(layer.attn.wo, ctx));
    }
    for (int p = 0; p < n; ++p) {
      for (int c = 0; c < d; ++c) x[static_cast<std::size_t>(p)][c] += attn_out[static_cast<std::size_t>(p)][c];
    }

    // MLP with substituted scores
    for (int p = 0; p < n; ++p) {
      result.resid_pre_mlp[static_cast<std::size_t>(p)].push_back(x[static_cast<std::size_t>(p)]);
      const Tensor1 h = oracle_layer_norm(x[static_cast<std::size_t>(p)], layer.ln_mlp.gamma, layer.ln_mlp.beta);
      Tensor1 scores(config.d_mlp);
      for (int i = 0; i < config.d_mlp; ++i) {
        double pre = 0.0;
        for (int c = 0; c < d; ++c) pre += static_cast<double>(layer.mlp.w_key.at(i, c)) * static_cast<double>(h[c]);
        double m = oracle_act(config.activation, pre);
        if (config.mlp_kind == MlpKind::Gated) {
          double lin = 0.0;
          for (int c = 0; c < d; ++c) lin += static_cast<double>(layer.mlp.w_gate.at(i, c)) * static_cast<double>(h[c]);
          m *= lin;
        }
        scores[i] = static_cast<float>(m);
      }
      for (const OracleOverride& ov : overrides) {
        if (ov.layer == l) scores[ov.index] = ov.value;
      }
      std::vector<double> acc(static_cast<std::size_t>(d), 0.0);
      for (int i = 0; i < config.d_mlp; ++i) {
        const double m = static_cast<double>(scores[i]);
        for (int c = 0; c < d; ++c) acc[static_cast<std::size_t>(c)] += m * static_cast<double>(layer.mlp.w_value.at(i, c));
      }
      for (int c = 0; c < d; ++c) x[static_cast<std::size_t>(p)][c] += static_cast<float>(acc[static_cast<std::size_t>(c)]);
      result.scores[static_cast<std::size_t>(p)].push_back(std::move(scores));
    }
  }

  for (int p = 0; p < n; ++p) {
    result.final_residual[static_cast<std::size_t>(p)] = x[static_cast<std::size_t>(p)];
    const Tensor1 normed = config.final_norm
                               ? oracle_layer_norm(x[static_cast<std::size_t>(p)], bundle.final_ln.gamma, bundle.final_ln.beta)
                               : x[static_cast<std::size_t>(p)];
    result.logits[static_cast<std::size_t>(p)] = oracle_matvec(bundle.unembed(), normed);
  }
  return result;
}

// pipeline configuration pinned with the frozen regression values
struct PipelineOutcome {
  double tox_none, tox_dpo, tox_patch_toxic, tox_patch_four, tox_edit_probe, tox_edit_free;
  double ppl_none, ppl_edit_probe;
  double reducing_fraction;
  double dpo_final_loss;
  double ratio_patch_toxic, ratio_patch_four;
};

PipelineOutcome run_pipeline() {
  PlantSpec spec;
  spec.seed = 1;
  const PlantResult planted = plant_bundle(spec);
  const PlantedCorpora corpora = plant_corpora(spec);
  const ModelBundle& pre = planted.bundle;

  // steering probe and held-out scorer from disjoint halves, distinct seeds
  const std::vector<LabeledText> steer_half(corpora.labeled.begin(),
                                            corpora.labeled.begin() + corpora.labeled.size() / 2);
  const std::vector<LabeledText> score_half(corpora.labeled.begin() + corpora.labeled.size() / 2,
                                            corpora.labeled.end());
  TrainProbeOptions steer_options;
  steer_options.seed = 11;
  const Probe probe = train_probe(collect_activations(pre, steer_half), steer_options);
  TrainProbeOptions scorer_options;  // held-out scorer with graded dynamic range
  scorer_options.seed = 77;
  scorer_options.l2 = 0.05;
  scorer_options.epochs = 150;
  SurrogateScorer scorer{train_probe(collect_activations(pre, score_half), scorer_options), pre,
                         "held-out half, seed 77"};

  std::vector<PreferenceTriplet> triplets;
  for (const PreferencePair& pair : corpora.pairs) triplets.push_back(encode_pair(pre.vocab, pair));
  DpoConfig dpo_config;
  dpo_config.beta = 0.1;
  dpo_config.kl_weight = 20.0;
  dpo_config.lr = 5e-5;
  dpo_config.epochs = 8;
  dpo_config.grad_clip_norm = 1.0;
  dpo_config.seed = 1;
  const DpoResult dpo = train_dpo(pre, triplets, dpo_config);

  const MeanActivationProfile prof_pre = mean_profile(pre, corpora.prompts, 20);
  const MeanActivationProfile prof_post = mean_profile(dpo.post, corpora.prompts, 20);
  const auto attrs = attribute_all(pre, dpo.post, prof_pre, prof_post, probe.direction);
  const GroupSummary summary = group_summary(attrs);

  std::vector<NeuronRef> planted_toxic, four_groups;
  for (const PlantedNeuron& n : planted.truth.neurons) {
    if (n.group == NeuronGroup::TP || n.group == NeuronGroup::TN) planted_toxic.emplace_back(n.layer, n.index);
  }
  for (const NeuronAttribution& rec : attrs) {
    if (rec.direction == DeltaDirection::Reduce && rec.group != NeuronGroup::Degenerate) {
      four_groups.emplace_back(rec.layer, rec.index);
    }
  }

  const ForwardHooks patch_toxic = hooks_for_patch(pre.config, planted_toxic, prof_post);
  const ForwardHooks patch_four = hooks_for_patch(pre.config, four_groups, prof_post);
  const AlignmentTable table = build_alignment_table(pre, prof_pre, probe.direction);
  const ForwardHooks edit_probe =
      hooks_for_edit(pre.config, select_edit_targets(table, 0.55, EditRanking::DescendingCosine), 0.01);
  const Tensor1 contrastive = contrastive_direction(pre, corpora.lexicon);
  const AlignmentTable table_free = build_alignment_table(pre, prof_pre, contrastive);
  const ForwardHooks edit_free =
      hooks_for_edit(pre.config, select_edit_targets(table_free, 0.6, EditRanking::DescendingCosine), 0.01);

  std::vector<std::vector<int>> corpus;
  for (const Prompt& row : corpora.corpus) corpus.push_back(pre.vocab.encode(row.text));

  const auto toxicity = [&](const ModelBundle& bundle, const ForwardHooks* hooks) {
    return toxicity_score(scorer, bundle, hooks, corpora.prompts, 20).mean;
  };

  PipelineOutcome out;
  out.tox_none = toxicity(pre, nullptr);
  out.tox_dpo = toxicity(dpo.post, nullptr);
  out.tox_patch_toxic = toxicity(pre, &patch_toxic);
  out.tox_patch_four = toxicity(pre, &patch_four);
  out.tox_edit_probe = toxicity(pre, &edit_probe);
  out.tox_edit_free = toxicity(pre, &edit_free);
  out.ppl_none = log_perplexity(pre, nullptr, corpus);
  out.ppl_edit_probe = log_perplexity(pre, &edit_probe, corpus);
  out.reducing_fraction = summary.reducing_fraction;
  out.dpo_final_loss = dpo.final_mean_loss;
  const double dpo_reduction = out.tox_none - out.tox_dpo;
  out.ratio_patch_toxic = (out.tox_none - out.tox_patch_toxic) / dpo_reduction;
  out.ratio_patch_four = (out.tox_none - out.tox_patch_four) / dpo_reduction;
  return out;
}

const PipelineOutcome& pipeline() {
  static const PipelineOutcome outcome = run_pipeline();
  return outcome;
}

}  // namespace

// ---------------------------------------------------------------------------

int main() {
  Harness harness;

  harness.run("decomposition equivalence, 100 random bundles", [](std::string& detail) {
    Rng rng(2024);
    bool ok = true;
    const ActivationKind acts[3] = {ActivationKind::GeluExact, ActivationKind::GeluTanh,
                                    ActivationKind::Silu};
    for (int trial = 0; trial < 100; ++trial) {
      ModelConfig config;
      config.n_layers = 1;
      config.d_model = rng.uniform_int(2, 12);
      config.d_mlp = rng.uniform_int(1, 20);
      config.n_heads = 1;
      config.vocab_size = 4;
      config.max_seq = 4;
      config.mlp_kind = trial % 2 == 0 ? MlpKind::Plain : MlpKind::Gated;
      config.activation = acts[trial % 3];
      MlpWeights w;
      w.w_key = test_util::random_tensor2(rng, config.d_mlp, config.d_model, 0.8);
      w.w_value = test_util::random_tensor2(rng, config.d_mlp, config.d_model, 0.8);
      if (config.mlp_kind == MlpKind::Gated) {
        w.w_gate = test_util::random_tensor2(rng, config.d_mlp, config.d_model, 0.8);
      }
      const Tensor1 x = test_util::random_tensor1(rng, config.d_model, 1.0);
      const MlpResult factored = mlp_forward_decomposed(w, x, config.mlp_kind, config.activation);
      // unfactored: output-coordinate-major two-matrix computation
      double max_diff = 0.0, max_out = 0.0;
      for (int c = 0; c < config.d_model; ++c) {
        double acc = 0.0;
        for (int i = 0; i < config.d_mlp; ++i) {
          double pre = 0.0;
          for (int cc = 0; cc < config.d_model; ++cc) {
            pre += static_cast<double>(w.w_key.at(i, cc)) * static_cast<double>(x[cc]);
          }
          double m = apply_activation_f64(config.activation, pre);
          if (config.mlp_kind == MlpKind::Gated) {
            double lin = 0.0;
            for (int cc = 0; cc < config.d_model; ++cc) {
              lin += static_cast<double>(w.w_gate.at(i, cc)) * static_cast<double>(x[cc]);
            }
            m *= lin;
          }
          acc += m * static_cast<double>(w.w_value.at(i, c));
        }
        max_out = std::max(max_out, std::fabs(acc));
        max_diff = std::max(max_diff, std::fabs(static_cast<double>(factored.output[c]) - acc));
      }
      if (max_diff > 1e-5 * (1.0 + max_out)) {
        ok = false;
        detail = fmt("trial diff %.3g > tol at out %.3g", max_diff, max_out);
        break;
      }
    }
    return ok;
  });

  harness.run("patch oracle, 20 random plans rebuilt independently", [](std::string& detail) {
    Rng rng(7);
    for (int trial = 0; trial < 20; ++trial) {
      ModelConfig config;
      config.n_layers = rng.uniform_int(1, 3);
      config.d_model = 8;
      config.d_mlp = 10;
      config.n_heads = 2;
      config.vocab_size = 9;
      config.max_seq = 10;
      config.mlp_kind = trial % 2 == 0 ? MlpKind::Plain : MlpKind::Gated;
      config.activation = trial % 3 == 0 ? ActivationKind::Silu : ActivationKind::GeluExact;
      const ModelBundle bundle = test_util::random_bundle(rng, config);

      MeanActivationProfile reference;
      reference.n_layers = config.n_layers;
      reference.d_mlp = config.d_mlp;
      reference.sample_count = 1;
      reference.mean.resize(static_cast<std::size_t>(config.n_layers * config.d_mlp));
      for (double& v : reference.mean) v = rng.normal(0.0, 0.8);

      std::vector<NeuronRef> targets;
      std::vector<OracleOverride> overrides;
      for (int l = 0; l < config.n_layers; ++l) {
        for (int i = 0; i < config.d_mlp; ++i) {
          if (rng.uniform() < 0.3) {
            targets.emplace_back(l, i);
            overrides.push_back({l, i, static_cast<float>(reference.at(l, i))});
          }
        }
      }
      std::vector<int> ids(static_cast<std::size_t>(rng.uniform_int(2, 6)));
      for (int& id : ids) id = rng.uniform_int(0, config.vocab_size - 1);

      const ForwardTrace patched = patch_forward(bundle, targets, reference, ids);
      const OracleResult oracle = oracle_forward(bundle, ids, overrides);
      for (std::size_t p = 0; p < ids.size(); ++p) {
        for (int l = 0; l < config.n_layers; ++l) {
          if (!(patched.resid_pre_mlp[p][static_cast<std::size_t>(l)] ==
                oracle.resid_pre_mlp[p][static_cast<std::size_t>(l)])) {
            detail = fmt("pre-MLP residual mismatch, trial %g layer %g", trial, l);
            return false;
          }
          if (!(patched.scores[p][static_cast<std::size_t>(l)] == oracle.scores[p][static_cast<std::size_t>(l)])) {
            detail = fmt("score mismatch, trial %g layer %g", trial, l);
            return false;
          }
        }
        if (!(patched.final_residual[p] == oracle.final_residual[p])) {
          detail = fmt("final residual mismatch, trial %g", trial);
          return false;
        }
        if (!(patched.logits[p] == oracle.logits[p])) {
          detail = fmt("logit mismatch, trial %g", trial);
          return false;
        }
      }
    }
    return true;
  });

  harness.run("editing monotonicity, 1000 group-consistent tuples", [](std::string& detail) {
    Rng rng(99);
    const Tensor1 probe = test_util::random_tensor1(rng, 8, 1.0);
    const double norm = norm2(probe.view());
    int strict = 0;
    for (int trial = 0; trial < 1000; ++trial) {
      const int group = rng.uniform_int(0, 3);
      const bool toxic_aligned = group == 0 || group == 1;
      const bool positive_act = group == 0 || group == 2;
      Tensor1 v = test_util::random_tensor1(rng, 8, 1.0);
      double proj = dot(v.view(), probe.view()) / norm;
      if ((proj > 0) != toxic_aligned) {
        for (int c = 0; c < v.size(); ++c) v[c] = -v[c];
        proj = -proj;
      }
      const double m = (positive_act ? 1.0 : -1.0) * rng.uniform(0.001, 3.0);
      const double alpha = rng.uniform(0.001, 0.9);
      const double mult = (group == 0 || group == 3) ? 1.0 - alpha : 1.0 + alpha;
      const double before = m * proj;
      const double after = m * mult * proj;
      if (after > before + 1e-15) {
        detail = fmt("projection rose: group %g before %.4g after %.4g", group, before, after);
        return false;
      }
      if (before != 0.0) {
        if (!(after < before)) {
          detail = "no strict decrease at nonzero projection";
          return false;
        }
        ++strict;
      }
    }
    detail = fmt("strict decreases: %g/1000", strict);
    return strict == 1000;
  });

  harness.run("probe quality on planted data (acc >= 0.99, cos >= 0.95)", [](std::string& detail) {
    const PlantSpec spec = probe_bench_spec(1);
    const PlantResult planted = plant_bundle(spec);
    const PlantedCorpora corpora = plant_corpora(spec);
    const LabeledActivationSet set = collect_activations(planted.bundle, corpora.labeled);
    const Probe probe = train_probe(set);
    const double cos = cosine(probe.direction, planted.truth.toxic_dir);
    detail = fmt("accuracy %.4f, cosine %.4f", probe.meta.test_accuracy, cos);
    bool ok = true;
    ok &= expect(probe.meta.test_accuracy >= 0.99, "test accuracy >= 0.99", detail);
    ok &= expect(cos >= 0.95, "cosine >= 0.95", detail);
    return ok;
  });

  harness.run("dpo sanity: ln 2 start, progress, gradient check, value cosines", [](std::string& detail) {
    Rng rng(5);
    ModelConfig config;
    config.n_layers = 1;
    config.d_model = 8;
    config.d_mlp = 6;
    config.n_heads = 2;
    config.vocab_size = 8;
    config.max_seq = 12;
    config.activation = ActivationKind::Silu;
    const ModelBundle pre = test_util::random_bundle(rng, config);

    std::vector<PreferenceTriplet> triplets;
    for (int i = 0; i < 12; ++i) {
      PreferenceTriplet t;
      for (int j = 0; j < rng.uniform_int(1, 2); ++j) t.prompt.push_back(rng.uniform_int(0, 7));
      for (int j = 0; j < rng.uniform_int(1, 3); ++j) t.chosen.push_back(rng.uniform_int(0, 3));
      for (int j = 0; j < rng.uniform_int(1, 3); ++j) t.rejected.push_back(rng.uniform_int(4, 7));
      triplets.push_back(std::move(t));
    }

    DpoConfig dpo_config;  // lambda default 0.05
    dpo_config.beta = 1.0;
    dpo_config.lr = 0.005;
    dpo_config.epochs = 10;
    dpo_config.seed = 3;
    const DpoResult result = train_dpo(pre, triplets, dpo_config);

    bool ok = true;
    for (double loss : result.initial_losses) {
      ok &= expect(std::fabs(loss - 0.6931471805599453) <= 1e-6, "initial loss ln 2 +- 1e-6", detail);
    }
    ok &= expect(result.final_mean_loss < 0.5, fmt("final mean loss %.4f < 0.5", result.final_mean_loss), detail);

    double min_cos = 1.0;
    for (int l = 0; l < config.n_layers; ++l) {
      const Tensor2& before = pre.layers[static_cast<std::size_t>(l)].mlp.w_value;
      const Tensor2& after = result.post.layers[static_cast<std::size_t>(l)].mlp.w_value;
      for (int i = 0; i < config.d_mlp; ++i) {
        min_cos = std::min(min_cos, cosine(before.row_copy(i), after.row_copy(i)));
      }
    }
    ok &= expect(min_cos >= 0.95, fmt("min value-vector cosine %.4f >= 0.95", min_cos), detail);

    // gradient check on the tiny bundle
    DpoParams policy = DpoParams::from_bundle(pre);
    const DpoParams reference = DpoParams::from_bundle(test_util::random_bundle(rng, config));
    const TripletWork work = prepare_triplet(reference, triplets.front());
    std::vector<double> grad(policy.size(), 0.0);
    dpo_loss_grad(policy, work, 0.4, 0.1, &grad);
    Rng pick(17);
    const double h = 1e-5;
    double worst = 0.0;
    int checked = 0;
    while (checked < 30) {
      const std::size_t at = static_cast<std::size_t>(pick.uniform_int(0, static_cast<int>(policy.size()) - 1));
      const double saved = policy.data()[at];
      policy.data()[at] = saved + h;
      const double up = dpo_loss_grad(policy, work, 0.4, 0.1, nullptr);
      policy.data()[at] = saved - h;
      const double down = dpo_loss_grad(policy, work, 0.4, 0.1, nullptr);
      policy.data()[at] = saved;
      const double fd = (up - down) / (2.0 * h);
      if (std::fabs(fd) < 1e-7 && std::fabs(grad[at]) < 1e-7) continue;
      worst = std::max(worst, std::fabs(grad[at] - fd) / std::max(1e-12, std::fabs(fd)));
      ++checked;
    }
    ok &= expect(worst <= 1e-3, fmt("gradient check worst relative error %.2e <= 1e-3", worst), detail);
    if (detail.empty()) {
      detail = fmt("final loss %.4f, min value cosine %.4f, gradcheck %.2e", result.final_mean_loss,
                   min_cos, worst);
    }
    return ok;
  });

  harness.run("qualitative replication: reducing fraction and patching ratios", [](std::string& detail) {
    const PipelineOutcome& out = pipeline();
    detail = fmt("fraction %.3f, patch-toxic ratio %.3f, patch-four ratio %.3f", out.reducing_fraction,
                 out.ratio_patch_toxic, out.ratio_patch_four);
    bool ok = true;
    ok &= expect(out.tox_dpo < out.tox_none, "dpo strictly below baseline", detail);
    ok &= expect(out.reducing_fraction >= 0.40 && out.reducing_fraction <= 0.70,
                 "reducing fraction in [0.40, 0.70]", detail);
    ok &= expect(out.ratio_patch_toxic < 0.5, "planted-toxic patch < 50% of dpo reduction", detail);
    ok &= expect(out.ratio_patch_four >= 0.9, "four-group patch >= 90% of dpo reduction", detail);
    // pinned regression bounds from the first pipeline run
    ok &= expect(std::fabs(out.reducing_fraction - 0.530) <= 0.03, "fraction near pinned 0.530", detail);
    ok &= expect(out.ratio_patch_toxic <= 0.35, "patch-toxic ratio near pinned 0.10", detail);
    ok &= expect(std::fabs(out.ratio_patch_four - 1.46) <= 0.40, "patch-four ratio near pinned 1.46", detail);
    return ok;
  });

  harness.run("editing beats toy-DPO at the pinned operating point", [](std::string& detail) {
    const PipelineOutcome& out = pipeline();
    detail = fmt("toxicity none %.3f, dpo %.3f", out.tox_none, out.tox_dpo) +
             fmt(", edit-probe %.3f, edit-free %.3f", out.tox_edit_probe, out.tox_edit_free) +
             fmt(", ppl %.3f -> %.3f", out.ppl_none, out.ppl_edit_probe);
    bool ok = true;
    ok &= expect(out.tox_edit_probe <= out.tox_dpo, "probe-based editing <= dpo toxicity", detail);
    ok &= expect(out.ppl_edit_probe <= 1.05 * out.ppl_none, "log-ppl increase <= 5%", detail);
    ok &= expect(out.tox_edit_free <= 1.25 * out.tox_edit_probe,
                 "probe-free within 25% relative of probe-based", detail);
    // pinned regression bounds from the first pipeline run
    ok &= expect(std::fabs(out.tox_none - 0.919) <= 0.02, "baseline near pinned 0.919", detail);
    ok &= expect(std::fabs(out.tox_dpo - 0.888) <= 0.02, "dpo near pinned 0.888", detail);
    ok &= expect(std::fabs(out.tox_edit_probe - 0.875) <= 0.02, "edit near pinned 0.875", detail);
    ok &= expect(out.dpo_final_loss < 0.6931471805599453, "pipeline dpo loss below ln 2", detail);
    return ok;
  });

  harness.run("metric unit suite", [](std::string& detail) {
    bool ok = true;
    // -log sigmoid(0) = ln 2 via the dpo loss at policy == reference
    Rng rng(3);
    ModelConfig config;
    config.n_layers = 1;
    config.d_model = 4;
    config.d_mlp = 3;
    config.n_heads = 1;
    config.vocab_size = 4;
    config.max_seq = 8;
    const ModelBundle bundle = test_util::random_bundle(rng, config);
    PreferenceTriplet triplet;
    triplet.prompt = {1};
    triplet.chosen = {2};
    triplet.rejected = {3};
    ok &= expect(std::fabs(dpo_loss(bundle, bundle, triplet, 0.1) - 0.6931471805599453) < 1e-9,
                 "-log sigmoid(0) = ln 2", detail);

    // uniform log-perplexity = ln V on a zero bundle
    ModelBundle zero;
    zero.config = config;
    zero.vocab = test_util::toy_vocab(config.vocab_size);
    zero.embedding = Tensor2(config.vocab_size, config.d_model);
    zero.positional = Tensor2(config.max_seq, config.d_model);
    zero.layers.resize(1);
    zero.layers[0].ln_attn = {Tensor1(config.d_model), Tensor1(config.d_model)};
    zero.layers[0].ln_mlp = {Tensor1(config.d_model), Tensor1(config.d_model)};
    zero.layers[0].attn = {Tensor2(config.d_model, config.d_model), Tensor2(config.d_model, config.d_model),
                           Tensor2(config.d_model, config.d_model), Tensor2(config.d_model, config.d_model)};
    zero.layers[0].mlp.w_key = Tensor2(config.d_mlp, config.d_model);
    zero.layers[0].mlp.w_value = Tensor2(config.d_mlp, config.d_model);
    zero.final_ln = {Tensor1(config.d_model), Tensor1(config.d_model)};
    zero.unembedding = Tensor2(config.vocab_size, config.d_model);
    const std::vector<std::vector<int>> corpus{{0, 1, 2, 3}};
    ok &= expect(std::fabs(log_perplexity(zero, nullptr, corpus) - std::log(4.0)) < 1e-9,
                 "uniform log-perplexity = ln V", detail);

    // F1 cases
    const std::vector<int> seq{1, 2};
    ok &= expect(f1_overlap(seq, seq) == 1.0, "identical F1 = 1", detail);
    ok &= expect(f1_overlap(seq, std::vector<int>{3, 4}) == 0.0, "disjoint F1 = 0", detail);
    ok &= expect(std::fabs(f1_overlap(std::vector<int>{1, 2}, std::vector<int>{2, 3}) - 0.5) < 1e-12,
                 "half-overlap F1 = 0.5", detail);

    // Pearson cases
    ok &= expect(std::fabs(pearson(std::vector<double>{1, 2, 3}, std::vector<double>{2, 4, 6}) - 1.0) < 1e-12,
                 "linear Pearson = 1", detail);
    ok &= expect(std::fabs(pearson(std::vector<double>{1, 2, 3}, std::vector<double>{3, 2, 1}) + 1.0) < 1e-12,
                 "anti Pearson = -1", detail);
    ok &= expect(std::fabs(pearson(std::vector<double>{1, 2, 3, 4}, std::vector<double>{1, 3, 2, 4}) - 0.8) < 1e-12,
                 "hand Pearson = 0.8", detail);

    // steering projection drop
    Probe probe;
    probe.direction = test_util::random_tensor1(rng, 6, 1.0);
    const Tensor1 x = test_util::random_tensor1(rng, 6, 2.0);
    const double alpha = 0.7;
    const Tensor1 steered = steer(x, probe, alpha);
    const double norm = norm2(probe.direction.view());
    const double drop = (dot(x.view(), probe.direction.view()) - dot(steered.view(), probe.direction.view())) / norm;
    ok &= expect(std::fabs(drop - alpha * norm) <= 1e-6, "steering projection drop = alpha * ||W||", detail);
    return ok;
  });

  harness.run("determinism: CLI reruns produce byte-identical outputs", [](std::string& detail) {
    test_util::TempDir a("acc_det");
    const char* small_spec = R"({"n_labeled": 64, "n_prompts": 8, "n_pairs": 8, "n_corpus": 6})";

    const auto run_all = [&](const test_util::TempDir& dir) {
      const auto at = [&](const std::string& name) { return dir.file(name); };
      write_file(at("spec.json"), small_spec);
      std::vector<std::vector<std::string>> commands = {
          {"synth", "--seed", "9", "--out-dir", dir.str(), "--spec", at("spec.json")},
          {"train-probe", "--bundle", at("model.manifest"), "--labeled", at("labeled.jsonl"),
           "--seed", "11", "--out", at("probe.json")},
          {"train-probe", "--bundle", at("model.manifest"), "--labeled", at("labeled.jsonl"),
           "--seed", "77", "--out", at("scorer.json")},
          {"profile", "--bundle", at("model.manifest"), "--prompts", at("prompts.jsonl"), "--n-new",
           "6", "--out", at("pre.profile.bin")},
          {"dpo-train", "--bundle", at("model.manifest"), "--pairs", at("pairs.jsonl"), "--kl", "20",
           "--epochs", "1", "--lr", "5e-5", "--clip", "1", "--seed", "1", "--out", at("post.manifest")},
          {"profile", "--bundle", at("post.manifest"), "--prompts", at("prompts.jsonl"), "--n-new",
           "6", "--out", at("post.profile.bin")},
          {"attribute", "--pre", at("model.manifest"), "--post", at("post.manifest"), "--pre-profile",
           at("pre.profile.bin"), "--post-profile", at("post.profile.bin"), "--probe", at("probe.json"),
           "--out", at("attribution.csv")},
          {"edit", "--bundle", at("model.manifest"), "--direction", at("probe.json"), "--profile",
           at("pre.profile.bin"), "--alpha", "0.01", "--beta", "0.55", "--out", at("edit-plan.json")},
          {"steer", "--bundle", at("model.manifest"), "--probe", at("probe.json"), "--alpha", "0.5",
           "--out", at("steer-plan.json")},
          {"lens", "--bundle", at("model.manifest"), "--vector", "probe:" + at("probe.json"), "--k",
           "5", "--out", at("lens.json")},
      };
      for (const auto& command : commands) {
        if (cli::run(command) != 0) return false;
      }
      const Json runspec = Json::array({Json{{"label", "none"}, {"bundle", at("model.manifest")}},
                                        Json{{"label", "edit"},
                                             {"bundle", at("model.manifest")},
                                             {"plan", at("edit-plan.json")}}});
      write_file(at("runspec.json"), runspec.dump());
      return cli::run({"eval", "--runs", at("runspec.json"), "--scorer", at("scorer.json"),
                       "--prompts", at("prompts.jsonl"), "--corpus", at("corpus.jsonl"), "--n-new",
                       "6", "--out", at("report.csv")}) == 0;
    };

    const std::vector<const char*> outputs = {
        "model.manifest", "model.bin",       "vocab.tsv",        "labeled.jsonl",  "prompts.jsonl",
        "pairs.jsonl",    "lexicon.json",    "corpus.jsonl",     "ground-truth.json", "probe.json",
        "scorer.json",    "pre.profile.bin", "post.manifest",    "post.bin",       "post.profile.bin",
        "attribution.csv", "ledger.json",    "groups.json",      "edit-plan.json", "steer-plan.json",
        "lens.json",      "report.csv",      "report.json"};

    if (!run_all(a)) {
      detail = "a CLI command failed on the first run";
      return false;
    }
    std::vector<std::string> snapshot;
    for (const char* name : outputs) snapshot.push_back(read_file(a.file(name)));
    if (!run_all(a)) {  // identical inputs, identical paths, fresh process state
      detail = "a CLI command failed on the rerun";
      return false;
    }
    for (std::size_t i = 0; i < outputs.size(); ++i) {
      if (read_file(a.file(outputs[i])) != snapshot[i]) {
        detail = std::string("byte mismatch in ") + outputs[i];
        return false;
      }
    }
    detail = fmt("%g outputs byte-identical across reruns", static_cast<double>(outputs.size()));
    return true;
  });

  std::printf("%s: %d/%d criteria passed\n", harness.failures == 0 ? "ACCEPTANCE PASSED" : "ACCEPTANCE FAILED",
              harness.criterion - harness.failures, harness.criterion);
  return harness.failures == 0 ? 0 : 1;
}
