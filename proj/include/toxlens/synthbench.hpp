#ifndef TOXLENS_SYNTHBENCH_HPP_
#define TOXLENS_SYNTHBENCH_HPP_

#include <cmath>
#include <cstdint>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "toxlens/attribution.hpp"
#include "toxlens/model.hpp"
#include "toxlens/rng.hpp"
#include "toxlens/textio.hpp"

namespace toxlens {

// Deterministic factory for planted-ground-truth artifacts. The bundle
// carries a known unit toxicity direction t: toxic/safe token embeddings
// lean +t/-t, designated MLP neurons write +-t with controlled activation
// signs, and toxic-token unembedding rows correlate with t. Every output
// is a pure function of (seed, spec).

struct PlantSpec {
  std::uint64_t seed = 1;
  ModelConfig config{
      .n_layers = 4,
      .d_model = 64,
      .d_mlp = 256,
      .n_heads = 4,
      .vocab_size = 64,
      .max_seq = 64,
      .mlp_kind = MlpKind::Plain,
      .activation = ActivationKind::GeluExact,
      .tied_unembedding = false,
      .final_norm = true,
  };
  int n_toxic_neurons = 8;  // per layer, value vectors along +t (TP/TN halves)
  int n_anti_neurons = 8;   // per layer, value vectors along -t (AP/AN halves)
  double alignment_strength = 0.95;  // required |cos(v, t)| for planted neurons
  double noise_scale = 0.2;          // perpendicular noise on planted value vectors
  int n_toxic_tokens = 8;
  int n_safe_tokens = 8;

  // corpora sizes
  int n_labeled = 192;
  int n_prompts = 24;
  int n_pairs = 64;
  int n_corpus = 24;

  // construction scales
  double embed_u = 2.0;       // shared context component
  // toxic tokens carry less of the context drive; toxicity then saturates
  // itself and continuations settle at a mixed toxic fraction
  double embed_u_toxic = 1.2;
  double embed_t = 1.0;       // toxicity component of toxic/safe embeddings
  double embed_noise = 0.05;  // per-dim
  double pos_noise = 0.02;
  // deterministic positional wobble along a dedicated direction read only
  // by the non-toxic unembedding rows: per-position decision boundaries
  // sweep past the toxic lead, so continuations emit toxic tokens in
  // proportion to their lead instead of locking all-or-nothing
  double pos_wobble_amp = 0.5;
  double pos_wobble_period = 5.0;
  double unembed_wobble = 1.0;
  double attn_scale = 0.02;
  // t x t component of W_V and W_O; attention then carries the prefix's
  // mean toxicity into every position, where the MLP neurons amplify it.
  // All other random weights are seeded orthogonal to t so toxicity enters
  // the stream only through token identity and these designed paths.
  double attn_toxic_transport = 0.25;
  double key_context = 0.26;   // activation-sign drive along u
  // unsigned salience term: as generation turns toxic the residual's u
  // share falls and its t share rises; reading both keeps planted
  // activations position-stable (the +-t writes of P groups still cancel)
  double key_stabilize = 0.15;
  double key_toxic = 0.02;     // toxicity sensitivity along t
  double key_noise = 0.01;     // per-dim
  double key_rand = 0.035;     // per-dim, unplanted keys
  double value_mag = 0.015;    // planted value-vector norm (weak, interpretable writers)
  // project unplanted keys orthogonal to t: no distributed activation
  // response, so probe recovery is exact at the cost of a weaker
  // generation feedback loop
  bool orthogonal_keys = false;
  double value_rand = 0.02;    // per-dim, unplanted values
  // weak t-coupling on every unplanted neuron (tail-heavy magnitude,
  // random sign, sign-matched between key and value): the toxicity budget
  // is written by the whole layer, and the random key components stay
  // orthogonal to t so only the designed coupling carries class signal
  double weak_value = 0.15;
  double unembed_t = 0.45;
  // stronger safe-side contrast puts the filler-vs-safe boundary just
  // below neutral, so small toxicity shifts change the safe-token mix
  double unembed_safe = 0.9;
  double unembed_noise = 0.12;
  // toxic tokens form a graded menu: token strength s in [menu_floor, 1]
  // scales its toxicity everywhere, and a convex selection cost (-s^2 u in
  // the unembedding) means stronger tokens win only at higher toxic leads
  double menu_floor = 0.35;
  double menu_cost = 0.22;

  void validate() const {
    config.validate();
    if (n_toxic_neurons < 2 || n_anti_neurons < 2) {
      throw Error::validation("bad_spec", "need at least two planted neurons per population");
    }
    if (n_toxic_neurons + n_anti_neurons > config.d_mlp) {
      throw Error::validation("bad_spec", "more planted neurons than d_mlp");
    }
    if (n_toxic_tokens < 1 || n_safe_tokens < 1 ||
        1 + n_toxic_tokens + n_safe_tokens >= config.vocab_size) {
      throw Error::validation("bad_spec", "vocab too small for token classes plus filler");
    }
    if (!(alignment_strength > 0.0) || alignment_strength > 1.0) {
      throw Error::validation("bad_spec", "alignment strength must lie in (0, 1]");
    }
    if (noise_scale < 0.0) throw Error::validation("bad_spec", "noise scale must be >= 0");
    const double achieved = 1.0 / std::sqrt(1.0 + noise_scale * noise_scale);
    if (achieved < alignment_strength) {
      throw Error::validation("bad_spec", "noise scale too large for the alignment strength");
    }
  }
};

// Lighter distributed writes: the linear structure is cleaner, so probe
// recovery is tight; interventions have less to grab onto. Used by the
// probe-recovery benches.
inline PlantSpec probe_bench_spec(std::uint64_t seed = 1) {
  PlantSpec spec;
  spec.seed = seed;
  spec.weak_value = 0.03;
  spec.orthogonal_keys = true;
  spec.embed_u_toxic = spec.embed_u;  // no self-limit offset; embeddings stay clean
  return spec;
}

struct PlantedNeuron {
  int layer = 0;
  int index = 0;
  NeuronGroup group = NeuronGroup::TP;
};

struct GroundTruth {
  Tensor1 toxic_dir;  // unit, length d
  std::vector<int> toxic_token_ids;
  std::vector<int> safe_token_ids;
  std::vector<PlantedNeuron> neurons;
  std::uint64_t seed = 0;
};

struct PlantResult {
  ModelBundle bundle;
  GroundTruth truth;
};

namespace synth_detail {

inline std::vector<double> random_vec(Rng& rng, int n, double stddev) {
  std::vector<double> v(static_cast<std::size_t>(n));
  for (double& x : v) x = rng.normal(0.0, stddev);
  return v;
}

inline double vdot(const std::vector<double>& a, const std::vector<double>& b) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

inline void vaxpy(std::vector<double>& y, double a, const std::vector<double>& x) {
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += a * x[i];
}

inline void vnormalize(std::vector<double>& v) {
  const double n = std::sqrt(vdot(v, v));
  for (double& x : v) x /= n;
}

// Random unit vector orthogonal to each of `against` (assumed orthonormal).
inline std::vector<double> random_unit_orthogonal(Rng& rng, int n,
                                                  const std::vector<const std::vector<double>*>& against) {
  std::vector<double> v = random_vec(rng, n, 1.0);
  for (const std::vector<double>* basis : against) vaxpy(v, -vdot(v, *basis), *basis);
  vnormalize(v);
  return v;
}

inline Tensor1 to_tensor1(const std::vector<double>& v) {
  std::vector<float> data(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) data[i] = static_cast<float>(v[i]);
  return Tensor1(std::move(data));
}

// Remove a direction from each row of a row-major matrix.
inline void project_rows_orthogonal(std::vector<double>& m, int rows, int cols,
                                    const std::vector<double>& dir) {
  for (int r = 0; r < rows; ++r) {
    double* row = m.data() + static_cast<std::size_t>(r) * static_cast<std::size_t>(cols);
    double proj = 0.0;
    for (int c = 0; c < cols; ++c) proj += row[c] * dir[static_cast<std::size_t>(c)];
    for (int c = 0; c < cols; ++c) row[c] -= proj * dir[static_cast<std::size_t>(c)];
  }
}

// Zero the matrix's left action on a direction: dir^T W = 0 afterward, so
// its output carries none of dir regardless of the input.
inline void project_output_orthogonal(std::vector<double>& m, int rows, int cols,
                                      const std::vector<double>& dir) {
  for (int c = 0; c < cols; ++c) {
    double s = 0.0;
    for (int r = 0; r < rows; ++r) {
      s += dir[static_cast<std::size_t>(r)] * m[static_cast<std::size_t>(r) * static_cast<std::size_t>(cols) + static_cast<std::size_t>(c)];
    }
    for (int r = 0; r < rows; ++r) {
      m[static_cast<std::size_t>(r) * static_cast<std::size_t>(cols) + static_cast<std::size_t>(c)] -=
          dir[static_cast<std::size_t>(r)] * s;
    }
  }
}

inline Tensor2 to_tensor2(int rows, int cols, const std::vector<double>& v) {
  std::vector<float> data(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) data[i] = static_cast<float>(v[i]);
  return Tensor2(rows, cols, std::move(data));
}

}  // namespace synth_detail

// strength of toxic token id (ids 1..n_toxic_tokens), spread over
// [menu_floor, 1]
inline double token_strength(const PlantSpec& spec, int token_id) {
  if (spec.n_toxic_tokens == 1) return 1.0;
  const int i = token_id - 1;
  return spec.menu_floor + (1.0 - spec.menu_floor) * static_cast<double>(i) /
                               static_cast<double>(spec.n_toxic_tokens - 1);
}

inline Vocab plant_vocab(const PlantSpec& spec) {
  std::vector<std::string> tokens;
  tokens.emplace_back(kUnkToken);
  for (int i = 0; i < spec.n_toxic_tokens; ++i) tokens.push_back("tox" + std::to_string(i));
  for (int i = 0; i < spec.n_safe_tokens; ++i) tokens.push_back("saf" + std::to_string(i));
  for (int i = static_cast<int>(tokens.size()); i < spec.config.vocab_size; ++i) {
    tokens.push_back("w" + std::to_string(i));
  }
  return Vocab(std::move(tokens));
}

inline PlantResult plant_bundle(const PlantSpec& spec) {
  spec.validate();
  using namespace synth_detail;
  Rng rng(spec.seed ^ 0x62756e646cULL);
  const ModelConfig& config = spec.config;
  const int d = config.d_model;
  const int dm = config.d_mlp;
  const int v_size = config.vocab_size;

  // Orthonormal frame: the all-ones direction (killed by layer norm's mean
  // subtraction), a shared context direction u, the toxicity direction,
  // and a boundary-wobble carrier w.
  std::vector<double> ones(static_cast<std::size_t>(d), 1.0 / std::sqrt(static_cast<double>(d)));
  const std::vector<double> u = random_unit_orthogonal(rng, d, {&ones});
  const std::vector<double> toxic_dir = random_unit_orthogonal(rng, d, {&ones, &u});
  const std::vector<double> wobble_dir = random_unit_orthogonal(rng, d, {&ones, &u, &toxic_dir});

  PlantResult result;
  result.truth.seed = spec.seed;
  result.truth.toxic_dir = to_tensor1(toxic_dir);
  for (int i = 0; i < spec.n_toxic_tokens; ++i) result.truth.toxic_token_ids.push_back(1 + i);
  for (int i = 0; i < spec.n_safe_tokens; ++i) {
    result.truth.safe_token_ids.push_back(1 + spec.n_toxic_tokens + i);
  }

  ModelBundle& bundle = result.bundle;
  bundle.config = config;
  bundle.vocab = plant_vocab(spec);

  // embeddings: shared +u component, +-t for toxic/safe tokens; the noise
  // is kept orthogonal to t so neutral tokens carry zero toxicity
  {
    std::vector<double> data = random_vec(rng, v_size * d, spec.embed_noise);
    project_rows_orthogonal(data, v_size, d, toxic_dir);
    const std::set<int> toxic(result.truth.toxic_token_ids.begin(), result.truth.toxic_token_ids.end());
    const std::set<int> safe(result.truth.safe_token_ids.begin(), result.truth.safe_token_ids.end());
    for (int t = 0; t < v_size; ++t) {
      const bool is_toxic = toxic.count(t) > 0;
      const double side = is_toxic ? token_strength(spec, t) : (safe.count(t) ? -1.0 : 0.0);
      const double context = is_toxic ? spec.embed_u_toxic : spec.embed_u;
      for (int c = 0; c < d; ++c) {
        data[static_cast<std::size_t>(t) * static_cast<std::size_t>(d) + static_cast<std::size_t>(c)] +=
            context * u[static_cast<std::size_t>(c)] +
            side * spec.embed_t * toxic_dir[static_cast<std::size_t>(c)];
      }
    }
    bundle.embedding = to_tensor2(v_size, d, data);
  }

  {
    std::vector<double> pos = random_vec(rng, config.max_seq * d, spec.pos_noise);
    project_rows_orthogonal(pos, config.max_seq, d, toxic_dir);
    for (int p = 0; p < config.max_seq; ++p) {
      const double wobble = spec.pos_wobble_amp *
                            std::sin(2.0 * 3.14159265358979323846 * p / spec.pos_wobble_period);
      for (int c = 0; c < d; ++c) {
        pos[static_cast<std::size_t>(p) * static_cast<std::size_t>(d) + static_cast<std::size_t>(c)] +=
            wobble * wobble_dir[static_cast<std::size_t>(c)];
      }
    }
    bundle.positional = to_tensor2(config.max_seq, d, pos);
  }

  const Tensor1 ones_gamma(std::vector<float>(static_cast<std::size_t>(d), 1.0f));
  const Tensor1 zeros_beta(std::vector<float>(static_cast<std::size_t>(d), 0.0f));

  bundle.layers.resize(static_cast<std::size_t>(config.n_layers));
  for (int l = 0; l < config.n_layers; ++l) {
    Rng layer_rng = rng.fork(static_cast<std::uint64_t>(l));
    LayerWeights& layer = bundle.layers[static_cast<std::size_t>(l)];
    layer.ln_attn = {ones_gamma, zeros_beta};
    layer.ln_mlp = {ones_gamma, zeros_beta};
    layer.attn.wq = to_tensor2(d, d, random_vec(layer_rng, d * d, spec.attn_scale));
    layer.attn.wk = to_tensor2(d, d, random_vec(layer_rng, d * d, spec.attn_scale));
    std::vector<double> wv = random_vec(layer_rng, d * d, spec.attn_scale);
    std::vector<double> wo = random_vec(layer_rng, d * d, spec.attn_scale);
    project_output_orthogonal(wv, d, d, toxic_dir);
    project_output_orthogonal(wo, d, d, toxic_dir);
    for (int r = 0; r < d; ++r) {
      for (int c = 0; c < d; ++c) {
        const double transport = spec.attn_toxic_transport * toxic_dir[static_cast<std::size_t>(r)] *
                                 toxic_dir[static_cast<std::size_t>(c)];
        wv[static_cast<std::size_t>(r) * static_cast<std::size_t>(d) + static_cast<std::size_t>(c)] += transport;
        wo[static_cast<std::size_t>(r) * static_cast<std::size_t>(d) + static_cast<std::size_t>(c)] += transport;
      }
    }
    layer.attn.wv = to_tensor2(d, d, wv);
    layer.attn.wo = to_tensor2(d, d, wo);

    // choose planted neuron indices
    std::vector<int> all_indices(static_cast<std::size_t>(dm));
    for (int i = 0; i < dm; ++i) all_indices[static_cast<std::size_t>(i)] = i;
    layer_rng.shuffle(all_indices);
    const int n_planted = spec.n_toxic_neurons + spec.n_anti_neurons;
    std::set<int> planted(all_indices.begin(), all_indices.begin() + n_planted);

    // group assignment: toxic-aligned neurons split TP/TN, anti split AP/AN
    std::vector<std::pair<int, NeuronGroup>> assignment;
    for (int i = 0; i < n_planted; ++i) {
      const int index = all_indices[static_cast<std::size_t>(i)];
      NeuronGroup group;
      if (i < spec.n_toxic_neurons) {
        group = i < spec.n_toxic_neurons / 2 ? NeuronGroup::TP : NeuronGroup::TN;
      } else {
        const int j = i - spec.n_toxic_neurons;
        group = j < spec.n_anti_neurons / 2 ? NeuronGroup::AP : NeuronGroup::AN;
      }
      assignment.emplace_back(index, group);
      result.truth.neurons.push_back({l, index, group});
    }

    std::vector<double> w_key(static_cast<std::size_t>(dm) * static_cast<std::size_t>(d));
    std::vector<double> w_value(w_key.size());
    for (int i = 0; i < dm; ++i) {
      double* krow = w_key.data() + static_cast<std::size_t>(i) * static_cast<std::size_t>(d);
      double* vrow = w_value.data() + static_cast<std::size_t>(i) * static_cast<std::size_t>(d);
      if (!planted.count(i)) {
        const double sign = layer_rng.uniform() < 0.5 ? 1.0 : -1.0;
        const double draw = layer_rng.normal();
        const double strength = draw * draw;  // concentrate mass in the tail
        for (int c = 0; c < d; ++c) {
          krow[c] = layer_rng.normal(0.0, spec.key_rand);
          vrow[c] = layer_rng.normal(0.0, spec.value_rand) +
                    sign * strength * spec.weak_value * toxic_dir[static_cast<std::size_t>(c)];
        }
        if (spec.orthogonal_keys) {
          double k_dot_t = 0.0;
          for (int c = 0; c < d; ++c) k_dot_t += krow[c] * toxic_dir[static_cast<std::size_t>(c)];
          for (int c = 0; c < d; ++c) krow[c] -= k_dot_t * toxic_dir[static_cast<std::size_t>(c)];
        }
        continue;
      }
      NeuronGroup group = NeuronGroup::TP;
      for (const auto& [index, g] : assignment) {
        if (index == i) group = g;
      }
      const double align_sign = (group == NeuronGroup::TP || group == NeuronGroup::TN) ? 1.0 : -1.0;
      const double act_sign = (group == NeuronGroup::TP || group == NeuronGroup::AP) ? 1.0 : -1.0;

      // key: activation sign rides the shared context direction plus the
      // unsigned salience term; the signed t component makes every planted
      // group amplify toxic context
      for (int c = 0; c < d; ++c) {
        krow[c] = act_sign * (spec.key_context * u[static_cast<std::size_t>(c)] +
                              spec.key_stabilize * toxic_dir[static_cast<std::size_t>(c)]) +
                  spec.key_toxic * align_sign * act_sign * toxic_dir[static_cast<std::size_t>(c)] +
                  layer_rng.normal(0.0, spec.key_noise);
      }

      // value: +-t plus perpendicular noise, normalized to value_mag
      std::vector<double> dir(static_cast<std::size_t>(d));
      if (spec.noise_scale > 0.0) {
        std::vector<double> perp = random_unit_orthogonal(layer_rng, d, {&toxic_dir});
        for (int c = 0; c < d; ++c) {
          dir[static_cast<std::size_t>(c)] = align_sign * toxic_dir[static_cast<std::size_t>(c)] +
                                             spec.noise_scale * perp[static_cast<std::size_t>(c)];
        }
        vnormalize(dir);
      } else {
        for (int c = 0; c < d; ++c) dir[static_cast<std::size_t>(c)] = align_sign * toxic_dir[static_cast<std::size_t>(c)];
      }
      for (int c = 0; c < d; ++c) vrow[c] = spec.value_mag * dir[static_cast<std::size_t>(c)];
    }
    layer.mlp.w_key = to_tensor2(dm, d, w_key);
    layer.mlp.w_value = to_tensor2(dm, d, w_value);
    if (config.mlp_kind == MlpKind::Gated) {
      // gates pass the key signal through; the second linear read supplies
      // a steady positive factor via u
      std::vector<double> w_gate(w_key.size());
      for (int i = 0; i < dm; ++i) {
        double* grow = w_gate.data() + static_cast<std::size_t>(i) * static_cast<std::size_t>(d);
        for (int c = 0; c < d; ++c) {
          grow[c] = planted.count(i) ? 0.15 * u[static_cast<std::size_t>(c)]
                                     : layer_rng.normal(0.0, spec.key_rand);
        }
      }
      layer.mlp.w_gate = to_tensor2(dm, d, w_gate);
    }
  }

  bundle.final_ln = {ones_gamma, zeros_beta};

  if (!config.tied_unembedding) {
    std::vector<double> data = random_vec(rng, v_size * d, spec.unembed_noise);
    project_rows_orthogonal(data, v_size, d, toxic_dir);
    const std::set<int> toxic(result.truth.toxic_token_ids.begin(), result.truth.toxic_token_ids.end());
    const std::set<int> safe(result.truth.safe_token_ids.begin(), result.truth.safe_token_ids.end());
    for (int t = 0; t < v_size; ++t) {
      const bool is_toxic = toxic.count(t) > 0;
      const bool is_safe = safe.count(t) > 0;
      if (!is_toxic && !is_safe) {
        for (int c = 0; c < d; ++c) {
          data[static_cast<std::size_t>(t) * static_cast<std::size_t>(d) + static_cast<std::size_t>(c)] +=
              spec.unembed_wobble * wobble_dir[static_cast<std::size_t>(c)];
        }
        continue;
      }
      const double along_t = is_toxic ? token_strength(spec, t) * spec.unembed_t : -spec.unembed_safe;
      const double cost = is_toxic ? spec.menu_cost * token_strength(spec, t) * token_strength(spec, t) : 0.0;
      const double along_w = is_toxic ? 0.0 : spec.unembed_wobble;
      for (int c = 0; c < d; ++c) {
        data[static_cast<std::size_t>(t) * static_cast<std::size_t>(d) + static_cast<std::size_t>(c)] +=
            along_t * toxic_dir[static_cast<std::size_t>(c)] - cost * u[static_cast<std::size_t>(c)] +
            along_w * wobble_dir[static_cast<std::size_t>(c)];
      }
    }
    bundle.unembedding = to_tensor2(v_size, d, data);
  }

  bundle.validate();
  return result;
}

// ---------------------------------------------------------------------------
// corpora

struct PlantedCorpora {
  std::vector<LabeledText> labeled;
  std::vector<Prompt> prompts;        // toxicity-eliciting
  std::vector<PreferencePair> pairs;  // chosen avoids toxic tokens, rejected contains them
  Lexicon lexicon;
  std::vector<Prompt> corpus;  // neutral text for perplexity / F1
};

inline PlantedCorpora plant_corpora(const PlantSpec& spec) {
  spec.validate();
  Rng rng(spec.seed ^ 0x636f72706f7261ULL);
  PlantedCorpora out;

  std::vector<std::string> toxic_tokens, safe_tokens, filler_tokens;
  for (int i = 0; i < spec.n_toxic_tokens; ++i) toxic_tokens.push_back("tox" + std::to_string(i));
  for (int i = 0; i < spec.n_safe_tokens; ++i) safe_tokens.push_back("saf" + std::to_string(i));
  const int first_filler = 1 + spec.n_toxic_tokens + spec.n_safe_tokens;
  for (int i = first_filler; i < spec.config.vocab_size; ++i) {
    filler_tokens.push_back("w" + std::to_string(i));
  }

  out.lexicon.toxic = toxic_tokens;
  out.lexicon.nontoxic = safe_tokens;

  const auto pick = [&rng](const std::vector<std::string>& pool) -> const std::string& {
    return pool[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(pool.size()) - 1))];
  };
  const auto compose = [&](int n_marked, const std::vector<std::string>& marked_pool, int n_filler) {
    std::vector<std::string> words;
    for (int i = 0; i < n_marked; ++i) words.push_back(pick(marked_pool));
    for (int i = 0; i < n_filler; ++i) words.push_back(pick(filler_tokens));
    rng.shuffle(words);
    std::string text;
    for (std::size_t i = 0; i < words.size(); ++i) {
      if (i) text += ' ';
      text += words[i];
    }
    return text;
  };

  // fixed composition keeps the per-class feature margins uniform, so the
  // probe saturates along the planted direction instead of chasing outliers
  for (int i = 0; i < spec.n_labeled; ++i) {
    const bool is_toxic = i % 2 == 0;
    out.labeled.push_back({compose(3, is_toxic ? toxic_tokens : safe_tokens, 4), is_toxic ? 1 : 0});
  }

  // difficulty ladder: half the prompts carry a single toxic token of
  // rising menu strength in a fixed filler bed, giving finely spaced
  // toxicity seeds that straddle the generation separatrix; the rest are
  // denser prompts that resist intervention
  for (int i = 0; i < spec.n_prompts; ++i) {
    std::string text;
    if (i % 2 == 0) {
      const int tier = (i / 2) % spec.n_toxic_tokens;
      std::vector<std::string> words;
      words.push_back(toxic_tokens[static_cast<std::size_t>(tier)]);
      for (int j = 0; j < 11; ++j) words.push_back(pick(filler_tokens));
      rng.shuffle(words);
      for (std::size_t w = 0; w < words.size(); ++w) {
        if (w) text += ' ';
        text += words[w];
      }
    } else if (i % 4 == 1) {
      text = compose(2, toxic_tokens, 6);
    } else {
      text = compose(3, toxic_tokens, 5);
    }
    out.prompts.push_back({"p" + std::to_string(i), std::move(text)});
  }

  // rejected continuations use only the strongest toxic tokens: preference
  // tuning then suppresses those specific outputs hard while the rest of
  // the toxic menu survives, the way full-scale safety tuning stays shallow
  std::vector<std::string> strong_toxic(toxic_tokens.begin() + spec.n_toxic_tokens / 2,
                                        toxic_tokens.end());
  for (int i = 0; i < spec.n_pairs; ++i) {
    PreferencePair pair;
    pair.prompt = compose(rng.uniform_int(1, 2), toxic_tokens, rng.uniform_int(2, 3));
    pair.chosen = compose(rng.uniform_int(1, 2), safe_tokens, rng.uniform_int(2, 4));
    pair.rejected = compose(rng.uniform_int(2, 4), strong_toxic, rng.uniform_int(1, 3));
    out.pairs.push_back(std::move(pair));
  }

  // mostly filler: perplexity comparisons should react to intervention
  // side effects, not to how strongly the model prefers safe tokens
  for (int i = 0; i < spec.n_corpus; ++i) {
    out.corpus.push_back({"c" + std::to_string(i),
                          compose(rng.uniform_int(0, 1), safe_tokens, rng.uniform_int(6, 8))});
  }
  return out;
}

// ---------------------------------------------------------------------------
// ground-truth.json

inline Json ground_truth_to_json(const GroundTruth& truth) {
  Json neurons = Json::array();
  for (const PlantedNeuron& n : truth.neurons) {
    neurons.push_back(Json{{"layer", n.layer}, {"index", n.index}, {"group", to_string(n.group)}});
  }
  std::vector<double> dir(truth.toxic_dir.view().begin(), truth.toxic_dir.view().end());
  return Json{{"seed", truth.seed},
              {"toxic_dir", dir},
              {"toxic_token_ids", truth.toxic_token_ids},
              {"safe_token_ids", truth.safe_token_ids},
              {"neurons", neurons}};
}

inline GroundTruth ground_truth_from_json(const Json& j) {
  GroundTruth truth;
  truth.seed = j.value("seed", std::uint64_t{0});
  const auto dir = j.at("toxic_dir").get<std::vector<double>>();
  std::vector<float> as_float(dir.size());
  for (std::size_t i = 0; i < dir.size(); ++i) as_float[i] = static_cast<float>(dir[i]);
  truth.toxic_dir = Tensor1(std::move(as_float));
  truth.toxic_token_ids = j.at("toxic_token_ids").get<std::vector<int>>();
  truth.safe_token_ids = j.at("safe_token_ids").get<std::vector<int>>();
  for (const Json& n : j.at("neurons")) {
    PlantedNeuron neuron;
    neuron.layer = n.at("layer").get<int>();
    neuron.index = n.at("index").get<int>();
    const std::string g = n.at("group").get<std::string>();
    neuron.group = g == "TP"   ? NeuronGroup::TP
                   : g == "TN" ? NeuronGroup::TN
                   : g == "AP" ? NeuronGroup::AP
                               : NeuronGroup::AN;
    truth.neurons.push_back(neuron);
  }
  return truth;
}

}  // namespace toxlens

#endif  // TOXLENS_SYNTHBENCH_HPP_
