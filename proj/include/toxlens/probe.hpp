#ifndef TOXLENS_PROBE_HPP_
#define TOXLENS_PROBE_HPP_

#include <algorithm>
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
#include "toxlens/textio.hpp"

namespace toxlens {

struct ProbeMeta {
  int epochs = 0;
  double lr = 0.0;
  double l2 = 0.0;
  double split = 0.9;
  std::uint64_t seed = 0;
  double train_accuracy = 0.0;
  double test_accuracy = 0.0;
  double final_loss = 0.0;
  int train_rows = 0;
  int test_rows = 0;
  std::string bundle;  // path of the model the features came from
  std::string note;
};

struct Probe {
  Tensor1 direction;  // length d
  double bias = 0.0;
  ProbeMeta meta;
};

struct LabeledActivationSet {
  std::vector<Tensor1> features;  // mean final-layer residuals
  std::vector<int> labels;        // 0 or 1
  std::string provenance;

  int size() const { return static_cast<int>(features.size()); }
};

// ---------------------------------------------------------------------------
// feature extraction: mean over all token positions of the final-layer
// residual stream

inline Tensor1 mean_final_residual(const ModelBundle& bundle, std::span<const int> ids) {
  const ForwardTrace trace = forward_traced(bundle, ids);
  const int d = bundle.config.d_model;
  std::vector<double> acc(static_cast<std::size_t>(d), 0.0);
  for (const Tensor1& x : trace.final_residual) {
    for (int c = 0; c < d; ++c) acc[static_cast<std::size_t>(c)] += static_cast<double>(x[c]);
  }
  Tensor1 out(d);
  for (int c = 0; c < d; ++c) {
    out[c] = static_cast<float>(acc[static_cast<std::size_t>(c)] / static_cast<double>(trace.n_positions()));
  }
  return out;
}

inline LabeledActivationSet collect_activations(const ModelBundle& bundle,
                                                std::span<const LabeledText> texts,
                                                std::string provenance = {}) {
  LabeledActivationSet set;
  set.provenance = std::move(provenance);
  for (const LabeledText& row : texts) {
    const std::vector<int> ids = bundle.vocab.encode(row.text);
    if (ids.empty()) throw Error::validation("empty_text", "labeled text encodes to zero tokens");
    set.features.push_back(mean_final_residual(bundle, ids));
    set.labels.push_back(row.label);
  }
  return set;
}

// ---------------------------------------------------------------------------
// logistic-regression probe, full-batch gradient descent

struct TrainProbeOptions {
  int epochs = 500;
  double lr = 0.1;
  double l2 = 1e-4;
  double split = 0.9;  // train fraction
  std::uint64_t seed = 0;
};

namespace detail {

// Mean logistic loss plus l2 on the weights; gradient accumulated in the
// same pass. Weights live in double during the fit.
inline double probe_loss_grad(const std::vector<Tensor1>& xs, const std::vector<int>& ys,
                              std::span<const int> rows, const std::vector<double>& w, double b,
                              double l2, std::vector<double>* gw, double* gb) {
  const std::size_t d = w.size();
  if (gw != nullptr) {
    gw->assign(d, 0.0);
    *gb = 0.0;
  }
  double loss = 0.0;
  for (int r : rows) {
    const Tensor1& x = xs[static_cast<std::size_t>(r)];
    double z = b;
    for (std::size_t c = 0; c < d; ++c) z += w[c] * static_cast<double>(x[static_cast<int>(c)]);
    const double y = static_cast<double>(ys[static_cast<std::size_t>(r)]);
    // -[y log s + (1-y) log(1-s)] written against the logit for stability
    const double softplus = z > 0.0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z));
    loss += softplus - y * z;
    if (gw != nullptr) {
      const double err = sigmoid_f64(z) - y;
      for (std::size_t c = 0; c < d; ++c) (*gw)[c] += err * static_cast<double>(x[static_cast<int>(c)]);
      *gb += err;
    }
  }
  const double n = static_cast<double>(rows.size());
  loss /= n;
  double reg = 0.0;
  for (double v : w) reg += v * v;
  loss += l2 * reg;
  if (gw != nullptr) {
    for (std::size_t c = 0; c < d; ++c) (*gw)[c] = (*gw)[c] / n + 2.0 * l2 * w[c];
    *gb /= n;
  }
  return loss;
}

inline double probe_accuracy(const std::vector<Tensor1>& xs, const std::vector<int>& ys,
                             std::span<const int> rows, const std::vector<double>& w, double b) {
  if (rows.empty()) return 0.0;
  int hits = 0;
  for (int r : rows) {
    const Tensor1& x = xs[static_cast<std::size_t>(r)];
    double z = b;
    for (std::size_t c = 0; c < w.size(); ++c) z += w[c] * static_cast<double>(x[static_cast<int>(c)]);
    const int predicted = z >= 0.0 ? 1 : 0;
    if (predicted == ys[static_cast<std::size_t>(r)]) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(rows.size());
}

}  // namespace detail

// Deterministic stratified split: per class, shuffled by seed, at least one
// row stays in train. An empty test side reports train accuracy.
inline std::pair<std::vector<int>, std::vector<int>> split_rows(const LabeledActivationSet& set,
                                                                double train_fraction,
                                                                std::uint64_t seed) {
  std::vector<int> train, test;
  Rng rng(seed ^ 0x70524f4245ULL);
  for (int cls = 0; cls <= 1; ++cls) {
    std::vector<int> rows;
    for (int r = 0; r < set.size(); ++r) {
      if (set.labels[static_cast<std::size_t>(r)] == cls) rows.push_back(r);
    }
    rng.shuffle(rows);
    const int n_train = std::max(1, static_cast<int>(std::floor(train_fraction * static_cast<double>(rows.size()))));
    for (std::size_t i = 0; i < rows.size(); ++i) {
      (static_cast<int>(i) < n_train ? train : test).push_back(rows[i]);
    }
  }
  std::sort(train.begin(), train.end());
  std::sort(test.begin(), test.end());
  return {train, test};
}

inline Probe train_probe(const LabeledActivationSet& set, const TrainProbeOptions& options = {}) {
  if (set.size() == 0) throw Error::validation("single_class", "empty activation set");
  const int d = set.features.front().size();
  bool has0 = false, has1 = false;
  for (int y : set.labels) (y == 0 ? has0 : has1) = true;
  if (!has0 || !has1) throw Error::validation("single_class", "probe training needs both classes");

  const auto [train_rows, test_rows] = split_rows(set, options.split, options.seed);

  std::vector<double> w(static_cast<std::size_t>(d), 0.0);
  double b = 0.0;
  std::vector<double> gw;
  double gb = 0.0;
  double loss = 0.0;
  for (int epoch = 0; epoch < options.epochs; ++epoch) {
    loss = detail::probe_loss_grad(set.features, set.labels, train_rows, w, b, options.l2, &gw, &gb);
    if (!std::isfinite(loss)) throw Error::numeric("non_finite_loss", "probe loss diverged");
    for (std::size_t c = 0; c < w.size(); ++c) w[c] -= options.lr * gw[c];
    b -= options.lr * gb;
  }
  loss = detail::probe_loss_grad(set.features, set.labels, train_rows, w, b, options.l2, nullptr, nullptr);
  if (!std::isfinite(loss)) throw Error::numeric("non_finite_loss", "probe loss diverged");

  Probe probe;
  std::vector<float> direction(static_cast<std::size_t>(d));
  for (std::size_t c = 0; c < w.size(); ++c) direction[c] = static_cast<float>(w[c]);
  probe.direction = Tensor1(std::move(direction));
  probe.bias = b;
  probe.meta.epochs = options.epochs;
  probe.meta.lr = options.lr;
  probe.meta.l2 = options.l2;
  probe.meta.split = options.split;
  probe.meta.seed = options.seed;
  probe.meta.train_rows = static_cast<int>(train_rows.size());
  probe.meta.test_rows = static_cast<int>(test_rows.size());
  probe.meta.final_loss = loss;
  probe.meta.train_accuracy = detail::probe_accuracy(set.features, set.labels, train_rows, w, b);
  probe.meta.test_accuracy = test_rows.empty()
                                 ? probe.meta.train_accuracy
                                 : detail::probe_accuracy(set.features, set.labels, test_rows, w, b);
  return probe;
}

// Per-epoch loss trajectory for the same fit, used by monotonicity checks.
inline std::vector<double> probe_loss_history(const LabeledActivationSet& set,
                                              const TrainProbeOptions& options = {}) {
  const auto [train_rows, test_rows] = split_rows(set, options.split, options.seed);
  (void)test_rows;
  std::vector<double> w(static_cast<std::size_t>(set.features.front().size()), 0.0);
  double b = 0.0;
  std::vector<double> gw;
  double gb = 0.0;
  std::vector<double> history;
  for (int epoch = 0; epoch < options.epochs; ++epoch) {
    history.push_back(detail::probe_loss_grad(set.features, set.labels, train_rows, w, b, options.l2, &gw, &gb));
    for (std::size_t c = 0; c < w.size(); ++c) w[c] -= options.lr * gw[c];
    b -= options.lr * gb;
  }
  history.push_back(detail::probe_loss_grad(set.features, set.labels, train_rows, w, b, options.l2, nullptr, nullptr));
  return history;
}

inline double probe_logit(const Probe& probe, const Tensor1& x) {
  return dot(probe.direction.view(), x.view()) + probe.bias;
}

inline double probe_sigmoid(const Probe& probe, const Tensor1& x) {
  return detail::sigmoid_f64(probe_logit(probe, x));
}

// ---------------------------------------------------------------------------
// steering

inline Tensor1 steer(const Tensor1& x, const Probe& probe, double alpha) {
  if (x.size() != probe.direction.size()) {
    throw Error::validation("shape_mismatch", "steer: residual and probe lengths differ");
  }
  Tensor1 out(x.size());
  for (int c = 0; c < x.size(); ++c) {
    out[c] = x[c] - static_cast<float>(alpha) * probe.direction[c];
  }
  return out;
}

// ---------------------------------------------------------------------------
// probe-free contrastive direction from token embeddings

struct ResolvedLexicon {
  std::vector<int> toxic_ids;
  std::vector<int> nontoxic_ids;
};

inline ResolvedLexicon resolve_lexicon(const ModelBundle& bundle, const Lexicon& lexicon) {
  lexicon.validate();
  if (lexicon.toxic.empty() || lexicon.nontoxic.empty()) {
    throw Error::validation("empty_lexicon_side", "both lexicon sides must be nonempty");
  }
  ResolvedLexicon out;
  const auto resolve = [&](const std::vector<std::string>& tokens, std::vector<int>& ids) {
    for (const std::string& tok : tokens) {
      const int id = bundle.vocab.find(tok);
      if (id < 0) throw Error::validation("unresolvable_token", "lexicon token not in vocab: " + tok);
      ids.push_back(id);
    }
  };
  resolve(lexicon.toxic, out.toxic_ids);
  resolve(lexicon.nontoxic, out.nontoxic_ids);
  return out;
}

inline Tensor1 contrastive_direction(const ModelBundle& bundle, const Lexicon& lexicon) {
  const ResolvedLexicon resolved = resolve_lexicon(bundle, lexicon);
  const int d = bundle.config.d_model;
  std::vector<double> mean_toxic(static_cast<std::size_t>(d), 0.0);
  std::vector<double> mean_nontoxic(static_cast<std::size_t>(d), 0.0);
  for (int id : resolved.toxic_ids) {
    const auto row = bundle.embedding.row(id);
    for (int c = 0; c < d; ++c) mean_toxic[static_cast<std::size_t>(c)] += static_cast<double>(row[static_cast<std::size_t>(c)]);
  }
  for (int id : resolved.nontoxic_ids) {
    const auto row = bundle.embedding.row(id);
    for (int c = 0; c < d; ++c) mean_nontoxic[static_cast<std::size_t>(c)] += static_cast<double>(row[static_cast<std::size_t>(c)]);
  }
  Tensor1 out(d);
  for (int c = 0; c < d; ++c) {
    out[c] = static_cast<float>(mean_toxic[static_cast<std::size_t>(c)] / static_cast<double>(resolved.toxic_ids.size()) -
                                mean_nontoxic[static_cast<std::size_t>(c)] / static_cast<double>(resolved.nontoxic_ids.size()));
  }
  return out;
}

// ---------------------------------------------------------------------------
// logit lens: unembed a direction and read its nearest tokens

struct LensEntry {
  int token_id = 0;
  double score = 0.0;
};

inline std::vector<LensEntry> logit_lens(const ModelBundle& bundle, const Tensor1& direction, int k) {
  if (direction.size() != bundle.config.d_model) {
    throw Error::validation("shape_mismatch", "lens direction length != d_model");
  }
  if (k < 1 || k > bundle.config.vocab_size) {
    throw Error::validation("invalid_argument", "lens k must be in [1, V]");
  }
  const Tensor2& unembed = bundle.unembed();
  std::vector<LensEntry> entries(static_cast<std::size_t>(bundle.config.vocab_size));
  for (int t = 0; t < bundle.config.vocab_size; ++t) {
    entries[static_cast<std::size_t>(t)] = {t, dot(unembed.row(t), direction.view())};
  }
  std::stable_sort(entries.begin(), entries.end(), [](const LensEntry& a, const LensEntry& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.token_id < b.token_id;
  });
  entries.resize(static_cast<std::size_t>(k));
  return entries;
}

// ---------------------------------------------------------------------------
// probe.json round trip

inline Json probe_to_json(const Probe& probe) {
  std::vector<double> direction(probe.direction.view().begin(), probe.direction.view().end());
  return Json{{"direction", direction},
              {"bias", probe.bias},
              {"metadata",
               Json{{"epochs", probe.meta.epochs},
                    {"lr", probe.meta.lr},
                    {"l2", probe.meta.l2},
                    {"split", probe.meta.split},
                    {"seed", probe.meta.seed},
                    {"train_accuracy", probe.meta.train_accuracy},
                    {"test_accuracy", probe.meta.test_accuracy},
                    {"final_loss", probe.meta.final_loss},
                    {"train_rows", probe.meta.train_rows},
                    {"test_rows", probe.meta.test_rows},
                    {"bundle", probe.meta.bundle},
                    {"note", probe.meta.note}}}};
}

inline Probe probe_from_json(const Json& j) {
  if (!j.contains("direction") || !j.contains("bias")) {
    throw Error::io("bad_probe", "probe json needs direction and bias");
  }
  Probe probe;
  const auto direction = j["direction"].get<std::vector<double>>();
  std::vector<float> as_float(direction.size());
  for (std::size_t i = 0; i < direction.size(); ++i) as_float[i] = static_cast<float>(direction[i]);
  probe.direction = Tensor1(std::move(as_float));
  probe.bias = j["bias"].get<double>();
  if (j.contains("metadata")) {
    const Json& m = j["metadata"];
    probe.meta.epochs = m.value("epochs", 0);
    probe.meta.lr = m.value("lr", 0.0);
    probe.meta.l2 = m.value("l2", 0.0);
    probe.meta.split = m.value("split", 0.9);
    probe.meta.seed = m.value("seed", std::uint64_t{0});
    probe.meta.train_accuracy = m.value("train_accuracy", 0.0);
    probe.meta.test_accuracy = m.value("test_accuracy", 0.0);
    probe.meta.final_loss = m.value("final_loss", 0.0);
    probe.meta.train_rows = m.value("train_rows", 0);
    probe.meta.test_rows = m.value("test_rows", 0);
    probe.meta.bundle = m.value("bundle", std::string{});
    probe.meta.note = m.value("note", std::string{});
  }
  return probe;
}

inline void save_probe(const Probe& probe, const std::string& path) {
  write_file(path, probe_to_json(probe).dump(2) + "\n");
}

inline Probe load_probe(const std::string& path) { return probe_from_json(load_json(path)); }

}  // namespace toxlens

#endif  // TOXLENS_PROBE_HPP_
