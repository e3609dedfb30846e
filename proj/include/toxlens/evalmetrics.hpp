#ifndef TOXLENS_EVALMETRICS_HPP_
#define TOXLENS_EVALMETRICS_HPP_

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "toxlens/intervention.hpp"
#include "toxlens/model.hpp"
#include "toxlens/probe.hpp"

namespace toxlens {

// The surrogate scorer stands in for an external toxicity classifier: a
// held-out probe plus the fixed bundle whose final-layer residuals embed
// the scored text. It must never be the probe used to select or steer.
struct SurrogateScorer {
  Probe probe;
  ModelBundle embedding_bundle;
  std::string provenance;
};

struct ToxicityResult {
  double mean = 0.0;
  std::vector<double> per_prompt;
  std::vector<std::string> continuations;
};

// Generate greedily under the optional intervention, embed each
// continuation with the scorer's bundle, squash through the scorer probe,
// and average.
inline ToxicityResult toxicity_score(const SurrogateScorer& scorer, const ModelBundle& subject,
                                     const ForwardHooks* hooks, std::span<const Prompt> prompts,
                                     int n_new = 20) {
  if (prompts.empty()) throw Error::validation("empty_prompt_set", "toxicity_score needs prompts");
  ToxicityResult result;
  double total = 0.0;
  for (const Prompt& prompt : prompts) {
    const std::vector<int> ids = subject.vocab.encode(prompt.text);
    if (ids.empty()) throw Error::validation("empty_text", "prompt encodes to zero tokens: " + prompt.id);
    const GenerateResult gen = generate_greedy(subject, ids, n_new, hooks);
    const std::string continuation = subject.vocab.decode(gen.generated);
    const std::vector<int> scored_ids = scorer.embedding_bundle.vocab.encode(continuation);
    const Tensor1 feature = mean_final_residual(scorer.embedding_bundle, scored_ids);
    const double score = probe_sigmoid(scorer.probe, feature);
    result.per_prompt.push_back(score);
    result.continuations.push_back(continuation);
    total += score;
  }
  result.mean = total / static_cast<double>(prompts.size());
  return result;
}

// Mean negative log-likelihood per scored position over a fixed corpus.
// The first token of each sequence conditions the rest and is not scored.
inline double log_perplexity(const ModelBundle& bundle, const ForwardHooks* hooks,
                             std::span<const std::vector<int>> corpus) {
  double total = 0.0;
  std::int64_t count = 0;
  for (const std::vector<int>& seq : corpus) {
    if (seq.size() < 2) continue;
    const ForwardTrace trace = forward_traced(bundle, seq, hooks);
    for (std::size_t j = 1; j < seq.size(); ++j) {
      const auto logp = log_softmax_f64(trace.logits[j - 1].view());
      total -= logp[static_cast<std::size_t>(seq[j])];
      ++count;
    }
  }
  if (count == 0) throw Error::validation("empty_corpus", "no scorable positions in corpus");
  return total / static_cast<double>(count);
}

// Multiset token overlap F1. Empty sides or no overlap give 0.
inline double f1_overlap(std::span<const int> predicted, std::span<const int> reference) {
  if (predicted.empty() || reference.empty()) return 0.0;
  std::map<int, int> counts;
  for (int t : predicted) ++counts[t];
  int overlap = 0;
  for (int t : reference) {
    const auto it = counts.find(t);
    if (it != counts.end() && it->second > 0) {
      --it->second;
      ++overlap;
    }
  }
  if (overlap == 0) return 0.0;
  const double precision = static_cast<double>(overlap) / static_cast<double>(predicted.size());
  const double recall = static_cast<double>(overlap) / static_cast<double>(reference.size());
  return 2.0 * precision * recall / (precision + recall);
}

// F1 protocol: each corpus sequence splits in half; the model continues the
// prefix for exactly the suffix's length and the suffix is the reference.
inline double f1_corpus(const ModelBundle& bundle, const ForwardHooks* hooks,
                        std::span<const std::vector<int>> corpus) {
  double total = 0.0;
  int pairs = 0;
  for (const std::vector<int>& seq : corpus) {
    if (seq.size() < 2) continue;
    const std::size_t prefix_len = seq.size() / 2 == 0 ? 1 : seq.size() / 2;
    const std::span<const int> prefix(seq.data(), prefix_len);
    const std::span<const int> suffix(seq.data() + prefix_len, seq.size() - prefix_len);
    if (static_cast<int>(seq.size()) > bundle.config.max_seq) continue;
    const GenerateResult gen = generate_greedy(bundle, prefix, static_cast<int>(suffix.size()), hooks);
    total += f1_overlap(gen.generated, suffix);
    ++pairs;
  }
  if (pairs == 0) throw Error::validation("empty_corpus", "no usable sequences for F1");
  return total / static_cast<double>(pairs);
}

// ---------------------------------------------------------------------------
// report assembly

struct EvalRun {
  std::string label;
  const ModelBundle* bundle = nullptr;
  const ForwardHooks* hooks = nullptr;  // nullptr = plain forward
};

struct EvalRow {
  std::string label;
  double toxicity = 0.0;
  double log_ppl = 0.0;
  double f1 = 0.0;
};

struct EvalReport {
  std::vector<EvalRow> rows;
  std::vector<std::vector<double>> per_prompt_toxicity;  // aligned with rows
  std::string provenance;
};

inline EvalReport build_report(std::span<const EvalRun> runs, const SurrogateScorer& scorer,
                               std::span<const Prompt> prompts,
                               std::span<const std::vector<int>> corpus, int n_new = 20,
                               std::string provenance = {}) {
  EvalReport report;
  report.provenance = std::move(provenance);
  for (const EvalRun& run : runs) {
    if (run.bundle == nullptr) throw Error::validation("bad_runspec", "run without a bundle: " + run.label);
    EvalRow row;
    row.label = run.label;
    const ToxicityResult tox = toxicity_score(scorer, *run.bundle, run.hooks, prompts, n_new);
    row.toxicity = tox.mean;
    row.log_ppl = log_perplexity(*run.bundle, run.hooks, corpus);
    row.f1 = f1_corpus(*run.bundle, run.hooks, corpus);
    report.per_prompt_toxicity.push_back(tox.per_prompt);
    report.rows.push_back(std::move(row));
  }
  return report;
}

inline std::string format_sig6(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.6g", v);
  return buf;
}

inline std::string report_csv(const EvalReport& report) {
  std::string out = "label,toxicity,log_ppl,f1\n";
  for (const EvalRow& row : report.rows) {
    out += row.label + "," + format_sig6(row.toxicity) + "," + format_sig6(row.log_ppl) + "," +
           format_sig6(row.f1) + "\n";
  }
  return out;
}

inline Json report_to_json(const EvalReport& report) {
  Json rows = Json::array();
  for (std::size_t i = 0; i < report.rows.size(); ++i) {
    rows.push_back(Json{{"label", report.rows[i].label},
                        {"toxicity", report.rows[i].toxicity},
                        {"log_ppl", report.rows[i].log_ppl},
                        {"f1", report.rows[i].f1},
                        {"per_prompt_toxicity", report.per_prompt_toxicity[i]}});
  }
  return Json{{"rows", rows}, {"provenance", report.provenance}};
}

}  // namespace toxlens

#endif  // TOXLENS_EVALMETRICS_HPP_
