#ifndef TOXLENS_ATTRIBUTION_HPP_
#define TOXLENS_ATTRIBUTION_HPP_

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "toxlens/model.hpp"
#include "toxlens/numerics.hpp"
#include "toxlens/probe.hpp"

namespace toxlens {

// Four groups by sign(value-vector alignment with the probe) x
// sign(pre activation): Toxic/Anti-toxic x Positive/Negative. Exact zeros
// fall outside the taxonomy.
enum class NeuronGroup { TP, TN, AP, AN, Degenerate };

enum class DeltaDirection { Reduce, Increase, Zero };

inline const char* to_string(NeuronGroup group) {
  switch (group) {
    case NeuronGroup::TP: return "TP";
    case NeuronGroup::TN: return "TN";
    case NeuronGroup::AP: return "AP";
    case NeuronGroup::AN: return "AN";
    case NeuronGroup::Degenerate: return "degenerate";
  }
  return "degenerate";
}

inline const char* to_string(DeltaDirection direction) {
  switch (direction) {
    case DeltaDirection::Reduce: return "reduce";
    case DeltaDirection::Increase: return "increase";
    case DeltaDirection::Zero: return "zero";
  }
  return "zero";
}

inline NeuronGroup classify_group(double cos_align, double m_pre) {
  if (cos_align == 0.0 || m_pre == 0.0) return NeuronGroup::Degenerate;
  if (cos_align > 0.0) return m_pre > 0.0 ? NeuronGroup::TP : NeuronGroup::TN;
  return m_pre > 0.0 ? NeuronGroup::AP : NeuronGroup::AN;
}

inline DeltaDirection delta_direction(double delta) {
  if (delta > 0.0) return DeltaDirection::Reduce;
  if (delta < 0.0) return DeltaDirection::Increase;
  return DeltaDirection::Zero;
}

struct NeuronAttribution {
  int layer = 0;
  int index = 0;
  double cos_align = 0.0;  // against the pre model's value vector
  double m_pre = 0.0;
  double m_post = 0.0;
  double delta = 0.0;  // projection drop along the unit probe
  NeuronGroup group = NeuronGroup::Degenerate;
  DeltaDirection direction = DeltaDirection::Zero;
};

// (m_pre v_pre - m_post v_post) . probe_dir / ||probe_dir||
inline double delta_toxic(const Tensor1& v_pre, const Tensor1& v_post, double m_pre, double m_post,
                          const Tensor1& probe_dir) {
  if (v_pre.size() != probe_dir.size() || v_post.size() != probe_dir.size()) {
    throw Error::validation("shape_mismatch", "delta_toxic: vector lengths differ");
  }
  const double norm = norm2(probe_dir.view());
  if (norm == 0.0) throw Error::validation("zero_probe", "probe direction is the zero vector");
  const double pre = m_pre * dot(v_pre.view(), probe_dir.view());
  const double post = m_post * dot(v_post.view(), probe_dir.view());
  return (pre - post) / norm;
}

inline std::vector<NeuronAttribution> attribute_all(const ModelBundle& bundle_pre,
                                                    const ModelBundle& bundle_post,
                                                    const MeanActivationProfile& profile_pre,
                                                    const MeanActivationProfile& profile_post,
                                                    const Tensor1& probe_dir) {
  if (bundle_pre.config != bundle_post.config) {
    throw Error::validation("config_mismatch", "pre and post bundles must share a config");
  }
  const ModelConfig& config = bundle_pre.config;
  if (profile_pre.n_layers != config.n_layers || profile_pre.d_mlp != config.d_mlp ||
      profile_post.n_layers != config.n_layers || profile_post.d_mlp != config.d_mlp) {
    throw Error::validation("config_mismatch", "profiles do not match the bundle config");
  }
  if (probe_dir.size() != config.d_model) {
    throw Error::validation("shape_mismatch", "probe length != d_model");
  }
  const double probe_norm = norm2(probe_dir.view());
  if (probe_norm == 0.0) throw Error::validation("zero_probe", "probe direction is the zero vector");

  std::vector<NeuronAttribution> out;
  out.reserve(static_cast<std::size_t>(config.n_layers) * static_cast<std::size_t>(config.d_mlp));
  for (int layer = 0; layer < config.n_layers; ++layer) {
    const Tensor2& v_pre = bundle_pre.layers[static_cast<std::size_t>(layer)].mlp.w_value;
    const Tensor2& v_post = bundle_post.layers[static_cast<std::size_t>(layer)].mlp.w_value;
    for (int i = 0; i < config.d_mlp; ++i) {
      NeuronAttribution rec;
      rec.layer = layer;
      rec.index = i;
      rec.m_pre = profile_pre.at(layer, i);
      rec.m_post = profile_post.at(layer, i);
      const double vnorm = norm2(v_pre.row(i));
      const double align_dot = dot(v_pre.row(i), probe_dir.view());
      rec.cos_align = vnorm == 0.0 ? 0.0 : align_dot / (vnorm * probe_norm);
      const double pre = rec.m_pre * align_dot;
      const double post = rec.m_post * dot(v_post.row(i), probe_dir.view());
      rec.delta = (pre - post) / probe_norm;
      rec.group = classify_group(rec.cos_align, rec.m_pre);
      rec.direction = delta_direction(rec.delta);
      out.push_back(rec);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// aggregates

struct LayerLedger {
  std::vector<double> reduction;  // per layer, sum of positive deltas
  std::vector<double> increase;   // per layer, sum of |negative deltas|
  std::vector<double> net;        // reduction - increase, as accumulated
};

inline LayerLedger layer_ledger(std::span<const NeuronAttribution> attrs, int n_layers) {
  LayerLedger ledger;
  ledger.reduction.assign(static_cast<std::size_t>(n_layers), 0.0);
  ledger.increase.assign(static_cast<std::size_t>(n_layers), 0.0);
  ledger.net.assign(static_cast<std::size_t>(n_layers), 0.0);
  for (const NeuronAttribution& rec : attrs) {
    if (rec.delta > 0.0) {
      ledger.reduction[static_cast<std::size_t>(rec.layer)] += rec.delta;
    } else if (rec.delta < 0.0) {
      ledger.increase[static_cast<std::size_t>(rec.layer)] += -rec.delta;
    }
  }
  for (int layer = 0; layer < n_layers; ++layer) {
    ledger.net[static_cast<std::size_t>(layer)] =
        ledger.reduction[static_cast<std::size_t>(layer)] - ledger.increase[static_cast<std::size_t>(layer)];
  }
  return ledger;
}

struct GroupSummary {
  // over Delta > 0 neurons with a defined group, indexed TP, TN, AP, AN
  std::array<std::int64_t, 4> counts{};
  std::array<double, 4> proportions{};
  std::array<double, 4> total_delta{};
  std::int64_t reducing_count = 0;    // all Delta > 0 neurons
  std::int64_t increasing_count = 0;  // all Delta < 0 neurons
  std::int64_t zero_count = 0;
  std::int64_t degenerate_reducing = 0;  // Delta > 0 but outside the taxonomy
  std::int64_t total = 0;
  double reducing_fraction = 0.0;  // reducing_count / total
  // cumulative reduction over Delta > 0 neurons ranked by descending delta,
  // ties by (layer, index)
  std::vector<double> cumulative_reduction;
  std::vector<NeuronGroup> ranked_groups;  // group of each ranked neuron
};

inline int group_slot(NeuronGroup group) {
  switch (group) {
    case NeuronGroup::TP: return 0;
    case NeuronGroup::TN: return 1;
    case NeuronGroup::AP: return 2;
    case NeuronGroup::AN: return 3;
    case NeuronGroup::Degenerate: return -1;
  }
  return -1;
}

inline GroupSummary group_summary(std::span<const NeuronAttribution> attrs) {
  GroupSummary summary;
  summary.total = static_cast<std::int64_t>(attrs.size());
  std::vector<const NeuronAttribution*> reducing;
  for (const NeuronAttribution& rec : attrs) {
    switch (rec.direction) {
      case DeltaDirection::Reduce: {
        ++summary.reducing_count;
        reducing.push_back(&rec);
        const int slot = group_slot(rec.group);
        if (slot < 0) {
          ++summary.degenerate_reducing;
        } else {
          ++summary.counts[static_cast<std::size_t>(slot)];
          summary.total_delta[static_cast<std::size_t>(slot)] += rec.delta;
        }
        break;
      }
      case DeltaDirection::Increase:
        ++summary.increasing_count;
        break;
      case DeltaDirection::Zero:
        ++summary.zero_count;
        break;
    }
  }
  const std::int64_t grouped = summary.counts[0] + summary.counts[1] + summary.counts[2] + summary.counts[3];
  if (grouped > 0) {
    for (std::size_t g = 0; g < 4; ++g) {
      summary.proportions[g] = static_cast<double>(summary.counts[g]) / static_cast<double>(grouped);
    }
  }
  if (summary.total > 0) {
    summary.reducing_fraction = static_cast<double>(summary.reducing_count) / static_cast<double>(summary.total);
  }
  std::sort(reducing.begin(), reducing.end(), [](const NeuronAttribution* a, const NeuronAttribution* b) {
    if (a->delta != b->delta) return a->delta > b->delta;
    if (a->layer != b->layer) return a->layer < b->layer;
    return a->index < b->index;
  });
  double running = 0.0;
  summary.cumulative_reduction.reserve(reducing.size());
  summary.ranked_groups.reserve(reducing.size());
  for (const NeuronAttribution* rec : reducing) {
    running += rec->delta;
    summary.cumulative_reduction.push_back(running);
    summary.ranked_groups.push_back(rec->group);
  }
  return summary;
}

// ---------------------------------------------------------------------------
// activation-shift correlations (shift = m_pre - m_post)

struct ShiftCorrelation {
  // undefined when a sequence is constant (e.g. identical profiles)
  std::optional<Correlation> align;  // shift vs cos_align
  std::optional<Correlation> act;    // shift vs m_pre
};

inline ShiftCorrelation shift_correlation(std::span<const NeuronAttribution> attrs) {
  std::vector<double> shift, align, act;
  shift.reserve(attrs.size());
  align.reserve(attrs.size());
  act.reserve(attrs.size());
  for (const NeuronAttribution& rec : attrs) {
    shift.push_back(rec.m_pre - rec.m_post);
    align.push_back(rec.cos_align);
    act.push_back(rec.m_pre);
  }
  ShiftCorrelation out;
  try {
    out.align = pearson_with_p(shift, align);
  } catch (const Error&) {
    out.align = std::nullopt;
  }
  try {
    out.act = pearson_with_p(shift, act);
  } catch (const Error&) {
    out.act = std::nullopt;
  }
  return out;
}

// ---------------------------------------------------------------------------
// report emission

inline std::string attribution_csv(std::span<const NeuronAttribution> attrs) {
  std::string out = "layer,index,cos_align,m_pre,m_post,delta,group,direction\n";
  char line[256];
  for (const NeuronAttribution& rec : attrs) {
    std::snprintf(line, sizeof(line), "%d,%d,%.9g,%.9g,%.9g,%.9g,%s,%s\n", rec.layer, rec.index,
                  rec.cos_align, rec.m_pre, rec.m_post, rec.delta, to_string(rec.group),
                  to_string(rec.direction));
    out += line;
  }
  return out;
}

inline Json ledger_to_json(const LayerLedger& ledger) {
  std::vector<int> layers(ledger.net.size());
  for (std::size_t i = 0; i < layers.size(); ++i) layers[i] = static_cast<int>(i);
  return Json{{"layers", layers},
              {"reduction", ledger.reduction},
              {"increase", ledger.increase},
              {"net", ledger.net}};
}

inline Json groups_to_json(const GroupSummary& summary) {
  std::vector<int> rank(summary.cumulative_reduction.size());
  for (std::size_t i = 0; i < rank.size(); ++i) rank[i] = static_cast<int>(i) + 1;
  std::vector<std::string> ranked_groups;
  ranked_groups.reserve(summary.ranked_groups.size());
  for (NeuronGroup g : summary.ranked_groups) ranked_groups.emplace_back(to_string(g));
  return Json{{"groups", {"TP", "TN", "AP", "AN"}},
              {"counts", summary.counts},
              {"proportions", summary.proportions},
              {"total_delta", summary.total_delta},
              {"reducing_count", summary.reducing_count},
              {"increasing_count", summary.increasing_count},
              {"zero_count", summary.zero_count},
              {"degenerate_reducing", summary.degenerate_reducing},
              {"total", summary.total},
              {"reducing_fraction", summary.reducing_fraction},
              {"cumulative", Json{{"rank", rank}, {"delta", summary.cumulative_reduction}, {"group", ranked_groups}}}};
}

}  // namespace toxlens

#endif  // TOXLENS_ATTRIBUTION_HPP_
