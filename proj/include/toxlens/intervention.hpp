#ifndef TOXLENS_INTERVENTION_HPP_
#define TOXLENS_INTERVENTION_HPP_

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <set>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "toxlens/attribution.hpp"
#include "toxlens/model.hpp"
#include "toxlens/model_io.hpp"
#include "toxlens/probe.hpp"

namespace toxlens {

using NeuronRef = std::pair<int, int>;  // (layer, index)

// ---------------------------------------------------------------------------
// alignment table: group membership from probe alignment and pre-trained
// activations only (no post-model information)

struct AlignmentTable {
  int n_layers = 0;
  int d_mlp = 0;
  std::vector<double> cos_align;  // layer * d_mlp + index
  std::vector<double> m_pre;

  NeuronGroup group_of(int layer, int index) const {
    const std::size_t at = static_cast<std::size_t>(layer) * static_cast<std::size_t>(d_mlp) +
                           static_cast<std::size_t>(index);
    return classify_group(cos_align[at], m_pre[at]);
  }
};

inline AlignmentTable build_alignment_table(const ModelBundle& bundle,
                                            const MeanActivationProfile& profile,
                                            const Tensor1& direction) {
  const ModelConfig& config = bundle.config;
  if (profile.n_layers != config.n_layers || profile.d_mlp != config.d_mlp) {
    throw Error::validation("config_mismatch", "profile does not match bundle config");
  }
  const double dir_norm = norm2(direction.view());
  if (dir_norm == 0.0) throw Error::validation("zero_probe", "direction is the zero vector");
  AlignmentTable table;
  table.n_layers = config.n_layers;
  table.d_mlp = config.d_mlp;
  table.cos_align.reserve(profile.mean.size());
  table.m_pre = profile.mean;
  for (int layer = 0; layer < config.n_layers; ++layer) {
    const Tensor2& values = bundle.layers[static_cast<std::size_t>(layer)].mlp.w_value;
    for (int i = 0; i < config.d_mlp; ++i) {
      const double vnorm = norm2(values.row(i));
      table.cos_align.push_back(vnorm == 0.0 ? 0.0 : dot(values.row(i), direction.view()) / (vnorm * dir_norm));
    }
  }
  return table;
}

// ---------------------------------------------------------------------------
// edit-target selection

enum class EditRanking { DescendingCosine, AscendingAbsActivation };

inline const char* to_string(EditRanking ranking) {
  return ranking == EditRanking::DescendingCosine ? "cosine" : "abs-act";
}

inline EditRanking edit_ranking_from_string(const std::string& name) {
  if (name == "cosine") return EditRanking::DescendingCosine;
  if (name == "abs-act") return EditRanking::AscendingAbsActivation;
  throw Error::validation("bad_ranking", "unknown ranking: " + name);
}

struct EditSelection {
  // indexed TP, TN, AP, AN
  std::array<std::vector<NeuronRef>, 4> groups;

  std::size_t total() const {
    return groups[0].size() + groups[1].size() + groups[2].size() + groups[3].size();
  }
};

// Within each sign-group, take the ceil(beta * |group|) neurons ranked by
// the chosen key: |cos_align| descending (alignment magnitude, so A-groups
// rank toward -1) or |m_pre| ascending. Ties break by (layer, index).
inline EditSelection select_edit_targets(const AlignmentTable& table, double beta,
                                         EditRanking ranking) {
  if (!(beta > 0.0) || beta > 1.0) {
    throw Error::validation("invalid_argument", "beta must lie in (0, 1]");
  }
  struct Entry {
    NeuronRef ref;
    double key;
  };
  std::array<std::vector<Entry>, 4> pools;
  for (int layer = 0; layer < table.n_layers; ++layer) {
    for (int i = 0; i < table.d_mlp; ++i) {
      const std::size_t at = static_cast<std::size_t>(layer) * static_cast<std::size_t>(table.d_mlp) +
                             static_cast<std::size_t>(i);
      const int slot = group_slot(classify_group(table.cos_align[at], table.m_pre[at]));
      if (slot < 0) continue;
      const double key = ranking == EditRanking::DescendingCosine ? -std::fabs(table.cos_align[at])
                                                                  : std::fabs(table.m_pre[at]);
      pools[static_cast<std::size_t>(slot)].push_back({{layer, i}, key});
    }
  }
  EditSelection selection;
  for (std::size_t g = 0; g < 4; ++g) {
    auto& pool = pools[g];
    std::sort(pool.begin(), pool.end(), [](const Entry& a, const Entry& b) {
      if (a.key != b.key) return a.key < b.key;
      return a.ref < b.ref;
    });
    const std::size_t take = pool.empty()
                                 ? 0
                                 : static_cast<std::size_t>(std::ceil(beta * static_cast<double>(pool.size())));
    for (std::size_t i = 0; i < take; ++i) selection.groups[g].push_back(pool[i].ref);
    std::sort(selection.groups[g].begin(), selection.groups[g].end());
  }
  return selection;
}

// ---------------------------------------------------------------------------
// hook builders

inline ForwardHooks hooks_for_patch(const ModelConfig& config, std::span<const NeuronRef> targets,
                                    const MeanActivationProfile& reference) {
  if (reference.n_layers != config.n_layers || reference.d_mlp != config.d_mlp) {
    throw Error::validation("config_mismatch", "reference profile does not match config");
  }
  std::set<NeuronRef> seen;
  ForwardHooks hooks;
  hooks.score_overrides.assign(static_cast<std::size_t>(config.n_layers), {});
  for (const NeuronRef& ref : targets) {
    if (ref.first < 0 || ref.first >= config.n_layers || ref.second < 0 || ref.second >= config.d_mlp) {
      throw Error::validation("index_out_of_range", "patch target out of range");
    }
    if (!seen.insert(ref).second) {
      throw Error::validation("invalid_argument", "patch targets must be disjoint");
    }
    hooks.score_overrides[static_cast<std::size_t>(ref.first)].emplace_back(
        ref.second, static_cast<float>(reference.at(ref.first, ref.second)));
  }
  for (auto& layer : hooks.score_overrides) std::sort(layer.begin(), layer.end());
  return hooks;
}

// TP and AN scale by (1 - alpha); TN and AP scale by (1 + alpha). Every
// rule moves the neuron's write against the toxic direction.
inline ForwardHooks hooks_for_edit(const ModelConfig& config, const EditSelection& selection,
                                   double alpha) {
  if (!(alpha > 0.0) || alpha >= 1.0) {
    throw Error::validation("invalid_argument", "alpha must lie in (0, 1)");
  }
  ForwardHooks hooks;
  hooks.score_multipliers.assign(static_cast<std::size_t>(config.n_layers), {});
  const std::array<float, 4> multipliers = {
      static_cast<float>(1.0 - alpha),  // TP
      static_cast<float>(1.0 + alpha),  // TN
      static_cast<float>(1.0 + alpha),  // AP
      static_cast<float>(1.0 - alpha),  // AN
  };
  std::set<NeuronRef> seen;
  for (std::size_t g = 0; g < 4; ++g) {
    for (const NeuronRef& ref : selection.groups[g]) {
      if (ref.first < 0 || ref.first >= config.n_layers || ref.second < 0 || ref.second >= config.d_mlp) {
        throw Error::validation("index_out_of_range", "edit target out of range");
      }
      if (!seen.insert(ref).second) {
        throw Error::validation("invalid_argument", "edit selections must be disjoint");
      }
      hooks.score_multipliers[static_cast<std::size_t>(ref.first)].emplace_back(ref.second, multipliers[g]);
    }
  }
  for (auto& layer : hooks.score_multipliers) std::sort(layer.begin(), layer.end());
  return hooks;
}

inline Tensor1 steer_vector(const Probe& probe, double alpha) {
  Tensor1 delta(probe.direction.size());
  for (int c = 0; c < delta.size(); ++c) {
    delta[c] = static_cast<float>(alpha) * probe.direction[c];
  }
  return delta;
}

// ---------------------------------------------------------------------------
// one-call intervened forwards

inline ForwardTrace patch_forward(const ModelBundle& bundle, std::span<const NeuronRef> targets,
                                  const MeanActivationProfile& reference,
                                  std::span<const int> token_ids) {
  const ForwardHooks hooks = hooks_for_patch(bundle.config, targets, reference);
  return forward_traced(bundle, token_ids, &hooks);
}

inline ForwardTrace edit_forward(const ModelBundle& bundle, const EditSelection& selection,
                                 double alpha, std::span<const int> token_ids) {
  const ForwardHooks hooks = hooks_for_edit(bundle.config, selection, alpha);
  return forward_traced(bundle, token_ids, &hooks);
}

inline ForwardHooks hooks_for_steer(const ModelConfig& config, const Probe& probe, double steer_alpha) {
  if (probe.direction.size() != config.d_model) {
    throw Error::validation("shape_mismatch", "probe length != d_model");
  }
  ForwardHooks hooks;
  hooks.steer_delta = steer_vector(probe, steer_alpha);
  return hooks;
}

inline ForwardTrace steer_forward(const ModelBundle& bundle, const Probe& probe, double steer_alpha,
                                  std::span<const int> token_ids) {
  const ForwardHooks hooks = hooks_for_steer(bundle.config, probe, steer_alpha);
  return forward_traced(bundle, token_ids, &hooks);
}

// ---------------------------------------------------------------------------
// declarative plans (plan.json)

enum class PlanKind { Patch, Edit, Steer };

inline const char* to_string(PlanKind kind) {
  switch (kind) {
    case PlanKind::Patch: return "patch";
    case PlanKind::Edit: return "edit";
    case PlanKind::Steer: return "steer";
  }
  return "patch";
}

struct InterventionPlan {
  PlanKind kind = PlanKind::Patch;

  // patch
  std::vector<NeuronRef> patch_targets;
  std::string profile_path;  // reference MeanActivationProfile

  // edit
  double edit_alpha = 0.0;
  double beta = 0.0;
  EditRanking ranking = EditRanking::DescendingCosine;
  std::string direction_source;  // "probe" or "lexicon", provenance only
  EditSelection selection;

  // steer
  double steer_alpha = 0.0;
  std::string probe_path;

  // Relative file references resolve against the directory the plan file
  // was loaded from.
  ForwardHooks materialize(const ModelConfig& config, const std::string& base_dir) const {
    const auto resolve = [&](const std::string& path) {
      const std::filesystem::path p(path);
      if (p.is_absolute() || base_dir.empty()) return path;
      return (std::filesystem::path(base_dir) / p).string();
    };
    switch (kind) {
      case PlanKind::Patch: {
        const MeanActivationProfile profile = load_profile(resolve(profile_path));
        return hooks_for_patch(config, patch_targets, profile);
      }
      case PlanKind::Edit:
        return hooks_for_edit(config, selection, edit_alpha);
      case PlanKind::Steer: {
        const Probe probe = load_probe(resolve(probe_path));
        return hooks_for_steer(config, probe, steer_alpha);
      }
    }
    throw Error::validation("bad_plan", "unknown plan kind");
  }
};

inline Json plan_to_json(const InterventionPlan& plan) {
  Json j{{"kind", to_string(plan.kind)}};
  const auto refs_to_json = [](std::span<const NeuronRef> refs) {
    Json arr = Json::array();
    for (const NeuronRef& r : refs) arr.push_back(Json::array({r.first, r.second}));
    return arr;
  };
  switch (plan.kind) {
    case PlanKind::Patch:
      j["targets"] = refs_to_json(plan.patch_targets);
      j["profile"] = plan.profile_path;
      break;
    case PlanKind::Edit:
      j["alpha"] = plan.edit_alpha;
      j["beta"] = plan.beta;
      j["ranking"] = to_string(plan.ranking);
      j["direction_source"] = plan.direction_source;
      j["selection"] = Json{{"tp", refs_to_json(plan.selection.groups[0])},
                            {"tn", refs_to_json(plan.selection.groups[1])},
                            {"ap", refs_to_json(plan.selection.groups[2])},
                            {"an", refs_to_json(plan.selection.groups[3])}};
      break;
    case PlanKind::Steer:
      j["alpha"] = plan.steer_alpha;
      j["probe"] = plan.probe_path;
      break;
  }
  return j;
}

inline InterventionPlan plan_from_json(const Json& j) {
  InterventionPlan plan;
  const std::string kind = j.value("kind", "");
  const auto refs_from_json = [](const Json& arr) {
    std::vector<NeuronRef> refs;
    for (const Json& entry : arr) refs.emplace_back(entry.at(0).get<int>(), entry.at(1).get<int>());
    return refs;
  };
  if (kind == "patch") {
    plan.kind = PlanKind::Patch;
    plan.patch_targets = refs_from_json(j.at("targets"));
    plan.profile_path = j.at("profile").get<std::string>();
  } else if (kind == "edit") {
    plan.kind = PlanKind::Edit;
    plan.edit_alpha = j.at("alpha").get<double>();
    plan.beta = j.value("beta", 0.0);
    plan.ranking = edit_ranking_from_string(j.value("ranking", "cosine"));
    plan.direction_source = j.value("direction_source", "");
    const Json& sel = j.at("selection");
    plan.selection.groups[0] = refs_from_json(sel.at("tp"));
    plan.selection.groups[1] = refs_from_json(sel.at("tn"));
    plan.selection.groups[2] = refs_from_json(sel.at("ap"));
    plan.selection.groups[3] = refs_from_json(sel.at("an"));
  } else if (kind == "steer") {
    plan.kind = PlanKind::Steer;
    plan.steer_alpha = j.at("alpha").get<double>();
    plan.probe_path = j.at("probe").get<std::string>();
  } else {
    throw Error::validation("bad_plan", "unknown plan kind: " + kind);
  }
  return plan;
}

inline void save_plan(const InterventionPlan& plan, const std::string& path) {
  write_file(path, plan_to_json(plan).dump(2) + "\n");
}

inline InterventionPlan load_plan(const std::string& path) { return plan_from_json(load_json(path)); }

}  // namespace toxlens

#endif  // TOXLENS_INTERVENTION_HPP_
