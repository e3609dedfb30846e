#ifndef TOXLENS_CLI_HPP_
#define TOXLENS_CLI_HPP_

#include <chrono>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <map>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include <CLI11.hpp>

#include "toxlens/attribution.hpp"
#include "toxlens/dpo.hpp"
#include "toxlens/evalmetrics.hpp"
#include "toxlens/intervention.hpp"
#include "toxlens/model_io.hpp"
#include "toxlens/probe.hpp"
#include "toxlens/synthbench.hpp"

namespace toxlens::cli {

constexpr const char* kToolVersion = "0.1.0";

// ---------------------------------------------------------------------------
// run manifest: every command records its flags, input hashes, seed and
// outputs; wall clock is the only field allowed to differ between reruns

class RunManifest {
 public:
  RunManifest(std::string command) : command_(std::move(command)), start_(std::chrono::steady_clock::now()) {}

  void flag(const std::string& name, const Json& value) { flags_[name] = value; }
  void input(const std::string& path) {
    if (!path.empty()) inputs_[path] = hash_file(path);
  }
  void output(const std::string& path) { outputs_.push_back(path); }
  void seed(std::uint64_t value) { seed_ = value; }
  void extra(const std::string& key, const Json& value) { extra_[key] = value; }

  void write(const std::string& dir) {
    const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    Json j{{"command", command_}, {"flags", flags_},     {"inputs", inputs_},
           {"seed", seed_},       {"outputs", outputs_}, {"tool_version", kToolVersion},
           {"wall_clock_seconds", wall}};
    for (auto& [key, value] : extra_.items()) j[key] = value;
    write_file((std::filesystem::path(dir) / "run-manifest.json").string(), j.dump(2) + "\n");
  }

 private:
  std::string command_;
  Json flags_ = Json::object();
  std::map<std::string, std::string> inputs_;
  std::vector<std::string> outputs_;
  std::uint64_t seed_ = 0;
  Json extra_ = Json::object();
  std::chrono::steady_clock::time_point start_;
};

inline std::string parent_dir(const std::string& path) {
  const auto parent = std::filesystem::path(path).parent_path();
  return parent.empty() ? std::string(".") : parent.string();
}

inline std::string sibling(const std::string& path, const std::string& name) {
  return (std::filesystem::path(parent_dir(path)) / name).string();
}

// Relative paths inside metadata resolve against the referencing file.
inline std::string resolve_near(const std::string& reference_file, const std::string& path) {
  const std::filesystem::path p(path);
  if (p.is_absolute()) return path;
  return (std::filesystem::path(parent_dir(reference_file)) / p).string();
}

// ---------------------------------------------------------------------------
// shared loaders

inline std::vector<std::vector<int>> encode_corpus(const ModelBundle& bundle,
                                                   std::span<const Prompt> rows) {
  std::vector<std::vector<int>> out;
  for (const Prompt& row : rows) {
    std::vector<int> ids = bundle.vocab.encode(row.text);
    if (!ids.empty()) out.push_back(std::move(ids));
  }
  if (out.empty()) throw Error::validation("empty_corpus", "corpus has no encodable rows");
  return out;
}

// The scorer probe's metadata names the bundle whose residuals embed the
// scored text; scoring must not reuse the steering/selection probe.
inline SurrogateScorer load_scorer(const std::string& probe_path) {
  SurrogateScorer scorer;
  scorer.probe = load_probe(probe_path);
  if (scorer.probe.meta.bundle.empty()) {
    throw Error::validation("bad_scorer", "scorer probe metadata must name its bundle");
  }
  scorer.embedding_bundle = load_bundle(resolve_near(probe_path, scorer.probe.meta.bundle));
  scorer.provenance = probe_path;
  return scorer;
}

inline PlantSpec plant_spec_from_json(const Json& j, PlantSpec spec) {
  if (j.contains("config")) {
    const Json& c = j["config"];
    spec.config.n_layers = c.value("n_layers", spec.config.n_layers);
    spec.config.d_model = c.value("d_model", spec.config.d_model);
    spec.config.d_mlp = c.value("d_mlp", spec.config.d_mlp);
    spec.config.n_heads = c.value("n_heads", spec.config.n_heads);
    spec.config.vocab_size = c.value("vocab_size", spec.config.vocab_size);
    spec.config.max_seq = c.value("max_seq", spec.config.max_seq);
    if (c.contains("mlp_kind")) spec.config.mlp_kind = mlp_kind_from_string(c["mlp_kind"].get<std::string>());
    if (c.contains("activation")) {
      spec.config.activation = activation_from_string(c["activation"].get<std::string>());
    }
    spec.config.tied_unembedding = c.value("tied_unembedding", spec.config.tied_unembedding);
    spec.config.final_norm = c.value("final_norm", spec.config.final_norm);
  }
  spec.seed = j.value("seed", spec.seed);
  spec.n_toxic_neurons = j.value("n_toxic_neurons", spec.n_toxic_neurons);
  spec.n_anti_neurons = j.value("n_anti_neurons", spec.n_anti_neurons);
  spec.alignment_strength = j.value("alignment_strength", spec.alignment_strength);
  spec.noise_scale = j.value("noise_scale", spec.noise_scale);
  spec.n_toxic_tokens = j.value("n_toxic_tokens", spec.n_toxic_tokens);
  spec.n_safe_tokens = j.value("n_safe_tokens", spec.n_safe_tokens);
  spec.n_labeled = j.value("n_labeled", spec.n_labeled);
  spec.n_prompts = j.value("n_prompts", spec.n_prompts);
  spec.n_pairs = j.value("n_pairs", spec.n_pairs);
  spec.n_corpus = j.value("n_corpus", spec.n_corpus);
  return spec;
}

// ---------------------------------------------------------------------------
// subcommand bodies

struct SynthArgs {
  std::uint64_t seed = 1;
  bool seed_given = false;  // an explicit --seed wins over the spec file
  std::string out_dir;
  std::string spec_path;
};

inline void run_synth(const SynthArgs& args) {
  RunManifest manifest("synth");
  manifest.flag("seed", args.seed);
  manifest.flag("out-dir", args.out_dir);
  manifest.flag("spec", args.spec_path);

  PlantSpec spec;
  if (!args.spec_path.empty()) {
    manifest.input(args.spec_path);
    spec = plant_spec_from_json(load_json(args.spec_path), spec);
  }
  if (args.seed_given || args.spec_path.empty()) spec.seed = args.seed;
  manifest.seed(spec.seed);

  const PlantResult planted = plant_bundle(spec);
  const PlantedCorpora corpora = plant_corpora(spec);

  const std::filesystem::path dir(args.out_dir);
  const auto out = [&](const std::string& name) { return (dir / name).string(); };
  save_bundle(planted.bundle, out("model.manifest"));
  save_labeled(corpora.labeled, out("labeled.jsonl"));
  save_prompts(corpora.prompts, out("prompts.jsonl"));
  save_pairs(corpora.pairs, out("pairs.jsonl"));
  save_lexicon(corpora.lexicon, out("lexicon.json"));
  save_prompts(corpora.corpus, out("corpus.jsonl"));
  write_file(out("ground-truth.json"), ground_truth_to_json(planted.truth).dump(2) + "\n");

  for (const char* name : {"model.manifest", "model.bin", "vocab.tsv", "labeled.jsonl", "prompts.jsonl",
                           "pairs.jsonl", "lexicon.json", "corpus.jsonl", "ground-truth.json"}) {
    manifest.output(out(name));
  }
  manifest.write(args.out_dir);
  std::printf("synth: wrote planted bundle (%d layers, d=%d, d_mlp=%d) and corpora to %s\n",
              spec.config.n_layers, spec.config.d_model, spec.config.d_mlp, args.out_dir.c_str());
}

struct TrainProbeArgs {
  std::string bundle, labeled, out;
  double split = 0.9;
  int epochs = 500;
  double lr = 0.1;
  double l2 = 1e-4;
  std::uint64_t seed = 0;
  std::string note;
};

inline void run_train_probe(const TrainProbeArgs& args) {
  RunManifest manifest("train-probe");
  manifest.flag("bundle", args.bundle);
  manifest.flag("labeled", args.labeled);
  manifest.flag("split", args.split);
  manifest.flag("epochs", args.epochs);
  manifest.flag("lr", args.lr);
  manifest.flag("l2", args.l2);
  manifest.flag("out", args.out);
  manifest.seed(args.seed);
  manifest.input(args.bundle);
  manifest.input(args.labeled);

  const ModelBundle bundle = load_bundle(args.bundle);
  const std::vector<LabeledText> labeled = load_labeled(args.labeled);
  const LabeledActivationSet set = collect_activations(bundle, labeled, args.labeled);

  TrainProbeOptions options;
  options.epochs = args.epochs;
  options.lr = args.lr;
  options.l2 = args.l2;
  options.split = args.split;
  options.seed = args.seed;
  Probe probe = train_probe(set, options);
  probe.meta.bundle = args.bundle;
  probe.meta.note = args.note;
  save_probe(probe, args.out);

  manifest.output(args.out);
  manifest.extra("test_accuracy", probe.meta.test_accuracy);
  manifest.write(parent_dir(args.out));
  std::printf("train-probe: test accuracy %.4f (train %.4f) on %d/%d rows -> %s\n",
              probe.meta.test_accuracy, probe.meta.train_accuracy, probe.meta.train_rows,
              probe.meta.test_rows, args.out.c_str());
}

struct DpoTrainArgs {
  std::string bundle, pairs, out;
  double beta = 0.1;
  double kl = 0.05;
  int epochs = 10;
  double lr = 0.05;
  double clip = 10.0;
  std::uint64_t seed = 0;
};

inline void run_dpo_train(const DpoTrainArgs& args) {
  RunManifest manifest("dpo-train");
  manifest.flag("bundle", args.bundle);
  manifest.flag("pairs", args.pairs);
  manifest.flag("beta", args.beta);
  manifest.flag("kl", args.kl);
  manifest.flag("epochs", args.epochs);
  manifest.flag("lr", args.lr);
  manifest.flag("clip", args.clip);
  manifest.flag("out", args.out);
  manifest.seed(args.seed);
  manifest.input(args.bundle);
  manifest.input(args.pairs);

  const ModelBundle bundle = load_bundle(args.bundle);
  const std::vector<PreferencePair> pairs = load_pairs(args.pairs);
  std::vector<PreferenceTriplet> triplets;
  triplets.reserve(pairs.size());
  for (const PreferencePair& pair : pairs) triplets.push_back(encode_pair(bundle.vocab, pair));

  DpoConfig config;
  config.beta = args.beta;
  config.kl_weight = args.kl;
  config.epochs = args.epochs;
  config.lr = args.lr;
  config.grad_clip_norm = args.clip;
  config.seed = args.seed;

  const DpoResult result = train_dpo(bundle, triplets, config);
  save_bundle(result.post, args.out);

  manifest.output(args.out);
  manifest.extra("dpo", Json{{"beta", config.beta},
                             {"kl_weight", config.kl_weight},
                             {"lr", config.lr},
                             {"epochs", config.epochs},
                             {"grad_clip_norm", config.grad_clip_norm},
                             {"loss_history", result.epoch_loss},
                             {"final_mean_loss", result.final_mean_loss},
                             {"output_bundle", args.out}});
  manifest.write(parent_dir(args.out));
  const double initial = result.initial_losses.empty() ? 0.0 : result.initial_losses.front();
  std::printf("dpo-train: %zu triplets, %d epochs, loss %.6f -> %.6f, bundle -> %s\n",
              triplets.size(), args.epochs, initial, result.final_mean_loss, args.out.c_str());
}

struct ProfileArgs {
  std::string bundle, prompts, out;
  int n_new = 20;
};

inline void run_profile(const ProfileArgs& args) {
  RunManifest manifest("profile");
  manifest.flag("bundle", args.bundle);
  manifest.flag("prompts", args.prompts);
  manifest.flag("n-new", args.n_new);
  manifest.flag("out", args.out);
  manifest.input(args.bundle);
  manifest.input(args.prompts);

  const ModelBundle bundle = load_bundle(args.bundle);
  const std::vector<Prompt> prompts = load_prompts(args.prompts);
  const MeanActivationProfile profile = mean_profile(bundle, prompts, args.n_new);
  save_profile(profile, args.out);

  manifest.output(args.out);
  manifest.write(parent_dir(args.out));
  std::printf("profile: %zu prompts x %d generated tokens -> %s\n", prompts.size(), args.n_new,
              args.out.c_str());
}

struct AttributeArgs {
  std::string pre, post, pre_profile, post_profile, probe, out;
};

inline void run_attribute(const AttributeArgs& args) {
  RunManifest manifest("attribute");
  manifest.flag("pre", args.pre);
  manifest.flag("post", args.post);
  manifest.flag("pre-profile", args.pre_profile);
  manifest.flag("post-profile", args.post_profile);
  manifest.flag("probe", args.probe);
  manifest.flag("out", args.out);
  for (const std::string& path : {args.pre, args.post, args.pre_profile, args.post_profile, args.probe}) {
    manifest.input(path);
  }

  const ModelBundle pre = load_bundle(args.pre);
  const ModelBundle post = load_bundle(args.post);
  const MeanActivationProfile profile_pre = load_profile(args.pre_profile);
  const MeanActivationProfile profile_post = load_profile(args.post_profile);
  const Probe probe = load_probe(args.probe);

  const std::vector<NeuronAttribution> attrs =
      attribute_all(pre, post, profile_pre, profile_post, probe.direction);
  const LayerLedger ledger = layer_ledger(attrs, pre.config.n_layers);
  const GroupSummary summary = group_summary(attrs);
  const ShiftCorrelation corr = shift_correlation(attrs);

  write_file(args.out, attribution_csv(attrs));
  const std::string ledger_path = sibling(args.out, "ledger.json");
  const std::string groups_path = sibling(args.out, "groups.json");
  write_file(ledger_path, ledger_to_json(ledger).dump(2) + "\n");
  Json groups = groups_to_json(summary);
  const auto corr_json = [](const std::optional<Correlation>& c) {
    return c.has_value() ? Json{{"r", c->r}, {"p", c->p}} : Json{{"r", "undefined"}, {"p", "undefined"}};
  };
  groups["shift_correlation"] = Json{{"align", corr_json(corr.align)}, {"act", corr_json(corr.act)}};
  write_file(groups_path, groups.dump(2) + "\n");

  manifest.output(args.out);
  manifest.output(ledger_path);
  manifest.output(groups_path);
  manifest.write(parent_dir(args.out));
  std::printf("attribute: %zu neurons, %.1f%% reducing; proportions TP %.3f TN %.3f AP %.3f AN %.3f\n",
              attrs.size(), 100.0 * summary.reducing_fraction, summary.proportions[0],
              summary.proportions[1], summary.proportions[2], summary.proportions[3]);
}

// target parsing for patch-eval: "toxic-top-k:<K>", "groups:TP,AN",
// "file:<path>" (json array of [layer, index])
inline std::vector<NeuronRef> parse_patch_targets(const std::string& targets, const ModelBundle& pre,
                                                  const std::string& probe_path,
                                                  const std::string& attribution_path,
                                                  RunManifest& manifest) {
  const auto split_prefix = [&](const std::string& prefix) -> std::string {
    return targets.substr(prefix.size());
  };
  const auto parse_int = [](const std::string& text, const char* what) {
    try {
      return std::stoi(text);
    } catch (const std::exception&) {
      throw Error::validation("invalid_argument", std::string("malformed integer in ") + what);
    }
  };
  if (targets.rfind("toxic-top-k:", 0) == 0) {
    const int k = parse_int(split_prefix("toxic-top-k:"), "toxic-top-k");
    if (k < 1) throw Error::validation("invalid_argument", "toxic-top-k needs k >= 1");
    if (probe_path.empty()) {
      throw Error::validation("invalid_argument", "toxic-top-k targets need --probe");
    }
    manifest.input(probe_path);
    const Probe probe = load_probe(probe_path);
    struct Scored {
      double cos;
      NeuronRef ref;
    };
    std::vector<Scored> scored;
    const double pn = norm2(probe.direction.view());
    for (int l = 0; l < pre.config.n_layers; ++l) {
      const Tensor2& values = pre.layers[static_cast<std::size_t>(l)].mlp.w_value;
      for (int i = 0; i < pre.config.d_mlp; ++i) {
        const double vn = norm2(values.row(i));
        const double cos = vn == 0.0 ? 0.0 : dot(values.row(i), probe.direction.view()) / (vn * pn);
        scored.push_back({cos, {l, i}});
      }
    }
    std::sort(scored.begin(), scored.end(), [](const Scored& a, const Scored& b) {
      if (a.cos != b.cos) return a.cos > b.cos;
      return a.ref < b.ref;
    });
    std::vector<NeuronRef> refs;
    for (int i = 0; i < k && i < static_cast<int>(scored.size()); ++i) refs.push_back(scored[static_cast<std::size_t>(i)].ref);
    return refs;
  }
  if (targets.rfind("groups:", 0) == 0) {
    if (attribution_path.empty()) {
      throw Error::validation("invalid_argument", "group targets need --attribution");
    }
    manifest.input(attribution_path);
    std::set<std::string> wanted;
    std::string rest = split_prefix("groups:");
    std::size_t cursor = 0;
    while (cursor <= rest.size()) {
      const std::size_t comma = rest.find(',', cursor);
      const std::string name = rest.substr(cursor, comma == std::string::npos ? std::string::npos : comma - cursor);
      if (!name.empty()) wanted.insert(name);
      if (comma == std::string::npos) break;
      cursor = comma + 1;
    }
    if (wanted.empty()) throw Error::validation("invalid_argument", "groups: needs at least one group");
    for (const std::string& name : wanted) {
      if (name != "TP" && name != "TN" && name != "AP" && name != "AN") {
        throw Error::validation("invalid_argument", "unknown group: " + name);
      }
    }
    // rows of attribution.csv with delta > 0 in the wanted groups
    std::istringstream in(read_file(attribution_path));
    std::string line;
    std::getline(in, line);  // header
    std::vector<NeuronRef> refs;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      std::vector<std::string> cells;
      std::size_t start = 0;
      while (true) {
        const std::size_t comma = line.find(',', start);
        cells.push_back(line.substr(start, comma == std::string::npos ? std::string::npos : comma - start));
        if (comma == std::string::npos) break;
        start = comma + 1;
      }
      if (cells.size() != 8) throw Error::io("bad_attribution", "malformed attribution row");
      if (cells[7] == "reduce" && wanted.count(cells[6])) {
        refs.emplace_back(std::stoi(cells[0]), std::stoi(cells[1]));
      }
    }
    return refs;
  }
  if (targets.rfind("file:", 0) == 0) {
    const std::string path = split_prefix("file:");
    manifest.input(path);
    std::vector<NeuronRef> refs;
    for (const Json& entry : load_json(path)) {
      refs.emplace_back(entry.at(0).get<int>(), entry.at(1).get<int>());
    }
    return refs;
  }
  throw Error::validation("invalid_argument", "targets must be toxic-top-k:<K>, groups:<G,..>, or file:<path>");
}

struct PatchEvalArgs {
  std::string bundle, reference_profile, targets, scorer, prompts, corpus, out;
  std::string probe, attribution;  // inputs for target selection modes
  int n_new = 20;
};

inline void run_patch_eval(const PatchEvalArgs& args) {
  RunManifest manifest("patch-eval");
  manifest.flag("bundle", args.bundle);
  manifest.flag("reference-profile", args.reference_profile);
  manifest.flag("targets", args.targets);
  manifest.flag("scorer", args.scorer);
  manifest.flag("prompts", args.prompts);
  manifest.flag("corpus", args.corpus);
  manifest.flag("n-new", args.n_new);
  manifest.flag("out", args.out);
  manifest.input(args.bundle);
  manifest.input(args.reference_profile);
  manifest.input(args.scorer);
  manifest.input(args.prompts);
  manifest.input(args.corpus);

  const ModelBundle bundle = load_bundle(args.bundle);
  const MeanActivationProfile reference = load_profile(args.reference_profile);
  const std::vector<NeuronRef> targets =
      parse_patch_targets(args.targets, bundle, args.probe, args.attribution, manifest);
  const ForwardHooks hooks = hooks_for_patch(bundle.config, targets, reference);

  const SurrogateScorer scorer = load_scorer(args.scorer);
  const std::vector<Prompt> prompts = load_prompts(args.prompts);
  const std::vector<std::vector<int>> corpus = encode_corpus(bundle, load_prompts(args.corpus));

  const std::vector<EvalRun> runs = {{"none", &bundle, nullptr},
                                     {"patch:" + args.targets, &bundle, &hooks}};
  const EvalReport report = build_report(runs, scorer, prompts, corpus, args.n_new, "patch-eval");
  write_file(args.out, report_csv(report));
  const std::string json_path = sibling(args.out, "report.json");
  write_file(json_path, report_to_json(report).dump(2) + "\n");

  InterventionPlan plan;
  plan.kind = PlanKind::Patch;
  plan.patch_targets = targets;
  plan.profile_path = args.reference_profile;
  const std::string plan_path = sibling(args.out, "plan.json");
  save_plan(plan, plan_path);

  manifest.output(args.out);
  manifest.output(json_path);
  manifest.output(plan_path);
  manifest.write(parent_dir(args.out));
  std::printf("patch-eval: %zu targets; toxicity %.4f -> %.4f\n", targets.size(),
              report.rows[0].toxicity, report.rows[1].toxicity);
}

struct EditArgs {
  std::string bundle, direction, profile, out;
  double alpha = 0.01;
  double beta = 0.55;
  std::string ranking = "cosine";
  std::string scorer, prompts, corpus, report;  // optional evaluation
  int n_new = 20;
};

inline void run_edit(const EditArgs& args) {
  RunManifest manifest("edit");
  manifest.flag("bundle", args.bundle);
  manifest.flag("direction", args.direction);
  manifest.flag("profile", args.profile);
  manifest.flag("alpha", args.alpha);
  manifest.flag("beta", args.beta);
  manifest.flag("ranking", args.ranking);
  manifest.flag("out", args.out);
  manifest.input(args.bundle);
  manifest.input(args.direction);
  manifest.input(args.profile);

  const ModelBundle bundle = load_bundle(args.bundle);
  const MeanActivationProfile profile = load_profile(args.profile);

  // The direction file is either a probe (has "direction") or a lexicon
  // (has "toxic"/"nontoxic"), in which case the contrastive embedding
  // difference replaces the probe.
  const Json direction_json = load_json(args.direction);
  Tensor1 direction;
  std::string source;
  if (direction_json.contains("direction")) {
    direction = probe_from_json(direction_json).direction;
    source = "probe";
  } else if (direction_json.contains("toxic") && direction_json.contains("nontoxic")) {
    Lexicon lexicon;
    lexicon.toxic = direction_json["toxic"].get<std::vector<std::string>>();
    lexicon.nontoxic = direction_json["nontoxic"].get<std::vector<std::string>>();
    lexicon.validate();
    direction = contrastive_direction(bundle, lexicon);
    source = "lexicon";
  } else {
    throw Error::validation("invalid_argument", "--direction must be a probe.json or lexicon.json");
  }

  const AlignmentTable table = build_alignment_table(bundle, profile, direction);
  const EditRanking ranking = edit_ranking_from_string(args.ranking);
  const EditSelection selection = select_edit_targets(table, args.beta, ranking);

  InterventionPlan plan;
  plan.kind = PlanKind::Edit;
  plan.edit_alpha = args.alpha;
  plan.beta = args.beta;
  plan.ranking = ranking;
  plan.direction_source = source + ":" + args.direction;
  plan.selection = selection;
  save_plan(plan, args.out);
  manifest.output(args.out);

  if (!args.report.empty()) {
    manifest.input(args.scorer);
    manifest.input(args.prompts);
    manifest.input(args.corpus);
    const ForwardHooks hooks = hooks_for_edit(bundle.config, selection, args.alpha);
    const SurrogateScorer scorer = load_scorer(args.scorer);
    const std::vector<Prompt> prompts = load_prompts(args.prompts);
    const std::vector<std::vector<int>> corpus = encode_corpus(bundle, load_prompts(args.corpus));
    char label[96];
    std::snprintf(label, sizeof(label), "edit:%s:alpha=%g:beta=%g", source.c_str(), args.alpha, args.beta);
    const std::vector<EvalRun> runs = {{label, &bundle, &hooks}};
    const EvalReport report = build_report(runs, scorer, prompts, corpus, args.n_new, "edit");
    write_file(args.report, report_csv(report));
    manifest.output(args.report);
    std::printf("edit: selected %zu neurons; toxicity %.4f -> %s\n", selection.total(),
                report.rows[0].toxicity, args.report.c_str());
  } else {
    std::printf("edit: selected %zu neurons (%s ranking, beta=%g) -> %s\n", selection.total(),
                args.ranking.c_str(), args.beta, args.out.c_str());
  }
  manifest.write(parent_dir(args.out));
}

struct SteerArgs {
  std::string bundle, probe, out;
  double alpha = 1.0;
  std::string scorer, prompts, corpus, report;
  int n_new = 20;
};

inline void run_steer(const SteerArgs& args) {
  RunManifest manifest("steer");
  manifest.flag("bundle", args.bundle);
  manifest.flag("probe", args.probe);
  manifest.flag("alpha", args.alpha);
  manifest.flag("out", args.out);
  manifest.input(args.bundle);
  manifest.input(args.probe);

  const ModelBundle bundle = load_bundle(args.bundle);
  const Probe probe = load_probe(args.probe);

  InterventionPlan plan;
  plan.kind = PlanKind::Steer;
  plan.steer_alpha = args.alpha;
  plan.probe_path = args.probe;
  save_plan(plan, args.out);
  manifest.output(args.out);

  if (!args.report.empty()) {
    manifest.input(args.scorer);
    manifest.input(args.prompts);
    manifest.input(args.corpus);
    const ForwardHooks hooks = hooks_for_steer(bundle.config, probe, args.alpha);
    const SurrogateScorer scorer = load_scorer(args.scorer);
    const std::vector<Prompt> prompts = load_prompts(args.prompts);
    const std::vector<std::vector<int>> corpus = encode_corpus(bundle, load_prompts(args.corpus));
    char label[64];
    std::snprintf(label, sizeof(label), "steer:alpha=%g", args.alpha);
    const std::vector<EvalRun> runs = {{label, &bundle, &hooks}};
    const EvalReport report = build_report(runs, scorer, prompts, corpus, args.n_new, "steer");
    write_file(args.report, report_csv(report));
    manifest.output(args.report);
    std::printf("steer: alpha=%g toxicity %.4f -> %s\n", args.alpha, report.rows[0].toxicity,
                args.report.c_str());
  } else {
    std::printf("steer: plan (alpha=%g) -> %s\n", args.alpha, args.out.c_str());
  }
  manifest.write(parent_dir(args.out));
}

struct LensArgs {
  std::string bundle, vector_spec, out;
  int k = 10;
  bool negate = false;
};

inline void run_lens(const LensArgs& args) {
  RunManifest manifest("lens");
  manifest.flag("bundle", args.bundle);
  manifest.flag("vector", args.vector_spec);
  manifest.flag("k", args.k);
  manifest.flag("negate", args.negate);
  manifest.flag("out", args.out);
  manifest.input(args.bundle);

  const ModelBundle bundle = load_bundle(args.bundle);
  Tensor1 direction;
  if (args.vector_spec.rfind("probe:", 0) == 0) {
    const std::string path = args.vector_spec.substr(6);
    manifest.input(path);
    direction = load_probe(path).direction;
  } else if (args.vector_spec.rfind("neuron:", 0) == 0) {
    const std::string rest = args.vector_spec.substr(7);
    const std::size_t colon = rest.find(':');
    if (colon == std::string::npos) {
      throw Error::validation("invalid_argument", "--vector neuron:<layer>:<index>");
    }
    int layer = 0, index = 0;
    try {
      layer = std::stoi(rest.substr(0, colon));
      index = std::stoi(rest.substr(colon + 1));
    } catch (const std::exception&) {
      throw Error::validation("invalid_argument", "--vector neuron:<layer>:<index> needs integers");
    }
    if (layer < 0 || layer >= bundle.config.n_layers || index < 0 || index >= bundle.config.d_mlp) {
      throw Error::validation("index_out_of_range", "lens neuron out of range");
    }
    direction = bundle.layers[static_cast<std::size_t>(layer)].mlp.w_value.row_copy(index);
  } else if (args.vector_spec.rfind("file:", 0) == 0) {
    const std::string path = args.vector_spec.substr(5);
    manifest.input(path);
    const auto values = load_json(path).get<std::vector<double>>();
    std::vector<float> as_float(values.size());
    for (std::size_t i = 0; i < values.size(); ++i) as_float[i] = static_cast<float>(values[i]);
    direction = Tensor1(std::move(as_float));
  } else {
    throw Error::validation("invalid_argument", "--vector must be probe:<path>, neuron:<L>:<I>, or file:<path>");
  }
  if (args.negate) {
    for (int c = 0; c < direction.size(); ++c) direction[c] = -direction[c];
  }

  const std::vector<LensEntry> entries = logit_lens(bundle, direction, args.k);
  Json rows = Json::array();
  for (const LensEntry& entry : entries) {
    rows.push_back(Json{{"token", bundle.vocab.token(entry.token_id)},
                        {"id", entry.token_id},
                        {"score", entry.score}});
    std::printf("%-16s %.6f\n", bundle.vocab.token(entry.token_id).c_str(), entry.score);
  }
  if (!args.out.empty()) {
    write_file(args.out, Json{{"vector", args.vector_spec}, {"negate", args.negate}, {"top", rows}}.dump(2) + "\n");
    manifest.output(args.out);
    manifest.write(parent_dir(args.out));
  } else {
    manifest.write(".");
  }
}

struct EvalArgs {
  std::string runs, scorer, prompts, corpus, out;
  int n_new = 20;
};

inline void run_eval(const EvalArgs& args) {
  RunManifest manifest("eval");
  manifest.flag("runs", args.runs);
  manifest.flag("scorer", args.scorer);
  manifest.flag("prompts", args.prompts);
  manifest.flag("corpus", args.corpus);
  manifest.flag("n-new", args.n_new);
  manifest.flag("out", args.out);
  manifest.input(args.runs);
  manifest.input(args.scorer);
  manifest.input(args.prompts);
  manifest.input(args.corpus);

  const Json runspec = load_json(args.runs);
  if (!runspec.is_array() || runspec.empty()) {
    throw Error::validation("bad_runspec", "runspec must be a nonempty array");
  }

  const SurrogateScorer scorer = load_scorer(args.scorer);
  const std::vector<Prompt> prompts = load_prompts(args.prompts);

  // Bundles and materialized hooks must outlive the run list.
  std::vector<std::unique_ptr<ModelBundle>> bundles;
  std::vector<std::unique_ptr<ForwardHooks>> hook_store;
  std::vector<EvalRun> runs;
  for (const Json& entry : runspec) {
    if (!entry.contains("label") || !entry.contains("bundle")) {
      throw Error::validation("bad_runspec", "each run needs label and bundle");
    }
    const std::string bundle_path = entry["bundle"].get<std::string>();
    manifest.input(bundle_path);
    bundles.push_back(std::make_unique<ModelBundle>(load_bundle(bundle_path)));
    EvalRun run;
    run.label = entry["label"].get<std::string>();
    run.bundle = bundles.back().get();
    if (entry.contains("plan") && !entry["plan"].get<std::string>().empty()) {
      const std::string plan_path = entry["plan"].get<std::string>();
      manifest.input(plan_path);
      const InterventionPlan plan = load_plan(plan_path);
      hook_store.push_back(std::make_unique<ForwardHooks>(
          plan.materialize(run.bundle->config, parent_dir(plan_path))));
      run.hooks = hook_store.back().get();
    }
    runs.push_back(run);
  }

  const std::vector<std::vector<int>> corpus = encode_corpus(*bundles.front(), load_prompts(args.corpus));
  const EvalReport report = build_report(runs, scorer, prompts, corpus, args.n_new, args.runs);
  write_file(args.out, report_csv(report));
  const std::string json_path = sibling(args.out, "report.json");
  write_file(json_path, report_to_json(report).dump(2) + "\n");
  manifest.output(args.out);
  manifest.output(json_path);
  manifest.write(parent_dir(args.out));

  for (const EvalRow& row : report.rows) {
    std::printf("%-28s toxicity %.4f  log_ppl %.4f  f1 %.4f\n", row.label.c_str(), row.toxicity,
                row.log_ppl, row.f1);
  }
}

// ---------------------------------------------------------------------------
// argument wiring

inline int run(const std::vector<std::string>& args) {
  CLI::App app{"desk-scale toolkit for analyzing how preference tuning shifts MLP toxicity writes"};
  app.require_subcommand(1);

  SynthArgs synth;
  CLI::App* synth_cmd = app.add_subcommand("synth", "generate a planted bundle and corpora");
  CLI::Option* synth_seed = synth_cmd->add_option("--seed", synth.seed, "generation seed");
  synth_cmd->add_option("--out-dir", synth.out_dir, "output directory")->required();
  synth_cmd->add_option("--spec", synth.spec_path, "json overrides for the plant spec");

  TrainProbeArgs probe;
  CLI::App* probe_cmd = app.add_subcommand("train-probe", "fit a linear toxicity probe");
  probe_cmd->add_option("--bundle", probe.bundle)->required();
  probe_cmd->add_option("--labeled", probe.labeled)->required();
  probe_cmd->add_option("--split", probe.split, "train fraction");
  probe_cmd->add_option("--epochs", probe.epochs);
  probe_cmd->add_option("--lr", probe.lr);
  probe_cmd->add_option("--l2", probe.l2);
  probe_cmd->add_option("--seed", probe.seed);
  probe_cmd->add_option("--note", probe.note, "freeform provenance note");
  probe_cmd->add_option("--out", probe.out)->required();

  DpoTrainArgs dpo;
  CLI::App* dpo_cmd = app.add_subcommand("dpo-train", "preference-tune a bundle");
  dpo_cmd->add_option("--bundle", dpo.bundle)->required();
  dpo_cmd->add_option("--pairs", dpo.pairs)->required();
  dpo_cmd->add_option("--beta", dpo.beta);
  dpo_cmd->add_option("--kl", dpo.kl);
  dpo_cmd->add_option("--epochs", dpo.epochs);
  dpo_cmd->add_option("--lr", dpo.lr);
  dpo_cmd->add_option("--clip", dpo.clip);
  dpo_cmd->add_option("--seed", dpo.seed);
  dpo_cmd->add_option("--out", dpo.out)->required();

  ProfileArgs profile;
  CLI::App* profile_cmd = app.add_subcommand("profile", "mean activation profile over generations");
  profile_cmd->add_option("--bundle", profile.bundle)->required();
  profile_cmd->add_option("--prompts", profile.prompts)->required();
  profile_cmd->add_option("--n-new", profile.n_new);
  profile_cmd->add_option("--out", profile.out)->required();

  AttributeArgs attribute;
  CLI::App* attr_cmd = app.add_subcommand("attribute", "per-neuron projection changes and groups");
  attr_cmd->add_option("--pre", attribute.pre)->required();
  attr_cmd->add_option("--post", attribute.post)->required();
  attr_cmd->add_option("--pre-profile", attribute.pre_profile)->required();
  attr_cmd->add_option("--post-profile", attribute.post_profile)->required();
  attr_cmd->add_option("--probe", attribute.probe)->required();
  attr_cmd->add_option("--out", attribute.out)->required();

  PatchEvalArgs patch;
  CLI::App* patch_cmd = app.add_subcommand("patch-eval", "counterfactual activation patching");
  patch_cmd->add_option("--bundle", patch.bundle)->required();
  patch_cmd->add_option("--reference-profile", patch.reference_profile)->required();
  patch_cmd->add_option("--targets", patch.targets)->required();
  patch_cmd->add_option("--scorer", patch.scorer)->required();
  patch_cmd->add_option("--prompts", patch.prompts)->required();
  patch_cmd->add_option("--corpus", patch.corpus)->required();
  patch_cmd->add_option("--probe", patch.probe, "probe for toxic-top-k targets");
  patch_cmd->add_option("--attribution", patch.attribution, "attribution.csv for group targets");
  patch_cmd->add_option("--n-new", patch.n_new);
  patch_cmd->add_option("--out", patch.out)->required();

  EditArgs edit;
  CLI::App* edit_cmd = app.add_subcommand("edit", "distributed activation editing plan");
  edit_cmd->add_option("--bundle", edit.bundle)->required();
  edit_cmd->add_option("--direction", edit.direction, "probe.json or lexicon.json")->required();
  edit_cmd->add_option("--profile", edit.profile, "pre-trained activation profile")->required();
  edit_cmd->add_option("--alpha", edit.alpha);
  edit_cmd->add_option("--beta", edit.beta);
  edit_cmd->add_option("--ranking", edit.ranking, "cosine | abs-act");
  edit_cmd->add_option("--scorer", edit.scorer);
  edit_cmd->add_option("--prompts", edit.prompts);
  edit_cmd->add_option("--corpus", edit.corpus);
  edit_cmd->add_option("--n-new", edit.n_new);
  edit_cmd->add_option("--report", edit.report, "also evaluate and write a report row");
  edit_cmd->add_option("--out", edit.out, "plan.json path")->required();

  SteerArgs steer;
  CLI::App* steer_cmd = app.add_subcommand("steer", "probe-subtraction steering plan");
  steer_cmd->add_option("--bundle", steer.bundle)->required();
  steer_cmd->add_option("--probe", steer.probe)->required();
  steer_cmd->add_option("--alpha", steer.alpha);
  steer_cmd->add_option("--scorer", steer.scorer);
  steer_cmd->add_option("--prompts", steer.prompts);
  steer_cmd->add_option("--corpus", steer.corpus);
  steer_cmd->add_option("--n-new", steer.n_new);
  steer_cmd->add_option("--report", steer.report);
  steer_cmd->add_option("--out", steer.out, "plan.json path")->required();

  LensArgs lens;
  CLI::App* lens_cmd = app.add_subcommand("lens", "unembed a direction to nearest tokens");
  lens_cmd->add_option("--bundle", lens.bundle)->required();
  lens_cmd->add_option("--vector", lens.vector_spec, "probe:<path> | neuron:<L>:<I> | file:<path>")->required();
  lens_cmd->add_option("--k", lens.k);
  lens_cmd->add_flag("--negate", lens.negate);
  lens_cmd->add_option("--out", lens.out, "lens.json path");

  EvalArgs eval;
  CLI::App* eval_cmd = app.add_subcommand("eval", "toxicity / log-ppl / F1 comparison table");
  eval_cmd->add_option("--runs", eval.runs, "runspec.json")->required();
  eval_cmd->add_option("--scorer", eval.scorer)->required();
  eval_cmd->add_option("--prompts", eval.prompts)->required();
  eval_cmd->add_option("--corpus", eval.corpus)->required();
  eval_cmd->add_option("--n-new", eval.n_new);
  eval_cmd->add_option("--out", eval.out)->required();

  std::vector<const char*> argv;
  argv.push_back("toxlens");
  for (const std::string& arg : args) argv.push_back(arg.c_str());

  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::fprintf(stderr, "%s\n",
                 Json{{"error", "bad_arguments"}, {"kind", "validation"}, {"message", e.what()}}.dump().c_str());
    return 2;
  }

  try {
    if (synth_cmd->parsed()) {
      synth.seed_given = synth_seed->count() > 0;
      run_synth(synth);
    }
    else if (probe_cmd->parsed()) run_train_probe(probe);
    else if (dpo_cmd->parsed()) run_dpo_train(dpo);
    else if (profile_cmd->parsed()) run_profile(profile);
    else if (attr_cmd->parsed()) run_attribute(attribute);
    else if (patch_cmd->parsed()) run_patch_eval(patch);
    else if (edit_cmd->parsed()) run_edit(edit);
    else if (steer_cmd->parsed()) run_steer(steer);
    else if (lens_cmd->parsed()) run_lens(lens);
    else if (eval_cmd->parsed()) run_eval(eval);
  } catch (const Error& e) {
    const char* kind = e.kind() == ErrorKind::Validation ? "validation"
                       : e.kind() == ErrorKind::Numeric  ? "numeric"
                                                         : "io";
    std::fprintf(stderr, "%s\n",
                 Json{{"error", e.code()}, {"kind", kind}, {"message", e.what()}}.dump().c_str());
    return exit_code(e.kind());
  } catch (const std::exception& e) {
    std::fprintf(stderr, "%s\n",
                 Json{{"error", "internal"}, {"kind", "internal"}, {"message", e.what()}}.dump().c_str());
    return 1;
  }
  return 0;
}

}  // namespace toxlens::cli

#endif  // TOXLENS_CLI_HPP_
