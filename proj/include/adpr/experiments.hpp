#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "adpr/dataset.hpp"
#include "adpr/metrics.hpp"
#include "adpr/model.hpp"
#include "adpr/siamese.hpp"
#include "adpr/trainer.hpp"

namespace adpr {

/// Everything an experiment needs besides the seed list.
struct ExperimentSpec {
  SynthSpec synth;
  ArchConfig arch;
  PipelineConfig pipeline;
  SiameseConfig siamese;
  double eval_fraction = 0.5;
  /// Open-world identity partition of one generated family: train | eval | validation.
  std::size_t open_train_identities = 16;
  std::size_t open_eval_identities = 16;
  std::size_t open_val_identities = 8;
  double attr_count_tolerance = 0.02;
  double open_world_min_auc = 0.8;
};

struct TrendRow {
  std::uint64_t seed = 0;
  std::string variant;  // empty when an experiment has one row per seed
  std::map<std::string, double> metrics;
};

struct TrendReport {
  std::string experiment;
  std::vector<TrendRow> rows;
  std::map<std::string, double> means;  // keyed "metric" or "variant/metric"
  std::map<std::string, double> stds;
  std::string predicate;
  double tolerance = 0.0;
  bool control = false;          // no-signal control: predicate is not asserted
  std::optional<bool> verdict;   // empty for controls
  nlohmann::json details = nlohmann::json::object();
  std::map<std::string, RocCurve> rocs;  // per run, for plotting
};

namespace detail {

inline std::string stat_key(const TrendRow& r, const std::string& metric) {
  return r.variant.empty() ? metric : r.variant + "/" + metric;
}

inline double mean_of(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

/// Sample standard deviation; 0 for fewer than two values.
inline double std_of(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double m = mean_of(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size() - 1));
}

inline std::uint64_t stage_seed(std::uint64_t seed, const StageConfig& s) { return derive_seed(seed, 0x5354470000ULL + s.seed); }

inline PipelineConfig seeded(const PipelineConfig& base, std::uint64_t seed) {
  PipelineConfig p = base;
  for (StageConfig& s : p.stages) s.seed = stage_seed(seed, s);
  return p;
}

inline ArchConfig arch_for(const ExperimentSpec& spec, std::size_t classes) {
  ArchConfig a = spec.arch;
  a.classes = classes;
  a.attributes = spec.synth.attributes;
  return a;
}

inline std::set<std::size_t> id_range(std::size_t begin, std::size_t end) {
  std::set<std::size_t> s;
  for (std::size_t i = begin; i < end; ++i) s.insert(i);
  return s;
}

inline double mean_accuracy(const std::vector<double>& per_attribute) { return mean_of(per_attribute); }

}  // namespace detail

/// Fills means and stds from the rows.
inline void compute_statistics(TrendReport& r) {
  std::map<std::string, std::vector<double>> cols;
  for (const TrendRow& row : r.rows) {
    for (const auto& [k, v] : row.metrics) cols[detail::stat_key(row, k)].push_back(v);
  }
  r.means.clear();
  r.stds.clear();
  for (const auto& [k, v] : cols) {
    r.means[k] = detail::mean_of(v);
    r.stds[k] = detail::std_of(v);
  }
}

/// The registered predicate of each experiment, evaluated on the report's means.
inline std::optional<bool> evaluate_verdict(const TrendReport& r) {
  if (r.control) return std::nullopt;
  auto m = [&](const std::string& k) {
    auto it = r.means.find(k);
    if (it == r.means.end()) throw std::invalid_argument(r.experiment + ": report has no mean for '" + k + "'");
    return it->second;
  };
  if (r.experiment == "fusion_gain") return m("eer_jpr") <= m("eer_pr");
  if (r.experiment == "attr_gain") return m("attr_acc_jpr") >= m("attr_acc_sb");
  if (r.experiment == "attr_count") {
    const double single = std::min(m("attr1_only/eer"), m("attr2_only/eer"));
    return m("both/eer") <= single + r.tolerance;
  }
  if (r.experiment == "open_world") return m("auc") >= r.tolerance;
  throw std::invalid_argument("unknown experiment '" + r.experiment + "'");
}

inline void finalize(TrendReport& r) {
  compute_statistics(r);
  r.verdict = evaluate_verdict(r);
}

/// Everything measured on one closed-world three-stage run.
struct FusionRun {
  std::uint64_t seed = 0;
  VerificationSummary pr;         // PR head after stages 1-2
  VerificationSummary jpr;        // JPR head after stage 3
  VerificationSummary pr_final;   // PR head after stage 3
  double rank1_pr = 0.0;
  double rank1_jpr = 0.0;
  std::vector<double> attr_acc_sb;   // after stage 2
  std::vector<double> attr_acc_jpr;  // after stage 3
  RocCurve roc_pr;
  RocCurve roc_jpr;
};

struct ClosedWorldData {
  PreparedSet train;
  PreparedSet eval;
  NormalizationStats stats;
};

inline ClosedWorldData closed_world_data(const ExperimentSpec& spec, std::uint64_t seed) {
  const LabeledDataset ds = generate_synthetic(spec.synth, seed);
  const DatasetSplit split = split_closed_world(ds, spec.eval_fraction, derive_seed(seed, 0x73706c6974ULL));
  ClosedWorldData d;
  d.stats = normalization_stats(split.train);
  d.train = prepare(split.train, d.stats);
  d.eval = prepare(split.eval, d.stats);
  return d;
}

inline FusionRun run_fusion_seed(const ExperimentSpec& spec, std::uint64_t seed, const EpochCallback& on_epoch = {}) {
  const ClosedWorldData data = closed_world_data(spec, seed);
  ParamStore<float> params = build(detail::arch_for(spec, spec.synth.classes), derive_seed(seed, 0x696e6974ULL));
  const PipelineConfig pc = detail::seeded(spec.pipeline, seed);
  FusionRun run;
  run.seed = seed;
  run_stage(pc.stages[0], params, data.train, on_epoch);
  run_stage(pc.stages[1], params, data.train, on_epoch);
  const ScoreSet pr_scores = closed_world_scores(params, data.eval, IdentityHead::pr);
  run.pr = summarize(pr_scores);
  run.roc_pr = roc(pr_scores);
  run.rank1_pr = identity_accuracy(params, data.eval, IdentityHead::pr);
  run.attr_acc_sb = attribute_accuracy(params, data.eval);
  run_stage(pc.stages[2], params, data.train, on_epoch);
  const ScoreSet jpr_scores = closed_world_scores(params, data.eval, IdentityHead::jpr);
  run.jpr = summarize(jpr_scores);
  run.roc_jpr = roc(jpr_scores);
  run.rank1_jpr = identity_accuracy(params, data.eval, IdentityHead::jpr);
  run.pr_final = summarize(closed_world_scores(params, data.eval, IdentityHead::pr));
  run.attr_acc_jpr = attribute_accuracy(params, data.eval);
  return run;
}

inline TrendReport fusion_gain_report(const ExperimentSpec& spec, const std::vector<FusionRun>& runs) {
  TrendReport r;
  r.experiment = "fusion_gain";
  r.predicate = "mean(eer_jpr) <= mean(eer_pr)";
  r.control = spec.synth.attribute_signal == 0.0;
  for (const FusionRun& run : runs) {
    r.rows.push_back({run.seed,
                      "",
                      {{"eer_pr", run.pr.eer},
                       {"eer_jpr", run.jpr.eer},
                       {"auc_pr", run.pr.auc},
                       {"auc_jpr", run.jpr.auc},
                       {"rank1_pr", run.rank1_pr},
                       {"rank1_jpr", run.rank1_jpr},
                       {"eer_pr_after_stage3", run.pr_final.eer}}});
    r.rocs["seed" + std::to_string(run.seed) + "_pr"] = run.roc_pr;
    r.rocs["seed" + std::to_string(run.seed) + "_jpr"] = run.roc_jpr;
  }
  finalize(r);
  r.details["eer_difference_pr_minus_jpr"] = r.means.at("eer_pr") - r.means.at("eer_jpr");
  return r;
}

inline TrendReport attr_gain_report(const ExperimentSpec& spec, const std::vector<FusionRun>& runs) {
  TrendReport r;
  r.experiment = "attr_gain";
  r.predicate = "mean(attr_acc_jpr) >= mean(attr_acc_sb)";
  r.control = spec.synth.attribute_signal == 0.0;
  for (const FusionRun& run : runs) {
    TrendRow row{run.seed, "", {}};
    row.metrics["attr_acc_sb"] = detail::mean_accuracy(run.attr_acc_sb);
    row.metrics["attr_acc_jpr"] = detail::mean_accuracy(run.attr_acc_jpr);
    for (std::size_t t = 0; t < run.attr_acc_sb.size(); ++t) {
      row.metrics["attr" + std::to_string(t + 1) + "_acc_sb"] = run.attr_acc_sb[t];
      row.metrics["attr" + std::to_string(t + 1) + "_acc_jpr"] = run.attr_acc_jpr[t];
    }
    r.rows.push_back(std::move(row));
  }
  finalize(r);
  return r;
}

inline void require_seeds(const std::vector<std::uint64_t>& seeds) {
  if (seeds.empty()) throw std::invalid_argument("experiment needs at least one seed");
}

inline std::vector<FusionRun> run_fusion_seeds(const ExperimentSpec& spec, const std::vector<std::uint64_t>& seeds,
                                               const EpochCallback& on_epoch = {}) {
  require_seeds(seeds);
  if (spec.synth.attributes == 0) throw std::invalid_argument("experiment needs k >= 1 attributes");
  std::vector<FusionRun> runs;
  for (std::uint64_t s : seeds) runs.push_back(run_fusion_seed(spec, s, on_epoch));
  return runs;
}

/// PR head (stages 1-2) against JPR head (stage 3), per seed.
inline TrendReport exp_fusion_gain(const ExperimentSpec& spec, const std::vector<std::uint64_t>& seeds,
                                   const EpochCallback& on_epoch = {}) {
  return fusion_gain_report(spec, run_fusion_seeds(spec, seeds, on_epoch));
}

/// Attribute accuracy at the end of stage 2 against after stage 3.
inline TrendReport exp_attr_gain(const ExperimentSpec& spec, const std::vector<std::uint64_t>& seeds,
                                 const EpochCallback& on_epoch = {}) {
  return attr_gain_report(spec, run_fusion_seeds(spec, seeds, on_epoch));
}

/// Four variants per seed sharing one stage-1 run: PR only (PR head after stage 1),
/// attribute 1 only, attribute 2 only and both (JPR head after stage 3). A
/// single-attribute variant zeroes the other attribute's loss weight in stages 2 and 3.
inline TrendReport exp_attr_count(const ExperimentSpec& spec, const std::vector<std::uint64_t>& seeds,
                                  const EpochCallback& on_epoch = {}) {
  require_seeds(seeds);
  if (spec.synth.attributes != 2) throw std::invalid_argument("attr_count needs k == 2");
  TrendReport r;
  r.experiment = "attr_count";
  r.tolerance = spec.attr_count_tolerance;
  r.predicate = "mean(both/eer) <= min(mean(attr1_only/eer), mean(attr2_only/eer)) + tolerance";
  r.control = spec.synth.attribute_signal == 0.0;
  const std::vector<std::pair<std::string, std::vector<double>>> variants = {
      {"attr1_only", {1.0, 0.0}}, {"attr2_only", {0.0, 1.0}}, {"both", {1.0, 1.0}}};
  for (std::uint64_t seed : seeds) {
    const ClosedWorldData data = closed_world_data(spec, seed);
    ParamStore<float> base = build(detail::arch_for(spec, spec.synth.classes), derive_seed(seed, 0x696e6974ULL));
    const PipelineConfig pc = detail::seeded(spec.pipeline, seed);
    run_stage(pc.stages[0], base, data.train, on_epoch);
    const ScoreSet pr_scores = closed_world_scores(base, data.eval, IdentityHead::pr);
    const VerificationSummary pr = summarize(pr_scores);
    r.rows.push_back({seed, "pr_only", {{"eer", pr.eer}, {"auc", pr.auc}}});
    r.rocs["seed" + std::to_string(seed) + "_pr_only"] = roc(pr_scores);
    for (const auto& [name, weights] : variants) {
      ParamStore<float> params = base;
      StageConfig s2 = pc.stages[1], s3 = pc.stages[2];
      s2.attribute_weights = weights;
      s3.attribute_weights = weights;
      run_stage(s2, params, data.train, on_epoch);
      run_stage(s3, params, data.train, on_epoch);
      const ScoreSet scores = closed_world_scores(params, data.eval, IdentityHead::jpr);
      const VerificationSummary s = summarize(scores);
      r.rows.push_back({seed, name, {{"eer", s.eer}, {"auc", s.auc}}});
      r.rocs["seed" + std::to_string(seed) + "_" + name] = roc(scores);
    }
  }
  finalize(r);
  return r;
}

struct OpenWorldData {
  PreparedSet train;
  PreparedSet eval;
  PreparedSet val;
  PreparedSet gallery;  // eval identities, first half of each identity's images
  PreparedSet probes;
};

inline OpenWorldData open_world_data(const ExperimentSpec& spec, std::uint64_t seed) {
  SynthSpec family = spec.synth;
  const std::size_t a = spec.open_train_identities, b = a + spec.open_eval_identities, c = b + spec.open_val_identities;
  if (a < 2 || spec.open_eval_identities < 2 || spec.open_val_identities < 2) {
    throw std::invalid_argument("open world: every identity group needs at least 2 identities");
  }
  family.classes = c;
  family.attribute_assignment.clear();
  const LabeledDataset ds = generate_synthetic(family, seed);
  const LabeledDataset train = select_identities(ds, detail::id_range(0, a), "open-train");
  const LabeledDataset eval = select_identities(ds, detail::id_range(a, b), "open-eval");
  const LabeledDataset val = select_identities(ds, detail::id_range(b, c), "open-val");
  require_identity_disjoint(train.source_identity, eval.source_identity);
  require_identity_disjoint(train.source_identity, val.source_identity);
  require_identity_disjoint(eval.source_identity, val.source_identity);
  OpenWorldData d;
  const NormalizationStats stats = normalization_stats(train);
  d.train = prepare(train, stats);
  d.eval = prepare(eval, stats);
  d.val = prepare(val, stats);
  const DatasetSplit gp = split_closed_world(eval, 0.5, derive_seed(seed, 0x67616c6cULL));
  d.gallery = prepare(gp.train, stats);
  d.probes = prepare(gp.eval, stats);
  return d;
}

/// Pretrains on the train identities with the three stages, picks the margin
/// on the validation identities, and scores every pair of the eval identities.
inline TrendReport exp_open_world(const ExperimentSpec& spec, const std::vector<std::uint64_t>& seeds,
                                  const EpochCallback& on_epoch = {}, const SiameseCallback& on_siamese = {}) {
  require_seeds(seeds);
  TrendReport r;
  r.experiment = "open_world";
  r.tolerance = spec.open_world_min_auc;
  r.predicate = "mean(auc) >= " + format_double(spec.open_world_min_auc);
  nlohmann::json sweeps = nlohmann::json::array();
  for (std::uint64_t seed : seeds) {
    const OpenWorldData data = open_world_data(spec, seed);
    ParamStore<float> params = build(detail::arch_for(spec, spec.open_train_identities), derive_seed(seed, 0x696e6974ULL));
    run_full_pipeline(detail::seeded(spec.pipeline, seed), params, data.train, {}, on_epoch);
    const bool norm = spec.siamese.normalize_embeddings;
    const VerificationSummary pre = summarize(all_pair_scores(params, data.eval, norm));

    SiameseConfig sc = spec.siamese;
    sc.seed = derive_seed(seed, 0x7369616dULL + spec.siamese.seed);
    const MarginSweepResult sweep = margin_sweep(params, data.train, data.val, sc, on_siamese);
    const ScoreSet scores = all_pair_scores(sweep.best_params, data.eval, norm);
    const VerificationSummary s = summarize(scores);
    const double r1 = rank1(sweep.best_params, data.gallery, data.probes, RankMode::embedding);
    r.rows.push_back({seed,
                      "",
                      {{"auc", s.auc},
                       {"eer", s.eer},
                       {"rank1", r1},
                       {"margin", sweep.best_margin},
                       {"auc_pretrained", pre.auc},
                       {"eer_pretrained", pre.eer}}});
    r.rocs["seed" + std::to_string(seed) + "_open"] = roc(scores);
    nlohmann::json table = nlohmann::json::array();
    for (const MarginRow& m : sweep.table) table.push_back({{"margin", m.margin}, {"eer", m.eer}, {"auc", m.auc}});
    sweeps.push_back({{"seed", seed}, {"best_margin", sweep.best_margin}, {"table", table}});
  }
  r.details["margin_sweeps"] = sweeps;
  finalize(r);
  return r;
}

inline void to_json(nlohmann::json& j, const TrendReport& r) {
  nlohmann::json rows = nlohmann::json::array();
  for (const TrendRow& row : r.rows) {
    nlohmann::json o = {{"seed", row.seed}, {"metrics", row.metrics}};
    if (!row.variant.empty()) o["variant"] = row.variant;
    rows.push_back(o);
  }
  j = nlohmann::json{{"experiment", r.experiment}, {"predicate", r.predicate}, {"tolerance", r.tolerance},
                     {"control", r.control},       {"rows", rows},             {"means", r.means},
                     {"stds", r.stds},             {"details", r.details}};
  j["verdict"] = r.verdict ? nlohmann::json(*r.verdict ? "pass" : "fail") : nlohmann::json("not_asserted");
}

/// seed,variant,<metrics...> with metrics in sorted order.
inline void write_report_csv(const std::string& path, const TrendReport& r) {
  std::set<std::string> keys;
  for (const TrendRow& row : r.rows) {
    for (const auto& kv : row.metrics) keys.insert(kv.first);
  }
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + path);
  f << "seed,variant";
  for (const auto& k : keys) f << ',' << k;
  f << '\n';
  for (const TrendRow& row : r.rows) {
    f << row.seed << ',' << row.variant;
    for (const auto& k : keys) {
      f << ',';
      if (auto it = row.metrics.find(k); it != row.metrics.end()) f << format_double(it->second);
    }
    f << '\n';
  }
  if (!f) throw std::runtime_error("write failed: " + path);
}

/// <dir>/<experiment>.json, <dir>/<experiment>.csv and one ROC CSV per run.
inline void write_report(const std::filesystem::path& dir, const TrendReport& r) {
  std::filesystem::create_directories(dir);
  {
    std::ofstream f(dir / (r.experiment + ".json"), std::ios::binary);
    if (!f) throw std::runtime_error("cannot write report for " + r.experiment);
    f << nlohmann::json(r).dump(2) << '\n';
  }
  write_report_csv((dir / (r.experiment + ".csv")).string(), r);
  for (const auto& [name, curve] : r.rocs) {
    write_roc_csv((dir / ("roc_" + r.experiment + "_" + name + ".csv")).string(), curve);
  }
}

inline const std::vector<std::string>& experiment_names() {
  static const std::vector<std::string> names = {"fusion_gain", "attr_gain", "attr_count", "open_world"};
  return names;
}

inline TrendReport run_experiment(const std::string& name, const ExperimentSpec& spec,
                                  const std::vector<std::uint64_t>& seeds, const EpochCallback& on_epoch = {},
                                  const SiameseCallback& on_siamese = {}) {
  if (name == "fusion_gain") return exp_fusion_gain(spec, seeds, on_epoch);
  if (name == "attr_gain") return exp_attr_gain(spec, seeds, on_epoch);
  if (name == "attr_count") return exp_attr_count(spec, seeds, on_epoch);
  if (name == "open_world") return exp_open_world(spec, seeds, on_epoch, on_siamese);
  throw std::invalid_argument("unknown experiment '" + name + "' (expected fusion_gain, attr_gain, attr_count, open_world)");
}

}  // namespace adpr
