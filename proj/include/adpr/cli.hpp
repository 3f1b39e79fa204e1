#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <openssl/evp.h>

#include "CLI11.hpp"
#include "json.hpp"

#include "adpr/checkpoint.hpp"
#include "adpr/config.hpp"
#include "adpr/dataset.hpp"
#include "adpr/experiments.hpp"
#include "adpr/image_io.hpp"
#include "adpr/metrics.hpp"
#include "adpr/siamese.hpp"
#include "adpr/trainer.hpp"

#ifndef ADPR_VERSION
#define ADPR_VERSION "unknown"
#endif

namespace adpr::cli {

namespace fs = std::filesystem;

class CliError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline std::string sha256_hex(const std::string& data) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(data.data(), data.size(), md, &len, EVP_sha256(), nullptr) != 1) throw CliError("sha256 failed");
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out.push_back(hex[md[i] >> 4]);
    out.push_back(hex[md[i] & 15]);
  }
  return out;
}

/// Exclusive lock on an output directory for the lifetime of the object.
class OutputLock {
 public:
  explicit OutputLock(const fs::path& dir) : path_(dir / ".adpr.lock") {
    fs::create_directories(dir);
    std::FILE* f = std::fopen(path_.c_str(), "wx");
    if (!f) throw CliError("output directory " + dir.string() + " is locked by another run (" + path_.string() + ")");
    std::fclose(f);
  }
  ~OutputLock() {
    std::error_code ec;
    fs::remove(path_, ec);
  }
  OutputLock(const OutputLock&) = delete;
  OutputLock& operator=(const OutputLock&) = delete;

 private:
  fs::path path_;
};

/// Shared state of one command invocation.
struct Run {
  std::string command;
  RunConfig config;
  fs::path out;
  std::vector<std::string> outputs;
  std::ostream* log = &std::cout;

  fs::path file(const std::string& name) {
    outputs.push_back(name);
    return out / name;
  }

  std::string config_hash() const { return sha256_hex(nlohmann::json(config).dump()); }

  void emit(nlohmann::json j) const { *log << j.dump() << std::endl; }

  void write_manifest(const nlohmann::json& args) {
    std::sort(outputs.begin(), outputs.end());
    const nlohmann::json m = {{"command", command},     {"arguments", args},   {"config", config},
                              {"config_sha256", config_hash()}, {"seed", config.seed}, {"version", ADPR_VERSION},
                              {"outputs", outputs}};
    std::ofstream f(out / "run_manifest.json", std::ios::binary);
    if (!f) throw CliError("cannot write run manifest in " + out.string());
    f << m.dump(2) << '\n';
  }
};

inline void write_json(const fs::path& path, const nlohmann::json& j) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw CliError("cannot write " + path.string());
  f << j.dump(2) << '\n';
  if (!f) throw CliError("write failed: " + path.string());
}

enum class Mode { closed, open };

inline Mode parse_mode(const std::string& s) {
  if (s == "closed") return Mode::closed;
  if (s == "open") return Mode::open;
  throw CliError("--mode must be 'closed' or 'open', got '" + s + "'");
}

inline std::string to_string(Mode m) { return m == Mode::closed ? "closed" : "open"; }

inline LabeledDataset load_data(const RunConfig& cfg) {
  if (cfg.synth) return generate_synthetic(*cfg.synth, cfg.seed);
  const ArchConfig& a = cfg.arch;
  return load_image_directory(cfg.manifest->parent_path(), *cfg.manifest, a.height, a.width, a.attributes);
}

/// Train/eval views of the configured data under one protocol. Open mode
/// holds out round(C * eval_fraction) identities; the model only sees the rest.
struct Data {
  Mode mode = Mode::closed;
  DatasetSplit split;
  NormalizationStats stats;
  PreparedSet train;
  PreparedSet eval;
  ArchConfig arch;
};

inline Data load_split(const RunConfig& cfg, Mode mode, const std::optional<NormalizationStats>& stats = std::nullopt) {
  const LabeledDataset ds = load_data(cfg);
  Data d;
  d.mode = mode;
  const std::uint64_t split_seed = derive_seed(cfg.seed, 0x73706c6974ULL);
  d.split = mode == Mode::closed ? split_closed_world(ds, cfg.eval_fraction, split_seed)
                                 : split_open_world(ds, cfg.eval_fraction, split_seed);
  d.stats = stats ? *stats : normalization_stats(d.split.train);
  d.train = prepare(d.split.train, d.stats);
  d.eval = prepare(d.split.eval, d.stats);
  d.arch = cfg.resolved_arch();
  d.arch.classes = d.split.train.classes;
  d.arch.attributes = ds.attributes;
  return d;
}

inline nlohmann::json checkpoint_extra(const Data& d, const Run& run) {
  return {{"normalization", d.stats}, {"mode", to_string(d.mode)}, {"config_sha256", run.config_hash()}};
}

inline std::optional<NormalizationStats> stats_from(const Checkpoint& ck) {
  if (!ck.extra.contains("normalization")) return std::nullopt;
  return ck.extra.at("normalization").get<NormalizationStats>();
}

inline Mode mode_from(const Checkpoint& ck, Mode fallback) {
  return ck.extra.contains("mode") ? parse_mode(ck.extra.at("mode").get<std::string>()) : fallback;
}

inline Checkpoint open_checkpoint(const fs::path& path) {
  if (!fs::exists(path)) throw CliError("checkpoint " + path.string() + " does not exist");
  Checkpoint ck = load_checkpoint(path);
  if (!ck.checksum_failures.empty()) {
    throw CliError("checkpoint " + path.string() + " failed CRC32 for tensor '" + ck.checksum_failures.front() + "'");
  }
  return ck;
}

/// The checkpoint's data view, checked against its architecture.
inline Data data_for(const RunConfig& cfg, const Checkpoint& ck, Mode mode) {
  Data d = load_split(cfg, mode, stats_from(ck));
  if (auto field = arch_difference(d.arch, ck.params.config())) {
    throw CliError("checkpoint architecture mismatch in field 'arch." + *field + "' (config and data give a different model)");
  }
  return d;
}

inline ScoreSet score(const ParamStore<float>& params, const Data& d, IdentityHead head, bool normalize) {
  if (d.mode == Mode::closed) return closed_world_scores(params, d.eval, head);
  return all_pair_scores(params, d.eval, normalize);
}

inline double rank1_for(const ParamStore<float>& params, const Data& d, IdentityHead head, const RunConfig& cfg) {
  if (d.mode == Mode::closed) return identity_accuracy(params, d.eval, head);
  const DatasetSplit gp = split_closed_world(d.split.eval, 0.5, derive_seed(cfg.seed, 0x67616c6cULL));
  return rank1(params, prepare(gp.train, d.stats), prepare(gp.eval, d.stats), RankMode::embedding);
}

// ---- commands ----

inline void cmd_gen_data(Run& run) {
  if (!run.config.synth) throw CliError("gen-data needs data.synth in the config");
  const LabeledDataset ds = generate_synthetic(*run.config.synth, run.config.seed);
  write_image_directory(ds, run.out);
  run.outputs.push_back("manifest.csv");
  for (std::size_t i = 0; i < ds.samples.size(); ++i) {
    std::ostringstream name;
    name << "images/" << std::setw(6) << std::setfill('0') << i << ".png";
    run.outputs.push_back(name.str());
  }
  write_json(run.file("spec.json"), {{"synth", *run.config.synth}, {"seed", run.config.seed}});
  run.emit({{"event", "done"}, {"command", "gen-data"}, {"samples", ds.samples.size()}, {"classes", ds.classes}});
}

inline void cmd_train(Run& run, int stage, const std::optional<fs::path>& checkpoint, Mode mode) {
  if (stage < 1 || stage > 3) throw CliError("--stage must be 1, 2 or 3");
  std::optional<Checkpoint> ck;
  if (checkpoint) ck = open_checkpoint(*checkpoint);
  const int have = ck ? ck->stage : 0;
  if (have != stage - 1) {
    throw CliError("train --stage " + std::to_string(stage) + " needs a model that completed stage " +
                   std::to_string(stage - 1) + "; " + (ck ? "checkpoint has stage " + std::to_string(have) : "no checkpoint given (fresh model, stage 0)"));
  }
  if (ck) mode = mode_from(*ck, mode);
  Data d = ck ? data_for(run.config, *ck, mode) : load_split(run.config, mode);
  ParamStore<float> params = ck ? std::move(ck->params) : build(d.arch, derive_seed(run.config.seed, 0x696e6974ULL));
  const PipelineConfig pc = detail::seeded(run.config.pipeline, run.config.seed);
  const StageConfig& sc = pc.stages[static_cast<std::size_t>(stage - 1)];
  OptimizerState state;
  run_stage(sc, params, d.train, [&](const EpochLog& e) {
    nlohmann::json j = e;
    j["event"] = "epoch";
    run.emit(j);
  }, &state);
  const std::string name = "stage" + std::to_string(stage) + ".ckpt";
  save_checkpoint(run.file(name), params, &state, stage, checkpoint_extra(d, run));
  nlohmann::json done = {{"event", "done"}, {"command", "train"}, {"stage", stage}, {"checkpoint", name}};
  if (stage != 2) done["train_accuracy"] = identity_accuracy(params, d.train, stage == 1 ? IdentityHead::pr : IdentityHead::jpr);
  if (stage != 1) done["train_attribute_accuracy"] = attribute_accuracy(params, d.train);
  run.emit(done);
}

inline ParamStore<float> siamese_start(const RunConfig& cfg, const std::optional<fs::path>& checkpoint, Data& d,
                                       int& stage_in) {
  if (checkpoint) {
    Checkpoint ck = open_checkpoint(*checkpoint);
    if (mode_from(ck, Mode::open) != Mode::open) {
      throw CliError("Siamese training needs a model trained in open mode (checkpoint was trained in closed mode)");
    }
    d = data_for(cfg, ck, Mode::open);
    stage_in = ck.stage;
    return std::move(ck.params);
  }
  d = load_split(cfg, Mode::open);
  stage_in = 0;
  return build(d.arch, derive_seed(cfg.seed, 0x696e6974ULL));
}

inline SiameseConfig seeded_siamese(const RunConfig& cfg) {
  SiameseConfig sc = cfg.siamese;
  sc.seed = derive_seed(cfg.seed, 0x7369616dULL + cfg.siamese.seed);
  return sc;
}

inline void cmd_train_siamese(Run& run, const std::optional<fs::path>& checkpoint) {
  Data d;
  int stage_in = 0;
  ParamStore<float> params = siamese_start(run.config, checkpoint, d, stage_in);
  const SiameseConfig sc = seeded_siamese(run.config);
  train_siamese(params, d.train, sc, [&](const SiameseEpochLog& e) {
    nlohmann::json j = e;
    j["event"] = "epoch";
    run.emit(j);
  });
  save_checkpoint(run.file("siamese.ckpt"), params, nullptr, 4, checkpoint_extra(d, run));
  run.emit({{"event", "done"}, {"command", "train-siamese"}, {"margin", sc.margin}, {"from_stage", stage_in}});
}

inline void cmd_sweep_margin(Run& run, const std::optional<fs::path>& checkpoint) {
  Data d;
  int stage_in = 0;
  ParamStore<float> params = siamese_start(run.config, checkpoint, d, stage_in);
  // Validation identities are carved out of the training identities; eval identities stay unseen.
  const DatasetSplit fit_val = split_open_world(d.split.train, 0.25, derive_seed(run.config.seed, 0x76616cULL));
  const PreparedSet fit = prepare(fit_val.train, d.stats), val = prepare(fit_val.eval, d.stats);
  const MarginSweepResult res = margin_sweep(params, fit, val, seeded_siamese(run.config), [&](const SiameseEpochLog& e) {
    nlohmann::json j = e;
    j["event"] = "epoch";
    run.emit(j);
  });
  write_margin_csv(run.file("margin_sweep.csv").string(), res.table);
  nlohmann::json table = nlohmann::json::array();
  for (const MarginRow& r : res.table) table.push_back({{"margin", r.margin}, {"eer", r.eer}, {"auc", r.auc}});
  write_json(run.file("margin_sweep.json"), {{"best_margin", res.best_margin}, {"table", table}});
  save_checkpoint(run.file("siamese.ckpt"), res.best_params, nullptr, 4, checkpoint_extra(d, run));
  run.emit({{"event", "done"}, {"command", "sweep-margin"}, {"best_margin", res.best_margin}});
}

inline IdentityHead parse_head(const std::string& s) {
  if (s == "jpr") return IdentityHead::jpr;
  if (s == "pr") return IdentityHead::pr;
  throw CliError("--head must be 'jpr' or 'pr', got '" + s + "'");
}

inline void cmd_eval(Run& run, const fs::path& checkpoint, Mode mode, IdentityHead head, bool roc_only) {
  const Checkpoint ck = open_checkpoint(checkpoint);
  const Mode trained = mode_from(ck, mode);
  if (trained != mode) {
    throw CliError("checkpoint was trained in " + to_string(trained) + " mode; evaluating it in " + to_string(mode) +
                   " mode would mix identities");
  }
  const Data d = data_for(run.config, ck, mode);
  const ScoreSet scores = score(ck.params, d, head, run.config.siamese.normalize_embeddings);
  VerificationSummary s = summarize(scores);
  write_roc_csv(run.file("roc.csv").string(), roc(scores));
  if (!roc_only) {
    s.rank1 = rank1_for(ck.params, d, head, run.config);
    write_scores_csv(run.file("scores.csv").string(), scores);
  }
  nlohmann::json j = s;
  j["mode"] = to_string(mode);
  if (mode == Mode::closed) j["head"] = head == IdentityHead::jpr ? "jpr" : "pr";
  j["checkpoint_stage"] = ck.stage;
  write_json(run.file("summary.json"), j);
  j["event"] = "done";
  j["command"] = roc_only ? "export-roc" : "eval";
  run.emit(j);
}

inline void cmd_export_roc_from_scores(Run& run, const fs::path& scores_path) {
  const ScoreSet scores = read_scores_csv(scores_path.string());
  write_roc_csv(run.file("roc.csv").string(), roc(scores));
  const nlohmann::json j = summarize(scores);
  write_json(run.file("summary.json"), j);
  run.emit({{"event", "done"}, {"command", "export-roc"}, {"auc", j.at("auc")}, {"eer", j.at("eer")}});
}

inline std::vector<std::uint64_t> parse_seeds(const std::string& s) {
  std::vector<std::uint64_t> out;
  std::stringstream ss(s);
  for (std::string tok; std::getline(ss, tok, ',');) {
    std::size_t v = 0;
    if (!detail::parse_index(detail::trim(tok), v)) throw CliError("--seeds: '" + tok + "' is not a non-negative integer");
    out.push_back(v);
  }
  if (out.empty()) throw CliError("--seeds: empty list");
  return out;
}

inline void cmd_run_experiment(Run& run, std::string name, const std::optional<std::string>& seeds) {
  if (name.empty()) name = run.config.experiment.name;
  if (name.empty()) throw CliError("run-experiment needs --experiment or experiment.name in the config");
  const auto& names = experiment_names();
  if (std::find(names.begin(), names.end(), name) == names.end()) throw CliError("unknown experiment '" + name + "'");
  const std::vector<std::uint64_t> seed_list = seeds ? parse_seeds(*seeds) : run.config.experiment.seeds;
  auto log_epoch = [&](const EpochLog& e) {
    nlohmann::json j = e;
    j["event"] = "epoch";
    run.emit(j);
  };
  auto log_siamese = [&](const SiameseEpochLog& e) {
    nlohmann::json j = e;
    j["event"] = "epoch";
    run.emit(j);
  };
  const TrendReport r = run_experiment(name, run.config.experiment_spec(), seed_list, log_epoch, log_siamese);
  write_report(run.out, r);
  run.outputs.push_back(r.experiment + ".json");
  run.outputs.push_back(r.experiment + ".csv");
  for (const auto& kv : r.rocs) run.outputs.push_back("roc_" + r.experiment + "_" + kv.first + ".csv");
  nlohmann::json j = r;
  run.emit({{"event", "done"}, {"command", "run-experiment"}, {"experiment", name}, {"verdict", j.at("verdict")}, {"means", r.means}});
}

/// Entry point. Returns the process exit code; diagnostics go to `err`.
inline int run_cli(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Attribute-fused periocular recognition: training, evaluation and experiments"};
  app.set_version_flag("--version", std::string(ADPR_VERSION));
  app.require_subcommand(1);

  std::string config_path, out_dir, mode_s = "closed", head_s = "jpr", experiment, scores_path, seeds_s;
  std::string checkpoint_s;
  int stage = 0;

  auto add_common = [&](CLI::App* c, bool config_required = true) {
    auto* opt = c->add_option("--config", config_path, "Run configuration JSON")->check(CLI::ExistingFile);
    if (config_required) opt->required();
    c->add_option("--out", out_dir, "Output directory (overrides the config's out)");
  };
  auto* gen = app.add_subcommand("gen-data", "Write a synthetic dataset as PNG images plus manifest.csv");
  add_common(gen);
  auto* train = app.add_subcommand("train", "Run one training stage");
  add_common(train);
  train->add_option("--stage", stage, "Stage 1, 2 or 3")->required();
  train->add_option("--checkpoint", checkpoint_s, "Checkpoint that completed the previous stage");
  train->add_option("--mode", mode_s, "closed | open (fresh models only; otherwise taken from the checkpoint)");
  auto* siam = app.add_subcommand("train-siamese", "Fine-tune with the coupled contrastive loss (open mode)");
  add_common(siam);
  siam->add_option("--checkpoint", checkpoint_s, "Pretrained checkpoint; omitted means a fresh model");
  auto* eval = app.add_subcommand("eval", "Verification summary (auc, eer, rank1) on held-out data");
  add_common(eval);
  eval->add_option("--checkpoint", checkpoint_s, "Checkpoint to evaluate")->required();
  eval->add_option("--mode", mode_s, "closed | open");
  eval->add_option("--head", head_s, "jpr | pr (closed mode)");
  auto* sweep = app.add_subcommand("sweep-margin", "Train one Siamese model per margin and keep the best");
  add_common(sweep);
  sweep->add_option("--checkpoint", checkpoint_s, "Pretrained checkpoint; omitted means a fresh model");
  auto* exp = app.add_subcommand("run-experiment", "Run a seed-averaged trend experiment");
  add_common(exp);
  exp->add_option("--experiment", experiment, "fusion_gain | attr_gain | attr_count | open_world");
  exp->add_option("--seeds", seeds_s, "Comma-separated seeds (overrides the config)");
  auto* roc_cmd = app.add_subcommand("export-roc", "Write roc.csv from a scores CSV or a checkpoint");
  add_common(roc_cmd, false);
  roc_cmd->add_option("--scores", scores_path, "scores.csv with score,genuine columns")->check(CLI::ExistingFile);
  roc_cmd->add_option("--checkpoint", checkpoint_s, "Checkpoint to score");
  roc_cmd->add_option("--mode", mode_s, "closed | open");
  roc_cmd->add_option("--head", head_s, "jpr | pr (closed mode)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForVersion& e) {
    out << ADPR_VERSION << '\n';
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "adpr: error: " << e.what() << '\n';
    return e.get_exit_code() ? e.get_exit_code() : 2;
  }

  try {
    Run run;
    run.log = &out;
    CLI::App* sub = app.get_subcommands().front();
    run.command = sub->get_name();
    if (!config_path.empty()) {
      run.config = load_run_config(config_path);
    } else if (run.command != "export-roc") {
      throw CliError("--config is required");
    }
    if (!out_dir.empty()) {
      run.out = out_dir;
    } else if (run.config.out) {
      run.out = *run.config.out;
    } else {
      throw CliError("no output directory: pass --out or set out in the config");
    }
    std::optional<fs::path> checkpoint;
    if (!checkpoint_s.empty()) checkpoint = checkpoint_s;

    OutputLock lock(run.out);
    nlohmann::json args = nlohmann::json::object();
    for (const CLI::Option* o : sub->get_options()) {
      if (o->count() > 0 && o->get_name() != "--help") args[o->get_name()] = o->as<std::string>();
    }

    if (run.command == "gen-data") {
      cmd_gen_data(run);
    } else if (run.command == "train") {
      cmd_train(run, stage, checkpoint, parse_mode(mode_s));
    } else if (run.command == "train-siamese") {
      cmd_train_siamese(run, checkpoint);
    } else if (run.command == "eval") {
      cmd_eval(run, *checkpoint, parse_mode(mode_s), parse_head(head_s), false);
    } else if (run.command == "sweep-margin") {
      cmd_sweep_margin(run, checkpoint);
    } else if (run.command == "run-experiment") {
      cmd_run_experiment(run, experiment, seeds_s.empty() ? std::nullopt : std::optional<std::string>(seeds_s));
    } else if (run.command == "export-roc") {
      if (!scores_path.empty()) {
        cmd_export_roc_from_scores(run, scores_path);
      } else if (checkpoint) {
        if (config_path.empty()) throw CliError("export-roc --checkpoint needs --config");
        cmd_eval(run, *checkpoint, parse_mode(mode_s), parse_head(head_s), true);
      } else {
        throw CliError("export-roc needs --scores or --checkpoint");
      }
    }
    run.write_manifest(args);
    return 0;
  } catch (const std::exception& e) {
    std::string msg = e.what();
    std::replace(msg.begin(), msg.end(), '\n', ' ');
    err << "adpr: error: " << msg << '\n';
    return 1;
  }
}

}  // namespace adpr::cli
