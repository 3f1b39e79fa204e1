#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "adpr/dataset.hpp"
#include "adpr/experiments.hpp"
#include "adpr/losses.hpp"
#include "adpr/model.hpp"
#include "adpr/siamese.hpp"
#include "adpr/trainer.hpp"

namespace adpr {

/// Invalid configuration; the message names the offending field.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Typed access to one JSON object. Every key must be consumed; leftovers are
/// reported by finish() as unknown fields.
class FieldReader {
 public:
  FieldReader(const nlohmann::json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(label() + ": expected a JSON object");
  }

  bool has(const std::string& key) const { return j_.contains(key); }

  template <typename T>
  T get(const std::string& key, T fallback) {
    if (!j_.contains(key)) return fallback;
    return required<T>(key);
  }

  template <typename T>
  T required(const std::string& key) {
    used_.insert(key);
    if (!j_.contains(key)) throw ConfigError(field(key) + ": missing required field");
    const nlohmann::json& v = j_.at(key);
    if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) throw ConfigError(field(key) + ": expected a boolean");
    } else if constexpr (std::is_integral_v<T> && std::is_unsigned_v<T>) {
      if (!v.is_number_integer() || v.get<std::int64_t>() < 0) throw ConfigError(field(key) + ": expected a non-negative integer");
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!v.is_number()) throw ConfigError(field(key) + ": expected a number");
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!v.is_string()) throw ConfigError(field(key) + ": expected a string");
    }
    try {
      return v.get<T>();
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(field(key) + ": " + e.what());
    }
  }

  const nlohmann::json& raw(const std::string& key) {
    used_.insert(key);
    return j_.at(key);
  }

  std::string field(const std::string& key) const { return "config field '" + (path_.empty() ? key : path_ + "." + key) + "'"; }
  std::string child(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  void finish() const {
    for (const auto& [k, v] : j_.items()) {
      if (!used_.contains(k)) throw ConfigError(field(k) + ": unknown field");
    }
  }

 private:
  std::string label() const { return "config field '" + (path_.empty() ? std::string("<root>") : path_) + "'"; }

  const nlohmann::json& j_;
  std::string path_;
  std::set<std::string> used_;
};

namespace detail {

/// Runs `validate` and rewrites its message to name the section.
template <typename Fn>
void validated(const std::string& path, Fn&& validate) {
  try {
    validate();
  } catch (const std::exception& e) {
    throw ConfigError("config field '" + path + "': " + e.what());
  }
}

}  // namespace detail

// ---- ArchConfig ----

inline void to_json(nlohmann::json& j, const ArchConfig& a) {
  nlohmann::json stages = nlohmann::json::array();
  for (const ConvStage& s : a.backbone) {
    stages.push_back({{"out_channels", s.out_channels}, {"kernel", s.kernel}, {"pool", s.pool}});
  }
  j = nlohmann::json{{"height", a.height},           {"width", a.width},
                     {"channels", a.channels},       {"backbone", stages},
                     {"pr_fc1_size", a.pr_fc1_size}, {"pr_fc2_size", a.pr_fc2_size},
                     {"sb_fc1_size", a.sb_fc1_size}, {"sb_fc2_size", a.sb_fc2_size},
                     {"jpr_fc_size", a.jpr_fc_size}, {"classes", a.classes},
                     {"attributes", a.attributes},   {"init_scale", a.init_scale}};
}

inline ArchConfig parse_arch(const nlohmann::json& j, const std::string& path = "arch") {
  FieldReader r(j, path);
  ArchConfig a;
  a.height = r.get("height", a.height);
  a.width = r.get("width", a.width);
  a.channels = r.get("channels", a.channels);
  if (r.has("backbone")) {
    const nlohmann::json& list = r.raw("backbone");
    if (!list.is_array()) throw ConfigError(r.field("backbone") + ": expected an array");
    a.backbone.clear();
    for (std::size_t i = 0; i < list.size(); ++i) {
      FieldReader s(list[i], r.child("backbone") + "[" + std::to_string(i) + "]");
      ConvStage st;
      st.out_channels = s.required<std::size_t>("out_channels");
      st.kernel = s.get("kernel", st.kernel);
      st.pool = s.get("pool", st.pool);
      s.finish();
      a.backbone.push_back(st);
    }
  }
  a.pr_fc1_size = r.get("pr_fc1_size", a.pr_fc1_size);
  a.pr_fc2_size = r.get("pr_fc2_size", a.pr_fc2_size);
  a.sb_fc1_size = r.get("sb_fc1_size", a.sb_fc1_size);
  a.sb_fc2_size = r.get("sb_fc2_size", a.sb_fc2_size);
  a.jpr_fc_size = r.get("jpr_fc_size", a.jpr_fc_size);
  a.classes = r.get("classes", a.classes);
  a.attributes = r.get("attributes", a.attributes);
  a.init_scale = r.get("init_scale", a.init_scale);
  r.finish();
  detail::validated(path, [&] { a.validate(); });
  return a;
}

/// Names the first field where two architectures differ, or nullopt if equal.
inline std::optional<std::string> arch_difference(const ArchConfig& a, const ArchConfig& b) {
  const nlohmann::json ja = a, jb = b;
  for (const auto& [k, v] : ja.items()) {
    if (jb.at(k) != v) return k;
  }
  return std::nullopt;
}

// ---- SynthSpec ----

inline SynthSpec parse_synth(const nlohmann::json& j, const std::string& path = "data.synth") {
  FieldReader r(j, path);
  SynthSpec s;
  s.classes = r.get("C", s.classes);
  s.images_per_identity = r.get("images_per_identity", s.images_per_identity);
  s.height = r.get("H", s.height);
  s.width = r.get("W", s.width);
  s.attributes = r.get("k", s.attributes);
  if (r.has("attribute_assignment")) {
    const nlohmann::json& rows = r.raw("attribute_assignment");
    if (!rows.is_array()) throw ConfigError(r.field("attribute_assignment") + ": expected an array of rows");
    for (std::size_t c = 0; c < rows.size(); ++c) {
      if (!rows[c].is_array()) throw ConfigError(r.field("attribute_assignment") + ": row " + std::to_string(c) + " is not an array");
      std::vector<std::uint8_t> row;
      for (const auto& b : rows[c]) {
        if (!b.is_number_unsigned() || b.get<unsigned>() > 1) {
          throw ConfigError(r.field("attribute_assignment") + ": row " + std::to_string(c) + " has a non-binary entry");
        }
        row.push_back(static_cast<std::uint8_t>(b.get<unsigned>()));
      }
      s.attribute_assignment.push_back(std::move(row));
    }
  }
  s.noise_std = r.get("noise_std", s.noise_std);
  s.attribute_signal = r.get("attribute_signal", s.attribute_signal);
  s.identity_signal = r.get("identity_signal", s.identity_signal);
  r.finish();
  detail::validated(path, [&] { s.validate(); });
  return s;
}

// ---- StageConfig ----

inline void to_json(nlohmann::json& j, const StageConfig& s) {
  j = nlohmann::json{{"stage", s.stage},
                     {"learning_rate", s.learning_rate},
                     {"momentum", s.momentum},
                     {"weight_decay", s.weight_decay},
                     {"batch_size", s.batch_size},
                     {"epochs", s.epochs},
                     {"frozen_blocks", s.frozen_blocks},
                     {"seed", s.seed},
                     {"e2_weight", s.e2_weight},
                     {"attribute_weights", s.attribute_weights}};
}

/// Missing fields take the defaults of `stage` (1-based position in the list).
inline StageConfig parse_stage(const nlohmann::json& j, int stage, const std::string& path) {
  FieldReader r(j, path);
  StageConfig s = StageConfig::for_stage(stage, default_epochs(stage), static_cast<std::uint64_t>(stage));
  const int declared = static_cast<int>(r.get<std::size_t>("stage", static_cast<std::size_t>(stage)));
  if (declared != stage) {
    throw ConfigError(r.field("stage") + ": entry " + std::to_string(stage) + " declares stage " + std::to_string(declared));
  }
  s.learning_rate = r.get("learning_rate", s.learning_rate);
  s.momentum = r.get("momentum", s.momentum);
  s.weight_decay = r.get("weight_decay", s.weight_decay);
  s.batch_size = r.get("batch_size", s.batch_size);
  s.epochs = r.get("epochs", s.epochs);
  if (r.has("frozen_blocks")) {
    const auto blocks = r.required<std::vector<std::string>>("frozen_blocks");
    s.frozen_blocks = std::set<std::string>(blocks.begin(), blocks.end());
  }
  s.seed = r.get("seed", s.seed);
  s.e2_weight = r.get("e2_weight", s.e2_weight);
  s.attribute_weights = r.get("attribute_weights", s.attribute_weights);
  r.finish();
  detail::validated(path, [&] { s.validate(); });
  return s;
}

// ---- SiameseConfig ----

inline void to_json(nlohmann::json& j, const SiameseConfig& s) {
  j = nlohmann::json{{"margin", s.margin},
                     {"sweep", s.sweep},
                     {"pair_batch_size", s.pair_batch_size},
                     {"batches_per_epoch", s.batches_per_epoch},
                     {"epochs", s.epochs},
                     {"genuine_fraction", s.genuine_fraction},
                     {"seed", s.seed},
                     {"learning_rate", s.learning_rate},
                     {"momentum", s.momentum},
                     {"weight_decay", s.weight_decay},
                     {"contrastive_form", to_string(s.contrastive_form)},
                     {"normalize_embeddings", s.normalize_embeddings},
                     {"add_e3", s.add_e3},
                     {"e2_weight", s.e2_weight}};
}

inline SiameseConfig parse_siamese(const nlohmann::json& j, const std::string& path = "siamese") {
  FieldReader r(j, path);
  SiameseConfig s;
  s.margin = r.get("margin", s.margin);
  s.sweep = r.get("sweep", s.sweep);
  s.pair_batch_size = r.get("pair_batch_size", s.pair_batch_size);
  s.batches_per_epoch = r.get("batches_per_epoch", s.batches_per_epoch);
  s.epochs = r.get("epochs", s.epochs);
  s.genuine_fraction = r.get("genuine_fraction", s.genuine_fraction);
  s.seed = r.get("seed", s.seed);
  s.learning_rate = r.get("learning_rate", s.learning_rate);
  s.momentum = r.get("momentum", s.momentum);
  s.weight_decay = r.get("weight_decay", s.weight_decay);
  if (r.has("contrastive_form")) {
    const auto form = r.required<std::string>("contrastive_form");
    try {
      s.contrastive_form = parse_contrastive_form(form);
    } catch (const std::exception& e) {
      throw ConfigError(r.field("contrastive_form") + ": " + e.what());
    }
  }
  s.normalize_embeddings = r.get("normalize_embeddings", s.normalize_embeddings);
  s.add_e3 = r.get("add_e3", s.add_e3);
  s.e2_weight = r.get("e2_weight", s.e2_weight);
  r.finish();
  detail::validated(path, [&] { s.validate(); });
  return s;
}

// ---- RunConfig ----

struct ExperimentSelection {
  std::string name;  // empty: none selected
  std::vector<std::uint64_t> seeds = {1, 2, 3, 4, 5};
};

struct RunConfig {
  std::uint64_t seed = 1;
  std::optional<SynthSpec> synth;
  std::optional<std::filesystem::path> manifest;  // image manifest, relative paths resolved against the config file
  double eval_fraction = 0.5;
  ArchConfig arch;
  PipelineConfig pipeline;
  SiameseConfig siamese;
  ExperimentSelection experiment;
  double attr_count_tolerance = 0.02;
  double open_world_min_auc = 0.8;
  std::size_t open_train_identities = 16;
  std::size_t open_eval_identities = 16;
  std::size_t open_val_identities = 8;
  std::optional<std::filesystem::path> out;

  /// Architecture with classes and attributes taken from the data when a synthetic spec is present.
  ArchConfig resolved_arch() const {
    ArchConfig a = arch;
    if (synth) {
      a.classes = synth->classes;
      a.attributes = synth->attributes;
      a.height = synth->height;
      a.width = synth->width;
    }
    return a;
  }

  ExperimentSpec experiment_spec() const {
    if (!synth) throw ConfigError("config field 'data.synth': experiments need a synthetic data spec");
    ExperimentSpec e;
    e.synth = *synth;
    e.arch = resolved_arch();
    e.pipeline = pipeline;
    e.siamese = siamese;
    e.eval_fraction = eval_fraction;
    e.attr_count_tolerance = attr_count_tolerance;
    e.open_world_min_auc = open_world_min_auc;
    e.open_train_identities = open_train_identities;
    e.open_eval_identities = open_eval_identities;
    e.open_val_identities = open_val_identities;
    return e;
  }
};

inline void to_json(nlohmann::json& j, const RunConfig& c) {
  nlohmann::json data = nlohmann::json::object();
  if (c.synth) data["synth"] = *c.synth;
  if (c.manifest) data["manifest"] = c.manifest->string();
  j = nlohmann::json{{"seed", c.seed},
                     {"data", data},
                     {"eval_fraction", c.eval_fraction},
                     {"arch", c.resolved_arch()},
                     {"stages", {c.pipeline.stages[0], c.pipeline.stages[1], c.pipeline.stages[2]}},
                     {"siamese", c.siamese},
                     {"experiment",
                      {{"name", c.experiment.name},
                       {"seeds", c.experiment.seeds},
                       {"attr_count_tolerance", c.attr_count_tolerance},
                       {"open_world_min_auc", c.open_world_min_auc},
                       {"open_train_identities", c.open_train_identities},
                       {"open_eval_identities", c.open_eval_identities},
                       {"open_val_identities", c.open_val_identities}}}};
  if (c.out) j["out"] = c.out->string();
}

/// Parses a run configuration. `base_dir` resolves a relative manifest path.
inline RunConfig parse_run_config(const nlohmann::json& j, const std::filesystem::path& base_dir = {}) {
  FieldReader r(j, "");
  RunConfig c;
  c.seed = r.get("seed", c.seed);
  if (r.has("data")) {
    FieldReader d(r.raw("data"), "data");
    if (d.has("synth")) c.synth = parse_synth(d.raw("synth"), "data.synth");
    if (d.has("manifest")) {
      std::filesystem::path m = d.required<std::string>("manifest");
      if (m.is_relative() && !base_dir.empty()) m = base_dir / m;
      if (!std::filesystem::exists(m)) throw ConfigError(d.field("manifest") + ": file does not exist: " + m.string());
      c.manifest = m;
    }
    d.finish();
    if (c.synth && c.manifest) throw ConfigError("config field 'data': give either synth or manifest, not both");
  }
  if (!c.synth && !c.manifest) c.synth = SynthSpec{};
  c.eval_fraction = r.get("eval_fraction", c.eval_fraction);
  if (!(c.eval_fraction > 0.0 && c.eval_fraction < 1.0)) throw ConfigError(r.field("eval_fraction") + ": must lie in (0,1)");
  if (r.has("arch")) c.arch = parse_arch(r.raw("arch"), "arch");
  if (c.synth) {
    if (r.has("arch") && j.at("arch").contains("classes") && c.arch.classes != c.synth->classes) {
      throw ConfigError("config field 'arch.classes': " + std::to_string(c.arch.classes) + " differs from data.synth.C " +
                        std::to_string(c.synth->classes));
    }
    if (r.has("arch") && j.at("arch").contains("attributes") && c.arch.attributes != c.synth->attributes) {
      throw ConfigError("config field 'arch.attributes': " + std::to_string(c.arch.attributes) +
                        " differs from data.synth.k " + std::to_string(c.synth->attributes));
    }
  }
  if (r.has("stages")) {
    const nlohmann::json& list = r.raw("stages");
    if (!list.is_array() || list.size() != 3) throw ConfigError(r.field("stages") + ": expected an array of 3 stage objects");
    for (int s = 0; s < 3; ++s) {
      c.pipeline.stages[static_cast<std::size_t>(s)] =
          parse_stage(list[static_cast<std::size_t>(s)], s + 1, "stages[" + std::to_string(s) + "]");
    }
  }
  if (r.has("siamese")) c.siamese = parse_siamese(r.raw("siamese"), "siamese");
  if (r.has("experiment")) {
    FieldReader e(r.raw("experiment"), "experiment");
    c.experiment.name = e.get("name", c.experiment.name);
    c.experiment.seeds = e.get("seeds", c.experiment.seeds);
    c.attr_count_tolerance = e.get("attr_count_tolerance", c.attr_count_tolerance);
    c.open_world_min_auc = e.get("open_world_min_auc", c.open_world_min_auc);
    c.open_train_identities = e.get("open_train_identities", c.open_train_identities);
    c.open_eval_identities = e.get("open_eval_identities", c.open_eval_identities);
    c.open_val_identities = e.get("open_val_identities", c.open_val_identities);
    e.finish();
    if (!c.experiment.name.empty()) {
      const auto& names = experiment_names();
      if (std::find(names.begin(), names.end(), c.experiment.name) == names.end()) {
        throw ConfigError(e.field("name") + ": unknown experiment '" + c.experiment.name + "'");
      }
    }
    if (c.experiment.seeds.empty()) throw ConfigError(e.field("seeds") + ": must be nonempty");
  }
  if (r.has("out")) c.out = r.required<std::string>("out");
  r.finish();
  return c;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ConfigError("cannot open config file " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(f);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("config file " + path.string() + " is not valid JSON: " + e.what());
  }
  return parse_run_config(j, path.parent_path());
}

}  // namespace adpr
