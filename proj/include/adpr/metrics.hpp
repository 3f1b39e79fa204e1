#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "adpr/dataset.hpp"
#include "adpr/model.hpp"
#include "adpr/trainer.hpp"

namespace adpr {

/// Higher score means "more likely genuine".
struct ScoreRecord {
  double score = 0.0;
  bool genuine = false;
};
using ScoreSet = std::vector<ScoreRecord>;

struct RocPoint {
  double far = 0.0;
  double tar = 0.0;
};
/// Anchored at (0,0) and (1,1); both coordinates non-decreasing.
using RocCurve = std::vector<RocPoint>;

inline std::pair<std::size_t, std::size_t> count_records(const ScoreSet& scores) {
  std::size_t g = 0;
  for (const auto& r : scores) g += r.genuine;
  return {g, scores.size() - g};
}

/// One operating point per distinct score t, accepting every record with score >= t.
inline RocCurve roc(const ScoreSet& scores) {
  const auto [n_gen, n_imp] = count_records(scores);
  if (n_gen == 0 || n_imp == 0) throw std::invalid_argument("roc: needs at least one genuine and one impostor record");
  for (const auto& r : scores) {
    if (!std::isfinite(r.score)) throw std::invalid_argument("roc: non-finite score");
  }
  ScoreSet sorted = scores;
  std::stable_sort(sorted.begin(), sorted.end(), [](const ScoreRecord& a, const ScoreRecord& b) { return a.score > b.score; });
  RocCurve curve{{0.0, 0.0}};
  std::size_t tp = 0, fp = 0;
  for (std::size_t i = 0; i < sorted.size();) {
    const double t = sorted[i].score;
    for (; i < sorted.size() && sorted[i].score == t; ++i) (sorted[i].genuine ? tp : fp)++;
    curve.push_back({static_cast<double>(fp) / static_cast<double>(n_imp), static_cast<double>(tp) / static_cast<double>(n_gen)});
  }
  return curve;
}

/// Trapezoidal area under (FAR, TAR).
inline double auc(const RocCurve& curve) {
  double a = 0.0;
  for (std::size_t i = 1; i < curve.size(); ++i) {
    a += (curve[i].far - curve[i - 1].far) * (curve[i].tar + curve[i - 1].tar) * 0.5;
  }
  return a;
}

/// FAR where FAR == 1 - TAR, linearly interpolated on the first ROC segment
/// that reaches the anti-diagonal.
inline double eer(const RocCurve& curve) {
  if (curve.size() < 2) throw std::invalid_argument("eer: curve needs at least two points");
  auto gap = [](const RocPoint& p) { return p.far + p.tar - 1.0; };
  for (std::size_t i = 0; i + 1 < curve.size(); ++i) {
    const double g0 = gap(curve[i]), g1 = gap(curve[i + 1]);
    if (g0 >= 0.0) return curve[i].far;
    if (g1 >= 0.0) {
      const double alpha = -g0 / (g1 - g0);
      return curve[i].far + alpha * (curve[i + 1].far - curve[i].far);
    }
  }
  return curve.back().far;
}

struct VerificationSummary {
  double auc = 0.0;
  double eer = 0.0;
  std::optional<double> rank1;
  std::size_t n_genuine = 0;
  std::size_t n_impostor = 0;
};

inline void to_json(nlohmann::json& j, const VerificationSummary& s) {
  j = nlohmann::json{{"auc", s.auc}, {"eer", s.eer}, {"rank1", nullptr}, {"n_genuine", s.n_genuine}, {"n_impostor", s.n_impostor}};
  if (s.rank1) j["rank1"] = *s.rank1;
}

inline VerificationSummary summarize(const ScoreSet& scores) {
  const RocCurve curve = roc(scores);
  const auto [g, i] = count_records(scores);
  return {auc(curve), eer(curve), std::nullopt, g, i};
}

/// Which impostor claims each evaluation sample receives.
struct ClaimPolicy {
  /// Unset: every other class. Otherwise this many distinct random classes.
  std::optional<std::size_t> impostors_per_sample;
  std::uint64_t seed = 0;
};

/// Closed-world verification: the score of claim c for a sample is softmax(logits)[c].
inline ScoreSet closed_world_scores(const ParamStore<float>& params, const PreparedSet& eval,
                                    IdentityHead head = IdentityHead::jpr, const ClaimPolicy& claims = {}) {
  const std::size_t classes = params.config().classes;
  for (std::size_t label : eval.labels) {
    if (label >= classes) throw std::out_of_range("closed_world_scores: claim " + std::to_string(label) + " >= C");
  }
  if (claims.impostors_per_sample && *claims.impostors_per_sample >= classes) {
    throw std::invalid_argument("closed_world_scores: more impostor claims than other classes");
  }
  ScoreSet out;
  Rng rng(derive_seed(claims.seed, 0x636c61696dULL));
  forward_chunked(params, eval.images, 64, [&](const ForwardTaps<Tensor<float>>& t, std::size_t start) {
    const Tensor<float> probs = softmax_rows(head == IdentityHead::pr ? t.pr_logits : t.jpr_logits);
    for (std::size_t i = 0; i < probs.dim(0); ++i) {
      const std::size_t truth = eval.labels[start + i];
      out.push_back({static_cast<double>(probs[i * classes + truth]), true});
      std::vector<std::size_t> others;
      for (std::size_t c = 0; c < classes; ++c) {
        if (c != truth) others.push_back(c);
      }
      if (claims.impostors_per_sample) {
        rng.shuffle(others.begin(), others.end());
        others.resize(*claims.impostors_per_sample);
        std::sort(others.begin(), others.end());
      }
      for (std::size_t c : others) out.push_back({static_cast<double>(probs[i * classes + c]), false});
    }
  });
  return out;
}

/// -||a - b||^2 between two embedding rows.
inline double embedding_score(const Tensor<float>& emb, std::size_t a, std::size_t b) {
  const std::size_t d = emb.dim(1);
  double s = 0.0;
  for (std::size_t q = 0; q < d; ++q) {
    const double diff = static_cast<double>(emb[a * d + q]) - static_cast<double>(emb[b * d + q]);
    s += diff * diff;
  }
  return -s;
}

/// Embeddings for every image of a prepared set, in chunks.
inline Tensor<float> embed_all(const ParamStore<float>& params, const PreparedSet& data, std::size_t chunk = 64) {
  Tensor<float> out({data.size(), params.config().jpr_fc_size});
  forward_chunked(params, data.images, chunk, [&](const ForwardTaps<Tensor<float>>& t, std::size_t start) {
    std::copy_n(t.jpr_feat.data(), t.jpr_feat.size(), out.data() + start * t.jpr_feat.dim(1));
  });
  return out;
}

inline ScoreSet scores_from_embeddings(const Tensor<float>& emb, const PairBatch& pairs) {
  ScoreSet out;
  out.reserve(pairs.size());
  for (const Pair& p : pairs) out.push_back({embedding_score(emb, p.i, p.j), p.c == 0});
  return out;
}

/// Open-world verification: the score of a pair is -||z_i - z_j||^2 on the embedding.
inline ScoreSet open_world_scores(const ParamStore<float>& params, const PreparedSet& eval, const PairBatch& pairs) {
  for (const Pair& p : pairs) {
    if (p.i >= eval.size() || p.j >= eval.size()) throw std::out_of_range("open_world_scores: pair index out of range");
  }
  return scores_from_embeddings(embed_all(params, eval), pairs);
}

/// CMC from a [probes x gallery] score matrix. A probe's rank is one plus the
/// number of distinct identities whose best gallery entry precedes the first
/// entry of its own identity (score descending, ties to the lower gallery index).
/// Returns accuracies for ranks 1..(number of gallery identities).
inline std::vector<double> cmc(const std::vector<std::vector<double>>& scores, const std::vector<std::size_t>& gallery_ids,
                               const std::vector<std::size_t>& probe_ids) {
  if (scores.size() != probe_ids.size()) throw std::invalid_argument("cmc: score rows must match probe count");
  const std::set<std::size_t> identities(gallery_ids.begin(), gallery_ids.end());
  std::vector<std::size_t> hits(identities.size() + 1, 0);
  for (std::size_t p = 0; p < probe_ids.size(); ++p) {
    if (!identities.contains(probe_ids[p])) {
      throw std::invalid_argument("cmc: probe " + std::to_string(p) + " identity is absent from the gallery");
    }
    const auto& row = scores[p];
    if (row.size() != gallery_ids.size()) throw std::invalid_argument("cmc: score row length must match gallery size");
    // Best entry of the true identity.
    std::size_t best = gallery_ids.size();
    for (std::size_t g = 0; g < row.size(); ++g) {
      if (gallery_ids[g] == probe_ids[p] && (best == gallery_ids.size() || row[g] > row[best])) best = g;
    }
    std::set<std::size_t> ahead;
    for (std::size_t g = 0; g < row.size(); ++g) {
      if (gallery_ids[g] == probe_ids[p]) continue;
      if (row[g] > row[best] || (row[g] == row[best] && g < best)) ahead.insert(gallery_ids[g]);
    }
    hits[ahead.size() + 1]++;
  }
  std::vector<double> curve(identities.size());
  std::size_t cum = 0;
  for (std::size_t r = 1; r <= identities.size(); ++r) {
    cum += hits[r];
    curve[r - 1] = probe_ids.empty() ? 0.0 : static_cast<double>(cum) / static_cast<double>(probe_ids.size());
  }
  return curve;
}

enum class RankMode { embedding, softmax };

/// Identification CMC of probes against a gallery.
/// embedding: gallery images ranked by -||z_probe - z_gallery||^2.
/// softmax:   classes ranked by softmax(jpr_logits) of the probe (gallery gives the class set).
inline std::vector<double> cmc(const ParamStore<float>& params, const PreparedSet& gallery, const PreparedSet& probes,
                               RankMode mode = RankMode::embedding) {
  std::vector<std::vector<double>> scores;
  std::vector<std::size_t> gallery_ids;
  if (mode == RankMode::embedding) {
    const Tensor<float> g = embed_all(params, gallery);
    const Tensor<float> p = embed_all(params, probes);
    const std::size_t d = g.dim(1);
    gallery_ids = gallery.labels;
    for (std::size_t i = 0; i < probes.size(); ++i) {
      std::vector<double> row(gallery.size());
      for (std::size_t j = 0; j < gallery.size(); ++j) {
        double s = 0.0;
        for (std::size_t q = 0; q < d; ++q) {
          const double diff = static_cast<double>(p[i * d + q]) - static_cast<double>(g[j * d + q]);
          s += diff * diff;
        }
        row[j] = -s;
      }
      scores.push_back(std::move(row));
    }
  } else {
    const std::set<std::size_t> classes(gallery.labels.begin(), gallery.labels.end());
    gallery_ids.assign(classes.begin(), classes.end());
    const std::size_t c = params.config().classes;
    forward_chunked(params, probes.images, 64, [&](const ForwardTaps<Tensor<float>>& t, std::size_t) {
      const Tensor<float> probs = softmax_rows(t.jpr_logits);
      for (std::size_t i = 0; i < probs.dim(0); ++i) {
        std::vector<double> row;
        for (std::size_t cls : gallery_ids) row.push_back(static_cast<double>(probs[i * c + cls]));
        scores.push_back(std::move(row));
      }
    });
  }
  return cmc(scores, gallery_ids, probes.labels);
}

inline double rank1(const ParamStore<float>& params, const PreparedSet& gallery, const PreparedSet& probes,
                    RankMode mode = RankMode::embedding) {
  const auto curve = cmc(params, gallery, probes, mode);
  return curve.empty() ? 0.0 : curve.front();
}

/// Shortest decimal form that parses back to the same double.
inline std::string format_double(double v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

inline void write_scores_csv(const std::string& path, const ScoreSet& scores) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + path);
  f << "score,genuine\n";
  for (const auto& r : scores) f << format_double(r.score) << ',' << (r.genuine ? 1 : 0) << '\n';
}

inline ScoreSet read_scores_csv(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot read " + path);
  std::string line;
  ScoreSet out;
  std::size_t lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.empty() || (lineno == 1 && line.rfind("score", 0) == 0)) continue;
    const auto comma = line.find(',');
    if (comma == std::string::npos) throw std::runtime_error(path + ":" + std::to_string(lineno) + ": expected score,genuine");
    try {
      const double s = std::stod(line.substr(0, comma));
      const int g = std::stoi(line.substr(comma + 1));
      if (g != 0 && g != 1) throw std::invalid_argument("genuine flag");
      out.push_back({s, g == 1});
    } catch (const std::exception&) {
      throw std::runtime_error(path + ":" + std::to_string(lineno) + ": malformed record '" + line + "'");
    }
  }
  return out;
}

inline void write_roc_csv(const std::string& path, const RocCurve& curve) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + path);
  f << "far,tar\n";
  for (const auto& p : curve) f << format_double(p.far) << ',' << format_double(p.tar) << '\n';
}

}  // namespace adpr
