#pragma once

// Class scoring on top of text-embedding tables.
//
// A class score is always a weighted sum of temperature-scaled cosine
// similarities between an image embedding and some entries of a text table:
//
//   score(z, y) = sum_t w_t * cos(z, T_t) / tau
//
// The scorer decides which table entries and weights apply to a class
// (k nearest attributes, all of them, centroids, a random subset, or a single
// label prompt). Keeping that choice explicit as a term list lets the trainer
// freeze a selection for an epoch while still differentiating through the
// similarities.

#include <algorithm>
#include <fstream>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "attrvr/attributes.hpp"
#include "attrvr/encoders.hpp"
#include "attrvr/reprogram.hpp"

namespace attrvr {

enum class Aggregation { knn, max, avg, mean, rnd };

inline std::string_view to_string(Aggregation a) {
  switch (a) {
    case Aggregation::knn: return "knn";
    case Aggregation::max: return "max";
    case Aggregation::avg: return "avg";
    case Aggregation::mean: return "mean";
    case Aggregation::rnd: return "rnd";
  }
  return "?";
}

inline Aggregation parse_aggregation(std::string_view s) {
  if (s == "knn") return Aggregation::knn;
  if (s == "max") return Aggregation::max;
  if (s == "avg") return Aggregation::avg;
  if (s == "mean") return Aggregation::mean;
  if (s == "rnd") return Aggregation::rnd;
  throw ValidationError("unknown aggregation variant '" + std::string(s) + "'");
}

struct ScoreConfig {
  std::size_t k = 3;
  double lambda = 0.5;
  Aggregation variant = Aggregation::knn;
  std::optional<std::uint64_t> rnd_seed;
};

inline void validate(const ScoreConfig& cfg, std::size_t m) {
  if (cfg.k < 1 || cfg.k > m) {
    throw ValidationError(detail::concat("k=", cfg.k, " must satisfy 1 <= k <= m=", m));
  }
  if (!(cfg.lambda >= 0.0 && cfg.lambda <= 1.0)) {
    throw ValidationError(detail::concat("lambda=", cfg.lambda, " must lie in [0, 1]"));
  }
  if (cfg.variant == Aggregation::rnd && !cfg.rnd_seed) {
    throw ValidationError("the rnd aggregation needs rnd_seed for reproducibility");
  }
}

/// Indices of the k largest values, in descending order; ties go to the lower index.
inline std::vector<std::size_t> knn_select(std::span<const double> sims, std::size_t k) {
  if (k > sims.size()) {
    throw ValidationError(detail::concat("k=", k, " exceeds the ", sims.size(), " candidates"));
  }
  if (!all_finite(sims)) throw NumericError("knn_select received non-finite similarities");
  std::vector<std::size_t> idx(sims.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(),
                    [&](std::size_t a, std::size_t b) {
                      return sims[a] > sims[b] || (sims[a] == sims[b] && a < b);
                    });
  idx.resize(k);
  return idx;
}

/// Identifies the sample and epoch a score is computed for; only the rnd variant uses it.
struct ScoreContext {
  std::uint64_t epoch = 0;
  std::uint64_t sample_id = 0;
};

struct ScoreTerm {
  std::size_t text = 0;
  double weight = 0.0;
};

class ClassScorer {
 public:
  virtual ~ClassScorer() = default;
  virtual std::string name() const = 0;
  virtual std::size_t num_classes() const = 0;
  virtual const std::vector<Embedding>& texts() const = 0;
  virtual double temperature() const = 0;
  virtual std::vector<ScoreTerm> select(std::span<const double> sims, std::size_t cls,
                                        const ScoreContext& ctx) const = 0;

  /// cos(z, T_t) / tau for every table entry.
  std::vector<double> text_sims(std::span<const double> z) const {
    const auto& table = texts();
    std::vector<double> out(table.size());
    const double tau = temperature();
    for (std::size_t t = 0; t < table.size(); ++t) out[t] = cosine(z, table[t]) / tau;
    return out;
  }

  static double combine(std::span<const double> sims, std::span<const ScoreTerm> terms) {
    double s = 0.0;
    for (const auto& term : terms) s += term.weight * sims[term.text];
    return s;
  }

  std::vector<std::vector<ScoreTerm>> select_all(std::span<const double> sims,
                                                 const ScoreContext& ctx) const {
    std::vector<std::vector<ScoreTerm>> out(num_classes());
    for (std::size_t c = 0; c < out.size(); ++c) out[c] = select(sims, c, ctx);
    return out;
  }

  std::vector<double> class_scores(std::span<const double> z, const ScoreContext& ctx = {}) const {
    const auto sims = text_sims(z);
    std::vector<double> scores(num_classes());
    for (std::size_t c = 0; c < scores.size(); ++c) scores[c] = combine(sims, select(sims, c, ctx));
    return scores;
  }
};

/// Which attributes a sample selected for one class.
struct SelectionEntry {
  std::vector<std::size_t> des;
  std::vector<double> des_sims;
  std::vector<std::size_t> dist;
  std::vector<double> dist_sims;
  friend bool operator==(const SelectionEntry&, const SelectionEntry&) = default;
};

/// Attribute-based scorer over a bank with precomputed embeddings.
class AttributeScorer final : public ClassScorer {
 public:
  AttributeScorer(const AttributeBank& bank, ScoreConfig cfg, double temperature)
      : cfg_(cfg), m_(bank.m), classes_(bank.num_classes()), tau_(temperature) {
    validate(cfg_, m_);
    if (!bank.embeddings) throw StateError("attribute bank embeddings have not been precomputed");
    if (!(tau_ > 0.0)) throw ValidationError("temperature must be positive");
    with_centroids_ = cfg_.variant == Aggregation::mean;
    stride_ = 2 * m_ + (with_centroids_ ? 2 : 0);
    table_.reserve(stride_ * classes_);
    for (std::size_t c = 0; c < classes_; ++c) {
      const auto& des = bank.embeddings_of(c, AttrKind::des);
      const auto& dist = bank.embeddings_of(c, AttrKind::dist);
      table_.insert(table_.end(), des.begin(), des.end());
      table_.insert(table_.end(), dist.begin(), dist.end());
      if (with_centroids_) {
        table_.push_back(centroid(des));
        table_.push_back(centroid(dist));
      }
    }
  }

  std::string name() const override { return "attr"; }
  std::size_t num_classes() const override { return classes_; }
  const std::vector<Embedding>& texts() const override { return table_; }
  double temperature() const override { return tau_; }
  const ScoreConfig& config() const noexcept { return cfg_; }
  std::size_t m() const noexcept { return m_; }

  std::vector<ScoreTerm> select(std::span<const double> sims, std::size_t cls,
                                const ScoreContext& ctx) const override {
    const std::size_t des_off = cls * stride_;
    const std::size_t dist_off = des_off + m_;
    const double lam = cfg_.lambda;
    std::vector<ScoreTerm> terms;
    auto add_group = [&](std::size_t off, const std::vector<std::size_t>& picked, double w) {
      for (std::size_t i : picked) terms.push_back({off + i, w});
    };
    switch (cfg_.variant) {
      case Aggregation::knn:
      case Aggregation::max: {
        const std::size_t k = cfg_.variant == Aggregation::max ? 1 : cfg_.k;
        add_group(des_off, knn_select(sims.subspan(des_off, m_), k), lam / static_cast<double>(k));
        add_group(dist_off, knn_select(sims.subspan(dist_off, m_), k),
                  (1.0 - lam) / static_cast<double>(k));
        break;
      }
      case Aggregation::avg: {
        std::vector<std::size_t> all(m_);
        std::iota(all.begin(), all.end(), std::size_t{0});
        add_group(des_off, all, lam / static_cast<double>(m_));
        add_group(dist_off, all, (1.0 - lam) / static_cast<double>(m_));
        break;
      }
      case Aggregation::mean:
        terms.push_back({des_off + 2 * m_, lam});
        terms.push_back({des_off + 2 * m_ + 1, 1.0 - lam});
        break;
      case Aggregation::rnd: {
        const double w = 1.0 / static_cast<double>(cfg_.k);
        add_group(des_off, random_picks(cls, AttrKind::des, ctx), lam * w);
        add_group(dist_off, random_picks(cls, AttrKind::dist, ctx), (1.0 - lam) * w);
        break;
      }
    }
    return terms;
  }

  /// The seeded draw used by the rnd variant, exposed for inspection.
  std::vector<std::size_t> random_picks(std::size_t cls, AttrKind kind, const ScoreContext& ctx) const {
    Rng rng(derive_seed(cfg_.rnd_seed.value_or(0), cls, kind == AttrKind::des ? 0 : 1, ctx.epoch,
                        ctx.sample_id));
    return rng.sample_without_replacement(m_, cfg_.k);
  }

  /// Decodes a term list back into bank indices. Centroid terms report index m.
  SelectionEntry describe(std::span<const double> sims, std::size_t cls,
                          std::span<const ScoreTerm> terms) const {
    SelectionEntry e;
    const std::size_t off = cls * stride_;
    for (const auto& t : terms) {
      const std::size_t local = t.text - off;
      if (local < m_) {
        e.des.push_back(local);
        e.des_sims.push_back(sims[t.text]);
      } else if (local < 2 * m_) {
        e.dist.push_back(local - m_);
        e.dist_sims.push_back(sims[t.text]);
      } else if (local == 2 * m_) {
        e.des.push_back(m_);
        e.des_sims.push_back(sims[t.text]);
      } else {
        e.dist.push_back(m_);
        e.dist_sims.push_back(sims[t.text]);
      }
    }
    return e;
  }

 private:
  static Embedding centroid(const std::vector<Embedding>& rows) {
    Embedding c(rows.front().size(), 0.0);
    for (const auto& r : rows) {
      for (std::size_t i = 0; i < c.size(); ++i) c[i] += r[i];
    }
    for (double& v : c) v /= static_cast<double>(rows.size());
    return c;
  }

  ScoreConfig cfg_;
  std::size_t m_;
  std::size_t classes_;
  double tau_;
  bool with_centroids_ = false;
  std::size_t stride_ = 0;
  std::vector<Embedding> table_;
};

inline constexpr std::string_view kDefaultTemplate = "This is a photo of {label}";

/// Fills "{label}" in the template, or appends the label when there is no placeholder.
inline std::string template_prompt(std::string_view tmpl, std::string_view label) {
  const auto pos = tmpl.find("{label}");
  if (pos == std::string_view::npos) return detail::concat(tmpl, " ", label);
  return detail::concat(tmpl.substr(0, pos), label, tmpl.substr(pos + 7));
}

/// Label-based scorer: one template prompt per class.
class LabelScorer final : public ClassScorer {
 public:
  LabelScorer(const EncoderBackend& backend, const std::vector<std::string>& class_names,
              std::string_view tmpl = kDefaultTemplate)
      : tau_(backend.temperature()) {
    if (class_names.empty()) throw ValidationError("label scorer needs at least one class");
    for (const auto& name : class_names) prompts_.push_back(template_prompt(tmpl, name));
    table_ = embed_texts(backend, prompts_);
  }

  std::string name() const override { return "label"; }
  std::size_t num_classes() const override { return table_.size(); }
  const std::vector<Embedding>& texts() const override { return table_; }
  double temperature() const override { return tau_; }
  const std::vector<std::string>& prompts() const noexcept { return prompts_; }

  std::vector<ScoreTerm> select(std::span<const double>, std::size_t cls,
                                const ScoreContext&) const override {
    return {{cls, 1.0}};
  }

 private:
  double tau_;
  std::vector<std::string> prompts_;
  std::vector<Embedding> table_;
};

// ---------------------------------------------------------------------------
// Free-function entry points
// ---------------------------------------------------------------------------

/// Weighted k-nearest attribute similarity of one class.
inline double sim_attr(std::span<const double> image_embedding, std::size_t cls,
                       const AttributeBank& bank, const ScoreConfig& cfg, double temperature,
                       const ScoreContext& ctx = {}) {
  if (cfg.variant != Aggregation::knn) throw ValidationError("sim_attr expects the knn variant");
  if (cls >= bank.num_classes()) throw ValidationError("class id out of range");
  AttributeScorer scorer(bank, cfg, temperature);
  const auto sims = scorer.text_sims(image_embedding);
  return ClassScorer::combine(sims, scorer.select(sims, cls, ctx));
}

/// Aggregation-study scores (max, avg, mean, rnd).
inline double score_variant(std::span<const double> image_embedding, std::size_t cls,
                            const AttributeBank& bank, const ScoreConfig& cfg, double temperature,
                            const ScoreContext& ctx = {}) {
  if (cfg.variant == Aggregation::knn) {
    throw ValidationError("score_variant expects max, avg, mean or rnd; use sim_attr for knn");
  }
  if (cls >= bank.num_classes()) throw ValidationError("class id out of range");
  AttributeScorer scorer(bank, cfg, temperature);
  const auto sims = scorer.text_sims(image_embedding);
  return ClassScorer::combine(sims, scorer.select(sims, cls, ctx));
}

struct Prediction {
  std::size_t label = 0;
  std::vector<double> scores;
  std::vector<double> probabilities;
};

inline Prediction predict(const ClassScorer& scorer, std::span<const double> z,
                          const ScoreContext& ctx = {}) {
  Prediction p;
  p.scores = scorer.class_scores(z, ctx);
  p.probabilities = class_probabilities(p.scores);
  p.label = argmax(p.scores);
  return p;
}

/// Zero-shot attribute classification: the image is resized to the backend input
/// and scored against the bank without any pattern.
inline Prediction attrzs_predict(const Tensor& image, const AttributeBank& bank, const ScoreConfig& cfg,
                                 const EncoderBackend& backend, const ScoreContext& ctx = {}) {
  const Shape3 in = backend.input_shape();
  if (image.channels() != in.channels) throw GeometryError("image channel count differs from backend");
  const Tensor resized =
      image.shape() == in ? image : resize_bilinear(image, in.height, in.width);
  AttributeScorer scorer(bank, cfg, backend.temperature());
  return predict(scorer, backend.encode_image(resized), ctx);
}

// ---------------------------------------------------------------------------
// Selection traces
// ---------------------------------------------------------------------------

struct SelectionTrace {
  std::uint64_t epoch = 0;
  std::vector<std::uint64_t> sample_ids;
  std::vector<std::vector<SelectionEntry>> entries;  // [sample][class]
  friend bool operator==(const SelectionTrace&, const SelectionTrace&) = default;
};

/// One JSON object per (sample, class, kind): {epoch, sample_id, class, kind, indices, sims}.
inline void write_trace_jsonl(std::ostream& out, const SelectionTrace& trace,
                              const std::vector<std::string>& class_names) {
  for (std::size_t s = 0; s < trace.entries.size(); ++s) {
    for (std::size_t c = 0; c < trace.entries[s].size(); ++c) {
      const auto& e = trace.entries[s][c];
      const std::string cls = c < class_names.size() ? class_names[c] : std::to_string(c);
      for (int kind = 0; kind < 2; ++kind) {
        nlohmann::json row{{"epoch", trace.epoch},
                           {"sample_id", trace.sample_ids.at(s)},
                           {"class", cls},
                           {"kind", kind == 0 ? "des" : "dist"},
                           {"indices", kind == 0 ? e.des : e.dist},
                           {"sims", kind == 0 ? e.des_sims : e.dist_sims}};
        out << row.dump() << '\n';
      }
    }
  }
}

}  // namespace attrvr
