#pragma once

// Class separability of labeled embedding sets, attribute frequency statistics
// and an empirical checker for the attribute-vs-label separability lemmas on a
// synthetic embedding generator.

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "attrvr/core.hpp"
#include "attrvr/encoders.hpp"
#include "attrvr/scoring.hpp"

namespace attrvr {

class LabeledEmbeddingSet {
 public:
  LabeledEmbeddingSet(std::vector<Embedding> x, std::vector<std::size_t> labels, std::size_t num_classes)
      : x_(std::move(x)), labels_(std::move(labels)), k_(num_classes) {
    if (x_.size() != labels_.size()) throw ValidationError("embeddings and labels differ in length");
    if (x_.empty()) throw ValidationError("embedding set is empty");
    const std::size_t d = x_.front().size();
    if (d == 0) throw ValidationError("embeddings have zero dimension");
    counts_.assign(k_, 0);
    for (std::size_t i = 0; i < x_.size(); ++i) {
      if (x_[i].size() != d) throw ValidationError(detail::concat("embedding #", i, " has dimension ", x_[i].size()));
      if (labels_[i] >= k_) throw ValidationError(detail::concat("label ", labels_[i], " out of range"));
      ++counts_[labels_[i]];
    }
    for (std::size_t c = 0; c < k_; ++c) {
      if (counts_[c] == 0) throw ValidationError(detail::concat("class ", c, " has no samples"));
    }
    means_.assign(k_, Embedding(d, 0.0));
    for (std::size_t i = 0; i < x_.size(); ++i) {
      auto& m = means_[labels_[i]];
      for (std::size_t j = 0; j < d; ++j) m[j] += x_[i][j];
    }
    for (std::size_t c = 0; c < k_; ++c) {
      for (double& v : means_[c]) v /= static_cast<double>(counts_[c]);
    }
    traces_.assign(k_, 0.0);
    for (std::size_t i = 0; i < x_.size(); ++i) {
      const auto& m = means_[labels_[i]];
      double s = 0.0;
      for (std::size_t j = 0; j < d; ++j) s += (x_[i][j] - m[j]) * (x_[i][j] - m[j]);
      traces_[labels_[i]] += s;
    }
    for (std::size_t c = 0; c < k_; ++c) traces_[c] /= static_cast<double>(counts_[c]);
  }

  std::size_t size() const noexcept { return x_.size(); }
  std::size_t dim() const noexcept { return x_.front().size(); }
  std::size_t num_classes() const noexcept { return k_; }
  const std::vector<Embedding>& embeddings() const noexcept { return x_; }
  const std::vector<std::size_t>& labels() const noexcept { return labels_; }
  const std::vector<std::size_t>& counts() const noexcept { return counts_; }
  const std::vector<Embedding>& means() const noexcept { return means_; }
  /// Tr of the (population) covariance per class: mean squared distance to the class mean.
  const std::vector<double>& traces() const noexcept { return traces_; }

 private:
  std::vector<Embedding> x_;
  std::vector<std::size_t> labels_;
  std::size_t k_;
  std::vector<std::size_t> counts_;
  std::vector<Embedding> means_;
  std::vector<double> traces_;
};

inline double squared_distance(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return s;
}

struct CsResult {
  double cs = 0.0;
  double mean_intra = 0.0;
  double mean_inter = 0.0;
  std::vector<double> intra;               // per class trace
  std::vector<std::vector<double>> inter;  // squared distances between class means
};

inline CsResult cs(const LabeledEmbeddingSet& set) {
  const std::size_t k = set.num_classes();
  if (k < 2) throw ValidationError("class separability needs at least two classes");
  CsResult r;
  r.intra = set.traces();
  r.inter.assign(k, std::vector<double>(k, 0.0));
  for (double t : r.intra) r.mean_intra += t;
  r.mean_intra /= static_cast<double>(k);
  double total = 0.0;
  for (std::size_t a = 0; a < k; ++a) {
    for (std::size_t b = 0; b < k; ++b) {
      if (a == b) continue;
      r.inter[a][b] = squared_distance(set.means()[a], set.means()[b]);
      total += r.inter[a][b];
    }
  }
  r.mean_inter = total / static_cast<double>(k * (k - 1));
  r.cs = r.mean_inter - r.mean_intra;
  return r;
}

// ---------------------------------------------------------------------------
// Attribute indicators and frequencies
// ---------------------------------------------------------------------------

struct AttributeIndicatorTable {
  std::vector<std::vector<std::uint8_t>> f;  // [sample][attribute]
  std::vector<double> thresholds;            // per attribute

  std::size_t samples() const noexcept { return f.size(); }
  std::size_t attributes() const noexcept { return thresholds.size(); }
};

inline double median(std::vector<double> v) {
  if (v.empty()) throw ValidationError("median of an empty list");
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

/// f_a(x) = [sims[x][a] > theta_a]; theta_a is the median of column a unless given.
inline AttributeIndicatorTable indicator_table(const std::vector<std::vector<double>>& sims,
                                               std::optional<std::vector<double>> thresholds = {}) {
  if (sims.empty()) throw ValidationError("similarity table is empty");
  const std::size_t na = sims.front().size();
  for (const auto& row : sims) {
    if (row.size() != na) throw ValidationError("similarity table is ragged");
  }
  AttributeIndicatorTable t;
  if (thresholds) {
    if (thresholds->size() != na) throw ValidationError("one threshold per attribute required");
    t.thresholds = *thresholds;
  } else {
    t.thresholds.resize(na);
    std::vector<double> col(sims.size());
    for (std::size_t a = 0; a < na; ++a) {
      for (std::size_t i = 0; i < sims.size(); ++i) col[i] = sims[i][a];
      t.thresholds[a] = median(col);
    }
  }
  t.f.assign(sims.size(), std::vector<std::uint8_t>(na, 0));
  for (std::size_t i = 0; i < sims.size(); ++i) {
    for (std::size_t a = 0; a < na; ++a) t.f[i][a] = sims[i][a] > t.thresholds[a] ? 1 : 0;
  }
  return t;
}

struct AttributeFrequencies {
  std::vector<std::vector<double>> U;  // [class][attribute]
  std::vector<std::vector<double>> V;
};

/// U_y(a): share of class-y samples where a is identified. V_y(a): one minus the
/// share of other-class samples where it is identified (1 when no other samples exist).
inline AttributeFrequencies attr_frequencies(const AttributeIndicatorTable& table,
                                             std::span<const std::size_t> labels, std::size_t num_classes) {
  if (labels.size() != table.samples()) throw ValidationError("indicator table does not cover all samples");
  const std::size_t na = table.attributes();
  std::vector<std::size_t> count(num_classes, 0);
  std::vector<std::vector<double>> hits(num_classes, std::vector<double>(na, 0.0));
  std::vector<double> total(na, 0.0);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] >= num_classes) throw ValidationError(detail::concat("label ", labels[i], " out of range"));
    ++count[labels[i]];
    for (std::size_t a = 0; a < na; ++a) {
      hits[labels[i]][a] += table.f[i][a];
      total[a] += table.f[i][a];
    }
  }
  AttributeFrequencies out;
  out.U.assign(num_classes, std::vector<double>(na, 0.0));
  out.V.assign(num_classes, std::vector<double>(na, 1.0));
  const std::size_t n = labels.size();
  for (std::size_t y = 0; y < num_classes; ++y) {
    if (count[y] == 0) throw ValidationError(detail::concat("class ", y, " has no samples"));
    const std::size_t others = n - count[y];
    for (std::size_t a = 0; a < na; ++a) {
      out.U[y][a] = hits[y][a] / static_cast<double>(count[y]);
      if (others > 0) out.V[y][a] = 1.0 - (total[a] - hits[y][a]) / static_cast<double>(others);
    }
  }
  return out;
}

/// Indices of the m highest scores, descending, ties to the lower index.
inline std::vector<std::size_t> top_m_by(std::span<const double> scores, std::size_t m) {
  return knn_select(scores, m);
}

// ---------------------------------------------------------------------------
// Embedding matrix export (float64 little-endian rows + label sidecar)
// ---------------------------------------------------------------------------

struct EmbeddingExport {
  std::filesystem::path matrix;
  std::filesystem::path labels;
  std::filesystem::path manifest;
};

inline EmbeddingExport write_embeddings(const std::filesystem::path& dir, std::string_view stem,
                                        const std::vector<Embedding>& rows,
                                        const std::vector<std::size_t>& labels,
                                        const std::vector<std::string>& class_names,
                                        const nlohmann::json& extra = nlohmann::json::object()) {
  if (rows.size() != labels.size()) throw ValidationError("rows and labels differ in length");
  std::filesystem::create_directories(dir);
  EmbeddingExport out{dir / (std::string(stem) + ".f64"), dir / (std::string(stem) + ".labels.txt"),
                      dir / (std::string(stem) + ".manifest.json")};
  const std::size_t d = rows.empty() ? 0 : rows.front().size();
  {
    std::ofstream f(out.matrix, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot write " + out.matrix.string());
    for (const auto& r : rows) {
      if (r.size() != d) throw ValidationError("ragged embedding rows");
      for (double v : r) {
        std::uint64_t bits = 0;
        std::memcpy(&bits, &v, sizeof bits);
        char b[8];
        for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((bits >> (8 * i)) & 0xffU);
        f.write(b, 8);
      }
    }
    if (!f) throw IoError("short write to " + out.matrix.string());
  }
  {
    std::ofstream f(out.labels, std::ios::trunc);
    if (!f) throw IoError("cannot write " + out.labels.string());
    for (std::size_t l : labels) f << l << '\n';
  }
  nlohmann::json m{{"rows", rows.size()},
                   {"dim", d},
                   {"dtype", "float64-le"},
                   {"matrix", out.matrix.filename().string()},
                   {"labels", out.labels.filename().string()},
                   {"classes", class_names}};
  for (const auto& [key, value] : extra.items()) m[key] = value;
  std::ofstream f(out.manifest, std::ios::trunc);
  if (!f) throw IoError("cannot write " + out.manifest.string());
  f << m.dump(2) << '\n';
  return out;
}

inline std::vector<Embedding> read_embedding_matrix(const std::filesystem::path& path, std::size_t dim) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot read " + path.string());
  std::vector<char> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  if (dim == 0 || bytes.size() % (8 * dim) != 0) throw ParseError("", "matrix size is not a multiple of the row size");
  std::vector<Embedding> rows(bytes.size() / (8 * dim), Embedding(dim));
  std::size_t p = 0;
  for (auto& r : rows) {
    for (double& v : r) {
      std::uint64_t bits = 0;
      for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[p++])) << (8 * i);
      std::memcpy(&v, &bits, sizeof v);
    }
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Lemma checker
// ---------------------------------------------------------------------------

struct LemmaConfig {
  std::size_t classes = 5;
  std::size_t samples_per_class = 40;
  std::size_t dim = 64;
  std::size_t pool_per_class = 16;  // candidate attributes generated per class
  std::size_t n_des = 12;           // |A_des(y)|
  std::size_t n_dist = 12;          // |A_dist(y)|
  double noise = 0.7;               // per-dimension std of raw image embeddings around unit class centres
  double attr_spread = 1.0;         // norm of the random offset of each attribute embedding
  double label_class_part = 0.15;   // class-specific part of label prompt embeddings
  double pull = 0.3;                // per-step pull of an embedding toward its text target
  std::size_t steps = 3;
  double push = 0.1;                // DistAttr push away from other classes' DistAttr centres
  double lambda = 0.5;
  std::uint64_t seed = 0;
  bool degenerate = false;          // attribute pull = label pull
};

inline nlohmann::json to_json(const LemmaConfig& c) {
  return {{"classes", c.classes}, {"samples_per_class", c.samples_per_class},
          {"dim", c.dim},         {"pool_per_class", c.pool_per_class},
          {"n_des", c.n_des},     {"n_dist", c.n_dist},
          {"noise", c.noise},     {"attr_spread", c.attr_spread},
          {"label_class_part", c.label_class_part},
          {"pull", c.pull},       {"steps", c.steps},
          {"push", c.push},       {"lambda", c.lambda},
          {"seed", c.seed},       {"degenerate", c.degenerate}};
}

struct CheckOutcome {
  std::string status;  // "holds", "violated" or "hypothesis_unmet"
  bool strict = false;
  double margin = 0.0;  // smallest slack across the compared quantities
};

struct LemmaReport {
  LemmaConfig config;
  std::vector<double> trace_A;  // per class, DesAttr-driven embeddings
  std::vector<double> trace_L;
  std::vector<std::vector<double>> d_A;  // DistAttr-driven class-mean distances
  std::vector<std::vector<double>> d_L;
  double cs_A = 0.0;  // combined attribute embeddings
  double cs_L = 0.0;
  CheckOutcome lemma1, lemma2, corollary;
  double mild_assumption_fraction = 0.0;
  nlohmann::json to_json() const;
};

inline nlohmann::json to_json(const CheckOutcome& c) {
  return {{"status", c.status}, {"strict", c.strict}, {"margin", c.margin}};
}

inline nlohmann::json LemmaReport::to_json() const {
  return {{"config", attrvr::to_json(config)},
          {"per_class", {{"trace_A", trace_A}, {"trace_L", trace_L}}},
          {"pairs", {{"d_A", d_A}, {"d_L", d_L}}},
          {"cs", {{"A", cs_A}, {"L", cs_L}}},
          {"checks",
           {{"lemma1", attrvr::to_json(lemma1)},
            {"lemma2", attrvr::to_json(lemma2)},
            {"corollary", attrvr::to_json(corollary)}}},
          {"mild_assumption", {{"fraction", mild_assumption_fraction}, {"holds_all", mild_assumption_fraction == 1.0}}}};
}

/// Relative slack absorbed when comparing quantities that are equal in exact arithmetic.
inline constexpr double kLemmaTolerance = 1e-9;

namespace detail {

inline Embedding random_unit(Rng& rng, std::size_t d) {
  Embedding v(d);
  for (double& x : v) x = rng.normal();
  return normalized(v);
}

inline void axpy(double a, std::span<const double> x, std::span<double> y) {
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += a * x[i];
}

inline Embedding mean_of(const std::vector<Embedding>& v, std::size_t d) {
  Embedding m(d, 0.0);
  for (const auto& e : v) axpy(1.0, e, m);
  if (!v.empty()) {
    for (double& x : m) x /= static_cast<double>(v.size());
  }
  return m;
}

inline CheckOutcome compare(double margin, double scale, bool gated_out) {
  CheckOutcome c;
  c.margin = margin;
  if (gated_out) {
    c.status = "hypothesis_unmet";
    return c;
  }
  const double tol = kLemmaTolerance * std::max(1.0, scale);
  c.status = margin >= -tol ? "holds" : "violated";
  c.strict = margin > tol;
  return c;
}

}  // namespace detail

/// Builds paired attribute-driven and label-driven embedding sets for the same
/// samples and compares their per-class spread, class-mean distances and CS.
///
/// Raw image embeddings r(x) = c_y + noise. Candidate attribute embeddings sit
/// near their class centre; DesAttrs/DistAttrs are the top U_y / V_y candidates
/// under a median-threshold indicator on cos(r, t_a). Pulling z toward a target
/// t for `steps` steps of size `pull` gives (1 - eta) z + eta t.
/// Z_L = pull(r, T_L(y)); Z_a(x) = pull(r, t_a) if f_a(x) else the mean of
/// pull(r, t_a) over the identified samples of the class.
inline LemmaReport lemma_check(const LemmaConfig& cfg, std::vector<Embedding>* z_attr = nullptr,
                               std::vector<Embedding>* z_label = nullptr,
                               std::vector<std::size_t>* labels_out = nullptr) {
  if (cfg.classes < 2) throw ValidationError("lemma check needs at least two classes");
  if (cfg.samples_per_class == 0 || cfg.dim == 0) throw ValidationError("empty generator geometry");
  if (cfg.n_des == 0 || cfg.n_dist == 0) throw ValidationError("attribute set sizes must be positive");
  const std::size_t K = cfg.classes;
  const std::size_t d = cfg.dim;
  const std::size_t pool = cfg.pool_per_class * K;
  if (cfg.n_des > pool || cfg.n_dist > pool) throw ValidationError("attribute pool smaller than requested sets");
  if (!(cfg.lambda >= 0.0 && cfg.lambda <= 1.0)) throw ValidationError("lambda must be in [0, 1]");

  Rng rng(derive_seed(cfg.seed, 0x1e33a));
  std::vector<Embedding> centres(K);
  for (auto& c : centres) c = detail::random_unit(rng, d);
  const Embedding shared = detail::random_unit(rng, d);
  std::vector<Embedding> label_text(K);
  for (std::size_t y = 0; y < K; ++y) {
    label_text[y] = shared;
    detail::axpy(cfg.label_class_part, detail::random_unit(rng, d), label_text[y]);
  }

  // Candidate attribute embeddings: half generic to the class, half contrasted with other classes.
  std::vector<Embedding> attr_text(pool);
  for (std::size_t y = 0; y < K; ++y) {
    Embedding others(d, 0.0);
    for (std::size_t o = 0; o < K; ++o) {
      if (o != y) detail::axpy(1.0 / static_cast<double>(K - 1), centres[o], others);
    }
    for (std::size_t j = 0; j < cfg.pool_per_class; ++j) {
      Embedding t = centres[y];
      if (j >= cfg.pool_per_class / 2) detail::axpy(-1.0, others, t);
      detail::axpy(cfg.attr_spread, detail::random_unit(rng, d), t);
      attr_text[y * cfg.pool_per_class + j] = std::move(t);
    }
  }

  std::vector<Embedding> raw;
  std::vector<std::size_t> labels;
  for (std::size_t y = 0; y < K; ++y) {
    for (std::size_t i = 0; i < cfg.samples_per_class; ++i) {
      Embedding r = centres[y];
      for (double& v : r) v += cfg.noise * rng.normal();
      raw.push_back(std::move(r));
      labels.push_back(y);
    }
  }
  const std::size_t N = raw.size();

  std::vector<std::vector<double>> sims(N, std::vector<double>(pool));
  for (std::size_t i = 0; i < N; ++i) {
    for (std::size_t a = 0; a < pool; ++a) sims[i][a] = cosine(raw[i], attr_text[a]);
  }
  AttributeIndicatorTable table = indicator_table(sims);
  const AttributeFrequencies freq = attr_frequencies(table, labels, K);

  const double eta = 1.0 - std::pow(1.0 - cfg.pull, static_cast<double>(cfg.steps));
  auto pulled = [&](const Embedding& r, const Embedding& t) {
    Embedding z(d);
    for (std::size_t j = 0; j < d; ++j) z[j] = (1.0 - eta) * r[j] + eta * t[j];
    return z;
  };

  std::vector<std::vector<std::size_t>> des(K), dist(K);
  for (std::size_t y = 0; y < K; ++y) {
    des[y] = top_m_by(freq.U[y], cfg.n_des);
    dist[y] = top_m_by(freq.V[y], cfg.n_dist);
  }
  if (cfg.degenerate) {
    for (auto& row : table.f) std::fill(row.begin(), row.end(), std::uint8_t{1});
  }
  auto text_of = [&](std::size_t y, std::size_t a) -> const Embedding& {
    return cfg.degenerate ? label_text[y] : attr_text[a];
  };

  std::vector<std::vector<std::size_t>> members(K);
  for (std::size_t i = 0; i < N; ++i) members[labels[i]].push_back(i);

  // Z for one attribute set, restricted to class y samples.
  auto attribute_embeddings = [&](std::size_t y, const std::vector<std::size_t>& set) {
    std::vector<Embedding> out(members[y].size(), Embedding(d, 0.0));
    for (std::size_t a : set) {
      const Embedding& t = text_of(y, a);
      std::vector<Embedding> hit;
      for (std::size_t i : members[y]) {
        if (table.f[i][a]) hit.push_back(pulled(raw[i], t));
      }
      if (hit.empty()) {
        for (std::size_t i : members[y]) hit.push_back(pulled(raw[i], t));
      }
      const Embedding bar = detail::mean_of(hit, d);
      for (std::size_t s = 0; s < members[y].size(); ++s) {
        const std::size_t i = members[y][s];
        const Embedding za = table.f[i][a] ? pulled(raw[i], t) : bar;
        detail::axpy(1.0 / static_cast<double>(set.size()), za, out[s]);
      }
    }
    return out;
  };

  std::vector<Embedding> dist_centre(K);
  for (std::size_t y = 0; y < K; ++y) {
    std::vector<Embedding> ts;
    for (std::size_t a : dist[y]) ts.push_back(text_of(y, a));
    dist_centre[y] = detail::mean_of(ts, d);
  }
  const double push = cfg.degenerate ? 0.0 : cfg.push;

  std::vector<Embedding> zl(N), zdes(N), zdist(N), za(N);
  for (std::size_t y = 0; y < K; ++y) {
    const auto ed = attribute_embeddings(y, des[y]);
    auto et = attribute_embeddings(y, dist[y]);
    Embedding away = dist_centre[y];
    for (std::size_t o = 0; o < K; ++o) {
      if (o != y) detail::axpy(-1.0 / static_cast<double>(K - 1), dist_centre[o], away);
    }
    for (std::size_t s = 0; s < members[y].size(); ++s) {
      const std::size_t i = members[y][s];
      if (push != 0.0) detail::axpy(push, away, et[s]);
      zl[i] = pulled(raw[i], label_text[y]);
      zdes[i] = ed[s];
      zdist[i] = et[s];
      za[i] = Embedding(d);
      for (std::size_t j = 0; j < d; ++j) za[i][j] = cfg.lambda * ed[s][j] + (1.0 - cfg.lambda) * et[s][j];
    }
  }

  const LabeledEmbeddingSet set_l(zl, labels, K), set_des(zdes, labels, K), set_dist(zdist, labels, K),
      set_a(za, labels, K);
  LemmaReport rep;
  rep.config = cfg;
  rep.trace_A = set_des.traces();
  rep.trace_L = set_l.traces();
  rep.d_A.assign(K, std::vector<double>(K, 0.0));
  rep.d_L.assign(K, std::vector<double>(K, 0.0));
  double m1 = std::numeric_limits<double>::infinity();
  double s1 = 0.0;
  for (std::size_t y = 0; y < K; ++y) {
    m1 = std::min(m1, rep.trace_L[y] - rep.trace_A[y]);
    s1 = std::max(s1, rep.trace_L[y]);
  }
  double m2 = std::numeric_limits<double>::infinity();
  double s2 = 0.0;
  for (std::size_t a = 0; a < K; ++a) {
    for (std::size_t b = 0; b < K; ++b) {
      if (a == b) continue;
      rep.d_A[a][b] = std::sqrt(squared_distance(set_dist.means()[a], set_dist.means()[b]));
      rep.d_L[a][b] = std::sqrt(squared_distance(set_l.means()[a], set_l.means()[b]));
      m2 = std::min(m2, rep.d_A[a][b] - rep.d_L[a][b]);
      s2 = std::max(s2, rep.d_L[a][b]);
    }
  }
  rep.cs_A = cs(set_a).cs;
  rep.cs_L = cs(set_l).cs;
  rep.lemma1 = detail::compare(m1, s1, false);
  rep.lemma2 = detail::compare(m2, s2, cfg.n_dist <= K);
  rep.corollary = detail::compare(rep.cs_A - rep.cs_L, std::abs(rep.cs_L), false);

  // Recorded only: is each DesAttr embedding closer to its class's mean raw embedding than the label prompt?
  const LabeledEmbeddingSet set_raw(raw, labels, K);
  std::size_t closer = 0;
  std::size_t total = 0;
  for (std::size_t y = 0; y < K; ++y) {
    const double dl = squared_distance(label_text[y], set_raw.means()[y]);
    for (std::size_t a : des[y]) {
      ++total;
      if (squared_distance(text_of(y, a), set_raw.means()[y]) <= dl) ++closer;
    }
  }
  rep.mild_assumption_fraction = static_cast<double>(closer) / static_cast<double>(total);

  if (z_attr) *z_attr = std::move(za);
  if (z_label) *z_label = std::move(zl);
  if (labels_out) *labels_out = labels;
  return rep;
}

}  // namespace attrvr
