#pragma once

// Experiment orchestration: the shapes-7 synthetic dataset, manifests, few-shot
// splits, study grids, the append-only results store and reports.

#include <fcntl.h>
#include <sys/file.h>
#include <unistd.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iterator>
#include <map>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "attrvr/attributes.hpp"
#include "attrvr/config.hpp"
#include "attrvr/encoders.hpp"
#include "attrvr/reprogram.hpp"
#include "attrvr/scoring.hpp"
#include "attrvr/separability.hpp"
#include "attrvr/training.hpp"

namespace attrvr {

struct Dataset {
  std::string name;
  std::string task_info;
  std::vector<std::string> class_names;
  std::vector<ImageSample> samples;
  std::vector<std::string> sources;  // path or generator id per sample
};

// ---------------------------------------------------------------------------
// shapes-7
// ---------------------------------------------------------------------------

inline const std::vector<std::string>& shapes7_classes() {
  static const std::vector<std::string> names{"circle", "square", "triangle", "cross", "ring", "bar", "diamond"};
  return names;
}

inline constexpr std::size_t kShapes7Size = 12;

/// One procedurally rendered image of class `cls` (0..6), fully determined by (seed, cls, index).
///
/// Each class has its own base colour; colour, centre, size and background
/// are jittered per image and Gaussian pixel noise is added.
inline Tensor render_shape(std::size_t cls, std::uint64_t seed, std::size_t index, std::size_t size = kShapes7Size) {
  static constexpr double kColours[7][3] = {{0.90, 0.15, 0.15}, {0.15, 0.25, 0.90}, {0.15, 0.80, 0.20},
                                            {0.90, 0.85, 0.15}, {0.85, 0.20, 0.85}, {0.15, 0.85, 0.85},
                                            {0.95, 0.55, 0.10}};
  if (cls >= 7) throw ValidationError(detail::concat("shapes7 class ", cls, " out of range"));
  if (size < 6) throw GeometryError("shapes7 images need at least 6 pixels per side");
  Rng rng(derive_seed(seed, 0x5a7e5, cls, index));
  const double s = static_cast<double>(size);
  const double cx = s / 2.0 + rng.uniform(-1.0, 1.0);
  const double cy = s / 2.0 + rng.uniform(-1.0, 1.0);
  const double r = s * rng.uniform(0.28, 0.38);
  double colour[3];
  for (int c = 0; c < 3; ++c) colour[c] = std::clamp(kColours[cls][c] + rng.uniform(-0.1, 0.1), 0.0, 1.0);
  const double bg = rng.uniform(0.1, 0.25);

  auto inside = [&](double dx, double dy) {
    const double ax = std::abs(dx);
    const double ay = std::abs(dy);
    const double dist = std::sqrt(dx * dx + dy * dy);
    switch (cls) {
      case 0: return dist <= r;
      case 1: return std::max(ax, ay) <= 0.8 * r;
      case 2: return dy <= 0.8 * r && dy >= -r && ax <= (dy + r) / 1.8;
      case 3: return (ax <= r / 3.0 && ay <= r) || (ay <= r / 3.0 && ax <= r);
      case 4: return dist <= r && dist >= 0.55 * r;
      case 5: return ax <= r && ay <= 0.3 * r;
      default: return ax + ay <= r;
    }
  };

  Tensor img(Shape3{3, size, size}, 0.0);
  for (std::size_t y = 0; y < size; ++y) {
    for (std::size_t x = 0; x < size; ++x) {
      // 2x2 supersampled coverage
      double cover = 0.0;
      for (double oy : {0.25, 0.75}) {
        for (double ox : {0.25, 0.75}) {
          if (inside(static_cast<double>(x) + ox - cx, static_cast<double>(y) + oy - cy)) cover += 0.25;
        }
      }
      for (std::size_t c = 0; c < 3; ++c) {
        const double v = cover * colour[c] + (1.0 - cover) * bg + 0.05 * rng.normal();
        img.at(c, y, x) = std::clamp(v, 0.0, 1.0);
      }
    }
  }
  return img;
}

inline std::string shapes7_id(std::uint64_t seed, std::size_t cls, std::size_t index) {
  return detail::concat("shapes7:", seed, ":", cls, ":", index);
}

inline Dataset make_shapes7(std::size_t per_class = 48, std::uint64_t seed = 0) {
  if (per_class == 0) throw ValidationError("shapes7 needs at least one sample per class");
  Dataset d;
  d.name = "shapes7";
  d.task_info = "shape";
  d.class_names = shapes7_classes();
  for (std::size_t c = 0; c < 7; ++c) {
    for (std::size_t i = 0; i < per_class; ++i) {
      d.samples.push_back({render_shape(c, seed, i), c});
      d.sources.push_back(shapes7_id(seed, c, i));
    }
  }
  return d;
}

// ---------------------------------------------------------------------------
// Manifests and images
// ---------------------------------------------------------------------------

/// Reads a binary (P6) or ASCII (P3) PPM into a CHW tensor with values in [0, 1].
inline Tensor load_ppm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read image " + path.string());
  auto token = [&]() {
    std::string t;
    char c = 0;
    while (in.get(c)) {
      if (c == '#') {
        std::string rest;
        std::getline(in, rest);
        continue;
      }
      if (std::isspace(static_cast<unsigned char>(c))) {
        if (!t.empty()) break;
        continue;
      }
      t.push_back(c);
    }
    return t;
  };
  const std::string magic = token();
  if (magic != "P6" && magic != "P3") throw ParseError(path.string(), "only P6/P3 PPM images are supported");
  std::size_t w = 0, h = 0, maxval = 0;
  try {
    w = std::stoul(token());
    h = std::stoul(token());
    maxval = std::stoul(token());
  } catch (const std::exception&) {
    throw ParseError(path.string(), "malformed PPM header");
  }
  if (w == 0 || h == 0 || maxval == 0 || maxval > 65535) throw ParseError(path.string(), "bad PPM geometry");
  Tensor img(Shape3{3, h, w}, 0.0);
  const double scale = 1.0 / static_cast<double>(maxval);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      for (std::size_t c = 0; c < 3; ++c) {
        std::size_t v = 0;
        if (magic == "P3") {
          try {
            v = std::stoul(token());
          } catch (const std::exception&) {
            throw ParseError(path.string(), "truncated PPM data");
          }
        } else if (maxval < 256) {
          char b = 0;
          if (!in.get(b)) throw ParseError(path.string(), "truncated PPM data");
          v = static_cast<unsigned char>(b);
        } else {
          char b[2];
          if (!in.read(b, 2)) throw ParseError(path.string(), "truncated PPM data");
          v = (static_cast<std::size_t>(static_cast<unsigned char>(b[0])) << 8U) | static_cast<unsigned char>(b[1]);
        }
        img.at(c, y, x) = static_cast<double>(std::min(v, maxval)) * scale;
      }
    }
  }
  return img;
}

inline void save_ppm(const std::filesystem::path& path, const Tensor& img) {
  if (img.shape().channels != 3) throw GeometryError("PPM output needs 3 channels");
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << "P6\n" << img.shape().width << ' ' << img.shape().height << "\n255\n";
  for (std::size_t y = 0; y < img.shape().height; ++y) {
    for (std::size_t x = 0; x < img.shape().width; ++x) {
      for (std::size_t c = 0; c < 3; ++c) {
        out.put(static_cast<char>(std::lround(std::clamp(img.at(c, y, x), 0.0, 1.0) * 255.0)));
      }
    }
  }
}

/// Writes a manifest of shapes-7 generator ids.
inline void write_shapes7_manifest(const std::filesystem::path& path, std::size_t per_class, std::uint64_t seed) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  for (std::size_t c = 0; c < 7; ++c) {
    for (std::size_t i = 0; i < per_class; ++i) {
      out << nlohmann::json{{"path_or_generator", shapes7_id(seed, c, i)}, {"class_name", shapes7_classes()[c]}}.dump()
          << '\n';
    }
  }
}

/// Loads a JSONL manifest of {path_or_generator, class_name}. Relative paths resolve
/// against the manifest's directory. Classes follow `classes` when given, else first appearance.
inline Dataset load_manifest(const std::filesystem::path& path, const std::vector<std::string>& classes = {},
                             std::string task_info = "") {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read manifest " + path.string());
  Dataset d;
  d.name = path.stem().string();
  d.task_info = std::move(task_info);
  d.class_names = classes;
  std::map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < classes.size(); ++i) index[classes[i]] = i;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json row;
    try {
      row = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw ParseError(detail::concat("line ", line_no), e.what());
    }
    if (!row.is_object() || !row.contains("path_or_generator") || !row.contains("class_name") ||
        !row["path_or_generator"].is_string() || !row["class_name"].is_string() || row.size() != 2) {
      throw ParseError(detail::concat("line ", line_no), "expected {path_or_generator, class_name}");
    }
    const std::string src = row["path_or_generator"];
    const std::string name = row["class_name"];
    auto it = index.find(name);
    if (it == index.end()) {
      if (!classes.empty()) throw ValidationError(detail::concat("line ", line_no, ": unknown class '", name, "'"));
      it = index.emplace(name, d.class_names.size()).first;
      d.class_names.push_back(name);
    }
    Tensor img;
    if (src.rfind("shapes7:", 0) == 0) {
      std::uint64_t seed = 0;
      std::size_t cls = 0, idx = 0;
      char c1 = 0, c2 = 0;
      std::istringstream ss(src.substr(8));
      if (!(ss >> seed >> c1 >> cls >> c2 >> idx) || c1 != ':' || c2 != ':') {
        throw ParseError(detail::concat("line ", line_no), "bad generator id '" + src + "'");
      }
      img = render_shape(cls, seed, idx);
    } else {
      std::filesystem::path p(src);
      if (p.is_relative()) p = path.parent_path() / p;
      img = load_ppm(p);
    }
    d.samples.push_back({std::move(img), it->second});
    d.sources.push_back(src);
  }
  if (d.samples.empty()) throw ValidationError("manifest " + path.string() + " has no entries");
  return d;
}

inline Dataset load_dataset(const DataConfig& cfg, const std::vector<std::string>& classes = {},
                            const std::string& task_info = "") {
  if (cfg.dataset == "shapes7") return make_shapes7(cfg.per_class, cfg.data_seed);
  return load_manifest(cfg.dataset, classes, task_info);
}

// ---------------------------------------------------------------------------
// Few-shot splits
// ---------------------------------------------------------------------------

struct FewShotSplit {
  std::vector<ImageSample> train, val, test;
  std::vector<std::size_t> train_idx, val_idx, test_idx;  // positions in the dataset
  std::uint64_t seed = 0;
  std::size_t n = 0;
};

/// Per class: seeded shuffle, the first n go to train, the next val_per_class to val, the rest to test.
inline FewShotSplit make_splits(const Dataset& data, std::size_t n, std::uint64_t seed,
                                std::size_t val_per_class = 0) {
  if (n == 0) throw ValidationError("shots must be positive");
  const std::size_t k = data.class_names.size();
  std::vector<std::vector<std::size_t>> members(k);
  for (std::size_t i = 0; i < data.samples.size(); ++i) members.at(data.samples[i].label).push_back(i);
  FewShotSplit s;
  s.seed = seed;
  s.n = n;
  for (std::size_t c = 0; c < k; ++c) {
    auto& m = members[c];
    if (m.size() < n) {
      throw ValidationError(detail::concat("class '", data.class_names[c], "' has ", m.size(),
                                           " samples, fewer than ", n, " shots"));
    }
    Rng rng(derive_seed(seed, 0x5b11, c));
    rng.shuffle(m);
    const std::size_t nv = std::min(val_per_class, m.size() - n);
    s.train_idx.insert(s.train_idx.end(), m.begin(), m.begin() + static_cast<std::ptrdiff_t>(n));
    s.val_idx.insert(s.val_idx.end(), m.begin() + static_cast<std::ptrdiff_t>(n),
                     m.begin() + static_cast<std::ptrdiff_t>(n + nv));
    s.test_idx.insert(s.test_idx.end(), m.begin() + static_cast<std::ptrdiff_t>(n + nv), m.end());
  }
  for (auto* idx : {&s.train_idx, &s.val_idx, &s.test_idx}) std::sort(idx->begin(), idx->end());
  for (std::size_t i : s.train_idx) s.train.push_back(data.samples[i]);
  for (std::size_t i : s.val_idx) s.val.push_back(data.samples[i]);
  for (std::size_t i : s.test_idx) s.test.push_back(data.samples[i]);
  return s;
}

// ---------------------------------------------------------------------------
// Embedding export
// ---------------------------------------------------------------------------

inline std::vector<Embedding> embed_split(const VRPattern& pattern, const ApplyOptions& apply,
                                          std::span<const ImageSample> split, const EncoderBackend& backend) {
  std::vector<Embedding> out;
  out.reserve(split.size());
  for (const auto& s : split) {
    out.push_back(backend.encode_image(apply_pattern(s.pixels, pattern, apply.placement, apply.resize_interior, apply.clamp)));
  }
  return out;
}

inline EmbeddingExport export_embeddings(const VRPattern& pattern, const ApplyOptions& apply,
                                         std::span<const ImageSample> split, const EncoderBackend& backend,
                                         const std::filesystem::path& out,
                                         const std::vector<std::string>& class_names) {
  std::vector<std::size_t> labels;
  for (const auto& s : split) labels.push_back(s.label);
  return write_embeddings(out, "embeddings", embed_split(pattern, apply, split, backend), labels, class_names,
                          {{"backend", backend.name()}, {"placement", std::string(to_string(apply.placement))}});
}

// ---------------------------------------------------------------------------
// Results store
// ---------------------------------------------------------------------------

struct ResultRow {
  std::string study;
  std::string arm;
  std::uint64_t seed = 0;
  std::string config_hash;
  std::string metric;
  std::optional<double> value;  // empty for failed arms
  std::string error;
  friend bool operator==(const ResultRow&, const ResultRow&) = default;
};

inline nlohmann::json to_json(const ResultRow& r) {
  nlohmann::json j{{"study", r.study}, {"arm", r.arm}, {"seed", r.seed}, {"config_hash", r.config_hash},
                   {"metric", r.metric}};
  j["value"] = r.value ? nlohmann::json(*r.value) : nlohmann::json(nullptr);
  if (!r.error.empty()) j["error"] = r.error;
  return j;
}

inline ResultRow result_row_from_json(const nlohmann::json& j) {
  try {
    ResultRow r;
    r.study = j.at("study").get<std::string>();
    r.arm = j.at("arm").get<std::string>();
    r.seed = j.at("seed").get<std::uint64_t>();
    r.config_hash = j.at("config_hash").get<std::string>();
    r.metric = j.at("metric").get<std::string>();
    if (!j.at("value").is_null()) r.value = j.at("value").get<double>();
    if (j.contains("error")) r.error = j.at("error").get<std::string>();
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError("", std::string("bad results row: ") + e.what());
  }
}

/// Appends rows as one write while holding an exclusive advisory lock on the file.
inline void append_results(const std::filesystem::path& path, const std::vector<ResultRow>& rows) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::string blob;
  for (const auto& r : rows) blob += to_json(r).dump() + "\n";
  const int fd = ::open(path.c_str(), O_WRONLY | O_CREAT | O_APPEND, 0644);
  if (fd < 0) throw IoError("cannot open results store " + path.string());
  if (::flock(fd, LOCK_EX) != 0) {
    ::close(fd);
    throw IoError("cannot lock results store " + path.string());
  }
  // cut a torn tail left by a killed writer so new rows start on a fresh line
  if (const auto size = std::filesystem::file_size(path); size > 0) {
    std::ifstream in(path, std::ios::binary);
    std::string content((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (!content.empty() && content.back() != '\n') {
      const auto nl = content.rfind('\n');
      const off_t keep = nl == std::string::npos ? 0 : static_cast<off_t>(nl + 1);
      if (::ftruncate(fd, keep) != 0) {
        ::flock(fd, LOCK_UN);
        ::close(fd);
        throw IoError("cannot repair results store " + path.string());
      }
    }
  }
  std::size_t done = 0;
  while (done < blob.size()) {
    const ssize_t w = ::write(fd, blob.data() + done, blob.size() - done);
    if (w <= 0) {
      ::flock(fd, LOCK_UN);
      ::close(fd);
      throw IoError("short write to results store " + path.string());
    }
    done += static_cast<std::size_t>(w);
  }
  ::flock(fd, LOCK_UN);
  ::close(fd);
}

inline std::vector<ResultRow> read_results(const std::filesystem::path& path) {
  std::vector<ResultRow> rows;
  if (!std::filesystem::exists(path)) return rows;
  std::ifstream in(path);
  if (!in) throw IoError("cannot read " + path.string());
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.empty()) continue;
    try {
      rows.push_back(result_row_from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::parse_error& e) {
      // a torn final line from a killed run is dropped; anything else is corruption
      if (in.peek() == std::char_traits<char>::eof()) break;
      throw ParseError(detail::concat("line ", n), e.what());
    }
  }
  return rows;
}

struct SummaryRow {
  std::string study;
  std::string arm;
  std::string metric;
  double mean = 0.0;
  double std = 0.0;  // population std over seeds
  std::size_t n = 0;
  std::size_t failed = 0;
};

/// Mean and population std per (study, arm, metric), in first-appearance order.
inline std::vector<SummaryRow> summarize(const std::vector<ResultRow>& rows) {
  std::vector<SummaryRow> out;
  std::map<std::tuple<std::string, std::string, std::string>, std::size_t> at;
  std::vector<std::vector<double>> values;
  for (const auto& r : rows) {
    const auto key = std::make_tuple(r.study, r.arm, r.metric);
    auto it = at.find(key);
    if (it == at.end()) {
      it = at.emplace(key, out.size()).first;
      out.push_back({r.study, r.arm, r.metric});
      values.emplace_back();
    }
    if (r.value) values[it->second].push_back(*r.value);
    else ++out[it->second].failed;
  }
  for (std::size_t i = 0; i < out.size(); ++i) {
    const auto& v = values[i];
    out[i].n = v.size();
    if (v.empty()) {
      out[i].mean = std::numeric_limits<double>::quiet_NaN();
      out[i].std = std::numeric_limits<double>::quiet_NaN();
      continue;
    }
    double s = 0.0;
    for (double x : v) s += x;
    out[i].mean = s / static_cast<double>(v.size());
    double q = 0.0;
    for (double x : v) q += (x - out[i].mean) * (x - out[i].mean);
    out[i].std = std::sqrt(q / static_cast<double>(v.size()));
  }
  return out;
}

inline void report_markdown(std::ostream& out, const std::vector<SummaryRow>& rows) {
  out << "| study | arm | metric | mean ± std | n |\n|---|---|---|---|---|\n";
  for (const auto& r : rows) {
    std::ostringstream cell;
    cell << std::fixed;
    if (r.n == 0) {
      cell << "failed";
    } else if (r.metric.find("accuracy") != std::string::npos) {
      cell << std::setprecision(2) << 100.0 * r.mean << "% ± " << 100.0 * r.std << "%";
    } else {
      cell << std::setprecision(4) << r.mean << " ± " << r.std;
    }
    out << "| " << r.study << " | " << r.arm << " | " << r.metric << " | " << cell.str() << " | " << r.n << " |\n";
  }
}

inline void report_csv(std::ostream& out, const std::vector<SummaryRow>& rows) {
  out << "study,arm,metric,mean,std,n,failed\n";
  out << std::setprecision(17);
  for (const auto& r : rows) {
    out << r.study << ',' << r.arm << ',' << r.metric << ',' << r.mean << ',' << r.std << ',' << r.n << ','
        << r.failed << '\n';
  }
}

// ---------------------------------------------------------------------------
// Single runs
// ---------------------------------------------------------------------------

enum class ScorerKind { attrvr, label };

inline std::string_view to_string(ScorerKind s) { return s == ScorerKind::attrvr ? "attrvr" : "label"; }

inline ScorerKind parse_scorer(std::string_view s) {
  if (s == "attrvr" || s == "attr") return ScorerKind::attrvr;
  if (s == "label") return ScorerKind::label;
  throw ValidationError("unknown scorer '" + std::string(s) + "' (expected attrvr or label)");
}

inline std::unique_ptr<ClassScorer> make_eval_scorer(ScorerKind kind, const TrainConfig& cfg,
                                                     const AttributeBank& bank, const EncoderBackend& backend) {
  if (kind == ScorerKind::attrvr) {
    return std::make_unique<AttributeScorer>(bank, score_config(cfg), backend.temperature());
  }
  return std::make_unique<LabelScorer>(backend, bank.classes, cfg.templ);
}

inline void check_classes(const Dataset& data, const AttributeBank& bank) {
  if (data.class_names != bank.classes) {
    throw ValidationError("dataset classes do not match the attribute bank classes (same names, same order)");
  }
}

struct RunOutput {
  TrainResult trained;
  EvalResult test;
  std::optional<EvalResult> val;
  EvalResult zero_delta;  // same scorer, untrained pattern
  double test_cs = 0.0;
};

/// Evaluates a trained pattern on the split's val and test parts with `scorer`.
inline RunOutput evaluate_run(TrainResult trained, const RunConfig& cfg, const FewShotSplit& split,
                              const AttributeBank& bank, const EncoderBackend& backend, ScorerKind scorer) {
  RunOutput out;
  out.trained = std::move(trained);
  const auto s = make_eval_scorer(scorer, cfg.train, bank, backend);
  const ApplyOptions apply = apply_options(cfg.train);
  out.test = evaluate(out.trained.pattern, apply, split.test, *s, backend);
  if (!split.val.empty()) out.val = evaluate(out.trained.pattern, apply, split.val, *s, backend);
  VRPattern zero = out.trained.pattern;
  for (double& v : zero.delta.values()) v = 0.0;
  out.zero_delta = evaluate(zero, apply, split.test, *s, backend);
  std::vector<std::size_t> labels;
  for (const auto& t : split.test) labels.push_back(t.label);
  if (bank.num_classes() >= 2) {
    out.test_cs = cs(LabeledEmbeddingSet(embed_split(out.trained.pattern, apply, split.test, backend), labels,
                                         bank.num_classes()))
                      .cs;
  }
  return out;
}

/// Trains per cfg on a few-shot split and evaluates on the test split with `scorer`.
inline RunOutput run_single(const RunConfig& cfg, const AttributeBank& bank, const Dataset& data,
                            const EncoderBackend& backend, ScorerKind scorer) {
  check_classes(data, bank);
  const FewShotSplit split = make_splits(data, cfg.data.shots, cfg.data.data_seed, cfg.data.val_per_class);
  return evaluate_run(train(split.train, bank, cfg.train, backend), cfg, split, bank, backend, scorer);
}

inline std::vector<ResultRow> result_rows(const RunOutput& r, const std::string& study, const std::string& arm,
                                          std::uint64_t seed, const std::string& hash) {
  std::vector<ResultRow> rows;
  auto add = [&](const std::string& metric, double v) { rows.push_back({study, arm, seed, hash, metric, v, ""}); };
  add("test_accuracy", r.test.accuracy);
  if (r.val) add("val_accuracy", r.val->accuracy);
  add("train_accuracy", r.trained.record.final_train_accuracy);
  add("zero_delta_accuracy", r.zero_delta.accuracy);
  add("test_cs", r.test_cs);
  return rows;
}

// ---------------------------------------------------------------------------
// Studies
// ---------------------------------------------------------------------------

struct StudySpec {
  std::string study = "single";
  std::size_t repeats = 1;
  nlohmann::json grid = nlohmann::json::object();  // grid key -> list
  RunConfig base = toy_run_defaults();
};

struct Arm {
  std::string name;
  RunConfig cfg;
  ScorerKind scorer = ScorerKind::attrvr;
};

inline const std::map<std::string, std::set<std::string>>& study_grid_keys() {
  static const std::map<std::string, std::set<std::string>> keys{
      {"ablation", {}},
      {"shots", {"shots_grid", "methods"}},
      {"hyper", {"lambda_grid", "k_grid"}},
      {"aggregation", {"variants"}},
      {"crosstest", {}},
      {"single", {}}};
  return keys;
}

inline void validate(const StudySpec& spec) {
  const auto& keys = study_grid_keys();
  const auto it = keys.find(spec.study);
  if (it == keys.end()) throw ValidationError("unknown study '" + spec.study + "'");
  if (spec.repeats == 0) throw ValidationError("repeats must be positive");
  for (const auto& [key, values] : spec.grid.items()) {
    if (it->second.count(key) == 0) throw ValidationError("grid key '" + key + "' does not apply to study " + spec.study);
    if (!values.is_array() || values.empty()) throw ValidationError("grid '" + key + "' must be a nonempty list");
    for (const auto& v : values) {
      if (key == "lambda_grid") {
        if (!v.is_number() || v.get<double>() < 0.0 || v.get<double>() > 1.0) {
          throw ValidationError("lambda_grid values must be numbers in [0, 1]");
        }
      } else if (key == "k_grid" || key == "shots_grid") {
        if (!v.is_number_integer() || (!v.is_number_unsigned() && v.get<std::int64_t>() <= 0) ||
            (v.is_number_unsigned() && v.get<std::uint64_t>() == 0)) {
          throw ValidationError(key + " values must be positive integers");
        }
      } else if (key == "variants") {
        if (!v.is_string()) throw ValidationError("variants must be strings");
        parse_aggregation(v.get<std::string>());
      } else if (key == "methods") {
        if (!v.is_string()) throw ValidationError("methods must be strings");
        parse_method(v.get<std::string>());
      }
    }
  }
}

inline StudySpec study_spec_from_json(const nlohmann::json& j) {
  StudySpec spec;
  nlohmann::json run = nlohmann::json::object();
  for (const auto& [key, v] : j.items()) {
    if (key == "study") {
      if (!v.is_string()) throw ParseError("/study", "expected a string");
      spec.study = v.get<std::string>();
    } else if (key == "repeats") {
      if (!v.is_number_integer() || (!v.is_number_unsigned() && v.get<std::int64_t>() < 0)) {
        throw ParseError("/repeats", "expected a non-negative integer");
      }
      spec.repeats = v.get<std::size_t>();
    } else if (key == "shots_grid" || key == "methods" || key == "lambda_grid" || key == "k_grid" ||
               key == "variants") {
      spec.grid[key] = v;
    } else if (key == "bank") {
      continue;
    } else {
      run[key] = v;
    }
  }
  spec.base = apply_run_config(run);
  validate(spec);
  return spec;
}

namespace detail {

inline std::string number_label(double v) {
  std::ostringstream s;
  s << v;
  return s.str();
}

}  // namespace detail

/// Arms of a study, in report order.
inline std::vector<Arm> expand_arms(const StudySpec& spec) {
  validate(spec);
  std::vector<Arm> arms;
  RunConfig attr = spec.base;
  attr.train.method = Method::attrvr;
  RunConfig label = spec.base;
  label.train.method = Method::ar;
  const auto& g = spec.grid;
  if (spec.study == "single") {
    arms.push_back({std::string(to_string(spec.base.train.method)), spec.base,
                    spec.base.train.method == Method::attrvr ? ScorerKind::attrvr : ScorerKind::label});
  } else if (spec.study == "ablation") {
    RunConfig no_vr = attr;
    no_vr.train.epochs = 0;
    RunConfig no_des = attr;
    no_des.train.lambda = 0.0;
    RunConfig no_dist = attr;
    no_dist.train.lambda = 1.0;
    arms.push_back({"w/o VR", no_vr, ScorerKind::attrvr});
    arms.push_back({"w/o DesAttrs", no_des, ScorerKind::attrvr});
    arms.push_back({"w/o DistAttrs", no_dist, ScorerKind::attrvr});
    arms.push_back({"w/o both", label, ScorerKind::label});
    arms.push_back({"ours", attr, ScorerKind::attrvr});
  } else if (spec.study == "shots") {
    const nlohmann::json shots = g.contains("shots_grid") ? g["shots_grid"] : nlohmann::json{1, 4, 8, 16};
    const nlohmann::json methods = g.contains("methods") ? g["methods"] : nlohmann::json{"ar", "attrvr"};
    for (const auto& n : shots) {
      for (const auto& m : methods) {
        RunConfig c = spec.base;
        c.data.shots = n.get<std::size_t>();
        c.train.method = parse_method(m.get<std::string>());
        arms.push_back({detail::concat(m.get<std::string>(), "@", c.data.shots), c,
                        c.train.method == Method::attrvr ? ScorerKind::attrvr : ScorerKind::label});
      }
    }
  } else if (spec.study == "hyper") {
    const nlohmann::json lambdas = g.contains("lambda_grid") ? g["lambda_grid"] : nlohmann::json{0.0, 0.25, 0.5, 0.75, 1.0};
    const nlohmann::json ks = g.contains("k_grid") ? g["k_grid"] : nlohmann::json{1, 3, 5};
    for (const auto& l : lambdas) {
      RunConfig c = attr;
      c.train.lambda = l.get<double>();
      arms.push_back({"lambda=" + detail::number_label(c.train.lambda), c, ScorerKind::attrvr});
    }
    for (const auto& k : ks) {
      RunConfig c = attr;
      c.train.k = k.get<std::size_t>();
      arms.push_back({detail::concat("k=", c.train.k), c, ScorerKind::attrvr});
    }
  } else if (spec.study == "aggregation") {
    const nlohmann::json variants =
        g.contains("variants") ? g["variants"] : nlohmann::json{"max", "avg", "mean", "rnd", "knn"};
    for (const auto& v : variants) {
      RunConfig c = attr;
      c.train.variant = parse_aggregation(v.get<std::string>());
      if (c.train.variant == Aggregation::rnd && !c.train.rnd_seed) c.train.rnd_seed = c.train.seed;
      arms.push_back({v.get<std::string>(), c, ScorerKind::attrvr});
    }
  } else if (spec.study == "crosstest") {
    arms.push_back({"Attr", attr, ScorerKind::attrvr});
    arms.push_back({"Label", label, ScorerKind::label});
    arms.push_back({"Label2Attr", label, ScorerKind::attrvr});
    arms.push_back({"Attr2Label", attr, ScorerKind::label});
  }
  return arms;
}

/// Configuration of one (arm, repeat): both the training seed and the split seed shift by the repeat index.
inline RunConfig repeat_config(const RunConfig& base, std::size_t repeat) {
  RunConfig c = base;
  c.train.seed += repeat;
  c.data.data_seed += repeat;
  if (c.train.rnd_seed) *c.train.rnd_seed += repeat;
  return c;
}

inline std::string arm_hash(const std::string& study, const Arm& arm, const RunConfig& cfg) {
  return hex64(hash_json({{"study", study}, {"arm", arm.name}, {"scorer", to_string(arm.scorer)}, {"config", to_json(cfg)}}));
}

struct StudyOutcome {
  std::size_t ran = 0;
  std::size_t skipped = 0;
  std::size_t failed = 0;
  std::vector<ResultRow> rows;  // rows appended by this call
};

/// Runs every (arm, repeat) without a completed row in out_dir/results.jsonl,
/// appending its rows. A failing arm is stored as a "failed" row and the study continues.
inline StudyOutcome run_study(const StudySpec& spec, const AttributeBank& raw_bank, const std::filesystem::path& out_dir,
                              std::ostream* log = nullptr) {
  const auto arms = expand_arms(spec);
  const auto store = out_dir / "results.jsonl";
  std::set<std::string> done;
  for (const auto& r : read_results(store)) {
    if (r.metric != "failed") done.insert(r.config_hash);  // failed arms are retried
  }

  StudyOutcome outcome;
  std::map<std::string, std::unique_ptr<EncoderBackend>> backends;
  std::map<std::string, AttributeBank> banks;
  std::map<std::string, Dataset> datasets;
  std::map<std::string, TrainResult> trained;

  for (std::size_t rep = 0; rep < spec.repeats; ++rep) {
    for (const auto& arm : arms) {
      const RunConfig cfg = repeat_config(arm.cfg, rep);
      const std::string hash = arm_hash(spec.study, arm, cfg);
      if (done.count(hash)) {
        ++outcome.skipped;
        continue;
      }
      std::vector<ResultRow> rows;
      try {
        const std::string bkey = nlohmann::json{{"kind", cfg.backend.kind}, {"model", cfg.backend.model_name},
                                                {"seed", cfg.backend.toy.seed}, {"dim", cfg.backend.toy.embed_dim}, {"hidden", cfg.backend.toy.hidden_dim},
                                                {"size", cfg.backend.toy.input.height},
                                                {"tau", cfg.backend.toy.temperature}}
                                     .dump();
        if (!backends.count(bkey)) {
          BackendConfig bc = cfg.backend;
          backends[bkey] = make_backend(bc);
          banks[bkey] = precompute_embeddings(raw_bank, *backends[bkey]);
        }
        const EncoderBackend& backend = *backends[bkey];
        const AttributeBank& bank = banks[bkey];
        const std::string dkey = detail::concat(cfg.data.dataset, "|", cfg.data.per_class, "|", cfg.data.data_seed);
        if (!datasets.count(dkey)) datasets[dkey] = load_dataset(cfg.data, bank.classes, bank.task_info);
        const Dataset& data = datasets[dkey];
        check_classes(data, bank);
        const FewShotSplit split = make_splits(data, cfg.data.shots, cfg.data.data_seed, cfg.data.val_per_class);

        const std::string tkey = hex64(hash_json({{"run", to_json(cfg)}, {"backend", bkey}}));
        if (!trained.count(tkey)) trained[tkey] = train(split.train, bank, cfg.train, backend);
        const RunOutput out = evaluate_run(trained[tkey], cfg, split, bank, backend, arm.scorer);
        rows = result_rows(out, spec.study, arm.name, cfg.train.seed, hash);
        ++outcome.ran;
        if (log) *log << spec.study << " / " << arm.name << " / seed " << cfg.train.seed << ": test accuracy "
                      << out.test.accuracy << '\n';
      } catch (const std::exception& e) {
        rows = {{spec.study, arm.name, cfg.train.seed, hash, "failed", std::nullopt, e.what()}};
        ++outcome.failed;
        if (log) *log << spec.study << " / " << arm.name << " / seed " << cfg.train.seed << ": failed: " << e.what() << '\n';
      }
      append_results(store, rows);
      done.insert(hash);
      outcome.rows.insert(outcome.rows.end(), rows.begin(), rows.end());
    }
  }
  return outcome;
}

}  // namespace attrvr
