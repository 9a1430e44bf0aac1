#pragma once

// Pattern training: cross-entropy over class scores, SGD with momentum under a
// cosine-annealed learning rate, per-epoch re-selection of nearest attributes,
// and evaluation of a trained pattern with any scorer.

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "attrvr/attributes.hpp"
#include "attrvr/encoders.hpp"
#include "attrvr/reprogram.hpp"
#include "attrvr/scoring.hpp"

namespace attrvr {

enum class Method { attrvr, ar, vp };

inline std::string_view to_string(Method m) {
  switch (m) {
    case Method::attrvr: return "attrvr";
    case Method::ar: return "ar";
    case Method::vp: return "vp";
  }
  return "?";
}

inline Method parse_method(std::string_view s) {
  if (s == "attrvr") return Method::attrvr;
  if (s == "ar") return Method::ar;
  if (s == "vp") return Method::vp;
  throw ValidationError("unknown method '" + std::string(s) + "' (expected attrvr, ar or vp)");
}

struct TrainConfig {
  std::size_t epochs = 200;
  double lr = 40.0;
  double momentum = 0.9;
  std::size_t batch_size = 64;
  std::size_t frame = 16;     // padded frame for attrvr / ar
  std::size_t vp_frame = 30;  // overlaid frame for vp
  std::size_t k = 3;
  double lambda = 0.5;
  Aggregation variant = Aggregation::knn;
  std::optional<std::uint64_t> rnd_seed;
  std::uint64_t seed = 0;
  Method method = Method::attrvr;
  std::string templ = std::string(kDefaultTemplate);
  std::string schedule = "cosine";
  bool resize_interior = true;
  bool clamp = false;
};

inline void validate(const TrainConfig& cfg) {
  if (!(cfg.lr >= 0.0) || !std::isfinite(cfg.lr)) throw ValidationError("lr must be finite and >= 0");
  if (!(cfg.momentum >= 0.0 && cfg.momentum < 1.0)) throw ValidationError("momentum must be in [0, 1)");
  if (cfg.batch_size == 0) throw ValidationError("batch_size must be positive");
  if (cfg.schedule != "cosine") throw ValidationError("only the cosine schedule is supported");
}

inline ScoreConfig score_config(const TrainConfig& cfg) {
  return ScoreConfig{cfg.k, cfg.lambda, cfg.variant, cfg.rnd_seed};
}

inline Placement placement_of(Method m) { return m == Method::vp ? Placement::overlay : Placement::pad; }

inline std::size_t frame_of(const TrainConfig& cfg) {
  return cfg.method == Method::vp ? cfg.vp_frame : cfg.frame;
}

inline nlohmann::json to_json(const TrainConfig& cfg) {
  nlohmann::json j{{"epochs", cfg.epochs},
                   {"lr", cfg.lr},
                   {"momentum", cfg.momentum},
                   {"batch_size", cfg.batch_size},
                   {"frame", cfg.frame},
                   {"vp_frame", cfg.vp_frame},
                   {"k", cfg.k},
                   {"lambda", cfg.lambda},
                   {"variant", to_string(cfg.variant)},
                   {"seed", cfg.seed},
                   {"method", to_string(cfg.method)},
                   {"template", cfg.templ},
                   {"schedule", cfg.schedule},
                   {"resize_interior", cfg.resize_interior},
                   {"clamp", cfg.clamp}};
  j["rnd_seed"] = cfg.rnd_seed ? nlohmann::json(*cfg.rnd_seed) : nlohmann::json(nullptr);
  return j;
}

/// Stable hash of a JSON document (keys are serialised in sorted order).
inline std::uint64_t hash_json(const nlohmann::json& j) { return fnv1a64(j.dump()); }

/// lr0 * (1 + cos(pi * e / epochs)) / 2 for 0 <= e < epochs.
inline double cosine_lr(std::size_t e, std::size_t epochs, double lr0) {
  if (e >= epochs) throw ValidationError(detail::concat("epoch ", e, " outside [0, ", epochs, ")"));
  return lr0 * (1.0 + std::cos(std::numbers::pi * static_cast<double>(e) / static_cast<double>(epochs))) /
         2.0;
}

struct ApplyOptions {
  Placement placement = Placement::pad;
  bool resize_interior = true;
  bool clamp = false;
};

inline ApplyOptions apply_options(const TrainConfig& cfg) {
  return {placement_of(cfg.method), cfg.resize_interior, cfg.clamp};
}

/// Per-class term lists chosen for one sample.
using ClassSelections = std::vector<std::vector<ScoreTerm>>;

struct LossAndGrad {
  double loss = 0.0;     // mean over the batch
  Tensor grad;           // d loss / d delta, zero outside the mask
  std::size_t correct = 0;
};

/// Mean cross-entropy of the batch and its gradient with respect to the pattern.
///
/// With `frozen`, sample i is scored with frozen[i]'s term lists (selection is a
/// stop-gradient); otherwise selection happens at the current pattern.
inline LossAndGrad ce_loss_and_grad(std::span<const ImageSample> batch, const VRPattern& pattern,
                                    const ClassScorer& scorer, const EncoderBackend& backend,
                                    const ApplyOptions& apply,
                                    std::span<const ClassSelections> frozen = {},
                                    std::span<const std::uint64_t> sample_ids = {},
                                    std::uint64_t epoch = 0) {
  if (batch.empty()) throw ValidationError("empty batch");
  if (!frozen.empty() && frozen.size() != batch.size()) {
    throw ValidationError("frozen selections must match the batch size");
  }
  if (pattern.shape != backend.input_shape()) {
    throw GeometryError("pattern geometry does not match the backend input");
  }
  const std::size_t classes = scorer.num_classes();
  const auto& table = scorer.texts();
  const double tau = scorer.temperature();
  LossAndGrad out;
  out.grad = Tensor(pattern.shape, 0.0);
  auto g = out.grad.values();
  const auto mask = pattern.mask.values();
  const double inv_b = 1.0 / static_cast<double>(batch.size());

  for (std::size_t i = 0; i < batch.size(); ++i) {
    const ImageSample& s = batch[i];
    if (s.label >= classes) throw ValidationError(detail::concat("label ", s.label, " out of range"));
    const ScoreContext ctx{epoch, sample_ids.empty() ? i : sample_ids[i]};
    const Tensor unclamped = apply_pattern(s.pixels, pattern, apply.placement, apply.resize_interior);
    Tensor xt = unclamped;
    if (apply.clamp) {
      for (double& v : xt.values()) v = std::clamp(v, 0.0, 1.0);
    }
    const Embedding z = backend.encode_image(xt);
    const auto sims = scorer.text_sims(z);
    const ClassSelections sel = frozen.empty() ? scorer.select_all(sims, ctx) : frozen[i];
    std::vector<double> scores(classes);
    for (std::size_t c = 0; c < classes; ++c) scores[c] = ClassScorer::combine(sims, sel[c]);
    if (!all_finite(scores)) {
      throw NumericError(detail::concat("non-finite class scores for batch item ", i, " (sample ",
                                        ctx.sample_id, ", label ", s.label, ", tau ", tau, ")"));
    }
    const auto p = class_probabilities(scores);
    const double mx = *std::max_element(scores.begin(), scores.end());
    double lse = 0.0;
    for (double v : scores) lse += std::exp(v - mx);
    const double loss_i = mx + std::log(lse) - scores[s.label];
    if (!std::isfinite(loss_i)) {
      throw NumericError(detail::concat("non-finite loss for batch item ", i, " (sample ", ctx.sample_id,
                                        ", label ", s.label, ", max score ", mx, ")"));
    }
    out.loss += loss_i * inv_b;
    if (argmax(scores) == s.label) ++out.correct;

    // d loss / d z = sum_c (p_c - [c == y]) sum_t w_t d cos(z, T_t) / tau
    Embedding gz(z.size(), 0.0);
    for (std::size_t c = 0; c < classes; ++c) {
      const double coeff = p[c] - (c == s.label ? 1.0 : 0.0);
      if (coeff == 0.0) continue;
      for (const auto& term : sel[c]) {
        if (term.weight == 0.0) continue;
        accumulate_cosine_grad(z, table[term.text], coeff * term.weight / tau, gz);
      }
    }
    const Tensor gx = backend.image_vjp(xt, gz);
    const auto gxv = gx.values();
    const auto raw = unclamped.values();
    for (std::size_t j = 0; j < g.size(); ++j) {
      if (mask[j] == 0.0) continue;
      if (apply.clamp && (raw[j] < 0.0 || raw[j] > 1.0)) continue;
      g[j] += gxv[j] * inv_b;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Records
// ---------------------------------------------------------------------------

struct EpochStats {
  std::size_t epoch = 0;
  double loss = 0.0;
  double train_accuracy = 0.0;
  double lr = 0.0;
  friend bool operator==(const EpochStats&, const EpochStats&) = default;
};

struct ExperimentRecord {
  std::string method;
  std::uint64_t config_hash = 0;
  nlohmann::json config;
  std::vector<EpochStats> history;
  double final_train_accuracy = 0.0;
  std::optional<SelectionTrace> first_trace;  // selections at epoch 0
  std::optional<SelectionTrace> final_trace;  // selections under the trained pattern
};

inline nlohmann::json to_json(const EpochStats& e) {
  return {{"epoch", e.epoch}, {"loss", e.loss}, {"train_accuracy", e.train_accuracy}, {"lr", e.lr}};
}

inline nlohmann::json summary_json(const ExperimentRecord& r) {
  return {{"method", r.method},
          {"config_hash", hex64(r.config_hash)},
          {"config", r.config},
          {"epochs_run", r.history.size()},
          {"final_loss", r.history.empty() ? nlohmann::json(nullptr) : nlohmann::json(r.history.back().loss)},
          {"final_train_accuracy", r.final_train_accuracy}};
}

/// history.jsonl (one row per epoch) and summary.json under `dir`.
inline void write_record(const ExperimentRecord& r, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::ofstream hist(dir / "history.jsonl", std::ios::trunc);
  if (!hist) throw IoError("cannot write " + (dir / "history.jsonl").string());
  for (const auto& e : r.history) {
    auto row = to_json(e);
    row["config_hash"] = hex64(r.config_hash);
    hist << row.dump() << '\n';
  }
  std::ofstream sum(dir / "summary.json", std::ios::trunc);
  if (!sum) throw IoError("cannot write " + (dir / "summary.json").string());
  sum << summary_json(r).dump(2) << '\n';
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

inline constexpr std::uint64_t kEvalEpoch = std::numeric_limits<std::uint32_t>::max();

struct EvalResult {
  double accuracy = 0.0;
  std::vector<double> per_class;  // NaN where the class has no test samples
  std::vector<std::size_t> counts;
  std::vector<std::string> warnings;
};

inline EvalResult evaluate(const VRPattern& pattern, const ApplyOptions& apply,
                           std::span<const ImageSample> test, const ClassScorer& scorer,
                           const EncoderBackend& backend) {
  if (test.empty()) throw ValidationError("cannot evaluate on an empty test split");
  const std::size_t classes = scorer.num_classes();
  std::vector<std::size_t> hits(classes, 0);
  EvalResult r;
  r.counts.assign(classes, 0);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < test.size(); ++i) {
    const auto& s = test[i];
    if (s.label >= classes) throw ValidationError(detail::concat("label ", s.label, " out of range"));
    const Tensor xt = apply_pattern(s.pixels, pattern, apply.placement, apply.resize_interior, apply.clamp);
    const auto pred = predict(scorer, backend.encode_image(xt), ScoreContext{kEvalEpoch, i});
    ++r.counts[s.label];
    if (pred.label == s.label) {
      ++hits[s.label];
      ++correct;
    }
  }
  r.accuracy = static_cast<double>(correct) / static_cast<double>(test.size());
  r.per_class.resize(classes);
  for (std::size_t c = 0; c < classes; ++c) {
    if (r.counts[c] == 0) {
      r.per_class[c] = std::numeric_limits<double>::quiet_NaN();
      r.warnings.push_back(detail::concat("class ", c, " has no test samples"));
    } else {
      r.per_class[c] = static_cast<double>(hits[c]) / static_cast<double>(r.counts[c]);
    }
  }
  return r;
}

/// Mean of the defined per-class accuracies.
inline double mean_class_accuracy(const EvalResult& r) {
  double s = 0.0;
  std::size_t n = 0;
  for (double v : r.per_class) {
    if (!std::isnan(v)) {
      s += v;
      ++n;
    }
  }
  return n == 0 ? std::numeric_limits<double>::quiet_NaN() : s / static_cast<double>(n);
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

struct TrainResult {
  VRPattern pattern;
  ExperimentRecord record;
};

inline std::unique_ptr<ClassScorer> make_scorer(const TrainConfig& cfg, const AttributeBank& bank,
                                                const EncoderBackend& backend) {
  if (cfg.method == Method::attrvr) {
    return std::make_unique<AttributeScorer>(bank, score_config(cfg), backend.temperature());
  }
  return std::make_unique<LabelScorer>(backend, bank.classes, cfg.templ);
}

namespace detail {

inline SelectionTrace trace_of(const AttributeScorer& scorer, std::span<const ImageSample> data,
                               const VRPattern& pattern, const EncoderBackend& backend,
                               const ApplyOptions& apply, std::uint64_t epoch,
                               std::vector<ClassSelections>* selections) {
  SelectionTrace t;
  t.epoch = epoch;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const Tensor xt = apply_pattern(data[i].pixels, pattern, apply.placement, apply.resize_interior,
                                    apply.clamp);
    const auto sims = scorer.text_sims(backend.encode_image(xt));
    const ScoreContext ctx{epoch, i};
    auto sel = scorer.select_all(sims, ctx);
    std::vector<SelectionEntry> row;
    for (std::size_t c = 0; c < sel.size(); ++c) row.push_back(scorer.describe(sims, c, sel[c]));
    t.sample_ids.push_back(i);
    t.entries.push_back(std::move(row));
    if (selections) (*selections)[i] = std::move(sel);
  }
  return t;
}

}  // namespace detail

/// Trains a pattern on `train` with an explicit scorer. Sample ids are positions in `train`.
inline TrainResult train_with_scorer(std::span<const ImageSample> train, const ClassScorer& scorer,
                                     const TrainConfig& cfg, const EncoderBackend& backend) {
  validate(cfg);
  if (train.empty()) throw ValidationError("training split is empty");
  const std::size_t classes = scorer.num_classes();
  std::vector<std::size_t> per_class(classes, 0);
  for (const auto& s : train) {
    if (s.label >= classes) throw ValidationError(detail::concat("label ", s.label, " out of range"));
    ++per_class[s.label];
  }
  for (std::size_t c = 0; c < classes; ++c) {
    if (per_class[c] == 0) throw ValidationError(detail::concat("class ", c, " has no training samples"));
  }

  const Shape3 in = backend.input_shape();
  TrainResult result;
  result.pattern = make_pattern({in.height, in.width}, in.channels, frame_of(cfg));
  VRPattern& pattern = result.pattern;
  ExperimentRecord& rec = result.record;
  rec.method = std::string(to_string(cfg.method));
  rec.config = to_json(cfg);
  rec.config_hash = hash_json(rec.config);

  const ApplyOptions apply = apply_options(cfg);
  const auto* attr = dynamic_cast<const AttributeScorer*>(&scorer);
  Tensor velocity(pattern.shape, 0.0);
  std::vector<ClassSelections> selections(train.size());
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});

  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    const double lr = cosine_lr(e, cfg.epochs, cfg.lr);
    // Re-query nearest attributes once per sample under the current pattern.
    if (attr) {
      auto trace = detail::trace_of(*attr, train, pattern, backend, apply, e, &selections);
      if (e == 0) rec.first_trace = std::move(trace);
    }
    Rng rng(derive_seed(cfg.seed, 0x5eed, e));
    rng.shuffle(order);
    double loss_sum = 0.0;
    std::size_t correct = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t stop = std::min(order.size(), start + cfg.batch_size);
      std::vector<ImageSample> batch;
      std::vector<std::uint64_t> ids;
      std::vector<ClassSelections> frozen;
      for (std::size_t b = start; b < stop; ++b) {
        batch.push_back(train[order[b]]);
        ids.push_back(order[b]);
        if (attr) frozen.push_back(selections[order[b]]);
      }
      const auto lg = ce_loss_and_grad(batch, pattern, scorer, backend, apply, frozen, ids, e);
      loss_sum += lg.loss * static_cast<double>(batch.size());
      correct += lg.correct;
      auto v = velocity.values();
      auto d = pattern.delta.values();
      const auto g = lg.grad.values();
      for (std::size_t j = 0; j < d.size(); ++j) {
        v[j] = cfg.momentum * v[j] + g[j];
        d[j] -= lr * v[j];
      }
    }
    rec.history.push_back({e, loss_sum / static_cast<double>(train.size()),
                           static_cast<double>(correct) / static_cast<double>(train.size()), lr});
  }
  if (attr) rec.final_trace = detail::trace_of(*attr, train, pattern, backend, apply, cfg.epochs, nullptr);
  rec.final_train_accuracy = evaluate(pattern, apply, train, scorer, backend).accuracy;
  return result;
}

/// Trains with the scorer implied by cfg.method: attributes for attrvr, template prompts otherwise.
inline TrainResult train(std::span<const ImageSample> train_split, const AttributeBank& bank,
                         const TrainConfig& cfg, const EncoderBackend& backend) {
  const auto scorer = make_scorer(cfg, bank, backend);
  return train_with_scorer(train_split, *scorer, cfg, backend);
}

}  // namespace attrvr
