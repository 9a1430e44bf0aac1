#pragma once

// Dual-encoder abstraction: image/text embeddings, temperature-scaled cosine
// similarity and softmax class probabilities.

#include <algorithm>
#include <cctype>
#include <cmath>
#include <functional>
#include <memory>
#include <mutex>
#include <numeric>
#include <string>
#include <vector>

#include "attrvr/core.hpp"

namespace attrvr {

using Embedding = std::vector<double>;

inline constexpr double kDefaultTemperature = 0.01;
inline constexpr double kMinNorm = 1e-12;

inline double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double norm(std::span<const double> a) { return std::sqrt(dot(a, a)); }

inline Embedding normalized(std::span<const double> a) {
  const double n = norm(a);
  if (!(n > kMinNorm)) throw NumericError("cannot normalise a zero-norm embedding");
  Embedding out(a.begin(), a.end());
  for (double& v : out) v /= n;
  return out;
}

inline double cosine(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) {
    throw ValidationError(detail::concat("embedding dimensions differ: ", a.size(), " vs ", b.size()));
  }
  const double na = norm(a);
  const double nb = norm(b);
  if (!(na > kMinNorm) || !(nb > kMinNorm)) {
    throw NumericError(detail::concat("cosine similarity of a zero-norm embedding (norms ", na, ", ",
                                      nb, ")"));
  }
  return dot(a, b) / (na * nb);
}

/// d cos(z, t) / dz = t / (|z||t|) - cos(z, t) z / |z|^2, accumulated as out += scale * grad.
inline void accumulate_cosine_grad(std::span<const double> z, std::span<const double> t,
                                   double scale, std::span<double> out) {
  const double nz = norm(z);
  const double nt = norm(t);
  if (!(nz > kMinNorm) || !(nt > kMinNorm)) {
    throw NumericError("cosine gradient at a zero-norm embedding");
  }
  const double c = dot(z, t) / (nz * nt);
  const double a = scale / (nz * nt);
  const double b = scale * c / (nz * nz);
  for (std::size_t i = 0; i < z.size(); ++i) out[i] += a * t[i] - b * z[i];
}

/// Softmax with max subtraction.
inline std::vector<double> class_probabilities(std::span<const double> scores) {
  if (scores.empty()) return {};
  if (!all_finite(scores)) throw NumericError("class scores contain non-finite values");
  const double mx = *std::max_element(scores.begin(), scores.end());
  std::vector<double> p(scores.size());
  double total = 0.0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    p[i] = std::exp(scores[i] - mx);
    total += p[i];
  }
  for (double& v : p) v /= total;
  return p;
}

/// Lowest index among maximal entries.
inline std::size_t argmax(std::span<const double> v) {
  return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

/// Frozen image/text embedding provider.
class EncoderBackend {
 public:
  virtual ~EncoderBackend() = default;

  virtual std::string name() const = 0;
  virtual std::size_t embed_dim() const = 0;
  virtual Shape3 input_shape() const = 0;
  virtual double temperature() const = 0;

  virtual Embedding encode_image(const Tensor& image) const = 0;
  virtual Embedding encode_text(std::string_view text) const = 0;

  /// Vector-Jacobian product of the image encoder at `image`: returns
  /// (d embedding / d image)^T grad_embedding.
  virtual Tensor image_vjp(const Tensor& image, std::span<const double> grad_embedding) const = 0;
};

inline double sim_clip(const EncoderBackend& backend, const Tensor& image, std::string_view text) {
  if (image.shape() != backend.input_shape()) {
    throw GeometryError(detail::concat("image is ", to_string(image.shape()), ", backend expects ",
                                       to_string(backend.input_shape())));
  }
  if (text.empty()) throw ValidationError("sim_clip needs a nonempty text");
  return cosine(backend.encode_image(image), backend.encode_text(text)) / backend.temperature();
}

inline std::vector<Embedding> embed_texts(const EncoderBackend& backend,
                                          const std::vector<std::string>& texts) {
  if (texts.empty()) throw ValidationError("embed_texts needs at least one text");
  std::vector<Embedding> out;
  out.reserve(texts.size());
  for (std::size_t i = 0; i < texts.size(); ++i) {
    if (texts[i].empty()) throw ValidationError(detail::concat("text #", i, " is empty"));
    out.push_back(backend.encode_text(texts[i]));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Toy backend
// ---------------------------------------------------------------------------

struct ToyEncoderConfig {
  std::uint64_t seed = 0;
  std::size_t embed_dim = 64;
  Shape3 input{3, 16, 16};
  double temperature = kDefaultTemperature;
  double image_gain = 2.0;  // scale of the image projection before tanh
  double bias_scale = 0.5;  // std of the fixed pre-activation bias
  std::size_t hidden_dim = 0;  // 0: one tanh layer; otherwise tanh hidden layer then a linear map
};

/// Deterministic stand-in for a pretrained image-text model.
///
/// Image path: tanh(A vec(x) + b) with fixed Gaussian A (d x CHW) and b, or with
/// hidden_dim > 0, B tanh(A vec(x) + b) where A is hidden_dim x CHW and B is d x hidden_dim.
/// Text path: signed character-trigram hashing into d buckets followed by a
/// fixed Gaussian d x d map. Similarities normalise both sides, so sentences
/// sharing phrases land close together.
class ToyDualEncoder final : public EncoderBackend {
 public:
  explicit ToyDualEncoder(ToyEncoderConfig cfg = {}) : cfg_(cfg) {
    if (cfg_.embed_dim == 0 || cfg_.input.size() == 0) {
      throw ValidationError("toy encoder needs a positive embedding dim and input size");
    }
    if (!(cfg_.temperature > 0.0)) throw ValidationError("temperature must be positive");
    const std::size_t d = cfg_.embed_dim;
    const std::size_t n = cfg_.input.size();
    const std::size_t h = first_width();
    Rng rng(derive_seed(cfg_.seed, 0x1));
    image_proj_.resize(h * n);
    const double s = cfg_.image_gain / std::sqrt(static_cast<double>(n));
    for (double& v : image_proj_) v = rng.normal() * s;
    image_bias_.resize(h);
    for (double& v : image_bias_) v = rng.normal() * cfg_.bias_scale;
    if (cfg_.hidden_dim > 0) {
      Rng hrng(derive_seed(cfg_.seed, 0x3));
      out_proj_.resize(d * h);
      const double hs = 1.0 / std::sqrt(static_cast<double>(h));
      for (double& v : out_proj_) v = hrng.normal() * hs;
    }
    Rng trng(derive_seed(cfg_.seed, 0x2));
    text_proj_.resize(d * d);
    const double ts = 1.0 / std::sqrt(static_cast<double>(d));
    for (double& v : text_proj_) v = trng.normal() * ts;
  }

  std::string name() const override { return "toy"; }
  std::size_t embed_dim() const override { return cfg_.embed_dim; }
  Shape3 input_shape() const override { return cfg_.input; }
  double temperature() const override { return cfg_.temperature; }
  const ToyEncoderConfig& config() const noexcept { return cfg_; }

  Embedding encode_image(const Tensor& image) const override {
    check_image(image);
    Embedding a = preactivation(image);
    for (double& v : a) v = std::tanh(v);
    if (cfg_.hidden_dim == 0) return a;
    const std::size_t d = cfg_.embed_dim;
    const std::size_t h = cfg_.hidden_dim;
    Embedding z(d, 0.0);
    for (std::size_t i = 0; i < d; ++i) {
      const double* row = &out_proj_[i * h];
      double acc = 0.0;
      for (std::size_t j = 0; j < h; ++j) acc += row[j] * a[j];
      z[i] = acc;
    }
    return z;
  }

  Embedding encode_text(std::string_view text) const override {
    if (text.empty()) throw ValidationError("toy text encoder received an empty string");
    const std::vector<double> h = hash_trigrams(text);
    const std::size_t d = cfg_.embed_dim;
    Embedding out(d, 0.0);
    for (std::size_t i = 0; i < d; ++i) {
      const double* row = &text_proj_[i * d];
      double s = 0.0;
      for (std::size_t j = 0; j < d; ++j) s += row[j] * h[j];
      out[i] = s;
    }
    return out;
  }

  Tensor image_vjp(const Tensor& image, std::span<const double> grad_embedding) const override {
    check_image(image);
    const std::size_t d = cfg_.embed_dim;
    const std::size_t n = cfg_.input.size();
    if (grad_embedding.size() != d) throw ValidationError("gradient has wrong embedding dim");
    const std::size_t h = first_width();
    const Embedding pre = preactivation(image);
    std::vector<double> grad_hidden(grad_embedding.begin(), grad_embedding.end());
    if (cfg_.hidden_dim > 0) {
      grad_hidden.assign(h, 0.0);
      for (std::size_t i = 0; i < d; ++i) {
        const double* row = &out_proj_[i * h];
        for (std::size_t j = 0; j < h; ++j) grad_hidden[j] += row[j] * grad_embedding[i];
      }
    }
    Tensor out(cfg_.input, 0.0);
    auto o = out.values();
    for (std::size_t i = 0; i < h; ++i) {
      const double t = std::tanh(pre[i]);
      const double g = grad_hidden[i] * (1.0 - t * t);
      if (g == 0.0) continue;
      const double* row = &image_proj_[i * n];
      for (std::size_t j = 0; j < n; ++j) o[j] += g * row[j];
    }
    return out;
  }

  /// Signed trigram counts of the lowercased, space-padded text.
  std::vector<double> hash_trigrams(std::string_view text) const {
    std::string s = " ";
    for (char c : text) s.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
    s.push_back(' ');
    std::vector<double> h(cfg_.embed_dim, 0.0);
    if (s.size() < 3) return h;
    for (std::size_t i = 0; i + 3 <= s.size(); ++i) {
      const std::uint64_t key = fnv1a64(std::string_view(s).substr(i, 3));
      const std::size_t bucket = static_cast<std::size_t>(key % cfg_.embed_dim);
      h[bucket] += ((key >> 63) != 0U) ? -1.0 : 1.0;
    }
    return h;
  }

 private:
  void check_image(const Tensor& image) const {
    if (image.shape() != cfg_.input) {
      throw GeometryError(detail::concat("toy encoder expects ", to_string(cfg_.input), ", got ",
                                         to_string(image.shape())));
    }
  }

  std::size_t first_width() const noexcept { return cfg_.hidden_dim > 0 ? cfg_.hidden_dim : cfg_.embed_dim; }

  Embedding preactivation(const Tensor& image) const {
    const std::size_t h = first_width();
    const std::size_t n = cfg_.input.size();
    const auto x = image.values();
    Embedding pre(image_bias_);
    for (std::size_t i = 0; i < h; ++i) {
      const double* row = &image_proj_[i * n];
      double s = 0.0;
      for (std::size_t j = 0; j < n; ++j) s += row[j] * x[j];
      pre[i] += s;
    }
    return pre;
  }

  ToyEncoderConfig cfg_;
  std::vector<double> image_proj_;
  std::vector<double> image_bias_;
  std::vector<double> text_proj_;
  std::vector<double> out_proj_;
};

// ---------------------------------------------------------------------------
// Backend selection
// ---------------------------------------------------------------------------

struct BackendConfig {
  std::string kind = "toy";  // toy | external
  ToyEncoderConfig toy{};
  std::string model_name;  // external only
};

using ExternalFactory = std::function<std::unique_ptr<EncoderBackend>(const BackendConfig&)>;

namespace detail {

inline ExternalFactory& external_factory_slot() {
  static ExternalFactory factory;
  return factory;
}

inline std::mutex& external_factory_mutex() {
  static std::mutex m;
  return m;
}

}  // namespace detail

/// Installs the adapter used for backend=external (e.g. a wrapper around a
/// pretrained image-text model). Passing an empty function uninstalls it.
inline void register_external_backend(ExternalFactory factory) {
  std::lock_guard lock(detail::external_factory_mutex());
  detail::external_factory_slot() = std::move(factory);
}

inline bool external_backend_available() {
  std::lock_guard lock(detail::external_factory_mutex());
  return static_cast<bool>(detail::external_factory_slot());
}

inline std::unique_ptr<EncoderBackend> make_backend(const BackendConfig& cfg) {
  if (cfg.kind == "toy") return std::make_unique<ToyDualEncoder>(cfg.toy);
  if (cfg.kind == "external") {
    ExternalFactory factory;
    {
      std::lock_guard lock(detail::external_factory_mutex());
      factory = detail::external_factory_slot();
    }
    if (!factory) {
      throw DependencyError(
          "backend=external (model '" + cfg.model_name +
          "') requested, but no external encoder adapter is registered in this build; "
          "call attrvr::register_external_backend() from an adapter library or use backend=toy");
    }
    return factory(cfg);
  }
  throw ValidationError("unknown backend '" + cfg.kind + "' (expected toy or external)");
}

}  // namespace attrvr
