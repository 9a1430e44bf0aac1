#pragma once

// Flat key = value config files (a TOML subset: strings, numbers, booleans,
// single-line arrays, # comments) and the run configuration they describe.

#include <charconv>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>

#include <nlohmann/json.hpp>

#include "attrvr/encoders.hpp"
#include "attrvr/separability.hpp"
#include "attrvr/training.hpp"

namespace attrvr {

namespace detail {

class FlatParser {
 public:
  FlatParser(std::string_view text, std::size_t line) : s_(text), line_(line) {}

  nlohmann::json value() {
    skip_ws();
    if (pos_ >= s_.size()) fail("missing value");
    const char c = s_[pos_];
    if (c == '"') return string();
    if (c == '[') return array();
    if (s_.substr(pos_, 4) == "true") {
      pos_ += 4;
      return true;
    }
    if (s_.substr(pos_, 5) == "false") {
      pos_ += 5;
      return false;
    }
    return number();
  }

  void finish() {
    skip_ws();
    if (pos_ < s_.size() && s_[pos_] != '#') fail("trailing characters after value");
  }

 private:
  [[noreturn]] void fail(const std::string& what) const {
    throw ParseError(detail::concat("line ", line_), what);
  }

  void skip_ws() {
    while (pos_ < s_.size() && (s_[pos_] == ' ' || s_[pos_] == '\t')) ++pos_;
  }

  nlohmann::json string() {
    ++pos_;
    std::string out;
    while (pos_ < s_.size() && s_[pos_] != '"') {
      char c = s_[pos_++];
      if (c == '\\') {
        if (pos_ >= s_.size()) fail("unterminated escape");
        const char e = s_[pos_++];
        switch (e) {
          case 'n': c = '\n'; break;
          case 't': c = '\t'; break;
          case '"': c = '"'; break;
          case '\\': c = '\\'; break;
          default: fail(std::string("unsupported escape \\") + e);
        }
      }
      out.push_back(c);
    }
    if (pos_ >= s_.size()) fail("unterminated string");
    ++pos_;
    return out;
  }

  nlohmann::json array() {
    ++pos_;
    nlohmann::json out = nlohmann::json::array();
    skip_ws();
    if (pos_ < s_.size() && s_[pos_] == ']') {
      ++pos_;
      return out;
    }
    while (true) {
      out.push_back(value());
      skip_ws();
      if (pos_ >= s_.size()) fail("unterminated array");
      if (s_[pos_] == ',') {
        ++pos_;
        skip_ws();
        if (pos_ < s_.size() && s_[pos_] == ']') {
          ++pos_;
          return out;
        }
        continue;
      }
      if (s_[pos_] == ']') {
        ++pos_;
        return out;
      }
      fail("expected ',' or ']' in array");
    }
  }

  nlohmann::json number() {
    const std::size_t start = pos_;
    while (pos_ < s_.size() && std::string_view("+-0123456789.eE_").find(s_[pos_]) != std::string_view::npos) ++pos_;
    std::string tok;
    for (char c : s_.substr(start, pos_ - start)) {
      if (c != '_') tok.push_back(c);
    }
    if (tok.empty()) fail("expected a value");
    if (tok.find_first_of(".eE") == std::string::npos) {
      std::int64_t v = 0;
      const char* b = tok.data() + (tok[0] == '+' ? 1 : 0);
      auto [p, ec] = std::from_chars(b, tok.data() + tok.size(), v);
      if (ec != std::errc() || p != tok.data() + tok.size()) fail("bad integer '" + tok + "'");
      if (v >= 0) return static_cast<std::uint64_t>(v);
      return v;
    }
    std::istringstream in(tok);
    in.imbue(std::locale::classic());
    double v = 0.0;
    in >> v;
    if (!in || in.peek() != std::char_traits<char>::eof()) fail("bad number '" + tok + "'");
    return v;
  }

  std::string_view s_;
  std::size_t pos_ = 0;
  std::size_t line_;
};

}  // namespace detail

/// Parses a flat config document into a JSON object. Duplicate keys and tables are rejected.
inline nlohmann::json parse_flat_config(std::string_view text) {
  nlohmann::json out = nlohmann::json::object();
  std::size_t line_no = 0;
  std::size_t start = 0;
  while (start <= text.size()) {
    std::size_t end = text.find('\n', start);
    if (end == std::string_view::npos) end = text.size();
    std::string_view line = text.substr(start, end - start);
    ++line_no;
    start = end + 1;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    const auto first = line.find_first_not_of(" \t");
    if (first == std::string_view::npos || line[first] == '#') {
      if (end == text.size()) break;
      continue;
    }
    if (line[first] == '[') throw ParseError(detail::concat("line ", line_no), "tables are not supported");
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) throw ParseError(detail::concat("line ", line_no), "expected key = value");
    std::string_view key = line.substr(first, eq - first);
    while (!key.empty() && (key.back() == ' ' || key.back() == '\t')) key.remove_suffix(1);
    if (key.empty()) throw ParseError(detail::concat("line ", line_no), "empty key");
    for (char c : key) {
      if (!(std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '-')) {
        throw ParseError(detail::concat("line ", line_no), "bad key '" + std::string(key) + "'");
      }
    }
    if (out.contains(std::string(key))) {
      throw ParseError(detail::concat("line ", line_no), "duplicate key '" + std::string(key) + "'");
    }
    detail::FlatParser p(line.substr(eq + 1), line_no);
    out[std::string(key)] = p.value();
    p.finish();
    if (end == text.size()) break;
  }
  return out;
}

inline nlohmann::json load_flat_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_flat_config(ss.str());
}

// ---------------------------------------------------------------------------
// Run configuration
// ---------------------------------------------------------------------------

struct DataConfig {
  std::string dataset = "shapes7";  // "shapes7" or a manifest path
  std::size_t shots = 16;
  std::size_t val_per_class = 4;
  std::size_t per_class = 48;  // shapes7 only
  std::uint64_t data_seed = 0;
};

struct RunConfig {
  TrainConfig train;
  DataConfig data;
  BackendConfig backend;
};

/// Desk-scale defaults: toy backend (16x16 input, 256-wide hidden layer), 2-pixel pad
/// frame, 50 epochs. lr was picked by the label baseline's validation accuracy.
inline RunConfig toy_run_defaults() {
  RunConfig r;
  r.train.epochs = 50;
  r.train.frame = 2;
  r.train.vp_frame = 3;
  r.train.lr = 0.1;
  r.backend.toy.hidden_dim = 256;
  r.train.batch_size = 16;
  return r;
}

namespace detail {

template <class T>
T get_as(const nlohmann::json& j, const std::string& key) {
  try {
    if constexpr (std::is_same_v<T, double>) {
      if (!j.is_number()) throw ParseError("/" + key, "expected a number");
      return j.get<double>();
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!j.is_string()) throw ParseError("/" + key, "expected a string");
      return j.get<std::string>();
    } else if constexpr (std::is_same_v<T, bool>) {
      if (!j.is_boolean()) throw ParseError("/" + key, "expected a boolean");
      return j.get<bool>();
    } else {
      if (!j.is_number_integer() || (!j.is_number_unsigned() && j.get<std::int64_t>() < 0)) {
        throw ParseError("/" + key, "expected a non-negative integer");
      }
      return static_cast<T>(j.get<std::uint64_t>());
    }
  } catch (const nlohmann::json::exception& e) {
    throw ParseError("/" + key, e.what());
  }
}

}  // namespace detail

/// Overlays the keys of `j` on `base`. Keys outside `allowed_extra` that are not
/// run-config keys are rejected.
inline RunConfig apply_run_config(const nlohmann::json& j, RunConfig base = toy_run_defaults(),
                                  const std::set<std::string>& allowed_extra = {}) {
  if (!j.is_object()) throw ParseError("", "config must be a key/value document");
  RunConfig r = std::move(base);
  TrainConfig& t = r.train;
  for (const auto& [key, v] : j.items()) {
    using detail::get_as;
    if (key == "epochs") t.epochs = get_as<std::size_t>(v, key);
    else if (key == "lr") t.lr = get_as<double>(v, key);
    else if (key == "momentum") t.momentum = get_as<double>(v, key);
    else if (key == "batch_size") t.batch_size = get_as<std::size_t>(v, key);
    else if (key == "frame") t.frame = get_as<std::size_t>(v, key);
    else if (key == "vp_frame") t.vp_frame = get_as<std::size_t>(v, key);
    else if (key == "k") t.k = get_as<std::size_t>(v, key);
    else if (key == "lambda") t.lambda = get_as<double>(v, key);
    else if (key == "variant") t.variant = parse_aggregation(get_as<std::string>(v, key));
    else if (key == "rnd_seed") t.rnd_seed = v.is_null() ? std::nullopt : std::optional(get_as<std::uint64_t>(v, key));
    else if (key == "seed") t.seed = get_as<std::uint64_t>(v, key);
    else if (key == "method") t.method = parse_method(get_as<std::string>(v, key));
    else if (key == "template") t.templ = get_as<std::string>(v, key);
    else if (key == "schedule") t.schedule = get_as<std::string>(v, key);
    else if (key == "resize_interior") t.resize_interior = get_as<bool>(v, key);
    else if (key == "clamp") t.clamp = get_as<bool>(v, key);
    else if (key == "dataset") r.data.dataset = get_as<std::string>(v, key);
    else if (key == "shots") r.data.shots = get_as<std::size_t>(v, key);
    else if (key == "val_per_class") r.data.val_per_class = get_as<std::size_t>(v, key);
    else if (key == "per_class") r.data.per_class = get_as<std::size_t>(v, key);
    else if (key == "data_seed") r.data.data_seed = get_as<std::uint64_t>(v, key);
    else if (key == "backend") r.backend.kind = get_as<std::string>(v, key);
    else if (key == "model_name") r.backend.model_name = get_as<std::string>(v, key);
    else if (key == "toy_seed") r.backend.toy.seed = get_as<std::uint64_t>(v, key);
    else if (key == "embed_dim") r.backend.toy.embed_dim = get_as<std::size_t>(v, key);
    else if (key == "hidden_dim") r.backend.toy.hidden_dim = get_as<std::size_t>(v, key);
    else if (key == "image_size") {
      const auto s = get_as<std::size_t>(v, key);
      r.backend.toy.input.height = s;
      r.backend.toy.input.width = s;
    } else if (key == "temperature") r.backend.toy.temperature = get_as<double>(v, key);
    else if (allowed_extra.count(key) == 0) throw ParseError("/" + key, "unknown config key '" + key + "'");
  }
  validate(r.train);
  return r;
}

inline nlohmann::json to_json(const RunConfig& r) {
  nlohmann::json j = to_json(r.train);
  j["dataset"] = r.data.dataset;
  j["shots"] = r.data.shots;
  j["val_per_class"] = r.data.val_per_class;
  j["per_class"] = r.data.per_class;
  j["data_seed"] = r.data.data_seed;
  j["backend"] = r.backend.kind;
  j["model_name"] = r.backend.model_name;
  j["toy_seed"] = r.backend.toy.seed;
  j["embed_dim"] = r.backend.toy.embed_dim;
  j["hidden_dim"] = r.backend.toy.hidden_dim;
  j["image_size"] = r.backend.toy.input.height;
  j["temperature"] = r.backend.toy.temperature;
  return j;
}

inline std::uint64_t config_hash(const RunConfig& r) { return hash_json(to_json(r)); }

/// Overlays flat keys on a lemma generator config; unknown keys are rejected.
inline LemmaConfig lemma_config_from_json(const nlohmann::json& j, LemmaConfig c = {}) {
  if (!j.is_object()) throw ParseError("", "config must be a key/value document");
  for (const auto& [key, v] : j.items()) {
    using detail::get_as;
    if (key == "classes") c.classes = get_as<std::size_t>(v, key);
    else if (key == "samples_per_class") c.samples_per_class = get_as<std::size_t>(v, key);
    else if (key == "dim") c.dim = get_as<std::size_t>(v, key);
    else if (key == "pool_per_class") c.pool_per_class = get_as<std::size_t>(v, key);
    else if (key == "n_des") c.n_des = get_as<std::size_t>(v, key);
    else if (key == "n_dist") c.n_dist = get_as<std::size_t>(v, key);
    else if (key == "noise") c.noise = get_as<double>(v, key);
    else if (key == "attr_spread") c.attr_spread = get_as<double>(v, key);
    else if (key == "label_class_part") c.label_class_part = get_as<double>(v, key);
    else if (key == "pull") c.pull = get_as<double>(v, key);
    else if (key == "steps") c.steps = get_as<std::size_t>(v, key);
    else if (key == "push") c.push = get_as<double>(v, key);
    else if (key == "lambda") c.lambda = get_as<double>(v, key);
    else if (key == "seed") c.seed = get_as<std::uint64_t>(v, key);
    else if (key == "degenerate") c.degenerate = get_as<bool>(v, key);
    else throw ParseError("/" + key, "unknown lemma config key '" + key + "'");
  }
  return c;
}

}  // namespace attrvr
