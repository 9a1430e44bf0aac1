#pragma once

// Per-class descriptive (des) and distinctive (dist) attribute banks:
// prompt construction, generation through a text-generation client with the
// length filter and resampling, JSON persistence and embedding precompute.

#include <chrono>
#include <filesystem>
#include <fstream>
#include <future>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "attrvr/core.hpp"
#include "attrvr/encoders.hpp"

namespace attrvr {

inline constexpr int kBankSchemaVersion = 1;
inline constexpr std::size_t kMinAttributeLength = 21;  // entries must be longer than 20 characters
inline constexpr std::size_t kDefaultAttributesPerClass = 20;

enum class AttrKind { des, dist };

inline std::string_view to_string(AttrKind k) { return k == AttrKind::des ? "des" : "dist"; }

class GenerationError : public Error {
 public:
  using Error::Error;
};

class TransportError : public Error {
 public:
  TransportError(const std::string& what, int attempts = 1) : Error(what), attempts_(attempts) {}
  int attempts() const noexcept { return attempts_; }

 private:
  int attempts_;
};

/// Number of Unicode code points in a UTF-8 string.
inline std::size_t utf8_length(std::string_view s) {
  std::size_t n = 0;
  for (unsigned char c : s) {
    if ((c & 0xC0) != 0x80) ++n;
  }
  return n;
}

inline bool is_valid_attribute(std::string_view s) { return utf8_length(s) >= kMinAttributeLength; }

struct BankEmbeddings {
  std::vector<std::vector<Embedding>> des;   // [class][index]
  std::vector<std::vector<Embedding>> dist;  // [class][index]
  friend bool operator==(const BankEmbeddings&, const BankEmbeddings&) = default;
};

struct AttributeBank {
  std::vector<std::string> classes;
  std::string task_info;
  std::size_t m = kDefaultAttributesPerClass;
  std::vector<std::vector<std::string>> des;   // aligned with classes
  std::vector<std::vector<std::string>> dist;  // aligned with classes
  nlohmann::json provenance = nlohmann::json::object();
  std::optional<BankEmbeddings> embeddings;

  std::size_t num_classes() const noexcept { return classes.size(); }
  const std::vector<std::string>& entries(std::size_t cls, AttrKind kind) const {
    return kind == AttrKind::des ? des.at(cls) : dist.at(cls);
  }
  const std::vector<Embedding>& embeddings_of(std::size_t cls, AttrKind kind) const {
    if (!embeddings) throw StateError("attribute bank has no precomputed embeddings");
    return kind == AttrKind::des ? embeddings->des.at(cls) : embeddings->dist.at(cls);
  }

  friend bool operator==(const AttributeBank&, const AttributeBank&) = default;
};

/// Throws ParseError (with a JSON pointer) on the first violated invariant.
inline void validate_bank(const AttributeBank& bank) {
  if (bank.classes.empty()) throw ParseError("/classes", "bank has no classes");
  if (bank.m == 0) throw ParseError("/m", "m must be positive");
  if (bank.task_info.empty()) throw ParseError("/task_info", "task_info is empty");
  std::set<std::string> seen;
  for (std::size_t i = 0; i < bank.classes.size(); ++i) {
    if (bank.classes[i].empty()) throw ParseError(detail::concat("/classes/", i), "empty class name");
    if (!seen.insert(bank.classes[i]).second) {
      throw ParseError(detail::concat("/classes/", i), "duplicate class '" + bank.classes[i] + "'");
    }
  }
  auto check_lists = [&](const std::vector<std::vector<std::string>>& lists, AttrKind kind) {
    const std::string base = "/" + std::string(to_string(kind));
    if (lists.size() != bank.classes.size()) {
      throw ParseError(base, detail::concat("expected ", bank.classes.size(), " classes, found ",
                                            lists.size()));
    }
    for (std::size_t c = 0; c < lists.size(); ++c) {
      const std::string at = base + "/" + bank.classes[c];
      if (lists[c].size() != bank.m) {
        throw ParseError(at, detail::concat("expected exactly m=", bank.m, " entries, found ",
                                            lists[c].size()));
      }
      for (std::size_t i = 0; i < lists[c].size(); ++i) {
        if (!is_valid_attribute(lists[c][i])) {
          throw ParseError(detail::concat(at, "/", i),
                           detail::concat("entry has ", utf8_length(lists[c][i]),
                                          " characters; attributes must be longer than 20"));
        }
      }
    }
  };
  check_lists(bank.des, AttrKind::des);
  check_lists(bank.dist, AttrKind::dist);
  if (bank.embeddings) {
    auto check_emb = [&](const std::vector<std::vector<Embedding>>& e, AttrKind kind) {
      if (e.size() != bank.classes.size()) throw StateError("embedding table misses classes");
      for (std::size_t c = 0; c < e.size(); ++c) {
        if (e[c].size() != bank.entries(c, kind).size()) {
          throw StateError(detail::concat("embeddings for ", to_string(kind), "/", bank.classes[c],
                                          " do not cover every entry"));
        }
      }
    };
    check_emb(bank.embeddings->des, AttrKind::des);
    check_emb(bank.embeddings->dist, AttrKind::dist);
  }
}

// ---------------------------------------------------------------------------
// Prompts and generation
// ---------------------------------------------------------------------------

inline std::string build_prompt(AttrKind kind, std::string_view class_name, std::string_view task_info) {
  if (class_name.empty() || task_info.empty()) {
    throw ValidationError("build_prompt needs a class name and task info");
  }
  if (kind == AttrKind::des) {
    return detail::concat("Describe the appearance of the ", task_info, " ", class_name);
  }
  return detail::concat("Describe the unique appearance of a/an ", class_name, " from the other ",
                        task_info);
}

struct GenerationSettings {
  double temperature = 0.99;
  int max_tokens = 50;
  std::size_t entries_per_class = 25;
  std::string stop = ".";
  std::optional<std::uint64_t> seed;
};

inline nlohmann::json to_json(const GenerationSettings& s) {
  nlohmann::json j{{"temperature", s.temperature},
                   {"max_tokens", s.max_tokens},
                   {"entries_per_class", s.entries_per_class},
                   {"stop", s.stop}};
  j["seed"] = s.seed ? nlohmann::json(*s.seed) : nlohmann::json(nullptr);
  return j;
}

/// Synchronous text-generation service: one prompt in, candidate texts out.
class TextGenerationClient {
 public:
  virtual ~TextGenerationClient() = default;
  virtual std::string id() const = 0;
  virtual std::vector<std::string> complete(const std::string& prompt,
                                            const GenerationSettings& settings) const = 0;
};

/// Replays recorded responses keyed by prompt. Unknown prompts fail as transport errors.
class FixtureClient final : public TextGenerationClient {
 public:
  FixtureClient(std::string generator, std::map<std::string, std::vector<std::string>> responses)
      : generator_(std::move(generator)), responses_(std::move(responses)) {}

  /// Reads `<dir>/responses.json`: {"generator": str, "responses": {prompt: [str]}}.
  static FixtureClient from_directory(const std::filesystem::path& dir) {
    const auto path = dir / "responses.json";
    std::ifstream in(path);
    if (!in) throw IoError("cannot open fixture " + path.string());
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
      throw ParseError("", path.string() + ": " + e.what());
    }
    if (!j.is_object() || !j.contains("responses") || !j["responses"].is_object()) {
      throw ParseError("/responses", "fixture must contain a responses object");
    }
    std::map<std::string, std::vector<std::string>> responses;
    for (const auto& [prompt, list] : j["responses"].items()) {
      if (!list.is_array()) throw ParseError("/responses/" + prompt, "expected an array");
      for (const auto& s : list) {
        if (!s.is_string()) throw ParseError("/responses/" + prompt, "expected strings");
        responses[prompt].push_back(s.get<std::string>());
      }
    }
    return FixtureClient(j.value("generator", std::string("fixture")), std::move(responses));
  }

  std::string id() const override { return "fixture:" + generator_; }

  std::vector<std::string> complete(const std::string& prompt,
                                    const GenerationSettings& settings) const override {
    auto it = responses_.find(prompt);
    if (it == responses_.end()) throw TransportError("fixture has no response for prompt '" + prompt + "'");
    std::vector<std::string> out = it->second;
    if (out.size() > settings.entries_per_class) out.resize(settings.entries_per_class);
    return out;
  }

 private:
  std::string generator_;
  std::map<std::string, std::vector<std::string>> responses_;
};

struct RetryPolicy {
  int attempts = 3;
  std::chrono::milliseconds initial_backoff{500};
};

/// Calls the client with exponential backoff between failed attempts.
inline std::vector<std::string> complete_with_retry(const TextGenerationClient& client,
                                                    const std::string& prompt,
                                                    const GenerationSettings& settings,
                                                    const RetryPolicy& retry) {
  std::string last;
  auto backoff = retry.initial_backoff;
  const int attempts = std::max(1, retry.attempts);
  for (int attempt = 1; attempt <= attempts; ++attempt) {
    try {
      return client.complete(prompt, settings);
    } catch (const TransportError& e) {
      last = e.what();
    }
    if (attempt < attempts && backoff.count() > 0) {
      std::this_thread::sleep_for(backoff);
      backoff *= 2;
    }
  }
  throw TransportError(detail::concat("text generation failed after ", attempts,
                                      " attempts: ", last),
                       attempts);
}

/// Drops invalid candidates, keeps the first m valid ones in arrival order, and
/// pads a short list by seeded uniform resampling (with replacement) of the valid ones.
inline std::vector<std::string> filter_and_resample(const std::vector<std::string>& candidates,
                                                    std::size_t m, std::uint64_t seed,
                                                    const std::string& what) {
  std::vector<std::string> valid;
  for (const auto& c : candidates) {
    if (is_valid_attribute(c)) valid.push_back(c);
  }
  if (valid.empty()) {
    throw GenerationError("no valid attribute candidates (longer than 20 characters) for " + what);
  }
  if (valid.size() >= m) {
    valid.resize(m);
    return valid;
  }
  Rng rng(seed);
  const std::size_t n_valid = valid.size();
  while (valid.size() < m) valid.push_back(valid[rng.index(n_valid)]);
  return valid;
}

inline AttributeBank generate_bank(const std::vector<std::string>& classes,
                                   const std::string& task_info, std::size_t m,
                                   const GenerationSettings& settings,
                                   const TextGenerationClient& client, const RetryPolicy& retry = {},
                                   std::size_t max_concurrency = 1) {
  if (classes.empty()) throw ValidationError("generate_bank needs at least one class");
  if (m == 0) throw ValidationError("m must be positive");
  const std::uint64_t seed = settings.seed.value_or(0);

  struct ClassResult {
    std::vector<std::string> des, dist;
    std::string des_prompt, dist_prompt;
  };
  auto run_class = [&](std::size_t c) {
    ClassResult r;
    r.des_prompt = build_prompt(AttrKind::des, classes[c], task_info);
    r.dist_prompt = build_prompt(AttrKind::dist, classes[c], task_info);
    r.des = filter_and_resample(complete_with_retry(client, r.des_prompt, settings, retry), m,
                                derive_seed(seed, c, 0), "des/" + classes[c]);
    r.dist = filter_and_resample(complete_with_retry(client, r.dist_prompt, settings, retry), m,
                                 derive_seed(seed, c, 1), "dist/" + classes[c]);
    return r;
  };

  std::vector<ClassResult> results(classes.size());
  if (max_concurrency <= 1) {
    for (std::size_t c = 0; c < classes.size(); ++c) results[c] = run_class(c);
  } else {
    for (std::size_t start = 0; start < classes.size(); start += max_concurrency) {
      std::vector<std::future<ClassResult>> pending;
      const std::size_t stop = std::min(classes.size(), start + max_concurrency);
      for (std::size_t c = start; c < stop; ++c) {
        pending.push_back(std::async(std::launch::async, run_class, c));
      }
      for (std::size_t c = start; c < stop; ++c) results[c] = pending[c - start].get();
    }
  }

  AttributeBank bank;
  bank.classes = classes;
  bank.task_info = task_info;
  bank.m = m;
  nlohmann::json prompts = nlohmann::json::object();
  for (std::size_t c = 0; c < classes.size(); ++c) {
    bank.des.push_back(std::move(results[c].des));
    bank.dist.push_back(std::move(results[c].dist));
    prompts["des"][classes[c]] = {{"prompt", results[c].des_prompt},
                                  {"hash", hex64(fnv1a64(results[c].des_prompt))}};
    prompts["dist"][classes[c]] = {{"prompt", results[c].dist_prompt},
                                   {"hash", hex64(fnv1a64(results[c].dist_prompt))}};
  }
  bank.provenance = {{"generator", client.id()}, {"settings", to_json(settings)}, {"prompts", prompts}};
  validate_bank(bank);
  return bank;
}

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

inline nlohmann::json bank_to_json(const AttributeBank& bank) {
  nlohmann::json j;
  j["schema_version"] = kBankSchemaVersion;
  j["task_info"] = bank.task_info;
  j["m"] = bank.m;
  j["classes"] = bank.classes;
  j["des"] = nlohmann::json::object();
  j["dist"] = nlohmann::json::object();
  for (std::size_t c = 0; c < bank.classes.size(); ++c) {
    j["des"][bank.classes[c]] = bank.des[c];
    j["dist"][bank.classes[c]] = bank.dist[c];
  }
  j["provenance"] = bank.provenance;
  return j;
}

inline AttributeBank bank_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ParseError("", "bank must be a JSON object");
  static const std::set<std::string> kKnown{"schema_version", "task_info", "m", "classes",
                                            "des",            "dist",      "provenance"};
  for (const auto& [key, _] : j.items()) {
    if (!kKnown.contains(key)) throw ParseError("/" + key, "unknown field");
  }
  auto require = [&](const char* key) -> const nlohmann::json& {
    if (!j.contains(key)) throw ParseError(std::string("/") + key, "missing required field");
    return j.at(key);
  };
  const auto& version = require("schema_version");
  if (!version.is_number_integer() || version.get<int>() != kBankSchemaVersion) {
    throw ParseError("/schema_version", detail::concat("expected ", kBankSchemaVersion));
  }
  AttributeBank bank;
  const auto& task = require("task_info");
  if (!task.is_string()) throw ParseError("/task_info", "expected a string");
  bank.task_info = task.get<std::string>();
  const auto& m = require("m");
  if (!m.is_number_integer() || (!m.is_number_unsigned() && m.get<std::int64_t>() <= 0)) {
    throw ParseError("/m", "expected a positive integer");
  }
  bank.m = m.get<std::size_t>();
  const auto& classes = require("classes");
  if (!classes.is_array()) throw ParseError("/classes", "expected an array");
  for (std::size_t i = 0; i < classes.size(); ++i) {
    if (!classes[i].is_string()) throw ParseError(detail::concat("/classes/", i), "expected a string");
    bank.classes.push_back(classes[i].get<std::string>());
  }
  auto read_lists = [&](const char* key) {
    const auto& obj = require(key);
    const std::string base = std::string("/") + key;
    if (!obj.is_object()) throw ParseError(base, "expected an object keyed by class");
    for (const auto& [name, _] : obj.items()) {
      if (std::find(bank.classes.begin(), bank.classes.end(), name) == bank.classes.end()) {
        throw ParseError(base + "/" + name, "class not listed in /classes");
      }
    }
    std::vector<std::vector<std::string>> lists;
    for (const auto& name : bank.classes) {
      if (!obj.contains(name)) throw ParseError(base + "/" + name, "missing class");
      const auto& arr = obj.at(name);
      if (!arr.is_array()) throw ParseError(base + "/" + name, "expected an array");
      std::vector<std::string> list;
      for (std::size_t i = 0; i < arr.size(); ++i) {
        if (!arr[i].is_string()) {
          throw ParseError(detail::concat(base, "/", name, "/", i), "expected a string");
        }
        list.push_back(arr[i].get<std::string>());
      }
      lists.push_back(std::move(list));
    }
    return lists;
  };
  bank.des = read_lists("des");
  bank.dist = read_lists("dist");
  if (j.contains("provenance")) {
    if (!j["provenance"].is_object()) throw ParseError("/provenance", "expected an object");
    bank.provenance = j["provenance"];
  }
  validate_bank(bank);
  return bank;
}

inline void save_bank(const AttributeBank& bank, const std::filesystem::path& path) {
  validate_bank(bank);
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << bank_to_json(bank).dump(2) << '\n';
  if (!out) throw IoError("failed writing " + path.string());
}

inline AttributeBank load_bank(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError("", path.string() + ": " + e.what());
  }
  return bank_from_json(j);
}

/// Embeds every des/dist entry once with the given backend.
inline AttributeBank precompute_embeddings(AttributeBank bank, const EncoderBackend& backend) {
  BankEmbeddings e;
  for (std::size_t c = 0; c < bank.classes.size(); ++c) {
    e.des.push_back(embed_texts(backend, bank.des[c]));
    e.dist.push_back(embed_texts(backend, bank.dist[c]));
  }
  bank.embeddings = std::move(e);
  return bank;
}

}  // namespace attrvr
