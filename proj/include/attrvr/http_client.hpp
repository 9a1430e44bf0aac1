#pragma once

// Live attribute generation against an OpenAI-compatible /completions endpoint.
// Only plain http:// works unless the build defines CPPHTTPLIB_OPENSSL_SUPPORT.

#include <cstdlib>
#include <string>
#include <vector>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "attrvr/attributes.hpp"

namespace attrvr {

struct HttpClientConfig {
  std::string endpoint = "http://127.0.0.1:8000/v1";  // scheme://host[:port][/base]
  std::string model = "gpt-3.5-turbo-instruct";
  std::string api_key_env = "ATTRVR_API_KEY";
  int timeout_seconds = 60;
};

struct ParsedEndpoint {
  std::string origin;  // scheme://host[:port]
  std::string base;    // path prefix without trailing slash
};

inline ParsedEndpoint parse_endpoint(const std::string& url) {
  const auto scheme_end = url.find("://");
  if (scheme_end == std::string::npos) throw ValidationError("endpoint '" + url + "' has no scheme");
  const std::string scheme = url.substr(0, scheme_end);
  if (scheme != "http" && scheme != "https") throw ValidationError("unsupported endpoint scheme '" + scheme + "'");
#ifndef CPPHTTPLIB_OPENSSL_SUPPORT
  if (scheme == "https") {
    throw DependencyError("https endpoints need a build with ATTRVR_WITH_OPENSSL=ON");
  }
#endif
  const auto path_start = url.find('/', scheme_end + 3);
  ParsedEndpoint p;
  p.origin = url.substr(0, path_start);
  p.base = path_start == std::string::npos ? "" : url.substr(path_start);
  while (!p.base.empty() && p.base.back() == '/') p.base.pop_back();
  if (p.origin.size() <= scheme_end + 3) throw ValidationError("endpoint '" + url + "' has no host");
  return p;
}

/// Requests `entries_per_class` completions per prompt. Connection failures, 429 and
/// 5xx responses are transport errors (retried by complete_with_retry); other
/// failures are generation errors.
class HttpCompletionsClient final : public TextGenerationClient {
 public:
  explicit HttpCompletionsClient(HttpClientConfig cfg) : cfg_(std::move(cfg)), ep_(parse_endpoint(cfg_.endpoint)) {}

  std::string id() const override { return "completions:" + cfg_.model; }

  std::vector<std::string> complete(const std::string& prompt, const GenerationSettings& settings) const override {
    httplib::Client cli(ep_.origin);
    cli.set_connection_timeout(cfg_.timeout_seconds, 0);
    cli.set_read_timeout(cfg_.timeout_seconds, 0);
    httplib::Headers headers;
    if (const char* key = std::getenv(cfg_.api_key_env.c_str()); key != nullptr && *key != '\0') {
      headers.emplace("Authorization", std::string("Bearer ") + key);
    }
    nlohmann::json body{{"model", cfg_.model},
                        {"prompt", prompt},
                        {"temperature", settings.temperature},
                        {"max_tokens", settings.max_tokens},
                        {"n", settings.entries_per_class},
                        {"stop", settings.stop}};
    if (settings.seed) body["seed"] = *settings.seed;
    auto res = cli.Post(ep_.base + "/completions", headers, body.dump(), "application/json");
    if (!res) {
      throw TransportError("request to " + cfg_.endpoint + " failed: " + httplib::to_string(res.error()));
    }
    if (res->status == 429 || res->status >= 500) {
      throw TransportError(detail::concat("endpoint returned HTTP ", res->status));
    }
    if (res->status != 200) {
      throw GenerationError(detail::concat("endpoint returned HTTP ", res->status, ": ", res->body.substr(0, 200)));
    }
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(res->body);
    } catch (const nlohmann::json::parse_error& e) {
      throw GenerationError(std::string("endpoint returned invalid JSON: ") + e.what());
    }
    if (!j.contains("choices") || !j["choices"].is_array()) throw GenerationError("response has no choices array");
    std::vector<std::string> out;
    for (const auto& c : j["choices"]) {
      if (!c.contains("text") || !c["text"].is_string()) continue;
      std::string t = c["text"];
      const auto b = t.find_first_not_of(" \t\r\n");
      const auto e = t.find_last_not_of(" \t\r\n");
      out.push_back(b == std::string::npos ? "" : t.substr(b, e - b + 1));
    }
    return out;
  }

 private:
  HttpClientConfig cfg_;
  ParsedEndpoint ep_;
};

}  // namespace attrvr
