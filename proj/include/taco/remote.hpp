#pragma once

#include <cstdint>
#include <map>
#include <mutex>
#include <string>
#include <vector>

#include "taco/scorer.hpp"

namespace taco::remote {

// Where and how to reach an external scoring service. One request is a JSON
// object posted to http://host:port/path; the reply is a JSON object on the
// response body.
struct EndpointConfig {
  std::string host = "127.0.0.1";
  int port = 0;
  std::string path = "/score";
  double timeout_sec = 5.0;
  int max_retries = 3;                        // attempts beyond the first
  double backoff_initial_sec = 0.05;          // doubles after every failure
  std::size_t max_payload_bytes = 1u << 20u;  // request body ceiling

  void validate() const;
};

// Accepts "host:port", "host:port/path", or the same with an http:// scheme.
EndpointConfig endpoint_from_url(const std::string& url);

// Version tag stamped into every request so servers can reject strangers.
inline constexpr const char* kProtocolVersion = "taco-score/1";

// Bridge to an external scorer over the wire protocol. Requests carry only
// the textual surface of the sequence: {protocol, req_id, kind, instruction,
// icd: [{text_q, text_r}...], query_text, response_text}; replies are
// {req_id, loglik} or {req_id, label_probs: {label: p}}. Transport failures
// are retried with exponential backoff; replies are cached by request
// content. Safe under concurrent calls.
class RemoteScorer : public score::ScorerInterface {
 public:
  explicit RemoteScorer(EndpointConfig cfg);

  double loglik(const std::string& instruction,
                const std::vector<data::Demonstration>& icds,
                const data::QuerySample& query, const std::string& response) override;

  bool supports_label_probs() const override { return true; }

  std::map<std::string, double> label_probs(const std::string& instruction,
                                            const std::vector<data::Demonstration>& icds,
                                            const data::QuerySample& query) override;

  const EndpointConfig& config() const { return cfg_; }
  std::int64_t calls() const;       // scoring invocations
  std::int64_t cache_hits() const;  // answered without touching the network

 private:
  // Serializes, posts with retries, and returns the parsed reply body.
  std::string post_with_retries(const std::string& body, const std::string& req_id);

  EndpointConfig cfg_;
  mutable std::mutex mu_;
  std::map<std::uint64_t, double> loglik_cache_;
  std::map<std::uint64_t, std::map<std::string, double>> probs_cache_;
  std::int64_t calls_ = 0;
  std::int64_t hits_ = 0;
};

}  // namespace taco::remote
