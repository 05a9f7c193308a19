#include "taco/remote.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <thread>

#include "httplib.h"
#include "json.hpp"
#include "taco/errors.hpp"

namespace taco::remote {

using nlohmann::json;

namespace {

std::string req_name(std::uint64_t key) {
  char buf[24];
  std::snprintf(buf, sizeof(buf), "req-%016llx", static_cast<unsigned long long>(key));
  return buf;
}

json request_body(const std::string& kind, const std::string& req_id,
                  const std::string& instruction,
                  const std::vector<data::Demonstration>& icds,
                  const data::QuerySample& query, const std::string& response) {
  json icd = json::array();
  for (const auto& d : icds) icd.push_back({{"text_q", d.text_q}, {"text_r", d.text_r}});
  json body = {{"protocol", kProtocolVersion}, {"req_id", req_id},     {"kind", kind},
               {"instruction", instruction},   {"icd", std::move(icd)}, {"query_text", query.text_q}};
  if (kind == "loglik") body["response_text"] = response;
  return body;
}

// Parses the reply and checks it echoes the request id; malformed bodies are
// protocol errors, not retryable transport faults.
json parse_reply(const std::string& body, const std::string& req_id) {
  json reply;
  try {
    reply = json::parse(body);
  } catch (const json::exception& e) {
    throw RuntimeFailure("remote scorer: malformed reply for " + req_id + ": " + e.what());
  }
  if (!reply.is_object() || !reply.contains("req_id") || !reply["req_id"].is_string())
    throw RuntimeFailure("remote scorer: reply for " + req_id + " lacks a req_id");
  if (reply["req_id"].get<std::string>() != req_id)
    throw RuntimeFailure("remote scorer: reply id " + reply["req_id"].get<std::string>() +
                         " does not match " + req_id);
  return reply;
}

}  // namespace

void EndpointConfig::validate() const {
  if (host.empty()) throw ValidationError("EndpointConfig: empty host");
  if (port < 1 || port > 65535)
    throw ValidationError("EndpointConfig: port " + std::to_string(port) + " out of range");
  if (path.empty() || path.front() != '/')
    throw ValidationError("EndpointConfig: path must start with '/'");
  if (!(timeout_sec > 0.0)) throw ValidationError("EndpointConfig: timeout must be positive");
  if (max_retries < 0) throw ValidationError("EndpointConfig: max_retries must be >= 0");
  if (backoff_initial_sec < 0.0)
    throw ValidationError("EndpointConfig: backoff must be >= 0");
  if (max_payload_bytes == 0)
    throw ValidationError("EndpointConfig: max_payload_bytes must be positive");
}

EndpointConfig endpoint_from_url(const std::string& url) {
  const char* op = "endpoint_from_url";
  std::string rest = url;
  const std::string scheme = "http://";
  if (rest.rfind(scheme, 0) == 0) rest = rest.substr(scheme.size());
  if (rest.rfind("https://", 0) == 0)
    throw ValidationError(std::string(op) + ": https endpoints are not supported");

  EndpointConfig cfg;
  size_t slash = rest.find('/');
  std::string authority = slash == std::string::npos ? rest : rest.substr(0, slash);
  if (slash != std::string::npos) cfg.path = rest.substr(slash);

  size_t colon = authority.rfind(':');
  if (colon == std::string::npos)
    throw ValidationError(std::string(op) + ": missing port in '" + url + "'");
  cfg.host = authority.substr(0, colon);
  std::string port_text = authority.substr(colon + 1);
  try {
    size_t used = 0;
    cfg.port = std::stoi(port_text, &used);
    if (used != port_text.size()) throw std::invalid_argument("trailing characters");
  } catch (const std::exception&) {
    throw ValidationError(std::string(op) + ": bad port in '" + url + "'");
  }
  cfg.validate();
  return cfg;
}

RemoteScorer::RemoteScorer(EndpointConfig cfg) : cfg_(std::move(cfg)) { cfg_.validate(); }

std::int64_t RemoteScorer::calls() const {
  std::lock_guard<std::mutex> lock(mu_);
  return calls_;
}

std::int64_t RemoteScorer::cache_hits() const {
  std::lock_guard<std::mutex> lock(mu_);
  return hits_;
}

std::string RemoteScorer::post_with_retries(const std::string& body, const std::string& req_id) {
  if (body.size() > cfg_.max_payload_bytes)
    throw ValidationError("remote scorer: request " + req_id + " payload of " +
                          std::to_string(body.size()) + " bytes exceeds the limit of " +
                          std::to_string(cfg_.max_payload_bytes));

  std::string last_error;
  for (int attempt = 0; attempt <= cfg_.max_retries; ++attempt) {
    if (attempt > 0) {
      double delay = cfg_.backoff_initial_sec * std::pow(2.0, attempt - 1);
      std::this_thread::sleep_for(std::chrono::duration<double>(delay));
    }
    httplib::Client client(cfg_.host, cfg_.port);
    client.set_connection_timeout(std::chrono::duration<double>(cfg_.timeout_sec));
    client.set_read_timeout(std::chrono::duration<double>(cfg_.timeout_sec));
    client.set_write_timeout(std::chrono::duration<double>(cfg_.timeout_sec));
    httplib::Result res = client.Post(cfg_.path, body, "application/json");
    if (!res) {
      last_error = "transport error: " + httplib::to_string(res.error());
      continue;
    }
    if (res->status != 200) {
      last_error = "status " + std::to_string(res->status);
      continue;
    }
    return res->body;
  }
  throw RuntimeFailure("remote scorer: request " + req_id + " failed after " +
                       std::to_string(cfg_.max_retries + 1) + " attempts (" + last_error + ")");
}

double RemoteScorer::loglik(const std::string& instruction,
                            const std::vector<data::Demonstration>& icds,
                            const data::QuerySample& query, const std::string& response) {
  std::uint64_t key = score::request_key(instruction, icds, query, response);
  std::string req_id = req_name(key);
  std::lock_guard<std::mutex> lock(mu_);
  calls_ += 1;
  auto cached = loglik_cache_.find(key);
  if (cached != loglik_cache_.end()) {
    hits_ += 1;
    return cached->second;
  }

  json body = request_body("loglik", req_id, instruction, icds, query, response);
  json reply = parse_reply(post_with_retries(body.dump(), req_id), req_id);
  if (!reply.contains("loglik") || !reply["loglik"].is_number())
    throw RuntimeFailure("remote scorer: reply for " + req_id + " lacks a numeric loglik");
  double value = reply["loglik"].get<double>();
  if (!std::isfinite(value))
    throw RuntimeFailure("remote scorer: non-finite loglik for " + req_id);
  loglik_cache_.emplace(key, value);
  return value;
}

std::map<std::string, double> RemoteScorer::label_probs(
    const std::string& instruction, const std::vector<data::Demonstration>& icds,
    const data::QuerySample& query) {
  // Same sentinel as the memoizing wrapper: label requests get their own key
  // space, disjoint from any real response string.
  std::uint64_t key = score::request_key(instruction, icds, query, "\x01label_probs");
  std::string req_id = req_name(key);
  std::lock_guard<std::mutex> lock(mu_);
  calls_ += 1;
  auto cached = probs_cache_.find(key);
  if (cached != probs_cache_.end()) {
    hits_ += 1;
    return cached->second;
  }

  json body = request_body("label_probs", req_id, instruction, icds, query, "");
  json reply = parse_reply(post_with_retries(body.dump(), req_id), req_id);
  if (!reply.contains("label_probs") || !reply["label_probs"].is_object())
    throw RuntimeFailure("remote scorer: reply for " + req_id + " lacks label_probs");
  std::map<std::string, double> probs;
  for (const auto& [label, p] : reply["label_probs"].items()) {
    if (!p.is_number() || !std::isfinite(p.get<double>()))
      throw RuntimeFailure("remote scorer: non-finite probability for " + req_id);
    probs[label] = p.get<double>();
  }
  if (probs.empty())
    throw RuntimeFailure("remote scorer: empty label_probs for " + req_id);
  probs_cache_.emplace(key, probs);
  return probs;
}

}  // namespace taco::remote
