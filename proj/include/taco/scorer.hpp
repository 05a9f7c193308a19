#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "taco/data.hpp"

namespace taco::score {

// A model that judges ICL sequences. `loglik` is the log-likelihood of
// `response` given the instruction, the ordered demonstrations, and the query;
// it must be finite and deterministic for fixed inputs. `label_probs` is an
// optional capability: a normalized distribution over the scorer's label set
// for the query. Implementations must tolerate concurrent calls.
class ScorerInterface {
 public:
  virtual ~ScorerInterface() = default;

  virtual double loglik(const std::string& instruction,
                        const std::vector<data::Demonstration>& icds,
                        const data::QuerySample& query,
                        const std::string& response) = 0;

  virtual bool supports_label_probs() const = 0;

  // Throws ValidationError when supports_label_probs() is false.
  virtual std::map<std::string, double> label_probs(
      const std::string& instruction, const std::vector<data::Demonstration>& icds,
      const data::QuerySample& query) = 0;
};

// Stable content key for one scoring request: covers instruction, every
// demonstration's id, label, and embeddings, the query, and the response, so
// perturbed copies sharing an id never collide.
std::uint64_t request_key(const std::string& instruction,
                          const std::vector<data::Demonstration>& icds,
                          const data::QuerySample& query, const std::string& response);

// Caching wrapper: identical requests are served from memory. Counters make
// cache behavior observable in tests and progress logs.
class MemoScorer : public ScorerInterface {
 public:
  explicit MemoScorer(ScorerInterface& inner) : inner_(inner) {}

  double loglik(const std::string& instruction,
                const std::vector<data::Demonstration>& icds,
                const data::QuerySample& query, const std::string& response) override;

  bool supports_label_probs() const override { return inner_.supports_label_probs(); }

  std::map<std::string, double> label_probs(const std::string& instruction,
                                            const std::vector<data::Demonstration>& icds,
                                            const data::QuerySample& query) override;

  std::int64_t calls() const { return calls_; }
  std::int64_t hits() const { return hits_; }

 private:
  ScorerInterface& inner_;
  std::map<std::uint64_t, double> loglik_cache_;
  std::map<std::uint64_t, std::map<std::string, double>> probs_cache_;
  std::int64_t calls_ = 0;
  std::int64_t hits_ = 0;
};

}  // namespace taco::score
