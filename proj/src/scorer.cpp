#include "taco/scorer.hpp"

#include <bit>
#include <cstring>

#include "taco/errors.hpp"
#include "taco/rng.hpp"

namespace taco::score {

namespace {

void mix_bytes(std::uint64_t& h, const void* data, size_t n) {
  const auto* bytes = static_cast<const unsigned char*>(data);
  for (size_t i = 0; i < n; ++i) {
    h ^= bytes[i];
    h *= 1099511628211ull;
  }
}

void mix_string(std::uint64_t& h, const std::string& s) {
  std::uint64_t len = s.size();
  mix_bytes(h, &len, sizeof(len));
  mix_bytes(h, s.data(), s.size());
}

void mix_tensor(std::uint64_t& h, const num::Tensor& t) {
  std::uint64_t shape = (static_cast<std::uint64_t>(t.rows()) << 32) |
                        static_cast<std::uint32_t>(t.cols());
  mix_bytes(h, &shape, sizeof(shape));
  for (std::int64_t i = 0; i < t.numel(); ++i) {
    std::uint64_t bits = std::bit_cast<std::uint64_t>(t.data()[i]);
    mix_bytes(h, &bits, sizeof(bits));
  }
}

}  // namespace

std::uint64_t request_key(const std::string& instruction,
                          const std::vector<data::Demonstration>& icds,
                          const data::QuerySample& query, const std::string& response) {
  std::uint64_t h = 14695981039346656037ull;
  mix_string(h, instruction);
  std::uint64_t n = icds.size();
  mix_bytes(h, &n, sizeof(n));
  for (const auto& d : icds) {
    mix_string(h, d.id);
    mix_string(h, d.text_q);
    mix_string(h, d.text_r);
    mix_tensor(h, d.image_emb);
    mix_tensor(h, d.q_emb);
    mix_tensor(h, d.r_emb);
    mix_tensor(h, d.qr_emb);
  }
  mix_string(h, query.id);
  mix_string(h, query.text_q);
  mix_tensor(h, query.image_emb);
  mix_tensor(h, query.q_emb);
  mix_string(h, response);
  return num::mix64(h);
}

double MemoScorer::loglik(const std::string& instruction,
                          const std::vector<data::Demonstration>& icds,
                          const data::QuerySample& query, const std::string& response) {
  ++calls_;
  std::uint64_t key = request_key(instruction, icds, query, response);
  auto it = loglik_cache_.find(key);
  if (it != loglik_cache_.end()) {
    ++hits_;
    return it->second;
  }
  double value = inner_.loglik(instruction, icds, query, response);
  loglik_cache_.emplace(key, value);
  return value;
}

std::map<std::string, double> MemoScorer::label_probs(
    const std::string& instruction, const std::vector<data::Demonstration>& icds,
    const data::QuerySample& query) {
  ++calls_;
  std::uint64_t key = request_key(instruction, icds, query, "\x01label_probs");
  auto it = probs_cache_.find(key);
  if (it != probs_cache_.end()) {
    ++hits_;
    return it->second;
  }
  auto value = inner_.label_probs(instruction, icds, query);
  probs_cache_.emplace(key, value);
  return value;
}

}  // namespace taco::score
