#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "taco/autograd.hpp"
#include "taco/data.hpp"
#include "taco/fusion.hpp"

namespace taco::model {

struct DecoderConfig {
  int depth = 4;
  int d = 64;
  int heads = 4;
  int ffn_mult = 4;
  std::vector<int> l_ta = {2, 4};  // 1-based layers with task-aware attention
  double alpha_init = 1.0;
  // Numerical ceiling on -log(t): relevance near zero would otherwise blow up
  // the mask without bound.
  double log_t_cap = 20.0;
  // Study flag: place the query-coupling mask entries at (row 1, ICD columns)
  // as literally indexed, opening those positions in the attention support and
  // thereby breaking causality. Off by default: the causal transposed reading
  // puts them at (ICD rows, column 1).
  bool literal_query_coupling = false;
  // Ablation switches.
  bool with_task_token = true;   // anchor embedding added to the query token
  bool update_guider = true;     // refresh the guider between task-aware layers
  bool learned_tg_init = true;   // false: fixed random non-learnable guider
  // Output head: tied scores against the library's fused embeddings (default,
  // survives library swaps) or a free learned score table sized to the vocab.
  bool tied_head = true;
  GuiderInputFlags guider_flags; // zero one slice of the guider input
  FusionConfig fusion;

  void validate() const;  // throws ValidationError on inconsistency
};

// Canonical JSON round-trip; the hash keys checkpoint compatibility.
std::string config_to_json(const DecoderConfig& cfg);
DecoderConfig config_from_json(const std::string& text);
std::uint64_t config_hash(const DecoderConfig& cfg);

struct ForwardOptions {
  bool with_eos = true;
  // Pins every relevance weight to exactly 1, zeroing the task-aware mask;
  // the task-aware layers then reduce to plain causal attention.
  bool force_unit_relevance = false;
  // Drops task-aware attention entirely (every layer plain causal).
  bool disable_task_attention = false;
};

struct ForwardResult {
  TokenSequence tokens;
  Var hidden;                  // (T x d) last-layer states
  std::vector<Var> layer_hidden;  // (T x d) after each block, depth entries
  std::vector<Var> ta_masks;   // finite mask parts, one (T x T) per task-aware layer
  std::vector<Var> relevance;  // per task-aware layer: (n_icd x 1) weights
  Tensor attn_support;         // (T x T) 0/1 attention support shared by all layers
};

// The sequence-configuration model: fused-token decoder with task-aware
// attention, a guider refined across layers, and an output head tied to the
// library's fused embeddings plus a learned end-of-sequence score.
class TacoModel {
 public:
  TacoModel(const DecoderConfig& cfg, data::DemoLibrary library, std::uint64_t seed);

  const DecoderConfig& config() const { return cfg_; }
  const data::DemoLibrary& library() const { return library_; }
  ParamSet& params() { return params_; }
  const ParamSet& params() const { return params_; }
  // Parameter names excluded from optimizer updates.
  const std::vector<std::string>& frozen_params() const { return frozen_; }

  // Output vocabulary: library ids in sorted order; the end-of-sequence
  // pseudo-entry sits at index vocab_size() - 1.
  const std::vector<std::string>& demo_ids() const { return vocab_; }
  int vocab_size() const { return static_cast<int>(vocab_.size()) + 1; }
  int eos_index() const { return static_cast<int>(vocab_.size()); }
  int vocab_index(const std::string& id) const;  // throws on unknown id

  // Fused embeddings of the whole library (vocab order), shared by all logit
  // computations in one step so gradients accumulate once.
  Var library_embeddings() const;

  ForwardResult forward(const data::IclSequence& seq, const ForwardOptions& opts) const;

  // Scores for positions that predict: row p predicts the token at p+1.
  // Rows cover [query .. last ICD], i.e. n_icd + 1 rows of (V+1) scores.
  Var prediction_logits(const ForwardResult& fwd, const Var& lib_emb) const;

  // Scores from a single hidden row (generation): (1 x V+1).
  Var next_token_logits(const Var& hidden_row, const Var& lib_emb) const;

 private:
  DecoderConfig cfg_;
  data::DemoLibrary library_;
  ParamSet params_;
  std::vector<std::string> frozen_;
  std::vector<std::string> vocab_;
  std::map<std::string, int> vocab_index_;
};

// Parameter snapshot with the config and its hash; loading rejects a file
// whose config hash differs from the target model's.
void save_checkpoint(const TacoModel& model, const std::string& path);
void load_checkpoint(TacoModel& model, const std::string& path);

}  // namespace taco::model
