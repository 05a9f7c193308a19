#pragma once

#include <string>
#include <vector>

#include "taco/autograd.hpp"
#include "taco/data.hpp"
#include "taco/rng.hpp"

namespace taco::model {

using taco::data::DemoLibrary;
using taco::data::Demonstration;
using taco::data::IclSequence;
using taco::data::QuerySample;
using taco::num::ParamSet;
using taco::num::Rng;
using taco::num::Tensor;
using taco::num::Var;

enum class FusionMode { binary, ternary, concat };

struct FusionConfig {
  int d = 64;
  FusionMode mode = FusionMode::binary;
  // Ternary mode caps the squared norm of the three weights; theta = 1 leaves
  // the simplex unconstrained, theta = 1/3 pins the weights to uniform.
  double theta = 0.6;
  // Collapse the binary gate to a single shared sigmoid instead of one per
  // coordinate.
  bool scalar_gate = false;
  // Learned linear maps from library dims to d; required when dims differ.
  bool project_inputs = false;
  int d_img = 64;
  int d_txt = 64;
};

FusionMode fusion_mode_from_string(const std::string& s);
std::string to_string(FusionMode mode);

// Creates every parameter the fusion layer needs under the "fusion." and
// "embed." prefixes. `demo_ids` feeds the per-demonstration residuals of
// concat mode and is ignored otherwise. `learned_tg` = false skips the
// guider initialization weight (the caller supplies a fixed guider instead).
void init_fusion_params(ParamSet& params, const FusionConfig& cfg,
                        const std::vector<std::string>& demo_ids, Rng& rng,
                        bool learned_tg = true);

// Library embeddings enter the graph through these; identity when dims match,
// learned projection otherwise (config error when neither applies).
Var project_image(const Tensor& emb, const ParamSet& params, const FusionConfig& cfg);
Var project_text(const Tensor& emb, const ParamSet& params, const FusionConfig& cfg);

// One demonstration token embedding (1 x d) from its modal parts.
Var fuse_demo(const Demonstration& demo, const ParamSet& params,
              const FusionConfig& cfg);

// Every library demonstration fused in one batched pass, rows in id-sorted
// order (the output vocabulary order). Equals stacking fuse_demo results.
Var fuse_all_demos(const DemoLibrary& library, const ParamSet& params,
                   const FusionConfig& cfg);

// The query token: modal fusion with an empty response slot, plus the
// learnable task anchor embedding (omitted when with_task is false).
Var fuse_query(const QuerySample& query, const ParamSet& params,
               const FusionConfig& cfg, bool with_task = true);

enum class TokenRole { BOS, TASK_QUERY, ICD, EOS };

// The decoder input: [BOS, TASK_QUERY, ICD x n, EOS?]. The query token always
// sits at position 1; icd_positions lists where each selected demonstration
// landed, parallel to icd_ids.
struct TokenSequence {
  std::vector<Var> embeddings;
  std::vector<TokenRole> roles;
  std::vector<int> icd_positions;
  std::vector<std::string> icd_ids;
  int query_position = 1;

  int length() const { return static_cast<int>(embeddings.size()); }
  Var stacked() const;  // (length x d)
};

TokenSequence build_token_sequence(const IclSequence& seq, const DemoLibrary& library,
                                   const ParamSet& params, const FusionConfig& cfg,
                                   bool with_eos, bool with_task = true);

// Ablation switches: zero out one slice of the guider's tripartite input.
struct GuiderInputFlags {
  bool zero_image = false;
  bool zero_query = false;
  bool zero_inst = false;
};

// Initial task guider state (1 x d) from the query's image and text
// embeddings and the simplified-instruction embedding.
Var init_task_guider(const QuerySample& query, const Tensor& inst_emb,
                     const ParamSet& params, const FusionConfig& cfg,
                     GuiderInputFlags flags = {});

}  // namespace taco::model
