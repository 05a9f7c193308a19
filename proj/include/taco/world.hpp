#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "taco/data.hpp"
#include "taco/rng.hpp"
#include "taco/scorer.hpp"
#include "taco/tensor.hpp"

namespace taco::world {

using taco::num::Rng;
using taco::num::Tensor;

// A controllable classification universe. Each cluster is one task mapping: a
// latent centroid plus a content direction; an item's content bit selects one
// of the cluster's two labels. Image embeddings mix the latent through A and
// add a style vector (visual signal that can be made misleading); text
// embeddings mix the latent through B. One cluster = every demonstration
// shares the same mapping; several clusters = heterogeneous mappings.
struct WorldSpec {
  int latent_dim = 4;
  int emb_dim = 16;
  int clusters = 1;
  int demos_per_cluster = 40;
  int queries_per_cluster = 10;
  double centroid_sep = 4.0;     // min pairwise centroid distance, in noise units
  double content_scale = 1.0;    // latent offset between the two content bits
  double style_scale = 0.0;      // norm of the style vectors (0 = no styles)
  double style_home_prob = 1.0;  // demo keeps its cluster's own style w.p. this
  double img_noise = 0.05;
  double txt_noise = 0.05;
  double label_emb_scale = 1.0;  // label component mixed into r/qr embeddings
  std::string instruction = "map each item to its label";
  // Two labels per cluster; autogenerated ("c0a"/"c0b", ...) when empty.
  std::vector<std::array<std::string, 2>> labels;

  void validate() const;
};

struct SyntheticWorld {
  WorldSpec spec;
  Tensor A;  // emb_dim x latent_dim, image mixing
  Tensor B;  // emb_dim x latent_dim, text mixing
  std::vector<Tensor> centroids;     // 1 x latent_dim per cluster
  std::vector<Tensor> content_dirs;  // unit 1 x latent_dim per cluster
  std::vector<Tensor> styles;        // 1 x emb_dim per cluster ("home" styles)
  std::vector<std::array<std::string, 2>> labels;

  struct ItemMeta {
    int cluster = 0;
    int bit = 0;
  };
  std::map<std::string, ItemMeta> items;  // every generated demo and query id

  const ItemMeta& item(const std::string& id) const;  // throws on unknown id
  std::string true_label(const ItemMeta& m) const;
  std::vector<std::string> all_labels() const;  // sorted, deduplicated
  // Clean text embedding of a cluster's centroid (1 x emb_dim): B·tau_c.
  Tensor text_centroid(int cluster) const;
  // Deterministic unit embedding of a label string (1 x emb_dim).
  Tensor label_embedding(const std::string& label) const;
};

struct GeneratedWorld {
  SyntheticWorld world;
  data::DemoLibrary library;
  std::vector<data::QuerySample> queries;
};

// Draws mixing matrices, separated centroids, styles, demos, and queries.
// Demo/query meta records cluster and content bit; query ground truths are
// filled in. Throws when centroid separation cannot be met.
GeneratedWorld generate_world(const WorldSpec& spec, Rng& rng);

void save_world(const SyntheticWorld& world, const std::string& path);
SyntheticWorld load_world(const std::string& path);

// Presets used across the evaluation suite.
WorldSpec specific_mapping_spec();     // one cluster, labels "no"/"yes"
WorldSpec generalized_mapping_spec();  // several clusters, mild styles
WorldSpec style_dominant_spec();       // styles dominate images and mislead I2I

// Scoring constants. `order_invariant` weighs all positions equally (sequence
// score depends only on the demonstration set); `position_weighted` decays
// weights linearly with position, making order matter.
struct ScorerParams {
  enum class Mode { order_invariant, position_weighted };
  Mode mode = Mode::order_invariant;
  double align = 1.0;          // alignment term gain
  double cohesion = 0.25;      // spread-around-the-mean term gain
  double label_penalty = 2.0;  // per mismatched label
  double pos_slope = 0.15;     // w_i = max(pos_floor, 1 - pos_slope*(i-1))
  double pos_floor = 0.1;
  double prior_gain = 4.0;       // pull toward the true label, scaled by recognition
  double vote_gain = 0.4;        // per-label evidence from demonstrated responses
  double recog_align = 0.5;      // alignment decay inside recognition
  double recog_cohesion = 0.25;  // spread decay inside recognition
  double recog_floor = 0.1;      // recognition left when every label is wrong
  double zero_shot_recog = 0.3;  // recognition with no demonstrations
  double noise = 0.05;           // deterministic per-(query,label) logit jitter
  std::uint64_t seed = 0;

  void validate() const;
};

// Closed-form stand-in for a scoring model. loglik is
//   -align * sum_i w_i ||tau_i - tau_hat||^2
//   -cohesion * sum_i ||tau_i - mean(tau)||^2
//   -label_penalty * (sum_i w_i [stated_i != true_i] + [response != query truth])
// where latents are estimated from embeddings via the mixing pseudo-inverses,
// so perturbing embeddings or labels moves the score. label_probs is a softmax
// over the query's label set combining a recognition-scaled prior toward the
// true label, demonstration votes, and seeded jitter.
class SyntheticScorer : public score::ScorerInterface {
 public:
  SyntheticScorer(const SyntheticWorld& world, ScorerParams params);

  double loglik(const std::string& instruction,
                const std::vector<data::Demonstration>& icds,
                const data::QuerySample& query, const std::string& response) override;

  bool supports_label_probs() const override { return true; }

  std::map<std::string, double> label_probs(const std::string& instruction,
                                            const std::vector<data::Demonstration>& icds,
                                            const data::QuerySample& query) override;

  // Latent estimate from an item's embeddings (averages the image and text
  // estimates; zero-only embeddings give the zero latent).
  Tensor estimate_latent(const Tensor& image_emb, const Tensor& q_emb) const;

  const ScorerParams& params() const { return params_; }
  const SyntheticWorld& world() const { return world_; }

 private:
  SyntheticWorld world_;
  ScorerParams params_;
  Tensor pinv_a_;  // latent_dim x emb_dim
  Tensor pinv_b_;
};

// Perturbation operators over materialized sequences. Ops are pure: they
// return modified copies and never touch their inputs.
enum class PerturbKind { easier_mapping, harder_mapping, wrong_labels, blurred_images };
enum class PerturbTarget { all_icds, query_only };

struct PerturbationOp {
  PerturbKind kind = PerturbKind::easier_mapping;
  PerturbTarget target = PerturbTarget::all_icds;
  double em_factor = 1.0;        // 1 => q_emb lands exactly on the clean centroid
  double wl_flip_fraction = 0.75;
  double bi_noise_std = 0.0;
  std::map<std::string, Tensor> em_targets;         // item id -> clean text centroid
  std::map<std::string, std::string> hm_remap;      // label -> reserved non-semantic id
  std::map<std::string, std::string> wl_flip_table; // label -> its cluster sibling
};

PerturbationOp make_em(const SyntheticWorld& world, double factor, PerturbTarget target);
PerturbationOp make_hm(const SyntheticWorld& world);
PerturbationOp make_wl(const SyntheticWorld& world, double flip_fraction);
// std_scale multiplies the library's pooled per-component image std.
PerturbationOp make_bi(const SyntheticWorld& world, const data::DemoLibrary& library,
                       double std_scale, PerturbTarget target);

// One materialized evaluation item: the sequence's demonstrations copied out
// of the library so they can be perturbed or replaced independently.
struct EvalInstance {
  std::string instruction;
  std::vector<data::Demonstration> icds;
  data::QuerySample query;
};

EvalInstance materialize(const data::DemoLibrary& library, const data::IclSequence& seq);

EvalInstance apply_perturbation(const PerturbationOp& op, const EvalInstance& in, Rng& rng);

}  // namespace taco::world
