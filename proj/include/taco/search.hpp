#pragma once

#include <string>
#include <vector>

#include "taco/data.hpp"
#include "taco/decoder.hpp"
#include "taco/rng.hpp"
#include "taco/scorer.hpp"

namespace taco::search {

using taco::num::Rng;

// Training-data construction settings: shots per sequence, candidate pool of
// pool_per_shot*shots demonstrations per query, beam width (0 means 2*shots),
// and the clustering that selects the query set.
struct OracleConfig {
  int shots = 4;
  int pool_per_shot = 64;
  int beam = 0;
  int k_clusters = 10;
  int m_per_cluster = 4;

  int beam_width() const { return beam > 0 ? beam : 2 * shots; }
  void validate() const;
};

struct BeamConfig {
  int beam_width = 3;
  int shots = 4;

  void validate() const;
};

struct QuerySplit {
  std::vector<data::QuerySample> queries;  // K = k*m samples, truths attached
  data::DemoLibrary reduced;               // the library minus the queries
};

// k-means over image embeddings; the m members closest to each centroid
// become query samples (their responses travel as ground truths), the rest
// stay in the library. Empty or undersized clusters trigger reseeding, up to
// ten attempts.
QuerySplit select_query_set(const data::DemoLibrary& library, int k, int m, Rng& rng);

// Greedily appends the candidate with the largest incremental gain in the
// scorer's ground-truth log-likelihood; ties go to the lowest id.
std::vector<std::string> oracle_greedy(const data::DemoLibrary& library,
                                       const std::vector<std::string>& candidate_ids,
                                       const data::QuerySample& query,
                                       score::ScorerInterface& scorer, int shots);

struct ScoredSequence {
  std::vector<std::string> ids;
  double score = 0.0;
};

// Beam search over the same expansion rule; returns up to `beam` complete
// sequences, best first, ordered by (score, then id list). beam=1 reduces to
// oracle_greedy.
std::vector<ScoredSequence> oracle_beam(const data::DemoLibrary& library,
                                        const std::vector<std::string>& candidate_ids,
                                        const data::QuerySample& query,
                                        score::ScorerInterface& scorer, int shots, int beam);

struct BuildResult {
  data::SequenceDataset dataset;           // up to beam_width sequences per query
  std::vector<data::QuerySample> queries;  // the clustered query set
  data::DemoLibrary reduced;               // demonstration library after the split
};

// The full pipeline: cluster out the query set, sample a candidate pool per
// query (clamped with a warning when the library is small), and keep each
// query's top beam_width sequences by the oracle criterion.
BuildResult build_training_set(const data::DemoLibrary& library,
                               score::ScorerInterface& scorer, const OracleConfig& cfg,
                               Rng& rng);

// Autoregressive selection with the trained model: keeps cfg.beam_width
// partial sequences ranked by accumulated log-probability over the not-yet-
// used demonstrations (repeats and the end token are masked out), and returns
// the best complete cfg.shots-long sequence.
data::IclSequence beam_infer(const model::TacoModel& model,
                             const data::DemoLibrary& library,
                             const data::QuerySample& query, const BeamConfig& cfg);

// Uniform sample of n distinct demonstrations.
data::IclSequence baseline_rs(const data::DemoLibrary& library,
                              const data::QuerySample& query, int n, Rng& rng);

// Top n by image-image cosine.
data::IclSequence baseline_i2i(const data::DemoLibrary& library,
                               const data::QuerySample& query, int n);

// Top n by cosine of the concatenated, per-modality-normalized image+query
// embeddings.
data::IclSequence baseline_iq2iq(const data::DemoLibrary& library,
                                 const data::QuerySample& query, int n);

// Most likely label under a random-sampling prompt; the seed for that prompt
// comes from `rng`. Requires label probabilities.
std::string pseudo_response(const data::DemoLibrary& library, const data::QuerySample& query,
                            int n, score::ScorerInterface& scorer, Rng& rng);

// Three stages: pseudo response via RS, top 4n candidates by full-embedding
// (image+query+response) similarity, then top n of those by similarity between
// the demonstration's fused query+response embedding and the query's own
// query+pseudo-response composite.
data::IclSequence baseline_iqpr(const data::DemoLibrary& library,
                                const data::QuerySample& query, int n,
                                score::ScorerInterface& scorer, Rng& rng);

// Two stages: keep the k_top of n_perms random arrangements with the highest
// content-free label entropy, then pick the arrangement with the largest
// influence on the query's most likely label.
data::IclSequence baseline_demo(const data::DemoLibrary& library,
                                const data::QuerySample& query, int n,
                                score::ScorerInterface& scorer, int n_perms, int k_top,
                                Rng& rng);

}  // namespace taco::search
