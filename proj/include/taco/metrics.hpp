#pragma once

#include <string>
#include <vector>

#include "taco/data.hpp"
#include "taco/rng.hpp"
#include "taco/scorer.hpp"
#include "taco/world.hpp"

namespace taco::metrics {

using taco::num::Rng;

// What "performance" means inside the disruption gap: the scorer's
// ground-truth log-likelihood (continuous, the default) or 0/1 label accuracy.
enum class Metric { loglik, accuracy };

// Population mean and standard deviation (the biased, divide-by-n form).
double mean(const std::vector<double>& xs);
double population_std(const std::vector<double>& xs);

// True when the scorer's most likely label for the query equals its ground
// truth; argmax ties resolve to the lexicographically lowest label.
bool label_correct(const std::string& instruction,
                   const std::vector<data::Demonstration>& icds,
                   const data::QuerySample& query, score::ScorerInterface& scorer);

// Fraction of sequences whose query is labeled correctly. Empty input or a
// query without ground truth is an error.
double evaluate_accuracy(const std::vector<data::IclSequence>& sequences,
                         const data::DemoLibrary& library, score::ScorerInterface& scorer);

// Same, over materialized (possibly perturbed) instances.
double evaluate_accuracy_instances(const std::vector<world::EvalInstance>& instances,
                                   score::ScorerInterface& scorer);

struct DisruptionReport {
  double delta = 0.0;
  std::vector<double> per_shot;  // mean |L(S) - L(S_replaced_i)| per position
  int repeats = 0;
};

// Each demonstration is replaced in turn by its most similar library entry
// (joint image+query cosine), excluding every id already in the sequence; the
// gap is the mean absolute performance change, averaged over `repeats`
// identical evaluations so stochastic scorers get smoothed.
DisruptionReport disruption_gap(const data::IclSequence& seq,
                                const data::DemoLibrary& library,
                                score::ScorerInterface& scorer, Metric metric,
                                int repeats = 5);

struct OrderReport {
  double sigma = 0.0;
  double mu = 0.0;
  std::vector<double> accuracies;  // one per permutation draw
  int k_perms = 0;
};

// Accuracy spread over k uniform reorderings of one sequence. Each draw
// consumes exactly one permutation from `rng`.
OrderReport order_sensitivity(const data::IclSequence& seq, const data::DemoLibrary& library,
                              score::ScorerInterface& scorer, int k, Rng& rng);

// Batch form: every draw reorders each sequence independently (one permutation
// per sequence, in sequence order) and records the batch accuracy, giving a
// continuous spread even though individual queries are right or wrong.
OrderReport order_sensitivity_batch(const std::vector<data::IclSequence>& sequences,
                                    const data::DemoLibrary& library,
                                    score::ScorerInterface& scorer, int k, Rng& rng);

struct CohesionReport {
  double delta = 0.0;
  double sigma = 0.0;
  std::vector<double> delta_per_shot;
  int k_perms = 10;
  int repeats = 5;
};

// Both cohesion metrics for one sequence in a single bundle.
CohesionReport cohesion_report(const data::IclSequence& seq, const data::DemoLibrary& library,
                               score::ScorerInterface& scorer, Metric metric, int k,
                               int repeats, Rng& rng);

}  // namespace taco::metrics
