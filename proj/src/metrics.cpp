#include "taco/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <set>

#include "taco/errors.hpp"

namespace taco::metrics {

using taco::num::Tensor;

namespace {

double dot(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

std::vector<double> normalized(const Tensor& t) {
  std::vector<double> v = t.vec();
  double n = std::sqrt(dot(v, v));
  if (n > 0.0) {
    for (double& x : v) x /= n;
  } else {
    std::fill(v.begin(), v.end(), 0.0);
  }
  return v;
}

// Joint image+query similarity between two demonstrations, each modality
// normalized before concatenation.
double iq2iq_similarity(const data::Demonstration& a, const data::Demonstration& b) {
  std::vector<double> va = normalized(a.image_emb);
  std::vector<double> qa = normalized(a.q_emb);
  va.insert(va.end(), qa.begin(), qa.end());
  std::vector<double> vb = normalized(b.image_emb);
  std::vector<double> qb = normalized(b.q_emb);
  vb.insert(vb.end(), qb.begin(), qb.end());
  double na = std::sqrt(dot(va, va));
  double nb = std::sqrt(dot(vb, vb));
  if (na == 0.0 || nb == 0.0) return 0.0;
  return dot(va, vb) / (na * nb);
}

std::vector<data::Demonstration> materialize(const data::DemoLibrary& library,
                                             const std::vector<std::string>& ids) {
  std::vector<data::Demonstration> demos;
  demos.reserve(ids.size());
  for (const auto& id : ids) demos.push_back(library.get(id));
  return demos;
}

const std::string& require_truth(const data::QuerySample& query, const char* op) {
  if (!query.ground_truth_r.has_value())
    throw ValidationError(std::string(op) + ": query " + query.id + " lacks a ground truth");
  return *query.ground_truth_r;
}

double performance(const std::string& instruction, const std::vector<data::Demonstration>& icds,
                   const data::QuerySample& query, score::ScorerInterface& scorer,
                   Metric metric, const char* op) {
  const std::string& truth = require_truth(query, op);
  if (metric == Metric::loglik) return scorer.loglik(instruction, icds, query, truth);
  return label_correct(instruction, icds, query, scorer) ? 1.0 : 0.0;
}

}  // namespace

double mean(const std::vector<double>& xs) {
  if (xs.empty()) throw ValidationError("mean: empty input");
  double s = 0.0;
  for (double x : xs) s += x;
  return s / static_cast<double>(xs.size());
}

double population_std(const std::vector<double>& xs) {
  double mu = mean(xs);  // rejects empty input
  double s = 0.0;
  for (double x : xs) s += (x - mu) * (x - mu);
  return std::sqrt(s / static_cast<double>(xs.size()));
}

bool label_correct(const std::string& instruction,
                   const std::vector<data::Demonstration>& icds,
                   const data::QuerySample& query, score::ScorerInterface& scorer) {
  const char* op = "label_correct";
  const std::string& truth = require_truth(query, op);
  std::map<std::string, double> probs = scorer.label_probs(instruction, icds, query);
  if (probs.empty()) throw ValidationError(std::string(op) + ": scorer returned no labels");
  std::string best = probs.begin()->first;
  double best_p = probs.begin()->second;
  for (const auto& [label, p] : probs) {
    if (p > best_p) {
      best_p = p;
      best = label;
    }
  }
  return best == truth;
}

double evaluate_accuracy(const std::vector<data::IclSequence>& sequences,
                         const data::DemoLibrary& library, score::ScorerInterface& scorer) {
  if (sequences.empty()) throw ValidationError("evaluate_accuracy: no sequences");
  int correct = 0;
  for (const auto& seq : sequences) {
    data::validate_sequence(seq, library, "evaluate_accuracy");
    if (label_correct(seq.instruction, materialize(library, seq.icd_ids), seq.query, scorer))
      correct += 1;
  }
  return static_cast<double>(correct) / static_cast<double>(sequences.size());
}

double evaluate_accuracy_instances(const std::vector<world::EvalInstance>& instances,
                                   score::ScorerInterface& scorer) {
  if (instances.empty()) throw ValidationError("evaluate_accuracy_instances: no instances");
  int correct = 0;
  for (const auto& inst : instances)
    if (label_correct(inst.instruction, inst.icds, inst.query, scorer)) correct += 1;
  return static_cast<double>(correct) / static_cast<double>(instances.size());
}

DisruptionReport disruption_gap(const data::IclSequence& seq, const data::DemoLibrary& library,
                                score::ScorerInterface& scorer, Metric metric, int repeats) {
  const char* op = "disruption_gap";
  if (repeats < 1) throw ValidationError(std::string(op) + ": repeats must be >= 1");
  data::validate_sequence(seq, library, op);
  int n = seq.shots();
  if (n == 0) throw ValidationError(std::string(op) + ": sequence has no demonstrations");
  require_truth(seq.query, op);

  std::set<std::string> in_seq(seq.icd_ids.begin(), seq.icd_ids.end());
  if (library.size() <= n)
    throw ValidationError(std::string(op) + ": library of " + std::to_string(library.size()) +
                          " leaves no replacement candidates");

  // Nearest neighbor per position: highest joint similarity among entries
  // outside the sequence, ties to the lowest id.
  std::vector<std::string> replacements;
  replacements.reserve(static_cast<size_t>(n));
  for (const auto& id : seq.icd_ids) {
    const data::Demonstration& original = library.get(id);
    double best = -std::numeric_limits<double>::infinity();
    std::string best_id;
    for (const auto& [cand_id, cand] : library.demos) {
      if (in_seq.count(cand_id)) continue;
      double sim = iq2iq_similarity(original, cand);
      if (sim > best) {
        best = sim;
        best_id = cand_id;
      }
    }
    replacements.push_back(best_id);
  }

  DisruptionReport report;
  report.repeats = repeats;
  report.per_shot.assign(static_cast<size_t>(n), 0.0);
  std::vector<data::Demonstration> base = materialize(library, seq.icd_ids);
  for (int r = 0; r < repeats; ++r) {
    double reference = performance(seq.instruction, base, seq.query, scorer, metric, op);
    for (int i = 0; i < n; ++i) {
      std::vector<data::Demonstration> swapped = base;
      swapped[static_cast<size_t>(i)] = library.get(replacements[static_cast<size_t>(i)]);
      double replaced = performance(seq.instruction, swapped, seq.query, scorer, metric, op);
      report.per_shot[static_cast<size_t>(i)] += std::abs(reference - replaced);
    }
  }
  for (double& d : report.per_shot) d /= static_cast<double>(repeats);
  report.delta = mean(report.per_shot);
  return report;
}

OrderReport order_sensitivity(const data::IclSequence& seq, const data::DemoLibrary& library,
                              score::ScorerInterface& scorer, int k, Rng& rng) {
  const char* op = "order_sensitivity";
  if (k < 2) throw ValidationError(std::string(op) + ": k must be >= 2");
  data::validate_sequence(seq, library, op);
  require_truth(seq.query, op);

  OrderReport report;
  report.k_perms = k;
  report.accuracies.reserve(static_cast<size_t>(k));
  for (int t = 0; t < k; ++t) {
    std::vector<int> perm = rng.permutation(seq.shots());
    data::IclSequence shuffled = data::permute_sequence(seq, perm);
    bool ok = label_correct(shuffled.instruction, materialize(library, shuffled.icd_ids),
                            shuffled.query, scorer);
    report.accuracies.push_back(ok ? 1.0 : 0.0);
  }
  report.mu = mean(report.accuracies);
  report.sigma = population_std(report.accuracies);
  return report;
}

OrderReport order_sensitivity_batch(const std::vector<data::IclSequence>& sequences,
                                    const data::DemoLibrary& library,
                                    score::ScorerInterface& scorer, int k, Rng& rng) {
  const char* op = "order_sensitivity_batch";
  if (k < 2) throw ValidationError(std::string(op) + ": k must be >= 2");
  if (sequences.empty()) throw ValidationError(std::string(op) + ": no sequences");

  OrderReport report;
  report.k_perms = k;
  report.accuracies.reserve(static_cast<size_t>(k));
  for (int t = 0; t < k; ++t) {
    std::vector<data::IclSequence> shuffled;
    shuffled.reserve(sequences.size());
    for (const auto& seq : sequences) {
      std::vector<int> perm = rng.permutation(seq.shots());
      shuffled.push_back(data::permute_sequence(seq, perm));
    }
    report.accuracies.push_back(evaluate_accuracy(shuffled, library, scorer));
  }
  report.mu = mean(report.accuracies);
  report.sigma = population_std(report.accuracies);
  return report;
}

CohesionReport cohesion_report(const data::IclSequence& seq, const data::DemoLibrary& library,
                               score::ScorerInterface& scorer, Metric metric, int k,
                               int repeats, Rng& rng) {
  DisruptionReport gap = disruption_gap(seq, library, scorer, metric, repeats);
  OrderReport order = order_sensitivity(seq, library, scorer, k, rng);
  CohesionReport report;
  report.delta = gap.delta;
  report.delta_per_shot = std::move(gap.per_shot);
  report.sigma = order.sigma;
  report.k_perms = k;
  report.repeats = repeats;
  return report;
}

}  // namespace taco::metrics
