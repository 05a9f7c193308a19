#include "taco/search.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <limits>
#include <set>

#include "taco/errors.hpp"

namespace taco::search {

using taco::num::Tensor;

namespace {

double dot(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double sq_dist(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (size_t i = 0; i < a.size(); ++i) {
    double d = a[i] - b[i];
    s += d * d;
  }
  return s;
}

// Zero vectors normalize to zero, so their cosine against anything is 0.
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

double cosine(const std::vector<double>& a, const std::vector<double>& b) {
  double na = std::sqrt(dot(a, a));
  double nb = std::sqrt(dot(b, b));
  if (na == 0.0 || nb == 0.0) return 0.0;
  return dot(a, b) / (na * nb);
}

void append(std::vector<double>& out, const std::vector<double>& part) {
  out.insert(out.end(), part.begin(), part.end());
}

// Checks the candidate pool and returns it sorted; sorted iteration is what
// makes "ties go to the lowest id" fall out of a strict > comparison.
std::vector<std::string> sorted_candidates(const data::DemoLibrary& library,
                                           const std::vector<std::string>& candidate_ids,
                                           int shots, const char* op) {
  if (shots < 0) throw ValidationError(std::string(op) + ": shots must be >= 0");
  std::vector<std::string> pool = candidate_ids;
  std::sort(pool.begin(), pool.end());
  for (size_t i = 0; i < pool.size(); ++i) {
    if (i > 0 && pool[i] == pool[i - 1])
      throw ValidationError(std::string(op) + ": duplicate candidate id " + pool[i]);
    if (!library.contains(pool[i]))
      throw ValidationError(std::string(op) + ": unknown candidate id " + pool[i]);
  }
  if (static_cast<int>(pool.size()) < shots)
    throw ValidationError(std::string(op) + ": " + std::to_string(pool.size()) +
                          " candidates cannot fill " + std::to_string(shots) + " shots");
  return pool;
}

const std::string& require_truth(const data::QuerySample& query, const char* op) {
  if (!query.ground_truth_r.has_value())
    throw ValidationError(std::string(op) + ": query " + query.id + " lacks a ground truth");
  return *query.ground_truth_r;
}

std::vector<data::Demonstration> materialize_ids(const data::DemoLibrary& library,
                                                 const std::vector<std::string>& ids) {
  std::vector<data::Demonstration> demos;
  demos.reserve(ids.size());
  for (const auto& id : ids) demos.push_back(library.get(id));
  return demos;
}

// Ranks (score, id) pairs best-first with ties broken by the lower id, and
// returns the first n ids.
std::vector<std::string> top_ids(std::vector<std::pair<double, std::string>> scored, int n) {
  std::sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) {
    if (a.first != b.first) return a.first > b.first;
    return a.second < b.second;
  });
  std::vector<std::string> out;
  out.reserve(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) out.push_back(scored[static_cast<size_t>(i)].second);
  return out;
}

data::IclSequence make_sequence(const data::DemoLibrary& library,
                                const data::QuerySample& query,
                                std::vector<std::string> ids) {
  data::IclSequence seq;
  seq.instruction = library.instruction;
  seq.icd_ids = std::move(ids);
  seq.query = query;
  return seq;
}

void check_shot_count(const data::DemoLibrary& library, int n, const char* op) {
  if (n < 0) throw ValidationError(std::string(op) + ": shots must be >= 0");
  if (n > library.size())
    throw ValidationError(std::string(op) + ": " + std::to_string(n) +
                          " shots exceed the library size " + std::to_string(library.size()));
}

// One k-means run: k-means++ seeding followed by Lloyd iterations until the
// assignment is stable (at most 100 rounds). Ties in assignment go to the
// lowest centroid index, which keeps the whole procedure deterministic.
struct KMeansRun {
  std::vector<std::vector<double>> centroids;
  std::vector<int> assign;
};

KMeansRun kmeans_once(const std::vector<std::vector<double>>& points, int k, Rng& rng) {
  int p = static_cast<int>(points.size());
  KMeansRun run;
  run.centroids.push_back(points[static_cast<size_t>(rng.uniform_int(p))]);
  std::vector<double> d2(static_cast<size_t>(p));
  while (static_cast<int>(run.centroids.size()) < k) {
    double total = 0.0;
    for (int i = 0; i < p; ++i) {
      double best = std::numeric_limits<double>::infinity();
      for (const auto& c : run.centroids)
        best = std::min(best, sq_dist(points[static_cast<size_t>(i)], c));
      d2[static_cast<size_t>(i)] = best;
      total += best;
    }
    int pick;
    if (total > 0.0) {
      double r = rng.uniform() * total;
      double acc = 0.0;
      pick = p - 1;
      for (int i = 0; i < p; ++i) {
        acc += d2[static_cast<size_t>(i)];
        if (r < acc) {
          pick = i;
          break;
        }
      }
    } else {
      pick = rng.uniform_int(p);
    }
    run.centroids.push_back(points[static_cast<size_t>(pick)]);
  }

  run.assign.assign(static_cast<size_t>(p), -1);
  for (int round = 0; round < 100; ++round) {
    bool changed = false;
    for (int i = 0; i < p; ++i) {
      int best = 0;
      double best_d = sq_dist(points[static_cast<size_t>(i)], run.centroids[0]);
      for (int c = 1; c < k; ++c) {
        double d = sq_dist(points[static_cast<size_t>(i)], run.centroids[static_cast<size_t>(c)]);
        if (d < best_d) {
          best_d = d;
          best = c;
        }
      }
      if (run.assign[static_cast<size_t>(i)] != best) {
        run.assign[static_cast<size_t>(i)] = best;
        changed = true;
      }
    }
    if (!changed) break;
    size_t dim = points[0].size();
    std::vector<std::vector<double>> sums(static_cast<size_t>(k), std::vector<double>(dim, 0.0));
    std::vector<int> counts(static_cast<size_t>(k), 0);
    for (int i = 0; i < p; ++i) {
      int c = run.assign[static_cast<size_t>(i)];
      counts[static_cast<size_t>(c)] += 1;
      for (size_t j = 0; j < dim; ++j)
        sums[static_cast<size_t>(c)][j] += points[static_cast<size_t>(i)][j];
    }
    for (int c = 0; c < k; ++c) {
      if (counts[static_cast<size_t>(c)] == 0) continue;  // empty: centroid stays put
      for (size_t j = 0; j < dim; ++j)
        run.centroids[static_cast<size_t>(c)][j] =
            sums[static_cast<size_t>(c)][j] / counts[static_cast<size_t>(c)];
    }
  }
  return run;
}

}  // namespace

void OracleConfig::validate() const {
  if (shots < 1) throw ValidationError("OracleConfig: shots must be >= 1");
  if (pool_per_shot < 1) throw ValidationError("OracleConfig: pool_per_shot must be >= 1");
  if (beam < 0) throw ValidationError("OracleConfig: beam must be >= 0");
  if (k_clusters < 1) throw ValidationError("OracleConfig: k_clusters must be >= 1");
  if (m_per_cluster < 1) throw ValidationError("OracleConfig: m_per_cluster must be >= 1");
}

void BeamConfig::validate() const {
  if (beam_width < 1) throw ValidationError("BeamConfig: beam_width must be >= 1");
  if (shots < 0) throw ValidationError("BeamConfig: shots must be >= 0");
}

QuerySplit select_query_set(const data::DemoLibrary& library, int k, int m, Rng& rng) {
  if (k < 1) throw ValidationError("select_query_set: k must be >= 1");
  if (m < 1) throw ValidationError("select_query_set: m must be >= 1");
  if (k * m >= library.size())
    throw ValidationError("select_query_set: " + std::to_string(k) + "x" + std::to_string(m) +
                          " queries would exhaust a library of " +
                          std::to_string(library.size()));

  std::vector<std::string> ids = library.ids();
  int p = static_cast<int>(ids.size());
  std::vector<std::vector<double>> points;
  points.reserve(static_cast<size_t>(p));
  for (const auto& id : ids) points.push_back(library.get(id).image_emb.vec());

  KMeansRun run;
  bool ok = false;
  for (int attempt = 0; attempt < 10 && !ok; ++attempt) {
    run = kmeans_once(points, k, rng);
    std::vector<int> counts(static_cast<size_t>(k), 0);
    for (int a : run.assign) counts[static_cast<size_t>(a)] += 1;
    ok = true;
    for (int c : counts)
      if (c < m) ok = false;
  }
  if (!ok)
    throw ValidationError("select_query_set: clustering failed to produce " +
                          std::to_string(k) + " clusters with >= " + std::to_string(m) +
                          " members each");

  QuerySplit split;
  split.reduced = library;
  for (int c = 0; c < k; ++c) {
    // Members ranked by distance to their centroid, ties by id.
    std::vector<std::pair<double, std::string>> members;
    for (int i = 0; i < p; ++i) {
      if (run.assign[static_cast<size_t>(i)] != c) continue;
      members.emplace_back(sq_dist(points[static_cast<size_t>(i)],
                                   run.centroids[static_cast<size_t>(c)]),
                           ids[static_cast<size_t>(i)]);
    }
    std::sort(members.begin(), members.end());
    for (int j = 0; j < m; ++j) {
      const data::Demonstration& d = library.get(members[static_cast<size_t>(j)].second);
      data::QuerySample q;
      q.id = d.id;
      q.image_emb = d.image_emb;
      q.text_q = d.text_q;
      q.q_emb = d.q_emb;
      q.ground_truth_r = d.text_r;
      q.meta = d.meta;
      split.queries.push_back(std::move(q));
      split.reduced.demos.erase(d.id);
    }
  }
  return split;
}

std::vector<std::string> oracle_greedy(const data::DemoLibrary& library,
                                       const std::vector<std::string>& candidate_ids,
                                       const data::QuerySample& query,
                                       score::ScorerInterface& scorer, int shots) {
  const char* op = "oracle_greedy";
  const std::string& truth = require_truth(query, op);
  std::vector<std::string> pool = sorted_candidates(library, candidate_ids, shots, op);

  std::vector<std::string> chosen;
  std::vector<data::Demonstration> demos;
  std::set<std::string> used;
  for (int step = 0; step < shots; ++step) {
    double best_score = -std::numeric_limits<double>::infinity();
    std::string best_id;
    for (const auto& id : pool) {
      if (used.count(id)) continue;
      demos.push_back(library.get(id));
      double s = scorer.loglik(library.instruction, demos, query, truth);
      demos.pop_back();
      if (s > best_score) {
        best_score = s;
        best_id = id;
      }
    }
    used.insert(best_id);
    chosen.push_back(best_id);
    demos.push_back(library.get(best_id));
  }
  return chosen;
}

std::vector<ScoredSequence> oracle_beam(const data::DemoLibrary& library,
                                        const std::vector<std::string>& candidate_ids,
                                        const data::QuerySample& query,
                                        score::ScorerInterface& scorer, int shots, int beam) {
  const char* op = "oracle_beam";
  if (beam < 1) throw ValidationError(std::string(op) + ": beam must be >= 1");
  const std::string& truth = require_truth(query, op);
  std::vector<std::string> pool = sorted_candidates(library, candidate_ids, shots, op);

  std::vector<ScoredSequence> states;
  states.push_back({{}, scorer.loglik(library.instruction, {}, query, truth)});
  for (int step = 0; step < shots; ++step) {
    std::vector<ScoredSequence> next;
    for (const auto& state : states) {
      for (const auto& id : pool) {
        if (std::find(state.ids.begin(), state.ids.end(), id) != state.ids.end()) continue;
        ScoredSequence cand;
        cand.ids = state.ids;
        cand.ids.push_back(id);
        cand.score =
            scorer.loglik(library.instruction, materialize_ids(library, cand.ids), query, truth);
        next.push_back(std::move(cand));
      }
    }
    std::sort(next.begin(), next.end(), [](const ScoredSequence& a, const ScoredSequence& b) {
      if (a.score != b.score) return a.score > b.score;
      return a.ids < b.ids;
    });
    if (static_cast<int>(next.size()) > beam) next.resize(static_cast<size_t>(beam));
    states = std::move(next);
  }
  return states;
}

BuildResult build_training_set(const data::DemoLibrary& library,
                               score::ScorerInterface& scorer, const OracleConfig& cfg,
                               Rng& rng) {
  cfg.validate();
  QuerySplit split = select_query_set(library, cfg.k_clusters, cfg.m_per_cluster, rng);
  if (split.reduced.size() < cfg.shots)
    throw ValidationError("build_training_set: reduced library of " +
                          std::to_string(split.reduced.size()) + " cannot fill " +
                          std::to_string(cfg.shots) + " shots");

  int target = cfg.pool_per_shot * cfg.shots;
  int pool_size = std::min(target, split.reduced.size());
  if (pool_size < target)
    std::cerr << "build_training_set: candidate pool clamped to library size " << pool_size
              << "\n";

  BuildResult result;
  result.dataset.shot = cfg.shots;
  std::vector<std::string> reduced_ids = split.reduced.ids();
  for (const auto& query : split.queries) {
    std::vector<int> perm = rng.permutation(static_cast<int>(reduced_ids.size()));
    std::vector<std::string> pool;
    pool.reserve(static_cast<size_t>(pool_size));
    for (int i = 0; i < pool_size; ++i)
      pool.push_back(reduced_ids[static_cast<size_t>(perm[static_cast<size_t>(i)])]);
    std::vector<ScoredSequence> seqs =
        oracle_beam(split.reduced, pool, query, scorer, cfg.shots, cfg.beam_width());
    for (auto& s : seqs)
      result.dataset.sequences.push_back(
          make_sequence(split.reduced, query, std::move(s.ids)));
  }
  result.queries = std::move(split.queries);
  result.reduced = std::move(split.reduced);
  return result;
}

data::IclSequence beam_infer(const model::TacoModel& model,
                             const data::DemoLibrary& library,
                             const data::QuerySample& query, const BeamConfig& cfg) {
  const char* op = "beam_infer";
  cfg.validate();
  if (cfg.shots > library.size())
    throw ValidationError(std::string(op) + ": " + std::to_string(cfg.shots) +
                          " shots exceed the library size " + std::to_string(library.size()));
  if (cfg.shots == 0) return make_sequence(library, query, {});

  // Selection pool: the passed library's ids, which must all live in the
  // model's vocabulary. Scores for used ids and the end token are excluded
  // from each step's normalization.
  std::vector<std::string> pool = library.ids();
  std::vector<int> pool_idx;
  pool_idx.reserve(pool.size());
  for (const auto& id : pool) pool_idx.push_back(model.vocab_index(id));

  num::Var lib_emb = model.library_embeddings();
  struct State {
    std::vector<std::string> ids;
    double logp = 0.0;
  };
  std::vector<State> states{State{}};
  model::ForwardOptions opts;
  opts.with_eos = false;
  for (int step = 0; step < cfg.shots; ++step) {
    std::vector<State> next;
    for (const auto& state : states) {
      data::IclSequence prefix = make_sequence(library, query, state.ids);
      model::ForwardResult fwd = model.forward(prefix, opts);
      num::Var logits = model.prediction_logits(fwd, lib_emb);
      const Tensor& rows = logits->value;
      int row = static_cast<int>(state.ids.size());  // last row: predicts the next token

      // Log-softmax restricted to the unused pool entries.
      std::vector<size_t> open;
      double max_logit = -std::numeric_limits<double>::infinity();
      for (size_t i = 0; i < pool.size(); ++i) {
        if (std::find(state.ids.begin(), state.ids.end(), pool[i]) != state.ids.end()) continue;
        open.push_back(i);
        max_logit = std::max(max_logit, rows.at(row, pool_idx[i]));
      }
      double lse = 0.0;
      for (size_t i : open) lse += std::exp(rows.at(row, pool_idx[i]) - max_logit);
      lse = max_logit + std::log(lse);
      for (size_t i : open) {
        State cand;
        cand.ids = state.ids;
        cand.ids.push_back(pool[i]);
        cand.logp = state.logp + rows.at(row, pool_idx[i]) - lse;
        next.push_back(std::move(cand));
      }
    }
    std::sort(next.begin(), next.end(), [](const State& a, const State& b) {
      if (a.logp != b.logp) return a.logp > b.logp;
      return a.ids < b.ids;
    });
    if (static_cast<int>(next.size()) > cfg.beam_width)
      next.resize(static_cast<size_t>(cfg.beam_width));
    states = std::move(next);
  }
  return make_sequence(library, query, states.front().ids);
}

data::IclSequence baseline_rs(const data::DemoLibrary& library,
                              const data::QuerySample& query, int n, Rng& rng) {
  check_shot_count(library, n, "baseline_rs");
  std::vector<std::string> ids = library.ids();
  std::vector<int> perm = rng.permutation(static_cast<int>(ids.size()));
  std::vector<std::string> picked;
  picked.reserve(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) picked.push_back(ids[static_cast<size_t>(perm[static_cast<size_t>(i)])]);
  return make_sequence(library, query, std::move(picked));
}

data::IclSequence baseline_i2i(const data::DemoLibrary& library,
                               const data::QuerySample& query, int n) {
  check_shot_count(library, n, "baseline_i2i");
  std::vector<std::pair<double, std::string>> scored;
  for (const auto& [id, demo] : library.demos)
    scored.emplace_back(cosine(demo.image_emb.vec(), query.image_emb.vec()), id);
  return make_sequence(library, query, top_ids(std::move(scored), n));
}

data::IclSequence baseline_iq2iq(const data::DemoLibrary& library,
                                 const data::QuerySample& query, int n) {
  check_shot_count(library, n, "baseline_iq2iq");
  std::vector<double> q_vec = normalized(query.image_emb);
  append(q_vec, normalized(query.q_emb));
  std::vector<std::pair<double, std::string>> scored;
  for (const auto& [id, demo] : library.demos) {
    std::vector<double> d_vec = normalized(demo.image_emb);
    append(d_vec, normalized(demo.q_emb));
    scored.emplace_back(cosine(d_vec, q_vec), id);
  }
  return make_sequence(library, query, top_ids(std::move(scored), n));
}

std::string pseudo_response(const data::DemoLibrary& library, const data::QuerySample& query,
                            int n, score::ScorerInterface& scorer, Rng& rng) {
  const char* op = "pseudo_response";
  if (!scorer.supports_label_probs())
    throw ValidationError(std::string(op) + ": scorer lacks label probabilities");
  data::IclSequence seq = baseline_rs(library, query, n, rng);
  std::map<std::string, double> probs =
      scorer.label_probs(library.instruction, materialize_ids(library, seq.icd_ids), query);
  if (probs.empty()) throw ValidationError(std::string(op) + ": scorer returned no labels");
  std::string best = probs.begin()->first;
  double best_p = probs.begin()->second;
  for (const auto& [label, p] : probs) {
    if (p > best_p) {
      best_p = p;
      best = label;
    }
  }
  return best;
}

data::IclSequence baseline_iqpr(const data::DemoLibrary& library,
                                const data::QuerySample& query, int n,
                                score::ScorerInterface& scorer, Rng& rng) {
  check_shot_count(library, n, "baseline_iqpr");
  if (n == 0) return make_sequence(library, query, {});
  std::string pseudo = pseudo_response(library, query, n, scorer, rng);

  // The query's stand-in response embedding: the mean response embedding of
  // the demonstrations that carry the pseudo label.
  std::vector<double> r_hat(static_cast<size_t>(library.d_txt), 0.0);
  int matches = 0;
  for (const auto& [id, demo] : library.demos) {
    if (demo.text_r != pseudo) continue;
    const std::vector<double>& r = demo.r_emb.vec();
    for (size_t j = 0; j < r_hat.size(); ++j) r_hat[j] += r[j];
    matches += 1;
  }
  if (matches > 0)
    for (double& x : r_hat) x /= matches;

  std::vector<double> q_triple = normalized(query.image_emb);
  append(q_triple, normalized(query.q_emb));
  append(q_triple, normalized(Tensor::row(r_hat)));

  std::vector<std::pair<double, std::string>> stage2;
  for (const auto& [id, demo] : library.demos) {
    std::vector<double> d_triple = normalized(demo.image_emb);
    append(d_triple, normalized(demo.q_emb));
    append(d_triple, normalized(demo.r_emb));
    stage2.emplace_back(cosine(d_triple, q_triple), id);
  }
  int keep = std::min(4 * n, library.size());
  std::vector<std::string> shortlist = top_ids(std::move(stage2), keep);

  std::vector<double> q_fused = query.q_emb.vec();
  for (size_t j = 0; j < q_fused.size(); ++j) q_fused[j] += r_hat[j];
  std::vector<std::pair<double, std::string>> stage3;
  for (const auto& id : shortlist)
    stage3.emplace_back(cosine(library.get(id).qr_emb.vec(), q_fused), id);
  return make_sequence(library, query, top_ids(std::move(stage3), n));
}

data::IclSequence baseline_demo(const data::DemoLibrary& library,
                                const data::QuerySample& query, int n,
                                score::ScorerInterface& scorer, int n_perms, int k_top,
                                Rng& rng) {
  const char* op = "baseline_demo";
  check_shot_count(library, n, op);
  if (!scorer.supports_label_probs())
    throw ValidationError(std::string(op) + ": scorer lacks label probabilities");
  if (n_perms < 1) throw ValidationError(std::string(op) + ": n_perms must be >= 1");
  if (k_top < 1 || k_top > n_perms)
    throw ValidationError(std::string(op) + ": k_top must be in [1, n_perms]");
  if (n == 0) return make_sequence(library, query, {});

  data::QuerySample content_free;
  content_free.id = "__content_free";
  content_free.image_emb = Tensor::zeros(1, library.d_img);
  content_free.text_q = "";
  content_free.q_emb = Tensor::zeros(1, library.d_txt);

  std::vector<std::string> ids = library.ids();
  struct Arrangement {
    std::vector<std::string> icds;
    std::map<std::string, double> cf_probs;
    double entropy = 0.0;
  };
  std::vector<Arrangement> arrangements;
  arrangements.reserve(static_cast<size_t>(n_perms));
  for (int t = 0; t < n_perms; ++t) {
    Arrangement a;
    std::vector<int> perm = rng.permutation(static_cast<int>(ids.size()));
    for (int i = 0; i < n; ++i)
      a.icds.push_back(ids[static_cast<size_t>(perm[static_cast<size_t>(i)])]);
    a.cf_probs = scorer.label_probs(library.instruction, materialize_ids(library, a.icds),
                                    content_free);
    for (const auto& [label, p] : a.cf_probs)
      if (p > 0.0) a.entropy -= p * std::log(p);
    arrangements.push_back(std::move(a));
  }

  std::sort(arrangements.begin(), arrangements.end(),
            [](const Arrangement& a, const Arrangement& b) {
              if (a.entropy != b.entropy) return a.entropy > b.entropy;
              return a.icds < b.icds;
            });
  if (static_cast<int>(arrangements.size()) > k_top)
    arrangements.resize(static_cast<size_t>(k_top));

  // Influence: how much the query's presence lifts its own most likely label
  // above that label's content-free probability.
  double best_influence = -std::numeric_limits<double>::infinity();
  const Arrangement* best = nullptr;
  for (const auto& a : arrangements) {
    std::map<std::string, double> probs =
        scorer.label_probs(library.instruction, materialize_ids(library, a.icds), query);
    if (probs.empty()) throw ValidationError(std::string(op) + ": scorer returned no labels");
    std::string y = probs.begin()->first;
    double y_p = probs.begin()->second;
    for (const auto& [label, p] : probs) {
      if (p > y_p) {
        y_p = p;
        y = label;
      }
    }
    double cf_p = a.cf_probs.count(y) ? a.cf_probs.at(y) : 0.0;
    double influence = y_p - cf_p;
    if (influence > best_influence ||
        (influence == best_influence && best != nullptr && a.icds < best->icds)) {
      best_influence = influence;
      best = &a;
    }
  }
  return make_sequence(library, query, best->icds);
}

}  // namespace taco::search
