#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "taco/autograd.hpp"
#include "taco/data.hpp"
#include "taco/decoder.hpp"
#include "taco/rng.hpp"

namespace taco::train {

using taco::num::GradSink;
using taco::num::ParamSet;
using taco::num::Rng;
using taco::num::Tensor;
using taco::num::Var;

struct LossWeights {
  double lambda1 = 0.01;  // sparsity term
  double lambda2 = 1e-4;  // squared L2 of the guider initialization weight
  // Study direction: the diffuseness penalty as written drives mask rows
  // toward uniform; reverse negates it to drive them away.
  bool reverse_sparsity = false;
};

struct LossBreakdown {
  double ce = 0.0;
  double sparse = 0.0;
  double l2_tg = 0.0;
  double total = 0.0;
};

// --- loss graphs ------------------------------------------------------------

// Mean next-token cross-entropy from per-step logits. Row r's support marks
// the columns still selectable at that step; targets[r] must lie inside it.
Var ce_loss(const Var& logits, const std::vector<int>& targets, const Tensor& support);

// Cross-entropy for one sequence: rows query..last demonstration predict the
// demonstration ids then the end token, with already-used ids masked out.
Var sequence_ce(const model::TacoModel& m, const model::ForwardResult& fwd,
                const data::IclSequence& seq, const Var& lib_emb);

// Diffuseness penalty: mean over demonstrations of the KL between each
// task-aware mask row's softmax (over its causal support) and uniform, summed
// across task-aware layers. Rows with empty support are skipped and counted.
Var sparsity_loss(const model::ForwardResult& fwd, bool reverse = false,
                  int* skipped_rows = nullptr);

// Squared L2 norm of the guider initialization weight; zero when absent.
Var guider_l2(const model::TacoModel& m);

struct SequenceLoss {
  Var total;
  Var ce;
  Var sparse;
  Var l2;
  LossBreakdown values() const;
};

// Builds the full loss graph for one sequence; lib_emb is shared so several
// sequence losses in one step accumulate library gradients together.
SequenceLoss sequence_loss(const model::TacoModel& m, const data::IclSequence& seq,
                           const Var& lib_emb, const LossWeights& w);

struct BatchLoss {
  Var total;           // mean over the batch, one backward pass
  LossBreakdown mean;  // component means over the batch
};

BatchLoss batch_loss(const model::TacoModel& m,
                     const std::vector<const data::IclSequence*>& batch, const LossWeights& w);

// Mean total loss over a whole dataset (no gradients kept).
double dataset_loss(const model::TacoModel& m, const data::SequenceDataset& data,
                    const LossWeights& w, int batch_size);

// --- optimizer --------------------------------------------------------------

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

class AdamW {
 public:
  // `no_decay` names are exempt from weight decay; `frozen` names are never
  // updated at all. Unknown names in either list are ignored.
  AdamW(ParamSet& params, AdamWConfig cfg, std::vector<std::string> no_decay,
        std::vector<std::string> frozen);

  void step(const GradSink& grads, double lr);
  std::int64_t steps() const { return t_; }

  std::string state_to_json() const;
  void state_from_json(const std::string& text);

 private:
  ParamSet& params_;
  AdamWConfig cfg_;
  std::set<std::string> no_decay_;
  std::set<std::string> frozen_;
  struct Slot {
    Tensor m;
    Tensor v;
  };
  std::map<std::string, Slot> slots_;
  std::int64_t t_ = 0;
};

// --- schedule ---------------------------------------------------------------

// Cosine annealing with warm restarts, evaluated per optimizer step. Cycle i
// has length period_steps * period_mult^i; the rate returns to base_lr at
// every cycle start.
struct CosineRestartSchedule {
  double base_lr = 1e-4;
  std::int64_t period_steps = 1;
  int period_mult = 2;
  double min_lr = 0.0;

  double lr_at(std::int64_t step) const;
};

// --- training loop ----------------------------------------------------------

struct TrainConfig {
  int epochs = 20;
  int batch_size = 16;
  double lr = 1e-4;
  double min_lr = 0.0;
  int restart_period_epochs = 5;
  int restart_mult = 2;
  LossWeights weights;
  AdamWConfig adamw;
  std::uint64_t seed = 0;
  // Output directory for metrics.csv, best.json, last.json, state.json.
  // Empty: train in memory only, write nothing.
  std::string out_dir;

  void validate() const;
};

struct EpochRow {
  int epoch = 0;  // 1-based
  LossBreakdown train_loss;
  double lr = 0.0;        // rate used by the epoch's final optimizer step
  double val_total = 0.0;  // train total when no validation set is given
};

struct TrainResult {
  std::vector<EpochRow> history;
  int best_epoch = 0;
  double best_val = 0.0;
  std::string best_checkpoint;  // empty when out_dir is empty
};

// Teacher-forced training over ordered sequences; deterministic in cfg.seed.
// With resume = true, picks up epoch, optimizer moments, shuffle state, and
// parameters from out_dir and continues to cfg.epochs.
TrainResult train(model::TacoModel& model, const data::SequenceDataset& train_set,
                  const data::SequenceDataset& val_set, const TrainConfig& cfg,
                  bool resume = false);

}  // namespace taco::train
