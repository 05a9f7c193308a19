#include "taco/training.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numbers>
#include <sstream>

#include "json.hpp"
#include "taco/errors.hpp"
#include "taco/serialize.hpp"

namespace taco::train {

using namespace taco::num;
using nlohmann::json;

namespace {

std::string fmt_double(double x) {
  std::ostringstream os;
  os.precision(17);
  os << x;
  return os.str();
}

}  // namespace

Var ce_loss(const Var& logits, const std::vector<int>& targets, const Tensor& support) {
  const int rows = logits->value.rows();
  const int cols = logits->value.cols();
  if (static_cast<int>(targets.size()) != rows) {
    throw ValidationError("ce_loss: " + std::to_string(targets.size()) + " targets for " +
                          std::to_string(rows) + " logit rows");
  }
  if (!support.same_shape(logits->value)) {
    throw ValidationError("ce_loss: support shape " + support.shape_str() +
                          " differs from logits " + logits->value.shape_str());
  }
  Tensor picks(rows, cols);
  for (int r = 0; r < rows; ++r) {
    const int t = targets[static_cast<size_t>(r)];
    if (t < 0 || t >= cols) {
      throw ValidationError("ce_loss: target " + std::to_string(t) + " outside vocabulary of " +
                            std::to_string(cols));
    }
    if (support.at(r, t) != 1.0) {
      throw ValidationError("ce_loss: target " + std::to_string(t) + " masked out at row " +
                            std::to_string(r));
    }
    picks.at(r, t) = 1.0;
  }
  Var lse = masked_logsumexp(logits, support);
  Var picked = sum(mul(logits, constant(picks)));
  return scale(sub(sum(lse), picked), 1.0 / static_cast<double>(rows));
}

Var sequence_ce(const model::TacoModel& m, const model::ForwardResult& fwd,
                const data::IclSequence& seq, const Var& lib_emb) {
  const int n = static_cast<int>(seq.icd_ids.size());
  const int vocab = m.vocab_size();
  std::vector<int> targets;
  targets.reserve(static_cast<size_t>(n) + 1);
  for (const std::string& id : seq.icd_ids) targets.push_back(m.vocab_index(id));
  targets.push_back(m.eos_index());

  // Step r may not repeat any demonstration already placed before it.
  Tensor support = Tensor::full(n + 1, vocab, 1.0);
  for (int r = 1; r <= n; ++r) {
    for (int k = 0; k < r; ++k) support.at(r, targets[static_cast<size_t>(k)]) = 0.0;
  }
  Var logits = m.prediction_logits(fwd, lib_emb);
  return ce_loss(logits, targets, support);
}

Var sparsity_loss(const model::ForwardResult& fwd, bool reverse, int* skipped_rows) {
  if (skipped_rows != nullptr) *skipped_rows = 0;
  const int n = static_cast<int>(fwd.tokens.icd_positions.size());
  if (n == 0 || fwd.ta_masks.empty()) return constant(Tensor(1, 1));
  const int T = fwd.attn_support.rows();
  Var acc;
  for (const Var& mask : fwd.ta_masks) {
    for (int pos : fwd.tokens.icd_positions) {
      Tensor row_support(1, T);
      double width = 0.0;
      for (int j = 0; j < T; ++j) {
        row_support.at(0, j) = fwd.attn_support.at(pos, j);
        width += fwd.attn_support.at(pos, j);
      }
      if (width == 0.0) {
        if (skipped_rows != nullptr) ++*skipped_rows;
        continue;
      }
      Var kl = kl_uniform(masked_softmax(slice_rows(mask, pos, 1), row_support));
      acc = acc ? add(acc, kl) : kl;
    }
  }
  if (!acc) return constant(Tensor(1, 1));
  return scale(acc, (reverse ? -1.0 : 1.0) / static_cast<double>(n));
}

Var guider_l2(const model::TacoModel& m) {
  if (!m.params().contains("tg.W")) return constant(Tensor(1, 1));
  Var w = m.params().get("tg.W");
  return sum(mul(w, w));
}

LossBreakdown SequenceLoss::values() const {
  LossBreakdown out;
  out.ce = ce->value.scalar_value();
  out.sparse = sparse->value.scalar_value();
  out.l2_tg = l2->value.scalar_value();
  out.total = total->value.scalar_value();
  return out;
}

SequenceLoss sequence_loss(const model::TacoModel& m, const data::IclSequence& seq,
                           const Var& lib_emb, const LossWeights& w) {
  if (w.lambda1 < 0.0 || w.lambda2 < 0.0) {
    throw ValidationError("loss: negative lambda weights");
  }
  model::ForwardOptions opts;
  opts.with_eos = true;
  auto fwd = m.forward(seq, opts);
  SequenceLoss out;
  out.ce = sequence_ce(m, fwd, seq, lib_emb);
  out.sparse = sparsity_loss(fwd, w.reverse_sparsity);
  out.l2 = guider_l2(m);
  out.total = add(out.ce, add(scale(out.sparse, w.lambda1), scale(out.l2, w.lambda2)));
  return out;
}

BatchLoss batch_loss(const model::TacoModel& m,
                     const std::vector<const data::IclSequence*>& batch, const LossWeights& w) {
  if (batch.empty()) throw ValidationError("batch_loss: empty batch");
  Var lib_emb = m.library_embeddings();
  Var acc;
  BatchLoss out;
  for (const data::IclSequence* seq : batch) {
    SequenceLoss sl = sequence_loss(m, *seq, lib_emb, w);
    LossBreakdown v = sl.values();
    out.mean.ce += v.ce;
    out.mean.sparse += v.sparse;
    out.mean.l2_tg += v.l2_tg;
    out.mean.total += v.total;
    acc = acc ? add(acc, sl.total) : sl.total;
  }
  const double inv = 1.0 / static_cast<double>(batch.size());
  out.total = scale(acc, inv);
  out.mean.ce *= inv;
  out.mean.sparse *= inv;
  out.mean.l2_tg *= inv;
  out.mean.total *= inv;
  return out;
}

double dataset_loss(const model::TacoModel& m, const data::SequenceDataset& data,
                    const LossWeights& w, int batch_size) {
  if (data.sequences.empty()) throw ValidationError("dataset_loss: empty dataset");
  if (batch_size < 1) throw ValidationError("dataset_loss: batch size must be positive");
  double total = 0.0;
  const int n = static_cast<int>(data.sequences.size());
  for (int b = 0; b < n; b += batch_size) {
    std::vector<const data::IclSequence*> batch;
    for (int i = b; i < std::min(n, b + batch_size); ++i) {
      batch.push_back(&data.sequences[static_cast<size_t>(i)]);
    }
    total += batch_loss(m, batch, w).mean.total * static_cast<double>(batch.size());
  }
  return total / static_cast<double>(n);
}

AdamW::AdamW(ParamSet& params, AdamWConfig cfg, std::vector<std::string> no_decay,
             std::vector<std::string> frozen)
    : params_(params), cfg_(cfg), no_decay_(no_decay.begin(), no_decay.end()),
      frozen_(frozen.begin(), frozen.end()) {
  if (cfg_.beta1 < 0.0 || cfg_.beta1 >= 1.0 || cfg_.beta2 < 0.0 || cfg_.beta2 >= 1.0) {
    throw ValidationError("adamw: betas must lie in [0, 1)");
  }
  if (cfg_.eps <= 0.0) throw ValidationError("adamw: eps must be positive");
  if (cfg_.weight_decay < 0.0) throw ValidationError("adamw: negative weight decay");
  for (const auto& [name, var] : params_.items()) {
    Slot slot{Tensor(var->value.rows(), var->value.cols()),
              Tensor(var->value.rows(), var->value.cols())};
    slots_.emplace(name, std::move(slot));
  }
}

void AdamW::step(const GradSink& grads, double lr) {
  if (!(lr >= 0.0) || !std::isfinite(lr)) throw ValidationError("adamw: bad learning rate");
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (const auto& [name, var] : params_.items()) {
    if (frozen_.count(name)) continue;
    Slot& slot = slots_.at(name);
    const Tensor* g = grads.find(var.get());
    const bool decay = no_decay_.count(name) == 0;
    Tensor& p = var->value;
    for (int i = 0; i < p.numel(); ++i) {
      const double gi = g != nullptr ? g->data()[i] : 0.0;
      double& mi = slot.m.data()[i];
      double& vi = slot.v.data()[i];
      mi = cfg_.beta1 * mi + (1.0 - cfg_.beta1) * gi;
      vi = cfg_.beta2 * vi + (1.0 - cfg_.beta2) * gi * gi;
      double update = (mi / bc1) / (std::sqrt(vi / bc2) + cfg_.eps);
      if (decay) update += cfg_.weight_decay * p.data()[i];
      p.data()[i] -= lr * update;
    }
  }
}

std::string AdamW::state_to_json() const {
  json j;
  j["format"] = "taco-adamw";
  j["version"] = 1;
  j["t"] = t_;
  json slots = json::object();
  for (const auto& [name, slot] : slots_) {
    json entry;
    entry["m"] = taco::io::tensor_to_base64(slot.m);
    entry["v"] = taco::io::tensor_to_base64(slot.v);
    slots[name] = entry;
  }
  j["slots"] = slots;
  return j.dump();
}

void AdamW::state_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ValidationError(std::string("adamw: state is not valid JSON: ") + e.what());
  }
  try {
    if (j.value("format", "") != "taco-adamw" || j.value("version", -1) != 1) {
      throw ValidationError("adamw: unrecognized state payload");
    }
    const json& slots = j.at("slots");
    for (const auto& item : slots.items()) {
      if (!slots_.count(item.key())) {
        throw ValidationError("adamw: state names unknown parameter '" + item.key() + "'");
      }
    }
    for (auto& [name, slot] : slots_) {
      if (!slots.contains(name)) {
        throw ValidationError("adamw: state is missing parameter '" + name + "'");
      }
      const json& entry = slots.at(name);
      slot.m = taco::io::tensor_from_base64(entry.at("m").get<std::string>(), slot.m.rows(),
                                            slot.m.cols());
      slot.v = taco::io::tensor_from_base64(entry.at("v").get<std::string>(), slot.v.rows(),
                                            slot.v.cols());
    }
    t_ = j.at("t").get<std::int64_t>();
  } catch (const json::exception& e) {
    throw ValidationError(std::string("adamw: malformed state: ") + e.what());
  }
}

double CosineRestartSchedule::lr_at(std::int64_t step) const {
  if (step < 0) throw ValidationError("schedule: negative step");
  if (period_steps < 1 || period_mult < 1) {
    throw ValidationError("schedule: period must be at least one step with mult >= 1");
  }
  std::int64_t t = step;
  std::int64_t cycle = period_steps;
  while (t >= cycle) {
    t -= cycle;
    cycle *= period_mult;
  }
  const double frac = static_cast<double>(t) / static_cast<double>(cycle);
  return min_lr + (base_lr - min_lr) * 0.5 * (1.0 + std::cos(std::numbers::pi * frac));
}

void TrainConfig::validate() const {
  if (epochs < 1) throw ValidationError("train: epochs must be at least 1");
  if (batch_size < 1) throw ValidationError("train: batch size must be at least 1");
  if (!(lr > 0.0)) throw ValidationError("train: learning rate must be positive");
  if (min_lr < 0.0 || min_lr > lr) throw ValidationError("train: min_lr outside [0, lr]");
  if (restart_period_epochs < 1) throw ValidationError("train: restart period must be >= 1 epoch");
  if (restart_mult < 1) throw ValidationError("train: restart mult must be >= 1");
  if (weights.lambda1 < 0.0 || weights.lambda2 < 0.0) {
    throw ValidationError("train: negative lambda weights");
  }
}

namespace {

constexpr const char* kCsvHeader = "epoch,ce,sparse,l2,total,lr\n";

struct ResumePoint {
  int next_epoch = 1;
  std::int64_t global_step = 0;
  int best_epoch = 0;
  double best_val = std::numeric_limits<double>::infinity();
  std::string rng_state;
  std::string adamw_state;
};

void save_train_state(const std::string& path, const ResumePoint& pt) {
  json j;
  j["format"] = "taco-train-state";
  j["version"] = 1;
  j["next_epoch"] = pt.next_epoch;
  j["global_step"] = pt.global_step;
  j["best_epoch"] = pt.best_epoch;
  j["best_val"] = pt.best_val;
  j["rng_state"] = pt.rng_state;
  j["adamw"] = json::parse(pt.adamw_state);
  std::ofstream out(path);
  if (!out) throw RuntimeFailure("train: cannot write state file " + path);
  out << j.dump() << "\n";
}

ResumePoint load_train_state(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("train: cannot open state file " + path);
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ValidationError("train: state file " + path + " is not valid JSON: " + e.what());
  }
  try {
    if (j.value("format", "") != "taco-train-state" || j.value("version", -1) != 1) {
      throw ValidationError("train: " + path + " is not a training state file");
    }
    ResumePoint pt;
    pt.next_epoch = j.at("next_epoch").get<int>();
    pt.global_step = j.at("global_step").get<std::int64_t>();
    pt.best_epoch = j.at("best_epoch").get<int>();
    pt.best_val = j.at("best_val").get<double>();
    pt.rng_state = j.at("rng_state").get<std::string>();
    pt.adamw_state = j.at("adamw").dump();
    return pt;
  } catch (const json::exception& e) {
    throw ValidationError("train: malformed state file " + path + ": " + e.what());
  }
}

}  // namespace

TrainResult train(model::TacoModel& model, const data::SequenceDataset& train_set,
                  const data::SequenceDataset& val_set, const TrainConfig& cfg, bool resume) {
  cfg.validate();
  if (train_set.sequences.empty()) throw ValidationError("train: dataset is empty");
  if (train_set.shot < 1) throw ValidationError("train: dataset shot must be at least 1");

  const int n = static_cast<int>(train_set.sequences.size());
  const int bs = std::min(cfg.batch_size, n);
  const std::int64_t steps_per_epoch = (n + bs - 1) / bs;
  CosineRestartSchedule sched;
  sched.base_lr = cfg.lr;
  sched.min_lr = cfg.min_lr;
  sched.period_steps = std::max<std::int64_t>(1, cfg.restart_period_epochs * steps_per_epoch);
  sched.period_mult = cfg.restart_mult;

  AdamW opt(model.params(), cfg.adamw, {"tg.W"}, model.frozen_params());
  Rng shuffle_rng = Rng(cfg.seed).derive("train-shuffle");

  const bool have_out = !cfg.out_dir.empty();
  std::string metrics_path, best_path, last_path, state_path;
  if (have_out) {
    std::filesystem::create_directories(cfg.out_dir);
    metrics_path = cfg.out_dir + "/metrics.csv";
    best_path = cfg.out_dir + "/best.json";
    last_path = cfg.out_dir + "/last.json";
    state_path = cfg.out_dir + "/state.json";
  }

  ResumePoint pt;
  if (resume) {
    if (!have_out) throw ValidationError("train: resume requires an output directory");
    pt = load_train_state(state_path);
    model::load_checkpoint(model, last_path);
    opt.state_from_json(pt.adamw_state);
    shuffle_rng.set_state(pt.rng_state);
  } else if (have_out) {
    std::ofstream csv(metrics_path, std::ios::trunc);
    if (!csv) throw RuntimeFailure("train: cannot write " + metrics_path);
    csv << kCsvHeader;
  }

  TrainResult res;
  res.best_epoch = pt.best_epoch;
  res.best_val = pt.best_val;
  if (resume && pt.best_epoch > 0) res.best_checkpoint = best_path;
  std::int64_t gstep = pt.global_step;

  for (int epoch = pt.next_epoch; epoch <= cfg.epochs; ++epoch) {
    std::vector<int> order = shuffle_rng.permutation(n);
    double sum_ce = 0.0, sum_sp = 0.0, sum_l2 = 0.0, sum_tot = 0.0;
    double last_lr = sched.lr_at(gstep);
    int batch_id = 0;
    for (int b = 0; b < n; b += bs, ++batch_id) {
      std::vector<const data::IclSequence*> batch;
      for (int i = b; i < std::min(n, b + bs); ++i) {
        batch.push_back(&train_set.sequences[static_cast<size_t>(order[static_cast<size_t>(i)])]);
      }
      BatchLoss bl = batch_loss(model, batch, cfg.weights);
      if (!std::isfinite(bl.mean.total)) {
        throw RuntimeFailure("train: non-finite loss in epoch " + std::to_string(epoch) +
                             ", batch " + std::to_string(batch_id));
      }
      GradSink sink = backward(bl.total);
      last_lr = sched.lr_at(gstep);
      opt.step(sink, last_lr);
      ++gstep;
      const double bsz = static_cast<double>(batch.size());
      sum_ce += bl.mean.ce * bsz;
      sum_sp += bl.mean.sparse * bsz;
      sum_l2 += bl.mean.l2_tg * bsz;
      sum_tot += bl.mean.total * bsz;
    }

    EpochRow row;
    row.epoch = epoch;
    row.train_loss.ce = sum_ce / n;
    row.train_loss.sparse = sum_sp / n;
    row.train_loss.l2_tg = sum_l2 / n;
    row.train_loss.total = sum_tot / n;
    row.lr = last_lr;
    row.val_total = val_set.sequences.empty()
                        ? row.train_loss.total
                        : dataset_loss(model, val_set, cfg.weights, bs);
    if (row.val_total < res.best_val) {
      res.best_val = row.val_total;
      res.best_epoch = epoch;
      if (have_out) {
        model::save_checkpoint(model, best_path);
        res.best_checkpoint = best_path;
      }
    }
    res.history.push_back(row);

    if (have_out) {
      std::ofstream csv(metrics_path, std::ios::app);
      if (!csv) throw RuntimeFailure("train: cannot append to " + metrics_path);
      csv << epoch << ',' << fmt_double(row.train_loss.ce) << ',' << fmt_double(row.train_loss.sparse)
          << ',' << fmt_double(row.train_loss.l2_tg) << ',' << fmt_double(row.train_loss.total)
          << ',' << fmt_double(row.lr) << "\n";
      model::save_checkpoint(model, last_path);
      ResumePoint next;
      next.next_epoch = epoch + 1;
      next.global_step = gstep;
      next.best_epoch = res.best_epoch;
      next.best_val = res.best_val;
      next.rng_state = shuffle_rng.state();
      next.adamw_state = opt.state_to_json();
      save_train_state(state_path, next);
    }
  }
  return res;
}

}  // namespace taco::train
