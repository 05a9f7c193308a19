#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <sstream>
#include <vector>

#include "doctest.h"
#include "taco/autograd.hpp"
#include "taco/data.hpp"
#include "taco/decoder.hpp"
#include "taco/errors.hpp"
#include "taco/gradcheck.hpp"
#include "taco/rng.hpp"
#include "taco/training.hpp"

using namespace taco;
using namespace taco::train;
using taco::model::DecoderConfig;
using taco::model::ForwardResult;
using taco::model::TacoModel;
using taco::num::backward;
using taco::num::constant;
using taco::num::grad_check;
using taco::num::GradCheckReport;
using taco::num::GradSink;
using taco::num::ParamSet;
using taco::num::Rng;
using taco::num::Tensor;
using taco::num::Var;

namespace {

std::filesystem::path temp_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / "taco_training_tests" / name;
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

Tensor random_row(Rng& rng, int n, double scale = 1.0) {
  Tensor t(1, n);
  for (int i = 0; i < n; ++i) t.at(i) = rng.normal() * scale;
  return t;
}

data::DemoLibrary make_library(Rng& rng, int n_demos, int d) {
  data::DemoLibrary lib;
  lib.d_img = lib.d_txt = d;
  lib.instruction = "name the object";
  lib.instruction_emb = random_row(rng, d);
  for (int i = 0; i < n_demos; ++i) {
    data::Demonstration demo;
    demo.id = "d" + std::to_string(i);
    demo.image_emb = random_row(rng, d);
    demo.q_emb = random_row(rng, d);
    demo.r_emb = random_row(rng, d);
    demo.qr_emb = random_row(rng, d);
    demo.text_q = "q-" + demo.id;
    demo.text_r = "r-" + demo.id;
    lib.demos.emplace(demo.id, demo);
  }
  return lib;
}

data::QuerySample make_query(Rng& rng, int d, const std::string& id) {
  data::QuerySample q;
  q.id = id;
  q.image_emb = random_row(rng, d);
  q.q_emb = random_row(rng, d);
  q.text_q = "what is it";
  return q;
}

data::IclSequence make_sequence(const data::DemoLibrary& lib,
                                const std::vector<std::string>& ids,
                                const data::QuerySample& query) {
  data::IclSequence seq;
  seq.instruction = lib.instruction;
  seq.icd_ids = ids;
  seq.query = query;
  return seq;
}

DecoderConfig small_config(int d, int heads, int depth, std::vector<int> l_ta) {
  DecoderConfig cfg;
  cfg.d = d;
  cfg.heads = heads;
  cfg.depth = depth;
  cfg.ffn_mult = 2;
  cfg.l_ta = std::move(l_ta);
  cfg.fusion.d = cfg.fusion.d_img = cfg.fusion.d_txt = d;
  return cfg;
}

// Random two-demonstration sequences over the library, distinct ids per
// sequence, one fresh query each.
data::SequenceDataset make_dataset(Rng& rng, const data::DemoLibrary& lib, int count, int d) {
  data::SequenceDataset set;
  set.shot = 2;
  std::vector<std::string> ids;
  for (const auto& [id, demo] : lib.demos) ids.push_back(id);
  for (int s = 0; s < count; ++s) {
    int a = rng.uniform_int(static_cast<int>(ids.size()));
    int b = rng.uniform_int(static_cast<int>(ids.size()) - 1);
    if (b >= a) ++b;
    set.sequences.push_back(make_sequence(
        lib, {ids[static_cast<size_t>(a)], ids[static_cast<size_t>(b)]},
        make_query(rng, d, "q" + std::to_string(s))));
  }
  return set;
}

// The loop entry point shares its name with the enclosing namespace, so the
// using-directives above make unqualified calls ambiguous.
TrainResult run_train(TacoModel& m, const data::SequenceDataset& train_set,
                      const data::SequenceDataset& val_set, const TrainConfig& cfg,
                      bool resume = false) {
  return taco::train::train(m, train_set, val_set, cfg, resume);
}

double hand_masked_ce(const Tensor& logits, const std::vector<int>& targets,
                      const Tensor& support) {
  double total = 0.0;
  for (int r = 0; r < logits.rows(); ++r) {
    double mx = -1e300;
    for (int j = 0; j < logits.cols(); ++j) {
      if (support.at(r, j) == 1.0) mx = std::max(mx, logits.at(r, j));
    }
    double z = 0.0;
    for (int j = 0; j < logits.cols(); ++j) {
      if (support.at(r, j) == 1.0) z += std::exp(logits.at(r, j) - mx);
    }
    total += mx + std::log(z) - logits.at(r, targets[static_cast<size_t>(r)]);
  }
  return total / logits.rows();
}

}  // namespace

TEST_CASE("cross entropy hits the closed forms") {
  // Saturated logits with one demo and the end token.
  Tensor sat(2, 2);
  sat.at(0, 0) = 30.0;
  sat.at(0, 1) = -30.0;
  sat.at(1, 0) = -30.0;
  sat.at(1, 1) = 30.0;
  Tensor support = Tensor::full(2, 2, 1.0);
  support.at(1, 0) = 0.0;  // the demo was used at step 0
  Var loss = ce_loss(constant(sat), {0, 1}, support);
  CHECK(loss->value.scalar_value() < 1e-9);
  CHECK(loss->value.scalar_value() >= 0.0);

  // Uniform logits over m supported classes cost log m.
  Tensor flat = Tensor::full(2, 4, 1.7);
  Var uniform_loss = ce_loss(constant(flat), {2, 0}, Tensor::full(2, 4, 1.0));
  CHECK(uniform_loss->value.scalar_value() == doctest::Approx(std::log(4.0)).epsilon(1e-12));

  // Random case against an independent evaluation.
  Rng rng(5);
  Tensor logits(3, 5);
  for (int i = 0; i < logits.numel(); ++i) logits.data()[i] = rng.normal();
  Tensor sup = Tensor::full(3, 5, 1.0);
  sup.at(1, 0) = 0.0;
  sup.at(2, 0) = 0.0;
  sup.at(2, 3) = 0.0;
  std::vector<int> targets = {0, 2, 4};
  Var random_loss = ce_loss(constant(logits), targets, sup);
  CHECK(random_loss->value.scalar_value() ==
        doctest::Approx(hand_masked_ce(logits, targets, sup)).epsilon(1e-12));

  CHECK_THROWS_AS(ce_loss(constant(logits), {0, 2}, sup), ValidationError);
  CHECK_THROWS_AS(ce_loss(constant(logits), {0, 2, 9}, sup), ValidationError);
  CHECK_THROWS_AS(ce_loss(constant(logits), {0, 0, 4}, sup), ValidationError);  // masked target
  CHECK_THROWS_AS(ce_loss(constant(logits), targets, Tensor::full(2, 5, 1.0)), ValidationError);
}

TEST_CASE("sequence cross entropy masks repeats and matches hand evaluation") {
  Rng rng(15);
  const int d = 8;
  auto lib = make_library(rng, 3, d);
  auto query = make_query(rng, d, "q0");
  TacoModel model(small_config(d, 2, 2, {2}), lib, 31);
  auto seq = make_sequence(lib, {"d1", "d0"}, query);

  model::ForwardOptions opts;
  auto fwd = model.forward(seq, opts);
  Var lib_emb = model.library_embeddings();
  Var logits = model.prediction_logits(fwd, lib_emb);

  // Targets: d1, d0, end. Steps after the first forbid reusing placed ids.
  std::vector<int> targets = {model.vocab_index("d1"), model.vocab_index("d0"),
                              model.eos_index()};
  Tensor support = Tensor::full(3, 4, 1.0);
  support.at(1, model.vocab_index("d1")) = 0.0;
  support.at(2, model.vocab_index("d1")) = 0.0;
  support.at(2, model.vocab_index("d0")) = 0.0;
  double expected = hand_masked_ce(logits->value, targets, support);

  Var ce = sequence_ce(model, fwd, seq, lib_emb);
  CHECK(ce->value.scalar_value() == doctest::Approx(expected).epsilon(1e-12));

  auto ghost = make_sequence(lib, {"d1", "ghost"}, query);
  CHECK_THROWS_AS(model.forward(ghost, opts), ValidationError);
}

TEST_CASE("sparsity loss follows the mask rows") {
  // Hand-crafted artifacts: two demonstrations at positions 2 and 3, causal
  // support, one task-aware mask.
  ForwardResult fwd;
  fwd.tokens.icd_positions = {2, 3};
  const int T = 5;
  fwd.attn_support = Tensor(T, T);
  for (int i = 0; i < T; ++i) {
    for (int j = 0; j <= i; ++j) fwd.attn_support.at(i, j) = 1.0;
  }

  SUBCASE("zero mask rows are uniform and cost nothing") {
    fwd.ta_masks.push_back(constant(Tensor(T, T)));
    Var loss = sparsity_loss(fwd);
    CHECK(std::abs(loss->value.scalar_value()) < 1e-12);
  }

  SUBCASE("a near-one-hot row contributes log m over N") {
    Tensor M(T, T);
    M.at(2, 0) = 40.0;  // row 2 support width 3
    fwd.ta_masks.push_back(constant(M));
    Var loss = sparsity_loss(fwd);
    // Row 3 is uniform (zero contribution); row 2 is saturated at one column.
    CHECK(loss->value.scalar_value() == doctest::Approx(std::log(3.0) / 2.0).epsilon(1e-9));

    Var rev = sparsity_loss(fwd, true);
    CHECK(rev->value.scalar_value() ==
          doctest::Approx(-loss->value.scalar_value()).epsilon(1e-15));
  }

  SUBCASE("rows with empty support are skipped and counted") {
    for (int j = 0; j < T; ++j) fwd.attn_support.at(2, j) = 0.0;
    Tensor M(T, T);
    M.at(3, 1) = 1.0;
    fwd.ta_masks.push_back(constant(M));
    int skipped = -1;
    Var loss = sparsity_loss(fwd, false, &skipped);
    CHECK(skipped == 1);
    CHECK(loss->value.scalar_value() > 0.0);
  }

  SUBCASE("no demonstrations or no masks cost exactly zero") {
    ForwardResult none;
    none.tokens.icd_positions = {};
    none.attn_support = Tensor(2, 2);
    CHECK(sparsity_loss(none)->value.scalar_value() == 0.0);
  }
}

TEST_CASE("sparsity on a real forward pass matches an independent evaluation") {
  Rng rng(25);
  const int d = 8;
  auto lib = make_library(rng, 4, d);
  auto query = make_query(rng, d, "q0");
  TacoModel model(small_config(d, 2, 2, {1, 2}), lib, 41);
  auto seq = make_sequence(lib, {"d0", "d2"}, query);
  auto fwd = model.forward(seq, {});

  double expected = 0.0;
  for (const Var& mask : fwd.ta_masks) {
    for (int pos : fwd.tokens.icd_positions) {
      // Softmax of the row over its causal support, then KL against uniform.
      double mx = -1e300;
      int m = 0;
      for (int j = 0; j < fwd.attn_support.cols(); ++j) {
        if (fwd.attn_support.at(pos, j) == 1.0) {
          mx = std::max(mx, mask->value.at(pos, j));
          ++m;
        }
      }
      double z = 0.0;
      for (int j = 0; j < fwd.attn_support.cols(); ++j) {
        if (fwd.attn_support.at(pos, j) == 1.0) z += std::exp(mask->value.at(pos, j) - mx);
      }
      for (int j = 0; j < fwd.attn_support.cols(); ++j) {
        if (fwd.attn_support.at(pos, j) == 1.0) {
          double p = std::exp(mask->value.at(pos, j) - mx) / z;
          expected += p * std::log(p * m);
        }
      }
    }
  }
  expected /= 2.0;  // number of demonstrations

  Var loss = sparsity_loss(fwd);
  CHECK(loss->value.scalar_value() == doctest::Approx(expected).epsilon(1e-10));
}

TEST_CASE("loss breakdown is additive and collapses to cross entropy") {
  Rng rng(35);
  const int d = 8;
  auto lib = make_library(rng, 4, d);
  auto query = make_query(rng, d, "q0");
  TacoModel model(small_config(d, 2, 2, {1, 2}), lib, 51);
  auto seq = make_sequence(lib, {"d0", "d3"}, query);
  Var lib_emb = model.library_embeddings();

  LossWeights w;
  w.lambda1 = 0.02;
  w.lambda2 = 1e-3;
  SequenceLoss sl = sequence_loss(model, seq, lib_emb, w);
  LossBreakdown v = sl.values();
  CHECK(v.sparse > 0.0);
  CHECK(v.l2_tg > 0.0);
  CHECK(std::abs(v.total - (v.ce + w.lambda1 * v.sparse + w.lambda2 * v.l2_tg)) < 1e-9);

  LossWeights zero;
  zero.lambda1 = 0.0;
  zero.lambda2 = 0.0;
  SequenceLoss plain = sequence_loss(model, seq, lib_emb, zero);
  CHECK(plain.values().total == plain.values().ce);

  // The guider penalty follows the initialization weight's squared norm.
  Var l2 = guider_l2(model);
  double want = 0.0;
  const Tensor& W = model.params().get("tg.W")->value;
  for (int i = 0; i < W.numel(); ++i) want += W.data()[i] * W.data()[i];
  CHECK(l2->value.scalar_value() == doctest::Approx(want).epsilon(1e-12));

  // Without a learned guider weight the penalty is exactly zero.
  DecoderConfig fixed_cfg = small_config(d, 2, 2, {1, 2});
  fixed_cfg.learned_tg_init = false;
  TacoModel fixed(fixed_cfg, lib, 52);
  CHECK(guider_l2(fixed)->value.scalar_value() == 0.0);
}

TEST_CASE("total loss gradient matches finite differences on a 2-demo instance") {
  Rng rng(45);
  const int d = 8;
  auto lib = make_library(rng, 3, d);
  auto query = make_query(rng, d, "q0");
  TacoModel model(small_config(d, 2, 2, {1, 2}), lib, 61);
  auto seq = make_sequence(lib, {"d0", "d2"}, query);

  LossWeights w;  // defaults: both auxiliary terms active
  auto build = [&]() {
    return sequence_loss(model, seq, model.library_embeddings(), w).total;
  };
  GradCheckReport rep = grad_check(build, model.params(), 1e-5);
  INFO("worst: " << rep.worst_param << "[" << rep.worst_index << "] analytic " << rep.analytic
                 << " numeric " << rep.numeric);
  CHECK(rep.max_rel_err < 1e-4);
}

TEST_CASE("adamw follows the update rule and respects exclusions") {
  ParamSet ps;
  Var w = ps.create("w", Tensor::row({1.0, -2.0}));
  Var frozen = ps.create("keep", Tensor::row({3.0}));
  Var plain = ps.create("bias", Tensor::row({0.5}));

  AdamWConfig acfg;  // defaults
  AdamW opt(ps, acfg, {"bias"}, {"keep"});

  GradSink sink;
  Tensor gw(1, 2);
  gw.at(0, 0) = 0.5;
  gw.at(0, 1) = -1.0;
  sink.add(w.get(), gw);
  Tensor gf(1, 1);
  gf.at(0, 0) = 7.0;
  sink.add(frozen.get(), gf);
  // "bias" receives no gradient at all this step.

  const double lr = 0.01;
  opt.step(sink, lr);
  CHECK(opt.steps() == 1);

  // Hand evaluation of one bias-corrected step with decoupled decay.
  double expected[2];
  double init[2] = {1.0, -2.0};
  double g[2] = {0.5, -1.0};
  for (int i = 0; i < 2; ++i) {
    double m = (1.0 - acfg.beta1) * g[i];
    double v = (1.0 - acfg.beta2) * g[i] * g[i];
    double mh = m / (1.0 - acfg.beta1);
    double vh = v / (1.0 - acfg.beta2);
    expected[i] = init[i] - lr * (mh / (std::sqrt(vh) + acfg.eps) + acfg.weight_decay * init[i]);
  }
  CHECK(w->value.at(0, 0) == doctest::Approx(expected[0]).epsilon(1e-15));
  CHECK(w->value.at(0, 1) == doctest::Approx(expected[1]).epsilon(1e-15));

  // Frozen parameter ignored even with a gradient present.
  CHECK(frozen->value.at(0, 0) == 3.0);
  // Decay-exempt parameter with zero gradient stays exactly put.
  CHECK(plain->value.at(0, 0) == 0.5);

  // A decayed parameter with zero gradient shrinks by lr * wd * p.
  ParamSet ps2;
  Var s = ps2.create("shrink", Tensor::row({2.0}));
  AdamW opt2(ps2, acfg, {}, {});
  GradSink empty;
  opt2.step(empty, lr);
  CHECK(s->value.at(0, 0) == doctest::Approx(2.0 - lr * acfg.weight_decay * 2.0).epsilon(1e-15));

  // Optimizer state round-trips through its serialized form.
  std::string state = opt.state_to_json();
  AdamW opt_restored(ps, acfg, {"bias"}, {"keep"});
  opt_restored.state_from_json(state);
  CHECK(opt_restored.steps() == 1);
  CHECK_THROWS_AS(opt_restored.state_from_json("{"), ValidationError);
}

TEST_CASE("cosine schedule restarts at the base rate") {
  CosineRestartSchedule sched;
  sched.base_lr = 1e-4;
  sched.period_steps = 10;
  sched.period_mult = 2;

  CHECK(sched.lr_at(0) == doctest::Approx(1e-4).epsilon(1e-15));
  CHECK(sched.lr_at(5) == doctest::Approx(0.5e-4).epsilon(1e-12));
  CHECK(sched.lr_at(10) == doctest::Approx(1e-4).epsilon(1e-15));  // first restart
  CHECK(sched.lr_at(20) == doctest::Approx(0.5e-4).epsilon(1e-12));  // mid second cycle
  CHECK(sched.lr_at(30) == doctest::Approx(1e-4).epsilon(1e-15));  // second restart
  for (int s = 1; s < 10; ++s) CHECK(sched.lr_at(s) < sched.lr_at(s - 1));

  CosineRestartSchedule floor = sched;
  floor.min_lr = 2e-5;
  CHECK(floor.lr_at(5) == doctest::Approx(6e-5).epsilon(1e-12));
  CHECK(floor.lr_at(0) == doctest::Approx(1e-4).epsilon(1e-15));

  CHECK_THROWS_AS(sched.lr_at(-1), ValidationError);
}

TEST_CASE("training improves the loss deterministically") {
  Rng rng(55);
  const int d = 8;
  auto lib = make_library(rng, 6, d);
  auto train_set = make_dataset(rng, lib, 20, d);

  TrainConfig cfg;
  cfg.epochs = 5;
  cfg.batch_size = 4;
  cfg.lr = 1e-3;
  cfg.seed = 7;
  cfg.out_dir = temp_dir("improves").string();

  DecoderConfig mc = small_config(d, 2, 2, {1, 2});
  TacoModel model(mc, lib, 70);
  TrainResult res = run_train(model, train_set, {}, cfg);
  REQUIRE(res.history.size() == 5);
  CHECK(res.history.back().train_loss.total < res.history.front().train_loss.total);
  CHECK(res.history.front().lr > 0.0);

  // Epoch rows carry the additive identity.
  for (const EpochRow& row : res.history) {
    CHECK(std::abs(row.train_loss.total -
                   (row.train_loss.ce + cfg.weights.lambda1 * row.train_loss.sparse +
                    cfg.weights.lambda2 * row.train_loss.l2_tg)) < 1e-9);
  }

  // CSV log: header plus one row per epoch.
  std::ifstream csv(cfg.out_dir + "/metrics.csv");
  REQUIRE(csv.good());
  std::string line;
  std::getline(csv, line);
  CHECK(line == "epoch,ce,sparse,l2,total,lr");
  int rows = 0;
  while (std::getline(csv, line)) {
    if (!line.empty()) ++rows;
  }
  CHECK(rows == 5);

  // Identical seed and config reproduce the run bit for bit.
  TacoModel again(mc, lib, 70);
  TrainResult res2 = run_train(again, train_set, {}, cfg);
  REQUIRE(res2.history.size() == res.history.size());
  for (size_t i = 0; i < res.history.size(); ++i) {
    CHECK(res.history[i].train_loss.total == res2.history[i].train_loss.total);
    CHECK(res.history[i].lr == res2.history[i].lr);
  }
  for (const auto& [name, var] : model.params().items()) {
    const Tensor& other = again.params().get(name)->value;
    for (int i = 0; i < var->value.numel(); ++i) {
      CHECK(var->value.data()[i] == other.data()[i]);
    }
  }
}

TEST_CASE("validation selects the best checkpoint") {
  Rng rng(65);
  const int d = 8;
  auto lib = make_library(rng, 6, d);
  auto train_set = make_dataset(rng, lib, 16, d);
  auto val_set = make_dataset(rng, lib, 6, d);

  TrainConfig cfg;
  cfg.epochs = 4;
  cfg.batch_size = 4;
  cfg.lr = 1e-3;
  cfg.seed = 11;
  cfg.out_dir = temp_dir("bestval").string();

  DecoderConfig mc = small_config(d, 2, 2, {2});
  TacoModel model(mc, lib, 80);
  TrainResult res = run_train(model, train_set, val_set, cfg);

  double min_val = res.history[0].val_total;
  int argmin = 1;
  for (const EpochRow& row : res.history) {
    if (row.val_total < min_val) {
      min_val = row.val_total;
      argmin = row.epoch;
    }
  }
  CHECK(res.best_val == min_val);
  CHECK(res.best_epoch == argmin);
  REQUIRE_FALSE(res.best_checkpoint.empty());

  // The saved best checkpoint reproduces the recorded validation loss.
  TacoModel reload(mc, lib, 81);
  model::load_checkpoint(reload, res.best_checkpoint);
  double val = dataset_loss(reload, val_set, cfg.weights, cfg.batch_size);
  CHECK(val == doctest::Approx(res.best_val).epsilon(1e-12));
}

TEST_CASE("resumed training matches the uninterrupted run") {
  Rng rng(75);
  const int d = 8;
  auto lib = make_library(rng, 5, d);
  auto train_set = make_dataset(rng, lib, 12, d);

  DecoderConfig mc = small_config(d, 2, 2, {1, 2});

  TrainConfig full_cfg;
  full_cfg.epochs = 4;
  full_cfg.batch_size = 4;
  full_cfg.lr = 1e-3;
  full_cfg.seed = 13;
  full_cfg.out_dir = temp_dir("straight").string();
  TacoModel straight(mc, lib, 90);
  TrainResult full = run_train(straight, train_set, {}, full_cfg);

  TrainConfig part_cfg = full_cfg;
  part_cfg.out_dir = temp_dir("resumed").string();
  part_cfg.epochs = 2;
  TacoModel resumed(mc, lib, 90);
  run_train(resumed, train_set, {}, part_cfg);

  part_cfg.epochs = 4;
  TrainResult tail = run_train(resumed, train_set, {}, part_cfg, true);
  REQUIRE(tail.history.size() == 2);
  CHECK(tail.history[0].epoch == 3);
  CHECK(tail.history[1].epoch == 4);
  CHECK(tail.history[0].train_loss.total == full.history[2].train_loss.total);
  CHECK(tail.history[1].train_loss.total == full.history[3].train_loss.total);
  CHECK(tail.history[1].lr == full.history[3].lr);

  for (const auto& [name, var] : straight.params().items()) {
    const Tensor& other = resumed.params().get(name)->value;
    for (int i = 0; i < var->value.numel(); ++i) {
      CHECK(var->value.data()[i] == other.data()[i]);
    }
  }

  // The resumed run's metrics file accumulates all four epochs.
  std::ifstream csv(part_cfg.out_dir + "/metrics.csv");
  std::string line;
  std::getline(csv, line);
  int rows = 0;
  while (std::getline(csv, line)) {
    if (!line.empty()) ++rows;
  }
  CHECK(rows == 4);

  CHECK_THROWS_AS(run_train(resumed, train_set, {}, TrainConfig{}, true), ValidationError);
}

TEST_CASE("non-finite losses abort with the batch named") {
  Rng rng(85);
  const int d = 8;
  auto lib = make_library(rng, 4, d);
  auto train_set = make_dataset(rng, lib, 6, d);

  TrainConfig cfg;
  cfg.epochs = 1;
  cfg.batch_size = 3;
  cfg.seed = 17;

  DecoderConfig mc = small_config(d, 2, 2, {2});
  TacoModel model(mc, lib, 95);
  model.params().get("out.b_eos")->value.at(0, 0) = std::nan("");
  CHECK_THROWS_WITH_AS(run_train(model, train_set, {}, cfg), doctest::Contains("batch"),
                       RuntimeFailure);
}

TEST_CASE("training rejects malformed configs and datasets") {
  Rng rng(95);
  const int d = 8;
  auto lib = make_library(rng, 4, d);
  DecoderConfig mc = small_config(d, 2, 1, {});
  TacoModel model(mc, lib, 99);

  data::SequenceDataset empty;
  empty.shot = 2;
  CHECK_THROWS_AS(run_train(model, empty, {}, TrainConfig{}), ValidationError);

  auto ok = make_dataset(rng, lib, 4, d);
  TrainConfig bad;
  bad.epochs = 0;
  CHECK_THROWS_AS(run_train(model, ok, {}, bad), ValidationError);
  bad = TrainConfig{};
  bad.lr = 0.0;
  CHECK_THROWS_AS(run_train(model, ok, {}, bad), ValidationError);
  bad = TrainConfig{};
  bad.weights.lambda1 = -0.1;
  CHECK_THROWS_AS(run_train(model, ok, {}, bad), ValidationError);

  data::SequenceDataset zero_shot = ok;
  zero_shot.shot = 0;
  for (auto& seq : zero_shot.sequences) seq.icd_ids.clear();
  CHECK_THROWS_AS(run_train(model, zero_shot, {}, TrainConfig{}), ValidationError);
}
