#include "taco/cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

#include <json.hpp>

#include "taco/errors.hpp"
#include "taco/metrics.hpp"
#include "taco/remote.hpp"
#include "taco/rng.hpp"

namespace taco::cli {

using json = nlohmann::json;
using taco::num::Rng;

namespace {

constexpr const char* kVersion = "taco/1";

std::uint64_t sub_seed(std::uint64_t master, std::string_view label) {
  return num::mix64(master ^ num::fnv1a(label));
}

// --- strict JSON access -------------------------------------------------------

[[noreturn]] void bad_key(const std::string& path, const std::string& key,
                          const std::string& why) {
  throw ValidationError("run_config: " + path + "." + key + ": " + why);
}

void require_keys(const json& j, const std::string& path,
                  const std::set<std::string>& allowed) {
  if (!j.is_object())
    throw ValidationError("run_config: " + path + ": expected an object");
  for (const auto& item : j.items())
    if (allowed.count(item.key()) == 0)
      bad_key(path, item.key(), "unknown key");
}

double get_num(const json& j, const std::string& path, const std::string& key) {
  if (!j.at(key).is_number()) bad_key(path, key, "expected a number");
  return j.at(key).get<double>();
}

int get_int(const json& j, const std::string& path, const std::string& key) {
  if (!j.at(key).is_number_integer()) bad_key(path, key, "expected an integer");
  return j.at(key).get<int>();
}

std::uint64_t get_u64(const json& j, const std::string& path, const std::string& key) {
  const json& v = j.at(key);
  if (!v.is_number_integer() || (v.is_number_integer() && !v.is_number_unsigned() &&
                                 v.get<std::int64_t>() < 0))
    bad_key(path, key, "expected a non-negative integer");
  return v.get<std::uint64_t>();
}

bool get_bool(const json& j, const std::string& path, const std::string& key) {
  if (!j.at(key).is_boolean()) bad_key(path, key, "expected a boolean");
  return j.at(key).get<bool>();
}

std::string get_string(const json& j, const std::string& path, const std::string& key) {
  if (!j.at(key).is_string()) bad_key(path, key, "expected a string");
  return j.at(key).get<std::string>();
}

std::vector<std::string> get_string_array(const json& j, const std::string& path,
                                          const std::string& key) {
  const json& v = j.at(key);
  if (!v.is_array()) bad_key(path, key, "expected an array of strings");
  std::vector<std::string> out;
  for (const auto& e : v) {
    if (!e.is_string()) bad_key(path, key, "expected an array of strings");
    out.push_back(e.get<std::string>());
  }
  return out;
}

// --- section parsers ------------------------------------------------------------

world::WorldSpec preset_by_name(const std::string& name) {
  if (name == "specific_mapping") return world::specific_mapping_spec();
  if (name == "generalized_mapping") return world::generalized_mapping_spec();
  if (name == "style_dominant") return world::style_dominant_spec();
  throw ValidationError("run_config: world.preset: unknown preset \"" + name +
                                "\" (specific_mapping | generalized_mapping | style_dominant)");
}

void parse_world(const json& j, RunConfig& cfg) {
  const std::string path = "world";
  require_keys(j, path,
               {"preset", "latent_dim", "emb_dim", "clusters", "demos_per_cluster",
                "queries_per_cluster", "centroid_sep", "content_scale", "style_scale",
                "style_home_prob", "img_noise", "txt_noise", "label_emb_scale",
                "instruction", "labels"});
  if (j.contains("preset")) cfg.world_preset = get_string(j, path, "preset");
  world::WorldSpec spec = preset_by_name(cfg.world_preset);
  if (j.contains("latent_dim")) spec.latent_dim = get_int(j, path, "latent_dim");
  if (j.contains("emb_dim")) spec.emb_dim = get_int(j, path, "emb_dim");
  if (j.contains("clusters")) spec.clusters = get_int(j, path, "clusters");
  if (j.contains("demos_per_cluster"))
    spec.demos_per_cluster = get_int(j, path, "demos_per_cluster");
  if (j.contains("queries_per_cluster"))
    spec.queries_per_cluster = get_int(j, path, "queries_per_cluster");
  if (j.contains("centroid_sep")) spec.centroid_sep = get_num(j, path, "centroid_sep");
  if (j.contains("content_scale")) spec.content_scale = get_num(j, path, "content_scale");
  if (j.contains("style_scale")) spec.style_scale = get_num(j, path, "style_scale");
  if (j.contains("style_home_prob"))
    spec.style_home_prob = get_num(j, path, "style_home_prob");
  if (j.contains("img_noise")) spec.img_noise = get_num(j, path, "img_noise");
  if (j.contains("txt_noise")) spec.txt_noise = get_num(j, path, "txt_noise");
  if (j.contains("label_emb_scale"))
    spec.label_emb_scale = get_num(j, path, "label_emb_scale");
  if (j.contains("instruction")) spec.instruction = get_string(j, path, "instruction");
  if (j.contains("labels")) {
    const json& v = j.at("labels");
    if (!v.is_array()) bad_key(path, "labels", "expected an array of [a, b] pairs");
    spec.labels.clear();
    for (const auto& pair : v) {
      if (!pair.is_array() || pair.size() != 2 || !pair[0].is_string() ||
          !pair[1].is_string())
        bad_key(path, "labels", "expected an array of [a, b] string pairs");
      spec.labels.push_back({pair[0].get<std::string>(), pair[1].get<std::string>()});
    }
  }
  cfg.world = spec;
}

void parse_model(const json& j, RunConfig& cfg) {
  const std::string path = "model";
  require_keys(j, path,
               {"depth", "d", "heads", "ffn_mult", "l_ta", "alpha_init", "log_t_cap",
                "literal_query_coupling", "with_task_token", "update_guider",
                "learned_tg_init", "tied_head", "guider_zero_image", "guider_zero_query",
                "guider_zero_inst", "fusion_mode", "fusion_theta", "scalar_gate"});
  model::DecoderConfig& m = cfg.model;
  if (j.contains("depth")) m.depth = get_int(j, path, "depth");
  if (j.contains("d")) m.d = get_int(j, path, "d");
  if (j.contains("heads")) m.heads = get_int(j, path, "heads");
  if (j.contains("ffn_mult")) m.ffn_mult = get_int(j, path, "ffn_mult");
  if (j.contains("l_ta")) {
    const json& v = j.at("l_ta");
    if (!v.is_array()) bad_key(path, "l_ta", "expected an array of layer indices");
    m.l_ta.clear();
    for (const auto& e : v) {
      if (!e.is_number_integer()) bad_key(path, "l_ta", "expected integer layer indices");
      m.l_ta.push_back(e.get<int>());
    }
  }
  if (j.contains("alpha_init")) m.alpha_init = get_num(j, path, "alpha_init");
  if (j.contains("log_t_cap")) m.log_t_cap = get_num(j, path, "log_t_cap");
  if (j.contains("literal_query_coupling"))
    m.literal_query_coupling = get_bool(j, path, "literal_query_coupling");
  if (j.contains("with_task_token"))
    m.with_task_token = get_bool(j, path, "with_task_token");
  if (j.contains("update_guider")) m.update_guider = get_bool(j, path, "update_guider");
  if (j.contains("learned_tg_init"))
    m.learned_tg_init = get_bool(j, path, "learned_tg_init");
  if (j.contains("tied_head")) m.tied_head = get_bool(j, path, "tied_head");
  if (j.contains("guider_zero_image"))
    m.guider_flags.zero_image = get_bool(j, path, "guider_zero_image");
  if (j.contains("guider_zero_query"))
    m.guider_flags.zero_query = get_bool(j, path, "guider_zero_query");
  if (j.contains("guider_zero_inst"))
    m.guider_flags.zero_inst = get_bool(j, path, "guider_zero_inst");
  if (j.contains("fusion_mode"))
    m.fusion.mode = model::fusion_mode_from_string(get_string(j, path, "fusion_mode"));
  if (j.contains("fusion_theta")) m.fusion.theta = get_num(j, path, "fusion_theta");
  if (j.contains("scalar_gate"))
    m.fusion.scalar_gate = get_bool(j, path, "scalar_gate");
}

void parse_train(const json& j, RunConfig& cfg) {
  const std::string path = "train";
  require_keys(j, path,
               {"epochs", "batch_size", "lr", "min_lr", "restart_period_epochs",
                "restart_mult", "lambda1", "lambda2", "reverse_sparsity", "weight_decay",
                "val_fraction", "sweep"});
  train::TrainConfig& t = cfg.train;
  if (j.contains("epochs")) t.epochs = get_int(j, path, "epochs");
  if (j.contains("batch_size")) t.batch_size = get_int(j, path, "batch_size");
  if (j.contains("lr")) t.lr = get_num(j, path, "lr");
  if (j.contains("min_lr")) t.min_lr = get_num(j, path, "min_lr");
  if (j.contains("restart_period_epochs"))
    t.restart_period_epochs = get_int(j, path, "restart_period_epochs");
  if (j.contains("restart_mult")) t.restart_mult = get_int(j, path, "restart_mult");
  if (j.contains("lambda1")) t.weights.lambda1 = get_num(j, path, "lambda1");
  if (j.contains("lambda2")) t.weights.lambda2 = get_num(j, path, "lambda2");
  if (j.contains("reverse_sparsity"))
    t.weights.reverse_sparsity = get_bool(j, path, "reverse_sparsity");
  if (j.contains("weight_decay"))
    t.adamw.weight_decay = get_num(j, path, "weight_decay");
  if (j.contains("val_fraction")) cfg.val_fraction = get_num(j, path, "val_fraction");
  if (j.contains("sweep")) {
    const json& v = j.at("sweep");
    if (!v.is_array()) bad_key(path, "sweep", "expected an array of [lambda1, lambda2]");
    cfg.sweep.clear();
    for (const auto& pair : v) {
      if (!pair.is_array() || pair.size() != 2 || !pair[0].is_number() ||
          !pair[1].is_number())
        bad_key(path, "sweep", "expected an array of [lambda1, lambda2] number pairs");
      cfg.sweep.push_back({pair[0].get<double>(), pair[1].get<double>()});
    }
  }
}

void parse_oracle(const json& j, RunConfig& cfg) {
  const std::string path = "oracle";
  require_keys(j, path, {"shots", "pool_per_shot", "beam", "k_clusters", "m_per_cluster"});
  search::OracleConfig& o = cfg.oracle;
  if (j.contains("shots")) o.shots = get_int(j, path, "shots");
  if (j.contains("pool_per_shot")) o.pool_per_shot = get_int(j, path, "pool_per_shot");
  if (j.contains("beam")) o.beam = get_int(j, path, "beam");
  if (j.contains("k_clusters")) o.k_clusters = get_int(j, path, "k_clusters");
  if (j.contains("m_per_cluster")) o.m_per_cluster = get_int(j, path, "m_per_cluster");
}

void parse_infer(const json& j, RunConfig& cfg) {
  const std::string path = "infer";
  require_keys(j, path, {"beam_width", "n"});
  if (j.contains("beam_width")) cfg.infer_beam_width = get_int(j, path, "beam_width");
  if (j.contains("n")) cfg.infer_n = get_int(j, path, "n");
}

void parse_scorer(const json& j, RunConfig& cfg) {
  const std::string path = "scorer";
  require_keys(j, path,
               {"kind", "mode", "seed", "align", "cohesion", "label_penalty", "pos_slope",
                "pos_floor", "prior_gain", "vote_gain", "recog_align", "recog_cohesion",
                "recog_floor", "zero_shot_recog", "noise", "url", "timeout_sec",
                "max_retries"});
  if (j.contains("kind")) cfg.scorer_kind = get_string(j, path, "kind");
  world::ScorerParams& p = cfg.scorer_params;
  if (j.contains("mode")) {
    const std::string mode = get_string(j, path, "mode");
    if (mode == "order_invariant")
      p.mode = world::ScorerParams::Mode::order_invariant;
    else if (mode == "position_weighted")
      p.mode = world::ScorerParams::Mode::position_weighted;
    else
      bad_key(path, "mode", "expected order_invariant or position_weighted");
  }
  if (j.contains("seed")) p.seed = get_u64(j, path, "seed");
  if (j.contains("align")) p.align = get_num(j, path, "align");
  if (j.contains("cohesion")) p.cohesion = get_num(j, path, "cohesion");
  if (j.contains("label_penalty")) p.label_penalty = get_num(j, path, "label_penalty");
  if (j.contains("pos_slope")) p.pos_slope = get_num(j, path, "pos_slope");
  if (j.contains("pos_floor")) p.pos_floor = get_num(j, path, "pos_floor");
  if (j.contains("prior_gain")) p.prior_gain = get_num(j, path, "prior_gain");
  if (j.contains("vote_gain")) p.vote_gain = get_num(j, path, "vote_gain");
  if (j.contains("recog_align")) p.recog_align = get_num(j, path, "recog_align");
  if (j.contains("recog_cohesion")) p.recog_cohesion = get_num(j, path, "recog_cohesion");
  if (j.contains("recog_floor")) p.recog_floor = get_num(j, path, "recog_floor");
  if (j.contains("zero_shot_recog"))
    p.zero_shot_recog = get_num(j, path, "zero_shot_recog");
  if (j.contains("noise")) p.noise = get_num(j, path, "noise");
  if (j.contains("url")) cfg.scorer_url = get_string(j, path, "url");
  if (j.contains("timeout_sec")) cfg.scorer_timeout_sec = get_num(j, path, "timeout_sec");
  if (j.contains("max_retries")) cfg.scorer_max_retries = get_int(j, path, "max_retries");
}

void parse_eval(const json& j, RunConfig& cfg) {
  const std::string path = "eval";
  require_keys(j, path,
               {"methods", "perturbations", "k_perms", "repeats", "metric", "shots",
                "em_factor", "wl_fraction", "bi_scale", "demo_n_perms", "demo_k_top",
                "checkpoint"});
  if (j.contains("methods")) cfg.eval_methods = get_string_array(j, path, "methods");
  if (j.contains("perturbations"))
    cfg.eval_perturbations = get_string_array(j, path, "perturbations");
  if (j.contains("k_perms")) cfg.eval_k_perms = get_int(j, path, "k_perms");
  if (j.contains("repeats")) cfg.eval_repeats = get_int(j, path, "repeats");
  if (j.contains("metric")) cfg.eval_metric = get_string(j, path, "metric");
  if (j.contains("shots")) cfg.eval_shots = get_int(j, path, "shots");
  if (j.contains("em_factor")) cfg.eval_em_factor = get_num(j, path, "em_factor");
  if (j.contains("wl_fraction")) cfg.eval_wl_fraction = get_num(j, path, "wl_fraction");
  if (j.contains("bi_scale")) cfg.eval_bi_scale = get_num(j, path, "bi_scale");
  if (j.contains("demo_n_perms")) cfg.eval_demo_n_perms = get_int(j, path, "demo_n_perms");
  if (j.contains("demo_k_top")) cfg.eval_demo_k_top = get_int(j, path, "demo_k_top");
  if (j.contains("checkpoint")) cfg.eval_checkpoint = get_string(j, path, "checkpoint");
}

// --- canonical form ---------------------------------------------------------------

json canonical_json_doc(const RunConfig& c) {
  json w{{"preset", c.world_preset},
         {"latent_dim", c.world.latent_dim},
         {"emb_dim", c.world.emb_dim},
         {"clusters", c.world.clusters},
         {"demos_per_cluster", c.world.demos_per_cluster},
         {"queries_per_cluster", c.world.queries_per_cluster},
         {"centroid_sep", c.world.centroid_sep},
         {"content_scale", c.world.content_scale},
         {"style_scale", c.world.style_scale},
         {"style_home_prob", c.world.style_home_prob},
         {"img_noise", c.world.img_noise},
         {"txt_noise", c.world.txt_noise},
         {"label_emb_scale", c.world.label_emb_scale},
         {"instruction", c.world.instruction}};
  json labels = json::array();
  for (const auto& pair : c.world.labels) labels.push_back({pair[0], pair[1]});
  w["labels"] = labels;

  json m{{"depth", c.model.depth},
         {"d", c.model.d},
         {"heads", c.model.heads},
         {"ffn_mult", c.model.ffn_mult},
         {"l_ta", c.model.l_ta},
         {"alpha_init", c.model.alpha_init},
         {"log_t_cap", c.model.log_t_cap},
         {"literal_query_coupling", c.model.literal_query_coupling},
         {"with_task_token", c.model.with_task_token},
         {"update_guider", c.model.update_guider},
         {"learned_tg_init", c.model.learned_tg_init},
         {"tied_head", c.model.tied_head},
         {"guider_zero_image", c.model.guider_flags.zero_image},
         {"guider_zero_query", c.model.guider_flags.zero_query},
         {"guider_zero_inst", c.model.guider_flags.zero_inst},
         {"fusion_mode", model::to_string(c.model.fusion.mode)},
         {"fusion_theta", c.model.fusion.theta},
         {"scalar_gate", c.model.fusion.scalar_gate}};

  json sweep = json::array();
  for (const auto& pair : c.sweep) sweep.push_back({pair[0], pair[1]});
  json t{{"epochs", c.train.epochs},
         {"batch_size", c.train.batch_size},
         {"lr", c.train.lr},
         {"min_lr", c.train.min_lr},
         {"restart_period_epochs", c.train.restart_period_epochs},
         {"restart_mult", c.train.restart_mult},
         {"lambda1", c.train.weights.lambda1},
         {"lambda2", c.train.weights.lambda2},
         {"reverse_sparsity", c.train.weights.reverse_sparsity},
         {"weight_decay", c.train.adamw.weight_decay},
         {"val_fraction", c.val_fraction},
         {"sweep", sweep}};

  json o{{"shots", c.oracle.shots},
         {"pool_per_shot", c.oracle.pool_per_shot},
         {"beam", c.oracle.beam},
         {"k_clusters", c.oracle.k_clusters},
         {"m_per_cluster", c.oracle.m_per_cluster}};

  json inf{{"beam_width", c.infer_beam_width}, {"n", c.infer_n}};

  const world::ScorerParams& p = c.scorer_params;
  json s{{"kind", c.scorer_kind},
         {"mode", p.mode == world::ScorerParams::Mode::order_invariant
                      ? "order_invariant"
                      : "position_weighted"},
         {"seed", p.seed},
         {"align", p.align},
         {"cohesion", p.cohesion},
         {"label_penalty", p.label_penalty},
         {"pos_slope", p.pos_slope},
         {"pos_floor", p.pos_floor},
         {"prior_gain", p.prior_gain},
         {"vote_gain", p.vote_gain},
         {"recog_align", p.recog_align},
         {"recog_cohesion", p.recog_cohesion},
         {"recog_floor", p.recog_floor},
         {"zero_shot_recog", p.zero_shot_recog},
         {"noise", p.noise},
         {"url", c.scorer_url},
         {"timeout_sec", c.scorer_timeout_sec},
         {"max_retries", c.scorer_max_retries}};

  json e{{"methods", c.eval_methods},
         {"perturbations", c.eval_perturbations},
         {"k_perms", c.eval_k_perms},
         {"repeats", c.eval_repeats},
         {"metric", c.eval_metric},
         {"shots", c.eval_shots},
         {"em_factor", c.eval_em_factor},
         {"wl_fraction", c.eval_wl_fraction},
         {"bi_scale", c.eval_bi_scale},
         {"demo_n_perms", c.eval_demo_n_perms},
         {"demo_k_top", c.eval_demo_k_top},
         {"checkpoint", c.eval_checkpoint}};

  return json{{"seed", c.seed}, {"out_dir", c.out_dir}, {"world", w},  {"model", m},
              {"train", t},     {"oracle", o},          {"infer", inf}, {"scorer", s},
              {"eval", e}};
}

// --- file plumbing ----------------------------------------------------------------

std::string join(const std::string& dir, const std::string& name) {
  return (std::filesystem::path(dir) / name).string();
}

void ensure_dir(const char* op, const std::string& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec)
    throw RuntimeFailure(std::string(op) + ": cannot create directory " + dir +
                                 " (" + ec.message() + ")");
}

void write_text(const char* op, const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  if (!out)
    throw RuntimeFailure(std::string(op) + ": cannot open " + path +
                                 " for writing");
  out << text;
  if (!out) throw RuntimeFailure(std::string(op) + ": write failed for " + path);
}

std::string fmt(double x) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

std::string hash_hex(std::uint64_t h) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%016" PRIx64, h);
  return buf;
}

// Reduced library when build-data ran, full library otherwise: every consumer
// picks demonstrations from the same pool the training data was drawn from.
data::DemoLibrary load_eval_library(const RunConfig& cfg) {
  const std::string reduced = join(cfg.out_dir, "library_reduced.jsonl");
  if (std::filesystem::exists(reduced)) return data::load_library(reduced);
  return data::load_library(join(cfg.out_dir, "library.jsonl"));
}

world::SyntheticWorld load_world_file(const RunConfig& cfg) {
  return world::load_world(join(cfg.out_dir, "world.json"));
}

metrics::Metric parse_metric(const std::string& name) {
  if (name == "loglik") return metrics::Metric::loglik;
  if (name == "accuracy") return metrics::Metric::accuracy;
  throw ValidationError("run_config: eval.metric: expected loglik or accuracy");
}

std::vector<data::Demonstration> icds_of(const data::IclSequence& seq,
                                         const data::DemoLibrary& lib) {
  std::vector<data::Demonstration> out;
  out.reserve(seq.icd_ids.size());
  for (const auto& id : seq.icd_ids) out.push_back(lib.get(id));
  return out;
}

double mean_sequence_loglik(const std::vector<data::IclSequence>& seqs,
                            const data::DemoLibrary& lib,
                            score::ScorerInterface& scorer) {
  if (seqs.empty()) return 0.0;
  double total = 0.0;
  for (const auto& seq : seqs) {
    if (!seq.query.ground_truth_r)
      throw ValidationError("evaluate: query " + seq.query.id +
                                    " carries no ground truth");
    total += scorer.loglik(seq.instruction, icds_of(seq, lib), seq.query,
                           *seq.query.ground_truth_r);
  }
  return total / static_cast<double>(seqs.size());
}

// --- shared evaluation plumbing ------------------------------------------------

struct EvalContext {
  const RunConfig& cfg;
  const data::DemoLibrary& lib;
  const std::vector<data::QuerySample>& queries;
  score::ScorerInterface& scorer;
  const model::TacoModel* taco = nullptr;
};

std::vector<data::IclSequence> method_sequences(const std::string& method,
                                                const EvalContext& ctx) {
  const int n = ctx.cfg.eval_shots;
  std::vector<data::IclSequence> out;
  out.reserve(ctx.queries.size());
  if (method == "rs") {
    Rng rng(sub_seed(ctx.cfg.seed, "eval-rs"));
    for (const auto& q : ctx.queries) out.push_back(search::baseline_rs(ctx.lib, q, n, rng));
  } else if (method == "i2i") {
    for (const auto& q : ctx.queries) out.push_back(search::baseline_i2i(ctx.lib, q, n));
  } else if (method == "iq2iq") {
    for (const auto& q : ctx.queries) out.push_back(search::baseline_iq2iq(ctx.lib, q, n));
  } else if (method == "iqpr") {
    Rng rng(sub_seed(ctx.cfg.seed, "eval-iqpr"));
    for (const auto& q : ctx.queries)
      out.push_back(search::baseline_iqpr(ctx.lib, q, n, ctx.scorer, rng));
  } else if (method == "demo") {
    Rng rng(sub_seed(ctx.cfg.seed, "eval-demo"));
    for (const auto& q : ctx.queries)
      out.push_back(search::baseline_demo(ctx.lib, q, n, ctx.scorer,
                                          ctx.cfg.eval_demo_n_perms,
                                          ctx.cfg.eval_demo_k_top, rng));
  } else if (method == "oracle") {
    const std::vector<std::string> pool = ctx.lib.ids();
    for (const auto& q : ctx.queries) {
      data::IclSequence seq;
      seq.instruction = ctx.lib.instruction;
      seq.icd_ids = search::oracle_greedy(ctx.lib, pool, q, ctx.scorer, n);
      seq.query = q;
      out.push_back(std::move(seq));
    }
  } else if (method == "taco") {
    if (ctx.taco == nullptr)
      throw ValidationError("evaluate: method taco needs a trained checkpoint");
    search::BeamConfig bc;
    bc.beam_width = ctx.cfg.infer_beam_width;
    bc.shots = n;
    for (const auto& q : ctx.queries)
      out.push_back(search::beam_infer(*ctx.taco, ctx.lib, q, bc));
  } else {
    throw ValidationError("run_config: eval.methods: unknown method \"" + method +
                                  "\" (rs | i2i | iq2iq | iqpr | demo | oracle | taco)");
  }
  return out;
}

MethodRow evaluate_method(const std::string& method, const EvalContext& ctx) {
  const std::vector<data::IclSequence> seqs = method_sequences(method, ctx);
  MethodRow row;
  row.method = method;
  row.accuracy = metrics::evaluate_accuracy(seqs, ctx.lib, ctx.scorer);
  row.mean_loglik = mean_sequence_loglik(seqs, ctx.lib, ctx.scorer);
  const metrics::Metric metric = parse_metric(ctx.cfg.eval_metric);
  double delta = 0.0;
  for (const auto& seq : seqs)
    delta +=
        metrics::disruption_gap(seq, ctx.lib, ctx.scorer, metric, ctx.cfg.eval_repeats)
            .delta;
  row.delta = seqs.empty() ? 0.0 : delta / static_cast<double>(seqs.size());
  Rng rng(sub_seed(ctx.cfg.seed, "eval-sigma-" + method));
  row.sigma =
      metrics::order_sensitivity_batch(seqs, ctx.lib, ctx.scorer, ctx.cfg.eval_k_perms, rng)
          .sigma;
  return row;
}

std::vector<world::PerturbationOp> perturbation_ops(const std::string& setting,
                                                    const RunConfig& cfg,
                                                    const world::SyntheticWorld& w,
                                                    const data::DemoLibrary& lib) {
  using world::PerturbTarget;
  if (setting == "standard") return {};
  if (setting == "em")
    return {world::make_em(w, cfg.eval_em_factor, PerturbTarget::all_icds)};
  if (setting == "hm") return {world::make_hm(w)};
  if (setting == "wl") return {world::make_wl(w, cfg.eval_wl_fraction)};
  if (setting == "bi")
    return {world::make_bi(w, lib, cfg.eval_bi_scale, PerturbTarget::all_icds)};
  if (setting == "wl+em")
    return {world::make_wl(w, cfg.eval_wl_fraction),
            world::make_em(w, cfg.eval_em_factor, PerturbTarget::all_icds)};
  throw ValidationError("run_config: eval.perturbations: unknown setting \"" +
                                setting + "\" (standard | em | hm | wl | bi | wl+em)");
}

double mean_instance_loglik(const std::vector<world::EvalInstance>& instances,
                            score::ScorerInterface& scorer) {
  if (instances.empty()) return 0.0;
  double total = 0.0;
  for (const auto& inst : instances) {
    if (!inst.query.ground_truth_r)
      throw ValidationError("evaluate: query " + inst.query.id +
                                    " carries no ground truth");
    total += scorer.loglik(inst.instruction, inst.icds, inst.query,
                           *inst.query.ground_truth_r);
  }
  return total / static_cast<double>(instances.size());
}

void print_method_table(const std::vector<MethodRow>& rows) {
  std::printf("%-12s %10s %12s %12s %14s\n", "method", "accuracy", "delta", "sigma",
              "mean_loglik");
  for (const auto& r : rows)
    std::printf("%-12s %10.4f %12.4f %12.4f %14.4f%s\n", r.method.c_str(), r.accuracy,
                r.delta, r.sigma, r.mean_loglik, r.reference ? "  (reference)" : "");
}

// --- training plumbing ------------------------------------------------------------

struct SplitData {
  data::SequenceDataset train;
  data::SequenceDataset val;
};

SplitData split_dataset(const data::SequenceDataset& ds, double val_fraction) {
  if (val_fraction < 0.0 || val_fraction >= 1.0)
    throw ValidationError("run_config: train.val_fraction: expected [0, 1)");
  const int total = static_cast<int>(ds.sequences.size());
  int n_val = static_cast<int>(std::floor(val_fraction * total));
  if (val_fraction > 0.0 && n_val == 0 && total > 1) n_val = 1;
  SplitData out;
  out.train.shot = ds.shot;
  out.val.shot = ds.shot;
  out.train.sequences.assign(ds.sequences.begin(), ds.sequences.end() - n_val);
  out.val.sequences.assign(ds.sequences.end() - n_val, ds.sequences.end());
  return out;
}

}  // namespace

// --- config -------------------------------------------------------------------------

void RunConfig::validate() const {
  if (out_dir.empty())
    throw ValidationError("run_config: out_dir: expected a directory path");
  if (scorer_kind != "synthetic" && scorer_kind != "external")
    throw ValidationError(
        "run_config: scorer.kind: expected synthetic or external");
  parse_metric(eval_metric);
  if (infer_beam_width < 1)
    throw ValidationError("run_config: infer.beam_width: expected >= 1");
  if (infer_n < 0)
    throw ValidationError("run_config: infer.n: expected >= 0");
  if (eval_shots < 1)
    throw ValidationError("run_config: eval.shots: expected >= 1");
  if (eval_k_perms < 2)
    throw ValidationError("run_config: eval.k_perms: expected >= 2");
  if (eval_repeats < 1)
    throw ValidationError("run_config: eval.repeats: expected >= 1");
  if (eval_demo_n_perms < 1)
    throw ValidationError("run_config: eval.demo_n_perms: expected >= 1");
  if (eval_demo_k_top < 1 || eval_demo_k_top > eval_demo_n_perms)
    throw ValidationError(
        "run_config: eval.demo_k_top: expected in [1, demo_n_perms]");
  if (val_fraction < 0.0 || val_fraction >= 1.0)
    throw ValidationError("run_config: train.val_fraction: expected [0, 1)");
  for (const auto& pair : sweep)
    if (pair[0] < 0.0 || pair[1] < 0.0)
      throw ValidationError("run_config: train.sweep: expected non-negative pairs");
  world.validate();
  scorer_params.validate();
}

RunConfig parse_run_config(const std::string& json_text,
                           std::optional<std::uint64_t> seed_override,
                           std::optional<std::string> out_override) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::exception& e) {
    throw ValidationError(std::string("run_config: malformed JSON (") + e.what() +
                                  ")");
  }
  require_keys(j, "config",
               {"seed", "out_dir", "world", "model", "train", "oracle", "infer", "scorer",
                "eval"});
  RunConfig cfg;
  cfg.world = preset_by_name(cfg.world_preset);
  if (j.contains("seed")) cfg.seed = get_u64(j, "config", "seed");
  if (j.contains("out_dir")) cfg.out_dir = get_string(j, "config", "out_dir");
  if (j.contains("world")) parse_world(j.at("world"), cfg);
  if (j.contains("model")) parse_model(j.at("model"), cfg);
  if (j.contains("train")) parse_train(j.at("train"), cfg);
  if (j.contains("oracle")) parse_oracle(j.at("oracle"), cfg);
  if (j.contains("infer")) parse_infer(j.at("infer"), cfg);
  if (j.contains("scorer")) parse_scorer(j.at("scorer"), cfg);
  if (j.contains("eval")) parse_eval(j.at("eval"), cfg);
  if (seed_override) cfg.seed = *seed_override;
  if (out_override) cfg.out_dir = *out_override;
  cfg.validate();
  cfg.canonical_json = canonical_json_doc(cfg).dump();
  cfg.config_hash = num::fnv1a(cfg.canonical_json);
  return cfg;
}

RunConfig load_run_config(const std::string& path,
                          std::optional<std::uint64_t> seed_override,
                          std::optional<std::string> out_override) {
  std::ifstream in(path);
  if (!in)
    throw ValidationError("run_config: cannot open config file " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_run_config(buf.str(), seed_override, out_override);
}

model::DecoderConfig resolve_model_config(const RunConfig& cfg,
                                          const data::DemoLibrary& library) {
  model::DecoderConfig mc = cfg.model;
  mc.fusion.d = mc.d;
  mc.fusion.d_img = library.d_img;
  mc.fusion.d_txt = library.d_txt;
  if (library.d_img != mc.d || library.d_txt != mc.d) mc.fusion.project_inputs = true;
  return mc;
}

std::unique_ptr<score::ScorerInterface> make_scorer(const RunConfig& cfg,
                                                    const world::SyntheticWorld* world) {
  if (cfg.scorer_kind == "synthetic") {
    if (world == nullptr)
      throw ValidationError(
          "make_scorer: the synthetic scorer needs a generated world");
    return std::make_unique<world::SyntheticScorer>(*world, cfg.scorer_params);
  }
  std::string url = cfg.scorer_url;
  if (url.empty()) {
    const char* env = std::getenv("TACO_SCORER_URL");
    if (env != nullptr) url = env;
  }
  if (url.empty())
    throw ValidationError(
        "make_scorer: external scorer needs scorer.url or TACO_SCORER_URL");
  remote::EndpointConfig ep = remote::endpoint_from_url(url);
  ep.timeout_sec = cfg.scorer_timeout_sec;
  ep.max_retries = cfg.scorer_max_retries;
  return std::make_unique<remote::RemoteScorer>(ep);
}

// --- reports -------------------------------------------------------------------------

void write_report(const Report& report, const std::string& dir, const std::string& stem) {
  ensure_dir("write_report", dir);
  json rows = json::array();
  for (const auto& r : report.rows)
    rows.push_back({{"method", r.method},
                    {"accuracy", r.accuracy},
                    {"delta", r.delta},
                    {"sigma", r.sigma},
                    {"mean_loglik", r.mean_loglik},
                    {"reference", r.reference}});
  json doc{{"provenance",
            {{"config_hash", hash_hex(report.config_hash)},
             {"seed", report.seed},
             {"version", report.version}}},
           {"rows", rows}};
  if (!report.perturbations.empty()) {
    json perturb = json::array();
    for (const auto& p : report.perturbations)
      perturb.push_back({{"setting", p.setting},
                         {"accuracy", p.accuracy},
                         {"mean_loglik", p.mean_loglik}});
    doc["perturbations"] = perturb;
  }
  write_text("write_report", join(dir, stem + ".json"), doc.dump(2) + "\n");

  std::ostringstream csv;
  csv << "method,accuracy,delta,sigma,mean_loglik,reference\n";
  for (const auto& r : report.rows)
    csv << r.method << ',' << fmt(r.accuracy) << ',' << fmt(r.delta) << ','
        << fmt(r.sigma) << ',' << fmt(r.mean_loglik) << ',' << (r.reference ? 1 : 0)
        << '\n';
  write_text("write_report", join(dir, stem + ".csv"), csv.str());

  if (!report.perturbations.empty()) {
    std::ostringstream pcsv;
    pcsv << "setting,accuracy,mean_loglik\n";
    for (const auto& p : report.perturbations)
      pcsv << p.setting << ',' << fmt(p.accuracy) << ',' << fmt(p.mean_loglik) << '\n';
    write_text("write_report", join(dir, stem + "_perturbations.csv"), pcsv.str());
  }
}

// --- subcommands ----------------------------------------------------------------------

void cmd_gen_world(const RunConfig& cfg) {
  Rng rng(sub_seed(cfg.seed, "world"));
  const world::GeneratedWorld gen = world::generate_world(cfg.world, rng);
  ensure_dir("gen-world", cfg.out_dir);
  world::save_world(gen.world, join(cfg.out_dir, "world.json"));
  data::save_library(gen.library, join(cfg.out_dir, "library.jsonl"));
  data::save_queries(gen.queries, join(cfg.out_dir, "queries.jsonl"));
  std::printf("world: %d clusters, %d demos, %zu queries -> %s\n", cfg.world.clusters,
              gen.library.size(), gen.queries.size(), cfg.out_dir.c_str());
}

void cmd_build_data(const RunConfig& cfg) {
  const data::DemoLibrary library = data::load_library(join(cfg.out_dir, "library.jsonl"));
  std::unique_ptr<world::SyntheticWorld> w;
  if (cfg.scorer_kind == "synthetic")
    w = std::make_unique<world::SyntheticWorld>(load_world_file(cfg));
  const std::unique_ptr<score::ScorerInterface> scorer = make_scorer(cfg, w.get());
  score::MemoScorer memo(*scorer);

  std::printf("build-data: %d demos, %d query clusters x %d, beam %d, %d shots\n",
              library.size(), cfg.oracle.k_clusters, cfg.oracle.m_per_cluster,
              cfg.oracle.beam_width(), cfg.oracle.shots);
  Rng rng(sub_seed(cfg.seed, "build"));
  const search::BuildResult built =
      search::build_training_set(library, memo, cfg.oracle, rng);

  ensure_dir("build-data", cfg.out_dir);
  data::save_dataset(built.dataset, join(cfg.out_dir, "dataset.jsonl"));
  data::save_library(built.reduced, join(cfg.out_dir, "library_reduced.jsonl"));
  data::save_queries(built.queries, join(cfg.out_dir, "queries_train.jsonl"));
  std::printf(
      "build-data: %zu sequences (%zu queries x %d), %" PRId64 " scorer calls, %" PRId64
      " cache hits\n",
      built.dataset.sequences.size(), built.queries.size(), cfg.oracle.beam_width(),
      memo.calls(), memo.hits());
}

void cmd_train(const RunConfig& cfg) {
  const data::DemoLibrary library =
      data::load_library(join(cfg.out_dir, "library_reduced.jsonl"));
  const data::SequenceDataset dataset =
      data::load_dataset(join(cfg.out_dir, "dataset.jsonl"));
  const SplitData split = split_dataset(dataset, cfg.val_fraction);
  const model::DecoderConfig mc = resolve_model_config(cfg, library);

  train::TrainConfig base = cfg.train;
  base.seed = sub_seed(cfg.seed, "train");

  std::vector<std::array<double, 2>> grid = cfg.sweep;
  const bool sweeping = !grid.empty();
  if (!sweeping) grid.push_back({base.weights.lambda1, base.weights.lambda2});

  for (std::size_t i = 0; i < grid.size(); ++i) {
    train::TrainConfig tc = base;
    tc.weights.lambda1 = grid[i][0];
    tc.weights.lambda2 = grid[i][1];
    tc.out_dir = sweeping
                     ? join(join(cfg.out_dir, "train"), "sweep_" + std::to_string(i))
                     : join(cfg.out_dir, "train");
    model::TacoModel model(mc, library, sub_seed(cfg.seed, "model"));
    const train::TrainResult result =
        train::train(model, split.train, split.val, tc);
    std::printf(
        "train: lambda1=%g lambda2=%g best epoch %d val %.6f -> %s\n",
        tc.weights.lambda1, tc.weights.lambda2, result.best_epoch, result.best_val,
        tc.out_dir.c_str());
  }
}

void cmd_generate(const RunConfig& cfg) {
  const data::DemoLibrary library = load_eval_library(cfg);
  const std::vector<data::QuerySample> queries =
      data::load_queries(join(cfg.out_dir, "queries.jsonl"));
  const model::DecoderConfig mc = resolve_model_config(cfg, library);
  model::TacoModel model(mc, library, sub_seed(cfg.seed, "model"));
  const std::string checkpoint = cfg.eval_checkpoint.empty()
                                     ? join(join(cfg.out_dir, "train"), "best.json")
                                     : cfg.eval_checkpoint;
  model::load_checkpoint(model, checkpoint);

  search::BeamConfig bc;
  bc.beam_width = cfg.infer_beam_width;
  bc.shots = cfg.infer_n;
  data::SequenceDataset out;
  out.shot = cfg.infer_n;
  out.sequences.reserve(queries.size());
  for (const auto& q : queries)
    out.sequences.push_back(search::beam_infer(model, library, q, bc));
  data::save_dataset(out, join(cfg.out_dir, "generated.jsonl"));
  std::printf("generate: %zu sequences of %d shots -> %s\n", out.sequences.size(),
              cfg.infer_n, join(cfg.out_dir, "generated.jsonl").c_str());
}

void cmd_evaluate(const RunConfig& cfg) {
  const data::DemoLibrary library = load_eval_library(cfg);
  const std::vector<data::QuerySample> queries =
      data::load_queries(join(cfg.out_dir, "queries.jsonl"));
  if (cfg.eval_methods.empty() && cfg.eval_perturbations.empty())
    throw ValidationError("evaluate: nothing to do (no methods, no perturbations)");

  std::unique_ptr<world::SyntheticWorld> w;
  if (cfg.scorer_kind == "synthetic" || !cfg.eval_perturbations.empty())
    w = std::make_unique<world::SyntheticWorld>(load_world_file(cfg));
  const std::unique_ptr<score::ScorerInterface> scorer = make_scorer(cfg, w.get());
  score::MemoScorer memo(*scorer);

  std::unique_ptr<model::TacoModel> taco;
  if (std::count(cfg.eval_methods.begin(), cfg.eval_methods.end(), "taco") > 0) {
    const model::DecoderConfig mc = resolve_model_config(cfg, library);
    taco = std::make_unique<model::TacoModel>(mc, library, sub_seed(cfg.seed, "model"));
    const std::string checkpoint = cfg.eval_checkpoint.empty()
                                       ? join(join(cfg.out_dir, "train"), "best.json")
                                       : cfg.eval_checkpoint;
    model::load_checkpoint(*taco, checkpoint);
  }

  EvalContext ctx{cfg, library, queries, memo, taco.get()};
  Report report;
  report.config_hash = cfg.config_hash;
  report.seed = cfg.seed;
  report.version = kVersion;
  for (const auto& method : cfg.eval_methods)
    report.rows.push_back(evaluate_method(method, ctx));

  if (!cfg.eval_perturbations.empty()) {
    Rng base_rng(sub_seed(cfg.seed, "perturb-base"));
    std::vector<world::EvalInstance> base;
    base.reserve(queries.size());
    for (const auto& q : queries)
      base.push_back(world::materialize(
          library, search::baseline_rs(library, q, cfg.eval_shots, base_rng)));
    for (const auto& setting : cfg.eval_perturbations) {
      const std::vector<world::PerturbationOp> ops =
          perturbation_ops(setting, cfg, *w, library);
      Rng rng(sub_seed(cfg.seed, "perturb-" + setting));
      std::vector<world::EvalInstance> instances;
      instances.reserve(base.size());
      for (const auto& inst : base) {
        world::EvalInstance cur = inst;
        for (const auto& op : ops) cur = world::apply_perturbation(op, cur, rng);
        instances.push_back(std::move(cur));
      }
      PerturbRow row;
      row.setting = setting;
      row.accuracy = metrics::evaluate_accuracy_instances(instances, memo);
      row.mean_loglik = mean_instance_loglik(instances, memo);
      report.perturbations.push_back(std::move(row));
    }
  }

  write_report(report, cfg.out_dir, "report");
  print_method_table(report.rows);
  for (const auto& p : report.perturbations)
    std::printf("%-12s %10.4f %12s %12s %14.4f\n", p.setting.c_str(), p.accuracy, "", "",
                p.mean_loglik);
}

void cmd_ablate(const RunConfig& cfg) {
  const data::DemoLibrary library =
      data::load_library(join(cfg.out_dir, "library_reduced.jsonl"));
  const data::SequenceDataset dataset =
      data::load_dataset(join(cfg.out_dir, "dataset.jsonl"));
  const std::vector<data::QuerySample> queries =
      data::load_queries(join(cfg.out_dir, "queries.jsonl"));
  const SplitData split = split_dataset(dataset, cfg.val_fraction);

  std::unique_ptr<world::SyntheticWorld> w;
  if (cfg.scorer_kind == "synthetic")
    w = std::make_unique<world::SyntheticWorld>(load_world_file(cfg));
  const std::unique_ptr<score::ScorerInterface> scorer = make_scorer(cfg, w.get());
  score::MemoScorer memo(*scorer);

  struct Variant {
    const char* tag;
    void (*mutate)(model::DecoderConfig&, train::TrainConfig&);
  };
  const Variant variants[] = {
      {"full", [](model::DecoderConfig&, train::TrainConfig&) {}},
      {"no_task_token",
       [](model::DecoderConfig& m, train::TrainConfig&) { m.with_task_token = false; }},
      {"no_guider_updates",
       [](model::DecoderConfig& m, train::TrainConfig&) { m.update_guider = false; }},
      {"no_sparsity_loss",
       [](model::DecoderConfig&, train::TrainConfig& t) { t.weights.lambda1 = 0.0; }},
      {"no_guider_l2",
       [](model::DecoderConfig&, train::TrainConfig& t) { t.weights.lambda2 = 0.0; }},
      {"random_guider_init",
       [](model::DecoderConfig& m, train::TrainConfig&) { m.learned_tg_init = false; }},
      {"guider_without_image",
       [](model::DecoderConfig& m, train::TrainConfig&) { m.guider_flags.zero_image = true; }},
      {"guider_without_query",
       [](model::DecoderConfig& m, train::TrainConfig&) { m.guider_flags.zero_query = true; }},
      {"guider_without_instruction",
       [](model::DecoderConfig& m, train::TrainConfig&) { m.guider_flags.zero_inst = true; }},
  };

  Report report;
  report.config_hash = cfg.config_hash;
  report.seed = cfg.seed;
  report.version = kVersion;
  for (const Variant& variant : variants) {
    model::DecoderConfig mc = resolve_model_config(cfg, library);
    train::TrainConfig tc = cfg.train;
    tc.seed = sub_seed(cfg.seed, "ablate-train");
    variant.mutate(mc, tc);
    tc.out_dir = join(join(cfg.out_dir, "ablate"), variant.tag);
    model::TacoModel model(mc, library, sub_seed(cfg.seed, "ablate-model"));
    train::train(model, split.train, split.val, tc);

    search::BeamConfig bc;
    bc.beam_width = cfg.infer_beam_width;
    bc.shots = cfg.eval_shots;
    std::vector<data::IclSequence> seqs;
    seqs.reserve(queries.size());
    for (const auto& q : queries)
      seqs.push_back(search::beam_infer(model, library, q, bc));

    MethodRow row;
    row.method = variant.tag;
    row.reference = std::string(variant.tag) == "full";
    row.accuracy = metrics::evaluate_accuracy(seqs, library, memo);
    row.mean_loglik = mean_sequence_loglik(seqs, library, memo);
    report.rows.push_back(row);
    std::printf("ablate: %-28s accuracy %.4f%s\n", variant.tag, row.accuracy,
                row.reference ? "  (reference)" : "");
  }
  write_report(report, cfg.out_dir, "ablation_report");
}

// --- entry ---------------------------------------------------------------------------

int run_cli(int argc, const char* const* argv) {
  CLI::App app{"sequence configuration toolkit"};
  app.require_subcommand(1);

  struct SubArgs {
    std::string config;
    std::uint64_t seed = 0;
    std::string out;
    CLI::Option* seed_opt = nullptr;
    CLI::Option* out_opt = nullptr;
    CLI::App* sub = nullptr;
    void (*run)(const RunConfig&) = nullptr;
  };
  const std::pair<const char*, void (*)(const RunConfig&)> commands[] = {
      {"gen-world", &cmd_gen_world}, {"build-data", &cmd_build_data},
      {"train", &cmd_train},         {"generate", &cmd_generate},
      {"evaluate", &cmd_evaluate},   {"ablate", &cmd_ablate}};

  std::vector<SubArgs> subs(std::size(commands));
  for (std::size_t i = 0; i < std::size(commands); ++i) {
    SubArgs& a = subs[i];
    a.run = commands[i].second;
    a.sub = app.add_subcommand(commands[i].first);
    a.sub->add_option("--config", a.config, "run config JSON file")->required();
    a.seed_opt = a.sub->add_option("--seed", a.seed, "master seed override");
    a.out_opt = a.sub->add_option("--out", a.out, "output directory override");
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }

  try {
    for (const SubArgs& a : subs) {
      if (!a.sub->parsed()) continue;
      std::optional<std::uint64_t> seed_override;
      if (a.seed_opt->count() > 0) seed_override = a.seed;
      std::optional<std::string> out_override;
      if (a.out_opt->count() > 0) out_override = a.out;
      const RunConfig cfg = load_run_config(a.config, seed_override, out_override);
      a.run(cfg);
      return 0;
    }
    std::cerr << "error: no subcommand\n";
    return 1;
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const RuntimeFailure& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}

}  // namespace taco::cli
