#include "taco/decoder.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>

#include "json.hpp"
#include "taco/errors.hpp"
#include "taco/rng.hpp"
#include "taco/serialize.hpp"

namespace taco::model {

using namespace taco::num;
using nlohmann::json;

namespace {

Tensor random_matrix(Rng& rng, int rows, int cols, double scale) {
  Tensor t(rows, cols);
  for (int i = 0; i < t.numel(); ++i) t.at(i) = rng.normal() * scale;
  return t;
}

Tensor init_linear(Rng& rng, int fan_in, int fan_out) {
  return random_matrix(rng, fan_in, fan_out, 1.0 / std::sqrt(static_cast<double>(fan_in)));
}

std::string two_digit(int l) {
  return (l < 10 ? "0" : "") + std::to_string(l);
}

std::string layer_name(int l, const char* leaf) {
  return "layer." + two_digit(l) + "." + leaf;
}

std::string rel_name(int l, const char* leaf) {
  return "rel." + two_digit(l) + "." + leaf;
}

Var ones_const(int rows, int cols) {
  return constant(Tensor::full(rows, cols, 1.0));
}

std::string hash_hex(std::uint64_t h) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return std::string(buf);
}

// One pre-norm decoder block: multi-head causal attention (with an optional
// shared additive mask) plus a GELU feed-forward, both with residuals.
Var decoder_block(const ParamSet& P, int l, const Var& x, const Var* mask,
                  const Tensor& support, int heads) {
  const int d = x->value.cols();
  const int dh = d / heads;
  Var h = layer_norm(x, P.get(layer_name(l, "ln1.g")), P.get(layer_name(l, "ln1.b")));
  Var Q = matmul(h, P.get(layer_name(l, "attn.Wq")));
  Var K = matmul(h, P.get(layer_name(l, "attn.Wk")));
  Var V = matmul(h, P.get(layer_name(l, "attn.Wv")));
  const double head_scale = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<Var> head_out;
  head_out.reserve(static_cast<size_t>(heads));
  for (int hd = 0; hd < heads; ++hd) {
    Var Qh = slice_cols(Q, hd * dh, dh);
    Var Kh = slice_cols(K, hd * dh, dh);
    Var Vh = slice_cols(V, hd * dh, dh);
    Var scores = scale(matmul(Qh, transpose(Kh)), head_scale);
    if (mask != nullptr) scores = add(scores, *mask);
    head_out.push_back(matmul(masked_softmax(scores, support), Vh));
  }
  Var attn = matmul(concat_cols(head_out), P.get(layer_name(l, "attn.Wo")));
  Var mid = add(x, attn);
  Var h2 = layer_norm(mid, P.get(layer_name(l, "ln2.g")), P.get(layer_name(l, "ln2.b")));
  Var f = gelu(add_rowvec(matmul(h2, P.get(layer_name(l, "ffn.W1"))),
                          P.get(layer_name(l, "ffn.b1"))));
  Var ff = add_rowvec(matmul(f, P.get(layer_name(l, "ffn.W2"))),
                      P.get(layer_name(l, "ffn.b2")));
  return add(mid, ff);
}

// Scores against every library embedding plus the learned end-of-sequence
// score, one row per input row; the free-head variant reads a score table.
Var head_logits(const Var& rows, const Var& lib_emb, const ParamSet& P, bool tied) {
  if (!tied) return matmul(rows, P.get("out.W_free"));
  Var proj = matmul(rows, P.get("out.W"));
  Var scores = matmul(proj, transpose(lib_emb));
  Var eos = add_rowvec(matmul(rows, P.get("out.w_eos")), P.get("out.b_eos"));
  return concat_cols({scores, eos});
}

json guider_flags_to_json(const GuiderInputFlags& f) {
  json j;
  j["zero_image"] = f.zero_image;
  j["zero_inst"] = f.zero_inst;
  j["zero_query"] = f.zero_query;
  return j;
}

json fusion_to_json(const FusionConfig& f) {
  json j;
  j["d"] = f.d;
  j["d_img"] = f.d_img;
  j["d_txt"] = f.d_txt;
  j["mode"] = to_string(f.mode);
  j["project_inputs"] = f.project_inputs;
  j["scalar_gate"] = f.scalar_gate;
  j["theta"] = f.theta;
  return j;
}

void require_keys(const json& j, const std::set<std::string>& allowed, const char* where) {
  if (!j.is_object()) {
    throw ValidationError(std::string("config: ") + where + " must be a JSON object");
  }
  for (const auto& item : j.items()) {
    if (allowed.find(item.key()) == allowed.end()) {
      throw ValidationError(std::string("config: unknown key '") + item.key() + "' in " + where);
    }
  }
  for (const std::string& key : allowed) {
    if (!j.contains(key)) {
      throw ValidationError(std::string("config: missing key '") + key + "' in " + where);
    }
  }
}

}  // namespace

void DecoderConfig::validate() const {
  if (depth < 1) throw ValidationError("decoder: depth must be at least 1");
  if (d < 1) throw ValidationError("decoder: width must be positive");
  if (heads < 1) throw ValidationError("decoder: head count must be positive");
  if (d % heads != 0) {
    throw ValidationError("decoder: width " + std::to_string(d) + " is not divisible by " +
                          std::to_string(heads) + " heads");
  }
  if (ffn_mult < 1) throw ValidationError("decoder: ffn_mult must be at least 1");
  if (!(log_t_cap > 0.0)) throw ValidationError("decoder: log_t_cap must be positive");
  if (!std::isfinite(alpha_init)) throw ValidationError("decoder: alpha_init must be finite");
  std::set<int> seen;
  for (int l : l_ta) {
    if (l < 1 || l > depth) {
      throw ValidationError("decoder: task-aware layer " + std::to_string(l) +
                            " outside 1.." + std::to_string(depth));
    }
    if (!seen.insert(l).second) {
      throw ValidationError("decoder: task-aware layer " + std::to_string(l) + " listed twice");
    }
  }
  if (fusion.d != d) {
    throw ValidationError("decoder: fusion width " + std::to_string(fusion.d) +
                          " differs from model width " + std::to_string(d));
  }
}

std::string config_to_json(const DecoderConfig& cfg) {
  json j;
  j["alpha_init"] = cfg.alpha_init;
  j["d"] = cfg.d;
  j["depth"] = cfg.depth;
  j["ffn_mult"] = cfg.ffn_mult;
  j["fusion"] = fusion_to_json(cfg.fusion);
  j["guider_flags"] = guider_flags_to_json(cfg.guider_flags);
  j["heads"] = cfg.heads;
  j["l_ta"] = cfg.l_ta;
  j["learned_tg_init"] = cfg.learned_tg_init;
  j["literal_query_coupling"] = cfg.literal_query_coupling;
  j["log_t_cap"] = cfg.log_t_cap;
  j["tied_head"] = cfg.tied_head;
  j["update_guider"] = cfg.update_guider;
  j["with_task_token"] = cfg.with_task_token;
  return j.dump();
}

DecoderConfig config_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ValidationError(std::string("config: invalid JSON: ") + e.what());
  }
  try {
    require_keys(j,
                 {"alpha_init", "d", "depth", "ffn_mult", "fusion", "guider_flags", "heads",
                  "l_ta", "learned_tg_init", "literal_query_coupling", "log_t_cap",
                  "tied_head", "update_guider", "with_task_token"},
                 "decoder config");
    DecoderConfig cfg;
    cfg.alpha_init = j.at("alpha_init").get<double>();
    cfg.d = j.at("d").get<int>();
    cfg.depth = j.at("depth").get<int>();
    cfg.ffn_mult = j.at("ffn_mult").get<int>();
    cfg.heads = j.at("heads").get<int>();
    cfg.l_ta = j.at("l_ta").get<std::vector<int>>();
    cfg.learned_tg_init = j.at("learned_tg_init").get<bool>();
    cfg.literal_query_coupling = j.at("literal_query_coupling").get<bool>();
    cfg.log_t_cap = j.at("log_t_cap").get<double>();
    cfg.tied_head = j.at("tied_head").get<bool>();
    cfg.update_guider = j.at("update_guider").get<bool>();
    cfg.with_task_token = j.at("with_task_token").get<bool>();
    const json& g = j.at("guider_flags");
    require_keys(g, {"zero_image", "zero_inst", "zero_query"}, "guider_flags");
    cfg.guider_flags.zero_image = g.at("zero_image").get<bool>();
    cfg.guider_flags.zero_inst = g.at("zero_inst").get<bool>();
    cfg.guider_flags.zero_query = g.at("zero_query").get<bool>();
    const json& f = j.at("fusion");
    require_keys(f, {"d", "d_img", "d_txt", "mode", "project_inputs", "scalar_gate", "theta"},
                 "fusion config");
    cfg.fusion.d = f.at("d").get<int>();
    cfg.fusion.d_img = f.at("d_img").get<int>();
    cfg.fusion.d_txt = f.at("d_txt").get<int>();
    cfg.fusion.mode = fusion_mode_from_string(f.at("mode").get<std::string>());
    cfg.fusion.project_inputs = f.at("project_inputs").get<bool>();
    cfg.fusion.scalar_gate = f.at("scalar_gate").get<bool>();
    cfg.fusion.theta = f.at("theta").get<double>();
    return cfg;
  } catch (const json::exception& e) {
    throw ValidationError(std::string("config: malformed field: ") + e.what());
  }
}

std::uint64_t config_hash(const DecoderConfig& cfg) {
  return taco::num::fnv1a(config_to_json(cfg));
}

TacoModel::TacoModel(const DecoderConfig& cfg, data::DemoLibrary library, std::uint64_t seed)
    : cfg_(cfg), library_(std::move(library)) {
  cfg_.validate();
  if (library_.demos.empty()) throw ValidationError("decoder: demonstration library is empty");
  vocab_ = library_.ids();
  for (int i = 0; i < static_cast<int>(vocab_.size()); ++i) vocab_index_[vocab_[i]] = i;

  Rng rng = Rng(seed).derive("model-init");
  init_fusion_params(params_, cfg_.fusion, vocab_, rng, cfg_.learned_tg_init);
  if (!cfg_.learned_tg_init) {
    // Fixed random guider at the scale a learned initialization would produce.
    params_.create("tg.fixed", random_matrix(rng, 1, cfg_.d, 1.0));
    frozen_.push_back("tg.fixed");
  }

  const int d = cfg_.d;
  const int fd = d * cfg_.ffn_mult;
  for (int l = 1; l <= cfg_.depth; ++l) {
    params_.create(layer_name(l, "ln1.g"), Tensor::full(1, d, 1.0));
    params_.create(layer_name(l, "ln1.b"), Tensor(1, d));
    params_.create(layer_name(l, "attn.Wq"), init_linear(rng, d, d));
    params_.create(layer_name(l, "attn.Wk"), init_linear(rng, d, d));
    params_.create(layer_name(l, "attn.Wv"), init_linear(rng, d, d));
    params_.create(layer_name(l, "attn.Wo"), init_linear(rng, d, d));
    params_.create(layer_name(l, "ln2.g"), Tensor::full(1, d, 1.0));
    params_.create(layer_name(l, "ln2.b"), Tensor(1, d));
    params_.create(layer_name(l, "ffn.W1"), init_linear(rng, d, fd));
    params_.create(layer_name(l, "ffn.b1"), Tensor(1, fd));
    params_.create(layer_name(l, "ffn.W2"), init_linear(rng, fd, d));
    params_.create(layer_name(l, "ffn.b2"), Tensor(1, d));
  }

  std::vector<int> ta = cfg_.l_ta;
  std::sort(ta.begin(), ta.end());
  for (int l : ta) {
    params_.create(rel_name(l, "W1"), init_linear(rng, 2 * d, d));
    params_.create(rel_name(l, "b1"), Tensor(1, d));
    params_.create(rel_name(l, "W2"), init_linear(rng, d, 1));
    params_.create(rel_name(l, "b2"), Tensor(1, 1));
  }
  if (!ta.empty()) {
    params_.create("mask.alpha", Tensor::full(1, 1, cfg_.alpha_init));
  }
  // Guider refreshes only happen between task-aware layers.
  if (ta.size() >= 2 && cfg_.update_guider) {
    params_.create("tgattn.Wq", init_linear(rng, d, d));
    params_.create("tgattn.Wk", init_linear(rng, d, d));
    params_.create("tgattn.Wv", init_linear(rng, d, d));
    params_.create("tgattn.ln.g", Tensor::full(1, d, 1.0));
    params_.create("tgattn.ln.b", Tensor(1, d));
  }

  if (cfg_.tied_head) {
    params_.create("out.W", init_linear(rng, d, d));
    params_.create("out.w_eos", init_linear(rng, d, 1));
    params_.create("out.b_eos", Tensor(1, 1));
  } else {
    params_.create("out.W_free", init_linear(rng, d, static_cast<int>(vocab_.size()) + 1));
  }
}

int TacoModel::vocab_index(const std::string& id) const {
  auto it = vocab_index_.find(id);
  if (it == vocab_index_.end()) {
    throw ValidationError("decoder: unknown demonstration id '" + id + "'");
  }
  return it->second;
}

Var TacoModel::library_embeddings() const {
  return fuse_all_demos(library_, params_, cfg_.fusion);
}

ForwardResult TacoModel::forward(const data::IclSequence& seq, const ForwardOptions& opts) const {
  data::validate_sequence(seq, library_, "forward");
  TokenSequence tokens = build_token_sequence(seq, library_, params_, cfg_.fusion,
                                              opts.with_eos, cfg_.with_task_token);
  const int T = tokens.length();
  const int n = static_cast<int>(tokens.icd_positions.size());
  const int d = cfg_.d;

  std::vector<int> ta;
  if (!opts.disable_task_attention) {
    ta = cfg_.l_ta;
    std::sort(ta.begin(), ta.end());
  }
  const int last_ta = ta.empty() ? 0 : ta.back();
  const bool need_rel = !ta.empty() && !opts.force_unit_relevance && n > 0;
  // Pinned-unit relevance zeroes the mask no matter where its entries sit, so
  // the literal placement only matters when relevance is live.
  const bool literal = cfg_.literal_query_coupling && need_rel;

  Tensor support(T, T);
  for (int i = 0; i < T; ++i) {
    for (int j = 0; j <= i; ++j) support.at(i, j) = 1.0;
  }
  if (literal) {
    // The literally-indexed coupling entries live above the diagonal; the
    // support must open there for them to act, which breaks causality.
    for (int pos : tokens.icd_positions) support.at(tokens.query_position, pos) = 1.0;
  }

  ForwardResult out;
  out.tokens = tokens;
  out.attn_support = support;

  Var E = tokens.stacked();

  Var tg0;
  std::vector<Var> guiders;
  Var guider_q;
  if (need_rel) {
    if (cfg_.learned_tg_init) {
      Tensor inst = library_.instruction_emb.numel() > 0 ? library_.instruction_emb
                                                         : Tensor(1, cfg_.fusion.d_txt);
      tg0 = init_task_guider(seq.query, inst, params_, cfg_.fusion, cfg_.guider_flags);
    } else {
      tg0 = params_.get("tg.fixed");
    }
    guiders.assign(static_cast<size_t>(n), tg0);
    guider_q = tg0;
  }

  // Scaled cosine matrix over the input token embeddings; built once and
  // shared by every task-aware layer.
  Var C;
  auto build_cosines = [&]() {
    Var row_ss = matmul(mul(E, E), ones_const(d, 1));
    for (int r = 0; r < T; ++r) {
      if (!(row_ss->value.at(r, 0) > 0.0)) {
        throw ValidationError("task_mask: token " + std::to_string(r) +
                              " has a zero embedding; cosine similarity is undefined");
      }
    }
    Var inv_norm = pow_const(row_ss, -0.5);
    Var En = mul(E, matmul(inv_norm, ones_const(1, d)));
    C = scale(matmul(En, transpose(En)), 1.0 / std::sqrt(static_cast<double>(d)));
  };

  // Entry patterns: P1 marks demonstration-to-earlier-demonstration cells,
  // P2 the query-coupling cells that get the alpha weight.
  Tensor P1(T, T), P2(T, T);
  for (int pi : tokens.icd_positions) {
    for (int pj : tokens.icd_positions) {
      if (pj <= pi) P1.at(pi, pj) = 1.0;
    }
  }
  if (literal) {
    for (int pj : tokens.icd_positions) P2.at(tokens.query_position, pj) = 1.0;
  } else {
    for (int pi : tokens.icd_positions) P2.at(pi, tokens.query_position) = 1.0;
  }
  Var pattern;

  auto rel_mlp = [&](int l, const Var& x) {
    Var h = gelu(add_rowvec(matmul(x, params_.get(rel_name(l, "W1"))),
                            params_.get(rel_name(l, "b1"))));
    return sigmoid(add_rowvec(matmul(h, params_.get(rel_name(l, "W2"))),
                              params_.get(rel_name(l, "b2"))));
  };

  Var x = E;
  for (int l = 1; l <= cfg_.depth; ++l) {
    const bool is_ta = std::find(ta.begin(), ta.end(), l) != ta.end();
    Var mask;
    if (is_ta) {
      if (!need_rel) {
        mask = constant(Tensor(T, T));
        if (n > 0) out.relevance.push_back(ones_const(n, 1));
      } else {
        if (!C) build_cosines();
        Var t_icd = rel_mlp(l, concat_cols({concat_rows(guiders), slice_rows(E, 2, n)}));
        out.relevance.push_back(t_icd);
        // Column of per-row relevance: non-demonstration rows read as 1 so
        // their -log factor vanishes.
        std::vector<Var> col;
        col.push_back(ones_const(1, 1));
        if (literal) {
          col.push_back(rel_mlp(l, concat_cols({guider_q, slice_rows(E, tokens.query_position, 1)})));
        } else {
          col.push_back(ones_const(1, 1));
        }
        col.push_back(t_icd);
        const int rest = T - 2 - n;
        if (rest > 0) col.push_back(ones_const(rest, 1));
        Var neg_log_t = minimum_const(neg(log_op(concat_rows(col))), cfg_.log_t_cap);
        Var NL = matmul(neg_log_t, ones_const(1, T));
        if (!pattern) {
          Var alpha_tiled =
              matmul(matmul(ones_const(T, 1), params_.get("mask.alpha")), ones_const(1, T));
          pattern = add(constant(P1), mul(alpha_tiled, constant(P2)));
        }
        mask = mul(mul(C, NL), pattern);
      }
      out.ta_masks.push_back(mask);
    }
    x = decoder_block(params_, l, x, is_ta ? &mask : nullptr, support, cfg_.heads);
    out.layer_hidden.push_back(x);
    if (is_ta && l != last_ta && cfg_.update_guider && need_rel) {
      // Cross-attention refresh; each guider sees hidden states only up to
      // its own demonstration's position, keeping later tokens invisible.
      Var K = matmul(x, params_.get("tgattn.Wk"));
      Var V = matmul(x, params_.get("tgattn.Wv"));
      const Var& g = params_.get("tgattn.ln.g");
      const Var& b = params_.get("tgattn.ln.b");
      const double s = 1.0 / std::sqrt(static_cast<double>(d));
      auto refresh = [&](Var& tg, int prefix_len) {
        Var q = matmul(tg, params_.get("tgattn.Wq"));
        Var scores = scale(matmul(q, transpose(K)), s);
        Tensor prefix(1, T);
        for (int j = 0; j < prefix_len; ++j) prefix.at(0, j) = 1.0;
        Var attended = matmul(masked_softmax(scores, prefix), V);
        tg = layer_norm(add(tg, attended), g, b);
      };
      for (int i = 0; i < n; ++i) refresh(guiders[static_cast<size_t>(i)], tokens.icd_positions[static_cast<size_t>(i)] + 1);
      if (literal) refresh(guider_q, tokens.query_position + 1);
    }
  }
  out.hidden = x;
  return out;
}

Var TacoModel::prediction_logits(const ForwardResult& fwd, const Var& lib_emb) const {
  const int n = static_cast<int>(fwd.tokens.icd_positions.size());
  if (lib_emb->value.rows() != static_cast<int>(vocab_.size()) || lib_emb->value.cols() != cfg_.d) {
    throw ValidationError("decoder: library embedding matrix has shape " +
                          lib_emb->value.shape_str() + ", expected (" +
                          std::to_string(vocab_.size()) + " x " + std::to_string(cfg_.d) + ")");
  }
  Var rows = slice_rows(fwd.hidden, fwd.tokens.query_position, n + 1);
  return head_logits(rows, lib_emb, params_, cfg_.tied_head);
}

Var TacoModel::next_token_logits(const Var& hidden_row, const Var& lib_emb) const {
  if (hidden_row->value.rows() != 1 || hidden_row->value.cols() != cfg_.d) {
    throw ValidationError("decoder: hidden row has shape " + hidden_row->value.shape_str() +
                          ", expected (1 x " + std::to_string(cfg_.d) + ")");
  }
  if (lib_emb->value.rows() != static_cast<int>(vocab_.size()) || lib_emb->value.cols() != cfg_.d) {
    throw ValidationError("decoder: library embedding matrix has shape " +
                          lib_emb->value.shape_str() + ", expected (" +
                          std::to_string(vocab_.size()) + " x " + std::to_string(cfg_.d) + ")");
  }
  return head_logits(hidden_row, lib_emb, params_, cfg_.tied_head);
}

void save_checkpoint(const TacoModel& model, const std::string& path) {
  json j;
  j["format"] = "taco-checkpoint";
  j["version"] = 1;
  j["model_config"] = json::parse(config_to_json(model.config()));
  j["config_hash"] = hash_hex(config_hash(model.config()));
  json params = json::object();
  for (const auto& [name, var] : model.params().items()) {
    json entry;
    entry["rows"] = var->value.rows();
    entry["cols"] = var->value.cols();
    entry["data"] = taco::io::tensor_to_base64(var->value);
    params[name] = entry;
  }
  j["params"] = params;
  std::ofstream out(path);
  if (!out) throw RuntimeFailure("save_checkpoint: cannot open " + path + " for writing");
  out << j.dump() << "\n";
  out.flush();
  if (!out) throw RuntimeFailure("save_checkpoint: write failed for " + path);
}

void load_checkpoint(TacoModel& model, const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("load_checkpoint: cannot open " + path);
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ValidationError("load_checkpoint: " + path + " is not valid JSON: " + e.what());
  }
  try {
    if (!j.is_object() || j.value("format", "") != "taco-checkpoint") {
      throw ValidationError("load_checkpoint: " + path + " is not a checkpoint file");
    }
    if (j.value("version", -1) != 1) {
      throw ValidationError("load_checkpoint: unsupported version in " + path);
    }
    const std::string want = hash_hex(config_hash(model.config()));
    const std::string got = j.at("config_hash").get<std::string>();
    if (got != want) {
      throw ValidationError("load_checkpoint: config hash " + got +
                            " does not match the target model's " + want);
    }
    const json& params = j.at("params");
    if (!params.is_object()) throw ValidationError("load_checkpoint: params must be an object");
    for (const auto& item : params.items()) {
      if (!model.params().contains(item.key())) {
        throw ValidationError("load_checkpoint: unknown parameter '" + item.key() + "'");
      }
    }
    for (const auto& [name, var] : model.params().items()) {
      if (!params.contains(name)) {
        throw ValidationError("load_checkpoint: missing parameter '" + name + "'");
      }
      const json& entry = params.at(name);
      const int rows = entry.at("rows").get<int>();
      const int cols = entry.at("cols").get<int>();
      if (rows != var->value.rows() || cols != var->value.cols()) {
        throw ValidationError("load_checkpoint: parameter '" + name + "' has shape (" +
                              std::to_string(rows) + " x " + std::to_string(cols) +
                              "), expected " + var->value.shape_str());
      }
      var->value = taco::io::tensor_from_base64(entry.at("data").get<std::string>(), rows, cols);
    }
  } catch (const json::exception& e) {
    throw ValidationError("load_checkpoint: malformed checkpoint " + path + ": " + e.what());
  }
}

}  // namespace taco::model
