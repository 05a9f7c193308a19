#include "taco/fusion.hpp"

#include <cmath>

#include "taco/errors.hpp"

namespace taco::model {

using namespace taco::num;

namespace {

Tensor random_matrix(Rng& rng, int rows, int cols, double scale) {
  Tensor t(rows, cols);
  for (int i = 0; i < t.numel(); ++i) t.at(i) = rng.normal() * scale;
  return t;
}

// LeCun-style fan-in scaling keeps pre-activations near unit variance.
Tensor init_linear(Rng& rng, int fan_in, int fan_out) {
  return random_matrix(rng, fan_in, fan_out, 1.0 / std::sqrt(static_cast<double>(fan_in)));
}

constexpr double kEmbedInitScale = 0.02;

// Tiles a 1x1 graph scalar across a 1xn row, keeping gradients intact.
Var tile_scalar(const Var& s, int n) {
  return matmul(s, constant(Tensor::full(1, n, 1.0)));
}

// Row-tiles a (V x 1) graph column across n columns, keeping gradients intact.
Var tile_col(const Var& col, int n) {
  return matmul(col, constant(Tensor::full(1, n, 1.0)));
}

// Row-wise softmax weights over (image, query, response), each row projected
// back toward the uniform point whenever its squared norm exceeds theta. The
// projection stays on the simplex: the deviation from uniform sums to zero.
Var ternary_weights(const Var& logits, double theta) {
  const int rows = logits->value.rows();
  Var f = masked_softmax(logits, Tensor::full(rows, 3, 1.0));
  double budget = theta - 1.0 / 3.0;
  Var dev = sub(f, constant(Tensor::full(rows, 3, 1.0 / 3.0)));
  // Per-row shrink factor min(1, sqrt(budget / |dev|^2)); rows within the cap
  // hit the minimum's flat branch and pass through unchanged with zero
  // gradient from the cap machinery. The epsilon guards exactly-uniform rows.
  Var r2 = matmul(mul(dev, dev), constant(Tensor::full(3, 1, 1.0)));
  Var r2_safe = add(r2, constant(Tensor::full(rows, 1, 1e-30)));
  Var shrink = minimum_const(scale(pow_const(r2_safe, -0.5), std::sqrt(budget)), 1.0);
  return add(constant(Tensor::full(rows, 3, 1.0 / 3.0)), mul(dev, tile_col(shrink, 3)));
}

Var binary_gate(const Var& gate_in, const ParamSet& params, int d, bool scalar_gate) {
  Var logits = add_rowvec(matmul(gate_in, params.get("fusion.W_f")),
                          params.get("fusion.b_f"));
  Var f = sigmoid(logits);
  return scalar_gate ? tile_col(f, d) : f;
}

// Shared by demos and queries, one row per item to fuse. `response` may be
// null (query position) and then only participates in ternary mode as a zero
// slot. `residual` feeds concat mode only.
Var fuse_parts(const Var& image, const Var& text, const Var* response,
               const Var* residual, const ParamSet& params,
               const FusionConfig& cfg) {
  const int rows = image->value.rows();
  switch (cfg.mode) {
    case FusionMode::binary: {
      Var f = binary_gate(concat_cols({image, text}), params, cfg.d, cfg.scalar_gate);
      // f*image + (1-f)*text, written as text + f*(image - text).
      return add(text, mul(f, sub(image, text)));
    }
    case FusionMode::ternary: {
      Var resp = response ? *response : constant(Tensor(rows, cfg.d));
      Var logits = add_rowvec(matmul(concat_cols({image, text, resp}), params.get("fusion.Wt")),
                              params.get("fusion.bt"));
      Var f = ternary_weights(logits, cfg.theta);
      // Row r of the output mixes row r of the three sources; expand the
      // per-row weights into diagonal-free elementwise products.
      Var fi = tile_col(slice_cols(f, 0, 1), cfg.d);
      Var fq = tile_col(slice_cols(f, 1, 1), cfg.d);
      Var fr = tile_col(slice_cols(f, 2, 1), cfg.d);
      return add(add(mul(fi, image), mul(fq, text)), mul(fr, resp));
    }
    case FusionMode::concat: {
      Var base = response ? add(add(image, text), *response) : add(image, text);
      if (!residual) throw ValidationError("fuse: concat mode requires a residual");
      return add(base, *residual);
    }
  }
  throw ValidationError("fuse: unknown fusion mode");
}

}  // namespace

FusionMode fusion_mode_from_string(const std::string& s) {
  if (s == "binary") return FusionMode::binary;
  if (s == "ternary") return FusionMode::ternary;
  if (s == "concat") return FusionMode::concat;
  throw ValidationError("fusion: unknown mode '" + s + "'");
}

std::string to_string(FusionMode mode) {
  switch (mode) {
    case FusionMode::binary: return "binary";
    case FusionMode::ternary: return "ternary";
    case FusionMode::concat: return "concat";
  }
  return "?";
}

void init_fusion_params(ParamSet& params, const FusionConfig& cfg,
                        const std::vector<std::string>& demo_ids, Rng& rng,
                        bool learned_tg) {
  const int d = cfg.d;
  if (d <= 0) throw ValidationError("fusion: width must be positive");
  if (cfg.mode == FusionMode::ternary && cfg.theta < 1.0 / 3.0)
    throw ValidationError("fusion: theta below 1/3 leaves no feasible weights");
  if (cfg.project_inputs) {
    params.create("proj.img", init_linear(rng, cfg.d_img, d));
    params.create("proj.txt", init_linear(rng, cfg.d_txt, d));
  } else if (cfg.d_img != d || cfg.d_txt != d) {
    throw ValidationError("fusion: embedding dims (" + std::to_string(cfg.d_img) + ", " +
                          std::to_string(cfg.d_txt) + ") differ from width " +
                          std::to_string(d) + " and projections are disabled");
  }
  switch (cfg.mode) {
    case FusionMode::binary: {
      int gate = cfg.scalar_gate ? 1 : d;
      params.create("fusion.W_f", init_linear(rng, 2 * d, gate));
      params.create("fusion.b_f", Tensor(1, gate));
      break;
    }
    case FusionMode::ternary:
      params.create("fusion.Wt", init_linear(rng, 3 * d, 3));
      params.create("fusion.bt", Tensor(1, 3));
      break;
    case FusionMode::concat:
      for (const std::string& id : demo_ids)
        params.create("fusion.r." + id, random_matrix(rng, 1, d, kEmbedInitScale));
      params.create("fusion.query_residual", random_matrix(rng, 1, d, kEmbedInitScale));
      break;
  }
  params.create("embed.bos", random_matrix(rng, 1, d, kEmbedInitScale));
  params.create("embed.task", random_matrix(rng, 1, d, kEmbedInitScale));
  params.create("embed.eos", random_matrix(rng, 1, d, kEmbedInitScale));
  // Guider initialization weight: maps [image, query, instruction] to width d.
  if (learned_tg) params.create("tg.W", init_linear(rng, 3 * d, d));
}

Var project_image(const Tensor& emb, const ParamSet& params, const FusionConfig& cfg) {
  if (emb.cols() != cfg.d_img)
    throw ValidationError("fusion: image embedding dim " + std::to_string(emb.cols()) +
                          ", expected " + std::to_string(cfg.d_img));
  if (cfg.project_inputs) return matmul(constant(emb), params.get("proj.img"));
  return constant(emb);
}

Var project_text(const Tensor& emb, const ParamSet& params, const FusionConfig& cfg) {
  if (emb.cols() != cfg.d_txt)
    throw ValidationError("fusion: text embedding dim " + std::to_string(emb.cols()) +
                          ", expected " + std::to_string(cfg.d_txt));
  if (cfg.project_inputs) return matmul(constant(emb), params.get("proj.txt"));
  return constant(emb);
}

Var fuse_demo(const Demonstration& demo, const ParamSet& params,
              const FusionConfig& cfg) {
  Var image = project_image(demo.image_emb, params, cfg);
  if (cfg.mode == FusionMode::binary) {
    // Binary fusion consumes the joint query+response text embedding.
    Var qr = project_text(demo.qr_emb, params, cfg);
    return fuse_parts(image, qr, nullptr, nullptr, params, cfg);
  }
  Var q = project_text(demo.q_emb, params, cfg);
  Var r = project_text(demo.r_emb, params, cfg);
  Var residual;
  if (cfg.mode == FusionMode::concat) residual = params.get("fusion.r." + demo.id);
  return fuse_parts(image, q, &r, residual ? &residual : nullptr, params, cfg);
}

Var fuse_all_demos(const DemoLibrary& library, const ParamSet& params,
                   const FusionConfig& cfg) {
  const int v = library.size();
  if (v == 0) throw ValidationError("fuse_all_demos: empty library");
  Tensor img(v, cfg.d_img), q(v, cfg.d_txt), r(v, cfg.d_txt), qr(v, cfg.d_txt);
  std::vector<Var> residuals;
  int row = 0;
  for (const auto& [id, demo] : library.demos) {
    for (int j = 0; j < cfg.d_img; ++j) img.at(row, j) = demo.image_emb.at(j);
    for (int j = 0; j < cfg.d_txt; ++j) {
      q.at(row, j) = demo.q_emb.at(j);
      r.at(row, j) = demo.r_emb.at(j);
      qr.at(row, j) = demo.qr_emb.at(j);
    }
    if (cfg.mode == FusionMode::concat) residuals.push_back(params.get("fusion.r." + id));
    ++row;
  }
  auto embed = [&](Tensor t, bool is_image) {
    if (!cfg.project_inputs) return constant(std::move(t));
    return matmul(constant(std::move(t)), params.get(is_image ? "proj.img" : "proj.txt"));
  };
  Var image = embed(std::move(img), true);
  if (cfg.mode == FusionMode::binary)
    return fuse_parts(image, embed(std::move(qr), false), nullptr, nullptr, params, cfg);
  Var qv = embed(std::move(q), false);
  Var rv = embed(std::move(r), false);
  Var residual;
  if (cfg.mode == FusionMode::concat) residual = concat_rows(residuals);
  return fuse_parts(image, qv, &rv, residual ? &residual : nullptr, params, cfg);
}

Var fuse_query(const QuerySample& query, const ParamSet& params,
               const FusionConfig& cfg, bool with_task) {
  Var image = project_image(query.image_emb, params, cfg);
  Var q = project_text(query.q_emb, params, cfg);
  Var residual;
  if (cfg.mode == FusionMode::concat) residual = params.get("fusion.query_residual");
  Var fused = fuse_parts(image, q, nullptr, residual ? &residual : nullptr, params, cfg);
  if (!with_task) return fused;
  return add(params.get("embed.task"), fused);
}

Var TokenSequence::stacked() const {
  return concat_rows(embeddings);
}

TokenSequence build_token_sequence(const IclSequence& seq, const DemoLibrary& library,
                                   const ParamSet& params, const FusionConfig& cfg,
                                   bool with_eos, bool with_task) {
  taco::data::validate_sequence(seq, library, "build_token_sequence");
  TokenSequence tokens;
  tokens.embeddings.push_back(params.get("embed.bos"));
  tokens.roles.push_back(TokenRole::BOS);
  tokens.embeddings.push_back(fuse_query(seq.query, params, cfg, with_task));
  tokens.roles.push_back(TokenRole::TASK_QUERY);
  for (const std::string& id : seq.icd_ids) {
    tokens.icd_positions.push_back(tokens.length());
    tokens.icd_ids.push_back(id);
    tokens.embeddings.push_back(fuse_demo(library.get(id), params, cfg));
    tokens.roles.push_back(TokenRole::ICD);
  }
  if (with_eos) {
    tokens.embeddings.push_back(params.get("embed.eos"));
    tokens.roles.push_back(TokenRole::EOS);
  }
  return tokens;
}

Var init_task_guider(const QuerySample& query, const Tensor& inst_emb,
                     const ParamSet& params, const FusionConfig& cfg,
                     GuiderInputFlags flags) {
  Var image = flags.zero_image ? constant(Tensor(1, cfg.d))
                               : project_image(query.image_emb, params, cfg);
  Var q = flags.zero_query ? constant(Tensor(1, cfg.d))
                           : project_text(query.q_emb, params, cfg);
  Var inst = flags.zero_inst ? constant(Tensor(1, cfg.d))
                             : project_text(inst_emb, params, cfg);
  return matmul(concat_cols({image, q, inst}), params.get("tg.W"));
}

}  // namespace taco::model
