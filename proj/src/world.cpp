#include "taco/world.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

#include "json.hpp"
#include "taco/errors.hpp"
#include "taco/serialize.hpp"

namespace taco::world {

using nlohmann::json;

namespace {

Tensor random_unit_row(Rng& rng, int n) {
  for (int attempt = 0; attempt < 8; ++attempt) {
    Tensor v(1, n);
    double sq = 0.0;
    for (int i = 0; i < n; ++i) {
      v.at(i) = rng.normal();
      sq += v.at(i) * v.at(i);
    }
    if (sq > 1e-12) {
      double inv = 1.0 / std::sqrt(sq);
      for (int i = 0; i < n; ++i) v.at(i) *= inv;
      return v;
    }
  }
  throw RuntimeFailure("generate_world: could not draw a unit direction");
}

double row_distance(const Tensor& a, const Tensor& b) {
  double sq = 0.0;
  for (int i = 0; i < a.cols(); ++i) {
    double d = a.at(i) - b.at(i);
    sq += d * d;
  }
  return std::sqrt(sq);
}

// Row vector through a mixing matrix: (M . tau^T)^T for 1 x latent tau.
Tensor mix(const Tensor& m, const Tensor& tau) {
  return num::matmul(tau, num::transpose(m));
}

Tensor add_rows(const Tensor& a, const Tensor& b) {
  Tensor out = a;
  for (int i = 0; i < out.cols(); ++i) out.at(i) += b.at(i);
  return out;
}

Tensor noisy(Tensor t, Rng& rng, double std) {
  for (int i = 0; i < t.cols(); ++i) t.at(i) += rng.normal() * std;
  return t;
}

std::string padded_id(const char* prefix, int index) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "%s%04d", prefix, index);
  return buf;
}

// Gauss-Jordan inverse with partial pivoting for the small Gram matrices.
Tensor invert(const Tensor& m, const char* op) {
  int n = m.rows();
  Tensor a = m;
  Tensor inv = Tensor::identity(n);
  for (int col = 0; col < n; ++col) {
    int pivot = col;
    for (int r = col + 1; r < n; ++r) {
      if (std::abs(a.at(r, col)) > std::abs(a.at(pivot, col))) pivot = r;
    }
    if (std::abs(a.at(pivot, col)) < 1e-12) {
      throw ValidationError(std::string(op) + ": mixing matrix is rank-deficient");
    }
    for (int c = 0; c < n; ++c) {
      std::swap(a.at(col, c), a.at(pivot, c));
      std::swap(inv.at(col, c), inv.at(pivot, c));
    }
    double scale = 1.0 / a.at(col, col);
    for (int c = 0; c < n; ++c) {
      a.at(col, c) *= scale;
      inv.at(col, c) *= scale;
    }
    for (int r = 0; r < n; ++r) {
      if (r == col) continue;
      double f = a.at(r, col);
      if (f == 0.0) continue;
      for (int c = 0; c < n; ++c) {
        a.at(r, c) -= f * a.at(col, c);
        inv.at(r, c) -= f * inv.at(col, c);
      }
    }
  }
  return inv;
}

// Moore-Penrose pseudo-inverse (M^T M)^-1 M^T for full-column-rank M.
Tensor pinv(const Tensor& m, const char* op) {
  Tensor gram = num::matmul(num::transpose(m), m);
  return num::matmul(invert(gram, op), num::transpose(m));
}

int meta_int(const std::map<std::string, std::string>& meta, const std::string& key,
             const std::string& id, const char* op) {
  auto it = meta.find(key);
  if (it == meta.end()) {
    throw ValidationError(std::string(op) + ": item " + id + " lacks task metadata");
  }
  try {
    return std::stoi(it->second);
  } catch (const std::exception&) {
    throw ValidationError(std::string(op) + ": item " + id + " has malformed metadata");
  }
}

void require_keys(const json& j, const std::set<std::string>& keys, const char* op) {
  for (const auto& [key, value] : j.items()) {
    if (keys.count(key) == 0) {
      throw ValidationError(std::string(op) + ": unknown key '" + key + "'");
    }
  }
  for (const auto& key : keys) {
    if (!j.contains(key)) {
      throw ValidationError(std::string(op) + ": missing key '" + key + "'");
    }
  }
}

double jitter(std::uint64_t seed, const std::string& query_id, const std::string& label) {
  std::uint64_t h = num::fnv1a("label-noise:" + query_id + ":" + label);
  Rng rng(num::mix64(seed ^ h));
  return rng.normal();
}

}  // namespace

void WorldSpec::validate() const {
  if (latent_dim < 1) throw ValidationError("world_spec: latent_dim must be positive");
  if (emb_dim < latent_dim) {
    throw ValidationError("world_spec: emb_dim must be at least latent_dim");
  }
  if (clusters < 1) throw ValidationError("world_spec: clusters must be positive");
  if (demos_per_cluster < 1) {
    throw ValidationError("world_spec: demos_per_cluster must be positive");
  }
  if (queries_per_cluster < 1) {
    throw ValidationError("world_spec: queries_per_cluster must be positive");
  }
  if (centroid_sep < 0 || content_scale < 0 || style_scale < 0 || img_noise < 0 ||
      txt_noise < 0 || label_emb_scale < 0) {
    throw ValidationError("world_spec: scales must be nonnegative");
  }
  if (style_home_prob < 0.0 || style_home_prob > 1.0) {
    throw ValidationError("world_spec: style_home_prob must lie in [0,1]");
  }
  if (!labels.empty()) {
    if (static_cast<int>(labels.size()) != clusters) {
      throw ValidationError("world_spec: labels must list one pair per cluster");
    }
    // Clusters may share a label vocabulary (that is what makes a mapping
    // "generalized"), but within one cluster the two labels must differ.
    for (const auto& pair : labels) {
      for (const auto& label : pair) {
        if (label.empty()) throw ValidationError("world_spec: empty label");
      }
      if (pair[0] == pair[1]) {
        throw ValidationError("world_spec: cluster labels must differ, got '" + pair[0] +
                              "' twice");
      }
    }
  }
}

const SyntheticWorld::ItemMeta& SyntheticWorld::item(const std::string& id) const {
  auto it = items.find(id);
  if (it == items.end()) {
    throw ValidationError("synthetic_world: unknown item '" + id + "'");
  }
  return it->second;
}

std::string SyntheticWorld::true_label(const ItemMeta& m) const {
  if (m.cluster < 0 || m.cluster >= static_cast<int>(labels.size()) || m.bit < 0 ||
      m.bit > 1) {
    throw ValidationError("synthetic_world: metadata out of range");
  }
  return labels[static_cast<size_t>(m.cluster)][static_cast<size_t>(m.bit)];
}

std::vector<std::string> SyntheticWorld::all_labels() const {
  std::set<std::string> out;
  for (const auto& pair : labels) {
    out.insert(pair[0]);
    out.insert(pair[1]);
  }
  return {out.begin(), out.end()};
}

Tensor SyntheticWorld::text_centroid(int cluster) const {
  if (cluster < 0 || cluster >= static_cast<int>(centroids.size())) {
    throw ValidationError("synthetic_world: cluster index out of range");
  }
  return mix(B, centroids[static_cast<size_t>(cluster)]);
}

Tensor SyntheticWorld::label_embedding(const std::string& label) const {
  Rng rng(num::mix64(num::fnv1a("label-emb:" + label)));
  return random_unit_row(rng, spec.emb_dim);
}

GeneratedWorld generate_world(const WorldSpec& spec, Rng& rng) {
  spec.validate();
  GeneratedWorld out;
  SyntheticWorld& w = out.world;
  w.spec = spec;

  Rng mix_rng = rng.derive("world-mixing");
  double col_scale = 1.0 / std::sqrt(static_cast<double>(spec.latent_dim));
  w.A = Tensor(spec.emb_dim, spec.latent_dim);
  w.B = Tensor(spec.emb_dim, spec.latent_dim);
  for (int i = 0; i < w.A.numel(); ++i) w.A.data()[i] = mix_rng.normal() * col_scale;
  for (int i = 0; i < w.B.numel(); ++i) w.B.data()[i] = mix_rng.normal() * col_scale;
  Tensor pinv_a = pinv(w.A, "generate_world");  // full-rank check; throws otherwise
  pinv(w.B, "generate_world");

  // Centroids: redraw the whole set until pairwise separation holds.
  Rng cen_rng = rng.derive("world-centroids");
  double min_sep = spec.centroid_sep * std::max(spec.img_noise, spec.txt_noise);
  bool placed = false;
  for (int attempt = 0; attempt < 50 && !placed; ++attempt) {
    w.centroids.clear();
    for (int c = 0; c < spec.clusters; ++c) {
      Tensor t(1, spec.latent_dim);
      for (int i = 0; i < spec.latent_dim; ++i) t.at(i) = cen_rng.normal() * 2.0;
      w.centroids.push_back(t);
    }
    placed = true;
    for (size_t a = 0; a < w.centroids.size() && placed; ++a) {
      for (size_t b = a + 1; b < w.centroids.size(); ++b) {
        if (row_distance(w.centroids[a], w.centroids[b]) < min_sep) {
          placed = false;
          break;
        }
      }
    }
  }
  if (!placed) {
    throw ValidationError("generate_world: could not satisfy centroid separation");
  }

  Rng style_rng = rng.derive("world-styles");
  for (int c = 0; c < spec.clusters; ++c) {
    w.content_dirs.push_back(random_unit_row(style_rng, spec.latent_dim));
    Tensor s(1, spec.emb_dim);
    if (spec.style_scale > 0.0) {
      // Styles live in the orthogonal complement of the image mixing range:
      // they sway raw image similarity but carry no recoverable task content,
      // so latent estimates are exactly style-blind.
      s = random_unit_row(style_rng, spec.emb_dim);
      Tensor coeff = num::matmul(s, num::transpose(pinv_a));
      Tensor in_range = num::matmul(coeff, num::transpose(w.A));
      double norm_sq = 0.0;
      for (int i = 0; i < s.cols(); ++i) {
        s.at(i) -= in_range.at(i);
        norm_sq += s.at(i) * s.at(i);
      }
      if (norm_sq < 1e-12) {
        throw RuntimeFailure("generate_world: style vector degenerate after projection");
      }
      double gain = spec.style_scale / std::sqrt(norm_sq);
      for (int i = 0; i < s.cols(); ++i) s.at(i) *= gain;
    }
    w.styles.push_back(s);
  }

  if (spec.labels.empty()) {
    for (int c = 0; c < spec.clusters; ++c) {
      w.labels.push_back({"c" + std::to_string(c) + "a", "c" + std::to_string(c) + "b"});
    }
  } else {
    w.labels = spec.labels;
  }

  auto latent_of = [&](int cluster, int bit) {
    Tensor tau = w.centroids[static_cast<size_t>(cluster)];
    const Tensor& dir = w.content_dirs[static_cast<size_t>(cluster)];
    double off = (bit - 0.5) * spec.content_scale;
    for (int i = 0; i < tau.cols(); ++i) tau.at(i) += off * dir.at(i);
    return tau;
  };

  out.library.d_img = spec.emb_dim;
  out.library.d_txt = spec.emb_dim;
  out.library.instruction = spec.instruction;
  Rng inst_rng(num::mix64(num::fnv1a("inst-emb:" + spec.instruction)));
  out.library.instruction_emb = random_unit_row(inst_rng, spec.emb_dim);

  Rng demo_rng = rng.derive("world-demos");
  int demo_index = 0;
  for (int c = 0; c < spec.clusters; ++c) {
    for (int i = 0; i < spec.demos_per_cluster; ++i, ++demo_index) {
      int bit = i % 2;
      data::Demonstration d;
      d.id = padded_id("d", demo_index);
      Tensor tau = latent_of(c, bit);
      int style = c;
      if (demo_rng.uniform() >= spec.style_home_prob && spec.clusters > 1) {
        // A genuinely foreign style: drawing the home style again would blunt
        // the visual misdirection the style knobs exist to create.
        style = demo_rng.uniform_int(spec.clusters - 1);
        if (style >= c) ++style;
      }
      d.image_emb = noisy(add_rows(mix(w.A, tau), w.styles[static_cast<size_t>(style)]),
                          demo_rng, spec.img_noise);
      d.q_emb = noisy(mix(w.B, tau), demo_rng, spec.txt_noise);
      const std::string label = w.labels[static_cast<size_t>(c)][static_cast<size_t>(bit)];
      Tensor lab = w.label_embedding(label);
      for (int j = 0; j < lab.cols(); ++j) lab.at(j) *= spec.label_emb_scale;
      d.r_emb = noisy(lab, demo_rng, spec.txt_noise);
      d.qr_emb = noisy(add_rows(mix(w.B, tau), lab), demo_rng, spec.txt_noise);
      d.text_q = "item " + d.id;
      d.text_r = label;
      d.meta["cluster"] = std::to_string(c);
      d.meta["bit"] = std::to_string(bit);
      d.meta["style"] = std::to_string(style);
      w.items[d.id] = {c, bit};
      out.library.demos.emplace(d.id, d);
    }
  }

  Rng query_rng = rng.derive("world-queries");
  int query_index = 0;
  for (int c = 0; c < spec.clusters; ++c) {
    for (int i = 0; i < spec.queries_per_cluster; ++i, ++query_index) {
      int bit = i % 2;
      data::QuerySample q;
      q.id = padded_id("q", query_index);
      Tensor tau = latent_of(c, bit);
      q.image_emb = noisy(add_rows(mix(w.A, tau), w.styles[static_cast<size_t>(c)]),
                          query_rng, spec.img_noise);
      q.q_emb = noisy(mix(w.B, tau), query_rng, spec.txt_noise);
      q.text_q = "item " + q.id;
      q.ground_truth_r = w.labels[static_cast<size_t>(c)][static_cast<size_t>(bit)];
      q.meta["cluster"] = std::to_string(c);
      q.meta["bit"] = std::to_string(bit);
      w.items[q.id] = {c, bit};
      out.queries.push_back(std::move(q));
    }
  }
  return out;
}

void save_world(const SyntheticWorld& w, const std::string& path) {
  json spec_j;
  spec_j["latent_dim"] = w.spec.latent_dim;
  spec_j["emb_dim"] = w.spec.emb_dim;
  spec_j["clusters"] = w.spec.clusters;
  spec_j["demos_per_cluster"] = w.spec.demos_per_cluster;
  spec_j["queries_per_cluster"] = w.spec.queries_per_cluster;
  spec_j["centroid_sep"] = w.spec.centroid_sep;
  spec_j["content_scale"] = w.spec.content_scale;
  spec_j["style_scale"] = w.spec.style_scale;
  spec_j["style_home_prob"] = w.spec.style_home_prob;
  spec_j["img_noise"] = w.spec.img_noise;
  spec_j["txt_noise"] = w.spec.txt_noise;
  spec_j["label_emb_scale"] = w.spec.label_emb_scale;
  spec_j["instruction"] = w.spec.instruction;
  spec_j["labels"] = json::array();
  for (const auto& pair : w.spec.labels) spec_j["labels"].push_back({pair[0], pair[1]});

  json j;
  j["format"] = "taco-world";
  j["version"] = 1;
  j["spec"] = spec_j;
  j["a"] = json{{"rows", w.A.rows()}, {"cols", w.A.cols()},
                {"data", io::tensor_to_base64(w.A)}};
  j["b"] = json{{"rows", w.B.rows()}, {"cols", w.B.cols()},
                {"data", io::tensor_to_base64(w.B)}};
  auto rows_array = [](const std::vector<Tensor>& ts) {
    json arr = json::array();
    for (const auto& t : ts) {
      arr.push_back(json{{"cols", t.cols()}, {"data", io::tensor_to_base64(t)}});
    }
    return arr;
  };
  j["centroids"] = rows_array(w.centroids);
  j["content_dirs"] = rows_array(w.content_dirs);
  j["styles"] = rows_array(w.styles);
  j["labels"] = json::array();
  for (const auto& pair : w.labels) j["labels"].push_back({pair[0], pair[1]});
  json items = json::object();
  for (const auto& [id, m] : w.items) {
    items[id] = json{{"cluster", m.cluster}, {"bit", m.bit}};
  }
  j["items"] = items;

  std::ofstream out(path, std::ios::binary);
  if (!out.good()) throw RuntimeFailure("save_world: cannot open " + path);
  out << j.dump(2) << "\n";
  if (!out.good()) throw RuntimeFailure("save_world: write failed for " + path);
}

SyntheticWorld load_world(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in.good()) throw RuntimeFailure("load_world: cannot open " + path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ValidationError("load_world: malformed JSON: " + std::string(e.what()));
  }
  try {
    require_keys(j, {"format", "version", "spec", "a", "b", "centroids", "content_dirs",
                     "styles", "labels", "items"},
                 "load_world");
    if (j["format"].get<std::string>() != "taco-world" || j["version"].get<int>() != 1) {
      throw ValidationError("load_world: unsupported format or version");
    }
    SyntheticWorld w;
    const json& s = j["spec"];
    require_keys(s,
                 {"latent_dim", "emb_dim", "clusters", "demos_per_cluster",
                  "queries_per_cluster", "centroid_sep", "content_scale", "style_scale",
                  "style_home_prob", "img_noise", "txt_noise", "label_emb_scale",
                  "instruction", "labels"},
                 "load_world");
    w.spec.latent_dim = s["latent_dim"].get<int>();
    w.spec.emb_dim = s["emb_dim"].get<int>();
    w.spec.clusters = s["clusters"].get<int>();
    w.spec.demos_per_cluster = s["demos_per_cluster"].get<int>();
    w.spec.queries_per_cluster = s["queries_per_cluster"].get<int>();
    w.spec.centroid_sep = s["centroid_sep"].get<double>();
    w.spec.content_scale = s["content_scale"].get<double>();
    w.spec.style_scale = s["style_scale"].get<double>();
    w.spec.style_home_prob = s["style_home_prob"].get<double>();
    w.spec.img_noise = s["img_noise"].get<double>();
    w.spec.txt_noise = s["txt_noise"].get<double>();
    w.spec.label_emb_scale = s["label_emb_scale"].get<double>();
    w.spec.instruction = s["instruction"].get<std::string>();
    for (const auto& pair : s["labels"]) {
      w.spec.labels.push_back({pair.at(0).get<std::string>(), pair.at(1).get<std::string>()});
    }
    auto read_matrix = [&](const json& m) {
      require_keys(m, {"rows", "cols", "data"}, "load_world");
      return io::tensor_from_base64(m["data"].get<std::string>(), m["rows"].get<int>(),
                                    m["cols"].get<int>());
    };
    w.A = read_matrix(j["a"]);
    w.B = read_matrix(j["b"]);
    auto read_rows = [&](const json& arr) {
      std::vector<Tensor> out;
      for (const auto& m : arr) {
        require_keys(m, {"cols", "data"}, "load_world");
        out.push_back(
            io::tensor_from_base64(m["data"].get<std::string>(), 1, m["cols"].get<int>()));
      }
      return out;
    };
    w.centroids = read_rows(j["centroids"]);
    w.content_dirs = read_rows(j["content_dirs"]);
    w.styles = read_rows(j["styles"]);
    for (const auto& pair : j["labels"]) {
      w.labels.push_back({pair.at(0).get<std::string>(), pair.at(1).get<std::string>()});
    }
    for (const auto& [id, m] : j["items"].items()) {
      require_keys(m, {"cluster", "bit"}, "load_world");
      w.items[id] = {m["cluster"].get<int>(), m["bit"].get<int>()};
    }
    return w;
  } catch (const json::exception& e) {
    throw ValidationError("load_world: malformed field: " + std::string(e.what()));
  }
}

WorldSpec specific_mapping_spec() {
  WorldSpec s;
  s.clusters = 1;
  s.demos_per_cluster = 60;
  s.queries_per_cluster = 20;
  s.labels = {{"no", "yes"}};
  s.instruction = "answer yes or no for each item";
  return s;
}

WorldSpec generalized_mapping_spec() {
  WorldSpec s;
  s.clusters = 4;
  s.demos_per_cluster = 30;
  s.queries_per_cluster = 8;
  s.style_scale = 0.5;
  s.style_home_prob = 0.8;
  s.instruction = "map each item to its label";
  return s;
}

WorldSpec style_dominant_spec() {
  WorldSpec s = generalized_mapping_spec();
  s.style_scale = 3.0;
  s.style_home_prob = 0.1;
  return s;
}

void ScorerParams::validate() const {
  if (align < 0 || cohesion < 0 || label_penalty < 0 || prior_gain < 0 || vote_gain < 0 ||
      recog_align < 0 || recog_cohesion < 0 || noise < 0) {
    throw ValidationError("scorer_params: gains must be nonnegative");
  }
  if (pos_slope < 0 || pos_floor <= 0 || pos_floor > 1) {
    throw ValidationError("scorer_params: position weights out of range");
  }
  if (recog_floor < 0 || recog_floor > 1 || zero_shot_recog < 0 || zero_shot_recog > 1) {
    throw ValidationError("scorer_params: recognition bounds out of range");
  }
}

SyntheticScorer::SyntheticScorer(const SyntheticWorld& world, ScorerParams params)
    : world_(world), params_(params) {
  params_.validate();
  pinv_a_ = pinv(world_.A, "synthetic_scorer");
  pinv_b_ = pinv(world_.B, "synthetic_scorer");
}

Tensor SyntheticScorer::estimate_latent(const Tensor& image_emb, const Tensor& q_emb) const {
  Tensor from_img = num::matmul(image_emb, num::transpose(pinv_a_));
  Tensor from_txt = num::matmul(q_emb, num::transpose(pinv_b_));
  Tensor out(1, from_img.cols());
  for (int i = 0; i < out.cols(); ++i) {
    out.at(i) = 0.5 * (from_img.at(i) + from_txt.at(i));
  }
  return out;
}

namespace {

struct SequenceView {
  std::vector<Tensor> latents;
  std::vector<double> weights;
  std::vector<bool> consistent;  // stated label equals the item's true label
  double weight_sum = 0.0;
  double align_sq = 0.0;      // sum_i w_i ||tau_i - tau_hat||^2
  double spread_sq = 0.0;     // sum_i ||tau_i - mean||^2
  double consistency = 0.0;   // weighted fraction of consistent labels
};

}  // namespace

// Shared per-sequence geometry for loglik and label_probs.
static SequenceView view_sequence(const SyntheticScorer& scorer,
                                  const std::vector<data::Demonstration>& icds,
                                  const Tensor& tau_hat, const ScorerParams& p,
                                  const SyntheticWorld& w) {
  SequenceView v;
  int n = static_cast<int>(icds.size());
  for (int i = 0; i < n; ++i) {
    const auto& d = icds[static_cast<size_t>(i)];
    SyntheticWorld::ItemMeta m;
    m.cluster = meta_int(d.meta, "cluster", d.id, "synthetic_scorer");
    m.bit = meta_int(d.meta, "bit", d.id, "synthetic_scorer");
    double weight = 1.0;
    if (p.mode == ScorerParams::Mode::position_weighted) {
      weight = std::max(p.pos_floor, 1.0 - p.pos_slope * i);
    }
    v.latents.push_back(scorer.estimate_latent(d.image_emb, d.q_emb));
    v.weights.push_back(weight);
    v.consistent.push_back(d.text_r == w.true_label(m));
    v.weight_sum += weight;
  }
  if (n > 0) {
    Tensor mean(1, v.latents[0].cols());
    for (const auto& t : v.latents) {
      for (int i = 0; i < mean.cols(); ++i) mean.at(i) += t.at(i);
    }
    for (int i = 0; i < mean.cols(); ++i) mean.at(i) /= n;
    for (int i = 0; i < n; ++i) {
      double a = row_distance(v.latents[static_cast<size_t>(i)], tau_hat);
      double s = row_distance(v.latents[static_cast<size_t>(i)], mean);
      v.align_sq += v.weights[static_cast<size_t>(i)] * a * a;
      v.spread_sq += s * s;
      if (v.consistent[static_cast<size_t>(i)]) {
        v.consistency += v.weights[static_cast<size_t>(i)];
      }
    }
    v.consistency /= v.weight_sum;
  }
  return v;
}

double SyntheticScorer::loglik(const std::string& instruction,
                               const std::vector<data::Demonstration>& icds,
                               const data::QuerySample& query, const std::string& response) {
  (void)instruction;
  SyntheticWorld::ItemMeta qm;
  qm.cluster = meta_int(query.meta, "cluster", query.id, "synthetic_scorer");
  qm.bit = meta_int(query.meta, "bit", query.id, "synthetic_scorer");
  Tensor tau_hat = estimate_latent(query.image_emb, query.q_emb);
  SequenceView v = view_sequence(*this, icds, tau_hat, params_, world_);

  double mismatches = 0.0;
  for (size_t i = 0; i < v.consistent.size(); ++i) {
    if (!v.consistent[i]) mismatches += v.weights[i];
  }
  if (response != world_.true_label(qm)) mismatches += 1.0;

  return -params_.align * v.align_sq - params_.cohesion * v.spread_sq -
         params_.label_penalty * mismatches;
}

std::map<std::string, double> SyntheticScorer::label_probs(
    const std::string& instruction, const std::vector<data::Demonstration>& icds,
    const data::QuerySample& query) {
  (void)instruction;
  bool has_meta = query.meta.count("cluster") != 0 && query.meta.count("bit") != 0;
  std::vector<std::string> label_set;
  std::string truth;
  if (has_meta) {
    SyntheticWorld::ItemMeta qm;
    qm.cluster = meta_int(query.meta, "cluster", query.id, "synthetic_scorer");
    qm.bit = meta_int(query.meta, "bit", query.id, "synthetic_scorer");
    const auto& pair = world_.labels.at(static_cast<size_t>(qm.cluster));
    label_set = {pair[0], pair[1]};
    std::sort(label_set.begin(), label_set.end());
    truth = world_.true_label(qm);
  } else {
    label_set = world_.all_labels();
  }

  Tensor tau_hat = estimate_latent(query.image_emb, query.q_emb);
  SequenceView v = view_sequence(*this, icds, tau_hat, params_, world_);

  int n = static_cast<int>(icds.size());
  double recog = params_.zero_shot_recog;
  if (n > 0) {
    double mean_align = v.align_sq / v.weight_sum;
    double mean_spread = v.spread_sq / n;
    recog = std::exp(-params_.recog_align * mean_align -
                     params_.recog_cohesion * mean_spread) *
            (params_.recog_floor + (1.0 - params_.recog_floor) * v.consistency);
  }

  std::map<std::string, double> logits;
  for (const auto& label : label_set) {
    double z = params_.noise * jitter(params_.seed, query.id, label);
    if (has_meta && label == truth) z += params_.prior_gain * recog;
    for (int i = 0; i < n; ++i) {
      if (icds[static_cast<size_t>(i)].text_r == label) {
        z += params_.vote_gain * v.weights[static_cast<size_t>(i)];
      }
    }
    logits[label] = z;
  }

  double mx = -1e300;
  for (const auto& [label, z] : logits) mx = std::max(mx, z);
  double total = 0.0;
  for (const auto& [label, z] : logits) total += std::exp(z - mx);
  std::map<std::string, double> probs;
  for (const auto& [label, z] : logits) probs[label] = std::exp(z - mx) / total;
  return probs;
}

PerturbationOp make_em(const SyntheticWorld& world, double factor, PerturbTarget target) {
  if (factor < 0.0 || factor > 1.0) {
    throw ValidationError("make_em: factor must lie in [0,1]");
  }
  PerturbationOp op;
  op.kind = PerturbKind::easier_mapping;
  op.target = target;
  op.em_factor = factor;
  for (const auto& [id, meta] : world.items) {
    op.em_targets.emplace(id, world.text_centroid(meta.cluster));
  }
  return op;
}

PerturbationOp make_hm(const SyntheticWorld& world) {
  PerturbationOp op;
  op.kind = PerturbKind::harder_mapping;
  op.target = PerturbTarget::all_icds;
  auto labels = world.all_labels();
  for (size_t i = 0; i < labels.size(); ++i) {
    op.hm_remap[labels[i]] = "__hm" + std::to_string(i);
  }
  return op;
}

PerturbationOp make_wl(const SyntheticWorld& world, double flip_fraction) {
  if (flip_fraction < 0.0 || flip_fraction > 1.0) {
    throw ValidationError("make_wl: flip fraction must lie in [0,1]");
  }
  PerturbationOp op;
  op.kind = PerturbKind::wrong_labels;
  op.target = PerturbTarget::all_icds;
  op.wl_flip_fraction = flip_fraction;
  for (const auto& pair : world.labels) {
    op.wl_flip_table[pair[0]] = pair[1];
    op.wl_flip_table[pair[1]] = pair[0];
  }
  return op;
}

PerturbationOp make_bi(const SyntheticWorld& world, const data::DemoLibrary& library,
                       double std_scale, PerturbTarget target) {
  (void)world;
  if (std_scale < 0.0) throw ValidationError("make_bi: std scale must be nonnegative");
  if (library.demos.empty()) throw ValidationError("make_bi: empty library");
  double sq = 0.0, sum = 0.0;
  std::int64_t count = 0;
  for (const auto& [id, d] : library.demos) {
    for (int i = 0; i < d.image_emb.cols(); ++i) {
      sum += d.image_emb.at(i);
      sq += d.image_emb.at(i) * d.image_emb.at(i);
      ++count;
    }
  }
  double mean = sum / count;
  double var = std::max(0.0, sq / count - mean * mean);
  PerturbationOp op;
  op.kind = PerturbKind::blurred_images;
  op.target = target;
  op.bi_noise_std = std_scale * std::sqrt(var);
  return op;
}

EvalInstance materialize(const data::DemoLibrary& library, const data::IclSequence& seq) {
  data::validate_sequence(seq, library, "materialize");
  EvalInstance out;
  out.instruction = seq.instruction;
  for (const auto& id : seq.icd_ids) out.icds.push_back(library.get(id));
  out.query = seq.query;
  return out;
}

EvalInstance apply_perturbation(const PerturbationOp& op, const EvalInstance& in, Rng& rng) {
  EvalInstance out = in;
  switch (op.kind) {
    case PerturbKind::wrong_labels: {
      if (op.target == PerturbTarget::query_only) {
        throw ValidationError("apply_perturbation: wrong-labels cannot target the query");
      }
      int n = static_cast<int>(out.icds.size());
      int flips = static_cast<int>(std::ceil(op.wl_flip_fraction * n));
      std::vector<int> order = rng.permutation(n);
      for (int i = 0; i < flips; ++i) {
        auto& d = out.icds[static_cast<size_t>(order[static_cast<size_t>(i)])];
        auto it = op.wl_flip_table.find(d.text_r);
        if (it == op.wl_flip_table.end()) {
          throw ValidationError("apply_perturbation: no flip for label '" + d.text_r + "'");
        }
        d.text_r = it->second;
      }
      break;
    }
    case PerturbKind::harder_mapping: {
      if (op.target == PerturbTarget::query_only) {
        throw ValidationError("apply_perturbation: harder-mapping cannot target the query");
      }
      for (auto& d : out.icds) {
        auto it = op.hm_remap.find(d.text_r);
        if (it == op.hm_remap.end()) {
          throw ValidationError("apply_perturbation: no remap for label '" + d.text_r + "'");
        }
        d.text_r = it->second;
      }
      break;
    }
    case PerturbKind::blurred_images: {
      if (op.target == PerturbTarget::all_icds) {
        for (auto& d : out.icds) d.image_emb = noisy(d.image_emb, rng, op.bi_noise_std);
      } else {
        out.query.image_emb = noisy(out.query.image_emb, rng, op.bi_noise_std);
      }
      break;
    }
    case PerturbKind::easier_mapping: {
      auto pull = [&](Tensor& emb, const std::string& id) {
        auto it = op.em_targets.find(id);
        if (it == op.em_targets.end()) {
          throw ValidationError("apply_perturbation: no centroid for item '" + id + "'");
        }
        for (int i = 0; i < emb.cols(); ++i) {
          emb.at(i) = (1.0 - op.em_factor) * emb.at(i) + op.em_factor * it->second.at(i);
        }
      };
      if (op.target == PerturbTarget::all_icds) {
        for (auto& d : out.icds) pull(d.q_emb, d.id);
      } else {
        pull(out.query.q_emb, out.query.id);
      }
      break;
    }
  }
  return out;
}

}  // namespace taco::world
