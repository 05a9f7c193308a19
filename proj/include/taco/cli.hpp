#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "taco/data.hpp"
#include "taco/decoder.hpp"
#include "taco/scorer.hpp"
#include "taco/search.hpp"
#include "taco/training.hpp"
#include "taco/world.hpp"

namespace taco::cli {

// One JSON config drives every subcommand. Parsing is strict: unknown keys
// anywhere in the document are an error, so typos fail loudly instead of
// silently running defaults. Command-line --seed / --out override the file.
struct RunConfig {
  std::uint64_t seed = 0;
  std::string out_dir = "out";

  // World section: a named preset plus field-level overrides.
  std::string world_preset = "specific_mapping";
  world::WorldSpec world;

  // Model section, resolved against the library's embedding dims at build time.
  model::DecoderConfig model;

  // Training section.
  train::TrainConfig train;
  double val_fraction = 0.2;
  std::vector<std::array<double, 2>> sweep;  // optional (lambda1, lambda2) grid

  // Oracle data construction section.
  search::OracleConfig oracle;

  // Inference section.
  int infer_beam_width = 3;
  int infer_n = 4;

  // Scorer section: "synthetic" (closed-form world scorer) or "external"
  // (HTTP endpoint; url falls back to the TACO_SCORER_URL environment variable).
  std::string scorer_kind = "synthetic";
  world::ScorerParams scorer_params;
  std::string scorer_url;
  double scorer_timeout_sec = 5.0;
  int scorer_max_retries = 3;

  // Evaluation section.
  std::vector<std::string> eval_methods{"rs", "i2i", "iq2iq", "oracle"};
  std::vector<std::string> eval_perturbations;  // empty: skip the perturbation grid
  int eval_k_perms = 10;
  int eval_repeats = 5;
  std::string eval_metric = "loglik";  // disruption metric: "loglik" | "accuracy"
  int eval_shots = 4;
  double eval_em_factor = 1.0;
  double eval_wl_fraction = 0.75;
  double eval_bi_scale = 0.5;
  int eval_demo_n_perms = 8;
  int eval_demo_k_top = 4;
  std::string eval_checkpoint;  // empty: <out_dir>/train/best.json

  // Canonical resolved form, hashed into every report for provenance.
  std::string canonical_json;
  std::uint64_t config_hash = 0;

  void validate() const;
};

// Strict parse; `seed_override` / `out_override` come from command-line flags
// and win over the file. Throws ValidationError on unknown keys or bad values.
RunConfig parse_run_config(const std::string& json_text,
                           std::optional<std::uint64_t> seed_override,
                           std::optional<std::string> out_override);
RunConfig load_run_config(const std::string& path,
                          std::optional<std::uint64_t> seed_override,
                          std::optional<std::string> out_override);

// The model section resolved against a concrete library: fusion embedding
// dims follow the data, everything else follows the config.
model::DecoderConfig resolve_model_config(const RunConfig& cfg,
                                          const data::DemoLibrary& library);

// Builds the configured scorer. The synthetic kind needs the world file under
// the run's out_dir; the external kind needs a url (config or environment).
std::unique_ptr<score::ScorerInterface> make_scorer(const RunConfig& cfg,
                                                    const world::SyntheticWorld* world);

// --- reports -----------------------------------------------------------------

struct MethodRow {
  std::string method;
  double accuracy = 0.0;
  double delta = 0.0;        // demonstration-disruption gap
  double sigma = 0.0;        // order sensitivity
  double mean_loglik = 0.0;
  bool reference = false;    // marks the unablated row in ablation reports
};

struct PerturbRow {
  std::string setting;
  double accuracy = 0.0;
  double mean_loglik = 0.0;
};

struct Report {
  std::uint64_t config_hash = 0;
  std::uint64_t seed = 0;
  std::string version;
  std::vector<MethodRow> rows;
  std::vector<PerturbRow> perturbations;
};

// report.json plus report.csv (and report_perturbations.csv when present).
void write_report(const Report& report, const std::string& dir, const std::string& stem);

// --- subcommands ---------------------------------------------------------------

// Each command reads/writes files under cfg.out_dir and throws on failure:
// ValidationError for bad configs or inputs, RuntimeFailure for broken files,
// failed IO, or numeric breakdown. run_cli maps those to exit codes 1 and 2.
void cmd_gen_world(const RunConfig& cfg);
void cmd_build_data(const RunConfig& cfg);
void cmd_train(const RunConfig& cfg);
void cmd_generate(const RunConfig& cfg);
void cmd_evaluate(const RunConfig& cfg);
void cmd_ablate(const RunConfig& cfg);

// Full command-line entry: parses subcommand and flags, loads the config,
// dispatches, and returns the process exit code (0 ok, 1 validation, 2 runtime).
int run_cli(int argc, const char* const* argv);

}  // namespace taco::cli
