#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "taco/tensor.hpp"

namespace taco::data {

using taco::num::Tensor;

// One in-context demonstration: an image, a textual query, and its response,
// each carried as precomputed embeddings. `meta` is an opaque string map used
// by synthetic worlds to tag latent structure.
struct Demonstration {
  std::string id;
  Tensor image_emb;  // 1 x d_img
  std::string text_q;
  std::string text_r;
  Tensor q_emb;   // 1 x d_txt
  Tensor r_emb;   // 1 x d_txt
  Tensor qr_emb;  // 1 x d_txt, embedding of the joined query+response text
  std::map<std::string, std::string> meta;
};

// The sample a sequence is assembled for. Ground truth is present only in
// training/evaluation data; without it the sample is inference-only.
struct QuerySample {
  std::string id;
  Tensor image_emb;  // 1 x d_img
  std::string text_q;
  Tensor q_emb;  // 1 x d_txt
  std::optional<std::string> ground_truth_r;
  std::map<std::string, std::string> meta;
};

// Immutable after load; ids are unique and iteration order is id-sorted.
struct DemoLibrary {
  std::map<std::string, Demonstration> demos;
  int d_img = 0;
  int d_txt = 0;
  // Task instruction shared by every sequence drawn from this library, with a
  // precomputed embedding of its simplified form (1 x d_txt; may be empty).
  std::string instruction;
  Tensor instruction_emb;

  int size() const { return static_cast<int>(demos.size()); }
  bool contains(const std::string& id) const { return demos.count(id) != 0; }
  const Demonstration& get(const std::string& id) const;  // throws on unknown id
  std::vector<std::string> ids() const;                   // sorted
};

// An ordered selection of demonstrations ahead of one query.
struct IclSequence {
  std::string instruction;
  std::vector<std::string> icd_ids;  // distinct, resolvable in the library
  QuerySample query;

  int shots() const { return static_cast<int>(icd_ids.size()); }
};

// Training data: every sequence carries a ground truth and exactly `shot` ICDs.
struct SequenceDataset {
  std::vector<IclSequence> sequences;
  int shot = 0;
};

enum class InstPosition { beginning, middle, end };

// Throws when icd_ids contain duplicates or reference ids missing from the
// library; used by every consumer that renders or embeds a sequence.
void validate_sequence(const IclSequence& seq, const DemoLibrary& library,
                       const char* op);

// Renders the sequence as prompt text. ICDs appear in order as
// "Query: {Q}\nResponse: {R}\n"; the query block ends with "Response:" and no
// response text; the instruction block is placed per `pos`.
std::string assemble_prompt(const IclSequence& seq, const DemoLibrary& library,
                            InstPosition pos);

// Reorders ICDs by `perm` (new position i takes old position perm[i]);
// instruction and query are untouched.
IclSequence permute_sequence(const IclSequence& seq, const std::vector<int>& perm);

// Line-delimited UTF-8 files, one object per line, first line a header record
// carrying format name and version. Loaders name the offending line on error.
DemoLibrary load_library(const std::string& path);
void save_library(const DemoLibrary& library, const std::string& path);

std::vector<QuerySample> load_queries(const std::string& path);
void save_queries(const std::vector<QuerySample>& queries, const std::string& path);

SequenceDataset load_dataset(const std::string& path);
void save_dataset(const SequenceDataset& dataset, const std::string& path);

}  // namespace taco::data
