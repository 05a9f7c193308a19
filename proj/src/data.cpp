#include "taco/data.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

#include "json.hpp"
#include "taco/errors.hpp"

namespace taco::data {

using nlohmann::json;

namespace {

constexpr const char* kLibraryFormat = "taco-library";
constexpr const char* kQueriesFormat = "taco-queries";
constexpr const char* kDatasetFormat = "taco-dataset";
constexpr int kFormatVersion = 1;

[[noreturn]] void fail_line(const std::string& op, const std::string& path,
                            int line, const std::string& what) {
  throw ValidationError(op + ": " + path + " line " + std::to_string(line) +
                        ": " + what);
}

json parse_line(const std::string& op, const std::string& path, int line,
                const std::string& text) {
  json j = json::parse(text, nullptr, false);
  if (j.is_discarded() || !j.is_object())
    fail_line(op, path, line, "malformed record");
  return j;
}

json require_key(const std::string& op, const std::string& path, int line,
                 const json& j, const char* key) {
  auto it = j.find(key);
  if (it == j.end()) fail_line(op, path, line, std::string("missing key '") + key + "'");
  return *it;
}

std::string get_string(const std::string& op, const std::string& path, int line,
                       const json& j, const char* key) {
  json v = require_key(op, path, line, j, key);
  if (!v.is_string()) fail_line(op, path, line, std::string("key '") + key + "' is not a string");
  return v.get<std::string>();
}

json emb_to_json(const Tensor& t) {
  json arr = json::array();
  for (int i = 0; i < t.numel(); ++i) arr.push_back(t.at(i));
  return arr;
}

Tensor emb_from_json(const std::string& op, const std::string& path, int line,
                     const json& j, const char* key) {
  json v = require_key(op, path, line, j, key);
  if (!v.is_array() || v.empty())
    fail_line(op, path, line, std::string("key '") + key + "' is not a non-empty array");
  std::vector<double> vals;
  vals.reserve(v.size());
  for (const auto& x : v) {
    if (!x.is_number()) fail_line(op, path, line, std::string("key '") + key + "' holds a non-number");
    vals.push_back(x.get<double>());
  }
  Tensor t = Tensor::row(std::move(vals));
  if (!t.all_finite())
    fail_line(op, path, line, std::string("key '") + key + "' holds a non-finite value");
  return t;
}

std::map<std::string, std::string> meta_from_json(const std::string& op,
                                                  const std::string& path, int line,
                                                  const json& j) {
  std::map<std::string, std::string> meta;
  auto it = j.find("meta");
  if (it == j.end()) return meta;
  if (!it->is_object()) fail_line(op, path, line, "key 'meta' is not an object");
  for (const auto& [k, v] : it->items()) {
    if (!v.is_string()) fail_line(op, path, line, "meta values must be strings");
    meta[k] = v.get<std::string>();
  }
  return meta;
}

json meta_to_json(const std::map<std::string, std::string>& meta) {
  json j = json::object();
  for (const auto& [k, v] : meta) j[k] = v;
  return j;
}

// Reads the whole file as (header, numbered record lines). Blank lines are
// rejected except a single trailing newline.
struct LineFile {
  json header;
  std::vector<std::pair<int, std::string>> records;  // (line number, text)
};

LineFile read_line_file(const std::string& op, const std::string& path,
                        const char* expect_format) {
  std::ifstream in(path);
  if (!in) throw ValidationError(op + ": cannot open " + path);
  LineFile f;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) {
      if (in.peek() == std::ifstream::traits_type::eof()) break;
      fail_line(op, path, lineno, "blank line");
    }
    if (lineno == 1) {
      json h = parse_line(op, path, 1, line);
      std::string format = get_string(op, path, 1, h, "format");
      if (format != expect_format)
        fail_line(op, path, 1, "format '" + format + "', expected '" + expect_format + "'");
      json ver = require_key(op, path, 1, h, "version");
      if (!ver.is_number_integer() || ver.get<int>() != kFormatVersion)
        fail_line(op, path, 1, "unsupported version");
      f.header = h;
    } else {
      f.records.emplace_back(lineno, line);
    }
  }
  if (lineno == 0) throw ValidationError(op + ": " + path + " is empty");
  return f;
}

void write_lines(const std::string& op, const std::string& path,
                 const std::vector<json>& lines) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw RuntimeFailure(op + ": cannot write " + path);
  for (const json& j : lines) out << j.dump() << '\n';
  if (!out) throw RuntimeFailure(op + ": write failed for " + path);
}

QuerySample query_from_json(const std::string& op, const std::string& path,
                            int line, const json& j) {
  QuerySample q;
  q.id = get_string(op, path, line, j, "id");
  q.image_emb = emb_from_json(op, path, line, j, "image_emb");
  q.text_q = get_string(op, path, line, j, "text_q");
  q.q_emb = emb_from_json(op, path, line, j, "q_emb");
  if (j.contains("ground_truth_r"))
    q.ground_truth_r = get_string(op, path, line, j, "ground_truth_r");
  q.meta = meta_from_json(op, path, line, j);
  return q;
}

json query_to_json(const QuerySample& q, bool with_ground_truth) {
  json j;
  j["id"] = q.id;
  j["image_emb"] = emb_to_json(q.image_emb);
  j["text_q"] = q.text_q;
  j["q_emb"] = emb_to_json(q.q_emb);
  if (with_ground_truth && q.ground_truth_r) j["ground_truth_r"] = *q.ground_truth_r;
  if (!q.meta.empty()) j["meta"] = meta_to_json(q.meta);
  return j;
}

}  // namespace

const Demonstration& DemoLibrary::get(const std::string& id) const {
  auto it = demos.find(id);
  if (it == demos.end())
    throw ValidationError("library: unknown demonstration id '" + id + "'");
  return it->second;
}

std::vector<std::string> DemoLibrary::ids() const {
  std::vector<std::string> out;
  out.reserve(demos.size());
  for (const auto& [id, _] : demos) out.push_back(id);
  return out;
}

void validate_sequence(const IclSequence& seq, const DemoLibrary& library,
                       const char* op) {
  std::vector<std::string> sorted = seq.icd_ids;
  std::sort(sorted.begin(), sorted.end());
  if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end())
    throw ValidationError(std::string(op) + ": duplicate demonstration id in sequence");
  for (const std::string& id : seq.icd_ids)
    if (!library.contains(id))
      throw ValidationError(std::string(op) + ": unknown demonstration id '" + id + "'");
}

std::string assemble_prompt(const IclSequence& seq, const DemoLibrary& library,
                            InstPosition pos) {
  validate_sequence(seq, library, "assemble_prompt");
  std::string icds;
  for (const std::string& id : seq.icd_ids) {
    const Demonstration& d = library.get(id);
    icds += "Query: " + d.text_q + "\nResponse: " + d.text_r + "\n";
  }
  std::string query_block = "Query: " + seq.query.text_q + "\nResponse:";
  switch (pos) {
    case InstPosition::beginning:
      return seq.instruction + "\n" + icds + query_block;
    case InstPosition::middle:
      return icds + seq.instruction + "\n" + query_block;
    case InstPosition::end:
      return icds + query_block + "\n" + seq.instruction;
  }
  throw ValidationError("assemble_prompt: unknown instruction position");
}

IclSequence permute_sequence(const IclSequence& seq, const std::vector<int>& perm) {
  const int n = seq.shots();
  if (static_cast<int>(perm.size()) != n)
    throw ValidationError("permute_sequence: permutation length " +
                          std::to_string(perm.size()) + " does not match shot count " +
                          std::to_string(n));
  std::vector<bool> seen(static_cast<size_t>(n), false);
  for (int p : perm) {
    if (p < 0 || p >= n || seen[static_cast<size_t>(p)])
      throw ValidationError("permute_sequence: not a permutation");
    seen[static_cast<size_t>(p)] = true;
  }
  IclSequence out = seq;
  for (int i = 0; i < n; ++i)
    out.icd_ids[static_cast<size_t>(i)] = seq.icd_ids[static_cast<size_t>(perm[static_cast<size_t>(i)])];
  return out;
}

DemoLibrary load_library(const std::string& path) {
  const std::string op = "load_library";
  LineFile f = read_line_file(op, path, kLibraryFormat);
  DemoLibrary lib;
  if (f.header.contains("instruction"))
    lib.instruction = get_string(op, path, 1, f.header, "instruction");
  if (f.header.contains("instruction_emb"))
    lib.instruction_emb = emb_from_json(op, path, 1, f.header, "instruction_emb");
  for (const auto& [lineno, text] : f.records) {
    json j = parse_line(op, path, lineno, text);
    Demonstration d;
    d.id = get_string(op, path, lineno, j, "id");
    d.image_emb = emb_from_json(op, path, lineno, j, "image_emb");
    d.text_q = get_string(op, path, lineno, j, "text_q");
    d.text_r = get_string(op, path, lineno, j, "text_r");
    d.q_emb = emb_from_json(op, path, lineno, j, "q_emb");
    d.r_emb = emb_from_json(op, path, lineno, j, "r_emb");
    d.qr_emb = emb_from_json(op, path, lineno, j, "qr_emb");
    d.meta = meta_from_json(op, path, lineno, j);
    if (lib.demos.empty()) {
      lib.d_img = d.image_emb.cols();
      lib.d_txt = d.q_emb.cols();
    }
    if (d.image_emb.cols() != lib.d_img)
      fail_line(op, path, lineno, "image_emb dim " + std::to_string(d.image_emb.cols()) +
                                      ", library uses " + std::to_string(lib.d_img));
    for (const Tensor* t : {&d.q_emb, &d.r_emb, &d.qr_emb})
      if (t->cols() != lib.d_txt)
        fail_line(op, path, lineno, "text embedding dim " + std::to_string(t->cols()) +
                                        ", library uses " + std::to_string(lib.d_txt));
    if (lib.demos.count(d.id)) fail_line(op, path, lineno, "duplicate id '" + d.id + "'");
    lib.demos.emplace(d.id, std::move(d));
  }
  if (lib.demos.empty())
    throw ValidationError(op + (": " + path) + ": empty library");
  if (lib.instruction_emb.numel() > 0 && lib.instruction_emb.cols() != lib.d_txt)
    throw ValidationError(op + (": " + path) + ": instruction_emb dim " +
                          std::to_string(lib.instruction_emb.cols()) + ", library uses " +
                          std::to_string(lib.d_txt));
  return lib;
}

void save_library(const DemoLibrary& library, const std::string& path) {
  std::vector<json> lines;
  json header;
  header["format"] = kLibraryFormat;
  header["version"] = kFormatVersion;
  header["instruction"] = library.instruction;
  if (library.instruction_emb.numel() > 0)
    header["instruction_emb"] = emb_to_json(library.instruction_emb);
  lines.push_back(std::move(header));
  for (const auto& [id, d] : library.demos) {
    json j;
    j["id"] = d.id;
    j["image_emb"] = emb_to_json(d.image_emb);
    j["text_q"] = d.text_q;
    j["text_r"] = d.text_r;
    j["q_emb"] = emb_to_json(d.q_emb);
    j["r_emb"] = emb_to_json(d.r_emb);
    j["qr_emb"] = emb_to_json(d.qr_emb);
    if (!d.meta.empty()) j["meta"] = meta_to_json(d.meta);
    lines.push_back(std::move(j));
  }
  write_lines("save_library", path, lines);
}

std::vector<QuerySample> load_queries(const std::string& path) {
  const std::string op = "load_queries";
  LineFile f = read_line_file(op, path, kQueriesFormat);
  std::vector<QuerySample> out;
  out.reserve(f.records.size());
  for (const auto& [lineno, text] : f.records) {
    json j = parse_line(op, path, lineno, text);
    out.push_back(query_from_json(op, path, lineno, j));
  }
  return out;
}

void save_queries(const std::vector<QuerySample>& queries, const std::string& path) {
  std::vector<json> lines;
  json header;
  header["format"] = kQueriesFormat;
  header["version"] = kFormatVersion;
  lines.push_back(std::move(header));
  for (const QuerySample& q : queries) lines.push_back(query_to_json(q, true));
  write_lines("save_queries", path, lines);
}

SequenceDataset load_dataset(const std::string& path) {
  const std::string op = "load_dataset";
  LineFile f = read_line_file(op, path, kDatasetFormat);
  SequenceDataset ds;
  json shot = require_key(op, path, 1, f.header, "shot");
  if (!shot.is_number_integer() || shot.get<int>() < 0)
    fail_line(op, path, 1, "invalid shot count");
  ds.shot = shot.get<int>();
  for (const auto& [lineno, text] : f.records) {
    json j = parse_line(op, path, lineno, text);
    IclSequence seq;
    seq.instruction = get_string(op, path, lineno, j, "instruction");
    json ids = require_key(op, path, lineno, j, "icd_ids");
    if (!ids.is_array()) fail_line(op, path, lineno, "icd_ids is not an array");
    for (const auto& id : ids) {
      if (!id.is_string()) fail_line(op, path, lineno, "icd_ids holds a non-string");
      seq.icd_ids.push_back(id.get<std::string>());
    }
    std::vector<std::string> sorted = seq.icd_ids;
    std::sort(sorted.begin(), sorted.end());
    if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end())
      fail_line(op, path, lineno, "duplicate id in icd_ids");
    if (seq.shots() != ds.shot)
      fail_line(op, path, lineno, "sequence has " + std::to_string(seq.shots()) +
                                      " ICDs, dataset shot is " + std::to_string(ds.shot));
    json q = require_key(op, path, lineno, j, "query");
    if (!q.is_object()) fail_line(op, path, lineno, "query is not an object");
    seq.query = query_from_json(op, path, lineno, q);
    // The ground truth lives at record level, split out from the query block.
    if (j.contains("ground_truth_r"))
      seq.query.ground_truth_r = get_string(op, path, lineno, j, "ground_truth_r");
    ds.sequences.push_back(std::move(seq));
  }
  return ds;
}

void save_dataset(const SequenceDataset& dataset, const std::string& path) {
  const std::string op = "save_dataset";
  for (const IclSequence& seq : dataset.sequences)
    if (seq.shots() != dataset.shot)
      throw ValidationError(op + std::string(": sequence for query '") + seq.query.id +
                            "' has " + std::to_string(seq.shots()) + " ICDs, dataset shot is " +
                            std::to_string(dataset.shot));
  std::vector<json> lines;
  json header;
  header["format"] = kDatasetFormat;
  header["version"] = kFormatVersion;
  header["shot"] = dataset.shot;
  lines.push_back(std::move(header));
  for (const IclSequence& seq : dataset.sequences) {
    json j;
    j["instruction"] = seq.instruction;
    j["icd_ids"] = seq.icd_ids;
    j["query"] = query_to_json(seq.query, false);
    if (seq.query.ground_truth_r) j["ground_truth_r"] = *seq.query.ground_truth_r;
    lines.push_back(std::move(j));
  }
  write_lines(op, path, lines);
}

}  // namespace taco::data
