#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include "doctest.h"
#include "taco/data.hpp"
#include "taco/errors.hpp"
#include "taco/rng.hpp"

using namespace taco;
using namespace taco::data;
using taco::num::Rng;
using taco::num::Tensor;

namespace {

std::filesystem::path temp_file(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / "taco_data_tests";
  std::filesystem::create_directories(dir);
  return dir / name;
}

void write_text(const std::filesystem::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out << text;
}

std::string read_text(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(in), {});
}

Demonstration make_demo(Rng& rng, const std::string& id, int d_img, int d_txt) {
  Demonstration d;
  d.id = id;
  d.image_emb = Tensor(1, d_img);
  d.q_emb = Tensor(1, d_txt);
  d.r_emb = Tensor(1, d_txt);
  d.qr_emb = Tensor(1, d_txt);
  for (int i = 0; i < d_img; ++i) d.image_emb.at(i) = rng.normal();
  for (int i = 0; i < d_txt; ++i) {
    d.q_emb.at(i) = rng.normal();
    d.r_emb.at(i) = rng.normal();
    d.qr_emb.at(i) = rng.normal();
  }
  d.text_q = "what is in image " + id;
  d.text_r = "label-" + id;
  d.meta["cluster"] = "0";
  return d;
}

DemoLibrary make_library(int n, int d_img = 4, int d_txt = 3) {
  Rng rng(42);
  DemoLibrary lib;
  lib.d_img = d_img;
  lib.d_txt = d_txt;
  lib.instruction = "Answer the question about each image.";
  lib.instruction_emb = Tensor(1, d_txt);
  for (int i = 0; i < d_txt; ++i) lib.instruction_emb.at(i) = rng.normal();
  for (int i = 0; i < n; ++i) {
    std::string id = "d" + std::to_string(i);
    lib.demos.emplace(id, make_demo(rng, id, d_img, d_txt));
  }
  return lib;
}

QuerySample make_query(Rng& rng, const std::string& id, int d_img, int d_txt) {
  QuerySample q;
  q.id = id;
  q.image_emb = Tensor(1, d_img);
  q.q_emb = Tensor(1, d_txt);
  for (int i = 0; i < d_img; ++i) q.image_emb.at(i) = rng.normal();
  for (int i = 0; i < d_txt; ++i) q.q_emb.at(i) = rng.normal();
  q.text_q = "query text " + id;
  q.ground_truth_r = "truth-" + id;
  return q;
}

}  // namespace

TEST_CASE("library save then load then save is a byte-level fixed point") {
  DemoLibrary lib = make_library(5);
  auto p1 = temp_file("lib_fp1.jsonl");
  auto p2 = temp_file("lib_fp2.jsonl");
  save_library(lib, p1.string());
  DemoLibrary loaded = load_library(p1.string());
  save_library(loaded, p2.string());
  CHECK(read_text(p1) == read_text(p2));
  CHECK(loaded.size() == 5);
  CHECK(loaded.d_img == 4);
  CHECK(loaded.d_txt == 3);
  CHECK(loaded.instruction == lib.instruction);
  CHECK(loaded.instruction_emb.vec() == lib.instruction_emb.vec());
  CHECK(loaded.get("d2").text_r == "label-d2");
  CHECK(loaded.get("d2").meta.at("cluster") == "0");
  CHECK(loaded.get("d3").q_emb.vec() == lib.get("d3").q_emb.vec());
}

TEST_CASE("library ingestion errors name the offending line") {
  auto p = temp_file("lib_bad.jsonl");
  const std::string header = R"({"format":"taco-library","version":1,"instruction":""})";
  const std::string rec8 =
      R"({"id":"a","image_emb":[1,2,3,4,5,6,7,8],"text_q":"q","text_r":"r","q_emb":[1],"r_emb":[1],"qr_emb":[1]})";
  const std::string rec16 =
      R"({"id":"b","image_emb":[1,2],"text_q":"q","text_r":"r","q_emb":[1],"r_emb":[1],"qr_emb":[1]})";

  write_text(p, "");
  CHECK_THROWS_WITH_AS(load_library(p.string()),
                       doctest::Contains("is empty"), ValidationError);

  write_text(p, header + "\n");
  CHECK_THROWS_WITH_AS(load_library(p.string()),
                       doctest::Contains("empty library"), ValidationError);

  write_text(p, header + "\n" + rec8 + "\n" + rec16 + "\n");
  CHECK_THROWS_WITH_AS(load_library(p.string()),
                       doctest::Contains("line 3"), ValidationError);

  write_text(p, header + "\n" + rec8 + "\n" + rec8 + "\n");
  CHECK_THROWS_WITH_AS(load_library(p.string()),
                       doctest::Contains("duplicate id"), ValidationError);

  write_text(p, header + "\n{not json\n");
  CHECK_THROWS_WITH_AS(load_library(p.string()),
                       doctest::Contains("malformed record"), ValidationError);

  write_text(p, R"({"format":"taco-dataset","version":1})" "\n" + rec8 + "\n");
  CHECK_THROWS_WITH_AS(load_library(p.string()),
                       doctest::Contains("expected 'taco-library'"), ValidationError);

  std::string nonfinite = rec8;
  nonfinite.replace(nonfinite.find("[1,2,3"), 6, "[null,2,3");
  write_text(p, header + "\n" + nonfinite + "\n");
  CHECK_THROWS_AS(load_library(p.string()), ValidationError);
}

TEST_CASE("assemble_prompt renders every instruction position") {
  DemoLibrary lib = make_library(2);
  Rng rng(7);
  IclSequence seq;
  seq.instruction = "INST";
  seq.icd_ids = {"d0", "d1"};
  seq.query = make_query(rng, "q0", 4, 3);

  std::string icds =
      "Query: what is in image d0\nResponse: label-d0\n"
      "Query: what is in image d1\nResponse: label-d1\n";
  std::string qblock = "Query: query text q0\nResponse:";

  CHECK(assemble_prompt(seq, lib, InstPosition::beginning) == "INST\n" + icds + qblock);
  CHECK(assemble_prompt(seq, lib, InstPosition::middle) == icds + "INST\n" + qblock);
  CHECK(assemble_prompt(seq, lib, InstPosition::end) == icds + qblock + "\nINST");

  IclSequence zero_shot = seq;
  zero_shot.icd_ids.clear();
  CHECK(assemble_prompt(zero_shot, lib, InstPosition::beginning) == "INST\n" + qblock);

  IclSequence bad = seq;
  bad.icd_ids = {"d0", "missing"};
  CHECK_THROWS_WITH_AS(assemble_prompt(bad, lib, InstPosition::beginning),
                       doctest::Contains("missing"), ValidationError);

  IclSequence dup = seq;
  dup.icd_ids = {"d0", "d0"};
  CHECK_THROWS_WITH_AS(assemble_prompt(dup, lib, InstPosition::beginning),
                       doctest::Contains("duplicate"), ValidationError);
}

TEST_CASE("assemble_prompt is injective on delimiter-free inputs") {
  // Texts drawn from [a-z ] contain neither "Query:" nor newlines, so the
  // rendered prompt must determine (instruction, ICD texts, query text).
  Rng rng(31);
  auto word = [&rng]() {
    int len = 1 + rng.uniform_int(5);
    std::string s;
    for (int i = 0; i < len; ++i) s += static_cast<char>('a' + rng.uniform_int(26));
    return s;
  };

  std::set<std::string> tuples;
  std::set<std::string> prompts;
  for (int trial = 0; trial < 200; ++trial) {
    DemoLibrary lib;
    lib.d_img = 1;
    lib.d_txt = 1;
    int n = rng.uniform_int(3);
    std::string tuple_key;
    IclSequence seq;
    seq.instruction = word();
    tuple_key += seq.instruction + "|";
    for (int i = 0; i < n; ++i) {
      Demonstration d;
      d.id = "d" + std::to_string(i);
      d.image_emb = Tensor::row({0.0});
      d.q_emb = d.r_emb = d.qr_emb = Tensor::row({0.0});
      d.text_q = word();
      d.text_r = word();
      tuple_key += d.text_q + "|" + d.text_r + "|";
      lib.demos.emplace(d.id, d);
      seq.icd_ids.push_back(d.id);
    }
    seq.query.id = "q";
    seq.query.image_emb = Tensor::row({0.0});
    seq.query.q_emb = Tensor::row({0.0});
    seq.query.text_q = word();
    tuple_key += seq.query.text_q;

    std::string prompt = assemble_prompt(seq, lib, InstPosition::beginning);
    bool new_tuple = tuples.insert(tuple_key).second;
    bool new_prompt = prompts.insert(prompt).second;
    CHECK(new_tuple == new_prompt);
  }
}

TEST_CASE("permute_sequence obeys permutation laws") {
  DemoLibrary lib = make_library(3);
  Rng rng(9);
  IclSequence seq;
  seq.instruction = "I";
  seq.icd_ids = {"a", "b", "c"};
  seq.query = make_query(rng, "q", 4, 3);

  IclSequence same = permute_sequence(seq, {0, 1, 2});
  CHECK(same.icd_ids == seq.icd_ids);

  IclSequence rev = permute_sequence(seq, {2, 1, 0});
  CHECK(rev.icd_ids == std::vector<std::string>{"c", "b", "a"});

  // A permutation followed by its inverse restores the original order.
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<int> perm = rng.permutation(3);
    std::vector<int> inv(3);
    for (int i = 0; i < 3; ++i) inv[static_cast<size_t>(perm[static_cast<size_t>(i)])] = i;
    IclSequence round = permute_sequence(permute_sequence(seq, perm), inv);
    CHECK(round.icd_ids == seq.icd_ids);
  }

  // All 6 permutations of distinct ids give distinct orderings.
  std::set<std::vector<std::string>> orders;
  for (const auto& p : std::vector<std::vector<int>>{
           {0, 1, 2}, {0, 2, 1}, {1, 0, 2}, {1, 2, 0}, {2, 0, 1}, {2, 1, 0}})
    orders.insert(permute_sequence(seq, p).icd_ids);
  CHECK(orders.size() == 6);

  CHECK_THROWS_AS(permute_sequence(seq, {0, 1}), ValidationError);
  CHECK_THROWS_AS(permute_sequence(seq, {0, 0, 1}), ValidationError);
  CHECK_THROWS_AS(permute_sequence(seq, {0, 1, 3}), ValidationError);
}

TEST_CASE("dataset round-trips losslessly and rejects mixed shot counts") {
  Rng rng(13);
  SequenceDataset ds;
  ds.shot = 2;
  for (int i = 0; i < 3; ++i) {
    IclSequence seq;
    seq.instruction = "inst";
    seq.icd_ids = {"d" + std::to_string(i), "d" + std::to_string(i + 1)};
    seq.query = make_query(rng, "q" + std::to_string(i), 4, 3);
    ds.sequences.push_back(seq);
  }

  auto p = temp_file("dataset.jsonl");
  save_dataset(ds, p.string());
  SequenceDataset loaded = load_dataset(p.string());
  CHECK(loaded.shot == 2);
  REQUIRE(loaded.sequences.size() == 3);
  for (size_t i = 0; i < 3; ++i) {
    CHECK(loaded.sequences[i].icd_ids == ds.sequences[i].icd_ids);
    CHECK(loaded.sequences[i].instruction == "inst");
    CHECK(loaded.sequences[i].query.id == ds.sequences[i].query.id);
    CHECK(loaded.sequences[i].query.q_emb.vec() == ds.sequences[i].query.q_emb.vec());
    REQUIRE(loaded.sequences[i].query.ground_truth_r.has_value());
    CHECK(*loaded.sequences[i].query.ground_truth_r == *ds.sequences[i].query.ground_truth_r);
  }

  auto p2 = temp_file("dataset_fp2.jsonl");
  save_dataset(loaded, p2.string());
  CHECK(read_text(p) == read_text(p2));

  SequenceDataset mixed = ds;
  mixed.sequences[1].icd_ids.push_back("extra");
  CHECK_THROWS_AS(save_dataset(mixed, p.string()), ValidationError);

  SequenceDataset empty;
  empty.shot = 4;
  auto pe = temp_file("dataset_empty.jsonl");
  save_dataset(empty, pe.string());
  SequenceDataset eloaded = load_dataset(pe.string());
  CHECK(eloaded.sequences.empty());
  CHECK(eloaded.shot == 4);
}

TEST_CASE("query files round-trip with and without ground truth") {
  Rng rng(21);
  std::vector<QuerySample> qs;
  qs.push_back(make_query(rng, "q0", 4, 3));
  qs.push_back(make_query(rng, "q1", 4, 3));
  qs[1].ground_truth_r.reset();
  qs[1].meta["cluster"] = "2";

  auto p = temp_file("queries.jsonl");
  save_queries(qs, p.string());
  std::vector<QuerySample> loaded = load_queries(p.string());
  REQUIRE(loaded.size() == 2);
  CHECK(loaded[0].id == "q0");
  CHECK(loaded[0].ground_truth_r.has_value());
  CHECK(!loaded[1].ground_truth_r.has_value());
  CHECK(loaded[1].meta.at("cluster") == "2");
  CHECK(loaded[0].image_emb.vec() == qs[0].image_emb.vec());
}
