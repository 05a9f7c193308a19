#include <atomic>
#include <chrono>
#include <mutex>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include "doctest.h"
#include "httplib.h"
#include "json.hpp"
#include "taco/data.hpp"
#include "taco/errors.hpp"
#include "taco/remote.hpp"
#include "taco/tensor.hpp"

using namespace taco;
using namespace taco::remote;
using nlohmann::json;
using taco::num::Tensor;

namespace {

data::Demonstration make_demo(const std::string& id, const std::string& q,
                              const std::string& r) {
  data::Demonstration d;
  d.id = id;
  d.image_emb = Tensor::row({1.0, 2.0});
  d.q_emb = Tensor::row({0.5, 0.5});
  d.r_emb = Tensor::row({0.25, 0.25});
  d.qr_emb = Tensor::row({0.75, 0.75});
  d.text_q = q;
  d.text_r = r;
  return d;
}

data::QuerySample make_query(const std::string& id, const std::string& text) {
  data::QuerySample q;
  q.id = id;
  q.image_emb = Tensor::row({3.0, 4.0});
  q.q_emb = Tensor::row({1.0, 0.0});
  q.text_q = text;
  q.ground_truth_r = "a";
  return q;
}

// In-process stub service. Handlers record what they saw (guarded by a
// mutex); test assertions run on the main thread after the calls return.
struct StubServer {
  httplib::Server server;
  std::thread thread;
  int port = 0;

  std::mutex mu;
  int posts = 0;
  std::set<std::string> seen_req_ids;
  std::vector<std::string> seen_protocols;
  json last_body;
  int flaky_failures_left = 0;

  StubServer() {
    server.Post("/score", [this](const httplib::Request& req, httplib::Response& res) {
      json body = record(req);
      json reply;
      reply["req_id"] = body.at("req_id");
      if (body.at("kind").get<std::string>() == "label_probs")
        reply["label_probs"] = {{"a", 0.7}, {"b", 0.3}};
      else
        reply["loglik"] = 0.0;
      res.set_content(reply.dump(), "application/json");
    });
    server.Post("/flaky", [this](const httplib::Request& req, httplib::Response& res) {
      json body = record(req);
      {
        std::lock_guard<std::mutex> lock(mu);
        if (flaky_failures_left > 0) {
          flaky_failures_left -= 1;
          res.status = 500;
          return;
        }
      }
      res.set_content(json{{"req_id", body.at("req_id")}, {"loglik", -2.5}}.dump(),
                      "application/json");
    });
    server.Post("/slow", [this](const httplib::Request& req, httplib::Response& res) {
      json body = record(req);
      std::this_thread::sleep_for(std::chrono::milliseconds(400));
      res.set_content(json{{"req_id", body.at("req_id")}, {"loglik", 0.0}}.dump(),
                      "application/json");
    });
    server.Post("/garbage", [this](const httplib::Request& req, httplib::Response& res) {
      record(req);
      res.set_content("this is not json", "application/json");
    });
    server.Post("/wrong-id", [this](const httplib::Request& req, httplib::Response& res) {
      record(req);
      res.set_content(json{{"req_id", "req-0"}, {"loglik", 0.0}}.dump(), "application/json");
    });
    server.Post("/inf", [this](const httplib::Request& req, httplib::Response& res) {
      json body = record(req);
      // Out-of-range literal parses to infinity on the client.
      res.set_content(
          "{\"req_id\":\"" + body.at("req_id").get<std::string>() + "\",\"loglik\":1e999}",
          "application/json");
    });
    port = server.bind_to_any_port("127.0.0.1");
    REQUIRE(port > 0);
    thread = std::thread([this] { server.listen_after_bind(); });
    server.wait_until_ready();
  }

  ~StubServer() {
    server.stop();
    thread.join();
  }

  json record(const httplib::Request& req) {
    json body = json::parse(req.body);
    std::lock_guard<std::mutex> lock(mu);
    posts += 1;
    seen_req_ids.insert(body.at("req_id").get<std::string>());
    seen_protocols.push_back(body.value("protocol", ""));
    last_body = body;
    return body;
  }

  int post_count() {
    std::lock_guard<std::mutex> lock(mu);
    return posts;
  }

  EndpointConfig config(const std::string& path) {
    EndpointConfig cfg;
    cfg.host = "127.0.0.1";
    cfg.port = port;
    cfg.path = path;
    cfg.timeout_sec = 2.0;
    cfg.max_retries = 2;
    cfg.backoff_initial_sec = 0.01;
    return cfg;
  }
};

}  // namespace

TEST_CASE("endpoint_from_url parses the supported shapes") {
  EndpointConfig a = endpoint_from_url("http://10.0.0.5:9090/v1/score");
  CHECK(a.host == "10.0.0.5");
  CHECK(a.port == 9090);
  CHECK(a.path == "/v1/score");

  EndpointConfig b = endpoint_from_url("localhost:8000");
  CHECK(b.host == "localhost");
  CHECK(b.port == 8000);
  CHECK(b.path == "/score");

  CHECK_THROWS_AS(endpoint_from_url("localhost"), ValidationError);
  CHECK_THROWS_AS(endpoint_from_url("host:notaport/x"), ValidationError);
  CHECK_THROWS_AS(endpoint_from_url("https://host:1/x"), ValidationError);
  CHECK_THROWS_AS(endpoint_from_url("host:0/x"), ValidationError);
}

TEST_CASE("EndpointConfig validation") {
  EndpointConfig cfg;
  cfg.port = 8080;
  cfg.validate();

  EndpointConfig bad = cfg;
  bad.port = 0;
  CHECK_THROWS_AS(bad.validate(), ValidationError);
  bad = cfg;
  bad.timeout_sec = 0.0;
  CHECK_THROWS_AS(bad.validate(), ValidationError);
  bad = cfg;
  bad.max_retries = -1;
  CHECK_THROWS_AS(bad.validate(), ValidationError);
  bad = cfg;
  bad.path = "score";
  CHECK_THROWS_AS(bad.validate(), ValidationError);
  bad = cfg;
  bad.max_payload_bytes = 0;
  CHECK_THROWS_AS(bad.validate(), ValidationError);
}

TEST_CASE("remote scorer: echo round trip and request shape") {
  StubServer stub;
  RemoteScorer scorer(stub.config("/score"));
  std::vector<data::Demonstration> icds = {make_demo("d0", "first question", "yes"),
                                           make_demo("d1", "second question", "no")};
  data::QuerySample query = make_query("q0", "the query text");

  CHECK(scorer.loglik("instruct", icds, query, "yes") == 0.0);

  json body;
  {
    std::lock_guard<std::mutex> lock(stub.mu);
    body = stub.last_body;
  }
  CHECK(body.at("protocol").get<std::string>() == std::string(kProtocolVersion));
  CHECK(body.at("kind") == "loglik");
  CHECK(body.at("instruction") == "instruct");
  CHECK(body.at("query_text") == "the query text");
  CHECK(body.at("response_text") == "yes");
  REQUIRE(body.at("icd").size() == 2);
  CHECK(body.at("icd")[0].at("text_q") == "first question");
  CHECK(body.at("icd")[0].at("text_r") == "yes");
  CHECK(body.at("icd")[1].at("text_r") == "no");
  CHECK(body.at("req_id").get<std::string>().rfind("req-", 0) == 0);

  SUBCASE("label_probs round trip") {
    std::map<std::string, double> probs = scorer.label_probs("instruct", icds, query);
    REQUIRE(probs.size() == 2);
    CHECK(probs.at("a") == 0.7);
    CHECK(probs.at("b") == 0.3);
    std::lock_guard<std::mutex> lock(stub.mu);
    CHECK(stub.last_body.at("kind") == "label_probs");
    CHECK_FALSE(stub.last_body.contains("response_text"));
  }
}

TEST_CASE("remote scorer: identical requests hit the cache") {
  StubServer stub;
  RemoteScorer scorer(stub.config("/score"));
  std::vector<data::Demonstration> icds = {make_demo("d0", "q", "yes")};
  data::QuerySample query = make_query("q0", "query");

  double first = scorer.loglik("inst", icds, query, "yes");
  double second = scorer.loglik("inst", icds, query, "yes");
  CHECK(first == second);
  CHECK(stub.post_count() == 1);  // one network trip, one cache hit
  CHECK(scorer.calls() == 2);
  CHECK(scorer.cache_hits() == 1);

  // Different content is a different request.
  std::vector<data::Demonstration> changed = {make_demo("d0", "q", "no")};
  scorer.loglik("inst", changed, query, "yes");
  CHECK(stub.post_count() == 2);

  // Label requests are keyed separately from loglik requests.
  scorer.label_probs("inst", icds, query);
  scorer.label_probs("inst", icds, query);
  CHECK(stub.post_count() == 3);
  CHECK(scorer.cache_hits() == 2);
}

TEST_CASE("remote scorer: transient failures are retried with backoff") {
  StubServer stub;
  {
    std::lock_guard<std::mutex> lock(stub.mu);
    stub.flaky_failures_left = 2;
  }
  RemoteScorer scorer(stub.config("/flaky"));
  std::vector<data::Demonstration> icds = {make_demo("d0", "q", "yes")};
  double value = scorer.loglik("inst", icds, make_query("q0", "query"), "yes");
  CHECK(value == -2.5);
  CHECK(stub.post_count() == 3);  // two 500s, then success

  SUBCASE("exhausted retries fail with the request id in the message") {
    {
      std::lock_guard<std::mutex> lock(stub.mu);
      stub.flaky_failures_left = 10;
    }
    CHECK_THROWS_WITH_AS(
        scorer.loglik("inst", icds, make_query("q1", "other"), "yes"),
        doctest::Contains("req-"), RuntimeFailure);
  }
}

TEST_CASE("remote scorer: timeouts surface as runtime failures") {
  StubServer stub;
  EndpointConfig cfg = stub.config("/slow");
  cfg.timeout_sec = 0.1;  // handler sleeps 400ms
  cfg.max_retries = 0;
  RemoteScorer scorer(cfg);
  std::vector<data::Demonstration> icds = {make_demo("d0", "q", "yes")};
  auto start = std::chrono::steady_clock::now();
  CHECK_THROWS_WITH_AS(scorer.loglik("inst", icds, make_query("q0", "query"), "yes"),
                       doctest::Contains("failed after 1"), RuntimeFailure);
  double elapsed = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  CHECK(elapsed < 2.0);  // timed out rather than waiting for the handler
}

TEST_CASE("remote scorer: protocol violations are not retried") {
  StubServer stub;
  std::vector<data::Demonstration> icds = {make_demo("d0", "q", "yes")};
  data::QuerySample query = make_query("q0", "query");

  SUBCASE("malformed body") {
    RemoteScorer scorer(stub.config("/garbage"));
    CHECK_THROWS_WITH_AS(scorer.loglik("inst", icds, query, "yes"),
                         doctest::Contains("malformed"), RuntimeFailure);
    CHECK(stub.post_count() == 1);  // a 200 with garbage is not transient
  }

  SUBCASE("mismatched request id") {
    RemoteScorer scorer(stub.config("/wrong-id"));
    CHECK_THROWS_WITH_AS(scorer.loglik("inst", icds, query, "yes"),
                         doctest::Contains("does not match"), RuntimeFailure);
  }

  SUBCASE("non-finite loglik is a protocol error naming the request") {
    // The JSON layer already rejects out-of-range numbers, so an infinite
    // loglik surfaces as a malformed reply; either way it is a RuntimeFailure
    // carrying the request id.
    RemoteScorer scorer(stub.config("/inf"));
    CHECK_THROWS_WITH_AS(scorer.loglik("inst", icds, query, "yes"),
                         doctest::Contains("req-"), RuntimeFailure);
  }

  SUBCASE("oversized payload never reaches the network") {
    EndpointConfig cfg = stub.config("/score");
    cfg.max_payload_bytes = 16;
    RemoteScorer scorer(cfg);
    CHECK_THROWS_AS(scorer.loglik("inst", icds, query, "yes"), ValidationError);
    CHECK(stub.post_count() == 0);
  }
}

TEST_CASE("remote scorer: eight concurrent callers succeed with distinct ids") {
  StubServer stub;
  RemoteScorer scorer(stub.config("/score"));
  std::vector<std::thread> workers;
  std::vector<double> results(8, 1.0);
  std::atomic<int> failures{0};
  for (int i = 0; i < 8; ++i) {
    workers.emplace_back([&, i] {
      try {
        std::vector<data::Demonstration> icds = {make_demo("d0", "q", "yes")};
        data::QuerySample query = make_query("q" + std::to_string(i), "text " + std::to_string(i));
        results[static_cast<size_t>(i)] = scorer.loglik("inst", icds, query, "yes");
      } catch (...) {
        failures.fetch_add(1);
      }
    });
  }
  for (auto& w : workers) w.join();
  CHECK(failures.load() == 0);
  for (double r : results) CHECK(r == 0.0);
  std::lock_guard<std::mutex> lock(stub.mu);
  CHECK(stub.seen_req_ids.size() == 8);
  for (const auto& p : stub.seen_protocols) CHECK(p == std::string(kProtocolVersion));
}
