#include <cmath>
#include <limits>
#include <vector>

#include "doctest.h"
#include "taco/autograd.hpp"
#include "taco/gradcheck.hpp"
#include "taco/rng.hpp"
#include "taco/tensor.hpp"

using namespace taco::num;

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

Tensor random_tensor(Rng& rng, int r, int c, double scale = 1.0) {
  Tensor t(r, c);
  for (int i = 0; i < t.numel(); ++i) t.at(i) = rng.normal() * scale;
  return t;
}

}  // namespace

TEST_CASE("matmul matches hand-computed products") {
  Tensor a(2, 2, {1, 2, 3, 4});
  Tensor b(2, 1, {0, 1});
  Tensor c = matmul(a, b);
  CHECK(c.at(0, 0) == doctest::Approx(2.0));
  CHECK(c.at(1, 0) == doctest::Approx(4.0));

  Tensor i3 = Tensor::identity(3);
  Tensor x(3, 3, {1, 2, 3, 4, 5, 6, 7, 8, 9});
  Tensor xi = matmul(x, i3);
  for (int k = 0; k < 9; ++k) CHECK(xi.at(k) == x.at(k));

  CHECK_THROWS_AS(matmul(Tensor(2, 3), Tensor(2, 3)), std::invalid_argument);
}

TEST_CASE("matmul kernels agree with the naive triple loop on odd shapes") {
  Rng rng(7);
  for (auto [m, k, n] : {std::tuple{1, 1, 1}, {3, 5, 7}, {17, 2, 19}, {8, 64, 33}}) {
    Tensor a = random_tensor(rng, m, k);
    Tensor b = random_tensor(rng, k, n);
    Tensor fast = matmul(a, b);
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j) {
        double acc = 0.0;
        for (int p = 0; p < k; ++p) acc += a.at(i, p) * b.at(p, j);
        CHECK(fast.at(i, j) == doctest::Approx(acc).epsilon(1e-12));
      }
  }
}

TEST_CASE("rng reproduces the pinned mt19937_64 stream") {
  Rng rng(42);
  CHECK(rng.next_u64() == 13930160852258120406ull);
  CHECK(rng.next_u64() == 11788048577503494824ull);
  CHECK(rng.next_u64() == 13874630024467741450ull);

  Rng a(123), b(123);
  for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());
}

TEST_CASE("rng transforms stay in range and have sane moments") {
  Rng rng(1);
  double sum = 0.0, sum2 = 0.0;
  const int n = 20000;
  for (int i = 0; i < n; ++i) {
    double u = rng.uniform();
    CHECK(u >= 0.0);
    CHECK(u < 1.0);
    sum += u;
    sum2 += u * u;
  }
  CHECK(sum / n == doctest::Approx(0.5).epsilon(0.02));
  CHECK(sum2 / n == doctest::Approx(1.0 / 3.0).epsilon(0.03));

  double nsum = 0.0, nsum2 = 0.0;
  for (int i = 0; i < n; ++i) {
    double z = rng.normal();
    nsum += z;
    nsum2 += z * z;
  }
  CHECK(nsum / n == doctest::Approx(0.0).epsilon(0.05));
  CHECK(nsum2 / n == doctest::Approx(1.0).epsilon(0.05));
}

TEST_CASE("rng derive gives decorrelated but reproducible sub-streams") {
  Rng root(99);
  Rng s1 = root.derive("stage-a");
  Rng s2 = root.derive("stage-b");
  Rng s1_again = Rng(99).derive("stage-a");
  CHECK(s1.next_u64() == s1_again.next_u64());
  CHECK(Rng(99).derive("stage-a").next_u64() != s2.next_u64());
}

TEST_CASE("rng state round-trips through serialization") {
  Rng a(7);
  a.next_u64();
  a.normal();
  std::string s = a.state();
  Rng b(0);
  b.set_state(s);
  for (int i = 0; i < 10; ++i) CHECK(a.next_u64() == b.next_u64());
  CHECK_THROWS_AS(b.set_state("not a state"), std::invalid_argument);
}

TEST_CASE("rng permutation covers all indices") {
  Rng rng(5);
  auto p = rng.permutation(10);
  std::vector<bool> seen(10, false);
  for (int v : p) seen[static_cast<size_t>(v)] = true;
  for (bool s : seen) CHECK(s);
}

TEST_CASE("masked_softmax handles uniform, masked, and frozen rows") {
  Tensor uniform = masked_softmax_value(Tensor::row({1.0, 1.0, 1.0, 1.0}));
  for (int j = 0; j < 4; ++j) CHECK(uniform.at(j) == doctest::Approx(0.25).epsilon(1e-12));

  Tensor two = masked_softmax_value(Tensor::row({3.0, -kInf}));
  CHECK(two.at(0) == 1.0);
  CHECK(two.at(1) == 0.0);

  // Frozen against a 40-digit evaluation of exp(i)/sum(exp(1..3)).
  Tensor probs = masked_softmax_value(Tensor::row({1.0, 2.0, 3.0}));
  CHECK(probs.at(0) == doctest::Approx(0.09003057317038045799).epsilon(1e-14));
  CHECK(probs.at(1) == doctest::Approx(0.24472847105479765247).epsilon(1e-14));
  CHECK(probs.at(2) == doctest::Approx(0.66524095577482188952).epsilon(1e-14));

  CHECK_THROWS_AS(masked_softmax_value(Tensor::row({-kInf, -kInf})), std::domain_error);
}

TEST_CASE("masked_softmax rows sum to one and masked entries are exactly zero") {
  Rng rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    int cols = 2 + rng.uniform_int(6);
    Tensor logits = random_tensor(rng, 3, cols, 4.0);
    // Mask a random subset, keeping at least one entry per row.
    for (int i = 0; i < 3; ++i) {
      int keep = rng.uniform_int(cols);
      for (int j = 0; j < cols; ++j)
        if (j != keep && rng.uniform() < 0.4) logits.at(i, j) = -kInf;
    }
    Tensor probs = masked_softmax_value(logits);
    for (int i = 0; i < 3; ++i) {
      double total = 0.0;
      for (int j = 0; j < cols; ++j) {
        if (logits.at(i, j) == -kInf) CHECK(probs.at(i, j) == 0.0);
        total += probs.at(i, j);
      }
      CHECK(total == doctest::Approx(1.0).epsilon(1e-9));
    }
  }
}

TEST_CASE("layer_norm normalizes rows and respects gain and bias") {
  Tensor gain = Tensor::row({1.0, 1.0});
  Tensor bias = Tensor::row({0.0, 0.0});

  Tensor constant_row = layer_norm_value(Tensor::row({3.0, 3.0}), gain, bias);
  CHECK(constant_row.at(0) == doctest::Approx(0.0));
  CHECK(constant_row.at(1) == doctest::Approx(0.0));

  Tensor pm = layer_norm_value(Tensor::row({1.0, -1.0}), gain, bias, 1e-12);
  CHECK(pm.at(0) == doctest::Approx(1.0).epsilon(1e-9));
  CHECK(pm.at(1) == doctest::Approx(-1.0).epsilon(1e-9));

  Rng rng(3);
  Tensor x = random_tensor(rng, 4, 16, 2.0);
  Tensor out = layer_norm_value(x, Tensor::full(1, 16, 1.0), Tensor(1, 16), 1e-5);
  for (int i = 0; i < 4; ++i) {
    double mu = 0.0, var = 0.0;
    for (int j = 0; j < 16; ++j) mu += out.at(i, j);
    mu /= 16;
    for (int j = 0; j < 16; ++j) var += (out.at(i, j) - mu) * (out.at(i, j) - mu);
    var /= 16;
    CHECK(std::abs(mu) < 1e-9);
    CHECK(var == doctest::Approx(1.0).epsilon(1e-4));
  }
}

TEST_CASE("cosine_sim matches frozen value and endpoint cases") {
  CHECK(cosine_sim_value(Tensor::row({1, 0, 0}), Tensor::row({0, 1, 0})) ==
        doctest::Approx(0.0));
  CHECK(cosine_sim_value(Tensor::row({2, 5}), Tensor::row({2, 5})) ==
        doctest::Approx(1.0).epsilon(1e-12));
  // Frozen against 11 / (sqrt(5) * 5).
  CHECK(cosine_sim_value(Tensor::row({1, 2}), Tensor::row({3, 4})) ==
        doctest::Approx(0.98386991009990746642).epsilon(1e-14));
}

TEST_CASE("kl_uniform endpoint and frozen values") {
  CHECK(kl_uniform_value(Tensor::row({0.25, 0.25, 0.25, 0.25})) ==
        doctest::Approx(0.0));
  // Zeros mark non-support entries: a one-hot is uniform over its own
  // single-point support, so its divergence is exactly zero.
  CHECK(kl_uniform_value(Tensor::row({1.0, 0.0, 0.0, 0.0})) == 0.0);
  // A near-one-hot over four positive entries approaches log 4.
  CHECK(kl_uniform_value(Tensor::row({1.0 - 3e-12, 1e-12, 1e-12, 1e-12})) ==
        doctest::Approx(std::log(4.0)).epsilon(1e-9));
  // Frozen against a 40-digit evaluation.
  CHECK(kl_uniform_value(Tensor::row({0.7, 0.2, 0.1})) ==
        doctest::Approx(0.29679373612477238283).epsilon(1e-14));

  CHECK_THROWS_AS(kl_uniform_value(Tensor::row({0.5, -0.1, 0.6})), std::domain_error);
  CHECK_THROWS_AS(kl_uniform_value(Tensor::row({0.5, 0.4})), std::domain_error);
}

TEST_CASE("gradient of x squared at 3 matches central differences tightly") {
  ParamSet params;
  Var x = params.create("x", Tensor::scalar(3.0));
  auto report = grad_check([&] { return mul(x, x); }, params);
  CHECK(report.max_rel_err < 1e-9);

  GradSink sink = backward(mul(x, x));
  CHECK(sink.take(x.get()).scalar_value() == doctest::Approx(6.0));
}

TEST_CASE("every primitive passes a finite-difference check") {
  Rng rng(17);
  ParamSet params;
  Var a = params.create("a", random_tensor(rng, 3, 4));
  Var b = params.create("b", random_tensor(rng, 3, 4));
  Var w = params.create("w", random_tensor(rng, 4, 5));
  Var gain = params.create("gain", random_tensor(rng, 1, 4, 0.5));
  Var bias = params.create("bias", random_tensor(rng, 1, 4, 0.5));
  Var v = params.create("v", random_tensor(rng, 1, 5));

  Tensor support(3, 5);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 5; ++j) support.at(i, j) = (j <= i + 2) ? 1.0 : 0.0;

  auto build = [&] {
    Var h = matmul(add(a, mul(a, b)), w);            // 3x5
    h = add_rowvec(h, v);
    Var sm = masked_softmax(h, support);
    Var lse = masked_logsumexp(scale(h, 0.5), support);
    Var ln = layer_norm(sub(a, b), gain, bias);
    Var row0 = slice_rows(sm, 0, 1);
    Var kl = kl_uniform(row0);
    Var cs = cosine_sim(slice_rows(a, 1, 1), slice_rows(b, 1, 1));
    Var parts = concat_cols({slice_cols(ln, 0, 2), slice_cols(ln, 2, 2)});
    Var act = add(gelu(slice_rows(h, 0, 1)), sigmoid(slice_rows(h, 1, 1)));
    Var capped = minimum_const(h, 0.8);
    Var powed = pow_const(sigmoid(slice_rows(h, 2, 1)), -0.5);
    Var pieces = concat_rows({act, slice_rows(capped, 2, 1), powed});
    return add(add(add(sum(mul(sm, sm)), sum(lse)), add(kl, cs)),
               add(add(mean(parts), sum(pieces)), entry(h, 2, 3)));
  };
  auto report = grad_check(build, params);
  INFO("worst: " << report.worst_param << "[" << report.worst_index
                 << "] analytic=" << report.analytic << " numeric=" << report.numeric);
  CHECK(report.max_rel_err < 1e-6);
}

TEST_CASE("kl_uniform of a masked softmax row gradient checks below 1e-6") {
  ParamSet params;
  Var logits = params.create("logits", Tensor::row({0.3, -0.7, 1.1, 0.2}));
  Tensor support = Tensor::row({1.0, 1.0, 1.0, 0.0});
  auto build = [&] { return kl_uniform(masked_softmax(logits, support)); };
  auto report = grad_check(build, params);
  CHECK(report.max_rel_err < 1e-6);
}

TEST_CASE("log gradients flow and domain errors fire") {
  ParamSet params;
  Var x = params.create("x", Tensor::row({0.5, 2.0, 7.0}));
  auto report = grad_check([&] { return sum(log_op(x)); }, params);
  CHECK(report.max_rel_err < 1e-8);
  x->value.at(1) = -1.0;
  CHECK_THROWS_AS(log_op(x), std::domain_error);
}

TEST_CASE("backward visits each node exactly once on a diamond graph") {
  ParamSet params;
  Var x = params.create("x", Tensor::scalar(2.0));
  Var y = mul(x, x);        // 4
  Var z = add(y, y);        // 8; y feeds the sum twice
  GradSink sink = backward(z);
  // Nodes: x, y, z. The shared y must be processed once with accumulated grad.
  CHECK(sink.visited == 3);
  CHECK(sink.take(x.get()).scalar_value() == doctest::Approx(8.0));  // d(2x^2)/dx

  CHECK_THROWS_AS(backward(concat_cols({x, x})), std::invalid_argument);
}

TEST_CASE("constants do not accumulate gradients") {
  ParamSet params;
  Var x = params.create("x", Tensor::scalar(3.0));
  Var c = constant(Tensor::scalar(5.0));
  GradSink sink = backward(mul(x, c));
  CHECK(sink.take(x.get()).scalar_value() == doctest::Approx(5.0));
  CHECK(sink.find(c.get()) == nullptr);
}
