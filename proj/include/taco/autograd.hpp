#pragma once

#include <functional>
#include <map>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "taco/tensor.hpp"

namespace taco::num {

struct Node;
using Var = std::shared_ptr<Node>;

// Deposits gradients outside the nodes so several backward passes can run on
// graphs that share parameter leaves without touching each other.
class GradSink {
 public:
  void add(const Node* node, const Tensor& g);
  const Tensor* find(const Node* node) const;
  Tensor take(const Node* node);  // zero tensor of the node's shape if absent
  int visited = 0;                // nodes processed by the backward traversal

 private:
  std::unordered_map<const Node*, Tensor> grads_;
};

struct Node {
  Tensor value;
  std::vector<Var> parents;
  // Receives this node's output gradient and accumulates into the parents.
  std::function<void(const Tensor& gout, GradSink&)> backward;
  bool requires_grad = false;
  const char* op = "";
};

Var constant(Tensor value);
Var leaf(Tensor value);  // trainable: requires_grad = true

// Reverse-mode pass from a 1x1 scalar root; every reachable grad-requiring
// node is visited exactly once, in reverse topological order.
GradSink backward(const Var& root);

// --- primitive operations -------------------------------------------------

Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);          // elementwise
Var scale(const Var& a, double c);
Var neg(const Var& a);
Var add_rowvec(const Var& x, const Var& v);   // v is 1xC, broadcast over rows
Var matmul(const Var& a, const Var& b);
Var transpose(const Var& a);
Var slice_rows(const Var& x, int offset, int count);
Var slice_cols(const Var& x, int offset, int count);
Var concat_rows(const std::vector<Var>& parts);
Var concat_cols(const std::vector<Var>& parts);
Var sigmoid(const Var& x);
Var gelu(const Var& x);                       // exact erf form
Var log_op(const Var& x);                     // requires strictly positive input
Var pow_const(const Var& x, double p);        // x^p elementwise; x > 0 unless p is a non-negative integer
Var minimum_const(const Var& x, double cap);  // min(x, cap); zero grad at/above cap
Var sum(const Var& x);                        // 1x1
Var mean(const Var& x);                       // 1x1
Var entry(const Var& x, int i, int j);        // 1x1 view of one element

// Cosine similarity of two 1xN rows, eps-guarded against zero norms.
Var cosine_sim(const Var& a, const Var& b);

// Row-wise softmax restricted to `support` (entries exactly 0.0 or 1.0,
// constant). Non-support outputs are exactly 0. A row with empty support is a
// degenerate-row error.
Var masked_softmax(const Var& x, const Tensor& support);
// Row-wise log(sum(exp)) over the support; result is Rx1.
Var masked_logsumexp(const Var& x, const Tensor& support);

// KL(p || uniform over the support of p) for a 1xN distribution; 0*log(0)
// reads as 0. Rejects negative entries and totals off 1 by more than 1e-6.
Var kl_uniform(const Var& p);

// Row-wise layer normalization with learned gain/bias (both 1xC).
Var layer_norm(const Var& x, const Var& gain, const Var& bias, double eps = 1e-5);

// --- plain-tensor counterparts (no graph) ----------------------------------

// Support inferred from -inf entries; the only accepted non-finite value.
Tensor masked_softmax_value(const Tensor& logits);
double kl_uniform_value(const Tensor& p);
double cosine_sim_value(const Tensor& a, const Tensor& b);
Tensor layer_norm_value(const Tensor& x, const Tensor& gain, const Tensor& bias,
                        double eps = 1e-5);

// --- named trainable tensors ------------------------------------------------

class ParamSet {
 public:
  Var create(const std::string& name, Tensor init);
  Var get(const std::string& name) const;        // throws on unknown name
  bool contains(const std::string& name) const;
  const std::map<std::string, Var>& items() const { return params_; }
  std::int64_t total_elements() const;

 private:
  std::map<std::string, Var> params_;  // ordered: optimizer/checkpoint determinism
};

}  // namespace taco::num
