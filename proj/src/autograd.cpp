#include "taco/autograd.hpp"

#include <cmath>
#include <limits>
#include <numbers>
#include <stdexcept>
#include <unordered_set>
#include <utility>

namespace taco::num {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

bool any_grad(const std::vector<Var>& parents) {
  for (const auto& p : parents)
    if (p->requires_grad) return true;
  return false;
}

Var make_node(Tensor value, std::vector<Var> parents, const char* op,
              std::function<void(const Tensor&, GradSink&)> backward) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->parents = std::move(parents);
  n->op = op;
  n->requires_grad = any_grad(n->parents);
  if (n->requires_grad) n->backward = std::move(backward);
  return n;
}

void check_support(const Tensor& x, const Tensor& support, const char* op) {
  ensure_same_shape(x, support, op);
  for (int i = 0; i < support.numel(); ++i) {
    double s = support.at(i);
    if (s != 0.0 && s != 1.0)
      throw std::invalid_argument(std::string(op) + ": support entries must be 0 or 1");
  }
}

// Row-wise softmax over the support; returns probabilities (zeros off
// support). Throws on rows whose support is empty.
Tensor softmax_rows(const Tensor& x, const Tensor& support, const char* op) {
  Tensor out(x.rows(), x.cols());
  for (int i = 0; i < x.rows(); ++i) {
    double hi = kNegInf;
    for (int j = 0; j < x.cols(); ++j)
      if (support.at(i, j) == 1.0 && x.at(i, j) > hi) hi = x.at(i, j);
    if (hi == kNegInf)
      throw std::domain_error(std::string(op) + ": degenerate row " + std::to_string(i) +
                              " has no unmasked entries");
    double z = 0.0;
    for (int j = 0; j < x.cols(); ++j)
      if (support.at(i, j) == 1.0) z += std::exp(x.at(i, j) - hi);
    for (int j = 0; j < x.cols(); ++j)
      if (support.at(i, j) == 1.0) out.at(i, j) = std::exp(x.at(i, j) - hi) / z;
  }
  return out;
}

}  // namespace

void GradSink::add(const Node* node, const Tensor& g) {
  auto it = grads_.find(node);
  if (it == grads_.end()) {
    grads_.emplace(node, g);
    return;
  }
  ensure_same_shape(it->second, g, "grad accumulate");
  double* dst = it->second.data();
  const double* src = g.data();
  for (std::int64_t i = 0; i < g.numel(); ++i) dst[i] += src[i];
}

const Tensor* GradSink::find(const Node* node) const {
  auto it = grads_.find(node);
  return it == grads_.end() ? nullptr : &it->second;
}

Tensor GradSink::take(const Node* node) {
  auto it = grads_.find(node);
  if (it == grads_.end()) return Tensor(node->value.rows(), node->value.cols());
  return std::move(it->second);
}

Var constant(Tensor value) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->op = "constant";
  return n;
}

Var leaf(Tensor value) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->op = "leaf";
  n->requires_grad = true;
  return n;
}

GradSink backward(const Var& root) {
  if (!root) throw std::invalid_argument("backward: null root");
  if (root->value.rows() != 1 || root->value.cols() != 1)
    throw std::invalid_argument("backward: root must be a 1x1 scalar, got " +
                                root->value.shape_str());
  GradSink sink;
  if (!root->requires_grad) return sink;

  // Iterative post-order DFS over grad-requiring nodes.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, size_t>> stack;
  stack.emplace_back(root.get(), 0);
  seen.insert(root.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* parent = node->parents[next++].get();
      if (parent->requires_grad && seen.insert(parent).second)
        stack.emplace_back(parent, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  sink.add(root.get(), Tensor::scalar(1.0));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* node = *it;
    ++sink.visited;
    if (!node->backward) continue;  // leaves keep their accumulated gradient
    const Tensor* gout = sink.find(node);
    if (gout == nullptr) continue;  // unreachable from the root's value path
    node->backward(*gout, sink);
  }
  return sink;
}

Var add(const Var& a, const Var& b) {
  ensure_same_shape(a->value, b->value, "add");
  Tensor v = a->value;
  {
    double* dst = v.data();
    const double* src = b->value.data();
    for (std::int64_t i = 0; i < v.numel(); ++i) dst[i] += src[i];
  }
  return make_node(std::move(v), {a, b}, "add", [a, b](const Tensor& g, GradSink& sink) {
    if (a->requires_grad) sink.add(a.get(), g);
    if (b->requires_grad) sink.add(b.get(), g);
  });
}

Var sub(const Var& a, const Var& b) {
  ensure_same_shape(a->value, b->value, "sub");
  Tensor v = a->value;
  {
    double* dst = v.data();
    const double* src = b->value.data();
    for (std::int64_t i = 0; i < v.numel(); ++i) dst[i] -= src[i];
  }
  return make_node(std::move(v), {a, b}, "sub", [a, b](const Tensor& g, GradSink& sink) {
    if (a->requires_grad) sink.add(a.get(), g);
    if (b->requires_grad) {
      Tensor gb = g;
      double* dst = gb.data();
      for (std::int64_t i = 0; i < gb.numel(); ++i) dst[i] = -dst[i];
      sink.add(b.get(), gb);
    }
  });
}

Var mul(const Var& a, const Var& b) {
  ensure_same_shape(a->value, b->value, "mul");
  Tensor v = a->value;
  {
    double* dst = v.data();
    const double* src = b->value.data();
    for (std::int64_t i = 0; i < v.numel(); ++i) dst[i] *= src[i];
  }
  return make_node(std::move(v), {a, b}, "mul", [a, b](const Tensor& g, GradSink& sink) {
    if (a->requires_grad) {
      Tensor ga = g;
      double* dst = ga.data();
      const double* src = b->value.data();
      for (std::int64_t i = 0; i < ga.numel(); ++i) dst[i] *= src[i];
      sink.add(a.get(), ga);
    }
    if (b->requires_grad) {
      Tensor gb = g;
      double* dst = gb.data();
      const double* src = a->value.data();
      for (std::int64_t i = 0; i < gb.numel(); ++i) dst[i] *= src[i];
      sink.add(b.get(), gb);
    }
  });
}

Var scale(const Var& a, double c) {
  Tensor v = a->value;
  for (std::int64_t i = 0; i < v.numel(); ++i) v.at(static_cast<int>(i)) *= c;
  return make_node(std::move(v), {a}, "scale", [a, c](const Tensor& g, GradSink& sink) {
    Tensor ga = g;
    double* dst = ga.data();
    for (std::int64_t i = 0; i < ga.numel(); ++i) dst[i] *= c;
    sink.add(a.get(), ga);
  });
}

Var neg(const Var& a) { return scale(a, -1.0); }

Var add_rowvec(const Var& x, const Var& v) {
  if (v->value.rows() != 1 || v->value.cols() != x->value.cols())
    throw std::invalid_argument("add_rowvec: need 1x" + std::to_string(x->value.cols()) +
                                ", got " + v->value.shape_str());
  Tensor out = x->value;
  for (int i = 0; i < out.rows(); ++i)
    for (int j = 0; j < out.cols(); ++j) out.at(i, j) += v->value.at(0, j);
  return make_node(std::move(out), {x, v}, "add_rowvec",
                   [x, v](const Tensor& g, GradSink& sink) {
                     if (x->requires_grad) sink.add(x.get(), g);
                     if (v->requires_grad) {
                       Tensor gv(1, g.cols());
                       for (int i = 0; i < g.rows(); ++i)
                         for (int j = 0; j < g.cols(); ++j) gv.at(0, j) += g.at(i, j);
                       sink.add(v.get(), gv);
                     }
                   });
}

Var matmul(const Var& a, const Var& b) {
  Tensor v = num::matmul(a->value, b->value);
  return make_node(std::move(v), {a, b}, "matmul", [a, b](const Tensor& g, GradSink& sink) {
    const int m = a->value.rows(), k = a->value.cols(), n = b->value.cols();
    if (a->requires_grad) {
      Tensor ga(m, k);
      matmul_nt_acc(g.data(), b->value.data(), ga.data(), m, n, k);
      sink.add(a.get(), ga);
    }
    if (b->requires_grad) {
      Tensor gb(k, n);
      matmul_tn_acc(a->value.data(), g.data(), gb.data(), m, k, n);
      sink.add(b.get(), gb);
    }
  });
}

Var transpose(const Var& a) {
  return make_node(num::transpose(a->value), {a}, "transpose",
                   [a](const Tensor& g, GradSink& sink) { sink.add(a.get(), num::transpose(g)); });
}

Var slice_rows(const Var& x, int offset, int count) {
  const Tensor& v = x->value;
  if (offset < 0 || count < 0 || offset + count > v.rows())
    throw std::invalid_argument("slice_rows: range out of bounds");
  Tensor out(count, v.cols());
  for (int i = 0; i < count; ++i)
    for (int j = 0; j < v.cols(); ++j) out.at(i, j) = v.at(offset + i, j);
  return make_node(std::move(out), {x}, "slice_rows",
                   [x, offset, count](const Tensor& g, GradSink& sink) {
                     Tensor gx(x->value.rows(), x->value.cols());
                     for (int i = 0; i < count; ++i)
                       for (int j = 0; j < gx.cols(); ++j) gx.at(offset + i, j) = g.at(i, j);
                     sink.add(x.get(), gx);
                   });
}

Var slice_cols(const Var& x, int offset, int count) {
  const Tensor& v = x->value;
  if (offset < 0 || count < 0 || offset + count > v.cols())
    throw std::invalid_argument("slice_cols: range out of bounds");
  Tensor out(v.rows(), count);
  for (int i = 0; i < v.rows(); ++i)
    for (int j = 0; j < count; ++j) out.at(i, j) = v.at(i, offset + j);
  return make_node(std::move(out), {x}, "slice_cols",
                   [x, offset, count](const Tensor& g, GradSink& sink) {
                     Tensor gx(x->value.rows(), x->value.cols());
                     for (int i = 0; i < gx.rows(); ++i)
                       for (int j = 0; j < count; ++j) gx.at(i, offset + j) = g.at(i, j);
                     sink.add(x.get(), gx);
                   });
}

Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: no parts");
  int cols = parts[0]->value.cols();
  int rows = 0;
  for (const auto& p : parts) {
    if (p->value.cols() != cols)
      throw std::invalid_argument("concat_rows: column mismatch");
    rows += p->value.rows();
  }
  Tensor out(rows, cols);
  int r = 0;
  for (const auto& p : parts)
    for (int i = 0; i < p->value.rows(); ++i, ++r)
      for (int j = 0; j < cols; ++j) out.at(r, j) = p->value.at(i, j);
  return make_node(std::move(out), parts, "concat_rows",
                   [parts](const Tensor& g, GradSink& sink) {
                     int r = 0;
                     for (const auto& p : parts) {
                       int pr = p->value.rows();
                       if (p->requires_grad) {
                         Tensor gp(pr, g.cols());
                         for (int i = 0; i < pr; ++i)
                           for (int j = 0; j < g.cols(); ++j) gp.at(i, j) = g.at(r + i, j);
                         sink.add(p.get(), gp);
                       }
                       r += pr;
                     }
                   });
}

Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: no parts");
  int rows = parts[0]->value.rows();
  int cols = 0;
  for (const auto& p : parts) {
    if (p->value.rows() != rows)
      throw std::invalid_argument("concat_cols: row mismatch");
    cols += p->value.cols();
  }
  Tensor out(rows, cols);
  int c = 0;
  for (const auto& p : parts) {
    for (int i = 0; i < rows; ++i)
      for (int j = 0; j < p->value.cols(); ++j) out.at(i, c + j) = p->value.at(i, j);
    c += p->value.cols();
  }
  return make_node(std::move(out), parts, "concat_cols",
                   [parts](const Tensor& g, GradSink& sink) {
                     int c = 0;
                     for (const auto& p : parts) {
                       int pc = p->value.cols();
                       if (p->requires_grad) {
                         Tensor gp(g.rows(), pc);
                         for (int i = 0; i < g.rows(); ++i)
                           for (int j = 0; j < pc; ++j) gp.at(i, j) = g.at(i, c + j);
                         sink.add(p.get(), gp);
                       }
                       c += pc;
                     }
                   });
}

Var sigmoid(const Var& x) {
  Tensor v = x->value;
  for (std::int64_t i = 0; i < v.numel(); ++i) {
    double t = v.at(static_cast<int>(i));
    v.at(static_cast<int>(i)) = 1.0 / (1.0 + std::exp(-t));
  }
  Tensor out = v;
  return make_node(std::move(v), {x}, "sigmoid",
                   [x, out](const Tensor& g, GradSink& sink) {
                     Tensor gx = g;
                     double* dst = gx.data();
                     const double* s = out.data();
                     for (std::int64_t i = 0; i < gx.numel(); ++i)
                       dst[i] *= s[i] * (1.0 - s[i]);
                     sink.add(x.get(), gx);
                   });
}

Var gelu(const Var& x) {
  constexpr double inv_sqrt2 = 1.0 / std::numbers::sqrt2;
  Tensor v = x->value;
  for (std::int64_t i = 0; i < v.numel(); ++i) {
    double t = v.at(static_cast<int>(i));
    v.at(static_cast<int>(i)) = 0.5 * t * (1.0 + std::erf(t * inv_sqrt2));
  }
  return make_node(std::move(v), {x}, "gelu", [x](const Tensor& g, GradSink& sink) {
    constexpr double inv_sqrt2 = 1.0 / std::numbers::sqrt2;
    Tensor gx = g;
    double* dst = gx.data();
    const double* in = x->value.data();
    const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
    for (std::int64_t i = 0; i < gx.numel(); ++i) {
      double t = in[i];
      double cdf = 0.5 * (1.0 + std::erf(t * inv_sqrt2));
      double pdf = inv_sqrt_2pi * std::exp(-0.5 * t * t);
      dst[i] *= cdf + t * pdf;
    }
    sink.add(x.get(), gx);
  });
}

Var log_op(const Var& x) {
  Tensor v = x->value;
  for (std::int64_t i = 0; i < v.numel(); ++i) {
    double t = v.at(static_cast<int>(i));
    if (t <= 0.0) throw std::domain_error("log: non-positive input");
    v.at(static_cast<int>(i)) = std::log(t);
  }
  return make_node(std::move(v), {x}, "log", [x](const Tensor& g, GradSink& sink) {
    Tensor gx = g;
    double* dst = gx.data();
    const double* in = x->value.data();
    for (std::int64_t i = 0; i < gx.numel(); ++i) dst[i] /= in[i];
    sink.add(x.get(), gx);
  });
}

Var pow_const(const Var& x, double p) {
  bool int_exponent = p >= 0.0 && p == std::floor(p);
  Tensor v = x->value;
  for (std::int64_t i = 0; i < v.numel(); ++i) {
    double t = v.at(static_cast<int>(i));
    if (t <= 0.0 && !int_exponent)
      throw std::domain_error("pow_const: non-positive base with non-integer exponent");
    v.at(static_cast<int>(i)) = std::pow(t, p);
  }
  return make_node(std::move(v), {x}, "pow_const",
                   [x, p](const Tensor& g, GradSink& sink) {
                     Tensor gx = g;
                     double* dst = gx.data();
                     const double* in = x->value.data();
                     for (std::int64_t i = 0; i < gx.numel(); ++i)
                       dst[i] *= p * std::pow(in[i], p - 1.0);
                     sink.add(x.get(), gx);
                   });
}

Var minimum_const(const Var& x, double cap) {
  Tensor v = x->value;
  for (std::int64_t i = 0; i < v.numel(); ++i)
    v.at(static_cast<int>(i)) = std::min(v.at(static_cast<int>(i)), cap);
  return make_node(std::move(v), {x}, "minimum_const",
                   [x, cap](const Tensor& g, GradSink& sink) {
                     Tensor gx = g;
                     double* dst = gx.data();
                     const double* in = x->value.data();
                     for (std::int64_t i = 0; i < gx.numel(); ++i)
                       if (in[i] >= cap) dst[i] = 0.0;
                     sink.add(x.get(), gx);
                   });
}

Var sum(const Var& x) {
  double s = 0.0;
  for (std::int64_t i = 0; i < x->value.numel(); ++i) s += x->value.at(static_cast<int>(i));
  return make_node(Tensor::scalar(s), {x}, "sum", [x](const Tensor& g, GradSink& sink) {
    sink.add(x.get(), Tensor::full(x->value.rows(), x->value.cols(), g.scalar_value()));
  });
}

Var mean(const Var& x) {
  std::int64_t n = x->value.numel();
  if (n == 0) throw std::invalid_argument("mean: empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(n));
}

Var entry(const Var& x, int i, int j) {
  const Tensor& v = x->value;
  if (i < 0 || i >= v.rows() || j < 0 || j >= v.cols())
    throw std::invalid_argument("entry: index out of range");
  return make_node(Tensor::scalar(v.at(i, j)), {x}, "entry",
                   [x, i, j](const Tensor& g, GradSink& sink) {
                     Tensor gx(x->value.rows(), x->value.cols());
                     gx.at(i, j) = g.scalar_value();
                     sink.add(x.get(), gx);
                   });
}

Var cosine_sim(const Var& a, const Var& b) {
  ensure_same_shape(a->value, b->value, "cosine_sim");
  if (a->value.rows() != 1) throw std::invalid_argument("cosine_sim: expects 1xN rows");
  constexpr double kEps = 1e-12;
  const double* av = a->value.data();
  const double* bv = b->value.data();
  const std::int64_t n = a->value.numel();
  double dot = 0.0, na2 = 0.0, nb2 = 0.0;
  for (std::int64_t i = 0; i < n; ++i) {
    dot += av[i] * bv[i];
    na2 += av[i] * av[i];
    nb2 += bv[i] * bv[i];
  }
  const double na = std::max(std::sqrt(na2), kEps);
  const double nb = std::max(std::sqrt(nb2), kEps);
  const double c = dot / (na * nb);
  return make_node(Tensor::scalar(c), {a, b}, "cosine_sim",
                   [a, b, na, nb, c](const Tensor& g, GradSink& sink) {
                     const double gs = g.scalar_value();
                     const double* av = a->value.data();
                     const double* bv = b->value.data();
                     const std::int64_t n = a->value.numel();
                     if (a->requires_grad) {
                       Tensor ga(1, static_cast<int>(n));
                       for (std::int64_t i = 0; i < n; ++i)
                         ga.at(static_cast<int>(i)) =
                             gs * (bv[i] / (na * nb) - c * av[i] / (na * na));
                       sink.add(a.get(), ga);
                     }
                     if (b->requires_grad) {
                       Tensor gb(1, static_cast<int>(n));
                       for (std::int64_t i = 0; i < n; ++i)
                         gb.at(static_cast<int>(i)) =
                             gs * (av[i] / (na * nb) - c * bv[i] / (nb * nb));
                       sink.add(b.get(), gb);
                     }
                   });
}

Var masked_softmax(const Var& x, const Tensor& support) {
  check_support(x->value, support, "masked_softmax");
  Tensor probs = softmax_rows(x->value, support, "masked_softmax");
  Tensor out = probs;
  return make_node(std::move(out), {x}, "masked_softmax",
                   [x, probs, support](const Tensor& g, GradSink& sink) {
                     Tensor gx(g.rows(), g.cols());
                     for (int i = 0; i < g.rows(); ++i) {
                       double dot = 0.0;
                       for (int j = 0; j < g.cols(); ++j)
                         if (support.at(i, j) == 1.0) dot += probs.at(i, j) * g.at(i, j);
                       for (int j = 0; j < g.cols(); ++j)
                         if (support.at(i, j) == 1.0)
                           gx.at(i, j) = probs.at(i, j) * (g.at(i, j) - dot);
                     }
                     sink.add(x.get(), gx);
                   });
}

Var masked_logsumexp(const Var& x, const Tensor& support) {
  check_support(x->value, support, "masked_logsumexp");
  const Tensor& v = x->value;
  Tensor out(v.rows(), 1);
  Tensor probs = softmax_rows(v, support, "masked_logsumexp");
  for (int i = 0; i < v.rows(); ++i) {
    double hi = kNegInf;
    for (int j = 0; j < v.cols(); ++j)
      if (support.at(i, j) == 1.0 && v.at(i, j) > hi) hi = v.at(i, j);
    double z = 0.0;
    for (int j = 0; j < v.cols(); ++j)
      if (support.at(i, j) == 1.0) z += std::exp(v.at(i, j) - hi);
    out.at(i, 0) = hi + std::log(z);
  }
  return make_node(std::move(out), {x}, "masked_logsumexp",
                   [x, probs](const Tensor& g, GradSink& sink) {
                     Tensor gx(probs.rows(), probs.cols());
                     for (int i = 0; i < probs.rows(); ++i)
                       for (int j = 0; j < probs.cols(); ++j)
                         gx.at(i, j) = g.at(i, 0) * probs.at(i, j);
                     sink.add(x.get(), gx);
                   });
}

Var kl_uniform(const Var& p) {
  const Tensor& v = p->value;
  if (v.rows() != 1) throw std::invalid_argument("kl_uniform: expects a 1xN distribution");
  double total = 0.0;
  int support = 0;
  for (std::int64_t i = 0; i < v.numel(); ++i) {
    double pi = v.at(static_cast<int>(i));
    if (pi < 0.0) throw std::domain_error("kl_uniform: negative probability");
    total += pi;
    if (pi > 0.0) ++support;
  }
  if (std::abs(total - 1.0) > 1e-6)
    throw std::domain_error("kl_uniform: probabilities sum to " + std::to_string(total));
  if (support == 0) throw std::domain_error("kl_uniform: empty support");
  const double m = static_cast<double>(support);
  double kl = 0.0;
  for (std::int64_t i = 0; i < v.numel(); ++i) {
    double pi = v.at(static_cast<int>(i));
    if (pi > 0.0) kl += pi * std::log(pi * m);
  }
  return make_node(Tensor::scalar(kl), {p}, "kl_uniform",
                   [p, m](const Tensor& g, GradSink& sink) {
                     const double gs = g.scalar_value();
                     Tensor gp(1, p->value.cols());
                     for (int i = 0; i < p->value.cols(); ++i) {
                       double pi = p->value.at(0, i);
                       if (pi > 0.0) gp.at(0, i) = gs * (std::log(pi * m) + 1.0);
                     }
                     sink.add(p.get(), gp);
                   });
}

Var layer_norm(const Var& x, const Var& gain, const Var& bias, double eps) {
  const Tensor& v = x->value;
  const int C = v.cols();
  if (gain->value.rows() != 1 || gain->value.cols() != C ||
      bias->value.rows() != 1 || bias->value.cols() != C)
    throw std::invalid_argument("layer_norm: gain/bias must be 1x" + std::to_string(C));
  Tensor normed(v.rows(), C);   // (x - mu) / sigma, kept for the backward pass
  Tensor inv_sigma(v.rows(), 1);
  Tensor out(v.rows(), C);
  for (int i = 0; i < v.rows(); ++i) {
    double mu = 0.0;
    for (int j = 0; j < C; ++j) mu += v.at(i, j);
    mu /= C;
    double var = 0.0;
    for (int j = 0; j < C; ++j) {
      double d = v.at(i, j) - mu;
      var += d * d;
    }
    var /= C;
    double is = 1.0 / std::sqrt(var + eps);
    inv_sigma.at(i, 0) = is;
    for (int j = 0; j < C; ++j) {
      double y = (v.at(i, j) - mu) * is;
      normed.at(i, j) = y;
      out.at(i, j) = y * gain->value.at(0, j) + bias->value.at(0, j);
    }
  }
  return make_node(
      std::move(out), {x, gain, bias}, "layer_norm",
      [x, gain, bias, normed, inv_sigma](const Tensor& g, GradSink& sink) {
        const int R = g.rows(), C = g.cols();
        if (x->requires_grad) {
          Tensor gx(R, C);
          for (int i = 0; i < R; ++i) {
            double mean_dy = 0.0, mean_dyy = 0.0;
            for (int j = 0; j < C; ++j) {
              double dy = g.at(i, j) * gain->value.at(0, j);
              mean_dy += dy;
              mean_dyy += dy * normed.at(i, j);
            }
            mean_dy /= C;
            mean_dyy /= C;
            for (int j = 0; j < C; ++j) {
              double dy = g.at(i, j) * gain->value.at(0, j);
              gx.at(i, j) =
                  (dy - mean_dy - normed.at(i, j) * mean_dyy) * inv_sigma.at(i, 0);
            }
          }
          sink.add(x.get(), gx);
        }
        if (gain->requires_grad) {
          Tensor gg(1, C);
          for (int i = 0; i < R; ++i)
            for (int j = 0; j < C; ++j) gg.at(0, j) += g.at(i, j) * normed.at(i, j);
          sink.add(gain.get(), gg);
        }
        if (bias->requires_grad) {
          Tensor gb(1, C);
          for (int i = 0; i < R; ++i)
            for (int j = 0; j < C; ++j) gb.at(0, j) += g.at(i, j);
          sink.add(bias.get(), gb);
        }
      });
}

Tensor masked_softmax_value(const Tensor& logits) {
  Tensor support(logits.rows(), logits.cols());
  Tensor finite = logits;
  for (int i = 0; i < logits.rows(); ++i)
    for (int j = 0; j < logits.cols(); ++j) {
      double v = logits.at(i, j);
      if (v == kNegInf) {
        finite.at(i, j) = 0.0;
      } else if (!std::isfinite(v)) {
        throw std::domain_error("masked_softmax: non-finite entry that is not -inf");
      } else {
        support.at(i, j) = 1.0;
      }
    }
  return softmax_rows(finite, support, "masked_softmax");
}

double kl_uniform_value(const Tensor& p) {
  Tensor row = p.rows() == 1 ? p : num::transpose(p);
  return kl_uniform(constant(row))->value.scalar_value();
}

double cosine_sim_value(const Tensor& a, const Tensor& b) {
  return cosine_sim(constant(a), constant(b))->value.scalar_value();
}

Tensor layer_norm_value(const Tensor& x, const Tensor& gain, const Tensor& bias,
                        double eps) {
  return layer_norm(constant(x), constant(gain), constant(bias), eps)->value;
}

Var ParamSet::create(const std::string& name, Tensor init) {
  if (params_.count(name))
    throw std::invalid_argument("params: duplicate name '" + name + "'");
  Var v = leaf(std::move(init));
  params_.emplace(name, v);
  return v;
}

Var ParamSet::get(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end())
    throw std::invalid_argument("params: unknown name '" + name + "'");
  return it->second;
}

bool ParamSet::contains(const std::string& name) const { return params_.count(name) > 0; }

std::int64_t ParamSet::total_elements() const {
  std::int64_t n = 0;
  for (const auto& [name, v] : params_) n += v->value.numel();
  return n;
}

}  // namespace taco::num
