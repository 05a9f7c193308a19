#include "taco/tensor.hpp"

#include <cmath>
#include <stdexcept>
#include <utility>

namespace taco::num {

Tensor::Tensor(int rows, int cols) : rows_(rows), cols_(cols) {
  if (rows < 0 || cols < 0) throw std::invalid_argument("tensor: negative dimension");
  data_.assign(static_cast<size_t>(rows) * cols, 0.0);
}

Tensor::Tensor(int rows, int cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (numel() != static_cast<std::int64_t>(data_.size()))
    throw std::invalid_argument("tensor: data size does not match shape");
}

Tensor Tensor::zeros(int rows, int cols) { return Tensor(rows, cols); }

Tensor Tensor::full(int rows, int cols, double value) {
  Tensor t(rows, cols);
  for (auto& x : t.data_) x = value;
  return t;
}

Tensor Tensor::scalar(double value) { return Tensor(1, 1, {value}); }

Tensor Tensor::row(std::vector<double> values) {
  int n = static_cast<int>(values.size());
  return Tensor(1, n, std::move(values));
}

Tensor Tensor::identity(int n) {
  Tensor t(n, n);
  for (int i = 0; i < n; ++i) t.at(i, i) = 1.0;
  return t;
}

double& Tensor::at(int i, int j) {
  return data_[static_cast<size_t>(i) * cols_ + j];
}

double Tensor::at(int i, int j) const {
  return data_[static_cast<size_t>(i) * cols_ + j];
}

double& Tensor::at(int i) { return data_[static_cast<size_t>(i)]; }

double Tensor::at(int i) const { return data_[static_cast<size_t>(i)]; }

double Tensor::scalar_value() const {
  if (rows_ != 1 || cols_ != 1)
    throw std::invalid_argument("tensor: scalar_value on shape " + shape_str());
  return data_[0];
}

std::string Tensor::shape_str() const {
  return "[" + std::to_string(rows_) + "x" + std::to_string(cols_) + "]";
}

bool Tensor::all_finite() const {
  for (double x : data_)
    if (!std::isfinite(x)) return false;
  return true;
}

void matmul_acc(const double* a, const double* b, double* c, int m, int k, int n) {
  // Register-blocked over the output columns; the inner loops vectorize.
  constexpr int kBlock = 16;
  int j0 = 0;
  for (; j0 + kBlock <= n; j0 += kBlock) {
    for (int i = 0; i < m; ++i) {
      const double* ai = a + static_cast<size_t>(i) * k;
      double acc[kBlock];
      double* ci = c + static_cast<size_t>(i) * n + j0;
      for (int j = 0; j < kBlock; ++j) acc[j] = ci[j];
      for (int p = 0; p < k; ++p) {
        const double av = ai[p];
        const double* bp = b + static_cast<size_t>(p) * n + j0;
        for (int j = 0; j < kBlock; ++j) acc[j] += av * bp[j];
      }
      for (int j = 0; j < kBlock; ++j) ci[j] = acc[j];
    }
  }
  if (j0 < n) {
    const int rem = n - j0;
    for (int i = 0; i < m; ++i) {
      const double* ai = a + static_cast<size_t>(i) * k;
      double* ci = c + static_cast<size_t>(i) * n + j0;
      for (int p = 0; p < k; ++p) {
        const double av = ai[p];
        const double* bp = b + static_cast<size_t>(p) * n + j0;
        for (int j = 0; j < rem; ++j) ci[j] += av * bp[j];
      }
    }
  }
}

void matmul_nt_acc(const double* a, const double* b, double* c, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const double* ai = a + static_cast<size_t>(i) * k;
    double* ci = c + static_cast<size_t>(i) * n;
    for (int j = 0; j < n; ++j) {
      const double* bj = b + static_cast<size_t>(j) * k;
      double acc = 0.0;
      for (int p = 0; p < k; ++p) acc += ai[p] * bj[p];
      ci[j] += acc;
    }
  }
}

void matmul_tn_acc(const double* a, const double* b, double* c, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const double* ai = a + static_cast<size_t>(i) * k;
    const double* bi = b + static_cast<size_t>(i) * n;
    for (int p = 0; p < k; ++p) {
      const double av = ai[p];
      double* cp = c + static_cast<size_t>(p) * n;
      for (int j = 0; j < n; ++j) cp[j] += av * bi[j];
    }
  }
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.rows())
    throw std::invalid_argument("matmul: inner dimensions " + a.shape_str() + " vs " +
                                b.shape_str());
  Tensor c(a.rows(), b.cols());
  matmul_acc(a.data(), b.data(), c.data(), a.rows(), a.cols(), b.cols());
  return c;
}

Tensor transpose(const Tensor& t) {
  Tensor out(t.cols(), t.rows());
  for (int i = 0; i < t.rows(); ++i)
    for (int j = 0; j < t.cols(); ++j) out.at(j, i) = t.at(i, j);
  return out;
}

void ensure_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (!a.same_shape(b))
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + a.shape_str() +
                                " vs " + b.shape_str());
}

}  // namespace taco::num
