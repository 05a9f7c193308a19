#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace taco::num {

// Dense row-major tensor of doubles. Every quantity that flows through the
// model is rank 2 (scalars are 1x1, vectors are 1xN rows); rank-1 shapes are
// accepted at construction for convenience and normalized to a single row.
class Tensor {
 public:
  Tensor() = default;
  Tensor(int rows, int cols);  // zero-filled
  Tensor(int rows, int cols, std::vector<double> data);

  static Tensor zeros(int rows, int cols);
  static Tensor full(int rows, int cols, double value);
  static Tensor scalar(double value);
  static Tensor row(std::vector<double> values);
  static Tensor identity(int n);

  int rows() const { return rows_; }
  int cols() const { return cols_; }
  std::int64_t numel() const { return static_cast<std::int64_t>(rows_) * cols_; }

  double& at(int i, int j);
  double at(int i, int j) const;
  double& at(int i);        // flat index
  double at(int i) const;   // flat index
  double scalar_value() const;  // requires 1x1

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  const std::vector<double>& vec() const { return data_; }

  bool same_shape(const Tensor& other) const {
    return rows_ == other.rows_ && cols_ == other.cols_;
  }
  std::string shape_str() const;

  bool all_finite() const;

 private:
  int rows_ = 0;
  int cols_ = 0;
  std::vector<double> data_;
};

// c += a . b for row-major buffers; a is m x k, b is k x n, c is m x n.
// Buffers must not alias.
void matmul_acc(const double* a, const double* b, double* c, int m, int k, int n);
// c += a . b^T; a is m x k, b is n x k, c is m x n.
void matmul_nt_acc(const double* a, const double* b, double* c, int m, int k, int n);
// c += a^T . b; a is m x k, b is m x n, c is k x n.
void matmul_tn_acc(const double* a, const double* b, double* c, int m, int k, int n);

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& t);

// Throws std::invalid_argument naming `op` when shapes differ.
void ensure_same_shape(const Tensor& a, const Tensor& b, const char* op);

}  // namespace taco::num
