#pragma once

#include <cstdint>
#include <memory>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace rdg {

class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class IndexError : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

struct Shape {
  std::int64_t rows = 1;
  std::int64_t cols = 1;

  std::int64_t size() const { return rows * cols; }
  std::string str() const;
  friend bool operator==(const Shape&, const Shape&) = default;
};

// Dense 2-D array of doubles, row-major. Vectors are represented as 1xd or dx1.
class Tensor {
 public:
  Tensor(std::int64_t rows, std::int64_t cols, double fill = 0.0);
  Tensor(std::int64_t rows, std::int64_t cols, std::vector<double> data);
  explicit Tensor(Shape shape, double fill = 0.0) : Tensor(shape.rows, shape.cols, fill) {}

  static Tensor zeros(Shape shape) { return Tensor(shape, 0.0); }
  static Tensor ones(Shape shape) { return Tensor(shape, 1.0); }
  static Tensor identity(std::int64_t n);
  static Tensor scalar(double v) { return Tensor(1, 1, v); }
  static Tensor from_rows(std::initializer_list<std::initializer_list<double>> rows);

  std::int64_t rows() const { return rows_; }
  std::int64_t cols() const { return cols_; }
  Shape shape() const { return {rows_, cols_}; }
  std::int64_t size() const { return rows_ * cols_; }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }

  double& operator()(std::int64_t r, std::int64_t c) { return data_[static_cast<std::size_t>(r * cols_ + c)]; }
  double operator()(std::int64_t r, std::int64_t c) const {
    return data_[static_cast<std::size_t>(r * cols_ + c)];
  }
  double& at(std::int64_t r, std::int64_t c);
  double at(std::int64_t r, std::int64_t c) const;

  // Value of a 1x1 tensor.
  double item() const;

  bool all_finite() const;

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  std::int64_t rows_;
  std::int64_t cols_;
  std::vector<double> data_;
};

using TensorPtr = std::shared_ptr<const Tensor>;

inline TensorPtr share(Tensor t) { return std::make_shared<const Tensor>(std::move(t)); }

enum class UnaryFn { kTanh, kSigmoid, kNeg, kSquare };
enum class BinaryFn { kAdd, kSub, kHadamard };

const char* to_string(UnaryFn f);
const char* to_string(BinaryFn f);

Tensor matmul(const Tensor& a, const Tensor& b, bool transpose_a = false, bool transpose_b = false);
Tensor apply_unary(const Tensor& x, UnaryFn f);
Tensor apply_binary(const Tensor& a, const Tensor& b, BinaryFn f);

// d(loss)/d(x) for y = f(x) given upstream d(loss)/d(y). tanh and sigmoid read `output`,
// square reads `input`, neg reads neither.
Tensor unary_backward(UnaryFn f, const Tensor& upstream, const Tensor& input, const Tensor& output);

Tensor concat_rows(const Tensor& a, const Tensor& b);
Tensor slice_rows(const Tensor& x, std::int64_t begin, std::int64_t count);
Tensor transpose(const Tensor& x);
Tensor reshape(const Tensor& x, Shape shape);
Tensor scale(const Tensor& x, double s);
double sum(const Tensor& x);

struct XentResult {
  double loss;
  Tensor grad_logits;
};

// Softmax cross-entropy over 1xC logits, stabilized by max-subtraction.
XentResult softmax_cross_entropy(const Tensor& logits, std::int64_t label);

Tensor gather_row(const Tensor& table, std::int64_t index);

// Interprets a 1x1 tensor as an integer index; rejects values farther than 1e-9 from an integer.
std::int64_t to_index(const Tensor& scalar);

// Entries uniform in [-scale, +scale].
Tensor random_init(Shape shape, double scale, std::mt19937_64& rng);

double max_abs_diff(const Tensor& a, const Tensor& b);

// A rows x cols matrix that stores only explicitly set rows; every other row is zero.
// Rows are shared, so copies are cheap. Used for embedding gradients (scatter-add) and
// for the state tables of the iterative models.
class SparseRows {
 public:
  SparseRows(std::int64_t rows, std::int64_t cols) : rows_(rows), cols_(cols) {}

  std::int64_t rows() const { return rows_; }
  std::int64_t cols() const { return cols_; }
  Shape shape() const { return {rows_, cols_}; }
  std::size_t stored_rows() const { return entries_.size(); }

  // Row `index` as a 1 x cols tensor (zeros when unset).
  Tensor row(std::int64_t index) const;
  bool has_row(std::int64_t index) const;

  // Returns a copy with row `index` replaced by `value` (1 x cols).
  SparseRows with_row(std::int64_t index, TensorPtr value) const;
  SparseRows without_row(std::int64_t index) const;

  // Returns a copy with `value` added into row `index`.
  SparseRows scatter_add(std::int64_t index, const Tensor& value) const;

  Tensor to_dense() const;

  const std::vector<std::pair<std::int64_t, TensorPtr>>& entries() const { return entries_; }

  friend SparseRows add(const SparseRows& a, const SparseRows& b);

 private:
  void check_index(std::int64_t index) const;
  void check_row(const Tensor& value) const;

  std::int64_t rows_;
  std::int64_t cols_;
  // Sorted by row index.
  std::vector<std::pair<std::int64_t, TensorPtr>> entries_;
};

SparseRows add(const SparseRows& a, const SparseRows& b);
Tensor add(const Tensor& dense, const SparseRows& sparse);

}  // namespace rdg
