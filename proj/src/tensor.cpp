#include "rdg/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

namespace rdg {

namespace {

std::string shape_pair(const char* what, Shape a, Shape b) {
  std::ostringstream os;
  os << what << ": " << a.str() << " vs " << b.str();
  return os.str();
}

void require_same_shape(const char* what, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) throw DimensionError(shape_pair(what, a.shape(), b.shape()));
}

}  // namespace

std::string Shape::str() const {
  std::ostringstream os;
  if (rows < 0) {
    os << "?x" << cols;
  } else {
    os << rows << "x" << cols;
  }
  return os.str();
}

Tensor::Tensor(std::int64_t rows, std::int64_t cols, double fill) : rows_(rows), cols_(cols) {
  if (rows < 1 || cols < 1) throw DimensionError("tensor shape must be positive, got " + Shape{rows, cols}.str());
  data_.assign(static_cast<std::size_t>(rows * cols), fill);
}

Tensor::Tensor(std::int64_t rows, std::int64_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (rows < 1 || cols < 1) throw DimensionError("tensor shape must be positive, got " + Shape{rows, cols}.str());
  if (static_cast<std::int64_t>(data_.size()) != rows * cols) {
    throw DimensionError("tensor data length " + std::to_string(data_.size()) + " does not match shape " +
                         Shape{rows, cols}.str());
  }
}

Tensor Tensor::identity(std::int64_t n) {
  Tensor t(n, n);
  for (std::int64_t i = 0; i < n; ++i) t(i, i) = 1.0;
  return t;
}

Tensor Tensor::from_rows(std::initializer_list<std::initializer_list<double>> rows) {
  const auto r = static_cast<std::int64_t>(rows.size());
  const auto c = r == 0 ? 0 : static_cast<std::int64_t>(rows.begin()->size());
  std::vector<double> data;
  data.reserve(static_cast<std::size_t>(r * c));
  for (const auto& row : rows) {
    if (static_cast<std::int64_t>(row.size()) != c) throw DimensionError("ragged rows in tensor literal");
    data.insert(data.end(), row.begin(), row.end());
  }
  return Tensor(r, c, std::move(data));
}

double& Tensor::at(std::int64_t r, std::int64_t c) {
  if (r < 0 || r >= rows_ || c < 0 || c >= cols_) {
    throw IndexError("index (" + std::to_string(r) + "," + std::to_string(c) + ") outside " + shape().str());
  }
  return (*this)(r, c);
}

double Tensor::at(std::int64_t r, std::int64_t c) const { return const_cast<Tensor&>(*this).at(r, c); }

double Tensor::item() const {
  if (rows_ != 1 || cols_ != 1) throw DimensionError("item() needs a 1x1 tensor, got " + shape().str());
  return data_[0];
}

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

const char* to_string(UnaryFn f) {
  switch (f) {
    case UnaryFn::kTanh: return "tanh";
    case UnaryFn::kSigmoid: return "sigmoid";
    case UnaryFn::kNeg: return "neg";
    case UnaryFn::kSquare: return "square";
  }
  return "?";
}

const char* to_string(BinaryFn f) {
  switch (f) {
    case BinaryFn::kAdd: return "add";
    case BinaryFn::kSub: return "sub";
    case BinaryFn::kHadamard: return "hadamard";
  }
  return "?";
}

Tensor matmul(const Tensor& a, const Tensor& b, bool transpose_a, bool transpose_b) {
  const std::int64_t m = transpose_a ? a.cols() : a.rows();
  const std::int64_t k = transpose_a ? a.rows() : a.cols();
  const std::int64_t kb = transpose_b ? b.cols() : b.rows();
  const std::int64_t n = transpose_b ? b.rows() : b.cols();
  if (k != kb) {
    Shape sa = transpose_a ? Shape{a.cols(), a.rows()} : a.shape();
    Shape sb = transpose_b ? Shape{b.cols(), b.rows()} : b.shape();
    throw DimensionError(shape_pair("matmul inner dimensions differ", sa, sb));
  }
  Tensor out(m, n);
  auto o = out.data();
  const auto ad = a.data();
  const auto bd = b.data();
  const std::int64_t ac = a.cols();
  const std::int64_t bc = b.cols();
  for (std::int64_t i = 0; i < m; ++i) {
    double* orow = o.data() + i * n;
    for (std::int64_t p = 0; p < k; ++p) {
      const double av = transpose_a ? ad[static_cast<std::size_t>(p * ac + i)] : ad[static_cast<std::size_t>(i * ac + p)];
      if (av == 0.0) continue;
      if (!transpose_b) {
        const double* brow = bd.data() + p * bc;
        for (std::int64_t j = 0; j < n; ++j) orow[j] += av * brow[j];
      } else {
        for (std::int64_t j = 0; j < n; ++j) orow[j] += av * bd[static_cast<std::size_t>(j * bc + p)];
      }
    }
  }
  return out;
}

Tensor apply_unary(const Tensor& x, UnaryFn f) {
  Tensor out = x;
  for (double& v : out.data()) {
    switch (f) {
      case UnaryFn::kTanh: v = std::tanh(v); break;
      case UnaryFn::kSigmoid: v = 1.0 / (1.0 + std::exp(-v)); break;
      case UnaryFn::kNeg: v = -v; break;
      case UnaryFn::kSquare: v = v * v; break;
    }
  }
  return out;
}

Tensor unary_backward(UnaryFn f, const Tensor& upstream, const Tensor& input, const Tensor& output) {
  Tensor out = upstream;
  auto g = out.data();
  switch (f) {
    case UnaryFn::kTanh: {
      require_same_shape("tanh backward", upstream, output);
      auto y = output.data();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] *= 1.0 - y[i] * y[i];
      break;
    }
    case UnaryFn::kSigmoid: {
      require_same_shape("sigmoid backward", upstream, output);
      auto y = output.data();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] *= y[i] * (1.0 - y[i]);
      break;
    }
    case UnaryFn::kNeg:
      for (double& v : g) v = -v;
      break;
    case UnaryFn::kSquare: {
      require_same_shape("square backward", upstream, input);
      auto x = input.data();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] *= 2.0 * x[i];
      break;
    }
  }
  return out;
}

Tensor apply_binary(const Tensor& a, const Tensor& b, BinaryFn f) {
  require_same_shape(to_string(f), a, b);
  Tensor out = a;
  auto o = out.data();
  auto bd = b.data();
  switch (f) {
    case BinaryFn::kAdd:
      for (std::size_t i = 0; i < o.size(); ++i) o[i] += bd[i];
      break;
    case BinaryFn::kSub:
      for (std::size_t i = 0; i < o.size(); ++i) o[i] -= bd[i];
      break;
    case BinaryFn::kHadamard:
      for (std::size_t i = 0; i < o.size(); ++i) o[i] *= bd[i];
      break;
  }
  return out;
}

Tensor concat_rows(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.cols()) throw DimensionError(shape_pair("concat_rows column mismatch", a.shape(), b.shape()));
  std::vector<double> data;
  data.reserve(static_cast<std::size_t>(a.size() + b.size()));
  data.insert(data.end(), a.data().begin(), a.data().end());
  data.insert(data.end(), b.data().begin(), b.data().end());
  return Tensor(a.rows() + b.rows(), a.cols(), std::move(data));
}

Tensor slice_rows(const Tensor& x, std::int64_t begin, std::int64_t count) {
  if (begin < 0 || count < 1 || begin + count > x.rows()) {
    throw IndexError("slice_rows [" + std::to_string(begin) + ", +" + std::to_string(count) + ") outside " +
                     x.shape().str());
  }
  auto d = x.data();
  std::vector<double> data(d.begin() + begin * x.cols(), d.begin() + (begin + count) * x.cols());
  return Tensor(count, x.cols(), std::move(data));
}

Tensor transpose(const Tensor& x) {
  Tensor out(x.cols(), x.rows());
  for (std::int64_t r = 0; r < x.rows(); ++r) {
    for (std::int64_t c = 0; c < x.cols(); ++c) out(c, r) = x(r, c);
  }
  return out;
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape.size() != x.size() || shape.rows < 1 || shape.cols < 1) {
    throw DimensionError(shape_pair("reshape changes element count", x.shape(), shape));
  }
  return Tensor(shape.rows, shape.cols, std::vector<double>(x.data().begin(), x.data().end()));
}

Tensor scale(const Tensor& x, double s) {
  Tensor out = x;
  for (double& v : out.data()) v *= s;
  return out;
}

double sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  return s;
}

XentResult softmax_cross_entropy(const Tensor& logits, std::int64_t label) {
  if (logits.rows() != 1) throw DimensionError("softmax_cross_entropy expects 1xC logits, got " + logits.shape().str());
  if (label < 0 || label >= logits.cols()) {
    throw IndexError("label " + std::to_string(label) + " outside [0, " + std::to_string(logits.cols()) + ")");
  }
  auto z = logits.data();
  const double mx = *std::max_element(z.begin(), z.end());
  Tensor grad(1, logits.cols());
  auto g = grad.data();
  double denom = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    g[i] = std::exp(z[i] - mx);
    denom += g[i];
  }
  for (double& v : g) v /= denom;
  const double loss = std::log(denom) - (z[static_cast<std::size_t>(label)] - mx);
  g[static_cast<std::size_t>(label)] -= 1.0;
  return {loss, std::move(grad)};
}

Tensor gather_row(const Tensor& table, std::int64_t index) {
  if (index < 0 || index >= table.rows()) {
    throw IndexError("row " + std::to_string(index) + " outside table " + table.shape().str());
  }
  return slice_rows(table, index, 1);
}

std::int64_t to_index(const Tensor& scalar) {
  const double v = scalar.item();
  const double r = std::round(v);
  if (!std::isfinite(v) || std::abs(v - r) >= 1e-9) {
    throw IndexError("value " + std::to_string(v) + " is not an integer index");
  }
  return static_cast<std::int64_t>(r);
}

Tensor random_init(Shape shape, double scale, std::mt19937_64& rng) {
  if (!(scale > 0.0)) throw std::invalid_argument("random_init scale must be positive");
  std::uniform_real_distribution<double> dist(-scale, scale);
  Tensor out(shape);
  for (double& v : out.data()) v = dist(rng);
  return out;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  require_same_shape("max_abs_diff", a, b);
  double m = 0.0;
  for (std::size_t i = 0; i < a.data().size(); ++i) m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
  return m;
}

void SparseRows::check_index(std::int64_t index) const {
  if (index < 0 || index >= rows_) {
    throw IndexError("row " + std::to_string(index) + " outside table " + shape().str());
  }
}

void SparseRows::check_row(const Tensor& value) const {
  if (value.rows() != 1 || value.cols() != cols_) {
    throw DimensionError(shape_pair("sparse row shape", value.shape(), Shape{1, cols_}));
  }
}

bool SparseRows::has_row(std::int64_t index) const {
  auto it = std::lower_bound(entries_.begin(), entries_.end(), index,
                             [](const auto& e, std::int64_t i) { return e.first < i; });
  return it != entries_.end() && it->first == index;
}

Tensor SparseRows::row(std::int64_t index) const {
  check_index(index);
  auto it = std::lower_bound(entries_.begin(), entries_.end(), index,
                             [](const auto& e, std::int64_t i) { return e.first < i; });
  if (it != entries_.end() && it->first == index) return *it->second;
  return Tensor(1, cols_);
}

SparseRows SparseRows::with_row(std::int64_t index, TensorPtr value) const {
  check_index(index);
  check_row(*value);
  SparseRows out = *this;
  auto it = std::lower_bound(out.entries_.begin(), out.entries_.end(), index,
                             [](const auto& e, std::int64_t i) { return e.first < i; });
  if (it != out.entries_.end() && it->first == index) {
    it->second = std::move(value);
  } else {
    out.entries_.insert(it, {index, std::move(value)});
  }
  return out;
}

SparseRows SparseRows::without_row(std::int64_t index) const {
  check_index(index);
  SparseRows out = *this;
  std::erase_if(out.entries_, [index](const auto& e) { return e.first == index; });
  return out;
}

SparseRows SparseRows::scatter_add(std::int64_t index, const Tensor& value) const {
  check_index(index);
  check_row(value);
  auto it = std::lower_bound(entries_.begin(), entries_.end(), index,
                             [](const auto& e, std::int64_t i) { return e.first < i; });
  if (it != entries_.end() && it->first == index) {
    return with_row(index, share(apply_binary(*it->second, value, BinaryFn::kAdd)));
  }
  return with_row(index, share(value));
}

Tensor SparseRows::to_dense() const {
  Tensor out(rows_, cols_);
  for (const auto& [r, v] : entries_) {
    std::copy(v->data().begin(), v->data().end(), out.data().begin() + r * cols_);
  }
  return out;
}

SparseRows add(const SparseRows& a, const SparseRows& b) {
  if (a.shape() != b.shape()) throw DimensionError(shape_pair("sparse add", a.shape(), b.shape()));
  if (b.stored_rows() == 0) return a;
  if (a.stored_rows() == 0) return b;
  SparseRows out(a.rows(), a.cols());
  auto ia = a.entries().begin();
  auto ib = b.entries().begin();
  auto& merged = out.entries_;
  merged.reserve(a.stored_rows() + b.stored_rows());
  while (ia != a.entries().end() || ib != b.entries().end()) {
    if (ib == b.entries().end() || (ia != a.entries().end() && ia->first < ib->first)) {
      merged.push_back(*ia++);
    } else if (ia == a.entries().end() || ib->first < ia->first) {
      merged.push_back(*ib++);
    } else {
      merged.emplace_back(ia->first, share(apply_binary(*ia->second, *ib->second, BinaryFn::kAdd)));
      ++ia;
      ++ib;
    }
  }
  return out;
}

Tensor add(const Tensor& dense, const SparseRows& sparse) {
  if (dense.shape() != sparse.shape()) throw DimensionError(shape_pair("dense+sparse add", dense.shape(), sparse.shape()));
  Tensor out = dense;
  for (const auto& [r, v] : sparse.entries()) {
    auto src = v->data();
    for (std::int64_t c = 0; c < out.cols(); ++c) out(r, c) += src[static_cast<std::size_t>(c)];
  }
  return out;
}

}  // namespace rdg
