#include "brtf/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <string>

namespace brtf {

std::size_t element_count(const Shape& shape) {
  if (shape.empty()) throw std::invalid_argument("tensor shape must have at least one mode");
  std::size_t total = 1;
  for (std::size_t extent : shape) {
    if (extent == 0) throw std::invalid_argument("tensor extents must be positive");
    if (total > std::numeric_limits<std::size_t>::max() / extent)
      throw std::invalid_argument("tensor element count overflows size_t");
    total *= extent;
  }
  return total;
}

DenseTensor::DenseTensor(Shape shape, double fill)
    : shape_(std::move(shape)), data_(element_count(shape_), fill) {}

DenseTensor::DenseTensor(Shape shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  if (data_.size() != element_count(shape_))
    throw std::invalid_argument("tensor data length " + std::to_string(data_.size()) +
                                " does not match shape");
  if (!all_finite()) throw std::invalid_argument("tensor data contains non-finite values");
}

std::size_t DenseTensor::linear_index(std::span<const std::size_t> index) const {
  if (index.size() != shape_.size()) throw std::out_of_range("index arity does not match tensor order");
  std::size_t linear = 0;
  for (std::size_t k = 0; k < shape_.size(); ++k) {
    if (index[k] >= shape_[k]) throw std::out_of_range("tensor index out of range");
    linear = linear * shape_[k] + index[k];
  }
  return linear;
}

void DenseTensor::unravel(std::size_t linear, std::span<std::size_t> index) const {
  for (std::size_t k = shape_.size(); k-- > 0;) {
    index[k] = linear % shape_[k];
    linear /= shape_[k];
  }
}

double& DenseTensor::at(std::span<const std::size_t> index) { return data_[linear_index(index)]; }
double DenseTensor::at(std::span<const std::size_t> index) const { return data_[linear_index(index)]; }

bool DenseTensor::all_finite() const {
  for (double v : data_)
    if (!std::isfinite(v)) return false;
  return true;
}

ObservationMask::ObservationMask(Shape shape, bool fill)
    : shape_(std::move(shape)), flags_(element_count(shape_), fill ? 1 : 0) {}

ObservationMask::ObservationMask(Shape shape, std::vector<std::uint8_t> flags)
    : shape_(std::move(shape)), flags_(std::move(flags)) {
  if (flags_.size() != element_count(shape_))
    throw std::invalid_argument("mask length does not match shape");
  for (auto& f : flags_) {
    if (f > 1) throw std::invalid_argument("mask flags must be 0 or 1");
  }
}

std::size_t ObservationMask::observed_count() const {
  return static_cast<std::size_t>(std::count(flags_.begin(), flags_.end(), std::uint8_t{1}));
}

ObservationMask ObservationMask::complement() const {
  ObservationMask out(shape_, false);
  for (std::size_t i = 0; i < flags_.size(); ++i) out.flags_[i] = flags_[i] ? 0 : 1;
  return out;
}

namespace {

void check_mode(const Shape& shape, std::size_t mode) {
  if (mode >= shape.size())
    throw std::out_of_range("mode " + std::to_string(mode) + " out of range for order " +
                            std::to_string(shape.size()));
}

// Column strides of the mode-n unfolding: lowest remaining mode fastest.
std::vector<std::size_t> unfolding_strides(const Shape& shape, std::size_t mode) {
  std::vector<std::size_t> stride(shape.size(), 0);
  std::size_t s = 1;
  for (std::size_t k = 0; k < shape.size(); ++k) {
    if (k == mode) continue;
    stride[k] = s;
    s *= shape[k];
  }
  return stride;
}

}  // namespace

Matrix matricize(const DenseTensor& t, std::size_t mode) {
  check_mode(t.shape(), mode);
  const auto& shape = t.shape();
  const std::size_t rows = shape[mode];
  const std::size_t cols = t.size() / rows;
  const auto stride = unfolding_strides(shape, mode);
  Matrix out(rows, cols);
  for_each_index(shape, [&](std::size_t linear, std::span<const std::size_t> idx) {
    std::size_t col = 0;
    for (std::size_t k = 0; k < idx.size(); ++k) col += idx[k] * stride[k];
    out(idx[mode], col) = t[linear];
  });
  return out;
}

DenseTensor fold(const Matrix& unfolded, const Shape& shape, std::size_t mode) {
  check_mode(shape, mode);
  const std::size_t total = element_count(shape);
  if (static_cast<std::size_t>(unfolded.rows()) != shape[mode] ||
      static_cast<std::size_t>(unfolded.size()) != total)
    throw std::invalid_argument("unfolded matrix does not match target shape");
  const auto stride = unfolding_strides(shape, mode);
  DenseTensor out(shape);
  for_each_index(shape, [&](std::size_t linear, std::span<const std::size_t> idx) {
    std::size_t col = 0;
    for (std::size_t k = 0; k < idx.size(); ++k) col += idx[k] * stride[k];
    out[linear] = unfolded(idx[mode], col);
  });
  return out;
}

Matrix khatri_rao(std::span<const Matrix> matrices) {
  if (matrices.empty()) throw std::invalid_argument("khatri_rao needs at least one matrix");
  const Eigen::Index cols = matrices[0].cols();
  Eigen::Index rows = 1;
  for (const auto& m : matrices) {
    if (m.cols() != cols) throw std::invalid_argument("khatri_rao: column counts differ");
    rows *= m.rows();
  }
  // Build up B (.) A with A's row index fastest: new_row = j * rows(acc) + i.
  Matrix acc = matrices[0];
  for (std::size_t k = 1; k < matrices.size(); ++k) {
    const Matrix& next = matrices[k];
    Matrix grown(acc.rows() * next.rows(), cols);
    for (Eigen::Index r = 0; r < cols; ++r)
      for (Eigen::Index j = 0; j < next.rows(); ++j)
        grown.col(r).segment(j * acc.rows(), acc.rows()) = next(j, r) * acc.col(r);
    acc = std::move(grown);
  }
  return acc;
}

Matrix khatri_rao_except(std::span<const Matrix> matrices, std::size_t skip) {
  if (skip >= matrices.size()) throw std::out_of_range("khatri_rao_except: mode out of range");
  std::vector<Matrix> rest;
  rest.reserve(matrices.size() - 1);
  for (std::size_t k = 0; k < matrices.size(); ++k)
    if (k != skip) rest.push_back(matrices[k]);
  if (rest.empty()) {
    // Empty product: a single row of ones.
    return Matrix::Ones(1, matrices[skip].cols());
  }
  return khatri_rao(rest);
}

Matrix hadamard_all(std::span<const Matrix> matrices) {
  if (matrices.empty()) throw std::invalid_argument("hadamard_all needs at least one matrix");
  Matrix out = matrices[0];
  for (std::size_t k = 1; k < matrices.size(); ++k) {
    if (matrices[k].rows() != out.rows() || matrices[k].cols() != out.cols())
      throw std::invalid_argument("hadamard_all: shape mismatch");
    out.array() *= matrices[k].array();
  }
  return out;
}

double generalized_inner_product(std::span<const Vector> vectors) {
  if (vectors.empty()) throw std::invalid_argument("generalized_inner_product needs inputs");
  Vector prod = vectors[0];
  for (std::size_t k = 1; k < vectors.size(); ++k) {
    if (vectors[k].size() != prod.size())
      throw std::invalid_argument("generalized_inner_product: length mismatch");
    prod.array() *= vectors[k].array();
  }
  return prod.sum();
}

double cp_entry(std::span<const Matrix> factors, std::span<const std::size_t> index) {
  const Eigen::Index rank = factors[0].cols();
  double total = 0.0;
  for (Eigen::Index r = 0; r < rank; ++r) {
    double p = 1.0;
    for (std::size_t n = 0; n < factors.size(); ++n) p *= factors[n](index[n], r);
    total += p;
  }
  return total;
}

DenseTensor cp_reconstruct(std::span<const Matrix> factors) {
  if (factors.empty()) throw std::invalid_argument("cp_reconstruct needs at least one factor");
  const Eigen::Index rank = factors[0].cols();
  Shape shape;
  for (const auto& f : factors) {
    if (f.cols() != rank) throw std::invalid_argument("cp_reconstruct: inconsistent rank");
    shape.push_back(static_cast<std::size_t>(f.rows()));
  }
  DenseTensor out(shape);
  if (rank == 0) return out;
  // prefix[k] holds the running Hadamard product of rows 0..k.
  const std::size_t order = factors.size();
  std::vector<Vector> prefix(order, Vector(rank));
  std::vector<Matrix> rows_major;
  rows_major.reserve(order);
  for (const auto& f : factors) rows_major.push_back(f.transpose());
  std::size_t dirty = 0;
  for_each_index(shape, [&](std::size_t linear, std::span<const std::size_t> idx) {
    for (std::size_t k = dirty; k < order; ++k) {
      if (k == 0)
        prefix[0] = rows_major[0].col(idx[0]);
      else
        prefix[k] = prefix[k - 1].cwiseProduct(rows_major[k].col(idx[k]));
    }
    out[linear] = prefix[order - 1].sum();
    // The next index changes the last mode; more if it wraps.
    dirty = order - 1;
    for (std::size_t k = order; k-- > 0;) {
      if (idx[k] + 1 < shape[k]) {
        dirty = k;
        break;
      }
      dirty = k;
    }
  });
  return out;
}

double frobenius_sq(const DenseTensor& t) {
  double s = 0.0;
  for (double v : t.data()) s += v * v;
  return s;
}

double masked_frobenius_sq(const DenseTensor& t, const ObservationMask& mask) {
  if (t.shape() != mask.shape()) throw std::invalid_argument("masked_frobenius_sq: shape mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < t.size(); ++i)
    if (mask[i]) s += t[i] * t[i];
  return s;
}

}  // namespace brtf
