#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include <Eigen/Dense>

namespace brtf {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using Shape = std::vector<std::size_t>;

/// Product of the extents; throws std::invalid_argument on an empty shape, a
/// zero extent, or size_t overflow.
std::size_t element_count(const Shape& shape);

/// Dense N-way array of doubles, row-major (last index fastest).
class DenseTensor {
 public:
  DenseTensor() = default;
  explicit DenseTensor(Shape shape, double fill = 0.0);
  /// Takes ownership of `data`; its length must equal the element count and
  /// every value must be finite.
  DenseTensor(Shape shape, std::vector<double> data);

  const Shape& shape() const { return shape_; }
  std::size_t order() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  std::size_t extent(std::size_t mode) const { return shape_.at(mode); }

  double& operator[](std::size_t linear) { return data_[linear]; }
  double operator[](std::size_t linear) const { return data_[linear]; }
  double& at(std::span<const std::size_t> index);
  double at(std::span<const std::size_t> index) const;

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }

  std::size_t linear_index(std::span<const std::size_t> index) const;
  void unravel(std::size_t linear, std::span<std::size_t> index) const;

  bool all_finite() const;

  friend bool operator==(const DenseTensor&, const DenseTensor&) = default;

 private:
  Shape shape_;
  std::vector<double> data_;
};

/// Indicator tensor of the observed set. true = observed.
class ObservationMask {
 public:
  ObservationMask() = default;
  explicit ObservationMask(Shape shape, bool fill = true);
  ObservationMask(Shape shape, std::vector<std::uint8_t> flags);

  static ObservationMask full(const Shape& shape) { return ObservationMask(shape, true); }

  const Shape& shape() const { return shape_; }
  std::size_t size() const { return flags_.size(); }
  bool operator[](std::size_t linear) const { return flags_[linear] != 0; }
  void set(std::size_t linear, bool observed) { flags_[linear] = observed ? 1 : 0; }
  std::span<const std::uint8_t> flags() const { return flags_; }

  std::size_t observed_count() const;
  bool complete() const { return observed_count() == flags_.size(); }
  ObservationMask complement() const;

  friend bool operator==(const ObservationMask&, const ObservationMask&) = default;

 private:
  Shape shape_;
  std::vector<std::uint8_t> flags_;
};

/// Mode-n unfolding (0-based mode). Columns enumerate the remaining indices
/// with the lowest remaining mode varying fastest, which pairs with
/// khatri_rao_except(factors, mode):
///   matricize(cp_reconstruct(F), n) == F[n] * khatri_rao_except(F, n)^T
Matrix matricize(const DenseTensor& t, std::size_t mode);

/// Inverse of matricize for the given target shape.
DenseTensor fold(const Matrix& unfolded, const Shape& shape, std::size_t mode);

/// Khatri-Rao product in reverse list order: M[K-1] (.) ... (.) M[0].
/// Row index of the result has the first matrix's row index varying fastest.
Matrix khatri_rao(std::span<const Matrix> matrices);

/// Reverse-order Khatri-Rao product of all matrices except `skip`.
Matrix khatri_rao_except(std::span<const Matrix> matrices, std::size_t skip);

Matrix hadamard_all(std::span<const Matrix> matrices);

/// sum_r prod_n v[n](r)
double generalized_inner_product(std::span<const Vector> vectors);

/// sum_r prod_n factors[n](index[n], r). No bounds checks; hot path helper.
double cp_entry(std::span<const Matrix> factors, std::span<const std::size_t> index);

DenseTensor cp_reconstruct(std::span<const Matrix> factors);

double frobenius_sq(const DenseTensor& t);
double masked_frobenius_sq(const DenseTensor& t, const ObservationMask& mask);

/// Calls fn(linear, index) for every entry in row-major order.
template <typename Fn>
void for_each_index(const Shape& shape, Fn&& fn) {
  const std::size_t total = element_count(shape);
  std::vector<std::size_t> index(shape.size(), 0);
  for (std::size_t linear = 0; linear < total; ++linear) {
    fn(linear, std::span<const std::size_t>(index));
    for (std::size_t k = shape.size(); k-- > 0;) {
      if (++index[k] < shape[k]) break;
      index[k] = 0;
    }
  }
}

}  // namespace brtf
