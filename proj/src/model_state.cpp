#include "brtf/model_state.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <stdexcept>

#include "brtf/special.hpp"

namespace brtf {

void HyperPriors::validate() const {
  for (double v : {c0, d0, a0_gamma, b0_gamma, a0_tau, b0_tau}) {
    if (!(v >= 0.0) || !std::isfinite(v)) throw std::invalid_argument("hyperpriors must be finite and >= 0");
  }
}

InitScheme parse_init_scheme(const std::string& name) {
  if (name == "random") return InitScheme::random;
  if (name == "svd") return InitScheme::svd;
  throw std::invalid_argument("unknown init scheme '" + name + "' (expected random or svd)");
}

std::string to_string(InitScheme scheme) { return scheme == InitScheme::svd ? "svd" : "random"; }

Matrix FactorPosterior::second_moment(std::size_t row) const {
  return mean.row(row).transpose() * mean.row(row) + row_cov[row];
}

Vector FactorPosterior::summed_cov_diag() const {
  Vector d = Vector::Zero(mean.cols());
  if (shared_cov && !row_cov.empty()) return static_cast<double>(rows()) * row_cov.front().diagonal();
  for (const auto& v : row_cov) d += v.diagonal();
  return d;
}

Vector ColumnPrecisionPosterior::log_expectation() const {
  Vector out(shape.size());
  for (Eigen::Index r = 0; r < shape.size(); ++r) out(r) = digamma(shape(r)) - std::log(rate(r));
  return out;
}

double NoisePosterior::log_expectation() const { return digamma(shape) - std::log(rate); }

std::vector<Matrix> ModelState::factor_means() const {
  std::vector<Matrix> out;
  out.reserve(factors.size());
  for (const auto& f : factors) out.push_back(f.mean);
  return out;
}

Matrix quad_cache_from_scratch(const FactorPosterior& factor) {
  const auto rank = static_cast<Eigen::Index>(factor.rank());
  Matrix b(factor.mean.rows(), rank * rank);
  for (std::size_t i = 0; i < factor.rows(); ++i) {
    const Matrix m = factor.second_moment(i);
    b.row(i) = Eigen::Map<const Eigen::RowVectorXd>(m.data(), rank * rank);
  }
  return b;
}

void ModelState::refresh_quad_cache(std::size_t mode) {
  if (quad_cache.size() != factors.size()) quad_cache.resize(factors.size());
  quad_cache[mode] = quad_cache_from_scratch(factors[mode]);
}

void ModelState::refresh_quad_cache() {
  quad_cache.resize(factors.size());
  for (std::size_t n = 0; n < factors.size(); ++n) refresh_quad_cache(n);
}

void ModelState::validate() const {
  auto fail = [](const std::string& what) { throw std::logic_error("inconsistent model state: " + what); };
  if (shape.size() < 2) fail("order must be at least 2");
  if (mask.shape() != shape) fail("mask shape");
  if (factors.size() != shape.size()) fail("factor count");
  const std::size_t r = rank();
  if (r == 0) fail("rank is zero");
  for (std::size_t n = 0; n < factors.size(); ++n) {
    const auto& f = factors[n];
    if (f.rows() != shape[n] || f.rank() != r) fail("factor " + std::to_string(n) + " dimensions");
    if (f.row_cov.size() != shape[n]) fail("row covariance count");
    for (const auto& v : f.row_cov)
      if (static_cast<std::size_t>(v.rows()) != r || static_cast<std::size_t>(v.cols()) != r)
        fail("row covariance dimensions");
    if (!f.mean.allFinite()) fail("non-finite factor mean");
  }
  if (static_cast<std::size_t>(lambda.shape.size()) != r || static_cast<std::size_t>(lambda.rate.size()) != r)
    fail("lambda length");
  if ((lambda.shape.array() <= 0).any() || (lambda.rate.array() <= 0).any()) fail("lambda parameters");
  if (!(tau.shape > 0) || !(tau.rate > 0) || !std::isfinite(tau.shape) || !std::isfinite(tau.rate))
    fail("tau parameters");
  if (sparse.mean.shape() != shape || sparse.var.shape() != shape || gamma.shape.shape() != shape ||
      gamma.rate.shape() != shape)
    fail("sparse/gamma shapes");
  for (std::size_t i = 0; i < mask.size(); ++i) {
    if (mask[i]) {
      if (!(sparse.var[i] > 0) || !(gamma.shape[i] > 0) || !(gamma.rate[i] > 0)) fail("entry posterior positivity");
    } else if (sparse.mean[i] != 0.0 || sparse.var[i] != 0.0) {
      fail("sparse term nonzero at an unobserved entry");
    }
  }
}

ModelState new_state(const DenseTensor& y, const ObservationMask& mask, std::size_t init_rank,
                     const HyperPriors& priors, InitScheme scheme, std::uint64_t seed) {
  if (init_rank < 1) throw std::invalid_argument("init_rank must be >= 1");
  if (y.shape() != mask.shape()) throw std::invalid_argument("data and mask shapes differ");
  if (y.order() < 2) throw std::invalid_argument("model requires a tensor of order >= 2");
  priors.validate();

  const Shape& shape = y.shape();
  const auto rank = static_cast<Eigen::Index>(init_rank);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);

  ModelState s;
  s.shape = shape;
  s.mask = mask;
  s.priors = priors;

  DenseTensor zero_filled = y;
  if (scheme == InitScheme::svd) {
    for (std::size_t i = 0; i < y.size(); ++i)
      if (!mask[i]) zero_filled[i] = 0.0;
  }

  for (std::size_t n = 0; n < shape.size(); ++n) {
    FactorPosterior f;
    f.mean.resize(static_cast<Eigen::Index>(shape[n]), rank);
    Eigen::Index filled = 0;
    if (scheme == InitScheme::svd) {
      const Matrix unfolded = matricize(zero_filled, n);
      Eigen::BDCSVD<Matrix> svd(unfolded, Eigen::ComputeThinU);
      const Eigen::Index available = std::min<Eigen::Index>(svd.singularValues().size(), rank);
      for (Eigen::Index r = 0; r < available; ++r)
        f.mean.col(r) = svd.matrixU().col(r) * std::sqrt(svd.singularValues()(r));
      filled = available;
    }
    // Row-wise draws so that the random scheme consumes one row at a time.
    for (Eigen::Index i = 0; i < f.mean.rows(); ++i)
      for (Eigen::Index r = filled; r < rank; ++r) f.mean(i, r) = normal(rng);
    f.row_cov.assign(shape[n], Matrix::Identity(rank, rank));
    f.shared_cov = true;
    s.factors.push_back(std::move(f));
  }

  double dim_sum = 0.0;
  for (std::size_t extent : shape) dim_sum += static_cast<double>(extent);
  const double lambda_shape = priors.c0 + 0.5 * dim_sum;
  s.lambda.shape = Vector::Constant(rank, lambda_shape);
  s.lambda.rate = Vector::Constant(rank, lambda_shape);

  const double observed = static_cast<double>(mask.observed_count());
  s.tau.shape = priors.a0_tau + 0.5 * observed;
  s.tau.rate = s.tau.shape;

  s.sparse.mean = DenseTensor(shape);
  s.sparse.var = DenseTensor(shape);
  s.gamma.shape = DenseTensor(shape);
  s.gamma.rate = DenseTensor(shape);
  const double gamma_shape = priors.a0_gamma + 0.5;
  for (std::size_t i = 0; i < mask.size(); ++i) {
    if (!mask[i]) continue;
    s.sparse.mean[i] = normal(rng);
    s.sparse.var[i] = 1.0;
    s.gamma.shape[i] = gamma_shape;
    s.gamma.rate[i] = gamma_shape;
  }

  s.refresh_quad_cache();
  return s;
}

}  // namespace brtf
