#include "brtf/complete.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace brtf {
namespace {

void require_complete(const ModelState& state, const ObservedData& data) {
  if (!data.complete()) throw std::invalid_argument("complete-data route needs an all-true mask");
  if (state.shape != data.shape()) throw std::invalid_argument("model state and data shapes differ");
}

// sum_{r,r'} prod_n M_n(r,r')
double hadamard_sum(std::span<const Matrix> grams) {
  Matrix acc = grams.front();
  for (std::size_t n = 1; n < grams.size(); ++n) acc.array() *= grams[n].array();
  return acc.sum();
}

}  // namespace

FactorPosterior CompleteFactorPosterior::expand() const {
  FactorPosterior f;
  f.mean = mean;
  f.row_cov.assign(static_cast<std::size_t>(mean.rows()), shared_cov);
  f.shared_cov = true;
  return f;
}

Matrix expected_gram(const FactorPosterior& factor) {
  Matrix g = factor.mean.transpose() * factor.mean;
  if (factor.shared_cov && !factor.row_cov.empty()) {
    g += static_cast<double>(factor.rows()) * factor.row_cov.front();
  } else {
    for (const auto& v : factor.row_cov) g += v;
  }
  return g;
}

Matrix gram_complete(std::span<const FactorPosterior> factors, std::size_t skip_mode) {
  if (factors.empty()) throw std::invalid_argument("no factors");
  const auto rank = static_cast<Eigen::Index>(factors.front().rank());
  Matrix acc = Matrix::Ones(rank, rank);
  for (std::size_t k = 0; k < factors.size(); ++k)
    if (k != skip_mode) acc.array() *= expected_gram(factors[k]).array();
  return acc;
}

Matrix gram_complete(const ModelState& state, std::size_t skip_mode) {
  return gram_complete(std::span<const FactorPosterior>(state.factors), skip_mode);
}

CompleteFactorPosterior update_factor_complete(ModelState& state, const ObservedData& data, std::size_t mode) {
  require_complete(state, data);
  if (mode >= state.order()) throw std::out_of_range("mode out of range");
  const double e_tau = state.tau.expectation();
  const auto rank = static_cast<Eigen::Index>(state.rank());

  Matrix precision = e_tau * gram_complete(state, mode);
  precision.diagonal() += state.lambda.expectation();
  if (!precision.allFinite()) throw NumericalError("non-finite precision matrix in factor update");
  Eigen::LLT<Matrix> llt(precision);
  if (llt.info() != Eigen::Success) {
    double jitter = 1e-10 * std::abs(precision.trace()) / static_cast<double>(rank);
    if (jitter == 0.0) jitter = 1e-10;
    int attempt = 0;
    for (; attempt < 3; ++attempt, jitter *= 100.0) {
      precision.diagonal().array() += jitter;
      llt.compute(precision);
      if (llt.info() == Eigen::Success) break;
    }
    if (attempt == 3) throw NumericalError("factor precision matrix is not positive definite");
  }
  Matrix cov = llt.solve(Matrix::Identity(rank, rank));
  cov = 0.5 * (cov + cov.transpose()).eval();

  DenseTensor diff = data.values();
  for (std::size_t i = 0; i < diff.size(); ++i) diff[i] -= state.sparse.mean[i];
  const auto means = state.factor_means();
  const Matrix projected = matricize(diff, mode) * khatri_rao_except(means, mode);

  CompleteFactorPosterior out{e_tau * projected * cov, cov};
  FactorPosterior& target = state.factors[mode];
  target.mean = out.mean;
  target.row_cov.assign(state.shape[mode], out.shared_cov);
  target.shared_cov = true;
  state.refresh_quad_cache(mode);
  return out;
}

void update_lambda_complete(ModelState& state) {
  double dim_sum = 0.0;
  const auto rank = static_cast<Eigen::Index>(state.rank());
  Vector rate = Vector::Constant(rank, state.priors.d0);
  for (const auto& f : state.factors) {
    dim_sum += static_cast<double>(f.rows());
    rate += 0.5 * expected_gram(f).diagonal();
  }
  state.lambda.shape = Vector::Constant(rank, state.priors.c0 + 0.5 * dim_sum);
  state.lambda.rate = std::move(rate);
}

double expected_cp_norm_sq(std::span<const FactorPosterior> factors) {
  std::vector<Matrix> grams;
  grams.reserve(factors.size());
  for (const auto& f : factors) grams.push_back(expected_gram(f));
  return hadamard_sum(grams);
}

double expected_residual_sq_complete(const ModelState& state, const ObservedData& data) {
  require_complete(state, data);
  const auto means = state.factor_means();
  const DenseTensor x = cp_reconstruct(means);
  std::vector<Matrix> mean_grams;
  for (const auto& m : means) mean_grams.push_back(m.transpose() * m);

  double fit_sq = 0.0;
  double var_sum = 0.0;
  double y_norm = 0.0;
  const DenseTensor& y = data.values();
  for (std::size_t i = 0; i < y.size(); ++i) {
    const double d = y[i] - x[i] - state.sparse.mean[i];
    fit_sq += d * d;
    var_sum += state.sparse.var[i];
    y_norm += y[i] * y[i];
  }
  // E||X||^2 - ||E X||^2 is the total factor-induced variance.
  const double spread = expected_cp_norm_sq(state.factors) - hadamard_sum(mean_grams);
  const double total = fit_sq + spread + var_sum;
  if (total < -1e-9 * y_norm) throw std::logic_error("expected residual is negative");
  return std::max(total, 0.0);
}

}  // namespace brtf
