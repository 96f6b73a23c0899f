#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "brtf/tensor.hpp"

namespace brtf {

/// Top-level Gamma hyperpriors. a0_gamma/b0_gamma are re-estimated during
/// fitting; the rest stay fixed.
struct HyperPriors {
  double c0 = 1e-6;  // lambda shape
  double d0 = 1e-6;  // lambda rate
  double a0_gamma = 1e-6;
  double b0_gamma = 1e-6;
  double a0_tau = 1e-6;
  double b0_tau = 1e-6;

  void validate() const;
  friend bool operator==(const HyperPriors&, const HyperPriors&) = default;
};

enum class InitScheme { random, svd };

InitScheme parse_init_scheme(const std::string& name);
std::string to_string(InitScheme scheme);

/// Row-independent Gaussian posterior over one factor matrix.
struct FactorPosterior {
  Matrix mean;                  // I_n x R, row i is the posterior mean of row i
  std::vector<Matrix> row_cov;  // I_n covariances, each R x R
  // All row covariances are identical (complete-data fast path).
  bool shared_cov = false;

  std::size_t rows() const { return static_cast<std::size_t>(mean.rows()); }
  std::size_t rank() const { return static_cast<std::size_t>(mean.cols()); }
  /// E[a a^T] = mean mean^T + V for row i.
  Matrix second_moment(std::size_t row) const;
  /// Sum over rows of diag(V).
  Vector summed_cov_diag() const;
};

/// q(lambda) = prod_r Ga(shape_r, rate_r).
struct ColumnPrecisionPosterior {
  Vector shape;
  Vector rate;

  Vector expectation() const { return shape.cwiseQuotient(rate); }
  Vector log_expectation() const;
};

/// q(S) over observed entries; zero elsewhere.
struct SparsePosterior {
  DenseTensor mean;
  DenseTensor var;
};

/// q(gamma) per observed entry; zero elsewhere.
struct EntryPrecisionPosterior {
  DenseTensor shape;
  DenseTensor rate;

  double expectation(std::size_t linear) const { return shape[linear] / rate[linear]; }
};

struct NoisePosterior {
  double shape = 1.0;
  double rate = 1.0;

  double expectation() const { return shape / rate; }
  double log_expectation() const;
};

/// Full variational state plus the per-mode cache of vectorized row second
/// moments (quad_cache[n] is I_n x R^2, row i = vec(E[a_i a_i^T])).
struct ModelState {
  Shape shape;
  ObservationMask mask;
  std::vector<FactorPosterior> factors;
  ColumnPrecisionPosterior lambda;
  SparsePosterior sparse;
  EntryPrecisionPosterior gamma;
  NoisePosterior tau;
  HyperPriors priors;
  std::vector<Matrix> quad_cache;

  std::size_t order() const { return shape.size(); }
  std::size_t rank() const { return factors.empty() ? 0 : factors.front().rank(); }
  std::vector<Matrix> factor_means() const;

  void refresh_quad_cache();
  void refresh_quad_cache(std::size_t mode);

  /// Throws std::logic_error if the components disagree on N, R or shape, or
  /// any stored posterior parameter is non-finite / non-positive where it
  /// must be positive.
  void validate() const;
};

/// Builds the initial state: E[Lambda] = I, E[tau] = 1, E[gamma] = 1 on
/// observed entries, V = I, S mean ~ N(0,1) on observed entries, sigma^2 = 1.
/// Factor means are N(0,1) draws (random) or U Sigma^{1/2} of the zero-filled
/// mode-n unfolding (svd), with random columns past the available singular
/// vectors.
ModelState new_state(const DenseTensor& y, const ObservationMask& mask, std::size_t init_rank,
                     const HyperPriors& priors, InitScheme scheme, std::uint64_t seed);

/// Row second-moment matrix recomputed from scratch (no cache).
Matrix quad_cache_from_scratch(const FactorPosterior& factor);

}  // namespace brtf
