#pragma once

#include <span>

#include "brtf/inference.hpp"
#include "brtf/model_state.hpp"

namespace brtf {

/// Factor posterior for fully observed data: every row shares one covariance.
struct CompleteFactorPosterior {
  Matrix mean;        // I_n x R
  Matrix shared_cov;  // R x R

  FactorPosterior expand() const;
};

/// E[A^T A] = mean^T mean + sum_i V_i  (= mean^T mean + I_n V when shared).
Matrix expected_gram(const FactorPosterior& factor);

/// Hadamard product of the expected Gram matrices of every mode but
/// `skip_mode`: E[A^{(\n)T} A^{(\n)}] over a complete tensor.
Matrix gram_complete(std::span<const FactorPosterior> factors, std::size_t skip_mode);
Matrix gram_complete(const ModelState& state, std::size_t skip_mode);

/// Shared-covariance update of q(A^(mode)) for an all-true mask. Writes the
/// result into `state` (refreshing quad_cache) and returns it.
CompleteFactorPosterior update_factor_complete(ModelState& state, const ObservedData& data, std::size_t mode);

/// d_M = d0 + 1/2 sum_n diag(A^T A + I_n V).
void update_lambda_complete(ModelState& state);

/// E||[[A^(1),...,A^(N)]]||_F^2 as the generalized inner product of the
/// per-mode expected Gram matrices.
double expected_cp_norm_sq(std::span<const FactorPosterior> factors);

/// Residual expectation with the CP-norm term taken from expected_cp_norm_sq.
double expected_residual_sq_complete(const ModelState& state, const ObservedData& data);

}  // namespace brtf
