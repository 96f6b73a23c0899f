#pragma once

#include <span>
#include <vector>

#include "brtf/model_state.hpp"
#include "brtf/tensor.hpp"

namespace brtf {

/// Student-t predictive law of one entry: mean, scale parameter psi (the
/// variance is dof/(dof-2) / psi) and degrees of freedom.
struct PredictiveParams {
  double mean = 0.0;
  double psi = 0.0;
  double dof = 0.0;

  /// Infinite when dof <= 2.
  double variance() const;
};

/// The sparse term is not part of the prediction.
PredictiveParams predictive_params(const ModelState& state, std::span<const std::size_t> index);

enum class ImputeScope { missing_only, all };

struct Imputation {
  std::vector<std::size_t> linear;  // entries covered, increasing
  std::vector<double> mean;
  std::vector<double> variance;
  double dof = 0.0;

  std::size_t size() const { return linear.size(); }
};

Imputation impute(const ModelState& state, ImputeScope scope = ImputeScope::missing_only);

/// Dense tensors of predictive means / variances over every entry.
DenseTensor predictive_mean_tensor(const ModelState& state);
DenseTensor predictive_variance_tensor(const ModelState& state);

}  // namespace brtf
