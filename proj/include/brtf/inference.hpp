#pragma once

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "brtf/model_state.hpp"
#include "brtf/tensor.hpp"

namespace brtf {

/// Raised when a posterior update cannot be carried out (e.g. a precision
/// matrix that stays indefinite after jittering).
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Observed entries of a data tensor, indexed for the per-row updates.
class ObservedData {
 public:
  ObservedData(const DenseTensor& y, const ObservationMask& mask);

  const Shape& shape() const { return shape_; }
  std::size_t order() const { return shape_.size(); }
  std::size_t count() const { return linear_.size(); }
  bool complete() const { return complete_; }

  const DenseTensor& values() const { return y_; }  // zero at missing entries
  const ObservationMask& mask() const { return mask_; }

  std::size_t linear(std::size_t entry) const { return linear_[entry]; }
  double value(std::size_t entry) const { return values_[entry]; }
  std::span<const std::uint32_t> index(std::size_t entry) const {
    return {indices_.data() + entry * shape_.size(), shape_.size()};
  }
  /// Entries whose mode-`mode` index equals `row`, in increasing linear order.
  std::span<const std::uint32_t> row_entries(std::size_t mode, std::size_t row) const;

 private:
  Shape shape_;
  DenseTensor y_;
  ObservationMask mask_;
  bool complete_ = false;
  std::vector<std::size_t> linear_;
  std::vector<double> values_;
  std::vector<std::uint32_t> indices_;
  std::vector<std::vector<std::size_t>> row_offsets_;
  std::vector<std::vector<std::uint32_t>> row_members_;
};

struct FitConfig {
  std::size_t max_iters = 200;
  double tol = 1e-6;
  double prune_threshold = 1e-8;
  bool optimize_gamma_priors = true;
  std::uint64_t seed = 0;
  std::size_t init_rank = 0;  // 0 = min(max_n I_n, 100)
  InitScheme init_scheme = InitScheme::svd;
  bool force_general_path = false;
  // Pruning runs from iteration prune_after + 1 on; the hyperprior update from
  // iteration hyperopt_after + 1 on (1-based iterations).
  std::size_t prune_after = 2;
  std::size_t hyperopt_after = 3;

  void validate() const;
};

enum class FitStatus { converged, max_iters, numerical_failure };
std::string to_string(FitStatus status);

struct PruneEvent {
  std::size_t iteration;  // 1-based iteration whose end performed the prune
  std::size_t rank_before;
  std::size_t rank_after;
};

struct FitReport {
  std::vector<double> elbo_trace;
  std::vector<std::size_t> rank_trace;
  std::vector<PruneEvent> prune_events;
  std::size_t inferred_rank = 0;
  std::size_t iterations_run = 0;
  bool converged = false;
  FitStatus status = FitStatus::max_iters;
  std::string message;
  bool fast_path = false;
  std::size_t hyperopt_failures = 0;
  double wall_time_seconds = 0.0;

  /// True if the iteration-`i` ELBO (0-based trace index) follows a prune.
  bool follows_prune(std::size_t trace_index) const;
};

struct FitResult {
  ModelState state;
  FitReport report;
};

/// min(max_n I_n, 100)
std::size_t default_init_rank(const Shape& shape);

/// E[A_i^{(\n)T} A_i^{(\n)}] for row `row` of mode `mode`, summed over the
/// observed entries of that row's subtensor. Throws std::domain_error when the
/// row has no observed entries.
Matrix expected_kr_gram(const ModelState& state, const ObservedData& data, std::size_t mode,
                        std::size_t row);

/// Row-wise Gaussian update of q(A^(mode)); refreshes quad_cache[mode].
/// Rows without observations revert to the prior (mean 0, V = E[Lambda]^-1).
void update_factor(ModelState& state, const ObservedData& data, std::size_t mode);

void update_lambda(ModelState& state);
void update_sparse(ModelState& state, const ObservedData& data);
void update_gamma(ModelState& state, const ObservedData& data);

/// E_q || O * (Y - [[A]] - S) ||_F^2 through the quad cache.
double expected_residual_sq(const ModelState& state, const ObservedData& data);

/// Which expansion the residual uses; `complete` needs an all-true mask.
enum class ResidualRoute { general, complete };

void update_tau(ModelState& state, const ObservedData& data, ResidualRoute route = ResidualRoute::general);

struct ElboTerms {
  double log_likelihood = 0.0;
  double factor_prior = 0.0;
  double lambda_prior = 0.0;
  double sparse_prior = 0.0;
  double gamma_prior = 0.0;
  double tau_prior = 0.0;
  double entropy = 0.0;

  double total() const {
    return log_likelihood + factor_prior + lambda_prior + sparse_prior + gamma_prior + tau_prior + entropy;
  }
};

ElboTerms elbo_terms(const ModelState& state, const ObservedData& data,
                     ResidualRoute route = ResidualRoute::general);
double elbo(const ModelState& state, const ObservedData& data, ResidualRoute route = ResidualRoute::general);

struct HyperoptOutcome {
  double a0_gamma;
  double b0_gamma;
  std::size_t iterations = 0;
  bool converged = false;
  bool accepted = false;  // false: previous values kept
};

/// The gamma-hyperprior part of the bound, as a function of (a0, b0).
double gamma_hyperprior_objective(const ModelState& state, const ObservedData& data, double a0, double b0);

/// Maximizes the bound over (a0_gamma, b0_gamma) within [1e-8, 1e6]^2 and
/// writes the result into state.priors (unless it fails to improve).
HyperoptOutcome optimize_gamma_hyperpriors(ModelState& state, const ObservedData& data);

/// sum_n E||a^(n)_{.r}||^2 per component.
Vector component_energy(const ModelState& state);
/// sum_n ||E a^(n)_{.r}||^2 per component (posterior means only).
Vector mean_component_energy(const ModelState& state);

/// Drops components whose share of the total posterior-mean energy is below
/// `threshold`. The covariance part is left out on purpose: a switched-off
/// component keeps V ~ 1/E[lambda_r] in every row, so its expected energy
/// settles at a small but non-negligible fraction while its mean decays to 0.
/// Keeps at least one component. Returns the number removed.
std::size_t prune(ModelState& state, double threshold);

/// Keeps only the listed components (in the given order).
void select_components(ModelState& state, std::span<const std::size_t> keep);

/// Runs the coordinate-ascent loop from a fresh initialization.
FitResult fit(const DenseTensor& y, const ObservationMask& mask, const FitConfig& config,
              const HyperPriors& priors = {});

/// Runs the coordinate-ascent loop from a caller-supplied state.
FitResult fit(const ObservedData& data, ModelState state, const FitConfig& config);

/// One full sweep of the posterior updates (factors, lambda, tau, S, gamma).
void sweep(ModelState& state, const ObservedData& data, bool fast_path);

}  // namespace brtf
