#include "brtf/inference.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>

#include "brtf/complete.hpp"
#include "brtf/parallel.hpp"
#include "brtf/special.hpp"

namespace brtf {
namespace {

constexpr double kLog2Pi = 1.8378770664093454836;  // ln(2 pi)
constexpr double kHyperMin = 1e-8;
constexpr double kHyperMax = 1e6;

void check_compatible(const ModelState& state, const ObservedData& data) {
  if (state.shape != data.shape()) throw std::invalid_argument("model state and data shapes differ");
  if (state.quad_cache.size() != state.factors.size())
    throw std::logic_error("quad cache not initialized");
}

// Transposed copies so that a factor row (or quad-cache row) is a contiguous column.
std::vector<Matrix> transposed_means(const ModelState& state) {
  std::vector<Matrix> out;
  out.reserve(state.factors.size());
  for (const auto& f : state.factors) out.push_back(f.mean.transpose());
  return out;
}

std::vector<Matrix> transposed_quads(const ModelState& state) {
  std::vector<Matrix> out;
  out.reserve(state.quad_cache.size());
  for (const auto& b : state.quad_cache) out.push_back(b.transpose());
  return out;
}

// Cholesky of a precision matrix, with diagonal jitter of 1e-10 * trace / R
// (growing 100x per retry) when the plain factorization fails.
Eigen::LLT<Matrix> robust_llt(Matrix precision) {
  if (!precision.allFinite()) throw NumericalError("non-finite precision matrix in factor update");
  Eigen::LLT<Matrix> llt(precision);
  if (llt.info() == Eigen::Success) return llt;
  double jitter = 1e-10 * std::abs(precision.trace()) / static_cast<double>(precision.rows());
  if (jitter == 0.0) jitter = 1e-10;
  for (int attempt = 0; attempt < 3; ++attempt) {
    precision.diagonal().array() += jitter;
    llt.compute(precision);
    if (llt.info() == Eigen::Success) return llt;
    jitter *= 100.0;
  }
  throw NumericalError("factor precision matrix is not positive definite");
}

double log_det_spd(const Matrix& m) {
  Eigen::LLT<Matrix> llt(m);
  if (llt.info() != Eigen::Success) throw NumericalError("row covariance is not positive definite");
  return 2.0 * llt.matrixLLT().diagonal().array().log().sum();
}

// Caches the last (shape, rate) pair's digamma/log-gamma; entry-wise shapes
// are usually all equal.
struct GammaMoments {
  double last_shape = std::numeric_limits<double>::quiet_NaN();
  double psi = 0.0;
  double lgam = 0.0;

  void prime(double shape) {
    if (shape != last_shape) {
      last_shape = shape;
      psi = digamma(shape);
      lgam = log_gamma(shape);
    }
  }
  double log_expectation(double shape, double rate) {
    prime(shape);
    return psi - std::log(rate);
  }
  double entropy(double shape, double rate) {
    prime(shape);
    return shape - std::log(rate) + lgam + (1.0 - shape) * psi;
  }
};

}  // namespace

// ---------------------------------------------------------------------------
// ObservedData

ObservedData::ObservedData(const DenseTensor& y, const ObservationMask& mask)
    : shape_(y.shape()), y_(y), mask_(mask) {
  if (y.shape() != mask.shape()) throw std::invalid_argument("data and mask shapes differ");
  for (std::size_t extent : shape_)
    if (extent > std::numeric_limits<std::uint32_t>::max())
      throw std::invalid_argument("mode extent too large for the observation index");
  const std::size_t order = shape_.size();
  const std::size_t observed = mask.observed_count();
  linear_.reserve(observed);
  values_.reserve(observed);
  indices_.reserve(observed * order);
  for_each_index(shape_, [&](std::size_t linear, std::span<const std::size_t> idx) {
    if (!mask[linear]) {
      y_[linear] = 0.0;
      return;
    }
    linear_.push_back(linear);
    values_.push_back(y[linear]);
    for (std::size_t k = 0; k < order; ++k) indices_.push_back(static_cast<std::uint32_t>(idx[k]));
  });
  complete_ = observed == y.size();

  row_offsets_.resize(order);
  row_members_.resize(order);
  for (std::size_t n = 0; n < order; ++n) {
    auto& offsets = row_offsets_[n];
    offsets.assign(shape_[n] + 1, 0);
    for (std::size_t e = 0; e < observed; ++e) ++offsets[indices_[e * order + n] + 1];
    std::partial_sum(offsets.begin(), offsets.end(), offsets.begin());
    auto& members = row_members_[n];
    members.resize(observed);
    std::vector<std::size_t> cursor(offsets.begin(), offsets.end() - 1);
    for (std::size_t e = 0; e < observed; ++e)
      members[cursor[indices_[e * order + n]]++] = static_cast<std::uint32_t>(e);
  }
}

std::span<const std::uint32_t> ObservedData::row_entries(std::size_t mode, std::size_t row) const {
  const auto& offsets = row_offsets_.at(mode);
  if (row + 1 >= offsets.size()) throw std::out_of_range("row index out of range");
  return {row_members_[mode].data() + offsets[row], offsets[row + 1] - offsets[row]};
}

// ---------------------------------------------------------------------------
// Config / report

void FitConfig::validate() const {
  if (max_iters < 1) throw std::invalid_argument("max_iters must be >= 1");
  if (!(tol > 0.0)) throw std::invalid_argument("tol must be > 0");
  if (!(prune_threshold >= 0.0) || prune_threshold >= 1.0)
    throw std::invalid_argument("prune_threshold must lie in [0, 1)");
}

std::string to_string(FitStatus status) {
  switch (status) {
    case FitStatus::converged:
      return "converged";
    case FitStatus::max_iters:
      return "max_iters";
    case FitStatus::numerical_failure:
      return "numerical_failure";
  }
  return "unknown";
}

bool FitReport::follows_prune(std::size_t trace_index) const {
  return std::any_of(prune_events.begin(), prune_events.end(),
                     [&](const PruneEvent& e) { return e.iteration == trace_index; });
}

std::size_t default_init_rank(const Shape& shape) {
  return std::min<std::size_t>(*std::max_element(shape.begin(), shape.end()), 100);
}

// ---------------------------------------------------------------------------
// Factor updates

Matrix expected_kr_gram(const ModelState& state, const ObservedData& data, std::size_t mode,
                        std::size_t row) {
  check_compatible(state, data);
  if (mode >= state.order()) throw std::out_of_range("mode out of range");
  const auto entries = data.row_entries(mode, row);
  if (entries.empty()) throw std::domain_error("row has no observed entries");
  const auto rank = static_cast<Eigen::Index>(state.rank());
  Vector acc = Vector::Zero(rank * rank);
  Vector q(rank * rank);
  for (std::uint32_t e : entries) {
    const auto idx = data.index(e);
    bool first = true;
    for (std::size_t k = 0; k < state.order(); ++k) {
      if (k == mode) continue;
      if (first) {
        q = state.quad_cache[k].row(idx[k]).transpose();
        first = false;
      } else {
        q.array() *= state.quad_cache[k].row(idx[k]).transpose().array();
      }
    }
    acc += q;
  }
  return Eigen::Map<const Matrix>(acc.data(), rank, rank);
}

void update_factor(ModelState& state, const ObservedData& data, std::size_t mode) {
  check_compatible(state, data);
  if (mode >= state.order()) throw std::out_of_range("mode out of range");
  const std::size_t order = state.order();
  const auto rank = static_cast<Eigen::Index>(state.rank());
  const double e_tau = state.tau.expectation();
  const Vector e_lambda = state.lambda.expectation();
  const Matrix prior_cov = e_lambda.cwiseInverse().asDiagonal();
  const auto means_t = transposed_means(state);
  const auto quads_t = transposed_quads(state);
  const DenseTensor& s_mean = state.sparse.mean;
  FactorPosterior& target = state.factors[mode];

  parallel_for(state.shape[mode], [&](std::size_t begin, std::size_t end) {
    Vector g(rank * rank), h(rank), w(rank), q(rank * rank);
    for (std::size_t row = begin; row < end; ++row) {
      const auto entries = data.row_entries(mode, row);
      if (entries.empty()) {
        target.mean.row(row).setZero();
        target.row_cov[row] = prior_cov;
        continue;
      }
      g.setZero();
      h.setZero();
      for (std::uint32_t e : entries) {
        const auto idx = data.index(e);
        bool first = true;
        for (std::size_t k = 0; k < order; ++k) {
          if (k == mode) continue;
          if (first) {
            w = means_t[k].col(idx[k]);
            q = quads_t[k].col(idx[k]);
            first = false;
          } else {
            w.array() *= means_t[k].col(idx[k]).array();
            q.array() *= quads_t[k].col(idx[k]).array();
          }
        }
        h += (data.value(e) - s_mean[data.linear(e)]) * w;
        g += q;
      }
      Matrix precision = e_tau * Eigen::Map<const Matrix>(g.data(), rank, rank);
      precision.diagonal() += e_lambda;
      const auto llt = robust_llt(std::move(precision));
      Matrix cov = llt.solve(Matrix::Identity(rank, rank));
      cov = 0.5 * (cov + cov.transpose()).eval();
      target.mean.row(row) = (e_tau * (cov * h)).transpose();
      target.row_cov[row] = std::move(cov);
    }
  });
  target.shared_cov = false;
  state.refresh_quad_cache(mode);
}

void update_lambda(ModelState& state) {
  const std::size_t rank = state.rank();
  double dim_sum = 0.0;
  Vector rate = Vector::Constant(static_cast<Eigen::Index>(rank), state.priors.d0);
  for (const auto& f : state.factors) {
    dim_sum += static_cast<double>(f.rows());
    rate += 0.5 * (f.mean.colwise().squaredNorm().transpose() + f.summed_cov_diag());
  }
  state.lambda.shape = Vector::Constant(static_cast<Eigen::Index>(rank), state.priors.c0 + 0.5 * dim_sum);
  state.lambda.rate = std::move(rate);
}

// ---------------------------------------------------------------------------
// Sparse term, its precisions, noise

void update_sparse(ModelState& state, const ObservedData& data) {
  check_compatible(state, data);
  const double e_tau = state.tau.expectation();
  const auto means_t = transposed_means(state);
  const std::size_t order = state.order();
  Vector w(static_cast<Eigen::Index>(state.rank()));
  for (std::size_t e = 0; e < data.count(); ++e) {
    const auto idx = data.index(e);
    w = means_t[0].col(idx[0]);
    for (std::size_t k = 1; k < order; ++k) w.array() *= means_t[k].col(idx[k]).array();
    const std::size_t lin = data.linear(e);
    const double var = 1.0 / (state.gamma.expectation(lin) + e_tau);
    state.sparse.var[lin] = var;
    state.sparse.mean[lin] = var * e_tau * (data.value(e) - w.sum());
  }
}

void update_gamma(ModelState& state, const ObservedData& data) {
  const double shape = state.priors.a0_gamma + 0.5;
  const double b0 = state.priors.b0_gamma;
  for (std::size_t e = 0; e < data.count(); ++e) {
    const std::size_t lin = data.linear(e);
    const double s = state.sparse.mean[lin];
    state.gamma.shape[lin] = shape;
    state.gamma.rate[lin] = b0 + 0.5 * (s * s + state.sparse.var[lin]);
  }
}

double expected_residual_sq(const ModelState& state, const ObservedData& data) {
  check_compatible(state, data);
  const std::size_t order = state.order();
  const auto rank = static_cast<Eigen::Index>(state.rank());
  const auto means_t = transposed_means(state);
  const auto quads_t = transposed_quads(state);
  Vector w(rank), q(rank * rank);
  // Per entry: (y - x - s)^2 + (E<a>^2 - x^2) + sigma^2, which regroups the
  // six-term expansion so that no large terms cancel.
  double total = 0.0;
  double y_norm = 0.0;
  for (std::size_t e = 0; e < data.count(); ++e) {
    const auto idx = data.index(e);
    w = means_t[0].col(idx[0]);
    q = quads_t[0].col(idx[0]);
    for (std::size_t k = 1; k < order; ++k) {
      w.array() *= means_t[k].col(idx[k]).array();
      q.array() *= quads_t[k].col(idx[k]).array();
    }
    const double x = w.sum();
    const std::size_t lin = data.linear(e);
    const double y = data.value(e);
    const double d = y - x - state.sparse.mean[lin];
    total += d * d + (q.sum() - x * x) + state.sparse.var[lin];
    y_norm += y * y;
  }
  if (total < -1e-9 * y_norm) throw std::logic_error("expected residual is negative");
  return std::max(total, 0.0);
}

void update_tau(ModelState& state, const ObservedData& data, ResidualRoute route) {
  const double resid =
      route == ResidualRoute::complete ? expected_residual_sq_complete(state, data) : expected_residual_sq(state, data);
  state.tau.shape = state.priors.a0_tau + 0.5 * static_cast<double>(data.count());
  state.tau.rate = state.priors.b0_tau + 0.5 * resid;
  if (!(state.tau.rate > 0.0)) throw NumericalError("noise posterior rate collapsed to zero");
}

// ---------------------------------------------------------------------------
// Lower bound

ElboTerms elbo_terms(const ModelState& state, const ObservedData& data, ResidualRoute route) {
  check_compatible(state, data);
  const HyperPriors& p = state.priors;
  const auto rank = static_cast<double>(state.rank());
  const double m = static_cast<double>(data.count());
  ElboTerms t;

  const double e_tau = state.tau.expectation();
  const double eln_tau = state.tau.log_expectation();
  const double resid =
      route == ResidualRoute::complete ? expected_residual_sq_complete(state, data) : expected_residual_sq(state, data);
  t.log_likelihood = 0.5 * m * (eln_tau - kLog2Pi) - 0.5 * e_tau * resid;

  const Vector e_lambda = state.lambda.expectation();
  const Vector eln_lambda = state.lambda.log_expectation();
  for (const auto& f : state.factors) {
    const double rows = static_cast<double>(f.rows());
    const Vector second = f.mean.colwise().squaredNorm().transpose() + f.summed_cov_diag();
    t.factor_prior += -0.5 * rows * rank * kLog2Pi + 0.5 * rows * eln_lambda.sum() - 0.5 * e_lambda.dot(second);
    if (f.shared_cov) {
      t.entropy += rows * (0.5 * rank * (1.0 + kLog2Pi) + 0.5 * log_det_spd(f.row_cov.front()));
    } else {
      for (const auto& v : f.row_cov) t.entropy += 0.5 * rank * (1.0 + kLog2Pi) + 0.5 * log_det_spd(v);
    }
  }
  const double lambda_norm = gamma_log_normalizer(p.c0, p.d0);
  for (Eigen::Index r = 0; r < e_lambda.size(); ++r) {
    t.lambda_prior += lambda_norm + (p.c0 - 1.0) * eln_lambda(r) - p.d0 * e_lambda(r);
    t.entropy += gamma_entropy(state.lambda.shape(r), state.lambda.rate(r));
  }

  const double gamma_norm = gamma_log_normalizer(p.a0_gamma, p.b0_gamma);
  GammaMoments moments;
  for (std::size_t e = 0; e < data.count(); ++e) {
    const std::size_t lin = data.linear(e);
    const double a = state.gamma.shape[lin];
    const double b = state.gamma.rate[lin];
    const double eg = a / b;
    const double elng = moments.log_expectation(a, b);
    const double s = state.sparse.mean[lin];
    const double v = state.sparse.var[lin];
    t.sparse_prior += -0.5 * kLog2Pi + 0.5 * elng - 0.5 * eg * (s * s + v);
    t.gamma_prior += gamma_norm + (p.a0_gamma - 1.0) * elng - p.b0_gamma * eg;
    t.entropy += 0.5 * (1.0 + kLog2Pi + std::log(v)) + moments.entropy(a, b);
  }

  t.tau_prior = gamma_log_normalizer(p.a0_tau, p.b0_tau) + (p.a0_tau - 1.0) * eln_tau - p.b0_tau * e_tau;
  t.entropy += gamma_entropy(state.tau.shape, state.tau.rate);
  return t;
}

double elbo(const ModelState& state, const ObservedData& data, ResidualRoute route) {
  const double value = elbo_terms(state, data, route).total();
  if (!std::isfinite(value)) throw NumericalError("lower bound is not finite");
  return value;
}

// ---------------------------------------------------------------------------
// Gamma hyperprior re-estimation

namespace {

struct GammaSums {
  double count = 0.0;
  double expectation = 0.0;      // sum E[gamma]
  double log_expectation = 0.0;  // sum E[ln gamma]
};

GammaSums gamma_sums(const ModelState& state, const ObservedData& data) {
  GammaSums s;
  GammaMoments moments;
  for (std::size_t e = 0; e < data.count(); ++e) {
    const std::size_t lin = data.linear(e);
    const double a = state.gamma.shape[lin];
    const double b = state.gamma.rate[lin];
    s.expectation += a / b;
    s.log_expectation += moments.log_expectation(a, b);
  }
  s.count = static_cast<double>(data.count());
  return s;
}

double objective(const GammaSums& s, double a0, double b0) {
  return -s.count * log_gamma(a0) + s.count * a0 * std::log(b0) + (a0 - 1.0) * s.log_expectation -
         b0 * s.expectation;
}

// Solves g(a) = 0 for a decreasing g on [lo, hi] by Newton steps in log(a)
// with a bisection fallback. g_and_slope returns (g, dg/da).
template <typename Fn>
double solve_decreasing(Fn&& g_and_slope, double start, double lo, double hi, std::size_t& iters, bool& ok) {
  double a = std::clamp(start, lo, hi);
  double lo_u = std::log(lo), hi_u = std::log(hi);
  auto [g_lo, s_lo] = g_and_slope(lo);
  auto [g_hi, s_hi] = g_and_slope(hi);
  (void)s_lo;
  (void)s_hi;
  if (g_lo <= 0.0) {
    ok = true;
    return lo;
  }
  if (g_hi >= 0.0) {
    ok = true;
    return hi;
  }
  ok = false;
  for (std::size_t it = 0; it < 50; ++it) {
    ++iters;
    auto [g, slope] = g_and_slope(a);
    double u = std::log(a);
    if (g > 0.0)
      lo_u = u;
    else
      hi_u = u;
    // d g / d u = a * dg/da
    double next_u = u - g / (a * slope);
    if (!std::isfinite(next_u) || next_u <= lo_u || next_u >= hi_u) next_u = 0.5 * (lo_u + hi_u);
    const double next = std::exp(next_u);
    if (std::abs(next - a) <= 1e-8 * a) {
      a = next;
      ok = true;
      break;
    }
    a = next;
  }
  return a;
}

}  // namespace

double gamma_hyperprior_objective(const ModelState& state, const ObservedData& data, double a0, double b0) {
  return objective(gamma_sums(state, data), a0, b0);
}

HyperoptOutcome optimize_gamma_hyperpriors(ModelState& state, const ObservedData& data) {
  const GammaSums s = gamma_sums(state, data);
  HyperoptOutcome out{state.priors.a0_gamma, state.priors.b0_gamma};
  if (s.count == 0.0 || !(s.expectation > 0.0)) return out;
  const double mean_log = s.log_expectation / s.count;

  // Stationary b0 for a given a0.
  auto b_of = [&](double a) { return std::clamp(s.count * a / s.expectation, kHyperMin, kHyperMax); };
  // dL/da0 / M at fixed b0: -psi(a) + ln b + mean E[ln gamma]
  auto a_given_b = [&](double b, double start, bool& ok) {
    auto g = [&](double a) { return std::pair{-digamma(a) + std::log(b) + mean_log, -trigamma(a)}; };
    return solve_decreasing(g, start, kHyperMin, kHyperMax, out.iterations, ok);
  };

  // Profile out b0: ln a - psi(a) = ln(mean E[gamma]) - mean E[ln gamma].
  const double c = std::log(s.expectation / s.count) - mean_log;
  bool ok = false;
  double a = 0.0;
  if (c > 0.0) {
    auto g = [&](double x) { return std::pair{std::log(x) - digamma(x) - c, 1.0 / x - trigamma(x)}; };
    const double guess = (3.0 - c + std::sqrt((c - 3.0) * (c - 3.0) + 24.0 * c)) / (12.0 * c);
    a = solve_decreasing(g, guess, kHyperMin, kHyperMax, out.iterations, ok);
  } else {
    a = kHyperMax;
    ok = true;
  }
  double b = b_of(a);
  // If b0 hit the box, alternate the two coordinate maximizations.
  if (b != s.count * a / s.expectation) {
    for (int round = 0; round < 50; ++round) {
      bool step_ok = false;
      const double a_next = a_given_b(b, a, step_ok);
      const double b_next = b_of(a_next);
      ok = step_ok;
      const bool done = std::abs(a_next - a) <= 1e-8 * a && std::abs(b_next - b) <= 1e-8 * b;
      a = a_next;
      b = b_next;
      if (done) break;
    }
  }
  out.converged = ok;
  const double before = objective(s, state.priors.a0_gamma, state.priors.b0_gamma);
  const double after = objective(s, a, b);
  if (std::isfinite(after) && after >= before) {
    state.priors.a0_gamma = a;
    state.priors.b0_gamma = b;
    out.a0_gamma = a;
    out.b0_gamma = b;
    out.accepted = true;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Model reduction

Vector component_energy(const ModelState& state) {
  Vector energy = Vector::Zero(static_cast<Eigen::Index>(state.rank()));
  for (const auto& f : state.factors)
    energy += f.mean.colwise().squaredNorm().transpose() + f.summed_cov_diag();
  return energy;
}

Vector mean_component_energy(const ModelState& state) {
  Vector energy = Vector::Zero(static_cast<Eigen::Index>(state.rank()));
  for (const auto& f : state.factors) energy += f.mean.colwise().squaredNorm().transpose();
  return energy;
}

void select_components(ModelState& state, std::span<const std::size_t> keep) {
  if (keep.empty()) throw std::invalid_argument("cannot remove every component");
  std::vector<Eigen::Index> cols(keep.begin(), keep.end());
  for (auto c : cols)
    if (c < 0 || static_cast<std::size_t>(c) >= state.rank()) throw std::out_of_range("component index");
  for (auto& f : state.factors) {
    f.mean = f.mean(Eigen::all, cols).eval();
    for (auto& v : f.row_cov) v = v(cols, cols).eval();
  }
  state.lambda.shape = state.lambda.shape(cols).eval();
  state.lambda.rate = state.lambda.rate(cols).eval();
  state.refresh_quad_cache();
}

std::size_t prune(ModelState& state, double threshold) {
  const Vector energy = mean_component_energy(state);
  const double total = energy.sum();
  std::vector<std::size_t> keep;
  for (Eigen::Index r = 0; r < energy.size(); ++r)
    if (total > 0.0 && energy(r) / total >= threshold) keep.push_back(static_cast<std::size_t>(r));
  if (keep.empty()) {
    Eigen::Index best = 0;
    energy.maxCoeff(&best);
    keep.push_back(static_cast<std::size_t>(best));
  }
  const std::size_t removed = state.rank() - keep.size();
  if (removed > 0) select_components(state, keep);
  return removed;
}

// ---------------------------------------------------------------------------
// Driver

void sweep(ModelState& state, const ObservedData& data, bool fast_path) {
  for (std::size_t n = 0; n < state.order(); ++n) {
    if (fast_path)
      update_factor_complete(state, data, n);
    else
      update_factor(state, data, n);
  }
  if (fast_path)
    update_lambda_complete(state);
  else
    update_lambda(state);
  update_tau(state, data, fast_path ? ResidualRoute::complete : ResidualRoute::general);
  update_sparse(state, data);
  update_gamma(state, data);
}

FitResult fit(const DenseTensor& y, const ObservationMask& mask, const FitConfig& config, const HyperPriors& priors) {
  config.validate();
  if (y.order() < 2) throw std::invalid_argument("model requires a tensor of order >= 2");
  if (mask.observed_count() == 0) throw std::invalid_argument("mask has no observed entries");
  const std::size_t rank = config.init_rank == 0 ? default_init_rank(y.shape()) : config.init_rank;
  ObservedData data(y, mask);
  return fit(data, new_state(y, mask, rank, priors, config.init_scheme, config.seed), config);
}

FitResult fit(const ObservedData& data, ModelState state, const FitConfig& config) {
  config.validate();
  if (data.count() == 0) throw std::invalid_argument("mask has no observed entries");
  state.validate();
  const auto start = std::chrono::steady_clock::now();
  FitResult result{std::move(state), {}};
  ModelState& s = result.state;
  FitReport& report = result.report;
  const bool fast = data.complete() && !config.force_general_path;
  const ResidualRoute route = fast ? ResidualRoute::complete : ResidualRoute::general;
  report.fast_path = fast;

  try {
    for (std::size_t iter = 1; iter <= config.max_iters; ++iter) {
      sweep(s, data, fast);
      const double bound = elbo(s, data, route);
      report.elbo_trace.push_back(bound);
      report.rank_trace.push_back(s.rank());
      report.iterations_run = iter;

      const std::size_t ti = report.elbo_trace.size() - 1;
      if (ti > 0 && !report.follows_prune(ti)) {
        const double prev = report.elbo_trace[ti - 1];
        if (std::abs(bound - prev) <= config.tol * std::abs(bound)) {
          report.converged = true;
          break;
        }
      }
      if (config.optimize_gamma_priors && iter > config.hyperopt_after) {
        const auto outcome = optimize_gamma_hyperpriors(s, data);
        if (!outcome.converged || !outcome.accepted) ++report.hyperopt_failures;
      }
      if (iter > config.prune_after) {
        const std::size_t before = s.rank();
        if (prune(s, config.prune_threshold) > 0) report.prune_events.push_back({iter, before, s.rank()});
      }
    }
    report.status = report.converged ? FitStatus::converged : FitStatus::max_iters;
  } catch (const NumericalError& err) {
    report.status = FitStatus::numerical_failure;
    report.message = err.what();
  }
  report.inferred_rank = s.rank();
  report.wall_time_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return result;
}

}  // namespace brtf
