#include "brtf/predict.hpp"

#include <limits>
#include <stdexcept>

#include "brtf/parallel.hpp"

namespace brtf {

double PredictiveParams::variance() const {
  if (dof <= 2.0) return std::numeric_limits<double>::infinity();
  return dof / (dof - 2.0) / psi;
}

namespace {

// Shared by the single-entry and bulk routes; w is scratch of length R.
PredictiveParams params_at(const ModelState& state, std::span<const std::size_t> index, Vector& w,
                           Vector& prefix) {
  const std::size_t order = state.order();
  const auto rank = static_cast<Eigen::Index>(state.rank());
  // Leave-one-out Hadamard products from prefix/suffix runs.
  std::vector<Vector> suffix(order + 1, Vector::Ones(rank));
  for (std::size_t k = order; k-- > 0;)
    suffix[k] = suffix[k + 1].cwiseProduct(state.factors[k].mean.row(index[k]).transpose());
  prefix.setOnes(rank);
  double spread = 0.0;
  for (std::size_t n = 0; n < order; ++n) {
    w = prefix.cwiseProduct(suffix[n + 1]);
    spread += w.dot(state.factors[n].row_cov[index[n]] * w);
    prefix.array() *= state.factors[n].mean.row(index[n]).transpose().array();
  }
  PredictiveParams p;
  p.mean = prefix.sum();
  p.psi = 1.0 / (state.tau.rate / state.tau.shape + spread);
  p.dof = 2.0 * state.tau.shape;
  return p;
}

}  // namespace

PredictiveParams predictive_params(const ModelState& state, std::span<const std::size_t> index) {
  if (index.size() != state.order()) throw std::out_of_range("index arity does not match tensor order");
  for (std::size_t n = 0; n < index.size(); ++n)
    if (index[n] >= state.shape[n]) throw std::out_of_range("index out of range");
  Vector w, prefix;
  return params_at(state, index, w, prefix);
}

Imputation impute(const ModelState& state, ImputeScope scope) {
  Imputation out;
  out.dof = 2.0 * state.tau.shape;
  for (std::size_t i = 0; i < state.mask.size(); ++i)
    if (scope == ImputeScope::all || !state.mask[i]) out.linear.push_back(i);
  out.mean.resize(out.linear.size());
  out.variance.resize(out.linear.size());
  const DenseTensor probe(state.shape);
  parallel_for(out.linear.size(), [&](std::size_t begin, std::size_t end) {
    Vector w, prefix;
    std::vector<std::size_t> idx(state.order());
    for (std::size_t j = begin; j < end; ++j) {
      probe.unravel(out.linear[j], idx);
      const auto p = params_at(state, idx, w, prefix);
      out.mean[j] = p.mean;
      out.variance[j] = p.variance();
    }
  });
  return out;
}

DenseTensor predictive_mean_tensor(const ModelState& state) { return cp_reconstruct(state.factor_means()); }

DenseTensor predictive_variance_tensor(const ModelState& state) {
  const Imputation all = impute(state, ImputeScope::all);
  return DenseTensor(state.shape, all.variance);
}

}  // namespace brtf
