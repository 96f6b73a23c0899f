#include "brtf/synth.hpp"

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>
#include <random>
#include <stdexcept>

namespace brtf {

OutlierMagnitude parse_outlier_magnitude(const std::string& name) {
  if (name == "10std" || name == "ten_std") return OutlierMagnitude::ten_std;
  if (name == "max") return OutlierMagnitude::max_value;
  throw std::invalid_argument("unknown outlier magnitude '" + name + "' (expected 10std or max)");
}

std::string to_string(OutlierMagnitude mode) { return mode == OutlierMagnitude::max_value ? "max" : "10std"; }

FactorFamily parse_factor_family(const std::string& name) {
  if (name == "trig") return FactorFamily::trig;
  if (name == "gaussian") return FactorFamily::gaussian;
  throw std::invalid_argument("unknown factor family '" + name + "' (expected trig or gaussian)");
}

std::string to_string(FactorFamily family) { return family == FactorFamily::gaussian ? "gaussian" : "trig"; }

void SyntheticSpec::validate() const {
  if (shape.size() < 2) throw std::invalid_argument("synthetic tensor needs order >= 2");
  for (std::size_t extent : shape)
    if (extent == 0) throw std::invalid_argument("zero extent");
  if (true_rank < 1) throw std::invalid_argument("true_rank must be >= 1");
  if (family == FactorFamily::trig && true_rank > 3)
    throw std::invalid_argument("the trig factor family has only 3 components; use the gaussian family");
  if (!(outlier_fraction >= 0.0 && outlier_fraction <= 1.0))
    throw std::invalid_argument("outlier_fraction must lie in [0, 1]");
  if (!(missing_fraction >= 0.0 && missing_fraction < 1.0))
    throw std::invalid_argument("missing_fraction must lie in [0, 1)");
  if (!(noise_variance >= 0.0) || !std::isfinite(noise_variance))
    throw std::invalid_argument("noise_variance must be finite and >= 0");
}

Matrix trig_factor(std::size_t extent, std::size_t mode, std::size_t rank) {
  if (rank > 3) throw std::invalid_argument("trig factors have at most 3 columns");
  const double freq = 2.0 * std::numbers::pi * static_cast<double>(mode + 1) / static_cast<double>(extent);
  Matrix a(static_cast<Eigen::Index>(extent), static_cast<Eigen::Index>(rank));
  for (std::size_t i = 1; i <= extent; ++i) {
    const auto row = static_cast<Eigen::Index>(i - 1);
    const double t = freq * static_cast<double>(i);
    if (rank > 0) a(row, 0) = std::sin(t);
    if (rank > 1) a(row, 1) = std::cos(t);
    // sgn(sin(pi i / 2)) exactly: 0, 1, 0, -1 for i mod 4 = 0, 1, 2, 3
    if (rank > 2) a(row, 2) = std::array<double, 4>{0.0, 1.0, 0.0, -1.0}[i % 4];
  }
  return a;
}

namespace {

// k distinct indices from [0, n), increasing.
std::vector<std::size_t> sample_without_replacement(std::size_t n, std::size_t k, std::mt19937_64& rng) {
  std::vector<std::size_t> pool(n);
  std::iota(pool.begin(), pool.end(), 0);
  for (std::size_t i = 0; i < k; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, n - 1);
    std::swap(pool[i], pool[pick(rng)]);
  }
  pool.resize(k);
  std::sort(pool.begin(), pool.end());
  return pool;
}

std::size_t fraction_count(double fraction, std::size_t total) {
  return std::min(total, static_cast<std::size_t>(std::llround(fraction * static_cast<double>(total))));
}

}  // namespace

SyntheticData generate_synthetic(const SyntheticSpec& spec) {
  spec.validate();
  std::mt19937_64 rng(spec.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  SyntheticData out;

  for (std::size_t n = 0; n < spec.shape.size(); ++n) {
    if (spec.family == FactorFamily::trig) {
      out.factors.push_back(trig_factor(spec.shape[n], n, spec.true_rank));
    } else {
      Matrix a(static_cast<Eigen::Index>(spec.shape[n]), static_cast<Eigen::Index>(spec.true_rank));
      for (Eigen::Index i = 0; i < a.rows(); ++i)
        for (Eigen::Index r = 0; r < a.cols(); ++r) a(i, r) = normal(rng);
      out.factors.push_back(std::move(a));
    }
  }
  out.truth = cp_reconstruct(out.factors);
  const std::size_t total = out.truth.size();

  const auto x = Eigen::Map<const Vector>(out.truth.data().data(), static_cast<Eigen::Index>(total));
  if (spec.outlier_magnitude == OutlierMagnitude::ten_std) {
    const double mean = x.mean();
    out.outlier_bound = 10.0 * std::sqrt((x.array() - mean).square().mean());
  } else {
    out.outlier_bound = x.maxCoeff();
  }

  out.y = out.truth;
  out.outliers = sample_without_replacement(total, fraction_count(spec.outlier_fraction, total), rng);
  const double h = std::abs(out.outlier_bound);
  std::uniform_real_distribution<double> spike(-h, h);
  for (std::size_t lin : out.outliers) out.y[lin] += spike(rng);

  const double noise_sd = std::sqrt(spec.noise_variance);
  for (std::size_t i = 0; i < total; ++i) out.y[i] += noise_sd * normal(rng);

  out.mask = ObservationMask(spec.shape, true);
  for (std::size_t lin : sample_without_replacement(total, fraction_count(spec.missing_fraction, total), rng)) {
    out.mask.set(lin, false);
    out.y[lin] = 0.0;
  }
  return out;
}

double rrse(const DenseTensor& estimate, const DenseTensor& truth) {
  return rrse(estimate, truth, ObservationMask(truth.shape(), true));
}

double rrse(const DenseTensor& estimate, const DenseTensor& truth, const ObservationMask& mask) {
  if (estimate.shape() != truth.shape() || mask.shape() != truth.shape())
    throw std::invalid_argument("rrse: shape mismatch");
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (!mask[i]) continue;
    const double d = estimate[i] - truth[i];
    num += d * d;
    den += truth[i] * truth[i];
  }
  if (!(den > 0.0)) throw std::invalid_argument("rrse: truth has zero norm on the selected entries");
  return std::sqrt(num / den);
}

std::vector<long> optimal_assignment(const Matrix& weights) {
  const auto rows = static_cast<std::size_t>(weights.rows());
  const auto cols = static_cast<std::size_t>(weights.cols());
  const std::size_t k = std::max(rows, cols);
  if (k == 0) return {};
  // Min-cost square problem on cost = max(w) - w with zero-weight padding.
  const double top = weights.size() ? weights.maxCoeff() : 0.0;
  auto cost = [&](std::size_t i, std::size_t j) {
    return (i < rows && j < cols) ? top - weights(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) : top;
  };
  // Potentials-based Hungarian method, 1-based internals.
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(k + 1, 0.0), v(k + 1, 0.0);
  std::vector<std::size_t> match(k + 1, 0), way(k + 1, 0);
  for (std::size_t i = 1; i <= k; ++i) {
    match[0] = i;
    std::size_t j0 = 0;
    std::vector<double> minv(k + 1, inf);
    std::vector<bool> used(k + 1, false);
    do {
      used[j0] = true;
      const std::size_t i0 = match[j0];
      double delta = inf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= k; ++j) {
        if (used[j]) continue;
        const double cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= k; ++j) {
        if (used[j]) {
          u[match[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (match[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      match[j0] = match[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<long> out(rows, -1);
  for (std::size_t j = 1; j <= k; ++j) {
    const std::size_t i = match[j];
    if (i >= 1 && i <= rows && j <= cols) out[i - 1] = static_cast<long>(j - 1);
  }
  return out;
}

Matrix congruence_matrix(const std::vector<Matrix>& estimated, const std::vector<Matrix>& truth) {
  if (estimated.size() != truth.size() || truth.empty())
    throw std::invalid_argument("fme: factor lists differ in order");
  const Eigen::Index re = estimated.front().cols();
  const Eigen::Index rt = truth.front().cols();
  Matrix c = Matrix::Ones(re, rt);
  for (std::size_t n = 0; n < truth.size(); ++n) {
    const Matrix& e = estimated[n];
    const Matrix& t = truth[n];
    if (e.rows() != t.rows() || e.cols() != re || t.cols() != rt)
      throw std::invalid_argument("fme: factor dimensions disagree");
    const Vector en = e.colwise().norm().transpose();
    const Vector tn = t.colwise().norm().transpose();
    if ((tn.array() == 0.0).any()) throw std::invalid_argument("fme: zero-norm true factor column");
    // A switched-off estimated component (all-zero column) matches nothing.
    Matrix cos = (e.transpose() * t).cwiseAbs().array() / (en * tn.transpose()).array();
    for (Eigen::Index r = 0; r < re; ++r)
      if (en(r) == 0.0) cos.row(r).setZero();
    c.array() *= cos.array();
  }
  return c;
}

double fme(const std::vector<Matrix>& estimated, const std::vector<Matrix>& truth) {
  const Matrix c = congruence_matrix(estimated, truth);
  const auto assignment = optimal_assignment(c);
  double matched = 0.0;
  for (std::size_t r = 0; r < assignment.size(); ++r)
    if (assignment[r] >= 0) matched += c(static_cast<Eigen::Index>(r), assignment[r]);
  const double value = 1.0 - matched / static_cast<double>(c.cols());
  return std::clamp(value, 0.0, 1.0);
}

std::vector<ExperimentRow> run_experiment(const ExperimentGrid& grid) {
  if (grid.outlier_fractions.empty() || grid.outlier_modes.empty() || grid.missing_fractions.empty() ||
      grid.repeats == 0)
    throw std::invalid_argument("experiment grid is empty");
  std::vector<ExperimentRow> rows;
  std::size_t config = 0;
  for (double missing : grid.missing_fractions) {
    for (OutlierMagnitude mode : grid.outlier_modes) {
      for (double fraction : grid.outlier_fractions) {
        for (std::size_t rep = 0; rep < grid.repeats; ++rep) {
          ExperimentRow row;
          row.config = config;
          row.repeat = rep;
          row.outlier_fraction = fraction;
          row.outlier_mode = mode;
          row.missing_fraction = missing;
          row.seed = grid.seed + config * grid.repeats + rep;
          row.rrse = row.rrse_missing = row.fme = std::numeric_limits<double>::quiet_NaN();
          const auto start = std::chrono::steady_clock::now();
          try {
            SyntheticSpec spec = grid.base;
            spec.outlier_fraction = fraction;
            spec.outlier_magnitude = mode;
            spec.missing_fraction = missing;
            spec.seed = row.seed;
            const SyntheticData data = generate_synthetic(spec);
            FitConfig cfg = grid.fit;
            cfg.seed = row.seed;
            const FitResult res = fit(data.y, data.mask, cfg);
            const DenseTensor xhat = cp_reconstruct(res.state.factor_means());
            row.rrse = rrse(xhat, data.truth);
            const ObservationMask held_out = data.mask.complement();
            if (held_out.observed_count() > 0) row.rrse_missing = rrse(xhat, data.truth, held_out);
            row.fme = fme(res.state.factor_means(), data.factors);
            row.inferred_rank = res.report.inferred_rank;
            row.status = to_string(res.report.status);
          } catch (const std::exception& err) {
            row.status = std::string("error: ") + err.what();
          }
          row.runtime_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
          rows.push_back(std::move(row));
        }
        ++config;
      }
    }
  }
  return rows;
}

}  // namespace brtf
