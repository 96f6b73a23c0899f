#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "brtf/inference.hpp"
#include "brtf/tensor.hpp"

namespace brtf {

/// How the outlier bound H is derived from the clean tensor X.
enum class OutlierMagnitude { ten_std, max_value };
OutlierMagnitude parse_outlier_magnitude(const std::string& name);
std::string to_string(OutlierMagnitude mode);

/// trig: per mode n (1-based) and index i (1-based) the columns
///   sin(2 pi n i / I_n), cos(2 pi n i / I_n), sgn(sin(pi i / 2));
/// only ranks up to 3. gaussian: i.i.d. N(0,1) factor entries, any rank.
enum class FactorFamily { trig, gaussian };
FactorFamily parse_factor_family(const std::string& name);
std::string to_string(FactorFamily family);

struct SyntheticSpec {
  Shape shape{30, 30, 30};
  std::size_t true_rank = 3;
  double outlier_fraction = 0.0;
  OutlierMagnitude outlier_magnitude = OutlierMagnitude::ten_std;
  double noise_variance = 0.01;
  double missing_fraction = 0.0;
  FactorFamily family = FactorFamily::trig;
  std::uint64_t seed = 0;

  void validate() const;
};

struct SyntheticData {
  DenseTensor y;      // X + outliers + noise; 0 at missing entries
  ObservationMask mask;
  DenseTensor truth;  // X
  std::vector<Matrix> factors;
  std::vector<std::size_t> outliers;  // linear indices, increasing
  double outlier_bound = 0.0;         // H
};

SyntheticData generate_synthetic(const SyntheticSpec& spec);

/// The trig factor matrix of one mode (mode is 0-based).
Matrix trig_factor(std::size_t extent, std::size_t mode, std::size_t rank);

/// ||estimate - truth|| / ||truth|| (Frobenius), optionally over a mask.
double rrse(const DenseTensor& estimate, const DenseTensor& truth);
double rrse(const DenseTensor& estimate, const DenseTensor& truth, const ObservationMask& mask);

/// Maximum-weight assignment of rows to columns (weights >= 0). Returns, for
/// each row, its column or -1 when the matrix has more rows than columns.
std::vector<long> optimal_assignment(const Matrix& weights);

/// prod_n |<est_n(:,r), true_n(:,s)>| / (||est_n(:,r)|| ||true_n(:,s)||) for
/// every pair (r, s). An all-zero estimated column has congruence 0 with
/// everything; an all-zero true column is an error.
Matrix congruence_matrix(const std::vector<Matrix>& estimated, const std::vector<Matrix>& truth);

/// 1 - (1/R_true) * sum of optimally matched congruences.
double fme(const std::vector<Matrix>& estimated, const std::vector<Matrix>& truth);

struct ExperimentGrid {
  SyntheticSpec base;
  std::vector<double> outlier_fractions{0.1};
  std::vector<OutlierMagnitude> outlier_modes{OutlierMagnitude::ten_std};
  std::vector<double> missing_fractions{0.0};
  std::size_t repeats = 1;
  std::uint64_t seed = 0;
  FitConfig fit;
};

struct ExperimentRow {
  std::size_t config = 0;
  std::size_t repeat = 0;
  double outlier_fraction = 0.0;
  OutlierMagnitude outlier_mode = OutlierMagnitude::ten_std;
  double missing_fraction = 0.0;
  std::uint64_t seed = 0;
  double rrse = 0.0;
  double rrse_missing = 0.0;  // NaN when nothing is missing
  double fme = 0.0;
  std::size_t inferred_rank = 0;
  double runtime_seconds = 0.0;
  std::string status;  // fit status, or "error: ..."
};

/// One row per (configuration, repeat); configurations enumerate outlier
/// fraction fastest, then mode, then missing fraction. Everything but the
/// runtime column is a function of the grid.
std::vector<ExperimentRow> run_experiment(const ExperimentGrid& grid);

}  // namespace brtf
