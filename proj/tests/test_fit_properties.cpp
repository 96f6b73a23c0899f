#include <random>

#include "doctest.h"
#include "oracles.hpp"

#include "brtf/inference.hpp"
#include "brtf/synth.hpp"

// Whole-fit properties that the current initialization does not deliver.
// Both cases fail; see the README's "Known limitations".

using namespace brtf;

TEST_CASE("noiseless rank-1 tensor: relative ELBO change reaches tolerance") {
  std::mt19937_64 rng(3);
  std::vector<Matrix> truth{oracle::random_matrix(5, 1, rng), oracle::random_matrix(5, 1, rng),
                            oracle::random_matrix(5, 1, rng)};
  const DenseTensor x = cp_reconstruct(truth);
  FitConfig cfg;
  cfg.init_rank = 5;
  cfg.max_iters = 500;
  const FitResult res = fit(x, ObservationMask(x.shape(), true), cfg);
  CHECK(res.report.inferred_rank == 1);
  CHECK(res.report.converged);
  CHECK(res.report.status == FitStatus::converged);
}

TEST_CASE("fitting a rescaled tensor gives a rescaled estimate") {
  SyntheticSpec spec;
  spec.outlier_fraction = 0.1;
  spec.seed = 2;
  const SyntheticData d = generate_synthetic(spec);
  FitConfig cfg;
  cfg.init_rank = 10;
  cfg.seed = 2;
  cfg.optimize_gamma_priors = false;
  const double base = rrse(cp_reconstruct(fit(d.y, d.mask, cfg).state.factor_means()), d.truth);
  for (double alpha : {0.1, 10.0}) {
    DenseTensor scaled = d.y;
    for (std::size_t i = 0; i < scaled.size(); ++i) scaled[i] *= alpha;
    DenseTensor est = cp_reconstruct(fit(scaled, d.mask, cfg).state.factor_means());
    for (std::size_t i = 0; i < est.size(); ++i) est[i] /= alpha;
    CHECK(rrse(est, d.truth) == doctest::Approx(base).epsilon(0.1));
  }
}
