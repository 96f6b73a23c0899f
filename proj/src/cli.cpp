#include "brtf/cli.hpp"

#include <filesystem>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "brtf/inference.hpp"
#include "brtf/io.hpp"
#include "brtf/predict.hpp"
#include "brtf/synth.hpp"

namespace brtf {
namespace fs = std::filesystem;

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw IoError(IoErrc::open_failed, "cannot create directory " + dir.string());
}

std::string join_shape(const Shape& shape) {
  std::string s;
  for (std::size_t n = 0; n < shape.size(); ++n) s += (n ? "x" : "") + std::to_string(shape[n]);
  return s;
}

// ---------------------------------------------------------------------------

struct SimulateArgs {
  fs::path output_dir;
  std::vector<std::size_t> shape{30, 30, 30};
  std::size_t rank = 3;
  double outlier_fraction = 0.1;
  std::string outlier_magnitude = "10std";
  double noise_variance = 0.01;
  double missing_fraction = 0.0;
  std::string family = "trig";
  std::uint64_t seed = 0;
};

int run_simulate(const SimulateArgs& a, std::ostream& out) {
  SyntheticSpec spec;
  spec.shape = a.shape;
  spec.true_rank = a.rank;
  spec.outlier_fraction = a.outlier_fraction;
  spec.outlier_magnitude = parse_outlier_magnitude(a.outlier_magnitude);
  spec.noise_variance = a.noise_variance;
  spec.missing_fraction = a.missing_fraction;
  spec.family = parse_factor_family(a.family);
  spec.seed = a.seed;
  const SyntheticData data = generate_synthetic(spec);

  ensure_dir(a.output_dir);
  write_tensor(a.output_dir / "y.brtf", data.y);
  write_mask(a.output_dir / "mask.brtm", data.mask);
  write_tensor(a.output_dir / "truth.brtf", data.truth);
  for (std::size_t n = 0; n < data.factors.size(); ++n) {
    const Matrix& f = data.factors[n];
    DenseTensor t({static_cast<std::size_t>(f.rows()), static_cast<std::size_t>(f.cols())});
    for (Eigen::Index i = 0; i < f.rows(); ++i)
      for (Eigen::Index r = 0; r < f.cols(); ++r) t[static_cast<std::size_t>(i * f.cols() + r)] = f(i, r);
    write_tensor(a.output_dir / ("factor_" + std::to_string(n) + ".brtf"), t);
  }
  std::string csv = "linear";
  for (std::size_t n = 0; n < spec.shape.size(); ++n) csv += ",i" + std::to_string(n);
  csv += "\n";
  std::vector<std::size_t> idx(spec.shape.size());
  for (std::size_t lin : data.outliers) {
    data.y.unravel(lin, idx);
    csv += std::to_string(lin);
    for (std::size_t i : idx) csv += "," + std::to_string(i);
    csv += "\n";
  }
  write_file_atomic(a.output_dir / "outliers.csv", csv);
  out << "simulated " << join_shape(spec.shape) << " tensor, rank " << spec.true_rank << ", "
      << data.outliers.size() << " outliers (H = " << data.outlier_bound << "), "
      << data.mask.size() - data.mask.observed_count() << " missing -> " << a.output_dir.string() << "\n";
  return 0;
}

// ---------------------------------------------------------------------------

struct FitArgs {
  fs::path input;
  fs::path mask;
  fs::path output_dir;
  std::size_t init_rank = 0;
  std::size_t max_iters = 200;
  double tol = 1e-6;
  std::uint64_t seed = 0;
  std::string init = "svd";
  double prune_threshold = 1e-8;
  bool force_general_path = false;
  bool no_hyperprior_opt = false;
  HyperPriors priors;
};

int run_fit(const FitArgs& a, std::ostream& out, std::ostream& err) {
  FitConfig cfg;
  cfg.init_rank = a.init_rank;
  cfg.max_iters = a.max_iters;
  cfg.tol = a.tol;
  cfg.seed = a.seed;
  cfg.init_scheme = parse_init_scheme(a.init);
  cfg.prune_threshold = a.prune_threshold;
  cfg.force_general_path = a.force_general_path;
  cfg.optimize_gamma_priors = !a.no_hyperprior_opt;
  cfg.validate();
  a.priors.validate();

  TensorFile input = read_tensor(a.input);
  ObservationMask mask = input.mask ? *input.mask : ObservationMask(input.data.shape(), true);
  if (!a.mask.empty()) {
    const ObservationMask extra = read_mask(a.mask);
    if (extra.shape() != mask.shape()) throw IoError(IoErrc::shape_mismatch, "mask shape differs from input tensor");
    for (std::size_t i = 0; i < mask.size(); ++i)
      if (!extra[i]) mask.set(i, false);
  }

  const FitResult res = fit(input.data, mask, cfg, a.priors);
  ensure_dir(a.output_dir);
  write_file_atomic(a.output_dir / "report.json", report_json(res.report, res.state.priors));
  if (res.report.status == FitStatus::numerical_failure) {
    err << "brtf fit: numerical failure: " << res.report.message << "\n";
    return 1;
  }
  save_checkpoint(a.output_dir / "model.brtc", res.state);
  write_tensor(a.output_dir / "xhat.brtf", cp_reconstruct(res.state.factor_means()));
  write_tensor(a.output_dir / "sparse.brtf", res.state.sparse.mean);
  out << "fit: " << to_string(res.report.status) << " after " << res.report.iterations_run
      << " iterations, inferred rank " << res.report.inferred_rank << ", ELBO " << res.report.elbo_trace.back()
      << "\n";
  return res.report.converged ? 0 : 2;
}

// ---------------------------------------------------------------------------

struct PredictArgs {
  fs::path model;
  fs::path output_dir;
  bool all = false;
};

int run_predict(const PredictArgs& a, std::ostream& out, std::ostream& err) {
  const ModelState state = load_checkpoint(a.model);
  const Imputation imp = impute(state, a.all ? ImputeScope::all : ImputeScope::missing_only);
  if (imp.size() == 0) err << "brtf predict: warning: the model has no missing entries; nothing to predict\n";

  std::ostringstream csv;
  csv.precision(17);
  csv << "linear";
  for (std::size_t n = 0; n < state.order(); ++n) csv << ",i" << n;
  csv << ",mean,variance,dof\n";
  std::vector<std::size_t> idx(state.order());
  DenseTensor means(state.shape), vars(state.shape);
  ObservationMask covered(state.shape, false);
  for (std::size_t j = 0; j < imp.size(); ++j) {
    const std::size_t lin = imp.linear[j];
    means.unravel(lin, idx);
    csv << lin;
    for (std::size_t i : idx) csv << "," << i;
    csv << "," << imp.mean[j] << "," << imp.variance[j] << "," << imp.dof << "\n";
    means[lin] = imp.mean[j];
    vars[lin] = imp.variance[j];
    covered.set(lin, true);
  }
  ensure_dir(a.output_dir);
  write_file_atomic(a.output_dir / "predictions.csv", csv.str());
  write_tensor(a.output_dir / "predicted_mean.brtf", means, covered);
  write_tensor(a.output_dir / "predicted_variance.brtf", vars, covered);
  out << "predicted " << imp.size() << " entries (dof " << imp.dof << ") -> " << a.output_dir.string() << "\n";
  return 0;
}

// ---------------------------------------------------------------------------

struct EvalArgs {
  // compare mode
  fs::path truth;
  std::vector<fs::path> estimates;
  fs::path mask;
  std::vector<fs::path> truth_factors;
  fs::path model;
  // grid mode
  bool grid = false;
  std::vector<double> outlier_fractions{0.1};
  std::vector<std::string> outlier_modes{"10std"};
  std::vector<double> missing_fractions{0.0};
  std::size_t repeats = 1;
  std::vector<std::size_t> shape{30, 30, 30};
  std::size_t rank = 3;
  std::string family = "trig";
  double noise_variance = 0.01;
  std::size_t init_rank = 10;
  std::size_t max_iters = 200;
  double tol = 1e-6;
  std::string init = "svd";
  std::uint64_t seed = 0;
  fs::path output;
};

Matrix matrix_from_tensor(const DenseTensor& t) {
  if (t.order() != 2) throw IoError(IoErrc::invalid_content, "factor file must hold a matrix");
  Matrix m(static_cast<Eigen::Index>(t.extent(0)), static_cast<Eigen::Index>(t.extent(1)));
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index r = 0; r < m.cols(); ++r) m(i, r) = t[static_cast<std::size_t>(i * m.cols() + r)];
  return m;
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

int run_eval(const EvalArgs& a, std::ostream& out) {
  std::string table;
  if (a.grid) {
    ExperimentGrid g;
    g.base.shape = a.shape;
    g.base.true_rank = a.rank;
    g.base.family = parse_factor_family(a.family);
    g.base.noise_variance = a.noise_variance;
    g.outlier_fractions = a.outlier_fractions;
    g.outlier_modes.clear();
    for (const auto& m : a.outlier_modes) g.outlier_modes.push_back(parse_outlier_magnitude(m));
    g.missing_fractions = a.missing_fractions;
    g.repeats = a.repeats;
    g.seed = a.seed;
    g.fit.init_rank = a.init_rank;
    g.fit.max_iters = a.max_iters;
    g.fit.tol = a.tol;
    g.fit.init_scheme = parse_init_scheme(a.init);
    table = results_csv(run_experiment(g));
  } else {
    if (a.truth.empty() || a.estimates.empty())
      throw UsageError("eval needs --truth and --estimate (or --grid)");
    const DenseTensor truth = read_tensor(a.truth).data;
    std::optional<ObservationMask> mask;
    if (!a.mask.empty()) mask = read_mask(a.mask);
    double factor_error = std::numeric_limits<double>::quiet_NaN();
    if (!a.truth_factors.empty() && !a.model.empty()) {
      std::vector<Matrix> true_factors;
      for (const auto& p : a.truth_factors) true_factors.push_back(matrix_from_tensor(read_tensor(p).data));
      factor_error = fme(load_checkpoint(a.model).factor_means(), true_factors);
    }
    table = "estimate,truth,rrse,rrse_masked,fme\n";
    for (const auto& path : a.estimates) {
      const DenseTensor est = read_tensor(path).data;
      if (est.shape() != truth.shape()) throw IoError(IoErrc::shape_mismatch, path.string() + ": shape differs from truth");
      const double masked = mask ? rrse(est, truth, *mask) : std::numeric_limits<double>::quiet_NaN();
      table += path.string() + "," + a.truth.string() + "," + fmt(rrse(est, truth)) + "," +
               (mask ? fmt(masked) : "nan") + "," + (std::isnan(factor_error) ? "nan" : fmt(factor_error)) + "\n";
    }
  }
  if (a.output.empty()) {
    out << table;
  } else {
    if (a.output.has_parent_path()) ensure_dir(a.output.parent_path());
    write_file_atomic(a.output, table);
  }
  return 0;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Bayesian robust CP tensor factorization"};
  app.name("brtf");
  app.require_subcommand(1);

  SimulateArgs sim;
  auto* s = app.add_subcommand("simulate", "generate a synthetic low-rank tensor with outliers and missing entries");
  s->add_option("--output-dir", sim.output_dir, "directory for the generated files")->required();
  s->add_option("--shape", sim.shape, "extents, e.g. --shape 30 30 30")->expected(2, 64);
  s->add_option("--rank", sim.rank, "true CP rank");
  s->add_option("--outlier-fraction", sim.outlier_fraction)->check(CLI::Range(0.0, 1.0));
  s->add_option("--outlier-magnitude", sim.outlier_magnitude, "10std or max")->check(CLI::IsMember({"10std", "max"}));
  s->add_option("--noise-variance", sim.noise_variance);
  s->add_option("--missing-fraction", sim.missing_fraction)->check(CLI::Range(0.0, 1.0));
  s->add_option("--family", sim.family, "trig (rank <= 3) or gaussian")->check(CLI::IsMember({"trig", "gaussian"}));
  s->add_option("--seed", sim.seed);

  FitArgs fa;
  auto* f = app.add_subcommand("fit", "fit the model to a tensor file");
  f->add_option("--input", fa.input, "tensor file (NaN entries are treated as missing)")->required();
  f->add_option("--mask", fa.mask, "mask file; 0 marks a missing entry");
  f->add_option("--output-dir", fa.output_dir)->required();
  f->add_option("--init-rank", fa.init_rank, "initial rank (0: min(max extent, 100))");
  f->add_option("--max-iters", fa.max_iters)->check(CLI::PositiveNumber);
  f->add_option("--tol", fa.tol, "relative ELBO change for convergence")->check(CLI::PositiveNumber);
  f->add_option("--seed", fa.seed);
  f->add_option("--init", fa.init, "svd (default) or random")->check(CLI::IsMember({"random", "svd"}));
  f->add_option("--prune-threshold", fa.prune_threshold);
  f->add_flag("--force-general-path", fa.force_general_path, "skip the complete-data fast path");
  f->add_flag("--no-hyperprior-opt", fa.no_hyperprior_opt, "keep a0/b0 of the outlier precisions fixed");
  f->add_option("--c0", fa.priors.c0);
  f->add_option("--d0", fa.priors.d0);
  f->add_option("--a0-gamma", fa.priors.a0_gamma);
  f->add_option("--b0-gamma", fa.priors.b0_gamma);
  f->add_option("--a0-tau", fa.priors.a0_tau);
  f->add_option("--b0-tau", fa.priors.b0_tau);

  PredictArgs pa;
  auto* p = app.add_subcommand("predict", "predictive mean/variance of missing (or all) entries");
  p->add_option("--model", pa.model, "checkpoint written by fit")->required();
  p->add_option("--output-dir", pa.output_dir)->required();
  p->add_flag("--all", pa.all, "predict every entry, not only missing ones");

  EvalArgs ea;
  auto* e = app.add_subcommand("eval", "compare estimates with ground truth, or run a synthetic experiment grid");
  e->add_option("--truth", ea.truth);
  e->add_option("--estimate", ea.estimates)->expected(1, 1 << 16);
  e->add_option("--mask", ea.mask, "restrict the masked RRSE column to entries marked 1");
  e->add_option("--truth-factors", ea.truth_factors)->expected(1, 64);
  e->add_option("--model", ea.model, "checkpoint whose factors are scored against --truth-factors");
  e->add_flag("--grid", ea.grid, "run the experiment grid instead of comparing files");
  e->add_option("--outlier-fractions", ea.outlier_fractions)->expected(1, 1024);
  e->add_option("--outlier-modes", ea.outlier_modes)->expected(1, 2);
  e->add_option("--missing-fractions", ea.missing_fractions)->expected(1, 1024);
  e->add_option("--repeats", ea.repeats)->check(CLI::PositiveNumber);
  e->add_option("--shape", ea.shape)->expected(2, 64);
  e->add_option("--rank", ea.rank);
  e->add_option("--family", ea.family)->check(CLI::IsMember({"trig", "gaussian"}));
  e->add_option("--noise-variance", ea.noise_variance);
  e->add_option("--init-rank", ea.init_rank);
  e->add_option("--max-iters", ea.max_iters)->check(CLI::PositiveNumber);
  e->add_option("--tol", ea.tol)->check(CLI::PositiveNumber);
  e->add_option("--init", ea.init)->check(CLI::IsMember({"random", "svd"}));
  e->add_option("--seed", ea.seed);
  e->add_option("--output", ea.output, "CSV destination (default: stdout)");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp& ex) {
    return app.exit(ex, out, err);
  } catch (const CLI::ParseError& ex) {
    app.exit(ex, out, err);
    err << app.help();
    return 1;
  }

  try {
    if (s->parsed()) return run_simulate(sim, out);
    if (f->parsed()) return run_fit(fa, out, err);
    if (p->parsed()) return run_predict(pa, out, err);
    if (e->parsed()) return run_eval(ea, out);
  } catch (const UsageError& ex) {
    err << "brtf: " << ex.what() << "\n" << app.help();
    return 1;
  } catch (const IoError& ex) {
    err << "brtf: I/O error (" << to_string(ex.code()) << "): " << ex.what() << "\n";
    return 1;
  } catch (const std::exception& ex) {
    err << "brtf: error: " << ex.what() << "\n";
    return 1;
  }
  return 1;
}

int cli_main(int argc, char** argv) {
  std::vector<std::string> args;
  for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
  return run_cli(args, std::cout, std::cerr);
}

}  // namespace brtf
