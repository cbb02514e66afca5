#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "prevmap/covariates.hpp"
#include "prevmap/cube.hpp"
#include "prevmap/incidence.hpp"
#include "prevmap/laplace.hpp"
#include "prevmap/optimize.hpp"

namespace prevmap {

/// Fixed prior constants of the prevalence model; serialized into every fit
/// report. The incidence-weight priors act on the log-scale base parameters,
/// which keeps beta0_inc and beta1_inc non-negative by construction.
struct PriorSpec {
  double beta0_sd = 1.0;
  double beta_sd = 0.25;  // covariate coefficients and incidence-weight bases
  double log_rho_mean = 3.0;
  double log_rho_sd = 0.1;
  double log_sigma_mean = 0.0;
  double log_sigma_sd = 0.1;
  double log_kappa_mean = 3.0;
  double log_kappa_sd = 0.1;

  void validate() const;
};

struct DesignOptions {
  int n_knots = 51;
  /// The final modeled month has no t+1 surface; reuse its own surface for the
  /// lead term (default) or drop clusters observed in that month.
  bool reuse_final_month_lead = true;
};

/// Assembled model inputs: standardized covariates, standardized log-incidence
/// pairs, the 1-D knot grid for g, and deduplicated cluster locations.
struct PrevalenceDesign {
  std::vector<FeatureSpec> features;  // columns of X after constant-dropping
  Eigen::MatrixXd X;
  Eigen::VectorXd col_mean, col_sd;
  Eigen::VectorXd z0, z1;  // standardized log incidence at t and t+1
  double z_mean = 0.0, z_sd = 1.0;
  Eigen::VectorXd knots;
  Eigen::VectorXi loc_index;   // cluster -> row of locations
  Eigen::MatrixXd locations;   // distinct survey cell centers
  Eigen::VectorXd y, n;        // positives, tested
  std::vector<std::string> dropped_constant;
  std::vector<std::string> dropped_final_month;

  int n_clusters() const { return static_cast<int>(y.size()); }
  int n_features() const { return static_cast<int>(features.size()); }
  int n_knots() const { return static_cast<int>(knots.size()); }
  int n_locations() const { return static_cast<int>(locations.rows()); }
};

PrevalenceDesign build_design(const std::vector<SurveyCluster>& surveys,
                              const CovariateStack& covariates,
                              const IncidenceSurfaceSet& surfaces,
                              const std::vector<FeatureSpec>& features,
                              const DesignOptions& opts = {});

/// Offsets into the joint parameter vector
/// [beta0 | beta(p) | u0 | u1 | g(q) | f(m) | log rho | log sigma | log kappa].
struct ParamLayout {
  int p = 0, q = 0, m = 0;
  int beta0() const { return 0; }
  int beta() const { return 1; }
  int u0() const { return 1 + p; }
  int u1() const { return 2 + p; }
  int g() const { return 3 + p; }
  int f() const { return 3 + p + q; }
  int log_rho() const { return 3 + p + q + m; }
  int log_sigma() const { return 4 + p + q + m; }
  int log_kappa() const { return 5 + p + q + m; }
  int dim() const { return 6 + p + q + m; }
};

/// The centered negative log posterior with analytic gradient (the surface
/// grad_check probes).
std::unique_ptr<Objective> prevalence_objective(const PrevalenceDesign& design,
                                                const PriorSpec& priors);

struct PrevalenceFit {
  PriorSpec priors;
  PrevalenceDesign design;
  ParamLayout layout;
  Eigen::VectorXd mode;
  Eigen::MatrixXd hessian;
  std::uint64_t seed = 0;
  int iterations = 0;
  double grad_norm = 0.0;
  bool separation_flag = false;
  std::map<std::string, std::string> provenance;

  double beta0() const { return mode[layout.beta0()]; }
  Eigen::VectorXd beta() const { return mode.segment(layout.beta(), layout.p); }
  double inc_weight0() const { return std::exp(mode[layout.u0()]); }
  double inc_weight1() const { return std::exp(mode[layout.u1()]); }
  Eigen::VectorXd g_knots() const { return mode.segment(layout.g(), layout.q); }
  Eigen::VectorXd f_values() const { return mode.segment(layout.f(), layout.m); }
  double rho() const { return std::exp(mode[layout.log_rho()]); }
  double sigma2() const { return std::exp(2.0 * mode[layout.log_sigma()]); }
  double kappa() const { return std::exp(mode[layout.log_kappa()]); }

  LatentField g_field() const;
  LatentField spatial_field() const;
};

/// Joint MAP of all parameters and latent fields under the binomial
/// likelihood, the GP priors and PriorSpec; gradient inf-norm < 1e-6 at the
/// returned mode. Curvature is dense, from central differences of the
/// analytic gradient.
PrevalenceFit fit_prevalence(const PrevalenceDesign& design,
                             const PriorSpec& priors, std::uint64_t seed);

void save_model(const PrevalenceFit& fit, const std::string& path);
PrevalenceFit load_model(const std::string& path);

/// Shared posterior-sample evaluator: draws Laplace samples once, then turns
/// design points (standardized covariates, standardized incidence inputs,
/// spatial coordinates) into per-sample prevalences.
class PrevalencePredictor {
 public:
  PrevalencePredictor(const PrevalenceFit& fit, int n_samples,
                      std::uint64_t seed);

  int n_samples() const { return static_cast<int>(draws_.rows()); }

  /// Conditional mean of the spatial field at each point, per sample
  /// (points x samples).
  Eigen::MatrixXd spatial_field_at(const Eigen::MatrixXd& points) const;

  /// Prevalence draws at one design point given its spatial-field draws.
  Eigen::VectorXd prevalence_samples(const Eigen::VectorXd& x_std, double z0,
                                     double z1,
                                     const Eigen::VectorXd& f_star) const;

  /// True when z lies more than `scales` posterior-mode kernel scales outside
  /// the training knot range.
  bool extrapolates(double z, double scales) const;

 private:
  const PrevalenceFit& fit_;
  Eigen::MatrixXd draws_;   // samples x dim
  Eigen::MatrixXd alpha_;   // locations x samples, K_s^-1 f_s per sample
  Eigen::VectorXd g_mean_;  // per-sample mean of g knot values
};

struct PredictOptions {
  int n_samples = 200;
  std::uint64_t seed = 1;
  double extrapolation_scales = 3.0;
};

struct PredictDiagnostics {
  long extrapolation_count = 0;                      // pixel-months flagged
  std::vector<std::array<int, 3>> extrapolated;      // (month, row, col), capped
  static constexpr std::size_t kMaxRecorded = 10000;
};

/// Posterior sample cube over the template's non-missing cells for model
/// months [first_month, first_month + n_months).
SampleCube predict_prevalence(const PrevalenceFit& fit,
                              const CovariateStack& covariates,
                              const IncidenceSurfaceSet& surfaces,
                              const Raster& templ, int first_month,
                              int n_months, const PredictOptions& opts,
                              PredictDiagnostics* diag = nullptr);

/// Posterior mean prevalence at held-out clusters (used by cross-validation
/// and feature-set scoring).
Eigen::VectorXd posterior_mean_prevalence(const PrevalenceFit& fit,
                                          const std::vector<SurveyCluster>& clusters,
                                          const CovariateStack& covariates,
                                          const IncidenceSurfaceSet& surfaces,
                                          const DesignOptions& opts,
                                          int n_samples, std::uint64_t seed);

struct CrossValidationResult {
  std::vector<double> fold_correlation;
  std::vector<int> skipped_folds;
  double mean_correlation = 0.0;
};

/// Seeded k-fold CV: fit on training clusters, predict held-out posterior-mean
/// prevalence, Pearson correlation against observed y/N per fold.
CrossValidationResult cross_validate_kfold(
    const std::vector<SurveyCluster>& surveys, const CovariateStack& covariates,
    const IncidenceSurfaceSet& surfaces, const std::vector<FeatureSpec>& features,
    const PriorSpec& priors, int k, std::uint64_t seed,
    const DesignOptions& opts = {}, int n_samples = 100);

/// Temporal hold-out: fit on one survey year, predict another.
CrossValidationResult cross_validate_temporal(
    const std::vector<SurveyCluster>& surveys, const CovariateStack& covariates,
    const IncidenceSurfaceSet& surfaces, const std::vector<FeatureSpec>& features,
    const PriorSpec& priors, int train_year, int test_year, std::uint64_t seed,
    const DesignOptions& opts = {}, int n_samples = 100);

}  // namespace prevmap
