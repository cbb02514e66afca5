#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "prevmap/laplace.hpp"
#include "prevmap/raster.hpp"
#include "prevmap/tables.hpp"

namespace prevmap {

struct IncidenceModelConfig {
  double rho = 1.0;
  double sigma2 = 1.0;
  double log_rate_floor = -20.0;  // guards exp() downstream

  void validate() const;
};

/// One month's fitted Poisson-GP: latent field over the facility sites used,
/// the intercept, and the curvature of the joint (beta0, f) negative log
/// posterior at the mode.
struct IncidenceMonthFit {
  LatentField field;          // mode = f at sites; hessian over (beta0, f)
  double beta0 = 0.0;
  Eigen::VectorXd alpha;      // K^-1 f, cached for prediction
  std::vector<int> used;      // facility indices included in the fit
  std::vector<int> excluded;  // dropped for E <= 0 or a missing report
  double jitter = 0.0;
  int iterations = 0;
  double grad_norm = 0.0;
  bool degenerate = false;    // all-zero counts: flat field at the floored MLE
  double log_rate_floor = -20.0;
};

/// MAP fit of c_i ~ Pois(E_i exp(beta0 + f_i)) with f ~ GP(0, Matern(rho,
/// sigma2, nu=1)) over facility cell centers. Facilities with E <= 0 or a
/// missing count for the month are excluded and listed.
IncidenceMonthFit fit_incidence_month(const FacilityPanel& panel,
                                      const GridSpec& grid, int month,
                                      const IncidenceModelConfig& config);

/// GP conditional mean of beta0 + f at every non-missing cell of the template,
/// floored at config.log_rate_floor. Missing cells carry the template nodata.
Raster predict_incidence_surface(const IncidenceMonthFit& fit,
                                 const Raster& templ);

/// Log incidence at arbitrary points (used for held-out scoring).
Eigen::VectorXd predict_incidence_at(const IncidenceMonthFit& fit,
                                     const Eigen::MatrixXd& points);

struct HyperSearchEntry {
  double rho = 0.0;
  double sigma2 = 0.0;
  double heldout_loglik = 0.0;
};

/// Scores each (rho, sigma2) candidate by held-out Poisson predictive
/// log-likelihood over seeded facility folds, summed over months and folds;
/// ties break toward smaller sigma2 then larger rho.
std::pair<double, double> select_hyperparameters(
    const FacilityPanel& panel, const GridSpec& grid,
    const std::vector<std::pair<double, double>>& candidates, int folds,
    std::uint64_t seed, std::vector<HyperSearchEntry>* table = nullptr);

/// Per-pixel annual rate = sum over 12 monthly surfaces of exp(log incidence).
/// Output is missing where any input month (or the population) is missing.
Raster annualize_incidence(const std::vector<Raster>& monthly_log_incidence,
                           const Raster* population);

/// Monthly log-incidence surfaces on disk: incidence_<YYYY>_<MM>.asc.
struct IncidenceSurfaceSet {
  MonthIndex months;
  std::vector<Raster> surfaces;  // one per month, index 0 = start month

  const Raster& surface(int month_index) const;
};

std::string incidence_surface_filename(int year, int month);
IncidenceSurfaceSet load_incidence_surfaces(const std::string& dir);

}  // namespace prevmap
