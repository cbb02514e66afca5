#include "prevmap/incidence.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <set>

#include "prevmap/optimize.hpp"
#include "prevmap/rng.hpp"

namespace prevmap {

namespace {

// Whitened Poisson-GP objective over x = [beta0, w] with f = L w:
//   sum_i [E_i exp(beta0 + f_i) - c_i (beta0 + f_i)] + 0.5 ||w||^2.
// Hyperparameters are fixed per fit, so the GP log-determinant is constant
// and omitted.
class WhitenedPoissonObjective : public Objective {
 public:
  WhitenedPoissonObjective(Eigen::VectorXd counts, Eigen::VectorXd exposure,
                           Eigen::MatrixXd chol_lower)
      : c_(std::move(counts)), e_(std::move(exposure)), L_(std::move(chol_lower)) {}

  Eigen::Index dim() const override { return 1 + c_.size(); }

  double value_grad(const Eigen::VectorXd& x,
                    Eigen::VectorXd& grad) const override {
    const double beta0 = x[0];
    const Eigen::VectorXd w = x.tail(c_.size());
    const Eigen::VectorXd f = L_ * w;
    double val = 0.5 * w.squaredNorm();
    Eigen::VectorXd resid(c_.size());
    for (Eigen::Index i = 0; i < c_.size(); ++i) {
      const double eta = beta0 + f[i];
      const double mu = e_[i] * std::exp(eta);
      val += mu - c_[i] * eta;
      resid[i] = mu - c_[i];
    }
    grad.resize(dim());
    grad[0] = resid.sum();
    grad.tail(c_.size()) = L_.transpose() * resid + w;
    return val;
  }

 private:
  Eigen::VectorXd c_, e_;
  Eigen::MatrixXd L_;
};

// Natural-coordinate objective over (beta0, f) used for the Newton polish and
// the reported curvature. Supplies the analytic Hessian.
class CenteredPoissonObjective : public Objective {
 public:
  CenteredPoissonObjective(Eigen::VectorXd counts, Eigen::VectorXd exposure,
                           Eigen::MatrixXd k_inv)
      : c_(std::move(counts)), e_(std::move(exposure)), kinv_(std::move(k_inv)) {}

  Eigen::Index dim() const override { return 1 + c_.size(); }

  double value_grad(const Eigen::VectorXd& x,
                    Eigen::VectorXd& grad) const override {
    const double beta0 = x[0];
    const Eigen::VectorXd f = x.tail(c_.size());
    const Eigen::VectorXd kf = kinv_ * f;
    double val = 0.5 * f.dot(kf);
    Eigen::VectorXd resid(c_.size());
    for (Eigen::Index i = 0; i < c_.size(); ++i) {
      const double eta = beta0 + f[i];
      const double mu = e_[i] * std::exp(eta);
      val += mu - c_[i] * eta;
      resid[i] = mu - c_[i];
    }
    grad.resize(dim());
    grad[0] = resid.sum();
    grad.tail(c_.size()) = resid + kf;
    return val;
  }

  bool has_hessian() const override { return true; }

  Eigen::MatrixXd hessian(const Eigen::VectorXd& x) const override {
    const double beta0 = x[0];
    const Eigen::VectorXd f = x.tail(c_.size());
    const Eigen::Index n = c_.size();
    Eigen::VectorXd mu(n);
    for (Eigen::Index i = 0; i < n; ++i) mu[i] = e_[i] * std::exp(beta0 + f[i]);
    Eigen::MatrixXd h(n + 1, n + 1);
    h(0, 0) = mu.sum();
    h.block(0, 1, 1, n) = mu.transpose();
    h.block(1, 0, n, 1) = mu;
    h.block(1, 1, n, n) = kinv_;
    h.block(1, 1, n, n).diagonal() += mu;
    return h;
  }

 private:
  Eigen::VectorXd c_, e_;
  Eigen::MatrixXd kinv_;
};

Eigen::MatrixXd facility_locations(const FacilityPanel& panel,
                                   const GridSpec& grid,
                                   const std::vector<int>& idx) {
  Eigen::MatrixXd loc(idx.size(), 2);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    const auto& f = panel.facilities[idx[i]];
    const auto [x, y] = cell_center(grid, f.row, f.col);
    loc(i, 0) = x;
    loc(i, 1) = y;
  }
  return loc;
}

}  // namespace

void IncidenceModelConfig::validate() const {
  if (!(rho > 0) || !(sigma2 > 0))
    throw ValidationError("incidence model requires rho > 0 and sigma2 > 0");
}

IncidenceMonthFit fit_incidence_month(const FacilityPanel& panel,
                                      const GridSpec& grid, int month,
                                      const IncidenceModelConfig& config) {
  config.validate();
  if (month < 0 || month >= panel.n_months)
    throw BoundsError("month index outside the panel");

  IncidenceMonthFit fit;
  fit.log_rate_floor = config.log_rate_floor;
  std::vector<double> counts, exposures;
  for (std::size_t i = 0; i < panel.facilities.size(); ++i) {
    const auto& fac = panel.facilities[i];
    const double c = fac.monthly_cases.at(month);
    const double e = fac.catchment_for_month(panel.months, month);
    if (std::isnan(c) || std::isnan(e) || e <= 0.0) {
      fit.excluded.push_back(static_cast<int>(i));
      continue;
    }
    fit.used.push_back(static_cast<int>(i));
    counts.push_back(c);
    exposures.push_back(e);
  }
  if (fit.used.empty())
    throw ValidationError("no usable facilities for month " +
                          std::to_string(month));

  const Eigen::Index n = static_cast<Eigen::Index>(fit.used.size());
  Eigen::VectorXd c = Eigen::Map<Eigen::VectorXd>(counts.data(), n);
  Eigen::VectorXd e = Eigen::Map<Eigen::VectorXd>(exposures.data(), n);

  const MaternKernel kernel{config.rho, config.sigma2};
  const double jitter = kGramJitter * config.sigma2;
  const Eigen::MatrixXd locations = facility_locations(panel, grid, fit.used);
  const Eigen::MatrixXd K = gram_matrix(kernel, locations, jitter);
  Eigen::LLT<Eigen::MatrixXd> llt(K);
  if (llt.info() != Eigen::Success) {
    llt.compute(K + 100 * jitter * Eigen::MatrixXd::Identity(n, n));
    if (llt.info() != Eigen::Success)
      throw FactorizationError("incidence Gram matrix is not positive definite");
  }
  const Eigen::MatrixXd L = llt.matrixL();
  const Eigen::MatrixXd kinv =
      llt.solve(Eigen::MatrixXd::Identity(n, n));

  fit.field.locations = locations;
  fit.field.kernel = kernel;
  fit.jitter = jitter;

  const double total_c = c.sum();
  const double total_e = e.sum();
  const double beta0_mle =
      std::max(std::log(std::max(total_c, 0.0) / total_e),
               config.log_rate_floor);

  CenteredPoissonObjective centered(c, e, kinv);
  if (total_c == 0.0) {
    // No informative data this month: flat field at the floored rate MLE.
    fit.degenerate = true;
    fit.beta0 = config.log_rate_floor;
    fit.field.mode = Eigen::VectorXd::Zero(n);
    Eigen::VectorXd x(n + 1);
    x[0] = fit.beta0;
    x.tail(n).setZero();
    fit.field.hessian = centered.hessian(x);
    fit.alpha = Eigen::VectorXd::Zero(n);
    return fit;
  }

  WhitenedPoissonObjective whitened(c, e, L);
  Eigen::VectorXd init = Eigen::VectorXd::Zero(n + 1);
  init[0] = std::isfinite(beta0_mle) ? beta0_mle : 0.0;
  ModeOptions wopts;
  wopts.grad_tol = 1e-8;
  wopts.require_convergence = false;
  wopts.polish_iterations = 0;
  // scale the beta0 direction like the likelihood curvature at the start
  wopts.h0_diag = Eigen::VectorXd::Ones(n + 1);
  wopts.h0_diag[0] = 1.0 / std::max(1.0, total_c);
  int iters = 0;
  double gnorm = 0.0;
  const Eigen::VectorXd wmode = minimize_bfgs(whitened, init, wopts, &iters, &gnorm);

  Eigen::VectorXd x(n + 1);
  x[0] = wmode[0];
  x.tail(n) = L * wmode.tail(n);
  ModeOptions copts;
  copts.max_iterations = 0;  // polish only
  const ModeResult polished = find_mode(centered, x, copts);

  fit.beta0 = polished.mode[0];
  fit.field.mode = polished.mode.tail(n);
  fit.field.hessian = polished.hessian;
  fit.iterations = iters + polished.iterations;
  fit.grad_norm = polished.grad_norm;
  fit.alpha = llt.solve(fit.field.mode);
  return fit;
}

Eigen::VectorXd predict_incidence_at(const IncidenceMonthFit& fit,
                                     const Eigen::MatrixXd& points) {
  const auto& kernel = std::get<MaternKernel>(fit.field.kernel);
  const Eigen::MatrixXd ks =
      cross_gram(kernel, points, fit.field.locations, fit.jitter);
  Eigen::VectorXd eta = (ks * fit.alpha).array() + fit.beta0;
  for (Eigen::Index i = 0; i < eta.size(); ++i)
    eta[i] = std::max(eta[i], fit.log_rate_floor);
  return eta;
}

Raster predict_incidence_surface(const IncidenceMonthFit& fit,
                                 const Raster& templ) {
  templ.validate();
  Raster out = templ;
  std::vector<std::pair<int, int>> cells;
  for (int r = 0; r < templ.spec.nrows; ++r)
    for (int c = 0; c < templ.spec.ncols; ++c)
      if (!templ.missing(r, c)) cells.emplace_back(r, c);

  Eigen::MatrixXd pts(cells.size(), 2);
  for (std::size_t i = 0; i < cells.size(); ++i) {
    const auto [x, y] = cell_center(templ.spec, cells[i].first, cells[i].second);
    pts(i, 0) = x;
    pts(i, 1) = y;
  }
  const Eigen::VectorXd eta = predict_incidence_at(fit, pts);
  for (std::size_t i = 0; i < cells.size(); ++i)
    out.at(cells[i].first, cells[i].second) = eta[static_cast<Eigen::Index>(i)];
  return out;
}

std::pair<double, double> select_hyperparameters(
    const FacilityPanel& panel, const GridSpec& grid,
    const std::vector<std::pair<double, double>>& candidates, int folds,
    std::uint64_t seed, std::vector<HyperSearchEntry>* table) {
  if (candidates.empty())
    throw ValidationError("hyperparameter search needs at least one candidate");
  if (folds < 2) throw PartitionError("hyperparameter search needs >= 2 folds");
  const int nfac = static_cast<int>(panel.facilities.size());
  if (folds > nfac)
    throw PartitionError("more folds than facilities");

  // seeded shuffle -> k contiguous chunks
  std::vector<int> order(nfac);
  for (int i = 0; i < nfac; ++i) order[i] = i;
  Rng rng(derive_seed(seed, "incidence-folds"));
  for (int i = nfac - 1; i > 0; --i)
    std::swap(order[i], order[rng.uniform_index(i + 1)]);
  std::vector<std::vector<int>> fold_members(folds);
  for (int i = 0; i < nfac; ++i) fold_members[i % folds].push_back(order[i]);
  for (const auto& f : fold_members)
    if (f.empty()) throw PartitionError("empty hyperparameter search fold");

  double best_ll = 0.0;
  std::pair<double, double> best = candidates.front();
  bool first = true;
  for (const auto& [rho, sigma2] : candidates) {
    IncidenceModelConfig cfg;
    cfg.rho = rho;
    cfg.sigma2 = sigma2;
    double ll = 0.0;
    for (int k = 0; k < folds; ++k) {
      const std::set<int> heldout(fold_members[k].begin(), fold_members[k].end());
      FacilityPanel train;
      train.months = panel.months;
      train.n_months = panel.n_months;
      for (int i = 0; i < nfac; ++i)
        if (!heldout.count(i)) train.facilities.push_back(panel.facilities[i]);
      if (train.facilities.empty()) throw PartitionError("fold leaves no training data");

      Eigen::MatrixXd pts(heldout.size(), 2);
      std::vector<int> hidx(heldout.begin(), heldout.end());
      for (std::size_t i = 0; i < hidx.size(); ++i) {
        const auto& f = panel.facilities[hidx[i]];
        const auto [x, y] = cell_center(grid, f.row, f.col);
        pts(i, 0) = x;
        pts(i, 1) = y;
      }
      for (int t = 0; t < panel.n_months; ++t) {
        const IncidenceMonthFit fit = fit_incidence_month(train, grid, t, cfg);
        const Eigen::VectorXd eta = predict_incidence_at(fit, pts);
        for (std::size_t i = 0; i < hidx.size(); ++i) {
          const auto& f = panel.facilities[hidx[i]];
          const double c = f.monthly_cases.at(t);
          const double e = f.catchment_for_month(panel.months, t);
          if (std::isnan(c) || std::isnan(e) || e <= 0.0) continue;
          const double mu = e * std::exp(eta[static_cast<Eigen::Index>(i)]);
          ll += c * std::log(mu) - mu - std::lgamma(c + 1.0);
        }
      }
    }
    if (table) table->push_back({rho, sigma2, ll});
    const bool better =
        first || ll > best_ll ||
        (ll == best_ll && (sigma2 < best.second ||
                           (sigma2 == best.second && rho > best.first)));
    if (better) {
      best_ll = ll;
      best = {rho, sigma2};
      first = false;
    }
  }
  return best;
}

Raster annualize_incidence(const std::vector<Raster>& monthly_log_incidence,
                           const Raster* population) {
  if (monthly_log_incidence.size() != 12)
    throw AggregationError("annual aggregation needs exactly 12 monthly surfaces, got " +
                           std::to_string(monthly_log_incidence.size()));
  const GridSpec& spec = monthly_log_incidence.front().spec;
  for (const auto& r : monthly_log_incidence) {
    r.validate();
    if (!r.spec.compatible(spec))
      throw CompatibilityError("monthly surfaces have incompatible grids");
  }
  if (population && !population->spec.compatible(spec))
    throw CompatibilityError("population grid incompatible with surfaces");

  Raster out(spec, spec.nodata);
  for (int r = 0; r < spec.nrows; ++r)
    for (int c = 0; c < spec.ncols; ++c) {
      if (population && population->missing(r, c)) continue;
      bool ok = true;
      double total = 0.0;
      for (const auto& m : monthly_log_incidence) {
        if (m.missing(r, c)) {
          ok = false;
          break;
        }
        total += std::exp(m.at(r, c));
      }
      if (ok) out.at(r, c) = total;
    }
  return out;
}

const Raster& IncidenceSurfaceSet::surface(int month_index) const {
  if (month_index < 0 || month_index >= static_cast<int>(surfaces.size()))
    throw BoundsError("no incidence surface for month index " +
                      std::to_string(month_index));
  return surfaces[month_index];
}

std::string incidence_surface_filename(int year, int month) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "incidence_%04d_%02d.asc", year, month);
  return buf;
}

IncidenceSurfaceSet load_incidence_surfaces(const std::string& dir) {
  namespace fs = std::filesystem;
  std::vector<std::pair<int, fs::path>> found;  // (year*12+month-1, path)
  for (const auto& entry : fs::directory_iterator(dir)) {
    const std::string name = entry.path().filename().string();
    int y = 0, m = 0;
    if (std::sscanf(name.c_str(), "incidence_%d_%d.asc", &y, &m) == 2)
      found.emplace_back(y * 12 + (m - 1), entry.path());
  }
  if (found.empty())
    throw ValidationError("no incidence_YYYY_MM.asc surfaces in " + dir);
  std::sort(found.begin(), found.end());
  for (std::size_t i = 1; i < found.size(); ++i)
    if (found[i].first != found[i - 1].first + 1)
      throw ValidationError("incidence surfaces in " + dir +
                            " do not form a contiguous monthly sequence");

  IncidenceSurfaceSet set;
  set.months.start_year = found.front().first / 12;
  set.months.start_month = found.front().first % 12 + 1;
  for (const auto& [key, path] : found) {
    (void)key;
    set.surfaces.push_back(read_ascii_grid(path.string()));
    if (!set.surfaces.back().spec.compatible(set.surfaces.front().spec))
      throw CompatibilityError("incidence surfaces have incompatible grids");
  }
  return set;
}

}  // namespace prevmap
