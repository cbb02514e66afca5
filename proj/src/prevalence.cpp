#include "prevmap/prevalence.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include <json.hpp>

#include "prevmap/rng.hpp"

namespace prevmap {

namespace {

inline double softplus(double x) {
  return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

inline double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

// Linear interpolation over an equally spaced knot grid, input clamped to the
// grid. Returns (left index, right weight).
struct KnotGrid {
  double z0 = 0.0, dz = 1.0;
  int q = 0;

  explicit KnotGrid(const Eigen::VectorXd& knots) {
    q = static_cast<int>(knots.size());
    z0 = knots[0];
    dz = q > 1 ? knots[1] - knots[0] : 1.0;
  }
  std::pair<int, double> locate(double z) const {
    if (q == 1) return {0, 0.0};
    double t = (z - z0) / dz;
    t = std::min(std::max(t, 0.0), static_cast<double>(q - 1));
    int k = std::min(static_cast<int>(t), q - 2);
    return {k, t - k};
  }
};

// Kernel matrices evaluated through a table of unique pairwise distances;
// grid-aligned locations repeat distances heavily, so this cuts Bessel calls
// by an order of magnitude.
struct DistanceTable {
  Eigen::Index n = 0;
  std::vector<double> unique_d;
  std::vector<int> index;  // row-major upper triangle (i < j)

  explicit DistanceTable(const Eigen::MatrixXd& locations) {
    n = locations.rows();
    std::map<double, int> seen;
    index.reserve(static_cast<std::size_t>(n) * (n - 1) / 2);
    for (Eigen::Index i = 0; i < n; ++i)
      for (Eigen::Index j = i + 1; j < n; ++j) {
        const double d = (locations.row(i) - locations.row(j)).norm();
        auto [it, inserted] = seen.emplace(d, static_cast<int>(unique_d.size()));
        if (inserted) unique_d.push_back(d);
        index.push_back(it->second);
      }
  }

  template <typename F>
  Eigen::MatrixXd build(double diag, F&& off_diag_of_distance) const {
    std::vector<double> vals(unique_d.size());
    for (std::size_t k = 0; k < unique_d.size(); ++k)
      vals[k] = off_diag_of_distance(unique_d[k]);
    Eigen::MatrixXd m(n, n);
    std::size_t p = 0;
    for (Eigen::Index i = 0; i < n; ++i) {
      m(i, i) = diag;
      for (Eigen::Index j = i + 1; j < n; ++j, ++p)
        m(i, j) = m(j, i) = vals[index[p]];
    }
    return m;
  }
};

struct HyperMats {
  Eigen::MatrixXd kg, kf;        // priors' Gram matrices (with jitter)
  Eigen::LLT<Eigen::MatrixXd> lg, lf;
  double logdet_g = 0.0, logdet_f = 0.0;

  static double logdet(const Eigen::LLT<Eigen::MatrixXd>& llt) {
    return 2.0 * Eigen::MatrixXd(llt.matrixL()).diagonal().array().log().sum();
  }
};

// Everything both parameterizations share.
class PrevalenceCore {
 public:
  PrevalenceCore(const PrevalenceDesign& design, const PriorSpec& priors)
      : d_(design),
        pr_(priors),
        grid_(design.knots),
        dist_f_(design.locations),
        dist_g_(design.knots) {
    layout_.p = d_.n_features();
    layout_.q = d_.n_knots();
    layout_.m = d_.n_locations();
    const int nc = d_.n_clusters();
    w0_.resize(nc);
    w1_.resize(nc);
    for (int i = 0; i < nc; ++i) {
      w0_[i] = grid_.locate(d_.z0[i]);
      w1_[i] = grid_.locate(d_.z1[i]);
    }
  }

  const ParamLayout& layout() const { return layout_; }

  HyperMats hyper(double log_rho, double log_sigma, double log_kappa) const {
    HyperMats h;
    const double rho = std::exp(log_rho);
    const double sigma2 = std::exp(2.0 * log_sigma);
    const double kappa = std::exp(log_kappa);
    const MaternKernel mk{rho, sigma2};
    const SquaredExpKernel sk{kappa};
    h.kf = dist_f_.build(sigma2 * (1.0 + kGramJitter),
                         [&](double d) { return mk(d); });
    h.kg = dist_g_.build(1.0 + kGramJitter, [&](double d) { return sk(d); });
    h.lf.compute(h.kf);
    h.lg.compute(h.kg);
    if (h.lf.info() != Eigen::Success || h.lg.info() != Eigen::Success)
      throw FactorizationError("prevalence GP Gram matrix failed to factorize");
    h.logdet_f = HyperMats::logdet(h.lf);
    h.logdet_g = HyperMats::logdet(h.lg);
    return h;
  }

  Eigen::MatrixXd dk_dlogrho(double log_rho, double log_sigma) const {
    const MaternKernel mk{std::exp(log_rho), std::exp(2.0 * log_sigma)};
    return dist_f_.build(0.0, [&](double d) { return mk.d_dlogrho(d); });
  }

  Eigen::MatrixXd dk_dlogkappa(double log_kappa) const {
    const SquaredExpKernel sk{std::exp(log_kappa)};
    return dist_g_.build(0.0, [&](double d) { return sk.d_dlogkappa(d); });
  }

  // Binomial NLL plus fixed-effect priors, with gradients. Latent-field prior
  // terms are handled by the caller.
  struct LikEval {
    double value = 0.0;
    double g_beta0 = 0.0, g_u0 = 0.0, g_u1 = 0.0;
    Eigen::VectorXd g_beta, g_g, g_f;
  };

  LikEval likelihood(double beta0, const Eigen::VectorXd& beta, double u0,
                     double u1, const Eigen::VectorXd& g,
                     const Eigen::VectorXd& f) const {
    const int nc = d_.n_clusters();
    const int q = layout_.q;
    const double b0 = std::exp(u0), b1 = std::exp(u1);
    const double gbar = g.mean();

    LikEval ev;
    ev.g_beta = Eigen::VectorXd::Zero(layout_.p);
    ev.g_g = Eigen::VectorXd::Zero(q);
    ev.g_f = Eigen::VectorXd::Zero(layout_.m);

    double gsum_correction = 0.0;  // accumulates the -mean(g) chain rule
    for (int i = 0; i < nc; ++i) {
      const auto [k0, t0] = w0_[i];
      const auto [k1, t1] = w1_[i];
      const double gz0 = (1 - t0) * g[k0] + t0 * g[k0 + 1] - gbar;
      const double gz1 = (1 - t1) * g[k1] + t1 * g[k1 + 1] - gbar;
      const double eta = beta0 + (layout_.p ? d_.X.row(i).dot(beta) : 0.0) +
                         b0 * gz0 + b1 * gz1 + f[d_.loc_index[i]];
      ev.value += d_.n[i] * softplus(eta) - d_.y[i] * eta;
      const double r = d_.n[i] * sigmoid(eta) - d_.y[i];
      ev.g_beta0 += r;
      if (layout_.p) ev.g_beta += r * d_.X.row(i).transpose();
      ev.g_u0 += r * b0 * gz0;
      ev.g_u1 += r * b1 * gz1;
      ev.g_g[k0] += r * b0 * (1 - t0);
      ev.g_g[k0 + 1] += r * b0 * t0;
      ev.g_g[k1] += r * b1 * (1 - t1);
      ev.g_g[k1 + 1] += r * b1 * t1;
      gsum_correction += r * (b0 + b1);
      ev.g_f[d_.loc_index[i]] += r;
    }
    ev.g_g.array() -= gsum_correction / q;

    // fixed-effect priors
    const double v0 = pr_.beta0_sd * pr_.beta0_sd;
    const double vb = pr_.beta_sd * pr_.beta_sd;
    ev.value += 0.5 * beta0 * beta0 / v0 + 0.5 * beta.squaredNorm() / vb +
                0.5 * (u0 * u0 + u1 * u1) / vb;
    ev.g_beta0 += beta0 / v0;
    ev.g_beta += beta / vb;
    ev.g_u0 += u0 / vb;
    ev.g_u1 += u1 / vb;
    return ev;
  }

  double hyper_prior(double log_rho, double log_sigma, double log_kappa,
                     double* d_rho, double* d_sigma, double* d_kappa) const {
    const auto term = [](double x, double mean, double sd, double* grad) {
      const double z = (x - mean) / (sd * sd);
      if (grad) *grad = z;
      return 0.5 * z * (x - mean);
    };
    return term(log_rho, pr_.log_rho_mean, pr_.log_rho_sd, d_rho) +
           term(log_sigma, pr_.log_sigma_mean, pr_.log_sigma_sd, d_sigma) +
           term(log_kappa, pr_.log_kappa_mean, pr_.log_kappa_sd, d_kappa);
  }

  const PrevalenceDesign& design() const { return d_; }
  const PriorSpec& priors() const { return pr_; }

 private:
  const PrevalenceDesign& d_;
  PriorSpec pr_;
  KnotGrid grid_;
  DistanceTable dist_f_;
  DistanceTable dist_g_;
  ParamLayout layout_;
  std::vector<std::pair<int, double>> w0_, w1_;
};

// Negative log posterior in natural coordinates.
class CenteredObjective : public Objective {
 public:
  CenteredObjective(const PrevalenceDesign& design, const PriorSpec& priors)
      : core_(design, priors) {}

  const PrevalenceCore& core() const { return core_; }

  Eigen::Index dim() const override { return core_.layout().dim(); }

  double value_grad(const Eigen::VectorXd& x,
                    Eigen::VectorXd& grad) const override {
    const auto& L = core_.layout();
    const double beta0 = x[L.beta0()];
    const Eigen::VectorXd beta = x.segment(L.beta(), L.p);
    const double u0 = x[L.u0()], u1 = x[L.u1()];
    const Eigen::VectorXd g = x.segment(L.g(), L.q);
    const Eigen::VectorXd f = x.segment(L.f(), L.m);
    const double log_rho = x[L.log_rho()];
    const double log_sigma = x[L.log_sigma()];
    const double log_kappa = x[L.log_kappa()];

    const auto ev = core_.likelihood(beta0, beta, u0, u1, g, f);
    const HyperMats h = core_.hyper(log_rho, log_sigma, log_kappa);

    const Eigen::VectorXd kg_inv_g = h.lg.solve(g);
    const Eigen::VectorXd kf_inv_f = h.lf.solve(f);
    double value = ev.value + 0.5 * g.dot(kg_inv_g) + 0.5 * h.logdet_g +
                   0.5 * f.dot(kf_inv_f) + 0.5 * h.logdet_f;

    grad.resize(dim());
    grad[L.beta0()] = ev.g_beta0;
    grad.segment(L.beta(), L.p) = ev.g_beta;
    grad[L.u0()] = ev.g_u0;
    grad[L.u1()] = ev.g_u1;
    grad.segment(L.g(), L.q) = ev.g_g + kg_inv_g;
    grad.segment(L.f(), L.m) = ev.g_f + kf_inv_f;

    const Eigen::MatrixXd dk_rho = core_.dk_dlogrho(log_rho, log_sigma);
    const Eigen::MatrixXd dk_kappa = core_.dk_dlogkappa(log_kappa);
    double pr_rho, pr_sigma, pr_kappa;
    value += core_.hyper_prior(log_rho, log_sigma, log_kappa, &pr_rho,
                               &pr_sigma, &pr_kappa);
    grad[L.log_rho()] = -0.5 * kf_inv_f.dot(dk_rho * kf_inv_f) +
                        0.5 * h.lf.solve(dk_rho).trace() + pr_rho;
    grad[L.log_sigma()] = -f.dot(kf_inv_f) + L.m + pr_sigma;
    grad[L.log_kappa()] = -0.5 * kg_inv_g.dot(dk_kappa * kg_inv_g) +
                          0.5 * h.lg.solve(dk_kappa).trace() + pr_kappa;
    return value;
  }

 private:
  PrevalenceCore core_;
};

// Same objective evaluated through g = Lg(kappa) wg, f = Lf(rho, sigma) wf.
// The latent blocks become unit-Gaussian quadratics, which conditions BFGS
// well under the tight hyperpriors.
class WhitenedObjective : public Objective {
 public:
  WhitenedObjective(const PrevalenceDesign& design, const PriorSpec& priors)
      : core_(design, priors) {}

  const PrevalenceCore& core() const { return core_; }

  Eigen::Index dim() const override { return core_.layout().dim(); }

  Eigen::VectorXd to_centered(const Eigen::VectorXd& xw) const {
    const auto& L = core_.layout();
    const HyperMats h = core_.hyper(xw[L.log_rho()], xw[L.log_sigma()],
                                    xw[L.log_kappa()]);
    Eigen::VectorXd xc = xw;
    xc.segment(L.g(), L.q) =
        Eigen::MatrixXd(h.lg.matrixL()) * xw.segment(L.g(), L.q);
    xc.segment(L.f(), L.m) =
        Eigen::MatrixXd(h.lf.matrixL()) * xw.segment(L.f(), L.m);
    return xc;
  }

  double value_grad(const Eigen::VectorXd& x,
                    Eigen::VectorXd& grad) const override {
    const auto& L = core_.layout();
    const double beta0 = x[L.beta0()];
    const Eigen::VectorXd beta = x.segment(L.beta(), L.p);
    const double u0 = x[L.u0()], u1 = x[L.u1()];
    const Eigen::VectorXd wg = x.segment(L.g(), L.q);
    const Eigen::VectorXd wf = x.segment(L.f(), L.m);
    const double log_rho = x[L.log_rho()];
    const double log_sigma = x[L.log_sigma()];
    const double log_kappa = x[L.log_kappa()];

    const HyperMats h = core_.hyper(log_rho, log_sigma, log_kappa);
    const Eigen::MatrixXd Lg = h.lg.matrixL();
    const Eigen::MatrixXd Lf = h.lf.matrixL();
    const Eigen::VectorXd g = Lg * wg;
    const Eigen::VectorXd f = Lf * wf;

    const auto ev = core_.likelihood(beta0, beta, u0, u1, g, f);
    double value = ev.value + 0.5 * wg.squaredNorm() + 0.5 * h.logdet_g +
                   0.5 * wf.squaredNorm() + 0.5 * h.logdet_f;

    grad.resize(dim());
    grad[L.beta0()] = ev.g_beta0;
    grad.segment(L.beta(), L.p) = ev.g_beta;
    grad[L.u0()] = ev.g_u0;
    grad[L.u1()] = ev.g_u1;
    grad.segment(L.g(), L.q) = Lg.transpose() * ev.g_g + wg;
    grad.segment(L.f(), L.m) = Lf.transpose() * ev.g_f + wf;

    double pr_rho, pr_sigma, pr_kappa;
    value += core_.hyper_prior(log_rho, log_sigma, log_kappa, &pr_rho,
                               &pr_sigma, &pr_kappa);

    // d/dtheta through L(theta): dL = L phi(L^-1 dK L^-T), phi = lower
    // triangle with halved diagonal; tr(K^-1 dK) = tr(L^-1 dK L^-T).
    const auto lat_grad = [](const Eigen::MatrixXd& Lmat,
                             const Eigen::MatrixXd& dk,
                             const Eigen::VectorXd& w,
                             const Eigen::VectorXd& lik_g, double* trace) {
      const Eigen::MatrixXd A =
          Lmat.triangularView<Eigen::Lower>().solve(dk);
      const Eigen::MatrixXd S =
          Lmat.triangularView<Eigen::Lower>().solve(A.transpose()).transpose();
      *trace = S.trace();
      Eigen::MatrixXd phi = S.triangularView<Eigen::Lower>();
      phi.diagonal() *= 0.5;
      return lik_g.dot(Lmat * (phi * w));
    };

    double tr_rho = 0.0, tr_kappa = 0.0;
    const Eigen::MatrixXd dk_rho = core_.dk_dlogrho(log_rho, log_sigma);
    const Eigen::MatrixXd dk_kappa = core_.dk_dlogkappa(log_kappa);
    grad[L.log_rho()] =
        lat_grad(Lf, dk_rho, wf, ev.g_f, &tr_rho) + 0.5 * tr_rho + pr_rho;
    grad[L.log_kappa()] =
        lat_grad(Lg, dk_kappa, wg, ev.g_g, &tr_kappa) + 0.5 * tr_kappa + pr_kappa;
    // dK/dlog sigma = 2K, so dL = L and the trace term is just m.
    grad[L.log_sigma()] = ev.g_f.dot(f) + L.m + pr_sigma;
    return value;
  }

 private:
  PrevalenceCore core_;
};

double pearson(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
  const double ma = a.mean(), mb = b.mean();
  const Eigen::ArrayXd da = a.array() - ma, db = b.array() - mb;
  const double denom = std::sqrt(da.square().sum() * db.square().sum());
  if (denom == 0.0) return std::numeric_limits<double>::quiet_NaN();
  return (da * db).sum() / denom;
}

}  // namespace

void PriorSpec::validate() const {
  if (!(beta0_sd > 0) || !(beta_sd > 0) || !(log_rho_sd > 0) ||
      !(log_sigma_sd > 0) || !(log_kappa_sd > 0))
    throw ValidationError("prior standard deviations must be positive");
}

PrevalenceDesign build_design(const std::vector<SurveyCluster>& surveys,
                              const CovariateStack& covariates,
                              const IncidenceSurfaceSet& surfaces,
                              const std::vector<FeatureSpec>& features,
                              const DesignOptions& opts) {
  if (surveys.empty()) throw ValidationError("no survey clusters");
  if (opts.n_knots < 2) throw ValidationError("need at least 2 knots for g");
  const GridSpec& spec = surfaces.surfaces.front().spec;
  if (!covariates.statics.empty() || !covariates.dynamics.empty())
    if (!covariates.spec.compatible(spec))
      throw CompatibilityError("covariate and incidence grids are incompatible");

  const int n_surf = static_cast<int>(surfaces.surfaces.size());
  PrevalenceDesign d;
  std::vector<const SurveyCluster*> kept;
  std::vector<std::string> bad_sites;

  for (const auto& s : surveys) {
    const int t = s.month_index;
    if (t < 0 || t >= n_surf) {
      bad_sites.push_back(s.id + " (no incidence surface for its month)");
      continue;
    }
    if (t + 1 >= n_surf && !opts.reuse_final_month_lead) {
      d.dropped_final_month.push_back(s.id);
      continue;
    }
    kept.push_back(&s);
  }
  if (kept.empty()) throw ValidationError("no usable survey clusters");

  const int nc = static_cast<int>(kept.size());
  Eigen::MatrixXd raw(nc, static_cast<int>(features.size()));
  d.z0.resize(nc);
  d.z1.resize(nc);
  d.y.resize(nc);
  d.n.resize(nc);
  d.loc_index.resize(nc);

  std::map<std::pair<int, int>, int> loc_of_cell;
  std::vector<std::pair<double, double>> loc_xy;
  for (int i = 0; i < nc; ++i) {
    const auto& s = *kept[i];
    d.y[i] = s.n_positive;
    d.n[i] = s.n_tested;
    const int t = s.month_index;
    const int lead = std::min(t + 1, n_surf - 1);
    const Raster& st = surfaces.surface(t);
    const Raster& sl = surfaces.surface(lead);
    if (st.missing(s.row, s.col) || sl.missing(s.row, s.col)) {
      bad_sites.push_back(s.id + " (missing incidence value)");
      continue;
    }
    d.z0[i] = st.at(s.row, s.col);
    d.z1[i] = sl.at(s.row, s.col);
    for (std::size_t j = 0; j < features.size(); ++j) {
      const double v = covariates.value(features[j], s.row, s.col, t);
      if (std::isnan(v))
        bad_sites.push_back(s.id + " (missing covariate " + features[j].id() + ")");
      raw(i, static_cast<int>(j)) = v;
    }
    const auto key = std::make_pair(s.row, s.col);
    auto [it, inserted] =
        loc_of_cell.emplace(key, static_cast<int>(loc_xy.size()));
    if (inserted) loc_xy.push_back(cell_center(spec, s.row, s.col));
    d.loc_index[i] = it->second;
  }
  if (!bad_sites.empty()) {
    std::string msg = "survey sites with missing inputs:";
    for (std::size_t i = 0; i < bad_sites.size() && i < 20; ++i)
      msg += " " + bad_sites[i] + ";";
    if (bad_sites.size() > 20)
      msg += " (+" + std::to_string(bad_sites.size() - 20) + " more)";
    throw ExtractionError(msg);
  }

  d.locations.resize(loc_xy.size(), 2);
  for (std::size_t i = 0; i < loc_xy.size(); ++i) {
    d.locations(static_cast<int>(i), 0) = loc_xy[i].first;
    d.locations(static_cast<int>(i), 1) = loc_xy[i].second;
  }

  // standardize covariates, dropping constant columns
  std::vector<int> keep_cols;
  for (std::size_t j = 0; j < features.size(); ++j) {
    const auto col = raw.col(static_cast<int>(j));
    const double mean = col.mean();
    const double sd = std::sqrt((col.array() - mean).square().sum() / nc);
    if (sd < 1e-12) {
      d.dropped_constant.push_back(features[j].id());
      continue;
    }
    keep_cols.push_back(static_cast<int>(j));
  }
  d.X.resize(nc, static_cast<int>(keep_cols.size()));
  d.col_mean.resize(keep_cols.size());
  d.col_sd.resize(keep_cols.size());
  for (std::size_t k = 0; k < keep_cols.size(); ++k) {
    const int j = keep_cols[k];
    d.features.push_back(features[j]);
    const auto col = raw.col(j);
    const double mean = col.mean();
    const double sd = std::sqrt((col.array() - mean).square().sum() / nc);
    d.col_mean[static_cast<int>(k)] = mean;
    d.col_sd[static_cast<int>(k)] = sd;
    d.X.col(static_cast<int>(k)) = (col.array() - mean) / sd;
  }

  // standardize log incidence over both columns jointly, build the knot grid
  const double zm = (d.z0.sum() + d.z1.sum()) / (2.0 * nc);
  double zv = ((d.z0.array() - zm).square().sum() +
               (d.z1.array() - zm).square().sum()) /
              (2.0 * nc);
  d.z_mean = zm;
  d.z_sd = zv > 1e-24 ? std::sqrt(zv) : 1.0;
  d.z0 = (d.z0.array() - d.z_mean) / d.z_sd;
  d.z1 = (d.z1.array() - d.z_mean) / d.z_sd;

  double zlo = std::min(d.z0.minCoeff(), d.z1.minCoeff());
  double zhi = std::max(d.z0.maxCoeff(), d.z1.maxCoeff());
  if (zhi - zlo < 1e-12) {
    zlo -= 1.0;
    zhi += 1.0;
  }
  d.knots = Eigen::VectorXd::LinSpaced(opts.n_knots, zlo, zhi);
  return d;
}

std::unique_ptr<Objective> prevalence_objective(const PrevalenceDesign& design,
                                                const PriorSpec& priors) {
  priors.validate();
  return std::make_unique<CenteredObjective>(design, priors);
}

LatentField PrevalenceFit::g_field() const {
  LatentField lf;
  lf.locations = design.knots;
  lf.kernel = SquaredExpKernel{kappa()};
  lf.mode = g_knots();
  lf.hessian = hessian.block(layout.g(), layout.g(), layout.q, layout.q);
  return lf;
}

LatentField PrevalenceFit::spatial_field() const {
  LatentField lf;
  lf.locations = design.locations;
  lf.kernel = MaternKernel{rho(), sigma2()};
  lf.mode = f_values();
  lf.hessian = hessian.block(layout.f(), layout.f(), layout.m, layout.m);
  return lf;
}

PrevalenceFit fit_prevalence(const PrevalenceDesign& design,
                             const PriorSpec& priors, std::uint64_t seed) {
  priors.validate();
  if (design.n_locations() < 2)
    throw ValidationError("prevalence fit needs >= 2 distinct survey locations");
  if (!design.X.allFinite() || !design.z0.allFinite() || !design.z1.allFinite())
    throw ValidationError("prevalence design contains non-finite values");

  WhitenedObjective whitened(design, priors);
  const ParamLayout layout = whitened.core().layout();

  Eigen::VectorXd init = Eigen::VectorXd::Zero(layout.dim());
  const double pbar = (design.y.sum() + 0.5) / (design.n.sum() + 1.0);
  init[layout.beta0()] = std::log(pbar / (1.0 - pbar));
  init[layout.log_rho()] = priors.log_rho_mean;
  init[layout.log_sigma()] = priors.log_sigma_mean;
  init[layout.log_kappa()] = priors.log_kappa_mean;

  ModeOptions wopts;
  wopts.grad_tol = 1e-7;
  wopts.max_iterations = 500;
  wopts.polish_iterations = 0;
  wopts.require_convergence = false;
  int witers = 0;
  double wnorm = 0.0;
  const Eigen::VectorXd wmode =
      minimize_bfgs(whitened, init, wopts, &witers, &wnorm);

  CenteredObjective centered(design, priors);
  ModeOptions copts;
  copts.max_iterations = 0;  // Newton polish from the whitened solution
  copts.polish_iterations = 30;
  copts.grad_tol = 1e-6;
  copts.hessian_step = 1e-4;
  const ModeResult polished = find_mode(centered, whitened.to_centered(wmode), copts);

  PrevalenceFit fit;
  fit.priors = priors;
  fit.design = design;
  fit.layout = layout;
  fit.mode = polished.mode;
  fit.hessian = polished.hessian;
  fit.seed = seed;
  fit.iterations = witers + polished.iterations;
  fit.grad_norm = polished.grad_norm;
  fit.separation_flag =
      design.y.sum() == 0.0 || design.y.sum() == design.n.sum();
  return fit;
}

PrevalencePredictor::PrevalencePredictor(const PrevalenceFit& fit,
                                         int n_samples, std::uint64_t seed)
    : fit_(fit) {
  draws_ = laplace_sample(fit.mode, fit.hessian, n_samples, seed);
  const auto& L = fit.layout;
  alpha_.resize(L.m, n_samples);
  g_mean_.resize(n_samples);
  for (int s = 0; s < n_samples; ++s) {
    const double rho = std::exp(draws_(s, L.log_rho()));
    const double sigma2 = std::exp(2.0 * draws_(s, L.log_sigma()));
    const MaternKernel mk{rho, sigma2};
    const Eigen::MatrixXd K =
        gram_matrix(mk, fit.design.locations, kGramJitter * sigma2);
    Eigen::LLT<Eigen::MatrixXd> llt(K);
    if (llt.info() != Eigen::Success)
      throw FactorizationError("posterior sample produced a non-PD spatial Gram");
    alpha_.col(s) =
        llt.solve(draws_.row(s).segment(L.g() + L.q, L.m).transpose());
    g_mean_[s] = draws_.row(s).segment(L.g(), L.q).mean();
  }
}

Eigen::MatrixXd PrevalencePredictor::spatial_field_at(
    const Eigen::MatrixXd& points) const {
  const auto& L = fit_.layout;
  const Eigen::Index np = points.rows();
  Eigen::MatrixXd dist(np, L.m);
  for (Eigen::Index i = 0; i < np; ++i)
    for (int j = 0; j < L.m; ++j)
      dist(i, j) = (points.row(i) - fit_.design.locations.row(j)).norm();

  Eigen::MatrixXd out(np, n_samples());
  for (int s = 0; s < n_samples(); ++s) {
    const double rho = std::exp(draws_(s, L.log_rho()));
    const double sigma2 = std::exp(2.0 * draws_(s, L.log_sigma()));
    const MaternKernel mk{rho, sigma2};
    const double jitter = kGramJitter * sigma2;
    // repeated grid distances: memoize kernel values per sample
    std::map<double, double> cache;
    for (Eigen::Index i = 0; i < np; ++i) {
      double acc = 0.0;
      for (int j = 0; j < L.m; ++j) {
        const double d = dist(i, j);
        auto [it, inserted] = cache.emplace(d, 0.0);
        if (inserted) it->second = mk(d) + (d == 0.0 ? jitter : 0.0);
        acc += it->second * alpha_(j, s);
      }
      out(i, s) = acc;
    }
  }
  return out;
}

Eigen::VectorXd PrevalencePredictor::prevalence_samples(
    const Eigen::VectorXd& x_std, double z0, double z1,
    const Eigen::VectorXd& f_star) const {
  const auto& L = fit_.layout;
  const KnotGrid grid(fit_.design.knots);
  const auto [k0, t0] = grid.locate(z0);
  const auto [k1, t1] = grid.locate(z1);
  Eigen::VectorXd p(n_samples());
  for (int s = 0; s < n_samples(); ++s) {
    const double gz0 = (1 - t0) * draws_(s, L.g() + k0) +
                       t0 * draws_(s, L.g() + k0 + 1) - g_mean_[s];
    const double gz1 = (1 - t1) * draws_(s, L.g() + k1) +
                       t1 * draws_(s, L.g() + k1 + 1) - g_mean_[s];
    double eta = draws_(s, L.beta0()) +
                 std::exp(draws_(s, L.u0())) * gz0 +
                 std::exp(draws_(s, L.u1())) * gz1 + f_star[s];
    for (int j = 0; j < L.p; ++j) eta += draws_(s, L.beta() + j) * x_std[j];
    p[s] = sigmoid(eta);
  }
  return p;
}

bool PrevalencePredictor::extrapolates(double z, double scales) const {
  const double kappa = fit_.kappa();
  return z < fit_.design.knots[0] - scales * kappa ||
         z > fit_.design.knots[fit_.layout.q - 1] + scales * kappa;
}

SampleCube predict_prevalence(const PrevalenceFit& fit,
                              const CovariateStack& covariates,
                              const IncidenceSurfaceSet& surfaces,
                              const Raster& templ, int first_month,
                              int n_months, const PredictOptions& opts,
                              PredictDiagnostics* diag) {
  templ.validate();
  const int n_surf = static_cast<int>(surfaces.surfaces.size());
  if (first_month < 0 || n_months < 1 || first_month + n_months > n_surf)
    throw BoundsError("requested months lie outside the incidence surfaces");
  if (!templ.spec.compatible(surfaces.surfaces.front().spec))
    throw CompatibilityError("template grid incompatible with incidence surfaces");
  if (opts.n_samples < 1) throw ValidationError("need at least one sample");

  PrevalencePredictor pred(fit, opts.n_samples, opts.seed);

  std::vector<std::pair<int, int>> cells;
  for (int r = 0; r < templ.spec.nrows; ++r)
    for (int c = 0; c < templ.spec.ncols; ++c)
      if (!templ.missing(r, c)) cells.emplace_back(r, c);

  Eigen::MatrixXd points(cells.size(), 2);
  for (std::size_t i = 0; i < cells.size(); ++i) {
    const auto [x, y] = cell_center(templ.spec, cells[i].first, cells[i].second);
    points(static_cast<int>(i), 0) = x;
    points(static_cast<int>(i), 1) = y;
  }
  const Eigen::MatrixXd f_star = pred.spatial_field_at(points);

  SampleCube cube;
  cube.spec = templ.spec;
  cube.months = surfaces.months;
  {
    // relabel slab 0 to the first predicted month
    const auto [y, m] = surfaces.months.year_month(first_month);
    cube.months.start_year = y;
    cube.months.start_month = m;
  }
  cube.n_samples = opts.n_samples;
  cube.n_months = n_months;
  cube.seed = opts.seed;
  cube.allocate();
  std::fill(cube.values.begin(), cube.values.end(),
            std::numeric_limits<float>::quiet_NaN());

  const int p = fit.layout.p;
  Eigen::VectorXd x_std(p);
  for (int tt = 0; tt < n_months; ++tt) {
    const int t = first_month + tt;
    const int lead = std::min(t + 1, n_surf - 1);
    const Raster& st = surfaces.surface(t);
    const Raster& sl = surfaces.surface(lead);
    for (std::size_t ci = 0; ci < cells.size(); ++ci) {
      const auto [r, c] = cells[ci];
      if (st.missing(r, c) || sl.missing(r, c)) continue;
      bool ok = true;
      for (int j = 0; j < p; ++j) {
        const double v = covariates.value(fit.design.features[j], r, c, t);
        if (std::isnan(v)) {
          ok = false;
          break;
        }
        x_std[j] = (v - fit.design.col_mean[j]) / fit.design.col_sd[j];
      }
      if (!ok) continue;
      const double z0 = (st.at(r, c) - fit.design.z_mean) / fit.design.z_sd;
      const double z1 = (sl.at(r, c) - fit.design.z_mean) / fit.design.z_sd;
      if (diag && (pred.extrapolates(z0, opts.extrapolation_scales) ||
                   pred.extrapolates(z1, opts.extrapolation_scales))) {
        ++diag->extrapolation_count;
        if (diag->extrapolated.size() < PredictDiagnostics::kMaxRecorded)
          diag->extrapolated.push_back({tt, r, c});
      }
      const Eigen::VectorXd ps = pred.prevalence_samples(
          x_std, z0, z1, f_star.row(static_cast<int>(ci)).transpose());
      for (int s = 0; s < opts.n_samples; ++s)
        cube.at(s, tt, r, c) = static_cast<float>(ps[s]);
    }
  }
  return cube;
}

Eigen::VectorXd posterior_mean_prevalence(
    const PrevalenceFit& fit, const std::vector<SurveyCluster>& clusters,
    const CovariateStack& covariates, const IncidenceSurfaceSet& surfaces,
    const DesignOptions& opts, int n_samples, std::uint64_t seed) {
  (void)opts;
  PrevalencePredictor pred(fit, n_samples, seed);
  const int n_surf = static_cast<int>(surfaces.surfaces.size());
  const GridSpec& spec = surfaces.surfaces.front().spec;

  Eigen::MatrixXd points(clusters.size(), 2);
  for (std::size_t i = 0; i < clusters.size(); ++i) {
    const auto [x, y] = cell_center(spec, clusters[i].row, clusters[i].col);
    points(static_cast<int>(i), 0) = x;
    points(static_cast<int>(i), 1) = y;
  }
  const Eigen::MatrixXd f_star = pred.spatial_field_at(points);

  const int p = fit.layout.p;
  Eigen::VectorXd x_std(p), out(clusters.size());
  for (std::size_t i = 0; i < clusters.size(); ++i) {
    const auto& s = clusters[i];
    const int t = s.month_index;
    if (t < 0 || t >= n_surf)
      throw ExtractionError("cluster " + s.id + " outside the surface months");
    const int lead = std::min(t + 1, n_surf - 1);
    for (int j = 0; j < p; ++j) {
      const double v = covariates.value(fit.design.features[j], s.row, s.col, t);
      if (std::isnan(v))
        throw ExtractionError("cluster " + s.id + " misses covariate " +
                              fit.design.features[j].id());
      x_std[j] = (v - fit.design.col_mean[j]) / fit.design.col_sd[j];
    }
    const Raster& st = surfaces.surface(t);
    const Raster& sl = surfaces.surface(lead);
    if (st.missing(s.row, s.col) || sl.missing(s.row, s.col))
      throw ExtractionError("cluster " + s.id + " misses an incidence value");
    const double z0 = (st.at(s.row, s.col) - fit.design.z_mean) / fit.design.z_sd;
    const double z1 = (sl.at(s.row, s.col) - fit.design.z_mean) / fit.design.z_sd;
    out[static_cast<int>(i)] =
        pred.prevalence_samples(x_std, z0, z1,
                                f_star.row(static_cast<int>(i)).transpose())
            .mean();
  }
  return out;
}

namespace {

CrossValidationResult run_folds(
    const std::vector<std::vector<int>>& folds,
    const std::vector<SurveyCluster>& surveys, const CovariateStack& covariates,
    const IncidenceSurfaceSet& surfaces, const std::vector<FeatureSpec>& features,
    const PriorSpec& priors, std::uint64_t seed, const DesignOptions& opts,
    int n_samples) {
  CrossValidationResult res;
  for (std::size_t k = 0; k < folds.size(); ++k) {
    const std::set<int> held(folds[k].begin(), folds[k].end());
    std::vector<SurveyCluster> train, test;
    for (std::size_t i = 0; i < surveys.size(); ++i)
      (held.count(static_cast<int>(i)) ? test : train).push_back(surveys[i]);
    if (test.empty() || train.empty())
      throw PartitionError("cross-validation fold is empty");

    Eigen::VectorXd obs(test.size());
    for (std::size_t i = 0; i < test.size(); ++i)
      obs[static_cast<int>(i)] =
          static_cast<double>(test[i].n_positive) / test[i].n_tested;
    if ((obs.array() - obs.mean()).abs().maxCoeff() < 1e-15) {
      res.skipped_folds.push_back(static_cast<int>(k));
      continue;
    }

    const PrevalenceDesign design =
        build_design(train, covariates, surfaces, features, opts);
    const PrevalenceFit fit =
        fit_prevalence(design, priors, derive_seed(seed, k));
    const Eigen::VectorXd predicted = posterior_mean_prevalence(
        fit, test, covariates, surfaces, opts, n_samples,
        derive_seed(seed, k + 1000));
    res.fold_correlation.push_back(pearson(predicted, obs));
  }
  if (res.fold_correlation.empty())
    throw PartitionError("every cross-validation fold was skipped");
  res.mean_correlation =
      Eigen::Map<const Eigen::VectorXd>(res.fold_correlation.data(),
                                        res.fold_correlation.size())
          .mean();
  return res;
}

}  // namespace

CrossValidationResult cross_validate_kfold(
    const std::vector<SurveyCluster>& surveys, const CovariateStack& covariates,
    const IncidenceSurfaceSet& surfaces, const std::vector<FeatureSpec>& features,
    const PriorSpec& priors, int k, std::uint64_t seed,
    const DesignOptions& opts, int n_samples) {
  if (k < 2) throw PartitionError("k-fold cross-validation needs k >= 2");
  if (static_cast<int>(surveys.size()) < k)
    throw PartitionError("fewer clusters than folds");

  std::vector<int> order(surveys.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
  Rng rng(derive_seed(seed, "cv-folds"));
  for (std::size_t i = order.size() - 1; i > 0; --i)
    std::swap(order[i], order[rng.uniform_index(i + 1)]);
  std::vector<std::vector<int>> folds(k);
  for (std::size_t i = 0; i < order.size(); ++i)
    folds[i % k].push_back(order[i]);

  return run_folds(folds, surveys, covariates, surfaces, features, priors, seed,
                   opts, n_samples);
}

CrossValidationResult cross_validate_temporal(
    const std::vector<SurveyCluster>& surveys, const CovariateStack& covariates,
    const IncidenceSurfaceSet& surfaces, const std::vector<FeatureSpec>& features,
    const PriorSpec& priors, int train_year, int test_year, std::uint64_t seed,
    const DesignOptions& opts, int n_samples) {
  std::vector<std::vector<int>> folds(1);
  bool any_train = false;
  for (std::size_t i = 0; i < surveys.size(); ++i) {
    if (surveys[i].year == test_year)
      folds[0].push_back(static_cast<int>(i));
    else if (surveys[i].year == train_year)
      any_train = true;
  }
  if (folds[0].empty() || !any_train)
    throw PartitionError("temporal split has an empty train or test year");

  // restrict to the two years involved
  std::vector<SurveyCluster> subset;
  std::vector<std::vector<int>> refolds(1);
  for (const auto& s : surveys) {
    if (s.year == train_year) subset.push_back(s);
  }
  for (const auto& s : surveys) {
    if (s.year == test_year) {
      refolds[0].push_back(static_cast<int>(subset.size()));
      subset.push_back(s);
    }
  }
  return run_folds(refolds, subset, covariates, surfaces, features, priors,
                   seed, opts, n_samples);
}

void save_model(const PrevalenceFit& fit, const std::string& path) {
  nlohmann::json meta;
  meta["schema_version"] = 1;
  meta["priors"] = {{"beta0_sd", fit.priors.beta0_sd},
                    {"beta_sd", fit.priors.beta_sd},
                    {"log_rho_mean", fit.priors.log_rho_mean},
                    {"log_rho_sd", fit.priors.log_rho_sd},
                    {"log_sigma_mean", fit.priors.log_sigma_mean},
                    {"log_sigma_sd", fit.priors.log_sigma_sd},
                    {"log_kappa_mean", fit.priors.log_kappa_mean},
                    {"log_kappa_sd", fit.priors.log_kappa_sd}};
  meta["features"] = nlohmann::json::array();
  for (const auto& f : fit.design.features)
    meta["features"].push_back({{"name", f.name}, {"lag", f.lag}});
  meta["col_mean"] = std::vector<double>(fit.design.col_mean.begin(),
                                         fit.design.col_mean.end());
  meta["col_sd"] =
      std::vector<double>(fit.design.col_sd.begin(), fit.design.col_sd.end());
  meta["z_mean"] = fit.design.z_mean;
  meta["z_sd"] = fit.design.z_sd;
  meta["knots"] =
      std::vector<double>(fit.design.knots.begin(), fit.design.knots.end());
  std::vector<std::vector<double>> locs;
  for (int i = 0; i < fit.design.locations.rows(); ++i)
    locs.push_back({fit.design.locations(i, 0), fit.design.locations(i, 1)});
  meta["locations"] = locs;
  meta["seed"] = fit.seed;
  meta["iterations"] = fit.iterations;
  meta["grad_norm"] = fit.grad_norm;
  meta["separation_flag"] = fit.separation_flag;
  meta["provenance"] = fit.provenance;
  meta["dim"] = fit.layout.dim();

  const std::string blob = meta.dump();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ValidationError("cannot open for writing: " + path);
  out.write("PRVMDL01", 8);
  const std::uint64_t len = blob.size();
  out.write(reinterpret_cast<const char*>(&len), 8);
  out.write(blob.data(), static_cast<std::streamsize>(blob.size()));
  const Eigen::Index dim = fit.mode.size();
  out.write(reinterpret_cast<const char*>(fit.mode.data()),
            static_cast<std::streamsize>(dim * 8));
  out.write(reinterpret_cast<const char*>(fit.hessian.data()),
            static_cast<std::streamsize>(dim * dim * 8));
  if (!out) throw ValidationError("write failed: " + path);
}

PrevalenceFit load_model(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open model: " + path);
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, "PRVMDL01", 8) != 0)
    throw ParseError(path + ": not a prevalence model file");
  std::uint64_t len = 0;
  in.read(reinterpret_cast<char*>(&len), 8);
  std::string blob(len, '\0');
  in.read(blob.data(), static_cast<std::streamsize>(len));
  const nlohmann::json meta = nlohmann::json::parse(blob);

  PrevalenceFit fit;
  fit.priors.beta0_sd = meta["priors"]["beta0_sd"].get<double>();
  fit.priors.beta_sd = meta["priors"]["beta_sd"].get<double>();
  fit.priors.log_rho_mean = meta["priors"]["log_rho_mean"].get<double>();
  fit.priors.log_rho_sd = meta["priors"]["log_rho_sd"].get<double>();
  fit.priors.log_sigma_mean = meta["priors"]["log_sigma_mean"].get<double>();
  fit.priors.log_sigma_sd = meta["priors"]["log_sigma_sd"].get<double>();
  fit.priors.log_kappa_mean = meta["priors"]["log_kappa_mean"].get<double>();
  fit.priors.log_kappa_sd = meta["priors"]["log_kappa_sd"].get<double>();
  for (const auto& f : meta["features"])
    fit.design.features.push_back(
        {f["name"].get<std::string>(), f["lag"].get<int>()});
  const auto cm = meta["col_mean"].get<std::vector<double>>();
  const auto cs = meta["col_sd"].get<std::vector<double>>();
  fit.design.col_mean =
      Eigen::Map<const Eigen::VectorXd>(cm.data(), cm.size());
  fit.design.col_sd = Eigen::Map<const Eigen::VectorXd>(cs.data(), cs.size());
  fit.design.z_mean = meta["z_mean"].get<double>();
  fit.design.z_sd = meta["z_sd"].get<double>();
  const auto kn = meta["knots"].get<std::vector<double>>();
  fit.design.knots = Eigen::Map<const Eigen::VectorXd>(kn.data(), kn.size());
  const auto locs = meta["locations"].get<std::vector<std::vector<double>>>();
  fit.design.locations.resize(locs.size(), 2);
  for (std::size_t i = 0; i < locs.size(); ++i) {
    fit.design.locations(static_cast<int>(i), 0) = locs[i][0];
    fit.design.locations(static_cast<int>(i), 1) = locs[i][1];
  }
  fit.seed = meta["seed"].get<std::uint64_t>();
  fit.iterations = meta["iterations"].get<int>();
  fit.grad_norm = meta["grad_norm"].get<double>();
  fit.separation_flag = meta["separation_flag"].get<bool>();
  if (meta.contains("provenance"))
    for (const auto& [k, v] : meta["provenance"].items())
      fit.provenance[k] = v.get<std::string>();

  fit.layout.p = static_cast<int>(fit.design.features.size());
  fit.layout.q = static_cast<int>(fit.design.knots.size());
  fit.layout.m = static_cast<int>(fit.design.locations.rows());
  const int dim = meta["dim"].get<int>();
  if (dim != fit.layout.dim())
    throw ParseError(path + ": stored dimension disagrees with the layout");

  fit.mode.resize(dim);
  in.read(reinterpret_cast<char*>(fit.mode.data()),
          static_cast<std::streamsize>(dim * 8));
  fit.hessian.resize(dim, dim);
  in.read(reinterpret_cast<char*>(fit.hessian.data()),
          static_cast<std::streamsize>(static_cast<std::int64_t>(dim) * dim * 8));
  if (!in) throw ParseError(path + ": truncated model payload");
  return fit;
}

}  // namespace prevmap
