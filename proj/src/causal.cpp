#include "prevmap/causal.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <map>
#include <set>

#include <boost/math/special_functions/gamma.hpp>
#include <json.hpp>

#include "prevmap/rng.hpp"

namespace prevmap {

namespace {

Eigen::MatrixXd standardize_columns(const Eigen::MatrixXd& m) {
  Eigen::MatrixXd out = m;
  for (Eigen::Index j = 0; j < m.cols(); ++j) {
    const double mean = m.col(j).mean();
    const double sd =
        std::sqrt((m.col(j).array() - mean).square().sum() / m.rows());
    if (sd < 1e-12)
      throw ValidationError("rcit is undefined for a constant input");
    out.col(j) = (m.col(j).array() - mean) / sd;
  }
  return out;
}

double median_pairwise_distance(const Eigen::MatrixXd& m) {
  const Eigen::Index n = std::min<Eigen::Index>(m.rows(), 500);
  std::vector<double> d;
  d.reserve(static_cast<std::size_t>(n) * (n - 1) / 2);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = i + 1; j < n; ++j) {
      const double dist = (m.row(i) - m.row(j)).norm();
      if (dist > 0) d.push_back(dist);
    }
  if (d.empty())
    throw ValidationError("rcit is undefined: all points coincide");
  std::nth_element(d.begin(), d.begin() + d.size() / 2, d.end());
  return d[d.size() / 2];
}

// Random Fourier features of a Gaussian kernel with the given bandwidth.
Eigen::MatrixXd fourier_features(const Eigen::MatrixXd& m, int n_features,
                                 double bandwidth, Rng& rng) {
  const Eigen::Index n = m.rows(), d = m.cols();
  Eigen::MatrixXd w(d, n_features);
  Eigen::RowVectorXd b(n_features);
  for (int j = 0; j < n_features; ++j) {
    for (Eigen::Index i = 0; i < d; ++i) w(i, j) = rng.normal() / bandwidth;
    b[j] = rng.uniform(0.0, 2.0 * M_PI);
  }
  Eigen::MatrixXd phi = m * w;
  phi.rowwise() += b;
  phi = phi.array().cos() * std::sqrt(2.0 / n_features);
  (void)n;
  return phi;
}

// P(Q > q) for Q = sum_i lambda_i chi2_1 via the Hall-Buckley-Eagleson
// three-moment chi-square match.
double weighted_chi2_tail(double q, const Eigen::VectorXd& lambda) {
  double c1 = 0, c2 = 0, c3 = 0;
  for (Eigen::Index i = 0; i < lambda.size(); ++i) {
    const double l = std::max(lambda[i], 0.0);
    c1 += l;
    c2 += 2.0 * l * l;
    c3 += 8.0 * l * l * l;
  }
  if (c3 <= 0 || c2 <= 0) return 1.0;
  const double a = c3 / (4.0 * c2);
  const double nu = 8.0 * c2 * c2 * c2 / (c3 * c3);
  const double b = c1 - a * nu;
  const double x = (q - b) / a;
  if (x <= 0) return 1.0;
  // upper tail of chi2_nu
  return boost::math::gamma_q(nu / 2.0, x / 2.0);
}

}  // namespace

double rcit(const Eigen::VectorXd& x, const Eigen::VectorXd& y,
            const Eigen::MatrixXd& z, int n_features, std::uint64_t seed) {
  const Eigen::Index n = x.size();
  if (y.size() != n || (z.size() > 0 && z.rows() != n))
    throw ValidationError("rcit inputs must share the sample count");
  if (n < 50) throw ValidationError("rcit needs at least 50 samples");
  if (n_features < 1) throw ValidationError("rcit needs n_features >= 1");

  Rng rng(seed);
  const Eigen::MatrixXd xs = standardize_columns(x);
  const Eigen::MatrixXd ys = standardize_columns(y);
  Eigen::MatrixXd fx =
      fourier_features(xs, n_features, median_pairwise_distance(xs), rng);
  Eigen::MatrixXd fy =
      fourier_features(ys, n_features, median_pairwise_distance(ys), rng);

  Eigen::MatrixXd design;  // intercept plus z features
  if (z.cols() > 0) {
    const Eigen::MatrixXd zs = standardize_columns(z);
    const Eigen::MatrixXd fz =
        fourier_features(zs, n_features, median_pairwise_distance(zs), rng);
    design.resize(n, 1 + fz.cols());
    design.col(0).setOnes();
    design.rightCols(fz.cols()) = fz;
  } else {
    design = Eigen::MatrixXd::Ones(n, 1);
  }

  // residualize the x/y features on the conditioning design
  const Eigen::MatrixXd gram = design.transpose() * design;
  const Eigen::LDLT<Eigen::MatrixXd> ldlt(gram);
  const Eigen::MatrixXd ex =
      fx - design * ldlt.solve(design.transpose() * fx);
  const Eigen::MatrixXd ey =
      fy - design * ldlt.solve(design.transpose() * fy);

  const Eigen::MatrixXd cxy = ex.transpose() * ey / static_cast<double>(n);
  const double stat = n * cxy.squaredNorm();

  const Eigen::VectorXd lx =
      Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(
          ex.transpose() * ex / static_cast<double>(n))
          .eigenvalues();
  const Eigen::VectorXd ly =
      Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(
          ey.transpose() * ey / static_cast<double>(n))
          .eigenvalues();
  Eigen::VectorXd lambda(lx.size() * ly.size());
  int k = 0;
  for (Eigen::Index i = 0; i < lx.size(); ++i)
    for (Eigen::Index j = 0; j < ly.size(); ++j)
      lambda[k++] = std::max(lx[i], 0.0) * std::max(ly[j], 0.0);

  const double p = weighted_chi2_tail(stat, lambda);
  return std::min(std::max(p, 0.0), 1.0);
}

std::vector<int> pc_adjacency(const Eigen::MatrixXd& features,
                              const Eigen::VectorXd& response,
                              const PcOptions& opts, std::uint64_t seed) {
  const int nf = static_cast<int>(features.cols());
  if (nf < 2) throw ValidationError("pc_adjacency needs at least 2 features");
  if (!(opts.alpha > 0.0 && opts.alpha < 1.0))
    throw ValidationError("pc_adjacency needs alpha in (0,1)");

  std::vector<int> adjacent(nf);
  for (int i = 0; i < nf; ++i) adjacent[i] = i;
  std::uint64_t test_counter = 0;

  const auto run_test = [&](int xi, const std::vector<int>& cond) {
    Eigen::MatrixXd z(features.rows(), cond.size());
    for (std::size_t c = 0; c < cond.size(); ++c)
      z.col(static_cast<Eigen::Index>(c)) = features.col(cond[c]);
    return rcit(features.col(xi), response, z, opts.n_features,
                derive_seed(seed, test_counter++));
  };

  for (int level = 0; level <= opts.max_cond_size; ++level) {
    // features are visited in their (lexicographic) column order
    std::vector<int> current = adjacent;
    for (const int xi : current) {
      if (std::find(adjacent.begin(), adjacent.end(), xi) == adjacent.end())
        continue;
      std::vector<int> pool;
      for (const int other : adjacent)
        if (other != xi) pool.push_back(other);
      if (static_cast<int>(pool.size()) < level) continue;

      // lexicographic subsets of the current neighbor pool, size = level
      std::vector<int> pick(level);
      bool removed = false;
      const std::function<void(int, int)> enumerate = [&](int start, int depth) {
        if (removed) return;
        if (depth == level) {
          std::vector<int> cond(level);
          for (int i = 0; i < level; ++i) cond[i] = pool[pick[i]];
          if (run_test(xi, cond) > opts.alpha) removed = true;
          return;
        }
        for (int i = start; i <= static_cast<int>(pool.size()) - (level - depth);
             ++i) {
          pick[depth] = i;
          enumerate(i + 1, depth + 1);
        }
      };
      enumerate(0, 0);
      if (removed)
        adjacent.erase(std::find(adjacent.begin(), adjacent.end(), xi));
    }
    if (static_cast<int>(adjacent.size()) <= level + 1) break;
  }
  return adjacent;
}

FeatureCatalog build_feature_catalog(const std::vector<SurveyCluster>& surveys,
                                     const CovariateStack& covariates,
                                     int max_lag) {
  FeatureCatalog cat;
  cat.features = covariates.all_features(max_lag);
  if (cat.features.empty())
    throw ValidationError("no covariates available for feature selection");

  std::vector<int> rows;
  std::vector<std::vector<double>> values;
  for (std::size_t i = 0; i < surveys.size(); ++i) {
    const auto& s = surveys[i];
    std::vector<double> row(cat.features.size());
    bool ok = true;
    for (std::size_t j = 0; j < cat.features.size(); ++j) {
      row[j] = covariates.value(cat.features[j], s.row, s.col, s.month_index);
      if (std::isnan(row[j])) {
        ok = false;
        break;
      }
    }
    if (!ok) continue;
    rows.push_back(static_cast<int>(i));
    values.push_back(std::move(row));
  }
  if (values.empty())
    throw ValidationError("no clusters with complete covariates");

  cat.data.resize(values.size(), cat.features.size());
  cat.response.resize(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) {
    for (std::size_t j = 0; j < cat.features.size(); ++j)
      cat.data(static_cast<int>(i), static_cast<int>(j)) = values[i][j];
    const auto& s = surveys[rows[i]];
    cat.response[static_cast<int>(i)] =
        static_cast<double>(s.n_positive) / s.n_tested;
  }
  cat.cluster_rows = std::move(rows);
  return cat;
}

CertaintyScores bootstrap_certainty(const FeatureCatalog& catalog, int repeats,
                                    const PcOptions& opts, std::uint64_t seed) {
  if (repeats < 1) throw ValidationError("bootstrap needs at least 1 repeat");
  const Eigen::Index n = catalog.data.rows();

  CertaintyScores scores;
  scores.features = catalog.features;
  scores.score.assign(catalog.features.size(), 0.0);
  scores.repeats = repeats;

  for (int b = 0; b < repeats; ++b) {
    Rng rng(derive_seed(seed, std::string("bootstrap-") + std::to_string(b)));
    Eigen::MatrixXd data(n, catalog.data.cols());
    Eigen::VectorXd resp(n);
    for (Eigen::Index i = 0; i < n; ++i) {
      const auto r = static_cast<Eigen::Index>(rng.uniform_index(n));
      data.row(i) = catalog.data.row(r);
      resp[i] = catalog.response[r];
    }
    std::vector<int> adj;
    try {
      adj = pc_adjacency(data, resp, opts, derive_seed(seed, 7777 + b));
    } catch (const ValidationError&) {
      continue;  // a degenerate resample (constant column) contributes nothing
    }
    for (const int j : adj) scores.score[j] += 1.0;
  }
  for (auto& s : scores.score) s /= repeats;
  return scores;
}

SelectionResult select_final(const CertaintyScores& scores,
                             const std::vector<SurveyCluster>& surveys,
                             const CovariateStack& covariates,
                             const IncidenceSurfaceSet& surfaces,
                             const PriorSpec& priors,
                             const SelectionOptions& opts, std::uint64_t seed) {
  if (opts.thresholds.empty())
    throw ValidationError("select_final needs at least one threshold");
  for (const double t : opts.thresholds)
    if (t < 0.0 || t > 1.0)
      throw ValidationError("certainty thresholds must lie in [0,1]");

  SelectionResult result;
  result.scores = scores;

  std::vector<double> thresholds = opts.thresholds;
  std::sort(thresholds.begin(), thresholds.end());

  // nested candidate sets; identical member sets are scored once
  std::map<std::vector<std::string>, double> cv_cache;
  for (const double tau : thresholds) {
    CandidateFeatureSet cand;
    cand.threshold = tau;
    std::vector<std::string> key;
    for (std::size_t j = 0; j < scores.features.size(); ++j)
      if (scores.score[j] >= tau) {
        cand.members.push_back(scores.features[j]);
        key.push_back(scores.features[j].id());
      }
    if (cand.members.empty()) {
      cand.cv_score = -std::numeric_limits<double>::infinity();
      result.candidates.push_back(std::move(cand));
      continue;
    }
    const auto it = cv_cache.find(key);
    if (it != cv_cache.end()) {
      cand.cv_score = it->second;
    } else {
      const auto cv = cross_validate_kfold(
          surveys, covariates, surfaces, cand.members, priors, opts.cv_folds,
          derive_seed(seed, std::string("select-cv")), DesignOptions{},
          opts.cv_samples);
      cand.cv_score = cv.mean_correlation;
      cv_cache[key] = cand.cv_score;
    }
    result.candidates.push_back(std::move(cand));
  }

  const CandidateFeatureSet* best = nullptr;
  for (const auto& cand : result.candidates) {
    if (cand.members.empty()) continue;
    if (!best || cand.cv_score > best->cv_score ||
        (cand.cv_score == best->cv_score &&
         cand.members.size() < best->members.size()))
      best = &cand;
  }
  if (!best) {
    result.fallback_empty = true;
    result.selected.threshold = thresholds.front();
    result.selected.cv_score = 0.0;
  } else {
    result.selected = *best;
  }
  return result;
}

void save_features_json(const std::string& path, const SelectionResult& sel,
                        const SelectionOptions& opts, std::uint64_t seed) {
  nlohmann::json j;
  j["schema_version"] = 1;
  j["seed"] = seed;
  j["alpha"] = opts.pc.alpha;
  j["bootstrap"] = sel.scores.repeats;
  j["max_cond_size"] = opts.pc.max_cond_size;
  j["n_features"] = opts.pc.n_features;
  j["fallback_empty"] = sel.fallback_empty;
  j["certainty"] = nlohmann::json::array();
  for (std::size_t i = 0; i < sel.scores.features.size(); ++i)
    j["certainty"].push_back({{"name", sel.scores.features[i].name},
                              {"lag", sel.scores.features[i].lag},
                              {"score", sel.scores.score[i]}});
  j["candidates"] = nlohmann::json::array();
  for (const auto& c : sel.candidates) {
    nlohmann::json members = nlohmann::json::array();
    for (const auto& f : c.members)
      members.push_back({{"name", f.name}, {"lag", f.lag}});
    j["candidates"].push_back({{"threshold", c.threshold},
                               {"members", members},
                               {"cv_score", std::isfinite(c.cv_score)
                                                ? c.cv_score
                                                : nlohmann::json()}});
  }
  nlohmann::json selected = nlohmann::json::array();
  for (const auto& f : sel.selected.members)
    selected.push_back({{"name", f.name}, {"lag", f.lag}});
  j["selected"] = selected;
  j["selected_threshold"] = sel.selected.threshold;
  j["selected_cv_score"] = sel.selected.cv_score;

  std::ofstream out(path);
  if (!out) throw ValidationError("cannot open for writing: " + path);
  out << j.dump(2) << '\n';
}

std::vector<FeatureSpec> load_features_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open features file: " + path);
  const nlohmann::json j = nlohmann::json::parse(in);
  std::vector<FeatureSpec> out;
  for (const auto& f : j.at("selected"))
    out.push_back({f.at("name").get<std::string>(), f.at("lag").get<int>()});
  return out;
}

}  // namespace prevmap
