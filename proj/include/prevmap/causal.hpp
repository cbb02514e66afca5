#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <string>
#include <vector>

#include "prevmap/covariates.hpp"
#include "prevmap/incidence.hpp"
#include "prevmap/prevalence.hpp"

namespace prevmap {

/// Randomized conditional independence test. x and y (and optionally columns
/// of z) are mapped through random Fourier features of a Gaussian kernel with
/// the median-distance bandwidth, the x/y features are residualized on the
/// z features by least squares, and the scaled residual cross-covariance is
/// referred to its eigenvalue-weighted chi-square null (three-moment match).
/// Empty z reduces to an unconditional kernel independence test.
double rcit(const Eigen::VectorXd& x, const Eigen::VectorXd& y,
            const Eigen::MatrixXd& z, int n_features, std::uint64_t seed);

struct PcOptions {
  double alpha = 0.05;
  int max_cond_size = 3;
  int n_features = 25;
};

/// PC skeleton phase restricted to edges incident to the response: a feature
/// is removed as soon as some subset of the current neighbor set (sizes
/// 0..max_cond_size, lexicographic order) renders it independent of the
/// response at level alpha. Returns indices of the surviving features.
std::vector<int> pc_adjacency(const Eigen::MatrixXd& features,
                              const Eigen::VectorXd& response,
                              const PcOptions& opts, std::uint64_t seed);

/// Feature sample matrix at survey clusters plus the observed prevalence
/// response, columns ordered lexicographically by feature id.
struct FeatureCatalog {
  std::vector<FeatureSpec> features;
  Eigen::MatrixXd data;      // clusters x features
  Eigen::VectorXd response;  // y/N per cluster
  std::vector<int> cluster_rows;  // rows of the survey list actually used
};

FeatureCatalog build_feature_catalog(const std::vector<SurveyCluster>& surveys,
                                     const CovariateStack& covariates,
                                     int max_lag = 2);

struct CertaintyScores {
  std::vector<FeatureSpec> features;
  std::vector<double> score;  // bootstrap adjacency frequency, in [0,1]
  int repeats = 0;
};

/// Re-runs pc_adjacency on B bootstrap resamples of the clusters; a feature's
/// certainty is the fraction of repeats in which it stayed adjacent.
CertaintyScores bootstrap_certainty(const FeatureCatalog& catalog, int repeats,
                                    const PcOptions& opts, std::uint64_t seed);

struct CandidateFeatureSet {
  double threshold = 0.0;
  std::vector<FeatureSpec> members;
  double cv_score = 0.0;
};

struct SelectionOptions {
  PcOptions pc;
  int bootstrap = 100;
  std::vector<double> thresholds = {0.1, 0.2, 0.3, 0.4, 0.5,
                                    0.6, 0.7, 0.8, 0.9};
  int cv_folds = 3;
  int cv_samples = 100;
};

struct SelectionResult {
  CertaintyScores scores;
  std::vector<CandidateFeatureSet> candidates;  // one per threshold
  CandidateFeatureSet selected;
  bool fallback_empty = false;  // every candidate set was empty
};

/// Threshold sweep over the certainty scores; each candidate set is scored by
/// prevalence-model cross-validation and the best (ties toward the smaller
/// set) is selected. An all-empty sweep falls back to the incidence-only
/// model with a warning flag.
SelectionResult select_final(const CertaintyScores& scores,
                             const std::vector<SurveyCluster>& surveys,
                             const CovariateStack& covariates,
                             const IncidenceSurfaceSet& surfaces,
                             const PriorSpec& priors,
                             const SelectionOptions& opts, std::uint64_t seed);

void save_features_json(const std::string& path, const SelectionResult& sel,
                        const SelectionOptions& opts, std::uint64_t seed);
std::vector<FeatureSpec> load_features_json(const std::string& path);

}  // namespace prevmap
