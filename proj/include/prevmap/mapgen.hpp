#pragma once

#include <Eigen/Dense>
#include <optional>
#include <string>
#include <vector>

#include "prevmap/cube.hpp"

namespace prevmap {

/// Percentile with the linear-interpolation convention: rank h = (n-1)p,
/// value = x[floor(h)] + frac(h) * (x[floor(h)+1] - x[floor(h)]).
double percentile_linear(std::vector<double> values, double p);

struct SeriesRow {
  int month_index = 0;  // relative to the cube's first month
  int zone = 0;         // 0 = national row
  double mean = 0.0;
  double lo2_5 = 0.0;
  double hi97_5 = 0.0;
};

struct WeightedSeries {
  std::vector<SeriesRow> rows;
  std::vector<int> skipped_zones;  // zero total population
};

/// Per-month population-weighted mean prevalence per posterior sample, then
/// mean and 2.5/97.5 percentile bands over samples. With a zone map, the
/// series is additionally stratified by zone label (zone 0 reports the
/// national series).
WeightedSeries weighted_series(const SampleCube& cube, const Raster& population,
                               const Raster* zones);

/// Per-sample annual pixel means for one calendar year of the cube
/// (samples x pixels, row-major pixels; NaN where the cube is missing).
Eigen::MatrixXd annual_mean_prevalence(const SampleCube& cube, int year);

/// Fraction of samples whose annual-mean prevalence lies strictly above the
/// threshold (direction "above"), or at-or-below it (direction "below").
Raster exceedance(const SampleCube& cube, int year, double threshold,
                  bool above);

/// 75th minus 25th percentile of the annual-mean samples per pixel.
Raster iqr_map(const SampleCube& cube, int year);

Raster mean_map(const SampleCube& cube, int year);
Raster median_map(const SampleCube& cube, int year);

/// Calendar years fully covered by the cube (12 consecutive months each).
std::vector<int> complete_years(const SampleCube& cube);

/// Parsed "--products" entry: mean | median | iqr | exceed:<t>:above |
/// exceed:<t>:below | series.
struct ProductSpec {
  enum class Kind { kMean, kMedian, kIqr, kExceed, kSeries } kind;
  double threshold = 0.0;
  bool above = true;

  static ProductSpec parse(const std::string& token);
  std::string filename_stem(int year) const;
};

struct AggregateOptions {
  std::vector<ProductSpec> products;
  int min_samples = 100;  // published-product floor; relax only for tests
};

/// Writes every requested product under out_dir: rasters per complete year as
/// .asc, the weighted series as series.csv. Returns the file names written.
std::vector<std::string> aggregate_products(const SampleCube& cube,
                                            const Raster& population,
                                            const Raster* zones,
                                            const AggregateOptions& opts,
                                            const std::string& out_dir);

}  // namespace prevmap
