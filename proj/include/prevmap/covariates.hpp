#pragma once

#include <map>
#include <string>
#include <vector>

#include "prevmap/raster.hpp"
#include "prevmap/tables.hpp"

namespace prevmap {

/// A model feature: a static covariate, or a dynamic covariate at a monthly
/// lag (0, 1 or 2). Identifiers sort lexicographically, which fixes the PC
/// algorithm's test ordering.
struct FeatureSpec {
  std::string name;
  int lag = -1;  // -1 marks a static covariate

  bool is_dynamic() const { return lag >= 0; }
  std::string id() const {
    return is_dynamic() ? name + "_lag" + std::to_string(lag) : name;
  }
  bool operator==(const FeatureSpec&) const = default;
};

/// Covariate rasters from a directory: <name>.asc for static covariates,
/// <name>_<YYYY>_<MM>.asc for dynamic ones. Dynamic months may extend before
/// the modeled window to serve lagged lookups.
struct CovariateStack {
  GridSpec spec;
  MonthIndex months;
  std::map<std::string, Raster> statics;
  std::map<std::string, std::map<int, Raster>> dynamics;  // month index -> raster

  static CovariateStack load(const std::string& dir, const MonthIndex& months,
                             int n_months, int max_lag);

  /// Value of the feature at a cell for a model month; NaN when the cell is
  /// missing. Throws ExtractionError when the lagged month raster is absent.
  double value(const FeatureSpec& f, int row, int col, int month_index) const;

  /// All representable features at lags 0..max_lag, sorted by id.
  std::vector<FeatureSpec> all_features(int max_lag) const;

  const Raster& any_raster() const;
};

}  // namespace prevmap
