#include "prevmap/covariates.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <limits>

namespace prevmap {

CovariateStack CovariateStack::load(const std::string& dir,
                                    const MonthIndex& months, int n_months,
                                    int max_lag) {
  namespace fs = std::filesystem;
  CovariateStack stack;
  stack.months = months;
  bool have_spec = false;
  if (!fs::is_directory(dir))
    throw ValidationError("covariate directory does not exist: " + dir);

  for (const auto& entry : fs::directory_iterator(dir)) {
    const std::string name = entry.path().filename().string();
    if (name.size() < 5 || name.substr(name.size() - 4) != ".asc") continue;
    const std::string stem = name.substr(0, name.size() - 4);

    // <base>_<YYYY>_<MM> if the tail parses as year/month
    std::string base;
    int year = 0, month = 0;
    bool dynamic = false;
    if (stem.size() > 8 && stem[stem.size() - 3] == '_' &&
        stem[stem.size() - 8] == '_') {
      const std::string ys = stem.substr(stem.size() - 7, 4);
      const std::string ms = stem.substr(stem.size() - 2, 2);
      if (std::all_of(ys.begin(), ys.end(), ::isdigit) &&
          std::all_of(ms.begin(), ms.end(), ::isdigit)) {
        year = std::stoi(ys);
        month = std::stoi(ms);
        base = stem.substr(0, stem.size() - 8);
        dynamic = month >= 1 && month <= 12 && !base.empty();
      }
    }

    Raster r = read_ascii_grid(entry.path().string());
    if (!have_spec) {
      stack.spec = r.spec;
      have_spec = true;
    } else if (!r.spec.compatible(stack.spec)) {
      throw CompatibilityError("covariate grid incompatible: " + name);
    }

    if (dynamic) {
      const int idx = months.index_of(year, month);
      if (idx < -max_lag || idx >= n_months) continue;  // outside the window
      stack.dynamics[base][idx] = std::move(r);
    } else {
      stack.statics[stem] = std::move(r);
    }
  }
  if (!have_spec)
    throw ValidationError("no covariate rasters found in " + dir);
  return stack;
}

double CovariateStack::value(const FeatureSpec& f, int row, int col,
                             int month_index) const {
  const Raster* r = nullptr;
  if (f.is_dynamic()) {
    const auto it = dynamics.find(f.name);
    if (it == dynamics.end())
      throw ExtractionError("unknown dynamic covariate: " + f.name);
    const int want = month_index - f.lag;
    const auto jt = it->second.find(want);
    if (jt == it->second.end()) {
      const auto [y, m] = months.year_month(want);
      throw ExtractionError("covariate " + f.name + " has no raster for " +
                            std::to_string(y) + "-" + std::to_string(m) +
                            " (needed at lag " + std::to_string(f.lag) + ")");
    }
    r = &jt->second;
  } else {
    const auto it = statics.find(f.name);
    if (it == statics.end())
      throw ExtractionError("unknown static covariate: " + f.name);
    r = &it->second;
  }
  if (!r->in_bounds(row, col)) throw BoundsError("covariate lookup out of bounds");
  if (r->missing(row, col)) return std::numeric_limits<double>::quiet_NaN();
  return r->at(row, col);
}

std::vector<FeatureSpec> CovariateStack::all_features(int max_lag) const {
  std::vector<FeatureSpec> out;
  for (const auto& [name, r] : statics) {
    (void)r;
    out.push_back({name, -1});
  }
  for (const auto& [name, months_map] : dynamics) {
    (void)months_map;
    for (int lag = 0; lag <= max_lag; ++lag) out.push_back({name, lag});
  }
  std::sort(out.begin(), out.end(), [](const FeatureSpec& a, const FeatureSpec& b) {
    return a.id() < b.id();
  });
  return out;
}

const Raster& CovariateStack::any_raster() const {
  if (!statics.empty()) return statics.begin()->second;
  for (const auto& [name, m] : dynamics) {
    (void)name;
    if (!m.empty()) return m.begin()->second;
  }
  throw ValidationError("covariate stack is empty");
}

}  // namespace prevmap
