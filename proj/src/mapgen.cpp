#include "prevmap/mapgen.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <set>

namespace prevmap {

namespace {

bool cube_missing(const SampleCube& cube, int t, int r, int c) {
  return std::isnan(cube.at(0, t, r, c));
}

// months of `year` inside the cube, or empty when incomplete
std::vector<int> year_months(const SampleCube& cube, int year) {
  std::vector<int> out;
  for (int m = 1; m <= 12; ++m) {
    const int idx = cube.months.index_of(year, m);
    if (idx < 0 || idx >= cube.n_months) return {};
    out.push_back(idx);
  }
  return out;
}

}  // namespace

double percentile_linear(std::vector<double> values, double p) {
  if (values.empty()) throw ValidationError("percentile of an empty set");
  std::sort(values.begin(), values.end());
  if (values.size() == 1) return values[0];
  const double h = (values.size() - 1) * p;
  const auto lo = static_cast<std::size_t>(h);
  if (lo + 1 >= values.size()) return values.back();
  const double frac = h - lo;
  return values[lo] + frac * (values[lo + 1] - values[lo]);
}

WeightedSeries weighted_series(const SampleCube& cube, const Raster& population,
                               const Raster* zones) {
  population.validate();
  if (!population.spec.compatible(cube.spec))
    throw CompatibilityError("population grid incompatible with the cube");
  if (zones && !zones->spec.compatible(cube.spec))
    throw CompatibilityError("zone grid incompatible with the cube");

  // zone labels present (0 reserved for the national series)
  std::set<int> labels;
  labels.insert(0);
  if (zones)
    for (int r = 0; r < cube.spec.nrows; ++r)
      for (int c = 0; c < cube.spec.ncols; ++c)
        if (!zones->missing(r, c))
          labels.insert(static_cast<int>(std::llround(zones->at(r, c))));

  WeightedSeries out;
  for (const int zone : labels) {
    const std::size_t rows_before = out.rows.size();
    for (int t = 0; t < cube.n_months; ++t) {
      std::vector<double> per_sample(cube.n_samples, 0.0);
      double pop_total = 0.0;
      for (int r = 0; r < cube.spec.nrows; ++r)
        for (int c = 0; c < cube.spec.ncols; ++c) {
          if (population.missing(r, c) || cube_missing(cube, t, r, c)) continue;
          if (zone != 0) {
            if (!zones || zones->missing(r, c)) continue;
            if (static_cast<int>(std::llround(zones->at(r, c))) != zone) continue;
          }
          const double w = population.at(r, c);
          if (w < 0) throw ValidationError("population must be >= 0");
          if (w == 0.0) continue;
          pop_total += w;
          for (int s = 0; s < cube.n_samples; ++s)
            per_sample[s] += w * cube.at(s, t, r, c);
        }
      if (pop_total == 0.0) continue;
      for (auto& v : per_sample) v /= pop_total;
      SeriesRow row;
      row.month_index = t;
      row.zone = zone;
      row.mean =
          Eigen::Map<const Eigen::VectorXd>(per_sample.data(), per_sample.size())
              .mean();
      row.lo2_5 = percentile_linear(per_sample, 0.025);
      row.hi97_5 = percentile_linear(per_sample, 0.975);
      out.rows.push_back(row);
    }
    if (out.rows.size() == rows_before && zone != 0)
      out.skipped_zones.push_back(zone);
  }
  return out;
}

Eigen::MatrixXd annual_mean_prevalence(const SampleCube& cube, int year) {
  const auto months = year_months(cube, year);
  if (months.empty())
    throw AggregationError("cube does not cover all 12 months of " +
                           std::to_string(year));
  const Eigen::Index np = cube.spec.size();
  Eigen::MatrixXd out(cube.n_samples, np);
  for (int r = 0; r < cube.spec.nrows; ++r)
    for (int c = 0; c < cube.spec.ncols; ++c) {
      const Eigen::Index pix = static_cast<Eigen::Index>(r) * cube.spec.ncols + c;
      bool miss = false;
      for (const int t : months)
        if (cube_missing(cube, t, r, c)) miss = true;
      if (miss) {
        out.col(pix).setConstant(std::numeric_limits<double>::quiet_NaN());
        continue;
      }
      for (int s = 0; s < cube.n_samples; ++s) {
        double total = 0.0;
        for (const int t : months) total += cube.at(s, t, r, c);
        out(s, pix) = total / 12.0;
      }
    }
  return out;
}

namespace {

Raster reduce_annual(const SampleCube& cube, int year,
                     const std::function<double(const Eigen::VectorXd&)>& f) {
  const Eigen::MatrixXd annual = annual_mean_prevalence(cube, year);
  Raster out(cube.spec, cube.spec.nodata);
  for (int r = 0; r < cube.spec.nrows; ++r)
    for (int c = 0; c < cube.spec.ncols; ++c) {
      const Eigen::Index pix = static_cast<Eigen::Index>(r) * cube.spec.ncols + c;
      if (std::isnan(annual(0, pix))) continue;
      out.at(r, c) = f(annual.col(pix));
    }
  return out;
}

}  // namespace

Raster exceedance(const SampleCube& cube, int year, double threshold,
                  bool above) {
  if (threshold < 0.0 || threshold > 1.0)
    throw ValidationError("exceedance threshold must lie in [0,1]");
  return reduce_annual(cube, year, [&](const Eigen::VectorXd& v) {
    int count = 0;
    for (Eigen::Index s = 0; s < v.size(); ++s)
      count += above ? (v[s] > threshold) : (v[s] <= threshold);
    return static_cast<double>(count) / v.size();
  });
}

Raster iqr_map(const SampleCube& cube, int year) {
  if (cube.n_samples < 4)
    throw ValidationError("iqr map needs at least 4 samples");
  return reduce_annual(cube, year, [](const Eigen::VectorXd& v) {
    std::vector<double> s(v.begin(), v.end());
    return percentile_linear(s, 0.75) - percentile_linear(s, 0.25);
  });
}

Raster mean_map(const SampleCube& cube, int year) {
  return reduce_annual(cube, year,
                       [](const Eigen::VectorXd& v) { return v.mean(); });
}

Raster median_map(const SampleCube& cube, int year) {
  return reduce_annual(cube, year, [](const Eigen::VectorXd& v) {
    std::vector<double> s(v.begin(), v.end());
    return percentile_linear(s, 0.5);
  });
}

std::vector<int> complete_years(const SampleCube& cube) {
  std::set<int> candidates;
  for (int t = 0; t < cube.n_months; ++t)
    candidates.insert(cube.months.year_month(t).first);
  std::vector<int> out;
  for (const int y : candidates)
    if (!year_months(cube, y).empty()) out.push_back(y);
  return out;
}

ProductSpec ProductSpec::parse(const std::string& token) {
  ProductSpec p{Kind::kMean, 0.0, true};
  if (token == "mean") {
    p.kind = Kind::kMean;
  } else if (token == "median") {
    p.kind = Kind::kMedian;
  } else if (token == "iqr") {
    p.kind = Kind::kIqr;
  } else if (token == "series") {
    p.kind = Kind::kSeries;
  } else if (token.rfind("exceed:", 0) == 0) {
    p.kind = Kind::kExceed;
    const auto rest = token.substr(7);
    const auto colon = rest.find(':');
    if (colon == std::string::npos)
      throw ParseError("product '" + token + "' wants exceed:<threshold>:above|below");
    p.threshold = std::stod(rest.substr(0, colon));
    const std::string dir = rest.substr(colon + 1);
    if (dir == "above")
      p.above = true;
    else if (dir == "below")
      p.above = false;
    else
      throw ParseError("exceed direction must be 'above' or 'below', got '" +
                       dir + "'");
  } else {
    throw ParseError("unknown product '" + token + "'");
  }
  return p;
}

std::string ProductSpec::filename_stem(int year) const {
  switch (kind) {
    case Kind::kMean:
      return "prev_annual_mean_" + std::to_string(year);
    case Kind::kMedian:
      return "prev_annual_median_" + std::to_string(year);
    case Kind::kIqr:
      return "prev_annual_iqr_" + std::to_string(year);
    case Kind::kExceed: {
      char buf[32];
      std::snprintf(buf, sizeof(buf), "%g", threshold);
      std::string t(buf);
      std::replace(t.begin(), t.end(), '.', 'p');
      return std::string("prev_") + (above ? "exceed_" : "not_exceed_") + t +
             "_" + std::to_string(year);
    }
    case Kind::kSeries:
      return "series";
  }
  return "product";
}

std::vector<std::string> aggregate_products(const SampleCube& cube,
                                            const Raster& population,
                                            const Raster* zones,
                                            const AggregateOptions& opts,
                                            const std::string& out_dir) {
  if (cube.n_samples < opts.min_samples)
    throw ValidationError("cube holds " + std::to_string(cube.n_samples) +
                          " samples; published products need >= " +
                          std::to_string(opts.min_samples));
  namespace fs = std::filesystem;
  fs::create_directories(out_dir);
  std::vector<std::string> written;
  const auto years = complete_years(cube);

  for (const auto& prod : opts.products) {
    if (prod.kind == ProductSpec::Kind::kSeries) {
      const WeightedSeries series = weighted_series(cube, population, zones);
      const std::string name = "series.csv";
      std::ofstream out((fs::path(out_dir) / name).string());
      out << "period,zone,mean,lo2.5,hi97.5\n";
      for (const auto& row : series.rows) {
        const auto [y, m] = cube.months.year_month(row.month_index);
        char period[16];
        std::snprintf(period, sizeof(period), "%04d-%02d", y, m);
        out << period << ','
            << (row.zone == 0 ? std::string("all") : std::to_string(row.zone))
            << ',' << format_double(row.mean) << ',' << format_double(row.lo2_5)
            << ',' << format_double(row.hi97_5) << '\n';
      }
      written.push_back(name);
      continue;
    }
    if (years.empty())
      throw AggregationError("cube covers no complete calendar year");
    for (const int year : years) {
      Raster r;
      switch (prod.kind) {
        case ProductSpec::Kind::kMean: r = mean_map(cube, year); break;
        case ProductSpec::Kind::kMedian: r = median_map(cube, year); break;
        case ProductSpec::Kind::kIqr: r = iqr_map(cube, year); break;
        case ProductSpec::Kind::kExceed:
          r = exceedance(cube, year, prod.threshold, prod.above);
          break;
        case ProductSpec::Kind::kSeries: break;
      }
      const std::string name = prod.filename_stem(year) + ".asc";
      write_ascii_grid(r, (fs::path(out_dir) / name).string());
      written.push_back(name);
    }
  }
  return written;
}

}  // namespace prevmap
