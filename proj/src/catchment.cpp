#include "prevmap/catchment.hpp"

#include <cmath>
#include <limits>
#include <queue>

namespace prevmap {

namespace {
constexpr double kInf = std::numeric_limits<double>::infinity();
const double kSqrt2 = std::sqrt(2.0);
}  // namespace

void SeekCurveParams::validate() const {
  if (alpha < 0) throw ValidationError("seek curve: alpha must be >= 0");
  if (beta < 0 || beta > 1)
    throw ValidationError("seek curve: beta must lie in [0,1]");
  if (alpha + beta > 1)
    throw ValidationError("seek curve: alpha + beta must be <= 1");
  if (!(sigma > 0)) throw ValidationError("seek curve: sigma must be > 0");
}

double seek_probability(double minutes, const SeekCurveParams& params) {
  if (std::isnan(minutes) || minutes < 0)
    throw DomainError("seek_probability requires travel time >= 0");
  return params.alpha / (1.0 + std::exp(params.sigma * minutes)) + params.beta;
}

void FrictionSurface::validate() const {
  raster.validate();
  for (int r = 0; r < raster.spec.nrows; ++r)
    for (int c = 0; c < raster.spec.ncols; ++c)
      if (!raster.missing(r, c) && !(raster.at(r, c) > 0))
        throw ValidationError("friction must be positive where present");
}

TravelTimeField travel_time(const FrictionSurface& friction,
                            const Facility& facility) {
  const Raster& f = friction.raster;
  if (!f.in_bounds(facility.row, facility.col))
    throw PlacementError("facility " + facility.id + " lies outside the grid");
  if (f.missing(facility.row, facility.col))
    throw PlacementError("facility " + facility.id +
                         " sits on a missing friction cell");

  const int nrows = f.spec.nrows, ncols = f.spec.ncols;
  std::vector<double> dist(f.spec.size(), kInf);
  const auto idx = [ncols](int r, int c) {
    return static_cast<std::size_t>(r) * ncols + c;
  };

  using Item = std::pair<double, std::size_t>;  // (distance, cell)
  std::priority_queue<Item, std::vector<Item>, std::greater<Item>> heap;
  dist[idx(facility.row, facility.col)] = 0.0;
  heap.emplace(0.0, idx(facility.row, facility.col));

  static const int dr[8] = {-1, -1, -1, 0, 0, 1, 1, 1};
  static const int dc[8] = {-1, 0, 1, -1, 1, -1, 0, 1};

  while (!heap.empty()) {
    const auto [d, u] = heap.top();
    heap.pop();
    if (d > dist[u]) continue;
    const int r = static_cast<int>(u) / ncols;
    const int c = static_cast<int>(u) % ncols;
    const double fu = f.values[u];
    for (int k = 0; k < 8; ++k) {
      const int rr = r + dr[k], cc = c + dc[k];
      if (rr < 0 || rr >= nrows || cc < 0 || cc >= ncols) continue;
      if (f.missing(rr, cc)) continue;
      const double mult = (dr[k] != 0 && dc[k] != 0) ? kSqrt2 : 1.0;
      const double nd = d + 0.5 * (fu + f.at(rr, cc)) * mult;
      if (nd < dist[idx(rr, cc)]) {
        dist[idx(rr, cc)] = nd;
        heap.emplace(nd, idx(rr, cc));
      }
    }
  }

  TravelTimeField out;
  out.facility_id = facility.id;
  out.minutes.spec = f.spec;
  out.minutes.values.assign(f.spec.size(), f.spec.nodata);
  for (std::size_t i = 0; i < dist.size(); ++i)
    if (f.values[i] != f.spec.nodata) out.minutes.values[i] = dist[i];
  return out;
}

std::vector<double> allocation_probabilities(
    const std::vector<TravelTimeField>& times, int row, int col) {
  if (times.empty()) throw ValidationError("no travel time fields supplied");
  std::vector<double> t(times.size(), kInf);
  int n_zero = 0;
  bool any_finite = false;
  for (std::size_t j = 0; j < times.size(); ++j) {
    const Raster& m = times[j].minutes;
    if (!m.in_bounds(row, col))
      throw BoundsError("pixel outside travel time field");
    if (m.missing(row, col)) continue;
    t[j] = m.at(row, col);
    if (std::isfinite(t[j])) {
      any_finite = true;
      if (t[j] == 0.0) ++n_zero;
    }
  }
  if (!any_finite)
    throw UnreachableError("pixel is unreachable from every facility");

  std::vector<double> p(times.size(), 0.0);
  if (n_zero > 0) {
    // the pixel hosts one or more facilities: split equally among them
    for (std::size_t j = 0; j < t.size(); ++j)
      if (t[j] == 0.0) p[j] = 1.0 / n_zero;
    return p;
  }
  double total = 0.0;
  for (std::size_t j = 0; j < t.size(); ++j)
    if (std::isfinite(t[j])) total += 1.0 / (t[j] * t[j]);
  for (std::size_t j = 0; j < t.size(); ++j)
    if (std::isfinite(t[j])) p[j] = 1.0 / (t[j] * t[j]) / total;
  return p;
}

CatchmentResult catchment_populations(const FrictionSurface& friction,
                                      const Raster& population,
                                      const std::vector<Facility>& facilities,
                                      const SeekCurveParams& params) {
  params.validate();
  friction.validate();
  population.validate();
  if (!friction.raster.spec.compatible(population.spec))
    throw CompatibilityError("friction and population grids are incompatible");
  if (facilities.empty()) throw ValidationError("no facilities supplied");

  std::vector<TravelTimeField> fields;
  fields.reserve(facilities.size());
  for (const auto& fac : facilities) fields.push_back(travel_time(friction, fac));

  CatchmentResult result;
  result.catchment.assign(facilities.size(), 0.0);

  const GridSpec& spec = population.spec;
  for (int r = 0; r < spec.nrows; ++r) {
    for (int c = 0; c < spec.ncols; ++c) {
      if (population.missing(r, c) || friction.raster.missing(r, c)) continue;
      const double pop = population.at(r, c);
      if (pop < 0) throw ValidationError("population must be >= 0");
      double tmin = kInf;
      for (const auto& fld : fields) {
        const double t = fld.minutes.at(r, c);
        if (t != fld.minutes.spec.nodata && t < tmin) tmin = t;
      }
      if (!std::isfinite(tmin)) {
        if (pop > 0) result.unreachable_pixels.emplace_back(r, c);
        continue;
      }
      const double seeking = pop * seek_probability(tmin, params);
      result.seek_population_total += seeking;
      if (seeking == 0.0) continue;
      const auto p = allocation_probabilities(fields, r, c);
      for (std::size_t j = 0; j < p.size(); ++j)
        result.catchment[j] += seeking * p[j];
    }
  }
  return result;
}

}  // namespace prevmap
