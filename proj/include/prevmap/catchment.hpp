#pragma once

#include <vector>

#include "prevmap/raster.hpp"
#include "prevmap/tables.hpp"

namespace prevmap {

/// Treatment-seeking curve alpha/(1+exp(sigma*t)) + beta; defaults reproduce
/// the calibrated national curve (0.3 at t=120 minutes, floor 0.15).
struct SeekCurveParams {
  double alpha = 0.6;
  double sigma = 0.00916;  // per minute
  double beta = 0.15;

  void validate() const;
};

/// t >= 0 in minutes. Strictly decreasing, bounded in [beta, alpha/2 + beta].
double seek_probability(double minutes, const SeekCurveParams& params);

/// Friction raster in minutes per cell traversal; positive where present.
struct FrictionSurface {
  Raster raster;
  void validate() const;
};

/// Minutes from one facility to every cell; +inf where unreachable, missing
/// where friction is missing.
struct TravelTimeField {
  std::string facility_id;
  Raster minutes;
};

/// Single-source least-cost distances over the 8-connected grid. Edge cost
/// between adjacent cells a,b is 0.5*(friction_a + friction_b), times sqrt(2)
/// for diagonal moves.
TravelTimeField travel_time(const FrictionSurface& friction,
                            const Facility& facility);

/// p_j = t_j^-2 / sum_k t_k^-2 over facilities with finite time; zero-time
/// facilities split the pixel's mass equally. Throws UnreachableError when
/// every time is infinite.
std::vector<double> allocation_probabilities(
    const std::vector<TravelTimeField>& times, int row, int col);

struct CatchmentResult {
  std::vector<double> catchment;  // E_j, aligned with the facility list
  double seek_population_total = 0.0;  // over reachable pixels
  std::vector<std::pair<int, int>> unreachable_pixels;  // populated, no route
};

/// Allocates seek-adjusted pixel population to facilities. population_i is
/// scaled by seek_probability of the travel time to the nearest facility.
CatchmentResult catchment_populations(const FrictionSurface& friction,
                                      const Raster& population,
                                      const std::vector<Facility>& facilities,
                                      const SeekCurveParams& params);

}  // namespace prevmap
