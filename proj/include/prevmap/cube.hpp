#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "prevmap/raster.hpp"
#include "prevmap/tables.hpp"

namespace prevmap {

/// Posterior prevalence draws: [sample][month][row][col], float32. Missing
/// pixels hold NaN; everything else lies in [0,1]. Stored on disk as
/// cube.bin (8-byte magic "PRVCUBE1", four little-endian u64 dims, then
/// little-endian float32 values) plus a cube_meta.json sidecar carrying the
/// grid spec, month labels, seed and provenance digests.
struct SampleCube {
  GridSpec spec;
  MonthIndex months;  // calendar label of month slab 0
  int n_samples = 0;
  int n_months = 0;
  std::uint64_t seed = 0;
  std::map<std::string, std::string> provenance;
  std::vector<float> values;

  std::size_t index(int s, int t, int r, int c) const {
    return ((static_cast<std::size_t>(s) * n_months + t) * spec.nrows + r) *
               spec.ncols +
           c;
  }
  float at(int s, int t, int r, int c) const { return values[index(s, t, r, c)]; }
  float& at(int s, int t, int r, int c) { return values[index(s, t, r, c)]; }
  void allocate() {
    values.assign(static_cast<std::size_t>(n_samples) * n_months * spec.size(),
                  0.0f);
  }
  void validate() const;
};

void write_cube(const SampleCube& cube, const std::string& dir);
SampleCube read_cube(const std::string& dir);

}  // namespace prevmap
