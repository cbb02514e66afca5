#pragma once

#include <string>
#include <utility>
#include <vector>

#include "prevmap/errors.hpp"

namespace prevmap {

/// Georeferenced grid header. Two specs are compatible iff all six fields are
/// exactly equal; every multi-raster operation requires compatibility.
struct GridSpec {
  int ncols = 0;
  int nrows = 0;
  double xll = 0.0;      // lower-left corner x
  double yll = 0.0;      // lower-left corner y
  double cellsize = 0.0;
  double nodata = -9999.0;

  void validate() const;
  bool compatible(const GridSpec& other) const {
    return ncols == other.ncols && nrows == other.nrows && xll == other.xll &&
           yll == other.yll && cellsize == other.cellsize &&
           nodata == other.nodata;
  }
  std::size_t size() const {
    return static_cast<std::size_t>(ncols) * static_cast<std::size_t>(nrows);
  }
};

/// Row-major grid of doubles, row 0 = northernmost. A cell is missing iff its
/// value compares exactly equal to the nodata sentinel.
struct Raster {
  GridSpec spec;
  std::vector<double> values;

  Raster() = default;
  Raster(GridSpec s, double fill);

  double& at(int row, int col) {
    return values[static_cast<std::size_t>(row) * spec.ncols + col];
  }
  double at(int row, int col) const {
    return values[static_cast<std::size_t>(row) * spec.ncols + col];
  }
  bool missing(int row, int col) const { return at(row, col) == spec.nodata; }
  bool in_bounds(int row, int col) const {
    return row >= 0 && row < spec.nrows && col >= 0 && col < spec.ncols;
  }
  void validate() const;
};

/// Map-unit coordinates of a cell center. Row 0 is the north edge, so
/// y = yll + (nrows - row - 0.5) * cellsize.
std::pair<double, double> cell_center(const GridSpec& spec, int row, int col);

/// Nearest cell to a map-unit coordinate (inverse of cell_center), clamped to
/// nothing: out-of-extent coordinates throw BoundsError.
std::pair<int, int> nearest_cell(const GridSpec& spec, double x, double y);

/// ESRI ASCII grid I/O. Header keys are parsed case-insensitively in any
/// order; data rows run north to south. Floats are written with the shortest
/// decimal form that round-trips, so read(write(r)) == r exactly.
Raster read_ascii_grid(const std::string& path);
void write_ascii_grid(const Raster& raster, const std::string& path);

/// Shortest round-trip decimal rendering (also used by CSV/JSON writers).
std::string format_double(double v);

}  // namespace prevmap
