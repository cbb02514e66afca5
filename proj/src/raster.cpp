#include "prevmap/raster.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>

namespace prevmap {

void GridSpec::validate() const {
  if (ncols < 1 || nrows < 1)
    throw DimensionError("grid must have ncols >= 1 and nrows >= 1");
  if (!(cellsize > 0.0)) throw ValidationError("cellsize must be positive");
}

Raster::Raster(GridSpec s, double fill) : spec(s) {
  spec.validate();
  values.assign(spec.size(), fill);
}

void Raster::validate() const {
  spec.validate();
  if (values.size() != spec.size())
    throw DimensionError("raster holds " + std::to_string(values.size()) +
                         " values, expected " + std::to_string(spec.size()));
}

std::pair<double, double> cell_center(const GridSpec& spec, int row, int col) {
  if (row < 0 || row >= spec.nrows || col < 0 || col >= spec.ncols)
    throw BoundsError("cell index (" + std::to_string(row) + "," +
                      std::to_string(col) + ") outside " +
                      std::to_string(spec.nrows) + "x" +
                      std::to_string(spec.ncols) + " grid");
  const double x = spec.xll + (col + 0.5) * spec.cellsize;
  const double y = spec.yll + (spec.nrows - row - 0.5) * spec.cellsize;
  return {x, y};
}

std::pair<int, int> nearest_cell(const GridSpec& spec, double x, double y) {
  const int col = static_cast<int>(std::floor((x - spec.xll) / spec.cellsize));
  const int row =
      spec.nrows - 1 -
      static_cast<int>(std::floor((y - spec.yll) / spec.cellsize));
  if (row < 0 || row >= spec.nrows || col < 0 || col >= spec.ncols)
    throw BoundsError("coordinate (" + format_double(x) + "," +
                      format_double(y) + ") outside grid extent");
  return {row, col};
}

std::string format_double(double v) {
  std::array<char, 40> buf;
  auto [ptr, ec] = std::to_chars(buf.data(), buf.data() + buf.size(), v);
  if (ec != std::errc()) throw ValidationError("failed to format value");
  return std::string(buf.data(), ptr);
}

namespace {

std::string lower(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(),
                 [](unsigned char c) { return std::tolower(c); });
  return s;
}

double parse_number(const std::string& tok, const std::string& what) {
  double v = 0.0;
  auto [ptr, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), v);
  if (ec != std::errc() || ptr != tok.data() + tok.size())
    throw ParseError("cannot parse " + what + " from '" + tok + "'");
  return v;
}

int parse_int(const std::string& tok, const std::string& what) {
  int v = 0;
  auto [ptr, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), v);
  if (ec != std::errc() || ptr != tok.data() + tok.size())
    throw ParseError("cannot parse " + what + " from '" + tok + "'");
  return v;
}

}  // namespace

Raster read_ascii_grid(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open raster file: " + path);

  GridSpec spec;
  bool seen[6] = {false, false, false, false, false, false};
  static const char* kKeys[6] = {"ncols",     "nrows",    "xllcorner",
                                 "yllcorner", "cellsize", "nodata_value"};
  for (int i = 0; i < 6; ++i) {
    std::string key, val;
    if (!(in >> key >> val))
      throw ParseError(path + ": truncated header, expected 6 key/value lines");
    const std::string k = lower(key);
    int idx = -1;
    for (int j = 0; j < 6; ++j)
      if (k == kKeys[j]) idx = j;
    if (idx < 0) throw ParseError(path + ": unknown header key '" + key + "'");
    if (seen[idx])
      throw ParseError(path + ": duplicate header key '" + key + "'");
    seen[idx] = true;
    switch (idx) {
      case 0: spec.ncols = parse_int(val, "ncols"); break;
      case 1: spec.nrows = parse_int(val, "nrows"); break;
      case 2: spec.xll = parse_number(val, "xllcorner"); break;
      case 3: spec.yll = parse_number(val, "yllcorner"); break;
      case 4: spec.cellsize = parse_number(val, "cellsize"); break;
      case 5: spec.nodata = parse_number(val, "NODATA_value"); break;
    }
  }
  for (int j = 0; j < 6; ++j)
    if (!seen[j])
      throw ParseError(path + ": missing header key '" + std::string(kKeys[j]) +
                       "'");
  spec.validate();

  Raster r;
  r.spec = spec;
  r.values.reserve(spec.size());
  std::string tok;
  while (in >> tok) {
    if (r.values.size() == spec.size())
      throw DimensionError(path + ": expected " + std::to_string(spec.size()) +
                           " cell values, found more");
    r.values.push_back(parse_number(tok, "cell value"));
  }
  if (r.values.size() != spec.size())
    throw DimensionError(path + ": expected " + std::to_string(spec.size()) +
                         " cell values, found " +
                         std::to_string(r.values.size()));
  return r;
}

void write_ascii_grid(const Raster& raster, const std::string& path) {
  raster.validate();
  std::ofstream out(path);
  if (!out) throw ValidationError("cannot open for writing: " + path);
  out << "ncols " << raster.spec.ncols << '\n';
  out << "nrows " << raster.spec.nrows << '\n';
  out << "xllcorner " << format_double(raster.spec.xll) << '\n';
  out << "yllcorner " << format_double(raster.spec.yll) << '\n';
  out << "cellsize " << format_double(raster.spec.cellsize) << '\n';
  out << "NODATA_value " << format_double(raster.spec.nodata) << '\n';
  for (int row = 0; row < raster.spec.nrows; ++row) {
    for (int col = 0; col < raster.spec.ncols; ++col) {
      if (col) out << ' ';
      out << format_double(raster.at(row, col));
    }
    out << '\n';
  }
  if (!out) throw ValidationError("write failed: " + path);
}

}  // namespace prevmap
