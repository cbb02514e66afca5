#include "prevmap/cube.hpp"

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>

#include <json.hpp>

namespace prevmap {

namespace {

constexpr char kMagic[8] = {'P', 'R', 'V', 'C', 'U', 'B', 'E', '1'};

void put_u64(std::ofstream& out, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  out.write(reinterpret_cast<const char*>(b), 8);
}

std::uint64_t get_u64(std::ifstream& in) {
  unsigned char b[8];
  in.read(reinterpret_cast<char*>(b), 8);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

}  // namespace

void SampleCube::validate() const {
  spec.validate();
  if (values.size() !=
      static_cast<std::size_t>(n_samples) * n_months * spec.size())
    throw DimensionError("sample cube value count does not match its dims");
  for (const float v : values)
    if (!std::isnan(v) && (v < 0.0f || v > 1.0f))
      throw ValidationError("sample cube holds a prevalence outside [0,1]");
}

void write_cube(const SampleCube& cube, const std::string& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  const std::string bin = (fs::path(dir) / "cube.bin").string();
  std::ofstream out(bin, std::ios::binary);
  if (!out) throw ValidationError("cannot open for writing: " + bin);
  out.write(kMagic, 8);
  put_u64(out, cube.n_samples);
  put_u64(out, cube.n_months);
  put_u64(out, cube.spec.nrows);
  put_u64(out, cube.spec.ncols);
  // float32 little-endian payload (matches the host layout here)
  static_assert(sizeof(float) == 4);
  out.write(reinterpret_cast<const char*>(cube.values.data()),
            static_cast<std::streamsize>(cube.values.size() * 4));
  if (!out) throw ValidationError("write failed: " + bin);

  nlohmann::json meta;
  meta["schema_version"] = 1;
  meta["grid"] = {{"ncols", cube.spec.ncols}, {"nrows", cube.spec.nrows},
                  {"xll", cube.spec.xll},     {"yll", cube.spec.yll},
                  {"cellsize", cube.spec.cellsize},
                  {"nodata", cube.spec.nodata}};
  meta["start_year"] = cube.months.start_year;
  meta["start_month"] = cube.months.start_month;
  meta["n_samples"] = cube.n_samples;
  meta["n_months"] = cube.n_months;
  meta["seed"] = cube.seed;
  meta["provenance"] = cube.provenance;
  std::ofstream mout((fs::path(dir) / "cube_meta.json").string());
  mout << meta.dump(2) << '\n';
}

SampleCube read_cube(const std::string& dir) {
  namespace fs = std::filesystem;
  const std::string bin = (fs::path(dir) / "cube.bin").string();
  std::ifstream in(bin, std::ios::binary);
  if (!in) throw ValidationError("cannot open cube: " + bin);
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, kMagic, 8) != 0)
    throw ParseError(bin + ": bad magic, not a sample cube");

  SampleCube cube;
  cube.n_samples = static_cast<int>(get_u64(in));
  cube.n_months = static_cast<int>(get_u64(in));
  const auto nrows = get_u64(in);
  const auto ncols = get_u64(in);

  std::ifstream min((fs::path(dir) / "cube_meta.json").string());
  if (!min) throw ValidationError("missing cube_meta.json next to " + bin);
  nlohmann::json meta = nlohmann::json::parse(min);
  cube.spec.ncols = meta["grid"]["ncols"].get<int>();
  cube.spec.nrows = meta["grid"]["nrows"].get<int>();
  cube.spec.xll = meta["grid"]["xll"].get<double>();
  cube.spec.yll = meta["grid"]["yll"].get<double>();
  cube.spec.cellsize = meta["grid"]["cellsize"].get<double>();
  cube.spec.nodata = meta["grid"]["nodata"].get<double>();
  cube.months.start_year = meta["start_year"].get<int>();
  cube.months.start_month = meta["start_month"].get<int>();
  cube.seed = meta.value("seed", 0ULL);
  if (meta.contains("provenance"))
    for (const auto& [k, v] : meta["provenance"].items())
      cube.provenance[k] = v.get<std::string>();

  if (nrows != static_cast<std::uint64_t>(cube.spec.nrows) ||
      ncols != static_cast<std::uint64_t>(cube.spec.ncols))
    throw DimensionError(bin + ": dims disagree with cube_meta.json");

  const std::size_t count =
      static_cast<std::size_t>(cube.n_samples) * cube.n_months * nrows * ncols;
  cube.values.resize(count);
  in.read(reinterpret_cast<char*>(cube.values.data()),
          static_cast<std::streamsize>(count * 4));
  if (static_cast<std::size_t>(in.gcount()) != count * 4)
    throw DimensionError(bin + ": truncated payload");
  return cube;
}

}  // namespace prevmap
