#pragma once

#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "prevmap/errors.hpp"

namespace prevmap {

// Minimal CSV support: comma-separated, no quoting (none of the pipeline's
// tables need it), trailing \r tolerated.
struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  int column(const std::string& name) const {
    for (std::size_t i = 0; i < header.size(); ++i)
      if (header[i] == name) return static_cast<int>(i);
    return -1;
  }
  int require_column(const std::string& name, const std::string& file) const {
    const int c = column(name);
    if (c < 0) throw ParseError(file + ": missing required column '" + name + "'");
    return c;
  }
};

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur.push_back(c);
    }
  }
  out.push_back(cur);
  return out;
}

inline CsvTable read_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open CSV: " + path);
  CsvTable t;
  std::string line;
  if (!std::getline(in, line)) throw ParseError(path + ": empty file");
  t.header = split_csv_line(line);
  while (std::getline(in, line)) {
    if (line.empty() || line == "\r") continue;
    auto cells = split_csv_line(line);
    if (cells.size() != t.header.size())
      throw ParseError(path + ": row with " + std::to_string(cells.size()) +
                       " cells, header has " + std::to_string(t.header.size()));
    t.rows.push_back(std::move(cells));
  }
  return t;
}

}  // namespace prevmap
