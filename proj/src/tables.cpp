#include "prevmap/tables.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <limits>
#include <set>

#include "prevmap/csv.hpp"

namespace prevmap {

namespace {

double to_double(const std::string& s, const std::string& what) {
  if (s.empty()) return std::numeric_limits<double>::quiet_NaN();
  double v = 0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size())
    throw ParseError("cannot parse " + what + " from '" + s + "'");
  return v;
}

int to_int(const std::string& s, const std::string& what) {
  int v = 0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size())
    throw ParseError("cannot parse " + what + " from '" + s + "'");
  return v;
}

// cases_YYYY_MM -> (year, month), or nullopt if the name has another shape
std::optional<std::pair<int, int>> parse_cases_column(const std::string& name) {
  if (name.rfind("cases_", 0) != 0 || name.size() != 13 || name[10] != '_')
    return std::nullopt;
  return std::make_pair(to_int(name.substr(6, 4), "cases column year"),
                        to_int(name.substr(11, 2), "cases column month"));
}

std::optional<int> parse_catchment_column(const std::string& name) {
  if (name.rfind("catchment_", 0) != 0 || name.size() != 14) return std::nullopt;
  return to_int(name.substr(10, 4), "catchment column year");
}

}  // namespace

double Facility::catchment_for_month(const MonthIndex& mi, int t) const {
  const auto [year, month] = mi.year_month(t);
  (void)month;
  const auto it = catchment_by_year.find(year);
  if (it != catchment_by_year.end()) return it->second;
  if (catchment_by_year.size() == 1) return catchment_by_year.begin()->second;
  return std::numeric_limits<double>::quiet_NaN();
}

FacilityPanel load_facilities_csv(const std::string& path,
                                  const GridSpec& grid) {
  const CsvTable t = read_csv(path);
  const int c_id = t.require_column("facility_id", path);
  const int c_x = t.require_column("x", path);
  const int c_y = t.require_column("y", path);

  std::vector<std::pair<int, int>> case_cols;   // (column, month key)
  std::vector<std::pair<int, int>> catch_cols;  // (column, year)
  std::vector<std::pair<int, int>> months_seen;
  for (std::size_t i = 0; i < t.header.size(); ++i) {
    if (auto ym = parse_cases_column(t.header[i])) {
      case_cols.emplace_back(static_cast<int>(i),
                             ym->first * 12 + (ym->second - 1));
      months_seen.push_back(*ym);
    } else if (auto y = parse_catchment_column(t.header[i])) {
      catch_cols.emplace_back(static_cast<int>(i), *y);
    }
  }
  if (case_cols.empty())
    throw ParseError(path + ": no cases_YYYY_MM columns found");

  std::sort(case_cols.begin(), case_cols.end(),
            [](const auto& a, const auto& b) { return a.second < b.second; });
  for (std::size_t i = 1; i < case_cols.size(); ++i)
    if (case_cols[i].second != case_cols[i - 1].second + 1)
      throw ParseError(path + ": cases columns are not a contiguous monthly sequence");

  FacilityPanel panel;
  panel.months.start_year = case_cols.front().second / 12;
  panel.months.start_month = case_cols.front().second % 12 + 1;
  panel.n_months = static_cast<int>(case_cols.size());

  std::set<std::string> ids;
  for (const auto& row : t.rows) {
    Facility f;
    f.id = row[c_id];
    if (!ids.insert(f.id).second)
      throw ParseError(path + ": duplicate facility_id '" + f.id + "'");
    const double x = to_double(row[c_x], "x");
    const double y = to_double(row[c_y], "y");
    std::tie(f.row, f.col) = nearest_cell(grid, x, y);
    f.monthly_cases.reserve(case_cols.size());
    for (const auto& [col, key] : case_cols) {
      (void)key;
      const double v = to_double(row[col], "case count");
      if (!std::isnan(v) && (v < 0 || v != std::floor(v)))
        throw ValidationError(path + ": facility " + f.id +
                              " has a negative or non-integer case count");
      f.monthly_cases.push_back(v);
    }
    for (const auto& [col, year] : catch_cols) {
      const double e = to_double(row[col], "catchment population");
      if (!std::isnan(e)) f.catchment_by_year[year] = e;
    }
    panel.facilities.push_back(std::move(f));
  }
  if (panel.facilities.empty()) throw ValidationError(path + ": no facilities");
  return panel;
}

void save_catchments_csv(const std::string& path,
                         const std::vector<Facility>& facilities, int year) {
  std::ofstream out(path);
  if (!out) throw ValidationError("cannot open for writing: " + path);
  out << "facility_id,year,catchment_population\n";
  for (const auto& f : facilities) {
    const auto it = f.catchment_by_year.find(year);
    if (it == f.catchment_by_year.end()) continue;
    out << f.id << ',' << year << ',' << format_double(it->second) << '\n';
  }
}

void merge_catchments_csv(const std::string& facilities_csv,
                          const std::vector<std::string>& catchment_csvs,
                          const std::string& out_path) {
  const CsvTable fac = read_csv(facilities_csv);
  const int c_id = fac.require_column("facility_id", facilities_csv);

  // facility -> year -> E
  std::map<std::string, std::map<int, double>> catchments;
  std::set<int> years;
  for (const auto& cpath : catchment_csvs) {
    const CsvTable c = read_csv(cpath);
    const int k_id = c.require_column("facility_id", cpath);
    const int k_y = c.require_column("year", cpath);
    const int k_e = c.require_column("catchment_population", cpath);
    for (const auto& row : c.rows) {
      const int y = to_int(row[k_y], "year");
      years.insert(y);
      catchments[row[k_id]][y] = to_double(row[k_e], "catchment");
    }
  }

  std::ofstream out(out_path);
  if (!out) throw ValidationError("cannot open for writing: " + out_path);
  for (std::size_t i = 0; i < fac.header.size(); ++i) {
    if (i) out << ',';
    out << fac.header[i];
    if (i == static_cast<std::size_t>(c_id))
      for (int y : years) out << ",catchment_" << y;
  }
  out << '\n';
  for (const auto& row : fac.rows) {
    for (std::size_t i = 0; i < row.size(); ++i) {
      if (i) out << ',';
      out << row[i];
      if (i == static_cast<std::size_t>(c_id)) {
        const auto it = catchments.find(row[c_id]);
        for (int y : years) {
          out << ',';
          if (it != catchments.end()) {
            const auto jt = it->second.find(y);
            if (jt != it->second.end()) out << format_double(jt->second);
          }
        }
      }
    }
    out << '\n';
  }
}

std::vector<SurveyCluster> load_surveys_csv(const std::string& path,
                                            const GridSpec& grid,
                                            const MonthIndex& months,
                                            int n_months) {
  const CsvTable t = read_csv(path);
  const int c_id = t.require_column("cluster_id", path);
  const int c_x = t.require_column("x", path);
  const int c_y = t.require_column("y", path);
  const int c_year = t.require_column("year", path);
  const int c_month = t.require_column("month", path);
  const int c_n = t.require_column("n_tested", path);
  const int c_pos = t.require_column("n_positive", path);

  std::vector<SurveyCluster> out;
  for (const auto& row : t.rows) {
    SurveyCluster s;
    s.id = row[c_id];
    s.x = to_double(row[c_x], "x");
    s.y = to_double(row[c_y], "y");
    std::tie(s.row, s.col) = nearest_cell(grid, s.x, s.y);
    s.year = to_int(row[c_year], "year");
    s.month = to_int(row[c_month], "month");
    s.n_tested = to_int(row[c_n], "n_tested");
    s.n_positive = to_int(row[c_pos], "n_positive");
    if (s.n_tested <= 0)
      throw ValidationError(path + ": cluster " + s.id + " has n_tested <= 0");
    if (s.n_positive < 0 || s.n_positive > s.n_tested)
      throw ValidationError(path + ": cluster " + s.id +
                            " violates 0 <= n_positive <= n_tested");
    s.month_index = months.index_of(s.year, s.month);
    if (s.month_index < 0 || s.month_index >= n_months)
      throw ValidationError(path + ": cluster " + s.id +
                            " falls outside the modeled months");
    out.push_back(std::move(s));
  }
  if (out.empty()) throw ValidationError(path + ": no survey clusters");
  return out;
}

}  // namespace prevmap
