#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "prevmap/raster.hpp"

namespace prevmap {

/// Calendar month arithmetic relative to a panel start (month is 1-based).
struct MonthIndex {
  int start_year = 2013;
  int start_month = 1;

  int index_of(int year, int month) const {
    return (year - start_year) * 12 + (month - start_month);
  }
  std::pair<int, int> year_month(int index) const {
    const int m0 = (start_month - 1) + index;
    int y = start_year + m0 / 12;
    int m = m0 % 12;
    if (m < 0) {
      m += 12;
      y -= 1;
    }
    return {y, m + 1};
  }
};

struct Facility {
  std::string id;
  int row = 0, col = 0;
  std::vector<double> monthly_cases;        // NaN marks a missing report
  std::map<int, double> catchment_by_year;  // E_i per calendar year

  // E_i for the year containing month t; NaN if absent.
  double catchment_for_month(const MonthIndex& mi, int t) const;
};

struct FacilityPanel {
  std::vector<Facility> facilities;
  MonthIndex months;
  int n_months = 0;
};

struct SurveyCluster {
  std::string id;
  double x = 0, y = 0;
  int row = 0, col = 0;
  int year = 0, month = 0;  // calendar
  int month_index = 0;      // relative to the modeled window
  int n_tested = 0;
  int n_positive = 0;
};

/// facilities CSV: facility_id,x,y[,catchment_YYYY...],cases_YYYY_MM...
/// The cases columns must form a contiguous monthly sequence.
FacilityPanel load_facilities_csv(const std::string& path, const GridSpec& grid);

/// catchment stage output: facility_id,year,catchment_population (long form)
void save_catchments_csv(const std::string& path,
                         const std::vector<Facility>& facilities, int year);
void merge_catchments_csv(const std::string& facilities_csv,
                          const std::vector<std::string>& catchment_csvs,
                          const std::string& out_path);

/// surveys CSV: cluster_id,x,y,year,month,n_tested,n_positive
std::vector<SurveyCluster> load_surveys_csv(const std::string& path,
                                            const GridSpec& grid,
                                            const MonthIndex& months,
                                            int n_months);

}  // namespace prevmap
