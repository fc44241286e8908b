#pragma once

#include <cstddef>
#include <string>
#include <vector>

namespace prism::eval {

// Rows of a `date,ticker,score,...` file; extra columns are ignored.
struct ScoreRow {
  std::string date;
  std::string ticker;
  double score = 0;
};

struct ScoreTable {
  std::vector<ScoreRow> rows;
  // Distinct dates in file order (files are written date-major).
  std::vector<std::string> dates() const;
};

ScoreTable read_scores(const std::string& path);
void write_scores(const std::string& path, const ScoreTable& table);

}  // namespace prism::eval
