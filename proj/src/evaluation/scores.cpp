#include "prism/evaluation/scores.hpp"

#include "prism/common/csv.hpp"
#include "prism/common/error.hpp"

namespace prism::eval {

std::vector<std::string> ScoreTable::dates() const {
  std::vector<std::string> out;
  for (const auto& r : rows) {
    if (out.empty() || out.back() != r.date) out.push_back(r.date);
  }
  return out;
}

ScoreTable read_scores(const std::string& path) {
  const auto table = csv::read(path);
  if (table.header.size() < 3 || table.header[0] != "date" || table.header[1] != "ticker" ||
      table.header[2] != "score") {
    throw data_error(path + ": header must start with date,ticker,score");
  }
  ScoreTable out;
  out.rows.reserve(table.rows.size());
  for (const auto& row : table.rows) {
    const double score = csv::parse_number(row.cells[2], path, row.line, "score");
    out.rows.push_back({row.cells[0], row.cells[1], score});
  }
  return out;
}

void write_scores(const std::string& path, const ScoreTable& table) {
  csv::Writer w(path, {"date", "ticker", "score"});
  for (const auto& r : table.rows) w.cell(r.date).cell(r.ticker).cell(r.score).end_row();
  w.close();
}

}  // namespace prism::eval
