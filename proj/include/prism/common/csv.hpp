#pragma once

#include <cstddef>
#include <string>
#include <string_view>
#include <vector>

namespace prism::csv {

// Comma-separated text without quoting. Rows keep their 1-based line number
// so ingestion errors can point at the source.
struct Row {
  std::size_t line = 0;
  std::vector<std::string> cells;
};

struct Table {
  std::string path;
  std::vector<std::string> header;
  std::vector<Row> rows;

  // Index of a header column; throws a data error naming the file if absent.
  std::size_t column(std::string_view name) const;
};

Table read(const std::string& path);
std::vector<std::string> split(std::string_view line);

// Parses a finite or NaN number ("", "nan", "NaN" -> NaN). Throws a data error
// naming path, line, and column on anything else.
double parse_number(std::string_view cell, const std::string& path, std::size_t line,
                    std::string_view column);

// Shortest text that parses back to exactly v; NaN prints as "nan".
std::string format(double v);

// Writes header + rows atomically enough for our purposes (truncate, write).
class Writer {
 public:
  Writer(const std::string& path, const std::vector<std::string>& header);
  ~Writer();
  Writer(const Writer&) = delete;
  Writer& operator=(const Writer&) = delete;

  Writer& cell(std::string_view text);
  Writer& cell(double v);
  Writer& cell(long long v);
  Writer& cell(std::size_t v) { return cell(static_cast<long long>(v)); }
  Writer& cell(int v) { return cell(static_cast<long long>(v)); }
  void end_row();
  void close();

 private:
  void* file_;
  bool first_ = true;
  std::string path_;
};

}  // namespace prism::csv
