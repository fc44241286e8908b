#include "prism/common/csv.hpp"

#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>

#include "prism/common/error.hpp"

namespace prism::csv {

std::size_t Table::column(std::string_view name) const {
  for (std::size_t i = 0; i < header.size(); ++i) {
    if (header[i] == name) return i;
  }
  throw data_error(path + ": missing column '" + std::string(name) + "'");
}

std::vector<std::string> split(std::string_view line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t comma = line.find(',', start);
    if (comma == std::string_view::npos) {
      out.emplace_back(line.substr(start));
      break;
    }
    out.emplace_back(line.substr(start, comma - start));
    start = comma + 1;
  }
  return out;
}

Table read(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw io_error("cannot open '" + path + "'");
  Table table;
  table.path = path;
  std::string line;
  std::size_t number = 0;
  while (std::getline(in, line)) {
    ++number;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (number == 1 && line.size() >= 3 && line.compare(0, 3, "\xEF\xBB\xBF") == 0) line.erase(0, 3);
    if (line.empty()) continue;
    auto cells = split(line);
    if (table.header.empty()) {
      table.header = std::move(cells);
      continue;
    }
    if (cells.size() != table.header.size()) {
      throw data_error(path + ":" + std::to_string(number) + ": expected " +
                       std::to_string(table.header.size()) + " cells, found " +
                       std::to_string(cells.size()));
    }
    table.rows.push_back({number, std::move(cells)});
  }
  if (table.header.empty()) throw data_error(path + ": empty file");
  return table;
}

double parse_number(std::string_view cell, const std::string& path, std::size_t line,
                    std::string_view column) {
  if (cell.empty() || cell == "nan" || cell == "NaN" || cell == "NA") {
    return std::numeric_limits<double>::quiet_NaN();
  }
  double v = 0;
  const char* begin = cell.data();
  const char* end = begin + cell.size();
  if (*begin == '+') ++begin;
  auto [ptr, ec] = std::from_chars(begin, end, v);
  if (ec != std::errc() || ptr != end || !std::isfinite(v)) {
    throw data_error(path + ":" + std::to_string(line) + ": column '" + std::string(column) +
                     "': not a number: '" + std::string(cell) + "'");
  }
  return v;
}

std::string format(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  (void)ec;
  return std::string(buf, ptr);
}

Writer::Writer(const std::string& path, const std::vector<std::string>& header) : path_(path) {
  file_ = std::fopen(path.c_str(), "wb");
  if (file_ == nullptr) throw io_error("cannot write '" + path + "'");
  for (const auto& h : header) cell(h);
  end_row();
}

Writer::~Writer() {
  if (file_ != nullptr) std::fclose(static_cast<std::FILE*>(file_));
}

Writer& Writer::cell(std::string_view text) {
  auto* f = static_cast<std::FILE*>(file_);
  if (!first_) std::fputc(',', f);
  std::fwrite(text.data(), 1, text.size(), f);
  first_ = false;
  return *this;
}

Writer& Writer::cell(double v) { return cell(std::string_view(format(v))); }

Writer& Writer::cell(long long v) { return cell(std::string_view(std::to_string(v))); }

void Writer::end_row() {
  std::fputc('\n', static_cast<std::FILE*>(file_));
  first_ = true;
}

void Writer::close() {
  if (file_ == nullptr) return;
  const bool failed = std::fclose(static_cast<std::FILE*>(file_)) != 0;
  file_ = nullptr;
  if (failed) throw io_error("failed writing '" + path_ + "'");
}

}  // namespace prism::csv
