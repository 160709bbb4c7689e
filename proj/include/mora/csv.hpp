#pragma once

#include <charconv>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <initializer_list>
#include <string>
#include <string_view>
#include <vector>

namespace mora {

/// Shortest round-trip decimal form, '.' separator, independent of locale.
inline std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

/// Fixed-precision form for report columns.
inline std::string format_fixed(double v, int precision) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v, std::chars_format::fixed, precision);
  return std::string(buf, res.ptr);
}

double parse_double(std::string_view text);

std::vector<std::string> split_csv_line(std::string_view line);

/// Writes comma-separated rows with a mandatory header.
class CsvWriter {
 public:
  CsvWriter(const std::filesystem::path& path, std::vector<std::string> header);

  CsvWriter& operator<<(std::string_view cell);
  CsvWriter& operator<<(double v) { return *this << std::string_view(format_double(v)); }
  CsvWriter& operator<<(std::size_t v) { return *this << std::string_view(std::to_string(v)); }
  CsvWriter& operator<<(int v) { return *this << std::string_view(std::to_string(v)); }
  CsvWriter& operator<<(bool v) { return *this << std::string_view(v ? "1" : "0"); }
  void end_row();
  void close();

 private:
  std::filesystem::path path_;
  std::ofstream out_;
  std::size_t columns_;
  std::size_t in_row_ = 0;
};

/// Whole-file CSV reader: header plus rows of string cells.
struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  std::size_t column(std::string_view name) const;
};

CsvTable read_csv(const std::filesystem::path& path);

}  // namespace mora
