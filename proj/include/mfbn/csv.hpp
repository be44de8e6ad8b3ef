#pragma once

#include <cstddef>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

namespace mfbn {

// Shortest decimal text that parses back to the same double ("%.17g" style
// fallback); non-finite values are written as nan/inf.
std::string csv_number(double x);
std::string csv_number(const std::optional<double>& x);

// Minimal reader for the comma-separated files this project writes: no
// quoting, first row is the header.
struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  std::size_t column(const std::string& name) const;
  std::optional<double> number(std::size_t row, const std::string& name) const;
};

CsvTable read_csv(std::istream& in);
CsvTable read_csv_file(const std::string& path);

}  // namespace mfbn
