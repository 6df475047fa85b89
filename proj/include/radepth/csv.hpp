#pragma once

#include <filesystem>
#include <string>
#include <vector>

namespace radepth {

// Numeric comma-separated table with a mandatory header row.
struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<double>> rows;
};

// Reads a numeric CSV. If `expected_header` is non-empty, the header must
// match it exactly.
CsvTable read_csv(const std::filesystem::path& path,
                  const std::vector<std::string>& expected_header = {});

// Values are written with round-trip precision.
void write_csv(const std::filesystem::path& path, const CsvTable& table);

// Formats a double so that parsing it back yields the same value.
std::string format_double(double value);

}  // namespace radepth
