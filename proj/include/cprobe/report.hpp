// SPDX-License-Identifier: Apache-2.0
//
// Plot-ready CSV output. Numbers are written in shortest round-trip form so
// identical inputs give byte-identical files.

#pragma once

#include <concepts>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace cprobe {

std::string format_double(double value);
std::string format_optional(const std::optional<double>& value);  // "nan" when empty

class CsvWriter {
 public:
  explicit CsvWriter(std::vector<std::string> header);

  CsvWriter& cell(std::string_view text);
  CsvWriter& cell(double value);
  template <std::integral T>
  CsvWriter& cell(T value) {
    return cell(std::string_view(std::to_string(value)));
  }
  CsvWriter& cell(const std::optional<double>& value);
  void end_row();

  const std::string& text() const noexcept { return text_; }
  void save(const std::filesystem::path& path) const;

 private:
  std::size_t columns_;
  std::size_t in_row_ = 0;
  std::string text_;
};

/// Parses RFC-4180 style CSV (quoted fields may hold commas and quotes).
/// Returns rows including the header row.
std::vector<std::vector<std::string>> read_csv(const std::filesystem::path& path);

double parse_double(std::string_view text);  // accepts "nan"
std::uint64_t parse_u64(std::string_view text);

}  // namespace cprobe
