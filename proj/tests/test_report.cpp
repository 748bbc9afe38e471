// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "cprobe/error.hpp"
#include "cprobe/report.hpp"
#include "cprobe/rng.hpp"
#include "test_util.hpp"

namespace cprobe {
namespace {

TEST(FormatDouble, ShortestRoundTrip) {
  EXPECT_EQ(format_double(0.1), "0.1");
  EXPECT_EQ(format_double(-0.0), "0");
  EXPECT_EQ(format_double(3.0), "3");
  EXPECT_EQ(format_double(std::nan("")), "nan");
  EXPECT_EQ(format_double(std::numeric_limits<double>::infinity()), "inf");
  EXPECT_EQ(format_double(-std::numeric_limits<double>::infinity()), "-inf");
  EXPECT_EQ(format_optional(std::nullopt), "nan");
  Rng rng(1);
  for (int i = 0; i < 1000; ++i) {
    const double v = rng.normal() * std::pow(10.0, static_cast<double>(rng.uniform_index(40)) - 20.0);
    EXPECT_EQ(parse_double(format_double(v)), v);
  }
}

TEST(Csv, QuotingRoundTrip) {
  testing::TempDir dir("csv");
  CsvWriter w({"name", "value", "count"});
  w.cell("plain").cell(1.5).cell(std::size_t{3});
  w.end_row();
  w.cell("comma, \"quote\"\nnewline").cell(std::optional<double>{}).cell(-2);
  w.end_row();
  w.save(dir / "x.csv");
  const auto rows = read_csv(dir / "x.csv");
  ASSERT_EQ(rows.size(), 3u);
  EXPECT_EQ(rows[1], (std::vector<std::string>{"plain", "1.5", "3"}));
  EXPECT_EQ(rows[2], (std::vector<std::string>{"comma, \"quote\"\nnewline", "nan", "-2"}));
  EXPECT_TRUE(std::isnan(parse_double(rows[2][1])));
}

TEST(Csv, RowWidthIsEnforced) {
  CsvWriter w({"a", "b"});
  w.cell("x");
  EXPECT_THROW(w.end_row(), DomainError);
}

TEST(Parse, RejectsGarbage) {
  EXPECT_THROW(parse_double("1.5x"), ParseError);
  EXPECT_THROW(parse_double(""), ParseError);
  EXPECT_EQ(parse_u64("42"), 42u);
  EXPECT_THROW(parse_u64("-1"), ParseError);
}

}  // namespace
}  // namespace cprobe
