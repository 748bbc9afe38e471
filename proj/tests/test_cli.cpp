// SPDX-License-Identifier: Apache-2.0
//
// End-to-end runs of the cprobe binary.

#include <gtest/gtest.h>

#include <cstdlib>
#include <fstream>
#include <set>
#include <string>
#include <sys/wait.h>

#include <json.hpp>

#include "cprobe/report.hpp"
#include "test_util.hpp"

namespace cprobe {
namespace {

namespace fs = std::filesystem;
using testing::read_text;
using testing::TempDir;

struct CliResult {
  int exit_code = -1;
  std::string err;
};

std::string quote(const std::string& s) {
  std::string out = "'";
  for (char c : s) {
    if (c == '\'') out += "'\\''";
    else out += c;
  }
  return out + "'";
}

/// Runs the binary inside `cwd` and captures its exit status and stderr.
CliResult cprobe(const fs::path& cwd, const std::vector<std::string>& args) {
  std::string cmd = "cd " + quote(cwd.string()) + " && " + quote(CPROBE_BIN);
  for (const auto& a : args) cmd += " " + quote(a);
  const fs::path err = cwd / "stderr.txt";
  cmd += " >/dev/null 2>" + quote(err.string());
  const int status = std::system(cmd.c_str());
  CliResult r;
  r.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.err = read_text(err);
  fs::remove(err);
  return r;
}

nlohmann::json error_record(const CliResult& r) {
  const auto first_line = r.err.substr(0, r.err.find('\n'));
  return nlohmann::json::parse(first_line);
}

class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    ASSERT_EQ(cprobe(dir_.path(), {"synth", "--seed", "2", "--n-per-class", "12", "-o", "s"}).exit_code, 0);
    ASSERT_EQ(cprobe(dir_.path(), {"trace", "-m", "s/model.cpb", "-c", "s/corpus.jsonl", "-o", "t"}).exit_code, 0);
  }

  TempDir dir_{"cli"};
};

TEST_F(CliTest, PlantedHeadRanksFirst) {
  ASSERT_EQ(cprobe(dir_.path(), {"heads", "-t", "t", "-o", "h"}).exit_code, 0);
  const auto rows = read_csv(dir_ / "h/heads.csv");
  ASSERT_GE(rows.size(), 2u);
  EXPECT_EQ(rows[0][0], "layer");
  EXPECT_EQ(rows[1][0], "1");
  EXPECT_EQ(rows[1][1], "2");
  EXPECT_LT(parse_double(rows[1][6]), 0.0);
}

TEST_F(CliTest, AblateWithoutTargetsReportsOnlyTheBaseline) {
  ASSERT_EQ(cprobe(dir_.path(), {"ablate", "-m", "s/model.cpb", "-c", "s/corpus.jsonl", "-o", "a"}).exit_code, 0);
  const auto rows = read_csv(dir_ / "a/ablation.csv");
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_EQ(rows[1][0], "baseline");
  EXPECT_EQ(parse_double(rows[1][2]), 0.0);
}

TEST_F(CliTest, ManifestListsEveryOutput) {
  ASSERT_EQ(cprobe(dir_.path(), {"neurons", "-t", "t", "--layers", "all", "-o", "n"}).exit_code, 0);
  const auto m = nlohmann::json::parse(read_text(dir_ / "n/neurons.manifest.json"));
  std::set<std::string> listed;
  for (const auto& o : m.at("outputs")) listed.insert(o.get<std::string>());
  std::set<std::string> present;
  for (const auto& e : fs::directory_iterator(dir_ / "n")) {
    const auto name = e.path().filename().string();
    if (name != "neurons.manifest.json") present.insert(name);
  }
  EXPECT_EQ(listed, present);
  EXPECT_EQ(m.at("command"), "neurons");
  EXPECT_EQ(m.at("inputs").size(), 25u);  // store manifest + 24 traces

  const auto t = nlohmann::json::parse(read_text(dir_ / "t/trace.manifest.json"));
  std::size_t bins = 0;
  for (const auto& o : t.at("outputs")) {
    const auto name = o.get<std::string>();
    EXPECT_TRUE(fs::exists(dir_ / "t" / name)) << name;
    bins += name.ends_with(".bin");
  }
  EXPECT_EQ(bins, 24u);
}

TEST_F(CliTest, ReplayReproducesOutputsByteForByte) {
  ASSERT_EQ(cprobe(dir_.path(), {"stats", "-t", "t", "--resamples", "200", "-o", "st"}).exit_code, 0);
  ASSERT_EQ(cprobe(dir_.path(), {"replay", "st/stats.manifest.json", "--out", "st2"}).exit_code, 0);
  EXPECT_EQ(read_text(dir_ / "st/layer_stats.csv"), read_text(dir_ / "st2/layer_stats.csv"));
}

TEST_F(CliTest, ReplayRefusesChangedInputs) {
  ASSERT_EQ(cprobe(dir_.path(), {"heads", "-t", "t", "-o", "h"}).exit_code, 0);
  std::ofstream(dir_ / "t/manifest.json", std::ios::app) << " ";
  const CliResult r = cprobe(dir_.path(), {"replay", "h/heads.manifest.json"});
  EXPECT_EQ(r.exit_code, 3);
}

TEST_F(CliTest, ConfigErrorsExitWithTwo) {
  const CliResult r = cprobe(dir_.path(), {"heads", "-t", "t", "--lambda", "abc"});
  EXPECT_EQ(r.exit_code, 2);
  const auto e = error_record(r);
  EXPECT_EQ(e["error"]["kind"], "config");
  EXPECT_EQ(e["error"]["exit_code"], 2);

  EXPECT_EQ(cprobe(dir_.path(), {"ablate", "-m", "s/model.cpb", "-c", "s/corpus.jsonl", "--neurons", "9.0"})
                .exit_code,
            2);
  EXPECT_EQ(cprobe(dir_.path(), {"frobnicate"}).exit_code, 2);
}

TEST_F(CliTest, InputErrorsExitWithThree) {
  const CliResult missing = cprobe(dir_.path(), {"heads", "-t", "nowhere", "-o", "x"});
  EXPECT_EQ(missing.exit_code, 3);
  EXPECT_EQ(error_record(missing)["error"]["kind"], "io");

  std::ofstream(dir_ / "bad.jsonl") << "{\"id\":\"a\",\"code\":\"x\",\"label\":\"maybe\"}\n";
  const CliResult bad = cprobe(dir_.path(), {"trace", "-m", "s/model.cpb", "-c", "bad.jsonl", "-o", "x"});
  EXPECT_EQ(bad.exit_code, 3);
  EXPECT_NE(error_record(bad)["error"]["message"].get<std::string>().find("bad.jsonl:1"), std::string::npos);
}

TEST_F(CliTest, RuntimeErrorsExitWithFour) {
  std::ofstream out(dir_ / "vuln_only.jsonl");
  std::ifstream in(dir_ / "s/corpus.jsonl");
  for (std::string line; std::getline(in, line);) {
    if (line.find("\"vulnerable\"") != std::string::npos) out << line << "\n";
  }
  out.close();
  ASSERT_EQ(cprobe(dir_.path(), {"trace", "-m", "s/model.cpb", "-c", "vuln_only.jsonl", "-o", "tv"}).exit_code, 0);
  const CliResult r = cprobe(dir_.path(), {"heads", "-t", "tv", "-o", "hv"});
  EXPECT_EQ(r.exit_code, 4);
  EXPECT_EQ(error_record(r)["error"]["kind"], "domain");
}

}  // namespace
}  // namespace cprobe
