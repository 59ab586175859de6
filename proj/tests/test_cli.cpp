#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "doctest.h"
#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string cli_path() {
  if (const char* p = std::getenv("SAFE_CLI_PATH")) return p;
#ifdef SAFE_CLI_PATH
  return SAFE_CLI_PATH;
#else
  FAIL("SAFE_CLI_PATH must point at the safe binary");
  return "";
#endif
}

fs::path scratch_dir() {
  static fs::path dir = [] {
    fs::path d = fs::temp_directory_path() / "safe_cli_test";
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
  }();
  return dir;
}

int run_cmd(const std::string& args, const fs::path& stderr_to = {}) {
  std::string cmd = cli_path() + " " + args + " >/dev/null";
  if (!stderr_to.empty()) cmd += " 2>" + stderr_to.string();
  int rc = std::system(cmd.c_str());
  return rc < 0 ? rc : WEXITSTATUS(rc);
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE(in.good());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

fs::path write_config(const std::string& name, const json& doc) {
  fs::path p = scratch_dir() / name;
  std::ofstream(p) << doc.dump(2);
  return p;
}

json tiny_config() {
  return json{
      {"clients", 2},
      {"clients_per_round", 2},
      {"rounds", 1},
      {"local_epochs", 1},
      {"batch_size", 8},
      {"seed", 5},
      {"data", {{"classes", 4}, {"samples_per_class", 10}, {"ses_per_class", 2}}},
  };
}

int line_count(const std::string& s) {
  int n = 0;
  for (char c : s) n += c == '\n' ? 1 : 0;
  return n;
}

}  // namespace

TEST_CASE("run writes a report and a per-round csv") {
  fs::path cfg = write_config("run.json", tiny_config());
  fs::path out = scratch_dir() / "run_out";
  REQUIRE(run_cmd("run " + cfg.string() + " --out " + out.string()) == 0);

  std::string csv = slurp(out / "rounds.csv");
  CHECK(line_count(csv) == 3);  // header + rounds 0..1
  std::string header = csv.substr(0, csv.find('\n'));
  CHECK(header ==
        "round,eps_plus,eps_minus,tau,cloud_c_acc,cloud_s_acc,mean_client_c_acc,"
        "mean_client_s_acc,ratio_cosine,d_cka_0,d_cka_1");

  json rep = json::parse(slurp(out / "report.json"));
  CHECK(rep.at("rounds").size() == 2);
  CHECK(rep.at("config").at("clients") == 2);
  CHECK(rep.at("cloud_confusion").size() == 4);
}

TEST_CASE("identical invocations produce byte-identical csv output") {
  fs::path cfg = write_config("det.json", tiny_config());
  fs::path a = scratch_dir() / "det_a";
  fs::path b = scratch_dir() / "det_b";
  REQUIRE(run_cmd("run " + cfg.string() + " --out " + a.string()) == 0);
  REQUIRE(run_cmd("run " + cfg.string() + " --out " + b.string()) == 0);
  CHECK(slurp(a / "rounds.csv") == slurp(b / "rounds.csv"));
}

TEST_CASE("set overrides take effect") {
  fs::path cfg = write_config("ovr.json", tiny_config());
  fs::path out = scratch_dir() / "ovr_out";
  REQUIRE(run_cmd("run " + cfg.string() + " --set rounds=2 --out " + out.string()) == 0);
  CHECK(line_count(slurp(out / "rounds.csv")) == 4);
  json rep = json::parse(slurp(out / "report.json"));
  CHECK(rep.at("config").at("rounds") == 2);
}

TEST_CASE("an unknown override key exits with status 2 and names the key") {
  fs::path cfg = write_config("bad_key.json", tiny_config());
  fs::path err = scratch_dir() / "bad_key.err";
  CHECK(run_cmd("run " + cfg.string() + " --set bogus.knob=1", err) == 2);
  std::string msg = slurp(err);
  CHECK(msg.find("bogus.knob") != std::string::npos);
}

TEST_CASE("invalid config values exit with status 2 and name the field") {
  fs::path cfg = write_config("bad_val.json", tiny_config());
  fs::path err = scratch_dir() / "bad_val.err";
  CHECK(run_cmd("run " + cfg.string() + " --set clients_per_round=5", err) == 2);
  CHECK(slurp(err).find("clients_per_round") != std::string::npos);
  CHECK(run_cmd("run " + (scratch_dir() / "missing.json").string(), err) == 2);
}

TEST_CASE("partition previews the shard counts") {
  fs::path cfg = write_config("part.json", tiny_config());
  fs::path out = scratch_dir() / "part_out";
  REQUIRE(run_cmd("partition " + cfg.string() + " --out " + out.string()) == 0);
  json pv = json::parse(slurp(out / "partition.json"));
  auto counts = pv.at("counts");
  REQUIRE(counts.size() == 2);
  std::vector<int> totals(4, 0);
  for (const auto& row : counts) {
    REQUIRE(row.size() == 4);
    for (size_t j = 0; j < 4; ++j) totals[j] += row.at(j).get<int>();
  }
  for (size_t j = 0; j < 4; ++j) CHECK(totals[j] == pv.at("totals_per_class").at(j).get<int>());
  CHECK(pv.at("achieved_ratio").get<double>() >= 1.0);
}

TEST_CASE("compare runs both arms and summarizes them") {
  fs::path cfg = write_config("cmp.json", tiny_config());
  fs::path out = scratch_dir() / "cmp_out";
  REQUIRE(run_cmd("compare " + cfg.string() + " --seeds 1 --out " + out.string()) == 0);
  json cm = json::parse(slurp(out / "compare.json"));
  CHECK(cm.at("seeds") == 1);
  CHECK(cm.at("per_seed").size() == 1);
  for (const char* arm : {"fedavg", "safe"}) {
    CHECK(cm.at(arm).contains("cloud_c_acc_mean"));
    CHECK(cm.at(arm).contains("cloud_s_acc_stddev"));
    CHECK(cm.at("per_seed").at(0).contains(arm));
  }
}

TEST_CASE("a report's embedded config reproduces the run") {
  fs::path cfg = write_config("echo.json", tiny_config());
  fs::path out1 = scratch_dir() / "echo_a";
  REQUIRE(run_cmd("run " + cfg.string() + " --out " + out1.string()) == 0);
  json rep = json::parse(slurp(out1 / "report.json"));
  fs::path cfg2 = write_config("echo_roundtrip.json", rep.at("config"));
  fs::path out2 = scratch_dir() / "echo_b";
  REQUIRE(run_cmd("run " + cfg2.string() + " --out " + out2.string()) == 0);
  CHECK(slurp(out1 / "rounds.csv") == slurp(out2 / "rounds.csv"));
}
