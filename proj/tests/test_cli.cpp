#include <sys/wait.h>

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "doctest.h"
#include "json.hpp"

namespace fs = std::filesystem;
using Json = nlohmann::ordered_json;

namespace {

fs::path scratch_dir() {
  static int counter = 0;
  const auto stamp = std::chrono::steady_clock::now().time_since_epoch().count();
  fs::path p = fs::temp_directory_path() /
               ("rskelly_cli_" + std::to_string(stamp) + "_" +
                std::to_string(counter++));
  fs::create_directories(p);
  return p;
}

std::string config_path(const std::string& name) {
  return std::string(RSKELLY_CONFIG_DIR) + "/" + name;
}

// Runs the tool with the given arguments; stdout is discarded, stderr is
// captured into err_out when provided.
int run_cli(const std::string& args, std::string* err_out = nullptr) {
  const fs::path err_file =
      fs::temp_directory_path() /
      ("rskelly_cli_err_" +
       std::to_string(
           std::chrono::steady_clock::now().time_since_epoch().count()));
  std::string cmd = std::string(RSKELLY_BIN_PATH) + " " + args +
                    " > /dev/null 2> " + err_file.string();
  const int status = std::system(cmd.c_str());
  if (err_out) {
    std::ifstream in(err_file);
    std::ostringstream os;
    os << in.rdbuf();
    *err_out = os.str();
  }
  fs::remove(err_file);
  if (WIFEXITED(status)) return WEXITSTATUS(status);
  return -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE(bool(in));
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

std::size_t data_rows(const std::string& csv) {
  std::istringstream is(csv);
  std::string line;
  std::size_t rows = 0;
  std::getline(is, line);  // header
  while (std::getline(is, line))
    if (!line.empty()) ++rows;
  return rows;
}

}  // namespace

TEST_CASE("solve produces artifacts and reruns are byte-identical") {
  const fs::path dir = scratch_dir();
  const std::string cfg = config_path("solve_scalar.json");

  const int rc1 = run_cli("solve --config " + cfg + " --out " +
                          (dir / "run1").string() + " --quiet");
  REQUIRE(rc1 == 0);
  for (const char* name :
       {"value.csv", "conditions.json", "criterion.json", "metadata.json"})
    CHECK(fs::exists(dir / "run1" / name));

  const int rc2 = run_cli("solve --config " + cfg + " --out " +
                          (dir / "run2").string() + " --quiet");
  REQUIRE(rc2 == 0);
  for (const char* name : {"value.csv", "conditions.json", "criterion.json"})
    CHECK(slurp(dir / "run1" / name) == slurp(dir / "run2" / name));

  const Json crit = Json::parse(slurp(dir / "run1" / "criterion.json"));
  CHECK(std::isfinite(crit.at("u0").get<double>()));
  CHECK(std::isfinite(crit.at("sup_J").get<double>()));
  CHECK_FALSE(crit.at("overflowed").get<bool>());
}

TEST_CASE("check reports the violated step with exit code 2") {
  const fs::path dir = scratch_dir();
  std::string err;
  const int rc = run_cli("check --config " + config_path("check_overbound.json") +
                             " --out " + (dir / "out").string() + " --quiet",
                         &err);
  CHECK(rc == 2);
  CHECK(err.find("condition failure at step 2") != std::string::npos);

  const Json cond = Json::parse(slurp(dir / "out" / "conditions.json"));
  CHECK_FALSE(cond.at("all_pass").get<bool>());
  CHECK(cond.at("violated_step").get<long long>() == 2);
  CHECK(cond.at("violated_block").get<std::string>() == "curvature_blockB");

  const int ok = run_cli("check --config " + config_path("solve_scalar.json") +
                         " --out " + (dir / "ok").string() + " --quiet");
  CHECK(ok == 1);  // config carries mode "solve", command says check
}

TEST_CASE("simulate writes path tables and honors --paths") {
  const fs::path dir = scratch_dir();
  const std::string cfg = config_path("simulate_demo.json");

  REQUIRE(run_cli("simulate --config " + cfg + " --out " +
                  (dir / "a").string() + " --quiet") == 0);
  CHECK(data_rows(slurp(dir / "a" / "paths.csv")) == 4 * 3);

  REQUIRE(run_cli("simulate --config " + cfg + " --out " +
                  (dir / "b").string() + " --paths 2 --quiet") == 0);
  CHECK(data_rows(slurp(dir / "b" / "paths.csv")) == 2 * 3);

  std::string err;
  CHECK(run_cli("simulate --config " + cfg + " --out " +
                    (dir / "c").string() + " --paths 0 --quiet",
                &err) == 1);
  CHECK(err.find("schema error") != std::string::npos);
}

TEST_CASE("evaluate is reproducible under a fixed seed") {
  const fs::path dir = scratch_dir();
  const std::string cfg = config_path("evaluate_demo.json");

  REQUIRE(run_cli("evaluate --config " + cfg + " --out " +
                  (dir / "a").string() + " --paths 500 --quiet") == 0);
  REQUIRE(run_cli("evaluate --config " + cfg + " --out " +
                  (dir / "b").string() + " --paths 500 --quiet") == 0);
  CHECK(slurp(dir / "a" / "evaluate.json") == slurp(dir / "b" / "evaluate.json"));

  REQUIRE(run_cli("evaluate --config " + cfg + " --out " +
                  (dir / "c").string() + " --paths 500 --seed 99 --quiet") == 0);
  const Json a = Json::parse(slurp(dir / "a" / "evaluate.json"));
  const Json c = Json::parse(slurp(dir / "c" / "evaluate.json"));
  CHECK(a.at("estimate_J").at("mean").get<double>() !=
        c.at("estimate_J").at("mean").get<double>());
  // The analytic reference does not depend on the seed.
  CHECK(a.at("analytic").at("sup_J").get<double>() ==
        c.at("analytic").at("sup_J").get<double>());
}

TEST_CASE("train recovers the growth-optimal coefficients in the demo config") {
  const fs::path dir = scratch_dir();
  REQUIRE(run_cli("train --config " + config_path("train_kelly_demo.json") +
                  " --out " + (dir / "out").string() + " --quiet") == 0);
  CHECK(fs::exists(dir / "out" / "trace.csv"));
  const Json ckpt = Json::parse(slurp(dir / "out" / "checkpoint.json"));
  CHECK(ckpt.at("problem").get<std::string>() == "kelly");
  const double D00 =
      ckpt.at("policy").at("D").at(0).at(0).at(0).get<double>();
  const double d0 = ckpt.at("policy").at("d").at(0).at(0).get<double>();
  CHECK(std::abs(D00 - 0.7) <= 1e-3);   // (Sigma Sigma')^{-1} A = 0.7
  CHECK(std::abs(d0 - 0.12) <= 1e-3);   // (Sigma Sigma')^{-1} a = 0.12
}

TEST_CASE("decompose and oracle subcommands succeed on their demo configs") {
  const fs::path dir = scratch_dir();

  REQUIRE(run_cli("decompose --config " + config_path("decompose_demo.json") +
                  " --out " + (dir / "dec").string() + " --quiet") == 0);
  const Json dec = Json::parse(slurp(dir / "dec" / "decomposition.json"));
  CHECK(dec.at("decompositions").size() == 3);

  REQUIRE(run_cli("oracle --config " + config_path("oracle_duality.json") +
                  " --out " + (dir / "orc").string() + " --quiet") == 0);
  const Json orc = Json::parse(slurp(dir / "orc" / "oracle.json"));
  CHECK(orc.at("kind").get<std::string>() == "duality");
  CHECK(orc.at("report").at("gap").get<double>() <= 1e-6);
}

TEST_CASE("argument and schema failures exit with code 1") {
  std::string err;
  CHECK(run_cli("", &err) == 1);                 // missing subcommand
  CHECK(run_cli("juggle --config x.json") == 1);  // unknown subcommand
  CHECK(run_cli("solve") == 1);                   // missing --config
  CHECK(run_cli("solve --config /nonexistent/nope.json --quiet", &err) == 1);
  CHECK(err.find("schema error") != std::string::npos);

  const fs::path dir = scratch_dir();
  CHECK(run_cli("check --config " + config_path("solve_scalar.json") +
                    " --out " + (dir / "x").string() + " --quiet",
                &err) == 1);
  CHECK(err.find("does not match") != std::string::npos);
}
