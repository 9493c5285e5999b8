#include "phidpc/experiment.hpp"

#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

using namespace phidpc;
namespace fs = std::filesystem;

namespace {

const fs::path kConfigDir = PHIDPC_CONFIG_DIR;

Json linear_doc()
{
  std::ifstream in(kConfigDir / "linear_sanity.json");
  return Json::parse(in);
}

fs::path scratch(const std::string & name)
{
  const fs::path dir = fs::temp_directory_path() / ("phidpc_exp_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string field_of(const Json & doc)
{
  try {
    parse_config(doc);
  } catch (const ConfigError & e) {
    return e.field_path;
  }
  return "";
}

/// The CSV with the solve-time column removed.
std::string without_timing(const fs::path & path)
{
  std::ifstream in(path);
  std::ostringstream out;
  std::string line;
  while (std::getline(in, line)) {
    out << line.substr(0, line.rfind(',')) << '\n';
  }
  return out.str();
}

int cli(const std::string & args)
{
  const std::string cmd = std::string(PHIDPC_CLI_PATH) + " " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST_CASE("shipped configurations parse")
{
  for (const char * name :
       {"linear_sanity.json", "pendulum_noise_free.json", "pendulum_noisy.json", "pendulum_lambda_sweep.json"}) {
    CAPTURE(name);
    CHECK_NOTHROW(load_config(kConfigDir / name));
  }
  const auto c = load_config(kConfigDir / "pendulum_noise_free.json");
  CHECK(c.horizon == 10);
  CHECK(c.t_ini == 5);
  CHECK(c.data.length == 1000);
  CHECK(c.steps() == 120);
  CHECK(c.controllers.size() == 4);
}

TEST_CASE("configuration errors name the field")
{
  Json doc = linear_doc();
  CHECK(field_of(doc).empty());

  Json extra = doc;
  extra["horizons"] = 5;
  CHECK(field_of(extra) == "horizons");

  Json seedless = doc;
  seedless["data"]["multisine"].erase("seed");
  CHECK(field_of(seedless) == "data.multisine.seed");

  Json sim_seed = doc;
  sim_seed["simulation"]["seed"] = -1;
  CHECK(field_of(sim_seed) == "simulation.seed");

  Json form = doc;
  form["controllers"][1]["formulation"] = "deepc-x";
  CHECK(field_of(form) == "controllers[1].formulation");

  Json lambda = doc;
  lambda["controllers"][1]["formulation"] = "phi-deepc-r1";
  CHECK(field_of(lambda) == "controllers[1].lambda");

  Json short_data = doc;
  short_data["data"]["length"] = 12;
  CHECK(field_of(short_data) == "data.length");

  Json dup = doc;
  dup["controllers"][2]["name"] = "spc";
  CHECK(field_of(dup) == "controllers[2].name");

  CHECK_THROWS_AS(load_config(kConfigDir / "does_not_exist.json"), ConfigError);
}

TEST_CASE("seed override and controller selection")
{
  auto c = parse_config(linear_doc());
  override_seed(c, 100);
  CHECK(c.data.multisine.seed == 100);
  CHECK(c.data.noise_seed == 101);
  CHECK(c.basis.kmeans_seed == 102);
  CHECK(c.simulation.seed == 103);

  select_controllers(c, {"koopman", "spc"});
  REQUIRE(c.controllers.size() == 2);
  CHECK(c.controllers[0].name == "koopman");
  CHECK(c.controllers[1].name == "spc");
  CHECK_THROWS_AS(select_controllers(c, {"deepc"}), ConfigError);
}

TEST_CASE("linear sanity instance: formulations coincide and runs reproduce")
{
  const auto c = parse_config(linear_doc());
  const auto dir_a = scratch("a");
  const auto dir_b = scratch("b");
  const auto a = run_experiment(c, dir_a);
  const auto b = run_experiment(c, dir_b);
  REQUIRE(a.runs.size() == 3);
  for (const auto & run : a.runs) {
    CAPTURE(run.controller.name);
    REQUIRE(run.ok());
    CHECK(run.metrics.steps == c.steps());
  }
  // Noise-free linear data with the identity basis: every controller applies the same inputs.
  CHECK((a.runs[0].log.u - a.runs[1].log.u).cwiseAbs().maxCoeff() < 1e-6);
  CHECK((a.runs[0].log.u - a.runs[2].log.u).cwiseAbs().maxCoeff() < 1e-6);
  CHECK(a.consistency < 1e-8);

  for (const char * name : {"traj_spc.csv", "traj_deepc.csv", "traj_koopman.csv"}) {
    CAPTURE(name);
    CHECK(without_timing(dir_a / name) == without_timing(dir_b / name));
  }
  for (const char * name : {"data.csv", "predictor.json", "basis.json", "plot_tracking.dat"}) {
    CHECK(fs::exists(dir_a / name));
  }
  const auto metrics = Json::parse(std::ifstream(dir_a / "metrics.json"));
  CHECK(metrics.size() == 3);
  CHECK(format_metrics_table(metrics).find("J_track") != std::string::npos);
}

TEST_CASE("an empty controller list still writes identification artifacts")
{
  Json doc = linear_doc();
  doc["controllers"] = Json::array();
  const auto c = parse_config(doc);
  const auto dir = scratch("empty");
  const auto report = run_experiment(c, dir);
  CHECK(report.runs.empty());
  CHECK(fs::exists(dir / "predictor.json"));
  CHECK(fs::exists(dir / "metrics.json"));
  CHECK(Json::parse(std::ifstream(dir / "metrics.json")).empty());
}

TEST_CASE("command-line exit codes")
{
  const auto dir = scratch("cli");
  const std::string config = (kConfigDir / "linear_sanity.json").string();
  const std::string out = (dir / "out").string();

  CHECK(cli("fit --config " + config + " --out " + out) == 0);
  CHECK(cli("verify --config " + config + " --predictor " + out + "/predictor.json") == 0);
  CHECK(cli("run --config " + config + " --out " + out + " --controllers spc") == 0);
  CHECK(cli("report --out " + out) == 0);

  // Validation errors.
  CHECK(cli("run --config " + config + " --controllers nope") == 2);
  CHECK(cli("frobnicate") == 2);
  Json bad = linear_doc();
  bad["horizon"] = 0;
  std::ofstream(dir / "bad.json") << bad.dump();
  CHECK(cli("run --config " + (dir / "bad.json").string() + " --out " + out) == 2);
  std::ofstream(dir / "broken.json") << "{\"name\": ";
  CHECK(cli("fit --config " + (dir / "broken.json").string() + " --out " + out) == 2);

  // A stored predictor that disagrees with the refit fails verification.
  const fs::path theta_path = fs::path(out) / "predictor_theta.bin";
  Matrix<double> theta = read_matrix_binary(theta_path);
  theta(0, 0) += 1.0;
  write_matrix_binary(theta_path, theta);
  CHECK(cli("verify --config " + config + " --predictor " + out + "/predictor.json") == 3);

  // A damaged predictor file is a validation error.
  std::ofstream(fs::path(out) / "predictor.json") << "{";
  CHECK(cli("verify --config " + config + " --predictor " + out + "/predictor.json") == 2);
}
