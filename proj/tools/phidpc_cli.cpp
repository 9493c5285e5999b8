// Experiment runner: generate-data | fit | run | verify | report.

#include "phidpc/experiment.hpp"
#include "phidpc/io.hpp"

#include <CLI11.hpp>

#include <fstream>
#include <iostream>
#include <sstream>

namespace {

constexpr int kValidationError = 2;
constexpr int kVerificationFailed = 3;

struct Options
{
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::vector<std::string> controllers;
  std::string predictor;
};

phidpc::ExperimentConfig prepare(const Options & opt)
{
  phidpc::ExperimentConfig config = phidpc::load_config(opt.config);
  if (opt.seed) {
    phidpc::override_seed(config, *opt.seed);
  }
  if (!opt.controllers.empty()) {
    phidpc::select_controllers(config, opt.controllers);
  }
  return config;
}

std::filesystem::path out_dir(const Options & opt, const phidpc::ExperimentConfig & config)
{
  return opt.out.empty() ? std::filesystem::path(config.output_dir) : std::filesystem::path(opt.out);
}

int cmd_generate(const Options & opt)
{
  const auto config = prepare(opt);
  const auto dir = out_dir(opt, config);
  const auto data = phidpc::generate_data(config);
  phidpc::write_dataset_files(data, dir);
  std::cout << "wrote " << data.measured.length() << " samples to " << (dir / "data.csv").string() << '\n';
  return 0;
}

int cmd_fit(const Options & opt)
{
  const auto config = prepare(opt);
  const auto dir = out_dir(opt, config);
  const auto data = phidpc::generate_data(config);
  phidpc::write_dataset_files(data, dir);
  const auto ident = phidpc::identify(config, data.measured);
  phidpc::write_identification(ident, dir);
  std::cout << "Phi: " << ident.lifted->rows() << " x " << ident.lifted->cols()
            << (ident.lifted->row_rank_ok ? " (full row rank)" : " (rank deficient)") << '\n';
  if (ident.least_squares) {
    std::cout << "||E||_F = " << ident.least_squares->residuals.norm()
              << ", ||Yf||_F = " << ident.least_squares->yf.norm()
              << ", consistency diagnostic = " << phidpc::consistency_diagnostic(*ident.least_squares) << '\n';
  } else {
    std::cout << "least squares skipped: " << ident.least_squares_error << '\n';
  }
  std::cout << "artifacts written to " << dir.string() << '\n';
  return 0;
}

int cmd_run(const Options & opt)
{
  const auto config = prepare(opt);
  const auto dir = out_dir(opt, config);
  const auto report = phidpc::run_experiment(config, dir, &std::cout);
  std::cout << '\n' << phidpc::format_metrics_table(report.runs);
  std::cout << "outputs in " << dir.string() << '\n';
  return 0;
}

int cmd_verify(const Options & opt)
{
  const auto config = prepare(opt);
  bool ok = true;
  if (!opt.predictor.empty()) {
    // Validation errors from a damaged file propagate as exit code 2.
    const auto stored = phidpc::load_predictor(opt.predictor);
    const auto data = phidpc::generate_data(config);
    const auto ident = phidpc::identify(config, data.measured);
    if (!ident.least_squares || stored.theta.rows() != ident.least_squares->theta.rows() ||
        stored.theta.cols() != ident.least_squares->theta.cols()) {
      std::cout << "FAIL stored predictor does not match the configured instance\n";
      ok = false;
    } else {
      const double diff = (stored.theta - ident.least_squares->theta).cwiseAbs().maxCoeff();
      const bool pass = diff <= 1e-9 * (1.0 + ident.least_squares->theta.cwiseAbs().maxCoeff());
      std::cout << (pass ? "PASS" : "FAIL") << " stored predictor matches refit: max |dTheta| = " << diff << '\n';
      ok = ok && pass;
    }
  }
  const auto checks = phidpc::verify_properties(config, &std::cout);
  phidpc::Json doc = phidpc::Json::array();
  for (const auto & c : checks) {
    ok = ok && c.passed;
    doc.push_back({{"name", c.name},
                   {"measured", c.measured},
                   {"tolerance", std::isfinite(c.tolerance) ? phidpc::Json(c.tolerance) : phidpc::Json(nullptr)},
                   {"passed", c.passed},
                   {"detail", c.detail}});
  }
  if (!opt.out.empty()) {
    std::filesystem::create_directories(opt.out);
    std::ofstream(std::filesystem::path(opt.out) / "verification.json") << doc.dump(2) << '\n';
  }
  std::cout << (ok ? "all checks passed" : "verification FAILED") << '\n';
  return ok ? 0 : kVerificationFailed;
}

int cmd_report(const Options & opt)
{
  std::filesystem::path dir = opt.out;
  if (dir.empty()) {
    if (opt.config.empty()) {
      throw phidpc::InvalidArgument("report needs --out <dir> or --config <path>");
    }
    dir = prepare(opt).output_dir;
  }
  const auto path = dir / "metrics.json";
  std::ifstream in(path);
  if (!in) {
    throw phidpc::InvalidArgument("no metrics found at " + path.string() + "; run the experiment first");
  }
  phidpc::Json doc;
  try {
    doc = phidpc::Json::parse(in);
  } catch (const phidpc::Json::exception & e) {
    throw phidpc::InvalidArgument(path.string() + ": " + e.what());
  }
  std::cout << phidpc::format_metrics_table(doc);
  return 0;
}

}  // namespace

int main(int argc, char ** argv)
{
  CLI::App app{"Basis-function data-enabled predictive control experiments"};
  app.require_subcommand(1);
  Options opt;

  auto add_common = [&](CLI::App * sub, bool config_required) {
    auto * c = sub->add_option("--config", opt.config, "experiment configuration (JSON)");
    if (config_required) c->required()->check(CLI::ExistingFile);
    sub->add_option("--out", opt.out, "output directory (defaults to the config's output_dir)");
    sub->add_option("--seed", opt.seed, "base seed overriding every seed in the config");
    sub->add_option("--controllers", opt.controllers, "subset of controller names to run")->delimiter(',');
  };
  auto * gen = app.add_subcommand("generate-data", "simulate the identification experiment and write data.csv");
  add_common(gen, true);
  auto * fit = app.add_subcommand("fit", "build Hankel blocks, basis and predictor; write artifacts");
  add_common(fit, true);
  auto * run = app.add_subcommand("run", "full pipeline with closed-loop simulations and metrics");
  add_common(run, true);
  auto * verify = app.add_subcommand("verify", "check the consistency and equivalence properties");
  add_common(verify, true);
  verify->add_option("--predictor", opt.predictor, "stored predictor JSON to validate against a refit");
  auto * report = app.add_subcommand("report", "print the metrics table of a finished run");
  add_common(report, false);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError & e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kValidationError;
  }

  try {
    if (gen->parsed()) return cmd_generate(opt);
    if (fit->parsed()) return cmd_fit(opt);
    if (run->parsed()) return cmd_run(opt);
    if (verify->parsed()) return cmd_verify(opt);
    if (report->parsed()) return cmd_report(opt);
  } catch (const phidpc::InvalidArgument & e) {
    std::cerr << "error: " << e.what() << '\n';
    return kValidationError;
  } catch (const std::exception & e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
