// Acceptance suite: one PASS/FAIL line per criterion, with its wall-clock runtime.

#include "oracles.hpp"

#include "phidpc/experiment.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

using namespace phidpc;
using oracle::Mat;
using oracle::Vec;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start)
{
  return std::chrono::duration<double>(Clock::now() - start).count();
}

struct Outcome
{
  bool passed = false;
  std::string detail;
  double budget = 0.0;  ///< seconds, 0 when the criterion has no runtime bound
};

std::string sci(double v)
{
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3e", v);
  return buf;
}

/// Pendulum instances are shared between criteria; their construction time is charged to every user.
struct Instance
{
  ExperimentConfig config;
  GeneratedData data;
  Identification ident;
  double build_seconds = 0.0;
};

Instance make_instance(const std::filesystem::path & path)
{
  const auto start = Clock::now();
  ExperimentConfig config = load_config(path);
  GeneratedData data = generate_data(config);
  Identification ident = identify(config, data.measured);
  return Instance{std::move(config), std::move(data), std::move(ident), seconds_since(start)};
}

struct TimedRun
{
  ControllerRun run;
  double seconds = 0.0;
};

TimedRun simulate(const Instance & inst, const ControllerConfig & controller)
{
  const auto start = Clock::now();
  TimedRun out{simulate_controller(inst.config, inst.ident, inst.data.measured, controller), 0.0};
  out.seconds = seconds_since(start);
  return out;
}

const ControllerConfig & controller_named(const ExperimentConfig & config, const std::string & name)
{
  for (const auto & c : config.controllers) {
    if (c.name == name) return c;
  }
  throw InvalidArgument("configuration has no controller named '" + name + "'");
}

HorizonReference<double> reference_from(const Matrix<double> & r, Index offset, Index horizon)
{
  HorizonReference<double> ref;
  const Index p = r.rows();
  ref.y.resize(horizon * p);
  for (Index i = 0; i < horizon; ++i) {
    ref.y.segment(i * p, p) = r.col(std::min<Index>(offset + 1 + i, r.cols() - 1));
  }
  return ref;
}

LiftedDataMatrix<double> raw_lifted(const Mat & phi)
{
  LiftedDataMatrix<double> lifted;
  lifted.phi = phi;
  lifted.basis = identity_basis<double>(1, 1, 1, 1);
  lifted.singular_values = Eigen::JacobiSVD<Mat>(phi).singularValues();
  const Index r = lifted.singular_values.size();
  lifted.row_rank_ok = r == phi.rows() && lifted.singular_values(r - 1) > 1e-10 * lifted.singular_values(0);
  return lifted;
}

Mat random_matrix(CounterRng & rng, Index rows, Index cols)
{
  Mat M(rows, cols);
  for (Index i = 0; i < M.size(); ++i) M(i) = rng.normal();
  return M;
}

const std::filesystem::path kConfigDir = PHIDPC_CONFIG_DIR;

}  // namespace

int main()
{
  std::vector<std::pair<std::string, std::function<Outcome()>>> criteria;

  // A criterion's runtime is its own wall time plus the recorded cost of any cached setup it reuses.
  std::map<std::string, Instance> instances;
  std::set<std::string> reused;  // cached items already charged to the current criterion
  auto charge = [&](double & charged, const std::string & key, double seconds) {
    if (reused.insert(key).second) charged += seconds;
  };
  auto instance = [&](const std::string & file, double & charged) -> const Instance & {
    auto it = instances.find(file);
    if (it == instances.end()) {
      return instances.emplace(file, make_instance(kConfigDir / file)).first->second;
    }
    charge(charged, file, it->second.build_seconds);
    return it->second;
  };
  std::map<std::string, TimedRun> runs;
  auto run_of = [&](const std::string & file, const std::string & name, double & charged) -> const TimedRun & {
    const std::string key = file + "/" + name;
    auto it = runs.find(key);
    if (it == runs.end()) {
      const Instance & inst = instance(file, charged);
      return runs.emplace(key, simulate(inst, controller_named(inst.config, name))).first->second;
    }
    charge(charged, key, it->second.seconds);
    charge(charged, file, instances.at(file).build_seconds);
    return it->second;
  };

  std::vector<double> charged(9, 0.0);

  criteria.emplace_back("1 consistency limit: R2 prediction gap to SPC shrinks with lambda", [&] {
    const Instance & inst = instance("pendulum_noise_free.json", charged[1]);
    Outcome out{true, "", 10.0};
    if (inst.ident.lifted->phi.rows() != 40 || !inst.ident.least_squares) {
      return Outcome{false, "lifted data matrix is not the full-row-rank 40-row instance", 10.0};
    }
    const Matrix<double> r = benchmark_reference(inst.config);
    const Index T = inst.ident.blocks.columns();
    const std::vector<double> lambdas = {1e0, 1e2, 1e4, 1e6};
    double worst_final = 0.0;
    double worst_increase = -1.0;
    std::ostringstream gaps;
    for (Index j : {T / 5, T / 2, (4 * T) / 5}) {
      const auto window = inst.ident.blocks.window(j);
      const auto ref = reference_from(r, j % inst.config.steps(), inst.config.horizon);
      const auto spc = make_controller_spec(inst.config, {"spc", Formulation::Spc, 0.0, 0.0}, inst.ident);
      const Vector<double> y_spc = open_loop_prediction(spc, window, ref, inst.config.solver);
      double previous = std::numeric_limits<double>::infinity();
      for (double lambda : lambdas) {
        const auto r2 = make_controller_spec(inst.config, {"r2", Formulation::DeePCR2, lambda, 0.0}, inst.ident);
        const double gap = (open_loop_prediction(r2, window, ref, inst.config.solver) - y_spc).cwiseAbs().maxCoeff();
        if (std::isfinite(previous)) worst_increase = std::max(worst_increase, gap - previous);
        previous = gap;
        if (j == T / 2) gaps << ' ' << sci(gap);
      }
      worst_final = std::max(worst_final, previous);
    }
    out.passed = worst_increase <= 0.0 && worst_final <= 1e-4;
    out.detail = "gaps at lambda=1,1e2,1e4,1e6 (middle window):" + gaps.str() + "; worst gap at 1e6 " +
                 sci(worst_final) + "; largest increase " + sci(worst_increase);
    return out;
  });

  criteria.emplace_back("2 R1 and R2 closed loops coincide at lambda=1e4", [&] {
    const auto & r1 = run_of("pendulum_noise_free.json", "phi-deepc-r1", charged[2]);
    const auto & r2 = run_of("pendulum_noise_free.json", "phi-deepc-r2", charged[2]);
    if (!r1.run.ok() || !r2.run.ok()) return Outcome{false, r1.run.error + " " + r2.run.error, 60.0};
    const double gap = (r1.run.log.y - r2.run.log.y).cwiseAbs().maxCoeff();
    const Index steps = r1.run.log.steps();
    return Outcome{gap <= 1e-5 && steps == 120, "max |y_R1 - y_R2| = " + sci(gap) + " over " + std::to_string(steps) +
                                                    " steps",
                   60.0};
  });

  criteria.emplace_back("3 ridge prediction equals the ridge predictor at the optimizer", [&] {
    const Instance & inst = instance("pendulum_noise_free.json", charged[3]);
    const auto spec = make_controller_spec(inst.config, controller_named(inst.config, "ridge-phi-deepc"), inst.ident);
    CounterRng rng(2024);
    const Index T = inst.ident.blocks.columns();
    double worst = 0.0;
    for (int trial = 0; trial < 20; ++trial) {
      const Index j = static_cast<Index>(rng.below(static_cast<std::uint64_t>(T)));
      const auto window = inst.ident.blocks.window(j);
      HorizonReference<double> ref;
      ref.y.resize(inst.config.horizon);
      for (Index i = 0; i < ref.y.size(); ++i) ref.y(i) = 2.0 * rng.uniform() - 1.0;
      Vector<double> u;
      const Vector<double> y = open_loop_prediction(spec, window, ref, inst.config.solver, &u);
      const Vector<double> direct = predict(*spec.predictor, inst.ident.basis, window.u_ini, window.y_ini, u);
      worst = std::max(worst, (y - direct).cwiseAbs().maxCoeff());
    }
    return Outcome{worst <= 1e-8, "max |y - Theta_ridge phi_bar| over 20 windows = " + sci(worst), 5.0};
  });

  criteria.emplace_back("4 linear sanity: exact representation and identical closed loops", [&] {
    ExperimentConfig config = load_config(kConfigDir / "linear_sanity.json");
    config.simulation.steps = 100;
    const auto data = generate_data(config);
    const auto ident = identify(config, data.measured);
    if (!ident.least_squares) return Outcome{false, ident.least_squares_error, 0.0};
    const double ratio = ident.least_squares->residuals.norm() / ident.blocks.yf.norm();
    std::vector<ControllerRun> loops;
    for (Formulation f : {Formulation::Spc, Formulation::DeePC, Formulation::KoopmanMpc}) {
      loops.push_back(simulate_controller(config, ident, data.measured, {to_string(f), f, 0.0, 0.0}));
      if (!loops.back().ok()) return Outcome{false, loops.back().error, 0.0};
    }
    auto gap = [](const ControllerRun & a, const ControllerRun & b) {
      return std::max((a.log.u - b.log.u).cwiseAbs().maxCoeff(), (a.log.y - b.log.y).cwiseAbs().maxCoeff());
    };
    const double deepc = gap(loops[1], loops[0]);
    const double koopman = gap(loops[2], loops[0]);
    const bool steps_ok = loops[0].log.steps() == 100;
    return Outcome{ratio <= 1e-9 && deepc <= 1e-6 && koopman <= 1e-6 && steps_ok,
                   "||E||_F/||Yf||_F = " + sci(ratio) + "; DeePC vs SPC " + sci(deepc) + "; Koopman vs SPC " +
                       sci(koopman) + " over " + std::to_string(loops[0].log.steps()) + " steps",
                   0.0};
  });

  criteria.emplace_back("5 small lambda degrades R1 tracking", [&] {
    const auto & weak = run_of("pendulum_lambda_sweep.json", "r1-lambda-1e-1", charged[5]);
    const auto & strong = run_of("pendulum_lambda_sweep.json", "r1-lambda-1e4", charged[5]);
    if (!weak.run.ok() || !strong.run.ok()) return Outcome{false, weak.run.error + " " + strong.run.error, 0.0};
    const double ratio = weak.run.metrics.j_ise / strong.run.metrics.j_ise;
    return Outcome{ratio >= 5.0,
                   "J_ISE lambda=1e-1 " + sci(weak.run.metrics.j_ise) + ", lambda=1e4 " +
                       sci(strong.run.metrics.j_ise) + ", ratio " + sci(ratio),
                   0.0};
  });

  const std::vector<std::string> pendulum_controllers = {"phi-spc", "phi-deepc-r1", "phi-deepc-r2",
                                                         "ridge-phi-deepc"};

  criteria.emplace_back("6 tracking accuracy on the pendulum", [&] {
    bool ok = true;
    std::ostringstream detail;
    for (const char * file : {"pendulum_noise_free.json", "pendulum_noisy.json"}) {
      const bool noisy = std::string(file) == "pendulum_noisy.json";
      detail << (noisy ? " | noisy:" : "noise-free:");
      for (const auto & name : pendulum_controllers) {
        const auto & r = run_of(file, name, charged[6]);
        if (!r.run.ok()) {
          ok = false;
          detail << ' ' << name << " failed (" << r.run.error << ")";
          continue;
        }
        const double ise = r.run.metrics.j_ise;
        const double iae = r.run.metrics.j_iae;
        ok = ok && (noisy ? ise <= 0.12 : (ise <= 0.1 && iae <= 0.2));
        detail << ' ' << name << " ISE " << sci(ise) << " IAE " << sci(iae) << ';';
      }
    }
    return Outcome{ok, detail.str(), 0.0};
  });

  criteria.emplace_back("7 solve-time ordering: ridge and SPC at most 0.25x R2", [&] {
    const std::string file = "pendulum_noise_free.json";
    const auto & spc = run_of(file, "phi-spc", charged[7]);
    const auto & r2 = run_of(file, "phi-deepc-r2", charged[7]);
    const auto & ridge = run_of(file, "ridge-phi-deepc", charged[7]);
    if (!spc.run.ok() || !r2.run.ok() || !ridge.run.ok()) return Outcome{false, "a controller run failed", 0.0};
    const double base = r2.run.metrics.mean_cpu;
    const double spc_ratio = spc.run.metrics.mean_cpu / base;
    const double ridge_ratio = ridge.run.metrics.mean_cpu / base;
    return Outcome{spc_ratio <= 0.25 && ridge_ratio <= 0.25,
                   "mean solve s: R2 " + sci(base) + ", SPC " + sci(spc.run.metrics.mean_cpu) + " (" + sci(spc_ratio) +
                       "x), ridge " + sci(ridge.run.metrics.mean_cpu) + " (" + sci(ridge_ratio) + "x)",
                   0.0};
  });

  criteria.emplace_back("8 oracle suites: least squares, QP, null space", [&] {
    CounterRng rng(808);
    double ls_worst = 0.0;
    for (int trial = 0; trial < 200; ++trial) {
      const Index rows = 1 + static_cast<Index>(rng.below(6));
      const Index T = rows + static_cast<Index>(rng.below(static_cast<std::uint64_t>(12 - rows + 1)));
      const Index outs = 1 + static_cast<Index>(rng.below(3));
      const Mat phi = random_matrix(rng, rows, T);
      const Mat yf = random_matrix(rng, outs, T);
      const Mat expected = oracle::normal_equations(phi, yf);
      const auto pred = fit_least_squares(raw_lifted(phi), yf);
      ls_worst = std::max(ls_worst, (pred.theta - expected).norm() / expected.norm());
    }

    double qp_worst = 0.0;
    int qp_failures = 0;
    for (int trial = 0; trial < 500; ++trial) {
      const Index n = 1 + static_cast<Index>(rng.below(6));
      const Index bounds = static_cast<Index>(rng.below(4));
      const Index eqs = static_cast<Index>(rng.below(static_cast<std::uint64_t>(std::min<Index>(n, 3))));
      const auto p = oracle::random_qp(rng, n, bounds, eqs);
      const auto expected = oracle::qp_active_set(p);
      const auto s = solve_qp(p);
      if (!expected.feasible || !s.optimal()) {
        ++qp_failures;
        continue;
      }
      qp_worst = std::max(qp_worst, (s.z - expected.z).cwiseAbs().maxCoeff());
    }

    double null_worst = 0.0;
    for (int trial = 0; trial < 50; ++trial) {
      const Index rows = 1 + static_cast<Index>(rng.below(10));
      const Index T = rows + 1 + static_cast<Index>(rng.below(40));
      const Mat phi = random_matrix(rng, rows, T);
      const auto pred = fit_least_squares(raw_lifted(phi), random_matrix(rng, 1, T));
      const double smax = Eigen::JacobiSVD<Mat>(phi).singularValues()(0);
      for (Index c = 0; c < pred.nullspace_basis.cols(); ++c) {
        null_worst = std::max(null_worst, (phi * pred.nullspace_basis.col(c)).norm() / smax);
      }
    }
    return Outcome{ls_worst <= 1e-9 && qp_failures == 0 && qp_worst <= 1e-6 && null_worst <= 1e-10,
                   "LS rel err " + sci(ls_worst) + " (200 cases); QP max |dz| " + sci(qp_worst) + " (500 cases, " +
                       std::to_string(qp_failures) + " failures); ||Phi n||/sigma_max " + sci(null_worst),
                   30.0};
  });

  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const auto & [name, body] = criteria[i];
    Outcome out;
    reused.clear();
    const auto start = Clock::now();
    try {
      out = body();
    } catch (const std::exception & e) {
      out = Outcome{false, std::string("exception: ") + e.what(), 0.0};
    }
    const double runtime = seconds_since(start) + charged[i + 1];
    char timing_buf[32];
    std::snprintf(timing_buf, sizeof timing_buf, "%.3f", runtime);
    std::string timing = std::string("runtime ") + timing_buf + " s";
    if (out.budget > 0.0) {
      timing += " (limit " + std::to_string(static_cast<int>(out.budget)) + " s)";
      if (runtime > out.budget) {
        out.passed = false;
        out.detail += "; runtime limit exceeded";
      }
    }
    std::printf("%s criterion %s | %s | %s\n", out.passed ? "PASS" : "FAIL", name.c_str(), timing.c_str(),
                out.detail.c_str());
    std::fflush(stdout);
    if (!out.passed) ++failed;
  }
  std::printf("%d of %zu criteria passed\n", static_cast<int>(criteria.size()) - failed, criteria.size());
  return failed == 0 ? 0 : 1;
}
