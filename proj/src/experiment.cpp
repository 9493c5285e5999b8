#include "phidpc/experiment.hpp"

#include "phidpc/io.hpp"

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <map>
#include <set>
#include <sstream>

namespace phidpc {

namespace {

// ---------------------------------------------------------------------------
// Config reading with field paths in every error.

std::string join(const std::string & path, const std::string & key)
{
  return path.empty() ? key : path + "." + key;
}

const Json & require_field(const Json & obj, const std::string & key, const std::string & path)
{
  if (!obj.is_object()) {
    throw ConfigError(path.empty() ? "<root>" : path, "expected an object");
  }
  auto it = obj.find(key);
  if (it == obj.end()) {
    throw ConfigError(join(path, key), "missing required field");
  }
  return *it;
}

template <typename T>
T as(const Json & value, const std::string & field)
{
  try {
    return value.get<T>();
  } catch (const Json::exception &) {
    throw ConfigError(field, "has the wrong type (" + std::string(value.type_name()) + ")");
  }
}

template <typename T>
T get(const Json & obj, const std::string & key, const std::string & path)
{
  return as<T>(require_field(obj, key, path), join(path, key));
}

template <typename T>
T get_or(const Json & obj, const std::string & key, const std::string & path, T fallback)
{
  if (!obj.is_object() || !obj.contains(key)) {
    return fallback;
  }
  return as<T>(obj.at(key), join(path, key));
}

double positive(double v, const std::string & field)
{
  if (!(v > 0.0)) throw ConfigError(field, "must be positive");
  return v;
}

std::uint64_t seed_of(const Json & obj, const std::string & key, const std::string & path)
{
  const Json & v = require_field(obj, key, path);
  if (!v.is_number_integer() || (v.is_number_integer() && v.get<long long>() < 0 && !v.is_number_unsigned())) {
    throw ConfigError(join(path, key), "seeds must be explicit non-negative integers");
  }
  return v.get<std::uint64_t>();
}

Matrix<double> matrix_field(const Json & value, const std::string & field)
{
  if (value.is_number()) {
    return Matrix<double>::Constant(1, 1, value.get<double>());
  }
  if (!value.is_array() || value.empty()) {
    throw ConfigError(field, "expected a number or a non-empty array of rows");
  }
  if (value[0].is_number()) {
    Matrix<double> M(static_cast<Index>(value.size()), 1);
    for (std::size_t i = 0; i < value.size(); ++i) M(static_cast<Index>(i), 0) = as<double>(value[i], field);
    return M;
  }
  const Index rows = static_cast<Index>(value.size());
  const Index cols = static_cast<Index>(value[0].size());
  Matrix<double> M(rows, cols);
  for (Index i = 0; i < rows; ++i) {
    const Json & row = value[static_cast<std::size_t>(i)];
    if (!row.is_array() || static_cast<Index>(row.size()) != cols) {
      throw ConfigError(field, "rows must have equal length");
    }
    for (Index j = 0; j < cols; ++j) M(i, j) = as<double>(row[static_cast<std::size_t>(j)], field);
  }
  return M;
}

/// Scalar weights become w * I; matrices must already be n x n.
Matrix<double> weight_field(const Json & value, Index n, const std::string & field)
{
  if (value.is_number()) {
    return value.get<double>() * Matrix<double>::Identity(n, n);
  }
  Matrix<double> M = matrix_field(value, field);
  if (M.rows() != n || M.cols() != n) {
    throw ConfigError(field, "must be " + detail::shape(n, n));
  }
  return M;
}

Formulation parse_formulation(const std::string & text, const std::string & field)
{
  for (Formulation f : {Formulation::Spc, Formulation::DeePC, Formulation::DeePCR1, Formulation::DeePCR2,
                        Formulation::RidgeDeePC, Formulation::KoopmanMpc}) {
    if (text == to_string(f)) return f;
  }
  throw ConfigError(field, "unknown formulation '" + text +
                               "' (expected phi-spc, phi-deepc, phi-deepc-r1, phi-deepc-r2, ridge-phi-deepc, "
                               "koopman-mpc)");
}

/// [lo, hi] pair with null meaning unbounded.
std::pair<double, double> bound_pair(const Json & value, const std::string & field)
{
  if (!value.is_array() || value.size() != 2) {
    throw ConfigError(field, "expected [lo, hi]");
  }
  const double inf = std::numeric_limits<double>::infinity();
  const double lo = value[0].is_null() ? -inf : as<double>(value[0], field);
  const double hi = value[1].is_null() ? inf : as<double>(value[1], field);
  if (lo > hi) throw ConfigError(field, "lo must not exceed hi");
  return {lo, hi};
}

std::string fmt(double v, int precision = 4)
{
  std::ostringstream os;
  os << std::setprecision(precision) << v;
  return os.str();
}

}  // namespace

// ---------------------------------------------------------------------------

Index ExperimentConfig::steps() const
{
  if (simulation.steps) {
    return *simulation.steps;
  }
  return static_cast<Index>(std::floor(simulation.duration / reference_step() + 1e-9));
}

double ExperimentConfig::reference_step() const
{
  return simulation.reference_sample_time.value_or(plant.ts());
}

ExperimentConfig parse_config(const Json & doc)
{
  if (!doc.is_object()) {
    throw ConfigError("<root>", "configuration must be a JSON object");
  }
  static const std::set<std::string> known = {"name", "plant", "data", "horizon", "t_ini", "hankel", "basis",
                                              "cost", "constraints", "controllers", "simulation", "solver",
                                              "koopman_damping", "output_dir", "description"};
  for (const auto & item : doc.items()) {
    if (!known.count(item.key())) {
      throw ConfigError(item.key(), "unknown field");
    }
  }

  ExperimentConfig c;
  c.name = get_or<std::string>(doc, "name", "", "experiment");
  c.output_dir = get_or<std::string>(doc, "output_dir", "", "out");

  // plant
  const Json & plant = require_field(doc, "plant", "");
  c.plant.kind = get<std::string>(plant, "kind", "plant");
  if (c.plant.kind == "pendulum") {
    auto & pp = c.plant.pendulum;
    pp.mass = positive(get_or(plant, "mass", "plant", pp.mass), "plant.mass");
    pp.length = positive(get_or(plant, "length", "plant", pp.length), "plant.length");
    pp.friction = get_or(plant, "friction", "plant", pp.friction);
    pp.gravity = get_or(plant, "gravity", "plant", pp.gravity);
    pp.sample_time = positive(get_or(plant, "sample_time", "plant", pp.sample_time), "plant.sample_time");
    c.plant.initial_state = Vector<double>::Zero(2);
  } else if (c.plant.kind == "linear") {
    c.plant.A = matrix_field(require_field(plant, "A", "plant"), "plant.A");
    c.plant.B = matrix_field(require_field(plant, "B", "plant"), "plant.B");
    c.plant.C = matrix_field(require_field(plant, "C", "plant"), "plant.C");
    if (c.plant.A.rows() != c.plant.A.cols()) throw ConfigError("plant.A", "must be square");
    if (c.plant.B.rows() != c.plant.A.rows()) throw ConfigError("plant.B", "must have as many rows as A");
    if (c.plant.C.cols() != c.plant.A.rows()) throw ConfigError("plant.C", "must have as many columns as A");
    c.plant.sample_time = positive(get_or(plant, "sample_time", "plant", 1.0), "plant.sample_time");
    c.plant.initial_state = Vector<double>::Zero(c.plant.A.rows());
  } else {
    throw ConfigError("plant.kind", "unknown plant '" + c.plant.kind + "' (expected pendulum or linear)");
  }
  if (plant.contains("initial_state")) {
    Matrix<double> x0 = matrix_field(plant["initial_state"], "plant.initial_state");
    if (x0.size() != c.plant.initial_state.size()) throw ConfigError("plant.initial_state", "wrong dimension");
    c.plant.initial_state = Eigen::Map<Vector<double>>(x0.data(), x0.size());
  }

  // data
  const Json & data = require_field(doc, "data", "");
  c.data.length = get<Index>(data, "length", "data");
  if (c.data.length < 2) throw ConfigError("data.length", "must be at least 2");
  const Json & ms = require_field(data, "multisine", "data");
  c.data.multisine.lo = get<double>(ms, "lo", "data.multisine");
  c.data.multisine.hi = get<double>(ms, "hi", "data.multisine");
  c.data.multisine.n_sines = get<Index>(ms, "n_sines", "data.multisine");
  if (ms.contains("band")) {
    const auto band = bound_pair(ms["band"], "data.multisine.band");
    c.data.multisine.band_lo = band.first;
    c.data.multisine.band_hi = band.second;
  }
  c.data.multisine.seed = seed_of(ms, "seed", "data.multisine");
  c.data.multisine.period = c.data.length;
  c.data.noise_std = get_or(data, "noise_std", "data", 0.0);
  if (c.data.noise_std < 0.0) throw ConfigError("data.noise_std", "must be non-negative");
  c.data.noise_seed = seed_of(data, "noise_seed", "data");

  c.horizon = get<Index>(doc, "horizon", "");
  c.t_ini = get<Index>(doc, "t_ini", "");
  if (c.horizon < 1) throw ConfigError("horizon", "must be positive");
  if (c.t_ini < 1) throw ConfigError("t_ini", "must be positive");

  if (doc.contains("hankel")) {
    const Json & h = doc["hankel"];
    if (h.contains("columns")) c.hankel.columns = get<Index>(h, "columns", "hankel");
    c.hankel.wrap = get_or(h, "wrap", "hankel", false);
  }

  // basis
  const Json & basis = require_field(doc, "basis", "");
  c.basis.kind = get<std::string>(basis, "kind", "basis");
  if (c.basis.kind != "rbf-gaussian" && c.basis.kind != "chebyshev" && c.basis.kind != "identity-linear") {
    throw ConfigError("basis.kind", "unknown basis '" + c.basis.kind +
                                        "' (expected rbf-gaussian, chebyshev or identity-linear)");
  }
  if (c.basis.kind == "rbf-gaussian") {
    c.basis.centers = get<Index>(basis, "centers", "basis");
    if (c.basis.centers < 1) throw ConfigError("basis.centers", "must be positive");
    c.basis.kmeans_seed = seed_of(basis, "kmeans_seed", "basis");
    c.basis.kmeans_max_iter = get_or<Index>(basis, "kmeans_max_iter", "basis", 300);
    if (basis.contains("width")) c.basis.width = positive(get<double>(basis, "width", "basis"), "basis.width");
  }
  if (c.basis.kind == "chebyshev") {
    c.basis.orders = get<std::vector<int>>(basis, "orders", "basis");
    if (basis.contains("max_total_degree")) c.basis.max_total_degree = get<int>(basis, "max_total_degree", "basis");
  }
  c.basis.include_window = get_or(basis, "include_window", "basis", false);
  if (basis.contains("includes_bias")) c.basis.includes_bias = get<bool>(basis, "includes_bias", "basis");
  c.basis.rank_tolerance = get_or(basis, "rank_tolerance", "basis", 1e-10);

  // cost
  const Json & cost = require_field(doc, "cost", "");
  c.Q = weight_field(require_field(cost, "Q", "cost"), c.plant.outputs(), "cost.Q");
  c.R = weight_field(require_field(cost, "R", "cost"), c.plant.inputs(), "cost.R");

  if (doc.contains("constraints")) {
    const Json & con = doc["constraints"];
    if (con.contains("u")) {
      const auto [lo, hi] = bound_pair(con["u"], "constraints.u");
      c.constraints.u_lower = Vector<double>::Constant(c.plant.inputs(), lo);
      c.constraints.u_upper = Vector<double>::Constant(c.plant.inputs(), hi);
    }
    if (con.contains("y")) {
      const auto [lo, hi] = bound_pair(con["y"], "constraints.y");
      c.constraints.y_lower = Vector<double>::Constant(c.plant.outputs(), lo);
      c.constraints.y_upper = Vector<double>::Constant(c.plant.outputs(), hi);
    }
  }

  // controllers
  const Json & ctrls = require_field(doc, "controllers", "");
  if (!ctrls.is_array()) throw ConfigError("controllers", "expected an array");
  std::set<std::string> names;
  for (std::size_t i = 0; i < ctrls.size(); ++i) {
    const std::string path = "controllers[" + std::to_string(i) + "]";
    ControllerConfig cc;
    const std::string form = get<std::string>(ctrls[i], "formulation", path);
    cc.formulation = parse_formulation(form, path + ".formulation");
    cc.name = get_or<std::string>(ctrls[i], "name", path, form);
    if (!names.insert(cc.name).second) throw ConfigError(path + ".name", "duplicate controller name '" + cc.name + "'");
    if (cc.formulation == Formulation::DeePCR1 || cc.formulation == Formulation::DeePCR2) {
      cc.lambda = positive(get<double>(ctrls[i], "lambda", path), path + ".lambda");
    }
    if (cc.formulation == Formulation::RidgeDeePC) {
      cc.gamma = positive(get<double>(ctrls[i], "gamma", path), path + ".gamma");
    }
    c.controllers.push_back(cc);
  }

  // simulation
  const Json & sim = require_field(doc, "simulation", "");
  const Json & ref = require_field(sim, "reference", "simulation");
  const std::string ref_kind = get_or<std::string>(ref, "kind", "simulation.reference", "sinusoid");
  if (ref_kind != "sinusoid") throw ConfigError("simulation.reference.kind", "only 'sinusoid' is supported");
  c.simulation.frequency = positive(get<double>(ref, "frequency", "simulation.reference"),
                                    "simulation.reference.frequency");
  c.simulation.duration = get<double>(ref, "duration", "simulation.reference");
  if (c.simulation.duration < 0.0) throw ConfigError("simulation.reference.duration", "must be non-negative");
  if (ref.contains("sample_time")) {
    c.simulation.reference_sample_time =
        positive(get<double>(ref, "sample_time", "simulation.reference"), "simulation.reference.sample_time");
  }
  if (sim.contains("steps")) {
    c.simulation.steps = get<Index>(sim, "steps", "simulation");
    if (*c.simulation.steps < 1) throw ConfigError("simulation.steps", "must be positive");
  }
  c.simulation.noise_std = get_or(sim, "noise_std", "simulation", 0.0);
  if (c.simulation.noise_std < 0.0) throw ConfigError("simulation.noise_std", "must be non-negative");
  c.simulation.seed = seed_of(sim, "seed", "simulation");
  const std::string warm = get_or<std::string>(sim, "warmup", "simulation", "zero");
  if (warm == "zero") c.simulation.warmup = WarmUp::ZeroInput;
  else if (warm == "data-tail") c.simulation.warmup = WarmUp::DataTail;
  else throw ConfigError("simulation.warmup", "expected 'zero' or 'data-tail'");
  const std::string fb = get_or<std::string>(sim, "fallback", "simulation", "hold");
  if (fb == "hold") c.simulation.fallback = FallbackPolicy::HoldPreviousInput;
  else if (fb == "error") c.simulation.fallback = FallbackPolicy::Throw;
  else throw ConfigError("simulation.fallback", "expected 'hold' or 'error'");

  if (doc.contains("solver")) {
    c.solver.tol = positive(get_or(doc["solver"], "tol", "solver", c.solver.tol), "solver.tol");
    c.solver.max_iter = get_or(doc["solver"], "max_iter", "solver", c.solver.max_iter);
    if (c.solver.max_iter < 1) throw ConfigError("solver.max_iter", "must be positive");
  }
  c.koopman_damping = get_or(doc, "koopman_damping", "", 0.0);
  if (c.koopman_damping < 0.0) throw ConfigError("koopman_damping", "must be non-negative");

  const Index required = minimum_hankel_length(c.plant.inputs(), c.plant.outputs(), c.t_ini, c.horizon);
  if (c.data.length < required) {
    throw ConfigError("data.length", "is " + std::to_string(c.data.length) + " but T_ini=" + std::to_string(c.t_ini) +
                                         ", N=" + std::to_string(c.horizon) + " need at least " +
                                         std::to_string(required));
  }
  return c;
}

ExperimentConfig load_config(const std::filesystem::path & path)
{
  std::ifstream in(path);
  if (!in) {
    throw ConfigError("<file>", "cannot open " + path.string());
  }
  Json doc;
  try {
    doc = Json::parse(in);
  } catch (const Json::exception & e) {
    throw ConfigError("<file>", path.string() + " is not valid JSON: " + e.what());
  }
  return parse_config(doc);
}

void override_seed(ExperimentConfig & config, std::uint64_t seed)
{
  config.data.multisine.seed = seed;
  config.data.noise_seed = seed + 1;
  config.basis.kmeans_seed = seed + 2;
  config.simulation.seed = seed + 3;
}

void select_controllers(ExperimentConfig & config, const std::vector<std::string> & names)
{
  std::vector<ControllerConfig> kept;
  for (const auto & name : names) {
    auto it = std::find_if(config.controllers.begin(), config.controllers.end(),
                           [&](const ControllerConfig & c) { return c.name == name; });
    if (it == config.controllers.end()) {
      throw ConfigError("controllers", "no controller named '" + name + "'");
    }
    kept.push_back(*it);
  }
  config.controllers = std::move(kept);
}

// ---------------------------------------------------------------------------

namespace {

Matrix<double> excitation(const ExperimentConfig & config)
{
  const Index m = config.plant.inputs();
  Matrix<double> u(m, config.data.length);
  for (Index i = 0; i < m; ++i) {
    MultisineSpec spec = config.data.multisine;
    spec.seed = config.data.multisine.seed + static_cast<std::uint64_t>(i);
    u.row(i) = multisine(spec).transpose();
  }
  return u;
}

template <typename Fn>
auto with_plant(const ExperimentConfig & config, Fn && fn)
{
  if (config.plant.kind == "pendulum") {
    PendulumPlant<double> plant(config.plant.pendulum, config.plant.initial_state);
    return fn(plant);
  }
  LinearTestPlant<double> plant(config.plant.A, config.plant.B, config.plant.C, config.plant.sample_time);
  plant.reset(config.plant.initial_state);
  return fn(plant);
}

}  // namespace

GeneratedData generate_data(const ExperimentConfig & config)
{
  const Matrix<double> u = excitation(config);
  TrajectoryDataset<double> clean =
      with_plant(config, [&](auto & plant) { return simulate_open_loop<std::decay_t<decltype(plant)>, double>(plant, u); });
  TrajectoryDataset<double> measured = add_noise(clean, config.data.noise_std, config.data.noise_seed);
  return GeneratedData{std::move(clean), std::move(measured)};
}

BasisSet<double> build_basis(const ExperimentConfig & config, const HankelBlocks<double> & blocks)
{
  const Index m = config.plant.inputs();
  const Index p = config.plant.outputs();
  const BasisConfig & bc = config.basis;
  if (bc.kind == "identity-linear") {
    return identity_basis<double>(config.t_ini, config.horizon, m, p, bc.includes_bias.value_or(true));
  }
  const Matrix<double> past = blocks.past();
  if (bc.kind == "rbf-gaussian") {
    Matrix<double> centers = kmeans_centers<double>(past, bc.centers, bc.kmeans_seed, bc.kmeans_max_iter);
    const double width = bc.width.value_or(default_rbf_width<double>(centers));
    RbfOptions opt;
    opt.includes_bias = bc.includes_bias;
    opt.include_window = bc.include_window;
    return rbf_basis<double>(config.t_ini, config.horizon, m, p, std::move(centers), width, opt);
  }
  BasisSet<double> layout;
  layout.t_ini = config.t_ini;
  layout.horizon = config.horizon;
  layout.inputs = m;
  layout.outputs = p;
  if (static_cast<Index>(bc.orders.size()) != m + p) {
    throw ConfigError("basis.orders", "needs one order per channel (" + std::to_string(m + p) + ")");
  }
  ChebyshevOptions opt;
  opt.includes_bias = bc.includes_bias;
  opt.include_window = bc.include_window;
  opt.max_total_degree = bc.max_total_degree;
  return chebyshev_basis<double>(config.t_ini, config.horizon, m, p, bc.orders, minmax_scaling(layout, past), opt);
}

Identification identify(const ExperimentConfig & config, const TrajectoryDataset<double> & data)
{
  Identification ident;
  ident.blocks = build_hankel(data, config.t_ini, config.horizon, config.hankel);
  ident.basis = build_basis(config, ident.blocks);
  ident.lifted = std::make_shared<const LiftedDataMatrix<double>>(
      build_phi(ident.basis, ident.blocks, config.basis.rank_tolerance));
  try {
    ident.least_squares =
        std::make_shared<const IdentifiedPredictor<double>>(fit_least_squares(*ident.lifted, ident.blocks.yf));
  } catch (const RankDeficient & e) {
    ident.least_squares_error = e.what();
  }
  return ident;
}

ControllerSpec<double> make_controller_spec(const ExperimentConfig & config, const ControllerConfig & controller,
                                            const Identification & ident)
{
  ControllerSpec<double> spec;
  spec.formulation = controller.formulation;
  spec.lambda = controller.lambda;
  spec.gamma = controller.gamma;
  spec.cost.Q = config.Q;
  spec.cost.R = config.R;
  spec.constraints = config.constraints;
  switch (controller.formulation) {
    case Formulation::RidgeDeePC: {
      // Only Phi and Yf are needed; the ridge fit avoids any rank requirement.
      FitOptions opt;
      opt.nullspace_cap = 0;
      spec.predictor = std::make_shared<const IdentifiedPredictor<double>>(
          fit_ridge(*ident.lifted, ident.blocks.yf, controller.gamma, opt));
      break;
    }
    case Formulation::KoopmanMpc:
      spec.koopman = std::make_shared<const KoopmanModel<double>>(
          fit_koopman(ident.blocks, ident.basis, config.koopman_damping));
      break;
    default:
      if (!ident.least_squares) {
        throw RankDeficient(ident.least_squares_error);
      }
      spec.predictor = ident.least_squares;
  }
  return spec;
}

Matrix<double> benchmark_reference(const ExperimentConfig & config)
{
  const Index steps = config.steps();
  const double dt = config.reference_step();
  const Vector<double> r =
      reference_sinusoid(config.simulation.frequency, static_cast<double>(steps + config.horizon) * dt, dt);
  const Index p = config.plant.outputs();
  Matrix<double> out(p, r.size());
  for (Index i = 0; i < p; ++i) out.row(i) = r.transpose();
  return out;
}

ControllerRun simulate_controller(const ExperimentConfig & config, const Identification & ident,
                                  const TrajectoryDataset<double> & data, const ControllerConfig & controller)
{
  ControllerRun run;
  run.controller = controller;
  try {
    PredictiveController<double> ctrl(make_controller_spec(config, controller, ident), config.solver,
                                      config.simulation.fallback);
    const Matrix<double> reference = benchmark_reference(config);
    const Index t_ini = config.t_ini;
    const Index m = config.plant.inputs();
    Matrix<double> warm_inputs = Matrix<double>::Zero(m, t_ini);
    if (config.simulation.warmup == WarmUp::DataTail) {
      warm_inputs = data.inputs().rightCols(t_ini);
    }
    run.log = with_plant(config, [&](auto & plant) {
      CounterRng rng(config.simulation.seed);
      const Matrix<double> warm_outputs = warm_up(plant, warm_inputs, config.simulation.noise_std, rng);
      ctrl.prime(warm_inputs, warm_outputs);
      ClosedLoopOptions opt;
      opt.noise_std = config.simulation.noise_std;
      opt.seed = config.simulation.seed;
      return run_closed_loop(plant, ctrl, reference, config.steps(), opt, &rng);
    });
    run.metrics = compute_metrics(run.log, config.Q, config.R);
  } catch (const std::exception & e) {
    run.error = e.what();
  }
  return run;
}

// ---------------------------------------------------------------------------
// Output files.

std::string sanitize_name(const std::string & name)
{
  std::string out;
  for (char ch : name) {
    const bool keep = std::isalnum(static_cast<unsigned char>(ch)) || ch == '-' || ch == '_' || ch == '.';
    out.push_back(keep ? ch : '_');
  }
  return out.empty() ? "controller" : out;
}

void write_dataset_files(const GeneratedData & data, const std::filesystem::path & out_dir)
{
  std::filesystem::create_directories(out_dir);
  write_dataset_csv(out_dir / "data.csv", data.measured);
  write_dataset_csv(out_dir / "data_clean.csv", data.clean);
}

void write_identification(const Identification & ident, const std::filesystem::path & out_dir)
{
  std::filesystem::create_directories(out_dir);
  {
    std::ofstream out(out_dir / "basis.json");
    out << basis_to_json(ident.basis).dump(2) << '\n';
  }
  write_matrix_binary(out_dir / "phi.bin", ident.lifted->phi);
  write_matrix_binary(out_dir / "yf.bin", ident.blocks.yf);
  Json doc;
  doc["phi_rows"] = ident.lifted->rows();
  doc["phi_cols"] = ident.lifted->cols();
  doc["row_rank_ok"] = ident.lifted->row_rank_ok;
  const auto & sv = ident.lifted->singular_values;
  doc["sigma_max"] = sv.size() ? sv(0) : 0.0;
  doc["sigma_min"] = sv.size() ? sv(sv.size() - 1) : 0.0;
  if (ident.least_squares) {
    save_predictor(out_dir, "predictor", *ident.least_squares);
    doc["residual_norm"] = ident.least_squares->residuals.norm();
    doc["yf_norm"] = ident.least_squares->yf.norm();
    doc["consistency_diagnostic"] = consistency_diagnostic(*ident.least_squares);
  } else {
    doc["least_squares_error"] = ident.least_squares_error;
  }
  std::ofstream out(out_dir / "identification.json");
  out << doc.dump(2) << '\n';
}

void write_trajectory_csv(const ControllerRun & run, const std::filesystem::path & path)
{
  std::ofstream out(path);
  if (!out) {
    throw Error("cannot open " + path.string() + " for writing");
  }
  const ClosedLoopLog & log = run.log;
  const Index m = log.u.rows();
  const Index p = log.y.rows();
  auto names = [](const char * base, Index n) {
    std::string s;
    for (Index i = 0; i < n; ++i) {
      s += std::string(i ? "," : "") + base + (n > 1 ? std::to_string(i + 1) : "");
    }
    return s;
  };
  out << "k,t," << names("u", m) << ',' << names("y", p) << ',' << names("r", p) << ",objective,qp_status,solve_ms\n";
  out << std::setprecision(17);
  for (Index k = 0; k < log.steps(); ++k) {
    out << k << ',' << static_cast<double>(k) * log.sample_time;
    for (Index i = 0; i < m; ++i) out << ',' << log.u(i, k);
    for (Index i = 0; i < p; ++i) out << ',' << log.y(i, k);
    for (Index i = 0; i < p; ++i) out << ',' << log.r(i, k);
    const auto kk = static_cast<std::size_t>(k);
    out << ',' << log.objective[kk] << ',' << to_string(log.status[kk]) << ',' << std::setprecision(6)
        << log.solve_seconds[kk] * 1e3 << std::setprecision(17) << '\n';
  }
}

void write_metrics(const std::vector<ControllerRun> & runs, const std::filesystem::path & out_dir)
{
  std::filesystem::create_directories(out_dir);
  Json doc = Json::array();
  std::ofstream csv(out_dir / "metrics.csv");
  csv << "controller,formulation,lambda,gamma,J_ISE,J_IAE,J_u,J_track,mean_cpu_s,steps,fallbacks,error\n";
  csv << std::setprecision(10);
  for (const auto & run : runs) {
    Json row;
    row["controller"] = run.controller.name;
    row["formulation"] = to_string(run.controller.formulation);
    row["lambda"] = run.controller.lambda;
    row["gamma"] = run.controller.gamma;
    if (run.ok()) {
      row["J_ISE"] = run.metrics.j_ise;
      row["J_IAE"] = run.metrics.j_iae;
      row["J_u"] = run.metrics.j_u;
      row["J_track"] = run.metrics.j_track;
      row["mean_cpu_s"] = run.metrics.mean_cpu;
      row["steps"] = run.metrics.steps;
      row["fallbacks"] = run.log.warnings.size();
      row["warnings"] = run.log.warnings;
    } else {
      row["error"] = run.error;
    }
    doc.push_back(row);
    csv << run.controller.name << ',' << to_string(run.controller.formulation) << ',' << run.controller.lambda << ','
        << run.controller.gamma << ',';
    if (run.ok()) {
      csv << run.metrics.j_ise << ',' << run.metrics.j_iae << ',' << run.metrics.j_u << ',' << run.metrics.j_track
          << ',' << run.metrics.mean_cpu << ',' << run.metrics.steps << ',' << run.log.warnings.size() << ",\n";
    } else {
      std::string err = run.error;
      std::replace(err.begin(), err.end(), ',', ';');
      csv << ",,,,,,," << err << '\n';
    }
  }
  std::ofstream(out_dir / "metrics.json") << doc.dump(2) << '\n';
  std::ofstream(out_dir / "metrics.txt") << format_metrics_table(runs);
}

std::string format_metrics_table(const Json & metrics)
{
  std::ostringstream os;
  os << std::left << std::setw(22) << "Formulation" << std::right << std::setw(10) << "J_ISE" << std::setw(10)
     << "J_IAE" << std::setw(10) << "J_u" << std::setw(11) << "J_track" << std::setw(12) << "CPU [s]" << '\n';
  os << std::string(75, '-') << '\n';
  for (const auto & row : metrics) {
    os << std::left << std::setw(22) << row.value("controller", std::string("?")) << std::right;
    if (row.contains("error")) {
      os << "  failed: " << row["error"].get<std::string>() << '\n';
      continue;
    }
    os << std::setw(10) << fmt(row["J_ISE"].get<double>()) << std::setw(10) << fmt(row["J_IAE"].get<double>())
       << std::setw(10) << fmt(row["J_u"].get<double>()) << std::setw(11) << fmt(row["J_track"].get<double>())
       << std::setw(12) << fmt(row["mean_cpu_s"].get<double>(), 3);
    const auto fallbacks = row.value("fallbacks", 0);
    if (fallbacks > 0) os << "  (" << fallbacks << " fallback steps)";
    os << '\n';
  }
  return os.str();
}

std::string format_metrics_table(const std::vector<ControllerRun> & runs)
{
  Json doc = Json::array();
  for (const auto & run : runs) {
    Json row;
    row["controller"] = run.controller.name;
    if (run.ok()) {
      row["J_ISE"] = run.metrics.j_ise;
      row["J_IAE"] = run.metrics.j_iae;
      row["J_u"] = run.metrics.j_u;
      row["J_track"] = run.metrics.j_track;
      row["mean_cpu_s"] = run.metrics.mean_cpu;
      row["fallbacks"] = run.log.warnings.size();
    } else {
      row["error"] = run.error;
    }
    doc.push_back(row);
  }
  return format_metrics_table(doc);
}

void write_plot_files(const std::vector<ControllerRun> & runs, const std::filesystem::path & out_dir)
{
  std::vector<const ControllerRun *> ok;
  for (const auto & run : runs) {
    if (run.ok() && run.log.steps() > 0) ok.push_back(&run);
  }
  if (ok.empty()) {
    return;
  }
  const ClosedLoopLog & first = ok.front()->log;
  std::ofstream track(out_dir / "plot_tracking.dat");
  std::ofstream input(out_dir / "plot_input.dat");
  track << "# t r";
  input << "# t";
  for (const auto * run : ok) {
    track << " y_" << sanitize_name(run->controller.name);
    input << " u_" << sanitize_name(run->controller.name);
  }
  track << '\n' << std::setprecision(10);
  input << '\n' << std::setprecision(10);
  for (Index k = 0; k < first.steps(); ++k) {
    const double t = static_cast<double>(k) * first.sample_time;
    track << t << ' ' << first.r(0, k);
    input << t;
    for (const auto * run : ok) {
      const bool has = k < run->log.steps();
      track << ' ' << (has ? run->log.y(0, k) : std::nan(""));
      input << ' ' << (has ? run->log.u(0, k) : std::nan(""));
    }
    track << '\n';
    input << '\n';
  }

  std::ofstream gp(out_dir / "plot.gp");
  gp << "# gnuplot -c plot.gp  (writes tracking.png)\n"
     << "set terminal pngcairo size 900,700\n"
     << "set output 'tracking.png'\n"
     << "set multiplot layout 2,1\n"
     << "set xlabel 't [s]'\nset ylabel 'angle [rad]'\nset key outside right\n"
     << "plot 'plot_tracking.dat' using 1:2 with lines dashtype 2 title 'reference'";
  for (std::size_t i = 0; i < ok.size(); ++i) {
    gp << ", '' using 1:" << i + 3 << " with lines title '" << ok[i]->controller.name << "'";
  }
  gp << "\nset ylabel 'torque'\nplot ";
  for (std::size_t i = 0; i < ok.size(); ++i) {
    gp << (i ? ", " : "") << "'plot_input.dat' using 1:" << i + 2 << " with steps title '" << ok[i]->controller.name
       << "'";
  }
  gp << "\nunset multiplot\n";
}

ExperimentReport run_experiment(const ExperimentConfig & config, const std::filesystem::path & out_dir,
                                std::ostream * progress)
{
  std::filesystem::create_directories(out_dir);
  const GeneratedData data = generate_data(config);
  write_dataset_files(data, out_dir);
  const Identification ident = identify(config, data.measured);
  write_identification(ident, out_dir);

  ExperimentReport report;
  if (ident.least_squares) {
    report.consistency = consistency_diagnostic(*ident.least_squares);
    report.residual_norm = ident.least_squares->residuals.norm();
    report.yf_norm = ident.least_squares->yf.norm();
  }
  for (const auto & controller : config.controllers) {
    if (progress) *progress << "running " << controller.name << " ..." << std::flush;
    ControllerRun run = simulate_controller(config, ident, data.measured, controller);
    if (run.ok()) {
      write_trajectory_csv(run, out_dir / ("traj_" + sanitize_name(controller.name) + ".csv"));
      if (progress) *progress << " J_ISE=" << fmt(run.metrics.j_ise) << '\n';
    } else if (progress) {
      *progress << " failed: " << run.error << '\n';
    }
    report.runs.push_back(std::move(run));
  }
  write_metrics(report.runs, out_dir);
  write_plot_files(report.runs, out_dir);
  return report;
}

// ---------------------------------------------------------------------------
// Verification suite.

Vector<double> open_loop_prediction(const ControllerSpec<double> & spec, const IniWindow<double> & window,
                                    const HorizonReference<double> & ref, const QpSettings & settings,
                                    Vector<double> * u_out)
{
  const QpProblem<double> qp = compile_controller(spec, window, ref);
  const QpSolution<double> sol = solve_qp(qp, settings);
  if (!sol.optimal()) {
    throw Error(std::string(to_string(spec.formulation)) + ": QP " + to_string(sol.status));
  }
  const Index ny = spec.horizon() * spec.outputs();
  if (u_out) *u_out = sol.z.segment(ny, spec.horizon() * spec.inputs());
  return sol.z.head(ny);
}

namespace {

VerificationCheck check(std::string name, double measured, double tolerance, std::string detail = {})
{
  VerificationCheck c;
  c.name = std::move(name);
  c.measured = measured;
  c.tolerance = tolerance;
  c.passed = std::isfinite(measured) && measured <= tolerance;
  c.detail = std::move(detail);
  return c;
}

HorizonReference<double> window_reference(const ExperimentConfig & config, Index offset)
{
  const Matrix<double> r = benchmark_reference(config);
  HorizonReference<double> ref;
  const Index p = config.plant.outputs();
  ref.y.resize(config.horizon * p);
  for (Index i = 0; i < config.horizon; ++i) {
    ref.y.segment(i * p, p) = r.col(std::min<Index>(offset + 1 + i, r.cols() - 1));
  }
  return ref;
}

}  // namespace

std::vector<VerificationCheck> verify_properties(const ExperimentConfig & config, std::ostream * progress)
{
  std::vector<VerificationCheck> checks;
  auto add = [&](VerificationCheck c) {
    if (progress) {
      *progress << (c.passed ? "PASS " : "FAIL ") << c.name << ": measured " << fmt(c.measured, 3) << " vs tolerance "
                << fmt(c.tolerance, 3) << (c.detail.empty() ? "" : "  (" + c.detail + ")") << '\n';
    }
    checks.push_back(std::move(c));
  };

  const GeneratedData data = generate_data(config);
  const Identification ident = identify(config, data.measured);
  if (!ident.least_squares) {
    add(check("phi_full_row_rank", 1.0, 0.0, ident.least_squares_error));
    return checks;
  }
  const auto & pred = *ident.least_squares;
  const Matrix<double> & phi = pred.phi();
  const double sigma_max = ident.lifted->singular_values(0);

  add(check("ls_orthogonality ||E Phi^T||_F", (pred.residuals * phi.transpose()).norm(),
            1e-8 * pred.yf.norm() * phi.norm()));
  if (pred.has_nullspace) {
    const double dim = static_cast<double>(pred.nullspace_basis.cols());
    add(check("nullspace_residual ||Phi N||_F", (phi * pred.nullspace_basis).norm(),
              1e-10 * sigma_max * std::sqrt(std::max(dim, 1.0))));
  }
  const double diag = consistency_diagnostic(pred);
  const double e_ratio = pred.residuals.norm() / std::max(pred.yf.norm(), 1e-300);
  if (config.plant.kind == "linear") {
    add(check("exact_representation ||E||_F/||Yf||_F", e_ratio, 1e-9));
  } else {
    VerificationCheck c = check("consistency_diagnostic (informational)", diag, std::numeric_limits<double>::infinity(),
                                diag > 1e-9 * pred.yf.norm() ? "E g != 0 on null(Phi): regularization required"
                                                             : "predictors consistent");
    add(c);
  }

  ControllerSpec<double> base;
  base.cost.Q = config.Q;
  base.cost.R = config.R;
  base.constraints = config.constraints;
  base.predictor = ident.least_squares;

  const Index T = ident.blocks.columns();
  std::vector<Index> columns = {T / 5, T / 2, (4 * T) / 5};
  double lambda = 1e4;
  for (const auto & c : config.controllers) {
    if (c.formulation == Formulation::DeePCR1 || c.formulation == Formulation::DeePCR2) {
      lambda = c.lambda;
      break;
    }
  }

  // R1 and R2 give the same prediction; SPC is their large-lambda limit.
  {
    double worst = 0.0;
    for (Index j : columns) {
      const auto window = ident.blocks.window(j);
      const auto ref = window_reference(config, j % std::max<Index>(config.steps(), 1));
      ControllerSpec<double> r1 = base;
      r1.formulation = Formulation::DeePCR1;
      r1.lambda = lambda;
      ControllerSpec<double> r2 = r1;
      r2.formulation = Formulation::DeePCR2;
      const Vector<double> y1 = open_loop_prediction(r1, window, ref, config.solver);
      const Vector<double> y2 = open_loop_prediction(r2, window, ref, config.solver);
      worst = std::max(worst, (y1 - y2).cwiseAbs().maxCoeff());
    }
    add(check("r1_equals_r2 ||y_R1 - y_R2||_inf", worst, 1e-6, "lambda=" + fmt(lambda)));
  }
  {
    const auto window = ident.blocks.window(columns[1]);
    const auto ref = window_reference(config, 0);
    ControllerSpec<double> spc = base;
    spc.formulation = Formulation::Spc;
    const Vector<double> y_spc = open_loop_prediction(spc, window, ref, config.solver);
    std::vector<double> gaps;
    for (double lam : {1e0, 1e2, 1e4, 1e6}) {
      ControllerSpec<double> r2 = base;
      r2.formulation = Formulation::DeePCR2;
      r2.lambda = lam;
      gaps.push_back((open_loop_prediction(r2, window, ref, config.solver) - y_spc).cwiseAbs().maxCoeff());
    }
    double increase = 0.0;
    for (std::size_t i = 1; i < gaps.size(); ++i) increase = std::max(increase, gaps[i] - gaps[i - 1]);
    std::string detail = "gaps";
    for (double g : gaps) detail += " " + fmt(g, 3);
    add(check("consistency_limit monotone (max increase)", increase, 1e-9, detail));
    add(check("consistency_limit gap at lambda=1e6", gaps.back(), 1e-4));
  }
  {
    double gamma = 1e-3;
    for (const auto & c : config.controllers) {
      if (c.formulation == Formulation::RidgeDeePC) {
        gamma = c.gamma;
        break;
      }
    }
    FitOptions opt;
    opt.nullspace_cap = 0;
    const auto ridge = std::make_shared<const IdentifiedPredictor<double>>(
        fit_ridge(*ident.lifted, ident.blocks.yf, gamma, opt));
    ControllerSpec<double> spec = base;
    spec.formulation = Formulation::RidgeDeePC;
    spec.gamma = gamma;
    spec.predictor = ridge;
    double worst = 0.0;
    for (Index j : columns) {
      const auto window = ident.blocks.window(j);
      Vector<double> u;
      const Vector<double> y = open_loop_prediction(spec, window, window_reference(config, j % 50), config.solver, &u);
      const Vector<double> y_ridge = predict(*ridge, ident.basis, window.u_ini, window.y_ini, u);
      worst = std::max(worst, (y - y_ridge).cwiseAbs().maxCoeff());
    }
    add(check("ridge_identity ||y - Theta^R phi_bar||_inf", worst, 1e-8, "gamma=" + fmt(gamma)));
  }

  if (config.plant.kind == "linear") {
    // Closed-loop equivalence of DeePC, SPC and Koopman MPC when E = 0.
    ExperimentConfig lc = config;
    lc.controllers = {{"spc", Formulation::Spc, 0.0, 0.0},
                      {"deepc", Formulation::DeePC, 0.0, 0.0},
                      {"koopman", Formulation::KoopmanMpc, 0.0, 0.0}};
    std::vector<ControllerRun> runs;
    for (const auto & c : lc.controllers) {
      runs.push_back(simulate_controller(lc, ident, data.measured, c));
      if (!runs.back().ok()) {
        add(check("closed_loop_" + c.name, 1.0, 0.0, runs.back().error));
        return checks;
      }
    }
    auto gap = [](const ControllerRun & a, const ControllerRun & b) {
      return std::max((a.log.u - b.log.u).cwiseAbs().maxCoeff(), (a.log.y - b.log.y).cwiseAbs().maxCoeff());
    };
    add(check("closed_loop deepc vs spc", gap(runs[1], runs[0]), 1e-6, std::to_string(lc.steps()) + " steps"));
    add(check("closed_loop koopman vs spc", gap(runs[2], runs[0]), 1e-6, std::to_string(lc.steps()) + " steps"));
  }
  return checks;
}

}  // namespace phidpc
