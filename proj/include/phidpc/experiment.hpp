#pragma once

#include "phidpc/basis.hpp"
#include "phidpc/control.hpp"
#include "phidpc/plant.hpp"
#include "phidpc/qp.hpp"
#include "phidpc/regress.hpp"
#include "phidpc/serialization.hpp"
#include "phidpc/signal.hpp"

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

namespace phidpc {

/// Invalid experiment configuration; the message starts with the offending field path.
class ConfigError : public InvalidArgument
{
public:
  ConfigError(const std::string & field, const std::string & message)
      : InvalidArgument("config field '" + field + "': " + message), field_path(field)
  {}

  std::string field_path;
};

struct PlantConfig
{
  std::string kind = "pendulum";  ///< "pendulum" or "linear"
  PendulumParams pendulum;
  Matrix<double> A, B, C;
  double sample_time = 1.0;  ///< linear plant only
  Vector<double> initial_state;

  Index inputs() const { return kind == "linear" ? B.cols() : 1; }
  Index outputs() const { return kind == "linear" ? C.rows() : 1; }
  double ts() const { return kind == "linear" ? sample_time : pendulum.sample_time; }
};

struct DataConfig
{
  Index length = 1000;
  MultisineSpec multisine;  ///< period is set to `length`
  double noise_std = 0.0;
  std::uint64_t noise_seed = 0;
};

struct BasisConfig
{
  std::string kind = "rbf-gaussian";  ///< rbf-gaussian | chebyshev | identity-linear
  Index centers = 30;
  std::uint64_t kmeans_seed = 0;
  Index kmeans_max_iter = 300;
  std::optional<double> width;
  bool include_window = false;
  std::optional<bool> includes_bias;
  std::vector<int> orders;  ///< chebyshev, one per channel
  std::optional<int> max_total_degree;
  double rank_tolerance = 1e-10;
};

struct ControllerConfig
{
  std::string name;
  Formulation formulation = Formulation::Spc;
  double lambda = 0.0;
  double gamma = 0.0;
};

enum class WarmUp { ZeroInput, DataTail };

struct SimulationConfig
{
  double frequency = 1.0;
  double duration = 4.0;
  /// Time the reference advances per plant step; defaults to the plant sample time.
  std::optional<double> reference_sample_time;
  std::optional<Index> steps;
  double noise_std = 0.0;
  std::uint64_t seed = 0;
  WarmUp warmup = WarmUp::ZeroInput;
  FallbackPolicy fallback = FallbackPolicy::HoldPreviousInput;
};

struct ExperimentConfig
{
  std::string name = "experiment";
  PlantConfig plant;
  DataConfig data;
  Index horizon = 10;
  Index t_ini = 5;
  HankelOptions hankel;
  BasisConfig basis;
  Matrix<double> Q, R;
  ConstraintSpec<double> constraints;
  std::vector<ControllerConfig> controllers;
  SimulationConfig simulation;
  QpSettings solver;
  double koopman_damping = 0.0;
  std::string output_dir = "out";

  Index steps() const;
  double reference_step() const;
};

ExperimentConfig parse_config(const Json & doc);
ExperimentConfig load_config(const std::filesystem::path & path);

/// Derives every seed from one base value: multisine s, data noise s+1, k-means s+2, simulation s+3.
void override_seed(ExperimentConfig & config, std::uint64_t seed);

/// Restricts the controller list to the given names; unknown names are a ConfigError.
void select_controllers(ExperimentConfig & config, const std::vector<std::string> & names);

struct GeneratedData
{
  TrajectoryDataset<double> clean;
  TrajectoryDataset<double> measured;  ///< clean plus output noise
};

GeneratedData generate_data(const ExperimentConfig & config);

struct Identification
{
  HankelBlocks<double> blocks;
  BasisSet<double> basis;
  std::shared_ptr<const LiftedDataMatrix<double>> lifted;
  std::shared_ptr<const IdentifiedPredictor<double>> least_squares;  ///< null when Phi is rank deficient
  std::string least_squares_error;
};

BasisSet<double> build_basis(const ExperimentConfig & config, const HankelBlocks<double> & blocks);
Identification identify(const ExperimentConfig & config, const TrajectoryDataset<double> & data);

ControllerSpec<double> make_controller_spec(const ExperimentConfig & config, const ControllerConfig & controller,
                                            const Identification & ident);

/// Reference samples r(0 .. steps + N) on the configured grid, p x (steps + N + 1).
Matrix<double> benchmark_reference(const ExperimentConfig & config);

struct ControllerRun
{
  ControllerConfig controller;
  ClosedLoopLog log;
  MetricsReport metrics;
  std::string error;  ///< non-empty when the run could not be performed

  bool ok() const { return error.empty(); }
};

ControllerRun simulate_controller(const ExperimentConfig & config, const Identification & ident,
                                  const TrajectoryDataset<double> & data, const ControllerConfig & controller);

struct ExperimentReport
{
  std::vector<ControllerRun> runs;
  double consistency = 0.0;
  double residual_norm = 0.0;
  double yf_norm = 0.0;
};

/// Full pipeline; writes data, identification artifacts, trajectories, metrics and plot files into out_dir.
ExperimentReport run_experiment(const ExperimentConfig & config, const std::filesystem::path & out_dir,
                                std::ostream * progress = nullptr);

void write_dataset_files(const GeneratedData & data, const std::filesystem::path & out_dir);
/// Writes basis.json, predictor.json (+ theta binary), phi/yf binaries and identification.json.
void write_identification(const Identification & ident, const std::filesystem::path & out_dir);
void write_trajectory_csv(const ControllerRun & run, const std::filesystem::path & path);
void write_metrics(const std::vector<ControllerRun> & runs, const std::filesystem::path & out_dir);
void write_plot_files(const std::vector<ControllerRun> & runs, const std::filesystem::path & out_dir);

/// Human-readable table with the columns J_ISE, J_IAE, J_u, J_track, CPU.
std::string format_metrics_table(const std::vector<ControllerRun> & runs);
/// Re-renders the table from a metrics.json written by run_experiment.
std::string format_metrics_table(const Json & metrics);

struct VerificationCheck
{
  std::string name;
  double measured = 0.0;
  double tolerance = 0.0;
  bool passed = false;
  std::string detail;
};

/// Executes the consistency and equivalence properties on the configured instance.
std::vector<VerificationCheck> verify_properties(const ExperimentConfig & config, std::ostream * progress = nullptr);

/// Open-loop predicted y of a formulation at one window (single QP solve).
Vector<double> open_loop_prediction(const ControllerSpec<double> & spec, const IniWindow<double> & window,
                                    const HorizonReference<double> & ref, const QpSettings & settings,
                                    Vector<double> * u_out = nullptr);

std::string sanitize_name(const std::string & name);

}  // namespace phidpc
