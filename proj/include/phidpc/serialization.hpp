#pragma once

#include "phidpc/basis.hpp"
#include "phidpc/qp.hpp"
#include "phidpc/regress.hpp"

#include <json.hpp>

#include <filesystem>
#include <string>

namespace phidpc {

using Json = nlohmann::json;

/**
 * Binary matrix payload: 8-byte magic "PHIDPCM1", uint64 rows, uint64 cols (little
 * endian), then rows*cols float64 values, little endian, row-major.
 */
void write_matrix_binary(const std::filesystem::path & path, const Matrix<double> & M);
Matrix<double> read_matrix_binary(const std::filesystem::path & path);

Json basis_to_json(const BasisSet<double> & basis);
BasisSet<double> basis_from_json(const Json & doc);

const char * to_string(BasisKind kind);
const char * to_string(BasisStructure structure);
const char * to_string(FitVariant variant);

/// Predictor as stored on disk: enough to evaluate Theta * phi_bar.
struct StoredPredictor
{
  Matrix<double> theta;
  FitVariant variant = FitVariant::LeastSquares;
  double gamma = 0.0;
  BasisSet<double> basis;
};

/// Writes <dir>/<stem>.json and <dir>/<stem>_theta.bin.
void save_predictor(const std::filesystem::path & dir, const std::string & stem, const IdentifiedPredictor<double> & pred);

/// Throws InvalidArgument naming the offending file on any inconsistency.
StoredPredictor load_predictor(const std::filesystem::path & json_path);

/// Writes <dir>/<stem>.json plus one .bin file per matrix or vector.
void dump_qp(const std::filesystem::path & dir, const std::string & stem, const QpProblem<double> & qp);
QpProblem<double> load_qp(const std::filesystem::path & json_path);

}  // namespace phidpc
