#include "phidpc/serialization.hpp"

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <limits>

namespace phidpc {

namespace {

constexpr std::array<char, 8> kMagic = {'P', 'H', 'I', 'D', 'P', 'C', 'M', '1'};

void put_u64(std::ostream & out, std::uint64_t v)
{
  unsigned char bytes[8];
  for (int i = 0; i < 8; ++i) bytes[i] = static_cast<unsigned char>(v >> (8 * i));
  out.write(reinterpret_cast<const char *>(bytes), 8);
}

bool get_u64(std::istream & in, std::uint64_t & v)
{
  unsigned char bytes[8];
  if (!in.read(reinterpret_cast<char *>(bytes), 8)) {
    return false;
  }
  v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(bytes[i]) << (8 * i);
  return true;
}

Json matrix_to_json(const Matrix<double> & M)
{
  Json rows = Json::array();
  for (Index i = 0; i < M.rows(); ++i) {
    Json row = Json::array();
    for (Index j = 0; j < M.cols(); ++j) row.push_back(M(i, j));
    rows.push_back(std::move(row));
  }
  return rows;
}

Matrix<double> matrix_from_json(const Json & doc, const std::string & field)
{
  if (!doc.is_array()) {
    throw InvalidArgument(field + ": expected an array of rows");
  }
  const Index r = static_cast<Index>(doc.size());
  const Index c = r > 0 ? static_cast<Index>(doc[0].size()) : 0;
  Matrix<double> M(r, c);
  for (Index i = 0; i < r; ++i) {
    const Json & row = doc[static_cast<std::size_t>(i)];
    if (!row.is_array() || static_cast<Index>(row.size()) != c) {
      throw InvalidArgument(field + ": rows must be arrays of equal length");
    }
    for (Index j = 0; j < c; ++j) M(i, j) = row[static_cast<std::size_t>(j)].get<double>();
  }
  return M;
}

Json vector_to_json(const Vector<double> & v)
{
  Json out = Json::array();
  for (Index i = 0; i < v.size(); ++i) {
    // JSON has no infinity; bounds use null for unbounded.
    if (std::isinf(v(i))) out.push_back(nullptr);
    else out.push_back(v(i));
  }
  return out;
}

Vector<double> vector_from_json(const Json & doc, const std::string & field, double null_value)
{
  if (!doc.is_array()) {
    throw InvalidArgument(field + ": expected an array");
  }
  Vector<double> v(static_cast<Index>(doc.size()));
  for (std::size_t i = 0; i < doc.size(); ++i) {
    v(static_cast<Index>(i)) = doc[i].is_null() ? null_value : doc[i].get<double>();
  }
  return v;
}

template <typename E>
E parse_enum(const std::string & text, std::initializer_list<std::pair<const char *, E>> table, const std::string & field)
{
  std::string options;
  for (const auto & [name, value] : table) {
    if (text == name) return value;
    options += std::string(options.empty() ? "" : ", ") + name;
  }
  throw InvalidArgument(field + ": unknown value '" + text + "' (expected one of " + options + ")");
}

}  // namespace

const char * to_string(BasisKind kind)
{
  switch (kind) {
    case BasisKind::RbfGaussian: return "rbf-gaussian";
    case BasisKind::Chebyshev: return "chebyshev";
    case BasisKind::IdentityLinear: return "identity-linear";
  }
  return "unknown";
}

const char * to_string(BasisStructure structure)
{
  return structure == BasisStructure::AffineInFutureInputs ? "affine-in-future-inputs" : "general";
}

const char * to_string(FitVariant variant)
{
  return variant == FitVariant::LeastSquares ? "least-squares" : "ridge";
}

void write_matrix_binary(const std::filesystem::path & path, const Matrix<double> & M)
{
  std::ofstream out(path, std::ios::binary);
  if (!out) {
    throw Error("cannot open " + path.string() + " for writing");
  }
  out.write(kMagic.data(), kMagic.size());
  put_u64(out, static_cast<std::uint64_t>(M.rows()));
  put_u64(out, static_cast<std::uint64_t>(M.cols()));
  for (Index i = 0; i < M.rows(); ++i) {
    for (Index j = 0; j < M.cols(); ++j) put_u64(out, std::bit_cast<std::uint64_t>(M(i, j)));
  }
}

Matrix<double> read_matrix_binary(const std::filesystem::path & path)
{
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw InvalidArgument("cannot open matrix file " + path.string());
  }
  std::array<char, 8> magic{};
  std::uint64_t rows = 0;
  std::uint64_t cols = 0;
  if (!in.read(magic.data(), magic.size()) || magic != kMagic || !get_u64(in, rows) || !get_u64(in, cols)) {
    throw InvalidArgument(path.string() + ": not a matrix file (bad header)");
  }
  if (rows > (1ULL << 32) || cols > (1ULL << 32)) {
    throw InvalidArgument(path.string() + ": implausible matrix shape");
  }
  Matrix<double> M(static_cast<Index>(rows), static_cast<Index>(cols));
  for (Index i = 0; i < M.rows(); ++i) {
    for (Index j = 0; j < M.cols(); ++j) {
      std::uint64_t bits = 0;
      if (!get_u64(in, bits)) {
        throw InvalidArgument(path.string() + ": truncated matrix payload");
      }
      M(i, j) = std::bit_cast<double>(bits);
    }
  }
  if (in.peek() != std::char_traits<char>::eof()) {
    throw InvalidArgument(path.string() + ": trailing bytes after matrix payload");
  }
  return M;
}

Json basis_to_json(const BasisSet<double> & basis)
{
  Json doc;
  doc["kind"] = to_string(basis.kind);
  doc["structure"] = to_string(basis.structure);
  doc["t_ini"] = basis.t_ini;
  doc["horizon"] = basis.horizon;
  doc["inputs"] = basis.inputs;
  doc["outputs"] = basis.outputs;
  doc["includes_bias"] = basis.includes_bias;
  doc["include_window"] = basis.include_window;
  doc["size"] = basis.size();
  if (!basis.scaling.empty()) {
    doc["scaling"] = {{"offset", vector_to_json(basis.scaling.offset)}, {"scale", vector_to_json(basis.scaling.scale)}};
  }
  if (basis.kind == BasisKind::RbfGaussian) {
    doc["width"] = basis.width;
    // One row per center.
    doc["centers"] = matrix_to_json(basis.centers.transpose());
  }
  if (basis.kind == BasisKind::Chebyshev) {
    doc["orders"] = basis.channel_orders;
    doc["max_total_degree"] = basis.max_total_degree;
  }
  return doc;
}

BasisSet<double> basis_from_json(const Json & doc)
{
  try {
    const auto kind = parse_enum<BasisKind>(doc.at("kind").get<std::string>(),
                                            {{"rbf-gaussian", BasisKind::RbfGaussian},
                                             {"chebyshev", BasisKind::Chebyshev},
                                             {"identity-linear", BasisKind::IdentityLinear}},
                                            "basis.kind");
    const auto structure = parse_enum<BasisStructure>(
        doc.value("structure", std::string("affine-in-future-inputs")),
        {{"affine-in-future-inputs", BasisStructure::AffineInFutureInputs}, {"general", BasisStructure::General}},
        "basis.structure");
    const Index t_ini = doc.at("t_ini").get<Index>();
    const Index horizon = doc.at("horizon").get<Index>();
    const Index m = doc.at("inputs").get<Index>();
    const Index p = doc.at("outputs").get<Index>();
    const bool bias = doc.at("includes_bias").get<bool>();
    const bool window = doc.value("include_window", false);
    InputScaling<double> scaling;
    if (doc.contains("scaling")) {
      scaling.offset = vector_from_json(doc["scaling"].at("offset"), "basis.scaling.offset", 0.0);
      scaling.scale = vector_from_json(doc["scaling"].at("scale"), "basis.scaling.scale", 1.0);
    }

    BasisSet<double> basis;
    switch (kind) {
      case BasisKind::IdentityLinear:
        basis = identity_basis<double>(t_ini, horizon, m, p, bias);
        basis.structure = structure;
        break;
      case BasisKind::RbfGaussian: {
        RbfOptions opt;
        opt.structure = structure;
        opt.includes_bias = bias;
        opt.include_window = window;
        Matrix<double> centers = matrix_from_json(doc.at("centers"), "basis.centers").transpose();
        basis = rbf_basis<double>(t_ini, horizon, m, p, std::move(centers), doc.at("width").get<double>(), opt,
                                  std::move(scaling));
        break;
      }
      case BasisKind::Chebyshev: {
        ChebyshevOptions opt;
        opt.structure = structure;
        opt.includes_bias = bias;
        opt.include_window = window;
        opt.max_total_degree = doc.at("max_total_degree").get<int>();
        basis = chebyshev_basis<double>(t_ini, horizon, m, p, doc.at("orders").get<std::vector<int>>(),
                                        std::move(scaling), opt);
        break;
      }
    }
    if (doc.contains("size") && doc["size"].get<Index>() != basis.size()) {
      throw InvalidArgument("basis.size: stored " + std::to_string(doc["size"].get<Index>()) +
                            " does not match the reconstructed " + std::to_string(basis.size()));
    }
    return basis;
  } catch (const Json::exception & e) {
    throw InvalidArgument(std::string("basis document: ") + e.what());
  }
}

void save_predictor(const std::filesystem::path & dir, const std::string & stem, const IdentifiedPredictor<double> & pred)
{
  std::filesystem::create_directories(dir);
  const std::string theta_file = stem + "_theta.bin";
  write_matrix_binary(dir / theta_file, pred.theta);
  Json doc;
  doc["variant"] = to_string(pred.variant);
  doc["gamma"] = pred.gamma;
  doc["theta"] = {{"file", theta_file}, {"rows", pred.theta.rows()}, {"cols", pred.theta.cols()}};
  doc["basis"] = basis_to_json(pred.basis());
  doc["rank"] = pred.rank;
  doc["residual_norm"] = pred.residuals.norm();
  doc["yf_norm"] = pred.yf.norm();
  std::ofstream out(dir / (stem + ".json"));
  out << doc.dump(2) << '\n';
}

StoredPredictor load_predictor(const std::filesystem::path & json_path)
{
  const std::string name = json_path.string();
  std::ifstream in(json_path);
  if (!in) {
    throw InvalidArgument("cannot open predictor file " + name);
  }
  Json doc;
  try {
    doc = Json::parse(in);
  } catch (const Json::exception & e) {
    throw InvalidArgument(name + ": " + e.what());
  }
  StoredPredictor out;
  try {
    out.variant = parse_enum<FitVariant>(doc.at("variant").get<std::string>(),
                                         {{"least-squares", FitVariant::LeastSquares}, {"ridge", FitVariant::Ridge}},
                                         name + ": variant");
    out.gamma = doc.value("gamma", 0.0);
    out.basis = basis_from_json(doc.at("basis"));
    const auto & theta = doc.at("theta");
    const auto bin = json_path.parent_path() / theta.at("file").get<std::string>();
    out.theta = read_matrix_binary(bin);
    if (out.theta.rows() != theta.at("rows").get<Index>() || out.theta.cols() != theta.at("cols").get<Index>()) {
      throw InvalidArgument(name + ": theta shape does not match " + bin.string());
    }
  } catch (const Json::exception & e) {
    throw InvalidArgument(name + ": " + e.what());
  } catch (const InvalidArgument & e) {
    const std::string what = e.what();
    throw InvalidArgument(what.find(name) == std::string::npos ? name + ": " + what : what);
  }
  const Index expected_rows = out.basis.horizon * out.basis.outputs;
  if (out.theta.rows() != expected_rows || out.theta.cols() != out.basis.size()) {
    throw InvalidArgument(name + ": theta is " + detail::shape(out.theta.rows(), out.theta.cols()) +
                          ", basis implies " + detail::shape(expected_rows, out.basis.size()));
  }
  return out;
}

void dump_qp(const std::filesystem::path & dir, const std::string & stem, const QpProblem<double> & qp)
{
  std::filesystem::create_directories(dir);
  Json doc;
  doc["variables"] = qp.variables();
  doc["equalities"] = qp.equalities();
  doc["objective_offset"] = qp.objective_offset;
  auto put = [&](const char * key, const Matrix<double> & M) {
    const std::string file = stem + "_" + key + ".bin";
    write_matrix_binary(dir / file, M);
    doc[key] = file;
  };
  put("H", qp.H);
  put("f", qp.f);
  put("A_eq", qp.A_eq);
  put("b_eq", qp.b_eq);
  doc["lb"] = vector_to_json(qp.lb);
  doc["ub"] = vector_to_json(qp.ub);
  std::ofstream out(dir / (stem + ".json"));
  out << doc.dump(2) << '\n';
}

QpProblem<double> load_qp(const std::filesystem::path & json_path)
{
  std::ifstream in(json_path);
  if (!in) {
    throw InvalidArgument("cannot open QP dump " + json_path.string());
  }
  try {
    const Json doc = Json::parse(in);
    const auto dir = json_path.parent_path();
    QpProblem<double> qp;
    qp.H = read_matrix_binary(dir / doc.at("H").get<std::string>());
    qp.f = read_matrix_binary(dir / doc.at("f").get<std::string>());
    qp.A_eq = read_matrix_binary(dir / doc.at("A_eq").get<std::string>());
    qp.b_eq = read_matrix_binary(dir / doc.at("b_eq").get<std::string>());
    const double inf = std::numeric_limits<double>::infinity();
    qp.lb = vector_from_json(doc.at("lb"), "lb", -inf);
    qp.ub = vector_from_json(doc.at("ub"), "ub", inf);
    qp.objective_offset = doc.value("objective_offset", 0.0);
    return qp;
  } catch (const Json::exception & e) {
    throw InvalidArgument(json_path.string() + ": " + e.what());
  }
}

}  // namespace phidpc
