#include "phidpc/io.hpp"

#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

namespace phidpc {

namespace {

std::vector<std::string> split(const std::string & line)
{
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) {
    while (!cell.empty() && (cell.back() == '\r' || cell.back() == ' ')) {
      cell.pop_back();
    }
    out.push_back(cell);
  }
  return out;
}

}  // namespace

void write_dataset_csv(const std::filesystem::path & path, const TrajectoryDataset<double> & data)
{
  std::ofstream out(path);
  if (!out) {
    throw Error("cannot open " + path.string() + " for writing");
  }
  out << "t";
  for (Index i = 0; i < data.input_dim(); ++i) out << ",u" << i + 1;
  for (Index i = 0; i < data.output_dim(); ++i) out << ",y" << i + 1;
  out << '\n' << std::setprecision(17);
  for (Index k = 0; k < data.length(); ++k) {
    out << static_cast<double>(k) * data.sample_time();
    for (Index i = 0; i < data.input_dim(); ++i) out << ',' << data.inputs()(i, k);
    for (Index i = 0; i < data.output_dim(); ++i) out << ',' << data.outputs()(i, k);
    out << '\n';
  }
}

TrajectoryDataset<double> read_dataset_csv(const std::filesystem::path & path)
{
  std::ifstream in(path);
  if (!in) {
    throw InvalidArgument("cannot open dataset " + path.string());
  }
  std::string line;
  if (!std::getline(in, line)) {
    throw InvalidArgument(path.string() + ": empty file");
  }
  const auto header = split(line);
  if (header.empty() || header[0] != "t") {
    throw InvalidArgument(path.string() + ": header must start with 't'");
  }
  Index m = 0;
  Index p = 0;
  for (std::size_t c = 1; c < header.size(); ++c) {
    const std::string expected_u = "u" + std::to_string(m + 1);
    const std::string expected_y = "y" + std::to_string(p + 1);
    if (p == 0 && header[c] == expected_u) {
      ++m;
    } else if (header[c] == expected_y) {
      ++p;
    } else {
      throw InvalidArgument(path.string() + ": unexpected column '" + header[c] + "', expected t,u1..um,y1..yp");
    }
  }

  std::vector<std::vector<double>> rows;
  Index line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line == "\r") {
      continue;
    }
    const auto cells = split(line);
    if (cells.size() != header.size()) {
      throw InvalidArgument(path.string() + ":" + std::to_string(line_no) + ": expected " +
                            std::to_string(header.size()) + " fields");
    }
    std::vector<double> row;
    for (const auto & cell : cells) {
      try {
        std::size_t used = 0;
        row.push_back(std::stod(cell, &used));
        if (used != cell.size()) {
          throw std::invalid_argument(cell);
        }
      } catch (const std::exception &) {
        throw InvalidArgument(path.string() + ":" + std::to_string(line_no) + ": '" + cell + "' is not a number");
      }
    }
    rows.push_back(std::move(row));
  }
  if (rows.size() < 2) {
    throw InvalidArgument(path.string() + ": at least two samples are needed to infer the sample time");
  }

  const Index len = static_cast<Index>(rows.size());
  Matrix<double> u(m, len);
  Matrix<double> y(p, len);
  for (Index k = 0; k < len; ++k) {
    const auto & row = rows[static_cast<std::size_t>(k)];
    for (Index i = 0; i < m; ++i) u(i, k) = row[static_cast<std::size_t>(1 + i)];
    for (Index i = 0; i < p; ++i) y(i, k) = row[static_cast<std::size_t>(1 + m + i)];
  }
  const double ts = rows[1][0] - rows[0][0];
  return TrajectoryDataset<double>(std::move(u), std::move(y), ts);
}

}  // namespace phidpc
