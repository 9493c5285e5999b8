#pragma once

#include "phidpc/signal.hpp"

#include <filesystem>

namespace phidpc {

/// CSV with header `t,u1..um,y1..yp`, one row per sample, t = k * sample_time.
void write_dataset_csv(const std::filesystem::path & path, const TrajectoryDataset<double> & data);

/// Reads the format above. The sample time is taken from the first two rows of t.
TrajectoryDataset<double> read_dataset_csv(const std::filesystem::path & path);

}  // namespace phidpc
