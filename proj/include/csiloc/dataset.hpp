#pragma once

#include <string>
#include <vector>

#include "csiloc/channel.hpp"
#include "csiloc/rng.hpp"
#include "csiloc/scenario.hpp"

namespace csiloc {

// One measurement: the channel plus the user's position relative to the base
// station (meters, global axes).
struct Sample {
  CSIMatrix csi;
  float loc_x = 0, loc_y = 0;

  Vec2 location() const { return {double(loc_x), double(loc_y)}; }
};

enum class DatasetRole { training, testing };

std::string to_string(DatasetRole r);
DatasetRole dataset_role_from_string(const std::string& s);

struct Dataset {
  ScenarioSpec scenario;
  DatasetRole role = DatasetRole::training;
  std::vector<Sample> samples;

  int nt() const { return scenario.num_antennas; }
  int nc() const { return scenario.num_subcarriers; }
  int size() const { return int(samples.size()); }
};

// Users drawn uniformly over the scenario's region; draws whose path set
// comes up empty (fully blocked) are redrawn. A sustained failure rate above
// ~50% aborts instead of looping forever.
Dataset generate_dataset(const ScenarioSpec& scenario, int count, DatasetRole role, Rng rng);

// Locations mirrored out of a training dataset, index-aligned with it.
struct NeighborIndex {
  std::vector<Vec2> points;

  static NeighborIndex build(const Dataset& d);
  int size() const { return int(points.size()); }
};

// Exact k nearest by Euclidean distance, ascending; ties broken by lower
// dataset index. Brute force: desk-scale datasets don't warrant a tree, and
// exactness keeps the oracle trivial.
std::vector<int> knn_search(const NeighborIndex& index, Vec2 query, int k);

// Per-sample list of n+1 indices: the anchor itself first, then its n
// nearest neighbors ascending.
std::vector<std::vector<int>> build_neighbor_lists(const Dataset& train, int n);

// x' = x + [c, d], c and d independent uniform draws on [-l, l].
Vec2 coarse_location(Vec2 x, double l, Rng& rng);

void save_dataset(const Dataset& d, const std::string& path);
Dataset load_dataset(const std::string& path);

// RMS over every interleaved real/imag CSI component; the canonical input
// scale for models fed from this dataset.
double csi_component_rms(const Dataset& d);

// Mean over samples of the distance to the nearest other sample.
double mean_nearest_neighbor_spacing(const Dataset& d);

}  // namespace csiloc
